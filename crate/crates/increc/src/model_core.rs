//! Parameter storage, forward passes, and analytic gradients for the shared
//! item tower and the three structurally identical user towers.
//!
//! Each tower is a 2-layer MLP (`d_in -> h -> d`, ReLU on the hidden layer).
//! The user-tower input is the mean of the behavior item embeddings
//! concatenated with the profile attribute embeddings; the item-tower input
//! is the item id embedding concatenated with its feature embeddings. All
//! embedding slots share the output dimension `d`, and similarity is the raw
//! inner product of the two tower outputs.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::event_log::RequestContext;
use crate::mat::{axpy, Mat};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"INCR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The three user towers. They share one structure but never parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tower {
    Basic,
    Incremental,
    Align,
}

pub const TOWERS: [Tower; 3] = [Tower::Basic, Tower::Incremental, Tower::Align];

impl Tower {
    pub fn index(self) -> usize {
        match self {
            Tower::Basic => 0,
            Tower::Incremental => 1,
            Tower::Align => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tower::Basic => "basic",
            Tower::Incremental => "incremental",
            Tower::Align => "align",
        }
    }

    pub fn from_name(s: &str) -> Option<Tower> {
        match s {
            "basic" => Some(Tower::Basic),
            "incremental" => Some(Tower::Incremental),
            "align" => Some(Tower::Align),
            _ => None,
        }
    }
}

/// Sizes that fix every parameter shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    /// Embedding and tower output dimension.
    pub d: usize,
    /// Hidden layer width.
    pub h: usize,
    /// Item vocabulary size.
    pub n_items: usize,
    /// Vocabulary size per item feature slot (id 0 = unknown).
    pub feat_vocab: Vec<usize>,
    /// Vocabulary size per profile attribute slot (id 0 = unknown).
    pub attr_vocab: Vec<usize>,
}

impl ModelDims {
    pub fn user_input_dim(&self) -> usize {
        self.d * (1 + self.attr_vocab.len())
    }

    pub fn item_input_dim(&self) -> usize {
        self.d * (1 + self.feat_vocab.len())
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 {
            return Err(Error::Config("d and h must be positive".into()));
        }
        if self.n_items == 0 {
            return Err(Error::Config("empty item vocabulary".into()));
        }
        if self.feat_vocab.iter().any(|&v| v == 0) || self.attr_vocab.iter().any(|&v| v == 0) {
            return Err(Error::Config("zero-sized feature vocabulary".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl Mlp {
    fn zeros(d_in: usize, h: usize, d_out: usize) -> Self {
        Mlp {
            w1: Mat::zeros(h, d_in),
            b1: vec![0.0; h],
            w2: Mat::zeros(d_out, h),
            b2: vec![0.0; d_out],
        }
    }

    fn glorot(d_in: usize, h: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound1 = (6.0 / (d_in + h) as f64).sqrt();
        let bound2 = (6.0 / (h + d_out) as f64).sqrt();
        Mlp {
            w1: Mat::uniform(h, d_in, bound1, rng),
            b1: vec![0.0; h],
            w2: Mat::uniform(d_out, h, bound2, rng),
            b2: vec![0.0; d_out],
        }
    }

    /// Returns the output and the hidden activation needed for backprop.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = self.w1.matvec(x);
        for (z, &b) in hidden.iter_mut().zip(&self.b1) {
            *z = (*z + b).max(0.0);
        }
        let mut out = self.w2.matvec(&hidden);
        for (o, &b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        (out, hidden)
    }

    /// Accumulate parameter gradients for upstream `dout`; returns dx.
    fn backward(&self, x: &[f64], hidden: &[f64], dout: &[f64], grad: &mut MlpGrad) -> Vec<f64> {
        grad.w2.add_outer(dout, hidden, 1.0);
        axpy(&mut grad.b2, dout, 1.0);
        let mut dhidden = self.w2.matvec_t(dout);
        for (dz, &a) in dhidden.iter_mut().zip(hidden) {
            if a <= 0.0 {
                *dz = 0.0;
            }
        }
        grad.w1.add_outer(&dhidden, x, 1.0);
        axpy(&mut grad.b1, &dhidden, 1.0);
        self.w1.matvec_t(&dhidden)
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl MlpGrad {
    fn zeros_like(m: &Mlp) -> Self {
        MlpGrad {
            w1: Mat::zeros(m.w1.rows(), m.w1.cols()),
            b1: vec![0.0; m.b1.len()],
            w2: Mat::zeros(m.w2.rows(), m.w2.cols()),
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn merge(&mut self, other: &MlpGrad) {
        axpy(self.w1.as_mut_slice(), other.w1.as_slice(), 1.0);
        axpy(&mut self.b1, &other.b1, 1.0);
        axpy(self.w2.as_mut_slice(), other.w2.as_slice(), 1.0);
        axpy(&mut self.b2, &other.b2, 1.0);
    }
}

/// All trainable parameters. The canonical parameter order (used by
/// [`ModelParams::flatten`] and the checkpoint format) is: item embedding
/// table, item feature tables, profile attribute tables, then the item,
/// basic, incremental, and alignment towers, each as w1, b1, w2, b2.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub item_emb: Mat,
    pub feat_emb: Vec<Mat>,
    pub attr_emb: Vec<Mat>,
    pub item_tower: Mlp,
    pub user_towers: [Mlp; 3],
}

/// Seeded initialization: embeddings uniform in (-1/sqrt(d), 1/sqrt(d)),
/// MLP weights Glorot-uniform, biases zero.
pub fn init_params(dims: &ModelDims, rng: &mut impl Rng) -> Result<ModelParams> {
    dims.validate()?;
    let emb_bound = 1.0 / (dims.d as f64).sqrt();
    let item_emb = Mat::uniform(dims.n_items, dims.d, emb_bound, rng);
    let feat_emb: Vec<Mat> = dims
        .feat_vocab
        .iter()
        .map(|&v| Mat::uniform(v, dims.d, emb_bound, rng))
        .collect();
    let attr_emb: Vec<Mat> = dims
        .attr_vocab
        .iter()
        .map(|&v| Mat::uniform(v, dims.d, emb_bound, rng))
        .collect();
    let item_tower = Mlp::glorot(dims.item_input_dim(), dims.h, dims.d, rng);
    let user_towers = [
        Mlp::glorot(dims.user_input_dim(), dims.h, dims.d, rng),
        Mlp::glorot(dims.user_input_dim(), dims.h, dims.d, rng),
        Mlp::glorot(dims.user_input_dim(), dims.h, dims.d, rng),
    ];
    Ok(ModelParams {
        dims: dims.clone(),
        item_emb,
        feat_emb,
        attr_emb,
        item_tower,
        user_towers,
    })
}

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Result<ModelParams> {
        dims.validate()?;
        Ok(ModelParams {
            dims: dims.clone(),
            item_emb: Mat::zeros(dims.n_items, dims.d),
            feat_emb: dims
                .feat_vocab
                .iter()
                .map(|&v| Mat::zeros(v, dims.d))
                .collect(),
            attr_emb: dims
                .attr_vocab
                .iter()
                .map(|&v| Mat::zeros(v, dims.d))
                .collect(),
            item_tower: Mlp::zeros(dims.item_input_dim(), dims.h, dims.d),
            user_towers: [
                Mlp::zeros(dims.user_input_dim(), dims.h, dims.d),
                Mlp::zeros(dims.user_input_dim(), dims.h, dims.d),
                Mlp::zeros(dims.user_input_dim(), dims.h, dims.d),
            ],
        })
    }

    pub fn tower(&self, t: Tower) -> &Mlp {
        &self.user_towers[t.index()]
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.item_emb.as_slice()];
        out.extend(self.feat_emb.iter().map(|m| m.as_slice()));
        out.extend(self.attr_emb.iter().map(|m| m.as_slice()));
        for mlp in std::iter::once(&self.item_tower).chain(self.user_towers.iter()) {
            out.push(mlp.w1.as_slice());
            out.push(&mlp.b1);
            out.push(mlp.w2.as_slice());
            out.push(&mlp.b2);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.item_emb.as_mut_slice()];
        out.extend(self.feat_emb.iter_mut().map(|m| m.as_mut_slice()));
        out.extend(self.attr_emb.iter_mut().map(|m| m.as_mut_slice()));
        for mlp in std::iter::once(&mut self.item_tower).chain(self.user_towers.iter_mut()) {
            out.push(mlp.w1.as_mut_slice());
            out.push(&mut mlp.b1);
            out.push(mlp.w2.as_mut_slice());
            out.push(&mut mlp.b2);
        }
        out
    }

    /// All parameters in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrite all parameters from a canonical-order vector.
    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            if off + n > flat.len() {
                return Err(Error::Shape("flat vector too short".into()));
            }
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        if off != flat.len() {
            return Err(Error::Shape("flat vector too long".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Guard for loading a checkpoint into a differently-sized config.
    pub fn expect_dims(&self, d: usize, h: usize) -> Result<()> {
        if self.dims.d != d || self.dims.h != h {
            return Err(Error::Checkpoint(format!(
                "checkpoint has d={}, h={}, expected d={d}, h={h}",
                self.dims.d, self.dims.h
            )));
        }
        Ok(())
    }

    /// Versioned binary checkpoint: header (magic, version, sizes) followed
    /// by little-endian f64 blocks in canonical parameter order.
    pub fn save_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let head = [
            self.dims.d as u64,
            self.dims.h as u64,
            self.dims.n_items as u64,
            self.dims.feat_vocab.len() as u64,
            self.dims.attr_vocab.len() as u64,
        ];
        for v in head {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.dims.feat_vocab.iter().chain(self.dims.attr_vocab.iter()) {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for block in self.blocks() {
            for &v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| corrupt("truncated header"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut read_u64 = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| corrupt("truncated header"))?;
            Ok(u64::from_le_bytes(b))
        };
        let d = read_u64()? as usize;
        let h = read_u64()? as usize;
        let n_items = read_u64()? as usize;
        let n_feat = read_u64()? as usize;
        let n_attr = read_u64()? as usize;
        if n_feat > 64 || n_attr > 64 {
            return Err(corrupt("implausible slot counts"));
        }
        let mut feat_vocab = Vec::with_capacity(n_feat);
        for _ in 0..n_feat {
            feat_vocab.push(read_u64()? as usize);
        }
        let mut attr_vocab = Vec::with_capacity(n_attr);
        for _ in 0..n_attr {
            attr_vocab.push(read_u64()? as usize);
        }
        let dims = ModelDims {
            d,
            h,
            n_items,
            feat_vocab,
            attr_vocab,
        };
        dims.validate()
            .map_err(|e| Error::Checkpoint(format!("bad dims: {e}")))?;
        let mut params = ModelParams::zeros(&dims)?;
        for block in params.blocks_mut() {
            let mut buf = vec![0u8; block.len() * 8];
            r.read_exact(&mut buf)
                .map_err(|_| corrupt("truncated parameter block"))?;
            for (v, chunk) in block.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(params)
    }
}

/// Sparse-row gradients for embedding tables plus dense tower gradients,
/// allocated lazily so per-chunk buffers stay small.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub item_emb: BTreeMap<u32, Vec<f64>>,
    pub feat_emb: Vec<BTreeMap<u32, Vec<f64>>>,
    pub attr_emb: Vec<BTreeMap<u32, Vec<f64>>>,
    pub item_tower: Option<MlpGrad>,
    pub user_towers: [Option<MlpGrad>; 3],
    d: usize,
}

impl GradientBuffer {
    pub fn new(dims: &ModelDims) -> Self {
        GradientBuffer {
            item_emb: BTreeMap::new(),
            feat_emb: vec![BTreeMap::new(); dims.feat_vocab.len()],
            attr_emb: vec![BTreeMap::new(); dims.attr_vocab.len()],
            item_tower: None,
            user_towers: [None, None, None],
            d: dims.d,
        }
    }

    fn emb_row(map: &mut BTreeMap<u32, Vec<f64>>, row: u32, d: usize) -> &mut Vec<f64> {
        map.entry(row).or_insert_with(|| vec![0.0; d])
    }

    pub fn add_item_row(&mut self, row: u32, g: &[f64], scale: f64) {
        axpy(Self::emb_row(&mut self.item_emb, row, self.d), g, scale);
    }

    pub fn merge(&mut self, other: &GradientBuffer) {
        for (&row, g) in &other.item_emb {
            self.add_item_row(row, g, 1.0);
        }
        for (slot, rows) in other.feat_emb.iter().enumerate() {
            for (&row, g) in rows {
                axpy(Self::emb_row(&mut self.feat_emb[slot], row, self.d), g, 1.0);
            }
        }
        for (slot, rows) in other.attr_emb.iter().enumerate() {
            for (&row, g) in rows {
                axpy(Self::emb_row(&mut self.attr_emb[slot], row, self.d), g, 1.0);
            }
        }
        if let Some(g) = &other.item_tower {
            match &mut self.item_tower {
                Some(mine) => mine.merge(g),
                slot => *slot = Some(g.clone()),
            }
        }
        for (i, g) in other.user_towers.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.user_towers[i] {
                    Some(mine) => mine.merge(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.item_emb.is_empty()
            && self.feat_emb.iter().all(|m| m.is_empty())
            && self.attr_emb.iter().all(|m| m.is_empty())
            && self.item_tower.is_none()
            && self.user_towers.iter().all(|t| t.is_none())
    }

    pub fn is_finite(&self) -> bool {
        let emb_ok =
            |m: &BTreeMap<u32, Vec<f64>>| m.values().all(|g| g.iter().all(|v| v.is_finite()));
        let mlp_ok = |g: &MlpGrad| {
            g.w1.is_finite()
                && g.w2.is_finite()
                && g.b1.iter().all(|v| v.is_finite())
                && g.b2.iter().all(|v| v.is_finite())
        };
        emb_ok(&self.item_emb)
            && self.feat_emb.iter().all(&emb_ok)
            && self.attr_emb.iter().all(&emb_ok)
            && self.item_tower.as_ref().map_or(true, mlp_ok)
            && self.user_towers.iter().flatten().all(mlp_ok)
    }

    /// Dense canonical-order copy (zeros for untouched parameters); the
    /// finite-difference tests compare against this.
    pub fn flatten(&self, params: &ModelParams) -> Vec<f64> {
        let mut out = vec![0.0; params.n_params()];
        let mut off = 0;
        let d = self.d;
        let emb = |out: &mut Vec<f64>,
                       off: &mut usize,
                       map: &BTreeMap<u32, Vec<f64>>,
                       rows: usize| {
            for (&row, g) in map {
                let base = *off + row as usize * d;
                out[base..base + d].copy_from_slice(g);
            }
            *off += rows * d;
        };
        emb(&mut out, &mut off, &self.item_emb, params.dims.n_items);
        for (slot, m) in self.feat_emb.iter().enumerate() {
            emb(&mut out, &mut off, m, params.dims.feat_vocab[slot]);
        }
        for (slot, m) in self.attr_emb.iter().enumerate() {
            emb(&mut out, &mut off, m, params.dims.attr_vocab[slot]);
        }
        let mlp = |out: &mut Vec<f64>, off: &mut usize, g: &Option<MlpGrad>, shape: &Mlp| {
            let sizes = [
                shape.w1.as_slice().len(),
                shape.b1.len(),
                shape.w2.as_slice().len(),
                shape.b2.len(),
            ];
            if let Some(g) = g {
                let blocks: [&[f64]; 4] = [g.w1.as_slice(), &g.b1, g.w2.as_slice(), &g.b2];
                let mut o = *off;
                for (b, n) in blocks.iter().zip(sizes) {
                    out[o..o + n].copy_from_slice(b);
                    o += n;
                }
            }
            *off += sizes.iter().sum::<usize>();
        };
        mlp(&mut out, &mut off, &self.item_tower, &params.item_tower);
        for (i, tower) in params.user_towers.iter().enumerate() {
            mlp(&mut out, &mut off, &self.user_towers[i], tower);
        }
        debug_assert_eq!(off, out.len());
        out
    }
}

/// Bookkeeping from a user-tower forward pass, enough to backprop exactly.
#[derive(Debug, Clone)]
pub struct UserTape {
    pub tower: Tower,
    behavior_items: Vec<u32>,
    profile: Vec<u32>,
    x: Vec<f64>,
    hidden: Vec<f64>,
}

/// Bookkeeping from an item-tower forward pass.
#[derive(Debug, Clone)]
pub struct ItemTape {
    item: u32,
    feats: Vec<u32>,
    x: Vec<f64>,
    hidden: Vec<f64>,
}

/// `u = f_tower(profile, behaviors)`: mean-pooled behavior item embeddings
/// concatenated with profile embeddings, through the tower MLP. An empty
/// behavior sequence contributes a zero vector to the pooled slot.
pub fn user_forward(
    params: &ModelParams,
    tower: Tower,
    ctx: &RequestContext,
) -> Result<(Vec<f64>, UserTape)> {
    let dims = &params.dims;
    let d = dims.d;
    if ctx.profile.len() != dims.attr_vocab.len() {
        return Err(Error::Shape(format!(
            "profile has {} slots, model expects {}",
            ctx.profile.len(),
            dims.attr_vocab.len()
        )));
    }
    let mut x = vec![0.0; dims.user_input_dim()];
    if !ctx.behaviors.is_empty() {
        let inv = 1.0 / ctx.behaviors.len() as f64;
        for &(item, _) in &ctx.behaviors {
            if item as usize >= dims.n_items {
                return Err(Error::OutOfVocab {
                    kind: "item",
                    id: item as u64,
                    size: dims.n_items,
                });
            }
            axpy(&mut x[..d], params.item_emb.row(item as usize), inv);
        }
    }
    for (slot, &attr) in ctx.profile.iter().enumerate() {
        if attr as usize >= dims.attr_vocab[slot] {
            return Err(Error::OutOfVocab {
                kind: "attr",
                id: attr as u64,
                size: dims.attr_vocab[slot],
            });
        }
        let dst = d * (1 + slot);
        x[dst..dst + d].copy_from_slice(params.attr_emb[slot].row(attr as usize));
    }
    let (out, hidden) = params.tower(tower).forward(&x);
    let tape = UserTape {
        tower,
        behavior_items: ctx.behaviors.iter().map(|&(i, _)| i).collect(),
        profile: ctx.profile.clone(),
        x,
        hidden,
    };
    Ok((out, tape))
}

/// `v = g_item(id, features)`: id embedding concatenated with feature
/// embeddings, through the shared item tower.
pub fn item_forward(
    params: &ModelParams,
    item: u32,
    feats: &[u32],
) -> Result<(Vec<f64>, ItemTape)> {
    let dims = &params.dims;
    let d = dims.d;
    if item as usize >= dims.n_items {
        return Err(Error::OutOfVocab {
            kind: "item",
            id: item as u64,
            size: dims.n_items,
        });
    }
    if feats.len() != dims.feat_vocab.len() {
        return Err(Error::Shape(format!(
            "item has {} feature slots, model expects {}",
            feats.len(),
            dims.feat_vocab.len()
        )));
    }
    let mut x = vec![0.0; dims.item_input_dim()];
    x[..d].copy_from_slice(params.item_emb.row(item as usize));
    for (slot, &f) in feats.iter().enumerate() {
        if f as usize >= dims.feat_vocab[slot] {
            return Err(Error::OutOfVocab {
                kind: "feat",
                id: f as u64,
                size: dims.feat_vocab[slot],
            });
        }
        let dst = d * (1 + slot);
        x[dst..dst + d].copy_from_slice(params.feat_emb[slot].row(f as usize));
    }
    let (out, hidden) = params.item_tower.forward(&x);
    let tape = ItemTape {
        item,
        feats: feats.to_vec(),
        x,
        hidden,
    };
    Ok((out, tape))
}

/// Backprop `dout` through a user tower into `buf`.
pub fn user_backward(
    params: &ModelParams,
    tape: &UserTape,
    dout: &[f64],
    buf: &mut GradientBuffer,
) {
    let d = params.dims.d;
    let idx = tape.tower.index();
    let grad =
        buf.user_towers[idx].get_or_insert_with(|| MlpGrad::zeros_like(&params.user_towers[idx]));
    let dx = params.user_towers[idx].backward(&tape.x, &tape.hidden, dout, grad);
    if !tape.behavior_items.is_empty() {
        let inv = 1.0 / tape.behavior_items.len() as f64;
        for &item in &tape.behavior_items {
            buf.add_item_row(item, &dx[..d], inv);
        }
    }
    for (slot, &attr) in tape.profile.iter().enumerate() {
        let src = d * (1 + slot);
        axpy(
            GradientBuffer::emb_row(&mut buf.attr_emb[slot], attr, d),
            &dx[src..src + d],
            1.0,
        );
    }
}

/// Backprop `dout` through the shared item tower into `buf`.
pub fn item_backward(
    params: &ModelParams,
    tape: &ItemTape,
    dout: &[f64],
    buf: &mut GradientBuffer,
) {
    let d = params.dims.d;
    let grad = buf
        .item_tower
        .get_or_insert_with(|| MlpGrad::zeros_like(&params.item_tower));
    let dx = params
        .item_tower
        .backward(&tape.x, &tape.hidden, dout, grad);
    buf.add_item_row(tape.item, &dx[..d], 1.0);
    for (slot, &f) in tape.feats.iter().enumerate() {
        let src = d * (1 + slot);
        axpy(
            GradientBuffer::emb_row(&mut buf.feat_emb[slot], f, d),
            &dx[src..src + d],
            1.0,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_dims() -> ModelDims {
        ModelDims {
            d: 4,
            h: 8,
            n_items: 20,
            feat_vocab: vec![4, 4],
            attr_vocab: vec![5, 5, 5, 5],
        }
    }

    fn ctx(behaviors: Vec<u32>, profile: Vec<u32>) -> RequestContext {
        RequestContext {
            user: 0,
            request_time: 0,
            profile,
            behaviors: behaviors.into_iter().map(|i| (i, 0)).collect(),
            exposed: vec![],
            targets: vec![],
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let dims = tiny_dims();
        let a = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let c = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_dimension_is_an_error() {
        let mut dims = tiny_dims();
        dims.d = 0;
        assert!(matches!(
            init_params(&dims, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn embedding_init_respects_bound() {
        let dims = ModelDims {
            d: 64,
            h: 16,
            n_items: 1000,
            feat_vocab: vec![2, 2],
            attr_vocab: vec![2],
        };
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(p.item_emb.rows(), 1000);
        assert_eq!(p.item_emb.cols(), 64);
        // uniform(-1/sqrt(64), 1/sqrt(64)) keeps |w| < 1/8
        assert!(p.item_emb.as_slice().iter().all(|w| w.abs() < 0.125));
    }

    #[test]
    fn zero_params_propagate_zero() {
        let dims = tiny_dims();
        let p = ModelParams::zeros(&dims).unwrap();
        let (u, _) = user_forward(&p, Tower::Basic, &ctx(vec![], vec![0; 4])).unwrap();
        assert_eq!(u, vec![0.0; 4]);
        let (v, _) = item_forward(&p, 3, &[0, 0]).unwrap();
        assert_eq!(v, vec![0.0; 4]);
    }

    #[test]
    fn towers_differ_and_forward_is_pure() {
        let dims = tiny_dims();
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let c = ctx(vec![1, 2], vec![1, 0, 2, 3]);
        let (a, _) = user_forward(&p, Tower::Basic, &c).unwrap();
        let (b, _) = user_forward(&p, Tower::Incremental, &c).unwrap();
        let (a2, _) = user_forward(&p, Tower::Basic, &c).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        let (v1, _) = item_forward(&p, 7, &[1, 2]).unwrap();
        let (v2, _) = item_forward(&p, 7, &[1, 2]).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        let dims = tiny_dims();
        let p = ModelParams::zeros(&dims).unwrap();
        assert!(matches!(
            user_forward(&p, Tower::Basic, &ctx(vec![99], vec![0; 4])),
            Err(Error::OutOfVocab { .. })
        ));
        assert!(matches!(
            item_forward(&p, 99, &[0, 0]),
            Err(Error::OutOfVocab { .. })
        ));
        assert!(matches!(
            item_forward(&p, 1, &[9, 0]),
            Err(Error::OutOfVocab { .. })
        ));
    }

    #[test]
    fn hand_computed_forward() {
        // d=2, h=2, one behavior, no profile/feature slots: x = emb(item).
        let dims = ModelDims {
            d: 2,
            h: 2,
            n_items: 2,
            feat_vocab: vec![],
            attr_vocab: vec![],
        };
        let mut p = ModelParams::zeros(&dims).unwrap();
        p.item_emb.row_mut(1).copy_from_slice(&[1.0, 2.0]);
        let t = &mut p.user_towers[0];
        // hidden = relu([1 - 2 + 0.5, 0.5 - 2]) = [0, 0] -> out = b2
        t.w1.as_mut_slice().copy_from_slice(&[1.0, -1.0, 0.5, 0.0]);
        t.b1.copy_from_slice(&[0.5, -2.0]);
        t.w2.as_mut_slice().copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        t.b2.copy_from_slice(&[0.25, -0.75]);
        let (u, _) = user_forward(&p, Tower::Basic, &ctx(vec![1], vec![])).unwrap();
        assert_eq!(u, vec![0.25, -0.75]);

        // Active hidden path: z1 = [1+2+0.5, 2+0] = [3.5, 2.0].
        let t = &mut p.user_towers[0];
        t.w1.as_mut_slice().copy_from_slice(&[1.0, 1.0, 2.0, 0.0]);
        t.b1.copy_from_slice(&[0.5, 0.0]);
        t.w2.as_mut_slice().copy_from_slice(&[1.0, -1.0, 2.0, 3.0]);
        t.b2.copy_from_slice(&[0.0, 1.0]);
        let (u, _) = user_forward(&p, Tower::Basic, &ctx(vec![1], vec![])).unwrap();
        assert_eq!(u, vec![3.5 - 2.0, 2.0 * 3.5 + 3.0 * 2.0 + 1.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_buffer() {
        let dims = tiny_dims();
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = ctx(vec![1, 2, 3], vec![1, 2, 3, 4]);
        let (_, tape) = user_forward(&p, Tower::Align, &c).unwrap();
        let mut buf = GradientBuffer::new(&dims);
        user_backward(&p, &tape, &[0.0; 4], &mut buf);
        let flat = buf.flatten(&p);
        assert!(flat.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        // Scalar objective: sum of tower outputs for one user and one item.
        let dims = tiny_dims();
        let mut p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let c = ctx(vec![0, 1, 1], vec![1, 2, 3, 4]);
        let feats = [1u32, 2u32];

        let objective = |p: &ModelParams| -> f64 {
            let (u, _) = user_forward(p, Tower::Basic, &c).unwrap();
            let (v, _) = item_forward(p, 5, &feats).unwrap();
            u.iter().sum::<f64>() + v.iter().sum::<f64>()
        };

        let mut buf = GradientBuffer::new(&dims);
        let (_, ut) = user_forward(&p, Tower::Basic, &c).unwrap();
        let (_, it) = item_forward(&p, 5, &feats).unwrap();
        user_backward(&p, &ut, &[1.0; 4], &mut buf);
        item_backward(&p, &it, &[1.0; 4], &mut buf);
        let analytic = buf.flatten(&p);

        let base = p.flatten();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + eps;
            p.unflatten_into(&v).unwrap();
            let up = objective(&p);
            v[i] = base[i] - eps;
            p.unflatten_into(&v).unwrap();
            let down = objective(&p);
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dims = tiny_dims();
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        let mut buf = Vec::new();
        p.save_checkpoint(&mut buf).unwrap();
        let q = ModelParams::load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let dims = tiny_dims();
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        let mut buf = Vec::new();
        p.save_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 9);
        assert!(matches!(
            ModelParams::load_checkpoint(&mut buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let dims = tiny_dims();
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        let mut buf = Vec::new();
        p.save_checkpoint(&mut buf).unwrap();
        buf[4] = 99;
        let err = ModelParams::load_checkpoint(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn dims_guard_rejects_other_config() {
        let dims = tiny_dims();
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        assert!(p.expect_dims(4, 8).is_ok());
        assert!(p.expect_dims(32, 8).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let dims = tiny_dims();
        let p = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        let mut q = ModelParams::zeros(&dims).unwrap();
        q.unflatten_into(&p.flatten()).unwrap();
        assert_eq!(p, q);
    }
}
