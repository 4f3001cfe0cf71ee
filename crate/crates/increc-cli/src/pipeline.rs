//! The five pipeline stages plus the ablation experiment grid. Every stage
//! reads and writes one run directory (`<out>/<confighash>-s<seed>`), records
//! a manifest, and verifies the manifests of whatever it consumes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use increc::eval::{
    base_sup_inc, dedup_lists, exposure_hitrate, Aggregation, EvalReport,
};
use increc::event_log::{
    build_requests, select_eval_requests, split_time, EventLog, RequestContext,
};
use increc::losses::{AlphaMode, AlphaRange};
use increc::model_core::{user_forward, ModelDims, ModelParams, Tower};
use increc::retrieval::{
    build_item_index, read_retrieval, top_k, write_retrieval, RetrievalMode, RetrievalResult,
};
use increc::sample_builder::{
    build_i2i_index, build_training_set, read_partitions, write_partitions, SampleConfig,
};
use increc::synth::{generate, SynthConfig};
use increc::trainer::{train, AblationMode, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::manifest::{run_dir, sha256_file, RunManifest};

#[derive(Debug)]
pub enum PipelineError {
    MissingInput(PathBuf),
    Config(String),
    Chain(String),
    Lib(increc::Error),
    Io(std::io::Error),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::MissingInput(p) => write!(f, "missing input: {}", p.display()),
            PipelineError::Config(m) => write!(f, "config: {m}"),
            PipelineError::Chain(m) => write!(f, "manifest chain: {m}"),
            PipelineError::Lib(e) => write!(f, "{e}"),
            PipelineError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<increc::Error> for PipelineError {
    fn from(e: increc::Error) -> Self {
        PipelineError::Lib(e)
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e)
    }
}

impl PipelineError {
    /// Missing inputs, bad configuration, and broken hash chains are usage
    /// errors (exit 2); everything else is an internal failure (exit 1).
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingInput(_)
            | PipelineError::Config(_)
            | PipelineError::Chain(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

pub const EVENTS: &str = "events.tsv";
pub const USER_ATTRS: &str = "user_attrs.tsv";
pub const ITEM_FEATS: &str = "item_feats.tsv";
pub const TRUTH_ITEMS: &str = "truth_items.tsv";
pub const TRUTH_USERS: &str = "truth_users.tsv";
pub const PARTITIONS: &str = "partitions.tsv";

pub fn model_file(variant: &str) -> String {
    format!("model-{variant}.ckpt")
}

pub fn trainlog_file(variant: &str) -> String {
    format!("trainlog-{variant}.tsv")
}

pub fn retrieval_file(variant: &str) -> String {
    format!("retrieval-{variant}.tsv")
}

pub fn report_file(variant: &str) -> String {
    format!("report-{variant}.tsv")
}

/// One ablation-grid entry: training mode, consistency-weight mode, and the
/// tower served at retrieval time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub mode: AblationMode,
    pub alpha: AlphaMode,
    pub tower: Tower,
}

pub const VARIANTS: [Variant; 6] = [
    Variant {
        name: "tb-online",
        mode: AblationMode::TbOnline,
        alpha: AlphaMode::One,
        tower: Tower::Basic,
    },
    Variant {
        name: "tb-itg",
        mode: AblationMode::TbItg,
        alpha: AlphaMode::One,
        tower: Tower::Basic,
    },
    Variant {
        name: "tb-boost",
        mode: AblationMode::TbBoost,
        alpha: AlphaMode::One,
        tower: Tower::Basic,
    },
    Variant {
        name: "increc-na",
        mode: AblationMode::IncRecNa,
        alpha: AlphaMode::One,
        tower: Tower::Incremental,
    },
    Variant {
        name: "increc-ori",
        mode: AblationMode::Full,
        alpha: AlphaMode::Direct,
        tower: Tower::Incremental,
    },
    Variant {
        name: "increc",
        mode: AblationMode::Full,
        alpha: AlphaMode::Matched,
        tower: Tower::Incremental,
    },
];

pub fn variant_from_name(name: &str) -> Result<Variant> {
    VARIANTS
        .iter()
        .copied()
        .find(|v| v.name == name)
        .ok_or_else(|| {
            let names: Vec<&str> = VARIANTS.iter().map(|v| v.name).collect();
            PipelineError::Config(format!(
                "unknown mode `{name}` (expected one of {})",
                names.join(", ")
            ))
        })
}

/// The baseline variant whose retrieval list defines Base@K / Sup@K and the
/// deduplication set.
pub const BASE_VARIANT: &str = "tb-online";

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(PipelineError::MissingInput(path));
    }
    Ok(path)
}

struct Dataset {
    log: EventLog,
    ctxs: Vec<RequestContext>,
    split: i64,
}

fn load_dataset(cfg: &Config, dir: &Path) -> Result<Dataset> {
    let events = require(dir, EVENTS)?;
    let attrs = require(dir, USER_ATTRS)?;
    let feats = require(dir, ITEM_FEATS)?;
    let mut log = EventLog::parse(BufReader::new(fs::File::open(events)?))
        .map_err(PipelineError::Lib)?;
    log.attach_user_attrs(BufReader::new(fs::File::open(attrs)?))?;
    log.attach_item_feats(BufReader::new(fs::File::open(feats)?))?;
    let ctxs = build_requests(&log, cfg.hours_ms("data.horizon_hours")?, cfg.usize("data.max_seq")?);
    let split = split_time(&ctxs, cfg.f64("data.eval_split")?);
    Ok(Dataset { log, ctxs, split })
}

fn model_dims(cfg: &Config, log: &EventLog) -> Result<ModelDims> {
    Ok(ModelDims {
        d: cfg.usize("model.dim")?,
        h: cfg.usize("model.hidden")?,
        n_items: log.n_items(),
        feat_vocab: log.feat_vocab().to_vec(),
        attr_vocab: log.attr_vocab().to_vec(),
    })
}

fn sample_config(cfg: &Config, log: &EventLog, split: Option<i64>) -> Result<SampleConfig> {
    Ok(SampleConfig {
        k_base: cfg.usize("samples.k_base")?,
        n_neg: cfg.usize("samples.n_neg")?,
        pool_size: log.n_items(),
        train_before: split,
    })
}

fn negatives_seed(seed: u64) -> u64 {
    seed ^ 0x5a4d_504c_4553_0001
}

fn done(stage: &str, started: Instant) {
    eprintln!("[{stage}] done in {:.1}s", started.elapsed().as_secs_f64());
}

/// `synth`: generate the event log, sidecars, and ground truth.
pub fn cmd_synth(cfg: &Config, seed: u64, out: &Path) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = run_dir(out, &cfg.hash8(), seed);
    fs::create_dir_all(&dir)?;
    let synth_cfg = SynthConfig {
        n_users: cfg.usize("synth.users")?,
        n_items: cfg.usize("synth.items")?,
        n_scenarios: cfg.usize("synth.scenarios")?,
        n_clusters: cfg.usize("synth.clusters")?,
        p_cross: cfg.f64("synth.p_cross")?,
        events_per_user: cfg.usize("synth.events_per_user")?,
        horizon_ms: cfg.hours_ms("data.horizon_hours")?,
        seed,
    };
    let outp = generate(&synth_cfg)?;
    let files = [
        (EVENTS, &outp.events),
        (USER_ATTRS, &outp.user_attrs),
        (ITEM_FEATS, &outp.item_feats),
        (TRUTH_ITEMS, &outp.truth_items),
        (TRUTH_USERS, &outp.truth_users),
    ];
    for (name, content) in files {
        fs::write(dir.join(name), content)?;
    }
    let mut manifest = RunManifest::new("synth", seed, cfg.snapshot());
    for (name, _) in files {
        manifest.record_output(&dir, name)?;
    }
    manifest.write(&dir)?;
    done("synth", started);
    Ok(dir)
}

/// `build-samples`: simulate the baseline state and dump the partitions.
pub fn cmd_build_samples(cfg: &Config, seed: u64, out: &Path) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = run_dir(out, &cfg.hash8(), seed);
    for name in [EVENTS, USER_ATTRS, ITEM_FEATS] {
        require(&dir, name)?;
    }
    if dir.join(RunManifest::file_name("synth")).is_file() {
        let synth_manifest = RunManifest::load(&dir, "synth")?;
        for name in [EVENTS, USER_ATTRS, ITEM_FEATS] {
            synth_manifest.verify_output(&dir, name)?;
        }
    }
    let data = load_dataset(cfg, &dir)?;
    let index = build_i2i_index(
        &data.log,
        cfg.hours_ms("samples.i2i_window_hours")?,
        cfg.usize("samples.top_m")?,
    );
    let parts = increc::sample_builder::simulate_partitions(
        &data.ctxs,
        &index,
        data.log.popularity(),
        cfg.usize("samples.k_base")?,
    );
    let mut w = BufWriter::new(fs::File::create(dir.join(PARTITIONS))?);
    write_partitions(&mut w, &data.log, &data.ctxs, &parts)?;
    w.flush()?;

    let mut manifest = RunManifest::new("build-samples", seed, cfg.snapshot());
    for name in [EVENTS, USER_ATTRS, ITEM_FEATS] {
        manifest.record_input(&dir, name)?;
    }
    manifest.record_output(&dir, PARTITIONS)?;
    manifest.set_meta("split_time_ms", data.split);
    manifest.set_meta("n_requests", data.ctxs.len());
    manifest.set_meta("n_users", data.log.n_users());
    manifest.set_meta("n_items", data.log.n_items());
    manifest.write(&dir)?;
    done("build-samples", started);
    Ok(dir)
}

/// Chain guard shared by train/retrieve/eval: the build-samples manifest
/// must exist, its partitions dump must be intact, and the events file must
/// be the one it consumed.
fn verify_samples_chain(dir: &Path) -> Result<RunManifest> {
    require(dir, PARTITIONS)?;
    let bs = RunManifest::load(dir, "build-samples")?;
    bs.verify_output(dir, PARTITIONS)?;
    let events_now = sha256_file(&dir.join(EVENTS))?;
    match bs.input_hash(EVENTS) {
        Some(h) if h == events_now => Ok(bs),
        Some(_) => Err(PipelineError::Chain(format!(
            "`{EVENTS}` is not the file build-samples consumed"
        ))),
        None => Err(PipelineError::Chain(
            "build-samples manifest lists no events input".into(),
        )),
    }
}

fn split_from_manifest(m: &RunManifest) -> Result<i64> {
    m.meta("split_time_ms")
        .and_then(|s| s.parse::<i64>().ok())
        .ok_or_else(|| {
            PipelineError::Chain(format!("{} manifest lacks split_time_ms", m.stage))
        })
}

/// `train`: one variant on the shared samples; persists the checkpoint and
/// the per-step loss log.
pub fn cmd_train(cfg: &Config, seed: u64, out: &Path, variant: Variant) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = run_dir(out, &cfg.hash8(), seed);
    let bs = verify_samples_chain(&dir)?;
    let data = load_dataset(cfg, &dir)?;
    if split_from_manifest(&bs)? != data.split {
        return Err(PipelineError::Chain(
            "recomputed split time disagrees with build-samples".into(),
        ));
    }

    let index = build_i2i_index(
        &data.log,
        cfg.hours_ms("samples.i2i_window_hours")?,
        cfg.usize("samples.top_m")?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(negatives_seed(seed));
    let samples = build_training_set(
        &data.ctxs,
        &index,
        data.log.popularity(),
        &sample_config(cfg, &data.log, Some(data.split))?,
        &mut rng,
    )?;

    // The partitions this run derived must be byte-identical to the dump
    // the samples stage produced.
    let mut rebuilt = Vec::new();
    write_partitions(&mut rebuilt, &data.log, &data.ctxs, &samples.partitions)?;
    let rebuilt_sha = hex::encode(sha2::Digest::finalize({
        use sha2::Digest;
        let mut h = sha2::Sha256::new();
        h.update(&rebuilt);
        h
    }));
    if Some(rebuilt_sha.as_str()) != bs.output_hash(PARTITIONS) {
        return Err(PipelineError::Chain(
            "recomputed partitions disagree with the partitions dump".into(),
        ));
    }

    let dims = model_dims(cfg, &data.log)?;
    let train_cfg = TrainConfig {
        epochs: cfg.usize("train.epochs")?,
        batch_size: cfg.usize("train.batch")?,
        seed,
        lr: cfg.f64("train.lr")?,
        eps: cfg.f64("train.eps")?,
        tau: cfg.f64("train.tau")?,
        itg_boost: cfg.f64("train.itg_boost")?,
        mode: variant.mode,
        alpha_mode: variant.alpha,
        alpha_range: AlphaRange::from_name(&cfg.string("train.alpha_range")?).ok_or_else(
            || PipelineError::Config("train.alpha_range must be clamp or softplus".into()),
        )?,
        coefficients: [
            cfg.f64("train.coef_basic")?,
            cfg.f64("train.coef_inc")?,
            cfg.f64("train.coef_align")?,
        ],
    };
    let (params, report) = train(&dims, &data.ctxs, data.log.item_features(), &samples, &train_cfg)?;

    let ckpt_name = model_file(variant.name);
    let mut w = BufWriter::new(fs::File::create(dir.join(&ckpt_name))?);
    params.save_checkpoint(&mut w)?;
    w.flush()?;
    let log_name = trainlog_file(variant.name);
    let mut w = BufWriter::new(fs::File::create(dir.join(&log_name))?);
    for step in &report.steps {
        writeln!(w, "{}", step.to_tsv())?;
    }
    w.flush()?;

    let mut manifest = RunManifest::new(&format!("train-{}", variant.name), seed, cfg.snapshot());
    manifest.record_input(&dir, EVENTS)?;
    manifest.record_input(&dir, PARTITIONS)?;
    manifest.record_output(&dir, &ckpt_name)?;
    manifest.record_output(&dir, &log_name)?;
    manifest.set_meta("mode", variant.name);
    manifest.set_meta("split_time_ms", data.split);
    manifest.set_meta("n_examples", samples.examples.len());
    manifest.write(&dir)?;
    done(&format!("train {}", variant.name), started);
    Ok(dir)
}

/// `retrieve`: top-2K lists for every evaluation request with the variant's
/// serving tower (overridable for ablation retrieval).
pub fn cmd_retrieve(
    cfg: &Config,
    seed: u64,
    out: &Path,
    variant: Variant,
    tower_override: Option<Tower>,
    k_override: Option<usize>,
) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = run_dir(out, &cfg.hash8(), seed);
    let ckpt_name = model_file(variant.name);
    require(&dir, &ckpt_name)?;
    let tm = RunManifest::load(&dir, &format!("train-{}", variant.name))?;
    tm.verify_output(&dir, &ckpt_name)?;
    let events_now = sha256_file(&dir.join(EVENTS))?;
    if tm.input_hash(EVENTS) != Some(events_now.as_str()) {
        return Err(PipelineError::Chain(format!(
            "`{EVENTS}` is not the file train-{} consumed",
            variant.name
        )));
    }

    let data = load_dataset(cfg, &dir)?;
    let params =
        ModelParams::load_checkpoint(&mut BufReader::new(fs::File::open(dir.join(&ckpt_name))?))?;
    params.expect_dims(cfg.usize("model.dim")?, cfg.usize("model.hidden")?)?;

    let k = match k_override {
        Some(k) => k,
        None => cfg.usize("eval.k")?,
    };
    if k == 0 {
        return Err(PipelineError::Config("k must be positive".into()));
    }
    let list_len = 2 * k;
    if list_len > data.log.n_items() {
        return Err(PipelineError::Config(format!(
            "2K = {list_len} exceeds the catalog size {}",
            data.log.n_items()
        )));
    }
    let tower = tower_override.unwrap_or(variant.tower);

    let mut index = build_item_index(&params, data.log.item_features())?;
    let mode = if cfg.bool("retrieval.approx")? {
        index.build_approx(cfg.usize("retrieval.m")?, cfg.usize("retrieval.ef_build")?);
        RetrievalMode::Approx
    } else {
        RetrievalMode::Exact
    };

    let eval_idx = select_eval_requests(&data.ctxs, data.split);
    let results: Vec<(u64, RetrievalResult)> = eval_idx
        .par_iter()
        .map(|&i| -> increc::Result<(u64, RetrievalResult)> {
            let ctx = &data.ctxs[i];
            let (u, _) = user_forward(&params, tower, ctx)?;
            let r = top_k(&u, &index, list_len, mode)?;
            Ok((data.log.raw_user(ctx.user), r))
        })
        .collect::<increc::Result<Vec<_>>>()?;

    let dump_name = retrieval_file(variant.name);
    let mut w = BufWriter::new(fs::File::create(dir.join(&dump_name))?);
    let rows: Vec<(u64, &RetrievalResult)> = results.iter().map(|(u, r)| (*u, r)).collect();
    write_retrieval(&mut w, &rows, |i| data.log.raw_item(i))?;
    w.flush()?;

    let mut manifest =
        RunManifest::new(&format!("retrieve-{}", variant.name), seed, cfg.snapshot());
    manifest.record_input(&dir, EVENTS)?;
    manifest.record_input(&dir, &ckpt_name)?;
    manifest.record_output(&dir, &dump_name)?;
    manifest.set_meta("tower", tower.name());
    manifest.set_meta("k", k);
    manifest.set_meta("list_len", list_len);
    manifest.set_meta("split_time_ms", data.split);
    manifest.set_meta("n_eval_requests", results.len());
    manifest.write(&dir)?;
    done(&format!("retrieve {}", variant.name), started);
    Ok(dir)
}

/// `eval`: score one variant's dump against the base variant's dump and the
/// sample partitions. Refuses dumps whose manifest chain does not match.
pub fn cmd_eval(
    cfg: &Config,
    seed: u64,
    out: &Path,
    variant: Variant,
    k_override: Option<usize>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let dir = run_dir(out, &cfg.hash8(), seed);
    let bs = verify_samples_chain(&dir)?;
    let split = split_from_manifest(&bs)?;
    let events_sha = bs.input_hash(EVENTS).unwrap_or_default().to_string();

    let load_dump = |name: &str, stage: &str| -> Result<Vec<(u64, Vec<u64>)>> {
        let path = require(&dir, name)?;
        let m = RunManifest::load(&dir, stage)?;
        m.verify_output(&dir, name)?;
        if m.input_hash(EVENTS) != Some(events_sha.as_str()) {
            return Err(PipelineError::Chain(format!(
                "{stage} ran against different events than build-samples"
            )));
        }
        if split_from_manifest(&m)? != split {
            return Err(PipelineError::Chain(format!(
                "{stage} used a different split time than build-samples"
            )));
        }
        Ok(read_retrieval(BufReader::new(fs::File::open(path)?))?)
    };

    let enhanced = load_dump(
        &retrieval_file(variant.name),
        &format!("retrieve-{}", variant.name),
    )?;
    let base = if variant.name == BASE_VARIANT {
        enhanced.clone()
    } else {
        load_dump(
            &retrieval_file(BASE_VARIANT),
            &format!("retrieve-{BASE_VARIANT}"),
        )?
    };
    let base_by_user: HashMap<u64, &Vec<u64>> = base.iter().map(|(u, l)| (*u, l)).collect();

    let partitions = read_partitions(BufReader::new(fs::File::open(dir.join(PARTITIONS))?))?;
    let k = match k_override {
        Some(k) => k,
        None => cfg.usize("eval.k")?,
    };
    let agg = Aggregation::from_name(&cfg.string("eval.aggregation")?)
        .ok_or_else(|| PipelineError::Config("eval.aggregation must be mean or sum".into()))?;

    let mut base_lists = Vec::with_capacity(enhanced.len());
    let mut enhanced_lists = Vec::with_capacity(enhanced.len());
    let mut itgs = Vec::with_capacity(enhanced.len());
    let mut exposed = Vec::with_capacity(enhanced.len());
    for (user, list) in &enhanced {
        let base_list = base_by_user.get(user).ok_or_else(|| {
            PipelineError::Chain(format!("user {user} missing from the base dump"))
        })?;
        let recs = partitions.get(user).ok_or_else(|| {
            PipelineError::Chain(format!("user {user} missing from {PARTITIONS}"))
        })?;
        let rec = recs
            .iter()
            .find(|(t, _)| *t >= split)
            .map(|(_, r)| r)
            .ok_or_else(|| {
                PipelineError::Chain(format!("user {user} has no evaluation request"))
            })?;
        base_lists.push((*base_list).clone());
        enhanced_lists.push(list.clone());
        itgs.push(rec.itg.iter().copied().collect::<HashSet<u64>>());
        exposed.push(rec.etg.iter().copied().collect::<HashSet<u64>>());
    }

    let bsi = base_sup_inc(&base_lists, &enhanced_lists, &itgs, k, agg)?;
    let deduped = dedup_lists(&base_lists, &enhanced_lists, k)?;
    let (exp_rate, exp_n) = exposure_hitrate(&deduped, &exposed, k)?;

    let mut report = EvalReport::new(agg);
    report.push("base_at_k", k, bsi.base_at_k, bsi.n_requests);
    report.push("sup_at_k", k, bsi.sup_at_k, bsi.n_requests);
    report.push("inc_at_k", k, bsi.inc_at_k, bsi.n_requests);
    report.push("exposure_inc_at_k", k, exp_rate, exp_n);

    let rep_name = report_file(variant.name);
    fs::write(dir.join(&rep_name), report.to_tsv())?;
    println!("== {} @ seed {seed} ==", variant.name);
    print!("{}", report.render_table());

    let mut manifest = RunManifest::new(&format!("eval-{}", variant.name), seed, cfg.snapshot());
    manifest.record_input(&dir, PARTITIONS)?;
    manifest.record_input(&dir, &retrieval_file(variant.name))?;
    if variant.name != BASE_VARIANT {
        manifest.record_input(&dir, &retrieval_file(BASE_VARIANT))?;
    }
    manifest.record_output(&dir, &rep_name)?;
    manifest.set_meta("k", k);
    manifest.set_meta("aggregation", agg.name());
    manifest.set_meta("base_variant", BASE_VARIANT);
    manifest.write(&dir)?;
    done(&format!("eval {}", variant.name), started);
    Ok(report)
}

/// One grid cell: a metric value for (seed, variant).
#[derive(Debug, Clone)]
pub struct GridRow {
    pub scope: String,
    pub seed: u64,
    pub variant: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub n: usize,
}

pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub grid_dir: PathBuf,
}

impl GridOutcome {
    pub fn median(&self, variant: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.scope == "median" && r.variant == variant && r.metric == metric)
            .map(|r| r.value)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `experiment`: train, retrieve, and evaluate every variant on identical
/// samples for `n_seeds` consecutive seeds; emits the combined grid with
/// per-seed rows and per-variant medians.
pub fn cmd_experiment(
    cfg: &Config,
    seed: u64,
    out: &Path,
    n_seeds: usize,
    k_override: Option<usize>,
) -> Result<GridOutcome> {
    let started = Instant::now();
    if n_seeds == 0 {
        return Err(PipelineError::Config("need at least one seed".into()));
    }
    let k = match k_override {
        Some(k) => k,
        None => cfg.usize("eval.k")?,
    };

    let mut rows: Vec<GridRow> = Vec::new();
    for s in seed..seed + n_seeds as u64 {
        cmd_synth(cfg, s, out)?;
        cmd_build_samples(cfg, s, out)?;
        for variant in VARIANTS {
            cmd_train(cfg, s, out, variant)?;
            cmd_retrieve(cfg, s, out, variant, None, Some(k))?;
            let report = cmd_eval(cfg, s, out, variant, Some(k))?;
            for row in &report.rows {
                rows.push(GridRow {
                    scope: "seed".into(),
                    seed: s,
                    variant: variant.name.into(),
                    metric: row.metric.clone(),
                    k: row.k,
                    value: row.value,
                    n: row.n,
                });
            }
        }
    }

    for variant in VARIANTS {
        for metric in ["base_at_k", "sup_at_k", "inc_at_k", "exposure_inc_at_k"] {
            let mut values: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant.name && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let n = values.len();
            rows.push(GridRow {
                scope: "median".into(),
                seed,
                variant: variant.name.into(),
                metric: metric.into(),
                k,
                value: median(&mut values),
                n,
            });
        }
    }

    let grid_dir = out.join(format!("{}-s{seed}-grid-n{n_seeds}", cfg.hash8()));
    fs::create_dir_all(&grid_dir)?;
    let mut w = BufWriter::new(fs::File::create(grid_dir.join("grid.tsv"))?);
    for r in &rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.scope, r.seed, r.variant, r.metric, r.k, r.value, r.n
        )?;
    }
    w.flush()?;
    let mut manifest = RunManifest::new("experiment", seed, cfg.snapshot());
    manifest.record_output(&grid_dir, "grid.tsv")?;
    manifest.set_meta("n_seeds", n_seeds);
    manifest.set_meta("k", k);
    manifest.write(&grid_dir)?;

    let outcome = GridOutcome { rows, grid_dir };
    print!("{}", render_grid(&outcome, k, n_seeds));
    done("experiment", started);
    Ok(outcome)
}

pub fn render_grid(outcome: &GridOutcome, k: usize, n_seeds: usize) -> String {
    let mut out = format!(
        "\n== ablation grid: medians over {n_seeds} seed(s), K = {k} ==\n\
         {:<12} {:>12} {:>12} {:>12} {:>16}\n",
        "variant",
        format!("Base@{k}"),
        format!("Sup@{k}"),
        format!("Inc@{k}"),
        format!("ExposureHit@{k}"),
    );
    for v in VARIANTS {
        let get = |m: &str| outcome.median(v.name, m).unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{:<12} {:>12.6} {:>12.6} {:>12.6} {:>16.6}\n",
            v.name,
            get("base_at_k"),
            get("sup_at_k"),
            get("inc_at_k"),
            get("exposure_inc_at_k"),
        ));
    }
    out
}
