//! Inner-product top-K retrieval over item-tower vectors: exact partial
//! selection by default, with an optional small-world graph for approximate
//! search. Exact mode is the test oracle; results order by descending score
//! with ties broken by ascending item id and never contain duplicates.

use std::collections::{BinaryHeap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::model_core::{item_forward, ModelParams};

/// Item vectors for the whole catalog, row `i` = item `i`.
#[derive(Debug, Clone)]
pub struct ItemIndex {
    pub vectors: Mat,
    approx: Option<NswGraph>,
}

/// Infer one vector per catalog item with the item tower.
pub fn build_item_index(params: &ModelParams, feats: &[Vec<u32>]) -> Result<ItemIndex> {
    let v = params.dims.n_items;
    let d = params.dims.d;
    let rows: Vec<Vec<f64>> = (0..v as u32)
        .into_par_iter()
        .map(|i| item_forward(params, i, &feats[i as usize]).map(|(vec, _)| vec))
        .collect::<Result<Vec<_>>>()?;
    let mut vectors = Mat::zeros(v, d);
    for (i, row) in rows.iter().enumerate() {
        vectors.row_mut(i).copy_from_slice(row);
    }
    if !vectors.is_finite() {
        return Err(Error::NonFinite("item index"));
    }
    Ok(ItemIndex {
        vectors,
        approx: None,
    })
}

impl ItemIndex {
    pub fn from_vectors(vectors: Mat) -> ItemIndex {
        ItemIndex {
            vectors,
            approx: None,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn has_approx(&self) -> bool {
        self.approx.is_some()
    }

    /// Build the approximate search graph (`m` links per node).
    pub fn build_approx(&mut self, m: usize, ef_build: usize) {
        self.approx = Some(NswGraph::build(&self.vectors, m, ef_build));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    Exact,
    Approx,
}

/// Ranked retrieval output.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// `(item, score)` sorted by descending score, ties by ascending id.
    pub items: Vec<(u32, f64)>,
    pub approximate: bool,
}

fn better(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-K items by inner product with `user`.
pub fn top_k(
    user: &[f64],
    index: &ItemIndex,
    k: usize,
    mode: RetrievalMode,
) -> Result<RetrievalResult> {
    let v = index.len();
    if k > v {
        return Err(Error::KTooLarge { k, v });
    }
    match mode {
        RetrievalMode::Exact => {
            let mut scored: Vec<(f64, u32)> = (0..v as u32)
                .map(|i| (dot(index.vectors.row(i as usize), user), i))
                .collect();
            if k > 0 && k < v {
                scored.select_nth_unstable_by(k - 1, better);
                scored.truncate(k);
            }
            scored.sort_unstable_by(better);
            scored.truncate(k);
            Ok(RetrievalResult {
                items: scored.into_iter().map(|(s, i)| (i, s)).collect(),
                approximate: false,
            })
        }
        RetrievalMode::Approx => {
            let graph = index
                .approx
                .as_ref()
                .ok_or_else(|| Error::Retrieval("approximate index not built".into()))?;
            let mut found = graph.search(&index.vectors, user, k.max(graph.ef_search));
            found.sort_unstable_by(better);
            found.truncate(k);
            Ok(RetrievalResult {
                items: found.into_iter().map(|(s, i)| (i, s)).collect(),
                approximate: true,
            })
        }
    }
}

/// Single-layer navigable-small-world graph searched greedily by inner
/// product from a high-norm entry point.
#[derive(Debug, Clone)]
pub struct NswGraph {
    neighbors: Vec<Vec<u32>>,
    entry: u32,
    ef_search: usize,
}

#[derive(PartialEq)]
struct Scored(f64, u32);

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl NswGraph {
    pub fn build(vectors: &Mat, m: usize, ef_build: usize) -> NswGraph {
        let v = vectors.rows();
        let mut graph = NswGraph {
            neighbors: vec![Vec::new(); v],
            entry: 0,
            ef_search: 4 * ef_build.max(1),
        };
        if v == 0 {
            return graph;
        }
        let norm = |i: usize| dot(vectors.row(i), vectors.row(i));
        let mut best_norm = norm(0);
        let m_max = 2 * m;
        for i in 1..v {
            let q = vectors.row(i);
            let mut found = graph.search_nodes(vectors, q, ef_build, i);
            found.sort_unstable_by(better);
            found.truncate(m);
            for &(_, j) in &found {
                graph.neighbors[i].push(j);
                graph.neighbors[j as usize].push(i as u32);
                if graph.neighbors[j as usize].len() > m_max {
                    graph.prune(vectors, j as usize, m_max);
                }
            }
            let n = norm(i);
            if n > best_norm {
                best_norm = n;
                graph.entry = i as u32;
            }
        }
        graph
    }

    fn prune(&mut self, vectors: &Mat, node: usize, m_max: usize) {
        let base = vectors.row(node);
        let mut scored: Vec<(f64, u32)> = self.neighbors[node]
            .iter()
            .map(|&j| (dot(base, vectors.row(j as usize)), j))
            .collect();
        scored.sort_unstable_by(better);
        scored.truncate(m_max);
        self.neighbors[node] = scored.into_iter().map(|(_, j)| j).collect();
    }

    fn search_nodes(
        &self,
        vectors: &Mat,
        q: &[f64],
        ef: usize,
        node_limit: usize,
    ) -> Vec<(f64, u32)> {
        let start = if (self.entry as usize) < node_limit {
            self.entry
        } else {
            0
        };
        let mut visited: HashSet<u32> = HashSet::new();
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new(); // best first
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new(); // worst first
        let seed_score = dot(vectors.row(start as usize), q);
        visited.insert(start);
        candidates.push(Scored(seed_score, start));
        results.push(std::cmp::Reverse(Scored(seed_score, start)));

        while let Some(Scored(score, node)) = candidates.pop() {
            let worst = results.peek().map(|r| r.0 .0).unwrap_or(f64::NEG_INFINITY);
            if results.len() >= ef && score < worst {
                break;
            }
            for &next in &self.neighbors[node as usize] {
                if next as usize >= node_limit || !visited.insert(next) {
                    continue;
                }
                let s = dot(vectors.row(next as usize), q);
                let worst = results.peek().map(|r| r.0 .0).unwrap_or(f64::NEG_INFINITY);
                if results.len() < ef || s > worst {
                    candidates.push(Scored(s, next));
                    results.push(std::cmp::Reverse(Scored(s, next)));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_iter().map(|r| (r.0 .0, r.0 .1)).collect()
    }

    pub fn search(&self, vectors: &Mat, q: &[f64], ef: usize) -> Vec<(f64, u32)> {
        self.search_nodes(vectors, q, ef, vectors.rows())
    }
}

/// Dump lines `user_id \t rank \t item_id \t score` (rank 1-based, raw ids).
pub fn write_retrieval(
    w: &mut impl Write,
    rows: &[(u64, &RetrievalResult)],
    raw_item: impl Fn(u32) -> u64,
) -> Result<()> {
    for (user, result) in rows {
        for (rank, &(item, score)) in result.items.iter().enumerate() {
            writeln!(w, "{user}\t{}\t{}\t{score}", rank + 1, raw_item(item))?;
        }
    }
    Ok(())
}

/// Read a dump back: per-user ranked item lists (raw ids), users in file order.
pub fn read_retrieval(reader: impl BufRead) -> Result<Vec<(u64, Vec<u64>)>> {
    let mut out: Vec<(u64, Vec<u64>)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(lineno, "expected 4 tab-separated fields"));
        }
        let user: u64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad user id"))?;
        let rank: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad rank"))?;
        let item: u64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad item id"))?;
        match out.last_mut() {
            Some((u, items)) if *u == user => {
                if rank != items.len() + 1 {
                    return Err(Error::parse(lineno, "ranks not contiguous"));
                }
                items.push(item);
            }
            _ => {
                if rank != 1 {
                    return Err(Error::parse(lineno, "user block must start at rank 1"));
                }
                out.push((user, vec![item]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_core::{init_params, ModelDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(v: usize, d: usize, seed: u64) -> ItemIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(v, d);
        for x in m.as_mut_slice() {
            *x = rng.random_range(-1.0..1.0);
        }
        ItemIndex::from_vectors(m)
    }

    fn brute_force(user: &[f64], index: &ItemIndex, k: usize) -> Vec<(u32, f64)> {
        let mut all: Vec<(f64, u32)> = (0..index.len() as u32)
            .map(|i| (dot(index.vectors.row(i as usize), user), i))
            .collect();
        all.sort_by(better);
        all.into_iter().take(k).map(|(s, i)| (i, s)).collect()
    }

    #[test]
    fn index_rows_come_from_the_item_tower() {
        let dims = ModelDims {
            d: 4,
            h: 8,
            n_items: 6,
            feat_vocab: vec![3, 3],
            attr_vocab: vec![2],
        };
        let params = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let feats: Vec<Vec<u32>> = (0..6u32).map(|i| vec![i % 3, (i + 1) % 3]).collect();
        let index = build_item_index(&params, &feats).unwrap();
        assert_eq!(index.len(), 6);
        for i in 0..6u32 {
            let (v, _) = crate::model_core::item_forward(&params, i, &feats[i as usize]).unwrap();
            assert_eq!(index.vectors.row(i as usize), v.as_slice());
        }
        let again = build_item_index(&params, &feats).unwrap();
        assert_eq!(again.vectors.as_slice(), index.vectors.as_slice());
    }

    #[test]
    fn single_item_catalog() {
        let index = random_index(1, 3, 2);
        let r = top_k(&[1.0, 0.0, 0.0], &index, 1, RetrievalMode::Exact).unwrap();
        assert_eq!(r.items.len(), 1);
        assert_eq!(r.items[0].0, 0);
    }

    #[test]
    fn k_equals_v_is_a_full_sort() {
        let index = random_index(50, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let user: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = top_k(&user, &index, 50, RetrievalMode::Exact).unwrap();
        assert_eq!(r.items, brute_force(&user, &index, 50));
        for w in r.items.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn zero_user_vector_returns_first_ids() {
        let index = random_index(20, 4, 5);
        let r = top_k(&[0.0; 4], &index, 5, RetrievalMode::Exact).unwrap();
        let ids: Vec<u32> = r.items.iter().map(|&(i, _)| i).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(r.items.iter().all(|&(_, s)| s == 0.0));
    }

    #[test]
    fn five_item_hand_check() {
        let mut m = Mat::zeros(5, 2);
        m.as_mut_slice()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.5, 0.5, 2.0, -1.0]);
        let index = ItemIndex::from_vectors(m);
        let user = [1.0, 1.0];
        // scores: 1, 1, -1, 1, 1 -> all ties at 1 except item 2.
        let r = top_k(&user, &index, 5, RetrievalMode::Exact).unwrap();
        let ids: Vec<u32> = r.items.iter().map(|&(i, _)| i).collect();
        assert_eq!(ids, vec![0, 1, 3, 4, 2]);
        assert_eq!(r.items, brute_force(&user, &index, 5));
    }

    #[test]
    fn k_too_large_is_an_error() {
        let index = random_index(5, 2, 6);
        assert!(matches!(
            top_k(&[1.0, 0.0], &index, 6, RetrievalMode::Exact),
            Err(Error::KTooLarge { k: 6, v: 5 })
        ));
    }

    #[test]
    fn exact_matches_brute_force_for_all_k() {
        let index = random_index(80, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..25 {
            let user: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            for k in [0usize, 1, 2, 7, 40, 80] {
                let r = top_k(&user, &index, k, RetrievalMode::Exact).unwrap();
                assert_eq!(r.items, brute_force(&user, &index, k));
                let ids: HashSet<u32> = r.items.iter().map(|&(i, _)| i).collect();
                assert_eq!(ids.len(), r.items.len());
            }
        }
    }

    #[test]
    fn approx_mode_requires_a_graph_and_recalls_well() {
        let mut index = random_index(400, 16, 9);
        assert!(matches!(
            top_k(&[0.0; 16], &index, 10, RetrievalMode::Approx),
            Err(Error::Retrieval(_))
        ));
        index.build_approx(12, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut hit = 0usize;
        let mut total = 0usize;
        for _ in 0..30 {
            let user: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exact: HashSet<u32> = top_k(&user, &index, 10, RetrievalMode::Exact)
                .unwrap()
                .items
                .iter()
                .map(|&(i, _)| i)
                .collect();
            let approx = top_k(&user, &index, 10, RetrievalMode::Approx).unwrap();
            assert!(approx.approximate);
            hit += approx.items.iter().filter(|&&(i, _)| exact.contains(&i)).count();
            total += 10;
        }
        let recall = hit as f64 / total as f64;
        assert!(recall >= 0.9, "recall {recall}");
    }

    #[test]
    fn dump_round_trip() {
        let index = random_index(10, 3, 11);
        let r1 = top_k(&[1.0, 0.5, -0.25], &index, 4, RetrievalMode::Exact).unwrap();
        let r2 = top_k(&[-1.0, 0.5, 0.25], &index, 4, RetrievalMode::Exact).unwrap();
        let mut buf = Vec::new();
        write_retrieval(&mut buf, &[(101, &r1), (202, &r2)], |i| 1000 + i as u64).unwrap();
        let back = read_retrieval(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, 101);
        assert_eq!(back[0].1.len(), 4);
        assert_eq!(back[0].1[0], 1000 + r1.items[0].0 as u64);
        assert_eq!(back[1].0, 202);
    }
}
