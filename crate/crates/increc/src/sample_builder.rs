//! Simulate the existing multi-retrieval state with an item-to-item plus
//! popularity baseline, partition each request's targets into the retrieved
//! (RTG) and incremental (ITG) groups, and assemble training examples with
//! sampled negatives.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::event_log::{EventKind, EventLog, RequestContext};

/// Co-occurrence index: for each trigger item the `top_m` strongest
/// co-items, sorted by descending count, ties by ascending item id.
#[derive(Debug, Clone)]
pub struct I2IIndex {
    lists: HashMap<u32, Vec<(u32, u32)>>,
}

impl I2IIndex {
    pub fn neighbors(&self, item: u32) -> &[(u32, u32)] {
        self.lists.get(&item).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn n_triggers(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

/// Count unordered co-occurrences of Click/Order event pairs inside one
/// user's stream that fall within `window_ms` of each other. Self-pairs are
/// skipped; repeated pairs count once per event pair.
pub fn build_i2i_index(log: &EventLog, window_ms: i64, top_m: usize) -> I2IIndex {
    let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
    for u in 0..log.n_users() as u32 {
        let stream: Vec<(u32, i64)> = log
            .stream(u)
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Click | EventKind::Order))
            .map(|e| (e.item, e.ts))
            .collect();
        for j in 1..stream.len() {
            let (item_j, ts_j) = stream[j];
            for i in (0..j).rev() {
                let (item_i, ts_i) = stream[i];
                if ts_j - ts_i > window_ms {
                    break;
                }
                if item_i == item_j {
                    continue;
                }
                let key = if item_i < item_j {
                    (item_i, item_j)
                } else {
                    (item_j, item_i)
                };
                *counts.entry(key).or_insert(0) += 1;
            }
        }
    }

    let mut lists: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    for (&(a, b), &c) in &counts {
        lists.entry(a).or_default().push((b, c));
        lists.entry(b).or_default().push((a, c));
    }
    for list in lists.values_mut() {
        list.sort_unstable_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        list.truncate(top_m);
    }
    I2IIndex { lists }
}

/// Simulated multi-retrieval result for one request: i2i candidates scored
/// by summed co-occurrence over the behavior triggers, ranked ahead of a
/// global-popularity fill, truncated to `k_base` items.
pub fn retrieve_baseline(
    index: &I2IIndex,
    popularity: &[u32],
    ctx: &RequestContext,
    k_base: usize,
) -> HashSet<u32> {
    let mut scores: HashMap<u32, u64> = HashMap::new();
    for &(trigger, _) in &ctx.behaviors {
        for &(co_item, count) in index.neighbors(trigger) {
            *scores.entry(co_item).or_insert(0) += count as u64;
        }
    }
    let mut ranked: Vec<(u32, u64)> = scores.into_iter().collect();
    ranked.sort_unstable_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));

    let mut retrieved: HashSet<u32> = HashSet::with_capacity(k_base);
    for (item, _) in ranked {
        if retrieved.len() >= k_base {
            break;
        }
        retrieved.insert(item);
    }
    if retrieved.len() < k_base {
        let mut by_pop: Vec<u32> = (0..popularity.len() as u32).collect();
        by_pop.sort_unstable_by(|&a, &b| {
            popularity[b as usize]
                .cmp(&popularity[a as usize])
                .then(a.cmp(&b))
        });
        for item in by_pop {
            if retrieved.len() >= k_base {
                break;
            }
            retrieved.insert(item);
        }
    }
    retrieved
}

/// Per-request split of the targets against the simulated retrieved set.
#[derive(Debug, Clone)]
pub struct SamplePartition {
    pub request_idx: usize,
    /// Targets already present in the retrieved set (sorted).
    pub rtg: Vec<u32>,
    /// Targets missed by the retrieved set (sorted) — the incremental group.
    pub itg: Vec<u32>,
    pub retrieved: HashSet<u32>,
}

pub fn partition_targets(
    request_idx: usize,
    ctx: &RequestContext,
    retrieved: HashSet<u32>,
) -> SamplePartition {
    let mut rtg = Vec::new();
    let mut itg = Vec::new();
    for &t in &ctx.targets {
        if retrieved.contains(&t) {
            rtg.push(t);
        } else {
            itg.push(t);
        }
    }
    SamplePartition {
        request_idx,
        rtg,
        itg,
        retrieved,
    }
}

/// Run the baseline and partition every context.
pub fn simulate_partitions(
    contexts: &[RequestContext],
    index: &I2IIndex,
    popularity: &[u32],
    k_base: usize,
) -> Vec<SamplePartition> {
    contexts
        .iter()
        .enumerate()
        .map(|(i, ctx)| {
            partition_targets(i, ctx, retrieve_baseline(index, popularity, ctx, k_base))
        })
        .collect()
}

/// `n` distinct ids drawn uniformly from `0..pool_size` minus `exclude`.
pub fn sample_negatives(
    pool_size: usize,
    n: usize,
    exclude: &HashSet<u32>,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    let excluded_in_pool = exclude
        .iter()
        .filter(|&&x| (x as usize) < pool_size)
        .count();
    let available = pool_size - excluded_in_pool;
    if available < n {
        return Err(Error::PoolTooSmall { need: n, available });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Rejection sampling is fast while the allowed set is dense; fall back to
    // explicit enumeration when it is not.
    if available >= 2 * n && pool_size >= 64 {
        let mut out = Vec::with_capacity(n);
        let mut seen: HashSet<u32> = HashSet::with_capacity(n);
        while out.len() < n {
            let cand = rng.random_range(0..pool_size as u32);
            if exclude.contains(&cand) || !seen.insert(cand) {
                continue;
            }
            out.push(cand);
        }
        Ok(out)
    } else {
        let mut allowed: Vec<u32> = (0..pool_size as u32)
            .filter(|x| !exclude.contains(x))
            .collect();
        for k in 0..n {
            let j = rng.random_range(k..allowed.len());
            allowed.swap(k, j);
        }
        allowed.truncate(n);
        Ok(allowed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleGroup {
    Rtg,
    Itg,
    Etg,
}

impl SampleGroup {
    pub fn name(&self) -> &'static str {
        match self {
            SampleGroup::Rtg => "RTG",
            SampleGroup::Itg => "ITG",
            SampleGroup::Etg => "ETG",
        }
    }

    pub fn from_name(s: &str) -> Option<SampleGroup> {
        match s {
            "RTG" => Some(SampleGroup::Rtg),
            "ITG" => Some(SampleGroup::Itg),
            "ETG" => Some(SampleGroup::Etg),
            _ => None,
        }
    }
}

/// One positive with its group label and frozen random negatives.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub request_idx: usize,
    pub positive: u32,
    pub group: SampleGroup,
    pub negatives: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    /// Size of the simulated retrieved set per request.
    pub k_base: usize,
    /// Random negatives per example.
    pub n_neg: usize,
    /// Candidate pool size for negative sampling (the item vocabulary).
    pub pool_size: usize,
    /// When set, only requests strictly before this time yield examples.
    pub train_before: Option<i64>,
}

/// Partitions for every context plus training examples for the train-window
/// ones.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub partitions: Vec<SamplePartition>,
    pub examples: Vec<TrainingExample>,
}

/// Assemble the full training set: one RTG/ITG example per (request, target),
/// one ETG example per (request, exposed item). Negatives exclude the
/// request's targets and exposed items so tiny pools cannot produce false
/// negatives.
pub fn build_training_set(
    contexts: &[RequestContext],
    index: &I2IIndex,
    popularity: &[u32],
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    let partitions = simulate_partitions(contexts, index, popularity, cfg.k_base);
    let mut examples = Vec::new();
    for part in &partitions {
        let ctx = &contexts[part.request_idx];
        if let Some(cutoff) = cfg.train_before {
            if ctx.request_time >= cutoff {
                continue;
            }
        }
        let mut exclude: HashSet<u32> = ctx.targets.iter().copied().collect();
        exclude.extend(ctx.exposed.iter().copied());
        let groups = [
            (SampleGroup::Rtg, &part.rtg),
            (SampleGroup::Itg, &part.itg),
            (SampleGroup::Etg, &ctx.exposed),
        ];
        for (group, items) in groups {
            for &positive in items {
                let negatives = sample_negatives(cfg.pool_size, cfg.n_neg, &exclude, rng)?;
                examples.push(TrainingExample {
                    request_idx: part.request_idx,
                    positive,
                    group,
                    negatives,
                });
            }
        }
    }
    Ok(SampleSet {
        partitions,
        examples,
    })
}

/// Audit dump: `user_id \t request_time \t group \t item_id` with raw ids.
/// ETG rows carry the request's exposed items so the dump is self-contained
/// for evaluation.
pub fn write_partitions(
    w: &mut impl Write,
    log: &EventLog,
    contexts: &[RequestContext],
    partitions: &[SamplePartition],
) -> Result<()> {
    for part in partitions {
        let ctx = &contexts[part.request_idx];
        let user = log.raw_user(ctx.user);
        let t = ctx.request_time;
        let groups = [
            (SampleGroup::Rtg, &part.rtg),
            (SampleGroup::Itg, &part.itg),
            (SampleGroup::Etg, &ctx.exposed),
        ];
        for (group, items) in groups {
            for &i in items {
                writeln!(w, "{user}\t{t}\t{}\t{}", group.name(), log.raw_item(i))?;
            }
        }
    }
    Ok(())
}

/// One request's groups as read back from a partition dump (raw ids).
#[derive(Debug, Clone, Default)]
pub struct PartitionRecord {
    pub rtg: Vec<u64>,
    pub itg: Vec<u64>,
    pub etg: Vec<u64>,
}

/// Parse a partition dump back into per-user records keyed by raw user id,
/// each user's requests sorted by request time.
pub fn read_partitions(reader: impl BufRead) -> Result<HashMap<u64, Vec<(i64, PartitionRecord)>>> {
    let mut map: HashMap<u64, HashMap<i64, PartitionRecord>> = HashMap::new();
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
        let t: i64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad request time"))?;
        let group = SampleGroup::from_name(fields[2])
            .ok_or_else(|| Error::parse(lineno, format!("unknown group `{}`", fields[2])))?;
        let item: u64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad item id"))?;
        let rec = map.entry(user).or_default().entry(t).or_default();
        match group {
            SampleGroup::Rtg => rec.rtg.push(item),
            SampleGroup::Itg => rec.itg.push(item),
            SampleGroup::Etg => rec.etg.push(item),
        }
    }
    Ok(map
        .into_iter()
        .map(|(user, by_time)| {
            let mut v: Vec<(i64, PartitionRecord)> = by_time.into_iter().collect();
            v.sort_unstable_by_key(|(t, _)| *t);
            (user, v)
        })
        .collect())
}
