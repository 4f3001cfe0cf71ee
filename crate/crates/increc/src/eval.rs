//! Offline metrics: incremental hitrate, the Base/Sup/Inc@K protocol, and
//! exposure hitrate.
//!
//! All order metrics are scored against each request's ITG set. Base@K uses
//! the base model's ranks `[0, K)`, Sup@K its ranks `[K, 2K)`, and Inc@K the
//! enhanced model's list after removing anything in the base top-K, keeping
//! the first K survivors. Requests with an empty ITG are excluded from the
//! order-hitrate denominator; requests with an empty exposed set are
//! excluded from exposure hitrate.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How per-request ratios combine: the bounded mean over qualifying
/// requests (default) or their literal sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Sum,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
        }
    }

    pub fn from_name(s: &str) -> Option<Aggregation> {
        match s {
            "mean" => Some(Aggregation::Mean),
            "sum" => Some(Aggregation::Sum),
            _ => None,
        }
    }

    fn combine(self, ratios: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => {
                if ratios.is_empty() {
                    0.0
                } else {
                    ratios.iter().sum::<f64>() / ratios.len() as f64
                }
            }
            Aggregation::Sum => ratios.iter().sum(),
        }
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Eval("K must be positive".into()));
    }
    Ok(())
}

/// Incremental hitrate: per qualifying request `|top-K ∩ ITG| / |ITG|`,
/// aggregated. Returns the rate and the number of qualifying requests.
pub fn hitrate_inc(
    lists: &[Vec<u64>],
    itgs: &[HashSet<u64>],
    k: usize,
    agg: Aggregation,
) -> Result<(f64, usize)> {
    check_k(k)?;
    assert_eq!(lists.len(), itgs.len());
    let ratios: Vec<f64> = lists
        .iter()
        .zip(itgs)
        .filter(|(_, itg)| !itg.is_empty())
        .map(|(list, itg)| {
            let hits = list.iter().take(k).filter(|i| itg.contains(i)).count();
            hits as f64 / itg.len() as f64
        })
        .collect();
    Ok((agg.combine(&ratios), ratios.len()))
}

/// Remove the base model's top-K from the enhanced list and keep the first
/// K survivors.
pub fn dedup_list(enhanced: &[u64], base_top_k: &HashSet<u64>, k: usize) -> Result<Vec<u64>> {
    let out: Vec<u64> = enhanced
        .iter()
        .filter(|i| !base_top_k.contains(i))
        .take(k)
        .copied()
        .collect();
    if out.len() < k {
        return Err(Error::Eval(format!(
            "enhanced list leaves only {} of {k} items after deduplication",
            out.len()
        )));
    }
    Ok(out)
}

/// Per-request deduplicated incremental lists for a whole run.
pub fn dedup_lists(
    base: &[Vec<u64>],
    enhanced: &[Vec<u64>],
    k: usize,
) -> Result<Vec<Vec<u64>>> {
    check_k(k)?;
    assert_eq!(base.len(), enhanced.len());
    base.iter()
        .zip(enhanced)
        .map(|(b, e)| {
            if b.len() < 2 * k {
                return Err(Error::Eval(format!(
                    "base list has {} items, need 2K = {}",
                    b.len(),
                    2 * k
                )));
            }
            let top: HashSet<u64> = b[..k].iter().copied().collect();
            dedup_list(e, &top, k)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct BaseSupInc {
    pub base_at_k: f64,
    pub sup_at_k: f64,
    pub inc_at_k: f64,
    pub n_requests: usize,
}

/// The three-way protocol: base ranks `[0,K)`, base ranks `[K,2K)`, and the
/// deduplicated enhanced top-K, all scored against ITG.
pub fn base_sup_inc(
    base: &[Vec<u64>],
    enhanced: &[Vec<u64>],
    itgs: &[HashSet<u64>],
    k: usize,
    agg: Aggregation,
) -> Result<BaseSupInc> {
    check_k(k)?;
    assert_eq!(base.len(), enhanced.len());
    assert_eq!(base.len(), itgs.len());
    let deduped = dedup_lists(base, enhanced, k)?;
    let base_top: Vec<Vec<u64>> = base.iter().map(|b| b[..k].to_vec()).collect();
    let sup_block: Vec<Vec<u64>> = base.iter().map(|b| b[k..2 * k].to_vec()).collect();
    let (base_at_k, n) = hitrate_inc(&base_top, itgs, k, agg)?;
    let (sup_at_k, _) = hitrate_inc(&sup_block, itgs, k, agg)?;
    let (inc_at_k, _) = hitrate_inc(&deduped, itgs, k, agg)?;
    Ok(BaseSupInc {
        base_at_k,
        sup_at_k,
        inc_at_k,
        n_requests: n,
    })
}

/// Exposure hitrate: per qualifying request `|list@K ∩ exposed| / |exposed|`,
/// mean-aggregated. Apply to deduplicated incremental lists to mirror the
/// Inc@K columns.
pub fn exposure_hitrate(
    lists: &[Vec<u64>],
    exposed: &[HashSet<u64>],
    k: usize,
) -> Result<(f64, usize)> {
    check_k(k)?;
    assert_eq!(lists.len(), exposed.len());
    let ratios: Vec<f64> = lists
        .iter()
        .zip(exposed)
        .filter(|(_, ex)| !ex.is_empty())
        .map(|(list, ex)| {
            let hits = list.iter().take(k).filter(|i| ex.contains(i)).count();
            hits as f64 / ex.len() as f64
        })
        .collect();
    Ok((Aggregation::Mean.combine(&ratios), ratios.len()))
}

/// One metric value at one K.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub n: usize,
}

/// A set of metric rows plus the aggregation they were computed under.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn new(aggregation: Aggregation) -> Self {
        EvalReport {
            aggregation,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: impl Into<String>, k: usize, value: f64, n: usize) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            k,
            value,
            n,
        });
    }

    pub fn get(&self, metric: &str, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric && r.k == k)
    }

    /// Machine-readable lines `metric \t K \t value \t n_users`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(out, "{}\t{}\t{}\t{}", r.metric, r.k, r.value, r.n).unwrap();
        }
        out
    }

    /// Aligned human-readable table.
    pub fn render_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.metric.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{:<name_w$}  {:>6}  {:>10}  {:>8}  ({} aggregation)\n",
            "metric",
            "K",
            "value",
            "n_users",
            self.aggregation.name()
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<name_w$}  {:>6}  {:>10.6}  {:>8}",
                r.metric, r.k, r.value, r.n
            )
            .unwrap();
        }
        out
    }
}
