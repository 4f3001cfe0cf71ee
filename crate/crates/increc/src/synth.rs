//! Seeded synthetic cross-scenario logs with planted incremental structure.
//!
//! Items belong to interest clusters with Zipf popularity inside each
//! cluster. Every user browses two homepage-visible clusters; with
//! probability `p_cross` the user also has a hidden cluster that only shows
//! up in cross-scenario orders. Homepage behaviors and exposures come from
//! the visible clusters plus global popularity, so an item-to-item baseline
//! keeps retrieving visible items while the hidden-cluster orders land in
//! the incremental group. Two profile attributes leak noisy copies of the
//! visible clusters and one leaks the hidden cluster, which gives the
//! towers something to learn from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_scenarios: usize,
    pub n_clusters: usize,
    /// Probability that a user's cross-scenario orders come from a cluster
    /// invisible to homepage behaviors.
    pub p_cross: f64,
    /// Approximate generated events per user.
    pub events_per_user: usize,
    /// Order-attribution horizon; order timestamps stay inside it.
    pub horizon_ms: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            n_items: 5000,
            n_scenarios: 3,
            n_clusters: 20,
            p_cross: 0.8,
            events_per_user: 80,
            horizon_ms: 24 * 3_600_000,
            seed: 0,
        }
    }
}

/// Generated files, byte-deterministic per seed.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Event log (`user \t item \t scenario \t kind \t ts`).
    pub events: String,
    /// User-attribute sidecar (`user \t a0,a1,a2,a3`).
    pub user_attrs: String,
    /// Item-feature sidecar (`item \t category,brand`).
    pub item_feats: String,
    /// Ground truth `item \t cluster`.
    pub truth_items: String,
    /// Ground truth `user \t visible,visible \t hidden`.
    pub truth_users: String,
}

const VISIBLE_CLUSTERS: usize = 2;
const ZIPF_EXPONENT: f64 = 1.25;
const EXPOSE_PER_REQUEST: usize = 6;
const HOME_CLICKS_PER_REQUEST: usize = 3;
const CROSS_CLICKS_PER_REQUEST: usize = 2;
/// Share of exposure draws taken from the visible clusters.
const EXPOSE_VISIBLE_SHARE: f64 = 0.55;
/// Share of exposure draws taken from the cross pool: the ranking stage
/// accepts a trickle of cross-scenario items, preferring the user's own
/// hidden interest when there is one.
const EXPOSE_CROSS_SHARE: f64 = 0.05;

const DAY_MS: i64 = 86_400_000;
const T0: i64 = 1_700_000_000_000;

/// Interest clusters split into a homepage pool and a cross-scenario pool.
/// Homepage behaviors, exposures, and popularity mass live in the homepage
/// pool; hidden interests are sampled from the cross pool, so nothing on the
/// homepage surfaces them.
struct Clusters {
    members: Vec<Vec<u32>>,
    cum: Vec<Vec<f64>>,
    n_home: usize,
}

impl Clusters {
    fn new(n_items: usize, n_clusters: usize) -> Clusters {
        let mut members = vec![Vec::new(); n_clusters];
        for i in 0..n_items as u32 {
            members[i as usize % n_clusters].push(i);
        }
        let cum = members
            .iter()
            .map(|m| {
                let mut acc = 0.0;
                m.iter()
                    .enumerate()
                    .map(|(rank, _)| {
                        acc += 1.0 / (1.0 + rank as f64).powf(ZIPF_EXPONENT);
                        acc
                    })
                    .collect()
            })
            .collect();
        let n_home = n_clusters - n_clusters / 2;
        Clusters {
            members,
            cum,
            n_home,
        }
    }

    fn cluster_of(&self, item: u32, n_clusters: usize) -> usize {
        item as usize % n_clusters
    }

    /// Zipf draw inside one cluster.
    fn sample(&self, c: usize, rng: &mut ChaCha8Rng) -> u32 {
        let cum = &self.cum[c];
        let total = *cum.last().expect("non-empty cluster");
        let x = rng.random::<f64>() * total;
        let rank = cum.partition_point(|&v| v < x).min(cum.len() - 1);
        self.members[c][rank]
    }

    /// Homepage popularity draw: uniform homepage cluster, Zipf rank.
    fn sample_home_popular(&self, rng: &mut ChaCha8Rng) -> u32 {
        let c = rng.random_range(0..self.n_home);
        self.sample(c, rng)
    }

    /// Uniform draw inside one cluster; hidden-interest picks use this so
    /// cross-scenario discoveries stay spread over the long tail.
    fn sample_uniform(&self, c: usize, rng: &mut ChaCha8Rng) -> u32 {
        let m = &self.members[c];
        m[rng.random_range(0..m.len())]
    }
}

/// Generate the five files for one seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.n_clusters == 0 || cfg.n_scenarios == 0 {
        return Err(Error::Config("all sizes must be positive".into()));
    }
    if cfg.n_clusters > cfg.n_items {
        return Err(Error::Config(format!(
            "{} clusters cannot cover {} items",
            cfg.n_clusters, cfg.n_items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.p_cross) {
        return Err(Error::Config("p_cross must be in [0, 1]".into()));
    }
    if cfg.n_clusters <= VISIBLE_CLUSTERS {
        return Err(Error::Config(format!(
            "need more than {VISIBLE_CLUSTERS} clusters"
        )));
    }
    if cfg.events_per_user < 16 {
        return Err(Error::Config("events_per_user must be at least 16".into()));
    }
    if cfg.horizon_ms <= 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }

    let clusters = Clusters::new(cfg.n_items, cfg.n_clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut item_feats = String::new();
    let mut truth_items = String::new();
    for i in 0..cfg.n_items as u32 {
        let cluster = clusters.cluster_of(i, cfg.n_clusters);
        // Brands follow popularity tiers: items of the same within-cluster
        // rank block share a brand, so item vectors carry an explicit
        // exposability coordinate.
        let brand = ((i as usize / cfg.n_clusters) / 8).min(31);
        let raw = i as u64 + 1;
        item_feats.push_str(&format!("{raw}\t{cluster},{brand}\n"));
        truth_items.push_str(&format!("{raw}\t{cluster}\n"));
    }

    let n_req = (cfg.events_per_user / 16).clamp(2, 12);
    let span = n_req as i64 * DAY_MS;

    let mut events = String::new();
    let mut user_attrs = String::new();
    let mut truth_users = String::new();

    for u in 0..cfg.n_users as u32 {
        let raw_user = u as u64 + 1;

        // Interests: visible pair from the homepage pool, hidden from the
        // cross pool.
        let n_home = clusters.n_home;
        let v0 = rng.random_range(0..n_home);
        let mut v1 = rng.random_range(0..n_home - 1);
        if v1 >= v0 {
            v1 += 1;
        }
        let visible = [v0, v1];
        let has_hidden = rng.random_bool(cfg.p_cross);
        let hidden = if has_hidden {
            rng.random_range(n_home..cfg.n_clusters)
        } else {
            v0
        };

        // Two demographic noise slots plus the visible clusters; nothing in
        // the profile reveals the hidden interest, only behaviors do.
        let attr0 = rng.random_range(0..16usize);
        let attr3 = rng.random_range(0..8usize);
        user_attrs.push_str(&format!("{raw_user}\t{attr0},{v0},{v1},{attr3}\n"));
        truth_users.push_str(&format!("{raw_user}\t{v0},{v1}\t{hidden}\n"));

        // Request times: sorted, strictly increasing.
        let mut req_times: Vec<i64> = (0..n_req).map(|_| T0 + rng.random_range(0..span)).collect();
        req_times.sort_unstable();
        for r in 1..req_times.len() {
            if req_times[r] <= req_times[r - 1] {
                req_times[r] = req_times[r - 1] + 60_000;
            }
        }

        let mut lines: Vec<(i64, String)> = Vec::with_capacity(cfg.events_per_user + 8);
        let push = |lines: &mut Vec<(i64, String)>, ts: i64, item: u64, sc: usize, kind: &str| {
            lines.push((ts, format!("{raw_user}\t{item}\t{sc}\t{kind}\t{ts}")));
        };

        let pick_visible =
            |rng: &mut ChaCha8Rng, clusters: &Clusters| -> u32 {
                let c = visible[rng.random_range(0..VISIBLE_CLUSTERS)];
                clusters.sample(c, rng)
            };

        for (r, &t1) in req_times.iter().enumerate() {
            let t_next = req_times.get(r + 1).copied().unwrap_or(t1 + DAY_MS);
            let gap = (t_next - t1).max(2);
            push(&mut lines, t1, 0, 0, "REQUEST");

            // Exposures shortly after the request.
            let expose_window = gap.min(3_600_000);
            let mut exposed: Vec<u32> = Vec::with_capacity(EXPOSE_PER_REQUEST);
            for _ in 0..EXPOSE_PER_REQUEST {
                let roll: f64 = rng.random();
                let item = if roll < EXPOSE_VISIBLE_SHARE {
                    pick_visible(&mut rng, &clusters)
                } else if roll < EXPOSE_VISIBLE_SHARE + EXPOSE_CROSS_SHARE {
                    let c = if has_hidden && rng.random_bool(0.5) {
                        hidden
                    } else {
                        rng.random_range(clusters.n_home..cfg.n_clusters)
                    };
                    clusters.sample(c, &mut rng)
                } else {
                    clusters.sample_home_popular(&mut rng)
                };
                let ts = t1 + 1 + rng.random_range(0..expose_window);
                push(&mut lines, ts, item as u64 + 1, 0, "EXPOSE");
                exposed.push(item);
            }

            // Homepage clicks: mostly on exposed items.
            for _ in 0..HOME_CLICKS_PER_REQUEST {
                let item = if rng.random_bool(0.7) {
                    exposed[rng.random_range(0..exposed.len())]
                } else {
                    pick_visible(&mut rng, &clusters)
                };
                let ts = t1 + 1 + rng.random_range(0..gap - 1);
                push(&mut lines, ts, item as u64 + 1, 0, "CLICK");
            }

            // Cross-scenario clicks hint at the hidden interest.
            for _ in 0..CROSS_CLICKS_PER_REQUEST {
                let sc = if cfg.n_scenarios > 1 {
                    rng.random_range(1..cfg.n_scenarios)
                } else {
                    0
                };
                let item = if has_hidden && rng.random_bool(0.25) {
                    clusters.sample_uniform(hidden, &mut rng)
                } else {
                    pick_visible(&mut rng, &clusters)
                };
                let ts = t1 + 1 + rng.random_range(0..gap - 1);
                push(&mut lines, ts, item as u64 + 1, sc, "CLICK");
            }

            // Orders within the attribution horizon.
            let order_window = gap.min(cfg.horizon_ms).max(2);
            let n_orders = 2 + usize::from(rng.random_bool(0.5));
            for _ in 0..n_orders {
                let cross = cfg.n_scenarios > 1 && rng.random_bool(0.8);
                let sc = if cross {
                    rng.random_range(1..cfg.n_scenarios)
                } else {
                    0
                };
                let item = if has_hidden && cross && rng.random_bool(cfg.p_cross) {
                    clusters.sample_uniform(hidden, &mut rng)
                } else {
                    pick_visible(&mut rng, &clusters)
                };
                let ts = t1 + 1 + rng.random_range(0..order_window - 1);
                push(&mut lines, ts, item as u64 + 1, sc, "ORDER");
            }
        }

        lines.sort_by_key(|(ts, _)| *ts);
        for (_, line) in lines {
            events.push_str(&line);
            events.push('\n');
        }
    }

    Ok(SynthOutput {
        events,
        user_attrs,
        item_feats,
        truth_items,
        truth_users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{build_requests, EventLog};
    use crate::sample_builder::{build_i2i_index, simulate_partitions};
    use std::io::Cursor;

    fn small(p_cross: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_users: 300,
            n_items: 600,
            n_scenarios: 3,
            n_clusters: 10,
            p_cross,
            events_per_user: 48,
            horizon_ms: 24 * 3_600_000,
            seed,
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = generate(&small(0.8, 7)).unwrap();
        let b = generate(&small(0.8, 7)).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.user_attrs, b.user_attrs);
        assert_eq!(a.item_feats, b.item_feats);
        assert_eq!(a.truth_items, b.truth_items);
        assert_eq!(a.truth_users, b.truth_users);
        let c = generate(&small(0.8, 8)).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn output_parses_cleanly() {
        let out = generate(&small(0.5, 3)).unwrap();
        let mut log = EventLog::parse(Cursor::new(out.events.as_str())).unwrap();
        log.attach_user_attrs(Cursor::new(out.user_attrs.as_str())).unwrap();
        log.attach_item_feats(Cursor::new(out.item_feats.as_str())).unwrap();
        assert_eq!(log.n_users(), 300);
        assert!(log.n_items() <= 600);
        let ctxs = build_requests(&log, 24 * 3_600_000, 50);
        assert!(!ctxs.is_empty());
        // Most requests should carry targets and exposures.
        let trainable = ctxs.iter().filter(|c| c.is_trainable()).count();
        assert!(trainable * 2 > ctxs.len());
    }

    #[test]
    fn infeasible_configs_error() {
        assert!(generate(&SynthConfig {
            n_clusters: 700,
            ..small(0.5, 1)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            p_cross: 1.5,
            ..small(0.5, 1)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            n_users: 0,
            ..small(0.5, 1)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            n_clusters: 2,
            ..small(0.5, 1)
        })
        .is_err());
    }

    /// Share of order targets that the simulated baseline misses.
    fn itg_share(p_cross: f64, seed: u64) -> f64 {
        let out = generate(&small(p_cross, seed)).unwrap();
        let log = EventLog::parse(Cursor::new(out.events.as_str())).unwrap();
        let ctxs = build_requests(&log, 24 * 3_600_000, 50);
        let idx = build_i2i_index(&log, 12 * 3_600_000, 20);
        // 10% of the catalog, like the full-scale fixture.
        let parts = simulate_partitions(&ctxs, &idx, log.popularity(), 60);
        let (mut itg, mut all) = (0usize, 0usize);
        for p in &parts {
            itg += p.itg.len();
            all += p.itg.len() + p.rtg.len();
        }
        itg as f64 / all.max(1) as f64
    }

    #[test]
    fn hidden_interests_drive_the_incremental_share() {
        let s0 = itg_share(0.0, 11);
        let s4 = itg_share(0.4, 11);
        let s8 = itg_share(0.8, 11);
        eprintln!("itg shares: {s0} {s4} {s8}");
        assert!(s0 < s4 && s4 < s8, "shares not increasing: {s0} {s4} {s8}");
        assert!(s8 > 0.3, "high p_cross share too low: {s8}");
    }
}
