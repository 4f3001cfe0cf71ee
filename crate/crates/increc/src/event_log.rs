//! Parse and index cross-scenario interaction logs, and materialize the
//! per-request contexts that training and evaluation consume.
//!
//! Log format: UTF-8, one record per line,
//! `user_id \t item_id \t scenario_id \t kind \t timestamp_ms`
//! with `kind` one of `EXPOSE`, `CLICK`, `ORDER`, `REQUEST`. Scenario 0 is
//! the homepage; `REQUEST` records are homepage-only and their item field is
//! ignored. Two sidecar files attach categorical features:
//! `user_id \t attr1,attr2,...` and `item_id \t category_id,brand_id`.

use std::collections::HashMap;
use std::io::BufRead;

use crate::error::{Error, Result};

pub const KIND_NAMES: [&str; 4] = ["EXPOSE", "CLICK", "ORDER", "REQUEST"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Exposure,
    Click,
    Order,
    Request,
}

impl EventKind {
    fn from_str(s: &str) -> Option<EventKind> {
        match s {
            "EXPOSE" => Some(EventKind::Exposure),
            "CLICK" => Some(EventKind::Click),
            "ORDER" => Some(EventKind::Order),
            "REQUEST" => Some(EventKind::Request),
            _ => None,
        }
    }
}

/// One interaction after id remapping. For `Request` events the item field
/// holds `NO_ITEM` and must not be used.
#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub scenario: u16,
    pub kind: EventKind,
    pub ts: i64,
}

pub const NO_ITEM: u32 = u32::MAX;

/// Number of profile attribute slots per user.
pub const DEFAULT_PROFILE_LEN: usize = 4;

/// Number of categorical features per item (category, brand).
pub const ITEM_FEATS: usize = 2;

/// Parsed, validated, immutable view of one log: per-user time-sorted event
/// streams, dense vocabularies, popularity counts, and attached sidecar
/// features. Dense ids are assigned in order of first appearance, so the
/// same bytes always produce the same mapping.
#[derive(Debug, Clone)]
pub struct EventLog {
    streams: Vec<Vec<Event>>,
    user_ids: Vec<u64>,
    user_index: HashMap<u64, u32>,
    item_ids: Vec<u64>,
    item_index: HashMap<u64, u32>,
    popularity: Vec<u32>,
    profiles: Vec<Vec<u32>>,
    attr_vocab: Vec<usize>,
    item_feats: Vec<Vec<u32>>,
    feat_vocab: Vec<usize>,
    profile_len: usize,
}

impl EventLog {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn raw_user(&self, u: u32) -> u64 {
        self.user_ids[u as usize]
    }

    pub fn raw_item(&self, i: u32) -> u64 {
        self.item_ids[i as usize]
    }

    pub fn dense_item(&self, raw: u64) -> Option<u32> {
        self.item_index.get(&raw).copied()
    }

    pub fn dense_user(&self, raw: u64) -> Option<u32> {
        self.user_index.get(&raw).copied()
    }

    /// Time-sorted events of one user.
    pub fn stream(&self, u: u32) -> &[Event] {
        &self.streams[u as usize]
    }

    /// Click+Order count per dense item id.
    pub fn popularity(&self) -> &[u32] {
        &self.popularity
    }

    /// Dense profile attribute ids of one user (`profile_len` slots, 0 = unknown).
    pub fn profile(&self, u: u32) -> &[u32] {
        &self.profiles[u as usize]
    }

    /// Dense feature ids of one item (`[category, brand]`, 0 = unknown).
    pub fn item_features(&self) -> &[Vec<u32>] {
        &self.item_feats
    }

    pub fn profile_len(&self) -> usize {
        self.profile_len
    }

    /// Vocabulary size of each profile attribute slot (including id 0).
    pub fn attr_vocab(&self) -> &[usize] {
        &self.attr_vocab
    }

    /// Vocabulary size of each item feature slot (including id 0).
    pub fn feat_vocab(&self) -> &[usize] {
        &self.feat_vocab
    }

    /// Parse the event stream. Sidecar features start out as all-unknown;
    /// call [`EventLog::attach_user_attrs`] / [`EventLog::attach_item_feats`]
    /// to fill them in.
    pub fn parse(reader: impl BufRead) -> Result<EventLog> {
        Self::parse_with_profile_len(reader, DEFAULT_PROFILE_LEN)
    }

    pub fn parse_with_profile_len(reader: impl BufRead, profile_len: usize) -> Result<EventLog> {
        let mut user_ids = Vec::new();
        let mut user_index: HashMap<u64, u32> = HashMap::new();
        let mut item_ids = Vec::new();
        let mut item_index: HashMap<u64, u32> = HashMap::new();
        let mut raw_events: Vec<Event> = Vec::new();

        let mut saw_line = false;
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            saw_line = true;
            let mut fields = line.split('\t');
            let (raw_user, raw_item, scenario, kind, ts) = match (
                fields.next(),
                fields.next(),
                fields.next(),
                fields.next(),
                fields.next(),
                fields.next(),
            ) {
                (Some(u), Some(i), Some(s), Some(k), Some(t), None) => (u, i, s, k, t),
                _ => return Err(Error::parse(lineno, "expected 5 tab-separated fields")),
            };
            let raw_user: u64 = raw_user
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad user id `{raw_user}`")))?;
            let raw_item: u64 = raw_item
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad item id `{raw_item}`")))?;
            let scenario: u16 = scenario
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad scenario id `{scenario}`")))?;
            let kind = EventKind::from_str(kind)
                .ok_or_else(|| Error::parse(lineno, format!("unknown event kind `{kind}`")))?;
            let ts: i64 = ts
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad timestamp `{ts}`")))?;

            if kind == EventKind::Request && scenario != 0 {
                return Err(Error::parse(
                    lineno,
                    format!("REQUEST with non-homepage scenario {scenario}"),
                ));
            }

            let user = *user_index.entry(raw_user).or_insert_with(|| {
                user_ids.push(raw_user);
                (user_ids.len() - 1) as u32
            });
            let item = if kind == EventKind::Request {
                NO_ITEM
            } else {
                *item_index.entry(raw_item).or_insert_with(|| {
                    item_ids.push(raw_item);
                    (item_ids.len() - 1) as u32
                })
            };
            raw_events.push(Event {
                user,
                item,
                scenario,
                kind,
                ts,
            });
        }
        if !saw_line {
            return Err(Error::EmptyLog);
        }

        let mut streams: Vec<Vec<Event>> = vec![Vec::new(); user_ids.len()];
        for ev in raw_events {
            streams[ev.user as usize].push(ev);
        }
        for s in &mut streams {
            // Stable: ties keep input order.
            s.sort_by_key(|e| e.ts);
        }

        let mut popularity = vec![0u32; item_ids.len()];
        for s in &streams {
            for ev in s {
                if matches!(ev.kind, EventKind::Click | EventKind::Order) {
                    popularity[ev.item as usize] += 1;
                }
            }
        }

        let n_users = user_ids.len();
        let n_items = item_ids.len();
        Ok(EventLog {
            streams,
            user_ids,
            user_index,
            item_ids,
            item_index,
            popularity,
            profiles: vec![vec![0; profile_len]; n_users],
            attr_vocab: vec![1; profile_len],
            item_feats: vec![vec![0; ITEM_FEATS]; n_items],
            feat_vocab: vec![1; ITEM_FEATS],
            profile_len,
        })
    }

    /// Attach the user-attribute sidecar (`user_id \t a1,a2,...`). Raw
    /// attribute values are remapped per slot to dense ids starting at 1;
    /// 0 stays reserved for "unknown". Unknown users are skipped.
    pub fn attach_user_attrs(&mut self, reader: impl BufRead) -> Result<()> {
        let mut maps: Vec<HashMap<u64, u32>> = vec![HashMap::new(); self.profile_len];
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (user, attrs) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected `user\\tattrs`"))?;
            let raw_user: u64 = user
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad user id `{user}`")))?;
            let Some(u) = self.dense_user(raw_user) else {
                continue;
            };
            for (slot, field) in attrs.split(',').enumerate().take(self.profile_len) {
                let raw: u64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad attribute `{field}`")))?;
                let next = maps[slot].len() as u32 + 1;
                let dense = *maps[slot].entry(raw).or_insert(next);
                self.profiles[u as usize][slot] = dense;
            }
        }
        for (slot, m) in maps.iter().enumerate() {
            self.attr_vocab[slot] = m.len() + 1;
        }
        Ok(())
    }

    /// Attach the item-feature sidecar (`item_id \t category,brand`).
    pub fn attach_item_feats(&mut self, reader: impl BufRead) -> Result<()> {
        let mut maps: Vec<HashMap<u64, u32>> = vec![HashMap::new(); ITEM_FEATS];
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (item, feats) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected `item\\tfeatures`"))?;
            let raw_item: u64 = item
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad item id `{item}`")))?;
            let Some(i) = self.dense_item(raw_item) else {
                continue;
            };
            for (slot, field) in feats.split(',').enumerate().take(ITEM_FEATS) {
                let raw: u64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad feature `{field}`")))?;
                let next = maps[slot].len() as u32 + 1;
                let dense = *maps[slot].entry(raw).or_insert(next);
                self.item_feats[i as usize][slot] = dense;
            }
        }
        for (slot, m) in maps.iter().enumerate() {
            self.feat_vocab[slot] = m.len() + 1;
        }
        Ok(())
    }
}

/// One homepage request: everything the towers see, plus the targets and
/// exposures attributed to it.
#[derive(Debug, Clone)]
pub struct RequestContext {
    pub user: u32,
    pub request_time: i64,
    /// Dense profile attribute ids, one per slot.
    pub profile: Vec<u32>,
    /// `(item, scenario)` pairs strictly before the request, oldest first,
    /// truncated to the most recent `max_seq`.
    pub behaviors: Vec<(u32, u16)>,
    /// Homepage exposures between this request and the next one (sorted, deduped).
    pub exposed: Vec<u32>,
    /// Items ordered in any scenario within the attribution window (sorted, deduped).
    pub targets: Vec<u32>,
}

impl RequestContext {
    /// Requests without targets are kept for retrieval-only use.
    pub fn is_trainable(&self) -> bool {
        !self.targets.is_empty()
    }
}

/// Materialize one context per homepage `Request` event.
///
/// Behaviors are Click/Order events from all scenarios before the request.
/// Targets are Order events in `(T1, min(T_next_request, T1 + horizon)]`,
/// so every order is attributed to exactly one request. Exposures are
/// homepage Exposure events in `(T1, T_next_request]`.
pub fn build_requests(log: &EventLog, horizon_ms: i64, max_seq: usize) -> Vec<RequestContext> {
    let mut out = Vec::new();
    for u in 0..log.n_users() as u32 {
        let stream = log.stream(u);
        let request_ts: Vec<i64> = stream
            .iter()
            .filter(|e| e.kind == EventKind::Request)
            .map(|e| e.ts)
            .collect();
        for (ri, &t1) in request_ts.iter().enumerate() {
            let t_next = request_ts.get(ri + 1).copied().unwrap_or(i64::MAX);
            let target_end = t_next.min(t1.saturating_add(horizon_ms));

            let mut behaviors: Vec<(u32, u16)> = stream
                .iter()
                .filter(|e| {
                    e.ts < t1 && matches!(e.kind, EventKind::Click | EventKind::Order)
                })
                .map(|e| (e.item, e.scenario))
                .collect();
            if behaviors.len() > max_seq {
                behaviors.drain(..behaviors.len() - max_seq);
            }

            let mut exposed: Vec<u32> = stream
                .iter()
                .filter(|e| {
                    e.kind == EventKind::Exposure
                        && e.scenario == 0
                        && e.ts > t1
                        && e.ts <= t_next
                })
                .map(|e| e.item)
                .collect();
            exposed.sort_unstable();
            exposed.dedup();

            let mut targets: Vec<u32> = stream
                .iter()
                .filter(|e| e.kind == EventKind::Order && e.ts > t1 && e.ts <= target_end)
                .map(|e| e.item)
                .collect();
            targets.sort_unstable();
            targets.dedup();

            out.push(RequestContext {
                user: u,
                request_time: t1,
                profile: log.profile(u).to_vec(),
                behaviors,
                exposed,
                targets,
            });
        }
    }
    out
}

/// Timestamp splitting the request range: `t_min + frac * (t_max - t_min)`
/// over request times. Requests at or after the split form the eval window.
pub fn split_time(contexts: &[RequestContext], frac: f64) -> i64 {
    let (mut lo, mut hi) = (i64::MAX, i64::MIN);
    for c in contexts {
        lo = lo.min(c.request_time);
        hi = hi.max(c.request_time);
    }
    if lo > hi {
        return i64::MAX;
    }
    lo + ((hi - lo) as f64 * frac) as i64
}

/// Index of each user's first request at or after `split`, at most one per
/// user, in ascending dense-user order. These are the evaluation contexts.
pub fn select_eval_requests(contexts: &[RequestContext], split: i64) -> Vec<usize> {
    let mut best: HashMap<u32, usize> = HashMap::new();
    for (idx, c) in contexts.iter().enumerate() {
        if c.request_time < split {
            continue;
        }
        match best.get(&c.user) {
            Some(&prev)
                if (contexts[prev].request_time, prev) <= (c.request_time, idx) => {}
            _ => {
                best.insert(c.user, idx);
            }
        }
    }
    let mut users: Vec<u32> = best.keys().copied().collect();
    users.sort_unstable();
    users.into_iter().map(|u| best[&u]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn line(u: u64, i: u64, s: u16, k: &str, t: i64) -> String {
        format!("{u}\t{i}\t{s}\t{k}\t{t}")
    }

    fn parse(lines: &[String]) -> Result<EventLog> {
        EventLog::parse(Cursor::new(lines.join("\n")))
    }

    #[test]
    fn empty_log_is_an_error() {
        let err = EventLog::parse(Cursor::new("")).unwrap_err();
        assert!(matches!(err, Error::EmptyLog));
    }

    #[test]
    fn three_orders_one_user() {
        let log = parse(&[
            line(7, 100, 0, "ORDER", 10),
            line(7, 100, 1, "ORDER", 20),
            line(7, 200, 2, "ORDER", 30),
        ])
        .unwrap();
        assert_eq!(log.n_users(), 1);
        assert_eq!(log.n_items(), 2);
        assert_eq!(log.popularity(), &[2, 1]);
    }

    #[test]
    fn malformed_line_cites_line_number() {
        let mut lines: Vec<String> = (0..100)
            .map(|k| line(k, k + 1000, 0, "CLICK", k as i64))
            .collect();
        lines[41] = "not a record".to_string();
        let err = parse(&lines).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 42),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let err = parse(&[line(1, 2, 0, "PURCHASE", 5)]).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("PURCHASE"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn request_outside_homepage_rejected() {
        let err = parse(&[line(1, 0, 2, "REQUEST", 5)]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn targets_cross_scenarios() {
        // Orders right after the request count regardless of scenario.
        let log = parse(&[
            line(1, 11, 0, "CLICK", 50),
            line(1, 0, 0, "REQUEST", 100),
            line(1, 21, 0, "ORDER", 101),
            line(1, 24, 2, "ORDER", 102),
        ])
        .unwrap();
        let ctxs = build_requests(&log, 86_400_000, 50);
        assert_eq!(ctxs.len(), 1);
        let i21 = log.dense_item(21).unwrap();
        let i24 = log.dense_item(24).unwrap();
        let mut want = vec![i21, i24];
        want.sort_unstable();
        assert_eq!(ctxs[0].targets, want);
        assert!(ctxs[0].is_trainable());
    }

    #[test]
    fn no_future_events_means_untrainable() {
        let log = parse(&[
            line(1, 11, 0, "CLICK", 50),
            line(1, 0, 0, "REQUEST", 100),
        ])
        .unwrap();
        let ctxs = build_requests(&log, 86_400_000, 50);
        assert_eq!(ctxs.len(), 1);
        assert!(ctxs[0].targets.is_empty());
        assert!(!ctxs[0].is_trainable());
    }

    #[test]
    fn behaviors_truncate_to_most_recent() {
        let mut lines: Vec<String> = (0..60)
            .map(|k| line(1, 1000 + k, 0, "CLICK", k as i64))
            .collect();
        lines.push(line(1, 0, 0, "REQUEST", 1000));
        let log = parse(&lines).unwrap();
        let ctxs = build_requests(&log, 86_400_000, 50);
        assert_eq!(ctxs[0].behaviors.len(), 50);
        // Oldest-first, so the first retained behavior is click #10.
        let first = ctxs[0].behaviors[0].0;
        assert_eq!(log.raw_item(first), 1010);
    }

    #[test]
    fn horizon_caps_targets_and_next_request_bounds_exposures() {
        let log = parse(&[
            line(1, 0, 0, "REQUEST", 0),
            line(1, 5, 0, "EXPOSE", 10),
            line(1, 6, 1, "ORDER", 20),
            line(1, 7, 1, "ORDER", 2_000),  // beyond horizon
            line(1, 8, 0, "EXPOSE", 3_000), // before next request: still exposed
            line(1, 0, 0, "REQUEST", 5_000),
        ])
        .unwrap();
        let ctxs = build_requests(&log, 1_000, 50);
        assert_eq!(ctxs.len(), 2);
        let c = &ctxs[0];
        assert_eq!(c.targets, vec![log.dense_item(6).unwrap()]);
        let mut want_exposed = vec![log.dense_item(5).unwrap(), log.dense_item(8).unwrap()];
        want_exposed.sort_unstable();
        assert_eq!(c.exposed, want_exposed);
    }

    #[test]
    fn time_partition_invariant() {
        // behaviors < T1 <= targets, targets within horizon.
        let horizon = 500;
        let log = parse(&[
            line(1, 1, 0, "CLICK", 10),
            line(1, 2, 1, "ORDER", 99),
            line(1, 0, 0, "REQUEST", 100),
            line(1, 3, 0, "ORDER", 100), // tie with T1: excluded from both sides
            line(1, 4, 2, "ORDER", 300),
            line(1, 5, 0, "CLICK", 400),
        ])
        .unwrap();
        let ctxs = build_requests(&log, horizon, 50);
        let c = &ctxs[0];
        assert_eq!(c.behaviors.len(), 2);
        assert_eq!(c.targets, vec![log.dense_item(4).unwrap()]);
    }

    #[test]
    fn identical_bytes_identical_contexts() {
        let lines: Vec<String> = vec![
            line(3, 9, 0, "CLICK", 1),
            line(3, 0, 0, "REQUEST", 5),
            line(3, 8, 1, "ORDER", 7),
            line(4, 9, 0, "CLICK", 2),
        ];
        let a = parse(&lines).unwrap();
        let b = parse(&lines).unwrap();
        let ca = build_requests(&a, 1000, 50);
        let cb = build_requests(&b, 1000, 50);
        assert_eq!(ca.len(), cb.len());
        for (x, y) in ca.iter().zip(&cb) {
            assert_eq!(x.user, y.user);
            assert_eq!(x.request_time, y.request_time);
            assert_eq!(x.behaviors, y.behaviors);
            assert_eq!(x.exposed, y.exposed);
            assert_eq!(x.targets, y.targets);
        }
    }

    #[test]
    fn sidecars_attach_dense_ids() {
        let mut log = parse(&[
            line(1, 10, 0, "CLICK", 1),
            line(2, 11, 0, "CLICK", 2),
        ])
        .unwrap();
        log.attach_user_attrs(Cursor::new("1\t100,200,300,400\n2\t100,201,300,401\n"))
            .unwrap();
        log.attach_item_feats(Cursor::new("10\t7,20\n11\t7,21\n"))
            .unwrap();
        let u1 = log.dense_user(1).unwrap();
        let u2 = log.dense_user(2).unwrap();
        assert_eq!(log.profile(u1)[0], log.profile(u2)[0]); // shared attr value
        assert_ne!(log.profile(u1)[1], log.profile(u2)[1]);
        let i10 = log.dense_item(10).unwrap() as usize;
        let i11 = log.dense_item(11).unwrap() as usize;
        assert_eq!(log.item_features()[i10][0], log.item_features()[i11][0]);
        assert_ne!(log.item_features()[i10][1], log.item_features()[i11][1]);
        assert_eq!(log.attr_vocab()[0], 2); // unknown + 1 value
        assert_eq!(log.attr_vocab()[1], 3);
    }

    #[test]
    fn eval_selection_takes_first_request_per_user_after_split() {
        let log = parse(&[
            line(1, 0, 0, "REQUEST", 10),
            line(1, 0, 0, "REQUEST", 110),
            line(1, 0, 0, "REQUEST", 120),
            line(2, 0, 0, "REQUEST", 115),
        ])
        .unwrap();
        let ctxs = build_requests(&log, 1000, 50);
        let split = 100;
        let eval = select_eval_requests(&ctxs, split);
        assert_eq!(eval.len(), 2);
        assert_eq!(ctxs[eval[0]].request_time, 110);
        assert_eq!(ctxs[eval[1]].request_time, 115);
    }
}
