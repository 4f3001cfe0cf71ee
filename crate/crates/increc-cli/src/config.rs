//! One flat key-value configuration shared by every pipeline stage.
//!
//! Values resolve in three layers: built-in defaults, then an optional
//! config file (`key = value`, `#` comments), then `--set key=value` flag
//! overrides. Unknown keys are rejected everywhere so typos cannot silently
//! fall back to defaults. `configs/default.conf` in the repository root
//! documents every key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::pipeline::PipelineError;

type Result<T> = std::result::Result<T, PipelineError>;

/// `(key, default, help)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("synth.users", "2000", "users to generate"),
    ("synth.items", "5000", "catalog size"),
    ("synth.scenarios", "3", "scenario count (0 = homepage)"),
    ("synth.clusters", "20", "interest clusters"),
    ("synth.p_cross", "0.8", "probability of a hidden cross-scenario interest"),
    ("synth.events_per_user", "80", "approximate events per user"),
    ("data.horizon_hours", "24", "order-attribution horizon"),
    ("data.max_seq", "50", "behavior sequence cap"),
    ("data.eval_split", "0.8", "fraction of the request range used for training"),
    ("samples.i2i_window_hours", "12", "co-occurrence window"),
    ("samples.top_m", "20", "co-items kept per trigger"),
    ("samples.k_base", "500", "simulated baseline retrieved-set size"),
    ("samples.n_neg", "64", "random negatives per example"),
    ("model.dim", "64", "embedding/output dimension d"),
    ("model.hidden", "128", "tower hidden width h"),
    ("train.epochs", "5", "training epochs"),
    ("train.batch", "256", "mini-batch size"),
    ("train.lr", "0.05", "AdaGrad learning rate"),
    ("train.eps", "1e-8", "AdaGrad epsilon"),
    ("train.tau", "1.0", "softmax temperature"),
    ("train.itg_boost", "5.0", "ITG amplification for the boosted ablation"),
    ("train.coef_basic", "1.0", "coefficient on the basic loss"),
    ("train.coef_inc", "1.0", "coefficient on the incremental loss"),
    ("train.coef_align", "1.0", "coefficient on the alignment loss"),
    (
        "train.alpha_range",
        "clamp",
        "consistency-weight range handling: clamp | softplus",
    ),
    ("eval.k", "100", "cutoff K (base lists use 2K)"),
    ("eval.aggregation", "mean", "hitrate aggregation: mean | sum"),
    ("retrieval.approx", "false", "use the approximate index for retrieval"),
    ("retrieval.m", "16", "approximate graph links per node"),
    ("retrieval.ef_build", "128", "approximate graph build beam width"),
];

#[derive(Debug, Clone)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            map: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(PipelineError::Config(format!("unknown config key `{key}`")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, kvs: &[String]) -> Result<()> {
        for kv in kvs {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("override `{kv}` is not key=value"))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| PipelineError::Config(format!("unknown config key `{key}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| PipelineError::Config(format!("{key} = `{v}` is not an integer")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| PipelineError::Config(format!("{key} = `{v}` is not an integer")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| PipelineError::Config(format!("{key} = `{v}` is not a number")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(PipelineError::Config(format!(
                "{key} = `{v}` is not a boolean"
            ))),
        }
    }

    pub fn string(&self, key: &str) -> Result<String> {
        Ok(self.raw(key)?.to_string())
    }

    pub fn hours_ms(&self, key: &str) -> Result<i64> {
        let h = self.f64(key)?;
        if h <= 0.0 {
            return Err(PipelineError::Config(format!("{key} must be positive")));
        }
        Ok((h * 3_600_000.0) as i64)
    }

    /// First 8 hex chars of the SHA-256 of the canonical `key = value`
    /// serialization; names run directories.
    pub fn hash8(&self) -> String {
        let mut canon = String::new();
        for (k, v) in &self.map {
            writeln!(canon, "{k} = {v}").unwrap();
        }
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(&digest[..4])
    }

    /// The shipped default config file content.
    pub fn default_file() -> String {
        let mut out = String::from(
            "# Pipeline configuration: every recognized key with its default value.\n\
             # Override any subset here or with --set key=value on the command line.\n\n",
        );
        for (k, v, help) in KEYS {
            writeln!(out, "# {help}\n{k} = {v}\n").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_hash() {
        let a = Config::default();
        let b = Config::default();
        assert_eq!(a.hash8(), b.hash8());
        let mut c = Config::default();
        c.set("eval.k", "50").unwrap();
        assert_ne!(a.hash8(), c.hash8());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = Config::default();
        assert!(cfg.set("nope.nope", "1").is_err());
        assert!(cfg.apply_overrides(&["eval.k=25".into()]).is_ok());
        assert_eq!(cfg.usize("eval.k").unwrap(), 25);
        assert!(cfg.apply_overrides(&["bad-no-equals".into()]).is_err());
    }

    #[test]
    fn typed_getters_validate() {
        let mut cfg = Config::default();
        cfg.set("train.lr", "abc").unwrap();
        assert!(cfg.f64("train.lr").is_err());
        assert_eq!(cfg.hours_ms("data.horizon_hours").unwrap(), 86_400_000);
        assert!(!cfg.bool("retrieval.approx").unwrap());
    }
}
