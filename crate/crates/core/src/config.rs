//! Run configuration: one JSON document covering the world, model, training
//! and evaluation, plus output locations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{StratumSpec, DEFAULT_CUTOFFS};
use crate::policy::ModelConfig;
use crate::synth::{Split, WorldConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub cutoffs: Vec<usize>,
    pub strata: Vec<StratumSpec>,
    pub probe_positions: Vec<usize>,
    pub n_shuffles: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            strata: vec![
                StratumSpec::FreqQuartile,
                StratumSpec::FreqIndustrial,
                StratumSpec::HistoryLengthBins {
                    edges: vec![0, 5, 10, 20],
                },
            ],
            probe_positions: vec![1, 10, 20],
            n_shuffles: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths::under(Path::new("runs/default"))
    }
}

impl Paths {
    /// `data/`, `checkpoints/` and `reports/` below `root`.
    pub fn under(root: &Path) -> Self {
        Paths {
            data_dir: root.join("data"),
            checkpoint_dir: root.join("checkpoints"),
            report_dir: root.join("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    /// Upper bound on concurrent rollouts and evaluations.
    pub workers: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "default".into(),
            seed: 7,
            workers: 1,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Fields that do not influence any computed value.
const UNHASHED: [&str; 3] = ["run_id", "workers", "paths"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        let k = self.world.candidates;
        let bad = |m: String| Err(Error::Config(m));
        if e.cutoffs.is_empty() || e.cutoffs.iter().any(|&c| c == 0) {
            return bad("eval.cutoffs must be non-empty and positive".into());
        }
        if e.probe_positions.iter().any(|&p| p == 0 || p > k) {
            return bad(format!("eval.probe_positions must lie in 1..={k}"));
        }
        if e.n_shuffles < 2 {
            return bad("eval.n_shuffles must be at least 2".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let need = self.context_len() + self.world.dims + 1 + self.model.max_gen;
        if need > self.model.max_len {
            return bad(format!(
                "model.max_len {} cannot hold a full prompt plus max_gen ({need} tokens)",
                self.model.max_len
            ));
        }
        Ok(())
    }

    /// Shared user-context length at full history.
    pub fn context_len(&self) -> usize {
        self.world.dims + self.world.history_len * (self.world.dims + 1) + 1
    }

    /// SHA-256 of the canonical JSON of every field that affects results.
    pub fn hash_bytes(&self) -> [u8; 32] {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in UNHASHED {
            obj.remove(k);
        }
        // serde_json maps are key-sorted, so this string is canonical
        let canon = serde_json::to_string(&v).expect("value serializes");
        Sha256::digest(canon.as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash_bytes())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Maximum history items serialized into a prompt.
    pub fn max_history(&self) -> usize {
        self.world.history_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"epsilonn": 0.1}}"#).unwrap_err().to_string();
        assert!(err.contains("epsilonn"), "{err}");
        let err = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn hash_ignores_paths_and_workers() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths = Paths::under(Path::new("/elsewhere"));
        b.workers = 4;
        b.run_id = "x".into();
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.seed += 1;
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex().len(), 64);
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            r#"{"train": {"epsilon": 1.5}}"#,
            r#"{"eval": {"cutoffs": []}}"#,
            r#"{"eval": {"probe_positions": [21]}}"#,
            r#"{"model": {"max_len": 100}}"#,
            r#"{"workers": 0}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
