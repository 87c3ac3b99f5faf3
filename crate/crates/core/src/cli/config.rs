use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::TrainConfig;
use crate::ract::RactConfig;
use crate::setup::{MnistTask, SyntheticTask};
use crate::theory::TheoryConstants;

pub const DEFAULT_SEEDS: [u64; 3] = [42, 123, 456];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Memorize,
    Temporal,
    Ranksweep,
    Ract,
    Threshold,
    Rankgap,
    MnistRact,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Memorize => "memorize",
            Kind::Temporal => "temporal",
            Kind::Ranksweep => "ranksweep",
            Kind::Ract => "ract",
            Kind::Threshold => "threshold",
            Kind::Rankgap => "rankgap",
            Kind::MnistRact => "mnist-ract",
        }
    }
}

/// Grids for the sweep kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ranks: Vec<usize>,
    pub noise_rates: Vec<f64>,
    pub taus: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// Onset estimator window and drop fraction.
    pub window: usize,
    pub frac: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ranks: vec![2, 4, 8, 16, 32],
            noise_rates: vec![0.0, 0.2, 0.4, 0.6],
            taus: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            pairs: vec![(2, 8), (4, 16), (8, 32)],
            window: 5,
            frac: 0.05,
        }
    }
}

/// A parsed experiment file. Everything except the MNIST paths has a
/// default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: Option<Kind>,
    pub seeds: Vec<u64>,
    /// Label-noise rate for the single-rate kinds.
    pub eta: f64,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub data: SyntheticTask,
    pub mnist: Option<MnistTask>,
    pub train: TrainConfig,
    pub ract: RactConfig,
    pub sweep: SweepConfig,
    pub theory: TheoryConstants,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            seeds: DEFAULT_SEEDS.to_vec(),
            eta: 0.3,
            out: None,
            jobs: 1,
            data: SyntheticTask::default(),
            mnist: None,
            train: TrainConfig::default(),
            ract: RactConfig::default(),
            sweep: SweepConfig::default(),
            theory: TheoryConstants::default(),
        }
    }
}

/// Accepts `seed = n` as shorthand for `seeds = [n]`.
#[derive(Deserialize)]
struct Raw {
    seed: Option<u64>,
    #[serde(flatten)]
    rest: toml::Table,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: Raw = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = raw.rest;
        if let Some(seed) = raw.seed {
            ensure!(
                !table.contains_key("seeds"),
                Config,
                "give either `seed` or `seeds`, not both"
            );
            table.insert("seeds".into(), toml::Value::Array(vec![toml::Value::Integer(seed as i64)]));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), Config, "seeds must not be empty");
        ensure!(self.jobs >= 1, Config, "jobs must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.eta),
            Config,
            "eta {} outside [0, 1)",
            self.eta
        );
        self.data.validate()?;
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        self.ract.validate()?;
        self.theory
            .validate()
            .map_err(|e| Error::Config(format!("theory: {e}")))?;
        if let Some(m) = &self.mnist {
            m.validate()?;
        }
        let s = &self.sweep;
        ensure!(!s.ranks.is_empty(), Config, "sweep.ranks must not be empty");
        ensure!(!s.noise_rates.is_empty(), Config, "sweep.noise_rates must not be empty");
        ensure!(
            s.noise_rates.iter().all(|e| (0.0..1.0).contains(e)),
            Config,
            "sweep.noise_rates must lie in [0, 1)"
        );
        ensure!(!s.taus.is_empty(), Config, "sweep.taus must not be empty");
        ensure!(!s.pairs.is_empty(), Config, "sweep.pairs must not be empty");
        ensure!(s.window >= 1, Config, "sweep.window must be >= 1");
        ensure!(s.frac > 0.0 && s.frac < 1.0, Config, "sweep.frac outside (0, 1)");
        Ok(())
    }

    /// Checks the parts a given kind needs.
    pub fn validate_for(&self, kind: Kind) -> Result<()> {
        if let Some(k) = self.kind {
            ensure!(
                k == kind,
                Config,
                "config is for `{}` but `{}` was requested",
                k.name(),
                kind.name()
            );
        }
        match kind {
            Kind::MnistRact => {
                ensure!(self.mnist.is_some(), Config, "mnist-ract needs an [mnist] table");
            }
            Kind::Ranksweep => {
                ensure!(
                    self.data.eval_fraction > 0.0,
                    Config,
                    "ranksweep needs data.eval_fraction > 0"
                );
            }
            Kind::Temporal => {
                ensure!(self.eta > 0.0, Config, "temporal needs eta > 0");
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_ract_config_is_defaulted() {
        let cfg = ExperimentConfig::parse("kind = \"ract\"\neta = 0.3\nseed = 42\n").unwrap();
        assert_eq!(cfg.kind, Some(Kind::Ract));
        assert_eq!(cfg.seeds, vec![42]);
        assert_eq!(cfg.ract.r_low, 4);
        assert_eq!(cfg.ract.r_high, 16);
        assert_eq!(cfg.ract.tau, 0.3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.ract.phase1.weight_decay, 0.01);
    }

    #[test]
    fn default_seeds() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.seeds, vec![42, 123, 456]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("[train]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rte"), "{err}");
        let err = ExperimentConfig::parse("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(ExperimentConfig::parse("seeds = []\n").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseeds = [2]\n").is_err());
    }

    #[test]
    fn malformed_reports_position() {
        let err = ExperimentConfig::parse("eta = \n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn kind_mismatch() {
        let cfg = ExperimentConfig::parse("kind = \"memorize\"\n").unwrap();
        assert!(cfg.validate_for(Kind::Ract).is_err());
        assert!(cfg.validate_for(Kind::Memorize).is_ok());
        assert!(ExperimentConfig::parse("").unwrap().validate_for(Kind::MnistRact).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::parse("kind = \"rankgap\"\n[sweep]\npairs = [[1, 2]]\n").unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }
}
