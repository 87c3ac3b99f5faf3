use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{ExperimentConfig, Kind};
use super::table::{emit_csv, Cell, Table};
use crate::error::{Error, Result};
use crate::ract::{rank_gap_sweep, ract_seeds, threshold_sweep, RactConfig, RactResult};
use crate::setup::Instance;
use crate::theory::{
    memorization_sweep, optimal_rank_exact, rank_tradeoff_sweep, summarize, half_lives,
};

pub const MEMORIZATION_HEADER: [&str; 4] = ["rank", "noise_rate", "seed", "final_train_acc"];
pub const TEMPORAL_HEADER: [&str; 6] =
    ["epoch", "seed", "clean_loss", "noisy_loss", "train_acc", "detect_f1"];
pub const RANKSWEEP_HEADER: [&str; 5] = ["rank", "noise_rate", "seed", "eval_err", "bias_proxy"];
pub const RACT_HEADER: [&str; 9] = [
    "seed", "accuracy", "precision", "recall", "f1", "n_flagged", "tau", "r_low", "r_high",
];
pub const THRESHOLD_HEADER: [&str; 4] = ["tau", "precision", "recall", "f1"];
pub const RANKGAP_HEADER: [&str; 5] = ["r_low", "r_high", "seed", "accuracy", "f1"];
pub const SUMMARY_HEADER: [&str; 5] = ["metric", "group", "mean", "std", "count"];

/// Output file name of each kind's main table.
pub fn table_name(kind: Kind) -> &'static str {
    match kind {
        Kind::Memorize => "memorization_grid.csv",
        Kind::Temporal => "temporal.csv",
        Kind::Ranksweep => "ranksweep.csv",
        Kind::Ract | Kind::MnistRact => "ract_summary.csv",
        Kind::Threshold => "threshold.csv",
        Kind::Rankgap => "rankgap.csv",
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub kind: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub duration_secs: f64,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

/// Accumulates per-group samples for the mean ± std summary, keeping
/// insertion order of (metric, group).
#[derive(Default)]
struct Summary {
    order: Vec<(String, String)>,
    values: BTreeMap<(String, String), Vec<f64>>,
}

impl Summary {
    fn add(&mut self, metric: &str, group: impl Into<String>, value: f64) {
        let key = (metric.to_string(), group.into());
        if !self.values.contains_key(&key) {
            self.order.push(key.clone());
        }
        self.values.entry(key).or_default().push(value);
    }

    fn table(&self) -> Result<Table> {
        let mut t = Table::new(&SUMMARY_HEADER);
        for key in &self.order {
            let s = summarize(&self.values[key]).expect("nonempty group");
            t.push(vec![
                key.0.as_str().into(),
                key.1.as_str().into(),
                s.mean.into(),
                s.std.into(),
                s.count.into(),
            ])?;
        }
        Ok(t)
    }
}

fn with_context(kind: Kind, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{}: {m}", kind.name())),
        Error::Config(m) => Error::Config(format!("{}: {m}", kind.name())),
        Error::Argument(m) => Error::Argument(format!("{}: {m}", kind.name())),
        other => other,
    }
}

/// Runs one experiment kind and writes its tables, `summary.csv` and
/// `manifest.toml` into `out`.
pub fn run(kind: Kind, cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    cfg.validate_for(kind)?;
    let start = Instant::now();
    let (main, summary) = execute(kind, cfg).map_err(|e| with_context(kind, e))?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut files = Vec::new();
    for (name, table) in [(table_name(kind), main), ("summary.csv", summary.table()?)] {
        emit_csv(&table, &out.join(name))?;
        files.push(name.to_string());
    }
    files.push("manifest.toml".to_string());
    let manifest = RunManifest {
        kind: kind.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: cfg.seeds.clone(),
        duration_secs: start.elapsed().as_secs_f64(),
        files,
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = out.join("manifest.toml");
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Default output directory for `kind`.
pub fn default_out(kind: Kind) -> PathBuf {
    PathBuf::from("results").join(kind.name())
}

fn execute(kind: Kind, cfg: &ExperimentConfig) -> Result<(Table, Summary)> {
    match kind {
        Kind::Memorize => memorize(cfg),
        Kind::Temporal => temporal(cfg),
        Kind::Ranksweep => ranksweep(cfg),
        Kind::Ract => {
            let results = ract_seeds(|s| cfg.data.build(cfg.eta, s), &cfg.ract, &cfg.seeds, cfg.jobs)?;
            ract_tables(&results)
        }
        Kind::MnistRact => {
            let spec = cfg.mnist.as_ref().expect("validated");
            let full = spec.load()?;
            let results = ract_seeds(|s| spec.build_from(&full, cfg.eta, s), &cfg.ract, &cfg.seeds, cfg.jobs)?;
            ract_tables(&results)
        }
        Kind::Threshold => threshold(cfg),
        Kind::Rankgap => rankgap(cfg),
    }
}

fn eta_group(eta: f64) -> String {
    format!("noise_rate={eta}")
}

fn memorize(cfg: &ExperimentConfig) -> Result<(Table, Summary)> {
    let s = &cfg.sweep;
    let res = memorization_sweep(&s.ranks, &s.noise_rates, &cfg.data, &cfg.train, &cfg.seeds, cfg.jobs)?;
    let mut t = Table::new(&MEMORIZATION_HEADER);
    let mut sum = Summary::default();
    for r in &res.records {
        t.push(vec![r.rank.into(), r.noise_rate.into(), r.seed.into(), r.final_train_acc.into()])?;
        sum.add(
            "final_train_acc",
            format!("rank={};{}", r.rank, eta_group(r.noise_rate)),
            r.final_train_acc,
        );
    }
    Ok((t, sum))
}

fn ranksweep(cfg: &ExperimentConfig) -> Result<(Table, Summary)> {
    let s = &cfg.sweep;
    let res = rank_tradeoff_sweep(&s.ranks, &s.noise_rates, &cfg.data, &cfg.train, &cfg.seeds, cfg.jobs)?;
    let mut t = Table::new(&RANKSWEEP_HEADER);
    let mut sum = Summary::default();
    for r in &res.records {
        t.push(vec![
            r.rank.into(),
            r.noise_rate.into(),
            r.seed.into(),
            r.eval_err.into(),
            r.bias_proxy.into(),
        ])?;
        sum.add("eval_err", format!("rank={};{}", r.rank, eta_group(r.noise_rate)), r.eval_err);
    }
    let n_train = cfg.data.n as f64 * (1.0 - cfg.data.eval_fraction);
    for &eta in &s.noise_rates {
        for &seed in &cfg.seeds {
            if let Some(r) = res.argmin_rank(eta, seed) {
                sum.add("argmin_rank", eta_group(eta), r as f64);
            }
        }
        let predicted = optimal_rank_exact(
            n_train,
            cfg.data.d as f64,
            eta,
            cfg.data.teacher_alpha,
            &cfg.theory,
        )?;
        sum.add("predicted_optimal_rank", eta_group(eta), predicted);
    }
    Ok((t, sum))
}

/// Phase-1 dual run only: no retraining.
fn tracking_config(cfg: &ExperimentConfig) -> RactConfig {
    RactConfig {
        phase4: false,
        baseline: false,
        ..cfg.ract.clone()
    }
}

fn temporal(cfg: &ExperimentConfig) -> Result<(Table, Summary)> {
    let rcfg = RactConfig {
        t_star_window: cfg.sweep.window,
        t_star_frac: cfg.sweep.frac,
        ..tracking_config(cfg)
    };
    let results = ract_seeds(|s| cfg.data.build(cfg.eta, s), &rcfg, &cfg.seeds, cfg.jobs)?;
    let mut t = Table::new(&TEMPORAL_HEADER);
    let mut sum = Summary::default();
    for r in &results {
        for (epoch, stats) in r.history_high.timeline().enumerate() {
            t.push(vec![
                epoch.into(),
                r.seed.into(),
                stats.clean_loss.into(),
                stats.noisy_loss.into(),
                stats.train_acc.into(),
                r.detect_f1_trace[epoch].into(),
            ])?;
        }
        let group = format!("rank={}", r.r_high);
        if let Some(ts) = r.t_star_high {
            sum.add("t_star", group.as_str(), ts as f64);
        }
        let (clean, noisy) = half_lives(&r.history_high)?;
        if let Some(h) = clean {
            sum.add("clean_half_life", group.as_str(), h as f64);
        }
        if let Some(h) = noisy {
            sum.add("noisy_half_life", group.as_str(), h as f64);
        }
        let (best, peak) = r
            .detect_f1_trace
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &f)| if f > acc.1 { (i, f) } else { acc });
        sum.add("peak_detect_f1", group.as_str(), peak);
        sum.add("peak_detect_f1_epoch", group.as_str(), best as f64);
    }
    Ok((t, sum))
}

fn ract_tables(results: &[RactResult]) -> Result<(Table, Summary)> {
    let mut t = Table::new(&RACT_HEADER);
    let mut sum = Summary::default();
    for r in results {
        let m = &r.metrics;
        t.push(vec![
            r.seed.into(),
            r.accuracy().into(),
            m.precision.into(),
            m.recall.into(),
            m.f1.into(),
            r.n_noisy.into(),
            r.tau.into(),
            r.r_low.into(),
            r.r_high.into(),
        ])?;
        let group = format!("r_low={};r_high={}", r.r_low, r.r_high);
        for (name, v) in [
            ("accuracy", r.accuracy()),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
            ("n_flagged", r.n_noisy as f64),
            ("tau", r.tau),
            ("phase1_epochs", r.e1 as f64),
            ("low_rank_accuracy", r.low_accuracy),
        ] {
            sum.add(name, group.as_str(), v);
        }
        if let Some(b) = r.baseline_accuracy {
            sum.add("baseline_accuracy", group.as_str(), b);
        }
    }
    Ok((t, sum))
}

fn threshold(cfg: &ExperimentConfig) -> Result<(Table, Summary)> {
    let inst = |s| cfg.data.build(cfg.eta, s);
    let results = ract_seeds(inst, &tracking_config(cfg), &cfg.seeds, cfg.jobs)?;
    let taus = &cfg.sweep.taus;
    let mut per_seed = Vec::with_capacity(results.len());
    for r in &results {
        let mask = inst(r.seed)?.train.noise_mask;
        per_seed.push(threshold_sweep(&r.discrepancies, &mask, taus)?);
    }
    let mut t = Table::new(&THRESHOLD_HEADER);
    let mut sum = Summary::default();
    for (j, &tau) in taus.iter().enumerate() {
        let group = format!("tau={tau}");
        for rows in &per_seed {
            sum.add("precision", group.as_str(), rows[j].precision);
            sum.add("recall", group.as_str(), rows[j].recall);
            sum.add("f1", group.as_str(), rows[j].f1);
        }
        let mean = |f: fn(&crate::ract::ThresholdRow) -> f64| -> f64 {
            per_seed.iter().map(|rows| f(&rows[j])).sum::<f64>() / per_seed.len() as f64
        };
        t.push(vec![
            tau.into(),
            Cell::Real(mean(|r| r.precision)),
            Cell::Real(mean(|r| r.recall)),
            Cell::Real(mean(|r| r.f1)),
        ])?;
    }
    Ok((t, sum))
}

fn rankgap(cfg: &ExperimentConfig) -> Result<(Table, Summary)> {
    let build = |s| -> Result<Instance> { cfg.data.build(cfg.eta, s) };
    let recs = rank_gap_sweep(&cfg.sweep.pairs, build, &cfg.ract, &cfg.seeds, cfg.jobs)?;
    let mut t = Table::new(&RANKGAP_HEADER);
    let mut sum = Summary::default();
    for r in &recs {
        t.push(vec![r.r_low.into(), r.r_high.into(), r.seed.into(), r.accuracy.into(), r.f1.into()])?;
        let group = format!("r_low={};r_high={}", r.r_low, r.r_high);
        sum.add("accuracy", group.as_str(), r.accuracy);
        sum.add("f1", group.as_str(), r.f1);
    }
    Ok((t, sum))
}
