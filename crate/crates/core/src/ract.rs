//! Rank-aware curriculum training: two adapters of different rank, their
//! per-sample loss gap, thresholded noise flags, and retraining on the
//! unflagged samples.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::datagen::NoisyDataset;
use crate::error::{ensure, Error, Result};
use crate::exec::run_jobs;
use crate::model::{
    evaluate, per_sample_losses, train_with_eval, EpochStats, LoraModel, TrainConfig,
    TrainHistory, Trainer,
};
use crate::setup::{stream, sub_seed, Instance};
use crate::theory::t_star_from_series;

/// Threshold used when the discrepancies carry no ordering information.
pub const DEFAULT_TAU: f64 = 0.3;
const MIN_TAU: f64 = 1e-6;

/// `d_i = loss_high(x_i, ỹ_i) - loss_low(x_i, ỹ_i)` in evaluation mode.
pub fn rank_discrepancy(low: &LoraModel, high: &LoraModel, data: &NoisyDataset) -> Result<Vec<f64>> {
    let l = per_sample_losses(low, data)?;
    let h = per_sample_losses(high, data)?;
    Ok(h.iter().zip(&l).map(|(h, l)| h - l).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
}

/// Flags sample `i` as noisy iff `d_i ≤ -τ`.
pub fn classify_samples(d: &[f64], tau: f64) -> Partition {
    let (noisy, clean) = (0..d.len()).partition(|&i| d[i] <= -tau);
    Partition { clean, noisy }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoThreshold {
    pub tau: f64,
    /// True when all discrepancies were equal and [`DEFAULT_TAU`] was used.
    pub fallback: bool,
}

/// `τ = -d_(m)` with `m = ⌊η̂ n⌋` (the `m`-th smallest discrepancy), so that
/// about `η̂ n` samples are flagged. Clamped to at least `1e-6`.
pub fn auto_threshold(d: &[f64], eta_hat: f64) -> Result<AutoThreshold> {
    ensure!(!d.is_empty(), Argument, "no discrepancies");
    ensure!(
        eta_hat > 0.0 && eta_hat < 1.0,
        Argument,
        "estimated noise rate {eta_hat} outside (0, 1)"
    );
    ensure!(
        d.iter().all(|v| v.is_finite()),
        Numeric,
        "non-finite discrepancy"
    );
    let mut sorted = d.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted[0] == sorted[sorted.len() - 1] {
        return Ok(AutoThreshold {
            tau: DEFAULT_TAU,
            fallback: true,
        });
    }
    let m = (eta_hat * d.len() as f64).floor() as usize;
    let tau = if m == 0 {
        // just past the smallest value: nothing is flagged
        (-sorted[0]).next_up()
    } else {
        -sorted[m - 1]
    };
    Ok(AutoThreshold {
        tau: tau.max(MIN_TAU),
        fallback: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// A ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn detection_metrics(predicted_noisy: &[bool], noise_mask: &[bool]) -> Result<DetectionMetrics> {
    ensure!(
        predicted_noisy.len() == noise_mask.len(),
        Argument,
        "{} predictions vs {} mask entries",
        predicted_noisy.len(),
        noise_mask.len()
    );
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &m) in predicted_noisy.iter().zip(noise_mask) {
        match (p, m) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let degenerate = precision.is_none() || recall.is_none();
    let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    Ok(DetectionMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Detection metrics at each `τ`, in the given order.
pub fn threshold_sweep(d: &[f64], noise_mask: &[bool], taus: &[f64]) -> Result<Vec<ThresholdRow>> {
    ensure!(!taus.is_empty(), Argument, "empty threshold list");
    taus.iter()
        .map(|&tau| {
            let pred: Vec<bool> = d.iter().map(|&v| v <= -tau).collect();
            let m = detection_metrics(&pred, noise_mask)?;
            Ok(ThresholdRow {
                tau,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Use `tau` as given.
    Fixed,
    /// [`auto_threshold`] with `eta_hat`.
    Quantile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOneLength {
    /// `phase1.epochs` for both adapters.
    Fixed,
    /// The high-rank adapter's empirical noise-fitting onset plus
    /// `e1_margin`, capped at `phase1.epochs`. Reads the noise mask.
    AutoTStar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RactConfig {
    pub r_low: usize,
    pub r_high: usize,
    pub threshold_mode: ThresholdMode,
    pub tau: f64,
    pub eta_hat: Option<f64>,
    pub phase1: TrainConfig,
    pub e1_mode: PhaseOneLength,
    pub e1_margin: usize,
    pub t_star_window: usize,
    pub t_star_frac: f64,
    /// Separate epoch count for the low-rank adapter.
    pub low_epochs: Option<usize>,
    /// Average each adapter's per-sample losses over this many trailing
    /// epochs before differencing; 1 uses the final snapshot.
    pub discrepancy_window: usize,
    pub phase4: bool,
    pub phase4_train: TrainConfig,
    /// Also train a rank-`r_low` adapter on all (noisy) samples with the
    /// phase-4 settings, for comparison.
    pub baseline: bool,
}

impl Default for RactConfig {
    fn default() -> Self {
        Self {
            r_low: 4,
            r_high: 16,
            threshold_mode: ThresholdMode::Fixed,
            tau: DEFAULT_TAU,
            eta_hat: None,
            phase1: TrainConfig::default(),
            e1_mode: PhaseOneLength::Fixed,
            e1_margin: 10,
            t_star_window: 5,
            t_star_frac: 0.05,
            low_epochs: None,
            discrepancy_window: 1,
            phase4: true,
            phase4_train: TrainConfig::default(),
            baseline: false,
        }
    }
}

impl RactConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.r_low >= 1 && self.r_low < self.r_high,
            Config,
            "need 1 <= r_low < r_high, got ({}, {})",
            self.r_low,
            self.r_high
        );
        match self.threshold_mode {
            ThresholdMode::Fixed => ensure!(
                self.tau.is_finite() && self.tau > 0.0,
                Config,
                "fixed threshold must be positive, got {}",
                self.tau
            ),
            ThresholdMode::Quantile => match self.eta_hat {
                Some(e) => ensure!(
                    e > 0.0 && e < 1.0,
                    Config,
                    "eta_hat {e} outside (0, 1)"
                ),
                None => return Err(Error::Config("quantile threshold needs eta_hat".into())),
            },
        }
        ensure!(self.t_star_window >= 1, Config, "t_star_window must be >= 1");
        ensure!(
            self.t_star_frac > 0.0 && self.t_star_frac < 1.0,
            Config,
            "t_star_frac outside (0, 1)"
        );
        ensure!(self.discrepancy_window >= 1, Config, "discrepancy_window must be >= 1");
        if let Some(e) = self.low_epochs {
            ensure!(e >= 1, Config, "low_epochs must be >= 1");
        }
        self.phase1.validate().map_err(|e| Error::Config(format!("phase1: {e}")))?;
        self.phase4_train
            .validate()
            .map_err(|e| Error::Config(format!("phase4_train: {e}")))
    }

    fn pick_threshold(&self, d: &[f64]) -> Result<AutoThreshold> {
        match self.threshold_mode {
            ThresholdMode::Fixed => Ok(AutoThreshold {
                tau: self.tau,
                fallback: false,
            }),
            ThresholdMode::Quantile => auto_threshold(d, self.eta_hat.expect("validated")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RactResult {
    pub seed: u64,
    pub r_low: usize,
    pub r_high: usize,
    pub discrepancies: Vec<f64>,
    pub predicted_noisy: Vec<bool>,
    pub tau: f64,
    pub tau_fallback: bool,
    pub metrics: DetectionMetrics,
    pub n_clean: usize,
    pub n_noisy: usize,
    /// Phase-1 epochs of the high-rank adapter.
    pub e1: usize,
    pub t_star_high: Option<usize>,
    pub history_low: TrainHistory,
    pub history_high: TrainHistory,
    /// Detection F1 after each phase-1 epoch (index 0 = initialization),
    /// using the configured threshold rule on that epoch's losses.
    pub detect_f1_trace: Vec<f64>,
    /// Eval accuracy of the retrained adapter; `None` if phase 4 was
    /// disabled or skipped.
    pub phase4_accuracy: Option<f64>,
    pub phase4_skipped: bool,
    /// Eval accuracy of the low-rank phase-1 adapter.
    pub low_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
}

impl RactResult {
    /// Accuracy of the final model: the retrained adapter when phase 4 ran,
    /// else the low-rank phase-1 adapter.
    pub fn accuracy(&self) -> f64 {
        self.phase4_accuracy.unwrap_or(self.low_accuracy)
    }

    /// Mean discrepancy over the truly clean (`false`) or noisy (`true`)
    /// samples, with its standard error.
    pub fn discrepancy_stats(&self, noise_mask: &[bool], noisy: bool) -> Option<(f64, f64)> {
        let v: Vec<f64> = self
            .discrepancies
            .iter()
            .zip(noise_mask)
            .filter(|(_, &m)| m == noisy)
            .map(|(d, _)| *d)
            .collect();
        if v.len() < 2 {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some((mean, (var / n).sqrt()))
    }
}

/// Accuracy against clean labels on `eval`, or on the training inputs when
/// there is no held-out split.
fn clean_accuracy(model: &LoraModel, inst: &Instance) -> Result<f64> {
    let target = inst.eval.as_ref().unwrap_or(&inst.train);
    Ok(evaluate(model, &inst.train, Some(target))?
        .eval_acc
        .expect("eval set given"))
}

struct Track<'a> {
    trainer: Trainer<'a>,
    initial: EpochStats,
    epochs: Vec<EpochStats>,
    recent: VecDeque<Vec<f64>>,
}

impl<'a> Track<'a> {
    fn new(model: LoraModel, data: &'a NoisyDataset, cfg: &TrainConfig, window: usize) -> Result<Self> {
        let trainer = Trainer::new(model, data, cfg)?;
        let (initial, losses) = trainer.stats_with_losses(None)?;
        let mut recent = VecDeque::with_capacity(window);
        recent.push_back(losses);
        Ok(Self {
            trainer,
            initial,
            epochs: Vec::new(),
            recent,
        })
    }

    fn step(&mut self, window: usize) -> Result<()> {
        self.trainer.run_epoch()?;
        let (stats, losses) = self.trainer.stats_with_losses(None)?;
        self.epochs.push(stats);
        if self.recent.len() == window {
            self.recent.pop_front();
        }
        self.recent.push_back(losses);
        Ok(())
    }

    fn mean_losses(&self) -> Vec<f64> {
        let w = self.recent.len() as f64;
        let mut out = vec![0.0; self.recent[0].len()];
        for l in &self.recent {
            out.iter_mut().zip(l).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= w);
        out
    }

    fn history(&self) -> TrainHistory {
        TrainHistory {
            initial: self.initial.clone(),
            epochs: self.epochs.clone(),
            per_sample_losses: self.recent.back().cloned(),
        }
    }
}

fn discrepancy(low: &Track<'_>, high: &Track<'_>) -> Vec<f64> {
    let l = low.mean_losses();
    high.mean_losses().iter().zip(&l).map(|(h, l)| h - l).collect()
}

/// Algorithm 1 on one instance.
///
/// Phase 1 trains both adapters on the same batch order (the training
/// seed is `seed`) from independent initializations. Phases 2-3 score and
/// flag every training sample. Phase 4 trains a fresh rank-`r_low` adapter
/// on the unflagged samples. The noise mask is read only for metrics and,
/// in [`PhaseOneLength::AutoTStar`] mode, to pick the phase-1 length.
pub fn ract_run(inst: &Instance, cfg: &RactConfig, seed: u64) -> Result<RactResult> {
    cfg.validate()?;
    ensure!(
        cfg.r_high <= inst.max_rank(),
        Config,
        "r_high = {} exceeds min(d, k) = {}",
        cfg.r_high,
        inst.max_rank()
    );
    let data = &inst.train;
    let window = cfg.discrepancy_window;
    let p1 = TrainConfig {
        seed,
        early_stop_epoch: None,
        ..cfg.phase1.clone()
    };
    let max_epochs = p1.epochs;
    let low_model = inst.adapter(cfg.r_low, sub_seed(seed, stream::INIT_LOW))?;
    let high_model = inst.adapter(cfg.r_high, sub_seed(seed, stream::INIT_HIGH))?;
    let mut low = Track::new(low_model, data, &p1, window)?;
    let mut high = Track::new(high_model, data, &p1, window)?;

    let mut f1_trace = Vec::with_capacity(max_epochs + 1);
    let mut trace_point = |low: &Track<'_>, high: &Track<'_>| -> Result<()> {
        let d = discrepancy(low, high);
        let tau = cfg.pick_threshold(&d)?.tau;
        let pred: Vec<bool> = d.iter().map(|&v| v <= -tau).collect();
        f1_trace.push(detection_metrics(&pred, &data.noise_mask)?.f1);
        Ok(())
    };
    trace_point(&low, &high)?;

    let mut e1 = max_epochs;
    let mut t_star_high = None;
    let mut noisy_series = vec![high.initial.noisy_loss.unwrap_or(0.0)];
    let auto = cfg.e1_mode == PhaseOneLength::AutoTStar;
    ensure!(
        !auto || data.num_noisy() > 0,
        Config,
        "automatic phase-1 length needs noisy samples"
    );
    let mut epoch = 0;
    loop {
        let low_target = cfg.low_epochs.unwrap_or(e1);
        let step_high = epoch < e1;
        let step_low = epoch < low_target;
        if !step_high && !step_low {
            break;
        }
        epoch += 1;
        match (step_low, step_high) {
            (true, true) => {
                let (a, b) = rayon::join(|| low.step(window), || high.step(window));
                a?;
                b?;
            }
            (true, false) => low.step(window)?,
            (false, true) => high.step(window)?,
            (false, false) => unreachable!(),
        }
        trace_point(&low, &high)?;
        if auto && step_high && t_star_high.is_none() {
            noisy_series.push(high.epochs.last().and_then(|s| s.noisy_loss).unwrap_or(0.0));
            if noisy_series.len() > cfg.t_star_window {
                // the onset at t is only visible once t + window is reached
                let t = noisy_series.len() - 1 - cfg.t_star_window;
                if noisy_series[t] - noisy_series[t + cfg.t_star_window]
                    > cfg.t_star_frac * noisy_series[0]
                {
                    t_star_high = Some(t);
                    e1 = (t + cfg.e1_margin).clamp(epoch, max_epochs);
                }
            }
        }
    }
    if !auto {
        let series: Vec<f64> = high.history().noisy_loss_series().into_iter().flatten().collect();
        if series.len() > cfg.t_star_window {
            t_star_high = t_star_from_series(&series, cfg.t_star_window, cfg.t_star_frac)?;
        }
    }

    let d = discrepancy(&low, &high);
    let threshold = cfg.pick_threshold(&d)?;
    let part = classify_samples(&d, threshold.tau);
    let mut predicted_noisy = vec![false; d.len()];
    part.noisy.iter().for_each(|&i| predicted_noisy[i] = true);
    let metrics = detection_metrics(&predicted_noisy, &data.noise_mask)?;
    let low_accuracy = clean_accuracy(low.trainer.model(), inst)?;

    let p4 = TrainConfig {
        seed,
        ..cfg.phase4_train.clone()
    };
    let (phase4_accuracy, phase4_skipped) = if cfg.phase4 && !part.clean.is_empty() {
        let clean_set = data.subset(&part.clean)?;
        let mut model = inst.adapter(cfg.r_low, sub_seed(seed, stream::INIT_RETRAIN))?;
        train_with_eval(&mut model, &clean_set, None, &p4)?;
        (Some(clean_accuracy(&model, inst)?), false)
    } else {
        (None, cfg.phase4)
    };
    let baseline_accuracy = if cfg.baseline {
        let mut model = inst.adapter(cfg.r_low, sub_seed(seed, stream::INIT_RETRAIN))?;
        train_with_eval(&mut model, data, None, &p4)?;
        Some(clean_accuracy(&model, inst)?)
    } else {
        None
    };

    Ok(RactResult {
        seed,
        r_low: cfg.r_low,
        r_high: cfg.r_high,
        n_clean: part.clean.len(),
        n_noisy: part.noisy.len(),
        discrepancies: d,
        predicted_noisy,
        tau: threshold.tau,
        tau_fallback: threshold.fallback,
        metrics,
        e1: high.epochs.len(),
        t_star_high,
        history_low: low.history(),
        history_high: high.history(),
        detect_f1_trace: f1_trace,
        phase4_accuracy,
        phase4_skipped,
        low_accuracy,
        baseline_accuracy,
    })
}

/// [`ract_run`] for each seed on the instance `build(seed)`.
pub fn ract_seeds<F>(build: F, cfg: &RactConfig, seeds: &[u64], jobs: usize) -> Result<Vec<RactResult>>
where
    F: Fn(u64) -> Result<Instance> + Sync + Send,
{
    ensure!(!seeds.is_empty(), Argument, "no seeds");
    run_jobs(seeds.len(), jobs, |i| ract_run(&build(seeds[i])?, cfg, seeds[i]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankGapRecord {
    pub r_low: usize,
    pub r_high: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub f1: f64,
}

/// One [`ract_run`] per (rank pair, seed), ordered by pair then seed.
pub fn rank_gap_sweep<F>(
    pairs: &[(usize, usize)],
    build: F,
    cfg: &RactConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RankGapRecord>>
where
    F: Fn(u64) -> Result<Instance> + Sync + Send,
{
    ensure!(!pairs.is_empty(), Argument, "no rank pairs");
    ensure!(!seeds.is_empty(), Argument, "no seeds");
    let cells: Vec<((usize, usize), u64)> = pairs
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    run_jobs(cells.len(), jobs, |i| {
        let ((r_low, r_high), seed) = cells[i];
        let pair_cfg = RactConfig {
            r_low,
            r_high,
            ..cfg.clone()
        };
        let res = ract_run(&build(seed)?, &pair_cfg, seed)?;
        Ok(RankGapRecord {
            r_low,
            r_high,
            seed,
            accuracy: res.accuracy(),
            f1: res.metrics.f1,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::setup::SyntheticTask;
    use proptest::prelude::*;

    #[test]
    fn classify_rule() {
        let p = classify_samples(&[-0.5, -0.1, 0.0], 0.3);
        assert_eq!(p.noisy, vec![0]);
        assert_eq!(p.clean, vec![1, 2]);
        assert!(classify_samples(&[-0.5, 0.4], 10.0).noisy.is_empty());
        assert_eq!(classify_samples(&[-0.3, -0.29], 0.3).noisy, vec![0]);
    }

    #[test]
    fn auto_threshold_order_statistic() {
        let mut d = vec![-1.0; 30];
        d.extend(vec![0.0; 70]);
        let t = auto_threshold(&d, 0.3).unwrap();
        assert_eq!(t.tau, 1.0);
        assert!(!t.fallback);
        assert_eq!(classify_samples(&d, t.tau).noisy.len(), 30);
    }

    #[test]
    fn auto_threshold_small_eta_flags_nothing() {
        let d: Vec<f64> = (0..50).map(|i| -(i as f64) / 10.0).collect();
        let t = auto_threshold(&d, 0.01).unwrap();
        assert!(classify_samples(&d, t.tau).noisy.is_empty());
    }

    #[test]
    fn auto_threshold_degenerate_falls_back() {
        let t = auto_threshold(&[0.2; 10], 0.3).unwrap();
        assert_eq!(t.tau, DEFAULT_TAU);
        assert!(t.fallback);
        assert!(auto_threshold(&[0.0, 1.0], 1.0).is_err());
        assert!(auto_threshold(&[], 0.3).is_err());
    }

    #[test]
    fn auto_threshold_clamps_to_floor() {
        let d = [0.5, 1.0, 2.0, 3.0];
        assert_eq!(auto_threshold(&d, 0.5).unwrap().tau, MIN_TAU);
    }

    #[test]
    fn metrics_reproduce_paper_rows() {
        let rows = [
            (98.2, 65.3, 78.5),
            (95.1, 78.8, 86.2),
            (91.5, 89.2, 90.3),
            (87.3, 93.1, 90.1),
            (82.1, 95.8, 88.4),
            (76.5, 97.2, 85.6),
        ];
        for (p, r, f) in rows {
            let got = 100.0 * f1_score(p / 100.0, r / 100.0);
            assert!((got - f).abs() <= 0.1, "{p}/{r}: {got} vs {f}");
        }
        assert!((f1_score(0.915, 0.892) - 0.9033).abs() < 1e-4);
        assert!((f1_score(0.982, 0.653) - 0.7844).abs() < 1e-4);
    }

    #[test]
    fn metrics_perfect_and_degenerate() {
        let mask = [true, false, true, false];
        let m = detection_metrics(&mask, &mask).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert!(!m.degenerate);
        let none = [false; 4];
        let m = detection_metrics(&none, &none).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.degenerate);
        assert!(detection_metrics(&none, &mask[..3]).is_err());
    }

    #[test]
    fn metrics_hand_counts() {
        let pred = [true, true, false, false, true];
        let mask = [true, false, true, false, true];
        let m = detection_metrics(&pred, &mask).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (2, 1, 1));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_sweep_matches_confusion_oracle() {
        let mut rng = Rng::new(4);
        let n = 200;
        let mask: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let d: Vec<f64> = mask
            .iter()
            .map(|&m| if m { -1.0 } else { 0.0 } + 0.3 * rng.standard_normal())
            .collect();
        let taus = [0.1, 0.3, 0.5, 0.8, 1e9];
        let rows = threshold_sweep(&d, &mask, &taus).unwrap();
        for (row, &tau) in rows.iter().zip(&taus) {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let flagged = d[i] <= -tau;
                if flagged && mask[i] {
                    tp += 1.0;
                } else if flagged {
                    fp += 1.0;
                } else if mask[i] {
                    fn_ += 1.0;
                }
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = tp / (tp + fn_);
            assert_eq!(row.precision, p);
            assert_eq!(row.recall, r);
        }
        assert_eq!(rows.last().unwrap().recall, 0.0);
        for w in rows.windows(2) {
            assert!(w[1].recall <= w[0].recall);
        }
        assert!(threshold_sweep(&d, &mask, &[]).is_err());
    }

    #[test]
    fn identical_models_have_zero_discrepancy() {
        let inst = SyntheticTask {
            d: 8,
            k: 6,
            num_classes: 2,
            n: 20,
            teacher_rank: 2,
            ..SyntheticTask::default()
        }
        .build(0.2, 1)
        .unwrap();
        let mut m = inst.adapter(2, 3).unwrap();
        m.b = Rng::new(2).gaussian(8, 2);
        let d = rank_discrepancy(&m, &m, &inst.train).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constructed_discrepancy() {
        // high model fits the label almost exactly, low model has loss 2
        let inst = SyntheticTask {
            d: 2,
            k: 2,
            num_classes: 2,
            n: 2,
            teacher_rank: 1,
            w0_scale: 0.0,
            ..SyntheticTask::default()
        }
        .build(0.0, 1)
        .unwrap();
        let x = inst.train.x.row(0).to_vec();
        let y = inst.train.observed[0];
        let single = inst.train.subset(&[0]).unwrap();
        let mut high = inst.adapter(1, 1).unwrap();
        let mut low = inst.adapter(1, 2).unwrap();
        // make B·A·x put a large margin on class y (high) or a margin giving
        // loss 2 on it (low): loss = ln(1 + e^{-m}) = 2 ⇒ m = -ln(e^2 - 1)
        let set_margin = |m: &mut LoraModel, margin: f64| {
            let h = m.a.matvec(&x).unwrap()[0];
            let s = m.scaling();
            let mut b = vec![0.0; 2];
            b[y] = margin / (s * h);
            m.b = crate::numerics::Matrix::new(2, 1, b).unwrap();
        };
        set_margin(&mut high, 60.0);
        set_margin(&mut low, -(2f64.exp() - 1.0).ln());
        let d = rank_discrepancy(&low, &high, &single).unwrap();
        assert!((d[0] + 2.0).abs() < 1e-12, "{}", d[0]);
    }

    fn tiny_inst(eta: f64, seed: u64) -> Instance {
        SyntheticTask {
            d: 8,
            k: 8,
            num_classes: 2,
            n: 80,
            teacher_rank: 2,
            eval_fraction: 0.25,
            ..SyntheticTask::default()
        }
        .build(eta, seed)
        .unwrap()
    }

    fn tiny_cfg() -> RactConfig {
        RactConfig {
            r_low: 1,
            r_high: 6,
            phase1: TrainConfig {
                epochs: 6,
                ..TrainConfig::default()
            },
            phase4_train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            ..RactConfig::default()
        }
    }

    #[test]
    fn run_is_deterministic_and_consistent() {
        let inst = tiny_inst(0.3, 7);
        let cfg = tiny_cfg();
        let a = ract_run(&inst, &cfg, 7).unwrap();
        let b = ract_run(&inst, &cfg, 7).unwrap();
        assert_eq!(a.discrepancies, b.discrepancies);
        assert_eq!(a.phase4_accuracy, b.phase4_accuracy);
        assert_eq!(a.history_high.epochs, b.history_high.epochs);
        assert_eq!(a.n_clean + a.n_noisy, inst.train.len());
        for (i, &d) in a.discrepancies.iter().enumerate() {
            assert_eq!(a.predicted_noisy[i], d <= -a.tau);
        }
        assert_eq!(a.e1, 6);
        assert_eq!(a.detect_f1_trace.len(), 7);
        assert!(a.phase4_accuracy.is_some());
        assert_eq!(a.accuracy(), a.phase4_accuracy.unwrap());
        // the snapshot discrepancy equals a fresh recomputation
        let last_low = a.history_low.per_sample_losses.as_ref().unwrap();
        let last_high = a.history_high.per_sample_losses.as_ref().unwrap();
        for i in 0..a.discrepancies.len() {
            assert_eq!(a.discrepancies[i], last_high[i] - last_low[i]);
        }
    }

    #[test]
    fn phase4_disabled_has_no_accuracy() {
        let cfg = RactConfig {
            phase4: false,
            ..tiny_cfg()
        };
        let res = ract_run(&tiny_inst(0.3, 2), &cfg, 2).unwrap();
        assert!(res.phase4_accuracy.is_none());
        assert!(!res.phase4_skipped);
        assert_eq!(res.accuracy(), res.low_accuracy);
    }

    #[test]
    fn quantile_mode_flags_expected_count() {
        let cfg = RactConfig {
            threshold_mode: ThresholdMode::Quantile,
            eta_hat: Some(0.3),
            ..tiny_cfg()
        };
        let inst = tiny_inst(0.3, 5);
        let res = ract_run(&inst, &cfg, 5).unwrap();
        assert!(!res.tau_fallback);
        assert!(res.n_noisy >= (0.3 * inst.train.len() as f64).floor() as usize);
    }

    #[test]
    fn auto_e1_and_low_override() {
        let cfg = RactConfig {
            e1_mode: PhaseOneLength::AutoTStar,
            e1_margin: 1,
            t_star_window: 1,
            t_star_frac: 0.01,
            low_epochs: Some(3),
            ..tiny_cfg()
        };
        let res = ract_run(&tiny_inst(0.3, 9), &cfg, 9).unwrap();
        assert_eq!(res.history_low.epoch_count(), 3);
        assert!(res.e1 <= 6);
        if let Some(t) = res.t_star_high {
            assert!(res.e1 >= t.min(6));
        }
    }

    #[test]
    fn trailing_window_changes_discrepancy() {
        let inst = tiny_inst(0.3, 3);
        let a = ract_run(&inst, &tiny_cfg(), 3).unwrap();
        let cfg = RactConfig {
            discrepancy_window: 3,
            ..tiny_cfg()
        };
        let b = ract_run(&inst, &cfg, 3).unwrap();
        assert_ne!(a.discrepancies, b.discrepancies);
        assert_eq!(a.history_high.epochs, b.history_high.epochs);
    }

    #[test]
    fn config_validation() {
        assert!(RactConfig::default().validate().is_ok());
        let bad = RactConfig {
            r_low: 16,
            r_high: 4,
            ..RactConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RactConfig {
            threshold_mode: ThresholdMode::Quantile,
            ..RactConfig::default()
        };
        assert!(bad.validate().is_err());
        let too_big = RactConfig {
            r_high: 9,
            ..tiny_cfg()
        };
        assert!(ract_run(&tiny_inst(0.3, 1), &too_big, 1).is_err());
    }

    #[test]
    fn rank_gap_single_pair() {
        let recs = rank_gap_sweep(&[(1, 4)], |s| Ok(tiny_inst(0.3, s)), &tiny_cfg(), &[1, 2], 2).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].r_low, recs[0].r_high, recs[0].seed), (1, 4, 1));
        assert_eq!(recs[1].seed, 2);
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive(d in proptest::collection::vec(-3.0f64..3.0, 0..60), tau in 1e-6f64..4.0) {
            let p = classify_samples(&d, tau);
            let mut all: Vec<usize> = p.clean.iter().chain(&p.noisy).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        }

        #[test]
        fn flagged_sets_shrink_with_tau(d in proptest::collection::vec(-3.0f64..3.0, 1..60), t1 in 1e-6f64..2.0, dt in 0.0f64..2.0) {
            let a = classify_samples(&d, t1).noisy;
            let b = classify_samples(&d, t1 + dt).noisy;
            prop_assert!(b.iter().all(|i| a.contains(i)));
        }

        #[test]
        fn recall_never_rises_with_tau(d in proptest::collection::vec(-3.0f64..3.0, 1..60), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mask: Vec<bool> = d.iter().map(|_| rng.next_f64() < 0.4).collect();
            let taus = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
            let rows = threshold_sweep(&d, &mask, &taus).unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
        }

        #[test]
        fn f1_is_harmonic_mean(pred in proptest::collection::vec(any::<bool>(), 1..80), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mask: Vec<bool> = pred.iter().map(|_| rng.next_f64() < 0.3).collect();
            let m = detection_metrics(&pred, &mask).unwrap();
            if m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }

        #[test]
        fn auto_threshold_flags_exact_count_on_distinct_values(seed in any::<u64>(), n in 10usize..200, eta in 0.05f64..0.6) {
            let mut rng = Rng::new(seed);
            // two-component mixture, all values distinct and mostly negative
            let d: Vec<f64> = (0..n)
                .map(|i| if i % 3 == 0 { -2.0 } else { -0.5 } + 0.1 * rng.standard_normal())
                .collect();
            let t = auto_threshold(&d, eta).unwrap();
            let flagged = classify_samples(&d, t.tau).noisy.len();
            prop_assert_eq!(flagged, (eta * n as f64).floor() as usize);
        }
    }
}
