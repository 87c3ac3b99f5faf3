//! Closed-form capacity, rank and timing quantities, and the sweeps that
//! put them next to measured training behaviour.

use serde::{Deserialize, Serialize};

use crate::datagen::{NoisyDataset, Teacher};
use crate::error::{ensure, Error, Result};
use crate::exec::run_jobs;
use crate::model::{evaluate, train_with_eval, LoraModel, Target, TrainConfig, TrainHistory};
use crate::numerics::spectral::{top_singular_values, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::numerics::Matrix;
use crate::setup::{stream, sub_seed, SyntheticTask};

/// Hidden constants of the error decomposition and of `t*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConstants {
    pub c_bias: f64,
    pub c_var: f64,
    pub c_noise: f64,
    pub c_tstar: f64,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        Self {
            c_bias: 1.0,
            c_var: 1.0,
            c_noise: 1.0,
            c_tstar: 1.0,
        }
    }
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_bias", self.c_bias),
            ("c_var", self.c_var),
            ("c_noise", self.c_noise),
            ("c_tstar", self.c_tstar),
        ] {
            ensure!(v.is_finite() && v > 0.0, Argument, "{name} must be positive, got {v}");
        }
        Ok(())
    }
}

/// Degrees of freedom of a rank-`r` update of a `d×k` matrix: `r(d+k-r)`.
pub fn capacity(r: usize, d: usize, k: usize) -> Result<usize> {
    ensure!(
        r <= d.min(k),
        Argument,
        "rank {r} exceeds min(d, k) = {}",
        d.min(k)
    );
    Ok(r * (d + k - r))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorDecomposition {
    pub bias: f64,
    pub variance: f64,
    pub noise: f64,
    pub total: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    ensure!((0.0..1.0).contains(&eta), Argument, "noise rate {eta} outside [0, 1)");
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    ensure!(v.is_finite() && v > 0.0, Argument, "{name} must be positive, got {v}");
    Ok(())
}

/// `bias = c_b r^{-2α}`, `variance = c_v r d / n`, `noise = c_n η r d / n`.
pub fn error_decomposition(
    r: f64,
    n: f64,
    d: f64,
    eta: f64,
    alpha: f64,
    consts: &TheoryConstants,
) -> Result<ErrorDecomposition> {
    check_positive("rank", r)?;
    check_positive("n", n)?;
    check_positive("d", d)?;
    check_positive("alpha", alpha)?;
    check_eta(eta)?;
    consts.validate()?;
    let bias = consts.c_bias * r.powf(-2.0 * alpha);
    let variance = consts.c_var * r * d / n;
    let noise = consts.c_noise * eta * r * d / n;
    Ok(ErrorDecomposition {
        bias,
        variance,
        noise,
        total: bias + variance + noise,
    })
}

/// Scaling form of the optimal rank with unit constants:
/// `(n / (d (1+η)))^{1/(2α+1)}`. Accepts the endpoint `η = 1`.
pub fn optimal_rank_scaling(n: f64, d: f64, eta: f64, alpha: f64) -> Result<f64> {
    check_positive("n", n)?;
    check_positive("d", d)?;
    check_positive("alpha", alpha)?;
    ensure!((0.0..=1.0).contains(&eta), Argument, "noise rate {eta} outside [0, 1]");
    Ok((n / (d * (1.0 + eta))).powf(1.0 / (2.0 * alpha + 1.0)))
}

/// Exact minimizer over `r > 0` of [`error_decomposition`]'s total:
/// `(2α c_b n / ((c_v + c_n η) d))^{1/(2α+1)}`.
pub fn optimal_rank_exact(
    n: f64,
    d: f64,
    eta: f64,
    alpha: f64,
    consts: &TheoryConstants,
) -> Result<f64> {
    check_positive("n", n)?;
    check_positive("d", d)?;
    check_positive("alpha", alpha)?;
    check_eta(eta)?;
    consts.validate()?;
    let slope = (consts.c_var + consts.c_noise * eta) * d / n;
    Ok((2.0 * alpha * consts.c_bias / slope).powf(1.0 / (2.0 * alpha + 1.0)))
}

/// The rank in `grid` with the smallest predicted total error; ties go to
/// the smaller rank.
pub fn optimal_rank_on_grid(
    grid: &[usize],
    n: f64,
    d: f64,
    eta: f64,
    alpha: f64,
    consts: &TheoryConstants,
) -> Result<usize> {
    ensure!(!grid.is_empty(), Argument, "empty rank grid");
    let mut best: Option<(usize, f64)> = None;
    for &r in grid {
        let total = error_decomposition(r as f64, n, d, eta, alpha, consts)?.total;
        match best {
            Some((br, bt)) if bt < total || (bt == total && br <= r) => {}
            _ => best = Some((r, total)),
        }
    }
    Ok(best.expect("nonempty grid").0)
}

/// Noise-learning threshold; infinite when there is no noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TStar {
    Finite(f64),
    Unbounded,
}

impl TStar {
    pub fn value(self) -> f64 {
        match self {
            TStar::Finite(t) => t,
            TStar::Unbounded => f64::INFINITY,
        }
    }
}

/// `t* = c · ln(1/η) / (γ σ_r)`.
pub fn noise_threshold_t_star(gamma: f64, sigma_r: f64, eta: f64, c_tstar: f64) -> Result<TStar> {
    check_positive("learning rate", gamma)?;
    check_positive("sigma_r", sigma_r)?;
    check_positive("c_tstar", c_tstar)?;
    ensure!(
        (0.0..=1.0).contains(&eta),
        Argument,
        "noise rate {eta} outside [0, 1]"
    );
    if eta == 0.0 {
        return Ok(TStar::Unbounded);
    }
    Ok(TStar::Finite(c_tstar * (1.0 / eta).ln() / (gamma * sigma_r)))
}

/// First `t` with `s[t] - s[t+window] > frac · s[0]`.
pub fn t_star_from_series(series: &[f64], window: usize, frac: f64) -> Result<Option<usize>> {
    ensure!(window >= 1, Argument, "window must be >= 1");
    ensure!(frac > 0.0 && frac < 1.0, Argument, "frac {frac} outside (0, 1)");
    ensure!(
        series.len() > window,
        Argument,
        "series of {} points is too short for window {window}",
        series.len()
    );
    let drop = frac * series[0];
    Ok((0..series.len() - window).find(|&t| series[t] - series[t + window] > drop))
}

fn noisy_series(history: &TrainHistory) -> Result<Vec<f64>> {
    history
        .noisy_loss_series()
        .into_iter()
        .map(|v| v.ok_or_else(|| Error::Argument("history has no noisy samples".into())))
        .collect()
}

/// Empirical onset of noise fitting: the first epoch (0 = initialization)
/// after which the noisy-sample loss falls by more than `frac` of its
/// initial value within `window` epochs.
pub fn estimate_t_star_empirical(
    history: &TrainHistory,
    window: usize,
    frac: f64,
) -> Result<Option<usize>> {
    t_star_from_series(&noisy_series(history)?, window, frac)
}

/// First index at which `series` drops below half its initial value.
pub fn half_life(series: &[f64]) -> Option<usize> {
    let first = *series.first()?;
    series.iter().position(|&v| v < 0.5 * first)
}

/// Clean- and noisy-loss half-lives of a run, in epochs.
pub fn half_lives(history: &TrainHistory) -> Result<(Option<usize>, Option<usize>)> {
    let clean: Vec<f64> = history
        .clean_loss_series()
        .into_iter()
        .map(|v| v.ok_or_else(|| Error::Argument("history has no clean samples".into())))
        .collect::<Result<_>>()?;
    Ok((half_life(&clean), half_life(&noisy_series(history)?)))
}

/// `r`-th eigenvalue of the uncentered clean-gradient covariance
/// `E[∇L ∇Lᵀ]`, with the gradient taken over `(B, A)` at the model's
/// current parameters and scored against clean labels.
pub fn gradient_covariance_sigma_r(model: &LoraModel, clean: &NoisyDataset, r: usize) -> Result<f64> {
    model.check_data(clean)?;
    ensure!(r >= 1, Argument, "r must be >= 1");
    let m = clean.len();
    let p = model.b.as_slice().len() + model.a.as_slice().len();
    ensure!(
        r <= m.min(p),
        Argument,
        "r = {r} exceeds the spectrum of {m} gradients of dimension {p}"
    );
    let inv = 1.0 / (m as f64).sqrt();
    let mut rows = Vec::with_capacity(m * p);
    for i in 0..m {
        let x = clean.x.row(i);
        let logits = model.forward(x)?;
        let target = match &clean.targets {
            Some(t) => Target::Vector(t.row(i)),
            None => Target::Class(clean.clean[i]),
        };
        let (_, g) = model.loss_grad(&logits, target)?;
        let (gb, ga) = model.backward(x, &g)?;
        rows.extend(gb.as_slice().iter().chain(ga.as_slice()).map(|v| v * inv));
    }
    let stacked = Matrix::new(m, p, rows)?;
    let sv = top_singular_values(&stacked, r, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    Ok(sv.values[r - 1].powi(2))
}

/// `-slope/2` of the least-squares line through `(ln r, ln bias)`.
pub fn fit_alpha(ranks: &[f64], bias: &[f64]) -> Result<f64> {
    ensure!(
        ranks.len() == bias.len(),
        Argument,
        "{} ranks vs {} bias values",
        ranks.len(),
        bias.len()
    );
    ensure!(ranks.len() >= 3, Argument, "need at least 3 rank points");
    ensure!(
        ranks.iter().chain(bias).all(|v| v.is_finite() && *v > 0.0),
        Argument,
        "ranks and bias values must be positive"
    );
    let xs: Vec<f64> = ranks.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = bias.iter().map(|b| b.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    ensure!(sxx > 0.0, Argument, "ranks must not all be equal");
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(-(sxy / sxx) / 2.0)
}

/// [`fit_alpha`] on a teacher's tail energies at `ranks`.
pub fn fit_alpha_teacher(teacher: &Teacher, ranks: &[usize]) -> Result<f64> {
    let bias: Vec<f64> = ranks.iter().map(|&r| teacher.tail_energy(r)).collect();
    let ranks: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    fit_alpha(&ranks, &bias)
}

/// Mean and sample standard deviation; the deviation is absent for a
/// single value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    Some(Summary {
        mean,
        std,
        count: values.len(),
    })
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemorizationRecord {
    pub rank: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub final_train_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffRecord {
    pub rank: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Error on the held-out split, against clean labels.
    pub eval_err: f64,
    /// Teacher energy beyond rank `r`, relative to the total.
    pub bias_proxy: f64,
}

/// Records of one sweep, ordered by (first axis, second axis, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult<R> {
    pub records: Vec<R>,
}

fn grid<A: Copy, B: Copy>(a: &[A], b: &[B], seeds: &[u64]) -> Vec<(A, B, u64)> {
    let mut cells = Vec::with_capacity(a.len() * b.len() * seeds.len());
    for &x in a {
        for &y in b {
            for &s in seeds {
                cells.push((x, y, s));
            }
        }
    }
    cells
}

fn check_grid(ranks: &[usize], noise_rates: &[f64], seeds: &[u64]) -> Result<()> {
    ensure!(!ranks.is_empty(), Argument, "empty rank grid");
    ensure!(!noise_rates.is_empty(), Argument, "empty noise-rate grid");
    ensure!(!seeds.is_empty(), Argument, "no seeds");
    Ok(())
}

/// Final training accuracy (on observed labels) for every (rank, η, seed),
/// training a fresh adapter each time for the full epoch budget.
pub fn memorization_sweep(
    ranks: &[usize],
    noise_rates: &[f64],
    task: &SyntheticTask,
    train: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult<MemorizationRecord>> {
    check_grid(ranks, noise_rates, seeds)?;
    let cells = grid(ranks, noise_rates, seeds);
    let records = run_jobs(cells.len(), jobs, |i| {
        let (rank, eta, seed) = cells[i];
        let inst = task.build(eta, seed)?;
        let mut model = inst.adapter(rank, sub_seed(seed, stream::INIT))?;
        let cfg = TrainConfig {
            seed,
            early_stop_epoch: None,
            ..train.clone()
        };
        let history = train_with_eval(&mut model, &inst.train, None, &cfg)?;
        Ok(MemorizationRecord {
            rank,
            noise_rate: eta,
            seed,
            final_train_acc: history.final_stats().train_acc.unwrap_or(f64::NAN),
        })
    })?;
    Ok(SweepResult { records })
}

/// Held-out error for every (rank, η, seed). Needs teacher labels and a
/// nonzero eval split.
pub fn rank_tradeoff_sweep(
    ranks: &[usize],
    noise_rates: &[f64],
    task: &SyntheticTask,
    train: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult<TradeoffRecord>> {
    check_grid(ranks, noise_rates, seeds)?;
    ensure!(
        task.eval_fraction > 0.0,
        Config,
        "rank trade-off sweep needs eval_fraction > 0"
    );
    let cells = grid(noise_rates, ranks, seeds);
    let records = run_jobs(cells.len(), jobs, |i| {
        let (eta, rank, seed) = cells[i];
        let inst = task.build(eta, seed)?;
        let teacher = inst.teacher.as_ref().ok_or_else(|| {
            Error::Config("rank trade-off sweep needs teacher labels".into())
        })?;
        let eval = inst.eval.as_ref().expect("eval split requested");
        let mut model = inst.adapter(rank, sub_seed(seed, stream::INIT))?;
        let cfg = TrainConfig {
            seed,
            ..train.clone()
        };
        train_with_eval(&mut model, &inst.train, None, &cfg)?;
        let acc = evaluate(&model, &inst.train, Some(eval))?
            .eval_acc
            .expect("eval set given");
        Ok(TradeoffRecord {
            rank,
            noise_rate: eta,
            seed,
            eval_err: 1.0 - acc,
            bias_proxy: teacher.tail_energy(rank) / teacher.tail_energy(0),
        })
    })?;
    Ok(SweepResult { records })
}

impl SweepResult<TradeoffRecord> {
    /// Rank with the lowest eval error for one (η, seed); ties go to the
    /// smaller rank.
    pub fn argmin_rank(&self, noise_rate: f64, seed: u64) -> Option<usize> {
        self.records
            .iter()
            .filter(|r| r.noise_rate == noise_rate && r.seed == seed)
            .min_by(|a, b| a.eval_err.total_cmp(&b.eval_err).then(a.rank.cmp(&b.rank)))
            .map(|r| r.rank)
    }

    /// Median over seeds of [`Self::argmin_rank`].
    pub fn median_argmin(&self, noise_rate: f64) -> Option<f64> {
        let mut seeds: Vec<u64> = self
            .records
            .iter()
            .filter(|r| r.noise_rate == noise_rate)
            .map(|r| r.seed)
            .collect();
        seeds.dedup();
        seeds.sort_unstable();
        seeds.dedup();
        let picks: Vec<f64> = seeds
            .iter()
            .filter_map(|&s| self.argmin_rank(noise_rate, s))
            .map(|r| r as f64)
            .collect();
        median(&picks)
    }
}

impl SweepResult<MemorizationRecord> {
    /// Median over seeds of the final accuracy at (rank, η).
    pub fn median_accuracy(&self, rank: usize, noise_rate: f64) -> Option<f64> {
        let accs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.rank == rank && r.noise_rate == noise_rate)
            .map(|r| r.final_train_acc)
            .collect();
        median(&accs)
    }
}

/// One tracked training run for the timing experiments.
#[derive(Clone, Debug)]
pub struct TemporalRun {
    pub rank: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub history: TrainHistory,
    pub t_star: Option<usize>,
    pub clean_half_life: Option<usize>,
    pub noisy_half_life: Option<usize>,
}

/// Trains one adapter per (rank, η, seed) and extracts its timing markers.
#[allow(clippy::too_many_arguments)]
pub fn temporal_sweep(
    ranks: &[usize],
    noise_rates: &[f64],
    task: &SyntheticTask,
    train: &TrainConfig,
    seeds: &[u64],
    window: usize,
    frac: f64,
    jobs: usize,
) -> Result<Vec<TemporalRun>> {
    check_grid(ranks, noise_rates, seeds)?;
    ensure!(
        noise_rates.iter().all(|&e| e > 0.0),
        Argument,
        "timing runs need a positive noise rate"
    );
    let cells = grid(noise_rates, ranks, seeds);
    run_jobs(cells.len(), jobs, |i| {
        let (eta, rank, seed) = cells[i];
        let inst = task.build(eta, seed)?;
        let mut model = inst.adapter(rank, sub_seed(seed, stream::INIT))?;
        let cfg = TrainConfig {
            seed,
            ..train.clone()
        };
        let history = train_with_eval(&mut model, &inst.train, None, &cfg)?;
        let t_star = estimate_t_star_empirical(&history, window, frac)?;
        let (clean_half_life, noisy_half_life) = half_lives(&history)?;
        Ok(TemporalRun {
            rank,
            noise_rate: eta,
            seed,
            history,
            t_star,
            clean_half_life,
            noisy_half_life,
        })
    })
}
