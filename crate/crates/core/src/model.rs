//! LoRA-adapted linear predictor and its training loop.
//!
//! The predictor is `z = (W0 + s·B·A)·x` with `s = lora_alpha / r`. `W0`
//! stays frozen; only `B` (`d×r`, zero at init) and `A` (`r×k`, Kaiming
//! uniform at init) are trained. For classification the `d` outputs are read
//! through the grouped softmax of [`crate::numerics::loss::grouped_cross_entropy`].

use serde::{Deserialize, Serialize};

use crate::datagen::{NoisyDataset, Task};
use crate::error::{ensure, Error, Result};
use crate::numerics::loss::{class_scores, grouped_cross_entropy, squared_loss};
use crate::numerics::matrix::argmax;
use crate::numerics::{AdamW, AdamWConfig, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModel {
    pub w0: Matrix,
    pub b: Matrix,
    pub a: Matrix,
    rank: usize,
    lora_alpha: f64,
    dropout_p: f64,
    task: Task,
}

/// Initializes a rank-`r` adapter on `w0`: `A` Kaiming-uniform with
/// `fan_in = k`, `B = 0`. The task defaults to classification with one
/// output unit per class.
pub fn lora_init(w0: Matrix, rank: usize, lora_alpha: f64, seed: u64) -> Result<LoraModel> {
    let (d, k) = w0.shape();
    ensure!(
        rank >= 1 && rank <= d.min(k),
        Argument,
        "rank {rank} outside [1, {}] for a {d}x{k} base",
        d.min(k)
    );
    ensure!(
        lora_alpha > 0.0 && lora_alpha.is_finite(),
        Argument,
        "lora_alpha must be positive"
    );
    let a = Rng::new(seed).kaiming_uniform(k, rank, k);
    Ok(LoraModel {
        b: Matrix::zeros(d, rank),
        a,
        w0,
        rank,
        lora_alpha,
        dropout_p: 0.0,
        task: Task::Classification { num_classes: d },
    })
}

/// Per-sample activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `A·x` after dropout (and its rescaling).
    pub hidden: Vec<f64>,
    /// Per-entry dropout multiplier (0 or `1/(1-p)`); `None` without dropout.
    pub keep: Option<Vec<f64>>,
}

impl LoraModel {
    pub fn with_task(mut self, task: Task) -> Result<Self> {
        if let Task::Classification { num_classes } = task {
            ensure!(
                num_classes >= 2 && num_classes <= self.out_dim(),
                Argument,
                "{num_classes} classes for {} output units",
                self.out_dim()
            );
        }
        self.task = task;
        Ok(self)
    }

    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        ensure!((0.0..1.0).contains(&p), Argument, "dropout {p} outside [0, 1)");
        self.dropout_p = p;
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha
    }

    pub fn dropout(&self) -> f64 {
        self.dropout_p
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    /// Output dimension `d`.
    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    /// Input dimension `k`.
    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    /// `s·B·A`, materialized.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factor shapes").scale(self.scaling())
    }

    /// `W0 + s·B·A`, materialized.
    pub fn effective_weight(&self) -> Matrix {
        self.w0.add(&self.delta()).expect("same shape")
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        ensure!(
            x.len() == self.in_dim(),
            Argument,
            "input of length {} for a model with k = {}",
            x.len(),
            self.in_dim()
        );
        Ok(())
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let base = self.w0.matvec_unchecked(x);
        Ok(self.forward_from_base(base, x, None).0)
    }

    /// Forward pass on top of precomputed `W0·x`, optionally with dropout on
    /// the hidden `A·x`.
    pub(crate) fn forward_from_base(
        &self,
        mut base: Vec<f64>,
        x: &[f64],
        dropout: Option<&mut Rng>,
    ) -> (Vec<f64>, ForwardCache) {
        let mut hidden = self.a.matvec_unchecked(x);
        let keep = match dropout {
            Some(rng) if self.dropout_p > 0.0 => {
                let scale = 1.0 / (1.0 - self.dropout_p);
                let mask: Vec<f64> = hidden
                    .iter()
                    .map(|_| if rng.next_f64() < self.dropout_p { 0.0 } else { scale })
                    .collect();
                hidden.iter_mut().zip(&mask).for_each(|(h, m)| *h *= m);
                Some(mask)
            }
            _ => None,
        };
        let s = self.scaling();
        let delta = self.b.matvec_unchecked(&hidden);
        base.iter_mut().zip(&delta).for_each(|(z, dz)| *z += s * dz);
        (base, ForwardCache { hidden, keep })
    }

    /// Gradients of a scalar loss with respect to `(B, A)` given the upstream
    /// gradient `g = ∂loss/∂logits`. `W0` gets none.
    pub fn backward(&self, x: &[f64], g: &[f64]) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        ensure!(
            g.len() == self.out_dim(),
            Argument,
            "upstream gradient of length {} for d = {}",
            g.len(),
            self.out_dim()
        );
        let cache = ForwardCache {
            hidden: self.a.matvec_unchecked(x),
            keep: None,
        };
        let mut gb = Matrix::zeros(self.out_dim(), self.rank);
        let mut ga = Matrix::zeros(self.rank, self.in_dim());
        self.accumulate_grads(x, g, &cache, &mut gb, &mut ga);
        Ok((gb, ga))
    }

    /// Adds this sample's `(∂B, ∂A)` into the accumulators.
    pub(crate) fn accumulate_grads(
        &self,
        x: &[f64],
        g: &[f64],
        cache: &ForwardCache,
        grad_b: &mut Matrix,
        grad_a: &mut Matrix,
    ) {
        let s = self.scaling();
        grad_b.add_outer(s, g, &cache.hidden);
        let mut back = self.b.tr_matvec_unchecked(g);
        if let Some(keep) = &cache.keep {
            back.iter_mut().zip(keep).for_each(|(v, k)| *v *= k);
        }
        grad_a.add_outer(s, &back, x);
    }

    /// Per-sample loss and its logit gradient.
    pub(crate) fn loss_grad(&self, logits: &[f64], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
        match (self.task, target) {
            (Task::Classification { num_classes }, Target::Class(label)) => {
                grouped_cross_entropy(logits, label, num_classes)
            }
            (Task::Regression, Target::Vector(t)) => squared_loss(logits, t),
            _ => Err(Error::Argument("target kind does not match the model task".into())),
        }
    }

    /// Evaluation-mode loss of one sample.
    pub fn sample_loss(&self, x: &[f64], target: Target<'_>) -> Result<f64> {
        let logits = self.forward(x)?;
        Ok(self.loss_grad(&logits, target)?.0)
    }

    /// Predicted class: argmax of the per-class scores, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let classes = self.task.num_classes().ok_or_else(|| {
            Error::Argument("predict needs a classification model".into())
        })?;
        let logits = self.forward(x)?;
        Ok(argmax(&class_scores(&logits, classes)))
    }

    /// Checks that `data` fits this model.
    pub fn check_data(&self, data: &NoisyDataset) -> Result<()> {
        ensure!(!data.is_empty(), Argument, "empty dataset");
        ensure!(
            data.input_dim() == self.in_dim(),
            Dimension,
            "dataset inputs have k = {}, model expects {}",
            data.input_dim(),
            self.in_dim()
        );
        match (self.task, data.task) {
            (Task::Classification { num_classes: m }, Task::Classification { num_classes: c }) => {
                ensure!(m == c, Dimension, "model has {m} classes, dataset {c}");
            }
            (Task::Regression, Task::Regression) => {
                let t = data.targets.as_ref().expect("regression data has targets");
                ensure!(
                    t.cols() == self.out_dim(),
                    Dimension,
                    "targets have {} outputs, model {}",
                    t.cols(),
                    self.out_dim()
                );
            }
            _ => return Err(Error::Dimension("model and dataset tasks differ".into())),
        }
        Ok(())
    }
}

/// What one sample is scored against.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Class(usize),
    Vector(&'a [f64]),
}

/// Target of sample `i` against the observed labels.
pub(crate) fn observed_target(data: &NoisyDataset, i: usize) -> Target<'_> {
    match &data.targets {
        Some(t) => Target::Vector(t.row(i)),
        None => Target::Class(data.observed[i]),
    }
}

pub fn predict(model: &LoraModel, x: &[f64]) -> Result<usize> {
    model.predict(x)
}

/// Fraction of rows of `x` whose prediction equals `labels`.
pub fn accuracy(model: &LoraModel, x: &Matrix, labels: &[usize]) -> Result<f64> {
    ensure!(
        x.rows() == labels.len(),
        Argument,
        "{} inputs vs {} labels",
        x.rows(),
        labels.len()
    );
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if model.predict(x.row(i))? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub record_per_sample_losses: bool,
    /// Stop after this many epochs even if `epochs` is larger.
    pub early_stop_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-2,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 42,
            record_per_sample_losses: false,
            early_stop_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Argument, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Argument, "batch size must be >= 1");
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }

    /// Epochs actually run.
    pub fn effective_epochs(&self) -> usize {
        self.early_stop_epoch.map_or(self.epochs, |e| e.min(self.epochs))
    }
}

/// Evaluation-mode statistics after an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean loss over all samples (observed labels).
    pub loss: f64,
    /// Mean loss over samples whose label was not corrupted; `None` if there
    /// are none.
    pub clean_loss: Option<f64>,
    /// Mean loss over corrupted samples; `None` if there are none.
    pub noisy_loss: Option<f64>,
    /// Accuracy against the observed labels (classification only).
    pub train_acc: Option<f64>,
    /// Accuracy of an evaluation set against its clean labels.
    pub eval_acc: Option<f64>,
}

/// Per-epoch record of a training run. `initial` is the untrained state;
/// `epochs[e]` is the state after epoch `e + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub initial: EpochStats,
    pub epochs: Vec<EpochStats>,
    /// Per-sample losses after the last epoch, when requested.
    pub per_sample_losses: Option<Vec<f64>>,
}

impl TrainHistory {
    pub fn epoch_count(&self) -> usize {
        self.epochs.len()
    }

    /// `[initial, after epoch 1, ...]`.
    pub fn timeline(&self) -> impl Iterator<Item = &EpochStats> {
        std::iter::once(&self.initial).chain(&self.epochs)
    }

    pub fn noisy_loss_series(&self) -> Vec<Option<f64>> {
        self.timeline().map(|s| s.noisy_loss).collect()
    }

    pub fn clean_loss_series(&self) -> Vec<Option<f64>> {
        self.timeline().map(|s| s.clean_loss).collect()
    }

    pub fn final_stats(&self) -> &EpochStats {
        self.epochs.last().unwrap_or(&self.initial)
    }
}

/// Evaluation-mode per-sample losses of `model` on `data` (observed labels).
pub fn per_sample_losses(model: &LoraModel, data: &NoisyDataset) -> Result<Vec<f64>> {
    model.check_data(data)?;
    (0..data.len())
        .map(|i| model.sample_loss(data.x.row(i), observed_target(data, i)))
        .collect()
}

fn mean_where(values: &[f64], mask: &[bool], want: bool) -> Option<f64> {
    let (sum, count) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == want)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Statistics of `model` on `data`; `eval` is scored against its clean labels.
pub fn evaluate(model: &LoraModel, data: &NoisyDataset, eval: Option<&NoisyDataset>) -> Result<EpochStats> {
    Ok(evaluate_with_losses(model, data, eval)?.0)
}

/// [`evaluate`] plus the per-sample losses it was computed from, in one
/// pass over `data`.
pub fn evaluate_with_losses(
    model: &LoraModel,
    data: &NoisyDataset,
    eval: Option<&NoisyDataset>,
) -> Result<(EpochStats, Vec<f64>)> {
    model.check_data(data)?;
    let classes = data.task.num_classes();
    let mut losses = Vec::with_capacity(data.len());
    let mut hits = 0usize;
    for i in 0..data.len() {
        let logits = model.forward(data.x.row(i))?;
        losses.push(model.loss_grad(&logits, observed_target(data, i))?.0);
        if let Some(c) = classes {
            if argmax(&class_scores(&logits, c)) == data.observed[i] {
                hits += 1;
            }
        }
    }
    let n = losses.len() as f64;
    let eval_acc = match eval {
        Some(ev) => {
            model.check_data(ev)?;
            Some(accuracy(model, &ev.x, &ev.clean)?)
        }
        None => None,
    };
    let stats = EpochStats {
        loss: losses.iter().sum::<f64>() / n,
        clean_loss: mean_where(&losses, &data.noise_mask, false),
        noisy_loss: mean_where(&losses, &data.noise_mask, true),
        train_acc: classes.map(|_| hits as f64 / n),
        eval_acc,
    };
    Ok((stats, losses))
}

/// Epoch-at-a-time mini-batch AdamW training.
///
/// The data order comes from `cfg.seed` alone, so two trainers built with
/// the same config see the same batches regardless of their models.
pub struct Trainer<'a> {
    model: LoraModel,
    data: &'a NoisyDataset,
    cfg: TrainConfig,
    opt: AdamW,
    order_rng: Rng,
    dropout_rng: Rng,
    order: Vec<usize>,
    base: Matrix,
    epoch: usize,
}

const ORDER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

impl<'a> Trainer<'a> {
    pub fn new(model: LoraModel, data: &'a NoisyDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.check_data(data)?;
        let opt = AdamW::new(&[&model.b, &model.a], cfg.optimizer())?;
        // W0 is frozen, so its outputs are computed once for all epochs.
        let base = data.x.matmul(&model.w0.transpose())?;
        Ok(Self {
            opt,
            order_rng: Rng::derive(cfg.seed, ORDER_STREAM),
            dropout_rng: Rng::derive(cfg.seed, DROPOUT_STREAM),
            order: (0..data.len()).collect(),
            base,
            epoch: 0,
            model,
            data,
            cfg: cfg.clone(),
        })
    }

    pub fn model(&self) -> &LoraModel {
        &self.model
    }

    pub fn into_model(self) -> LoraModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        self.order_rng.shuffle(&mut self.order);
        let (d, r, k) = (self.model.out_dim(), self.model.rank, self.model.in_dim());
        let mut grad_b = Matrix::zeros(d, r);
        let mut grad_a = Matrix::zeros(r, k);
        let order = std::mem::take(&mut self.order);
        for (batch_no, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            grad_b.fill(0.0);
            grad_a.fill(0.0);
            for &i in batch {
                let x = self.data.x.row(i);
                let dropout = (self.model.dropout_p > 0.0).then_some(&mut self.dropout_rng);
                let (logits, cache) =
                    self.model
                        .forward_from_base(self.base.row(i).to_vec(), x, dropout);
                let (loss, g) = self.model.loss_grad(&logits, observed_target(self.data, i))?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {} batch {batch_no}",
                        self.epoch
                    )));
                }
                self.model.accumulate_grads(x, &g, &cache, &mut grad_b, &mut grad_a);
            }
            let inv = 1.0 / batch.len() as f64;
            let grads = vec![grad_b.scale(inv), grad_a.scale(inv)];
            let LoraModel { b, a, .. } = &mut self.model;
            self.opt.step(&mut [b, a], grads).map_err(|e| {
                Error::Numeric(format!("epoch {} batch {batch_no}: {e}", self.epoch))
            })?;
        }
        self.order = order;
        Ok(())
    }

    pub fn stats(&self, eval: Option<&NoisyDataset>) -> Result<EpochStats> {
        evaluate(&self.model, self.data, eval)
    }

    pub fn stats_with_losses(&self, eval: Option<&NoisyDataset>) -> Result<(EpochStats, Vec<f64>)> {
        evaluate_with_losses(&self.model, self.data, eval)
    }
}

/// Trains `model` in place on `data`. The noise mask only feeds the
/// clean/noisy loss split in the history.
pub fn train(model: &mut LoraModel, data: &NoisyDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_eval(model, data, None, cfg)
}

pub fn train_with_eval(
    model: &mut LoraModel,
    data: &NoisyDataset,
    eval: Option<&NoisyDataset>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let mut trainer = Trainer::new(model.clone(), data, cfg)?;
    let initial = trainer.stats(eval)?;
    let mut epochs = Vec::with_capacity(cfg.effective_epochs());
    for _ in 0..cfg.effective_epochs() {
        trainer.run_epoch()?;
        epochs.push(trainer.stats(eval)?);
    }
    *model = trainer.into_model();
    let per_sample_losses = if cfg.record_per_sample_losses {
        Some(per_sample_losses(model, data)?)
    } else {
        None
    };
    Ok(TrainHistory {
        initial,
        epochs,
        per_sample_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{inject_symmetric_noise, make_teacher, sample_dataset};
    use crate::numerics::finite_difference_gradient;

    fn random_model(d: usize, k: usize, r: usize, seed: u64) -> LoraModel {
        let mut rng = Rng::new(seed);
        let mut m = lora_init(rng.gaussian(d, k), r, 16.0, seed + 1).unwrap();
        m.b = rng.gaussian(d, r).scale(0.5);
        m
    }

    #[test]
    fn init_matches_backbone_exactly() {
        let w0 = Rng::new(3).gaussian(5, 7);
        let m = lora_init(w0.clone(), 3, 16.0, 9).unwrap();
        assert_eq!(m.b, Matrix::zeros(5, 3));
        let x: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(m.forward(&x).unwrap(), w0.matvec(&x).unwrap());
    }

    #[test]
    fn rank_bounds() {
        let w0 = Matrix::zeros(4, 6);
        assert!(lora_init(w0.clone(), 4, 16.0, 0).is_ok());
        assert!(matches!(lora_init(w0.clone(), 5, 16.0, 0), Err(Error::Argument(_))));
        assert!(lora_init(w0, 0, 16.0, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let w0 = Matrix::zeros(4, 6);
        let a = lora_init(w0.clone(), 2, 16.0, 5).unwrap();
        let b = lora_init(w0, 2, 16.0, 5).unwrap();
        assert_eq!(a.a, b.a);
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(a.a.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identity_delta() {
        let mut m = lora_init(Matrix::zeros(3, 3), 3, 3.0, 0).unwrap();
        m.a = Matrix::identity(3);
        m.b = Matrix::identity(3);
        let x = [0.5, -2.0, 7.0];
        assert_eq!(m.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let m = random_model(6, 5, 2, 4);
        let dense = m.effective_weight();
        let x: Vec<f64> = Rng::new(10).gaussian(1, 5).into_vec();
        let got = m.forward(&x).unwrap();
        for (i, g) in got.iter().enumerate() {
            let want: f64 = (0..5).map(|j| dense[(i, j)] * x[j]).sum();
            assert!((g - want).abs() < 1e-12);
        }
        assert!(m.forward(&[1.0; 4]).is_err());
    }

    #[test]
    fn backward_zero_cases() {
        let m = random_model(6, 5, 2, 4);
        let (gb, ga) = m.backward(&[0.3; 5], &[0.0; 6]).unwrap();
        assert_eq!(gb, Matrix::zeros(6, 2));
        assert_eq!(ga, Matrix::zeros(2, 5));
        let (gb, ga) = m.backward(&[0.0; 5], &[1.0; 6]).unwrap();
        assert_eq!(gb, Matrix::zeros(6, 2));
        assert_eq!(ga, Matrix::zeros(2, 5));
        assert!(m.backward(&[0.0; 5], &[1.0; 5]).is_err());
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-12)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = random_model(6, 5, 2, 21).with_task(Task::Classification { num_classes: 3 }).unwrap();
        let x: Vec<f64> = Rng::new(1).gaussian(1, 5).into_vec();
        let label = 1;
        let logits = m.forward(&x).unwrap();
        let (_, g) = m.loss_grad(&logits, Target::Class(label)).unwrap();
        let (gb, ga) = m.backward(&x, &g).unwrap();
        let fd_b = finite_difference_gradient(
            |b| {
                let mut p = m.clone();
                p.b = b.clone();
                p.sample_loss(&x, Target::Class(label)).unwrap()
            },
            &m.b,
            1e-5,
        );
        let fd_a = finite_difference_gradient(
            |a| {
                let mut p = m.clone();
                p.a = a.clone();
                p.sample_loss(&x, Target::Class(label)).unwrap()
            },
            &m.a,
            1e-5,
        );
        assert!(rel_err(&gb, &fd_b) < 1e-5);
        assert!(rel_err(&ga, &fd_a) < 1e-5);
    }

    #[test]
    fn dropout_backward_matches_masked_forward() {
        let m = random_model(4, 5, 3, 2).with_dropout(0.5).unwrap();
        let x: Vec<f64> = Rng::new(4).gaussian(1, 5).into_vec();
        let mut rng = Rng::new(8);
        let base = m.w0.matvec(&x).unwrap();
        let (logits, cache) = m.forward_from_base(base, &x, Some(&mut rng));
        let keep = cache.keep.clone().unwrap();
        assert!(keep.iter().all(|&k| k == 0.0 || k == 2.0));
        let (_, g) = m.loss_grad(&logits, Target::Class(0)).unwrap();
        let mut gb = Matrix::zeros(4, 3);
        let mut ga = Matrix::zeros(3, 5);
        m.accumulate_grads(&x, &g, &cache, &mut gb, &mut ga);
        let masked_loss = |p: &LoraModel| {
            let mut h = p.a.matvec(&x).unwrap();
            h.iter_mut().zip(&keep).for_each(|(v, k)| *v *= k);
            let mut z = p.w0.matvec(&x).unwrap();
            let dz = p.b.matvec(&h).unwrap();
            z.iter_mut().zip(dz).for_each(|(z, d)| *z += p.scaling() * d);
            p.loss_grad(&z, Target::Class(0)).unwrap().0
        };
        let fd_a = finite_difference_gradient(
            |a| {
                let mut p = m.clone();
                p.a = a.clone();
                masked_loss(&p)
            },
            &m.a,
            1e-5,
        );
        assert!(rel_err(&ga, &fd_a) < 1e-5);
    }

    #[test]
    fn regression_gradient() {
        let m = random_model(3, 4, 2, 5).with_task(Task::Regression).unwrap();
        let x = [0.1, -0.4, 0.9, 0.3];
        let t = [1.0, 0.0, -1.0];
        let logits = m.forward(&x).unwrap();
        let (_, g) = m.loss_grad(&logits, Target::Vector(&t)).unwrap();
        let (gb, _) = m.backward(&x, &g).unwrap();
        let fd_b = finite_difference_gradient(
            |b| {
                let mut p = m.clone();
                p.b = b.clone();
                p.sample_loss(&x, Target::Vector(&t)).unwrap()
            },
            &m.b,
            1e-5,
        );
        assert!(rel_err(&gb, &fd_b) < 1e-5);
    }

    #[test]
    fn tie_break_accuracy() {
        let m = lora_init(Matrix::zeros(3, 2), 1, 1.0, 0).unwrap();
        let x = Rng::new(0).gaussian(10, 2);
        assert_eq!(accuracy(&m, &x, &[0; 10]).unwrap(), 1.0);
    }

    #[test]
    fn teacher_model_is_perfect() {
        let t = make_teacher(8, 6, 3, 1.0, 1).unwrap();
        let task = Task::Classification { num_classes: 4 };
        let ds = sample_dataset(&t, 200, 2, task).unwrap();
        // max-unit readout of the teacher equals the grouped readout of a
        // sharpened teacher
        let m = lora_init(t.w_star.scale(1e4), 1, 1.0, 0).unwrap().with_task(task).unwrap();
        assert_eq!(accuracy(&m, &ds.x, &ds.clean).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_per_sample_oracle() {
        let m = random_model(6, 5, 2, 33).with_task(Task::Classification { num_classes: 3 }).unwrap();
        let x = Rng::new(5).gaussian(50, 5);
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let w = m.effective_weight();
        let mut hits = 0;
        for i in 0..50 {
            let z = w.matvec(x.row(i)).unwrap();
            let probs = crate::numerics::loss::class_probabilities(&z, 3);
            let mut best = 0;
            for c in 1..3 {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            hits += (best == labels[i]) as usize;
        }
        assert_eq!(accuracy(&m, &x, &labels).unwrap(), hits as f64 / 50.0);
    }

    fn toy_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let t = make_teacher(2, 2, 1, 1.0, 3).unwrap();
        let ds = sample_dataset(&t, 64, 4, Task::Classification { num_classes: 2 }).unwrap();
        let mut m = lora_init(Matrix::zeros(2, 2), 2, 16.0, 5).unwrap();
        let h = train(&mut m, &ds, &toy_cfg(50)).unwrap();
        assert_eq!(h.epoch_count(), 50);
        assert_eq!(h.final_stats().train_acc, Some(1.0));
        assert!(h.final_stats().noisy_loss.is_none());
        assert_eq!(h.final_stats().clean_loss, Some(h.final_stats().loss));
    }

    #[test]
    fn frozen_backbone_and_determinism() {
        let t = make_teacher(8, 8, 2, 1.0, 1).unwrap();
        let task = Task::Classification { num_classes: 4 };
        let ds = sample_dataset(&t, 100, 2, task).unwrap();
        let ds = inject_symmetric_noise(&ds, 0.3, 3).unwrap();
        let w0 = Rng::new(9).gaussian(8, 8).scale(0.1);
        let fresh = lora_init(w0.clone(), 4, 16.0, 4).unwrap().with_task(task).unwrap();
        let cfg = TrainConfig {
            record_per_sample_losses: true,
            ..toy_cfg(5)
        };
        let mut m1 = fresh.clone();
        let h1 = train(&mut m1, &ds, &cfg).unwrap();
        let mut m2 = fresh.clone();
        let h2 = train(&mut m2, &ds, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(m1.w0.as_slice(), w0.as_slice());
        assert_ne!(m1.b, fresh.b);
        assert_eq!(h1.per_sample_losses.as_ref().unwrap().len(), 100);
        assert!(h1.noisy_loss_series().iter().all(|l| l.is_some()));

        // untrained loss equals the frozen backbone's loss
        let base = lora_init(w0, 1, 16.0, 0).unwrap().with_task(task).unwrap();
        let base_loss = evaluate(&base, &ds, None).unwrap().loss;
        assert!((h1.initial.loss - base_loss).abs() < 1e-12);
    }

    #[test]
    fn early_stop_caps_epochs() {
        let t = make_teacher(4, 4, 2, 1.0, 1).unwrap();
        let ds = sample_dataset(&t, 20, 2, Task::Classification { num_classes: 2 }).unwrap();
        let mut m = lora_init(Matrix::zeros(4, 4), 2, 16.0, 0)
            .unwrap()
            .with_task(Task::Classification { num_classes: 2 })
            .unwrap();
        let cfg = TrainConfig {
            early_stop_epoch: Some(3),
            ..toy_cfg(10)
        };
        assert_eq!(train(&mut m, &ds, &cfg).unwrap().epoch_count(), 3);
    }

    #[test]
    fn dimension_mismatch() {
        let t = make_teacher(4, 4, 2, 1.0, 1).unwrap();
        let ds = sample_dataset(&t, 20, 2, Task::Classification { num_classes: 2 }).unwrap();
        let mut m = lora_init(Matrix::zeros(4, 5), 2, 16.0, 0).unwrap();
        assert!(matches!(train(&mut m, &ds, &toy_cfg(1)), Err(Error::Dimension(_))));
        let bad = TrainConfig { epochs: 0, ..toy_cfg(1) };
        let mut m = lora_init(Matrix::zeros(4, 4), 2, 16.0, 0)
            .unwrap()
            .with_task(Task::Classification { num_classes: 2 })
            .unwrap();
        assert!(train(&mut m, &ds, &bad).is_err());
    }
}
