//! Optimization: Adam, learning-rate warm-up, gradient clipping, the
//! reconstruction-weight controller and the epoch loop.
//!
//! Gradients coming out of the engine are ascent directions of the
//! objective. The optimizer minimizes the loss `−objective`, so they are
//! negated before the Adam step.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::gradient_angle;
use crate::error::{Result, SnfError};
use crate::gradients::{compute_gradients, GradConfig, GradMode};
use crate::model::FlowModel;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &FlowModel) -> Self {
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        AdamState::new(&refs)
    }

    /// One descent step on `grads` (gradients of the quantity being
    /// minimized) with learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(SnfError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(SnfError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{:?} vs {:?}", p.shape(), g.shape()),
                });
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `base_lr` over `warmup_epochs` (fractional
/// epochs allowed).
pub fn warmup_lr(base_lr: f64, epoch: f64, warmup_epochs: f64) -> f64 {
    if warmup_epochs <= 0.0 {
        return base_lr;
    }
    base_lr * (epoch / warmup_epochs).clamp(0.0, 1.0)
}

/// Scales all tensors by `min(1, max_norm / ‖g‖)`, with the global L2 norm
/// over every tensor. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    Fixed,
    Geco,
}

/// Reconstruction weight, either fixed or adapted multiplicatively from a
/// moving average of the constraint `recon − tolerance`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaController {
    pub mode: LambdaMode,
    pub lambda: f64,
    pub ema: f64,
    pub decay: f64,
    pub gain: f64,
    pub tolerance: f64,
    pub min: f64,
    pub max: f64,
}

impl LambdaController {
    pub fn fixed(lambda: f64) -> Self {
        LambdaController {
            mode: LambdaMode::Fixed,
            lambda,
            ema: 0.0,
            decay: 0.99,
            gain: 1.0,
            tolerance: 0.01,
            min: 1e-3,
            max: 1e4,
        }
    }

    pub fn geco(initial: f64) -> Self {
        LambdaController {
            mode: LambdaMode::Geco,
            ..LambdaController::fixed(initial)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.lambda.is_finite()
            && (0.0..1.0).contains(&self.decay)
            && self.min > 0.0
            && self.min <= self.max;
        if !ok {
            return Err(SnfError::InvalidConfig(format!("invalid reconstruction-weight settings {self:?}")));
        }
        Ok(())
    }

    /// Feeds one batch reconstruction value; returns the new weight.
    pub fn update(&mut self, recon: f64) -> f64 {
        if self.mode == LambdaMode::Geco && recon.is_finite() {
            self.ema = self.decay * self.ema + (1.0 - self.decay) * (recon - self.tolerance);
            self.lambda = (self.lambda * (self.gain * self.ema).exp()).clamp(self.min, self.max);
        }
        self.lambda
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub clip: Option<f64>,
    pub lambda: LambdaController,
    pub grad: GradConfig,
    pub seed: u64,
    /// Abort when `|loss|` exceeds this (or is not finite).
    pub divergence_threshold: f64,
    /// Abort when the batch reconstruction loss exceeds this; the inverse
    /// has drifted too far from the forward model for the self-normalizing
    /// gradient to be trusted.
    pub recon_limit: Option<f64>,
    /// Compute (but do not apply) the other gradient mode every `n`-th batch
    /// and record the angle.
    pub angle_every: Option<usize>,
    /// Overwrite every FC inverse with the exact inverse after each step.
    pub resync_inverse: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 100,
            lr: 1e-4,
            warmup_epochs: 10.0,
            clip: Some(10_000.0),
            lambda: LambdaController::fixed(1.0),
            grad: GradConfig::snf(),
            seed: 0,
            divergence_threshold: 1e10,
            recon_limit: Some(1.0),
            angle_every: None,
            resync_inverse: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.warmup_epochs < 0.0 {
            return Err(SnfError::InvalidConfig("batch size and learning rate must be positive".into()));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(SnfError::InvalidConfig("clip norm must be positive".into()));
        }
        if self.angle_every == Some(0) {
            return Err(SnfError::InvalidConfig("angle interval must be positive".into()));
        }
        self.lambda.validate()
    }
}

/// One optimizer step's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub recon: f64,
    pub lambda: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_recon: f64,
    pub lambda: f64,
    pub seconds: f64,
    /// Per parameterized layer, mean angle in degrees over logged batches.
    pub layer_angles: Vec<f64>,
    pub angle_mean: Option<f64>,
    pub angle_std: Option<f64>,
    pub train_nll: Option<f64>,
    pub val_nll: Option<f64>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub dim: usize,
    /// Mean negative log-likelihood in nats per example.
    pub nll: f64,
    pub nats_per_dim: f64,
    pub bits_per_dim: f64,
}

/// Exact NLL through the amortized cache. `extra_logdet` holds per-example
/// log-determinants of preprocessing applied before the model.
pub fn evaluate(model: &FlowModel, x: &Tensor, extra_logdet: Option<&[f64]>) -> Result<EvalMetrics> {
    evaluate_threaded(model, x, extra_logdet, 1)
}

/// [`evaluate`] with the rows split across `threads` scoped threads. The
/// per-example values are summed in row order afterwards, so the result does
/// not depend on the thread count.
pub fn evaluate_threaded(model: &FlowModel, x: &Tensor, extra_logdet: Option<&[f64]>, threads: usize) -> Result<EvalMetrics> {
    let n = x.rows();
    if n == 0 {
        return Err(SnfError::DegenerateInput("cannot evaluate an empty split".into()));
    }
    if extra_logdet.is_some_and(|e| e.len() != n) {
        return Err(SnfError::ShapeMismatch {
            op: "evaluate",
            detail: format!("{} preprocessing log-determinants for {n} rows", extra_logdet.map_or(0, |e| e.len())),
        });
    }
    // Fill the cache once up front so worker threads only read it.
    model.amortize_logdets()?;
    let threads = threads.clamp(1, n);
    let lp = if threads == 1 {
        model.log_prob(x)?.log_prob()
    } else {
        let chunk = n.div_ceil(threads);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|lo| {
                    let idx: Vec<usize> = (lo..(lo + chunk).min(n)).collect();
                    scope.spawn(move || model.log_prob(&crate::data::select_rows(x, &idx)).map(|l| l.log_prob()))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        });
        let mut all = Vec::with_capacity(n);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let mut total = 0.0;
    for (i, v) in lp.iter().enumerate() {
        total += v + extra_logdet.map_or(0.0, |e| e[i]);
    }
    let nll = -total / n as f64;
    let dim = model.dim();
    Ok(EvalMetrics {
        n,
        dim,
        nll,
        nats_per_dim: nll / dim as f64,
        bits_per_dim: nll / (dim as f64 * std::f64::consts::LN_2),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_nll: f64,
    pub params: Vec<Tensor>,
}

/// Training state; everything needed to resume bit-identically.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub lambda: LambdaController,
    /// Shuffling generator.
    pub rng: ChaCha8Rng,
    /// Probe generator for the JVP penalty.
    pub probe_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub best: Option<BestRecord>,
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::for_model(&model);
        Ok(Trainer {
            adam,
            lambda: config.lambda,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            probe_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            epoch: 0,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            best: None,
            model,
            config,
        })
    }

    fn batch_rows(data: &Tensor, idx: &[usize]) -> Tensor {
        let d = data.cols();
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(data.row(i));
        }
        out
    }

    /// Starts a new pass over the data if the current one is exhausted.
    fn ensure_order(&mut self, n: usize) {
        if self.order.len() != n || self.cursor >= n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    /// The batch the next [`Trainer::train_step`] will use.
    pub fn peek_batch(&mut self, data: &Tensor) -> Tensor {
        let n = data.rows();
        self.ensure_order(n);
        let end = (self.cursor + self.config.batch_size).min(n);
        Self::batch_rows(data, &self.order[self.cursor..end])
    }

    /// Runs one optimizer step on the next batch. Returns the record and
    /// whether it finished the current epoch, plus per-layer angles when the
    /// step was monitored.
    pub fn train_step(&mut self, data: &Tensor) -> Result<(StepRecord, bool, Option<Vec<f64>>)> {
        let n = data.rows();
        if n == 0 {
            return Err(SnfError::DegenerateInput("empty training set".into()));
        }
        self.ensure_order(n);
        let end = (self.cursor + self.config.batch_size).min(n);
        let batch_index = self.cursor / self.config.batch_size;
        let batch = Self::batch_rows(data, &self.order[self.cursor..end]);
        let progress = self.epoch as f64 + self.cursor as f64 / n as f64;
        let lr = warmup_lr(self.config.lr, progress, self.config.warmup_epochs);
        self.model.set_lambda(self.lambda.lambda);

        let outcome = compute_gradients(&self.model, &batch, &self.config.grad, &mut self.probe_rng)?;
        let loss = -outcome.stats.objective;
        let recon = outcome.stats.recon;
        let diverged = |reason: String| SnfError::Diverged {
            epoch: self.epoch + 1,
            step: self.step + 1,
            reason,
        };
        if !loss.is_finite() || loss.abs() > self.config.divergence_threshold {
            return Err(diverged(format!("loss {loss:e} is non-finite or beyond the divergence threshold")));
        }
        if let Some(limit) = self.config.recon_limit {
            if !(recon <= limit) {
                return Err(diverged(format!("reconstruction loss {recon:e} exceeded the instability limit {limit}")));
            }
        }

        let angles = match self.config.angle_every {
            Some(k) if batch_index % k == 0 => {
                let other = GradConfig {
                    mode: match self.config.grad.mode {
                        GradMode::Snf => GradMode::Exact,
                        GradMode::Exact => GradMode::Snf,
                    },
                    jvp_weight: 0.0,
                    ..self.config.grad
                };
                let mut scratch = ChaCha8Rng::seed_from_u64(0);
                let reference = compute_gradients(&self.model, &batch, &other, &mut scratch)?;
                let jw = self.config.grad.jvp_weight;
                let lam = self.lambda.lambda;
                let mut out = Vec::new();
                for (a, b) in outcome.report.layers.iter().zip(&reference.report.layers) {
                    out.push(gradient_angle(&a.flat_total(lam, jw), &b.flat_total(lam, 0.0))?);
                }
                Some(out)
            }
            _ => None,
        };

        let mut grads: Vec<Tensor> = outcome.report.totals().into_iter().map(|g| g.scale(-1.0)).collect();
        let grad_norm = match self.config.clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt(),
        };
        if !grad_norm.is_finite() {
            return Err(diverged("non-finite gradient".into()));
        }
        {
            let mut params = self.model.params_mut();
            self.adam.step(&mut params, &grads, lr)?;
        }
        if self.config.resync_inverse {
            self.model.sync_fc_inverses()?;
        }
        if !self.model.params().iter().all(|p| p.all_finite()) {
            return Err(diverged("non-finite parameters after update".into()));
        }
        let lambda_used = self.lambda.lambda;
        self.lambda.update(recon);
        self.step += 1;
        self.cursor = end;
        let finished = self.cursor >= n;
        if finished {
            self.epoch += 1;
        }
        Ok((
            StepRecord {
                loss,
                recon,
                lambda: lambda_used,
                grad_norm,
                lr,
            },
            finished,
            angles,
        ))
    }

    /// Runs `n` optimizer steps, crossing epoch boundaries as needed.
    pub fn train_steps(&mut self, data: &Tensor, n: usize) -> Result<Vec<StepRecord>> {
        (0..n).map(|_| self.train_step(data).map(|r| r.0)).collect()
    }

    /// Finishes the current pass over `data` (a full epoch when started at a
    /// boundary).
    pub fn train_epoch(&mut self, data: &Tensor) -> Result<EpochMetrics> {
        let start = Instant::now();
        let mut steps = Vec::new();
        let mut angle_sum: Vec<f64> = Vec::new();
        let mut angle_batches = 0usize;
        let mut per_batch_means = Vec::new();
        loop {
            let (rec, finished, angles) = self.train_step(data)?;
            steps.push(rec);
            if let Some(a) = angles {
                if angle_sum.is_empty() {
                    angle_sum = vec![0.0; a.len()];
                }
                for (s, v) in angle_sum.iter_mut().zip(&a) {
                    *s += v;
                }
                per_batch_means.push(a.iter().sum::<f64>() / a.len().max(1) as f64);
                angle_batches += 1;
            }
            if finished {
                break;
            }
        }
        let k = steps.len() as f64;
        let layer_angles: Vec<f64> = angle_sum.iter().map(|s| s / angle_batches.max(1) as f64).collect();
        let (angle_mean, angle_std) = if layer_angles.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&layer_angles);
            (Some(m), Some(s))
        };
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: steps.iter().map(|s| s.loss).sum::<f64>() / k,
            train_recon: steps.iter().map(|s| s.recon).sum::<f64>() / k,
            lambda: self.lambda.lambda,
            seconds: start.elapsed().as_secs_f64(),
            layer_angles,
            angle_mean,
            angle_std,
            train_nll: None,
            val_nll: None,
            steps,
        })
    }

    /// Full run: `config.epochs` epochs with exact NLL on both splits after
    /// each one and best-epoch tracking on the validation split.
    /// `on_epoch` sees every finished epoch and whether it improved.
    pub fn fit(
        &mut self,
        train: &Tensor,
        val: Option<&Tensor>,
        on_epoch: impl FnMut(&Trainer, &EpochMetrics, bool) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        self.fit_split(Split::new(train), val.map(Split::new), on_epoch)
    }

    /// [`Trainer::fit`] for data carrying preprocessing log-determinants,
    /// so the reported NLLs are in the units of the raw data.
    pub fn fit_split(
        &mut self,
        train: Split,
        val: Option<Split>,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics, bool) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let mut m = self.train_epoch(train.x)?;
            m.train_nll = Some(evaluate(&self.model, train.x, train.extra_logdet)?.nll);
            let mut improved = false;
            if let Some(v) = &val {
                let nll = evaluate(&self.model, v.x, v.extra_logdet)?.nll;
                m.val_nll = Some(nll);
                if self.best.as_ref().map_or(true, |b| nll < b.val_nll) {
                    improved = true;
                    self.best = Some(BestRecord {
                        epoch: m.epoch,
                        val_nll: nll,
                        params: self.model.params().into_iter().cloned().collect(),
                    });
                }
            }
            on_epoch(self, &m, improved)?;
            history.push(m);
        }
        Ok(history)
    }
}

/// Rows to train or evaluate on, with optional per-row preprocessing
/// log-determinants.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub x: &'a Tensor,
    pub extra_logdet: Option<&'a [f64]>,
}

impl<'a> Split<'a> {
    pub fn new(x: &'a Tensor) -> Self {
        Split { x, extra_logdet: None }
    }
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes one row per epoch:
/// `epoch,train_nll,val_nll,train_loss,train_recon,lambda,seconds,angle_mean,angle_std`.
/// Missing values are left empty.
pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_nll,val_nll,train_loss,train_recon,lambda,seconds,angle_mean,angle_std")?;
    for m in history {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch,
            opt(m.train_nll),
            opt(m.val_nll),
            m.train_loss,
            m.train_recon,
            m.lambda,
            m.seconds,
            opt(m.angle_mean),
            opt(m.angle_std)
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BuildOptions, ModelSpec};

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut p = Tensor::vector(vec![0.5]);
        let mut a = AdamState::new(&[&[1]]);
        a.step(&mut [&mut p], &[Tensor::vector(vec![0.0])], 0.1).unwrap();
        assert_eq!(p.data(), &[0.5]);
        let mut p = Tensor::vector(vec![0.0]);
        let mut a = AdamState::new(&[&[1]]);
        a.step(&mut [&mut p], &[Tensor::vector(vec![1.0])], 0.1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
        a.step(&mut [&mut p], &[Tensor::vector(vec![1.0])], 0.1).unwrap();
        // v after two unit gradients: (1−β₂)(1 + β₂).
        let v2 = 0.001 * (1.0 + 0.999);
        assert!((a.v[0].data()[0] - v2).abs() < 1e-15);
        assert!((p.data()[0] + 0.2).abs() < 1e-7);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_lr(1e-4, 0.0, 10.0), 0.0);
        assert_eq!(warmup_lr(1e-4, 10.0, 10.0), 1e-4);
        assert!((warmup_lr(1e-4, 5.0, 10.0) - 5e-5).abs() < 1e-20);
        assert_eq!(warmup_lr(1e-4, 50.0, 10.0), 1e-4);
        assert_eq!(warmup_lr(1e-4, 0.0, 0.0), 1e-4);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0]);
        let n = clip_grad_norm(&mut g, 2.5);
        assert_eq!(n, 5.0);
        assert_eq!(g[0].data(), &[1.5]);
        assert_eq!(g[1].data(), &[2.0]);
    }

    #[test]
    fn geco_behaviour() {
        let mut c = LambdaController::geco(1.0);
        for _ in 0..100 {
            c.update(c.tolerance);
        }
        assert_eq!(c.lambda, 1.0);
        let mut prev = c.lambda;
        for _ in 0..5000 {
            let l = c.update(10.0);
            assert!(l >= prev);
            prev = l;
        }
        assert_eq!(c.lambda, c.max);
        let mut f = LambdaController::fixed(3.0);
        f.update(100.0);
        assert_eq!(f.lambda, 3.0);
        let mut g0 = LambdaController { gain: 0.0, ..LambdaController::geco(3.0) };
        g0.update(100.0);
        assert_eq!(g0.lambda, 3.0);
    }

    fn moons(n: usize) -> Tensor {
        crate::data::synthetic_2d("two_moons", n, 1).unwrap()
    }

    #[test]
    fn exact_training_reduces_nll() {
        let model = ModelSpec::Fc2.build([2, 1, 1], &BuildOptions::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 50,
            lr: 1e-2,
            warmup_epochs: 0.0,
            grad: GradConfig::exact(),
            ..Default::default()
        };
        let data = moons(500);
        let before = evaluate(&model, &data, None).unwrap().nll;
        let mut t = Trainer::new(model, cfg).unwrap();
        let hist = t.fit(&data, None, |_, _, _| Ok(())).unwrap();
        assert_eq!(hist.len(), 5);
        assert!(hist[4].train_nll.unwrap() < before);
    }

    #[test]
    fn resynced_runs_agree_across_modes() {
        let mut model = ModelSpec::Fc2.build([2, 1, 1], &BuildOptions { seed: 4, ..Default::default() }).unwrap();
        model.sync_fc_inverses().unwrap();
        let data = moons(200);
        let run = |mode| {
            let cfg = TrainConfig {
                batch_size: 40,
                lr: 1e-2,
                warmup_epochs: 0.0,
                resync_inverse: true,
                grad: GradConfig { mode, ..GradConfig::snf() },
                ..Default::default()
            };
            let mut t = Trainer::new(model.clone(), cfg).unwrap();
            t.train_steps(&data, 25).unwrap();
            t.model.params().into_iter().cloned().collect::<Vec<_>>()
        };
        let a = run(GradMode::Exact);
        let b = run(GradMode::Snf);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.rel_diff(y) < 1e-8);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let model = ModelSpec::Fc2.build([2, 1, 1], &BuildOptions::default()).unwrap();
        let cfg = TrainConfig {
            divergence_threshold: 1e-3,
            ..Default::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        match t.train_step(&moons(10)) {
            Err(SnfError::Diverged { epoch: 1, step: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { clip: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: LambdaController::fixed(0.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn threaded_evaluation_matches_serial_bitwise() {
        let model = ModelSpec::Fc2.build([2, 1, 1], &BuildOptions::default()).unwrap();
        let x = moons(101);
        let extra: Vec<f64> = (0..101).map(|i| i as f64 * 0.01).collect();
        let serial = evaluate(&model, &x, Some(&extra)).unwrap();
        for threads in [2, 3, 7, 500] {
            let par = evaluate_threaded(&model, &x, Some(&extra), threads).unwrap();
            assert_eq!(par.nll.to_bits(), serial.nll.to_bits());
        }
        assert!(evaluate(&model, &x, Some(&extra[..5])).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn geco_lambda_stays_within_bounds(
                initial in 1e-3f64..1e4,
                recons in proptest::collection::vec(prop_oneof![0.0f64..1e6, Just(f64::NAN), Just(f64::INFINITY)], 1..200),
            ) {
                let mut c = LambdaController::geco(initial);
                for r in recons {
                    let l = c.update(r);
                    prop_assert!(l >= c.min && l <= c.max, "lambda {l} escaped after recon {r}");
                }
            }

            #[test]
            fn clipped_norm_never_exceeds_the_limit(
                vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
                max in 1e-3f64..1e3,
            ) {
                let half = vals.len() / 2;
                let mut g = vec![Tensor::vector(vals[..half].to_vec()), Tensor::vector(vals[half..].to_vec())];
                let before = clip_grad_norm(&mut g, max);
                let after = g.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
                prop_assert!(after <= max * (1.0 + 1e-12));
                if before <= max {
                    prop_assert_eq!(after, before);
                }
            }

            #[test]
            fn warmup_is_monotone_and_capped(base in 1e-6f64..1.0, e1 in 0.0f64..50.0, e2 in 0.0f64..50.0, w in 0.0f64..20.0) {
                let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
                prop_assert!(warmup_lr(base, lo, w) <= warmup_lr(base, hi, w));
                prop_assert!(warmup_lr(base, hi, w) <= base);
            }
        }
    }
}
