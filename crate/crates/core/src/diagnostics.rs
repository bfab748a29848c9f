//! Measurements: gradient angles between the two gradient modes, timing
//! against dimension, and finite-difference Jacobians.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SnfError};
use crate::gradients::{compute_gradients, GradConfig, GradMode};
use crate::layers::{FcLayer, Layer};
use crate::model::FlowModel;
use crate::tensor::{dot, Tensor};
use crate::training::{mean_std, AdamState, TrainConfig, Trainer};

/// Angle in degrees between two flattened gradients.
pub fn gradient_angle(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(SnfError::ShapeMismatch {
            op: "gradient_angle",
            detail: format!("lengths {} and {}", g1.len(), g2.len()),
        });
    }
    let n1 = dot(g1, g1);
    let n2 = dot(g2, g2);
    if n1 == 0.0 && n2 == 0.0 {
        return Err(SnfError::DegenerateInput("angle between two zero vectors".into()));
    }
    if n1 == 0.0 || n2 == 0.0 {
        // A zero vector against a nonzero one carries no direction; report
        // the orthogonal angle rather than NaN.
        return Ok(90.0);
    }
    // One square root of the product keeps identical directions at exactly 0.
    let c = (dot(g1, g2) / (n1 * n2).sqrt()).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Angles for one epoch of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleRecord {
    pub epoch: usize,
    /// `(model layer index, degrees)`.
    pub layers: Vec<(usize, f64)>,
    pub mean: f64,
    pub std: f64,
    /// Angle of all layers' gradients concatenated, averaged over the
    /// monitored batches.
    pub global: f64,
}

/// Angles between the self-normalizing gradient and the exact one for the
/// same parameters and batch.
pub fn angles_for_batch(model: &FlowModel, batch: &Tensor, base: &GradConfig) -> Result<(Vec<(usize, f64)>, f64)> {
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let snf = compute_gradients(model, batch, &GradConfig { mode: GradMode::Snf, jvp_weight: 0.0, ..*base }, &mut scratch)?;
    let exact = compute_gradients(model, batch, &GradConfig { mode: GradMode::Exact, jvp_weight: 0.0, ..*base }, &mut scratch)?;
    let lam = model.lambda();
    let mut per = Vec::new();
    for (a, b) in snf.report.layers.iter().zip(&exact.report.layers) {
        per.push((a.layer, gradient_angle(&a.flat_total(lam, 0.0), &b.flat_total(lam, 0.0))?));
    }
    let global = gradient_angle(&snf.report.flat_total(), &exact.report.flat_total())?;
    Ok((per, global))
}

/// Trains in self-normalizing mode for `epochs` epochs and records, every
/// `every`-th batch, the angle to the exact gradient (computed, never
/// applied).
pub fn angle_sweep(model: FlowModel, data: &Tensor, mut config: TrainConfig, epochs: usize, every: usize) -> Result<(Vec<AngleRecord>, FlowModel)> {
    if every == 0 {
        return Err(SnfError::InvalidConfig("angle interval must be positive".into()));
    }
    config.grad.mode = GradMode::Snf;
    config.angle_every = None;
    config.epochs = epochs;
    let grad_cfg = config.grad;
    let mut trainer = Trainer::new(model, config)?;
    let mut out = Vec::new();
    for _ in 0..epochs {
        let mut sums: Vec<(usize, f64)> = Vec::new();
        let mut globals = Vec::new();
        let mut batch_idx = 0usize;
        loop {
            if batch_idx % every == 0 {
                let batch = trainer.peek_batch(data);
                trainer.model.set_lambda(trainer.lambda.lambda);
                let (per, global) = angles_for_batch(&trainer.model, &batch, &grad_cfg)?;
                if sums.is_empty() {
                    sums = per.iter().map(|&(k, _)| (k, 0.0)).collect();
                }
                for (s, (_, a)) in sums.iter_mut().zip(&per) {
                    s.1 += a;
                }
                globals.push(global);
            }
            let (_, finished, _) = trainer.train_step(data)?;
            batch_idx += 1;
            if finished {
                break;
            }
        }
        let count = globals.len().max(1) as f64;
        let layers: Vec<(usize, f64)> = sums.into_iter().map(|(k, s)| (k, s / count)).collect();
        let values: Vec<f64> = layers.iter().map(|l| l.1).collect();
        let (mean, std) = mean_std(&values);
        out.push(AngleRecord {
            epoch: trainer.epoch,
            layers,
            mean,
            std,
            global: globals.iter().sum::<f64>() / count,
        });
    }
    Ok((out, trainer.model))
}

/// Writes `epoch,layer,degrees` rows; the layer column also carries `mean`,
/// `std` and `global` summary rows.
pub fn write_angles_csv(path: &Path, records: &[AngleRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,layer,degrees")?;
    for r in records {
        for (k, a) in &r.layers {
            writeln!(f, "{},{},{}", r.epoch, k, a)?;
        }
        writeln!(f, "{},mean,{}", r.epoch, r.mean)?;
        writeln!(f, "{},std,{}", r.epoch, r.std)?;
        writeln!(f, "{},global,{}", r.epoch, r.global)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRecord {
    pub dim: usize,
    pub mode: GradMode,
    pub mean_s: f64,
    pub std_s: f64,
    pub n_batches: usize,
}

/// Times one optimizer step (gradient plus Adam update) of a single FC
/// layer without activation for each dimension. The first `warmup` batches
/// of each configuration are run but not recorded.
pub fn timing_sweep(dims: &[usize], mode: GradMode, batch: usize, n_batches: usize, warmup: usize, seed: u64) -> Result<Vec<TimingRecord>> {
    if batch == 0 || n_batches == 0 {
        return Err(SnfError::InvalidConfig("batch size and batch count must be positive".into()));
    }
    let mut out = Vec::new();
    for &d in dims {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ d as u64);
        let mut model = FlowModel::new([d, 1, 1], vec![Layer::Fc(FcLayer::init(d, &mut rng))], 1.0)?;
        let mut adam = AdamState::for_model(&model);
        let cfg = GradConfig { mode, ..GradConfig::snf() };
        let x = Tensor::randn(&[batch, d], &mut rng);
        let mut times = Vec::with_capacity(n_batches);
        for i in 0..warmup + n_batches {
            let start = Instant::now();
            let g = compute_gradients(&model, &x, &cfg, &mut rng)?;
            let grads: Vec<Tensor> = g.report.totals().into_iter().map(|t| t.scale(-1.0)).collect();
            adam.step(&mut model.params_mut(), &grads, 1e-6)?;
            let dt = start.elapsed().as_secs_f64();
            if i >= warmup {
                times.push(dt);
            }
        }
        let (mean_s, std_s) = mean_std(&times);
        out.push(TimingRecord {
            dim: d,
            mode,
            mean_s,
            std_s,
            n_batches,
        });
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(SnfError::DegenerateInput("slope fit needs at least two positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(SnfError::DegenerateInput("all x values equal".into()));
    }
    Ok(sxy / sxx)
}

pub fn timing_slope(records: &[TimingRecord]) -> Result<f64> {
    let xs: Vec<f64> = records.iter().map(|r| r.dim as f64).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.mean_s).collect();
    loglog_slope(&xs, &ys)
}

/// Writes `D,mode,mean_s,std_s` rows.
pub fn write_timing_csv(path: &Path, records: &[TimingRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "D,mode,mean_s,std_s")?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.dim, r.mode, r.mean_s, r.std_s)?;
    }
    f.flush()?;
    Ok(())
}

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂x_j` with step `h`.
pub fn finite_diff_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Tensor {
    let m = f(x).len();
    let n = x.len();
    let mut jac = Tensor::zeros(&[m, n]);
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    jac
}
