//! Exact and self-normalizing gradients of the mixture objective.
//!
//! Every parameter gradient is kept split into its data term, its
//! log-determinant term and its reconstruction term so diagnostics can look
//! at them separately. All gradients are ascent directions for the
//! objective; the reconstruction and JVP parts are gradients of the
//! (positive) penalties and enter the total with a minus sign.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::conv::{kernel_grad_flat, TapIndex};
use crate::error::{shape_err, Result, SnfError};
use crate::layers::{crop_kernel_center, flip_kernel, pad_kernel_center, ConvLayer, FcLayer, Layer};
use crate::linalg::lu_factor;
use crate::model::{gaussian_logprob, FlowModel};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Exact,
    Snf,
}

impl std::str::FromStr for GradMode {
    type Err = SnfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(GradMode::Exact),
            "snf" => Ok(GradMode::Snf),
            other => Err(SnfError::InvalidConfig(format!("unknown gradient mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradMode::Exact => "exact",
            GradMode::Snf => "snf",
        })
    }
}

/// Distribution of the probe vectors used by the JVP inverse penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProbeDistribution {
    #[default]
    Normal,
    /// Uniform on `[-1, 1]`.
    Uniform,
}

impl std::str::FromStr for ProbeDistribution {
    type Err = SnfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "gaussian" => Ok(ProbeDistribution::Normal),
            "uniform" => Ok(ProbeDistribution::Uniform),
            other => Err(SnfError::InvalidConfig(format!("unknown probe distribution '{other}'"))),
        }
    }
}

impl ProbeDistribution {
    pub fn draw<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            ProbeDistribution::Normal => Tensor::randn(shape, rng),
            ProbeDistribution::Uniform => {
                let u = Uniform::new_inclusive(-1.0, 1.0);
                Tensor::from_fn(shape, |_| u.sample(rng))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradConfig {
    pub mode: GradMode,
    /// Propagate the conv γ gradient with deltas from a genuine pass through
    /// the inverse model instead of reusing the forward-path deltas.
    pub strict_exact: bool,
    pub jvp_weight: f64,
    pub jvp_probes: usize,
    pub probe: ProbeDistribution,
}

impl Default for GradConfig {
    fn default() -> Self {
        GradConfig {
            mode: GradMode::Snf,
            strict_exact: false,
            jvp_weight: 0.0,
            jvp_probes: 1,
            probe: ProbeDistribution::Normal,
        }
    }
}

impl GradConfig {
    pub fn exact() -> Self {
        GradConfig {
            mode: GradMode::Exact,
            ..Default::default()
        }
    }

    pub fn snf() -> Self {
        GradConfig::default()
    }
}

/// Gradient of one parameter tensor, by objective term.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    /// Data term of the log-likelihood the parameter belongs to.
    pub loglik: Tensor,
    /// Log-determinant term of that log-likelihood.
    pub logdet: Tensor,
    /// Gradient of the reconstruction loss (a penalty).
    pub recon: Tensor,
    /// Gradient of the JVP inverse penalty.
    pub jvp: Tensor,
}

impl ParamGrad {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamGrad {
            loglik: Tensor::zeros(shape),
            logdet: Tensor::zeros(shape),
            recon: Tensor::zeros(shape),
            jvp: Tensor::zeros(shape),
        }
    }

    /// `½·loglik + ½·logdet − λ·recon − μ·jvp`, summed in that order.
    pub fn total(&self, lambda: f64, jvp_weight: f64) -> Tensor {
        let mut t = self.loglik.scale(0.5);
        t.axpy(0.5, &self.logdet).expect("same shape");
        t.axpy(-lambda, &self.recon).expect("same shape");
        if jvp_weight != 0.0 {
            t.axpy(-jvp_weight, &self.jvp).expect("same shape");
        }
        t
    }

    /// The likelihood part only, `½·loglik + ½·logdet`.
    pub fn likelihood(&self) -> Tensor {
        self.total(0.0, 0.0)
    }
}

/// Gradients for one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub layer: usize,
    pub theta: ParamGrad,
    pub gamma: ParamGrad,
}

impl LayerGrad {
    /// `[θ total, γ total]` flattened into one vector.
    pub fn flat_total(&self, lambda: f64, jvp_weight: f64) -> Vec<f64> {
        let mut v = self.theta.total(lambda, jvp_weight).into_data();
        v.extend(self.gamma.total(lambda, jvp_weight).into_data());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub mode: GradMode,
    pub lambda: f64,
    pub jvp_weight: f64,
    pub layers: Vec<LayerGrad>,
}

impl GradReport {
    /// Ascent directions in the order of [`FlowModel::params`].
    pub fn totals(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|g| {
                [
                    g.theta.total(self.lambda, self.jvp_weight),
                    g.gamma.total(self.lambda, self.jvp_weight),
                ]
            })
            .collect()
    }

    /// All totals concatenated.
    pub fn flat_total(&self) -> Vec<f64> {
        self.totals().into_iter().flat_map(Tensor::into_data).collect()
    }

    /// Total gradient of the layer at model index `k`.
    pub fn layer(&self, k: usize) -> Option<&LayerGrad> {
        self.layers.iter().find(|g| g.layer == k)
    }
}

// ---------------------------------------------------------------------------
// Backpropagation through the layer stack

/// Inputs and log-likelihood deltas along one path through the flow.
///
/// `inputs[k]` is the input of layer `k` (the last entry is the latent);
/// `deltas[k]` is the derivative of `log N(z) + Σ_{j ≥ k} log|σ'|` with
/// respect to `inputs[k]`. For a linear layer `k`, `deltas[k + 1]` is its
/// output delta and `deltas[k]` its input delta.
#[derive(Clone, Debug)]
pub struct BackpropState {
    pub inputs: Vec<Tensor>,
    pub deltas: Vec<Tensor>,
    pub base_logprob: Vec<f64>,
    pub act_logdet: Vec<f64>,
}

enum LinearOp<'a> {
    Layer,
    Dense(&'a Tensor),
}

impl BackpropState {
    /// Pass through the forward parameters θ.
    pub fn forward_path(model: &FlowModel, x: &Tensor) -> Result<Self> {
        let ops: Vec<LinearOp> = model.layers().iter().map(|_| LinearOp::Layer).collect();
        Self::run(model, x, &ops)
    }

    /// Pass through the inverse model: linear layer `k` is applied as the
    /// dense matrix `inverses[k]` (the exact inverse of `γ_k`).
    pub fn inverse_path(model: &FlowModel, x: &Tensor, inverses: &[Option<Tensor>]) -> Result<Self> {
        if inverses.len() != model.layers().len() {
            return Err(shape_err("inverse_path", "one entry per layer required"));
        }
        let ops: Vec<LinearOp> = model
            .layers()
            .iter()
            .zip(inverses)
            .map(|(l, m)| match (l.is_linear(), m) {
                (true, Some(m)) => Ok(LinearOp::Dense(m)),
                (true, None) => Err(shape_err("inverse_path", "missing inverse for a linear layer")),
                (false, _) => Ok(LinearOp::Layer),
            })
            .collect::<Result<_>>()?;
        Self::run(model, x, &ops)
    }

    fn run(model: &FlowModel, x: &Tensor, ops: &[LinearOp]) -> Result<Self> {
        let shapes = model.layer_shapes();
        let n = match x.shape() {
            &[n, d] if d == model.dim() => n,
            s => return Err(shape_err("backprop", format!("expected [N, {}], got {:?}", model.dim(), s))),
        };
        let mut inputs = vec![x.clone()];
        let mut act_logdet = vec![0.0; n];
        for (k, (layer, op)) in model.layers().iter().zip(ops).enumerate() {
            let h = &inputs[k];
            let next = match (layer, op) {
                (_, LinearOp::Dense(m)) => matmul_a_bt(h, m)?,
                (Layer::Fc(l), _) => l.forward(h)?,
                (Layer::Conv(l), _) => l.forward(h)?,
                (Layer::Activation(a), _) => {
                    let (y, ld) = a.forward(h);
                    for (acc, v) in act_logdet.iter_mut().zip(ld) {
                        *acc += v;
                    }
                    y
                }
                (Layer::Squeeze(s), _) => s.forward_batch(h, shapes[k])?,
            };
            inputs.push(next);
        }
        let z = inputs.last().expect("non-empty");
        let base_logprob = (0..n).map(|i| gaussian_logprob(z.row(i))).collect();
        let mut deltas = vec![z.scale(-1.0)];
        for (k, (layer, op)) in model.layers().iter().zip(ops).enumerate().rev() {
            let d = deltas.last().expect("non-empty");
            let prev = match (layer, op) {
                (_, LinearOp::Dense(m)) => matmul(d, m)?,
                (Layer::Fc(l), _) => matmul(d, l.w())?,
                (Layer::Conv(l), _) => l.forward_transpose(d)?,
                (Layer::Activation(a), _) => {
                    let h = &inputs[k];
                    let mut out = d.clone();
                    for (o, &hv) in out.data_mut().iter_mut().zip(h.data()) {
                        let s1 = a.derivative(hv);
                        *o = s1 * *o + a.second_derivative(hv) / s1;
                    }
                    out
                }
                (Layer::Squeeze(s), _) => s.inverse_batch(d, shapes[k])?,
            };
            deltas.push(prev);
        }
        deltas.reverse();
        Ok(BackpropState {
            inputs,
            deltas,
            base_logprob,
            act_logdet,
        })
    }

    pub fn batch(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Mean of `log N(z) + Σ log|σ'|` over the batch; the data-dependent
    /// part of the log-likelihood.
    pub fn mean_data_logprob(&self) -> f64 {
        let n = self.batch().max(1) as f64;
        self.base_logprob
            .iter()
            .zip(&self.act_logdet)
            .map(|(b, a)| b + a)
            .sum::<f64>()
            / n
    }
}

// ---------------------------------------------------------------------------
// Layer-level operations

/// Quantities of the inverse model around one linear layer: its input, its
/// output `u = γ⁻¹(input)` and the delta at that output.
#[derive(Clone, Copy, Debug)]
pub struct InverseSide<'a> {
    pub input: &'a Tensor,
    pub output: &'a Tensor,
    pub delta: &'a Tensor,
}

fn batch_of(h: &Tensor, d: usize, op: &'static str) -> Result<usize> {
    match h.shape() {
        &[n, dd] if dd == d && n > 0 => Ok(n),
        s => Err(shape_err(op, format!("expected non-empty [N, {d}], got {:?}", s))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Batch-mean `‖g(f(h)) − h‖²`.
pub fn recon_loss(layer: &Layer, h: &Tensor) -> Result<f64> {
    let per = match layer {
        Layer::Fc(l) => l.recon_loss(h)?,
        Layer::Conv(l) => l.recon_loss(h)?,
        _ => return Ok(0.0),
    };
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Batch-mean gradients of `‖RWh − h‖²` with respect to `W` and `R`.
pub fn fc_recon_grads(layer: &FcLayer, h: &Tensor) -> Result<(Tensor, Tensor)> {
    batch_of(h, layer.dim(), "fc_recon_grads")?;
    let (_, dw, dr) = fc_recon_parts(layer, h, &layer.forward(h)?)?;
    Ok((dw, dr))
}

/// Recon loss and gradients given the layer output `z = Wh`, which the
/// backprop pass has already computed.
fn fc_recon_parts(layer: &FcLayer, h: &Tensor, z: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let n = h.rows() as f64;
    let e = layer.inverse_learned(z)?.sub(h)?;
    // Rᵀ(eᵀh) associated as (eR)ᵀh keeps the cost at N·D².
    let dw = matmul_at_b(&matmul(&e, layer.r())?, h)?.scale(2.0 / n);
    let dr = matmul_at_b(&e, z)?.scale(2.0 / n);
    Ok((mean_sq_rows(&e), dw, dr))
}

fn mean_sq_rows(e: &Tensor) -> f64 {
    e.data().iter().map(|v| v * v).sum::<f64>() / e.rows().max(1) as f64
}

/// Batch-mean gradients of `‖r⋆(w⋆h) − h‖²` with respect to `w` and `r`.
pub fn conv_recon_grads(layer: &ConvLayer, h: &Tensor) -> Result<(Tensor, Tensor)> {
    batch_of(h, layer.dim(), "conv_recon_grads")?;
    let (_, dw, dr) = conv_recon_parts(layer, h, &layer.forward(h)?)?;
    Ok((dw, dr))
}

fn conv_recon_parts(layer: &ConvLayer, h: &Tensor, z: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let n = h.rows() as f64;
    let e = layer.inverse_learned(z)?.sub(h)?;
    let back = layer.inverse_transpose(&e)?;
    let dw = sum_kernel_grads(layer, &back, h, layer.w_dims(), layer.pad_w())?.scale(2.0 / n);
    let dr = sum_kernel_grads(layer, &e, z, layer.r_dims(), layer.pad_r())?.scale(2.0 / n);
    Ok((mean_sq_rows(&e), dw, dr))
}

/// `Σ_i grad_out_i ⋆ input_i` over the batch, as a kernel.
fn sum_kernel_grads(
    layer: &ConvLayer,
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: [usize; 4],
    pad: (usize, usize),
) -> Result<Tensor> {
    let mut acc = vec![0.0; kernel_shape.iter().product()];
    for i in 0..grad_out.rows() {
        let g = kernel_grad_flat(grad_out.row(i), input.row(i), layer.shape(), kernel_shape, pad)?;
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    Tensor::new(kernel_shape.to_vec(), acc)
}

fn recon_pair(layer: &Layer, h: &Tensor) -> Result<(Tensor, Tensor)> {
    match layer {
        Layer::Fc(l) => fc_recon_grads(l, h),
        Layer::Conv(l) => conv_recon_grads(l, h),
        _ => Err(SnfError::InvalidConfig(format!("{} layer has no parameters", layer.name()))),
    }
}

/// Inverse-model quantities for a layer considered on its own over a
/// standard Gaussian: `u = γ⁻¹h`, delta `−u`.
fn standalone_side(gamma_inv: &Tensor, h: &Tensor) -> Result<(Tensor, Tensor)> {
    let u = matmul_a_bt(h, gamma_inv)?;
    let d = u.scale(-1.0);
    Ok((u, d))
}

/// Exact gradients of an FC layer.
///
/// `side` carries the inverse-model quantities from a genuine pass through
/// the `R⁻¹` chain. Without it the layer is treated as a whole flow over a
/// standard Gaussian.
pub fn fc_exact_grads(layer: &FcLayer, h: &Tensor, delta_z: &Tensor, side: Option<InverseSide>) -> Result<LayerGrad> {
    batch_of(h, layer.dim(), "fc_exact_grads")?;
    same_shape(h, delta_z, "fc_exact_grads")?;
    let w_inv = lu_factor(layer.w())?.inverse();
    let r_inv = lu_factor(layer.r())?.inverse();
    let owned;
    let side = match side {
        Some(s) => s,
        None => {
            owned = standalone_side(&r_inv, h)?;
            InverseSide {
                input: h,
                output: &owned.0,
                delta: &owned.1,
            }
        }
    };
    let z = layer.forward(h)?;
    Ok(fc_exact_with(layer, h, &z, delta_z, &w_inv, &r_inv, side)?.0)
}

fn fc_exact_with(
    layer: &FcLayer,
    h: &Tensor,
    z: &Tensor,
    delta_z: &Tensor,
    w_inv: &Tensor,
    r_inv: &Tensor,
    side: InverseSide,
) -> Result<(LayerGrad, f64)> {
    let n = h.rows() as f64;
    let d = layer.dim();
    let (recon, rw, rr) = fc_recon_parts(layer, h, z)?;
    let a = matmul(side.delta, r_inv)?;
    let grad = LayerGrad {
        layer: 0,
        theta: ParamGrad {
            loglik: matmul_at_b(delta_z, h)?.scale(1.0 / n),
            logdet: w_inv.transpose()?,
            recon: rw,
            jvp: Tensor::zeros(&[d, d]),
        },
        gamma: ParamGrad {
            loglik: matmul_at_b(&a, side.output)?.scale(-1.0 / n),
            logdet: r_inv.transpose()?.scale(-1.0),
            recon: rr,
            jvp: Tensor::zeros(&[d, d]),
        },
    };
    Ok((grad, recon))
}

/// Self-normalizing gradients of an FC layer: `Rᵀ` stands in for `W⁻ᵀ`,
/// `Wᵀ` for `R⁻ᵀ`, and the forward deltas for the inverse-model ones. No
/// matrix is inverted.
pub fn fc_snf_grads(layer: &FcLayer, h: &Tensor, delta_z: &Tensor, delta_x: &Tensor) -> Result<LayerGrad> {
    batch_of(h, layer.dim(), "fc_snf_grads")?;
    same_shape(h, delta_z, "fc_snf_grads")?;
    same_shape(h, delta_x, "fc_snf_grads")?;
    let z = layer.forward(h)?;
    Ok(fc_snf_with(layer, h, &z, delta_z, delta_x)?.0)
}

fn fc_snf_with(layer: &FcLayer, h: &Tensor, z: &Tensor, delta_z: &Tensor, delta_x: &Tensor) -> Result<(LayerGrad, f64)> {
    let n = h.rows() as f64;
    let d = layer.dim();
    let (recon, rw, rr) = fc_recon_parts(layer, h, z)?;
    let grad = LayerGrad {
        layer: 0,
        theta: ParamGrad {
            loglik: matmul_at_b(delta_z, h)?.scale(1.0 / n),
            logdet: layer.r().transpose()?,
            recon: rw,
            jvp: Tensor::zeros(&[d, d]),
        },
        gamma: ParamGrad {
            loglik: matmul_at_b(delta_x, z)?.scale(-1.0 / n),
            logdet: layer.w().transpose()?.scale(-1.0),
            recon: rr,
            jvp: Tensor::zeros(&[d, d]),
        },
    };
    Ok((grad, recon))
}

/// Exact gradients of a conv layer through the explicit matrices `T(w)` and
/// `T(r)`. The log-determinant terms project `T(·)⁻ᵀ` back onto the kernel
/// taps.
pub fn conv_exact_grad(layer: &ConvLayer, h: &Tensor, delta_z: &Tensor, side: Option<InverseSide>) -> Result<LayerGrad> {
    batch_of(h, layer.dim(), "conv_exact_grad")?;
    same_shape(h, delta_z, "conv_exact_grad")?;
    let w_inv = lu_factor(&layer.forward_matrix()?)?.inverse();
    let r_inv = lu_factor(&layer.inverse_matrix()?)?.inverse();
    let owned;
    let side = match side {
        Some(s) => s,
        None => {
            owned = standalone_side(&r_inv, h)?;
            InverseSide {
                input: h,
                output: &owned.0,
                delta: &owned.1,
            }
        }
    };
    let z = layer.forward(h)?;
    Ok(conv_exact_with(layer, h, &z, delta_z, &w_inv, &r_inv, side)?.0)
}

fn conv_exact_with(
    layer: &ConvLayer,
    h: &Tensor,
    z: &Tensor,
    delta_z: &Tensor,
    w_inv: &Tensor,
    r_inv: &Tensor,
    side: InverseSide,
) -> Result<(LayerGrad, f64)> {
    let n = h.rows() as f64;
    let (recon, rw, rr) = conv_recon_parts(layer, h, z)?;
    let taps_w = TapIndex::cached(layer.w_dims(), layer.shape(), layer.pad_w())?;
    let taps_r = TapIndex::cached(layer.r_dims(), layer.shape(), layer.pad_r())?;
    let a = matmul(side.delta, r_inv)?;
    let grad = LayerGrad {
        layer: 0,
        theta: ParamGrad {
            loglik: sum_kernel_grads(layer, delta_z, h, layer.w_dims(), layer.pad_w())?.scale(1.0 / n),
            logdet: taps_w.project(&w_inv.transpose()?)?,
            recon: rw,
            jvp: Tensor::zeros(layer.w().shape()),
        },
        gamma: ParamGrad {
            loglik: sum_kernel_grads(layer, &a, side.output, layer.r_dims(), layer.pad_r())?.scale(-1.0 / n),
            logdet: taps_r.project(&r_inv.transpose()?)?.scale(-1.0),
            recon: rr,
            jvp: Tensor::zeros(layer.r().shape()),
        },
    };
    Ok((grad, recon))
}

/// Self-normalizing conv gradients: `flip(r) ⊙ m` and `flip(w) ⊙ m` replace
/// the projected inverse matrices, after cropping or padding the other
/// model's kernel to this kernel's extent.
pub fn conv_snf_grads(layer: &ConvLayer, h: &Tensor, delta_z: &Tensor, delta_x: &Tensor) -> Result<LayerGrad> {
    batch_of(h, layer.dim(), "conv_snf_grads")?;
    same_shape(h, delta_z, "conv_snf_grads")?;
    same_shape(h, delta_x, "conv_snf_grads")?;
    let z = layer.forward(h)?;
    Ok(conv_snf_with(layer, h, &z, delta_z, delta_x)?.0)
}

fn conv_snf_with(
    layer: &ConvLayer,
    h: &Tensor,
    z: &Tensor,
    delta_z: &Tensor,
    delta_x: &Tensor,
) -> Result<(LayerGrad, f64)> {
    let n = h.rows() as f64;
    let [_, _, wh, ww] = layer.w_dims();
    let [_, _, rh, rw_] = layer.r_dims();
    let (recon, grw, grr) = conv_recon_parts(layer, h, z)?;
    let flip_r = crop_kernel_center(&flip_kernel(layer.r())?, wh, ww)?;
    let flip_w = pad_kernel_center(&flip_kernel(layer.w())?, rh, rw_)?;
    let grad = LayerGrad {
        layer: 0,
        theta: ParamGrad {
            loglik: sum_kernel_grads(layer, delta_z, h, layer.w_dims(), layer.pad_w())?.scale(1.0 / n),
            logdet: flip_r.mul_elem(layer.m_w())?,
            recon: grw,
            jvp: Tensor::zeros(layer.w().shape()),
        },
        gamma: ParamGrad {
            loglik: sum_kernel_grads(layer, delta_x, z, layer.r_dims(), layer.pad_r())?.scale(-1.0 / n),
            logdet: flip_w.mul_elem(layer.m_r())?.scale(-1.0),
            recon: grr,
            jvp: Tensor::zeros(layer.r().shape()),
        },
    };
    Ok((grad, recon))
}

/// Monte-Carlo JVP penalty `mean_ν ‖γ(θ ν) − ν‖²` over the probe rows, and
/// its gradients with respect to `(θ, γ)`. For linear layers the Jacobians
/// are the layers themselves, so this is the reconstruction loss evaluated
/// at the probes.
pub fn jvp_inverse_penalty(layer: &Layer, probes: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let loss = recon_loss(layer, probes)?;
    let (dt, dg) = recon_pair(layer, probes)?;
    Ok((loss, dt, dg))
}

// ---------------------------------------------------------------------------
// Model-level engine

/// Batch statistics from one gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    /// Mean `log N(z) + Σ log|σ'|` along the forward path (excludes the
    /// data-independent linear log-determinants).
    pub data_logprob: f64,
    /// Full mean `log p^f`; only computed in exact mode.
    pub log_pf: Option<f64>,
    /// Full mean `log p^g`; only computed in exact mode.
    pub log_pg: Option<f64>,
    /// Mean summed reconstruction loss over layers.
    pub recon: f64,
    /// Mean summed JVP penalty over layers (0 when disabled).
    pub jvp: f64,
    /// The objective being ascended. In exact mode this is the full mixture
    /// objective; in SNF mode the log-determinants are unknown and the value
    /// is `data_logprob − λ·recon − μ·jvp`.
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct GradOutcome {
    pub report: GradReport,
    pub stats: BatchStats,
}

/// Gradients of the mixture objective for one batch.
///
/// `rng` is only consumed when the JVP penalty is enabled.
pub fn compute_gradients<R: Rng + ?Sized>(
    model: &FlowModel,
    x: &Tensor,
    cfg: &GradConfig,
    rng: &mut R,
) -> Result<GradOutcome> {
    if !(cfg.jvp_weight >= 0.0) {
        return Err(SnfError::InvalidConfig("JVP weight must be >= 0".into()));
    }
    let fpath = BackpropState::forward_path(model, x)?;
    let n = fpath.batch();
    if n == 0 {
        return Err(SnfError::DegenerateInput("empty batch".into()));
    }
    let lambda = model.lambda();
    let mut layers = Vec::new();
    let mut recon_total = 0.0;
    let mut log_pf = None;
    let mut log_pg = None;

    match cfg.mode {
        GradMode::Snf => {
            for (k, layer) in model.layers().iter().enumerate() {
                let (h, z) = (&fpath.inputs[k], &fpath.inputs[k + 1]);
                let (dz, dx) = (&fpath.deltas[k + 1], &fpath.deltas[k]);
                let (mut g, recon) = match layer {
                    Layer::Fc(l) => fc_snf_with(l, h, z, dz, dx)?,
                    Layer::Conv(l) => conv_snf_with(l, h, z, dz, dx)?,
                    _ => continue,
                };
                g.layer = k;
                recon_total += recon;
                layers.push(g);
            }
        }
        GradMode::Exact => {
            let mut w_invs = Vec::new();
            let mut r_invs: Vec<Option<Tensor>> = Vec::new();
            let (mut ld_w, mut ld_r) = (0.0, 0.0);
            for layer in model.layers() {
                let (wm, rm) = match layer {
                    Layer::Fc(l) => (l.w().clone(), l.r().clone()),
                    Layer::Conv(l) => (l.forward_matrix()?, l.inverse_matrix()?),
                    _ => {
                        w_invs.push(None);
                        r_invs.push(None);
                        continue;
                    }
                };
                let lw = lu_factor(&wm)?;
                let lr = lu_factor(&rm)?;
                ld_w += lw.logabsdet().1;
                ld_r += lr.logabsdet().1;
                w_invs.push(Some(lw.inverse()));
                r_invs.push(Some(lr.inverse()));
            }
            let gpath = BackpropState::inverse_path(model, x, &r_invs)?;
            log_pf = Some(fpath.mean_data_logprob() + ld_w);
            log_pg = Some(gpath.mean_data_logprob() - ld_r);
            for (k, layer) in model.layers().iter().enumerate() {
                let (h, z, dz) = (&fpath.inputs[k], &fpath.inputs[k + 1], &fpath.deltas[k + 1]);
                let (Some(w_inv), Some(r_inv)) = (&w_invs[k], &r_invs[k]) else {
                    continue;
                };
                let strict_side = InverseSide {
                    input: &gpath.inputs[k],
                    output: &gpath.inputs[k + 1],
                    delta: &gpath.deltas[k + 1],
                };
                let (mut g, recon) = match layer {
                    Layer::Fc(l) => fc_exact_with(l, h, z, dz, w_inv, r_inv, strict_side)?,
                    Layer::Conv(l) if cfg.strict_exact => conv_exact_with(l, h, z, dz, w_inv, r_inv, strict_side)?,
                    Layer::Conv(l) => {
                        let u = matmul_a_bt(h, r_inv)?;
                        let side = InverseSide {
                            input: h,
                            output: &u,
                            delta: dz,
                        };
                        conv_exact_with(l, h, z, dz, w_inv, r_inv, side)?
                    }
                    _ => continue,
                };
                g.layer = k;
                recon_total += recon;
                layers.push(g);
            }
        }
    }

    let mut jvp_total = 0.0;
    if cfg.jvp_weight > 0.0 {
        let p = cfg.jvp_probes.max(1);
        for g in &mut layers {
            let layer = &model.layers()[g.layer];
            let probes = cfg.probe.draw(&[p, model.layer_shapes()[g.layer].iter().product()], rng);
            let (loss, dt, dg) = jvp_inverse_penalty(layer, &probes)?;
            jvp_total += loss;
            g.theta.jvp = dt;
            g.gamma.jvp = dg;
        }
    }

    let data_logprob = fpath.mean_data_logprob();
    let objective = match (log_pf, log_pg) {
        (Some(f), Some(g)) => 0.5 * f + 0.5 * g - lambda * recon_total - cfg.jvp_weight * jvp_total,
        _ => data_logprob - lambda * recon_total - cfg.jvp_weight * jvp_total,
    };
    Ok(GradOutcome {
        report: GradReport {
            mode: cfg.mode,
            lambda,
            jvp_weight: cfg.jvp_weight,
            layers,
        },
        stats: BatchStats {
            data_logprob,
            log_pf,
            log_pg,
            recon: recon_total,
            jvp: jvp_total,
            objective,
        },
    })
}

/// Mean per-example reconstruction loss summed over layers; equals the
/// model's own evaluation but exposed here for the penalty bookkeeping.
pub fn model_recon_loss(model: &FlowModel, x: &Tensor) -> Result<f64> {
    let per = model.recon_losses(x)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{dirac_kernel, SmoothLeakyRelu};
    use crate::linalg::inverse;
    use crate::model::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let err = a.rel_diff(b);
        assert!(err <= tol, "relative difference {err:e} > {tol:e}\n{a}\n{b}");
    }

    #[test]
    fn recon_loss_small_cases() {
        let l = Layer::Fc(FcLayer::new(Tensor::eye(2), Tensor::eye(2).scale(2.0)).unwrap());
        assert_eq!(recon_loss(&l, &t(&[&[1.0, 0.0]])).unwrap(), 1.0);
        let w = t(&[&[2.0, 1.0], &[0.5, 3.0]]);
        let l = Layer::Fc(FcLayer::new(w.clone(), inverse(&w).unwrap()).unwrap());
        assert!(recon_loss(&l, &t(&[&[0.3, -0.7]])).unwrap() < 1e-28);
    }

    #[test]
    fn scalar_recon_grads() {
        let l = FcLayer::new(t(&[&[1.0]]), t(&[&[2.0]])).unwrap();
        let (dw, dr) = fc_recon_grads(&l, &t(&[&[1.0]])).unwrap();
        assert_eq!(dw.data(), &[4.0]);
        assert_eq!(dr.data(), &[2.0]);
        let w = t(&[&[2.0, 1.0], &[0.5, 3.0]]);
        let l = FcLayer::new(w.clone(), inverse(&w).unwrap()).unwrap();
        let (dw, dr) = fc_recon_grads(&l, &t(&[&[0.3, -0.7], &[1.0, 2.0]])).unwrap();
        assert!(dw.max_abs() < 1e-14 && dr.max_abs() < 1e-14);
    }

    #[test]
    fn identity_layer_at_origin() {
        let l = FcLayer::identity(2);
        let h = Tensor::zeros(&[1, 2]);
        let g = fc_exact_grads(&l, &h, &Tensor::zeros(&[1, 2]), None).unwrap();
        close(&g.theta.likelihood(), &Tensor::eye(2).scale(0.5), 0.0);
        close(&g.gamma.likelihood(), &Tensor::eye(2).scale(-0.5), 0.0);
    }

    #[test]
    fn identity_layer_hand_example() {
        let l = FcLayer::identity(2);
        let h = t(&[&[1.0, 0.0]]);
        let dz = t(&[&[-1.0, 0.0]]);
        let expect = t(&[&[0.0, 0.0], &[0.0, 0.5]]);
        let e = fc_exact_grads(&l, &h, &dz, None).unwrap();
        close(&e.theta.likelihood(), &expect, 0.0);
        let s = fc_snf_grads(&l, &h, &dz, &dz).unwrap();
        close(&s.theta.likelihood(), &expect, 0.0);
        close(&s.gamma.likelihood(), &e.gamma.likelihood(), 1e-15);
    }

    /// Central differences of `f` around every entry of `p`, with step
    /// `1e-5·max(1, |p|)`.
    fn fd_grad(p: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(p.shape());
        for i in 0..p.len() {
            let step = 1e-5 * p.data()[i].abs().max(1.0);
            let mut q = p.clone();
            q.data_mut()[i] += step;
            let fp = f(&q);
            q.data_mut()[i] -= 2.0 * step;
            let fm = f(&q);
            g.data_mut()[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    /// Mixture objective with every reconstruction term evaluated at the
    /// frozen layer inputs `fixed`, so no gradient flows into earlier layers
    /// through them.
    fn stopped_objective(m: &FlowModel, x: &Tensor, fixed: &[Tensor]) -> f64 {
        let v = m.mixture_objective(x).unwrap();
        let recon: f64 = m
            .layers()
            .iter()
            .enumerate()
            .map(|(k, l)| recon_loss(l, &fixed[k]).unwrap())
            .sum();
        0.5 * v.log_pf + 0.5 * v.log_pg - m.lambda() * recon
    }

    fn perturbed_eye(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::eye(d).add(&Tensor::randn(&[d, d], rng).scale(scale)).unwrap()
    }

    #[test]
    fn fc_exact_matches_finite_differences() {
        let mut r = rng(11);
        let d = 5;
        let w = perturbed_eye(d, 0.3, &mut r);
        let rr = perturbed_eye(d, 0.3, &mut r);
        let x = Tensor::randn(&[7, d], &mut r);
        let lambda = 0.7;
        let build = |w: &Tensor, rm: &Tensor| {
            let layers = vec![
                Layer::Fc(FcLayer::new(w.clone(), rm.clone()).unwrap()),
                Layer::Activation(SmoothLeakyRelu::new(0.3).unwrap()),
            ];
            FlowModel::new([d, 1, 1], layers, lambda).unwrap()
        };
        let model = build(&w, &rr);
        let out = compute_gradients(&model, &x, &GradConfig::exact(), &mut rng(0)).unwrap();
        let obj = model.mixture_objective(&x).unwrap().objective;
        assert!((out.stats.objective - obj).abs() < 1e-10);
        let tot = out.report.totals();
        let fw = fd_grad(&w, |p| build(p, &rr).mixture_objective(&x).unwrap().objective);
        let fr = fd_grad(&rr, |p| build(&w, p).mixture_objective(&x).unwrap().objective);
        close(&tot[0], &fw, 1e-5);
        close(&tot[1], &fr, 1e-5);
    }

    #[test]
    fn two_layer_exact_matches_finite_differences() {
        let mut r = rng(5);
        let d = 4;
        let ps: Vec<Tensor> = (0..4).map(|_| perturbed_eye(d, 0.25, &mut r)).collect();
        let x = Tensor::randn(&[6, d], &mut r);
        let build = |ps: &[Tensor]| {
            let act = Layer::Activation(SmoothLeakyRelu::new(0.3).unwrap());
            let layers = vec![
                Layer::Fc(FcLayer::new(ps[0].clone(), ps[1].clone()).unwrap()),
                act.clone(),
                Layer::Fc(FcLayer::new(ps[2].clone(), ps[3].clone()).unwrap()),
                act,
            ];
            FlowModel::new([d, 1, 1], layers, 2.0).unwrap()
        };
        let base = build(&ps);
        let out = compute_gradients(&base, &x, &GradConfig::exact(), &mut rng(0)).unwrap();
        let fixed = BackpropState::forward_path(&base, &x).unwrap().inputs;
        let tot = out.report.totals();
        for j in 0..4 {
            let fd = fd_grad(&ps[j], |p| {
                let mut q = ps.clone();
                q[j] = p.clone();
                stopped_objective(&build(&q), &x, &fixed)
            });
            close(&tot[j], &fd, 1e-5);
        }
    }

    #[test]
    fn snf_equals_exact_under_exact_inverse() {
        let mut m = ModelSpec::Fc2
            .build([6, 1, 1], &crate::model::BuildOptions { seed: 2, ..Default::default() })
            .unwrap();
        for p in m.params_mut() {
            let mut r = rng(p.len() as u64);
            p.axpy(0.2, &Tensor::randn(p.shape(), &mut r)).unwrap();
        }
        m.sync_fc_inverses().unwrap();
        let x = Tensor::randn(&[9, 6], &mut rng(4));
        let e = compute_gradients(&m, &x, &GradConfig::exact(), &mut rng(0)).unwrap();
        let s = compute_gradients(&m, &x, &GradConfig::snf(), &mut rng(0)).unwrap();
        for (a, b) in e.report.totals().iter().zip(s.report.totals()) {
            close(a, &b, 1e-9);
        }
    }

    fn random_conv(c: usize, k: usize, shape: [usize; 3], seed: u64) -> ConvLayer {
        let mut r = rng(seed);
        let w = dirac_kernel(c, k, k).add(&Tensor::randn(&[c, c, k, k], &mut r).scale(0.15)).unwrap();
        let rr = dirac_kernel(c, k, k).add(&Tensor::randn(&[c, c, k, k], &mut r).scale(0.15)).unwrap();
        ConvLayer::new(w, rr, shape).unwrap()
    }

    #[test]
    fn conv_exact_matches_finite_differences() {
        let shape = [1, 5, 5];
        let base = random_conv(1, 3, shape, 8);
        let x = Tensor::randn(&[3, 25], &mut rng(1));
        let build = |w: &Tensor, r: &Tensor| {
            FlowModel::new(shape, vec![Layer::Conv(ConvLayer::new(w.clone(), r.clone(), shape).unwrap())], 0.5).unwrap()
        };
        let cfg = GradConfig {
            strict_exact: true,
            ..GradConfig::exact()
        };
        let out = compute_gradients(&build(base.w(), base.r()), &x, &cfg, &mut rng(0)).unwrap();
        let tot = out.report.totals();
        let fw = fd_grad(base.w(), |p| build(p, base.r()).mixture_objective(&x).unwrap().objective);
        let fr = fd_grad(base.r(), |p| build(base.w(), p).mixture_objective(&x).unwrap().objective);
        close(&tot[0], &fw, 1e-5);
        close(&tot[1], &fr, 1e-5);
    }

    #[test]
    fn conv_snf_logdet_matches_matrix_projection() {
        let shape = [2, 4, 4];
        for (k, rk) in [(3, 3), (3, 5), (1, 3)] {
            let mut r = rng(k as u64 * 10 + rk as u64);
            let w = Tensor::randn(&[2, 2, k, k], &mut r);
            let rr = Tensor::randn(&[2, 2, rk, rk], &mut r);
            let l = ConvLayer::new(w, rr, shape).unwrap();
            let h = Tensor::zeros(&[1, 32]);
            let g = conv_snf_grads(&l, &h, &h, &h).unwrap();
            let tw = TapIndex::new(l.w_dims(), shape, l.pad_w()).unwrap();
            let tr = TapIndex::new(l.r_dims(), shape, l.pad_r()).unwrap();
            let proj_w = tw.project(&l.inverse_matrix().unwrap().transpose().unwrap()).unwrap();
            let proj_r = tr.project(&l.forward_matrix().unwrap().transpose().unwrap()).unwrap().scale(-1.0);
            close(&g.theta.logdet, &proj_w, 1e-12);
            close(&g.gamma.logdet, &proj_r, 1e-12);
        }
    }

    #[test]
    fn conv_dirac_at_origin() {
        let shape = [1, 3, 3];
        let l = ConvLayer::new(dirac_kernel(1, 3, 3), dirac_kernel(1, 3, 3), shape).unwrap();
        let h = Tensor::zeros(&[1, 9]);
        let g = conv_snf_grads(&l, &h, &h, &h).unwrap();
        let m_dirac = l.m_w().mul_elem(&dirac_kernel(1, 3, 3)).unwrap();
        close(&g.theta.logdet, &m_dirac, 0.0);
        close(&g.gamma.logdet, &m_dirac.scale(-1.0), 0.0);
        assert_eq!(g.theta.loglik.max_abs(), 0.0);
        let e = conv_exact_grad(&l, &h, &h, None).unwrap();
        close(&e.theta.logdet, &m_dirac, 1e-15);
    }

    #[test]
    fn one_by_one_conv_equals_fc_per_pixel_and_snf_under_inverse() {
        let c = 3;
        let shape = [c, 2, 2];
        let mut r = rng(21);
        let a = perturbed_eye(c, 0.3, &mut r);
        let a_inv = inverse(&a).unwrap();
        let to_kernel = |m: &Tensor| m.clone().reshape(&[c, c, 1, 1]).unwrap();
        let conv = ConvLayer::new(to_kernel(&a), to_kernel(&a_inv), shape).unwrap();
        let x = Tensor::randn(&[4, 12], &mut r);
        let z = conv.forward(&x).unwrap();
        let dz = z.scale(-1.0);
        let dx = conv.forward_transpose(&dz).unwrap();
        let e = conv_exact_grad(&conv, &x, &dz, None).unwrap();
        let s = conv_snf_grads(&conv, &x, &dz, &dx).unwrap();
        close(&e.theta.likelihood(), &s.theta.likelihood(), 1e-9);
        close(&e.gamma.likelihood(), &s.gamma.likelihood(), 1e-9);
        // Log-det term: 4 pixels each contribute A⁻ᵀ.
        close(&e.theta.logdet, &to_kernel(&a_inv.transpose().unwrap().scale(4.0)), 1e-12);
    }

    #[test]
    fn conv_data_term_equals_projected_outer_product() {
        let shape = [2, 3, 3];
        let l = random_conv(2, 3, shape, 4);
        let mut r = rng(9);
        let h = Tensor::randn(&[1, 18], &mut r);
        let dz = Tensor::randn(&[1, 18], &mut r);
        let g = conv_snf_grads(&l, &h, &dz, &dz).unwrap();
        let outer = matmul_at_b(&dz, &h).unwrap();
        let taps = TapIndex::new(l.w_dims(), shape, l.pad_w()).unwrap();
        close(&g.theta.loglik, &taps.project(&outer).unwrap(), 1e-12);
    }

    #[test]
    fn jvp_penalty_values_and_grads() {
        let l = Layer::Fc(FcLayer::new(t(&[&[2.0]]), t(&[&[1.0]])).unwrap());
        let (loss, _, _) = jvp_inverse_penalty(&l, &t(&[&[1.0]])).unwrap();
        assert_eq!(loss, 1.0);
        let conv = random_conv(1, 3, [1, 4, 4], 6);
        let probes = Tensor::randn(&[3, 16], &mut rng(2));
        let (_, dw, dr) = jvp_inverse_penalty(&Layer::Conv(conv.clone()), &probes).unwrap();
        let f = |w: &Tensor, r: &Tensor| {
            recon_loss(&Layer::Conv(ConvLayer::new(w.clone(), r.clone(), [1, 4, 4]).unwrap()), &probes).unwrap()
        };
        close(&dw, &fd_grad(conv.w(), |p| f(p, conv.r())), 1e-6);
        close(&dr, &fd_grad(conv.r(), |p| f(conv.w(), p)), 1e-6);
    }

    #[test]
    fn backprop_relation_between_deltas() {
        let m = ModelSpec::Fc2.build([3, 1, 1], &Default::default()).unwrap();
        let x = Tensor::randn(&[2, 3], &mut rng(3));
        let s = BackpropState::forward_path(&m, &x).unwrap();
        let Layer::Fc(l) = &m.layers()[2] else { panic!() };
        close(&s.deltas[2], &matmul(&s.deltas[3], l.w()).unwrap(), 1e-15);
    }

    #[test]
    fn jvp_changes_totals_only_when_enabled() {
        let m = ModelSpec::Fc2.build([3, 1, 1], &Default::default()).unwrap();
        let x = Tensor::randn(&[4, 3], &mut rng(3));
        let plain = compute_gradients(&m, &x, &GradConfig::snf(), &mut rng(1)).unwrap();
        assert_eq!(plain.stats.jvp, 0.0);
        let cfg = GradConfig {
            jvp_weight: 1.0,
            jvp_probes: 4,
            probe: ProbeDistribution::Uniform,
            ..GradConfig::snf()
        };
        let with = compute_gradients(&m, &x, &cfg, &mut rng(1)).unwrap();
        assert!(with.stats.jvp > 0.0);
        assert_ne!(plain.report.totals(), with.report.totals());
    }

    mod props {
        use super::*;
        use crate::tensor::matmul;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            /// With the learned inverse set to the exact one, the
            /// self-normalizing gradients coincide with the exact ones.
            #[test]
            fn fc_snf_equals_exact_at_the_true_inverse(d in 1usize..10, n in 1usize..8, seed in 0u64..10_000) {
                let mut r = rng(seed);
                let w = Tensor::eye(d).add(&Tensor::randn(&[d, d], &mut r).scale(0.3)).unwrap();
                let layer = FcLayer::new(w.clone(), inverse(&w).unwrap()).unwrap();
                let h = Tensor::randn(&[n, d], &mut r);
                let dz = Tensor::randn(&[n, d], &mut r);
                let z = layer.forward(&h).unwrap();
                let dx = matmul(&dz, &w).unwrap();
                let side = InverseSide { input: &h, output: &z, delta: &dz };
                let exact = fc_exact_grads(&layer, &h, &dz, Some(side)).unwrap();
                let snf = fc_snf_grads(&layer, &h, &dz, &dx).unwrap();
                let (a, b) = (Tensor::vector(exact.flat_total(1.0, 0.0)), Tensor::vector(snf.flat_total(1.0, 0.0)));
                prop_assert!(a.rel_diff(&b) < 1e-9, "rel diff {}", a.rel_diff(&b));
            }
        }
    }
}
