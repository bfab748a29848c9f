//! Flow layers. Linear layers carry a forward parameter (θ: `W` or `w`) and a
//! learned inverse parameter (γ: `R` or `r`); the activation and squeeze
//! layers have analytic inverses and no parameters.
//!
//! Batches are `[N, D]` tensors of flattened `[C, H, W]` images.

use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::conv::{
    build_conv_matrix, conv2d_flat, conv2d_transpose_flat, kernel_dims, kernel_grad_flat, same_padding,
    ImageShape,
};
use crate::error::{shape_err, Result, SnfError};
use crate::linalg::{lu_factor, LuFactorization};
use crate::tensor::{matmul_a_bt, Tensor};

/// Xavier-normal standard deviation.
fn xavier_std(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Gain used for the identity-plus-noise initialization.
pub const INIT_GAIN: f64 = 0.01;

fn check_batch(x: &Tensor, dim: usize, op: &'static str) -> Result<usize> {
    match x.shape() {
        &[n, d] if d == dim => Ok(n),
        s => Err(shape_err(op, format!("expected [N, {dim}], got {:?}", s))),
    }
}

// ---------------------------------------------------------------------------
// Fully connected

/// `f(x) = W x`, `g(z) = R z`.
#[derive(Clone, Debug)]
pub struct FcLayer {
    w: Tensor,
    r: Tensor,
}

impl FcLayer {
    pub fn new(w: Tensor, r: Tensor) -> Result<Self> {
        match (w.shape(), r.shape()) {
            (&[a, b], &[c, d]) if a == b && c == d && a == c => Ok(FcLayer { w, r }),
            (ws, rs) => Err(shape_err(
                "FcLayer::new",
                format!("W {:?} and R {:?} must be equal square matrices", ws, rs),
            )),
        }
    }

    pub fn identity(dim: usize) -> Self {
        FcLayer {
            w: Tensor::eye(dim),
            r: Tensor::eye(dim),
        }
    }

    /// `W = I + XavierNormal(gain 0.01)`, `R = Wᵀ`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let std = xavier_std(dim, dim, INIT_GAIN);
        let noise = Tensor::randn(&[dim, dim], rng).scale(std);
        let w = Tensor::eye(dim).add(&noise).expect("same shape");
        let r = w.transpose().expect("matrix");
        FcLayer { w, r }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn r(&self) -> &Tensor {
        &self.r
    }

    pub fn w_mut(&mut self) -> &mut Tensor {
        &mut self.w
    }

    pub fn r_mut(&mut self) -> &mut Tensor {
        &mut self.r
    }

    pub fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.w, &mut self.r)
    }

    /// `Z = X Wᵀ` (row-wise `z = W x`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(x, self.dim(), "fc_forward")?;
        matmul_a_bt(x, &self.w)
    }

    /// `X̂ = Z Rᵀ`.
    pub fn inverse_learned(&self, z: &Tensor) -> Result<Tensor> {
        check_batch(z, self.dim(), "fc_inverse_learned")?;
        matmul_a_bt(z, &self.r)
    }

    /// Solves `W x = z` row by row through one LU factorization.
    pub fn inverse_exact(&self, z: &Tensor) -> Result<Tensor> {
        let lu = lu_factor(&self.w)?;
        solve_rows(&lu, z)
    }

    /// `‖RWx − x‖²` per example.
    pub fn recon_loss(&self, h: &Tensor) -> Result<Vec<f64>> {
        let xh = self.inverse_learned(&self.forward(h)?)?;
        Ok(row_sq_dist(&xh, h))
    }
}

/// Solves `A xᵢ = zᵢ` for each row `zᵢ` of a batch.
pub(crate) fn solve_rows(lu: &LuFactorization, z: &Tensor) -> Result<Tensor> {
    check_batch(z, lu.dim(), "solve_rows")?;
    let x = lu.solve(&z.transpose()?)?;
    x.transpose()
}

pub(crate) fn row_sq_dist(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Kernel utilities

/// Swaps input/output channel axes and mirrors both spatial axes:
/// `flip(k)[o, i, h, w] = k[i, o, H−1−h, W−1−w]`.
pub fn flip_kernel(k: &Tensor) -> Result<Tensor> {
    let [co, ci, kh, kw] = kernel_dims(k)?;
    let src = k.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..ci {
        for i in 0..co {
            for h in 0..kh {
                for w in 0..kw {
                    out[((o * co + i) * kh + h) * kw + w] = src[((i * ci + o) * kh + (kh - 1 - h)) * kw + (kw - 1 - w)];
                }
            }
        }
    }
    Tensor::new(vec![ci, co, kh, kw], out)
}

/// Number of times each kernel tap occurs in `T(k)`, computed as the
/// correlation of an all-ones output image with an all-ones input image
/// under the layer's own convolution parameters.
pub fn compute_multiple_m(in_shape: ImageShape, kernel_shape: [usize; 4], pad: (usize, usize)) -> Result<Tensor> {
    let out_shape = crate::conv::conv_output_shape(in_shape, kernel_shape, pad)?;
    let ones_out = vec![1.0; out_shape.iter().product()];
    let ones_in = vec![1.0; in_shape.iter().product()];
    let m = kernel_grad_flat(&ones_out, &ones_in, in_shape, kernel_shape, pad)?;
    Tensor::new(kernel_shape.to_vec(), m)
}

/// Central `(kh, kw)` window of a larger odd kernel.
pub fn crop_kernel_center(r: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let [co, ci, rh, rw] = kernel_dims(r)?;
    if kh % 2 == 0 || kw % 2 == 0 || rh % 2 == 0 || rw % 2 == 0 {
        return Err(SnfError::EvenKernel(vec![rh, rw, kh, kw]));
    }
    if kh > rh || kw > rw {
        return Err(shape_err("crop_kernel_center", format!("cannot crop {rh}x{rw} to {kh}x{kw}")));
    }
    let (oy, ox) = ((rh - kh) / 2, (rw - kw) / 2);
    let src = r.data();
    let mut out = Vec::with_capacity(co * ci * kh * kw);
    for oc in 0..co * ci {
        for a in 0..kh {
            for b in 0..kw {
                out.push(src[(oc * rh + a + oy) * rw + b + ox]);
            }
        }
    }
    Tensor::new(vec![co, ci, kh, kw], out)
}

/// Zero-pads an odd kernel to `(kh, kw)`, keeping it centered.
pub fn pad_kernel_center(w: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let [co, ci, wh, ww] = kernel_dims(w)?;
    if kh % 2 == 0 || kw % 2 == 0 || wh % 2 == 0 || ww % 2 == 0 {
        return Err(SnfError::EvenKernel(vec![wh, ww, kh, kw]));
    }
    if kh < wh || kw < ww {
        return Err(shape_err("pad_kernel_center", format!("cannot pad {wh}x{ww} to {kh}x{kw}")));
    }
    let (oy, ox) = ((kh - wh) / 2, (kw - ww) / 2);
    let mut out = Tensor::zeros(&[co, ci, kh, kw]);
    let src = w.data();
    let dst = out.data_mut();
    for oc in 0..co * ci {
        for a in 0..wh {
            for b in 0..ww {
                dst[(oc * kh + a + oy) * kw + b + ox] = src[(oc * wh + a) * ww + b];
            }
        }
    }
    Ok(out)
}

/// Identity kernel: 1 at the spatial center of each `(c, c)` slice.
pub fn dirac_kernel(channels: usize, kh: usize, kw: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, channels, kh, kw]);
    for c in 0..channels {
        t.data_mut()[((c * channels + c) * kh + kh / 2) * kw + kw / 2] = 1.0;
    }
    t
}

// ---------------------------------------------------------------------------
// Convolution

/// `f(x) = w ⋆ x`, `g(z) = r ⋆ z` with "same" zero padding. `r` may have a
/// larger odd extent than `w`.
#[derive(Debug)]
pub struct ConvLayer {
    w: Tensor,
    r: Tensor,
    shape: ImageShape,
    pad_w: (usize, usize),
    pad_r: (usize, usize),
    m_w: Tensor,
    m_r: Tensor,
    exact_lu: Mutex<Option<Arc<LuFactorization>>>,
}

impl Clone for ConvLayer {
    fn clone(&self) -> Self {
        ConvLayer {
            w: self.w.clone(),
            r: self.r.clone(),
            shape: self.shape,
            pad_w: self.pad_w,
            pad_r: self.pad_r,
            m_w: self.m_w.clone(),
            m_r: self.m_r.clone(),
            exact_lu: Mutex::new(None),
        }
    }
}

impl ConvLayer {
    pub fn new(w: Tensor, r: Tensor, shape: ImageShape) -> Result<Self> {
        let [wo, wi, wh, ww] = kernel_dims(&w)?;
        let [ro, ri, rh, rw] = kernel_dims(&r)?;
        if wo != wi || ro != ri || wo != ro || wo != shape[0] {
            return Err(shape_err(
                "ConvLayer::new",
                format!("kernels {:?} / {:?} must map {} channels to themselves", w.shape(), r.shape(), shape[0]),
            ));
        }
        if rh < wh || rw < ww {
            return Err(shape_err("ConvLayer::new", "inverse kernel must be at least as large as the forward kernel"));
        }
        let pad_w = same_padding(wh, ww)?;
        let pad_r = same_padding(rh, rw)?;
        let m_w = compute_multiple_m(shape, [wo, wi, wh, ww], pad_w)?;
        let m_r = compute_multiple_m(shape, [ro, ri, rh, rw], pad_r)?;
        Ok(ConvLayer {
            w,
            r,
            shape,
            pad_w,
            pad_r,
            m_w,
            m_r,
            exact_lu: Mutex::new(None),
        })
    }

    /// `w = dirac + XavierNormal(gain 0.01)`, `r = flip(w)` (zero-padded to
    /// `inverse_kernel` when that is larger).
    pub fn init<R: Rng + ?Sized>(shape: ImageShape, kernel: usize, inverse_kernel: usize, rng: &mut R) -> Result<Self> {
        let c = shape[0];
        let fan = c * kernel * kernel;
        let std = xavier_std(fan, fan, INIT_GAIN);
        let noise = Tensor::randn(&[c, c, kernel, kernel], rng).scale(std);
        let w = dirac_kernel(c, kernel, kernel).add(&noise)?;
        let r = pad_kernel_center(&flip_kernel(&w)?, inverse_kernel, inverse_kernel)?;
        ConvLayer::new(w, r, shape)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn r(&self) -> &Tensor {
        &self.r
    }

    pub fn pad_w(&self) -> (usize, usize) {
        self.pad_w
    }

    pub fn pad_r(&self) -> (usize, usize) {
        self.pad_r
    }

    pub fn w_dims(&self) -> [usize; 4] {
        kernel_dims(&self.w).expect("validated")
    }

    pub fn r_dims(&self) -> [usize; 4] {
        kernel_dims(&self.r).expect("validated")
    }

    pub fn m_w(&self) -> &Tensor {
        &self.m_w
    }

    pub fn m_r(&self) -> &Tensor {
        &self.m_r
    }

    pub fn is_asymmetric(&self) -> bool {
        self.w.shape() != self.r.shape()
    }

    pub fn w_mut(&mut self) -> &mut Tensor {
        *self.exact_lu.get_mut().unwrap() = None;
        &mut self.w
    }

    pub fn r_mut(&mut self) -> &mut Tensor {
        &mut self.r
    }

    /// Both kernels at once; clears the cached factorization.
    pub fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        *self.exact_lu.get_mut().unwrap() = None;
        (&mut self.w, &mut self.r)
    }

    /// Rebinds the layer to a new image shape, recomputing `m`.
    pub fn rebind(&mut self, shape: ImageShape) -> Result<()> {
        if shape[0] != self.shape[0] {
            return Err(shape_err("ConvLayer::rebind", "channel count cannot change"));
        }
        self.m_w = compute_multiple_m(shape, self.w_dims(), self.pad_w)?;
        self.m_r = compute_multiple_m(shape, self.r_dims(), self.pad_r)?;
        self.shape = shape;
        *self.exact_lu.get_mut().unwrap() = None;
        Ok(())
    }

    fn map_rows(&self, x: &Tensor, op: &'static str, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Tensor> {
        let n = check_batch(x, self.dim(), op)?;
        let mut out = Tensor::zeros(&[n, self.dim()]);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&f(x.row(i))?);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, "conv_forward", |row| conv2d_flat(row, self.shape, &self.w, self.pad_w))
    }

    pub fn inverse_learned(&self, z: &Tensor) -> Result<Tensor> {
        self.map_rows(z, "conv_inverse_learned", |row| conv2d_flat(row, self.shape, &self.r, self.pad_r))
    }

    /// `T(w)ᵀ δ` per row.
    pub fn forward_transpose(&self, delta: &Tensor) -> Result<Tensor> {
        self.map_rows(delta, "conv_forward_transpose", |row| {
            conv2d_transpose_flat(row, self.shape, &self.w, self.pad_w)
        })
    }

    /// `T(r)ᵀ e` per row.
    pub fn inverse_transpose(&self, e: &Tensor) -> Result<Tensor> {
        self.map_rows(e, "conv_inverse_transpose", |row| {
            conv2d_transpose_flat(row, self.shape, &self.r, self.pad_r)
        })
    }

    pub fn forward_matrix(&self) -> Result<Tensor> {
        build_conv_matrix(&self.w, self.shape, self.pad_w)
    }

    pub fn inverse_matrix(&self) -> Result<Tensor> {
        build_conv_matrix(&self.r, self.shape, self.pad_r)
    }

    /// LU factorization of `T(w)`, built once per kernel and shape. The
    /// boolean is true when this call performed the factorization.
    pub fn exact_factorization(&self) -> Result<(Arc<LuFactorization>, bool)> {
        let mut slot = self.exact_lu.lock().unwrap();
        if let Some(lu) = slot.as_ref() {
            return Ok((lu.clone(), false));
        }
        let lu = Arc::new(lu_factor(&self.forward_matrix()?)?);
        *slot = Some(lu.clone());
        Ok((lu, true))
    }

    pub fn inverse_exact(&self, z: &Tensor) -> Result<Tensor> {
        let (lu, _) = self.exact_factorization()?;
        solve_rows(&lu, z)
    }

    pub fn recon_loss(&self, h: &Tensor) -> Result<Vec<f64>> {
        let xh = self.inverse_learned(&self.forward(h)?)?;
        Ok(row_sq_dist(&xh, h))
    }
}

// ---------------------------------------------------------------------------
// Smooth leaky ReLU

/// `σ(x) = αx + (1−α)·softplus(x)`, strictly increasing with
/// `σ'(x) = α + (1−α)·sigmoid(x) > α`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothLeakyRelu {
    alpha: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.3;
const NEWTON_MAX_ITERS: usize = 100;
const INVERSE_TOL: f64 = 1e-10;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Default for SmoothLeakyRelu {
    fn default() -> Self {
        SmoothLeakyRelu { alpha: DEFAULT_ALPHA }
    }
}

impl SmoothLeakyRelu {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(SnfError::InvalidConfig(format!("slope {alpha} outside (0, 1]")));
        }
        Ok(SmoothLeakyRelu { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn value(&self, x: f64) -> f64 {
        if self.alpha == 1.0 {
            return x;
        }
        self.alpha * x + (1.0 - self.alpha) * softplus(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.alpha + (1.0 - self.alpha) * sigmoid(x)
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let s = sigmoid(x);
        (1.0 - self.alpha) * s * (1.0 - s)
    }

    /// `(y, Σ log σ'(xᵢ))` for one flattened example.
    pub fn forward_vec(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let y = x.iter().map(|&v| self.value(v)).collect();
        let logdet = x.iter().map(|&v| self.derivative(v).ln()).sum();
        (y, logdet)
    }

    /// Batch forward; returns outputs and per-example log-determinants.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        let y = x.map(|v| self.value(v));
        let logdets = (0..x.rows())
            .map(|i| x.row(i).iter().map(|&v| self.derivative(v).ln()).sum())
            .collect();
        (y, logdets)
    }

    /// Newton iteration on `σ(x) − y` with a bisection fallback whenever an
    /// iterate leaves the bracket `[min(y, y/α) − 1, max(y, y/α) + 1]`.
    pub fn inverse_scalar(&self, y: f64) -> Result<f64> {
        if self.alpha == 1.0 {
            return Ok(y);
        }
        if !y.is_finite() {
            return Err(SnfError::NoConvergence {
                iterations: 0,
                residual: f64::INFINITY,
            });
        }
        let a = self.alpha;
        let (mut lo, mut hi) = (y.min(y / a) - 1.0, y.max(y / a) + 1.0);
        let mut x = if y < 0.0 { y / a } else { y };
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITERS {
            let f = self.value(x) - y;
            residual = f.abs();
            if residual <= INVERSE_TOL * y.abs().max(1.0) {
                return Ok(x);
            }
            if f > 0.0 {
                hi = hi.min(x);
            } else {
                lo = lo.max(x);
            }
            let step = x - f / self.derivative(x);
            x = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        }
        Err(SnfError::NoConvergence {
            iterations: NEWTON_MAX_ITERS,
            residual,
        })
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let mut out = y.clone();
        for v in out.data_mut() {
            *v = self.inverse_scalar(*v)?;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Squeeze

/// Moves `factor × factor` spatial blocks into channels:
/// `out[c·f² + dy·f + dx, y, x] = in[c, f·y + dy, f·x + dx]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqueezeLayer {
    factor: usize,
}

impl Default for SqueezeLayer {
    fn default() -> Self {
        SqueezeLayer { factor: 2 }
    }
}

impl SqueezeLayer {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(SnfError::InvalidConfig("squeeze factor must be positive".into()));
        }
        Ok(SqueezeLayer { factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn output_shape(&self, [c, h, w]: ImageShape) -> Result<ImageShape> {
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(shape_err("squeeze", format!("spatial extent {h}x{w} not divisible by {f}")));
        }
        Ok([c * f * f, h / f, w / f])
    }

    /// `src_index[j]` is the input position that lands at output position `j`.
    fn permutation(&self, shape: ImageShape) -> Result<Vec<usize>> {
        let [c, h, w] = shape;
        let [_, ho, wo] = self.output_shape(shape)?;
        let f = self.factor;
        let mut idx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    for y in 0..ho {
                        for x in 0..wo {
                            idx.push((ch * h + f * y + dy) * w + f * x + dx);
                        }
                    }
                }
            }
        }
        Ok(idx)
    }

    pub fn forward_vec(&self, x: &[f64], shape: ImageShape) -> Result<Vec<f64>> {
        let p = self.permutation(shape)?;
        if x.len() != p.len() {
            return Err(shape_err("squeeze_forward", "length mismatch"));
        }
        Ok(p.iter().map(|&s| x[s]).collect())
    }

    pub fn inverse_vec(&self, y: &[f64], in_shape: ImageShape) -> Result<Vec<f64>> {
        let p = self.permutation(in_shape)?;
        if y.len() != p.len() {
            return Err(shape_err("squeeze_inverse", "length mismatch"));
        }
        let mut out = vec![0.0; y.len()];
        for (j, &s) in p.iter().enumerate() {
            out[s] = y[j];
        }
        Ok(out)
    }

    /// Squeeze of a `[C, H, W]` tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = crate::conv::image_shape(x)?;
        Tensor::new(self.output_shape(shape)?.to_vec(), self.forward_vec(x.data(), shape)?)
    }

    /// Inverse of [`SqueezeLayer::forward`]; `y` is `[C·f², H/f, W/f]`.
    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let [c, h, w] = crate::conv::image_shape(y)?;
        let f = self.factor;
        if c % (f * f) != 0 {
            return Err(shape_err("squeeze_inverse", "channel count not divisible by factor²"));
        }
        let in_shape = [c / (f * f), h * f, w * f];
        Tensor::new(in_shape.to_vec(), self.inverse_vec(y.data(), in_shape)?)
    }

    pub fn forward_batch(&self, x: &Tensor, shape: ImageShape) -> Result<Tensor> {
        let perm = self.permutation(shape)?;
        let n = check_batch(x, perm.len(), "squeeze_forward")?;
        let mut out = Tensor::zeros(&[n, perm.len()]);
        for i in 0..n {
            let src = x.row(i);
            for (o, &s) in out.row_mut(i).iter_mut().zip(&perm) {
                *o = src[s];
            }
        }
        Ok(out)
    }

    pub fn inverse_batch(&self, y: &Tensor, in_shape: ImageShape) -> Result<Tensor> {
        let perm = self.permutation(in_shape)?;
        let n = check_batch(y, perm.len(), "squeeze_inverse")?;
        let mut out = Tensor::zeros(&[n, perm.len()]);
        for i in 0..n {
            let src = y.row(i).to_vec();
            let dst = out.row_mut(i);
            for (j, &s) in perm.iter().enumerate() {
                dst[s] = src[j];
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------

/// One step of the flow.
#[derive(Clone, Debug)]
pub enum Layer {
    Fc(FcLayer),
    Conv(ConvLayer),
    Activation(SmoothLeakyRelu),
    Squeeze(SqueezeLayer),
}

impl Layer {
    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Fc(_) | Layer::Conv(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Fc(_) => "fc",
            Layer::Conv(_) => "conv",
            Layer::Activation(_) => "slrelu",
            Layer::Squeeze(_) => "squeeze",
        }
    }

    /// `(θ, γ)` for parameterized layers.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Fc(l) => Some((l.w(), l.r())),
            Layer::Conv(l) => Some((l.w(), l.r())),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Fc(l) => Some(l.params_mut()),
            Layer::Conv(l) => Some(l.params_mut()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{build_conv_matrix, TapIndex};
    use crate::linalg::inverse;
    use crate::tensor::matmul;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, d], &mut rng(seed))
    }

    #[test]
    fn fc_forward_cases() {
        let x = batch(3, 4, 0);
        assert_eq!(FcLayer::identity(4).forward(&x).unwrap(), x);

        let swap = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let l = FcLayer::new(swap.clone(), swap).unwrap();
        let z = l.forward(&Tensor::from_rows(&[&[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(z.data(), &[2.0, 1.0]);

        let l = FcLayer::init(4, &mut rng(1));
        let z = l.forward(&x).unwrap();
        let want = matmul(&x, &l.w().transpose().unwrap()).unwrap();
        assert!(z.rel_diff(&want) < 1e-15);
        assert!(l.forward(&batch(2, 3, 0)).is_err());
    }

    #[test]
    fn fc_init_is_near_mutual_inverse() {
        let l = FcLayer::init(16, &mut rng(2));
        let rw = matmul(l.r(), l.w()).unwrap();
        let dev = rw.sub(&Tensor::eye(16)).unwrap().norm() / 4.0;
        // R = Wᵀ so RW − I = N + Nᵀ + NᵀN with ‖N‖ ~ 0.01.
        assert!(dev < 0.05, "{dev}");
        assert_eq!(l.r(), &l.w().transpose().unwrap());
    }

    #[test]
    fn fc_inverses() {
        let x = batch(5, 6, 3);
        let mut l = FcLayer::init(6, &mut rng(4));
        assert_eq!(FcLayer::identity(6).inverse_learned(&x).unwrap(), x);
        *l.r_mut() = inverse(l.w()).unwrap();
        let z = l.forward(&x).unwrap();
        assert!(l.inverse_learned(&z).unwrap().rel_diff(&x) < 1e-9);
        assert!(l.inverse_exact(&z).unwrap().rel_diff(&x) < 1e-9);

        let d = FcLayer::new(Tensor::diag(&[2.0, 4.0]), Tensor::eye(2)).unwrap();
        let x = d.inverse_exact(&Tensor::from_rows(&[&[2.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0]);

        let sing = FcLayer::new(Tensor::zeros(&[2, 2]), Tensor::eye(2)).unwrap();
        assert!(matches!(sing.inverse_exact(&batch(1, 2, 0)), Err(SnfError::SingularMatrix { .. })));
    }

    #[test]
    fn flip_examples() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(flip_kernel(&k).unwrap(), k);
        let k = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let f = flip_kernel(&k).unwrap();
        assert_eq!(f.data(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn flip_is_transpose_of_conv_matrix() {
        let k = Tensor::randn(&[2, 3, 3, 3], &mut rng(5));
        assert_eq!(flip_kernel(&k).unwrap().shape(), &[3, 2, 3, 3]);
        assert_eq!(flip_kernel(&flip_kernel(&k).unwrap()).unwrap(), k);

        let k = Tensor::randn(&[3, 3, 3, 3], &mut rng(6));
        let t = build_conv_matrix(&k, [3, 4, 5], (1, 1)).unwrap();
        let tf = build_conv_matrix(&flip_kernel(&k).unwrap(), [3, 4, 5], (1, 1)).unwrap();
        assert_eq!(tf, t.transpose().unwrap());
    }

    fn brute_force_m(kshape: [usize; 4], shape: ImageShape, pad: (usize, usize)) -> Vec<f64> {
        // Tap-indexed kernel: tap t has value t + 1, so counting entries of
        // T(k) equal to t + 1 counts occurrences of tap t.
        let n: usize = kshape.iter().product();
        let k = Tensor::new(kshape.to_vec(), (1..=n).map(|v| v as f64).collect()).unwrap();
        let t = build_conv_matrix(&k, shape, pad).unwrap();
        (1..=n)
            .map(|v| t.data().iter().filter(|&&e| e == v as f64).count() as f64)
            .collect()
    }

    #[test]
    fn multiple_m_examples() {
        let m = compute_multiple_m([1, 4, 6], [1, 1, 1, 1], (0, 0)).unwrap();
        assert_eq!(m.data(), &[24.0]);

        let m = compute_multiple_m([1, 5, 5], [1, 1, 3, 3], (1, 1)).unwrap();
        assert_eq!(m.data(), &[16.0, 20.0, 16.0, 20.0, 25.0, 20.0, 16.0, 20.0, 16.0]);
        assert_eq!(m.data(), brute_force_m([1, 1, 3, 3], [1, 5, 5], (1, 1)).as_slice());

        let m = compute_multiple_m([1, 3, 3], [1, 1, 3, 3], (1, 1)).unwrap();
        assert_eq!(m.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(m.data(), brute_force_m([1, 1, 3, 3], [1, 3, 3], (1, 1)).as_slice());

        let m = compute_multiple_m([2, 4, 3], [2, 2, 3, 5], (1, 2)).unwrap();
        assert_eq!(m.data(), brute_force_m([2, 2, 3, 5], [2, 4, 3], (1, 2)).as_slice());
        assert!(m.data().iter().all(|&v| v >= 1.0 && v.fract() == 0.0));
    }

    #[test]
    fn conv_layer_basics() {
        let shape = [2, 4, 4];
        let x = batch(3, 32, 7);
        let id = ConvLayer::new(dirac_kernel(2, 3, 3), dirac_kernel(2, 3, 3), shape).unwrap();
        assert_eq!(id.forward(&x).unwrap(), x);
        assert_eq!(id.inverse_learned(&x).unwrap(), x);
        assert!(id.inverse_exact(&x).unwrap().rel_diff(&x) < 1e-15);

        // 1x1 channel mixing is a per-pixel matrix product.
        let a = Tensor::from_rows(&[&[1.0, 0.5], &[-0.3, 2.0]]).unwrap();
        let k = a.clone().reshape(&[2, 2, 1, 1]).unwrap();
        let l = ConvLayer::new(k.clone(), k, shape).unwrap();
        let z = l.forward(&x).unwrap();
        for n in 0..3 {
            for p in 0..16 {
                let px = [x.at(n, p), x.at(n, 16 + p)];
                for o in 0..2 {
                    let want = a.at(o, 0) * px[0] + a.at(o, 1) * px[1];
                    assert!((z.at(n, o * 16 + p) - want).abs() < 1e-14);
                }
            }
        }
        let back = l.inverse_exact(&z).unwrap();
        assert!(back.rel_diff(&x) < 1e-12);
    }

    #[test]
    fn conv_random_matches_matrix_and_round_trips() {
        let shape = [2, 3, 4];
        let l = ConvLayer::init(shape, 3, 3, &mut rng(8)).unwrap();
        let x = batch(4, 24, 9);
        let t = l.forward_matrix().unwrap();
        let z = l.forward(&x).unwrap();
        let want = crate::tensor::matmul_a_bt(&x, &t).unwrap();
        assert!(z.rel_diff(&want) < 1e-12);
        let (_, first) = l.exact_factorization().unwrap();
        assert!(first);
        assert!(l.inverse_exact(&z).unwrap().rel_diff(&x) < 1e-8);
        let (_, again) = l.exact_factorization().unwrap();
        assert!(!again);
    }

    #[test]
    fn conv_mutation_invalidates_exact_cache() {
        let mut l = ConvLayer::init([1, 3, 3], 3, 3, &mut rng(10)).unwrap();
        l.exact_factorization().unwrap();
        l.w_mut().data_mut()[4] += 0.1;
        assert!(l.exact_factorization().unwrap().1);
    }

    #[test]
    fn conv_rebind_recomputes_m() {
        let mut l = ConvLayer::init([1, 3, 3], 3, 3, &mut rng(11)).unwrap();
        assert_eq!(l.m_w().data()[4], 9.0);
        l.rebind([1, 5, 5]).unwrap();
        assert_eq!(l.m_w().data()[4], 25.0);
        assert_eq!(l.m_w().data()[0], 16.0);
    }

    #[test]
    fn conv_init_inverse_is_flip() {
        let l = ConvLayer::init([2, 4, 4], 3, 3, &mut rng(12)).unwrap();
        assert_eq!(l.r(), &flip_kernel(l.w()).unwrap());
        let a = ConvLayer::init([2, 4, 4], 3, 5, &mut rng(12)).unwrap();
        assert!(a.is_asymmetric());
        assert_eq!(crop_kernel_center(a.r(), 3, 3).unwrap(), flip_kernel(a.w()).unwrap());
    }

    #[test]
    fn crop_and_pad() {
        let k = Tensor::randn(&[2, 2, 3, 3], &mut rng(13));
        assert_eq!(crop_kernel_center(&k, 3, 3).unwrap(), k);
        assert_eq!(pad_kernel_center(&k, 3, 3).unwrap(), k);

        let big = Tensor::new(vec![1, 1, 5, 5], (0..25).map(f64::from).collect()).unwrap();
        let c = crop_kernel_center(&big, 3, 3).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);

        let p = pad_kernel_center(&k, 7, 5).unwrap();
        assert_eq!(p.shape(), &[2, 2, 7, 5]);
        assert_eq!(p.sum(), k.sum());
        assert_eq!(crop_kernel_center(&p, 3, 3).unwrap(), k);
        assert!(crop_kernel_center(&k, 5, 5).is_err());
        assert!(pad_kernel_center(&k, 4, 4).is_err());
    }

    #[test]
    fn padded_kernel_has_same_conv_matrix() {
        let k = Tensor::randn(&[2, 2, 3, 3], &mut rng(14));
        let p = pad_kernel_center(&k, 5, 5).unwrap();
        let a = build_conv_matrix(&k, [2, 4, 4], (1, 1)).unwrap();
        let b = build_conv_matrix(&p, [2, 4, 4], (2, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn slrelu_examples() {
        let id = SmoothLeakyRelu::new(1.0).unwrap();
        let (y, ld) = id.forward_vec(&[-2.0, 0.5, 3.0]);
        assert_eq!(y, vec![-2.0, 0.5, 3.0]);
        assert_eq!(ld, 0.0);

        let act = SmoothLeakyRelu::default();
        let (y, ld) = act.forward_vec(&[0.0]);
        assert!((y[0] - 0.7 * 2f64.ln()).abs() < 1e-15);
        assert!((y[0] - 0.485203).abs() < 1e-6);
        assert!((ld - 0.65f64.ln()).abs() < 1e-15);
        assert!((ld + 0.430783).abs() < 1e-6);
        assert!(SmoothLeakyRelu::new(0.0).is_err());
    }

    #[test]
    fn slrelu_logdet_matches_finite_differences() {
        let act = SmoothLeakyRelu::default();
        let x = Tensor::randn(&[20], &mut rng(15)).scale(3.0);
        let h = 1e-5;
        let mut fd_logdet = 0.0;
        for &v in x.data() {
            let d = (act.value(v + h) - act.value(v - h)) / (2.0 * h);
            assert!((d - act.derivative(v)).abs() <= 1e-6 * d.abs());
            let d2 = (act.derivative(v + h) - act.derivative(v - h)) / (2.0 * h);
            assert!((d2 - act.second_derivative(v)).abs() < 1e-8);
            fd_logdet += d.ln();
        }
        let (_, ld) = act.forward_vec(x.data());
        assert!((ld - fd_logdet).abs() < 1e-6);
    }

    #[test]
    fn slrelu_inverse() {
        let act = SmoothLeakyRelu::default();
        assert_eq!(act.inverse_scalar(act.value(0.0)).unwrap().abs() < 1e-12, true);
        assert_eq!(SmoothLeakyRelu::new(1.0).unwrap().inverse_scalar(3.5).unwrap(), 3.5);
        for v in [-1e6, -50.0, -3.0, -1e-8, 0.0, 1e-8, 2.0, 40.0, 1e7] {
            let x = act.inverse_scalar(act.value(v)).unwrap();
            assert!((x - v).abs() <= 1e-9 * (1.0 + v.abs()), "{v} -> {x}");
        }
        assert!(act.inverse_scalar(f64::NAN).is_err());
    }

    #[test]
    fn squeeze_examples() {
        let sq = SqueezeLayer::default();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = sq.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sq.inverse(&y).unwrap(), x);

        let x = Tensor::randn(&[3, 4, 6], &mut rng(16));
        let y = sq.forward(&x).unwrap();
        assert_eq!(y.shape(), &[12, 2, 3]);
        assert_eq!(sq.inverse(&y).unwrap(), x);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert!(sq.forward(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn tap_projection_of_identity_is_m_times_dirac() {
        let shape = [2, 4, 4];
        let idx = TapIndex::new([2, 2, 3, 3], shape, (1, 1)).unwrap();
        let p = idx.project(&Tensor::eye(32)).unwrap();
        let m = compute_multiple_m(shape, [2, 2, 3, 3], (1, 1)).unwrap();
        let want = m.mul_elem(&dirac_kernel(2, 3, 3)).unwrap();
        assert_eq!(p, want);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn slrelu_round_trip(x in -200.0f64..200.0, alpha in 0.05f64..1.0) {
                let act = SmoothLeakyRelu::new(alpha).unwrap();
                let back = act.inverse_scalar(act.value(x)).unwrap();
                prop_assert!((back - x).abs() <= 1e-9 * (1.0 + x.abs()));
            }

            #[test]
            fn slrelu_inverse_converges_for_any_finite_value(y in -1e12f64..1e12) {
                let act = SmoothLeakyRelu::default();
                let x = act.inverse_scalar(y).unwrap();
                prop_assert!((act.value(x) - y).abs() <= 1e-10 * y.abs().max(1.0));
            }

            #[test]
            fn squeeze_round_trip(c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
                let sq = SqueezeLayer::default();
                let x = Tensor::randn(&[c, 2 * h, 2 * w], &mut rng(seed));
                prop_assert_eq!(sq.inverse(&sq.forward(&x).unwrap()).unwrap(), x);
            }
        }
    }
}
