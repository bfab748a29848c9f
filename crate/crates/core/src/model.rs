//! The flow model: an ordered stack of layers over a standard Gaussian base,
//! with exact log-likelihood evaluation, the mixture objective, amortized
//! log-determinants and sampling through either inverse.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ImageShape;
use crate::error::{shape_err, Result, SnfError};
use crate::layers::{row_sq_dist, solve_rows, ConvLayer, FcLayer, Layer, SmoothLeakyRelu, SqueezeLayer};
use crate::linalg::lu_factor;
use crate::tensor::Tensor;

/// `log N(z; 0, I)` for one flattened example.
pub fn gaussian_logprob(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * PI).ln()
}

/// Which inverse to push base samples through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InverseMode {
    Learned,
    Exact,
}

impl std::str::FromStr for InverseMode {
    type Err = SnfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" | "learned_inverse" => Ok(InverseMode::Learned),
            "exact" | "exact_inverse" => Ok(InverseMode::Exact),
            other => Err(SnfError::InvalidConfig(format!("unknown inverse mode '{other}'"))),
        }
    }
}

/// Per-example log-likelihood decomposition.
#[derive(Clone, Debug)]
pub struct LogProb {
    pub base_logprob: Vec<f64>,
    pub total_logdet: Vec<f64>,
    /// `[layer][example]`.
    pub per_layer_logdets: Vec<Vec<f64>>,
}

impl LogProb {
    pub fn log_prob(&self) -> Vec<f64> {
        self.base_logprob
            .iter()
            .zip(&self.total_logdet)
            .map(|(b, l)| b + l)
            .collect()
    }

    pub fn mean_log_prob(&self) -> f64 {
        let lp = self.log_prob();
        lp.iter().sum::<f64>() / lp.len().max(1) as f64
    }
}

/// Batch-mean value of `½ log p^f + ½ log p^g − λ Σ_k ‖g_k(f_k(h_k)) − h_k‖²`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureValue {
    pub objective: f64,
    pub log_pf: f64,
    pub log_pg: f64,
    pub recon: f64,
}

#[derive(Debug, Default)]
struct LogDetCache {
    fresh: bool,
    values: Vec<f64>,
}

#[derive(Debug)]
pub struct FlowModel {
    layers: Vec<Layer>,
    /// `shapes[k]` is the input shape of layer `k`; the last entry is the
    /// output shape.
    shapes: Vec<ImageShape>,
    lambda: f64,
    cache: Mutex<LogDetCache>,
    lu_count: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Clone for FlowModel {
    fn clone(&self) -> Self {
        FlowModel {
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            lambda: self.lambda,
            cache: Mutex::new(LogDetCache::default()),
            lu_count: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }
}

impl FlowModel {
    pub fn new(input_shape: ImageShape, layers: Vec<Layer>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(SnfError::InvalidConfig(format!("reconstruction weight {lambda} must be >= 0")));
        }
        let d: usize = input_shape.iter().product();
        let mut shapes = vec![input_shape];
        let mut shape = input_shape;
        for (k, layer) in layers.iter().enumerate() {
            shape = match layer {
                Layer::Fc(l) if l.dim() == d => shape,
                Layer::Fc(l) => {
                    return Err(shape_err("FlowModel::new", format!("layer {k}: fc dim {} vs {d}", l.dim())));
                }
                Layer::Conv(l) if l.shape() == shape => shape,
                Layer::Conv(l) => {
                    return Err(shape_err(
                        "FlowModel::new",
                        format!("layer {k}: conv bound to {:?}, input is {:?}", l.shape(), shape),
                    ));
                }
                Layer::Activation(_) => shape,
                Layer::Squeeze(s) => s.output_shape(shape)?,
            };
            shapes.push(shape);
        }
        Ok(FlowModel {
            layers,
            shapes,
            lambda,
            cache: Mutex::new(LogDetCache::default()),
            lu_count: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.shapes[0].iter().product()
    }

    pub fn input_shape(&self) -> ImageShape {
        self.shapes[0]
    }

    pub fn layer_shapes(&self) -> &[ImageShape] {
        &self.shapes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    /// Mutable access to one layer. Marks the log-determinant cache stale.
    pub fn layer_mut(&mut self, k: usize) -> &mut Layer {
        self.invalidate();
        &mut self.layers[k]
    }

    pub fn invalidate(&mut self) {
        self.cache.get_mut().unwrap().fresh = false;
    }

    pub fn cache_is_fresh(&self) -> bool {
        self.cache.lock().unwrap().fresh
    }

    /// Parameter tensors in a fixed order: `θ₀, γ₀, θ₁, γ₁, …` over the
    /// parameterized layers.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(t, g)| [t, g])
            .collect()
    }

    /// Mutable parameters in the order of [`FlowModel::params`]. Marks the
    /// cache stale.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.invalidate();
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(t, g)| [t, g])
            .collect()
    }

    /// Indices of layers with parameters.
    pub fn linear_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&k| self.layers[k].is_linear()).collect()
    }

    /// Number of LU factorizations performed on behalf of likelihood
    /// evaluation, sampling and amortization.
    pub fn lu_factorizations(&self) -> usize {
        self.lu_count.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            &[n, d] if d == self.dim() => Ok(n),
            s => Err(shape_err("FlowModel", format!("expected [N, {}], got {:?}", self.dim(), s))),
        }
    }

    /// `log|det|` of the forward parameter of linear layer `k`, by LU.
    fn linear_logdet(&self, k: usize) -> Result<f64> {
        let (sign, logabs) = match &self.layers[k] {
            Layer::Fc(l) => {
                self.lu_count.fetch_add(1, Ordering::Relaxed);
                lu_factor(l.w())?.logabsdet()
            }
            Layer::Conv(l) => {
                let (lu, fresh) = l.exact_factorization()?;
                if fresh {
                    self.lu_count.fetch_add(1, Ordering::Relaxed);
                }
                lu.logabsdet()
            }
            _ => (1.0, 0.0),
        };
        debug_assert!(sign.abs() == 1.0);
        Ok(logabs)
    }

    fn compute_logdets(&self) -> Result<Vec<f64>> {
        (0..self.layers.len()).map(|k| self.linear_logdet(k)).collect()
    }

    /// Computes every data-independent log-determinant once; later
    /// likelihood evaluations reuse them until a parameter changes.
    pub fn amortize_logdets(&self) -> Result<Vec<f64>> {
        let mut cache = self.cache.lock().unwrap();
        if cache.fresh {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(cache.values.clone());
        }
        let values = self.compute_logdets()?;
        cache.values = values.clone();
        cache.fresh = true;
        Ok(values)
    }

    /// Exact log-likelihood through the forward model, using (and if stale
    /// refreshing) the amortized log-determinant cache.
    pub fn log_prob(&self, x: &Tensor) -> Result<LogProb> {
        let logdets = self.amortize_logdets()?;
        self.log_prob_with(x, &logdets)
    }

    /// Exact log-likelihood recomputing every log-determinant.
    pub fn log_prob_uncached(&self, x: &Tensor) -> Result<LogProb> {
        let logdets = self.compute_logdets()?;
        self.log_prob_with(x, &logdets)
    }

    fn log_prob_with(&self, x: &Tensor, linear_logdets: &[f64]) -> Result<LogProb> {
        let n = self.check_batch(x)?;
        let mut h = x.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let (next, ld) = match layer {
                Layer::Fc(l) => (l.forward(&h)?, vec![linear_logdets[k]; n]),
                Layer::Conv(l) => (l.forward(&h)?, vec![linear_logdets[k]; n]),
                Layer::Activation(a) => a.forward(&h),
                Layer::Squeeze(s) => (s.forward_batch(&h, self.shapes[k])?, vec![0.0; n]),
            };
            per_layer.push(ld);
            h = next;
        }
        let base_logprob: Vec<f64> = (0..n).map(|i| gaussian_logprob(h.row(i))).collect();
        let total_logdet = (0..n).map(|i| per_layer.iter().map(|l| l[i]).sum()).collect();
        Ok(LogProb {
            base_logprob,
            total_logdet,
            per_layer_logdets: per_layer,
        })
    }

    /// Exact log-likelihood of the density induced by the inverse
    /// parameters, `x ↦ g⁻¹(x)`. Inverts every γ by LU.
    pub fn log_prob_inverse_model(&self, x: &Tensor) -> Result<LogProb> {
        let n = self.check_batch(x)?;
        let mut h = x.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let (next, ld) = match layer {
                Layer::Fc(l) => {
                    self.lu_count.fetch_add(1, Ordering::Relaxed);
                    let lu = lu_factor(l.r())?;
                    (solve_rows(&lu, &h)?, vec![-lu.logabsdet().1; n])
                }
                Layer::Conv(l) => {
                    self.lu_count.fetch_add(1, Ordering::Relaxed);
                    let lu = lu_factor(&l.inverse_matrix()?)?;
                    (solve_rows(&lu, &h)?, vec![-lu.logabsdet().1; n])
                }
                Layer::Activation(a) => a.forward(&h),
                Layer::Squeeze(s) => (s.forward_batch(&h, self.shapes[k])?, vec![0.0; n]),
            };
            per_layer.push(ld);
            h = next;
        }
        let base_logprob: Vec<f64> = (0..n).map(|i| gaussian_logprob(h.row(i))).collect();
        let total_logdet = (0..n).map(|i| per_layer.iter().map(|l| l[i]).sum()).collect();
        Ok(LogProb {
            base_logprob,
            total_logdet,
            per_layer_logdets: per_layer,
        })
    }

    /// Per-example `Σ_k ‖g_k(f_k(h_k)) − h_k‖²` along the forward chain.
    pub fn recon_losses(&self, x: &Tensor) -> Result<Vec<f64>> {
        let n = self.check_batch(x)?;
        let mut total = vec![0.0; n];
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                Layer::Fc(l) => {
                    let z = l.forward(&h)?;
                    let xh = l.inverse_learned(&z)?;
                    add_into(&mut total, &row_sq_dist(&xh, &h));
                    z
                }
                Layer::Conv(l) => {
                    let z = l.forward(&h)?;
                    let xh = l.inverse_learned(&z)?;
                    add_into(&mut total, &row_sq_dist(&xh, &h));
                    z
                }
                Layer::Activation(a) => a.forward(&h).0,
                Layer::Squeeze(s) => s.forward_batch(&h, self.shapes[k])?,
            };
            h = next;
        }
        Ok(total)
    }

    /// Evaluates the mixture objective exactly (both densities by LU).
    pub fn mixture_objective(&self, x: &Tensor) -> Result<MixtureValue> {
        let n = self.check_batch(x)?.max(1) as f64;
        let log_pf = self.log_prob_uncached(x)?.mean_log_prob();
        let log_pg = self.log_prob_inverse_model(x)?.mean_log_prob();
        let recon = self.recon_losses(x)?.iter().sum::<f64>() / n;
        Ok(MixtureValue {
            objective: 0.5 * log_pf + 0.5 * log_pg - self.lambda * recon,
            log_pf,
            log_pg,
            recon,
        })
    }

    /// Pushes latent rows through the model's inverse.
    pub fn invert(&self, z: &Tensor, mode: InverseMode) -> Result<Tensor> {
        self.check_batch(z)?;
        let mut h = z.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            h = match (layer, mode) {
                (Layer::Fc(l), InverseMode::Learned) => l.inverse_learned(&h)?,
                (Layer::Fc(l), InverseMode::Exact) => {
                    self.lu_count.fetch_add(1, Ordering::Relaxed);
                    l.inverse_exact(&h)?
                }
                (Layer::Conv(l), InverseMode::Learned) => l.inverse_learned(&h)?,
                (Layer::Conv(l), InverseMode::Exact) => {
                    let (lu, fresh) = l.exact_factorization()?;
                    if fresh {
                        self.lu_count.fetch_add(1, Ordering::Relaxed);
                    }
                    solve_rows(&lu, &h)?
                }
                (Layer::Activation(a), _) => a.inverse(&h)?,
                (Layer::Squeeze(s), _) => s.inverse_batch(&h, self.shapes[k])?,
            };
        }
        Ok(h)
    }

    /// Forward pass only.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Fc(l) => l.forward(&h)?,
                Layer::Conv(l) => l.forward(&h)?,
                Layer::Activation(a) => a.forward(&h).0,
                Layer::Squeeze(s) => s.forward_batch(&h, self.shapes[k])?,
            };
        }
        Ok(h)
    }

    /// Draws `n` base samples with a seeded generator and maps them to data
    /// space.
    pub fn sample(&self, n: usize, mode: InverseMode, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&[n, self.dim()], &mut rng);
        self.invert(&z, mode)
    }

    /// Replaces every γ by the exact inverse of its θ. Only possible for FC
    /// layers and for convolutions whose inverse is again a convolution of
    /// the same extent, so conv layers are left untouched here.
    pub fn sync_fc_inverses(&mut self) -> Result<()> {
        self.invalidate();
        for layer in &mut self.layers {
            if let Layer::Fc(l) = layer {
                let inv = lu_factor(l.w())?.inverse();
                *l.r_mut() = inv;
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}


// ---------------------------------------------------------------------------
// Topologies

/// Named architectures.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    /// `fc → slrelu → fc → slrelu`.
    Fc2,
    /// Three blocks of three `conv3 → slrelu` steps with squeezes between
    /// blocks.
    Conv9,
    /// Comma-separated tokens: `fc`, `act`/`slrelu`, `conv<k>`, `squeeze`.
    Custom(Vec<LayerToken>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerToken {
    Fc,
    Act,
    Conv(usize),
    Squeeze,
}

/// Construction options shared by all topologies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    pub alpha: f64,
    pub lambda: f64,
    /// Extent of inverse kernels; `None` uses the forward extent.
    pub inverse_kernel: Option<usize>,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            alpha: crate::layers::DEFAULT_ALPHA,
            lambda: 1.0,
            inverse_kernel: None,
            seed: 0,
        }
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = SnfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc2" => Ok(ModelSpec::Fc2),
            "conv9" => Ok(ModelSpec::Conv9),
            _ => {
                let body = s
                    .strip_prefix("custom:")
                    .ok_or_else(|| SnfError::InvalidConfig(format!("unknown model '{s}'")))?;
                let tokens = body
                    .split(',')
                    .map(|t| match t.trim() {
                        "fc" => Ok(LayerToken::Fc),
                        "act" | "slrelu" => Ok(LayerToken::Act),
                        "squeeze" => Ok(LayerToken::Squeeze),
                        t => t
                            .strip_prefix("conv")
                            .and_then(|k| k.parse::<usize>().ok())
                            .filter(|k| k % 2 == 1)
                            .map(LayerToken::Conv)
                            .ok_or_else(|| SnfError::InvalidConfig(format!("bad layer token '{t}'"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if tokens.is_empty() {
                    return Err(SnfError::InvalidConfig("empty custom topology".into()));
                }
                Ok(ModelSpec::Custom(tokens))
            }
        }
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelSpec::Fc2 => write!(f, "fc2"),
            ModelSpec::Conv9 => write!(f, "conv9"),
            ModelSpec::Custom(tokens) => {
                let parts: Vec<String> = tokens
                    .iter()
                    .map(|t| match t {
                        LayerToken::Fc => "fc".to_string(),
                        LayerToken::Act => "act".to_string(),
                        LayerToken::Conv(k) => format!("conv{k}"),
                        LayerToken::Squeeze => "squeeze".to_string(),
                    })
                    .collect();
                write!(f, "custom:{}", parts.join(","))
            }
        }
    }
}

impl ModelSpec {
    pub fn tokens(&self) -> Vec<LayerToken> {
        use LayerToken::*;
        match self {
            ModelSpec::Fc2 => vec![Fc, Act, Fc, Act],
            ModelSpec::Conv9 => {
                let block = [Conv(3), Act, Conv(3), Act, Conv(3), Act];
                let mut t = block.to_vec();
                t.push(Squeeze);
                t.extend(block);
                t.push(Squeeze);
                t.extend(block);
                t
            }
            ModelSpec::Custom(t) => t.clone(),
        }
    }

    /// Builds a freshly initialized model.
    pub fn build(&self, input_shape: ImageShape, opts: &BuildOptions) -> Result<FlowModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let d: usize = input_shape.iter().product();
        let act = SmoothLeakyRelu::new(opts.alpha)?;
        let mut shape = input_shape;
        let mut layers = Vec::new();
        for token in self.tokens() {
            let layer = match token {
                LayerToken::Fc => Layer::Fc(FcLayer::init(d, &mut rng)),
                LayerToken::Act => Layer::Activation(act),
                LayerToken::Conv(k) => {
                    let rk = opts.inverse_kernel.unwrap_or(k).max(k);
                    if rk % 2 == 0 {
                        return Err(SnfError::InvalidConfig(format!("inverse kernel {rk} must be odd")));
                    }
                    Layer::Conv(ConvLayer::init(shape, k, rk, &mut rng)?)
                }
                LayerToken::Squeeze => {
                    let s = SqueezeLayer::default();
                    shape = s.output_shape(shape)?;
                    Layer::Squeeze(s)
                }
            };
            layers.push(layer);
        }
        FlowModel::new(input_shape, layers, opts.lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::inverse;

    fn fc_model(ws: &[Tensor], alpha: Option<f64>) -> FlowModel {
        let d = ws[0].rows();
        let mut layers = Vec::new();
        for w in ws {
            layers.push(Layer::Fc(FcLayer::new(w.clone(), inverse(w).unwrap()).unwrap()));
            if let Some(a) = alpha {
                layers.push(Layer::Activation(SmoothLeakyRelu::new(a).unwrap()));
            }
        }
        FlowModel::new([d, 1, 1], layers, 1.0).unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let m = fc_model(&[Tensor::eye(2)], None);
        let lp = m.log_prob(&Tensor::zeros(&[1, 2])).unwrap().log_prob()[0];
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-15);
        assert!((lp + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn diagonal_scaling_adds_log_det() {
        let m = fc_model(&[Tensor::diag(&[2.0, 2.0])], None);
        let lp = m.log_prob(&Tensor::zeros(&[1, 2])).unwrap().log_prob()[0];
        assert!((lp - (-(2.0 * PI).ln() + 4f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn cache_hits_and_staleness() {
        let mut m = ModelSpec::Fc2.build([3, 1, 1], &BuildOptions::default()).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        assert!(!m.cache_is_fresh());
        m.amortize_logdets().unwrap();
        let after_first = m.lu_factorizations();
        assert_eq!(after_first, 2);
        m.amortize_logdets().unwrap();
        assert_eq!(m.cache_hits(), 1);
        let cached = m.log_prob(&x).unwrap().log_prob();
        assert_eq!(m.lu_factorizations(), after_first);
        let uncached = m.log_prob_uncached(&x).unwrap().log_prob();
        for (a, b) in cached.iter().zip(&uncached) {
            assert!((a - b).abs() <= 1e-12);
        }
        m.params_mut()[0].data_mut()[0] += 0.01;
        assert!(!m.cache_is_fresh());
        let before = m.lu_factorizations();
        m.log_prob(&x).unwrap();
        assert_eq!(m.lu_factorizations(), before + 2);
    }

    #[test]
    fn exact_inverse_makes_mixture_equal_plain_likelihood() {
        let mut m = ModelSpec::Fc2.build([4, 1, 1], &BuildOptions { seed: 3, ..Default::default() }).unwrap();
        m.sync_fc_inverses().unwrap();
        let x = Tensor::from_fn(&[5, 4], |i| ((i * 7) % 11) as f64 * 0.2 - 1.0);
        let v = m.mixture_objective(&x).unwrap();
        assert!((v.log_pf - v.log_pg).abs() < 1e-10);
        assert!(v.recon < 1e-20);
        assert!((v.objective - v.log_pf).abs() < 1e-10);
    }

    #[test]
    fn mixture_matches_parts_recomputed() {
        let m = ModelSpec::Fc2.build([3, 1, 1], &BuildOptions { seed: 9, lambda: 2.5, ..Default::default() }).unwrap();
        let x = Tensor::from_fn(&[6, 3], |i| (i as f64).sin());
        let v = m.mixture_objective(&x).unwrap();
        // Independent recomputation of the inverse-model density by dense
        // inverses.
        let mut lpg = 0.0;
        for i in 0..6 {
            let mut h = x.row(i).to_vec();
            let mut ld = 0.0;
            for layer in m.layers() {
                match layer {
                    Layer::Fc(l) => {
                        let rinv = inverse(l.r()).unwrap();
                        h = crate::tensor::matvec(&rinv, &h).unwrap();
                        ld -= crate::linalg::logabsdet(l.r()).unwrap().1;
                    }
                    Layer::Activation(a) => {
                        let (y, l) = a.forward_vec(&h);
                        h = y;
                        ld += l;
                    }
                    _ => unreachable!(),
                }
            }
            lpg += gaussian_logprob(&h) + ld;
        }
        lpg /= 6.0;
        let recon: f64 = m.recon_losses(&x).unwrap().iter().sum::<f64>() / 6.0;
        assert!((v.log_pg - lpg).abs() < 1e-10);
        assert!((v.objective - (0.5 * v.log_pf + 0.5 * lpg - 2.5 * recon)).abs() < 1e-10);
    }

    #[test]
    fn sampling_modes() {
        let m = FlowModel::new([3, 1, 1], vec![Layer::Fc(FcLayer::identity(3))], 1.0).unwrap();
        let s = m.sample(5, InverseMode::Learned, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(s, Tensor::randn(&[5, 3], &mut rng));
        assert_eq!(s, m.sample(5, InverseMode::Learned, 42).unwrap());

        let mut m = ModelSpec::Fc2.build([4, 1, 1], &BuildOptions { seed: 1, ..Default::default() }).unwrap();
        m.sync_fc_inverses().unwrap();
        let a = m.sample(20, InverseMode::Learned, 5).unwrap();
        let b = m.sample(20, InverseMode::Exact, 5).unwrap();
        assert!(a.rel_diff(&b) < 1e-8);
        let z = m.forward(&b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(z.rel_diff(&Tensor::randn(&[20, 4], &mut rng)) < 1e-8);
    }

    #[test]
    fn topology_parsing() {
        assert_eq!("fc2".parse::<ModelSpec>().unwrap(), ModelSpec::Fc2);
        let s: ModelSpec = "custom:conv3,act,squeeze,fc".parse().unwrap();
        assert_eq!(s.to_string(), "custom:conv3,act,squeeze,fc");
        assert!("custom:conv4".parse::<ModelSpec>().is_err());
        assert!("mlp".parse::<ModelSpec>().is_err());
        let m = ModelSpec::Conv9.build([1, 4, 4], &BuildOptions::default()).unwrap();
        assert_eq!(m.layers().len(), 20);
        assert_eq!(*m.layer_shapes().last().unwrap(), [16, 1, 1]);
        assert!(ModelSpec::Conv9.build([1, 6, 6], &BuildOptions::default()).is_err());
    }

    #[test]
    fn shape_validation() {
        let bad = FlowModel::new([3, 1, 1], vec![Layer::Fc(FcLayer::identity(2))], 1.0);
        assert!(bad.is_err());
        assert!(FlowModel::new([2, 1, 1], vec![], -1.0).is_err());
    }
}
