//! Stride-1 2-D convolution primitives.
//!
//! Convention: cross-correlation, as in most deep-learning frameworks,
//!
//! ```text
//! out[o, y, x] = Σ_{i,a,b} k[o, i, a, b] · in[i, y + a − ph, x + b − pw]
//! ```
//!
//! with zero padding `(ph, pw)`. Images are `[C, H, W]` row-major and
//! `vec(·)` is the row-major flattening, so the matrix `T(k)` built here acts
//! on flattened images directly.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{shape_err, Result, SnfError};
use crate::tensor::Tensor;

/// Upper bound on `D = C·H·W` for anything that materializes `T(k)`.
pub const MAX_MATERIALIZED_DIM: usize = 4096;

pub type ImageShape = [usize; 3];

/// Kernel shape `[C_out, C_in, kH, kW]`.
pub fn kernel_dims(kernel: &Tensor) -> Result<[usize; 4]> {
    match kernel.shape() {
        &[o, i, h, w] => Ok([o, i, h, w]),
        s => Err(shape_err("kernel", format!("expected rank-4 kernel, got {:?}", s))),
    }
}

/// Padding that keeps the spatial size unchanged for an odd kernel.
pub fn same_padding(kh: usize, kw: usize) -> Result<(usize, usize)> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(SnfError::EvenKernel(vec![kh, kw]));
    }
    Ok(((kh - 1) / 2, (kw - 1) / 2))
}

fn output_extent(n: usize, k: usize, p: usize) -> Result<usize> {
    (n + 2 * p)
        .checked_sub(k - 1)
        .filter(|&v| v > 0)
        .ok_or_else(|| shape_err("conv2d", format!("kernel {k} too large for extent {n} with pad {p}")))
}

/// Output spatial shape of a convolution.
pub fn conv_output_shape(in_shape: ImageShape, kernel: [usize; 4], pad: (usize, usize)) -> Result<ImageShape> {
    let [co, ci, kh, kw] = kernel;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(SnfError::EvenKernel(vec![kh, kw]));
    }
    if ci != in_shape[0] {
        return Err(shape_err(
            "conv2d",
            format!("kernel expects {ci} input channels, image has {}", in_shape[0]),
        ));
    }
    Ok([co, output_extent(in_shape[1], kh, pad.0)?, output_extent(in_shape[2], kw, pad.1)?])
}

/// Valid output rows `y` for kernel row `a`: those with `0 <= y + a - p < n_in`.
#[inline]
fn valid_range(a: usize, p: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = p.saturating_sub(a);
    let hi = (n_in + p).saturating_sub(a).min(n_out);
    (lo, hi.max(lo))
}

/// Convolution on flattened data.
pub fn conv2d_flat(
    input: &[f64],
    in_shape: ImageShape,
    kernel: &Tensor,
    pad: (usize, usize),
) -> Result<Vec<f64>> {
    let kd = kernel_dims(kernel)?;
    let out_shape = conv_output_shape(in_shape, kd, pad)?;
    if input.len() != in_shape.iter().product::<usize>() {
        return Err(shape_err("conv2d", format!("input length {} vs shape {:?}", input.len(), in_shape)));
    }
    let [co, ci, kh, kw] = kd;
    let [_, h, w] = in_shape;
    let [_, ho, wo] = out_shape;
    let k = kernel.data();
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        let oplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ci {
            let iplane = &input[i * h * w..(i + 1) * h * w];
            for a in 0..kh {
                let (ylo, yhi) = valid_range(a, pad.0, h, ho);
                for b in 0..kw {
                    let kv = k[((o * ci + i) * kh + a) * kw + b];
                    if kv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(b, pad.1, w, wo);
                    for y in ylo..yhi {
                        let iy = y + a - pad.0;
                        let orow = &mut oplane[y * wo..(y + 1) * wo];
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        for x in xlo..xhi {
                            orow[x] += kv * irow[x + b - pad.1];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `conv2d(input: [C_in, H, W], kernel: [C_out, C_in, kH, kW])`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, pad: (usize, usize)) -> Result<Tensor> {
    let in_shape = image_shape(input)?;
    let out_shape = conv_output_shape(in_shape, kernel_dims(kernel)?, pad)?;
    Tensor::new(out_shape.to_vec(), conv2d_flat(input.data(), in_shape, kernel, pad)?)
}

pub(crate) fn image_shape(t: &Tensor) -> Result<ImageShape> {
    match t.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(shape_err("image", format!("expected [C, H, W], got {:?}", s))),
    }
}

/// `T(k)ᵀ · g`: the adjoint of [`conv2d_flat`], scattering output-space values
/// back into input space.
pub fn conv2d_transpose_flat(
    grad_out: &[f64],
    in_shape: ImageShape,
    kernel: &Tensor,
    pad: (usize, usize),
) -> Result<Vec<f64>> {
    let kd = kernel_dims(kernel)?;
    let out_shape = conv_output_shape(in_shape, kd, pad)?;
    if grad_out.len() != out_shape.iter().product::<usize>() {
        return Err(shape_err("conv2d_transpose", "output-space length mismatch"));
    }
    let [co, ci, kh, kw] = kd;
    let [_, h, w] = in_shape;
    let [_, ho, wo] = out_shape;
    let k = kernel.data();
    let mut out = vec![0.0; ci * h * w];
    for o in 0..co {
        let gplane = &grad_out[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ci {
            let iplane = &mut out[i * h * w..(i + 1) * h * w];
            for a in 0..kh {
                let (ylo, yhi) = valid_range(a, pad.0, h, ho);
                for b in 0..kw {
                    let kv = k[((o * ci + i) * kh + a) * kw + b];
                    if kv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(b, pad.1, w, wo);
                    for y in ylo..yhi {
                        let iy = y + a - pad.0;
                        let grow = &gplane[y * wo..(y + 1) * wo];
                        let irow = &mut iplane[iy * w..(iy + 1) * w];
                        for x in xlo..xhi {
                            irow[x + b - pad.1] += kv * grow[x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel gradient of `⟨grad_out, conv2d(input, k)⟩`, i.e. the correlation
/// `grad_out ⋆ input` laid out as a kernel of extent `(kh, kw)`.
pub fn kernel_grad_flat(
    grad_out: &[f64],
    input: &[f64],
    in_shape: ImageShape,
    kernel_shape: [usize; 4],
    pad: (usize, usize),
) -> Result<Vec<f64>> {
    let out_shape = conv_output_shape(in_shape, kernel_shape, pad)?;
    if grad_out.len() != out_shape.iter().product::<usize>() || input.len() != in_shape.iter().product::<usize>() {
        return Err(shape_err("kernel_grad", "operand length mismatch"));
    }
    let [co, ci, kh, kw] = kernel_shape;
    let [_, h, w] = in_shape;
    let [_, ho, wo] = out_shape;
    let mut g = vec![0.0; co * ci * kh * kw];
    for o in 0..co {
        let gplane = &grad_out[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ci {
            let iplane = &input[i * h * w..(i + 1) * h * w];
            for a in 0..kh {
                let (ylo, yhi) = valid_range(a, pad.0, h, ho);
                for b in 0..kw {
                    let (xlo, xhi) = valid_range(b, pad.1, w, wo);
                    let mut s = 0.0;
                    for y in ylo..yhi {
                        let iy = y + a - pad.0;
                        let grow = &gplane[y * wo..(y + 1) * wo];
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        for x in xlo..xhi {
                            s += grow[x] * irow[x + b - pad.1];
                        }
                    }
                    g[((o * ci + i) * kh + a) * kw + b] = s;
                }
            }
        }
    }
    Ok(g)
}

/// Explicit matrix `T(k)` with `T(k)·vec(x) = vec(conv2d(x, k))`, built by
/// probing `conv2d` with every basis image. Oracle use only.
pub fn build_conv_matrix(kernel: &Tensor, in_shape: ImageShape, pad: (usize, usize)) -> Result<Tensor> {
    let kd = kernel_dims(kernel)?;
    let out_shape = conv_output_shape(in_shape, kd, pad)?;
    let d_in: usize = in_shape.iter().product();
    let d_out: usize = out_shape.iter().product();
    let dim = d_in.max(d_out);
    if dim > MAX_MATERIALIZED_DIM {
        return Err(SnfError::SizeGuard {
            dim,
            limit: MAX_MATERIALIZED_DIM,
        });
    }
    let mut m = Tensor::zeros(&[d_out, d_in]);
    let mut basis = vec![0.0; d_in];
    for j in 0..d_in {
        basis[j] = 1.0;
        let col = conv2d_flat(&basis, in_shape, kernel, pad)?;
        for (r, v) in col.into_iter().enumerate() {
            m.set(r, j, v);
        }
        basis[j] = 0.0;
    }
    Ok(m)
}

/// For every kernel tap, the `(row, col)` positions of `T(k)` where that tap
/// appears.
#[derive(Debug)]
pub struct TapIndex {
    kernel_shape: [usize; 4],
    positions: Vec<Vec<(u32, u32)>>,
    dims: (usize, usize),
}

impl TapIndex {
    pub fn new(kernel_shape: [usize; 4], in_shape: ImageShape, pad: (usize, usize)) -> Result<Self> {
        let out_shape = conv_output_shape(in_shape, kernel_shape, pad)?;
        let d_in: usize = in_shape.iter().product();
        let d_out: usize = out_shape.iter().product();
        let dim = d_in.max(d_out);
        if dim > MAX_MATERIALIZED_DIM {
            return Err(SnfError::SizeGuard {
                dim,
                limit: MAX_MATERIALIZED_DIM,
            });
        }
        let [co, ci, kh, kw] = kernel_shape;
        let [_, h, w] = in_shape;
        let [_, ho, wo] = out_shape;
        let mut positions = Vec::with_capacity(co * ci * kh * kw);
        for o in 0..co {
            for i in 0..ci {
                for a in 0..kh {
                    let (ylo, yhi) = valid_range(a, pad.0, h, ho);
                    for b in 0..kw {
                        let (xlo, xhi) = valid_range(b, pad.1, w, wo);
                        let mut list = Vec::with_capacity((yhi - ylo) * (xhi - xlo));
                        for y in ylo..yhi {
                            for x in xlo..xhi {
                                let row = (o * ho + y) * wo + x;
                                let col = (i * h + y + a - pad.0) * w + x + b - pad.1;
                                list.push((row as u32, col as u32));
                            }
                        }
                        positions.push(list);
                    }
                }
            }
        }
        Ok(TapIndex {
            kernel_shape,
            positions,
            dims: (d_out, d_in),
        })
    }

    /// Shared, cached index for a configuration.
    pub fn cached(kernel_shape: [usize; 4], in_shape: ImageShape, pad: (usize, usize)) -> Result<Arc<TapIndex>> {
        type Key = ([usize; 4], ImageShape, (usize, usize));
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<TapIndex>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let key = (kernel_shape, in_shape, pad);
        if let Some(hit) = cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let built = Arc::new(TapIndex::new(kernel_shape, in_shape, pad)?);
        cache.lock().unwrap().insert(key, built.clone());
        Ok(built)
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        self.kernel_shape
    }

    pub fn tap_positions(&self, tap: usize) -> &[(u32, u32)] {
        &self.positions[tap]
    }

    /// `∂(vec T(k))ᵀ/∂k · vec G`: sums the entries of `g` at each tap's
    /// positions.
    pub fn project(&self, g: &Tensor) -> Result<Tensor> {
        if g.shape() != [self.dims.0, self.dims.1] {
            return Err(shape_err(
                "TapIndex::project",
                format!("expected {:?}, got {:?}", self.dims, g.shape()),
            ));
        }
        let cols = self.dims.1;
        let data = g.data();
        let out = self
            .positions
            .iter()
            .map(|list| {
                list.iter()
                    .map(|&(r, c)| data[r as usize * cols + c as usize])
                    .sum()
            })
            .collect();
        Tensor::new(self.kernel_shape.to_vec(), out)
    }

    /// Rebuilds `T(k)` from the index (equal to [`build_conv_matrix`]).
    pub fn assemble(&self, kernel: &Tensor) -> Result<Tensor> {
        if kernel.shape() != self.kernel_shape {
            return Err(shape_err("TapIndex::assemble", "kernel shape mismatch"));
        }
        let mut m = Tensor::zeros(&[self.dims.0, self.dims.1]);
        for (tap, list) in self.positions.iter().enumerate() {
            let v = kernel.data()[tap];
            for &(r, c) in list {
                m.set(r as usize, c as usize, v);
            }
        }
        Ok(m)
    }
}
