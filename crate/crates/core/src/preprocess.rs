//! Pixel preprocessing: uniform dequantization, scaling and a shrunk logit,
//! with the log-determinant of the whole map so reported likelihoods are in
//! the units of the raw data.

use rand::Rng;

use crate::error::{Result, SnfError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessSpec {
    /// Add `u ~ U[0, 1)` to every pixel.
    pub dequantize: bool,
    /// Multiplier applied after dequantization (`1/256` for 8-bit data).
    pub scale: f64,
    /// Shrink `λ_p` keeping the logit argument away from 0 and 1.
    pub logit_lambda: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            dequantize: true,
            scale: 1.0 / 256.0,
            logit_lambda: 1e-6,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(0.0..0.5).contains(&self.logit_lambda) {
            return Err(SnfError::InvalidConfig(format!(
                "preprocess scale {} must be > 0 and logit shrink {} in [0, 0.5)",
                self.scale, self.logit_lambda
            )));
        }
        Ok(())
    }

    /// Maps continuous values `v` (pixels after dequantization) to flow
    /// space. Returns the transformed rows and per-row `log|det|`.
    pub fn forward_continuous(&self, v: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.validate()?;
        let lam = self.logit_lambda;
        let base = (1.0 - 2.0 * lam).ln() + self.scale.ln();
        let (n, d) = (v.rows(), v.cols());
        let mut x = Tensor::zeros(&[n, d]);
        let mut logdet = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for (o, &vi) in x.row_mut(i).iter_mut().zip(v.row(i)) {
                let y = lam + (1.0 - 2.0 * lam) * (vi * self.scale);
                if !(y > 0.0 && y < 1.0) {
                    return Err(SnfError::DegenerateInput(format!(
                        "value {vi} maps outside the open unit interval"
                    )));
                }
                *o = (y / (1.0 - y)).ln();
                acc += base - y.ln() - (1.0 - y).ln();
            }
            logdet[i] = acc;
        }
        Ok((x, logdet))
    }

    /// Dequantizes raw pixels (if enabled) and maps them to flow space.
    pub fn apply<R: Rng + ?Sized>(&self, pixels: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        let v = if self.dequantize {
            let mut v = pixels.clone();
            for p in v.data_mut() {
                *p += rng.gen::<f64>();
            }
            v
        } else {
            pixels.clone()
        };
        self.forward_continuous(&v)
    }

    /// Inverse of [`PreprocessSpec::forward_continuous`]: back to the
    /// continuous pixel scale.
    pub fn deprocess(&self, x: &Tensor) -> Tensor {
        let lam = self.logit_lambda;
        x.map(|xi| {
            let y = 1.0 / (1.0 + (-xi).exp());
            (y - lam) / (1.0 - 2.0 * lam) / self.scale
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_without_shrink() {
        let spec = PreprocessSpec {
            dequantize: false,
            scale: 1.0 / 256.0,
            logit_lambda: 0.0,
        };
        let (x, ld) = spec.forward_continuous(&Tensor::from_rows(&[&[128.0]]).unwrap()).unwrap();
        assert!(x.data()[0].abs() < 1e-15);
        assert!((ld[0] - (-(256f64).ln() + 4f64.ln())).abs() < 1e-13);
    }

    #[test]
    fn midpoint_with_default_shrink_is_near_zero() {
        let spec = PreprocessSpec {
            dequantize: false,
            ..Default::default()
        };
        let (x, _) = spec.forward_continuous(&Tensor::from_rows(&[&[128.0]]).unwrap()).unwrap();
        assert!(x.data()[0].abs() < 1e-5);
    }

    #[test]
    fn round_trip_and_logdet_by_differences() {
        let spec = PreprocessSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels = Tensor::from_fn(&[4, 5], |i| ((i * 37) % 256) as f64);
        let mut r2 = rng.clone();
        let (x, ld) = spec.apply(&pixels, &mut rng).unwrap();
        let mut v = pixels.clone();
        for p in v.data_mut() {
            *p += r2.gen::<f64>();
        }
        assert!(spec.deprocess(&x).rel_diff(&v) < 1e-10);
        // Per-element derivative by central differences.
        for i in 0..4 {
            let mut fd = 0.0;
            for j in 0..5 {
                let h = 1e-6;
                let f = |t: f64| {
                    let row = Tensor::from_rows(&[&[t]]).unwrap();
                    spec.forward_continuous(&row).unwrap().0.data()[0]
                };
                let c = v.at(i, j);
                fd += ((f(c + h) - f(c - h)) / (2.0 * h)).ln();
            }
            assert!((fd - ld[i]).abs() < 1e-6, "{fd} vs {}", ld[i]);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let spec = PreprocessSpec {
            dequantize: false,
            logit_lambda: 0.0,
            ..Default::default()
        };
        assert!(spec.forward_continuous(&Tensor::from_rows(&[&[0.0]]).unwrap()).is_err());
        assert!(PreprocessSpec { scale: -1.0, ..spec }.validate().is_err());
    }
}
