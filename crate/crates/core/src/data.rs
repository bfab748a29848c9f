//! Datasets: IDX image files, CSV point clouds and built-in 2-D densities,
//! plus deterministic train/validation splitting.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conv::ImageShape;
use crate::error::{Result, SnfError};
use crate::preprocess::PreprocessSpec;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an unsigned-byte IDX file. Images (`0x803`, dims `N, H, W`) come
/// back as `[N, 1, H, W]`; labels (`0x801`, dim `N`) as `[N]`.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(SnfError::Truncated(format!("IDX header needs 4 bytes, file has {}", bytes.len())));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        found => return Err(SnfError::BadMagic { found }),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(SnfError::Truncated("IDX dimension header cut short".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < count {
        return Err(SnfError::Truncated(format!("IDX payload has {} of {count} bytes", body.len())));
    }
    let data: Vec<f64> = body[..count].iter().map(|&b| f64::from(b)).collect();
    let shape = if ndims == 3 { vec![dims[0], 1, dims[1], dims[2]] } else { dims };
    Tensor::new(shape, data)
}

/// Reads one point per line; an optional non-numeric first line is taken as
/// a header. Blank lines are skipped.
pub fn load_csv_points(path: &Path) -> Result<Tensor> {
    parse_csv_points(&std::fs::read_to_string(path)?)
}

pub fn parse_csv_points(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                if let Some(first) = rows.first() {
                    if first.len() != v.len() {
                        return Err(SnfError::Parse(format!(
                            "line {}: {} fields, expected {}",
                            lineno + 1,
                            v.len(),
                            first.len()
                        )));
                    }
                }
                rows.push(v);
            }
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => return Err(SnfError::Parse(format!("line {}: {e}", lineno + 1))),
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect())
}

/// Noise scale of the synthetic densities.
pub const SYNTHETIC_NOISE: f64 = 0.1;
/// Radius of the ring density.
pub const RING_RADIUS: f64 = 1.5;

/// Built-in 2-D densities, deterministic under `seed`:
///
/// * `two_moons`: the first half of the points is `(cos t, sin t)`, the
///   second `(1 − cos t, 0.5 − sin t)`, `t ~ U(0, π)`, each plus
///   `N(0, 0.1²)` noise per coordinate.
/// * `ring`: radius `1.5 + N(0, 0.1²)` at angle `U(0, 2π)`.
/// * `grid` / `grid_of_gaussians`: a uniformly chosen center of the 3×3 grid
///   `{−1, 0, 1}²` plus `N(0, 0.1²)` noise.
pub fn synthetic_2d(name: &str, n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |rng: &mut ChaCha8Rng| SYNTHETIC_NOISE * rng.sample::<f64, _>(StandardNormal);
    let mut out = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        let (x, y) = match name {
            "two_moons" | "moons" => {
                let t = rng.gen::<f64>() * PI;
                let (x, y) = if i < n / 2 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                (x + noise(&mut rng), y + noise(&mut rng))
            }
            "ring" => {
                let a = rng.gen::<f64>() * 2.0 * PI;
                let r = RING_RADIUS + noise(&mut rng);
                (r * a.cos(), r * a.sin())
            }
            "grid" | "grid_of_gaussians" => {
                let c = rng.gen_range(0..9);
                let (cx, cy) = ((c % 3) as f64 - 1.0, (c / 3) as f64 - 1.0);
                (cx + noise(&mut rng), cy + noise(&mut rng))
            }
            other => return Err(SnfError::InvalidConfig(format!("unknown synthetic dataset '{other}'"))),
        };
        out.set(i, 0, x);
        out.set(i, 1, y);
    }
    Ok(out)
}

/// Disjoint, exhaustive `(train, validation)` index sets; the last
/// `round(n · val_fraction)` indices of a seeded shuffle go to validation.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(SnfError::InvalidConfig(format!("validation fraction {val_fraction} not in [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

pub fn select_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.cols();
    let mut out = Tensor::zeros(&[idx.len(), d]);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic(String),
    Idx(PathBuf),
    Csv(PathBuf),
}

impl std::str::FromStr for DataSpec {
    type Err = SnfError;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("idx:") {
            return Ok(DataSpec::Idx(PathBuf::from(p)));
        }
        if let Some(p) = s.strip_prefix("csv:") {
            return Ok(DataSpec::Csv(PathBuf::from(p)));
        }
        match s {
            "two_moons" | "ring" | "grid" | "grid_of_gaussians" => Ok(DataSpec::Synthetic(s.to_string())),
            other => Err(SnfError::InvalidConfig(format!("unknown dataset '{other}'"))),
        }
    }
}

/// A loaded dataset in flow space, flattened to rows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Tensor,
    /// Shape of one example.
    pub shape: ImageShape,
    /// Per-example log-determinant of preprocessing, for image data.
    pub pre_logdet: Option<Vec<f64>>,
    pub preprocess: Option<PreprocessSpec>,
}

impl Dataset {
    pub fn is_image(&self) -> bool {
        self.preprocess.is_some()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: select_rows(&self.x, idx),
            shape: self.shape,
            pre_logdet: self.pre_logdet.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
            preprocess: self.preprocess,
        }
    }
}

impl DataSpec {
    /// Loads the data. `n_synthetic` sizes generated sets; `limit` caps the
    /// number of rows read from files. Image files are dequantized once with
    /// `seed` and mapped through `pre`.
    pub fn load(&self, n_synthetic: usize, limit: Option<usize>, seed: u64, pre: &PreprocessSpec) -> Result<Dataset> {
        match self {
            DataSpec::Synthetic(name) => Ok(Dataset {
                x: synthetic_2d(name, n_synthetic, seed)?,
                shape: [2, 1, 1],
                pre_logdet: None,
                preprocess: None,
            }),
            DataSpec::Csv(p) => {
                let mut x = load_csv_points(p)?;
                if let Some(l) = limit {
                    let idx: Vec<usize> = (0..x.rows().min(l)).collect();
                    x = select_rows(&x, &idx);
                }
                let d = x.cols();
                Ok(Dataset {
                    x,
                    shape: [d, 1, 1],
                    pre_logdet: None,
                    preprocess: None,
                })
            }
            DataSpec::Idx(p) => {
                let raw = load_idx(p)?;
                let s = raw.shape().to_vec();
                if s.len() != 4 {
                    return Err(SnfError::InvalidConfig(format!("{} is not an image file", p.display())));
                }
                let n = limit.map_or(s[0], |l| s[0].min(l));
                let d = s[1] * s[2] * s[3];
                let pixels = Tensor::new(vec![n, d], raw.data()[..n * d].to_vec())?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (x, ld) = pre.apply(&pixels, &mut rng)?;
                Ok(Dataset {
                    x,
                    shape: [s[1], s[2], s[3]],
                    pre_logdet: Some(ld),
                    preprocess: Some(*pre),
                })
            }
        }
    }
}
