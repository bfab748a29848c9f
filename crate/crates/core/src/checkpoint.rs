//! Versioned checkpoint container.
//!
//! Layout: a UTF-8 text header of `key = value` lines opened by
//! `SNF-CHECKPOINT` and closed by `end`, then a little-endian binary section
//! with a block count and length-prefixed `f64` tensor blocks, then a CRC32
//! over every preceding byte. Floats in the header use Rust's shortest
//! round-trip formatting, so every value is restored bit-exactly.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SnfError};
use crate::gradients::{GradConfig, GradMode, ProbeDistribution};
use crate::layers::{ConvLayer, FcLayer, Layer, SmoothLeakyRelu, SqueezeLayer};
use crate::model::FlowModel;
use crate::tensor::Tensor;
use crate::training::{AdamState, BestRecord, LambdaController, LambdaMode, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &str = "SNF-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn rng_fields(prefix: &str, rng: &ChaCha8Rng, out: &mut Vec<(String, String)>) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    out.push((format!("{prefix}.seed"), seed));
    out.push((format!("{prefix}.word_pos"), rng.get_word_pos().to_string()));
    out.push((format!("{prefix}.stream"), rng.get_stream().to_string()));
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn header_fields(t: &Trainer) -> Vec<(String, String)> {
    let mut h: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| h.push((k.to_string(), v));
    let m = &t.model;
    let [c, hh, w] = m.input_shape();
    put("input_shape", format!("{c},{hh},{w}"));
    put("model.lambda", m.lambda().to_string());
    put("layers", m.layers().len().to_string());
    for (k, layer) in m.layers().iter().enumerate() {
        let desc = match layer {
            Layer::Fc(_) => "fc".to_string(),
            Layer::Conv(_) => "conv".to_string(),
            Layer::Activation(a) => format!("act {}", a.alpha()),
            Layer::Squeeze(s) => format!("squeeze {}", s.factor()),
        };
        put(&format!("layer.{k}"), desc);
    }
    let c = &t.config;
    put("cfg.epochs", c.epochs.to_string());
    put("cfg.batch_size", c.batch_size.to_string());
    put("cfg.lr", c.lr.to_string());
    put("cfg.warmup_epochs", c.warmup_epochs.to_string());
    put("cfg.clip", opt_f64(c.clip));
    put("cfg.mode", c.grad.mode.to_string());
    put("cfg.strict_exact", c.grad.strict_exact.to_string());
    put("cfg.jvp_weight", c.grad.jvp_weight.to_string());
    put("cfg.jvp_probes", c.grad.jvp_probes.to_string());
    put(
        "cfg.probe",
        match c.grad.probe {
            ProbeDistribution::Normal => "normal",
            ProbeDistribution::Uniform => "uniform",
        }
        .to_string(),
    );
    put("cfg.seed", c.seed.to_string());
    put("cfg.divergence_threshold", c.divergence_threshold.to_string());
    put("cfg.recon_limit", opt_f64(c.recon_limit));
    put("cfg.angle_every", c.angle_every.map_or_else(|| "none".into(), |v| v.to_string()));
    put("cfg.resync_inverse", c.resync_inverse.to_string());
    for (prefix, ctrl) in [("cfg.lambda", &c.lambda), ("ctrl", &t.lambda)] {
        put(&format!("{prefix}.mode"), if ctrl.mode == LambdaMode::Geco { "geco" } else { "fixed" }.into());
        put(&format!("{prefix}.value"), ctrl.lambda.to_string());
        put(&format!("{prefix}.ema"), ctrl.ema.to_string());
        put(&format!("{prefix}.decay"), ctrl.decay.to_string());
        put(&format!("{prefix}.gain"), ctrl.gain.to_string());
        put(&format!("{prefix}.tolerance"), ctrl.tolerance.to_string());
        put(&format!("{prefix}.min"), ctrl.min.to_string());
        put(&format!("{prefix}.max"), ctrl.max.to_string());
    }
    put("adam.t", t.adam.t.to_string());
    put("adam.beta1", t.adam.beta1.to_string());
    put("adam.beta2", t.adam.beta2.to_string());
    put("adam.eps", t.adam.eps.to_string());
    put("epoch", t.epoch.to_string());
    put("step", t.step.to_string());
    put("cursor", t.cursor.to_string());
    if let Some(b) = &t.best {
        put("best.epoch", b.epoch.to_string());
        put("best.val_nll", b.val_nll.to_string());
    }
    rng_fields("rng", &t.rng, &mut h);
    rng_fields("probe_rng", &t.probe_rng, &mut h);
    h
}

fn push_block(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend((t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

/// Serializes the full training state.
pub fn encode(t: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend(format!("{CHECKPOINT_MAGIC}\nversion = {CHECKPOINT_VERSION}\n").as_bytes());
    for (k, v) in header_fields(t) {
        buf.extend(format!("{k} = {v}\n").as_bytes());
    }
    buf.extend(b"end\n");
    let mut blocks: Vec<Tensor> = t.model.params().into_iter().cloned().collect();
    blocks.extend(t.adam.m.iter().cloned());
    blocks.extend(t.adam.v.iter().cloned());
    blocks.push(Tensor::vector(t.order.iter().map(|&i| i as f64).collect()));
    if let Some(b) = &t.best {
        blocks.extend(b.params.iter().cloned());
    }
    buf.extend((blocks.len() as u64).to_le_bytes());
    for b in &blocks {
        push_block(&mut buf, b);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend(crc.to_le_bytes());
    buf
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    let bytes = encode(t);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    decode(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SnfError::Truncated("checkpoint payload ended early".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(SnfError::Parse(format!("tensor block with {nd} dimensions")));
        }
        let shape: Vec<usize> = (0..nd).map(|_| self.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(8).ok_or_else(|| SnfError::Parse("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }
}

struct Header(HashMap<String, String>);

impl Header {
    fn str(&self, k: &str) -> Result<&str> {
        self.0
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| SnfError::Parse(format!("checkpoint header lacks '{k}'")))
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        let s = self.str(k)?;
        s.parse().map_err(|_| SnfError::Parse(format!("bad value '{s}' for '{k}'")))
    }

    fn opt<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>> {
        if self.str(k)? == "none" {
            Ok(None)
        } else {
            self.parse(k).map(Some)
        }
    }

    fn rng(&self, prefix: &str) -> Result<ChaCha8Rng> {
        let hex = self.str(&format!("{prefix}.seed"))?;
        if hex.len() != 64 {
            return Err(SnfError::Parse(format!("{prefix}.seed must be 64 hex digits")));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| SnfError::Parse(format!("{prefix}.seed is not hex")))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.parse(&format!("{prefix}.stream"))?);
        rng.set_word_pos(self.parse(&format!("{prefix}.word_pos"))?);
        Ok(rng)
    }

    fn lambda(&self, prefix: &str) -> Result<LambdaController> {
        Ok(LambdaController {
            mode: match self.str(&format!("{prefix}.mode"))? {
                "geco" => LambdaMode::Geco,
                "fixed" => LambdaMode::Fixed,
                other => return Err(SnfError::Parse(format!("unknown lambda mode '{other}'"))),
            },
            lambda: self.parse(&format!("{prefix}.value"))?,
            ema: self.parse(&format!("{prefix}.ema"))?,
            decay: self.parse(&format!("{prefix}.decay"))?,
            gain: self.parse(&format!("{prefix}.gain"))?,
            tolerance: self.parse(&format!("{prefix}.tolerance"))?,
            min: self.parse(&format!("{prefix}.min"))?,
            max: self.parse(&format!("{prefix}.max"))?,
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    // Header first, so files from another format version are reported as
    // such rather than as corrupt.
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| SnfError::Truncated("checkpoint header not terminated".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| SnfError::Parse("header is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
        if lines.len() > 100_000 {
            return Err(SnfError::Parse("checkpoint header too long".into()));
        }
    }
    if lines.first().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
        return Err(SnfError::Parse("not a checkpoint file".into()));
    }
    let mut map = HashMap::new();
    for line in &lines[1..] {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| SnfError::Parse(format!("malformed header line '{line}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let h = Header(map);
    let version: u32 = h.parse("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(SnfError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < pos + 4 {
        return Err(SnfError::Truncated("checkpoint lacks payload and checksum".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(SnfError::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos,
    };
    let count = r.u64()? as usize;
    let blocks: Vec<Tensor> = (0..count).map(|_| r.tensor()).collect::<Result<_>>()?;
    let mut blocks = blocks.into_iter();
    let mut next = |what: &str| blocks.next().ok_or_else(|| SnfError::Truncated(format!("missing {what} block")));

    let dims: Vec<usize> = h
        .str("input_shape")?
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| SnfError::Parse("bad input_shape".into())))
        .collect::<Result<_>>()?;
    let input_shape: [usize; 3] = dims
        .try_into()
        .map_err(|_| SnfError::Parse("input_shape needs three entries".into()))?;
    let n_layers: usize = h.parse("layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut shape = input_shape;
    for k in 0..n_layers {
        let desc = h.str(&format!("layer.{k}"))?;
        let mut parts = desc.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let arg = parts.next();
        let layer = match kind {
            "fc" => Layer::Fc(FcLayer::new(next("fc W")?, next("fc R")?)?),
            "conv" => Layer::Conv(ConvLayer::new(next("conv w")?, next("conv r")?, shape)?),
            "act" => {
                let a = arg.and_then(|v| v.parse().ok()).ok_or_else(|| SnfError::Parse(format!("bad layer '{desc}'")))?;
                Layer::Activation(SmoothLeakyRelu::new(a)?)
            }
            "squeeze" => {
                let f = arg.and_then(|v| v.parse().ok()).ok_or_else(|| SnfError::Parse(format!("bad layer '{desc}'")))?;
                let s = SqueezeLayer::new(f)?;
                shape = s.output_shape(shape)?;
                Layer::Squeeze(s)
            }
            _ => return Err(SnfError::Parse(format!("unknown layer '{desc}'"))),
        };
        layers.push(layer);
    }
    let model = FlowModel::new(input_shape, layers, h.parse("model.lambda")?)?;
    let n_params = model.params().len();
    let mut adam = AdamState::for_model(&model);
    for i in 0..n_params {
        adam.m[i] = next("adam m")?;
    }
    for i in 0..n_params {
        adam.v[i] = next("adam v")?;
    }
    adam.t = h.parse("adam.t")?;
    adam.beta1 = h.parse("adam.beta1")?;
    adam.beta2 = h.parse("adam.beta2")?;
    adam.eps = h.parse("adam.eps")?;
    let order: Vec<usize> = next("order")?.data().iter().map(|&v| v as usize).collect();
    let best = match h.0.get("best.epoch") {
        Some(_) => Some(BestRecord {
            epoch: h.parse("best.epoch")?,
            val_nll: h.parse("best.val_nll")?,
            params: (0..n_params).map(|_| next("best params")).collect::<Result<_>>()?,
        }),
        None => None,
    };
    if blocks.next().is_some() {
        return Err(SnfError::Parse("unexpected trailing tensor blocks".into()));
    }

    let mode: GradMode = h.parse("cfg.mode")?;
    let config = TrainConfig {
        epochs: h.parse("cfg.epochs")?,
        batch_size: h.parse("cfg.batch_size")?,
        lr: h.parse("cfg.lr")?,
        warmup_epochs: h.parse("cfg.warmup_epochs")?,
        clip: h.opt("cfg.clip")?,
        lambda: h.lambda("cfg.lambda")?,
        grad: GradConfig {
            mode,
            strict_exact: h.parse("cfg.strict_exact")?,
            jvp_weight: h.parse("cfg.jvp_weight")?,
            jvp_probes: h.parse("cfg.jvp_probes")?,
            probe: h.parse("cfg.probe")?,
        },
        seed: h.parse("cfg.seed")?,
        divergence_threshold: h.parse("cfg.divergence_threshold")?,
        recon_limit: h.opt("cfg.recon_limit")?,
        angle_every: h.opt("cfg.angle_every")?,
        resync_inverse: h.parse("cfg.resync_inverse")?,
    };
    let mut trainer = Trainer::new(model, config)?;
    trainer.adam = adam;
    trainer.lambda = h.lambda("ctrl")?;
    trainer.rng = h.rng("rng")?;
    trainer.probe_rng = h.rng("probe_rng")?;
    trainer.epoch = h.parse("epoch")?;
    trainer.step = h.parse("step")?;
    trainer.cursor = h.parse("cursor")?;
    trainer.order = order;
    trainer.best = best;
    Ok(trainer)
}
