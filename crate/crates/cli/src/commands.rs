use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use snf_core::checkpoint::{load_checkpoint, save_checkpoint};
use snf_core::data::{split_indices, Dataset};
use snf_core::diagnostics::{angle_sweep, timing_slope, timing_sweep, write_angles_csv, write_timing_csv};
use snf_core::gradients::GradMode;
use snf_core::model::{FlowModel, InverseMode};
use snf_core::preprocess::PreprocessSpec;
use snf_core::training::{evaluate_threaded, write_metrics_csv, EpochMetrics, Split, Trainer};
use snf_core::Tensor;

use crate::config::{RunOpts, Settings};

const CONFIG_FILE: &str = "config.txt";

/// Loads the data and splits it into training and validation parts.
fn load_splits(s: &Settings) -> Result<(Dataset, Dataset)> {
    let data = s
        .data
        .load(s.n_points, s.limit, s.seed, &PreprocessSpec::default())
        .with_context(|| format!("loading data '{}'", s.data_name))?;
    let (train, val) = split_indices(data.x.rows(), s.val_fraction, s.seed)?;
    Ok((data.subset(&train), data.subset(&val)))
}

fn split(d: &Dataset) -> Split<'_> {
    Split {
        x: &d.x,
        extra_logdet: d.pre_logdet.as_deref(),
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn train(opts: RunOpts) -> Result<()> {
    let s = Settings::resolve(opts.with_file(None)?)?;
    let (train, val) = load_splits(&s)?;
    let model = s.model.build(train.shape, &s.build_options()).context("building the model")?;
    create_out_dir(&s.out)?;
    fs::write(s.out.join(CONFIG_FILE), s.to_config_text())?;
    println!(
        "training {} on {} ({} train / {} val, D = {}) in {} mode",
        s.model,
        s.data_name,
        train.x.rows(),
        val.x.rows(),
        model.dim(),
        s.mode
    );

    let metrics_path = s.out.join("metrics.csv");
    let best_path = s.out.join("best.ckpt");
    let mut trainer = Trainer::new(model, s.train_config())?;
    let mut history: Vec<EpochMetrics> = Vec::new();
    let val_split = (val.x.rows() > 0).then(|| split(&val));
    let result = trainer.fit_split(split(&train), val_split, |t, m, improved| {
        let mut m = m.clone();
        m.steps.clear();
        history.push(m.clone());
        write_metrics_csv(&metrics_path, &history)?;
        if improved {
            save_checkpoint(&best_path, t)?;
        }
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let angle = m.angle_mean.map_or(String::new(), |a| format!(" angle {a:.3}°"));
        println!(
            "epoch {:>4}  train nll {}  val nll {}  recon {:.3e}  lambda {:.3e}{}",
            m.epoch,
            fmt(m.train_nll),
            fmt(m.val_nll),
            m.train_recon,
            m.lambda,
            angle
        );
        Ok(())
    });
    let final_path = s.out.join("final.ckpt");
    match result {
        Ok(_) => {
            save_checkpoint(&final_path, &trainer)?;
            if let Some(b) = &trainer.best {
                println!("best val nll {:.4} at epoch {}", b.val_nll, b.epoch);
            }
            println!("wrote {}", s.out.display());
            Ok(())
        }
        Err(e) => {
            // Keep the metrics so far; the diverged parameters are not saved.
            write_metrics_csv(&metrics_path, &history)?;
            Err(e.into())
        }
    }
}

fn checkpoint_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join(CONFIG_FILE))
}

fn load_model(checkpoint: &Path) -> Result<Trainer> {
    load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))
}

pub fn eval(opts: RunOpts, checkpoint: &Path, which: &str, perturb: Option<f64>) -> Result<()> {
    let s = Settings::resolve(opts.with_file(checkpoint_config(checkpoint).as_deref())?)?;
    let mut model = load_model(checkpoint)?.model;
    let (train, val) = load_splits(&s)?;
    let all;
    let data = match which {
        "train" => &train,
        "val" => &val,
        "all" => {
            all = s.data.load(s.n_points, s.limit, s.seed, &PreprocessSpec::default())?;
            &all
        }
        other => bail!("unknown split '{other}' (expected train, val or all)"),
    };
    if data.x.cols() != model.dim() {
        bail!("data has {} dimensions but the model expects {}", data.x.cols(), model.dim());
    }
    let pass = |model: &FlowModel, label: &str| -> Result<f64> {
        let lu_before = model.lu_factorizations();
        let start = Instant::now();
        let m = evaluate_threaded(model, &data.x, data.pre_logdet.as_deref(), s.threads)?;
        eprintln!(
            "[timing] {label}: {:.4}s, {} LU factorizations, {} cache hits so far",
            start.elapsed().as_secs_f64(),
            model.lu_factorizations() - lu_before,
            model.cache_hits()
        );
        Ok(m.nll)
    };
    pass(&model, "cold pass")?;
    let nll = pass(&model, "amortized pass")?;
    let d = model.dim() as f64;
    println!("split {which}: n = {}, D = {}", data.x.rows(), model.dim());
    println!("nll = {nll:.6} nats");
    println!("nats/dim = {:.6}", nll / d);
    println!("bits/dim = {:.6}", nll / (d * std::f64::consts::LN_2));
    if let Some(eps) = perturb {
        model.params_mut()[0].data_mut()[0] += eps;
        let changed = pass(&model, "after perturbation")?;
        println!("nll after perturbing one parameter by {eps:e} = {changed:.6} nats");
    }
    Ok(())
}

fn mean_row_gap(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows().max(1) as f64;
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n
}

fn write_csv(path: &Path, x: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Tiles single-channel samples into one binary PGM, after mapping them back
/// to the pixel scale.
fn write_pgm(path: &Path, x: &Tensor, h: usize, w: usize) -> Result<()> {
    let pixels = PreprocessSpec::default().deprocess(x);
    let n = x.rows();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut img = vec![0u8; gw * gh];
    for k in 0..n {
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for y in 0..h {
            for xx in 0..w {
                let v = pixels.at(k, y * w + xx);
                img[(oy + y) * gw + ox + xx] = if v.is_finite() { v.round().clamp(0.0, 255.0) as u8 } else { 0 };
            }
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&img)?;
    Ok(())
}

pub fn sample(opts: RunOpts, checkpoint: &Path, n: usize, inverse: &str) -> Result<()> {
    let explicit_out = opts.out.clone();
    let s = Settings::resolve(opts.with_file(None)?)?;
    let modes: Vec<InverseMode> = match inverse {
        "both" => vec![InverseMode::Learned, InverseMode::Exact],
        m => vec![m.parse()?],
    };
    let model = load_model(checkpoint)?.model;
    // Samples go next to the checkpoint unless --out says otherwise.
    let out = explicit_out.unwrap_or_else(|| match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    });
    create_out_dir(&out)?;
    let [c, h, w] = model.input_shape();
    let image = c == 1 && (h > 1 || w > 1);
    let mut produced = Vec::new();
    for mode in modes {
        let x = model.sample(n, mode, s.seed)?;
        let name = match mode {
            InverseMode::Learned => "samples_learned",
            InverseMode::Exact => "samples_exact",
        };
        let path = if image {
            let p = out.join(format!("{name}.pgm"));
            write_pgm(&p, &x, h, w)?;
            p
        } else {
            let p = out.join(format!("{name}.csv"));
            write_csv(&p, &x)?;
            p
        };
        println!("wrote {}", path.display());
        produced.push(x);
    }
    if let [learned, exact] = produced.as_slice() {
        let recon = model.recon_losses(exact)?;
        let mean_recon = recon.iter().sum::<f64>() / recon.len().max(1) as f64;
        println!("mean L2 gap learned vs exact inverse: {:.6e}", mean_row_gap(learned, exact));
        println!("mean reconstruction loss on the samples: {mean_recon:.6e}");
    }
    Ok(())
}

pub struct BenchArgs {
    pub dims: Vec<usize>,
    pub modes: Vec<GradMode>,
    pub batch: usize,
    pub batches: usize,
    pub warmup_batches: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    if a.dims.len() < 2 {
        bail!("--dims needs at least two sizes to fit a slope");
    }
    create_out_dir(&a.out)?;
    let mut all = Vec::new();
    for &mode in &a.modes {
        let records = timing_sweep(&a.dims, mode, a.batch, a.batches, a.warmup_batches, a.seed)?;
        for r in &records {
            println!("{:>6} {:>5}  {:.6}s ± {:.6}s", r.dim, r.mode, r.mean_s, r.std_s);
        }
        println!("{mode} log-log slope: {:.3}", timing_slope(&records)?);
        all.extend(records);
    }
    let path = a.out.join("timing.csv");
    write_timing_csv(&path, &all)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn diag_angle(opts: RunOpts, every: usize) -> Result<()> {
    let s = Settings::resolve(opts.with_file(None)?)?;
    let (train, _) = load_splits(&s)?;
    let model = s.model.build(train.shape, &s.build_options())?;
    create_out_dir(&s.out)?;
    let (records, _) = angle_sweep(model, &train.x, s.train_config(), s.epochs, every)?;
    for r in &records {
        println!("epoch {:>4}  mean {:.4}°  std {:.4}°  global {:.4}°", r.epoch, r.mean, r.std, r.global);
    }
    let path = s.out.join("angles.csv");
    write_angles_csv(&path, &records)?;
    println!("wrote {}", path.display());
    Ok(())
}
