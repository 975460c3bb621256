use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use drwkv::loss::{psnr, ssim, LossBreakdown};
use drwkv::model::{count_params_flops, enhance, load_weights, save_weights, DrwkvWeights, ModelConfig, MAC_CONVENTIONS};
use drwkv::scan::all_spiral_paths;
use drwkv::selftest::{self, Fault};
use drwkv::train::{evaluate, TrainConfig, Trainer};
use drwkv::Tensor;

use crate::image_io::{read_image, write_image, write_pgm};
use crate::synth::{synth_pair, synthetic_pairs, SyntheticPairSpec};
use crate::{Cli, CliError, Command, FaultArg};

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Parameter and FLOP totals quoted for the published network.
pub const PUBLISHED_COST: &str = "8.28 M params, 1.67 GFLOPs";

pub fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Enhance {
            input,
            output,
            weights,
            reference,
        } => {
            let w = resolve_weights(cli, weights.as_deref(), err)?;
            cmd_enhance(&w, input, output, reference.as_deref(), out)
        }
        Command::Decompose { input, output, weights } => {
            let w = resolve_weights(cli, weights.as_deref(), err)?;
            cmd_decompose(&w, input, output, out)
        }
        Command::Scan { size, output } => cmd_scan(*size, output, out),
        Command::Metrics { input, reference, csv } => cmd_metrics(input, reference, *csv, out),
        Command::Train {
            input,
            synthetic,
            steps,
            size,
            output,
        } => {
            let cfg = model_config(cli)?;
            let (low, clean) = match (input, synthetic) {
                (Some(dir), None) => load_pairs(dir, *size)?,
                (None, Some(n)) => synthetic_pairs(*n, size.0, size.1, &synth_spec(cli))?,
                _ => return Err(CliError::Usage("train needs either --input DIR or --synthetic N".into())),
            };
            cmd_train(cfg, &low, &clean, *steps, output.as_deref(), out)
        }
        Command::Synth {
            output,
            input,
            synthetic,
            size,
        } => cmd_synth(&synth_spec(cli), output, input.as_deref(), *synthetic, *size, out),
        Command::Cost { size } => cmd_cost(&model_config(cli)?, *size, out),
        Command::Selftest { inject_fault } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::Scharr => Fault::ScharrConstant,
            });
            cmd_selftest(fault, out)
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Model settings from `--config`, with `--seed` taking precedence.
pub fn model_config(cli: &Cli) -> Result<ModelConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<ModelConfig>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ModelConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn synth_spec(cli: &Cli) -> SyntheticPairSpec {
    SyntheticPairSpec {
        seed: cli.seed.unwrap_or(SyntheticPairSpec::default().seed),
        ..SyntheticPairSpec::default()
    }
}

/// Loads `--weights`, or initializes from the configuration and seed.
fn resolve_weights(cli: &Cli, path: Option<&Path>, err: &mut dyn Write) -> Result<DrwkvWeights> {
    match path {
        Some(p) => {
            if cli.config.is_some() {
                writeln!(err, "note: --config ignored, the weights file carries its own configuration")?;
            }
            Ok(load_weights(p)?)
        }
        None => {
            writeln!(err, "note: no --weights given, using untrained weights from the seed")?;
            Ok(DrwkvWeights::init(model_config(cli)?)?)
        }
    }
}

/// Replicates the last row and column until both extents divide `f`.
fn pad_to_multiple(img: &Tensor<f32>, f: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    Tensor::from_fn(&[3, ph, pw], |i| {
        let (c, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        img.data()[(c * h + y.min(h - 1)) * w + x.min(w - 1)]
    })
}

fn crop(img: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, sh, sw) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    debug_assert!(top + h <= sh && left + w <= sw);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.data()[(ch * sh + top + y) * sw + left + x]
    })
}

fn check_image(img: &Tensor<f32>, path: &Path) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(CliError::Data(format!("{}: expected an RGB image", path.display()))),
    }
}

fn finite(t: &Tensor<f32>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{what} contains NaN or Inf")))
    }
}

/// Runs the network on one image of any extent (padded internally).
fn run_network(w: &DrwkvWeights, img: &Tensor<f32>) -> Result<drwkv::model::ForwardOutput<f32>> {
    let (h, wd) = (img.shape()[1], img.shape()[2]);
    let padded = pad_to_multiple(img, w.config.factor());
    let out = enhance(&w.params, &w.config, &padded)?;
    if padded.shape() == img.shape() {
        return Ok(out);
    }
    let cut = |t: &Tensor<f32>| crop(t, 0, 0, h, wd);
    let c = &out.components;
    Ok(drwkv::model::ForwardOutput {
        enhanced: cut(&out.enhanced),
        edge: cut(&out.edge),
        components: drwkv::retinex::GerComponents {
            r: cut(&c.r),
            l: cut(&c.l),
            n: cut(&c.n),
            s: cut(&c.s),
            e: cut(&c.e),
            ..c.clone()
        },
        restored: cut(&out.restored),
        intermediate: out.intermediate,
    })
}

pub fn cmd_enhance(w: &DrwkvWeights, input: &Path, output: &Path, reference: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let img = read_image(input)?;
    check_image(&img, input)?;
    let reference = reference.map(|p| read_image(p).map(|r| (p, r))).transpose()?;
    if let Some((p, r)) = &reference {
        if r.shape() != img.shape() {
            return Err(CliError::Data(format!(
                "{}: reference {:?} does not match input {:?}",
                p.display(),
                r.shape(),
                img.shape()
            )));
        }
    }
    let result = run_network(w, &img)?;
    finite(&result.enhanced, "enhanced image")?;
    write_image(&result.enhanced, output)?;
    writeln!(out, "wrote {}", output.display())?;
    if let Some((p, r)) = reference {
        let (db, s) = (psnr(&result.enhanced, &r)?, ssim(&result.enhanced, &r)?);
        writeln!(out, "{} psnr {db:.2} dB ssim {s:.4}", p.display())?;
    }
    Ok(())
}

/// File names written by `decompose`.
pub const DECOMPOSE_FILES: [&str; 5] = ["r.ppm", "l.ppm", "n.ppm", "s.ppm", "e.ppm"];

/// Writes `R`, `L / 2` (replicated to three channels), `(N + 1) / 2`, `S`
/// and `(E + 1) / 2`, each mapped into `[0, 1]`.
pub fn cmd_decompose(w: &DrwkvWeights, input: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let img = read_image(input)?;
    let (h, wd) = check_image(&img, input)?;
    let res = run_network(w, &img)?;
    let c = &res.components;
    let signed = |t: &Tensor<f32>| t.map(|v| 0.5 * (v + 1.0));
    let l3 = Tensor::from_fn(&[3, h, wd], |i| 0.5 * c.l.data()[i % (h * wd)]);
    let maps = [c.r.clone(), l3, signed(&c.n), c.s.clone(), signed(&c.e)];
    for (m, name) in maps.iter().zip(DECOMPOSE_FILES) {
        finite(m, name)?;
    }
    fs::create_dir_all(dir)?;
    for (m, name) in maps.iter().zip(DECOMPOSE_FILES) {
        write_image(m, dir.join(name))?;
    }
    writeln!(
        out,
        "wrote {} maps to {} (alpha {:.6}, beta {:.6}, gamma {:.6})",
        maps.len(),
        dir.display(),
        c.alpha,
        c.beta,
        c.gamma
    )?;
    Ok(())
}

/// For each spiral, `<kind>.csv` with `t,row,col` rows and `<kind>.pgm`
/// whose pixel value encodes the visit time scaled to 0..255.
pub fn cmd_scan((h, w): (usize, usize), dir: &Path, out: &mut dyn Write) -> Result<()> {
    let paths = all_spiral_paths(h, w)?;
    fs::create_dir_all(dir)?;
    let last = (h * w - 1).max(1) as f32;
    for p in &paths {
        let name = p.kind().to_string();
        let mut csv = String::from("t,row,col\n");
        for t in 0..p.len() {
            let (r, c) = p.coord(t);
            csv.push_str(&format!("{t},{r},{c}\n"));
        }
        fs::write(dir.join(format!("{name}.csv")), csv)?;
        let times: Vec<f32> = p.inverse().iter().map(|&t| t as f32 / last).collect();
        write_pgm(&times, h, w, dir.join(format!("{name}.pgm")))?;
    }
    writeln!(out, "wrote {} scan orders for {h}x{w} to {}", paths.len(), dir.display())?;
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| {
        p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["ppm", "png"].contains(&e.to_ascii_lowercase().as_str()))
    });
    files.sort();
    Ok(files)
}

/// Pairs `input` with `reference`: two files, or same-named files in two directories.
fn metric_pairs(input: &Path, reference: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !input.is_dir() {
        return Ok(vec![(input.to_path_buf(), reference.to_path_buf())]);
    }
    if !reference.is_dir() {
        return Err(CliError::Usage("--reference must be a directory when --input is".into()));
    }
    let pairs: Vec<_> = image_files(input)?
        .into_iter()
        .map(|p| {
            let other = reference.join(p.file_name().unwrap_or_default());
            (p, other)
        })
        .collect();
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{}: no .ppm or .png images", input.display())));
    }
    Ok(pairs)
}

/// One line per pair: path, PSNR (2 decimals), SSIM (4 decimals).
pub fn cmd_metrics(input: &Path, reference: &Path, csv: bool, out: &mut dyn Write) -> Result<()> {
    let pairs = metric_pairs(input, reference)?;
    if csv {
        writeln!(out, "path,psnr,ssim")?;
    }
    for (a, b) in pairs {
        let (x, y) = (read_image(&a)?, read_image(&b)?);
        if x.shape() != y.shape() {
            return Err(CliError::Data(format!(
                "{} is {:?} but {} is {:?}",
                a.display(),
                x.shape(),
                b.display(),
                y.shape()
            )));
        }
        let (db, s) = (psnr(&x, &y)?, ssim(&x, &y)?);
        if csv {
            writeln!(out, "{},{db:.2},{s:.4}", a.display())?;
        } else {
            writeln!(out, "{} {db:.2} {s:.4}", a.display())?;
        }
    }
    Ok(())
}

/// Centre crops of every `low/<name>` and `high/<name>` pair under `dir`.
fn load_pairs(dir: &Path, (h, w): (usize, usize)) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (low_dir, high_dir) = (dir.join("low"), dir.join("high"));
    if !low_dir.is_dir() || !high_dir.is_dir() {
        return Err(CliError::Data(format!("{}: expected low/ and high/ subdirectories", dir.display())));
    }
    let (mut lows, mut highs) = (Vec::new(), Vec::new());
    for lp in image_files(&low_dir)? {
        let hp = high_dir.join(lp.file_name().unwrap_or_default());
        let (l, c) = (read_image(&lp)?, read_image(&hp)?);
        let (ih, iw) = check_image(&l, &lp)?;
        if l.shape() != c.shape() {
            return Err(CliError::Data(format!("{} and {} differ in size", lp.display(), hp.display())));
        }
        if ih < h || iw < w {
            return Err(CliError::Data(format!("{}: {ih}x{iw} is smaller than the {h}x{w} crop", lp.display())));
        }
        let (top, left) = ((ih - h) / 2, (iw - w) / 2);
        lows.push(crop(&l, top, left, h, w));
        highs.push(crop(&c, top, left, h, w));
    }
    if lows.is_empty() {
        return Err(CliError::Data(format!("{}: no training pairs", dir.display())));
    }
    Ok((Tensor::stack(&lows)?, Tensor::stack(&highs)?))
}

/// Loss curve and weights of a toy training run.
#[derive(Clone, Debug)]
pub struct ToyRun {
    /// Loss before each update, one entry per step.
    pub curve: Vec<LossBreakdown>,
    /// Loss of the trained weights on the same batch.
    pub final_loss: LossBreakdown,
    pub weights: DrwkvWeights,
}

impl ToyRun {
    pub fn initial_total(&self) -> f64 {
        self.curve.first().unwrap_or(&self.final_loss).total
    }
}

/// Adam with the cosine schedule over `steps` full-batch updates.
/// `log` sees the step, learning rate and pre-update loss.
pub fn train_toy(
    weights: DrwkvWeights,
    low: &Tensor<f32>,
    clean: &Tensor<f32>,
    steps: usize,
    log: &mut dyn FnMut(usize, f64, &LossBreakdown),
) -> drwkv::Result<ToyRun> {
    weights.config.check_extent(low.shape()[2], low.shape()[3])?;
    let config = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(weights, config)?;
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = trainer.current_lr();
        let loss = trainer.step(low, clean)?;
        log(step, lr, &loss);
        curve.push(loss);
    }
    let final_loss = evaluate(&trainer.weights, low, clean, &trainer.config.loss)?;
    if !final_loss.total.is_finite() {
        return Err(drwkv::Error::NonFinite { op: "train" });
    }
    Ok(ToyRun {
        curve,
        final_loss,
        weights: trainer.weights,
    })
}

fn breakdown(l: &LossBreakdown) -> String {
    format!(
        "total {:.6} recon {:.6} sparse {:.6} smooth {:.6} artifact {:.6} reg {:.6}",
        l.total, l.recon, l.sparse, l.smooth, l.artifact, l.reg
    )
}

pub fn cmd_train(
    cfg: ModelConfig,
    low: &Tensor<f32>,
    clean: &Tensor<f32>,
    steps: usize,
    output: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (n, _, h, w) = low.dims4("train")?;
    cfg.check_extent(h, w).map_err(usage)?;
    writeln!(out, "training on {n} pairs of {h}x{w} for {steps} steps")?;
    let mut io = Ok(());
    let run = train_toy(DrwkvWeights::init(cfg)?, low, clean, steps, &mut |s, lr, l| {
        if io.is_ok() {
            io = writeln!(out, "step {s:>4} lr {lr:.3e} {}", breakdown(l));
        }
    })?;
    io?;
    writeln!(out, "final {}", breakdown(&run.final_loss))?;
    if steps > 0 {
        writeln!(
            out,
            "step-0 total {:.6}, final/step-0 ratio {:.4}",
            run.initial_total(),
            run.final_loss.total / run.initial_total()
        )?;
    }
    if let Some(p) = output {
        save_weights(&run.weights, p)?;
        writeln!(out, "saved weights to {}", p.display())?;
    }
    Ok(())
}

pub fn cmd_synth(
    spec: &SyntheticPairSpec,
    output: &Path,
    input: Option<&Path>,
    n: usize,
    (h, w): (usize, usize),
    out: &mut dyn Write,
) -> Result<()> {
    if let Some(src) = input {
        let clean = read_image(src)?;
        check_image(&clean, src)?;
        let (low, _) = synth_pair(&clean, spec)?;
        write_image(&low, output)?;
        writeln!(out, "wrote {}", output.display())?;
        return Ok(());
    }
    let (low, clean) = synthetic_pairs(n, h, w, spec).map_err(usage)?;
    for sub in ["low", "high"] {
        fs::create_dir_all(output.join(sub))?;
    }
    for i in 0..n {
        let name = format!("{i:04}.ppm");
        write_image(&low.index0(i)?, output.join("low").join(&name))?;
        write_image(&clean.index0(i)?, output.join("high").join(&name))?;
    }
    writeln!(out, "wrote {n} pairs of {h}x{w} to {}", output.display())?;
    Ok(())
}

pub fn cmd_cost(cfg: &ModelConfig, (h, w): (usize, usize), out: &mut dyn Write) -> Result<()> {
    let cost = count_params_flops(cfg, h, w).map_err(usage)?;
    writeln!(out, "{h}x{w}: {}", cost.summary())?;
    writeln!(out, "published network: {PUBLISHED_COST} (not expected to match)")?;
    writeln!(out, "conventions: {MAC_CONVENTIONS}")?;
    Ok(())
}

pub fn cmd_selftest(fault: Option<Fault>, out: &mut dyn Write) -> Result<()> {
    let reports = selftest::run_all(fault);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    writeln!(out, "{}/{} suites passed", reports.len() - failed.len(), reports.len())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("failed suites: {}", failed.join(", "))))
    }
}
