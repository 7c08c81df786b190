//! Batch pipeline driver: data generation, training, inference, evaluation,
//! cost accounting, and ensembling.
//!
//! Machine-readable output (key=value or CSV) goes to stdout; human logs and
//! the resolved run configuration go to stderr. Exit code 0 on success, 1 for
//! bad input, 2 for internal invariant violations.

mod config;

use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use spectraformer::attention::{measured_cost, predicted_cost, MsaKind};
use spectraformer::checkpoint;
use spectraformer::ensemble::{multiscale_ensemble, self_ensemble, topk_ensemble, EnsembleWeights};
use spectraformer::metrics;
use spectraformer::network::{count_flops_with_ledger, MstConfig, MstPlusPlus, FLOP_CONVENTION};
use spectraformer::synth::{
    generate_pair, read_cube, spectral_wavelengths, write_cube, ResponseMatrix, RgbHsiPair,
    SceneSpec, SpectralCube,
};

use config::{resolve_seed, RunSettings};

#[derive(Parser)]
#[command(
    name = "spectraformer",
    about = "RGB-to-hyperspectral reconstruction pipeline: synthesize data, train, infer, evaluate, count costs, ensemble",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate paired RGB/HSI scenes plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Spatial extents as HxW, e.g. 64x64.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "noise-scale", default_value_t = 1e-3)]
        noise_scale: f64,
        #[arg(long, default_value_t = 6)]
        blobs: usize,
        #[arg(long, default_value_t = 31)]
        bands: usize,
        /// Optional response-matrix file (rows of three values per band).
        #[arg(long)]
        response: Option<PathBuf>,
    },
    /// Train a model on a generated dataset directory.
    Train {
        /// Config file of flat dotted keys (train.*, model.*).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a spectral cube from an RGB cube file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MRAE / RMSE / PSNR between a ground-truth and a predicted cube.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Also print a CSV row (header + values).
        #[arg(long)]
        csv: bool,
    },
    /// FLOP accounting: full-model ledger pass, or the predicted-vs-measured
    /// attention table.
    Flops {
        #[arg(long, default_value_t = 482)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        stages: usize,
        #[arg(long = "base-dim", default_value_t = 31)]
        base_dim: usize,
        /// Emit the attention cost-law table as CSV instead.
        #[arg(long = "msa-table")]
        msa_table: bool,
    },
    /// Learnable parameter count for a configuration.
    Params {
        #[arg(long, default_value_t = 3)]
        stages: usize,
        #[arg(long = "base-dim", default_value_t = 31)]
        base_dim: usize,
    },
    /// Test-time ensembling over checkpoints.
    Ensemble {
        /// self, multiscale, or topk.
        #[arg(long)]
        mode: String,
        /// Comma-separated checkpoint paths.
        #[arg(long)]
        checkpoints: String,
        /// Comma-separated weights for topk (default uniform).
        #[arg(long)]
        weights: Option<String>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn log(msg: &str) {
    eprintln!("[spectraformer] {msg}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // bad invocation
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match std::panic::catch_unwind(AssertUnwindSafe(|| run(cli.cmd))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal error: invariant violation");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            count,
            size,
            seed,
            noise_scale,
            blobs,
            bands,
            response,
        } => cmd_gen_data(&out, count, &size, seed, noise_scale, blobs, bands, response.as_deref()),
        Cmd::Train { config, data, out } => cmd_train(config.as_deref(), &data, &out),
        Cmd::Infer {
            checkpoint,
            input,
            out,
        } => cmd_infer(&checkpoint, &input, &out),
        Cmd::Eval { gt, pred, csv } => cmd_eval(&gt, &pred, csv),
        Cmd::Flops {
            height,
            width,
            stages,
            base_dim,
            msa_table,
        } => cmd_flops(height, width, stages, base_dim, msa_table),
        Cmd::Params { stages, base_dim } => cmd_params(stages, base_dim),
        Cmd::Ensemble {
            mode,
            checkpoints,
            weights,
            input,
            out,
        } => cmd_ensemble(&mode, &checkpoints, weights.as_deref(), &input, &out),
    }
}

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let Some((h, w)) = size.split_once('x') else {
        bail!("--size must look like HxW, got `{size}`");
    };
    Ok((
        h.parse().with_context(|| format!("bad height in `{size}`"))?,
        w.parse().with_context(|| format!("bad width in `{size}`"))?,
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    out: &Path,
    count: usize,
    size: &str,
    seed: Option<u64>,
    noise_scale: f64,
    blobs: usize,
    bands: usize,
    response: Option<&Path>,
) -> Result<()> {
    let (height, width) = parse_size(size)?;
    let seed = resolve_seed(seed)?;
    let wavelengths = spectral_wavelengths(bands);
    let matrix = match response {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let m = ResponseMatrix::from_text(&text)?.normalized();
            if m.bands() != bands {
                bail!(
                    "response matrix has {} rows but --bands is {bands}",
                    m.bands()
                );
            }
            m
        }
        None => ResponseMatrix::gaussian_default(&wavelengths),
    };
    std::fs::create_dir_all(out)?;
    log(&format!(
        "gen-data: out={} count={count} size={height}x{width} seed={seed} noise_scale={noise_scale} blobs={blobs} bands={bands}",
        out.display()
    ));

    let mut manifest = String::new();
    for i in 0..count {
        let spec = SceneSpec {
            seed: seed.wrapping_add(i as u64),
            height,
            width,
            blobs,
            noise_scale,
            bands,
        };
        let pair = generate_pair(&spec, &matrix)?;
        let hsi_name = format!("scene_{i:04}.hsi1");
        let rgb_name = format!("scene_{i:04}.rgb.hsi1");
        write_cube(&out.join(&hsi_name), &pair.hsi)?;
        write_cube(&out.join(&rgb_name), &pair.rgb)?;
        manifest.push_str(&format!("{rgb_name}\t{hsi_name}\n"));
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!("out={}", out.display());
    println!("pairs={count}");
    println!("seed={seed}");
    Ok(())
}

fn load_dataset(data: &Path) -> Result<Vec<RgbHsiPair>> {
    let manifest_path = data.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .with_context(|| format!("cannot read {}", manifest_path.display()))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(rgb), Some(hsi)) = (fields.next(), fields.next()) else {
            bail!(
                "{}: line {}: expected `<rgb>\t<hsi>`",
                manifest_path.display(),
                lineno + 1
            );
        };
        pairs.push(RgbHsiPair::new(
            read_cube(&data.join(rgb))?,
            read_cube(&data.join(hsi))?,
        )?);
    }
    if pairs.is_empty() {
        bail!("{}: no pairs listed", manifest_path.display());
    }
    Ok(pairs)
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let settings = match config {
        Some(path) => RunSettings::from_file(path)?,
        None => {
            let mut s = RunSettings::default();
            s.apply_env_seed()?;
            s
        }
    };
    for line in settings.resolved_lines() {
        log(&line);
    }
    let pairs = load_dataset(data)?;
    for pair in &pairs {
        if pair.hsi.bands() != settings.model.base_dim {
            bail!(
                "dataset has {} bands but model.base_dim is {}",
                pair.hsi.bands(),
                settings.model.base_dim
            );
        }
    }
    // hold out the last pair when there is more than one
    let (train_pairs, holdout) = if pairs.len() > 1 {
        let (rest, last) = pairs.split_at(pairs.len() - 1);
        (rest, Some(&last[0]))
    } else {
        (&pairs[..], None)
    };
    log(&format!(
        "training on {} pairs, holdout: {}",
        train_pairs.len(),
        holdout.is_some()
    ));

    std::fs::create_dir_all(out)?;
    let mut model = MstPlusPlus::seeded(settings.model, settings.train.seed)?;
    let report = spectraformer::train::train(&settings.train, train_pairs, holdout, &mut model)?;

    // loss log: metric columns filled on evaluation steps
    let mut csv = String::from("step,lr,loss,mrae,rmse,psnr\n");
    for s in &report.steps {
        let eval = report.evals.iter().find(|e| e.step == s.step + 1);
        match eval {
            Some(e) => csv.push_str(&format!(
                "{},{:e},{:e},{:.10},{:.10},{:.6}\n",
                s.step, s.lr, s.loss, e.report.mrae, e.report.rmse, e.report.psnr
            )),
            None => csv.push_str(&format!("{},{:e},{:e},,,\n", s.step, s.lr, s.loss)),
        }
    }
    std::fs::write(out.join("train_log.csv"), csv)?;

    checkpoint::save(&model, &out.join("last.ckpt"))?;
    if let Some(best) = &report.best {
        checkpoint::save(&best.model, &out.join("best.ckpt"))?;
        println!("best_step={}", best.step);
        println!("best_mrae={:.10}", best.mrae);
    }
    if let Some(step) = report.diverged_at {
        log(&format!("training diverged at step {step}; kept last good parameters"));
        bail!("training diverged at step {step}");
    }
    println!("steps={}", report.steps.len());
    if let Some(last) = report.steps.last() {
        println!("final_loss={:e}", last.loss);
    }
    println!("out={}", out.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let rgb = read_cube(input)?;
    if rgb.bands() != model.config.in_channels {
        bail!(
            "{} has {} bands, model expects {}",
            input.display(),
            rgb.bands(),
            model.config.in_channels
        );
    }
    log(&format!(
        "infer: checkpoint={} input={}x{} model C={} stages={}",
        ckpt.display(),
        rgb.height(),
        rgb.width(),
        model.config.base_dim,
        model.config.stages
    ));
    let pred = model.infer(&rgb.to_batched_tensor())?;
    let cube = SpectralCube::from_tensor(&pred, spectral_wavelengths(model.config.base_dim))?;
    write_cube(out, &cube)?;
    println!("out={}", out.display());
    println!("height={}", cube.height());
    println!("width={}", cube.width());
    println!("bands={}", cube.bands());
    Ok(())
}

fn cmd_eval(gt: &Path, pred: &Path, csv: bool) -> Result<()> {
    log(&format!("eval: gt={} pred={} csv={csv}", gt.display(), pred.display()));
    let gt_cube = read_cube(gt)?;
    let pred_cube = read_cube(pred)?;
    let report = metrics::evaluate(&gt_cube, &pred_cube)?;
    print!("{}", report.to_key_values());
    if csv {
        println!("mrae,rmse,psnr,n");
        println!("{}", report.to_csv_row());
    }
    Ok(())
}

fn cmd_flops(height: usize, width: usize, stages: usize, base_dim: usize, msa_table: bool) -> Result<()> {
    if msa_table {
        log("flops: predicted-vs-measured attention table over the standard sweep");
        println!("kind,h,w,c,heads,window,predicted_macs,measured_macs");
        for kind in [MsaKind::Global, MsaKind::Window, MsaKind::Spectral] {
            for &h in &[4usize, 8, 16] {
                for &w in &[4usize, 8, 16] {
                    for &c in &[4usize, 8, 16] {
                        for &heads in &[1usize, 2] {
                            for &m in &[2usize, 4] {
                                if kind == MsaKind::Window && (h % m != 0 || w % m != 0) {
                                    continue;
                                }
                                let predicted = predicted_cost(kind, h, w, c, heads, m)?;
                                let measured = measured_cost(kind, h, w, c, heads, m, 1)?;
                                let label = match kind {
                                    MsaKind::Global => "global",
                                    MsaKind::Window => "window",
                                    MsaKind::Spectral => "spectral",
                                };
                                println!(
                                    "{label},{h},{w},{c},{heads},{m},{predicted},{measured}"
                                );
                            }
                        }
                    }
                }
            }
        }
        return Ok(());
    }

    let config = MstConfig {
        in_channels: 3,
        base_dim,
        stages,
    };
    log(&format!(
        "flops: ledger pass at {height}x{width}, C={base_dim}, stages={stages} (full-size passes take a minute or two)"
    ));
    let model = MstPlusPlus::seeded(config, 0)?;
    let (flops, ledger) = count_flops_with_ledger(&model, height, width)?;
    println!("flops={flops}");
    println!("macs={}", flops / 2);
    println!("convention={FLOP_CONVENTION}");
    log(&format!("{} ledger entries; top-level total {flops} flops", ledger.entries().count()));
    Ok(())
}

fn cmd_params(stages: usize, base_dim: usize) -> Result<()> {
    log(&format!("params: stages={stages} base_dim={base_dim}"));
    let config = MstConfig {
        in_channels: 3,
        base_dim,
        stages,
    };
    let model = MstPlusPlus::seeded(config, 0)?;
    let total = model.param_count();
    println!("params={total}");
    println!("params_millions={:.4}", total as f64 / 1e6);
    Ok(())
}

fn parse_list(raw: &str) -> Vec<&str> {
    raw.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).collect()
}

fn cmd_ensemble(
    mode: &str,
    checkpoints: &str,
    weights: Option<&str>,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let paths = parse_list(checkpoints);
    if paths.is_empty() {
        bail!("--checkpoints must list at least one file");
    }
    let models: Vec<MstPlusPlus> = paths
        .iter()
        .map(|p| checkpoint::load(Path::new(p)))
        .collect::<spectraformer::Result<_>>()?;
    let rgb = read_cube(input)?;
    let forward = |model: &MstPlusPlus, rgb: &SpectralCube| -> spectraformer::Result<SpectralCube> {
        let pred = model.infer(&rgb.to_batched_tensor())?;
        SpectralCube::from_tensor(&pred, spectral_wavelengths(model.config.base_dim))
    };
    log(&format!(
        "ensemble: mode={mode} models={} input={}x{}",
        models.len(),
        rgb.height(),
        rgb.width()
    ));

    let fused = match mode {
        "self" => {
            if models.len() != 1 {
                bail!("self mode takes exactly one checkpoint");
            }
            let model = &models[0];
            self_ensemble(|cube| forward(model, cube), &rgb)?
        }
        "multiscale" => {
            let fns: Vec<_> = models
                .iter()
                .map(|m| move |cube: &SpectralCube| forward(m, cube))
                .collect();
            multiscale_ensemble(&fns, &rgb)?
        }
        "topk" => {
            let w = match weights {
                Some(raw) => {
                    let alphas = parse_list(raw)
                        .iter()
                        .map(|s| s.parse::<f64>().context("bad weight"))
                        .collect::<Result<Vec<_>>>()?;
                    EnsembleWeights::new(alphas)?
                }
                None => EnsembleWeights::uniform(models.len())?,
            };
            let cubes: Vec<SpectralCube> = models
                .iter()
                .map(|m| forward(m, &rgb))
                .collect::<spectraformer::Result<_>>()?;
            topk_ensemble(&cubes, &w)?
        }
        other => bail!("unknown ensemble mode `{other}` (want self, multiscale, or topk)"),
    };
    write_cube(out, &fused)?;
    println!("out={}", out.display());
    println!("mode={mode}");
    println!("models={}", models.len());
    Ok(())
}
