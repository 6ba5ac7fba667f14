use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dfgan_core::data::write_dataset;
use dfgan_core::experiments::{run_ablation, run_cross_subject, run_model_comparison, sensitivity_sweep, SWEEP_ALPHAS, SWEEP_LAMBDAS};
use dfgan_core::output::{write_image_grid, write_line_plot, Series};
use dfgan_core::pipeline::{evaluate, finetune, load_data, pretrain, train_foundation, EpochLog};
use dfgan_core::{Checkpoint, Dataset, Foundation, ImageGrid, RunConfig, Variant};

const OUT_ENV: &str = "DFGAN_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "dfgan", version, about = "Reconstruct face images from brain-signal features with a double-flow GAN")]
struct Cli {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; also seeds the synthetic dataset.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Defaults to $DFGAN_OUT_DIR, then `runs`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Extra `key=value` override applied after the config file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic dataset to disk as a manifest, PNGs and fMRI files.
    GenSynthetic,
    /// Train the extractor and predictor, then pretrain the GAN on image conditions.
    Pretrain,
    /// Fit the alignment and fine-tune on fMRI-image pairs.
    Finetune {
        /// Pretrained checkpoint; required unless `use_pretrain = false`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the evaluation split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate model variants under one budget.
    Compare {
        /// Comma-separated variant names (default: all seven).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Run the five ablation rows.
    Ablate,
    /// Sweep α at fixed λ, then λ at fixed α.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 0.01)]
        fixed_alpha: f64,
        #[arg(long, default_value_t = 10.0)]
        fixed_lambda: f64,
    },
    /// Train and test across subject settings, with and without alignment and pretraining.
    CrossSubject,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic => "gen-synthetic",
            Command::Pretrain => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Compare { .. } => "compare",
            Command::Ablate => "ablate",
            Command::Sweep { .. } => "sweep",
            Command::CrossSubject => "cross-subject",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        let (k, v) = pair
            .split_once('=')
            .with_context(|| format!("override `{pair}` is not of the form key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data.synthetic.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// The manifest is itself a loadable config file: provenance goes in
/// comment lines.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let text = format!(
        "# dfgan {}\n# command: {command}\n# argv: {}\n# seed: {}\n# fingerprint: {}\n{}",
        env!("CARGO_PKG_VERSION"),
        args.join(" "),
        cfg.seed,
        cfg.fingerprint(),
        cfg.to_text()
    );
    let path = dir.join(format!("{command}.manifest.txt"));
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn plot_losses(path: &Path, log: &[EpochLog]) -> Result<()> {
    if log.is_empty() {
        return Ok(());
    }
    let points = |f: fn(&EpochLog) -> f64| log.iter().map(|l| (l.epoch as f64, f(l))).collect();
    write_line_plot(
        path,
        &[
            Series { label: "d_total", points: points(|l| l.d_total) },
            Series { label: "g_total", points: points(|l| l.g_total) },
            Series { label: "g_pixel", points: points(|l| l.g_pixel) },
        ],
        false,
    )?;
    Ok(())
}

fn write_loss_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,steps,d_total,d_adversarial,d_attribute,g_total,g_adversarial,g_attribute,g_pixel\n");
    for l in log {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            l.epoch, l.steps, l.d_total, l.d_adversarial, l.d_attribute, l.g_total, l.g_adversarial, l.g_attribute, l.g_pixel
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn foundation_for(cfg: &RunConfig, data: &Dataset) -> Result<Foundation> {
    log::info!("training extractor and attribute predictor");
    Ok(train_foundation(cfg, data)?)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let dir = out_dir(cli);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let command = cli.command.name();
    write_manifest(&dir, command, &cfg)?;
    match &cli.command {
        Command::GenSynthetic => {
            if cfg.data.source != "synthetic" {
                bail!("data.source is `{}`; gen-synthetic needs `synthetic`", cfg.data.source);
            }
            let data = load_data(&cfg)?;
            let manifest = write_dataset(&dir.join("dataset"), &data)?;
            let preview: Vec<&ImageGrid> = data.images.iter().take(16).map(|s| &s.pixels).collect();
            write_image_grid(&dir.join("samples.png"), &[preview])?;
            println!("{} images, {} fMRI records -> {}", data.images.len(), data.records.len(), manifest.display());
        }
        Command::Pretrain => {
            let data = load_data(&cfg)?;
            let foundation = foundation_for(&cfg, &data)?;
            let ckpt = pretrain(&cfg, &data, &foundation)?;
            let path = dir.join("pretrain.ckpt");
            ckpt.save(&path)?;
            write_loss_csv(&dir.join("pretrain_losses.csv"), &ckpt.history.pretrain)?;
            plot_losses(&dir.join("pretrain_losses.png"), &ckpt.history.pretrain)?;
            println!("pretrained checkpoint -> {}", path.display());
        }
        Command::Finetune { checkpoint } => {
            let data = load_data(&cfg)?;
            let pre = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            if cfg.use_pretrain && pre.is_none() {
                bail!("finetune needs --checkpoint unless use_pretrain = false");
            }
            let foundation = match &pre {
                Some(p) => Foundation::from_checkpoint(p)?,
                None => foundation_for(&cfg, &data)?,
            };
            let ckpt = finetune(&cfg, pre.as_ref(), &data, &foundation)?;
            let path = dir.join("finetune.ckpt");
            ckpt.save(&path)?;
            write_loss_csv(&dir.join("finetune_losses.csv"), &ckpt.history.finetune)?;
            plot_losses(&dir.join("finetune_losses.png"), &ckpt.history.finetune)?;
            println!("fine-tuned checkpoint -> {}", path.display());
        }
        Command::Eval { checkpoint } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let data = load_data(&ckpt.config)?;
            let report = evaluate(&ckpt, &data, Some(&dir))?;
            print!("{}", report.to_key_value());
        }
        Command::Compare { variants } => {
            let data = load_data(&cfg)?;
            let foundation = foundation_for(&cfg, &data)?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.clone() };
            let table = run_model_comparison(&cfg, &data, &foundation, &variants)?;
            table.write_csv(&dir.join("comparison.csv"))?;
            println!("{} rows -> {}", table.rows.len(), dir.join("comparison.csv").display());
        }
        Command::Ablate => {
            let data = load_data(&cfg)?;
            let foundation = foundation_for(&cfg, &data)?;
            let table = run_ablation(&cfg, &data, &foundation)?;
            table.write_csv(&dir.join("ablation.csv"))?;
            println!("{} rows -> {}", table.rows.len(), dir.join("ablation.csv").display());
        }
        Command::Sweep { alphas, lambdas, fixed_alpha, fixed_lambda } => {
            let data = load_data(&cfg)?;
            let foundation = foundation_for(&cfg, &data)?;
            let alphas = if alphas.is_empty() { SWEEP_ALPHAS.to_vec() } else { alphas.clone() };
            let lambdas = if lambdas.is_empty() { SWEEP_LAMBDAS.to_vec() } else { lambdas.clone() };
            let sweep = sensitivity_sweep(&cfg, &data, &foundation, &alphas, &lambdas, *fixed_alpha, *fixed_lambda)?;
            sweep.write(&dir)?;
            println!("{} alpha rows, {} lambda rows -> {}", sweep.alpha.rows.len(), sweep.lambda.rows.len(), dir.display());
        }
        Command::CrossSubject => {
            let data = load_data(&cfg)?;
            let foundation = foundation_for(&cfg, &data)?;
            let (full, plain) = run_cross_subject(&cfg, &data, &foundation)?;
            full.write(&dir)?;
            plain.write(&dir)?;
            println!("{}×{} cells per table -> {}", full.cells.len(), full.settings.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
