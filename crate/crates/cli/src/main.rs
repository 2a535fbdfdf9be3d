use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lumigs::pipeline::ablation::{ablation_csv, dataset_bounds, run_ablation, TABLE_VARIANTS};
use lumigs::pipeline::metrics::{metrics_csv, write_metrics};
use lumigs::pipeline::{eval_dirs, load_dataset, render_transforms, synth_dataset, train, DatasetSpec, Preset, RunConfig, Variant};
use lumigs::{Error, Result};

#[derive(Parser)]
#[command(name = "lumigs", version, about = "Gaussian splatting with per-view tone-curve enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset with degraded exposures.
    Synth {
        #[arg(long, default_value = "varying")]
        preset: String,
        /// Training views.
        #[arg(long, default_value_t = 16)]
        views: usize,
        #[arg(long, default_value_t = 4)]
        test_views: usize,
        /// Image size as WxH.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Plain-text `key = value` config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the frames of a transforms file from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write float PFM images.
        #[arg(long)]
        pfm: bool,
    },
    /// PSNR and SSIM of rendered images against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label of the ground truth, e.g. normal or degraded.
        #[arg(long, default_value = "normal")]
        reference: String,
    },
    /// Train the module ablations and tabulate held-out metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also train the frozen-identity baseline.
        #[arg(long)]
        baseline: bool,
        /// Directory for per-configuration runs; defaults next to the CSV.
        #[arg(long)]
        work: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("size {s:?}: expected WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn run_config(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override {o:?}: expected key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            preset,
            views,
            test_views,
            size,
            seed,
            out,
        } => {
            let (width, height) = parse_size(&size)?;
            let spec = DatasetSpec {
                preset: Preset::parse(&preset)?,
                train_views: views,
                test_views,
                width,
                height,
                seed,
                ..Default::default()
            };
            synth_dataset(&spec, &out)?;
            println!("wrote {views} training and {test_views} test views to {}", out.display());
        }
        Command::Train {
            data,
            config,
            overrides,
            resume,
            out,
        } => {
            let cfg = run_config(config.as_deref(), &overrides)?;
            let ds = load_dataset(&data)?;
            let bounds = dataset_bounds(&ds);
            write_file(&out.join("config.txt"), &cfg.to_text())?;
            let summary = train(ds.train, bounds, &cfg, &out, resume.as_deref())?;
            if let Some(last) = summary.records.last() {
                println!(
                    "iteration {}: l_total {:.6}, {} Gaussians",
                    last.iteration, last.report.l_total, last.count
                );
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Render { ckpt, cameras, out, pfm } => {
            let written = render_transforms(&ckpt, &cameras, &out, pfm)?;
            println!("rendered {} views to {}", written.len(), out.display());
        }
        Command::Eval { pred, gt, out, reference } => {
            let rows = eval_dirs(&pred, &gt, &reference)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_metrics(&out, &rows)?;
            print!("{}", metrics_csv(&rows));
        }
        Command::Ablate {
            data,
            config,
            overrides,
            baseline,
            work,
            out,
        } => {
            let cfg = run_config(config.as_deref(), &overrides)?;
            let ds = load_dataset(&data)?;
            let mut variants = Vec::new();
            if baseline {
                variants.push(Variant::Baseline);
            }
            variants.extend(TABLE_VARIANTS);
            let work = work.unwrap_or_else(|| out.with_extension("runs"));
            let rows = run_ablation(&ds, &cfg, &variants, &work)?;
            let csv = ablation_csv(&rows);
            write_file(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
