use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attrnet::attributes::{colorfulness, colorfulness_level, Image};
use attrnet::datagen::{make_dataset, DatagenConfig, Manifest, Split, MANIFEST_FILE};
use attrnet::gradsuite::{block_names, run_suite, DEFAULT_SEEDS};
use attrnet::harness::{evaluate_checkpoint, train, TrainConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attrnet", version, about = "Attribute-fusion aesthetic scoring on synthetic data")]
struct Cli {
    /// Seed for data generation and training; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with training and architecture settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData {
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Output directory; gets `images/` and `manifest.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest; writes log, checkpoint, test report and attention export.
    Train {
        /// Manifest file, or the directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split and print the report as JSON.
    ///
    /// Accuracy treats a score as high only when it is strictly above 5.0, for
    /// both predictions and labels. With `--config`, its architecture replaces
    /// the one stored in the checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable block.
    ///
    /// Prints one CSV row per block and exits non-zero when any block exceeds
    /// the relative tolerance.
    Gradcheck {
        /// Random draws per block.
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        /// Restrict to these blocks (repeatable).
        #[arg(long = "block")]
        blocks: Vec<String>,
    },
    /// Print `path,M,level` for PPM images or directories of them.
    Colorfulness {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn read_manifest(p: &Path) -> Result<(Manifest, usize)> {
    let path = manifest_path(p);
    let (m, bad) = Manifest::read(&path)?;
    for (line, e) in &bad {
        eprintln!("warning: {}:{line}: {e}", path.display());
    }
    Ok((m, bad.len()))
}

fn ppm_files(p: &Path) -> Result<Vec<PathBuf>> {
    if !p.is_dir() {
        return Ok(vec![p.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(p)
        .with_context(|| format!("reading {}", p.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|f| f.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    Ok(files)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData { n, out } => {
            let mut dcfg = DatagenConfig::default();
            if cli.config.is_some() {
                let t = load_config(&cli)?;
                dcfg.image_size = t.model.image_size;
                dcfg.buckets = t.model.fusion.buckets;
            }
            let seed = cli.seed.unwrap_or(0);
            let m = make_dataset(*n, seed, out, &dcfg)?;
            let [tr, va, te] = m.split_counts();
            println!("wrote {n} samples to {} (train {tr}, val {va}, test {te})", out.display());
        }
        Command::Train { manifest, out } => {
            let cfg = load_config(&cli)?;
            let (m, unreadable) = read_manifest(manifest)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let outcome = train(&cfg, &m, Some(out))?;
            let log = &outcome.log;
            let skipped = log.skipped_records + unreadable;
            if skipped > 0 {
                eprintln!("warning: skipped {skipped} manifest records");
            }
            println!(
                "{} epochs{}, best epoch {}",
                log.epochs.len(),
                if log.stopped_early { " (early stop)" } else { "" },
                log.best_epoch
            );
            if let Some(r) = &log.test {
                let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                println!(
                    "test n={} plcc={} srcc={} accuracy={:.4} mse={:.4}",
                    r.n,
                    show(r.plcc),
                    show(r.srcc),
                    r.accuracy,
                    r.mse
                );
            }
        }
        Command::Eval { checkpoint, manifest, split, out } => {
            let arch = match &cli.config {
                Some(_) => Some(load_config(&cli)?.model),
                None => None,
            };
            let (m, unreadable) = read_manifest(manifest)?;
            let (report, skipped) = evaluate_checkpoint(checkpoint, &m, *split, arch.as_ref())?;
            if skipped + unreadable > 0 {
                eprintln!("warning: skipped {} manifest records", skipped + unreadable);
            }
            let json = report.to_json()?;
            if let Some(p) = out {
                fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{json}");
        }
        Command::Gradcheck { seeds, blocks } => {
            let known = block_names();
            if let Some(b) = blocks.iter().find(|b| !known.contains(&b.as_str())) {
                bail!("unknown block `{b}`; known blocks: {}", known.join(", "));
            }
            let only: Vec<&str> = blocks.iter().map(String::as_str).collect();
            let report = run_suite(*seeds, &only)?;
            println!("block,worst_rel_error,failed_seeds,seeds,max_abs_error,status,worst_at");
            for r in &report.results {
                println!(
                    "{},{:.3e},{},{},{:.3e},{},{}",
                    r.block,
                    r.worst,
                    r.failed_seeds,
                    r.seeds,
                    r.max_abs_error,
                    if r.passed() { "ok" } else { "FAIL" },
                    r.worst_at
                );
            }
            let failed = report.results.iter().filter(|r| !r.passed()).count();
            eprintln!(
                "{} blocks, {failed} above {:e}, {:.1}s",
                report.results.len(),
                report.tolerance,
                report.elapsed.as_secs_f64()
            );
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Colorfulness { paths } => {
            println!("path,M,level");
            for p in paths {
                for f in ppm_files(p)? {
                    let img = Image::read_ppm(&f)?;
                    let m = colorfulness(&img)?;
                    println!("{},{m:.4},{}", f.display(), colorfulness_level(m)?);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
