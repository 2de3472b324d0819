use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mammo_core::checkpoint;
use mammo_core::data::{generate_dataset, load_manifest, write_dataset};
use mammo_core::model::Preset;
use mammo_core::train::{self, ablate, bench_complexity, compute_metrics, PreparedSet, RunConfig};
use mammo_core::verify;

#[derive(Parser)]
#[command(name = "mammo", version, about = "Dual-stream SecMamba/attention mammogram classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic four-view dataset and its manifest.
    GenData {
        #[arg(long, default_value_t = 650)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        difficulty: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one preset and write the run log and checkpoint.
    Train {
        #[arg(long)]
        preset: Preset,
        #[arg(long)]
        manifest: PathBuf,
        /// `key = value` run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every sample of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train several presets over several seeds and print a comparison table.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "d,a")]
        presets: Vec<Preset>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Dataset manifest; a synthetic dataset is generated when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 650)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the trainable blocks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the scan and convolution routes of the SSM on random cases.
    Equiv {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Time single-block forwards over growing sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            n,
            size,
            seed,
            difficulty,
            out,
        } => {
            let samples = generate_dataset(n, size, seed, difficulty)?;
            let manifest = write_dataset(&out, &samples)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            preset,
            manifest,
            config,
            out,
        } => {
            let cfg = load_config(config.as_ref())?;
            let samples = load_manifest(&manifest, cfg.image_size)?;
            let art = train::run(preset, &cfg, &samples, &out)?;
            if let Some(last) = art.output.records.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            println!("log: {}", art.log.display());
            println!("checkpoint: {}", art.checkpoint.display());
        }
        Command::Eval { checkpoint, manifest } => {
            let (model, store, _) = checkpoint::load::<f32>(&checkpoint)?;
            let samples = load_manifest(&manifest, model.config.dims.image_size)?;
            let set = PreparedSet::new(&samples);
            let scores = train::predict(&model, &store, &set, &Default::default())?;
            let metrics = compute_metrics(&scores, &set.labels)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate {
            presets,
            seeds,
            manifest,
            config,
            n,
            difficulty,
            data_seed,
            json,
        } => {
            let cfg = load_config(config.as_ref())?;
            let samples = match manifest {
                Some(m) => load_manifest(&m, cfg.image_size)?,
                None => generate_dataset(n, cfg.image_size, data_seed, difficulty)?,
            };
            let table = ablate(&presets, &samples, &cfg, seeds)?;
            print!("{table}");
            if let Some(path) = json {
                fs::write(&path, serde_json::to_vec_pretty(&table)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gradcheck { module, seed } => {
            let mut ok = true;
            for (name, r) in verify::check_modules(module.as_deref(), seed)? {
                println!(
                    "{:<16} {} max rel err {:.3e} over {} entries",
                    name,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.checked
                );
                ok &= r.pass;
            }
            return Ok(ok);
        }
        Command::Equiv { trials, seed, tol } => {
            let r = verify::scan_conv_equivalence(trials, seed)?;
            let ok = r.max_abs_diff < tol;
            println!(
                "{} {} trials, max |scan − conv| = {:.3e} (N, d_ie, d_hs) = {:?}",
                if ok { "PASS" } else { "FAIL" },
                r.trials,
                r.max_abs_diff,
                r.worst
            );
            return Ok(ok);
        }
        Command::Bench {
            lengths,
            d,
            heads,
            reps,
            out,
        } => {
            if lengths.is_empty() {
                bail!("no sequence lengths given");
            }
            let report = bench_complexity(&lengths, d, heads, reps)?;
            match out {
                Some(path) => report.write_csv(fs::File::create(&path)?)?,
                None => report.write_csv(std::io::stdout().lock())?,
            }
            let mut err = std::io::stderr().lock();
            writeln!(err, "log-log slope: secmamba {:.3}", report.secmamba_slope)?;
            writeln!(err, "log-log slope: attention {:.3}", report.attention_slope)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
