use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpdiff::ema::{write_snapshot, Precision, Snapshot};
use mpdiff::harness::{
    measure_traces, sample_run, selftest, sigma_rel_grid, sweep_csv, sweep_ema, train, RunManifest, SampleRequest,
    StoredRun, TrainOptions,
};
use mpdiff::network::Preset;
use mpdiff::sampler::{write_samples, SampleHeader, SamplerConfig};

#[derive(Parser)]
#[command(name = "mpdiff", version, about = "Magnitude-preserving diffusion toy trainer and post-hoc EMA tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a manifest (or toy defaults) and write a run directory.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Preset used when no manifest is given.
        #[arg(long, default_value = "G")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log_every: Option<u64>,
    },
    /// Generate samples with a post-hoc EMA network of a run.
    Sample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma_rel: f64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an EMA profile from stored snapshots.
    ReconstructEma {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        sigma_rel: f64,
        /// Defaults to the last snapshot.
        #[arg(long)]
        at_step: Option<u64>,
        /// `pattern=sigma_rel`, repeatable; `*` and `?` are wildcards.
        #[arg(long, value_parser = parse_override)]
        per_tensor: Vec<(String, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validation loss across a log-spaced sigma_rel grid, as CSV.
    SweepEma {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        lo: f64,
        #[arg(long, default_value_t = 0.25)]
        hi: f64,
        #[arg(long, default_value_t = 12)]
        points: usize,
        #[arg(long, default_value_t = 256)]
        val_samples: usize,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Magnitude traces of the stored snapshots, as CSV.
    Measure {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in consistency checks.
    Selftest,
}

fn parse_override(s: &str) -> Result<(String, f64), String> {
    let (pat, v) = s.split_once('=').ok_or_else(|| format!("expected name=sigma_rel, got {s:?}"))?;
    let v: f64 = v.parse().map_err(|_| format!("bad sigma_rel in {s:?}"))?;
    Ok((pat.to_string(), v))
}

fn emit(text: &str, out: Option<&Path>) -> mpdiff::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Cmd) -> mpdiff::Result<bool> {
    match cmd {
        Cmd::Train {
            manifest,
            preset,
            out,
            steps,
            seed,
            log_every,
        } => {
            let mut m = match manifest {
                Some(p) => RunManifest::load(&p)?,
                None => RunManifest::toy(preset),
            };
            if let Some(s) = steps {
                m.steps = s;
            }
            if let Some(s) = seed {
                m.seed = s;
            }
            let res = train(
                &m,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    log_every,
                },
            )?;
            println!(
                "trained {} steps, {} skipped, checksum {:016x}, output in {}",
                m.steps,
                res.skipped_steps,
                res.checksum(),
                out.display()
            );
        }
        Cmd::Sample {
            run,
            sigma_rel,
            count,
            seed,
            steps,
            guidance,
            class,
            out,
        } => {
            let stored = StoredRun::open(&run)?;
            let sampler = SamplerConfig {
                steps,
                guidance,
                ..Default::default()
            };
            let o = sample_run(
                &stored,
                &SampleRequest {
                    sigma_rel,
                    count,
                    seed,
                    sampler,
                    class,
                },
            )?;
            let header = SampleHeader {
                shape: o.x.shape().to_vec(),
                seed,
                cfg: sampler,
                class,
            };
            write_samples(&out, &header, &o.x)?;
            println!("{count} samples, {} denoiser evaluations each, written to {}", o.nfe, out.display());
        }
        Cmd::ReconstructEma {
            run,
            sigma_rel,
            at_step,
            per_tensor,
            out,
        } => {
            let stored = StoredRun::open(&run)?;
            let rec = stored.reconstruct(sigma_rel, at_step, &per_tensor)?;
            let t = at_step.map_or_else(|| stored.last_step(), Ok)?;
            let gamma = mpdiff::ema::gamma_of_sigma_rel(sigma_rel)?;
            let snap = Snapshot {
                t,
                gamma,
                tensors: rec.tensors.clone(),
            };
            write_snapshot(&out, &snap, Precision::F32)?;
            let worst = rec.residuals.iter().map(|r| r.1).fold(0.0, f64::max);
            println!("reconstructed sigma_rel {sigma_rel} at step {t}, max fit residual {worst:.3e}");
        }
        Cmd::SweepEma {
            run,
            lo,
            hi,
            points,
            val_samples,
            out,
        } => {
            let stored = StoredRun::open(&run)?;
            let rows = sweep_ema(&stored, &sigma_rel_grid(lo, hi, points), val_samples)?;
            emit(&sweep_csv(&rows), out.as_deref())?;
        }
        Cmd::Measure { run, out } => {
            let stored = StoredRun::open(&run)?;
            emit(&measure_traces(&stored)?.to_csv(), out.as_deref())?;
        }
        Cmd::Selftest => {
            let checks = selftest();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
