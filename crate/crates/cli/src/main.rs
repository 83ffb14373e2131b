//! `sdlab`: run, sweep, compare and plot score-distillation experiments on
//! analytic mixture targets.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use sdlab_core::harness::{self, config, emit, load_record, EmitFormat, ExperimentConfig, RunRecord};
use std::path::{Path, PathBuf};

/// Default output directory when neither the flag nor the config sets one.
const OUT_DIR_ENV: &str = "SDLAB_OUT_DIR";

#[derive(Parser)]
#[command(name = "sdlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration (or a preset).
    Run {
        /// Path to a TOML configuration; optional when --preset is given.
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a grid of configurations sharing seeds and streams.
    Sweep {
        config: Option<PathBuf>,
        /// Grid spec: `key=v1,v2;key2=w1,w2` with dotted config paths.
        #[arg(long)]
        grid: Option<String>,
        /// Packaged sweep: `cfg-ablation` compares mixing scales 7.5 and 100.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare a metric between two saved records.
    Compare {
        record_a: PathBuf,
        record_b: PathBuf,
        #[arg(long)]
        metric: String,
    },
    /// Render the convergence/variance plot for a saved record.
    Plot {
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the quick oracle and property checks.
    Verify,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            preset,
            seed,
            trials,
            out_dir,
        } => run_cmd(config, preset, seed, trials, out_dir),
        Command::Sweep {
            config,
            grid,
            preset,
            seed,
            trials,
            out_dir,
        } => sweep_cmd(config, grid, preset, seed, trials, out_dir),
        Command::Compare {
            record_a,
            record_b,
            metric,
        } => compare_cmd(&record_a, &record_b, &metric),
        Command::Plot { record, out } => plot_cmd(&record, &out),
        Command::Verify => verify_cmd(),
    }
}

fn load_config(path: Option<&Path>, preset: Option<&str>) -> Result<ExperimentConfig> {
    match (path, preset) {
        (_, Some(name)) => Ok(ExperimentConfig::preset(name)?),
        (Some(p), None) => Ok(ExperimentConfig::load(p)?),
        (None, None) => bail!("provide a config path or --preset {{desk, paper-6.1}}"),
    }
}

fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var(OUT_DIR_ENV).ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir))
}

fn apply_flags(cfg: &mut ExperimentConfig, seed: Option<u64>, trials: Option<usize>) {
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(t) = trials {
        cfg.run.trials = t;
    }
}

fn persist(record: &RunRecord, dir: &Path, stem: &str) -> Result<PathBuf> {
    let json = dir.join(format!("{stem}.json"));
    emit(record, EmitFormat::Json, &json)?;
    emit(record, EmitFormat::Csv, dir.join(format!("{stem}.csv")))?;
    emit(record, EmitFormat::Svg, dir.join(format!("{stem}.svg")))?;
    Ok(json)
}

fn summarize(record: &RunRecord) -> String {
    let m = &record.metrics;
    let status = match &record.failure {
        Some(msg) => format!("FAILED ({msg})"),
        None => "ok".to_string(),
    };
    format!(
        "mode_distance {:.4}  guidance_variance {}  consistency_gap {:.4}  wall {:.2}s  [{status}]",
        m.mode_distance,
        m.guidance_variance
            .map(|v| format!("{v:.3e}"))
            .unwrap_or_else(|| "n/a".into()),
        m.consistency_gap,
        m.wall_time_s
    )
}

fn run_cmd(
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
    trials: Option<usize>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref(), preset.as_deref())?;
    apply_flags(&mut cfg, seed, trials);
    let dir = resolve_out_dir(&cfg, out_dir);
    let trials = cfg.run.trials.max(1);
    let records: Vec<(usize, Result<RunRecord>)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.run.seed = cfg.run.seed.wrapping_add(i as u64);
            (i, harness::run(&c).map_err(Into::into))
        })
        .collect();
    let mut failed = false;
    for (i, result) in records {
        let record = result.with_context(|| format!("trial {i}"))?;
        let stem = format!("run-seed{}-trial{i}", record.config.run.seed);
        let path = persist(&record, &dir, &stem)?;
        println!("trial {i}: {}", summarize(&record));
        println!("  -> {}", path.display());
        failed |= record.failure.is_some();
    }
    if failed {
        bail!("at least one trial aborted on a non-finite state");
    }
    Ok(())
}

fn cell_label(overrides: &[(String, String)]) -> String {
    if overrides.is_empty() {
        return "base".into();
    }
    overrides
        .iter()
        .map(|(k, v)| format!("{}={v}", k.replace('.', "_")))
        .collect::<Vec<_>>()
        .join("__")
}

fn sweep_cmd(
    config: Option<PathBuf>,
    grid: Option<String>,
    preset: Option<String>,
    seed: Option<u64>,
    trials: Option<usize>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    // `--preset` doubles as the base config when no path is given and as the
    // packaged grid when it names one
    let (base_preset, grid_spec) = match (preset.as_deref(), grid) {
        (Some("cfg-ablation"), g) => {
            let spec = g.unwrap_or_else(|| "cfg_scale=7.5,100".to_string());
            (Some("desk"), spec)
        }
        (p, Some(g)) => (p, g),
        (_, None) => bail!("provide --grid key=v1,v2[;key2=...] or --preset cfg-ablation"),
    };
    let mut cfg = load_config(config.as_deref(), base_preset)?;
    apply_flags(&mut cfg, seed, trials);
    let dir = resolve_out_dir(&cfg, out_dir);
    let cells = config::parse_grid(&grid_spec)?;
    let trials = cfg.run.trials.max(1);
    let jobs: Vec<(String, ExperimentConfig)> = cells
        .iter()
        .map(|overrides| {
            let cell_cfg = config::apply_overrides(&cfg, overrides)?;
            Ok((cell_label(overrides), cell_cfg))
        })
        .collect::<Result<_>>()?;
    let results: Vec<(String, u64, Result<RunRecord>)> = jobs
        .par_iter()
        .flat_map(|(label, cell_cfg)| {
            (0..trials)
                .into_par_iter()
                .map(move |i| {
                    let mut c = cell_cfg.clone();
                    c.run.seed = cell_cfg.run.seed.wrapping_add(i as u64);
                    let seed = c.run.seed;
                    (label.clone(), seed, harness::run(&c).map_err(Into::into))
                })
        })
        .collect();
    let mut summary = String::from("cell,seed,mode_distance,guidance_variance,consistency_gap\n");
    for (label, seed, result) in results {
        let record = result.with_context(|| format!("cell {label}, seed {seed}"))?;
        let stem = format!("sweep-{label}-seed{seed}");
        persist(&record, &dir, &stem)?;
        println!("{label} (seed {seed}): {}", summarize(&record));
        summary.push_str(&format!(
            "{label},{seed},{:.17e},{},{:.17e}\n",
            record.metrics.mode_distance,
            record
                .metrics
                .guidance_variance
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default(),
            record.metrics.consistency_gap,
        ));
    }
    let summary_path = dir.join("sweep-summary.csv");
    std::fs::write(&summary_path, summary)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    println!("summary -> {}", summary_path.display());
    Ok(())
}

fn metric_value(record: &RunRecord, metric: &str) -> Result<f64> {
    Ok(match metric {
        "mode_distance" => record.metrics.mode_distance,
        "guidance_variance" => record
            .metrics
            .guidance_variance
            .context("record has no guidance_variance (run shorter than the window)")?,
        "consistency_gap" => record.metrics.consistency_gap,
        other => bail!("unknown metric '{other}' (mode_distance | guidance_variance | consistency_gap)"),
    })
}

fn compare_cmd(a: &Path, b: &Path, metric: &str) -> Result<()> {
    let ra = load_record(a)?;
    let rb = load_record(b)?;
    let va = metric_value(&ra, metric)?;
    let vb = metric_value(&rb, metric)?;
    println!("{metric}:");
    println!("  A {} = {va:.6e}  (config {})", a.display(), &ra.config_hash[..12]);
    println!("  B {} = {vb:.6e}  (config {})", b.display(), &rb.config_hash[..12]);
    println!("  difference (A - B) = {:+.6e}", va - vb);
    println!(
        "  lower: {}",
        if va < vb { "A" } else if vb < va { "B" } else { "tie" }
    );
    Ok(())
}

fn plot_cmd(record: &Path, out: &Path) -> Result<()> {
    let rec = load_record(record)?;
    emit(&rec, EmitFormat::Svg, out)?;
    println!("plot -> {}", out.display());
    Ok(())
}

mod verify;

fn verify_cmd() -> Result<()> {
    let failures = verify::run_all();
    if failures == 0 {
        println!("verify: all checks passed");
        Ok(())
    } else {
        bail!("verify: {failures} check(s) failed")
    }
}
