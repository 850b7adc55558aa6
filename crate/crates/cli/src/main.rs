use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robust_es::benchmarks::{Problem, ReferenceCache};
use robust_es::runner::{self, AcquisitionKind, RunConfig, Series};
use robust_es::Error;

/// Robust Bayesian optimization experiments.
#[derive(Parser)]
#[command(name = "res", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment; flags override the config file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        problem: Option<String>,
        #[arg(long)]
        acq: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write zeros for timings so reruns give identical files.
        #[arg(long)]
        no_timings: bool,
    },
    /// Compute (or look up) the brute-force robust optimum of a problem.
    Reference {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        grid: Option<usize>,
        /// Only matters for randomly generated problems.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "references.json")]
        cache: PathBuf,
    },
    /// Re-aggregate and plot results in a directory and its subdirectories.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn exit_status(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

#[allow(clippy::too_many_arguments)]
fn run(config: Option<PathBuf>, problem: Option<String>, acq: Option<String>, iters: Option<usize>, reps: Option<usize>, seed: Option<u64>, out: Option<PathBuf>, no_timings: bool) -> Result<(), Error> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = problem {
        cfg.problem = p;
    }
    if let Some(a) = acq {
        cfg.acquisition = AcquisitionKind::parse(&a)?;
    }
    if let Some(t) = iters {
        cfg.iterations = t;
    }
    if let Some(r) = reps {
        cfg.repetitions = r;
        if cfg.seeds.len() != r {
            cfg.seeds.clear();
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.seeds.clear();
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if no_timings {
        cfg.record_timings = false;
    }
    let exp = runner::run_experiment(&cfg)?;
    if let Some(e) = exp.error {
        return Err(e);
    }
    for r in &exp.records {
        if let Some(last) = r.iterations.last() {
            println!(
                "run {} seed {}: robust regret {:.4e}, inference regret {:.4e}",
                r.run_id, r.seed, last.robust_regret, last.inference_regret
            );
        }
    }
    println!("results in {}", cfg.output_dir.display());
    Ok(())
}

fn reference(problem: &str, grid: Option<usize>, seed: u64, cache_path: &Path) -> Result<(), Error> {
    let p = Problem::by_name(problem, seed)?;
    let grid = grid.unwrap_or_else(|| robust_es::benchmarks::default_reference_grid(&p));
    if grid < 2 {
        return Err(Error::Config("grid must be at least 2".into()));
    }
    let mut cache = ReferenceCache::load(cache_path)?;
    let r = cache.get_or_compute(&p, grid);
    cache.save(cache_path)?;
    println!("{problem} (grid {grid}): f* = {:.10}, x* = {:?}, theta* = {:?}", r.f_star, r.x, r.theta);
    Ok(())
}

fn plot(dir: &Path) -> Result<(), Error> {
    let mut dirs = vec![dir.to_path_buf()];
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    subs.sort();
    dirs.extend(subs);
    let mut series = Vec::new();
    let mut metric = None;
    for d in dirs {
        if !d.join(runner::MANIFEST_JSON).exists() {
            continue;
        }
        let (manifest, records) = runner::load_results(&d)?;
        let rows = runner::aggregate(&records)?;
        std::fs::write(d.join(runner::AGGREGATE_CSV), runner::write_aggregate_csv(&rows))?;
        metric.get_or_insert(runner::primary_metric(&manifest.problem));
        let label = if d == dir { manifest.acquisition.name().to_string() } else { d.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()) };
        series.push(Series { label, rows });
    }
    let Some(metric) = metric else {
        return Err(Error::Config(format!("no results found in {}", dir.display())));
    };
    let target = dir.join(runner::PLOT_SVG);
    std::fs::write(&target, runner::plot_svg(&series, metric))?;
    println!("wrote {}", target.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            problem,
            acq,
            iters,
            reps,
            seed,
            out,
            no_timings,
        } => run(config, problem, acq, iters, reps, seed, out, no_timings),
        Command::Reference { problem, grid, seed, cache } => reference(&problem, grid, seed, &cache),
        Command::Plot { input } => plot(&input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_errors_map_to_three() {
        assert_eq!(exit_status(&Error::NotPositiveDefinite { jitter: 1e-2, size: 4 }), 3);
        assert_eq!(exit_status(&Error::InfeasibleBox { mass: 0.0 }), 3);
        assert_eq!(exit_status(&Error::Config("x".into())), 2);
    }
}
