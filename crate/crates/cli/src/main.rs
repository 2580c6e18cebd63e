use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nerfprior::generator::{sample_latent, Generator};
use nerfprior::harness::check::run_checks;
use nerfprior::harness::{curate_references, render_views, run_experiment, Arm, ExperimentOutcome, ExperimentSpec, Task};

#[derive(Parser)]
#[command(name = "nerfprior", version, about = "Geometry-regularized inversion of generative radiance fields")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment spec (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the spec's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Restrict to these method arms (repeatable).
    #[arg(long, global = true)]
    arm: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Score candidate latents and build a reference set.
    Curate,
    /// Reference-set management.
    Refs {
        #[command(subcommand)]
        action: RefsAction,
    },
    /// Invert one operator setting per seed.
    Invert,
    /// Run a sweep or ablation task.
    Sweep {
        /// One of inpaint_sweep, box_inpaint, cs_sweep, superres_sweep,
        /// ref_count_ablation, anneal_ablation, regularizer_compare.
        task: String,
    },
    /// Render a sampled latent from the spec's views.
    Render,
    /// Run the quick oracle suite.
    Check,
}

#[derive(Subcommand)]
enum RefsAction {
    /// Curate and save a reference set under `<out>/`.
    Build,
}

fn load_spec(g: &Global, task: Task) -> Result<ExperimentSpec> {
    let mut spec = match &g.config {
        Some(p) => ExperimentSpec::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentSpec::new(task),
    };
    spec.task = task;
    if let Some(s) = g.seed {
        spec.seeds = vec![s];
    }
    if !g.arm.is_empty() {
        spec.arms = g.arm.iter().map(|a| a.parse::<Arm>()).collect::<Result<_, _>>()?;
    }
    spec.validate()?;
    Ok(spec)
}

fn report(outcome: &ExperimentOutcome) -> bool {
    println!("artifacts in {}", outcome.dir.display());
    println!("{} runs, {} failures", outcome.runs.len(), outcome.failures.len());
    for f in &outcome.failures {
        println!("FAILED seed {} {} {}: {}", f.seed, f.arm, f.op, f.error);
    }
    for c in &outcome.checks {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    outcome.success()
}

fn run_task(g: &Global, task: Task) -> Result<bool> {
    let spec = load_spec(g, task)?;
    let outcome = run_experiment(&spec, &g.out)?;
    if let Some(r) = &outcome.curation {
        println!("curation: {} candidates, bad fraction {:.3}", r.entries.len(), r.bad_fraction());
    }
    Ok(report(&outcome))
}

fn build_refs(g: &Global, out: &Path) -> Result<bool> {
    let spec = load_spec(g, Task::Curation)?;
    let gen = Generator::new(&spec.inversion.generator)?;
    let (report, set) = curate_references(&gen, &spec.references, &spec.inversion.render, out)?;
    println!(
        "{} candidates, {} good, bad fraction {:.3}; saved {} references to {}",
        report.entries.len(),
        report.good().len(),
        report.bad_fraction(),
        set.len(),
        out.join("set").display()
    );
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::Curate => run_task(g, Task::Curation),
        Command::Refs {
            action: RefsAction::Build,
        } => build_refs(g, &g.out),
        Command::Invert => run_task(g, Task::Invert),
        Command::Sweep { task } => {
            let t: Task = task.parse()?;
            if matches!(t, Task::Invert | Task::Curation) {
                bail!("'{task}' is not a sweep; use the dedicated verb");
            }
            run_task(g, t)
        }
        Command::Render => {
            let spec = load_spec(g, Task::Invert)?;
            let gen = Generator::new(&spec.inversion.generator)?;
            let seed = g.seed.unwrap_or(spec.seeds[0]);
            let params = gen.map_latent(&sample_latent(seed, gen.latent_dim())?)?;
            render_views(
                &gen,
                &params,
                &spec.views,
                spec.width,
                spec.height,
                &spec.inversion.render,
                Some(&g.out),
            )?;
            println!("wrote {} views to {}", spec.views.len(), g.out.display());
            Ok(true)
        }
        Command::Check => {
            let checks = run_checks()?;
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
