//! Command-line front end: generate experiment instances, run the solver,
//! verify its runtime invariants, and fit convergence rates from recorded
//! histories. One run per process; everything is deterministic in the
//! flags, so identical invocations produce identical files.
//!
//! Exit codes: 0 success, 1 usage or bad input, 2 invariant violation,
//! 3 file-system failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dykstra::analysis::{fit_rate, probe_v4, RateModel};
use dykstra::engine::{Engine, RunHistory, RunOptions, Treatment};
use dykstra::error::{Error, Result};
use dykstra::funcs::NodeClass;
use dykstra::instances::{gen_nonsmooth_on, gen_smooth_on, Instance};
use dykstra::schedule::{cyclic_schedule, star_schedule, time_varying_schedule, CyclicOrder, Schedule};
use dykstra::topology::Graph;

#[derive(Parser)]
#[command(
    name = "dykstra",
    about = "Distributed consensus solver: dual block-coordinate ascent on graphs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded experiment instance and write it as JSON.
    Gen(GenArgs),
    /// Run the solver and record a per-step CSV history plus a summary.
    Run(RunArgs),
    /// Run with every check enabled and report each invariant family.
    Verify(VerifyArgs),
    /// Fit a convergence-rate model to a recorded history.
    Rates(RatesArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Family {
    Smooth,
    Nonsmooth,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraphKind {
    Star,
    Ring,
    Path,
    Complete,
}

impl GraphKind {
    fn build(self, nodes: usize) -> Result<Graph> {
        match self {
            GraphKind::Star => Graph::star(nodes),
            GraphKind::Ring => Graph::ring(nodes),
            GraphKind::Path => Graph::path(nodes),
            GraphKind::Complete => Graph::complete(nodes),
        }
    }
}

#[derive(Clone, Copy, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum TreatArg {
    /// Handle every full-domain node with bundle steps.
    Subdiff,
    /// Handle every full-domain node with exact prox steps.
    Prox,
    /// Keep the classes stored on the instance.
    #[default]
    AsClassified,
}

impl From<TreatArg> for Treatment {
    fn from(t: TreatArg) -> Treatment {
        match t {
            TreatArg::Subdiff => Treatment::Subdifferentiable,
            TreatArg::Prox => Treatment::Proximable,
            TreatArg::AsClassified => Treatment::AsClassified,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    nodes: usize,
    /// Block dimension m.
    #[arg(long)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = GraphKind::Star)]
    graph: GraphKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON file mirroring the run flags; replaces all other options.
    #[arg(long, conflicts_with_all = ["instance", "schedule", "cycles", "treat", "seed", "drop_prob", "csv", "summary"])]
    config: Option<PathBuf>,
    #[arg(long)]
    instance: Option<PathBuf>,
    /// star | cyclic | timevary, or a path to a schedule JSON file.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long, value_enum)]
    treat: Option<TreatArg>,
    /// Seed for the time-varying schedule generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Edge drop probability for the time-varying schedule generator.
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the summary JSON here (it always goes to stdout).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    instance: PathBuf,
    schedule: String,
    cycles: usize,
    #[serde(default)]
    treat: TreatArg,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_drop_prob")]
    drop_prob: f64,
    csv: PathBuf,
    #[serde(default)]
    summary: Option<PathBuf>,
}

fn default_drop_prob() -> f64 {
    0.3
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    instance: PathBuf,
    /// star | cyclic | timevary, or a path to a schedule JSON file.
    #[arg(long)]
    schedule: String,
    #[arg(long)]
    cycles: usize,
    #[arg(long, value_enum, default_value_t = TreatArg::AsClassified)]
    treat: TreatArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    drop_prob: f64,
    /// Midway through the run, push one node's minorant above its
    /// function; the checks must then fail.
    #[arg(long)]
    inject_minorant_fault: bool,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Cycle window as LO:HI (inclusive); default is the tail quarter.
    #[arg(long)]
    window: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Linear,
    Power,
}

impl From<ModelArg> for RateModel {
    fn from(m: ModelArg) -> RateModel {
        match m {
            ModelArg::Linear => RateModel::Linear,
            ModelArg::Power => RateModel::Power,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Rates(args) => cmd_rates(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 3,
        Error::Step { .. } | Error::Consistency(_) => 2,
        _ => 1,
    }
}

fn read_instance(path: &Path) -> Result<Instance> {
    Instance::from_json(&fs::read_to_string(path)?)
}

/// Nodes the chosen treatment will handle with bundle steps.
fn effective_v4(instance: &Instance, treat: TreatArg) -> Vec<usize> {
    instance
        .functions
        .iter()
        .enumerate()
        .filter(|(_, f)| match treat {
            TreatArg::Subdiff => f.is_full_domain(),
            TreatArg::Prox => false,
            TreatArg::AsClassified => f.class == NodeClass::Subdifferentiable,
        })
        .map(|(i, _)| i)
        .collect()
}

fn make_schedule(
    selector: &str,
    instance: &Instance,
    treat: TreatArg,
    seed: u64,
    drop_prob: f64,
    cycles: usize,
) -> Result<Schedule> {
    match selector {
        "star" => star_schedule(&instance.graph),
        "cyclic" => cyclic_schedule(
            &instance.graph,
            &effective_v4(instance, treat),
            CyclicOrder::EdgesThenNodes,
        ),
        "timevary" => time_varying_schedule(&instance.graph, seed, drop_prob, cycles),
        path => Schedule::from_json(&fs::read_to_string(path)?),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let graph = args.graph.build(args.nodes)?;
    let instance = match args.family {
        Family::Smooth => gen_smooth_on(graph, args.seed, args.dim),
        Family::Nonsmooth => gen_nonsmooth_on(graph, args.seed, args.dim),
    };
    instance.validate()?;
    fs::write(&args.out, instance.to_json())?;
    match instance.certificate_residual()? {
        Some(residual) => println!(
            "wrote {} ({} nodes, dim {}, certificate residual {residual:.3e})",
            args.out.display(),
            instance.graph.num_nodes(),
            instance.block_dim
        ),
        None => println!("wrote {} (no planted optimum)", args.out.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    final_dual_value: f64,
    final_gap: f64,
    final_dist_sq: f64,
    max_reset_drift: f64,
    max_reset_dual_drift: f64,
    cycles_completed: usize,
    warnings: &'a [String],
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = resolve_run_config(args)?;
    let instance = read_instance(&cfg.instance)?;
    let schedule = make_schedule(
        &cfg.schedule,
        &instance,
        cfg.treat,
        cfg.seed,
        cfg.drop_prob,
        cfg.cycles,
    )?;
    if cfg.cycles < 1 {
        return Err(Error::Precondition("cycles must be at least 1".into()));
    }
    let mut engine = Engine::new(instance, schedule, cfg.treat.into())?;
    let outcome = engine.run(cfg.cycles);
    engine.history().write_csv(&cfg.csv)?;
    let summary = RunSummary {
        final_dual_value: engine.dual_value(),
        final_gap: engine.duality_gap(),
        final_dist_sq: engine.dist_sq(),
        max_reset_drift: engine.max_reset_vh_drift(),
        max_reset_dual_drift: engine.max_reset_dual_drift(),
        cycles_completed: engine.completed_cycles(),
        warnings: engine.warnings(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    println!("{text}");
    if let Some(path) = &cfg.summary {
        fs::write(path, text)?;
    }
    outcome
}

fn resolve_run_config(args: RunArgs) -> Result<RunConfig> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        return serde_json::from_str(&text)
            .map_err(|e| Error::Structural(format!("bad run config: {e}")));
    }
    let missing = |flag: &str| Error::Precondition(format!("missing required flag --{flag}"));
    Ok(RunConfig {
        instance: args.instance.ok_or_else(|| missing("instance"))?,
        schedule: args.schedule.ok_or_else(|| missing("schedule"))?,
        cycles: args.cycles.ok_or_else(|| missing("cycles"))?,
        treat: args.treat.unwrap_or_default(),
        seed: args.seed.unwrap_or(0),
        drop_prob: args.drop_prob.unwrap_or_else(default_drop_prob),
        csv: args.csv.ok_or_else(|| missing("csv"))?,
        summary: args.summary,
    })
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let instance = read_instance(&args.instance)?;
    let schedule = make_schedule(
        &args.schedule,
        &instance,
        args.treat,
        args.seed,
        args.drop_prob,
        args.cycles,
    )?;
    if args.cycles < 1 {
        return Err(Error::Precondition("cycles must be at least 1".into()));
    }
    let mut engine = Engine::new(instance, schedule, args.treat.into())?;
    engine.set_options(RunOptions {
        fail_fast: false,
        ..RunOptions::default()
    });
    let fault_cycle = args.cycles / 2 + 1;
    let has_v4 = !engine.v4_nodes().is_empty();

    let mut probe_checks = 0usize;
    let mut probe_violations = 0usize;
    let mut probe_worst = f64::INFINITY;
    let mut probe_errors: Vec<String> = Vec::new();
    for n in 1..=args.cycles {
        if args.inject_minorant_fault && n == fault_cycle {
            let node = *engine
                .v4_nodes()
                .first()
                .ok_or_else(|| {
                    Error::Precondition(
                        "fault injection needs a subdifferentiable node; use --treat subdiff"
                            .into(),
                    )
                })?;
            let mut bad = engine
                .minorant(node)
                .expect("subdifferentiable node carries a minorant")
                .clone();
            bad.intercept += 1.0;
            engine.force_minorant(node, bad)?;
        }
        engine.advance_cycle()?;
        if has_v4 {
            match probe_v4(&engine) {
                Ok(probes) => {
                    for p in &probes {
                        probe_checks += 1;
                        let slack = p.sqrt_bound_slack();
                        probe_worst = probe_worst.min(slack);
                        if slack < 0.0 {
                            probe_violations += 1;
                        }
                    }
                }
                Err(e) => {
                    probe_checks += 1;
                    probe_violations += 1;
                    probe_worst = f64::NEG_INFINITY;
                    if probe_errors.len() < 3 {
                        probe_errors.push(format!("cycle {n}: {e}"));
                    }
                }
            }
        }
    }

    let mut failures = 0usize;
    for (name, family) in engine.invariant_report().families() {
        let ok = family.violations == 0;
        if !ok {
            failures += 1;
        }
        print_family_line(name, ok, family.checks, family.worst_margin, family.first_violation);
    }
    if has_v4 {
        let ok = probe_violations == 0;
        if !ok {
            failures += 1;
        }
        print_family_line("probe_sqrt_bound", ok, probe_checks, probe_worst, None);
        for msg in &probe_errors {
            println!("       {msg}");
        }
    }
    for w in engine.warnings() {
        println!("warning: {w}");
    }
    if failures > 0 {
        return Err(Error::Consistency(format!(
            "{failures} invariant families failed"
        )));
    }
    println!("all invariant families passed over {} cycles", args.cycles);
    Ok(())
}

fn print_family_line(
    name: &str,
    ok: bool,
    checks: usize,
    worst: f64,
    first_violation: Option<(usize, usize)>,
) {
    let status = if ok { "PASS" } else { "FAIL" };
    let worst = if checks == 0 {
        "   (no checks)".to_string()
    } else {
        format!("worst slack {worst:+.3e}")
    };
    let site = match first_violation {
        Some((n, w)) => format!("  first violation at (n={n}, w={w})"),
        None => String::new(),
    };
    println!("{status} {name:<20} checks {checks:>6}  {worst}{site}");
}

fn cmd_rates(args: RatesArgs) -> Result<()> {
    let history = RunHistory::read_csv(&args.csv)?;
    let boundaries = history.cycle_boundaries();
    if boundaries.is_empty() {
        return Err(Error::Precondition("history holds no cycles".into()));
    }
    let max_cycle = boundaries.iter().map(|r| r.cycle).max().unwrap_or(0);
    if boundaries.iter().any(|r| r.cycle < 1) {
        return Err(Error::Structural("cycle numbers must start at 1".into()));
    }
    let mut gaps = vec![f64::NAN; max_cycle];
    for r in &boundaries {
        gaps[r.cycle - 1] = r.gap;
    }
    let window = match &args.window {
        Some(text) => Some(parse_window(text)?),
        None => None,
    };
    let fit = fit_rate(&gaps, args.model.into(), window)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&fit).expect("rate fit serializes")
    );
    Ok(())
}

fn parse_window(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Precondition(format!("bad window {text:?}, expected LO:HI"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let lo = parts[0].trim().parse::<usize>().map_err(|_| bad())?;
    let hi = parts[1].trim().parse::<usize>().map_err(|_| bad())?;
    Ok((lo, hi))
}
