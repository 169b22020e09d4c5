use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use nanrepair::analysis::analyze;
use nanrepair::asm::{assemble, format_program};
use nanrepair::experiment::{
    run_experiment, ExperimentConfig, ExperimentError, ResultRow, DEFAULT_FUEL,
};
use nanrepair::fuzz::{fuzz_soundness, GenConfig, GenShape};
use nanrepair::isa::{FpReg, Program};
use nanrepair::mem::MemoryImage;
use nanrepair::repair::{run_with_repair, RepairMode, RepairPolicy};
use nanrepair::report::{emit_report, format_breakdown};
use nanrepair::vm::RunExit;
use nanrepair::workloads::{MatrixId, WorkloadKind, WorkloadSpec};

#[derive(Parser)]
#[command(
    name = "nanrepair",
    version,
    about = "Approximate-memory simulator with reactive NaN repair"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    RegisterOnly,
    RegisterAndMemory,
}

impl From<ModeArg> for RepairMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => RepairMode::None,
            ModeArg::RegisterOnly => RepairMode::RegisterOnly,
            ModeArg::RegisterAndMemory => RepairMode::RegisterAndMemory,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Mixed,
    StraightLineClean,
    AlwaysClobber,
}

impl From<ShapeArg> for GenShape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Mixed => GenShape::Mixed,
            ShapeArg::StraightLineClean => GenShape::StraightLineClean,
            ShapeArg::AlwaysClobber => GenShape::AlwaysClobber,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Assemble and validate a program; prints the canonical listing.
    Asm {
        file: PathBuf,
        /// Write the listing here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a program under a repair mode.
    Run {
        file: PathBuf,
        /// Let NaNs propagate without trapping.
        #[arg(long)]
        trap_mask: bool,
        #[arg(long, default_value_t = DEFAULT_FUEL)]
        fuel: u64,
        #[arg(long, value_enum, default_value = "register-and-memory")]
        mode: ModeArg,
        /// Repair value (default 0).
        #[arg(long)]
        repair_value: Option<f64>,
        /// Write final state, counters and repair reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Back-trace every FP arithmetic operand and report the found ratio.
    Analyze {
        file: PathBuf,
        #[arg(long)]
        json: PathBuf,
    },
    /// Run experiments from a JSON config (one object or an array).
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MatMul trap counts per repair mode, checked against the expected pattern.
    Table3 {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32", value_parser = parse_size)]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Random-program soundness check of the back-trace.
    Fuzz {
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "mixed")]
        shape: ShapeArg,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> std::result::Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        Ok(n) => Err(format!("matrix size {n} is below 2")),
        Err(e) => Err(e.to_string()),
    }
}

/// Outcome of a command that ran to completion but whose checks failed.
struct Failed;

type CmdResult = Result<std::result::Result<(), Failed>>;

fn load_program(path: &Path) -> Result<Program> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    assemble(&src).with_context(|| path.display().to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_asm(file: &Path, out: Option<&Path>) -> CmdResult {
    let program = load_program(file)?;
    let listing = format_program(&program);
    match out {
        Some(path) => {
            write_file(path, &listing)?;
            println!(
                "{}: {} instructions, {} functions",
                file.display(),
                program.len(),
                program.functions().len()
            );
        }
        None => print!("{listing}"),
    }
    Ok(Ok(()))
}

fn cmd_run(
    file: &Path,
    trap_mask: bool,
    fuel: u64,
    mode: RepairMode,
    repair_value: Option<f64>,
    json_out: Option<&Path>,
) -> CmdResult {
    let program = load_program(file)?;
    let policy = match repair_value {
        Some(v) => RepairPolicy::constant(v)?,
        None => RepairPolicy::Zero,
    };
    let (run, error) = match run_with_repair(
        &program,
        MemoryImage::from_program(&program),
        mode,
        policy,
        trap_mask,
        fuel,
    ) {
        Ok(run) => (run, None),
        Err(e) => (*e.partial, Some(e.error)),
    };
    let exit = match (&error, run.exit) {
        (Some(e), _) => e.to_string(),
        (None, RunExit::Halted) => "halted".to_string(),
        (None, RunExit::Aborted { site }) => format!("aborted at {site}"),
    };
    let m = &run.metrics;
    println!("exit: {exit}");
    println!("instructions_executed: {}", m.instructions_executed);
    println!("traps_raised: {}", m.traps_raised);
    println!("register_repairs: {}", m.register_repairs);
    println!("memory_repairs: {}", m.memory_repairs);
    println!("stale_values: {}", m.stale_values);
    for reason in nanrepair::backtrace::NotFoundReason::ALL {
        let count = m.memory_repair_failures.get(&reason).copied().unwrap_or(0);
        println!("failed[{reason}]: {count}");
    }
    for reg in FpReg::all() {
        let v = run.state.fp(reg);
        if v.0 != 0 {
            println!("{reg} = {:?} ({v})", v.to_f64());
        }
    }
    if let Some(path) = json_out {
        let fp: Vec<String> = run.state.fp_regs.iter().map(|v| v.to_string()).collect();
        let doc = json!({
            "exit": exit,
            "pc": run.state.pc,
            "metrics": m,
            "int_regs": run.state.int_regs,
            "fp_regs": fp,
            "reports": run.reports,
        });
        write_file(path, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    }
    Ok(if error.is_some() { Err(Failed) } else { Ok(()) })
}

fn cmd_analyze(file: &Path, json_out: &Path) -> CmdResult {
    let program = load_program(file)?;
    let report = analyze(&program);
    write_file(json_out, &(report.to_json() + "\n"))?;
    println!(
        "sites: {}  found: {}  ratio: {:.4}",
        report.total_sites, report.found, report.ratio
    );
    for (reason, count) in &report.breakdown {
        println!("  {reason}: {count}");
    }
    Ok(Ok(()))
}

fn print_rows(rows: &[ResultRow]) {
    println!(
        "{:<8} {:>4} {:<20} {:>6} {:>7} {:>7} {:>12} {:>12} {:>4} {:>10}",
        "workload", "n", "mode", "traps", "reg", "mem", "instructions", "cost", "nans", "max_err"
    );
    for r in rows {
        println!(
            "{:<8} {:>4} {:<20} {:>6} {:>7} {:>7} {:>12} {:>12} {:>4} {:>10.3e}",
            r.workload,
            r.n,
            r.mode.as_str(),
            r.traps,
            r.register_repairs,
            r.memory_repairs,
            r.instructions_executed,
            r.cost,
            r.result_nan_count,
            r.max_abs_error_vs_golden
        );
        if r.failure_breakdown.values().any(|&c| c > 0) {
            println!("         failures: {}", format_breakdown(r));
        }
    }
}

/// Runs each config; failing runs still contribute their partial row.
fn run_all(configs: &[ExperimentConfig]) -> Result<(Vec<ResultRow>, bool)> {
    let mut rows = Vec::new();
    let mut ok = true;
    for (i, cfg) in configs.iter().enumerate() {
        match run_experiment(cfg) {
            Ok(row) => rows.push(row),
            Err(ExperimentError::Run { message, row }) => {
                eprintln!("experiment {i}: {message}");
                rows.push(*row);
                ok = false;
            }
            Err(e) => return Err(e).with_context(|| format!("experiment {i}")),
        }
    }
    Ok((rows, ok))
}

fn cmd_experiment(config: &Path, out: &Path) -> CmdResult {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let configs: Vec<ExperimentConfig> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|c| vec![c])
    }
    .with_context(|| format!("invalid config {}", config.display()))?;
    if configs.is_empty() {
        bail!("{}: no experiments", config.display());
    }
    let (rows, ok) = run_all(&configs)?;
    let [csv, json] = emit_report(&rows, out)?;
    let mut sorted = rows;
    nanrepair::report::sort_rows(&mut sorted);
    print_rows(&sorted);
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(if ok { Ok(()) } else { Err(Failed) })
}

fn table3_configs(sizes: &[usize], seed: u64) -> Vec<ExperimentConfig> {
    let mut configs = Vec::new();
    for &n in sizes {
        let spec = WorkloadSpec::new(WorkloadKind::MatMul, n, seed);
        let (row, col) = (n / 2 - 1, (n / 2 + 1) % n);
        configs.push(ExperimentConfig::new(spec.clone(), RepairMode::None));
        for mode in [RepairMode::RegisterOnly, RepairMode::RegisterAndMemory] {
            configs.push(ExperimentConfig::new(spec.clone(), mode).inject_element(
                MatrixId::A,
                row,
                col,
            ));
        }
    }
    configs
}

/// Expected trap pattern: none for the clean run, `n` for register-only,
/// one for memory repair; overhead is exactly those trap charges.
fn check_table3(rows: &[ResultRow]) -> Vec<String> {
    let mut problems = Vec::new();
    for r in rows {
        let expected = match r.mode {
            RepairMode::None => 0,
            RepairMode::RegisterOnly => r.n as u64,
            RepairMode::RegisterAndMemory => 1,
        };
        if r.traps != expected {
            problems.push(format!(
                "n={} {}: traps {} != {expected}",
                r.n,
                r.mode.as_str(),
                r.traps
            ));
        }
        if r.result_nan_count != 0 {
            problems.push(format!(
                "n={} {}: {} NaN results",
                r.n,
                r.mode.as_str(),
                r.result_nan_count
            ));
        }
    }
    for chunk in rows.chunks(3) {
        if let [clean, reg, mem] = chunk {
            if reg.instructions_executed != clean.instructions_executed
                || mem.instructions_executed != clean.instructions_executed
            {
                problems.push(format!("n={}: instruction counts differ", clean.n));
            }
        }
    }
    problems
}

fn cmd_table3(sizes: &[usize], out: &Path, seed: u64) -> CmdResult {
    let configs = table3_configs(sizes, seed);
    let (mut rows, ok) = run_all(&configs)?;
    nanrepair::report::sort_rows(&mut rows);
    let [csv, json] = emit_report(&rows, out)?;
    print_rows(&rows);
    println!("wrote {} and {}", csv.display(), json.display());
    let problems = check_table3(&rows);
    for p in &problems {
        eprintln!("mismatch: {p}");
    }
    Ok(if ok && problems.is_empty() {
        Ok(())
    } else {
        Err(Failed)
    })
}

fn cmd_fuzz(count: u64, seed: u64, shape: GenShape, json_out: Option<&Path>) -> CmdResult {
    let report = fuzz_soundness(count as usize, seed, &GenConfig::with_shape(shape));
    println!("programs: {}", report.programs);
    println!(
        "traps: {}  nan operands: {}",
        report.traps, report.trap_operands
    );
    println!("found: {}  ratio: {:.4}", report.found, report.found_ratio);
    for (reason, n) in &report.breakdown {
        println!("  {reason}: {n}");
    }
    println!(
        "static sites: {}  found: {}  ratio: {:.4}",
        report.static_sites, report.static_found, report.static_ratio
    );
    println!("ratio histogram: {:?}", report.ratio_histogram);
    println!("unfinished: {}", report.unfinished);
    println!("violations: {}", report.violations.len());
    for v in report.violations.iter().take(10) {
        println!(
            "  program {} (seed {}) site {} {}: oracle {:?}, traced 0x{:x}",
            v.program, v.seed, v.site, v.operand, v.oracle, v.traced_address
        );
    }
    if let Some(path) = json_out {
        write_file(path, &(report.to_json() + "\n"))?;
    }
    Ok(if report.is_sound() {
        Ok(())
    } else {
        Err(Failed)
    })
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Asm { file, out } => cmd_asm(&file, out.as_deref()),
        Command::Run {
            file,
            trap_mask,
            fuel,
            mode,
            repair_value,
            json,
        } => cmd_run(
            &file,
            trap_mask,
            fuel,
            mode.into(),
            repair_value,
            json.as_deref(),
        ),
        Command::Analyze { file, json } => cmd_analyze(&file, &json),
        Command::Experiment { config, out } => cmd_experiment(&config, &out),
        Command::Table3 { sizes, out, seed } => cmd_table3(&sizes, &out, seed),
        Command::Fuzz {
            count,
            seed,
            shape,
            json,
        } => cmd_fuzz(count, seed, shape.into(), json.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
