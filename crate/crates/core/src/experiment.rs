//! Declarative experiments and the metrics rows they produce.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtrace::NotFoundReason;
use crate::mem::{BitFlipModel, MemError};
use crate::repair::{run_machine, RepairMode, RepairPolicy, RepairRun};
use crate::vm::Machine;
use crate::workloads::{build, inject_into, MatrixId, Workload, WorkloadError, WorkloadSpec};

pub const DEFAULT_TRAP_COST: u64 = 1000;
pub const DEFAULT_FUEL: u64 = 200_000_000;

fn default_trap_cost() -> u64 {
    DEFAULT_TRAP_COST
}

fn default_fuel() -> u64 {
    DEFAULT_FUEL
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementRef {
    pub matrix: MatrixId,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// One NaN forced into an array element before the run.
    Element(ElementRef),
    /// Random bit flips in the approximate region during the run.
    Stochastic(BitFlipModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub mode: RepairMode,
    #[serde(default)]
    pub policy: RepairPolicy,
    #[serde(default)]
    pub trap_masked: bool,
    #[serde(default)]
    pub injection: Option<Injection>,
    #[serde(default = "default_trap_cost")]
    pub trap_cost: u64,
    #[serde(default = "default_fuel")]
    pub fuel: u64,
    /// Row label; defaults to the workload seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn new(workload: WorkloadSpec, mode: RepairMode) -> Self {
        ExperimentConfig {
            workload,
            mode,
            policy: RepairPolicy::Zero,
            trap_masked: mode == RepairMode::None,
            injection: None,
            trap_cost: DEFAULT_TRAP_COST,
            fuel: DEFAULT_FUEL,
            seed: None,
        }
    }

    pub fn with_injection(mut self, injection: Injection) -> Self {
        self.injection = Some(injection);
        self
    }

    pub fn inject_element(self, matrix: MatrixId, row: usize, col: usize) -> Self {
        self.with_injection(Injection::Element(ElementRef { matrix, row, col }))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.workload.seed)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.mode == RepairMode::None && !self.trap_masked {
            return Err(ExperimentError::Config(
                "mode none requires trap_masked".into(),
            ));
        }
        if self.trap_cost == 0 {
            return Err(ExperimentError::Config("trap_cost must be positive".into()));
        }
        if self.fuel == 0 {
            return Err(ExperimentError::Config("fuel must be positive".into()));
        }
        if let Some(Injection::Stochastic(model)) = &self.injection {
            model.validate()?;
        }
        Ok(())
    }
}

fn full_breakdown(found: &BTreeMap<NotFoundReason, u64>) -> BTreeMap<NotFoundReason, u64> {
    NotFoundReason::ALL
        .iter()
        .map(|r| (*r, found.get(r).copied().unwrap_or(0)))
        .collect()
}

/// One experiment's metrics. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub workload: String,
    pub n: usize,
    pub mode: RepairMode,
    pub seed: u64,
    pub traps: u64,
    pub register_repairs: u64,
    pub memory_repairs: u64,
    pub failure_breakdown: BTreeMap<NotFoundReason, u64>,
    pub instructions_executed: u64,
    pub cost: u64,
    pub result_nan_count: usize,
    /// NaN when any result element is NaN; JSON writes it as `null`.
    #[serde(deserialize_with = "nan_from_null")]
    pub max_abs_error_vs_golden: f64,
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl ResultRow {
    fn from_run(cfg: &ExperimentConfig, workload: &Workload, run: &RepairRun) -> Self {
        let result = workload.read_result(&run.memory);
        let result_nan_count = result.iter().filter(|v| v.is_nan()).count();
        let max_abs_error_vs_golden = result
            .iter()
            .zip(&workload.golden.values)
            .map(|(got, want)| (got - want).abs())
            .fold(0.0, |m: f64, e| {
                if m.is_nan() || e.is_nan() {
                    f64::NAN
                } else {
                    m.max(e)
                }
            });
        let m = &run.metrics;
        ResultRow {
            workload: cfg.workload.kind.as_str().to_string(),
            n: cfg.workload.n,
            mode: cfg.mode,
            seed: cfg.seed(),
            traps: m.traps_raised,
            register_repairs: m.register_repairs,
            memory_repairs: m.memory_repairs,
            failure_breakdown: full_breakdown(&m.memory_repair_failures),
            instructions_executed: m.instructions_executed,
            cost: m.cost(cfg.trap_cost),
            result_nan_count,
            max_abs_error_vs_golden,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Memory(#[from] MemError),
    /// The run stopped abnormally; `row` holds the metrics up to that point.
    #[error("run failed: {message}")]
    Run {
        message: String,
        row: Box<ResultRow>,
    },
}

/// Full outcome of an experiment, for callers that need more than the row.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub row: ResultRow,
    pub workload: Workload,
    pub run: RepairRun,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRow, ExperimentError> {
    run_experiment_detailed(cfg).map(|o| o.row)
}

pub fn run_experiment_detailed(
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let workload = build(&cfg.workload)?;
    let mut memory = workload.memory.clone();
    if let Some(Injection::Element(e)) = &cfg.injection {
        inject_into(&cfg.workload, &mut memory, e.matrix, e.row, e.col)?;
    }
    let mut machine = Machine::new(&workload.program, memory);
    machine.set_trap_enabled(!cfg.trap_masked);
    if let Some(Injection::Stochastic(model)) = &cfg.injection {
        machine.set_bit_flips(*model)?;
    }
    match run_machine(machine, cfg.mode, cfg.policy, cfg.fuel) {
        Ok(run) => Ok(ExperimentOutcome {
            row: ResultRow::from_run(cfg, &workload, &run),
            workload,
            run,
        }),
        Err(err) => Err(ExperimentError::Run {
            message: err.error.to_string(),
            row: Box::new(ResultRow::from_run(cfg, &workload, &err.partial)),
        }),
    }
}
