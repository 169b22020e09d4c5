//! Reactive NaN repair: the trap handler that fixes NaN operands in
//! registers and, through the back-trace, at their origin in memory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtrace::{trace_origin, NotFoundReason, TraceResult};
use crate::isa::{FpReg, Program};
use crate::mem::{Float64Bits, MemoryImage};
use crate::vm::{
    eval_address, HandlerAction, Machine, MachineState, Metrics, RunExit, TrapContext, TrapEnv,
    TrapHandler, VmError,
};

/// Replacement value for a repaired NaN. Never a NaN itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RepairPolicy {
    #[default]
    Zero,
    Constant(Float64Bits),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("repair value {0:?} is a NaN")]
pub struct NanRepairValue(pub Float64Bits);

impl RepairPolicy {
    pub fn constant(value: f64) -> Result<Self, NanRepairValue> {
        let bits = Float64Bits::from_f64(value);
        if bits.is_nan() {
            Err(NanRepairValue(bits))
        } else {
            Ok(RepairPolicy::Constant(bits))
        }
    }

    pub fn value(self) -> Float64Bits {
        match self {
            RepairPolicy::Zero => Float64Bits::ZERO,
            RepairPolicy::Constant(v) => v,
        }
    }
}

// JSON form: "zero" or {"constant": 1.5}.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum PolicyRepr {
    Zero,
    Constant(f64),
}

impl Serialize for RepairPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RepairPolicy::Zero => PolicyRepr::Zero,
            RepairPolicy::Constant(v) => PolicyRepr::Constant(v.to_f64()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RepairPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match PolicyRepr::deserialize(d)? {
            PolicyRepr::Zero => Ok(RepairPolicy::Zero),
            PolicyRepr::Constant(v) => RepairPolicy::constant(v).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairMode {
    None,
    RegisterOnly,
    RegisterAndMemory,
}

impl RepairMode {
    pub const ALL: [RepairMode; 3] = [
        RepairMode::None,
        RepairMode::RegisterOnly,
        RepairMode::RegisterAndMemory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RepairMode::None => "none",
            RepairMode::RegisterOnly => "register_only",
            RepairMode::RegisterAndMemory => "register_and_memory",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MemoryOutcome {
    NotAttempted,
    Patched {
        address: u64,
    },
    /// The traced location no longer holds a NaN; left alone.
    StaleValue {
        address: u64,
    },
    Failed {
        reason: NotFoundReason,
    },
}

/// What one trap's handling did. `memory` has one entry per fixed register.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    pub site: usize,
    pub registers_fixed: Vec<FpReg>,
    pub memory: Vec<(FpReg, MemoryOutcome)>,
}

impl RepairReport {
    pub fn patched_addresses(&self) -> impl Iterator<Item = u64> + '_ {
        self.memory.iter().filter_map(|(_, o)| match o {
            MemoryOutcome::Patched { address } => Some(*address),
            _ => None,
        })
    }
}

/// Overwrites every NaN operand register with the policy value.
pub fn repair_register(
    ctx: &TrapContext,
    state: &mut MachineState,
    policy: RepairPolicy,
) -> RepairReport {
    let value = policy.value();
    let registers_fixed: Vec<FpReg> = ctx.nan_operands.iter().map(|(reg, _)| *reg).collect();
    for &reg in &registers_fixed {
        state.set_fp(reg, value);
    }
    RepairReport {
        site: ctx.site,
        memory: registers_fixed
            .iter()
            .map(|&reg| (reg, MemoryOutcome::NotAttempted))
            .collect(),
        registers_fixed,
    }
}

/// Register repair plus patching each NaN's originating memory word.
///
/// The address comes from the static trace evaluated over the trap-time
/// registers. Memory is written only when the word still holds a NaN.
pub fn repair_memory(
    ctx: &TrapContext,
    program: &Program,
    state: &mut MachineState,
    mem: &mut MemoryImage,
    policy: RepairPolicy,
) -> RepairReport {
    let mut report = repair_register(ctx, state, policy);
    for (reg, outcome) in report.memory.iter_mut() {
        *outcome = match trace_origin(program, ctx.site, *reg) {
            TraceResult::Found { expr, .. } => {
                let address = eval_address(&expr, &ctx.regs.int_regs);
                if mem.read_f64(address).is_nan() {
                    mem.write_f64(address, policy.value());
                    MemoryOutcome::Patched { address }
                } else {
                    MemoryOutcome::StaleValue { address }
                }
            }
            TraceResult::NotFound { reason } => MemoryOutcome::Failed { reason },
        };
    }
    report
}

/// Folds one report into the run counters.
pub fn record_report(metrics: &mut Metrics, report: &RepairReport) {
    if !report.registers_fixed.is_empty() {
        metrics.register_repairs += 1;
    }
    if report.patched_addresses().next().is_some() {
        metrics.memory_repairs += 1;
    }
    for (_, outcome) in &report.memory {
        match outcome {
            MemoryOutcome::Failed { reason } => {
                *metrics.memory_repair_failures.entry(*reason).or_default() += 1
            }
            MemoryOutcome::StaleValue { .. } => metrics.stale_values += 1,
            _ => {}
        }
    }
}

/// Trap handler implementing a [`RepairMode`]; keeps every report.
pub struct RepairHandler {
    pub mode: RepairMode,
    pub policy: RepairPolicy,
    pub reports: Vec<RepairReport>,
}

impl RepairHandler {
    pub fn new(mode: RepairMode, policy: RepairPolicy) -> Self {
        RepairHandler {
            mode,
            policy,
            reports: Vec::new(),
        }
    }

    /// Applies the mode to one trap and returns its report (None in mode `None`).
    pub fn handle(&mut self, ctx: &TrapContext, env: TrapEnv<'_>) -> Option<&RepairReport> {
        let report = match self.mode {
            RepairMode::None => return None,
            RepairMode::RegisterOnly => repair_register(ctx, env.state, self.policy),
            RepairMode::RegisterAndMemory => {
                repair_memory(ctx, env.program, env.state, env.mem, self.policy)
            }
        };
        record_report(env.metrics, &report);
        self.reports.push(report);
        self.reports.last()
    }
}

impl TrapHandler for RepairHandler {
    fn on_trap(&mut self, ctx: &TrapContext, env: TrapEnv<'_>) -> HandlerAction {
        self.handle(ctx, env);
        HandlerAction::Resume
    }
}

/// Outcome of [`run_with_repair`].
#[derive(Clone, Debug)]
pub struct RepairRun {
    pub exit: RunExit,
    pub state: MachineState,
    pub metrics: Metrics,
    pub reports: Vec<RepairReport>,
    pub memory: MemoryImage,
}

#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RepairRunError {
    pub error: VmError,
    /// State at the point of failure.
    pub partial: Box<RepairRun>,
}

/// Runs `program` to completion under the given repair mode.
///
/// With `mode == None` and traps unmasked, the first NaN trap repeats until
/// fuel runs out.
pub fn run_with_repair(
    program: &Program,
    mem: MemoryImage,
    mode: RepairMode,
    policy: RepairPolicy,
    trap_masked: bool,
    fuel: u64,
) -> Result<RepairRun, RepairRunError> {
    let mut machine = Machine::new(program, mem);
    machine.set_trap_enabled(!trap_masked);
    run_machine(machine, mode, policy, fuel)
}

/// Like [`run_with_repair`] for an already configured machine.
pub fn run_machine(
    mut machine: Machine<'_>,
    mode: RepairMode,
    policy: RepairPolicy,
    fuel: u64,
) -> Result<RepairRun, RepairRunError> {
    let mut handler = RepairHandler::new(mode, policy);
    let result = machine.run(&mut handler, fuel);
    let (state, memory, metrics) = machine.into_parts();
    let mut run = RepairRun {
        exit: RunExit::Halted,
        state,
        metrics,
        reports: handler.reports,
        memory,
    };
    match result {
        Ok(exit) => {
            run.exit = exit;
            Ok(run)
        }
        Err(error) => Err(RepairRunError {
            error,
            partial: Box::new(run),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::isa::f;
    use crate::isa::{FpOp, NUM_REGS};
    use crate::vm::{RegSnapshot, StepOutcome};

    const PAYLOAD_NAN: Float64Bits = Float64Bits(0x7ff0464544434241);
    const HEAP_ADDR: u64 = 0x555555767C20;

    fn ctx_with(nans: &[(FpReg, Float64Bits)]) -> TrapContext {
        TrapContext {
            site: 0,
            function: 0,
            op: FpOp::Mul,
            nan_operands: nans.to_vec(),
            regs: RegSnapshot {
                int_regs: [0; NUM_REGS],
                fp_regs: [Float64Bits::ZERO; NUM_REGS],
            },
        }
    }

    #[test]
    fn register_repair_zero() {
        let mut st = MachineState::new(0);
        st.set_fp(f(1), PAYLOAD_NAN);
        st.set_fp(f(3), Float64Bits::from_f64(7.0));
        let report = repair_register(
            &ctx_with(&[(f(1), PAYLOAD_NAN)]),
            &mut st,
            RepairPolicy::Zero,
        );
        assert_eq!(st.fp(f(1)), Float64Bits(0));
        assert_eq!(st.fp(f(3)), Float64Bits::from_f64(7.0));
        assert_eq!(report.registers_fixed, vec![f(1)]);
    }

    #[test]
    fn register_repair_both_and_constant() {
        let mut st = MachineState::new(0);
        let nan2 = Float64Bits(0x7ff8000000000000);
        let policy = RepairPolicy::constant(1.0).unwrap();
        let report = repair_register(
            &ctx_with(&[(f(1), PAYLOAD_NAN), (f(2), nan2)]),
            &mut st,
            policy,
        );
        assert_eq!(st.fp(f(1)), Float64Bits(0x3FF0000000000000));
        assert_eq!(st.fp(f(2)), Float64Bits(0x3FF0000000000000));
        assert_eq!(report.registers_fixed, vec![f(1), f(2)]);
    }

    #[test]
    fn nan_policy_rejected() {
        assert!(RepairPolicy::constant(f64::NAN).is_err());
        let json = serde_json::to_string(&RepairPolicy::constant(2.5).unwrap()).unwrap();
        assert_eq!(json, r#"{"constant":2.5}"#);
        let back: RepairPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, RepairPolicy::constant(2.5).unwrap());
        assert_eq!(
            serde_json::from_str::<RepairPolicy>(r#""zero""#).unwrap(),
            RepairPolicy::Zero
        );
    }

    fn first_trap(m: &mut Machine<'_>) -> TrapContext {
        for _ in 0..1000 {
            if let StepOutcome::Trap(ctx) = m.step().unwrap() {
                return ctx;
            }
        }
        panic!("no trap");
    }

    #[test]
    fn memory_patch_at_traced_address() {
        let src = format!("li r10, {HEAP_ADDR}\nfload f1, [r10]\nfmul f0, f0, f1\nhalt");
        let p = assemble(&src).unwrap();
        let mut mem = MemoryImage::new();
        mem.write_f64(HEAP_ADDR, PAYLOAD_NAN);
        let mut m = Machine::new(&p, mem);
        let ctx = first_trap(&mut m);
        let report = repair_memory(&ctx, &p, &mut m.state, &mut m.mem, RepairPolicy::Zero);
        assert_eq!(
            report.memory,
            vec![(f(1), MemoryOutcome::Patched { address: HEAP_ADDR })]
        );
        assert_eq!(m.mem.read_f64(HEAP_ADDR), Float64Bits(0));
        assert_eq!(m.state.fp(f(1)), Float64Bits(0));
    }

    #[test]
    fn untraceable_falls_back_to_register() {
        let src = "li r2, 0x100\nfload f1, [r2]\nbeq r0, r0, L\nL: fmul f0, f0, f1\nhalt";
        let p = assemble(src).unwrap();
        let mut mem = MemoryImage::new();
        mem.inject_nan(0x100);
        let mut m = Machine::new(&p, mem);
        let ctx = first_trap(&mut m);
        let before = m.mem.clone();
        let report = repair_memory(&ctx, &p, &mut m.state, &mut m.mem, RepairPolicy::Zero);
        assert_eq!(
            report.memory,
            vec![(
                f(1),
                MemoryOutcome::Failed {
                    reason: NotFoundReason::ControlFlow
                }
            )]
        );
        assert_eq!(m.mem, before);
        assert_eq!(m.state.fp(f(1)), Float64Bits::ZERO);
    }

    #[test]
    fn stale_location_left_alone() {
        // The NaN is loaded, then the location is overwritten with 2.0
        // before the arithmetic use traps.
        let src =
            "li r2, 0x100\nfload f1, [r2]\nfli f7, 2.0\nfstore f7, [r2]\nfmul f0, f0, f1\nhalt";
        let p = assemble(src).unwrap();
        let mut mem = MemoryImage::new();
        mem.inject_nan(0x100);
        let run = run_with_repair(
            &p,
            mem,
            RepairMode::RegisterAndMemory,
            RepairPolicy::Zero,
            false,
            100,
        )
        .unwrap();
        assert_eq!(
            run.reports[0].memory,
            vec![(f(1), MemoryOutcome::StaleValue { address: 0x100 })]
        );
        assert_eq!(run.memory.read_f64(0x100).to_f64(), 2.0);
        assert_eq!(run.metrics.stale_values, 1);
        assert_eq!(run.metrics.memory_repairs, 0);
    }

    #[test]
    fn modes_through_run() {
        // Loads the same NaN three times.
        let src = "li r2, 0x100\nli r4, 3\nloop:\n fload f1, [r2]\n fadd f0, f0, f1\n addi r3, r3, 1\n blt r3, r4, loop\nhalt";
        let p = assemble(src).unwrap();
        let mut mem = MemoryImage::new();
        mem.inject_nan(0x100);

        let reg = run_with_repair(
            &p,
            mem.clone(),
            RepairMode::RegisterOnly,
            RepairPolicy::Zero,
            false,
            1000,
        )
        .unwrap();
        assert_eq!(reg.metrics.traps_raised, 3);
        assert_eq!(reg.metrics.register_repairs, 3);
        assert!(reg.memory.read_f64(0x100).is_nan());

        let full = run_with_repair(
            &p,
            mem.clone(),
            RepairMode::RegisterAndMemory,
            RepairPolicy::Zero,
            false,
            1000,
        )
        .unwrap();
        assert_eq!(full.metrics.traps_raised, 1);
        assert_eq!(full.metrics.memory_repairs, 1);
        assert_eq!(
            full.memory.diff(&mem),
            (0x100..0x108)
                .filter(|a| mem.read_u8(*a) != 0)
                .collect::<Vec<_>>()
        );

        let masked = run_with_repair(
            &p,
            mem.clone(),
            RepairMode::None,
            RepairPolicy::Zero,
            true,
            1000,
        )
        .unwrap();
        assert_eq!(masked.metrics.traps_raised, 0);
        assert!(masked.state.fp(f(0)).is_nan());
        assert_eq!(
            masked.metrics.instructions_executed,
            full.metrics.instructions_executed
        );
        assert_eq!(
            reg.metrics.instructions_executed,
            full.metrics.instructions_executed
        );

        let livelock =
            run_with_repair(&p, mem, RepairMode::None, RepairPolicy::Zero, false, 500).unwrap_err();
        assert_eq!(livelock.error, VmError::FuelExhausted(500));
        assert_eq!(livelock.partial.metrics.traps_raised, 500 - 3);
    }
}
