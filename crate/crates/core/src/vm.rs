//! Fetch-decode-execute interpreter with the NaN-operand trap.
//!
//! An FP arithmetic instruction that reads a NaN while traps are enabled is
//! not executed: [`Machine::step`] returns [`StepOutcome::Trap`] with the pc
//! left on the faulting instruction, so it re-executes once a handler has
//! repaired the operands.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtrace::NotFoundReason;
use crate::isa::{AddressExpr, FpOp, FpReg, Instruction, Program, NUM_REGS};
use crate::mem::{BitFlipModel, Float64Bits, MemError, MemoryImage};

pub const DEFAULT_RETURN_STACK_LIMIT: usize = 1024;

/// `base + index * scale + displacement` over a register snapshot.
pub fn eval_address(expr: &AddressExpr, int_regs: &[u64; NUM_REGS]) -> u64 {
    expr.eval(int_regs)
}

/// Architectural state of one hart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub pc: usize,
    pub int_regs: [u64; NUM_REGS],
    pub fp_regs: [Float64Bits; NUM_REGS],
    pub trap_enabled: bool,
    pub return_stack: Vec<usize>,
    pub return_stack_limit: usize,
    pub halted: bool,
}

impl MachineState {
    pub fn new(entry: usize) -> Self {
        MachineState {
            pc: entry,
            int_regs: [0; NUM_REGS],
            fp_regs: [Float64Bits::ZERO; NUM_REGS],
            trap_enabled: true,
            return_stack: Vec::new(),
            return_stack_limit: DEFAULT_RETURN_STACK_LIMIT,
            halted: false,
        }
    }

    pub fn fp(&self, reg: FpReg) -> Float64Bits {
        self.fp_regs[reg.index()]
    }

    pub fn set_fp(&mut self, reg: FpReg, value: Float64Bits) {
        self.fp_regs[reg.index()] = value;
    }
}

/// Register files captured at trap time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegSnapshot {
    pub int_regs: [u64; NUM_REGS],
    pub fp_regs: [Float64Bits; NUM_REGS],
}

/// Everything a handler learns about an invalid-operation trap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrapContext {
    pub site: usize,
    pub function: usize,
    pub op: FpOp,
    /// Distinct NaN source registers with their bit patterns, in operand order.
    pub nan_operands: Vec<(FpReg, Float64Bits)>,
    pub regs: RegSnapshot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum StepOutcome {
    Continue,
    Halted,
    Trap(TrapContext),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("pc {0} is outside the program")]
    InvalidPc(usize),
    #[error("ret with empty return stack at pc {0}")]
    ReturnStackUnderflow(usize),
    #[error("return stack limit exceeded at pc {0}")]
    ReturnStackOverflow(usize),
    #[error("fuel exhausted after {0} steps")]
    FuelExhausted(u64),
    #[error("machine already halted")]
    AlreadyHalted,
}

/// Run counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub instructions_executed: u64,
    pub traps_raised: u64,
    /// Traps whose NaN registers were overwritten.
    pub register_repairs: u64,
    /// Traps where at least one memory location was patched.
    pub memory_repairs: u64,
    /// Per NaN operand whose originating load could not be traced.
    pub memory_repair_failures: BTreeMap<NotFoundReason, u64>,
    /// Per NaN operand whose traced location no longer held a NaN.
    pub stale_values: u64,
    pub bit_flips: u64,
}

impl Metrics {
    /// Deterministic overhead model: executed instructions plus a fixed charge per trap.
    pub fn cost(&self, trap_cost: u64) -> u64 {
        self.instructions_executed + trap_cost * self.traps_raised
    }
}

/// Where an FP register's current value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    LoadedFrom(u64),
    NotFromMemory,
}

/// Runtime ground truth of FP register provenance. Never consulted by
/// execution; tests compare it against the static back-trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProvenanceOracle {
    origin: [Origin; NUM_REGS],
}

impl Default for ProvenanceOracle {
    fn default() -> Self {
        ProvenanceOracle {
            origin: [Origin::NotFromMemory; NUM_REGS],
        }
    }
}

impl ProvenanceOracle {
    pub fn origin(&self, reg: FpReg) -> Origin {
        self.origin[reg.index()]
    }

    fn record(&mut self, inst: &Instruction, int_regs: &[u64; NUM_REGS]) {
        match *inst {
            Instruction::Fload { dst, addr } => {
                self.origin[dst.index()] = Origin::LoadedFrom(addr.eval(int_regs))
            }
            Instruction::Fmov { dst, src } => self.origin[dst.index()] = self.origin[src.index()],
            Instruction::FArith { dst, .. } | Instruction::Fli { dst, .. } => {
                self.origin[dst.index()] = Origin::NotFromMemory
            }
            _ => {}
        }
    }
}

/// What the handler wants the run loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HandlerAction {
    Resume,
    Abort,
}

/// Mutable view of the machine handed to a trap handler.
pub struct TrapEnv<'a> {
    pub program: &'a Program,
    pub state: &'a mut MachineState,
    pub mem: &'a mut MemoryImage,
    pub metrics: &'a mut Metrics,
    pub oracle: &'a ProvenanceOracle,
}

/// Synchronous trap callback, the simulator's stand-in for a signal handler.
pub trait TrapHandler {
    fn on_trap(&mut self, ctx: &TrapContext, env: TrapEnv<'_>) -> HandlerAction;
}

impl<F> TrapHandler for F
where
    F: FnMut(&TrapContext, TrapEnv<'_>) -> HandlerAction,
{
    fn on_trap(&mut self, ctx: &TrapContext, env: TrapEnv<'_>) -> HandlerAction {
        self(ctx, env)
    }
}

/// Handler that resumes without touching anything.
pub struct IgnoreTraps;

impl TrapHandler for IgnoreTraps {
    fn on_trap(&mut self, _: &TrapContext, _: TrapEnv<'_>) -> HandlerAction {
        HandlerAction::Resume
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunExit {
    Halted,
    Aborted { site: usize },
}

struct EpochFlipper {
    model: BitFlipModel,
    rng: ChaCha8Rng,
}

/// A program bound to its machine state, memory and counters.
pub struct Machine<'p> {
    program: &'p Program,
    pub state: MachineState,
    pub mem: MemoryImage,
    pub metrics: Metrics,
    oracle: ProvenanceOracle,
    flipper: Option<EpochFlipper>,
}

impl<'p> Machine<'p> {
    pub fn new(program: &'p Program, mem: MemoryImage) -> Self {
        Machine {
            program,
            state: MachineState::new(program.entry()),
            mem,
            metrics: Metrics::default(),
            oracle: ProvenanceOracle::default(),
            flipper: None,
        }
    }

    pub fn program(&self) -> &'p Program {
        self.program
    }

    pub fn oracle(&self) -> &ProvenanceOracle {
        &self.oracle
    }

    pub fn set_trap_enabled(&mut self, enabled: bool) {
        self.state.trap_enabled = enabled;
    }

    /// Enables stochastic flips of the approximate region every
    /// `model.epoch_len` executed instructions.
    pub fn set_bit_flips(&mut self, model: BitFlipModel) -> Result<(), MemError> {
        model.validate()?;
        if self.mem.approx_region().is_none() {
            return Err(MemError::NoApproxRegion);
        }
        self.flipper = Some(EpochFlipper {
            model,
            rng: model.rng(),
        });
        Ok(())
    }

    pub fn into_parts(self) -> (MachineState, MemoryImage, Metrics) {
        (self.state, self.mem, self.metrics)
    }

    /// Executes (or traps on) the instruction at the current pc.
    pub fn step(&mut self) -> Result<StepOutcome, VmError> {
        if self.state.halted {
            return Err(VmError::AlreadyHalted);
        }
        let pc = self.state.pc;
        let inst = *self.program.get(pc).ok_or(VmError::InvalidPc(pc))?;
        let st = &mut self.state;
        let mut next = pc + 1;

        match inst {
            Instruction::FArith { op, dst, lhs, rhs } => {
                let (a, b) = (st.fp(lhs), st.fp(rhs));
                if st.trap_enabled && (a.is_nan() || b.is_nan()) {
                    let nan_operands = inst
                        .fp_arith_sources()
                        .into_iter()
                        .map(|reg| (reg, st.fp(reg)))
                        .filter(|(_, v)| v.is_nan())
                        .collect();
                    self.metrics.traps_raised += 1;
                    return Ok(StepOutcome::Trap(TrapContext {
                        site: pc,
                        function: self.program.function_of(pc).unwrap_or(0),
                        op,
                        nan_operands,
                        regs: RegSnapshot {
                            int_regs: st.int_regs,
                            fp_regs: st.fp_regs,
                        },
                    }));
                }
                st.set_fp(dst, Float64Bits::from_f64(op.apply(a.to_f64(), b.to_f64())));
            }
            Instruction::Fload { dst, addr } => {
                let v = self.mem.read_f64(addr.eval(&st.int_regs));
                st.set_fp(dst, v);
            }
            Instruction::Fstore { src, addr } => {
                self.mem.write_f64(addr.eval(&st.int_regs), st.fp(src));
            }
            Instruction::Fmov { dst, src } => {
                let v = st.fp(src);
                st.set_fp(dst, v);
            }
            Instruction::Fli { dst, bits } => st.set_fp(dst, Float64Bits(bits)),
            Instruction::Li { dst, imm } => st.int_regs[dst.index()] = imm as u64,
            Instruction::Add { dst, lhs, rhs } => {
                st.int_regs[dst.index()] =
                    st.int_regs[lhs.index()].wrapping_add(st.int_regs[rhs.index()])
            }
            Instruction::Addi { dst, src, imm } => {
                st.int_regs[dst.index()] = st.int_regs[src.index()].wrapping_add(imm as u64)
            }
            Instruction::Mul { dst, lhs, rhs } => {
                st.int_regs[dst.index()] =
                    st.int_regs[lhs.index()].wrapping_mul(st.int_regs[rhs.index()])
            }
            Instruction::Branch {
                cond,
                lhs,
                rhs,
                target,
            } => {
                if cond.holds(st.int_regs[lhs.index()], st.int_regs[rhs.index()]) {
                    next = target;
                }
            }
            Instruction::Jmp { target } => next = target,
            Instruction::Call { target } => {
                if st.return_stack.len() >= st.return_stack_limit {
                    return Err(VmError::ReturnStackOverflow(pc));
                }
                st.return_stack.push(pc + 1);
                next = target;
            }
            Instruction::Ret => {
                next = st
                    .return_stack
                    .pop()
                    .ok_or(VmError::ReturnStackUnderflow(pc))?;
            }
            Instruction::Halt => {
                st.halted = true;
                next = pc;
            }
        }

        self.oracle.record(&inst, &self.state.int_regs);
        self.state.pc = next;
        self.metrics.instructions_executed += 1;

        if let Some(flipper) = &mut self.flipper {
            if self
                .metrics
                .instructions_executed
                .is_multiple_of(flipper.model.epoch_len)
            {
                // Region presence was checked when the flipper was installed.
                if let Ok(n) = self.mem.apply_epoch_flips(&flipper.model, &mut flipper.rng) {
                    self.metrics.bit_flips += n;
                }
            }
        }

        Ok(if self.state.halted {
            StepOutcome::Halted
        } else {
            StepOutcome::Continue
        })
    }

    /// Steps until halt, abort, error, or `fuel` steps (trapping steps included).
    pub fn run(&mut self, handler: &mut dyn TrapHandler, fuel: u64) -> Result<RunExit, VmError> {
        for _ in 0..fuel {
            match self.step()? {
                StepOutcome::Continue => {}
                StepOutcome::Halted => return Ok(RunExit::Halted),
                StepOutcome::Trap(ctx) => {
                    let env = TrapEnv {
                        program: self.program,
                        state: &mut self.state,
                        mem: &mut self.mem,
                        metrics: &mut self.metrics,
                        oracle: &self.oracle,
                    };
                    if handler.on_trap(&ctx, env) == HandlerAction::Abort {
                        return Ok(RunExit::Aborted { site: ctx.site });
                    }
                }
            }
        }
        Err(VmError::FuelExhausted(fuel))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::isa::{f, r, Scale};

    const PAYLOAD_NAN: u64 = 0x7ff0464544434241;

    #[test]
    fn address_arithmetic() {
        let mut regs = [0u64; NUM_REGS];
        regs[2] = 0x1000;
        regs[3] = 5;
        assert_eq!(
            eval_address(&AddressExpr::indexed(r(2), r(3), Scale::Eight), &regs),
            0x1028
        );
        regs[10] = 0x555555767C20;
        assert_eq!(
            eval_address(&AddressExpr::base(r(10)), &regs),
            0x555555767C20
        );
        regs[1] = u64::MAX;
        assert_eq!(
            eval_address(&AddressExpr::base(r(1)).with_displacement(1), &regs),
            0
        );
        assert_eq!(
            eval_address(&AddressExpr::base(r(2)).with_displacement(-8), &regs),
            0x1000 - 8
        );
    }

    fn machine(p: &Program) -> Machine<'_> {
        Machine::new(p, MemoryImage::new())
    }

    #[test]
    fn nan_operand_traps_without_executing() {
        let p = assemble("fmul f0, f0, f1\nhalt").unwrap();
        let mut m = machine(&p);
        m.state.set_fp(f(0), Float64Bits::from_f64(3.0));
        m.state.set_fp(f(1), Float64Bits(PAYLOAD_NAN));
        let StepOutcome::Trap(ctx) = m.step().unwrap() else {
            panic!("expected trap")
        };
        assert_eq!(ctx.nan_operands, vec![(f(1), Float64Bits(PAYLOAD_NAN))]);
        assert_eq!(ctx.site, 0);
        assert_eq!(ctx.op, FpOp::Mul);
        assert_eq!(m.state.pc, 0);
        assert_eq!(m.state.fp(f(0)), Float64Bits::from_f64(3.0));
        assert_eq!(m.metrics.instructions_executed, 0);
        assert_eq!(m.metrics.traps_raised, 1);

        // Repaired operands let the same pc proceed.
        m.state.set_fp(f(1), Float64Bits::ZERO);
        assert_eq!(m.step().unwrap(), StepOutcome::Continue);
        assert_eq!(m.state.fp(f(0)), Float64Bits::ZERO);
    }

    #[test]
    fn plain_arithmetic() {
        let p = assemble("fadd f0, f1, f2\nhalt").unwrap();
        let mut m = machine(&p);
        m.state.set_fp(f(1), Float64Bits::from_f64(1.0));
        m.state.set_fp(f(2), Float64Bits::from_f64(2.0));
        assert_eq!(m.step().unwrap(), StepOutcome::Continue);
        assert_eq!(m.state.fp(f(0)).to_f64(), 3.0);
        assert_eq!(m.step().unwrap(), StepOutcome::Halted);
    }

    #[test]
    fn masked_trap_propagates() {
        let p = assemble("fmul f0, f0, f1\nhalt").unwrap();
        let mut m = machine(&p);
        m.set_trap_enabled(false);
        m.state.set_fp(f(1), Float64Bits(PAYLOAD_NAN));
        assert_eq!(m.step().unwrap(), StepOutcome::Continue);
        assert!(m.state.fp(f(0)).is_nan());
        assert_eq!(m.state.pc, 1);
    }

    #[test]
    fn both_operands_nan_listed_once_each() {
        let p = assemble("fadd f0, f1, f2\nfadd f3, f4, f4\nhalt").unwrap();
        let mut m = machine(&p);
        m.state.set_fp(f(1), Float64Bits(PAYLOAD_NAN));
        m.state.set_fp(f(2), Float64Bits(0x7ff8000000000000));
        m.state.set_fp(f(4), Float64Bits(PAYLOAD_NAN));
        let StepOutcome::Trap(ctx) = m.step().unwrap() else {
            panic!()
        };
        assert_eq!(ctx.nan_operands.len(), 2);
        m.state.set_fp(f(1), Float64Bits::ZERO);
        m.state.set_fp(f(2), Float64Bits::ZERO);
        m.step().unwrap();
        let StepOutcome::Trap(ctx) = m.step().unwrap() else {
            panic!()
        };
        assert_eq!(ctx.nan_operands, vec![(f(4), Float64Bits(PAYLOAD_NAN))]);
    }

    #[test]
    fn fresh_nan_and_moves_do_not_trap() {
        let p = assemble("fdiv f2, f0, f0\nfmov f3, f2\nfstore f3, [r0]\nfdiv f4, f1, f0\nhalt")
            .unwrap();
        let mut m = machine(&p);
        m.state.set_fp(f(1), Float64Bits::from_f64(1.0));
        assert_eq!(m.run(&mut IgnoreTraps, 100), Ok(RunExit::Halted));
        assert!(m.state.fp(f(2)).is_nan());
        assert!(m.mem.read_f64(0).is_nan());
        assert_eq!(m.state.fp(f(4)).to_f64(), f64::INFINITY);
        assert_eq!(m.metrics.traps_raised, 0);
    }

    #[test]
    fn run_counts_halt() {
        let p = assemble("fli f0, 1.0\nhalt").unwrap();
        let mut m = machine(&p);
        assert_eq!(m.run(&mut IgnoreTraps, 10), Ok(RunExit::Halted));
        assert_eq!(m.metrics.instructions_executed, 2);
        assert_eq!(m.metrics.traps_raised, 0);
    }

    #[test]
    fn unrepaired_trap_exhausts_fuel() {
        let p = assemble(&format!("fli f1, 0x{PAYLOAD_NAN:x}\nfmul f0, f0, f1\nhalt")).unwrap();
        let mut m = machine(&p);
        assert_eq!(m.run(&mut IgnoreTraps, 50), Err(VmError::FuelExhausted(50)));
        assert_eq!(m.metrics.traps_raised, 49);
    }

    #[test]
    fn zeroing_handler_resumes() {
        let p = assemble(&format!("fli f1, 0x{PAYLOAD_NAN:x}\nfmul f0, f0, f1\nhalt")).unwrap();
        let mut m = machine(&p);
        let mut handler = |ctx: &TrapContext, env: TrapEnv<'_>| {
            for (reg, _) in &ctx.nan_operands {
                env.state.set_fp(*reg, Float64Bits::ZERO);
            }
            HandlerAction::Resume
        };
        assert_eq!(m.run(&mut handler, 50), Ok(RunExit::Halted));
        assert_eq!(m.metrics.traps_raised, 1);
        assert_eq!(m.metrics.instructions_executed, 3);
    }

    #[test]
    fn abort_stops_run() {
        let p = assemble(&format!("fli f1, 0x{PAYLOAD_NAN:x}\nfmul f0, f0, f1\nhalt")).unwrap();
        let mut m = machine(&p);
        let mut handler = |_: &TrapContext, _: TrapEnv<'_>| HandlerAction::Abort;
        assert_eq!(m.run(&mut handler, 50), Ok(RunExit::Aborted { site: 1 }));
    }

    #[test]
    fn control_flow_and_errors() {
        let p = assemble("func main:\n li r1, 3\nloop:\n addi r2, r2, 1\n blt r2, r1, loop\n call sub\n halt\nfunc sub:\n mul r3, r2, r1\n ret").unwrap();
        let mut m = machine(&p);
        assert_eq!(m.run(&mut IgnoreTraps, 100), Ok(RunExit::Halted));
        assert_eq!(m.state.int_regs[2], 3);
        assert_eq!(m.state.int_regs[3], 9);

        let p = assemble("ret").unwrap();
        assert_eq!(machine(&p).step(), Err(VmError::ReturnStackUnderflow(0)));
        let p = assemble("li r0, 1").unwrap();
        let mut m = machine(&p);
        m.step().unwrap();
        assert_eq!(m.step(), Err(VmError::InvalidPc(1)));
        let p = assemble("func main:\n call main").unwrap();
        let mut m = machine(&p);
        m.state.return_stack_limit = 4;
        assert_eq!(
            m.run(&mut IgnoreTraps, 100),
            Err(VmError::ReturnStackOverflow(0))
        );
    }

    #[test]
    fn oracle_tracks_loads_and_moves() {
        let p = assemble("li r2, 0x100\nli r3, 2\nfload f1, [r2 + r3*8]\nfmov f4, f1\nfli f5, 1.0\nfadd f6, f4, f5\nhalt").unwrap();
        let mut m = machine(&p);
        m.run(&mut IgnoreTraps, 100).unwrap();
        assert_eq!(m.oracle().origin(f(1)), Origin::LoadedFrom(0x110));
        assert_eq!(m.oracle().origin(f(4)), Origin::LoadedFrom(0x110));
        assert_eq!(m.oracle().origin(f(5)), Origin::NotFromMemory);
        assert_eq!(m.oracle().origin(f(6)), Origin::NotFromMemory);
    }

    #[test]
    fn flips_require_region() {
        let p = assemble("halt").unwrap();
        let mut m = machine(&p);
        let model = BitFlipModel::new(0.1, 1, 0).unwrap();
        assert_eq!(m.set_bit_flips(model), Err(MemError::NoApproxRegion));
    }
}
