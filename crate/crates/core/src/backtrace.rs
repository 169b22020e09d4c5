//! Static backward trace from a faulting FP arithmetic operand to the load
//! that produced it.
//!
//! The walk only crosses straight-line code: any branch, jump, call or
//! return, and any instruction that is itself a branch target, ends it.
//! Register-to-register moves are followed up to [`MAX_MOV_CHAIN`] hops.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::isa::{AddressExpr, FpReg, Instruction, Program};

pub const MAX_MOV_CHAIN: usize = 8;

/// Why an operand's originating load could not be identified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotFoundReason {
    /// A control-flow instruction or branch target lies between writer and use.
    ControlFlow,
    /// The load's base or index register is rewritten before the use.
    RegisterClobbered,
    /// The most recent writer is arithmetic or an immediate.
    NotALoad,
    /// Function start reached without finding a writer.
    NoDefFound,
    /// The move chain is longer than [`MAX_MOV_CHAIN`].
    ChainTooDeep,
}

impl NotFoundReason {
    pub const ALL: [NotFoundReason; 5] = [
        NotFoundReason::ControlFlow,
        NotFoundReason::RegisterClobbered,
        NotFoundReason::NotALoad,
        NotFoundReason::NoDefFound,
        NotFoundReason::ChainTooDeep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NotFoundReason::ControlFlow => "control_flow",
            NotFoundReason::RegisterClobbered => "register_clobbered",
            NotFoundReason::NotALoad => "not_a_load",
            NotFoundReason::NoDefFound => "no_def_found",
            NotFoundReason::ChainTooDeep => "chain_too_deep",
        }
    }
}

impl fmt::Display for NotFoundReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TraceResult {
    Found {
        load_site: usize,
        expr: AddressExpr,
        hops: usize,
    },
    NotFound {
        reason: NotFoundReason,
    },
}

impl TraceResult {
    pub fn is_found(&self) -> bool {
        matches!(self, TraceResult::Found { .. })
    }

    pub fn reason(&self) -> Option<NotFoundReason> {
        match self {
            TraceResult::NotFound { reason } => Some(*reason),
            TraceResult::Found { .. } => None,
        }
    }
}

fn not_found(reason: NotFoundReason) -> TraceResult {
    TraceResult::NotFound { reason }
}

/// Finds the load that last defined `target` before the arithmetic
/// instruction at `site`.
///
/// Panics if `site` is out of range or not FP arithmetic.
pub fn trace_origin(program: &Program, site: usize, target: FpReg) -> TraceResult {
    let insts = program.instructions();
    assert!(
        insts.get(site).is_some_and(|i| i.opcode().is_fp_arith()),
        "trace site {site} is not an FP arithmetic instruction"
    );
    let func_start = program
        .function_of(site)
        .map_or(0, |fid| program.functions()[fid].start);

    let mut target = target;
    let mut hops = 0;
    let mut cur = site;
    loop {
        // Control can enter `cur` from elsewhere, so nothing above it is reliable.
        if program.is_branch_target(cur) {
            return not_found(NotFoundReason::ControlFlow);
        }
        if cur == func_start {
            return not_found(NotFoundReason::NoDefFound);
        }
        cur -= 1;
        let inst = &insts[cur];
        if inst.is_control_flow() {
            return not_found(NotFoundReason::ControlFlow);
        }
        if inst.fp_dest() != Some(target) {
            continue;
        }
        match *inst {
            Instruction::Fload { addr, .. } => {
                let clobbered = insts[cur + 1..site].iter().any(|between| {
                    between
                        .int_dest()
                        .is_some_and(|w| addr.registers().any(|reg| reg == w))
                });
                return if clobbered {
                    not_found(NotFoundReason::RegisterClobbered)
                } else {
                    TraceResult::Found {
                        load_site: cur,
                        expr: addr,
                        hops,
                    }
                };
            }
            Instruction::Fmov { src, .. } => {
                hops += 1;
                if hops > MAX_MOV_CHAIN {
                    return not_found(NotFoundReason::ChainTooDeep);
                }
                target = src;
            }
            _ => return not_found(NotFoundReason::NotALoad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::isa::{f, r, Scale};
    use crate::mem::{Float64Bits, MemoryImage};
    use crate::vm::{eval_address, Machine, Origin, StepOutcome};

    fn trace(src: &str, site: usize, reg: u8) -> TraceResult {
        trace_origin(&assemble(src).unwrap(), site, f(reg))
    }

    #[test]
    fn direct_load() {
        assert_eq!(
            trace("fload f1, [r2 + r3*8]\nfmul f0, f0, f1\nhalt", 1, 1),
            TraceResult::Found {
                load_site: 0,
                expr: AddressExpr::indexed(r(2), r(3), Scale::Eight),
                hops: 0
            }
        );
    }

    #[test]
    fn index_clobbered() {
        assert_eq!(
            trace(
                "fload f1, [r2 + r3*8]\naddi r3, r3, 1\nfmul f0, f0, f1\nhalt",
                2,
                1
            ),
            not_found(NotFoundReason::RegisterClobbered)
        );
        assert_eq!(
            trace(
                "fload f1, [r2 + r3*8]\nli r2, 0\nfmul f0, f0, f1\nhalt",
                2,
                1
            ),
            not_found(NotFoundReason::RegisterClobbered)
        );
        // Writes to unrelated registers are fine.
        assert!(trace(
            "fload f1, [r2 + r3*8]\nli r4, 0\nfmul f0, f0, f1\nhalt",
            2,
            1
        )
        .is_found());
    }

    #[test]
    fn conditional_branch_between() {
        assert_eq!(
            trace(
                "fload f1, [r2]\nbeq r0, r0, L\nL: fmul f0, f0, f1\nhalt",
                2,
                1
            ),
            not_found(NotFoundReason::ControlFlow)
        );
    }

    #[test]
    fn branch_target_between_is_a_barrier() {
        // No branch instruction between load and use, but `mid` is jumped to.
        let src = "func main:\n fload f1, [r2]\nmid:\n fli f5, 1.0\n fmul f0, f0, f1\n bne r0, r1, mid\n halt";
        assert_eq!(trace(src, 2, 1), not_found(NotFoundReason::ControlFlow));
        // A load that is itself a target is still found.
        let src = "func main:\ntop:\n fload f1, [r2]\n fmul f0, f0, f1\n bne r0, r1, top\n halt";
        assert!(trace(src, 1, 1).is_found());
    }

    #[test]
    fn move_chain() {
        assert_eq!(
            trace("fload f2, [r2]\nfmov f1, f2\nfmul f0, f0, f1\nhalt", 2, 1),
            TraceResult::Found {
                load_site: 0,
                expr: AddressExpr::base(r(2)),
                hops: 1
            }
        );
    }

    #[test]
    fn chain_limit() {
        let mut src = String::from("fload f0, [r1]\n");
        // Eight moves: f1<-f0, f2<-f1, ..., f8<-f7.
        for i in 1..=8 {
            src.push_str(&format!("fmov f{}, f{}\n", i, i - 1));
        }
        src.push_str("fadd f10, f8, f8\n");
        assert_eq!(
            trace(&src, 9, 8),
            TraceResult::Found {
                load_site: 0,
                expr: AddressExpr::base(r(1)),
                hops: 8
            }
        );
        let mut src = String::from("fload f0, [r1]\n");
        for i in 1..=9 {
            src.push_str(&format!("fmov f{}, f{}\n", i, i - 1));
        }
        src.push_str("fadd f10, f9, f9\n");
        assert_eq!(trace(&src, 10, 9), not_found(NotFoundReason::ChainTooDeep));
    }

    #[test]
    fn immediate_and_arith_writers() {
        assert_eq!(
            trace("fli f1, 1.0\nfadd f0, f0, f1\nhalt", 1, 1),
            not_found(NotFoundReason::NotALoad)
        );
        assert_eq!(
            trace("fli f1, 1.0\nfadd f0, f0, f1\nhalt", 1, 0),
            not_found(NotFoundReason::NoDefFound)
        );
        assert_eq!(
            trace(
                "fload f2, [r1]\nfmul f1, f2, f2\nfadd f0, f0, f1\nhalt",
                2,
                1
            ),
            not_found(NotFoundReason::NotALoad)
        );
    }

    #[test]
    fn calls_and_function_boundaries() {
        let src = "func main:\n fload f1, [r1]\n call g\n fmul f0, f0, f1\n halt\nfunc g:\n ret\nfunc h:\n fadd f0, f0, f1\n ret";
        let p = assemble(src).unwrap();
        assert_eq!(
            trace_origin(&p, 2, f(1)),
            not_found(NotFoundReason::ControlFlow)
        );
        // `h` starts right after `g`'s ret but the walk never leaves `h`.
        assert_eq!(
            trace_origin(&p, 5, f(1)),
            not_found(NotFoundReason::NoDefFound)
        );
    }

    #[test]
    fn found_agrees_with_runtime_origin() {
        let src = "li r2, 0x200\nli r3, 3\nfload f2, [r2 + r3*8 + 8]\nli r5, 9\nfmov f1, f2\nfmul f0, f0, f1\nhalt";
        let p = assemble(src).unwrap();
        let mut mem = MemoryImage::new();
        mem.inject_nan(0x200 + 32);
        let mut m = Machine::new(&p, mem);
        let ctx = loop {
            if let StepOutcome::Trap(ctx) = m.step().unwrap() {
                break ctx;
            }
        };
        let TraceResult::Found { expr, hops, .. } = trace_origin(&p, ctx.site, f(1)) else {
            panic!("expected found")
        };
        assert_eq!(hops, 1);
        let addr = eval_address(&expr, &ctx.regs.int_regs);
        assert_eq!(m.oracle().origin(f(1)), Origin::LoadedFrom(addr));
        assert!(m.mem.read_f64(addr).is_nan());
        assert_ne!(m.mem.read_f64(addr), Float64Bits::ZERO);
    }

    #[test]
    fn deterministic() {
        let p = assemble("fload f1, [r2]\nfmul f0, f0, f1").unwrap();
        assert_eq!(trace_origin(&p, 1, f(1)), trace_origin(&p, 1, f(1)));
    }
}
