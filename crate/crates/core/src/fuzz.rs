//! Random program generation and the back-trace soundness fuzzer.
//!
//! Each generated program carries its own data directives, so assembling
//! its text form reproduces the exact initial memory. The fuzzer runs every
//! program under memory repair and checks, at every trap, that a `Found`
//! trace names the address the provenance oracle recorded.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::analyze;
use crate::asm::ProgramBuilder;
use crate::backtrace::{trace_origin, NotFoundReason, TraceResult};
use crate::isa::{f, r, AddressExpr, Cond, FpOp, FpReg, IntReg, Program, Scale};
use crate::mem::{Float64Bits, MemoryImage, Region};
use crate::repair::{RepairHandler, RepairMode, RepairPolicy};
use crate::vm::{eval_address, HandlerAction, Machine, Origin, TrapContext, TrapEnv};

pub const DATA_BASE: u64 = 0x4000;
const FP_REGS: u8 = 8;
const BASE_REGS: [u8; 2] = [1, 2];
const INDEX_REGS: [u8; 2] = [3, 4];
const CMP_REGS: [u8; 2] = [5, 6];
pub const FUZZ_FUEL: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenShape {
    /// Loads, move chains, clobbers, forward branches and calls.
    Mixed,
    /// Straight-line code whose arithmetic reads only loaded values and
    /// never rewrites an address register.
    StraightLineClean,
    /// Every load is indexed and its index register is rewritten right after.
    AlwaysClobber,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub shape: GenShape,
    pub min_statements: usize,
    pub max_statements: usize,
    pub max_helpers: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            shape: GenShape::Mixed,
            min_statements: 8,
            max_statements: 40,
            max_helpers: 2,
        }
    }
}

impl GenConfig {
    pub fn with_shape(shape: GenShape) -> Self {
        GenConfig {
            shape,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct FuzzCase {
    pub program: Program,
    pub memory: MemoryImage,
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    b: ProgramBuilder,
    shape: GenShape,
    cells: u64,
    /// Move-chain depth of registers that currently hold a loaded value.
    loaded: [Option<usize>; FP_REGS as usize],
    labels: usize,
    /// Open forward labels with the number of statements left before placement.
    pending: Vec<(String, usize)>,
}

impl Gen<'_> {
    fn fp(&mut self) -> FpReg {
        f(self.rng.random_range(0..FP_REGS))
    }

    fn pick(&mut self, set: &[u8]) -> IntReg {
        r(*set.choose(self.rng).expect("nonempty"))
    }

    fn cell_offset(&mut self) -> i64 {
        8 * self.rng.random_range(0..self.cells as i64 / 2)
    }

    fn address(&mut self, indexed: bool) -> AddressExpr {
        let base = self.pick(&BASE_REGS);
        let disp = self.cell_offset();
        if indexed {
            let index = self.pick(&INDEX_REGS);
            AddressExpr::indexed(base, index, Scale::Eight).with_displacement((disp / 2) & !7)
        } else {
            AddressExpr::base(base).with_displacement(disp)
        }
    }

    fn loaded_reg(&mut self) -> Option<FpReg> {
        let regs: Vec<u8> = (0..FP_REGS)
            .filter(|&i| self.loaded[i as usize].is_some())
            .collect();
        regs.choose(self.rng).map(|&i| f(i))
    }

    fn load(&mut self) {
        let dst = self.fp();
        let indexed = self.shape == GenShape::AlwaysClobber || self.rng.random_bool(0.5);
        let addr = self.address(indexed);
        self.b.fload(dst, addr);
        self.loaded[dst.index()] = Some(0);
        if self.shape == GenShape::AlwaysClobber {
            let index = addr.index.expect("indexed").0;
            let v = self.rng.random_range(0..self.cells as i64 / 2);
            self.b.li(index, v);
        }
    }

    fn mov(&mut self) {
        let dst = self.fp();
        let src = if self.shape == GenShape::Mixed {
            Some(self.fp())
        } else {
            self.loaded_reg()
        };
        let Some(src) = src else { return self.load() };
        let depth = self.loaded[src.index()];
        if self.shape != GenShape::Mixed
            && depth.is_some_and(|d| d >= crate::backtrace::MAX_MOV_CHAIN)
        {
            return self.load();
        }
        self.b.fmov(dst, src);
        self.loaded[dst.index()] = depth.map(|d| d + 1);
    }

    fn arith(&mut self) {
        let op = *[FpOp::Add, FpOp::Sub, FpOp::Mul, FpOp::Div]
            .choose(self.rng)
            .expect("nonempty");
        let (lhs, rhs) = if self.shape == GenShape::Mixed {
            (self.fp(), self.fp())
        } else {
            match (self.loaded_reg(), self.loaded_reg()) {
                (Some(a), Some(b)) => (a, b),
                _ => return self.load(),
            }
        };
        let dst = self.fp();
        self.b.fop(op, dst, lhs, rhs);
        self.loaded[dst.index()] = None;
    }

    fn clobber(&mut self) {
        let dst = if self.rng.random_bool(0.5) {
            self.pick(&INDEX_REGS)
        } else {
            self.pick(&BASE_REGS)
        };
        if BASE_REGS.contains(&(dst.index() as u8)) {
            let v = DATA_BASE as i64 + self.cell_offset();
            self.b.li(dst, v);
        } else if self.rng.random_bool(0.5) {
            let v = self.rng.random_range(0..self.cells as i64 / 2);
            self.b.li(dst, v);
        } else {
            let step = *[-1, 1].choose(self.rng).expect("nonempty");
            self.b.addi(dst, dst, step);
        }
    }

    fn fresh_label(&mut self) -> String {
        self.labels += 1;
        format!("L{}", self.labels)
    }

    fn forward_branch(&mut self) {
        let label = self.fresh_label();
        if self.rng.random_bool(0.2) {
            self.b.jmp(&label);
        } else {
            let cond = *[Cond::Eq, Cond::Ne, Cond::Lt]
                .choose(self.rng)
                .expect("nonempty");
            let (a, c) = (self.pick(&CMP_REGS), self.pick(&CMP_REGS));
            self.b.branch(cond, a, c, &label);
        }
        let ahead = self.rng.random_range(0..4);
        self.pending.push((label, ahead));
        // The fall-through path and the target may disagree on what is loaded.
        self.loaded = [None; FP_REGS as usize];
    }

    fn place_labels(&mut self, all: bool) {
        let mut keep = Vec::new();
        for (label, left) in std::mem::take(&mut self.pending) {
            if all || left == 0 {
                self.b.label(&label).expect("fresh label");
                self.loaded = [None; FP_REGS as usize];
            } else {
                keep.push((label, left - 1));
            }
        }
        self.pending = keep;
    }

    fn statement(&mut self, helpers: usize, in_helper: bool) {
        let mixed = self.shape == GenShape::Mixed;
        let roll = self.rng.random_range(0..100);
        match roll {
            0..=29 => self.load(),
            30..=44 => self.mov(),
            45..=69 => self.arith(),
            70..=74 if mixed => {
                let dst = self.fp();
                let v = 1.0 + self.rng.random::<f64>();
                self.b.fli(dst, v);
                self.loaded[dst.index()] = None;
            }
            75..=79 if mixed => {
                let src = self.fp();
                let indexed = self.rng.random_bool(0.5);
                let addr = self.address(indexed);
                self.b.fstore(src, addr);
            }
            80..=89 if mixed => self.clobber(),
            90..=95 if mixed => self.forward_branch(),
            96..=99 if mixed && helpers > 0 && !in_helper => {
                let h = self.rng.random_range(0..helpers);
                self.b.call(&format!("helper{h}"));
                self.loaded = [None; FP_REGS as usize];
            }
            _ => self.load(),
        }
        self.place_labels(false);
    }
}

/// Builds one random program (with embedded data) and its initial memory.
pub fn generate(seed: u64, cfg: &GenConfig) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = rng.random_range(16..=32u64);
    let mut values: Vec<u64> = (0..cells)
        .map(|_| Float64Bits::from_f64(1.0 + rng.random::<f64>()).0)
        .collect();
    for _ in 0..rng.random_range(1..=4) {
        let i = rng.random_range(0..cells as usize);
        // Quiet NaN with a few random payload bits.
        values[i] = 0x7ff8_0000_0000_0000 | rng.random_range(0..0x1_0000u64);
    }
    let helpers = if cfg.shape == GenShape::Mixed {
        rng.random_range(0..=cfg.max_helpers)
    } else {
        0
    };
    let statements = rng.random_range(cfg.min_statements..=cfg.max_statements);

    let mut g = Gen {
        rng: &mut rng,
        b: ProgramBuilder::new(),
        shape: cfg.shape,
        cells,
        loaded: [None; FP_REGS as usize],
        labels: 0,
        pending: Vec::new(),
    };
    g.b.data(DATA_BASE, values);
    g.b.function("main").expect("fresh label");
    for &base in &BASE_REGS {
        let v = DATA_BASE as i64 + g.cell_offset();
        g.b.li(r(base), v);
    }
    for &idx in &INDEX_REGS {
        let v = g.rng.random_range(0..cells as i64 / 2);
        g.b.li(r(idx), v);
    }
    for &c in &CMP_REGS {
        let v = g.rng.random_range(0..3);
        g.b.li(r(c), v);
    }
    for _ in 0..statements {
        g.statement(helpers, false);
    }
    if cfg.shape != GenShape::Mixed {
        // Guarantee at least one arithmetic site over loaded operands.
        g.load();
        g.arith();
    }
    g.place_labels(true);
    g.b.halt();
    for h in 0..helpers {
        g.b.function(&format!("helper{h}")).expect("fresh label");
        g.loaded = [None; FP_REGS as usize];
        for _ in 0..g.rng.random_range(1..=6) {
            g.statement(0, true);
        }
        g.place_labels(true);
        g.b.ret();
    }
    let program = g.b.finish().expect("generated program is well formed");
    let mut memory = MemoryImage::from_program(&program);
    memory.set_approx_region(Some(
        Region::new(DATA_BASE, 8 * cells).expect("nonempty data region"),
    ));
    FuzzCase { program, memory }
}

/// A trap operand whose trace disagrees with the oracle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub program: usize,
    pub seed: u64,
    pub site: usize,
    pub operand: FpReg,
    pub oracle: Origin,
    pub traced_address: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub programs: usize,
    pub traps: u64,
    pub trap_operands: u64,
    pub found: u64,
    /// Found fraction over NaN trap operands; 1.0 when nothing trapped.
    pub found_ratio: f64,
    pub breakdown: BTreeMap<NotFoundReason, u64>,
    pub static_sites: usize,
    pub static_found: usize,
    pub static_ratio: f64,
    /// Programs bucketed by static found ratio: `[0, 0.1)`, ..., `[0.9, 1.0]`.
    pub ratio_histogram: [usize; 10],
    /// Programs that did not halt within the fuel budget.
    pub unfinished: usize,
    pub violations: Vec<Violation>,
}

impl FuzzReport {
    pub fn is_sound(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio(found: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        found as f64 / total as f64
    }
}

/// Generates `count` programs from `seed`, runs each with memory repair and
/// checks every `Found` trace against the oracle.
pub fn fuzz_soundness(count: usize, seed: u64, cfg: &GenConfig) -> FuzzReport {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport {
        programs: count,
        traps: 0,
        trap_operands: 0,
        found: 0,
        found_ratio: 1.0,
        breakdown: NotFoundReason::ALL.iter().map(|r| (*r, 0)).collect(),
        static_sites: 0,
        static_found: 0,
        static_ratio: 1.0,
        ratio_histogram: [0; 10],
        unfinished: 0,
        violations: Vec::new(),
    };
    let policy = RepairPolicy::constant(1.0).expect("1.0 is not a NaN");
    for program_index in 0..count {
        let case_seed: u64 = seeds.random();
        let case = generate(case_seed, cfg);
        let analysis = analyze(&case.program);
        report.static_sites += analysis.total_sites;
        report.static_found += analysis.found;
        let bucket = ((analysis.ratio * 10.0) as usize).min(9);
        report.ratio_histogram[bucket] += 1;

        let mut repair = RepairHandler::new(RepairMode::RegisterAndMemory, policy);
        let mut check = |ctx: &TrapContext, env: TrapEnv<'_>| {
            report.traps += 1;
            for &(reg, _) in &ctx.nan_operands {
                report.trap_operands += 1;
                match trace_origin(env.program, ctx.site, reg) {
                    TraceResult::Found { expr, .. } => {
                        report.found += 1;
                        let traced_address = eval_address(&expr, &ctx.regs.int_regs);
                        let oracle = env.oracle.origin(reg);
                        if oracle != Origin::LoadedFrom(traced_address) {
                            report.violations.push(Violation {
                                program: program_index,
                                seed: case_seed,
                                site: ctx.site,
                                operand: reg,
                                oracle,
                                traced_address,
                            });
                        }
                    }
                    TraceResult::NotFound { reason } => {
                        *report.breakdown.entry(reason).or_default() += 1
                    }
                }
            }
            repair.handle(ctx, env);
            HandlerAction::Resume
        };
        let mut machine = Machine::new(&case.program, case.memory);
        if machine.run(&mut check, FUZZ_FUEL).is_err() {
            report.unfinished += 1;
        }
    }
    report.found_ratio = ratio(report.found, report.trap_operands);
    report.static_ratio = ratio(report.static_found as u64, report.static_sites as u64);
    report
}
