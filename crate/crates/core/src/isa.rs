//! The toy instruction set: registers, addressing, instructions and programs.
//!
//! Scalar binary64 floating point only. Integer and FP registers live in
//! two disjoint files of sixteen registers each.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of registers in each register file.
pub const NUM_REGS: usize = 16;

/// Integer register `r0`..`r15`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct IntReg(u8);

/// Floating-point register `f0`..`f15`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FpReg(u8);

macro_rules! register_impl {
    ($ty:ident, $prefix:literal) => {
        impl $ty {
            /// Returns `None` when `index` is outside `0..16`.
            pub const fn new(index: u8) -> Option<Self> {
                if (index as usize) < NUM_REGS {
                    Some(Self(index))
                } else {
                    None
                }
            }

            pub const fn index(self) -> usize {
                self.0 as usize
            }

            pub fn all() -> impl Iterator<Item = Self> {
                (0..NUM_REGS as u8).map(Self)
            }
        }

        impl TryFrom<u8> for $ty {
            type Error = String;

            fn try_from(index: u8) -> Result<Self, Self::Error> {
                Self::new(index).ok_or_else(|| format!("register index {index} out of range"))
            }
        }

        impl From<$ty> for u8 {
            fn from(r: $ty) -> u8 {
                r.0
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

register_impl!(IntReg, "r");
register_impl!(FpReg, "f");

/// Shorthand constructor for tests and builders. Panics on an out-of-range index.
pub fn r(index: u8) -> IntReg {
    IntReg::new(index).expect("integer register index out of range")
}

/// Shorthand constructor for tests and builders. Panics on an out-of-range index.
pub fn f(index: u8) -> FpReg {
    FpReg::new(index).expect("fp register index out of range")
}

/// Index scale factor of an effective address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scale {
    One,
    Two,
    Four,
    Eight,
}

impl Scale {
    pub const fn factor(self) -> u64 {
        match self {
            Scale::One => 1,
            Scale::Two => 2,
            Scale::Four => 4,
            Scale::Eight => 8,
        }
    }

    pub const fn from_factor(factor: u64) -> Option<Self> {
        match factor {
            1 => Some(Scale::One),
            2 => Some(Scale::Two),
            4 => Some(Scale::Four),
            8 => Some(Scale::Eight),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Scale {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Scale::from_factor(v as u64).ok_or_else(|| format!("invalid scale {v}"))
    }
}

impl From<Scale> for u8 {
    fn from(s: Scale) -> u8 {
        s.factor() as u8
    }
}

/// `base + index * scale + displacement`, the x86-style memory operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AddressExpr {
    pub base: IntReg,
    pub index: Option<(IntReg, Scale)>,
    pub displacement: i64,
}

impl AddressExpr {
    pub fn base(base: IntReg) -> Self {
        AddressExpr {
            base,
            index: None,
            displacement: 0,
        }
    }

    pub fn indexed(base: IntReg, index: IntReg, scale: Scale) -> Self {
        AddressExpr {
            base,
            index: Some((index, scale)),
            displacement: 0,
        }
    }

    pub fn with_displacement(mut self, displacement: i64) -> Self {
        self.displacement = displacement;
        self
    }

    /// Integer registers the address depends on.
    pub fn registers(&self) -> impl Iterator<Item = IntReg> {
        std::iter::once(self.base).chain(self.index.map(|(r, _)| r))
    }

    /// Wrapping 64-bit evaluation over an integer register file.
    pub fn eval(&self, int_regs: &[u64; NUM_REGS]) -> u64 {
        let mut addr = int_regs[self.base.index()];
        if let Some((index, scale)) = self.index {
            addr = addr.wrapping_add(int_regs[index.index()].wrapping_mul(scale.factor()));
        }
        addr.wrapping_add(self.displacement as u64)
    }
}

impl fmt::Display for AddressExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}", self.base)?;
        if let Some((index, scale)) = self.index {
            write!(f, " + {}*{}", index, scale.factor())?;
        }
        match self.displacement {
            0 => {}
            d if d < 0 => write!(f, " - {}", d.unsigned_abs())?,
            d => write!(f, " + {d}")?,
        }
        write!(f, "]")
    }
}

/// Floating-point arithmetic operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl FpOp {
    pub fn apply(self, lhs: f64, rhs: f64) -> f64 {
        match self {
            FpOp::Add => lhs + rhs,
            FpOp::Sub => lhs - rhs,
            FpOp::Mul => lhs * rhs,
            FpOp::Div => lhs / rhs,
        }
    }

    pub fn opcode(self) -> Opcode {
        match self {
            FpOp::Add => Opcode::Fadd,
            FpOp::Sub => Opcode::Fsub,
            FpOp::Mul => Opcode::Fmul,
            FpOp::Div => Opcode::Fdiv,
        }
    }
}

/// Integer comparison used by conditional branches. `Lt` is signed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cond {
    Eq,
    Ne,
    Lt,
}

impl Cond {
    pub fn holds(self, lhs: u64, rhs: u64) -> bool {
        match self {
            Cond::Eq => lhs == rhs,
            Cond::Ne => lhs != rhs,
            Cond::Lt => (lhs as i64) < (rhs as i64),
        }
    }

    pub fn opcode(self) -> Opcode {
        match self {
            Cond::Eq => Opcode::Beq,
            Cond::Ne => Opcode::Bne,
            Cond::Lt => Opcode::Blt,
        }
    }
}

/// Mnemonic-level identity of an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Fadd,
    Fsub,
    Fmul,
    Fdiv,
    Fload,
    Fstore,
    Fmov,
    Fli,
    Li,
    Add,
    Addi,
    Mul,
    Beq,
    Bne,
    Blt,
    Jmp,
    Call,
    Ret,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 19] = [
        Opcode::Fadd,
        Opcode::Fsub,
        Opcode::Fmul,
        Opcode::Fdiv,
        Opcode::Fload,
        Opcode::Fstore,
        Opcode::Fmov,
        Opcode::Fli,
        Opcode::Li,
        Opcode::Add,
        Opcode::Addi,
        Opcode::Mul,
        Opcode::Beq,
        Opcode::Bne,
        Opcode::Blt,
        Opcode::Jmp,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Halt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Fadd => "fadd",
            Opcode::Fsub => "fsub",
            Opcode::Fmul => "fmul",
            Opcode::Fdiv => "fdiv",
            Opcode::Fload => "fload",
            Opcode::Fstore => "fstore",
            Opcode::Fmov => "fmov",
            Opcode::Fli => "fli",
            Opcode::Li => "li",
            Opcode::Add => "add",
            Opcode::Addi => "addi",
            Opcode::Mul => "mul",
            Opcode::Beq => "beq",
            Opcode::Bne => "bne",
            Opcode::Blt => "blt",
            Opcode::Jmp => "jmp",
            Opcode::Call => "call",
            Opcode::Ret => "ret",
            Opcode::Halt => "halt",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Opcode::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    /// Number of comma-separated operands in assembly syntax.
    pub fn arity(self) -> usize {
        match self {
            Opcode::Fadd | Opcode::Fsub | Opcode::Fmul | Opcode::Fdiv => 3,
            Opcode::Add | Opcode::Addi | Opcode::Mul => 3,
            Opcode::Beq | Opcode::Bne | Opcode::Blt => 3,
            Opcode::Fload | Opcode::Fstore | Opcode::Fmov | Opcode::Fli | Opcode::Li => 2,
            Opcode::Jmp | Opcode::Call => 1,
            Opcode::Ret | Opcode::Halt => 0,
        }
    }

    pub fn is_fp_arith(self) -> bool {
        matches!(
            self,
            Opcode::Fadd | Opcode::Fsub | Opcode::Fmul | Opcode::Fdiv
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// One decoded instruction. Control-flow targets are resolved instruction indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    FArith {
        op: FpOp,
        dst: FpReg,
        lhs: FpReg,
        rhs: FpReg,
    },
    Fload {
        dst: FpReg,
        addr: AddressExpr,
    },
    Fstore {
        src: FpReg,
        addr: AddressExpr,
    },
    Fmov {
        dst: FpReg,
        src: FpReg,
    },
    /// Loads a raw binary64 pattern, so NaN payloads survive.
    Fli {
        dst: FpReg,
        bits: u64,
    },
    Li {
        dst: IntReg,
        imm: i64,
    },
    Add {
        dst: IntReg,
        lhs: IntReg,
        rhs: IntReg,
    },
    Addi {
        dst: IntReg,
        src: IntReg,
        imm: i64,
    },
    Mul {
        dst: IntReg,
        lhs: IntReg,
        rhs: IntReg,
    },
    Branch {
        cond: Cond,
        lhs: IntReg,
        rhs: IntReg,
        target: usize,
    },
    Jmp {
        target: usize,
    },
    Call {
        target: usize,
    },
    Ret,
    Halt,
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::FArith { op, .. } => op.opcode(),
            Instruction::Fload { .. } => Opcode::Fload,
            Instruction::Fstore { .. } => Opcode::Fstore,
            Instruction::Fmov { .. } => Opcode::Fmov,
            Instruction::Fli { .. } => Opcode::Fli,
            Instruction::Li { .. } => Opcode::Li,
            Instruction::Add { .. } => Opcode::Add,
            Instruction::Addi { .. } => Opcode::Addi,
            Instruction::Mul { .. } => Opcode::Mul,
            Instruction::Branch { cond, .. } => cond.opcode(),
            Instruction::Jmp { .. } => Opcode::Jmp,
            Instruction::Call { .. } => Opcode::Call,
            Instruction::Ret => Opcode::Ret,
            Instruction::Halt => Opcode::Halt,
        }
    }

    /// FP register written by this instruction, if any.
    pub fn fp_dest(&self) -> Option<FpReg> {
        match *self {
            Instruction::FArith { dst, .. }
            | Instruction::Fload { dst, .. }
            | Instruction::Fmov { dst, .. }
            | Instruction::Fli { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// Integer register written by this instruction, if any.
    pub fn int_dest(&self) -> Option<IntReg> {
        match *self {
            Instruction::Li { dst, .. }
            | Instruction::Add { dst, .. }
            | Instruction::Addi { dst, .. }
            | Instruction::Mul { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// Resolved control-flow target, if any.
    pub fn target(&self) -> Option<usize> {
        match *self {
            Instruction::Branch { target, .. }
            | Instruction::Jmp { target }
            | Instruction::Call { target } => Some(target),
            _ => None,
        }
    }

    pub(crate) fn target_mut(&mut self) -> Option<&mut usize> {
        match self {
            Instruction::Branch { target, .. }
            | Instruction::Jmp { target }
            | Instruction::Call { target } => Some(target),
            _ => None,
        }
    }

    /// Branches, jumps, calls and returns.
    pub fn is_control_flow(&self) -> bool {
        matches!(
            self,
            Instruction::Branch { .. }
                | Instruction::Jmp { .. }
                | Instruction::Call { .. }
                | Instruction::Ret
        )
    }

    /// Distinct FP source registers of an arithmetic instruction, in operand order.
    pub fn fp_arith_sources(&self) -> Vec<FpReg> {
        match *self {
            Instruction::FArith { lhs, rhs, .. } if lhs == rhs => vec![lhs],
            Instruction::FArith { lhs, rhs, .. } => vec![lhs, rhs],
            _ => Vec::new(),
        }
    }
}

/// A named, contiguous, nonempty range of instructions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Function {
    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }
}

/// `.f64` directive: consecutive binary64 patterns starting at `address`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataDirective {
    pub address: u64,
    pub values: Vec<u64>,
}

/// An assembled program.
///
/// Construct through [`crate::asm::assemble`] or [`crate::asm::ProgramBuilder`];
/// both guarantee that every target resolves, function ranges partition the
/// instruction list, and `branch_targets` is exactly the set of resolved
/// targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub(crate) functions: Vec<Function>,
    pub(crate) instructions: Vec<Instruction>,
    pub(crate) labels: BTreeMap<String, usize>,
    pub(crate) branch_targets: BTreeSet<usize>,
    pub(crate) data: Vec<DataDirective>,
}

impl Program {
    pub fn functions(&self) -> &[Function] {
        &self.functions
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn labels(&self) -> &BTreeMap<String, usize> {
        &self.labels
    }

    pub fn branch_targets(&self) -> &BTreeSet<usize> {
        &self.branch_targets
    }

    pub fn data(&self) -> &[DataDirective] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Instruction> {
        self.instructions.get(index)
    }

    /// Index of the function containing instruction `index`.
    pub fn function_of(&self, index: usize) -> Option<usize> {
        let pos = self.functions.partition_point(|func| func.end <= index);
        self.functions
            .get(pos)
            .filter(|func| func.contains(index))
            .map(|_| pos)
    }

    pub fn is_branch_target(&self, index: usize) -> bool {
        self.branch_targets.contains(&index)
    }

    /// Indices of every FP arithmetic instruction.
    pub fn fp_arith_sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.instructions
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.opcode().is_fp_arith())
            .map(|(i, _)| i)
    }

    /// Entry point: the function named `main`, else the first function.
    pub fn entry(&self) -> usize {
        self.functions
            .iter()
            .find(|func| func.name == "main")
            .or_else(|| self.functions.first())
            .map_or(0, |func| func.start)
    }
}
