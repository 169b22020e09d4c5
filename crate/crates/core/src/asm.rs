//! Two-pass textual assembler, programmatic builder and canonical formatter.
//!
//! Grammar, one statement per line, `;` starts a comment:
//!
//! ```text
//! func NAME:                  ; opens a function (NAME is also a label)
//! LABEL:                      ; may share a line with an instruction
//! .f64 ADDR: v1, v2, ...      ; data directive, ADDR decimal or 0x-hex
//! fadd fD, fA, fB             ; also fsub, fmul, fdiv
//! fload fD, [rB + rI*s + d]   ; memory forms: [rB] [rB + d] [rB + rI*s] [rB + rI*s + d]
//! fstore fS, [...]
//! fmov fD, fS
//! fli fD, 1.5                 ; decimal literal or 0x raw 64-bit pattern
//! li rD, -3
//! add rD, rA, rB | addi rD, rA, imm | mul rD, rA, rB
//! beq rA, rB, LABEL | bne ... | blt ...
//! jmp LABEL | call LABEL | ret | halt
//! ```
//!
//! Instructions that appear before any `func` line belong to an implicit
//! function named `main`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::isa::{
    AddressExpr, Cond, DataDirective, FpOp, FpReg, Function, Instruction, IntReg, Opcode, Program,
    Scale,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("bad register `{0}`")]
    BadRegister(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("`{mnemonic}` takes {expected} operand(s), found {found}")]
    BadOperandArity {
        mnemonic: String,
        expected: usize,
        found: usize,
    },
    #[error("malformed operand `{0}`")]
    BadOperand(String),
    #[error("malformed directive: {0}")]
    BadDirective(String),
    #[error("function `{0}` has no instructions")]
    EmptyFunction(String),
    #[error("label `{0}` does not point at an instruction")]
    LabelOutOfRange(String),
}

/// Assembly error with the 1-based source line it was detected on
/// (0 for programs built without source text).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

/// Incrementally constructs a [`Program`], resolving labels on [`finish`](Self::finish).
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    instructions: Vec<Instruction>,
    fixups: Vec<(usize, String, usize)>,
    functions: Vec<(String, usize, usize)>,
    labels: BTreeMap<String, (usize, usize)>,
    data: Vec<DataDirective>,
    line: usize,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Source line attached to subsequent errors.
    pub fn set_line(&mut self, line: usize) {
        self.line = line;
    }

    fn err(&self, kind: AsmErrorKind) -> AsmError {
        AsmError {
            line: self.line,
            kind,
        }
    }

    /// Opens a function starting at the next instruction and defines its label.
    pub fn function(&mut self, name: &str) -> Result<&mut Self, AsmError> {
        self.label(name)?;
        self.functions
            .push((name.to_string(), self.instructions.len(), self.line));
        Ok(self)
    }

    /// Defines `name` at the next instruction index.
    pub fn label(&mut self, name: &str) -> Result<&mut Self, AsmError> {
        if self.labels.contains_key(name) {
            return Err(self.err(AsmErrorKind::DuplicateLabel(name.to_string())));
        }
        self.labels
            .insert(name.to_string(), (self.instructions.len(), self.line));
        Ok(self)
    }

    /// Appends an instruction with no symbolic target.
    pub fn push(&mut self, inst: Instruction) -> &mut Self {
        self.instructions.push(inst);
        self
    }

    /// Appends a branch, jump or call whose target is resolved at finish time.
    pub fn push_to(&mut self, inst: Instruction, label: &str) -> &mut Self {
        debug_assert!(inst.target().is_some());
        self.fixups
            .push((self.instructions.len(), label.to_string(), self.line));
        self.instructions.push(inst);
        self
    }

    pub fn data(&mut self, address: u64, values: Vec<u64>) -> &mut Self {
        self.data.push(DataDirective { address, values });
        self
    }

    pub fn fop(&mut self, op: FpOp, dst: FpReg, lhs: FpReg, rhs: FpReg) -> &mut Self {
        self.push(Instruction::FArith { op, dst, lhs, rhs })
    }

    pub fn fload(&mut self, dst: FpReg, addr: AddressExpr) -> &mut Self {
        self.push(Instruction::Fload { dst, addr })
    }

    pub fn fstore(&mut self, src: FpReg, addr: AddressExpr) -> &mut Self {
        self.push(Instruction::Fstore { src, addr })
    }

    pub fn fmov(&mut self, dst: FpReg, src: FpReg) -> &mut Self {
        self.push(Instruction::Fmov { dst, src })
    }

    pub fn fli(&mut self, dst: FpReg, value: f64) -> &mut Self {
        self.push(Instruction::Fli {
            dst,
            bits: value.to_bits(),
        })
    }

    pub fn li(&mut self, dst: IntReg, imm: i64) -> &mut Self {
        self.push(Instruction::Li { dst, imm })
    }

    pub fn add(&mut self, dst: IntReg, lhs: IntReg, rhs: IntReg) -> &mut Self {
        self.push(Instruction::Add { dst, lhs, rhs })
    }

    pub fn addi(&mut self, dst: IntReg, src: IntReg, imm: i64) -> &mut Self {
        self.push(Instruction::Addi { dst, src, imm })
    }

    pub fn mul(&mut self, dst: IntReg, lhs: IntReg, rhs: IntReg) -> &mut Self {
        self.push(Instruction::Mul { dst, lhs, rhs })
    }

    pub fn branch(&mut self, cond: Cond, lhs: IntReg, rhs: IntReg, label: &str) -> &mut Self {
        self.push_to(
            Instruction::Branch {
                cond,
                lhs,
                rhs,
                target: 0,
            },
            label,
        )
    }

    pub fn jmp(&mut self, label: &str) -> &mut Self {
        self.push_to(Instruction::Jmp { target: 0 }, label)
    }

    pub fn call(&mut self, label: &str) -> &mut Self {
        self.push_to(Instruction::Call { target: 0 }, label)
    }

    pub fn ret(&mut self) -> &mut Self {
        self.push(Instruction::Ret)
    }

    pub fn halt(&mut self) -> &mut Self {
        self.push(Instruction::Halt)
    }

    /// Second pass: resolves targets and closes function ranges.
    pub fn finish(self) -> Result<Program, AsmError> {
        let ProgramBuilder {
            mut instructions,
            fixups,
            mut functions,
            mut labels,
            data,
            ..
        } = self;
        let len = instructions.len();

        // Instructions ahead of the first `func` form an implicit `main`.
        let first_start = functions.first().map_or(len, |(_, start, _)| *start);
        if first_start > 0 {
            if labels.contains_key("main") {
                let line = labels["main"].1;
                return Err(AsmError {
                    line,
                    kind: AsmErrorKind::DuplicateLabel("main".into()),
                });
            }
            labels.insert("main".into(), (0, 0));
            functions.insert(0, ("main".into(), 0, 0));
        }

        let mut ranges = Vec::with_capacity(functions.len());
        for (i, (name, start, line)) in functions.iter().enumerate() {
            let end = functions.get(i + 1).map_or(len, |next| next.1);
            if end == *start {
                return Err(AsmError {
                    line: *line,
                    kind: AsmErrorKind::EmptyFunction(name.clone()),
                });
            }
            ranges.push(Function {
                name: name.clone(),
                start: *start,
                end,
            });
        }

        let mut branch_targets = BTreeSet::new();
        for (at, label, line) in fixups {
            let &(target, _) = labels.get(&label).ok_or_else(|| AsmError {
                line,
                kind: AsmErrorKind::UndefinedLabel(label.clone()),
            })?;
            if target >= len {
                return Err(AsmError {
                    line,
                    kind: AsmErrorKind::LabelOutOfRange(label),
                });
            }
            *instructions[at].target_mut().expect("fixup on non-branch") = target;
            branch_targets.insert(target);
        }

        Ok(Program {
            functions: ranges,
            instructions,
            labels: labels.into_iter().map(|(k, (v, _))| (k, v)).collect(),
            branch_targets,
            data,
        })
    }
}

/// Assembles source text into a [`Program`].
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut builder = ProgramBuilder::new();
    for (lineno, raw) in source.lines().enumerate() {
        builder.set_line(lineno + 1);
        let line = raw.split(';').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        parse_line(&mut builder, line)?;
    }
    builder.finish()
}

fn parse_line(b: &mut ProgramBuilder, line: &str) -> Result<(), AsmError> {
    if let Some(rest) = line.strip_prefix(".f64") {
        return parse_data(b, rest);
    }
    if let Some(rest) = line.strip_prefix("func ") {
        let name = rest
            .trim()
            .strip_suffix(':')
            .map(str::trim)
            .filter(|n| is_ident(n))
            .ok_or_else(|| b.err(AsmErrorKind::BadDirective(format!("`{line}`"))))?;
        b.function(name)?;
        return Ok(());
    }

    let mut rest = line;
    // Leading `LABEL:` (possibly followed by an instruction).
    if let Some(colon) = rest.find(':') {
        let head = rest[..colon].trim();
        if is_ident(head) {
            b.label(head)?;
            rest = rest[colon + 1..].trim();
            if rest.is_empty() {
                return Ok(());
            }
        }
    }
    parse_instruction(b, rest)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_data(b: &mut ProgramBuilder, rest: &str) -> Result<(), AsmError> {
    let bad = |b: &ProgramBuilder, msg: &str| b.err(AsmErrorKind::BadDirective(msg.to_string()));
    let (addr, values) = rest
        .split_once(':')
        .ok_or_else(|| bad(b, "expected `.f64 ADDR: values`"))?;
    let address = parse_u64(addr.trim()).ok_or_else(|| bad(b, "bad address"))?;
    let values = values
        .split(',')
        .map(|v| {
            parse_f64_bits(v.trim()).ok_or_else(|| bad(b, &format!("bad value `{}`", v.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(bad(b, "no values"));
    }
    b.data(address, values);
    Ok(())
}

fn parse_u64(s: &str) -> Option<u64> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()
    } else {
        s.parse().ok()
    }
}

fn parse_i64(s: &str) -> Option<i64> {
    if s.starts_with("0x") || s.starts_with("0X") {
        parse_u64(s).map(|v| v as i64)
    } else {
        s.parse().ok()
    }
}

/// Accepts a decimal literal (including `inf`/`nan`) or a `0x` raw pattern.
fn parse_f64_bits(s: &str) -> Option<u64> {
    if s.starts_with("0x") || s.starts_with("0X") {
        parse_u64(s)
    } else if s.is_empty() {
        None
    } else {
        s.parse::<f64>().ok().map(f64::to_bits)
    }
}

fn split_operands(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    // Memory operands never contain commas, so a plain split is enough.
    s.split(',').map(str::trim).collect()
}

fn parse_instruction(b: &mut ProgramBuilder, text: &str) -> Result<(), AsmError> {
    let (mnemonic, operands) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], &text[i..]),
        None => (text, ""),
    };
    let lower = mnemonic.to_ascii_lowercase();
    let opcode = Opcode::from_mnemonic(&lower)
        .ok_or_else(|| b.err(AsmErrorKind::UnknownMnemonic(mnemonic.to_string())))?;
    let ops = split_operands(operands);
    if ops.len() != opcode.arity() {
        return Err(b.err(AsmErrorKind::BadOperandArity {
            mnemonic: lower,
            expected: opcode.arity(),
            found: ops.len(),
        }));
    }

    let ireg = |b: &ProgramBuilder, s: &str| {
        parse_reg(s, 'r')
            .and_then(IntReg::new)
            .ok_or_else(|| b.err(AsmErrorKind::BadRegister(s.to_string())))
    };
    let freg = |b: &ProgramBuilder, s: &str| {
        parse_reg(s, 'f')
            .and_then(FpReg::new)
            .ok_or_else(|| b.err(AsmErrorKind::BadRegister(s.to_string())))
    };
    let imm = |b: &ProgramBuilder, s: &str| {
        parse_i64(s).ok_or_else(|| b.err(AsmErrorKind::BadOperand(s.to_string())))
    };
    let label = |b: &ProgramBuilder, s: &str| {
        if is_ident(s) {
            Ok(s.to_string())
        } else {
            Err(b.err(AsmErrorKind::BadOperand(s.to_string())))
        }
    };

    match opcode {
        Opcode::Fadd | Opcode::Fsub | Opcode::Fmul | Opcode::Fdiv => {
            let op = match opcode {
                Opcode::Fadd => FpOp::Add,
                Opcode::Fsub => FpOp::Sub,
                Opcode::Fmul => FpOp::Mul,
                _ => FpOp::Div,
            };
            let (dst, lhs, rhs) = (freg(b, ops[0])?, freg(b, ops[1])?, freg(b, ops[2])?);
            b.fop(op, dst, lhs, rhs);
        }
        Opcode::Fload => {
            let dst = freg(b, ops[0])?;
            let addr = parse_address(b, ops[1])?;
            b.fload(dst, addr);
        }
        Opcode::Fstore => {
            let src = freg(b, ops[0])?;
            let addr = parse_address(b, ops[1])?;
            b.fstore(src, addr);
        }
        Opcode::Fmov => {
            let (dst, src) = (freg(b, ops[0])?, freg(b, ops[1])?);
            b.fmov(dst, src);
        }
        Opcode::Fli => {
            let dst = freg(b, ops[0])?;
            let bits = parse_f64_bits(ops[1])
                .ok_or_else(|| b.err(AsmErrorKind::BadOperand(ops[1].to_string())))?;
            b.push(Instruction::Fli { dst, bits });
        }
        Opcode::Li => {
            let (dst, v) = (ireg(b, ops[0])?, imm(b, ops[1])?);
            b.li(dst, v);
        }
        Opcode::Add | Opcode::Mul => {
            let (dst, lhs, rhs) = (ireg(b, ops[0])?, ireg(b, ops[1])?, ireg(b, ops[2])?);
            if opcode == Opcode::Add {
                b.add(dst, lhs, rhs);
            } else {
                b.mul(dst, lhs, rhs);
            }
        }
        Opcode::Addi => {
            let (dst, src, v) = (ireg(b, ops[0])?, ireg(b, ops[1])?, imm(b, ops[2])?);
            b.addi(dst, src, v);
        }
        Opcode::Beq | Opcode::Bne | Opcode::Blt => {
            let cond = match opcode {
                Opcode::Beq => Cond::Eq,
                Opcode::Bne => Cond::Ne,
                _ => Cond::Lt,
            };
            let (lhs, rhs, target) = (ireg(b, ops[0])?, ireg(b, ops[1])?, label(b, ops[2])?);
            b.branch(cond, lhs, rhs, &target);
        }
        Opcode::Jmp => {
            let target = label(b, ops[0])?;
            b.jmp(&target);
        }
        Opcode::Call => {
            let target = label(b, ops[0])?;
            b.call(&target);
        }
        Opcode::Ret => {
            b.ret();
        }
        Opcode::Halt => {
            b.halt();
        }
    }
    Ok(())
}

fn parse_reg(s: &str, prefix: char) -> Option<u8> {
    let digits = s.strip_prefix(prefix)?;
    if digits.is_empty() || digits.len() > 2 || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn parse_address(b: &ProgramBuilder, s: &str) -> Result<AddressExpr, AsmError> {
    let bad = || b.err(AsmErrorKind::BadOperand(s.to_string()));
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(bad)?;

    // Tokenize into signed terms: "r2 + r3*8 - 16" → [(+, r2), (+, r3*8), (-, 16)].
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut negative = false;
    let mut current = String::new();
    for c in inner.chars() {
        match c {
            '+' | '-' if !current.trim().is_empty() => {
                terms.push((negative, current.trim().to_string()));
                current.clear();
                negative = c == '-';
            }
            '-' => negative = !negative,
            '+' => {}
            c => current.push(c),
        }
    }
    if !current.trim().is_empty() {
        terms.push((negative, current.trim().to_string()));
    }

    let mut iter = terms.into_iter();
    let (neg, base) = iter.next().ok_or_else(bad)?;
    if neg {
        return Err(bad());
    }
    let base = parse_reg(&base, 'r')
        .and_then(IntReg::new)
        .ok_or_else(|| b.err(AsmErrorKind::BadRegister(base.clone())))?;
    let mut expr = AddressExpr::base(base);
    let mut seen_disp = false;
    for (neg, term) in iter {
        if seen_disp {
            return Err(bad());
        }
        if term.starts_with('r') && !neg && expr.index.is_none() {
            let (reg, scale) = match term.split_once('*') {
                Some((reg, scale)) => (reg.trim(), scale.trim()),
                None => (term.as_str(), "1"),
            };
            let reg = parse_reg(reg, 'r')
                .and_then(IntReg::new)
                .ok_or_else(|| b.err(AsmErrorKind::BadRegister(reg.to_string())))?;
            let scale = scale
                .parse::<u64>()
                .ok()
                .and_then(Scale::from_factor)
                .ok_or_else(bad)?;
            expr.index = Some((reg, scale));
        } else {
            let magnitude: i128 = term.parse().map_err(|_| bad())?;
            let d = if neg { -magnitude } else { magnitude };
            expr.displacement = i64::try_from(d).map_err(|_| bad())?;
            seen_disp = true;
        }
    }
    Ok(expr)
}

fn format_f64_bits(bits: u64) -> String {
    let v = f64::from_bits(bits);
    if v.is_finite() {
        format!("{v:?}")
    } else {
        format!("0x{bits:016x}")
    }
}

/// Formats one instruction; `name_of` maps a resolved target to a label.
pub fn format_instruction(inst: &Instruction, name_of: impl Fn(usize) -> String) -> String {
    let m = inst.opcode().mnemonic();
    match *inst {
        Instruction::FArith { dst, lhs, rhs, .. } => format!("{m} {dst}, {lhs}, {rhs}"),
        Instruction::Fload { dst, addr } => format!("{m} {dst}, {addr}"),
        Instruction::Fstore { src, addr } => format!("{m} {src}, {addr}"),
        Instruction::Fmov { dst, src } => format!("{m} {dst}, {src}"),
        Instruction::Fli { dst, bits } => format!("{m} {dst}, {}", format_f64_bits(bits)),
        Instruction::Li { dst, imm } => format!("{m} {dst}, {imm}"),
        Instruction::Add { dst, lhs, rhs } | Instruction::Mul { dst, lhs, rhs } => {
            format!("{m} {dst}, {lhs}, {rhs}")
        }
        Instruction::Addi { dst, src, imm } => format!("{m} {dst}, {src}, {imm}"),
        Instruction::Branch {
            lhs, rhs, target, ..
        } => format!("{m} {lhs}, {rhs}, {}", name_of(target)),
        Instruction::Jmp { target } | Instruction::Call { target } => {
            format!("{m} {}", name_of(target))
        }
        Instruction::Ret | Instruction::Halt => m.to_string(),
    }
}

/// Canonical text form; `assemble(&format_program(p)) == Ok(p)`.
pub fn format_program(p: &Program) -> String {
    let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &idx) in &p.labels {
        by_index.entry(idx).or_default().push(name);
    }
    let name_of = |target: usize| {
        by_index
            .get(&target)
            .and_then(|names| names.first())
            .map_or_else(|| format!("@{target}"), |n| n.to_string())
    };

    let mut out = String::new();
    for d in &p.data {
        let values: Vec<String> = d.values.iter().map(|&v| format_f64_bits(v)).collect();
        let _ = writeln!(out, ".f64 0x{:x}: {}", d.address, values.join(", "));
    }
    for func in &p.functions {
        let _ = writeln!(out, "func {}:", func.name);
        for idx in func.start..func.end {
            for name in by_index.get(&idx).into_iter().flatten() {
                if !(idx == func.start && *name == func.name) {
                    let _ = writeln!(out, "{name}:");
                }
            }
            let _ = writeln!(
                out,
                "    {}",
                format_instruction(&p.instructions[idx], name_of)
            );
        }
    }
    // Labels past the last instruction.
    for (idx, names) in by_index.range(p.instructions.len()..) {
        debug_assert!(*idx == p.instructions.len());
        for name in names {
            let _ = writeln!(out, "{name}:");
        }
    }
    out
}
