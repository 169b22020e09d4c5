//! Numerical kernels emitted as toy-ISA programs, with reference results.
//!
//! Every kernel reloads each FP operand from memory right before its
//! arithmetic use and keeps partial sums in memory, the way unoptimized
//! compiler output does. Nothing is cached in registers across iterations,
//! so a corrupted element is reloaded every time the source code reads it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::asm::{AsmError, ProgramBuilder};
use crate::isa::f as freg;
use crate::isa::{AddressExpr, Cond, FpOp, IntReg, Program, Scale};
use crate::mem::{unit_interval_1_2, Float64Bits, MemoryImage, Region};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// `C = A * B`, i-j-k order.
    #[serde(rename = "matmul")]
    MatMul,
    /// `y = A * x`.
    #[serde(rename = "matvec")]
    MatVec,
    /// Determinant through in-place LU without pivoting.
    DetLu,
    /// Fixed number of Jacobi sweeps on `A x = b`.
    Jacobi,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 4] = [
        WorkloadKind::MatMul,
        WorkloadKind::MatVec,
        WorkloadKind::DetLu,
        WorkloadKind::Jacobi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::MatMul => "matmul",
            WorkloadKind::MatVec => "matvec",
            WorkloadKind::DetLu => "det_lu",
            WorkloadKind::Jacobi => "jacobi",
        }
    }
}

/// Names the arrays of a workload.
///
/// | kind   | `A`        | `B`       | `Out`        |
/// |--------|------------|-----------|--------------|
/// | MatMul | A (n×n)    | B (n×n)   | C (n×n)      |
/// | MatVec | A (n×n)    | x (n)     | y (n)        |
/// | DetLu  | A (n×n)    | unused    | det (1)      |
/// | Jacobi | A (n×n)    | b (n)     | x iterate (n)|
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixId {
    A,
    B,
    Out,
}

/// Base addresses of the workload arrays plus a scratch area for spilled
/// temporaries. `a`, `b` and `out` form the approximate region; `scratch`
/// stays outside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub a: u64,
    pub b: u64,
    pub out: u64,
    pub scratch: u64,
}

impl Layout {
    /// Arrays packed back to back from `0x10000`, scratch at `0x0100_0000`.
    pub fn packed(kind: WorkloadKind, n: usize) -> Layout {
        let base = 0x1_0000u64;
        let (_, a_len) = shape(kind, MatrixId::A, n);
        let (_, b_len) = shape(kind, MatrixId::B, n);
        let a = base;
        let b = a + 8 * a_len.max(1) as u64;
        let out = b + 8 * b_len.max(1) as u64;
        Layout {
            a,
            b,
            out,
            scratch: 0x0100_0000,
        }
    }
}

/// (rows, total elements) of an array.
fn shape(kind: WorkloadKind, id: MatrixId, n: usize) -> (usize, usize) {
    match (kind, id) {
        (_, MatrixId::A) => (n, n * n),
        (WorkloadKind::MatMul, _) => (n, n * n),
        (WorkloadKind::DetLu, MatrixId::B) => (0, 0),
        (WorkloadKind::DetLu, MatrixId::Out) => (1, 1),
        (_, _) => (1, n),
    }
}

fn default_sweeps() -> usize {
    DEFAULT_JACOBI_SWEEPS
}

pub const DEFAULT_JACOBI_SWEEPS: usize = 40;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub layout: Option<Layout>,
    /// Jacobi sweep count; ignored by the other kernels.
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, n: usize, seed: u64) -> Self {
        WorkloadSpec {
            kind,
            n,
            seed,
            layout: None,
            sweeps: DEFAULT_JACOBI_SWEEPS,
        }
    }

    pub fn with_sweeps(mut self, sweeps: usize) -> Self {
        self.sweeps = sweeps;
        self
    }

    pub fn layout(&self) -> Layout {
        self.layout
            .unwrap_or_else(|| Layout::packed(self.kind, self.n))
    }

    /// Memory range occupied by an array (None for DetLu's unused `B`).
    pub fn region(&self, id: MatrixId) -> Option<Region> {
        let (_, len) = shape(self.kind, id, self.n);
        let layout = self.layout();
        let base = match id {
            MatrixId::A => layout.a,
            MatrixId::B => layout.b,
            MatrixId::Out => layout.out,
        };
        Region::new(base, 8 * len as u64).ok()
    }

    /// Rows and columns of an array, viewing vectors as `1 × n`.
    pub fn dims(&self, id: MatrixId) -> (usize, usize) {
        match shape(self.kind, id, self.n) {
            (0, _) => (0, 0),
            (1, len) => (1, len),
            (rows, len) => (rows, len / rows),
        }
    }

    /// Bytes reserved in scratch for spilled temporaries.
    fn scratch_len(&self) -> u64 {
        match self.kind {
            WorkloadKind::Jacobi => 16 + 8 * self.n as u64,
            _ => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("dimension {0} is below 2")]
    BadDimension(usize),
    #[error("regions overlap: {0}")]
    RegionOverlap(String),
    #[error("region {0} is not 8-byte aligned")]
    Misaligned(String),
    #[error("element ({row}, {col}) outside {id:?}")]
    OutOfBounds {
        id: MatrixId,
        row: usize,
        col: usize,
    },
    #[error("input length mismatch for {0:?}")]
    BadInputs(MatrixId),
    #[error("jacobi needs at least one sweep")]
    BadSweeps,
    #[error(transparent)]
    Asm(#[from] AsmError),
}

/// Raw input arrays, row-major. `x0` is the Jacobi starting iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadInputs {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub x0: Vec<f64>,
}

impl WorkloadInputs {
    /// Seeded inputs in `[1, 2)`. Matrices that must be diagonally dominant
    /// (DetLu, Jacobi) get `4n` added to their diagonal.
    pub fn generate(spec: &WorkloadSpec) -> Self {
        let n = spec.n;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut draw = |len: usize| {
            (0..len)
                .map(|_| unit_interval_1_2(&mut rng))
                .collect::<Vec<_>>()
        };
        let mut a = draw(n * n);
        if matches!(spec.kind, WorkloadKind::DetLu | WorkloadKind::Jacobi) {
            for i in 0..n {
                a[i * n + i] += 4.0 * n as f64;
            }
        }
        let b = match spec.kind {
            WorkloadKind::MatMul => draw(n * n),
            WorkloadKind::MatVec | WorkloadKind::Jacobi => draw(n),
            WorkloadKind::DetLu => Vec::new(),
        };
        let x0 = match spec.kind {
            WorkloadKind::Jacobi => draw(n),
            _ => Vec::new(),
        };
        WorkloadInputs { a, b, x0 }
    }
}

/// Expected result computed outside the VM over the same inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenSpec {
    pub values: Vec<f64>,
    pub inputs: WorkloadInputs,
}

#[derive(Clone, Debug)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub program: Program,
    pub memory: MemoryImage,
    pub golden: GoldenSpec,
}

impl Workload {
    pub fn result_region(&self) -> Region {
        self.spec
            .region(MatrixId::Out)
            .expect("every kernel has an output")
    }

    /// Output values read back from a memory image.
    pub fn read_result(&self, mem: &MemoryImage) -> Vec<f64> {
        let region = self.result_region();
        (0..region.len / 8)
            .map(|i| mem.read_f64(region.start + 8 * i).to_f64())
            .collect()
    }
}

pub fn build(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    build_with(spec, WorkloadInputs::generate(spec))
}

/// Builds with caller-supplied inputs.
pub fn build_with(spec: &WorkloadSpec, inputs: WorkloadInputs) -> Result<Workload, WorkloadError> {
    validate(spec)?;
    let n = spec.n;
    let (a_len, b_len) = (
        shape(spec.kind, MatrixId::A, n).1,
        shape(spec.kind, MatrixId::B, n).1,
    );
    if inputs.a.len() != a_len {
        return Err(WorkloadError::BadInputs(MatrixId::A));
    }
    if inputs.b.len() != b_len {
        return Err(WorkloadError::BadInputs(MatrixId::B));
    }
    let x0_len = if spec.kind == WorkloadKind::Jacobi {
        n
    } else {
        0
    };
    if inputs.x0.len() != x0_len {
        return Err(WorkloadError::BadInputs(MatrixId::Out));
    }

    let layout = spec.layout();
    let mut memory = MemoryImage::new();
    let store = |mem: &mut MemoryImage, base: u64, values: &[f64]| {
        for (i, v) in values.iter().enumerate() {
            mem.write_f64(base + 8 * i as u64, Float64Bits::from_f64(*v));
        }
    };
    store(&mut memory, layout.a, &inputs.a);
    store(&mut memory, layout.b, &inputs.b);
    store(&mut memory, layout.out, &inputs.x0);
    memory.set_approx_region(Some(approx_span(spec)));

    let program = match spec.kind {
        WorkloadKind::MatMul => emit_matmul(n, &layout),
        WorkloadKind::MatVec => emit_matvec(n, &layout),
        WorkloadKind::DetLu => emit_det_lu(n, &layout),
        WorkloadKind::Jacobi => emit_jacobi(n, spec.sweeps, &layout),
    }?;
    let values = reference(spec, &inputs);
    Ok(Workload {
        spec: spec.clone(),
        program,
        memory,
        golden: GoldenSpec { values, inputs },
    })
}

fn used_regions(spec: &WorkloadSpec) -> Vec<(&'static str, Region)> {
    let mut out = Vec::new();
    for (name, id) in [
        ("a", MatrixId::A),
        ("b", MatrixId::B),
        ("out", MatrixId::Out),
    ] {
        if let Some(region) = spec.region(id) {
            out.push((name, region));
        }
    }
    out
}

fn approx_span(spec: &WorkloadSpec) -> Region {
    let regions = used_regions(spec);
    let start = regions.iter().map(|(_, r)| r.start).min().unwrap();
    let last = regions.iter().map(|(_, r)| r.last()).max().unwrap();
    Region::new(start, last - start + 1).unwrap()
}

fn validate(spec: &WorkloadSpec) -> Result<(), WorkloadError> {
    if spec.n < 2 {
        return Err(WorkloadError::BadDimension(spec.n));
    }
    if spec.kind == WorkloadKind::Jacobi && spec.sweeps == 0 {
        return Err(WorkloadError::BadSweeps);
    }
    let layout = spec.layout();
    let mut regions = Vec::new();
    for (name, id) in [
        ("a", MatrixId::A),
        ("b", MatrixId::B),
        ("out", MatrixId::Out),
    ] {
        let (_, len) = shape(spec.kind, id, spec.n);
        if len == 0 {
            continue;
        }
        let base = match id {
            MatrixId::A => layout.a,
            MatrixId::B => layout.b,
            MatrixId::Out => layout.out,
        };
        let region = Region::new(base, 8 * len as u64)
            .map_err(|_| WorkloadError::RegionOverlap(format!("{name} wraps the address space")))?;
        regions.push((name, region));
    }
    if !layout.scratch.is_multiple_of(8) {
        return Err(WorkloadError::Misaligned("scratch".into()));
    }
    for (name, region) in &regions {
        if region.start % 8 != 0 {
            return Err(WorkloadError::Misaligned(name.to_string()));
        }
    }
    for (i, (na, ra)) in regions.iter().enumerate() {
        for (nb, rb) in &regions[i + 1..] {
            if ra.overlaps(rb) {
                return Err(WorkloadError::RegionOverlap(format!("{na} and {nb}")));
            }
        }
    }
    let scratch = Region::new(layout.scratch, spec.scratch_len())
        .map_err(|_| WorkloadError::RegionOverlap("scratch wraps the address space".into()))?;
    let span = {
        let start = regions.iter().map(|(_, r)| r.start).min().unwrap();
        let last = regions.iter().map(|(_, r)| r.last()).max().unwrap();
        Region::new(start, last - start + 1).unwrap()
    };
    if scratch.overlaps(&span) {
        return Err(WorkloadError::RegionOverlap(
            "scratch and approximate region".into(),
        ));
    }
    Ok(())
}

/// The same IEEE operation sequence the emitted programs perform.
pub fn reference(spec: &WorkloadSpec, inputs: &WorkloadInputs) -> Vec<f64> {
    let n = spec.n;
    let a = &inputs.a;
    match spec.kind {
        WorkloadKind::MatMul => {
            let mut c = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        c[i * n + j] += a[i * n + k] * inputs.b[k * n + j];
                    }
                }
            }
            c
        }
        WorkloadKind::MatVec => (0..n)
            .map(|i| (0..n).fold(0.0, |acc, k| acc + a[i * n + k] * inputs.b[k]))
            .collect(),
        WorkloadKind::DetLu => vec![reference_det_lu(n, a.clone())],
        WorkloadKind::Jacobi => reference_jacobi(n, a, &inputs.b, &inputs.x0, spec.sweeps),
    }
}

fn reference_det_lu(n: usize, mut a: Vec<f64>) -> f64 {
    for k in 0..n {
        for i in k + 1..n {
            let l = a[i * n + k] / a[k * n + k];
            a[i * n + k] = l;
            for j in k + 1..n {
                a[i * n + j] -= l * a[k * n + j];
            }
        }
    }
    (0..n).fold(1.0, |det, k| det * a[k * n + k])
}

/// `sweeps` Jacobi iterations from `x0`.
pub fn reference_jacobi(n: usize, a: &[f64], b: &[f64], x0: &[f64], sweeps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut next = vec![0.0; n];
    for _ in 0..sweeps {
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..n {
                if j != i {
                    acc -= a[i * n + j] * x[j];
                }
            }
            next[i] = acc / a[i * n + i];
        }
        x.copy_from_slice(&next);
    }
    x
}

/// `max_i |(A x - b)_i|`.
pub fn residual(n: usize, a: &[f64], b: &[f64], x: &[f64]) -> f64 {
    (0..n)
        .map(|i| {
            let ax: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum();
            (ax - b[i]).abs()
        })
        .fold(0.0, |m, v| {
            if v.is_nan() || m.is_nan() {
                f64::NAN
            } else {
                m.max(v)
            }
        })
}

/// Address of an array element, checking bounds.
pub fn element_address(
    spec: &WorkloadSpec,
    id: MatrixId,
    row: usize,
    col: usize,
) -> Result<u64, WorkloadError> {
    let (rows, cols) = spec.dims(id);
    if row >= rows || col >= cols {
        return Err(WorkloadError::OutOfBounds { id, row, col });
    }
    let region = spec.region(id).expect("nonempty array has a region");
    Ok(region.start + 8 * (row * cols + col) as u64)
}

/// Forces one element of a workload array to NaN.
pub fn inject_into(
    spec: &WorkloadSpec,
    mem: &mut MemoryImage,
    id: MatrixId,
    row: usize,
    col: usize,
) -> Result<u64, WorkloadError> {
    let addr = element_address(spec, id, row, col)?;
    mem.inject_nan(addr);
    Ok(addr)
}

// Register conventions shared by the emitters.
const A_BASE: IntReg = reg(1);
const B_BASE: IntReg = reg(2);
const OUT_BASE: IntReg = reg(3);
const N: IntReg = reg(4);
const I: IntReg = reg(5);
const J: IntReg = reg(6);
const K: IntReg = reg(7);
const SCRATCH: IntReg = reg(8);
const IDX0: IntReg = reg(9);
const IDX1: IntReg = reg(10);
const IDX2: IntReg = reg(11);
const NEXT_BASE: IntReg = reg(13);
const SWEEPS: IntReg = reg(14);
const SWEEP: IntReg = reg(15);

const fn reg(i: u8) -> IntReg {
    match IntReg::new(i) {
        Some(r) => r,
        None => panic!("register out of range"),
    }
}

fn at(base: IntReg, index: IntReg) -> AddressExpr {
    AddressExpr::indexed(base, index, Scale::Eight)
}

fn tmp() -> AddressExpr {
    AddressExpr::base(SCRATCH)
}

fn acc() -> AddressExpr {
    AddressExpr::base(SCRATCH).with_displacement(8)
}

/// `dst = row * n + col`.
fn linear(b: &mut ProgramBuilder, dst: IntReg, row: IntReg, col: IntReg) {
    b.mul(dst, row, N).add(dst, dst, col);
}

fn prologue(b: &mut ProgramBuilder, n: usize, layout: &Layout) -> Result<(), AsmError> {
    b.function("main")?;
    b.li(A_BASE, layout.a as i64)
        .li(B_BASE, layout.b as i64)
        .li(OUT_BASE, layout.out as i64)
        .li(SCRATCH, layout.scratch as i64)
        .li(N, n as i64);
    Ok(())
}

/// `mem[dst] = mem[dst] <op> (mem[lhs] * mem[rhs])` with the product spilled to scratch.
fn fused_update(
    b: &mut ProgramBuilder,
    op: FpOp,
    dst: AddressExpr,
    lhs: AddressExpr,
    rhs: AddressExpr,
) {
    b.fload(freg(1), lhs)
        .fload(freg(2), rhs)
        .fop(FpOp::Mul, freg(3), freg(1), freg(2))
        .fstore(freg(3), tmp())
        .fload(freg(4), dst)
        .fload(freg(5), tmp())
        .fop(op, freg(6), freg(4), freg(5))
        .fstore(freg(6), dst);
}

fn emit_matmul(n: usize, layout: &Layout) -> Result<Program, AsmError> {
    let mut b = ProgramBuilder::new();
    prologue(&mut b, n, layout)?;
    b.li(I, 0);
    b.label("loop_i")?;
    b.li(J, 0);
    b.label("loop_j")?;
    b.li(K, 0);
    b.label("loop_k")?;
    linear(&mut b, IDX0, I, K);
    linear(&mut b, IDX1, K, J);
    linear(&mut b, IDX2, I, J);
    fused_update(
        &mut b,
        FpOp::Add,
        at(OUT_BASE, IDX2),
        at(A_BASE, IDX0),
        at(B_BASE, IDX1),
    );
    b.addi(K, K, 1).branch(Cond::Lt, K, N, "loop_k");
    b.addi(J, J, 1).branch(Cond::Lt, J, N, "loop_j");
    b.addi(I, I, 1).branch(Cond::Lt, I, N, "loop_i");
    b.halt();
    b.finish()
}

fn emit_matvec(n: usize, layout: &Layout) -> Result<Program, AsmError> {
    let mut b = ProgramBuilder::new();
    prologue(&mut b, n, layout)?;
    b.li(I, 0);
    b.label("loop_i")?;
    b.li(K, 0);
    b.label("loop_k")?;
    linear(&mut b, IDX0, I, K);
    fused_update(
        &mut b,
        FpOp::Add,
        at(OUT_BASE, I),
        at(A_BASE, IDX0),
        at(B_BASE, K),
    );
    b.addi(K, K, 1).branch(Cond::Lt, K, N, "loop_k");
    b.addi(I, I, 1).branch(Cond::Lt, I, N, "loop_i");
    b.halt();
    b.finish()
}

fn emit_det_lu(n: usize, layout: &Layout) -> Result<Program, AsmError> {
    let mut b = ProgramBuilder::new();
    prologue(&mut b, n, layout)?;
    b.li(K, 0);
    b.label("lu_k")?;
    b.addi(I, K, 1);
    b.label("lu_i")?;
    b.branch(Cond::Lt, I, N, "lu_i_body").jmp("lu_k_next");
    b.label("lu_i_body")?;
    // l = a[i][k] / a[k][k], stored in place.
    linear(&mut b, IDX0, I, K);
    linear(&mut b, IDX1, K, K);
    b.fload(freg(1), at(A_BASE, IDX0))
        .fload(freg(2), at(A_BASE, IDX1))
        .fop(FpOp::Div, freg(3), freg(1), freg(2))
        .fstore(freg(3), at(A_BASE, IDX0));
    b.addi(J, K, 1);
    b.label("lu_j")?;
    b.branch(Cond::Lt, J, N, "lu_j_body").jmp("lu_i_next");
    b.label("lu_j_body")?;
    // a[i][j] -= l * a[k][j]
    linear(&mut b, IDX0, I, K);
    linear(&mut b, IDX1, K, J);
    linear(&mut b, IDX2, I, J);
    fused_update(
        &mut b,
        FpOp::Sub,
        at(A_BASE, IDX2),
        at(A_BASE, IDX0),
        at(A_BASE, IDX1),
    );
    b.addi(J, J, 1).jmp("lu_j");
    b.label("lu_i_next")?;
    b.addi(I, I, 1).jmp("lu_i");
    b.label("lu_k_next")?;
    b.addi(K, K, 1).branch(Cond::Lt, K, N, "lu_k");

    // det = 1 * u00 * u11 * ...
    let det = AddressExpr::base(OUT_BASE);
    b.fli(freg(0), 1.0).fstore(freg(0), det).li(K, 0);
    b.label("det_k")?;
    linear(&mut b, IDX1, K, K);
    b.fload(freg(1), det)
        .fload(freg(2), at(A_BASE, IDX1))
        .fop(FpOp::Mul, freg(3), freg(1), freg(2))
        .fstore(freg(3), det);
    b.addi(K, K, 1).branch(Cond::Lt, K, N, "det_k");
    b.halt();
    b.finish()
}

fn emit_jacobi(n: usize, sweeps: usize, layout: &Layout) -> Result<Program, AsmError> {
    let mut b = ProgramBuilder::new();
    prologue(&mut b, n, layout)?;
    b.addi(NEXT_BASE, SCRATCH, 16)
        .li(SWEEPS, sweeps as i64)
        .li(SWEEP, 0);
    b.label("sweep")?;
    b.li(I, 0);
    b.label("row")?;
    // acc = b[i]
    b.fload(freg(1), at(B_BASE, I))
        .fstore(freg(1), acc())
        .li(J, 0);
    b.label("col")?;
    b.branch(Cond::Eq, J, I, "col_next");
    linear(&mut b, IDX0, I, J);
    fused_update(&mut b, FpOp::Sub, acc(), at(A_BASE, IDX0), at(OUT_BASE, J));
    b.label("col_next")?;
    b.addi(J, J, 1).branch(Cond::Lt, J, N, "col");
    // next[i] = acc / a[i][i]
    linear(&mut b, IDX1, I, I);
    b.fload(freg(4), acc())
        .fload(freg(5), at(A_BASE, IDX1))
        .fop(FpOp::Div, freg(6), freg(4), freg(5))
        .fstore(freg(6), at(NEXT_BASE, I));
    b.addi(I, I, 1).branch(Cond::Lt, I, N, "row");
    b.li(I, 0);
    b.label("copy")?;
    b.fload(freg(1), at(NEXT_BASE, I))
        .fstore(freg(1), at(OUT_BASE, I));
    b.addi(I, I, 1).branch(Cond::Lt, I, N, "copy");
    b.addi(SWEEP, SWEEP, 1)
        .branch(Cond::Lt, SWEEP, SWEEPS, "sweep");
    b.halt();
    b.finish()
}
