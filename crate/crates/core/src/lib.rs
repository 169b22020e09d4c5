//! Approximate-memory machine simulator with reactive NaN repair.
//!
//! A small register ISA ([`isa`], [`asm`]) runs on a virtual machine
//! ([`vm`]) over byte-addressed memory with an approximate region
//! ([`mem`]). FP arithmetic on a NaN traps; the repair engine ([`repair`])
//! overwrites the operand and, using the static back-trace
//! ([`backtrace`]), the NaN's origin in memory.

pub mod analysis;
pub mod asm;
pub mod backtrace;
pub mod experiment;
pub mod fuzz;
pub mod isa;
pub mod mem;
pub mod repair;
pub mod report;
pub mod vm;
pub mod workloads;

pub use analysis::{analyze, AnalysisReport};
pub use asm::{assemble, format_program, AsmError, AsmErrorKind, ProgramBuilder};
pub use backtrace::{trace_origin, NotFoundReason, TraceResult};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentError, Injection, ResultRow};
pub use fuzz::{fuzz_soundness, FuzzReport, GenConfig, GenShape};
pub use isa::{AddressExpr, FpReg, Instruction, IntReg, Program, Scale};
pub use mem::{BitFlipModel, Float64Bits, MemError, MemoryImage, Region};
pub use repair::{run_with_repair, RepairMode, RepairPolicy, RepairReport, RepairRun};
pub use report::{emit_report, ReportError};
pub use vm::{Machine, MachineState, Metrics, Origin, TrapContext, VmError};
pub use workloads::{build, MatrixId, Workload, WorkloadError, WorkloadKind, WorkloadSpec};
