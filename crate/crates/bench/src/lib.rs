//! Fixtures shared by the simulator benchmarks.

use nanrepair::experiment::ExperimentConfig;
use nanrepair::repair::RepairMode;
use nanrepair::workloads::{build, MatrixId, Workload, WorkloadKind, WorkloadSpec};

pub const SEED: u64 = 7;

pub fn workload(kind: WorkloadKind, n: usize) -> Workload {
    build(&WorkloadSpec::new(kind, n, SEED)).expect("valid workload")
}

/// MatMul with one NaN in the middle of `A`.
pub fn injected_matmul(n: usize, mode: RepairMode) -> ExperimentConfig {
    ExperimentConfig::new(WorkloadSpec::new(WorkloadKind::MatMul, n, SEED), mode).inject_element(
        MatrixId::A,
        n / 2 - 1,
        n / 2 + 1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nanrepair::experiment::run_experiment;

    #[test]
    fn fixtures_run() {
        assert_eq!(workload(WorkloadKind::Jacobi, 4).spec.n, 4);
        let row = run_experiment(&injected_matmul(4, RepairMode::RegisterAndMemory)).unwrap();
        assert_eq!(row.traps, 1);
    }
}
