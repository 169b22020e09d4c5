use std::collections::BTreeSet;

use nanrepair::experiment::{
    run_experiment, run_experiment_detailed, ExperimentConfig, DEFAULT_TRAP_COST,
};
use nanrepair::repair::RepairMode;
use nanrepair::workloads::{element_address, MatrixId, WorkloadKind, WorkloadSpec};
use proptest::prelude::*;

fn cfg(kind: WorkloadKind, n: usize, mode: RepairMode) -> ExperimentConfig {
    ExperimentConfig::new(WorkloadSpec::new(kind, n, 11), mode)
}

#[test]
fn masked_matmul_corrupts_one_row() {
    let n = 6;
    for (i0, k0) in [(0, 0), (2, 5), (5, 3)] {
        let out = run_experiment_detailed(
            &cfg(WorkloadKind::MatMul, n, RepairMode::None).inject_element(MatrixId::A, i0, k0),
        )
        .unwrap();
        let c = out.workload.read_result(&out.run.memory);
        let nan_at: Vec<usize> = (0..n * n).filter(|&i| c[i].is_nan()).collect();
        assert_eq!(nan_at, (i0 * n..(i0 + 1) * n).collect::<Vec<_>>());
        assert_eq!(out.row.traps, 0);
    }
}

#[test]
fn masked_det_lu_is_nan_for_every_element() {
    let n = 4;
    for row in 0..n {
        for col in 0..n {
            let r = run_experiment(
                &cfg(WorkloadKind::DetLu, n, RepairMode::None).inject_element(
                    MatrixId::A,
                    row,
                    col,
                ),
            )
            .unwrap();
            assert_eq!(r.result_nan_count, 1, "A[{row}][{col}]");
        }
    }
}

#[test]
fn overhead_is_one_trap_charge() {
    for n in [4, 8] {
        let inj = (n / 2 - 1, n / 2 + 1);
        let clean = run_experiment(&cfg(WorkloadKind::MatMul, n, RepairMode::None)).unwrap();
        let reg = run_experiment(
            &cfg(WorkloadKind::MatMul, n, RepairMode::RegisterOnly).inject_element(
                MatrixId::A,
                inj.0,
                inj.1,
            ),
        )
        .unwrap();
        let mem = run_experiment(
            &cfg(WorkloadKind::MatMul, n, RepairMode::RegisterAndMemory).inject_element(
                MatrixId::A,
                inj.0,
                inj.1,
            ),
        )
        .unwrap();
        assert_eq!(clean.instructions_executed, reg.instructions_executed);
        assert_eq!(clean.instructions_executed, mem.instructions_executed);
        assert_eq!(mem.cost - clean.cost, DEFAULT_TRAP_COST);
        assert_eq!(reg.cost - clean.cost, n as u64 * DEFAULT_TRAP_COST);
        assert_eq!(clean.max_abs_error_vs_golden, 0.0);
    }
}

#[test]
fn every_workload_repairs_cleanly() {
    for kind in WorkloadKind::ALL {
        for mode in [RepairMode::RegisterOnly, RepairMode::RegisterAndMemory] {
            let r = run_experiment(&cfg(kind, 5, mode).inject_element(MatrixId::A, 1, 2)).unwrap();
            assert_eq!(r.result_nan_count, 0, "{kind:?} {mode:?}");
            assert!(r.traps >= 1);
            assert_eq!(
                r.cost,
                r.instructions_executed + DEFAULT_TRAP_COST * r.traps
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn memory_written_only_at_nan_addresses(n in 2usize..7, seed in any::<u64>(), picks in prop::collection::vec((0usize..64, 0usize..64), 1..4)) {
        let spec = WorkloadSpec::new(WorkloadKind::MatMul, n, seed);
        let mut c = ExperimentConfig::new(spec.clone(), RepairMode::RegisterAndMemory);
        let mut injected = BTreeSet::new();
        // Several NaNs at once through a pre-injected memory image.
        let clean = run_experiment_detailed(&c).unwrap();
        let mut base = clean.workload.clone();
        for (row, col) in &picks {
            let addr = element_address(&spec, MatrixId::A, row % n, col % n).unwrap();
            base.memory.inject_nan(addr);
            injected.insert(addr);
        }
        c.injection = None;
        let run = nanrepair::repair::run_with_repair(
            &base.program, base.memory.clone(), c.mode, c.policy, false, c.fuel).unwrap();
        let patched: BTreeSet<u64> = run.reports.iter().flat_map(|r| r.patched_addresses()).collect();
        prop_assert_eq!(&patched, &injected);
        prop_assert_eq!(run.metrics.traps_raised, injected.len() as u64);
        prop_assert!(base.read_result(&run.memory).iter().all(|v| !v.is_nan()));
        // Inputs outside the injected cells are untouched.
        let a = spec.region(MatrixId::A).unwrap();
        for addr in (a.start..a.start + a.len).step_by(8) {
            if !injected.contains(&addr) {
                prop_assert_eq!(run.memory.read_f64(addr), clean.workload.memory.read_f64(addr));
            }
        }
    }

    #[test]
    fn register_only_traps_once_per_reload(n in 2usize..8, row in 0usize..8, col in 0usize..8) {
        let r = run_experiment(&ExperimentConfig::new(WorkloadSpec::new(WorkloadKind::MatMul, n, 3), RepairMode::RegisterOnly)
            .inject_element(MatrixId::A, row % n, col % n)).unwrap();
        prop_assert_eq!(r.traps, n as u64);
        prop_assert_eq!(r.register_repairs, n as u64);
        prop_assert_eq!(r.memory_repairs, 0);
    }
}
