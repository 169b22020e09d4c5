//! CSV and JSON emission of experiment rows.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::ResultRow;

pub const CSV_FILE: &str = "results.csv";
pub const JSON_FILE: &str = "results.json";

pub const COLUMNS: [&str; 12] = [
    "workload",
    "n",
    "mode",
    "seed",
    "traps",
    "register_repairs",
    "memory_repairs",
    "failure_breakdown",
    "instructions_executed",
    "cost",
    "result_nan_count",
    "max_abs_error_vs_golden",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rows to report")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Orders rows by `(n, mode)`; ties keep their input order.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by_key(|r| (r.n, r.mode));
}

/// `control_flow=0;register_clobbered=1;...` in a fixed reason order.
pub fn format_breakdown(row: &ResultRow) -> String {
    row.failure_breakdown
        .iter()
        .map(|(reason, count)| format!("{reason}={count}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn record(row: &ResultRow) -> [String; 12] {
    [
        row.workload.clone(),
        row.n.to_string(),
        row.mode.as_str().to_string(),
        row.seed.to_string(),
        row.traps.to_string(),
        row.register_repairs.to_string(),
        row.memory_repairs.to_string(),
        format_breakdown(row),
        row.instructions_executed.to_string(),
        row.cost.to_string(),
        row.result_nan_count.to_string(),
        format!("{:?}", row.max_abs_error_vs_golden),
    ]
}

pub fn to_csv(rows: &[ResultRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for row in rows {
        w.write_record(record(row))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Pretty JSON array. A NaN error is written as `null`.
pub fn to_json(rows: &[ResultRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, ReportError> {
    fs::write(&path, contents).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes `results.csv` and `results.json` into `dir`, sorted by `(n, mode)`.
/// Returns the two paths.
pub fn emit_report(rows: &[ResultRow], dir: &Path) -> Result<[PathBuf; 2], ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let csv = write(dir.join(CSV_FILE), &to_csv(&rows)?)?;
    let json = write(dir.join(JSON_FILE), &to_json(&rows))?;
    Ok([csv, json])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtrace::NotFoundReason;
    use crate::repair::RepairMode;

    fn row(n: usize, mode: RepairMode) -> ResultRow {
        ResultRow {
            workload: "matmul".into(),
            n,
            mode,
            seed: 1,
            traps: n as u64,
            register_repairs: n as u64,
            memory_repairs: 0,
            failure_breakdown: NotFoundReason::ALL.iter().map(|r| (*r, 0)).collect(),
            instructions_executed: 100,
            cost: 100 + 1000 * n as u64,
            result_nan_count: 0,
            max_abs_error_vs_golden: 0.5,
        }
    }

    #[test]
    fn single_row_csv() {
        let csv = to_csv(&[row(4, RepairMode::RegisterOnly)]).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], COLUMNS.join(","));
        assert_eq!(
            lines[1],
            "matmul,4,register_only,1,4,4,0,control_flow=0;register_clobbered=0;not_a_load=0;no_def_found=0;chain_too_deep=0,100,4100,0,0.5"
        );
    }

    #[test]
    fn twelve_rows_sorted() {
        let mut rows = Vec::new();
        for mode in [
            RepairMode::RegisterAndMemory,
            RepairMode::None,
            RepairMode::RegisterOnly,
        ] {
            for n in [32, 16, 8, 4] {
                rows.push(row(n, mode));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let [csv_path, json_path] = emit_report(&rows, dir.path()).unwrap();
        let csv = fs::read_to_string(&csv_path).unwrap();
        let keys: Vec<(String, String)> = csv
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<_> = l.split(',').collect();
                (f[1].to_string(), f[2].to_string())
            })
            .collect();
        assert_eq!(keys.len(), 12);
        assert_eq!(keys[0], ("4".into(), "none".into()));
        assert_eq!(keys[2], ("4".into(), "register_and_memory".into()));
        assert_eq!(keys[11], ("32".into(), "register_and_memory".into()));
        let json: Vec<ResultRow> =
            serde_json::from_str(&fs::read_to_string(json_path).unwrap()).unwrap();
        assert_eq!(json.len(), 12);
    }

    #[test]
    fn byte_identical() {
        let rows = vec![row(8, RepairMode::None), row(4, RepairMode::RegisterOnly)];
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(&rows, d1.path()).unwrap();
        emit_report(&rows, d2.path()).unwrap();
        for name in [CSV_FILE, JSON_FILE] {
            assert_eq!(
                fs::read(d1.path().join(name)).unwrap(),
                fs::read(d2.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn nan_error() {
        let mut r = row(4, RepairMode::None);
        r.max_abs_error_vs_golden = f64::NAN;
        assert!(to_csv(&[r.clone()]).unwrap().trim_end().ends_with(",NaN"));
        assert!(to_json(&[r]).contains("\"max_abs_error_vs_golden\": null"));
    }

    #[test]
    fn empty_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[], dir.path()),
            Err(ReportError::Empty)
        ));
    }
}
