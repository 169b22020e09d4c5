//! Whole-program found-ratio analysis.
//!
//! A site is one (FP arithmetic instruction, distinct source register) pair.
//! The per-instruction view counts an instruction as found only when every
//! one of its operands is found.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backtrace::{trace_origin, NotFoundReason, TraceResult};
use crate::isa::{FpReg, Program};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteResult {
    pub site: usize,
    pub operand: FpReg,
    pub result: TraceResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionCounts {
    pub total: usize,
    pub found: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub total_sites: usize,
    pub found: usize,
    pub ratio: f64,
    pub breakdown: BTreeMap<NotFoundReason, usize>,
    pub per_site: Vec<SiteResult>,
    pub per_instruction: InstructionCounts,
}

fn ratio(found: usize, total: usize) -> f64 {
    // No FP arithmetic at all: nothing can be missed.
    if total == 0 {
        1.0
    } else {
        found as f64 / total as f64
    }
}

pub fn analyze(program: &Program) -> AnalysisReport {
    let mut per_site = Vec::new();
    let mut instr_total = 0;
    let mut instr_found = 0;
    for site in program.fp_arith_sites() {
        let mut all_found = true;
        for operand in program.instructions()[site].fp_arith_sources() {
            let result = trace_origin(program, site, operand);
            all_found &= result.is_found();
            per_site.push(SiteResult {
                site,
                operand,
                result,
            });
        }
        instr_total += 1;
        instr_found += usize::from(all_found);
    }
    AnalysisReport::from_sites(per_site, instr_total, instr_found)
}

impl AnalysisReport {
    fn from_sites(per_site: Vec<SiteResult>, instr_total: usize, instr_found: usize) -> Self {
        let mut breakdown: BTreeMap<NotFoundReason, usize> =
            NotFoundReason::ALL.iter().map(|r| (*r, 0)).collect();
        let mut found = 0;
        for s in &per_site {
            match s.result.reason() {
                None => found += 1,
                Some(reason) => *breakdown.entry(reason).or_default() += 1,
            }
        }
        let total_sites = per_site.len();
        AnalysisReport {
            total_sites,
            found,
            ratio: ratio(found, total_sites),
            breakdown,
            per_site,
            per_instruction: InstructionCounts {
                total: instr_total,
                found: instr_found,
                ratio: ratio(instr_found, instr_total),
            },
        }
    }

    /// Sums several reports; `per_site` entries are concatenated.
    pub fn merge<'a>(reports: impl IntoIterator<Item = &'a AnalysisReport>) -> AnalysisReport {
        let mut sites = Vec::new();
        let (mut it, mut ifound) = (0, 0);
        for r in reports {
            sites.extend(r.per_site.iter().cloned());
            it += r.per_instruction.total;
            ifound += r.per_instruction.found;
        }
        AnalysisReport::from_sites(sites, it, ifound)
    }

    pub fn failures(&self) -> usize {
        self.breakdown.values().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
