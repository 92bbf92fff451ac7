//! The `grad-check` command.

use std::io::Write;
use std::time::Instant;

use anyhow::Result;
use medctx_core::gradsuite::{check_case, SuiteReport, CASES, TOLERANCE};

/// Runs the finite-difference suite, writing one line per case to `out` as
/// it completes, and returns the full report.
pub fn run(seeds: u64, inject_bug: bool, out: &mut impl Write) -> Result<SuiteReport> {
    let started = Instant::now();
    writeln!(out, "{:<28} {:>6} {:>14}  result", "case", "seeds", "max rel error")?;
    let mut checks = Vec::with_capacity(CASES.len());
    for &name in CASES {
        let c = check_case(name, seeds, inject_bug)?;
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{:<28} {:>6} {:>14.3e}  {verdict}", c.name, c.seeds, c.max_rel_error)?;
        checks.push(c);
    }
    let report = SuiteReport { checks };
    let failed = report.checks.iter().filter(|c| !c.passed()).count();
    writeln!(
        out,
        "{} of {} cases within {TOLERANCE:e} ({:.1}s)",
        report.checks.len() - failed,
        report.checks.len(),
        started.elapsed().as_secs_f64()
    )?;
    Ok(report)
}
