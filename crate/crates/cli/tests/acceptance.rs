//! Acceptance suite: one PASS/FAIL line per criterion on the toy configuration.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use friedrichs_core::config::RunConfig;
use friedrichs_core::verify::{self, CheckResult, VerifyOptions};

/// Wall-clock budgets in seconds, indexed by criterion.
const BUDGET: [f64; 10] = [1.0, 30.0, 1.0, 60.0, 600.0, 300.0, 300.0, 60.0, 1.0, 600.0];

fn run_nq(dir: &Path, threads: usize, format: &str) -> Result<Vec<u8>, String> {
    let out = dir.join(format!("nq-{threads}.{format}"));
    let status = Command::new(env!("CARGO_BIN_EXE_friedrichs"))
        .args(["--threads", &threads.to_string(), "--format", format, "--out"])
        .arg(&out)
        .arg("nq")
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("nq --threads {threads} --format {format} exited with {status}"));
    }
    std::fs::read(&out).map_err(|e| e.to_string())
}

fn binary_determinism() -> (bool, String) {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return (false, e.to_string()),
    };
    let mut details = Vec::new();
    let mut ok = true;
    for format in ["json", "csv"] {
        match (run_nq(dir.path(), 1, format), run_nq(dir.path(), 8, format)) {
            (Ok(a), Ok(b)) => {
                ok &= a == b && !a.is_empty();
                details.push(format!("{format}: {} bytes, identical {}", a.len(), a == b));
            }
            (Err(e), _) | (_, Err(e)) => {
                ok = false;
                details.push(e);
            }
        }
    }
    (ok, details.join("; "))
}

fn main() -> ExitCode {
    let cfg = RunConfig::toy();
    let report = match verify::run_all(&cfg, VerifyOptions::default()) {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL acceptance suite could not run: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut checks: Vec<CheckResult> = report.checks;
    if let Some(c10) = checks.iter_mut().find(|c| c.id == 10) {
        let start = Instant::now();
        let (ok, detail) = binary_determinism();
        c10.passed &= ok;
        c10.detail = format!("{}; binary {detail}", c10.detail);
        c10.seconds += start.elapsed().as_secs_f64();
    }
    let mut all = checks.len() == 10;
    for c in &checks {
        let budget = BUDGET[c.id as usize - 1];
        let passed = c.passed && c.seconds <= budget;
        all &= passed;
        println!(
            "{} criterion {}: {} ({}; {:.2} s of {budget} s)",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            c.detail,
            c.seconds
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
