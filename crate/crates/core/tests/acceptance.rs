//! Acceptance run: one PASS/FAIL line per criterion, in order.
//!
//! Linearized operators are cached under the cargo target directory so
//! repeated runs skip the assembly.

use std::path::PathBuf;
use std::process::ExitCode;

use kinemix_core::verify::{Suite, Verifier, VerifyConfig};

fn main() -> ExitCode {
    let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("operator-cache");
    let mut verifier = match Verifier::new(VerifyConfig::default(), Some(cache)) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("acceptance: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0;
    for suite in Suite::CRITERIA {
        let (ok, detail) = match verifier.run(suite) {
            Ok(rep) => {
                let bad: Vec<String> = rep.failures().map(|r| format!("{}={:.3e}", r.name, r.value)).collect();
                let detail = if bad.is_empty() {
                    format!("{} checks, {:.1}s", rep.records.len(), rep.elapsed.as_secs_f64())
                } else {
                    format!("failed: {}", bad.join(", "))
                };
                (rep.passed(), detail)
            }
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("{} criterion {:>2} {:<40} {}", if ok { "PASS" } else { "FAIL" }, suite.criterion().unwrap(), suite.title(), detail);
    }
    println!("acceptance: {} of {} criteria passed", Suite::CRITERIA.len() - failed, Suite::CRITERIA.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
