//! `esmlab verify`: run the full invariant suite and write a
//! machine-readable report, one CSV row per property.

use super::Failure;
use crate::output::{out_root, run_dir, write_csv};
use std::path::Path;

pub fn cmd_verify(out_flag: Option<&Path>) -> Result<(), Failure> {
    let results = esmlab_core::verify::run_all();
    for r in &results {
        let detail = if r.detail.is_empty() {
            String::new()
        } else {
            format!(" ({})", r.detail)
        };
        println!(
            "{} {}: measured {:.3e} vs threshold {:.3e}{}",
            if r.passed { "PASS" } else { "FAIL" },
            r.property,
            r.measured,
            r.threshold,
            detail
        );
    }
    let dir = run_dir(&out_root(out_flag), "verify")?;
    write_csv(&dir.join("report.csv"), &results)?;

    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} properties checked, {failed} failed", results.len());
    println!("wrote {}", dir.join("report.csv").display());
    if failed > 0 {
        Err(Failure::Verification(format!(
            "{failed} of {} properties failed",
            results.len()
        )))
    } else {
        Ok(())
    }
}
