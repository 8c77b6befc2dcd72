//! Finite-difference gradient check of every layer family at toy extents.

use hpt::verify::{grad_check_families, GRAD_TOLERANCE};

fn main() -> hpt::Result<()> {
    for check in grad_check_families(0, false)? {
        println!(
            "{:<12} {:>9.2e} over {:>5} coordinates  {}",
            check.family,
            check.max_rel_error,
            check.coordinates,
            if check.max_rel_error < GRAD_TOLERANCE { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
