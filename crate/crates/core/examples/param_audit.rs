//! Trainable-parameter audit of every published configuration at full
//! scale (D=768, 12 blocks), with the relative delta to the reported count.

use hpt::analysis::{audit_preset, human, presets};

fn main() -> hpt::Result<()> {
    println!(
        "{:<22} {:<16} {:>8} {:>8} {:>9} {:>8}",
        "preset", "dataset", "module", "total", "reported", "delta"
    );
    for preset in presets() {
        for audit in audit_preset(&preset)? {
            let Some(published) = &audit.published else { continue };
            println!(
                "{:<22} {:<16} {:>8} {:>8} {:>9} {:>+7.1}%",
                preset.name,
                published.dataset,
                audit.module_closed_form,
                human(audit.trainable as f64),
                human(published.reference),
                100.0 * published.relative_delta
            );
        }
    }
    Ok(())
}
