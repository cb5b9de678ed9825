//! Run selected experiment stages in-process and print the report tables.
//!
//! A reduced model keeps this to seconds; the `stepcast run` binary uses
//! the full configuration.
//!
//! ```text
//! cargo run --release --example experiment_run
//! ```

use stepcast::metrics::{render_reports, run_experiments, ExperimentSettings, Stage};
use stepcast::synth::{generate_daily, preset};

fn main() -> stepcast::Result<()> {
    let (raw, _) = generate_daily(&preset("prediabetes")?)?;
    let mut settings = ExperimentSettings {
        seed: 11,
        stages: vec![
            Stage::Preprocess,
            Stage::Sweep,
            Stage::Baseline,
            Stage::PerUser,
        ],
        ..ExperimentSettings::default()
    };
    settings.model.hidden = 16;
    settings.model.late_hidden = 16;
    settings.model.max_epochs = 20;

    let out = run_experiments(&raw, &settings, 1)?;
    for report in render_reports(&out.results)? {
        println!("{}\n", report.text);
    }
    println!("selected window: {}", out.results.selected_window);
    println!(
        "{} cells trained, {} checkpointable models",
        out.results.cells.len(),
        out.models.len()
    );
    for (id, cell) in out.results.cells.iter().take(3) {
        println!("{id}: seed {:#018x}", cell.seed);
    }
    assert!(out.results.audit_violations().is_empty());
    Ok(())
}
