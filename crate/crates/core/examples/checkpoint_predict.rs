//! Save a trained forecaster as an integrity-checked checkpoint, reload it
//! and forecast tomorrow's steps from a window of daily rows.
//!
//! ```text
//! cargo run --release --example checkpoint_predict
//! ```

use std::fs::File;

use stepcast::cli::{cmd_predict, Checkpoint};
use stepcast::dataset::{build_windows, Outcome};
use stepcast::forecasters::{train, Architecture, ModelConfig};
use stepcast::ingest::{preprocess, write_daily_features_csv};
use stepcast::synth::{generate_daily, preset};

fn main() -> stepcast::Result<()> {
    let (raw, _) = generate_daily(&preset("sleep")?)?;
    let (users, _) = preprocess(&raw);
    let examples: Vec<_> = users
        .values()
        .map(|d| build_windows(d, 3, &[Outcome::Steps], false))
        .collect::<stepcast::Result<Vec<_>>>()?
        .concat();
    let config = ModelConfig {
        architecture: Architecture::LstmEarly,
        window: 3,
        hidden: 8,
        max_epochs: 10,
        ..ModelConfig::default()
    };
    let model = train(&config, &examples, &[])?;

    let dir = tempfile::tempdir().map_err(|e| stepcast::Error::io("tempdir", e))?;
    let path = dir.path().join("lstm_early_w3.json");
    let text = Checkpoint::new(model.clone()).save(&path)?;
    println!("checkpoint: {} bytes, header {}", text.len(), &text[..80]);
    assert_eq!(Checkpoint::load(&path)?.model, model);

    // The window file holds exactly w daily rows of one user.
    let days = users.values().next().expect("non-empty cohort");
    let window = dir.path().join("window.csv");
    let f = File::create(&window).map_err(|e| stepcast::Error::io(&window, e))?;
    write_daily_features_csv(&days[days.len() - 3..], f)
        .map_err(|e| stepcast::Error::io(&window, e))?;
    let p = cmd_predict(&path, &window)?;
    println!("{} on {}: {:.0} steps", p.user_id, p.target_date, p.value);

    // One flipped byte fails the digest.
    let mut bytes = std::fs::read(&path).map_err(|e| stepcast::Error::io(&path, e))?;
    let i = bytes.len() - 10;
    bytes[i] = if bytes[i] == b'0' { b'1' } else { b'0' };
    std::fs::write(&path, bytes).map_err(|e| stepcast::Error::io(&path, e))?;
    println!("after corruption: {}", Checkpoint::load(&path).unwrap_err());
    Ok(())
}
