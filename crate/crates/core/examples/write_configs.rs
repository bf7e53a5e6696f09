//! Regenerates the bundled configuration files from the built-in defaults.
//!
//! ```text
//! cargo run -p legcal-core --example write_configs -- configs
//! ```

use std::path::PathBuf;

use legcal::io::{to_json, ScenarioFile};
use legcal::ScenarioConfig;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "configs".into()));
    std::fs::create_dir_all(&dir)?;
    let config = ScenarioConfig::default_two_camera();
    std::fs::write(dir.join("demo_leg.json"), to_json(&config.chain))?;
    let mut scenario = ScenarioFile::from(&config);
    scenario.chain = None;
    scenario.chain_file = Some("demo_leg.json".into());
    std::fs::write(dir.join("default_scenario.json"), to_json(&scenario))?;
    println!("wrote {}", dir.display());
    Ok(())
}
