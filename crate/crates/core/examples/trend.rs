//! Runs the composition experiment and prints one summary line per seed.
//! Usage: cargo run --release --example trend [config.json]

use std::time::Instant;

use modelcompose::harness::experiment::{mean_cells, prepare_base, run_with_base};
use modelcompose::harness::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config: ExperimentConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let t = Instant::now();
    let base = prepare_base(&config)?;
    println!("base ({:.1}s)", t.elapsed().as_secs_f64());
    let mut reports = Vec::new();
    for &seed in &config.world_seeds {
        let t = Instant::now();
        let r = run_with_base(&config, &base, seed)?;
        let cells: Vec<String> = r
            .cells
            .iter()
            .map(|c| format!("{:?}{:?}={:.3}", c.method, c.combo, c.accuracy))
            .collect();
        let solo: Vec<String> = r
            .constituents
            .iter()
            .map(|c| format!("{:?}/{}={:.3} loss={:.3?}", c.variant, c.modality, c.accuracy, c.final_stage2_loss))
            .collect();
        println!("seed {seed} ({:.1}s)\n  {}\n  {}", t.elapsed().as_secs_f64(), cells.join(" "), solo.join(" "));
        reports.push(r);
    }
    for c in mean_cells(&reports) {
        println!("mean {:?} {:?} {:.3}", c.method, c.combo, c.accuracy);
    }
    Ok(())
}
