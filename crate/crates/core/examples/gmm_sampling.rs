//! CFG-DDIM sampling on the 25-mode grid, unguided and with prompt-aware
//! diversity guidance, from the same seed.
//!
//! cargo run --release --example gmm_sampling [seed]

use sparke::guidance::{GuidanceConfig, GuidanceMode};
use sparke::metrics::evaluate_run;
use sparke::sampler::{run_experiment, RunConfig};

fn main() -> sparke::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    println!("{:<8} {:>8} {:>8} {:>10} {:>9} {:>9} {:>9}", "mode", "vendi", "rke", "cond_rke", "in-batch", "coverage", "quality");
    for mode in [GuidanceMode::Off, GuidanceMode::UnconditionalRke, GuidanceMode::ConditionalRke] {
        let cfg = RunConfig::default_grid(100, GuidanceConfig { mode, ..GuidanceConfig::default() }, 7.5, seed);
        let record = run_experiment(&cfg)?;
        let r = evaluate_run(&record, 3.0)?;
        println!(
            "{:<8} {:>8.3} {:>8.3} {:>10.3} {:>9.4} {:>9.2} {:>9.3}",
            mode.short_name(), r.vendi, r.rke, r.cond_rke, r.in_batch_similarity, r.mode_coverage, r.high_quality_fraction
        );
    }
    Ok(())
}
