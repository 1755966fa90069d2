//! Steering away from known modes: the history starts with reference samples
//! from five modes, and guided sampling avoids them.
//!
//! cargo run --release --example novelty_guidance

use sparke::diffusion::GmmSpec;
use sparke::guidance::GuidanceConfig;
use sparke::metrics::{capture_fraction, high_quality_fraction};
use sparke::sampler::{reference_from_modes, run_experiment, run_with_history, RunConfig};

fn main() -> sparke::Result<()> {
    let gmm = GmmSpec::default_grid();
    let modes = [2, 7, 12, 17, 22];
    let seed = 1;
    let (points, conds) = reference_from_modes(&gmm, &modes, 20, seed)?;

    let off = run_experiment(&RunConfig::default_grid(100, GuidanceConfig::off(), 7.5, seed))?.latents();
    let cfg = RunConfig::default_grid(100, GuidanceConfig::default(), 7.5, seed);
    let mut history = cfg.new_history();
    history.seed_novelty_reference(&points, &conds)?;
    let on = run_with_history(&cfg, history)?.latents();

    println!("reference modes {modes:?}, {} reference points", points.len());
    for (name, lat) in [("unguided", &off), ("novelty", &on)] {
        println!(
            "{name:<9} captured by reference modes {:.3}   high quality {:.3}",
            capture_fraction(lat, &gmm, &modes, 3.0),
            high_quality_fraction(lat, &gmm, 3.0)
        );
    }
    Ok(())
}
