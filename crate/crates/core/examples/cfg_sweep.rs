//! Quality against diversity across classifier-free guidance scales, with and
//! without diversity guidance, from a config-driven sweep.
//!
//! cargo run --release --example cfg_sweep

use sparke::config::ExperimentConfig;
use sparke::metrics::evaluate_run;
use sparke::sampler::run_experiment;

fn main() -> sparke::Result<()> {
    let cfg = ExperimentConfig::from_json(r#"{"seed": 2, "sweep": {"cfg_scale": [2, 4, 6, 8], "mode": ["off", "sparke"]}}"#)?;
    println!("{:<28} {:>8} {:>10} {:>9}", "point", "rke", "in-batch", "quality");
    for point in cfg.sweep_points() {
        let run = cfg.at_point(&point).run_config()?;
        let r = evaluate_run(&run_experiment(&run)?, cfg.metrics.radius_mult)?;
        println!("{:<28} {:>8.3} {:>10.4} {:>9.3}", point.label(), r.rke, r.in_batch_similarity, r.high_quality_fraction);
    }
    Ok(())
}
