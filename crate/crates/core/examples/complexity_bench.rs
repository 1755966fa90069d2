//! Scaling of the three cost classes and the sampler's guidance overhead.
//!
//! cargo run --release --example complexity_bench

use sparke::bench::{bench_method, bench_pipeline_overhead, BenchMethod, BenchSettings, OverheadSettings, TrackingAllocator};
use sparke::guidance::GuidanceConfig;
use sparke::sampler::RunConfig;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() -> sparke::Result<()> {
    let settings = BenchSettings::default();
    println!("{:<20} {:>8} {:>14} {:>12}", "method", "n", "secs/call", "peak bytes");
    for method in BenchMethod::ALL {
        let r = bench_method(method, &method.default_sizes(), &settings)?;
        for (n, t) in r.sizes.iter().zip(&r.wall_times) {
            println!("{:<20} {:>8} {:>14.3e}", method, n, t);
        }
        println!("{:<20} slope {:.3}, peak {:?} bytes at n = {}\n", method, r.fitted_exponent, r.peak_alloc, r.sizes.last().unwrap());
    }

    let base = RunConfig::default_grid(1, GuidanceConfig::default(), 7.5, 0);
    println!("{:<14} {:>8} {:>10} {:>14} {:>10}", "variant", "history", "window", "secs/sample", "vs off");
    for row in bench_pipeline_overhead(&base, &OverheadSettings::default())? {
        let window = row.window.map_or("-".to_string(), |w| w.to_string());
        println!("{:<14} {:>8} {:>10} {:>14.3e} {:>10.3}", row.label, row.history_len, window, row.secs_per_sample, row.relative_to_off);
    }
    Ok(())
}
