//! Timing harness for the scoring and gradient paths, plus the end-to-end
//! sampler overhead table.
//!
//! Each size gets one untimed warmup and an inner repetition count calibrated so
//! a trial lasts at least `min_trial_secs`. Trials cycle through all sizes in
//! turn and each size reports its median over `trials`.
//! Exponents are least-squares slopes of `ln t` on `ln n` over the upper half
//! of the size grid, where lower-order terms have mostly washed out.
//!
//! Peak allocation is only reported when [`TrackingAllocator`] is installed as
//! the global allocator of the running binary.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::MixtureSelector;
use crate::entropy::{order_alpha_score, pairwise_sq_sum, rke_score, vendi_score, EntropyOrder};
use crate::error::{Result, SparkeError};
use crate::guidance::{cond_irke_gradient, irke_gradient, GenerationHistory, GuidanceConfig, GuidanceMode};
use crate::kernel::{build_kernel_matrix, eval_kernel, eval_kernel_grad, ConditionVector, LatentPoint, KernelSpec};
use crate::sampler::{generate_one, sample_rng, RunConfig};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that tracks live and peak heap bytes.
///
/// ```ignore
/// #[global_allocator]
/// static ALLOC: sparke::bench::TrackingAllocator = sparke::bench::TrackingAllocator;
/// ```
pub struct TrackingAllocator;

fn note_alloc(size: usize) {
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            note_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            note_alloc(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            note_alloc(new_size);
        }
        p
    }
}

/// Whether [`TrackingAllocator`] is the active global allocator.
pub fn tracking_enabled() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Runs `f` and returns the heap high-water mark it added above the live
/// bytes at entry, or `None` without the tracking allocator.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, Option<u64>) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    let peak = PEAK.load(Ordering::Relaxed);
    (out, tracking_enabled().then(|| peak.saturating_sub(base) as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    /// Kernel matrix plus dense eigendecomposition (Vendi score).
    VendiEigen,
    /// RKE score from the Frobenius sum, no matrix stored.
    RkeFrobenius,
    /// Incremental inverse-RKE gradient against a history of `n`.
    IrkeGradient,
    /// Incremental conditional inverse-RKE gradient against a history of `n`.
    CondIrkeGradient,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 4] =
        [BenchMethod::VendiEigen, BenchMethod::RkeFrobenius, BenchMethod::IrkeGradient, BenchMethod::CondIrkeGradient];

    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::VendiEigen => "vendi_eigen",
            BenchMethod::RkeFrobenius => "rke_frobenius",
            BenchMethod::IrkeGradient => "irke_gradient",
            BenchMethod::CondIrkeGradient => "cond_irke_gradient",
        }
    }

    /// Default size grid for the method.
    pub fn default_sizes(self) -> Vec<usize> {
        let pow2 = |lo: u32, hi: u32| (lo..=hi).map(|p| 1usize << p).collect();
        match self {
            BenchMethod::VendiEigen => pow2(7, 10),
            BenchMethod::RkeFrobenius => pow2(8, 12),
            BenchMethod::IrkeGradient | BenchMethod::CondIrkeGradient => pow2(8, 14),
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMethod {
    type Err = SparkeError;

    fn from_str(s: &str) -> Result<Self> {
        BenchMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SparkeError::InvalidConfig(format!("unknown bench method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    /// Latent dimension of the generated inputs.
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
    /// Largest `n` the eigendecomposition is allowed to run at.
    pub eigen_cap: usize,
    /// Lower bound on the wall time of one timed trial.
    pub min_trial_secs: f64,
    pub kernel: KernelSpec,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { dim: 8, trials: 7, seed: 0, eigen_cap: 2048, min_trial_secs: 0.25, kernel: KernelSpec::gaussian(0.8) }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(SparkeError::InvalidConfig("bench dim must be >= 1".into()));
        }
        if self.trials < 3 {
            return Err(SparkeError::InvalidConfig(format!("bench trials must be >= 3, got {}", self.trials)));
        }
        if !(self.min_trial_secs >= 0.0 && self.min_trial_secs.is_finite()) {
            return Err(SparkeError::InvalidConfig("min_trial_secs must be >= 0".into()));
        }
        self.kernel.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: BenchMethod,
    pub sizes: Vec<usize>,
    /// Median seconds per call at each size.
    pub wall_times: Vec<f64>,
    /// Log-log slope over the upper half of `sizes`.
    pub fitted_exponent: f64,
    /// Extra heap bytes of one call at the largest size, when tracked.
    pub peak_alloc: Option<u64>,
    pub threads: usize,
    pub dim: usize,
    pub trials: usize,
}

/// Least-squares slope of `ln y` against `ln x` over the upper half of the points.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(SparkeError::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    let start = xs.len() / 2;
    let pts: Vec<(f64, f64)> = xs[start..].iter().zip(&ys[start..]).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return Err(SparkeError::InvalidConfig("need at least two points in the upper half of the sizes".into()));
    }
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(SparkeError::NonFinite("bench timings"));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

/// One benchmark input at size `n`, drawn from the seed alone.
struct Instance {
    points: Vec<Vec<f64>>,
    conditions: Vec<Vec<f64>>,
    z: LatentPoint,
    y: ConditionVector,
}

const BENCH_PROMPTS: usize = 8;

impl Instance {
    fn new(n: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(n as u64);
        let points = random_points(&mut rng, n, dim);
        let prompts = random_points(&mut rng, BENCH_PROMPTS, 4);
        let conditions = (0..n).map(|i| prompts[i % BENCH_PROMPTS].clone()).collect();
        let z = LatentPoint(random_points(&mut rng, 1, dim).remove(0));
        Self { points, conditions, z, y: ConditionVector(prompts[0].clone()) }
    }

    fn history(&self, dim: usize) -> Result<GenerationHistory> {
        let mut h = GenerationHistory::new(dim, 4);
        for (p, c) in self.points.iter().zip(&self.conditions) {
            h.push(&LatentPoint(p.clone()), &ConditionVector(c.clone()))?;
        }
        Ok(h)
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

// Cross-checks the timed path against an independent route before timing it.
fn check_method(method: BenchMethod, inst: &Instance, settings: &BenchSettings) -> Result<()> {
    let spec = &settings.kernel;
    let ok = match method {
        BenchMethod::VendiEigen => {
            let k = build_kernel_matrix(spec, &inst.points)?;
            let v = vendi_score(&k)?.value;
            let collision = order_alpha_score(&k, EntropyOrder::COLLISION)?.value;
            (1.0 - 1e-9..=k.n() as f64 * (1.0 + 1e-9)).contains(&v) && close(collision, rke_score(&k)?.value, 1e-8)
        }
        BenchMethod::RkeFrobenius => {
            let n = inst.points.len() as f64;
            let fast = n * n / pairwise_sq_sum(&inst.points, spec)?;
            close(fast, rke_score(&build_kernel_matrix(spec, &inst.points)?)?.value, 1e-10)
        }
        BenchMethod::IrkeGradient | BenchMethod::CondIrkeGradient => {
            let cfg = GuidanceConfig { kernel_z: *spec, kernel_y: KernelSpec::gaussian(0.3), ..GuidanceConfig::default() };
            let h = inst.history(settings.dim)?;
            let n = (inst.points.len() + 1) as f64;
            let (got, scale) = if method == BenchMethod::IrkeGradient {
                (irke_gradient(&h, &inst.z, &cfg)?, 4.0 / (n * n))
            } else {
                (cond_irke_gradient(&h, &inst.z, &inst.y, &cfg)?, 4.0 / (n * n * n * n))
            };
            let mut naive = vec![0.0; settings.dim];
            for (p, c) in inst.points.iter().zip(&inst.conditions) {
                let w = if method == BenchMethod::IrkeGradient {
                    1.0
                } else {
                    eval_kernel(&cfg.kernel_y, c, inst.y.as_slice())?.powi(2)
                };
                let k = eval_kernel(spec, p, inst.z.as_slice())?;
                for (a, g) in naive.iter_mut().zip(eval_kernel_grad(spec, p, inst.z.as_slice())?) {
                    *a += scale * w * k * g;
                }
            }
            let norm = naive.iter().map(|v| v * v).sum::<f64>().sqrt();
            got.grad.iter().zip(&naive).all(|(a, b)| (a - b).abs() <= 1e-9 * norm.max(1e-300))
        }
    };
    if ok {
        Ok(())
    } else {
        Err(SparkeError::InvalidConfig(format!("{method} disagrees with its reference implementation")))
    }
}

// Inputs are built outside the timed call; only the method's own work is timed.
struct Prepared {
    inst: Instance,
    history: Option<GenerationHistory>,
    cfg: GuidanceConfig,
}

impl Prepared {
    fn new(method: BenchMethod, inst: Instance, settings: &BenchSettings) -> Result<Self> {
        let cfg = GuidanceConfig { kernel_z: settings.kernel, kernel_y: KernelSpec::gaussian(0.3), ..GuidanceConfig::default() };
        let history = match method {
            BenchMethod::IrkeGradient | BenchMethod::CondIrkeGradient => Some(inst.history(settings.dim)?),
            _ => None,
        };
        Ok(Self { inst, history, cfg })
    }

    fn call(&self, method: BenchMethod) -> Result<f64> {
        let (inst, spec) = (&self.inst, &self.cfg.kernel_z);
        Ok(match method {
            BenchMethod::VendiEigen => vendi_score(&build_kernel_matrix(spec, &inst.points)?)?.value,
            BenchMethod::RkeFrobenius => {
                let n = inst.points.len() as f64;
                n * n / pairwise_sq_sum(&inst.points, spec)?
            }
            BenchMethod::IrkeGradient => irke_gradient(self.history.as_ref().unwrap(), &inst.z, &self.cfg)?.grad[0],
            BenchMethod::CondIrkeGradient => {
                cond_irke_gradient(self.history.as_ref().unwrap(), &inst.z, &inst.y, &self.cfg)?.grad[0]
            }
        })
    }
}

/// Times `method` at each of `sizes` on seeded random inputs.
pub fn bench_method(method: BenchMethod, sizes: &[usize], settings: &BenchSettings) -> Result<BenchResult> {
    settings.validate()?;
    if sizes.is_empty() || sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SparkeError::InvalidConfig("bench sizes must be positive and strictly increasing".into()));
    }
    let largest = *sizes.last().unwrap();
    if method == BenchMethod::VendiEigen && largest > settings.eigen_cap {
        return Err(SparkeError::EigenCap { n: largest, cap: settings.eigen_cap });
    }
    let mut prepared = Vec::with_capacity(sizes.len());
    let mut reps = Vec::with_capacity(sizes.len());
    let mut peak_alloc = None;
    for &n in sizes {
        let inst = Instance::new(n, settings.dim, settings.seed);
        if n <= 1024 {
            check_method(method, &inst, settings)?;
        }
        let p = Prepared::new(method, inst, settings)?;
        // The first call doubles as warmup and repetition calibration.
        let start = Instant::now();
        let (first, peak) = measure_peak(|| p.call(method));
        first?;
        let once = start.elapsed().as_secs_f64().max(1e-9);
        reps.push(((settings.min_trial_secs / once).ceil() as usize).clamp(1, 1_000_000));
        peak_alloc = peak;
        prepared.push(p);
    }
    // Trials rotate through every size so slow machine drift hits all sizes alike.
    let mut samples = vec![Vec::with_capacity(settings.trials); sizes.len()];
    for _ in 0..settings.trials {
        for (i, p) in prepared.iter().enumerate() {
            let start = Instant::now();
            for _ in 0..reps[i] {
                black_box(p.call(method).expect("checked above"));
            }
            samples[i].push(start.elapsed().as_secs_f64() / reps[i] as f64);
        }
    }
    let wall_times: Vec<f64> = samples.into_iter().map(median).collect();
    for (n, secs) in sizes.iter().zip(&wall_times) {
        log::debug!("{method} n={n}: {secs:.3e} s");
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let fitted_exponent = fit_loglog_slope(&xs, &wall_times)?;
    Ok(BenchResult {
        method,
        sizes: sizes.to_vec(),
        wall_times,
        fitted_exponent,
        peak_alloc,
        threads: 1,
        dim: settings.dim,
        trials: settings.trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverheadSettings {
    /// Entries in the frozen history every timed sample is guided against.
    pub history: usize,
    /// Samples generated per trial.
    pub samples: usize,
    pub trials: usize,
    /// History size of the window comparison.
    pub window_history: usize,
}

impl Default for OverheadSettings {
    fn default() -> Self {
        Self { history: 1000, samples: 25, trials: 25, window_history: 150 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub label: String,
    pub mode: GuidanceMode,
    pub eta: f64,
    pub window: Option<usize>,
    pub history_len: usize,
    /// Median wall time per generated sample.
    pub secs_per_sample: f64,
    /// `secs_per_sample` over the matching unguided row.
    pub relative_to_off: f64,
}

fn frozen_history(cfg: &RunConfig, len: usize, window: Option<usize>) -> Result<GenerationHistory> {
    let mut h = cfg.new_history().with_window(window);
    let conds = cfg.gmm.condition_vectors();
    // Streams above 2^33 keep these draws apart from sample and reference streams.
    let mut rng = sample_rng(cfg.seed, 1u64 << 33);
    for i in 0..len {
        let ci = i % conds.len();
        let z = cfg.gmm.sample(MixtureSelector::Condition(ci), &mut rng);
        h.push(&LatentPoint(z), &conds[ci])?;
    }
    Ok(h)
}

fn generate_batch(cfg: &RunConfig, history: &GenerationHistory, samples: usize) -> Result<()> {
    let prompts = cfg.gmm.condition_vectors();
    for i in 0..samples {
        let mut rng = sample_rng(cfg.seed, i as u64);
        black_box(generate_one(history, &prompts[i % prompts.len()], cfg, &mut rng)?);
    }
    Ok(())
}

type Variant<'a> = (&'a str, GuidanceMode, f64, Option<usize>);

// Trials are interleaved across variants so clock drift hits all of them alike.
fn overhead_block(base: &RunConfig, len: usize, plan: &[Variant], settings: &OverheadSettings) -> Result<Vec<OverheadRow>> {
    let mut runs = Vec::with_capacity(plan.len());
    for &(_, mode, eta, window) in plan {
        let mut cfg = base.clone();
        cfg.guidance = GuidanceConfig { mode, eta, window, ..base.guidance.clone() };
        let h = frozen_history(&cfg, len, window)?;
        generate_batch(&cfg, &h, settings.samples)?;
        runs.push((cfg, h));
    }
    let mut times = vec![Vec::with_capacity(settings.trials); plan.len()];
    for _ in 0..settings.trials {
        for ((cfg, h), t) in runs.iter().zip(times.iter_mut()) {
            let start = Instant::now();
            generate_batch(cfg, h, settings.samples)?;
            t.push(start.elapsed().as_secs_f64() / settings.samples as f64);
        }
    }
    let secs: Vec<f64> = times.into_iter().map(median).collect();
    Ok(plan
        .iter()
        .zip(&runs)
        .zip(&secs)
        .map(|((&(label, mode, eta, window), (_, h)), &s)| OverheadRow {
            label: label.to_string(),
            mode,
            eta,
            window,
            history_len: h.len(),
            secs_per_sample: s,
            relative_to_off: s / secs[0],
        })
        .collect())
}

/// Per-sample wall time of the sampler under each guidance variant, all on
/// identical seeds and frozen histories.
///
/// Rows: `off`, `rke`, `sparke` and `sparke_eta0` at `settings.history`, then
/// `off`, `sparke` and `sparke_window` at `settings.window_history` with the
/// window equal to that history length. `relative_to_off` divides by the
/// first row of the same block.
pub fn bench_pipeline_overhead(base: &RunConfig, settings: &OverheadSettings) -> Result<Vec<OverheadRow>> {
    base.validate()?;
    if settings.samples == 0 || settings.trials == 0 {
        return Err(SparkeError::InvalidConfig("overhead bench needs samples and trials >= 1".into()));
    }
    let eta = if base.guidance.eta > 0.0 { base.guidance.eta } else { GuidanceConfig::default().eta };
    let mut rows = overhead_block(
        base,
        settings.history,
        &[
            ("off", GuidanceMode::Off, eta, None),
            ("rke", GuidanceMode::UnconditionalRke, eta, None),
            ("sparke", GuidanceMode::ConditionalRke, eta, None),
            ("sparke_eta0", GuidanceMode::ConditionalRke, 0.0, None),
        ],
        settings,
    )?;
    let w = settings.window_history;
    rows.extend(overhead_block(
        base,
        w,
        &[
            ("off", GuidanceMode::Off, eta, None),
            ("sparke", GuidanceMode::ConditionalRke, eta, None),
            ("sparke_window", GuidanceMode::ConditionalRke, eta, Some(w)),
        ],
        settings,
    )?);
    Ok(rows)
}

/// Writes one CSV row per (method, size).
pub fn write_bench_csv<W: std::io::Write>(results: &[BenchResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "n", "wall_time_secs", "fitted_exponent", "peak_alloc_bytes", "threads", "dim", "trials"])?;
    for r in results {
        for (n, t) in r.sizes.iter().zip(&r.wall_times) {
            w.write_record([
                r.method.name().to_string(),
                n.to_string(),
                format!("{t:e}"),
                r.fitted_exponent.to_string(),
                r.peak_alloc.map_or(String::new(), |b| b.to_string()),
                r.threads.to_string(),
                r.dim.to_string(),
                r.trials.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
