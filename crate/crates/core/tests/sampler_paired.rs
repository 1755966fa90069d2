//! Paired-run checks: each guided run is compared against an unguided twin
//! that shares the seed and therefore every noise draw.

use sparke::diffusion::{GmmComponent, GmmCondition, GmmSpec, NoiseSchedule};
use sparke::guidance::{GenerationHistory, GuidanceConfig, GuidanceMode};
use sparke::kernel::{build_kernel_matrix, ConditionVector, KernelSpec, LatentPoint};
use sparke::entropy::rke_score;
use sparke::metrics::{capture_fraction, evaluate_run, high_quality_fraction, EvalReport};
use sparke::sampler::{generate_one, reference_from_modes, run_experiment, run_with_history, sample_rng, RunConfig};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn two_mode(guidance: GuidanceConfig, seed: u64) -> RunConfig {
    let gmm = GmmSpec {
        components: vec![
            GmmComponent { mean: vec![-1.5, 0.0], std: 0.3, weight: 0.5 },
            GmmComponent { mean: vec![1.5, 0.0], std: 0.3, weight: 0.5 },
        ],
        conditions: vec![GmmCondition { vector: vec![1.0], components: vec![0, 1] }],
    };
    RunConfig {
        schedule: NoiseSchedule::linear(1000, 1e-4, 0.02, 50, 0.0).unwrap(),
        gmm,
        guidance,
        cfg_scale: 0.0,
        prompts: vec![ConditionVector(vec![1.0]); 2],
        seed,
        samples_per_prompt: 1,
    }
}

#[test]
fn second_guided_sample_moves_away_from_the_first() {
    let in_a = |p: &[f64]| p[0] < 0.0;
    let seed = (0..1000u64)
        .find(|&s| run_experiment(&two_mode(GuidanceConfig::off(), s)).unwrap().latents().iter().all(|p| in_a(p)))
        .expect("some seed puts both unguided samples in mode A");
    let off = run_experiment(&two_mode(GuidanceConfig::off(), seed)).unwrap().latents();
    let on = run_experiment(&two_mode(GuidanceConfig::default(), seed)).unwrap().latents();
    assert_eq!(on[0], off[0]);
    assert!(dist(&on[1], &on[0]) > dist(&off[1], &off[0]), "seed {seed}: {:?} vs {:?}", on, off);
}

#[test]
fn guided_grid_run_has_higher_rke() {
    let seed = 3;
    let spec = KernelSpec::gaussian(0.8);
    let rke = |g: GuidanceConfig| {
        let lat = run_experiment(&RunConfig::default_grid(100, g, 7.5, seed)).unwrap().latents();
        rke_score(&build_kernel_matrix(&spec, &lat).unwrap()).unwrap().value
    };
    let zero = rke(GuidanceConfig { eta: 0.0, ..GuidanceConfig::default() });
    let guided = rke(GuidanceConfig::default());
    assert!(guided >= zero, "{guided} < {zero}");
}

#[test]
fn novelty_reference_lowers_capture() {
    let gmm = GmmSpec::default_grid();
    let modes = [2, 7, 12, 17, 22];
    let seed = 5;
    let (pts, conds) = reference_from_modes(&gmm, &modes, 20, seed).unwrap();
    let off = run_experiment(&RunConfig::default_grid(100, GuidanceConfig::off(), 7.5, seed)).unwrap().latents();
    let cfg = RunConfig::default_grid(100, GuidanceConfig::default(), 7.5, seed);
    let mut h = cfg.new_history();
    h.seed_novelty_reference(&pts, &conds).unwrap();
    let on = run_with_history(&cfg, h).unwrap().latents();
    assert!(capture_fraction(&on, &gmm, &modes, 3.0) < capture_fraction(&off, &gmm, &modes, 3.0));
    assert!(high_quality_fraction(&on, &gmm, 3.0) >= high_quality_fraction(&off, &gmm, 3.0) - 0.05);
}

#[test]
fn guided_report_dominates_on_seed_means() {
    let seeds = 1..=4u64;
    let mean = |mode: GuidanceMode| {
        let reports: Vec<EvalReport> = seeds
            .clone()
            .map(|s| {
                let g = GuidanceConfig { mode, ..GuidanceConfig::default() };
                evaluate_run(&run_experiment(&RunConfig::default_grid(100, g, 7.5, s)).unwrap(), 3.0).unwrap()
            })
            .collect();
        let k = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        (avg(|r| r.rke), avg(|r| r.cond_rke), avg(|r| r.mode_coverage), avg(|r| r.in_batch_similarity))
    };
    let off = mean(GuidanceMode::Off);
    let on = mean(GuidanceMode::ConditionalRke);
    assert!(on.0 > off.0, "rke {on:?} vs {off:?}");
    assert!(on.1 > off.1, "cond_rke {on:?} vs {off:?}");
    assert!(on.2 >= off.2, "coverage {on:?} vs {off:?}");
    assert!(on.3 < off.3, "in-batch similarity {on:?} vs {off:?}");
}

#[test]
fn each_sample_depends_only_on_its_prefix() {
    let cfg = RunConfig::default_grid(6, GuidanceConfig::default(), 7.5, 12);
    let rec = run_experiment(&cfg).unwrap();
    for s in &rec.samples {
        let mut prefix = GenerationHistory::new(2, 2);
        for i in 0..s.index {
            prefix
                .push(&LatentPoint(rec.history.latents[i].clone()), &ConditionVector(rec.history.conditions[i].clone()))
                .unwrap();
        }
        let again = generate_one(&prefix, &s.condition, &cfg, &mut sample_rng(cfg.seed, s.index as u64)).unwrap();
        assert_eq!(again.latent, s.latent);
        assert_eq!(again.guidance_steps, s.guidance_steps);
    }
}

#[test]
fn evaluation_is_a_pure_function_of_the_record() {
    let rec = run_experiment(&RunConfig::default_grid(10, GuidanceConfig::default(), 7.5, 2)).unwrap();
    assert_eq!(evaluate_run(&rec, 3.0).unwrap(), evaluate_run(&rec, 3.0).unwrap());
}

#[test]
fn duplicated_and_single_sample_reports() {
    let gmm = GmmSpec::default_grid();
    let rec = run_experiment(&RunConfig {
        prompts: vec![gmm.condition_vectors()[0].clone()],
        ..RunConfig::default_grid(1, GuidanceConfig::default(), 7.5, 0)
    })
    .unwrap();
    let r = evaluate_run(&rec, 3.0).unwrap();
    assert_eq!((r.vendi, r.rke), (1.0, 1.0));
    assert!(r.mode_coverage == 0.0 || r.mode_coverage == 1.0 / 25.0);

    let pts = vec![vec![0.3, -0.2]; 7];
    let k = build_kernel_matrix(&KernelSpec::gaussian(0.8), &pts).unwrap();
    assert_eq!(rke_score(&k).unwrap().value, 1.0);
}

// Deterministic DDIM from unit noise maps each coordinate of a single Gaussian
// target affinely, so its output variance has a closed form: every step scales the
// deviation by (sqrt(a' a) s^2 + sqrt((1 - a')(1 - a))) / (a s^2 + 1 - a).
fn ddim_output_variance(alphas: &[f64], s2: f64) -> f64 {
    let mut var = 1.0;
    for i in (0..alphas.len()).rev() {
        let a = alphas[i];
        let a_prev = if i == 0 { 1.0 } else { alphas[i - 1] };
        let f = ((a_prev * a).sqrt() * s2 + ((1.0 - a_prev) * (1.0 - a)).sqrt()) / (a * s2 + 1.0 - a);
        var *= f * f;
    }
    var
}

// Unguided DDIM on a single Gaussian under a schedule linear in alpha_bar.
#[test]
fn single_gaussian_sampling_sanity() {
    let (mu, sd, n, steps) = ([0.3, -0.2], 1.0, 5000, 50);
    let alphas: Vec<f64> = (1..=steps).map(|t| 1.0 - 0.999 * t as f64 / steps as f64).collect();
    let expected = ddim_output_variance(&alphas, sd * sd);
    assert!((expected / (sd * sd) - 1.0).abs() < 0.1, "discretization variance ratio {}", expected / (sd * sd));
    let cfg = RunConfig {
        schedule: NoiseSchedule::deterministic(alphas).unwrap(),
        gmm: GmmSpec {
            components: vec![GmmComponent { mean: mu.to_vec(), std: sd, weight: 1.0 }],
            conditions: vec![GmmCondition { vector: vec![1.0], components: vec![0] }],
        },
        guidance: GuidanceConfig::off(),
        cfg_scale: 0.0,
        prompts: vec![ConditionVector(vec![1.0]); n],
        seed: 4,
        samples_per_prompt: 1,
    };
    let lat = run_experiment(&cfg).unwrap().latents();
    let var_se = expected * (2.0 / (n as f64 - 1.0)).sqrt();
    for j in 0..2 {
        let xs: Vec<f64> = lat.iter().map(|p| p[j]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
        assert!((m - mu[j]).abs() < 3.0 * sd / (n as f64).sqrt(), "coord {j}: mean {m}");
        assert!((var - expected).abs() < 3.0 * var_se, "coord {j}: variance {var} vs closed form {expected}");
    }
}
