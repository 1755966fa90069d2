//! Noise schedules, the analytic noised-GMM denoiser, and the DDIM reverse step.
//!
//! Steps are indexed `t = 1..=T` on the sampling grid, with `alpha_bar(0) = 1`
//! so the last reverse step lands on the clean estimate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SparkeError};
use crate::kernel::{ConditionVector, LatentPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `alpha_bar_t` for `t = 1..=T`, stored at index `t - 1`.
    alphas: Vec<f64>,
    /// DDIM `sigma_t` for `t = 1..=T`.
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(SparkeError::InvalidSchedule("no steps".into()));
        }
        if alphas.len() != sigmas.len() {
            return Err(SparkeError::LengthMismatch { left: alphas.len(), right: sigmas.len() });
        }
        let mut prev = 1.0;
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(SparkeError::InvalidSchedule(format!("alpha_bar at step {} is {a}", i + 1)));
            }
            if a > prev {
                return Err(SparkeError::InvalidSchedule(format!(
                    "alpha_bar increases at step {}",
                    i + 1
                )));
            }
            let sigma = sigmas[i];
            let bound = (1.0 - prev).sqrt();
            if !(sigma >= 0.0) || sigma > bound + 1e-15 {
                return Err(SparkeError::SigmaBound { t: i + 1, sigma, bound });
            }
            prev = a;
        }
        Ok(Self { alphas, sigmas })
    }

    /// Deterministic DDIM (`sigma_t = 0`) over the given `alpha_bar` values.
    pub fn deterministic(alphas: Vec<f64>) -> Result<Self> {
        let n = alphas.len();
        Self::from_alphas(alphas, vec![0.0; n])
    }

    /// Linear beta schedule on a `train_steps` grid, subsampled to `steps`
    /// DDIM steps. `eta_ddim = 0` gives deterministic DDIM.
    pub fn linear(
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        steps: usize,
        eta_ddim: f64,
    ) -> Result<Self> {
        if steps == 0 || train_steps < steps {
            return Err(SparkeError::InvalidSchedule(format!(
                "need 1 <= steps ({steps}) <= train_steps ({train_steps})"
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(SparkeError::InvalidSchedule("betas must satisfy 0 < start <= end < 1".into()));
        }
        if !(eta_ddim >= 0.0 && eta_ddim <= 1.0) {
            return Err(SparkeError::InvalidSchedule(format!("eta_ddim must lie in [0, 1], got {eta_ddim}")));
        }
        let mut cumulative = Vec::with_capacity(train_steps);
        let mut prod = 1.0;
        for i in 0..train_steps {
            let beta = if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            };
            prod *= 1.0 - beta;
            cumulative.push(prod);
        }
        let stride = train_steps / steps;
        let alphas: Vec<f64> = (0..steps).map(|i| cumulative[i * stride]).collect();
        let sigmas = (0..steps)
            .map(|i| {
                let a_t = alphas[i];
                let a_prev = if i == 0 { 1.0 } else { alphas[i - 1] };
                eta_ddim * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt()
            })
            .collect();
        Self::from_alphas(alphas, sigmas)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(SparkeError::StepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `alpha_bar(t - 1)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(if t == 1 { 1.0 } else { self.alphas[t - 2] })
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.sigmas[t - 1])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigmas.iter().all(|&s| s == 0.0)
    }
}

/// Predicted noise for one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonPrediction(pub Vec<f64>);

impl EpsilonPrediction {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponent {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

/// A condition and the mixture components it selects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmCondition {
    pub vector: Vec<f64>,
    pub components: Vec<usize>,
}

/// Conditional isotropic Gaussian mixture.
///
/// Each condition selects a subset of components whose weights are
/// renormalized within the subset. The unconditional mixture averages the
/// conditional mixtures over a uniform condition prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub components: Vec<GmmComponent>,
    pub conditions: Vec<GmmCondition>,
}

/// Which mixture density to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureSelector {
    Condition(usize),
    Marginal,
}

impl GmmSpec {
    /// `size x size` grid centred on the origin, one condition per row.
    /// Each row's condition vector is the mean of its component centres.
    pub fn grid(size: usize, spacing: f64, std: f64) -> Result<Self> {
        if size == 0 {
            return Err(SparkeError::InvalidMixture("grid size must be >= 1".into()));
        }
        let offset = (size as f64 - 1.0) / 2.0;
        let coord = |i: usize| (i as f64 - offset) * spacing;
        let mut components = Vec::with_capacity(size * size);
        let mut conditions = Vec::with_capacity(size);
        for row in 0..size {
            let mut idx = Vec::with_capacity(size);
            for col in 0..size {
                idx.push(components.len());
                components.push(GmmComponent {
                    mean: vec![coord(col), coord(row)],
                    std,
                    weight: 1.0 / (size * size) as f64,
                });
            }
            let cx = idx.iter().map(|&i| components[i].mean[0]).sum::<f64>() / size as f64;
            conditions.push(GmmCondition { vector: vec![cx, coord(row)], components: idx });
        }
        let spec = Self { components, conditions };
        spec.validate()?;
        Ok(spec)
    }

    /// The default benchmark mixture: 5x5 grid, spacing 2, std 0.05.
    pub fn default_grid() -> Self {
        Self::grid(5, 2.0, 0.05).expect("default grid is valid")
    }

    /// Two prompt clusters of three modes each on the x axis, overlapping in
    /// the middle: condition `(1, 0)` owns x = -3, -1, 1 and condition `(0, 1)`
    /// owns x = -1, 1, 3. The shared locations are separate components.
    pub fn overlapping_pair(std: f64) -> Self {
        let mut components = Vec::with_capacity(6);
        let mut owned = [Vec::new(), Vec::new()];
        for (c, xs) in [[-3.0, -1.0, 1.0], [-1.0, 1.0, 3.0]].iter().enumerate() {
            for &x in xs {
                owned[c].push(components.len());
                components.push(GmmComponent { mean: vec![x, 0.0], std, weight: 1.0 });
            }
        }
        let [a, b] = owned;
        Self {
            components,
            conditions: vec![
                GmmCondition { vector: vec![1.0, 0.0], components: a },
                GmmCondition { vector: vec![0.0, 1.0], components: b },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .components
            .first()
            .ok_or_else(|| SparkeError::InvalidMixture("no components".into()))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(SparkeError::InvalidMixture("zero-dimensional component".into()));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != d {
                return Err(SparkeError::DimensionMismatch { expected: d, found: c.mean.len() });
            }
            if !(c.std > 0.0 && c.std.is_finite()) || !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(SparkeError::InvalidMixture(format!(
                    "component {i} needs positive std and weight"
                )));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(SparkeError::NonFinite("component mean"));
            }
        }
        if self.conditions.is_empty() {
            return Err(SparkeError::InvalidMixture("no conditions".into()));
        }
        let dy = self.conditions[0].vector.len();
        for (ci, c) in self.conditions.iter().enumerate() {
            if c.vector.len() != dy {
                return Err(SparkeError::DimensionMismatch { expected: dy, found: c.vector.len() });
            }
            if c.components.is_empty() || c.components.iter().any(|&i| i >= self.components.len()) {
                return Err(SparkeError::InvalidMixture(format!(
                    "condition {ci} references no or unknown components"
                )));
            }
            if self.conditions[..ci].iter().any(|o| o.vector == c.vector) {
                return Err(SparkeError::InvalidMixture(format!("condition {ci} is duplicated")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn condition_dim(&self) -> usize {
        self.conditions[0].vector.len()
    }

    pub fn condition_vectors(&self) -> Vec<ConditionVector> {
        self.conditions.iter().map(|c| ConditionVector(c.vector.clone())).collect()
    }

    /// Index of the condition whose vector equals `y` exactly.
    pub fn condition_index(&self, y: &[f64]) -> Result<usize> {
        self.conditions
            .iter()
            .position(|c| c.vector.as_slice() == y)
            .ok_or_else(|| SparkeError::UnknownCondition(y.to_vec()))
    }

    /// `(component index, mixture weight)` pairs of the selected mixture.
    pub fn mixture_weights(&self, selector: MixtureSelector) -> Vec<(usize, f64)> {
        let within = |c: &GmmCondition| -> Vec<(usize, f64)> {
            let total: f64 = c.components.iter().map(|&i| self.components[i].weight).sum();
            c.components.iter().map(|&i| (i, self.components[i].weight / total)).collect()
        };
        match selector {
            MixtureSelector::Condition(ci) => within(&self.conditions[ci]),
            MixtureSelector::Marginal => {
                let mut w = vec![0.0; self.components.len()];
                let prior = 1.0 / self.conditions.len() as f64;
                for c in &self.conditions {
                    for (i, wi) in within(c) {
                        w[i] += prior * wi;
                    }
                }
                w.into_iter().enumerate().filter(|(_, v)| *v > 0.0).collect()
            }
        }
    }

    /// Log-density of the noised mixture at `alpha_bar` together with its score.
    ///
    /// Component `i` becomes `N(sqrt(a) mu_i, (a s_i^2 + 1 - a) I)` under the
    /// forward process with `alpha_bar = a`.
    pub fn log_density_and_score(
        &self,
        z: &[f64],
        alpha_bar: f64,
        selector: MixtureSelector,
    ) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.dim() {
            return Err(SparkeError::DimensionMismatch { expected: self.dim(), found: z.len() });
        }
        let d = z.len() as f64;
        let sa = alpha_bar.sqrt();
        let weights = self.mixture_weights(selector);
        let mut logs = Vec::with_capacity(weights.len());
        for &(i, w) in &weights {
            let c = &self.components[i];
            let var = alpha_bar * c.std * c.std + 1.0 - alpha_bar;
            let sq: f64 = z.iter().zip(&c.mean).map(|(x, m)| (x - sa * m) * (x - sa * m)).sum();
            logs.push(w.ln() - 0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln());
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + total.ln();
        let mut score = vec![0.0; z.len()];
        for (&(i, _), l) in weights.iter().zip(&logs) {
            let r = (l - log_density).exp();
            let c = &self.components[i];
            let var = alpha_bar * c.std * c.std + 1.0 - alpha_bar;
            for ((s, x), m) in score.iter_mut().zip(z).zip(&c.mean) {
                *s += r * (sa * m - x) / var;
            }
        }
        Ok((log_density, score))
    }

    /// Exact draw from the clean mixture.
    pub fn sample<R: Rng + ?Sized>(&self, selector: MixtureSelector, rng: &mut R) -> Vec<f64> {
        let weights = self.mixture_weights(selector);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = weights.last().expect("nonempty mixture").0;
        for &(i, w) in &weights {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = &self.components[pick];
        c.mean
            .iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                m + c.std * e
            })
            .collect()
    }
}

/// `sqrt(a_t) z0 + sqrt(1 - a_t) eps`.
pub fn forward_noise(z0: &LatentPoint, t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<LatentPoint> {
    let a = sched.alpha_bar(t)?;
    if eps.len() != z0.dim() {
        return Err(SparkeError::DimensionMismatch { expected: z0.dim(), found: eps.len() });
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(SparkeError::NonFinite("noise"));
    }
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(LatentPoint(z0.as_slice().iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect()))
}

/// `grad_z log p_t(z | y)` of the noised conditional mixture.
pub fn gmm_conditional_score(
    z: &LatentPoint,
    t: usize,
    y: &ConditionVector,
    gmm: &GmmSpec,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let ci = gmm.condition_index(y.as_slice())?;
    let a = sched.alpha_bar(t)?;
    Ok(gmm.log_density_and_score(z.as_slice(), a, MixtureSelector::Condition(ci))?.1)
}

/// Score of the condition-marginalized mixture, used as the unconditional branch of CFG.
pub fn gmm_unconditional_score(z: &LatentPoint, t: usize, gmm: &GmmSpec, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let a = sched.alpha_bar(t)?;
    Ok(gmm.log_density_and_score(z.as_slice(), a, MixtureSelector::Marginal)?.1)
}

/// `eps = -sqrt(1 - a_t) * score`.
pub fn epsilon_from_score(score: &[f64], t: usize, sched: &NoiseSchedule) -> Result<EpsilonPrediction> {
    let s = (1.0 - sched.alpha_bar(t)?).sqrt();
    Ok(EpsilonPrediction(score.iter().map(|v| -s * v).collect()))
}

/// `(1 + w) eps_cond - w eps_uncond`.
pub fn cfg_combine(eps_cond: &EpsilonPrediction, eps_uncond: &EpsilonPrediction, w: f64) -> EpsilonPrediction {
    EpsilonPrediction(
        eps_cond
            .0
            .iter()
            .zip(&eps_uncond.0)
            .map(|(c, u)| (1.0 + w) * c - w * u)
            .collect(),
    )
}

/// One-step clean estimate `(z_t - sqrt(1 - a_t) eps) / sqrt(a_t)`.
pub fn tweedie_clean_estimate(
    z_t: &LatentPoint,
    eps_hat: &EpsilonPrediction,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentPoint> {
    let a = sched.alpha_bar(t)?;
    tweedie_at(z_t.as_slice(), eps_hat.as_slice(), a).map(LatentPoint)
}

fn tweedie_at(z_t: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(alpha_bar > 0.0) {
        return Err(SparkeError::InvalidSchedule("alpha_bar must be positive for the clean estimate".into()));
    }
    if z_t.len() != eps.len() {
        return Err(SparkeError::DimensionMismatch { expected: z_t.len(), found: eps.len() });
    }
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z_t.iter().zip(eps).map(|(z, e)| (z - sb * e) / sa).collect())
}

/// DDIM update with explicit schedule values. Returns `(z_{t-1}, x0_hat)`.
pub fn ddim_update(
    z_t: &[f64],
    eps: &[f64],
    alpha_t: f64,
    alpha_prev: f64,
    sigma: f64,
    noise: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x0 = tweedie_at(z_t, eps, alpha_t)?;
    let bound = (1.0 - alpha_prev).sqrt();
    if !(sigma >= 0.0) || sigma > bound + 1e-15 {
        return Err(SparkeError::SigmaBound { t: 0, sigma, bound });
    }
    let dir_coef = (1.0 - alpha_prev - sigma * sigma).max(0.0).sqrt();
    let sa_t = alpha_t.sqrt();
    let sa_prev = alpha_prev.sqrt();
    let sb_t = (1.0 - alpha_t).sqrt();
    let mut out: Vec<f64> = if sb_t > 0.0 {
        z_t.iter()
            .zip(&x0)
            .map(|(z, x)| sa_prev * x + dir_coef * (z - sa_t * x) / sb_t)
            .collect()
    } else {
        // alpha_t = 1: the direction term is 0/0; eps carries it instead.
        x0.iter().zip(eps).map(|(x, e)| sa_prev * x + dir_coef * e).collect()
    };
    if sigma > 0.0 {
        let noise = noise.ok_or(SparkeError::MissingNoise { t: 0 })?;
        if noise.len() != out.len() {
            return Err(SparkeError::DimensionMismatch { expected: out.len(), found: noise.len() });
        }
        for (o, n) in out.iter_mut().zip(noise) {
            *o += sigma * n;
        }
    }
    Ok((out, x0))
}

/// One DDIM reverse step from `t` to `t - 1`.
pub fn ddim_step(
    z_t: &LatentPoint,
    eps_hat: &EpsilonPrediction,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&[f64]>,
) -> Result<LatentPoint> {
    let (a_t, a_prev, sigma) = (sched.alpha_bar(t)?, sched.alpha_bar_prev(t)?, sched.sigma(t)?);
    ddim_update(z_t.as_slice(), eps_hat.as_slice(), a_t, a_prev, sigma, noise)
        .map(|(z, _)| LatentPoint(z))
        .map_err(|e| match e {
            SparkeError::SigmaBound { sigma, bound, .. } => SparkeError::SigmaBound { t, sigma, bound },
            SparkeError::MissingNoise { .. } => SparkeError::MissingNoise { t },
            other => other,
        })
}
