//! Streaming inverse-RKE guidance gradients over a history of past samples.
//!
//! Both gradients touch each history entry once, so a step costs
//! `O(n * d)` and no kernel matrix is ever formed. For a newest sample `z`
//! joining `n - 1` history entries:
//!
//! ```text
//! grad IRKE      = 4/n^2 * sum_i k(z_i, z) * grad_z k(z_i, z)
//! grad Cond-IRKE = 4/n^4 * sum_i k_Z(z_i, z) * k_Y(y_i, y)^2 * grad_z k_Z(z_i, z)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Result, SparkeError};
use crate::kernel::{eval_kernel, kernel_and_grad, sq_dist, ConditionVector, KernelSpec, LatentPoint};

/// Which diversity loss drives the guidance step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Off,
    #[serde(alias = "rke")]
    UnconditionalRke,
    #[serde(alias = "sparke")]
    ConditionalRke,
}

impl GuidanceMode {
    pub fn short_name(&self) -> &'static str {
        match self {
            GuidanceMode::Off => "off",
            GuidanceMode::UnconditionalRke => "rke",
            GuidanceMode::ConditionalRke => "sparke",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = SparkeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(GuidanceMode::Off),
            "rke" | "unconditional_rke" => Ok(GuidanceMode::UnconditionalRke),
            "sparke" | "conditional_rke" => Ok(GuidanceMode::ConditionalRke),
            other => Err(SparkeError::InvalidConfig(format!("unknown guidance mode {other:?}"))),
        }
    }
}

/// How the sampler scales the loss gradient before the update.
///
/// `Exact` keeps the `4/n^2` (`4/n^4`) factors of the losses. `Proportional`
/// drops them and steps along the bare kernel sum, which keeps the step size
/// independent of how many samples have been generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScaling {
    Exact,
    Proportional,
}

/// How a gradient taken at the clean estimate reaches the noisy latent.
///
/// `Direct` subtracts it from `z_{t-1}` unchanged. `Tweedie` first multiplies
/// by `1/sqrt(alpha_bar_t)`, the Jacobian of the clean estimate when the
/// denoiser is held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentChain {
    #[default]
    Direct,
    Tweedie,
}

impl LatentChain {
    pub fn factor(self, alpha_bar: f64) -> f64 {
        match self {
            LatentChain::Direct => 1.0,
            LatentChain::Tweedie => 1.0 / alpha_bar.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Diversity guidance scale.
    pub eta: f64,
    /// Apply guidance every `frequency` reverse steps.
    pub frequency: usize,
    pub kernel_z: KernelSpec,
    pub kernel_y: KernelSpec,
    /// Maximum number of history entries kept; `None` keeps everything.
    pub window: Option<usize>,
    pub scaling: GradientScaling,
    pub chain: LatentChain,
    /// Norm cap applied to the latent-space update direction.
    pub max_grad_norm: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::ConditionalRke,
            eta: 0.03,
            frequency: 10,
            kernel_z: KernelSpec::gaussian(0.8),
            kernel_y: KernelSpec::gaussian(0.3),
            window: None,
            scaling: GradientScaling::Proportional,
            chain: LatentChain::Direct,
            max_grad_norm: 1e3,
        }
    }
}

impl GuidanceConfig {
    pub fn off() -> Self {
        Self { mode: GuidanceMode::Off, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(SparkeError::InvalidConfig(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.frequency == 0 {
            return Err(SparkeError::InvalidConfig("frequency must be >= 1".into()));
        }
        if self.window == Some(0) {
            return Err(SparkeError::InvalidConfig("window must be >= 1".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(SparkeError::InvalidConfig("max_grad_norm must be positive".into()));
        }
        self.kernel_z.validate()?;
        self.kernel_y.validate()
    }

    /// Whether the sampler does any guidance work at all.
    pub fn is_active(&self) -> bool {
        self.mode != GuidanceMode::Off && self.eta > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceGradient {
    pub grad: Vec<f64>,
    /// History entries that contributed to the sum.
    pub terms_used: usize,
}

impl GuidanceGradient {
    pub fn zeros(dim: usize) -> Self {
        Self { grad: vec![0.0; dim], terms_used: 0 }
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.grad.iter_mut().for_each(|v| *v *= factor);
    }

    /// Rescales so the norm does not exceed `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
    }
}

/// Append-only store of completed samples and their conditions.
///
/// Reference entries (novelty guidance) sit in a prefix and are never evicted.
/// Latents and conditions are kept in flat row-major buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationHistory {
    latent_dim: usize,
    condition_dim: usize,
    latents: Vec<f64>,
    conditions: Vec<f64>,
    reference_count: usize,
    window: Option<usize>,
}

/// Serializable form of a [`GenerationHistory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySnapshot {
    pub latent_dim: usize,
    pub condition_dim: usize,
    pub reference_count: usize,
    pub window: Option<usize>,
    pub latents: Vec<Vec<f64>>,
    pub conditions: Vec<Vec<f64>>,
}

impl GenerationHistory {
    pub fn new(latent_dim: usize, condition_dim: usize) -> Self {
        Self {
            latent_dim,
            condition_dim,
            latents: Vec::new(),
            conditions: Vec::new(),
            reference_count: 0,
            window: None,
        }
    }

    pub fn with_window(mut self, window: Option<usize>) -> Self {
        self.window = window;
        self
    }

    pub fn len(&self) -> usize {
        if self.latent_dim == 0 {
            self.conditions.len() / self.condition_dim.max(1)
        } else {
            self.latents.len() / self.latent_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    pub fn reference_count(&self) -> usize {
        self.reference_count
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        &self.latents[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn condition(&self, i: usize) -> &[f64] {
        &self.conditions[i * self.condition_dim..(i + 1) * self.condition_dim]
    }

    pub fn latents(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |i| self.latent(i))
    }

    pub fn conditions(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |i| self.condition(i))
    }

    fn check_dims(&self, z: &[f64], y: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(SparkeError::DimensionMismatch { expected: self.latent_dim, found: z.len() });
        }
        if y.len() != self.condition_dim {
            return Err(SparkeError::DimensionMismatch { expected: self.condition_dim, found: y.len() });
        }
        if !z.iter().chain(y).all(|v| v.is_finite()) {
            return Err(SparkeError::NonFinite("history entry"));
        }
        Ok(())
    }

    /// Appends a finished sample, evicting the oldest generated entries when a
    /// window is configured. The newest entry and all reference entries are
    /// always kept.
    pub fn push(&mut self, z_final: &LatentPoint, y: &ConditionVector) -> Result<()> {
        self.check_dims(z_final.as_slice(), y.as_slice())?;
        self.latents.extend_from_slice(z_final.as_slice());
        self.conditions.extend_from_slice(y.as_slice());
        if let Some(window) = self.window {
            let generated = self.len() - self.reference_count;
            let excess = self.len().saturating_sub(window).min(generated.saturating_sub(1));
            if excess > 0 {
                let start = self.reference_count;
                self.latents
                    .drain(start * self.latent_dim..(start + excess) * self.latent_dim);
                self.conditions
                    .drain(start * self.condition_dim..(start + excess) * self.condition_dim);
            }
        }
        Ok(())
    }

    /// Installs a reference set that later samples are repelled from.
    pub fn seed_novelty_reference(
        &mut self,
        points: &[LatentPoint],
        conditions: &[ConditionVector],
    ) -> Result<()> {
        if !self.is_empty() {
            return Err(SparkeError::HistoryNotFresh(self.len()));
        }
        if points.len() != conditions.len() {
            return Err(SparkeError::LengthMismatch { left: points.len(), right: conditions.len() });
        }
        for (z, y) in points.iter().zip(conditions) {
            self.check_dims(z.as_slice(), y.as_slice())?;
        }
        for (z, y) in points.iter().zip(conditions) {
            self.latents.extend_from_slice(z.as_slice());
            self.conditions.extend_from_slice(y.as_slice());
        }
        self.reference_count = points.len();
        Ok(())
    }

    /// `k_Y(y_i, y)^2` for every history entry. Computed once per generation.
    pub fn condition_weights(&self, y: &[f64], spec_y: &KernelSpec) -> Result<Vec<f64>> {
        if y.len() != self.condition_dim {
            return Err(SparkeError::DimensionMismatch { expected: self.condition_dim, found: y.len() });
        }
        if let (KernelSpec::Gaussian { bandwidth }, true) = (*spec_y, self.condition_dim > 0) {
            spec_y.validate()?;
            let inv_var = 1.0 / (bandwidth * bandwidth);
            return Ok(self.conditions.chunks_exact(self.condition_dim).map(|yi| (-sq_dist(yi, y) * inv_var).exp()).collect());
        }
        self.conditions()
            .map(|yi| eval_kernel(spec_y, yi, y).map(|k| k * k))
            .collect()
    }

    pub fn snapshot(&self) -> HistorySnapshot {
        HistorySnapshot {
            latent_dim: self.latent_dim,
            condition_dim: self.condition_dim,
            reference_count: self.reference_count,
            window: self.window,
            latents: self.latents().map(<[f64]>::to_vec).collect(),
            conditions: self.conditions().map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_snapshot(s: &HistorySnapshot) -> Result<Self> {
        if s.latents.len() != s.conditions.len() {
            return Err(SparkeError::LengthMismatch { left: s.latents.len(), right: s.conditions.len() });
        }
        if s.reference_count > s.latents.len() {
            return Err(SparkeError::InvalidConfig("reference_count exceeds history length".into()));
        }
        let mut h = GenerationHistory::new(s.latent_dim, s.condition_dim);
        for (z, y) in s.latents.iter().zip(&s.conditions) {
            h.check_dims(z, y)?;
            h.latents.extend_from_slice(z);
            h.conditions.extend_from_slice(y);
        }
        h.reference_count = s.reference_count;
        h.window = s.window;
        Ok(h)
    }
}

/// `sum_i w_i * k(z_i, z) * grad_z k(z_i, z)`, with `w_i = 1` when no weights are given.
pub fn kernel_pull_sum(
    history: &GenerationHistory,
    z: &[f64],
    spec: &KernelSpec,
    weights: Option<&[f64]>,
) -> Result<GuidanceGradient> {
    if z.len() != history.latent_dim() {
        return Err(SparkeError::DimensionMismatch { expected: history.latent_dim(), found: z.len() });
    }
    spec.validate()?;
    if let Some(w) = weights {
        if w.len() != history.len() {
            return Err(SparkeError::LengthMismatch { left: w.len(), right: history.len() });
        }
    }
    let mut acc = vec![0.0; z.len()];
    if let (KernelSpec::Gaussian { bandwidth }, true) = (*spec, !z.is_empty()) {
        // k * grad k = k^2 (z_i - z) / sigma^2, fused. Terms whose k^2 is
        // below ~1e-304 are skipped rather than pushed through subnormals.
        let inv_var = 1.0 / (bandwidth * bandwidth);
        for (i, zi) in history.latents.chunks_exact(history.latent_dim).enumerate() {
            let e = sq_dist(zi, z) * inv_var;
            if e > 700.0 {
                continue;
            }
            let c = weights.map_or(1.0, |w| w[i]) * (-e).exp() * inv_var;
            for ((a, x), y) in acc.iter_mut().zip(zi).zip(z) {
                *a += c * (x - y);
            }
        }
        return Ok(GuidanceGradient { grad: acc, terms_used: history.len() });
    }
    let mut kgrad = vec![0.0; z.len()];
    for i in 0..history.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        let k = kernel_and_grad(spec, history.latent(i), z, &mut kgrad)?;
        let c = w * k;
        for (a, g) in acc.iter_mut().zip(&kgrad) {
            *a += c * g;
        }
    }
    Ok(GuidanceGradient { grad: acc, terms_used: history.len() })
}

/// Gradient of the inverse-RKE loss of `history ∪ {z}` with respect to `z`.
pub fn irke_gradient(
    history: &GenerationHistory,
    z: &LatentPoint,
    cfg: &GuidanceConfig,
) -> Result<GuidanceGradient> {
    let mut g = kernel_pull_sum(history, z.as_slice(), &cfg.kernel_z, None)?;
    let n = (history.len() + 1) as f64;
    g.scale(4.0 / (n * n));
    Ok(g)
}

/// Gradient of the conditional inverse-RKE loss with respect to `z`.
pub fn cond_irke_gradient(
    history: &GenerationHistory,
    z: &LatentPoint,
    y: &ConditionVector,
    cfg: &GuidanceConfig,
) -> Result<GuidanceGradient> {
    let weights = history.condition_weights(y.as_slice(), &cfg.kernel_y)?;
    cond_irke_gradient_weighted(history, z, &weights, cfg)
}

/// As [`cond_irke_gradient`], with `k_Y(y_i, y)^2` precomputed.
pub fn cond_irke_gradient_weighted(
    history: &GenerationHistory,
    z: &LatentPoint,
    condition_weights: &[f64],
    cfg: &GuidanceConfig,
) -> Result<GuidanceGradient> {
    let mut g = kernel_pull_sum(history, z.as_slice(), &cfg.kernel_z, Some(condition_weights))?;
    let n = (history.len() + 1) as f64;
    g.scale(4.0 / (n * n * n * n));
    Ok(g)
}

/// `z - eta * g`.
pub fn apply_guidance(z: &LatentPoint, g: &GuidanceGradient, eta: f64) -> Result<LatentPoint> {
    if z.dim() != g.grad.len() {
        return Err(SparkeError::DimensionMismatch { expected: z.dim(), found: g.grad.len() });
    }
    if !eta.is_finite() || !z.is_finite() || g.grad.iter().any(|v| !v.is_finite()) {
        return Err(SparkeError::NonFinite("guidance update"));
    }
    Ok(LatentPoint(z.as_slice().iter().zip(&g.grad).map(|(a, b)| a - eta * b).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{cond_irke_loss, irke_loss};
    use approx::assert_relative_eq;

    fn lp(v: &[f64]) -> LatentPoint {
        LatentPoint(v.to_vec())
    }

    fn cv(v: &[f64]) -> ConditionVector {
        ConditionVector(v.to_vec())
    }

    fn cfg_sigma(sigma: f64) -> GuidanceConfig {
        GuidanceConfig {
            kernel_z: KernelSpec::gaussian(sigma),
            kernel_y: KernelSpec::gaussian(1.0),
            ..GuidanceConfig::default()
        }
    }

    // Finite-difference oracle of the loss over history ∪ {z}.
    fn fd_irke(history: &GenerationHistory, z: &[f64], spec: &KernelSpec) -> Vec<f64> {
        let h = 1e-5;
        (0..z.len())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut pts: Vec<Vec<f64>> = history.latents().map(<[f64]>::to_vec).collect();
                    let mut zz = z.to_vec();
                    zz[i] += delta;
                    pts.push(zz);
                    irke_loss(&pts, spec).unwrap()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn irke_gradient_examples() {
        let cfg = cfg_sigma(1.0);
        let empty = GenerationHistory::new(2, 1);
        assert_eq!(irke_gradient(&empty, &lp(&[1.0, 0.0]), &cfg).unwrap(), GuidanceGradient::zeros(2));

        let mut h = GenerationHistory::new(2, 1);
        h.push(&lp(&[0.0, 0.0]), &cv(&[0.0])).unwrap();
        let g = irke_gradient(&h, &lp(&[1.0, 0.0]), &cfg).unwrap();
        let fd = fd_irke(&h, &[1.0, 0.0], &cfg.kernel_z);
        assert_relative_eq!(fd[0], -(-1f64).exp(), max_relative = 1e-8);
        assert_relative_eq!(g.grad[0], -(-1f64).exp(), max_relative = 1e-14);
        assert_eq!(g.grad[1], 0.0);
        assert_eq!(g.terms_used, 1);

        let far = irke_gradient(&h, &lp(&[50.0, 0.0]), &cfg).unwrap();
        assert!(far.norm() < 1e-12);

        assert!(irke_gradient(&h, &lp(&[1.0]), &cfg).is_err());
    }

    #[test]
    fn cond_gradient_examples() {
        let cfg = cfg_sigma(1.0);
        let mut h = GenerationHistory::new(2, 1);
        h.push(&lp(&[0.0, 0.0]), &cv(&[0.0])).unwrap();
        // k_Y = 0.5 at distance sqrt(2 ln 2) under sigma = 1.
        let y = cv(&[(2.0 * 2f64.ln()).sqrt()]);
        let g = cond_irke_gradient(&h, &lp(&[1.0, 0.0]), &y, &cfg).unwrap();
        assert_relative_eq!(g.grad[0], -(-1f64).exp() / 16.0, max_relative = 1e-13);
        assert_relative_eq!(g.grad[0], -0.022992, max_relative = 1e-4);

        // Finite differences of the conditional loss.
        let hstep = 1e-5;
        let loss = |dz: f64| {
            cond_irke_loss(
                &[vec![0.0, 0.0], vec![1.0 + dz, 0.0]],
                &[vec![0.0], y.0.clone()],
                &cfg.kernel_z,
                &cfg.kernel_y,
            )
            .unwrap()
        };
        let fd = (loss(hstep) - loss(-hstep)) / (2.0 * hstep);
        assert_relative_eq!(g.grad[0], fd, max_relative = 1e-7);
    }

    #[test]
    fn orthogonal_conditions_isolate_prompts() {
        let cfg = GuidanceConfig { kernel_y: KernelSpec::Cosine, ..cfg_sigma(1.0) };
        let mut h = GenerationHistory::new(2, 2);
        h.push(&lp(&[0.1, 0.2]), &cv(&[1.0, 0.0])).unwrap();
        h.push(&lp(&[0.9, -0.2]), &cv(&[1.0, 0.0])).unwrap();
        let g = cond_irke_gradient(&h, &lp(&[0.5, 0.0]), &cv(&[0.0, 3.0]), &cfg).unwrap();
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_conditions_reduce_to_irke() {
        let cfg = cfg_sigma(0.8);
        let mut h = GenerationHistory::new(2, 1);
        for (i, p) in [[0.0, 0.3], [0.5, -0.1], [1.2, 0.4]].iter().enumerate() {
            h.push(&lp(p), &cv(&[2.0])).unwrap();
            let _ = i;
        }
        let z = lp(&[0.4, 0.1]);
        let n = 4.0f64;
        let a = cond_irke_gradient(&h, &z, &cv(&[2.0]), &cfg).unwrap();
        let b = irke_gradient(&h, &z, &cfg).unwrap();
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y / (n * n)).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn apply_guidance_examples() {
        let z = lp(&[1.0, 0.0]);
        let g = GuidanceGradient { grad: vec![-0.367879, 0.0], terms_used: 1 };
        assert_eq!(apply_guidance(&z, &g, 0.0).unwrap(), z);
        assert_eq!(apply_guidance(&z, &GuidanceGradient::zeros(2), 0.03).unwrap(), z);
        let out = apply_guidance(&z, &g, 0.03).unwrap();
        assert_relative_eq!(out.0[0], 1.01103637, max_relative = 1e-8);
        assert_eq!(out.0[1], 0.0);
        assert!(apply_guidance(&z, &GuidanceGradient { grad: vec![f64::NAN, 0.0], terms_used: 0 }, 0.1).is_err());
    }

    #[test]
    fn push_and_window() {
        let mut h = GenerationHistory::new(1, 1);
        h.push(&lp(&[0.0]), &cv(&[0.0])).unwrap();
        assert_eq!(h.len(), 1);
        assert!(h.push(&lp(&[0.0, 1.0]), &cv(&[0.0])).is_err());

        let mut h = GenerationHistory::new(1, 1).with_window(Some(150));
        for i in 0..151 {
            h.push(&lp(&[i as f64]), &cv(&[0.0])).unwrap();
        }
        assert_eq!(h.len(), 150);
        assert_eq!(h.latent(0), &[1.0]);
        assert_eq!(h.latent(149), &[150.0]);

        let mut h = GenerationHistory::new(1, 1).with_window(Some(12));
        let refs: Vec<_> = (0..10).map(|i| lp(&[-(i as f64) - 1.0])).collect();
        let conds = vec![cv(&[9.0]); 10];
        h.seed_novelty_reference(&refs, &conds).unwrap();
        for i in 0..5 {
            h.push(&lp(&[i as f64]), &cv(&[0.0])).unwrap();
        }
        assert_eq!(h.len(), 12);
        assert_eq!(h.reference_count(), 10);
        assert_eq!(h.latent(0), &[-1.0]);
        assert_eq!(h.latent(9), &[-10.0]);
        assert_eq!(h.latent(10), &[3.0]);
        assert_eq!(h.latent(11), &[4.0]);
    }

    #[test]
    fn novelty_seeding() {
        let mut h = GenerationHistory::new(2, 1);
        h.seed_novelty_reference(&[], &[]).unwrap();
        assert!(h.is_empty());
        let pts: Vec<_> = (0..100).map(|i| lp(&[i as f64, 0.0])).collect();
        let ys = vec![cv(&[0.0]); 100];
        h.seed_novelty_reference(&pts, &ys).unwrap();
        assert_eq!((h.len(), h.reference_count()), (100, 100));
        assert_eq!(h.seed_novelty_reference(&pts, &ys), Err(SparkeError::HistoryNotFresh(100)));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut h = GenerationHistory::new(2, 1).with_window(Some(3));
        h.seed_novelty_reference(&[lp(&[5.0, 5.0])], &[cv(&[1.0])]).unwrap();
        h.push(&lp(&[0.5, 0.25]), &cv(&[0.0])).unwrap();
        let json = serde_json::to_string(&h.snapshot()).unwrap();
        let back: HistorySnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(GenerationHistory::from_snapshot(&back).unwrap(), h);
    }

    #[test]
    fn clip_caps_norm() {
        let mut g = GuidanceGradient { grad: vec![3e3, 4e3], terms_used: 1 };
        g.clip(1e3);
        assert_relative_eq!(g.norm(), 1e3, max_relative = 1e-12);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("sparke".parse::<GuidanceMode>().unwrap(), GuidanceMode::ConditionalRke);
        assert_eq!("rke".parse::<GuidanceMode>().unwrap(), GuidanceMode::UnconditionalRke);
        assert!("vendi".parse::<GuidanceMode>().is_err());
        let m: GuidanceMode = serde_json::from_str("\"sparke\"").unwrap();
        assert_eq!(m, GuidanceMode::ConditionalRke);
    }
}
