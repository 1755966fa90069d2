//! Run-level evaluation over final latents.

use serde::{Deserialize, Serialize};

use crate::diffusion::GmmSpec;
use crate::entropy::{cond_rke_score, cond_vendi_score, rke_score, vendi_score};
use crate::error::{Result, SparkeError};
use crate::kernel::{build_kernel_matrix, dot, sq_dist, KernelSpec};
use crate::sampler::RunRecord;

pub const DEFAULT_RADIUS_MULT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub vendi: f64,
    pub rke: f64,
    pub cond_vendi: f64,
    pub cond_rke: f64,
    pub in_batch_similarity: f64,
    pub mode_coverage: f64,
    pub high_quality_fraction: f64,
}

/// Mean over groups of the mean pairwise cosine similarity within a group.
/// Groups with fewer than two samples are skipped.
pub fn in_batch_similarity<P: AsRef<[f64]>>(groups: &[Vec<P>]) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for g in groups.iter().filter(|g| g.len() >= 2) {
        let norms: Vec<f64> = g.iter().map(|p| dot(p.as_ref(), p.as_ref()).sqrt()).collect();
        if norms.iter().any(|&n| n == 0.0) {
            return Err(SparkeError::ZeroVector);
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..g.len() {
            for j in (i + 1)..g.len() {
                sum += dot(g[i].as_ref(), g[j].as_ref()) / (norms[i] * norms[j]);
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(SparkeError::InvalidConfig("no group has at least two samples".into()));
    }
    Ok(total / counted as f64)
}

/// Groups samples by exact equality of their condition vectors, in first-seen order.
pub fn group_by_condition<P: AsRef<[f64]> + Clone, Q: AsRef<[f64]>>(samples: &[P], conditions: &[Q]) -> Result<Vec<Vec<P>>> {
    if samples.len() != conditions.len() {
        return Err(SparkeError::LengthMismatch { left: samples.len(), right: conditions.len() });
    }
    let mut keys: Vec<&[f64]> = Vec::new();
    let mut groups: Vec<Vec<P>> = Vec::new();
    for (s, c) in samples.iter().zip(conditions) {
        match keys.iter().position(|k| *k == c.as_ref()) {
            Some(i) => groups[i].push(s.clone()),
            None => {
                keys.push(c.as_ref());
                groups.push(vec![s.clone()]);
            }
        }
    }
    Ok(groups)
}

fn within(p: &[f64], mean: &[f64], radius: f64) -> bool {
    sq_dist(p, mean) <= radius * radius
}

/// Fraction of mixture components with at least one sample within `radius_mult * std` of the mean.
pub fn mode_coverage<P: AsRef<[f64]>>(samples: &[P], gmm: &GmmSpec, radius_mult: f64) -> f64 {
    let hit = gmm
        .components
        .iter()
        .filter(|c| samples.iter().any(|s| within(s.as_ref(), &c.mean, radius_mult * c.std)))
        .count();
    hit as f64 / gmm.components.len() as f64
}

/// Fraction of samples within `radius_mult * std` of some component mean.
pub fn high_quality_fraction<P: AsRef<[f64]>>(samples: &[P], gmm: &GmmSpec, radius_mult: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let good = samples
        .iter()
        .filter(|s| gmm.components.iter().any(|c| within(s.as_ref(), &c.mean, radius_mult * c.std)))
        .count();
    good as f64 / samples.len() as f64
}

/// Fraction of samples captured by any of the listed components.
pub fn capture_fraction<P: AsRef<[f64]>>(samples: &[P], gmm: &GmmSpec, modes: &[usize], radius_mult: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let captured = samples
        .iter()
        .filter(|s| {
            modes.iter().any(|&m| {
                let c = &gmm.components[m];
                within(s.as_ref(), &c.mean, radius_mult * c.std)
            })
        })
        .count();
    captured as f64 / samples.len() as f64
}

/// Scores over a set of latents and aligned conditions.
pub fn evaluate_samples(
    latents: &[Vec<f64>],
    conditions: &[Vec<f64>],
    gmm: &GmmSpec,
    kernel_z: &KernelSpec,
    kernel_y: &KernelSpec,
    radius_mult: f64,
) -> Result<EvalReport> {
    if latents.is_empty() {
        return Err(SparkeError::EmptyInput);
    }
    let kz = build_kernel_matrix(kernel_z, latents)?;
    let ky = build_kernel_matrix(kernel_y, conditions)?;
    let groups = group_by_condition(latents, conditions)?;
    let ibs = if groups.iter().any(|g| g.len() >= 2) { in_batch_similarity(&groups)? } else { 1.0 };
    Ok(EvalReport {
        num_samples: latents.len(),
        vendi: vendi_score(&kz)?.value,
        rke: rke_score(&kz)?.value,
        cond_vendi: cond_vendi_score(&kz, &ky)?.value,
        cond_rke: cond_rke_score(&kz, &ky)?.value,
        in_batch_similarity: ibs,
        mode_coverage: mode_coverage(latents, gmm, radius_mult),
        high_quality_fraction: high_quality_fraction(latents, gmm, radius_mult),
    })
}

/// Full metric suite for a run, using the run's own kernels and mixture.
///
/// A run with no prompt group of size two reports an in-batch similarity of 1.
pub fn evaluate_run(record: &RunRecord, radius_mult: f64) -> Result<EvalReport> {
    let g = &record.config.guidance;
    evaluate_samples(
        &record.latents(),
        &record.conditions(),
        &record.config.gmm,
        &g.kernel_z,
        &g.kernel_y,
        radius_mult,
    )
}
