//! Matrix-based Rényi entropies and the diversity scores built on them.
//!
//! Eigenvalue-based scores (Vendi, order-alpha, conditional Vendi) go through
//! the dense symmetric eigensolver and cost `O(n^3)`. The order-2 scores
//! (RKE, conditional RKE) and the inverse losses only need Frobenius sums and
//! cost `O(n^2)`.
//!
//! The conditional Vendi score here is the order-1 analog of the conditional
//! RKE ratio: `exp(H1((K_Z ⊙ K_Y) / n) - H1(K_Y / n))`. It is defined by
//! analogy and is not taken from a published formula.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SparkeError};
use crate::kernel::{eval_kernel, hadamard, KernelMatrix, KernelSpec};

/// Tolerance on the trace-normalized spectrum before a matrix is rejected as
/// not positive semi-definite.
pub const PSD_TOLERANCE: f64 = 1e-8;

const UNIT_DIAGONAL_TOLERANCE: f64 = 1e-12;

/// Order of a Rényi entropy; `1.0` selects the von Neumann limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyOrder(f64);

impl EntropyOrder {
    pub const VON_NEUMANN: EntropyOrder = EntropyOrder(1.0);
    pub const COLLISION: EntropyOrder = EntropyOrder(2.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self(alpha))
        } else {
            Err(SparkeError::InvalidOrder(alpha))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Vendi,
    Rke,
    CondRke,
    CondVendi,
    OrderAlpha,
}

/// An effective mode count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub value: f64,
    pub kind: ScoreKind,
}

impl DiversityScore {
    fn new(value: f64, kind: ScoreKind) -> Self {
        Self { value, kind }
    }
}

/// Eigenvalues of `K / tr(K)`, clamped to `[0, 1]`.
///
/// Values below `n * f64::EPSILON` are eigensolver roundoff and are set to
/// zero, otherwise orders below 1 would count them through `l^alpha`.
pub fn normalized_spectrum(k: &KernelMatrix) -> Result<Vec<f64>> {
    let trace = k.trace();
    if !(trace > 0.0) {
        return Err(SparkeError::ZeroTrace);
    }
    let scaled = k.entries() / trace;
    let eig = scaled.symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(SparkeError::NotPsd { min_eigenvalue: min * trace });
    }
    let floor = k.n() as f64 * f64::EPSILON;
    Ok(eig.iter().map(|&v| if v <= floor { 0.0 } else { v.min(1.0) }).collect())
}

/// Rényi entropy of an already-normalized spectrum.
pub fn spectrum_entropy(spectrum: &[f64], order: EntropyOrder) -> f64 {
    let alpha = order.alpha();
    if alpha == 1.0 {
        -spectrum.iter().filter(|&&l| l > 0.0).map(|&l| l * l.ln()).sum::<f64>()
    } else {
        let s: f64 = spectrum.iter().filter(|&&l| l > 0.0).map(|&l| l.powf(alpha)).sum();
        s.ln() / (1.0 - alpha)
    }
}

/// Order-alpha Rényi entropy of `K / tr(K)`.
pub fn renyi_matrix_entropy(k: &KernelMatrix, order: EntropyOrder) -> Result<f64> {
    Ok(spectrum_entropy(&normalized_spectrum(k)?, order))
}

/// `exp(H_alpha)`, the order-alpha effective mode count.
pub fn order_alpha_score(k: &KernelMatrix, order: EntropyOrder) -> Result<DiversityScore> {
    Ok(DiversityScore::new(renyi_matrix_entropy(k, order)?.exp(), ScoreKind::OrderAlpha))
}

pub fn vendi_score(k: &KernelMatrix) -> Result<DiversityScore> {
    Ok(DiversityScore::new(
        renyi_matrix_entropy(k, EntropyOrder::VON_NEUMANN)?.exp(),
        ScoreKind::Vendi,
    ))
}

fn require_unit_diagonal(k: &KernelMatrix) -> Result<()> {
    match k.first_non_unit_diagonal(UNIT_DIAGONAL_TOLERANCE) {
        Some((index, value)) => Err(SparkeError::NonUnitDiagonal { index, value }),
        None => Ok(()),
    }
}

/// `n^2 / sum_ij k_ij^2`, computed from Frobenius sums only.
pub fn rke_score(k: &KernelMatrix) -> Result<DiversityScore> {
    require_unit_diagonal(k)?;
    let n = k.n() as f64;
    Ok(DiversityScore::new(n * n / k.frobenius_sq(), ScoreKind::Rke))
}

/// `|K_Y|_F^2 / |K_Y ⊙ K_Z|_F^2`.
pub fn cond_rke_score(kz: &KernelMatrix, ky: &KernelMatrix) -> Result<DiversityScore> {
    if kz.n() != ky.n() {
        return Err(SparkeError::ShapeMismatch { left: kz.n(), right: ky.n() });
    }
    require_unit_diagonal(kz)?;
    require_unit_diagonal(ky)?;
    let num = ky.frobenius_sq();
    let den: f64 = kz.entries().iter().zip(ky.entries().iter()).map(|(a, b)| (a * b) * (a * b)).sum();
    Ok(DiversityScore::new(num / den, ScoreKind::CondRke))
}

/// `exp(H1((K_Z ⊙ K_Y)/n) - H1(K_Y/n))`.
pub fn cond_vendi_score(kz: &KernelMatrix, ky: &KernelMatrix) -> Result<DiversityScore> {
    if kz.n() != ky.n() {
        return Err(SparkeError::ShapeMismatch { left: kz.n(), right: ky.n() });
    }
    require_unit_diagonal(kz)?;
    require_unit_diagonal(ky)?;
    let joint = renyi_matrix_entropy(&hadamard(kz, ky)?, EntropyOrder::VON_NEUMANN)?;
    let cond = renyi_matrix_entropy(ky, EntropyOrder::VON_NEUMANN)?;
    Ok(DiversityScore::new((joint - cond).exp(), ScoreKind::CondVendi))
}

fn check_uniform<P: AsRef<[f64]>>(points: &[P]) -> Result<()> {
    let d = points.first().ok_or(SparkeError::EmptyInput)?.as_ref().len();
    match points.iter().find(|p| p.as_ref().len() != d) {
        Some(p) => Err(SparkeError::DimensionMismatch { expected: d, found: p.as_ref().len() }),
        None => Ok(()),
    }
}

/// `sum_ij k(z_i, z_j)^2` over all ordered pairs, without materializing the matrix.
pub fn pairwise_sq_sum<P: AsRef<[f64]>>(points: &[P], spec: &KernelSpec) -> Result<f64> {
    check_uniform(points)?;
    spec.validate()?;
    let n = points.len();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        let zi = points[i].as_ref();
        let kii = eval_kernel(spec, zi, zi)?;
        diag += kii * kii;
        for zj in &points[i + 1..] {
            let k = eval_kernel(spec, zi, zj.as_ref())?;
            off += k * k;
        }
    }
    Ok(diag + 2.0 * off)
}

/// Inverse-RKE loss `(1/n^2) sum_ij k(z_i, z_j)^2`.
pub fn irke_loss<P: AsRef<[f64]>>(points: &[P], spec: &KernelSpec) -> Result<f64> {
    let n = points.len() as f64;
    Ok(pairwise_sq_sum(points, spec)? / (n * n))
}

/// Conditional inverse-RKE loss `(1/n^4) sum_ij k_Z(z_i, z_j)^2 k_Y(y_i, y_j)^2`.
pub fn cond_irke_loss<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    points: &[P],
    conditions: &[Q],
    spec_z: &KernelSpec,
    spec_y: &KernelSpec,
) -> Result<f64> {
    if points.len() != conditions.len() {
        return Err(SparkeError::LengthMismatch { left: points.len(), right: conditions.len() });
    }
    check_uniform(points)?;
    check_uniform(conditions)?;
    spec_z.validate()?;
    spec_y.validate()?;
    let n = points.len();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        let (zi, yi) = (points[i].as_ref(), conditions[i].as_ref());
        let kz = eval_kernel(spec_z, zi, zi)?;
        let ky = eval_kernel(spec_y, yi, yi)?;
        diag += (kz * ky) * (kz * ky);
        for j in (i + 1)..n {
            let kz = eval_kernel(spec_z, zi, points[j].as_ref())?;
            let ky = eval_kernel(spec_y, yi, conditions[j].as_ref())?;
            off += (kz * ky) * (kz * ky);
        }
    }
    let nf = n as f64;
    Ok((diag + 2.0 * off) / (nf * nf * nf * nf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_kernel_matrix;
    use approx::assert_relative_eq;

    fn two_by_two(off: f64) -> KernelMatrix {
        KernelMatrix::from_rows(2, &[1.0, off, off, 1.0]).unwrap()
    }

    // Closed form for a 2x2 unit-diagonal matrix: eigenvalues of K/2 are (1 ± c)/2.
    fn h1_two_by_two(c: f64) -> f64 {
        let (a, b) = ((1.0 + c) / 2.0, (1.0 - c) / 2.0);
        -(a * a.ln() + b * b.ln())
    }

    #[test]
    fn entropy_of_identity_and_ones() {
        for alpha in [0.5, 1.0, 2.0, 3.5] {
            let order = EntropyOrder::new(alpha).unwrap();
            assert_relative_eq!(renyi_matrix_entropy(&KernelMatrix::identity(6), order).unwrap(), 6f64.ln(), max_relative = 1e-12);
            assert!(renyi_matrix_entropy(&KernelMatrix::ones(6), order).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_two_by_two() {
        let expected = h1_two_by_two(0.5);
        assert_relative_eq!(expected, 0.5623351446188083, max_relative = 1e-12);
        let h = renyi_matrix_entropy(&two_by_two(0.5), EntropyOrder::VON_NEUMANN).unwrap();
        assert_relative_eq!(h, expected, max_relative = 1e-12);
    }

    #[test]
    fn entropy_errors() {
        assert!(EntropyOrder::new(0.0).is_err());
        assert!(EntropyOrder::new(-1.0).is_err());
        let zero = KernelMatrix::from_rows(2, &[0.0; 4]).unwrap();
        assert_eq!(renyi_matrix_entropy(&zero, EntropyOrder::COLLISION), Err(SparkeError::ZeroTrace));
        let indefinite = KernelMatrix::from_rows(2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            renyi_matrix_entropy(&indefinite, EntropyOrder::COLLISION),
            Err(SparkeError::NotPsd { .. })
        ));
    }

    #[test]
    fn vendi_examples() {
        assert_relative_eq!(vendi_score(&KernelMatrix::identity(7)).unwrap().value, 7.0, max_relative = 1e-12);
        assert_relative_eq!(vendi_score(&KernelMatrix::ones(9)).unwrap().value, 1.0, max_relative = 1e-12);
        assert_relative_eq!(vendi_score(&two_by_two(0.5)).unwrap().value, h1_two_by_two(0.5).exp(), max_relative = 1e-12);
        assert_relative_eq!(vendi_score(&two_by_two(0.5)).unwrap().value, 1.754765, max_relative = 1e-6);
    }

    #[test]
    fn rke_examples() {
        assert_eq!(rke_score(&KernelMatrix::identity(5)).unwrap().value, 5.0);
        assert_eq!(rke_score(&KernelMatrix::ones(5)).unwrap().value, 1.0);
        assert_relative_eq!(rke_score(&two_by_two(0.5)).unwrap().value, 1.6, max_relative = 1e-15);
        let bad = KernelMatrix::from_rows(2, &[2.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(rke_score(&bad), Err(SparkeError::NonUnitDiagonal { index: 0, value: 2.0 }));
    }

    #[test]
    fn rke_matches_collision_entropy() {
        let k = two_by_two(0.3);
        let via_eig = renyi_matrix_entropy(&k, EntropyOrder::COLLISION).unwrap().exp();
        assert_relative_eq!(rke_score(&k).unwrap().value, via_eig, max_relative = 1e-12);
    }

    #[test]
    fn cond_rke_examples() {
        let kz = two_by_two(0.5);
        assert_relative_eq!(cond_rke_score(&kz, &KernelMatrix::ones(2)).unwrap().value, 1.6, max_relative = 1e-15);
        assert_eq!(cond_rke_score(&kz, &KernelMatrix::identity(2)).unwrap().value, 1.0);
        let v = cond_rke_score(&kz, &two_by_two(0.8)).unwrap().value;
        assert_relative_eq!(v, (2.0 + 2.0 * 0.64) / (2.0 + 2.0 * 0.16), max_relative = 1e-15);
        assert_relative_eq!(v, 1.413793, max_relative = 1e-6);
        assert!(cond_rke_score(&kz, &KernelMatrix::identity(3)).is_err());
    }

    #[test]
    fn cond_vendi_examples() {
        let kz = two_by_two(0.5);
        let ky = two_by_two(0.8);
        assert_relative_eq!(
            cond_vendi_score(&kz, &KernelMatrix::ones(2)).unwrap().value,
            vendi_score(&kz).unwrap().value,
            max_relative = 1e-12
        );
        assert_relative_eq!(cond_vendi_score(&KernelMatrix::ones(2), &ky).unwrap().value, 1.0, max_relative = 1e-12);
        let expected = (h1_two_by_two(0.4) - h1_two_by_two(0.8)).exp();
        assert_relative_eq!(h1_two_by_two(0.4), 0.6108643020548935, max_relative = 1e-12);
        assert_relative_eq!(h1_two_by_two(0.8), 0.3250829733914482, max_relative = 1e-12);
        assert_relative_eq!(cond_vendi_score(&kz, &ky).unwrap().value, expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 1.330801, max_relative = 1e-6);
    }

    #[test]
    fn inverse_losses() {
        let g = KernelSpec::gaussian(1.0);
        assert_eq!(irke_loss(&[vec![1.0, 2.0]], &g).unwrap(), 1.0);
        assert_eq!(irke_loss(&vec![vec![0.5, 0.5]; 4], &g).unwrap(), 1.0);
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(irke_loss(&empty, &g), Err(SparkeError::EmptyInput));

        // Points at distance sqrt(2 ln 2) give k = 0.5 under sigma = 1.
        let r = (2.0 * 2f64.ln()).sqrt();
        let pts = vec![vec![0.0], vec![r]];
        assert_relative_eq!(irke_loss(&pts, &g).unwrap(), 0.625, max_relative = 1e-14);
        let rke = rke_score(&build_kernel_matrix(&g, &pts).unwrap()).unwrap().value;
        assert_relative_eq!(irke_loss(&pts, &g).unwrap(), 1.0 / rke, max_relative = 1e-14);
    }

    #[test]
    fn cond_inverse_loss() {
        let g = KernelSpec::gaussian(1.0);
        let r = (2.0 * 2f64.ln()).sqrt();
        let pts = vec![vec![0.0], vec![r]];
        // k_Y = 0.8 at distance sqrt(-2 ln 0.8).
        let ys = vec![vec![0.0], vec![(-2.0 * 0.8f64.ln()).sqrt()]];
        assert_relative_eq!(cond_irke_loss(&pts, &ys, &g, &g).unwrap(), 0.145, max_relative = 1e-14);

        let same = vec![vec![1.0]; 2];
        assert_relative_eq!(
            cond_irke_loss(&pts, &same, &g, &g).unwrap(),
            irke_loss(&pts, &g).unwrap() / 4.0,
            max_relative = 1e-14
        );
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_relative_eq!(
            cond_irke_loss(&pts, &ortho, &g, &KernelSpec::Cosine).unwrap(),
            1.0 / 8.0,
            max_relative = 1e-15
        );
        assert!(matches!(cond_irke_loss(&pts, &same[..1], &g, &g), Err(SparkeError::LengthMismatch { .. })));
    }
}
