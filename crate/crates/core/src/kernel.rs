//! Kernel functions, their gradients, and dense kernel-matrix assembly.
//!
//! Both kernels are normalized (`k(x, x) = 1`). The Gaussian kernel uses the
//! bandwidth convention `exp(-|a - b|^2 / (2 sigma^2))`; the cosine kernel is
//! left unshifted, so its values lie in `[-1, 1]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SparkeError};

/// A sample in generation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentPoint(pub Vec<f64>);

/// A prompt / condition embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionVector(pub Vec<f64>);

macro_rules! vector_newtype {
    ($ty:ident) => {
        impl $ty {
            pub fn new(coords: Vec<f64>) -> Self {
                Self(coords)
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }

        impl From<Vec<f64>> for $ty {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }

        impl AsRef<[f64]> for $ty {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

vector_newtype!(LatentPoint);
vector_newtype!(ConditionVector);

/// Which kernel to evaluate, and its bandwidth where applicable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec", into = "RawKernelSpec")]
pub enum KernelSpec {
    Gaussian { bandwidth: f64 },
    Cosine,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KernelKind {
    Gaussian,
    Cosine,
}

// Wire form; rejects a bandwidth on the cosine kernel.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernelSpec {
    kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bandwidth: Option<f64>,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = String;

    fn try_from(raw: RawKernelSpec) -> std::result::Result<Self, String> {
        match (raw.kind, raw.bandwidth) {
            (KernelKind::Gaussian, Some(bandwidth)) => Ok(KernelSpec::Gaussian { bandwidth }),
            (KernelKind::Gaussian, None) => Err("gaussian kernel needs a bandwidth".into()),
            (KernelKind::Cosine, None) => Ok(KernelSpec::Cosine),
            (KernelKind::Cosine, Some(_)) => Err("cosine kernel takes no bandwidth".into()),
        }
    }
}

impl From<KernelSpec> for RawKernelSpec {
    fn from(spec: KernelSpec) -> Self {
        match spec {
            KernelSpec::Gaussian { bandwidth } => RawKernelSpec { kind: KernelKind::Gaussian, bandwidth: Some(bandwidth) },
            KernelSpec::Cosine => RawKernelSpec { kind: KernelKind::Cosine, bandwidth: None },
        }
    }
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Self {
        KernelSpec::Gaussian { bandwidth }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => {
                Err(SparkeError::InvalidBandwidth(bandwidth))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Gaussian { .. } => "gaussian",
            KernelSpec::Cosine => "cosine",
        }
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<()> {
    spec.validate()?;
    if a.len() != b.len() {
        return Err(SparkeError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok(())
}

/// Evaluates `k(a, b)`.
pub fn eval_kernel(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(spec, a, b)?;
    match *spec {
        KernelSpec::Gaussian { bandwidth } => Ok(gaussian_unchecked(bandwidth, a, b)),
        KernelSpec::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(SparkeError::ZeroVector);
            }
            Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
        }
    }
}

#[inline]
pub(crate) fn gaussian_unchecked(bandwidth: f64, a: &[f64], b: &[f64]) -> f64 {
    (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Gradient of `k(a, b)` with respect to `b`.
pub fn eval_kernel_grad(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; b.len()];
    let k = kernel_and_grad(spec, a, b, &mut out)?;
    debug_assert!(k.is_finite());
    Ok(out)
}

/// Writes `d k(a, b) / d b` into `grad` and returns `k(a, b)`.
pub(crate) fn kernel_and_grad(
    spec: &KernelSpec,
    a: &[f64],
    b: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    check_pair(spec, a, b)?;
    match *spec {
        KernelSpec::Gaussian { bandwidth } => {
            let inv_var = 1.0 / (bandwidth * bandwidth);
            let k = (-0.5 * sq_dist(a, b) * inv_var).exp();
            for ((g, x), y) in grad.iter_mut().zip(a).zip(b) {
                *g = k * (x - y) * inv_var;
            }
            Ok(k)
        }
        KernelSpec::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(SparkeError::ZeroVector);
            }
            let ab = dot(a, b);
            let inv = 1.0 / (na * nb);
            let coef = ab / (na * nb * nb * nb);
            for ((g, x), y) in grad.iter_mut().zip(a).zip(b) {
                *g = x * inv - coef * y;
            }
            Ok((ab * inv).clamp(-1.0, 1.0))
        }
    }
}

/// Dense symmetric kernel matrix with a cached trace.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    trace: f64,
}

impl KernelMatrix {
    /// Wraps a square matrix. Symmetry is checked to `1e-12`.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() {
            return Err(SparkeError::ShapeMismatch { left: entries.nrows(), right: entries.ncols() });
        }
        if entries.nrows() == 0 {
            return Err(SparkeError::EmptyInput);
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(SparkeError::NonFinite("kernel matrix"));
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(SparkeError::InvalidConfig(format!(
                        "kernel matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let trace = entries.trace();
        Ok(Self { entries, trace })
    }

    /// Builds an `n x n` matrix from row-major data.
    pub fn from_rows(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(SparkeError::LengthMismatch { left: data.len(), right: n * n });
        }
        Self::from_matrix(DMatrix::from_row_slice(n, n, data))
    }

    pub fn identity(n: usize) -> Self {
        Self { entries: DMatrix::identity(n, n), trace: n as f64 }
    }

    pub fn ones(n: usize) -> Self {
        Self { entries: DMatrix::from_element(n, n, 1.0), trace: n as f64 }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn has_unit_diagonal(&self, tol: f64) -> bool {
        self.first_non_unit_diagonal(tol).is_none()
    }

    pub(crate) fn first_non_unit_diagonal(&self, tol: f64) -> Option<(usize, f64)> {
        (0..self.n()).map(|i| (i, self.get(i, i))).find(|(_, v)| (v - 1.0).abs() > tol)
    }

    /// Smallest eigenvalue via the dense symmetric eigensolver.
    pub fn min_eigenvalue(&self) -> f64 {
        self.entries
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let first = points.first().ok_or(SparkeError::EmptyInput)?;
    let d = first.as_ref().len();
    for p in points {
        if p.as_ref().len() != d {
            return Err(SparkeError::DimensionMismatch { expected: d, found: p.as_ref().len() });
        }
    }
    Ok(d)
}

/// Assembles `K[i][j] = k(points[i], points[j])`.
pub fn build_kernel_matrix<P: AsRef<[f64]>>(spec: &KernelSpec, points: &[P]) -> Result<KernelMatrix> {
    spec.validate()?;
    check_points(points)?;
    let n = points.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = eval_kernel(spec, points[i].as_ref(), points[i].as_ref())?;
        for j in (i + 1)..n {
            let v = eval_kernel(spec, points[i].as_ref(), points[j].as_ref())?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let trace = m.trace();
    Ok(KernelMatrix { entries: m, trace })
}

/// Rescales to `k(x, y) / sqrt(k(x, x) k(y, y))`.
pub fn normalize_kernel_matrix(k: &KernelMatrix) -> Result<KernelMatrix> {
    let n = k.n();
    let mut scale = Vec::with_capacity(n);
    for i in 0..n {
        let d = k.get(i, i);
        if !(d > 0.0) {
            return Err(SparkeError::NonPositiveDiagonal { index: i, value: d });
        }
        scale.push(d.sqrt());
    }
    let mut m = k.entries.clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = if i == j { 1.0 } else { k.get(i, j) / (scale[i] * scale[j]) };
        }
    }
    Ok(KernelMatrix { entries: m, trace: n as f64 })
}

/// Entrywise (Schur) product.
pub fn hadamard(a: &KernelMatrix, b: &KernelMatrix) -> Result<KernelMatrix> {
    if a.n() != b.n() {
        return Err(SparkeError::ShapeMismatch { left: a.n(), right: b.n() });
    }
    let entries = a.entries.component_mul(&b.entries);
    let trace = entries.trace();
    Ok(KernelMatrix { entries, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_diff(spec: &KernelSpec, a: &[f64], b: &[f64], h: f64) -> Vec<f64> {
        (0..b.len())
            .map(|i| {
                let mut bp = b.to_vec();
                let mut bm = b.to_vec();
                bp[i] += h;
                bm[i] -= h;
                (eval_kernel(spec, a, &bp).unwrap() - eval_kernel(spec, a, &bm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gaussian_values() {
        let g = KernelSpec::gaussian(1.0);
        assert_eq!(eval_kernel(&g, &[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_relative_eq!(eval_kernel(&g, &[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.6065306597126334, max_relative = 1e-12);
    }

    #[test]
    fn cosine_values() {
        let c = KernelSpec::Cosine;
        assert_eq!(eval_kernel(&c, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(eval_kernel(&c, &[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn kernel_errors() {
        assert_eq!(
            eval_kernel(&KernelSpec::gaussian(1.0), &[0.0], &[0.0, 1.0]),
            Err(SparkeError::DimensionMismatch { expected: 1, found: 2 })
        );
        assert_eq!(eval_kernel(&KernelSpec::Cosine, &[0.0, 0.0], &[1.0, 0.0]), Err(SparkeError::ZeroVector));
        assert_eq!(eval_kernel(&KernelSpec::gaussian(0.0), &[0.0], &[0.0]), Err(SparkeError::InvalidBandwidth(0.0)));
        assert!(eval_kernel(&KernelSpec::gaussian(-1.0), &[0.0], &[0.0]).is_err());
        assert!(eval_kernel_grad(&KernelSpec::Cosine, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = KernelSpec::gaussian(1.0);
        assert_eq!(eval_kernel_grad(&g, &[1.5, 2.0], &[1.5, 2.0]).unwrap(), vec![0.0, 0.0]);

        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        let fd = central_diff(&g, &a, &b, 1e-5);
        let grad = eval_kernel_grad(&g, &a, &b).unwrap();
        assert_relative_eq!(fd[0], -0.6065306597126334, max_relative = 1e-9);
        assert_relative_eq!(grad[0], -0.6065306597126334, max_relative = 1e-12);
        assert_eq!(grad[1], 0.0);

        let grad = eval_kernel_grad(&KernelSpec::Cosine, &[1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for trial in 0..200 {
            let d = rng.random_range(1..=8);
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let spec = if trial % 2 == 0 {
                KernelSpec::gaussian(rng.random_range(0.5..3.0))
            } else {
                KernelSpec::Cosine
            };
            let grad = eval_kernel_grad(&spec, &a, &b).unwrap();
            let fd = central_diff(&spec, &a, &b, h);
            let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let err = grad.iter().zip(&fd).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            assert!(err / scale < 1e-6, "trial {trial}: {grad:?} vs {fd:?}");
        }
    }

    #[test]
    fn matrix_examples() {
        let g = KernelSpec::gaussian(1.0);
        let one = build_kernel_matrix(&g, &[vec![3.0, 1.0]]).unwrap();
        assert_eq!(one.n(), 1);
        assert_eq!(one.get(0, 0), 1.0);

        let dup = build_kernel_matrix(&g, &[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(dup.entries().iter().all(|&v| v == 1.0));

        let k = build_kernel_matrix(&g, &[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_relative_eq!(k.get(0, 1), 0.6065306597126334, max_relative = 1e-12);
        assert_eq!(k.trace(), 2.0);

        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(build_kernel_matrix(&g, &empty), Err(SparkeError::EmptyInput));
        assert!(build_kernel_matrix(&g, &[vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn normalization() {
        let id = KernelMatrix::identity(4);
        assert_eq!(normalize_kernel_matrix(&id).unwrap(), id);

        let k = KernelMatrix::from_rows(2, &[4.0, 2.0, 2.0, 1.0]).unwrap();
        let nk = normalize_kernel_matrix(&k).unwrap();
        for v in nk.entries().iter() {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-15);
        }

        let g = build_kernel_matrix(&KernelSpec::gaussian(0.7), &[vec![0.0], vec![0.4], vec![2.0]]).unwrap();
        let again = normalize_kernel_matrix(&g).unwrap();
        for (a, b) in g.entries().iter().zip(again.entries().iter()) {
            assert!((a - b).abs() <= 1e-15);
        }

        let bad = KernelMatrix::from_rows(2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(normalize_kernel_matrix(&bad), Err(SparkeError::NonPositiveDiagonal { index: 1, value: 0.0 }));
    }

    #[test]
    fn hadamard_identities() {
        let a = build_kernel_matrix(&KernelSpec::gaussian(1.0), &[vec![0.0], vec![0.5], vec![3.0]]).unwrap();
        assert_eq!(hadamard(&a, &KernelMatrix::ones(3)).unwrap(), a);
        let diag = hadamard(&a, &KernelMatrix::identity(3)).unwrap();
        assert_eq!(diag, KernelMatrix::identity(3));
        assert_eq!(
            hadamard(&a, &KernelMatrix::identity(2)),
            Err(SparkeError::ShapeMismatch { left: 3, right: 2 })
        );
    }

    #[test]
    fn hadamard_of_random_psd_pair_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..50).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let a = build_kernel_matrix(&KernelSpec::gaussian(0.8), &pts(&mut rng)).unwrap();
        let b = build_kernel_matrix(&KernelSpec::Cosine, &pts(&mut rng)).unwrap();
        let h = hadamard(&a, &b).unwrap();
        assert!(h.min_eigenvalue() >= -1e-8);
        assert!(h.has_unit_diagonal(1e-12));
    }

    #[test]
    fn serde_kernel_spec() {
        let spec: KernelSpec = serde_json::from_str(r#"{"kind":"gaussian","bandwidth":0.8}"#).unwrap();
        assert_eq!(spec, KernelSpec::gaussian(0.8));
        let spec: KernelSpec = serde_json::from_str(r#"{"kind":"cosine"}"#).unwrap();
        assert_eq!(spec, KernelSpec::Cosine);
        assert!(serde_json::from_str::<KernelSpec>(r#"{"kind":"cosine","bandwidth":1}"#).is_err());
        assert!(serde_json::from_str::<KernelSpec>(r#"{"kind":"gaussian"}"#).is_err());
        assert!(serde_json::from_str::<KernelSpec>(r#"{"kind":"laplace","bandwidth":1}"#).is_err());
        for k in [KernelSpec::gaussian(0.3), KernelSpec::Cosine] {
            assert_eq!(serde_json::from_str::<KernelSpec>(&serde_json::to_string(&k).unwrap()).unwrap(), k);
        }
        assert_eq!(serde_json::to_string(&KernelSpec::Cosine).unwrap(), r#"{"kind":"cosine"}"#);
    }
}
