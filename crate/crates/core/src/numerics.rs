//! Deterministic numeric primitives shared by every other module: vectors on
//! the unit sphere, cosine geometry, an Adam optimizer step, central finite
//! differences for gradient audits, seeded RNG derivation, and a 2-D PCA
//! projection used for feature-separation exports.
//!
//! All arithmetic is 64-bit. Batched reductions accumulate in ascending index
//! order so repeated runs are bit-stable.

use std::ops::Deref;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Norms below this threshold are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense 64-bit float vector. Construction rejects non-finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEvaluation {
                context: "vector construction".to_string(),
            });
        }
        Ok(Self { data })
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &Self::Target {
        &self.data
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale a vector to unit Euclidean norm.
pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    let n = norm(v);
    if n < ZERO_NORM_EPS {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(Vector::from_raw(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity of two vectors. Symmetric, scale-invariant, in [-1, 1].
pub fn cosine_sim(u: &Vector, v: &Vector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let nu = norm(u);
    if nu < ZERO_NORM_EPS {
        return Err(Error::ZeroNorm { norm: nu });
    }
    let nv = norm(v);
    if nv < ZERO_NORM_EPS {
        return Err(Error::ZeroNorm { norm: nv });
    }
    Ok(dot(u, v) / (nu * nv))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// State of an Adam optimizer over one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vector,
    pub second_moment: Vector,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the standard defaults beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn new(dim: usize, lr: f64) -> Result<Self> {
        Self::with_hyperparams(dim, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("adam lr must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("adam {name} must be in (0,1), got {b}")));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("adam eps must be positive, got {eps}")));
        }
        Ok(Self {
            first_moment: Vector::zeros(dim),
            second_moment: Vector::zeros(dim),
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.first_moment.dim()
    }
}

/// One bias-corrected Adam update. Pure: returns the next state and the
/// updated parameters.
pub fn adam_step(state: &AdamState, params: &Vector, grad: &Vector) -> Result<(AdamState, Vector)> {
    let dim = state.dim();
    if params.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: params.dim(),
        });
    }
    if grad.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: grad.dim(),
        });
    }
    let t = state.step_count + 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);

    let mut m = Vec::with_capacity(dim);
    let mut v = Vec::with_capacity(dim);
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        let g = grad[i];
        let mi = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let vi = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        let m_hat = mi / bias1;
        let v_hat = vi / bias2;
        out.push(params[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps));
        m.push(mi);
        v.push(vi);
    }
    let next = AdamState {
        first_moment: Vector::from_raw(m),
        second_moment: Vector::from_raw(v),
        step_count: t,
        ..*state
    };
    Ok((next, Vector::from_raw(out)))
}

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// A 64-bit seed. Identical seed plus identical call sequence gives an
/// identical stream; `derive` splits independent child seeds by label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed {
    pub seed: u64,
}

impl RngSeed {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Deterministically derive a child seed for the given label.
    pub fn derive(&self, label: &str) -> RngSeed {
        let digest = self.digest(label);
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        RngSeed::new(u64::from_le_bytes(bytes))
    }

    /// Deterministic counter-based generator for this seed.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest("stream"))
    }

    fn digest(&self, label: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0x1f]);
        hasher.update(label.as_bytes());
        hasher.finalize().into()
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function: component `i` is
/// `(f(x + h·e_i) - f(x - h·e_i)) / (2h)`.
pub fn central_diff_grad<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {h}")));
    }
    let mut grad = Vec::with_capacity(x.dim());
    let mut probe = x.as_slice().to_vec();
    for i in 0..x.dim() {
        let base = probe[i];
        probe[i] = base + h;
        let fp = f(&Vector::from_raw(probe.clone()));
        probe[i] = base - h;
        let fm = f(&Vector::from_raw(probe.clone()));
        probe[i] = base;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation {
                context: format!("central difference at component {i}"),
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(Vector::from_raw(grad))
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Project points onto their top-2 principal components.
///
/// Deterministic sign convention: the first loading of each component with
/// magnitude above 1e-12 is made positive.
pub fn pca_project(points: &[Vector]) -> Result<Vec<[f64; 2]>> {
    if points.len() < 3 {
        return Err(Error::DatasetTooSmall {
            need: 3,
            got: points.len(),
        });
    }
    let dim = points[0].dim();
    if dim < 2 {
        return Err(Error::InvalidDims(format!(
            "pca projection needs dimension >= 2, got {dim}"
        )));
    }
    for p in points {
        if p.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
    }
    let n = points.len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p.iter()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Covariance with the 1/(n-1) convention; only directions matter for the
    // projection itself.
    let mut cov = vec![0.0; dim * dim];
    let mut centered = Vec::with_capacity(n);
    for p in points {
        let c: Vec<f64> = p.iter().zip(mean.iter()).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            let ci = c[i];
            let row = &mut cov[i * dim..(i + 1) * dim];
            for (j, rj) in row.iter_mut().enumerate() {
                *rj += ci * c[j];
            }
        }
        centered.push(c);
    }
    let denom = (n - 1) as f64;
    for v in &mut cov {
        *v /= denom;
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if trace < 1e-18 {
        return Err(Error::DegenerateCovariance);
    }

    let (eigvals, eigvecs) = jacobi_symmetric_eigen(cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]).then(a.cmp(&b)));

    let mut components = [vec![0.0; dim], vec![0.0; dim]];
    for (slot, &col) in order.iter().take(2).enumerate() {
        for i in 0..dim {
            components[slot][i] = eigvecs[i * dim + col];
        }
        if let Some(first) = components[slot].iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                for v in &mut components[slot] {
                    *v = -*v;
                }
            }
        }
    }

    Ok(centered
        .iter()
        .map(|c| [dot(c, &components[0]), dot(c, &components[1])])
        .collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns (eigenvalues, eigenvectors); eigenvector `j` is column `j`.
fn jacobi_symmetric_eigen(mut a: Vec<f64>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; dim * dim];
    for i in 0..dim {
        v[i * dim + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..dim {
            for q in (p + 1)..dim {
                off += a[p * dim + q] * a[p * dim + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..dim.saturating_sub(1) {
            for q in (p + 1)..dim {
                let apq = a[p * dim + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * dim + p];
                let aqq = a[q * dim + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[k * dim + p];
                    let akq = a[k * dim + q];
                    a[k * dim + p] = c * akp - s * akq;
                    a[k * dim + q] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[p * dim + k];
                    let aqk = a[q * dim + k];
                    a[p * dim + k] = c * apk - s * aqk;
                    a[q * dim + k] = s * apk + c * aqk;
                }
                for k in 0..dim {
                    let vkp = v[k * dim + p];
                    let vkq = v[k * dim + q];
                    v[k * dim + p] = c * vkp - s * vkq;
                    v[k * dim + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..dim).map(|i| a[i * dim + i]).collect();
    (eigvals, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn vec2(a: f64, b: f64) -> Vector {
        Vector::new(vec![a, b]).unwrap()
    }

    #[test]
    fn normalize_345_triangle() {
        let v = l2_normalize(&vec2(3.0, 4.0)).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_unit_vector_is_identity() {
        let v = l2_normalize(&Vector::new(vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_fails() {
        let err = l2_normalize(&vec2(0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::ZeroNorm { .. }));
    }

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine_sim(&vec2(1.0, 0.0), &vec2(1.0, 0.0)).unwrap(), 1.0);
        assert_eq!(cosine_sim(&vec2(1.0, 0.0), &vec2(0.0, 1.0)).unwrap(), 0.0);
        assert_eq!(cosine_sim(&vec2(1.0, 0.0), &vec2(-2.0, 0.0)).unwrap(), -1.0);
    }

    #[test]
    fn cosine_dim_mismatch() {
        let err = cosine_sim(&vec2(1.0, 0.0), &Vector::new(vec![1.0]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let state = AdamState::new(1, 0.1).unwrap();
        let (next, params) = adam_step(
            &state,
            &Vector::new(vec![0.0]).unwrap(),
            &Vector::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        assert!((params[0] + 0.1).abs() < 1e-6);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let state = AdamState::new(3, 0.1).unwrap();
        let p = Vector::new(vec![0.5, -0.25, 2.0]).unwrap();
        let (next, out) = adam_step(&state, &p, &Vector::zeros(3)).unwrap();
        assert_eq!(out, p);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn adam_constant_gradient_descends() {
        let state = AdamState::new(1, 0.1).unwrap();
        let p0 = Vector::new(vec![0.0]).unwrap();
        let g = Vector::new(vec![1.0]).unwrap();
        let (s1, p1) = adam_step(&state, &p0, &g).unwrap();
        let (_s2, p2) = adam_step(&s1, &p1, &g).unwrap();
        assert!(p1[0] < p0[0]);
        assert!(p2[0] < p1[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let state = AdamState::new(2, 0.05).unwrap();
        let p = Vector::new(vec![1.0, -1.0]).unwrap();
        let g = Vector::new(vec![0.3, 0.7]).unwrap();
        let (s1, o1) = adam_step(&state, &p, &g).unwrap();
        let (s2, o2) = adam_step(&state, &p, &g).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn central_diff_quadratic() {
        let f = |v: &Vector| v[0] * v[0];
        let g = central_diff_grad(f, &Vector::new(vec![3.0]).unwrap(), 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn central_diff_constant_is_zero() {
        let f = |_: &Vector| 4.25;
        let g = central_diff_grad(f, &Vector::new(vec![1.0, 2.0]).unwrap(), 1e-4).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn central_diff_rejects_non_finite() {
        let f = |v: &Vector| 1.0 / (v[0] - 1.0);
        let err = central_diff_grad(f, &Vector::new(vec![1.0 - 1e-4]).unwrap(), 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFiniteEvaluation { .. }));
    }

    #[test]
    fn seed_derivation_is_stable_and_split() {
        let s = RngSeed::new(42);
        assert_eq!(s.derive("a"), s.derive("a"));
        assert_ne!(s.derive("a"), s.derive("b"));
        assert_ne!(s.derive("a"), RngSeed::new(43).derive("a"));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = RngSeed::new(7).rng();
        let mut b = RngSeed::new(7).rng();
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn pca_collinear_points_have_zero_second_coordinate() {
        let dir = [1.0, -2.0, 0.5, 3.0, -1.0];
        let points: Vec<Vector> = (0..6)
            .map(|i| Vector::new(dir.iter().map(|d| d * i as f64).collect()).unwrap())
            .collect();
        let coords = pca_project(&points).unwrap();
        for c in coords {
            assert!(c[1].abs() < 1e-9, "second coordinate {} not ~0", c[1]);
        }
    }

    #[test]
    fn pca_preserves_cluster_separation() {
        let a = Vector::new(vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Vector::new(vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let points = vec![a.clone(), a.clone(), a, b.clone(), b.clone(), b];
        let coords = pca_project(&points).unwrap();
        let ca = [
            (coords[0][0] + coords[1][0] + coords[2][0]) / 3.0,
            (coords[0][1] + coords[1][1] + coords[2][1]) / 3.0,
        ];
        let cb = [
            (coords[3][0] + coords[4][0] + coords[5][0]) / 3.0,
            (coords[3][1] + coords[4][1] + coords[5][1]) / 3.0,
        ];
        let dist = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
        assert!(dist >= 10.0 * 0.99, "projected centroid distance {dist}");
    }

    #[test]
    fn pca_identical_points_degenerate() {
        let p = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let err = pca_project(&[p.clone(), p.clone(), p]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCovariance));
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = RngSeed::new(11).rng();
        for _ in 0..20 {
            let v = Vector::new((0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            if norm(&v) < 1e-6 {
                continue;
            }
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(twice.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cosine_is_scale_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 4),
            ys in proptest::collection::vec(-10.0f64..10.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let u = Vector::new(xs).unwrap();
            let v = Vector::new(ys).unwrap();
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let base = cosine_sim(&u, &v).unwrap();
            let su = Vector::new(u.iter().map(|x| a * x).collect()).unwrap();
            let sv = Vector::new(v.iter().map(|x| b * x).collect()).unwrap();
            let scaled = cosine_sim(&su, &sv).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
            prop_assert!(base.abs() <= 1.0 + 1e-9);
            let sym = cosine_sim(&v, &u).unwrap();
            prop_assert!((base - sym).abs() < 1e-12);
        }

        #[test]
        fn central_diff_exact_on_quadratics(
            coeffs in proptest::collection::vec(-3.0f64..3.0, 3),
            x in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            // f(x) = sum_i c_i x_i^2 + sum_i c_i x_i, gradient 2 c_i x_i + c_i
            let cs = coeffs.clone();
            let f = move |v: &Vector| {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += cs[i] * v[i] * v[i] + cs[i] * v[i];
                }
                acc
            };
            let point = Vector::new(x.clone()).unwrap();
            let g = central_diff_grad(f, &point, 1e-4).unwrap();
            for i in 0..3 {
                let expect = 2.0 * coeffs[i] * x[i] + coeffs[i];
                prop_assert!((g[i] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_reorder_invariance_without_duplicates() {
        let mut rng = RngSeed::new(5).rng();
        let points: Vec<Vector> = (0..8)
            .map(|_| Vector::new((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let coords = pca_project(&points).unwrap();
        let perm = [3usize, 0, 7, 1, 5, 2, 6, 4];
        let shuffled: Vec<Vector> = perm.iter().map(|&i| points[i].clone()).collect();
        let coords_shuffled = pca_project(&shuffled).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            for k in 0..2 {
                assert!(
                    (coords_shuffled[slot][k] - coords[src][k]).abs() < 1e-9,
                    "coordinate drift after reorder"
                );
            }
        }
    }
}
