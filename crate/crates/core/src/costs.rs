//! Local cost functions and the Newton ingredients built from them.
//!
//! Every node owns one [`CostModel`]. Besides value, gradient and Hessian,
//! the model supplies the pair `(g, h)` that the node feeds into consensus:
//! `h` is the Hessian (or a cheaper surrogate, see [`DescentVariant`]) and
//! `g = h x - grad f(x)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{is_symmetric, Matrix, Vector};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("quadratic matrix must be symmetric")]
    NotSymmetric,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("regularizer must be non-negative, got {0}")]
    InvalidRegularizer(f64),
}

/// Which curvature matrix a node shares with the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DescentVariant {
    /// Full Hessian.
    #[default]
    NewtonRaphson,
    /// Diagonal of the Hessian.
    Jacobi,
    /// Identity.
    Gradient,
}

impl DescentVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            DescentVariant::NewtonRaphson => "newton-raphson",
            DescentVariant::Jacobi => "jacobi",
            DescentVariant::Gradient => "gradient",
        }
    }
}

impl std::str::FromStr for DescentVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "newton-raphson" | "newton" | "nr" => Ok(DescentVariant::NewtonRaphson),
            "jacobi" => Ok(DescentVariant::Jacobi),
            "gradient" => Ok(DescentVariant::Gradient),
            other => Err(format!("unknown descent variant {other:?}")),
        }
    }
}

/// `f(x) = 1/2 (x - center)^T A (x - center)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    a: Matrix,
    center: Vector,
}

impl Quadratic {
    pub fn new(a: Matrix, center: Vector) -> Result<Self, CostError> {
        if a.nrows() != center.len() || a.ncols() != center.len() {
            return Err(CostError::DimensionMismatch {
                expected: center.len(),
                found: a.nrows(),
            });
        }
        if !is_symmetric(&a, 1e-12) {
            return Err(CostError::NotSymmetric);
        }
        Ok(Self { a, center })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }

    /// Linear term `b = A center`, so that `grad f(x) = A x - b`.
    pub fn linear_term(&self) -> Vector {
        &self.a * &self.center
    }

    /// Random instance with eigenvalues drawn uniformly from
    /// `[1, max_condition]` and a standard normal center.
    pub fn random<R: Rng + ?Sized>(dim: usize, max_condition: f64, rng: &mut R) -> Self {
        assert!(max_condition >= 1.0);
        let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = gauss.qr().q();
        let eig = Vector::from_fn(dim, |_, _| rng.random_range(1.0..=max_condition));
        let mut a = &q * Matrix::from_diagonal(&eig) * q.transpose();
        symmetrize(&mut a);
        let center = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self { a, center }
    }
}

/// Regularized logistic loss over a local set of labeled samples:
/// `sum_j log(1 + exp(-y_j (chi_j . x' + x0))) + gamma |x'|^2`.
///
/// The parameter vector is `x = (x', x0)`; the intercept is the last
/// coordinate and is not regularized.
#[derive(Debug, Clone, PartialEq)]
pub struct BinomialDeviance {
    features: Vec<f64>,
    labels: Vec<f64>,
    n_features: usize,
    gamma: f64,
}

impl BinomialDeviance {
    /// `features` holds one row per sample; labels must be `-1` or `+1`.
    pub fn new(rows: &[Vec<f64>], labels: &[f64], gamma: f64) -> Result<Self, CostError> {
        let n_features = rows.first().map_or(0, Vec::len);
        Self::with_width(rows, labels, n_features, gamma)
    }

    /// Like [`new`](Self::new) but with an explicit feature width, so that a
    /// node holding no samples still has the right dimension.
    pub fn with_width(
        rows: &[Vec<f64>],
        labels: &[f64],
        n_features: usize,
        gamma: f64,
    ) -> Result<Self, CostError> {
        if rows.len() != labels.len() {
            return Err(CostError::DimensionMismatch {
                expected: rows.len(),
                found: labels.len(),
            });
        }
        if !(gamma >= 0.0) {
            return Err(CostError::InvalidRegularizer(gamma));
        }
        let mut features = Vec::with_capacity(rows.len() * n_features);
        for row in rows {
            if row.len() != n_features {
                return Err(CostError::DimensionMismatch {
                    expected: n_features,
                    found: row.len(),
                });
            }
            features.extend_from_slice(row);
        }
        Ok(Self {
            features,
            labels: labels.to_vec(),
            n_features,
            gamma,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        let n = self.n_features;
        self.labels
            .iter()
            .enumerate()
            .map(move |(k, &y)| (&self.features[k * n..(k + 1) * n], y))
    }

    fn margin(&self, row: &[f64], x: &Vector) -> f64 {
        let n = self.n_features;
        row[..n].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + x[n]
    }

    fn value(&self, x: &Vector) -> f64 {
        let n = self.n_features;
        let loss: f64 = self
            .rows()
            .map(|(row, y)| softplus(-y * self.margin(row, x)))
            .sum();
        let reg: f64 = x.iter().take(n).map(|v| v * v).sum();
        loss + self.gamma * reg
    }

    /// Gradient and Hessian in one pass over the samples.
    fn derivatives(&self, x: &Vector, want_hessian: bool) -> (Vector, Matrix) {
        let n = self.n_features;
        let dim = n + 1;
        let mut grad = Vector::zeros(dim);
        let mut hess = Matrix::zeros(dim, dim);
        let mut aug = vec![1.0; dim];
        for (row, y) in self.rows() {
            aug[..n].copy_from_slice(&row[..n]);
            let s = logistic(-y * self.margin(row, x));
            let gcoef = -y * s;
            for (g, a) in grad.iter_mut().zip(&aug) {
                *g += gcoef * a;
            }
            if want_hessian {
                let w = s * (1.0 - s);
                for c in 0..dim {
                    let wc = w * aug[c];
                    for r in c..dim {
                        hess[(r, c)] += wc * aug[r];
                    }
                }
            }
        }
        for k in 0..n {
            grad[k] += 2.0 * self.gamma * x[k];
            hess[(k, k)] += 2.0 * self.gamma;
        }
        if want_hessian {
            for c in 0..dim {
                for r in (c + 1)..dim {
                    hess[(c, r)] = hess[(r, c)];
                }
            }
        }
        (grad, hess)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `1 / (1 + exp(-t))` without overflow.
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for c in 0..n {
        for r in (c + 1)..n {
            let avg = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = avg;
            m[(c, r)] = avg;
        }
    }
}

/// A node's local objective.
#[derive(Debug, Clone, PartialEq)]
pub enum CostModel {
    Quadratic(Quadratic),
    BinomialDeviance(BinomialDeviance),
}

impl From<Quadratic> for CostModel {
    fn from(q: Quadratic) -> Self {
        CostModel::Quadratic(q)
    }
}

impl From<BinomialDeviance> for CostModel {
    fn from(b: BinomialDeviance) -> Self {
        CostModel::BinomialDeviance(b)
    }
}

impl CostModel {
    pub fn dimension(&self) -> usize {
        match self {
            CostModel::Quadratic(q) => q.center.len(),
            CostModel::BinomialDeviance(b) => b.n_features + 1,
        }
    }

    fn check(&self, x: &Vector) -> Result<(), CostError> {
        let expected = self.dimension();
        if x.len() != expected {
            return Err(CostError::DimensionMismatch {
                expected,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &Vector) -> Result<f64, CostError> {
        self.check(x)?;
        Ok(match self {
            CostModel::Quadratic(q) => {
                let d = x - &q.center;
                0.5 * d.dot(&(&q.a * &d))
            }
            CostModel::BinomialDeviance(b) => b.value(x),
        })
    }

    pub fn gradient(&self, x: &Vector) -> Result<Vector, CostError> {
        self.check(x)?;
        Ok(match self {
            CostModel::Quadratic(q) => &q.a * (x - &q.center),
            CostModel::BinomialDeviance(b) => b.derivatives(x, false).0,
        })
    }

    pub fn hessian(&self, x: &Vector) -> Result<Matrix, CostError> {
        self.check(x)?;
        Ok(match self {
            CostModel::Quadratic(q) => q.a.clone(),
            CostModel::BinomialDeviance(b) => b.derivatives(x, true).1,
        })
    }

    fn gradient_and_hessian(&self, x: &Vector) -> Result<(Vector, Matrix), CostError> {
        self.check(x)?;
        Ok(match self {
            CostModel::Quadratic(q) => (&q.a * (x - &q.center), q.a.clone()),
            CostModel::BinomialDeviance(b) => b.derivatives(x, true),
        })
    }

    /// Curvature matrix shared by the node under `variant`.
    pub fn local_h(&self, x: &Vector, variant: DescentVariant) -> Result<Matrix, CostError> {
        Ok(self.local_pair(x, variant)?.1)
    }

    /// `h x - grad f(x)`, with `h` taken from the same variant.
    pub fn local_g(&self, x: &Vector, variant: DescentVariant) -> Result<Vector, CostError> {
        Ok(self.local_pair(x, variant)?.0)
    }

    /// `(g, h)` evaluated together.
    pub fn local_pair(
        &self,
        x: &Vector,
        variant: DescentVariant,
    ) -> Result<(Vector, Matrix), CostError> {
        let n = self.dimension();
        let (grad, h) = match variant {
            DescentVariant::NewtonRaphson => self.gradient_and_hessian(x)?,
            DescentVariant::Jacobi => {
                let (grad, full) = self.gradient_and_hessian(x)?;
                (grad, Matrix::from_diagonal(&full.diagonal()))
            }
            DescentVariant::Gradient => (self.gradient(x)?, Matrix::identity(n, n)),
        };
        let g = &h * x - grad;
        Ok((g, h))
    }
}

/// Worst finite-difference disagreement, relative to `max(1, |analytic|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeReport {
    pub max_grad_err: f64,
    pub max_hess_err: f64,
}

/// Compares the analytic gradient and Hessian against central differences
/// of the value and of the gradient respectively.
pub fn check_derivatives(
    model: &CostModel,
    x: &Vector,
    step: f64,
) -> Result<DerivativeReport, CostError> {
    if !(step > 0.0) {
        return Err(CostError::InvalidStep(step));
    }
    let n = model.dimension();
    let grad = model.gradient(x)?;
    let hess = model.hessian(x)?;

    let mut fd_grad = Vector::zeros(n);
    let mut fd_hess = Matrix::zeros(n, n);
    for k in 0..n {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += step;
        minus[k] -= step;
        fd_grad[k] = (model.eval(&plus)? - model.eval(&minus)?) / (2.0 * step);
        let column = (model.gradient(&plus)? - model.gradient(&minus)?) / (2.0 * step);
        fd_hess.set_column(k, &column);
    }

    let grad_scale = grad.amax().max(1.0);
    let hess_scale = hess.amax().max(1.0);
    Ok(DerivativeReport {
        max_grad_err: (&fd_grad - &grad).amax() / grad_scale,
        max_hess_err: (&fd_hess - &hess).amax() / hess_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_rows() -> (Vec<Vec<f64>>, Vec<f64>) {
        let rows = vec![
            vec![0.1, 0.0, 1.2],
            vec![0.0, 0.5, 0.3],
            vec![2.0, 0.1, 0.0],
            vec![0.3, 0.3, 0.3],
            vec![1.1, 0.0, 0.7],
        ];
        let labels = vec![1.0, -1.0, 1.0, -1.0, -1.0];
        (rows, labels)
    }

    fn toy() -> CostModel {
        let (rows, labels) = toy_rows();
        BinomialDeviance::new(&rows, &labels, 0.05).unwrap().into()
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn deviance_single_zero_sample_is_log_two() {
        let m: CostModel = BinomialDeviance::new(&[vec![0.0, 0.0]], &[1.0], 0.3)
            .unwrap()
            .into();
        let x = Vector::zeros(3);
        assert!((m.eval(&x).unwrap() - 2f64.ln()).abs() < 1e-15);

        let g = m.gradient(&x).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, -0.5]);

        let h = m.hessian(&x).unwrap();
        assert_eq!(h[(2, 2)], 0.25);
        assert_eq!(h[(0, 0)], 2.0 * 0.3);
        assert_eq!(h[(1, 1)], 2.0 * 0.3);
        assert_eq!(h[(0, 1)], 0.0);
    }

    #[test]
    fn deviance_matches_termwise_oracle() {
        let (rows, labels) = toy_rows();
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_point(&mut rng, 4);
            let mut expected = 0.0;
            for (row, y) in rows.iter().zip(&labels) {
                let u = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + x[3];
                expected += (1.0 + (-y * u).exp()).ln();
            }
            expected += 0.05 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
            let got = m.eval(&x).unwrap();
            assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((logistic(-800.0)).abs() < 1e-300);
        assert_eq!(logistic(800.0), 1.0);
    }

    #[test]
    fn quadratic_basics() {
        let a = Vector::from_vec(vec![1.0, -2.0]);
        let q: CostModel = Quadratic::new(Matrix::identity(2, 2), a.clone()).unwrap().into();
        assert_eq!(q.eval(&a).unwrap(), 0.0);
        assert_eq!(q.gradient(&a).unwrap(), Vector::zeros(2));

        let am = Matrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let q: CostModel = Quadratic::new(am.clone(), a.clone()).unwrap().into();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let x = random_point(&mut rng, 2);
            assert_eq!(q.hessian(&x).unwrap(), am);
            let g = q.local_g(&x, DescentVariant::NewtonRaphson).unwrap();
            assert!((g - &am * &a).amax() < 1e-12);
        }
    }

    #[test]
    fn quadratic_rejects_bad_input() {
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert_eq!(
            Quadratic::new(bad, Vector::zeros(2)),
            Err(CostError::NotSymmetric)
        );
        assert!(matches!(
            Quadratic::new(Matrix::identity(3, 3), Vector::zeros(2)),
            Err(CostError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = toy();
        let x = Vector::zeros(3);
        assert_eq!(
            m.eval(&x),
            Err(CostError::DimensionMismatch {
                expected: 4,
                found: 3
            })
        );
        assert!(m.gradient(&x).is_err());
        assert!(m.hessian(&x).is_err());
    }

    #[test]
    fn variants_pick_surrogates() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_point(&mut rng, 4);
        let full = m.hessian(&x).unwrap();

        let h_grad = m.local_h(&x, DescentVariant::Gradient).unwrap();
        assert_eq!(h_grad, Matrix::identity(4, 4));

        let h_jac = m.local_h(&x, DescentVariant::Jacobi).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c { full[(r, c)] } else { 0.0 };
                assert_eq!(h_jac[(r, c)], want);
            }
        }

        // Jacobi on a two-dimensional deviance model (one feature + intercept).
        let two: CostModel = BinomialDeviance::new(&[vec![0.4], vec![-1.0]], &[1.0, -1.0], 0.1)
            .unwrap()
            .into();
        let x2 = Vector::from_vec(vec![0.3, -0.2]);
        let h2 = two.local_h(&x2, DescentVariant::Jacobi).unwrap();
        assert_eq!(h2, Matrix::from_diagonal(&two.hessian(&x2).unwrap().diagonal()));

        for variant in [DescentVariant::Jacobi, DescentVariant::Gradient] {
            let (g, h) = m.local_pair(&x, variant).unwrap();
            let grad = m.gradient(&x).unwrap();
            assert!((&h * &x - g - grad).amax() < 1e-12);
        }
    }

    #[test]
    fn newton_pair_reproduces_gradient() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let x = random_point(&mut rng, 4);
            let (g, h) = m.local_pair(&x, DescentVariant::NewtonRaphson).unwrap();
            let grad = m.gradient(&x).unwrap();
            assert!((&h * &x - g - grad).amax() < 1e-12);
            assert_eq!(h, m.hessian(&x).unwrap());
        }
    }

    #[test]
    fn hessians_are_symmetric_and_positive() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_point(&mut rng, 4);
            let h = m.hessian(&x).unwrap();
            assert_eq!(h, h.transpose());
            assert!(min_eigenvalue(&h) > 0.0);
        }
        for _ in 0..20 {
            let q = Quadratic::random(4, 100.0, &mut rng);
            let eig = q.matrix().clone().symmetric_eigen().eigenvalues;
            assert!(eig.min() >= 1.0 - 1e-9 && eig.max() <= 100.0 + 1e-9);
            assert_eq!(q.matrix(), &q.matrix().transpose());
        }
    }

    #[test]
    fn derivative_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q: CostModel = Quadratic::random(3, 10.0, &mut rng).into();
        let x = random_point(&mut rng, 3);
        let r = check_derivatives(&q, &x, 1e-4).unwrap();
        assert!(r.max_grad_err < 1e-8 && r.max_hess_err < 1e-8, "{r:?}");

        let m = toy();
        for _ in 0..20 {
            let x = random_point(&mut rng, 4);
            let r = check_derivatives(&m, &x, 1e-5).unwrap();
            assert!(r.max_grad_err < 1e-5 && r.max_hess_err < 1e-5, "{r:?}");
        }

        assert_eq!(
            check_derivatives(&m, &Vector::zeros(4), 0.0),
            Err(CostError::InvalidStep(0.0))
        );
    }

    #[test]
    fn empty_node_keeps_dimension() {
        let m: CostModel = BinomialDeviance::with_width(&[], &[], 3, 0.01).unwrap().into();
        assert_eq!(m.dimension(), 4);
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!((m.eval(&x).unwrap() - 0.01 * 14.0).abs() < 1e-15);
        assert_eq!(m.hessian(&x).unwrap()[(3, 3)], 0.0);
    }
}
