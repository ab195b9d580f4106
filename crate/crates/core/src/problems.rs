//! Smooth objectives satisfying the Polyak-Lojasiewicz inequality, with
//! certified constants: smoothness `L`, PL constant `l`, and optimum `f*`.
//!
//! Every problem is immutable after construction and carries the test box
//! on which its constants are certified. Finite-sum problems additionally
//! expose per-component gradients whose mean equals the full gradient
//! exactly (same summation, same rounding).

use nalgebra::{DMatrix, DVector};

use crate::oracle::RngStream;
use crate::{Error, Result};

/// Certification box used unless a problem declares its own.
pub const DEFAULT_TEST_BOX: (f64, f64) = (-5.0, 5.0);

/// Points with `f(x) - f*` below this are skipped by the PL-ratio
/// estimator; the ratio is 0/0 at optima.
pub const DEGENERATE_GAP: f64 = 1e-12;

const REFERENCE_GRAD_TOL: f64 = 1e-13;
const REFERENCE_MAX_ITERS: usize = 10_000_000;

#[derive(Debug, Clone)]
enum Objective {
    Quadratic { eigenvalues: Vec<f64>, offset: Vec<f64> },
    LeastSquares { rows: Vec<Vec<f64>>, target: Vec<f64> },
    Logistic { rows: Vec<Vec<f64>>, labels: Vec<f64>, reg: f64 },
    SinSquared,
}

/// A smooth PL objective with certified constants.
#[derive(Debug, Clone)]
pub struct Problem {
    name: String,
    dim: usize,
    f_star: f64,
    smoothness: f64,
    pl_constant: f64,
    test_box: (f64, f64),
    /// Gradient norm reached by the reference solver when `f*` was
    /// certified numerically (logistic only).
    f_star_residual: Option<f64>,
    objective: Objective,
}

impl Problem {
    /// `f(x) = 1/2 (x-offset)^T diag(eigenvalues) (x-offset)`.
    ///
    /// `L` is the largest eigenvalue, `l` the smallest strictly positive
    /// one; zero eigenvalues are allowed (the rank-deficient case is
    /// still PL), but not all of them may vanish.
    pub fn quadratic(eigenvalues: &[f64], offset: &[f64]) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidProblem("quadratic needs at least one eigenvalue".into()));
        }
        if eigenvalues.len() != offset.len() {
            return Err(Error::InvalidProblem(format!(
                "quadratic has {} eigenvalues but offset of dimension {}",
                eigenvalues.len(),
                offset.len()
            )));
        }
        if eigenvalues.iter().any(|e| !e.is_finite() || *e < 0.0)
            || offset.iter().any(|o| !o.is_finite())
        {
            return Err(Error::InvalidProblem(
                "quadratic eigenvalues must be finite and nonnegative, offset finite".into(),
            ));
        }
        let l_max = eigenvalues.iter().cloned().fold(0.0, f64::max);
        let l_min_pos = eigenvalues
            .iter()
            .cloned()
            .filter(|e| *e > 0.0)
            .fold(f64::INFINITY, f64::min);
        if l_max == 0.0 {
            return Err(Error::InvalidProblem(
                "all eigenvalues are zero: f is constant and the PL constant is undefined".into(),
            ));
        }
        Ok(Self {
            name: format!("quadratic-d{}", eigenvalues.len()),
            dim: eigenvalues.len(),
            f_star: 0.0,
            smoothness: l_max,
            pl_constant: l_min_pos,
            test_box: DEFAULT_TEST_BOX,
            f_star_residual: None,
            objective: Objective::Quadratic {
                eigenvalues: eigenvalues.to_vec(),
                offset: offset.to_vec(),
            },
        })
    }

    /// `f(x) = 1/(2m) ||Ax - b||^2` for a consistent system (`b` in the
    /// column space of `A`), so `f* = 0` is certified. Finite-sum
    /// components are `l_j(x) = 1/2 (a_j^T x - b_j)^2`.
    pub fn least_squares(rows: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::InvalidProblem("least squares needs at least one row".into()));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidProblem("least squares rows must share a positive dimension".into()));
        }
        if target.len() != m {
            return Err(Error::InvalidProblem(format!(
                "least squares has {m} rows but target of length {}",
                target.len()
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) || target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("least squares data must be finite".into()));
        }
        let a = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
        let b = DVector::from_column_slice(&target);
        // consistency check: the least-squares residual must vanish
        let svd = a.clone().svd(true, true);
        let x_hat = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::InvalidProblem(format!("least squares solve failed: {e}")))?;
        let residual = (&a * &x_hat - &b).norm();
        if residual > 1e-8 * (1.0 + b.norm()) {
            return Err(Error::InvalidProblem(format!(
                "target is not in the column space of the matrix (residual {residual:.3e}); \
                 f* = 0 cannot be certified"
            )));
        }
        let (l_max, l_min_pos) = gram_spectrum(&a)?;
        Ok(Self {
            name: format!("least-squares-{m}x{d}"),
            dim: d,
            f_star: 0.0,
            smoothness: l_max / m as f64,
            pl_constant: l_min_pos / m as f64,
            test_box: DEFAULT_TEST_BOX,
            f_star_residual: None,
            objective: Objective::LeastSquares { rows, target },
        })
    }

    /// Regularized logistic regression
    /// `f(x) = 1/m sum_j log(1 + exp(-y_j a_j^T x)) + reg/2 ||x||^2`.
    ///
    /// Strong convexity gives `l = reg`; `L = lambda_max(A^T A)/(4m) + reg`.
    /// `f*` is certified by a high-precision reference descent (plain
    /// gradient descent, step `1/L`, until the gradient norm is below
    /// 1e-13); the achieved gradient norm is stored for reporting.
    pub fn logistic(rows: Vec<Vec<f64>>, labels: Vec<f64>, reg: f64) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::InvalidProblem("logistic needs at least one row".into()));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidProblem("logistic rows must share a positive dimension".into()));
        }
        if labels.len() != m {
            return Err(Error::InvalidProblem(format!(
                "logistic has {m} rows but {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(Error::InvalidProblem("logistic labels must be +1 or -1".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("logistic features must be finite".into()));
        }
        if !(reg > 0.0) || !reg.is_finite() {
            return Err(Error::InvalidProblem(
                "regularization must be strictly positive; the PL constant is not \
                 certified by this constructor otherwise"
                    .into(),
            ));
        }
        let a = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
        let (l_max, _) = gram_spectrum(&a).unwrap_or((0.0, 0.0));
        let smoothness = l_max / (4.0 * m as f64) + reg;
        let objective = Objective::Logistic { rows, labels, reg };
        let (f_star, residual) = reference_minimum(&objective, d, smoothness);
        Ok(Self {
            name: format!("logistic-{m}x{d}"),
            dim: d,
            f_star,
            smoothness,
            pl_constant: reg,
            test_box: DEFAULT_TEST_BOX,
            f_star_residual: Some(residual),
            objective,
        })
    }

    /// 1-d non-convex PL example `f(x) = x^2 + 3 sin^2(x)` with `f* = 0`
    /// at `x = 0`. `L = 8` bounds `sup |f''| = sup |2 + 6 cos 2x|`; the PL
    /// constant is certified by a dense grid search over the test box
    /// `[-10, 10]`.
    pub fn sin_pl() -> Self {
        let test_box = (-10.0, 10.0);
        // ratio 1/2 f'(x)^2 / f(x) minimized on a 5e-5 grid
        let steps = 400_000usize;
        let width = test_box.1 - test_box.0;
        let mut l = f64::INFINITY;
        for i in 0..=steps {
            let x = test_box.0 + width * i as f64 / steps as f64;
            let gap = sin_pl_value(x);
            if gap < DEGENERATE_GAP {
                continue;
            }
            let g = sin_pl_gradient(x);
            l = l.min(0.5 * g * g / gap);
        }
        Self {
            name: "sin-pl".into(),
            dim: 1,
            f_star: 0.0,
            smoothness: 8.0,
            pl_constant: l,
            test_box,
            f_star_residual: None,
            objective: Objective::SinSquared,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    /// Smoothness constant `L`.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// PL constant `l`.
    pub fn pl_constant(&self) -> f64 {
        self.pl_constant
    }

    pub fn test_box(&self) -> (f64, f64) {
        self.test_box
    }

    pub fn f_star_residual(&self) -> Option<f64> {
        self.f_star_residual
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.objective {
            Objective::Quadratic { eigenvalues, offset } => {
                let mut s = 0.0;
                for i in 0..x.len() {
                    let z = x[i] - offset[i];
                    s += eigenvalues[i] * z * z;
                }
                0.5 * s
            }
            Objective::LeastSquares { rows, target } => {
                let m = rows.len() as f64;
                let mut s = 0.0;
                for (row, b) in rows.iter().zip(target) {
                    let r = dot(row, x) - b;
                    s += 0.5 * r * r;
                }
                s / m
            }
            Objective::Logistic { rows, labels, reg } => {
                let m = rows.len() as f64;
                let mut s = 0.0;
                for (row, y) in rows.iter().zip(labels) {
                    s += log1p_exp_neg(y * dot(row, x));
                }
                s / m + 0.5 * reg * dot(x, x)
            }
            Objective::SinSquared => sin_pl_value(x[0]),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        match &self.objective {
            Objective::Quadratic { eigenvalues, offset } => (0..x.len())
                .map(|i| eigenvalues[i] * (x[i] - offset[i]))
                .collect(),
            // finite-sum objectives: literally the mean of component
            // gradients, so the finite-sum consistency is exact in
            // floating point as well
            Objective::LeastSquares { rows, .. } | Objective::Logistic { rows, .. } => {
                let m = rows.len();
                let mut acc = vec![0.0; self.dim];
                for j in 0..m {
                    let g = self.component_gradient(j, x);
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                let inv = 1.0 / m as f64;
                for a in &mut acc {
                    *a *= inv;
                }
                acc
            }
            Objective::SinSquared => vec![sin_pl_gradient(x[0])],
        }
    }

    /// Number of finite-sum components, when the problem has that structure.
    pub fn component_count(&self) -> Option<usize> {
        match &self.objective {
            Objective::LeastSquares { rows, .. } | Objective::Logistic { rows, .. } => {
                Some(rows.len())
            }
            _ => None,
        }
    }

    pub fn has_finite_sum(&self) -> bool {
        self.component_count().is_some()
    }

    /// Gradient of the j-th finite-sum component.
    ///
    /// Panics if the problem has no finite-sum structure or `j` is out of
    /// range; callers go through [`crate::oracle::sample_gradient`].
    pub fn component_gradient(&self, j: usize, x: &[f64]) -> Vec<f64> {
        match &self.objective {
            Objective::LeastSquares { rows, target } => {
                let r = dot(&rows[j], x) - target[j];
                rows[j].iter().map(|a| a * r).collect()
            }
            Objective::Logistic { rows, labels, reg } => {
                let y = labels[j];
                let margin = y * dot(&rows[j], x);
                let s = 1.0 / (1.0 + margin.exp()); // sigma(-margin)
                rows[j]
                    .iter()
                    .zip(x)
                    .map(|(a, xi)| -y * s * a + reg * xi)
                    .collect()
            }
            _ => panic!("problem '{}' has no finite-sum structure", self.name),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ln(1 + exp(-t)) without overflow for large |t|.
fn log1p_exp_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p() - t
    }
}

fn sin_pl_value(x: f64) -> f64 {
    let s = x.sin();
    x * x + 3.0 * s * s
}

fn sin_pl_gradient(x: f64) -> f64 {
    2.0 * x + 3.0 * (2.0 * x).sin()
}

/// Largest and smallest strictly positive eigenvalue of `A^T A`.
fn gram_spectrum(a: &DMatrix<f64>) -> Result<(f64, f64)> {
    let gram = a.transpose() * a;
    let eigs = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .collect::<Vec<f64>>();
    let l_max = eigs.iter().cloned().fold(0.0, f64::max);
    let tol = l_max.max(1.0) * 1e-12;
    let l_min_pos = eigs
        .iter()
        .cloned()
        .filter(|e| *e > tol)
        .fold(f64::INFINITY, f64::min);
    if l_max <= 0.0 || !l_min_pos.is_finite() {
        return Err(Error::InvalidProblem("design matrix is zero".into()));
    }
    Ok((l_max, l_min_pos))
}

/// Plain gradient descent with step 1/L until the gradient norm falls
/// below 1e-13 (cap 1e7 iterations). Returns the reached value and the
/// achieved gradient norm. Independent of the adaptive optimizers it is
/// used to judge.
fn reference_minimum(objective: &Objective, dim: usize, smoothness: f64) -> (f64, f64) {
    let probe = Problem {
        name: "reference".into(),
        dim,
        f_star: 0.0,
        smoothness,
        pl_constant: 1.0,
        test_box: DEFAULT_TEST_BOX,
        f_star_residual: None,
        objective: objective.clone(),
    };
    let step = 1.0 / smoothness;
    let mut x = vec![0.0; dim];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..REFERENCE_MAX_ITERS {
        let g = probe.gradient(&x);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm <= REFERENCE_GRAD_TOL {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= step * gi;
        }
    }
    (probe.value(&x), grad_norm)
}

/// Minimum of `1/2 ||grad f||^2 / (f - f*)` over uniform samples in the
/// box, skipping degenerate points. This is the empirical PL constant:
/// it must not undercut a declared `l` by more than sampling slack, and
/// it is the certified constant when no `l` is declared.
pub fn estimate_pl_constant(
    problem: &Problem,
    bounds: (f64, f64),
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if samples < 1_000 {
        return Err(Error::InvalidParameter(
            "PL estimation needs at least 1000 samples".into(),
        ));
    }
    let mut best = f64::INFINITY;
    for _ in 0..samples {
        let x = rng.vector_in_box(problem.dim(), bounds.0, bounds.1);
        let gap = problem.value(&x) - problem.f_star();
        if gap < DEGENERATE_GAP {
            continue;
        }
        let g = problem.gradient(&x);
        let ratio = 0.5 * g.iter().map(|v| v * v).sum::<f64>() / gap;
        best = best.min(ratio);
    }
    if !best.is_finite() {
        return Err(Error::Analysis("box contains only optima".into()));
    }
    Ok(best)
}

/// Max over sampled points of the relative error between the analytic
/// gradient and a central finite difference (per-coordinate step 1e-6).
pub fn max_fd_gradient_rel_err(problem: &Problem, points: usize, rng: &mut RngStream) -> f64 {
    let h = 1e-6;
    let (lo, hi) = problem.test_box();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x = rng.vector_in_box(problem.dim(), lo, hi);
        let g = problem.gradient(&x);
        let mut fd = vec![0.0; problem.dim()];
        let mut xp = x.clone();
        for i in 0..problem.dim() {
            xp[i] = x[i] + h;
            let fp = problem.value(&xp);
            xp[i] = x[i] - h;
            let fm = problem.value(&xp);
            xp[i] = x[i];
            fd[i] = (fp - fm) / (2.0 * h);
        }
        let err: f64 = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(err / scale);
    }
    worst
}

/// Min over sampled non-degenerate points of
/// `(1/2 ||grad f||^2) / (l (f - f*))`; the PL certificate requires this
/// to stay above 0.99.
pub fn pl_certificate_min_margin(problem: &Problem, points: usize, rng: &mut RngStream) -> f64 {
    let (lo, hi) = problem.test_box();
    let mut worst = f64::INFINITY;
    for _ in 0..points {
        let x = rng.vector_in_box(problem.dim(), lo, hi);
        let gap = problem.value(&x) - problem.f_star();
        if gap < DEGENERATE_GAP {
            continue;
        }
        let g = problem.gradient(&x);
        let margin = 0.5 * g.iter().map(|v| v * v).sum::<f64>() / (problem.pl_constant() * gap);
        worst = worst.min(margin);
    }
    worst
}

/// Max over sampled pairs of `||grad f(x) - grad f(y)|| / (L ||x - y||)`;
/// the smoothness certificate requires this to stay below 1.01.
pub fn smoothness_certificate_max_ratio(
    problem: &Problem,
    pairs: usize,
    rng: &mut RngStream,
) -> f64 {
    let (lo, hi) = problem.test_box();
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = rng.vector_in_box(problem.dim(), lo, hi);
        let y = rng.vector_in_box(problem.dim(), lo, hi);
        let dist: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        let gx = problem.gradient(&x);
        let gy = problem.gradient(&y);
        let diff: f64 = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / (problem.smoothness() * dist));
    }
    worst
}

/// Max absolute deviation between the mean of component gradients and the
/// full gradient over sampled points. Zero for this crate's finite-sum
/// problems: the full gradient is computed as that mean.
pub fn finite_sum_max_deviation(
    problem: &Problem,
    points: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let m = problem.component_count().ok_or_else(|| {
        Error::InvalidParameter(format!(
            "problem '{}' has no finite-sum structure",
            problem.name()
        ))
    })?;
    let (lo, hi) = problem.test_box();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x = rng.vector_in_box(problem.dim(), lo, hi);
        let mut acc = vec![0.0; problem.dim()];
        for j in 0..m {
            let g = problem.component_gradient(j, &x);
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        let inv = 1.0 / m as f64;
        for a in &mut acc {
            *a *= inv;
        }
        let full = problem.gradient(&x);
        for (a, f) in acc.iter().zip(&full) {
            worst = worst.max((a - f).abs());
        }
    }
    Ok(worst)
}

/// One representative per problem family, used by the certification and
/// descent checks.
pub fn standard_suite() -> Vec<Problem> {
    vec![
        Problem::quadratic(&[1.0, 4.0], &[0.0, 0.0]).expect("valid"),
        standard_least_squares(),
        standard_logistic(),
        Problem::sin_pl(),
    ]
}

/// Fixed consistent 6x3 system (b = A x_true with x_true = (1, -2, 0.5)).
pub fn standard_least_squares() -> Problem {
    let rows = vec![
        vec![1.0, 0.5, -1.0],
        vec![0.0, 2.0, 1.0],
        vec![-1.5, 1.0, 0.0],
        vec![2.0, -1.0, 0.5],
        vec![0.5, 0.5, 2.0],
        vec![1.0, 1.0, 1.0],
    ];
    let x_true = [1.0, -2.0, 0.5];
    let target = rows
        .iter()
        .map(|r| r.iter().zip(&x_true).map(|(a, x)| a * x).sum())
        .collect();
    Problem::least_squares(rows, target).expect("consistent by construction")
}

/// Four separable points on the axes, reg = 0.1.
pub fn standard_logistic() -> Problem {
    Problem::logistic(
        vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ],
        vec![1.0, 1.0, -1.0, -1.0],
        0.1,
    )
    .expect("valid")
}
