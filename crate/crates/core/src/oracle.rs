//! Gradient oracles: exact, finite-sum sampled, and synthetic noisy
//! gradients with coordinate-wise affine variance, plus the moment
//! instrumentation used to verify unbiasedness and the variance model.
//!
//! All randomness flows through [`RngStream`], a seeded generator whose
//! algorithm identifier is recorded in every report so that traces are
//! exactly reproducible. Concurrent runs must use independent streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::problems::Problem;
use crate::{Error, Result};

/// Identifier of the generator backing [`RngStream`]. Embedded in reports.
pub const RNG_ALGORITHM: &str = "chacha12-seed64";

/// Seeded random stream. Same seed, same build: bit-identical samples.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Uniform sample in `[low, high)` per coordinate.
    pub fn vector_in_box(&mut self, dim: usize, low: f64, high: f64) -> Vec<f64> {
        (0..dim).map(|_| self.inner.random_range(low..high)).collect()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// Coordinate-wise affine noise variance model: the variance of the
/// i-th gradient coordinate is bounded by `v1[i] + v2[i] * g_i^2`.
///
/// `m_noise = max_i v1[i]` and `m_g = max_i (v2[i] + 1)` are stored
/// alongside the raw fields; they feed the stochastic step-size and
/// noise-floor bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseModel {
    v1: Vec<f64>,
    v2: Vec<f64>,
    m_noise: f64,
    m_g: f64,
}

impl NoiseModel {
    pub fn new(v1: Vec<f64>, v2: Vec<f64>) -> Result<Self> {
        if v1.is_empty() || v1.len() != v2.len() {
            return Err(Error::InvalidParameter(format!(
                "noise model needs matching non-empty v1/v2 (got {} and {})",
                v1.len(),
                v2.len()
            )));
        }
        for (name, v) in [("v1", &v1), ("v2", &v2)] {
            if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "noise model {name} entries must be finite and nonnegative"
                )));
            }
        }
        let m_noise = v1.iter().cloned().fold(0.0, f64::max);
        let m_g = v2.iter().map(|c| c + 1.0).fold(0.0, f64::max);
        Ok(Self { v1, v2, m_noise, m_g })
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![0.0; dim]).expect("zero model is valid")
    }

    pub fn dim(&self) -> usize {
        self.v1.len()
    }

    pub fn v1(&self) -> &[f64] {
        &self.v1
    }

    pub fn v2(&self) -> &[f64] {
        &self.v2
    }

    /// `M` of the stochastic analysis: the additive variance bound.
    pub fn m_noise(&self) -> f64 {
        self.m_noise
    }

    /// `M_G`: multiplicative variance bound plus one.
    pub fn m_g(&self) -> f64 {
        self.m_g
    }
}

/// A gradient estimator paired with the run loop.
#[derive(Debug, Clone)]
pub enum GradientOracle {
    /// Exact gradient of the objective.
    Deterministic,
    /// Gradient of one uniformly sampled finite-sum component; `batch`
    /// independent draws are averaged, dividing the variance by `batch`.
    FiniteSum { batch: usize },
    /// Exact gradient plus zero-mean Gaussian noise with variance
    /// `v1[i] + v2[i] * g_i^2` per coordinate.
    SyntheticNoise { model: NoiseModel, batch: usize },
}

impl GradientOracle {
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, GradientOracle::Deterministic)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            GradientOracle::Deterministic => "deterministic",
            GradientOracle::FiniteSum { .. } => "finite-sum",
            GradientOracle::SyntheticNoise { .. } => "synthetic-noise",
        }
    }

    /// Draw one (possibly batched) gradient estimate at `x`.
    pub fn gradient(&self, problem: &Problem, x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            GradientOracle::Deterministic => full_gradient(problem, x),
            GradientOracle::FiniteSum { batch } => {
                batched(*batch, problem.dim(), || sample_gradient(problem, x, rng))
            }
            GradientOracle::SyntheticNoise { model, batch } => {
                batched(*batch, problem.dim(), || noisy_gradient(problem, x, model, rng))
            }
        }
    }
}

fn batched(
    batch: usize,
    dim: usize,
    mut draw: impl FnMut() -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    if batch == 1 {
        return draw();
    }
    let mut acc = vec![0.0; dim];
    for _ in 0..batch {
        let g = draw()?;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    let inv = 1.0 / batch as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

fn check_point(problem: &Problem, x: &[f64]) -> Result<()> {
    if x.len() != problem.dim() {
        return Err(Error::InvalidParameter(format!(
            "point has dimension {}, problem expects {}",
            x.len(),
            problem.dim()
        )));
    }
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("gradient requested at non-finite point".into()));
    }
    Ok(())
}

/// Exact gradient of the objective at `x`.
pub fn full_gradient(problem: &Problem, x: &[f64]) -> Result<Vec<f64>> {
    check_point(problem, x)?;
    Ok(problem.gradient(x))
}

/// Gradient of one uniformly sampled finite-sum component. Unbiased for
/// the full gradient because component gradients average to it exactly.
pub fn sample_gradient(problem: &Problem, x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    check_point(problem, x)?;
    let m = problem.component_count().ok_or_else(|| {
        Error::InvalidParameter(format!(
            "problem '{}' has no finite-sum structure",
            problem.name()
        ))
    })?;
    let j = rng.inner.random_range(0..m);
    Ok(problem.component_gradient(j, x))
}

/// Exact gradient plus independent per-coordinate Gaussian noise with
/// variance `v1[i] + v2[i] * g_i^2`.
pub fn noisy_gradient(
    problem: &Problem,
    x: &[f64],
    model: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    check_point(problem, x)?;
    if model.dim() != problem.dim() {
        return Err(Error::InvalidParameter(format!(
            "noise model has dimension {}, problem expects {}",
            model.dim(),
            problem.dim()
        )));
    }
    let mut g = problem.gradient(x);
    for (i, gi) in g.iter_mut().enumerate() {
        let var = model.v1[i] + model.v2[i] * (*gi * *gi);
        if var > 0.0 {
            let z: f64 = rng.inner.sample(StandardNormal);
            *gi += var.sqrt() * z;
        }
    }
    Ok(g)
}

/// Sample mean and unbiased sample variance, per coordinate, of
/// `n_samples` oracle draws at a fixed point (Welford accumulation).
pub fn empirical_moments(
    oracle: &GradientOracle,
    problem: &Problem,
    x: &[f64],
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter(
            "empirical moments need at least 2 samples".into(),
        ));
    }
    let d = problem.dim();
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for n in 1..=n_samples {
        let g = oracle.gradient(problem, x, rng)?;
        for i in 0..d {
            let delta = g[i] - mean[i];
            mean[i] += delta / n as f64;
            m2[i] += delta * (g[i] - mean[i]);
        }
    }
    let var: Vec<f64> = m2.iter().map(|v| v / (n_samples - 1) as f64).collect();
    Ok((mean, var))
}

/// Fit per-coordinate affine variance constants `var_i ~ v1[i] + v2[i] g_i^2`
/// by least squares over the given evaluation points. Negative fitted
/// coefficients are clamped to zero. Used to instantiate noise bounds for
/// finite-sum oracles, whose constants are not declared up front.
pub fn fit_affine_variance(
    oracle: &GradientOracle,
    problem: &Problem,
    points: &[Vec<f64>],
    samples_per_point: usize,
    rng: &mut RngStream,
) -> Result<NoiseModel> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(
            "affine variance fit needs at least 2 points".into(),
        ));
    }
    let d = problem.dim();
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(points.len()); // g_i^2
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(points.len()); // var_i
    for x in points {
        let g = full_gradient(problem, x)?;
        let (_, var) = empirical_moments(oracle, problem, x, samples_per_point, rng)?;
        us.push(g.iter().map(|gi| gi * gi).collect());
        vs.push(var);
    }
    let n = points.len() as f64;
    let mut v1 = vec![0.0; d];
    let mut v2 = vec![0.0; d];
    for i in 0..d {
        let u_mean = us.iter().map(|u| u[i]).sum::<f64>() / n;
        let v_mean = vs.iter().map(|v| v[i]).sum::<f64>() / n;
        let sxx: f64 = us.iter().map(|u| (u[i] - u_mean).powi(2)).sum();
        let sxy: f64 = us
            .iter()
            .zip(&vs)
            .map(|(u, v)| (u[i] - u_mean) * (v[i] - v_mean))
            .sum();
        let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
        v2[i] = slope;
        v1[i] = (v_mean - slope * u_mean).max(0.0);
    }
    NoiseModel::new(v1, v2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Problem;

    fn quad2() -> Problem {
        Problem::quadratic(&[2.0], &[0.0]).unwrap()
    }

    fn two_row_least_squares() -> Problem {
        // rows (1,0) and (0,1), b = 0
        Problem::least_squares(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn full_gradient_matches_problem() {
        let p = quad2();
        assert_eq!(full_gradient(&p, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn full_gradient_zero_at_minimizer() {
        let p = Problem::quadratic(&[1.0, 4.0], &[0.5, -0.25]).unwrap();
        assert_eq!(full_gradient(&p, &[0.5, -0.25]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn full_gradient_rejects_non_finite_point() {
        let p = quad2();
        assert!(matches!(
            full_gradient(&p, &[f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn logistic_gradient_at_zero_closed_form() {
        // grad at 0 is -(1/2m) sum_j y_j a_j
        let p = Problem::logistic(
            vec![
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.0],
                vec![0.0, -1.0],
            ],
            vec![1.0, 1.0, -1.0, -1.0],
            0.1,
        )
        .unwrap();
        let g = full_gradient(&p, &[0.0, 0.0]).unwrap();
        assert!((g[0] - (-0.25)).abs() < 1e-15);
        assert!((g[1] - (-0.25)).abs() < 1e-15);
    }

    #[test]
    fn sample_gradient_single_component_equals_full() {
        let p = Problem::least_squares(vec![vec![1.0, 2.0]], vec![3.0]).unwrap();
        let mut rng = RngStream::new(7);
        let x = vec![0.5, -0.5];
        let s = sample_gradient(&p, &x, &mut rng).unwrap();
        let f = full_gradient(&p, &x).unwrap();
        assert_eq!(s, f);
    }

    #[test]
    fn sample_gradient_requires_finite_sum() {
        let p = quad2();
        let mut rng = RngStream::new(0);
        assert!(matches!(
            sample_gradient(&p, &[1.0], &mut rng),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn finite_sum_sampler_mean_and_variance() {
        // At x = (1,1): components are (1,0) and (0,1), each with prob 1/2.
        // Mean = (0.5, 0.5) = full gradient, per-coordinate variance = 0.25.
        let p = two_row_least_squares();
        let oracle = GradientOracle::FiniteSum { batch: 1 };
        let mut rng = RngStream::new(11);
        let x = vec![1.0, 1.0];
        let n = 100_000;
        let (mean, var) = empirical_moments(&oracle, &p, &x, n, &mut rng).unwrap();
        let full = full_gradient(&p, &x).unwrap();
        for i in 0..2 {
            let se = (var[i] / n as f64).sqrt();
            assert!((mean[i] - full[i]).abs() <= 5.0 * se, "biased coordinate {i}");
            assert!((var[i] - 0.25).abs() < 0.01, "variance {} off", var[i]);
        }
    }

    #[test]
    fn batching_divides_variance() {
        let p = two_row_least_squares();
        let oracle = GradientOracle::FiniteSum { batch: 4 };
        let mut rng = RngStream::new(3);
        let (_, var) = empirical_moments(&oracle, &p, &[1.0, 1.0], 40_000, &mut rng).unwrap();
        for v in var {
            assert!((v - 0.0625).abs() < 0.005, "batched variance {v} not near 0.25/4");
        }
    }

    #[test]
    fn noisy_gradient_zero_noise_is_exact() {
        let p = Problem::quadratic(&[1.0, 4.0], &[0.0, 0.0]).unwrap();
        let model = NoiseModel::zero(2);
        let mut rng = RngStream::new(5);
        let x = vec![0.3, -0.7];
        let g = noisy_gradient(&p, &x, &model, &mut rng).unwrap();
        assert_eq!(g, full_gradient(&p, &x).unwrap());
    }

    #[test]
    fn noisy_gradient_additive_variance() {
        // V1 = 0.01, V2 = 0 at the minimizer (gradient 0): variance within
        // the 1e5-sample chi-square concentration band [0.0097, 0.0103].
        let p = quad2();
        let model = NoiseModel::new(vec![0.01], vec![0.0]).unwrap();
        let oracle = GradientOracle::SyntheticNoise { model, batch: 1 };
        let mut rng = RngStream::new(13);
        let (_, var) = empirical_moments(&oracle, &p, &[0.0], 100_000, &mut rng).unwrap();
        assert!(var[0] > 0.0097 && var[0] < 0.0103, "variance {} outside band", var[0]);
    }

    #[test]
    fn noisy_gradient_multiplicative_variance() {
        // V2 = 3 at |g| = 2: variance 3 * 4 = 12.
        let p = quad2(); // gradient 2x, so x = 1 gives g = 2
        let model = NoiseModel::new(vec![0.0], vec![3.0]).unwrap();
        let oracle = GradientOracle::SyntheticNoise { model, batch: 1 };
        let mut rng = RngStream::new(17);
        let (_, var) = empirical_moments(&oracle, &p, &[1.0], 100_000, &mut rng).unwrap();
        assert!((var[0] - 12.0).abs() < 0.4, "variance {} not near 12", var[0]);
    }

    #[test]
    fn deterministic_oracle_has_zero_variance() {
        let p = quad2();
        let oracle = GradientOracle::Deterministic;
        let mut rng = RngStream::new(1);
        let (mean, var) = empirical_moments(&oracle, &p, &[2.0], 100, &mut rng).unwrap();
        assert_eq!(mean, vec![4.0]);
        assert_eq!(var, vec![0.0]);
    }

    #[test]
    fn moments_require_two_samples() {
        let p = quad2();
        let mut rng = RngStream::new(1);
        assert!(empirical_moments(&GradientOracle::Deterministic, &p, &[1.0], 1, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_sequence() {
        let p = two_row_least_squares();
        let model = NoiseModel::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        let draw_all = |seed: u64| {
            let mut rng = RngStream::new(seed);
            let mut out = Vec::new();
            for _ in 0..50 {
                out.extend(sample_gradient(&p, &[1.0, 1.0], &mut rng).unwrap());
                out.extend(noisy_gradient(&p, &[1.0, 1.0], &model, &mut rng).unwrap());
            }
            out
        };
        let a = draw_all(42);
        let b = draw_all(42);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = draw_all(43);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_model_rejects_negative_entries() {
        assert!(NoiseModel::new(vec![-0.1], vec![0.0]).is_err());
        assert!(NoiseModel::new(vec![0.1], vec![-1.0]).is_err());
        assert!(NoiseModel::new(vec![], vec![]).is_err());
    }

    #[test]
    fn noise_model_derived_constants() {
        let m = NoiseModel::new(vec![0.1, 0.4, 0.2], vec![0.0, 2.0, 1.0]).unwrap();
        assert_eq!(m.m_noise(), 0.4);
        assert_eq!(m.m_g(), 3.0);
        // stored derived values match recomputation from the raw fields
        assert_eq!(m.m_noise(), m.v1().iter().cloned().fold(0.0, f64::max));
        assert_eq!(m.m_g(), m.v2().iter().map(|v| v + 1.0).fold(0.0, f64::max));
    }

    #[test]
    fn affine_variance_fit_recovers_synthetic_constants() {
        let p = Problem::quadratic(&[1.0, 4.0], &[0.0, 0.0]).unwrap();
        let model = NoiseModel::new(vec![0.02, 0.05], vec![0.5, 0.0]).unwrap();
        let oracle = GradientOracle::SyntheticNoise { model: model.clone(), batch: 1 };
        let mut rng = RngStream::new(23);
        let points: Vec<Vec<f64>> = (0..8).map(|_| rng.vector_in_box(2, -2.0, 2.0)).collect();
        let fitted = fit_affine_variance(&oracle, &p, &points, 20_000, &mut rng).unwrap();
        for i in 0..2 {
            assert!((fitted.v1()[i] - model.v1()[i]).abs() < 0.02, "v1[{i}] {}", fitted.v1()[i]);
            assert!((fitted.v2()[i] - model.v2()[i]).abs() < 0.1, "v2[{i}] {}", fitted.v2()[i]);
        }
    }
}
