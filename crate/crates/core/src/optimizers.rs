//! Adaptive gradient update rules as pure step functions over explicit
//! state, plus the run loop that records per-iteration traces.
//!
//! Two denominator timings exist because the deterministic analysis
//! divides by the freshly updated accumulator while the stochastic one
//! divides by the pre-update accumulator; both are implemented behind an
//! explicit flag and the harness pairs them with the matching oracle by
//! default.

use serde::Serialize;

use crate::oracle::{GradientOracle, RngStream, RNG_ALGORITHM};
use crate::problems::Problem;
use crate::{Error, Result};

/// Whether the step divides by the accumulator after or before it absorbs
/// the current gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorTiming {
    /// Divide by the updated accumulator (deterministic-analysis form).
    PostUpdate,
    /// Divide by the previous accumulator (stochastic-analysis form).
    PreUpdate,
}

/// AdaGrad state: iterate, nonnegative accumulator, iteration counter.
///
/// In `norm_mode` the accumulator is conceptually a scalar (the norm
/// version of AdaGrad); it is stored broadcast so that every coordinate
/// of `y` stays equal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub k: usize,
    pub norm_mode: bool,
    pub timing: DenominatorTiming,
}

impl AdaGradState {
    pub fn new(x0: Vec<f64>, norm_mode: bool, timing: DenominatorTiming) -> Self {
        let d = x0.len();
        Self { x: x0, y: vec![0.0; d], k: 0, norm_mode, timing }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamVariant {
    Adam,
    AmsGrad,
    AdaBelief,
}

/// Adam-family state: iterate, first and second moment estimates, and the
/// AMSGrad running maximum when that variant is active.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub nu_hat: Option<Vec<f64>>,
    pub k: usize,
    pub variant: AdamVariant,
    pub bias_correction: bool,
}

impl AdamState {
    pub fn new(x0: Vec<f64>, variant: AdamVariant, bias_correction: bool) -> Self {
        let d = x0.len();
        Self {
            x: x0,
            mu: vec![0.0; d],
            nu: vec![0.0; d],
            nu_hat: (variant == AdamVariant::AmsGrad).then(|| vec![0.0; d]),
            k: 0,
            variant,
            bias_correction,
        }
    }

    /// The accumulator whose square root enters the step denominator:
    /// `nu_hat` for AMSGrad, `nu` otherwise.
    pub fn denominator_accumulator(&self) -> &[f64] {
        self.nu_hat.as_deref().unwrap_or(&self.nu)
    }
}

fn check_gradient(gradient: &[f64], dim: usize) -> Result<()> {
    if gradient.len() != dim {
        return Err(Error::InvalidParameter(format!(
            "gradient has dimension {}, state expects {dim}",
            gradient.len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("non-finite gradient passed to step".into()));
    }
    Ok(())
}

/// Deterministic-timing AdaGrad step: accumulate the squared gradient,
/// then divide by the square root of the updated accumulator.
pub fn adagrad_step(state: &AdaGradState, gradient: &[f64], h: f64, eps: f64) -> Result<AdaGradState> {
    if state.timing != DenominatorTiming::PostUpdate {
        return Err(Error::InvalidParameter(
            "adagrad_step requires post-update denominator timing".into(),
        ));
    }
    check_gradient(gradient, state.x.len())?;
    debug_assert!(h > 0.0 && eps > 0.0 && eps < 1.0);
    let d = state.x.len();
    let mut y = Vec::with_capacity(d);
    if state.norm_mode {
        let gn2: f64 = gradient.iter().map(|g| g * g).sum();
        for i in 0..d {
            y.push(state.y[i] + gn2);
        }
    } else {
        for i in 0..d {
            y.push(state.y[i] + gradient[i] * gradient[i]);
        }
    }
    let mut x = Vec::with_capacity(d);
    for i in 0..d {
        x.push(state.x[i] - h * gradient_ratio(gradient[i], y[i], eps));
    }
    Ok(AdaGradState { x, y, k: state.k + 1, norm_mode: state.norm_mode, timing: state.timing })
}

/// Stochastic-timing AdaGrad step: divide by the square root of the
/// previous accumulator, then accumulate the squared gradient.
pub fn adagrad_stochastic_step(
    state: &AdaGradState,
    gradient: &[f64],
    h: f64,
    eps: f64,
) -> Result<AdaGradState> {
    if state.timing != DenominatorTiming::PreUpdate {
        return Err(Error::InvalidParameter(
            "adagrad_stochastic_step requires pre-update denominator timing".into(),
        ));
    }
    check_gradient(gradient, state.x.len())?;
    debug_assert!(h > 0.0 && eps > 0.0 && eps < 1.0);
    let d = state.x.len();
    let mut x = Vec::with_capacity(d);
    for i in 0..d {
        x.push(state.x[i] - h * gradient_ratio(gradient[i], state.y[i], eps));
    }
    let mut y = Vec::with_capacity(d);
    if state.norm_mode {
        let gn2: f64 = gradient.iter().map(|g| g * g).sum();
        for i in 0..d {
            y.push(state.y[i] + gn2);
        }
    } else {
        for i in 0..d {
            y.push(state.y[i] + gradient[i] * gradient[i]);
        }
    }
    Ok(AdaGradState { x, y, k: state.k + 1, norm_mode: state.norm_mode, timing: state.timing })
}

/// Effective-step multiplier of the bias correction at iteration `k`:
/// `sqrt(1 - beta2^(k+1)) / (1 - beta1_k^(k+1))`; tends to 1.
pub fn bias_correction_factor(k: usize, beta1_k: f64, beta2: f64) -> f64 {
    let e = (k + 1).min(i32::MAX as usize) as i32;
    (1.0 - beta2.powi(e)).sqrt() / (1.0 - beta1_k.powi(e))
}

/// One Adam-family step. For AdaBelief the second moment tracks the
/// squared deviation of the gradient from the fresh first moment; for
/// AMSGrad the denominator uses the running maximum of the second moment.
pub fn adam_step(
    state: &AdamState,
    gradient: &[f64],
    h: f64,
    eps: f64,
    beta1_k: f64,
    beta2: f64,
) -> Result<AdamState> {
    check_gradient(gradient, state.x.len())?;
    debug_assert!(h > 0.0 && eps > 0.0 && eps < 1.0);
    debug_assert!((0.0..1.0).contains(&beta1_k) && (0.0..1.0).contains(&beta2));
    let d = state.x.len();
    let h_eff = if state.bias_correction {
        h * bias_correction_factor(state.k, beta1_k, beta2)
    } else {
        h
    };
    let mut x = Vec::with_capacity(d);
    let mut mu = Vec::with_capacity(d);
    let mut nu = Vec::with_capacity(d);
    let mut nu_hat = state.nu_hat.clone();
    for i in 0..d {
        let mu_i = beta1_k * state.mu[i] + (1.0 - beta1_k) * gradient[i];
        let nu_i = match state.variant {
            AdamVariant::AdaBelief => {
                let dev = gradient[i] - mu_i;
                beta2 * state.nu[i] + (1.0 - beta2) * (dev * dev)
            }
            _ => beta2 * state.nu[i] + (1.0 - beta2) * (gradient[i] * gradient[i]),
        };
        let denom_acc = match &mut nu_hat {
            Some(cap) => {
                cap[i] = cap[i].max(nu_i);
                cap[i]
            }
            None => nu_i,
        };
        x.push(state.x[i] - h_eff * gradient_ratio(mu_i, denom_acc, eps));
        mu.push(mu_i);
        nu.push(nu_i);
    }
    Ok(AdamState {
        x,
        mu,
        nu,
        nu_hat,
        k: state.k + 1,
        variant: state.variant,
        bias_correction: state.bias_correction,
    })
}

// Shared so that Adam with memoryless parameters reproduces the AdaGrad
// first step bit for bit.
#[inline]
fn gradient_ratio(numerator: f64, accumulator: f64, eps: f64) -> f64 {
    numerator / (accumulator.sqrt() + eps)
}

/// Schedule producing the per-step momentum parameter `beta1_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Beta1Schedule {
    Constant { value: f64 },
    /// Emits `gamma * min_i 1 / (1 + |mu_i| / |g_i|)` over coordinates
    /// with nonzero gradient; this keeps the admissible contraction
    /// region below one non-empty at every step.
    Theory { gamma: f64 },
}

/// Emitted momentum parameter plus the implied lower bound on the
/// contraction split parameter; the bound is logged, never used in the
/// update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta1Choice {
    pub beta1: f64,
    pub theta_lower_bound: f64,
}

pub fn next_beta1(schedule: &Beta1Schedule, state: &AdamState, gradient: &[f64]) -> Beta1Choice {
    let mut max_ratio: f64 = 0.0;
    let mut seen = false;
    for (mu_i, g_i) in state.mu.iter().zip(gradient) {
        if *g_i != 0.0 {
            seen = true;
            max_ratio = max_ratio.max(mu_i.abs() / g_i.abs());
        }
    }
    let beta1 = match schedule {
        Beta1Schedule::Constant { value } => *value,
        Beta1Schedule::Theory { gamma } => {
            if seen {
                gamma / (1.0 + max_ratio)
            } else {
                *gamma
            }
        }
    };
    let theta_lower_bound = if seen && beta1 < 1.0 {
        beta1 / (1.0 - beta1) * max_ratio
    } else {
        0.0
    };
    Beta1Choice { beta1, theta_lower_bound }
}

/// Per-coordinate step-size admissibility bound of the momentum descent
/// argument, evaluated at the recorded theta (midpoint of its admissible
/// region). Logged when the theory schedule is active; never enforced.
fn h1_bound(
    state: &AdamState,
    gradient: &[f64],
    beta1: f64,
    theta: f64,
    smoothness: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (mu_i, g_i) in state.mu.iter().zip(gradient) {
        if *g_i == 0.0 {
            continue;
        }
        let p = theta * (1.0 - beta1) * g_i * g_i - beta1 * (mu_i * g_i).abs();
        let q = 0.5 * smoothness * ((1.0 - beta1) * p + beta1 * beta1 * mu_i * mu_i);
        if p > 0.0 && q > 0.0 {
            let bound = p / q;
            best = Some(best.map_or(bound, |b: f64| b.min(bound)));
        }
    }
    best
}

/// Update rule selection for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    AdaGrad { norm_mode: bool, timing: DenominatorTiming },
    Adam {
        variant: AdamVariant,
        beta1: Beta1Schedule,
        beta2: f64,
        bias_correction: bool,
    },
}

/// Validated method plus step-size and epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    method: Method,
    h: f64,
    eps: f64,
}

impl MethodConfig {
    pub fn new(method: Method, h: f64, eps: f64) -> Result<Self> {
        if !h.is_finite() || h <= 0.0 {
            return Err(Error::InvalidParameter("step size h must be positive".into()));
        }
        if !eps.is_finite() || eps <= 0.0 || eps >= 1.0 {
            return Err(Error::InvalidParameter("epsilon must lie in (0,1)".into()));
        }
        if let Method::Adam { beta1, beta2, .. } = &method {
            if !beta2.is_finite() || !(0.0..1.0).contains(beta2) {
                return Err(Error::InvalidParameter("beta2 must lie in [0,1)".into()));
            }
            match beta1 {
                Beta1Schedule::Constant { value } => {
                    if !value.is_finite() || !(0.0..1.0).contains(value) {
                        return Err(Error::InvalidParameter("beta1 must lie in [0,1)".into()));
                    }
                }
                Beta1Schedule::Theory { gamma } => {
                    if !gamma.is_finite() || *gamma <= 0.0 || *gamma >= 1.0 {
                        return Err(Error::InvalidParameter("gamma must lie in (0,1)".into()));
                    }
                }
            }
        }
        Ok(Self { method, h, eps })
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn method_name(&self) -> &'static str {
        match &self.method {
            Method::AdaGrad { norm_mode: false, .. } => "adagrad",
            Method::AdaGrad { norm_mode: true, .. } => "adagrad-norm",
            Method::Adam { variant: AdamVariant::Adam, .. } => "adam",
            Method::Adam { variant: AdamVariant::AmsGrad, .. } => "amsgrad",
            Method::Adam { variant: AdamVariant::AdaBelief, .. } => "adabelief",
        }
    }

    pub fn beta2(&self) -> Option<f64> {
        match &self.method {
            Method::Adam { beta2, .. } => Some(*beta2),
            _ => None,
        }
    }
}

/// One recorded iteration. The accumulator columns hold the denominator
/// accumulator at the iterate (`y`, `nu`, or the AMSGrad maximum), and
/// `denom_*` are their square roots plus epsilon. `beta1_k` and `h_eff`
/// are the values used by the step taken from this row's iterate; the
/// final row previews them from the full gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub gap: f64,
    pub grad_norm_sq: f64,
    pub acc_min: f64,
    pub acc_max: f64,
    pub denom_min: f64,
    pub denom_max: f64,
    pub beta1_k: f64,
    pub h_eff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_lower_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h1_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub problem: String,
    pub method: String,
    pub oracle: String,
    pub h: f64,
    pub eps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    pub seed: u64,
    pub rng_algorithm: String,
    pub stop_gap: f64,
    pub dim: usize,
}

/// Full per-coordinate accumulator history is kept up to this dimension;
/// larger runs retain only the per-row min/max columns.
pub const PER_COORD_RETENTION_MAX_DIM: usize = 64;

/// Per-iteration record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// Accumulator per coordinate per row, when `dim <= 64`.
    pub per_coord_acc: Option<Vec<Vec<f64>>>,
    /// Set when a non-finite value aborted the run; rows stop at the
    /// failure.
    pub diverged: bool,
    /// Whether the driving oracle was stochastic.
    pub stochastic: bool,
    pub meta: RunMeta,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.rows.last().map(|r| r.gap)
    }
}

enum RunState {
    AdaGrad(AdaGradState),
    Adam(AdamState),
}

/// Execute up to `iterations` steps, stopping early once the gap falls to
/// `stop_gap`. Records one row per visited iterate (so `iterations = 1`
/// yields two rows). Non-finite values abort the run with the divergence
/// flag set and the trace truncated at the failure.
pub fn run(
    problem: &Problem,
    oracle: &GradientOracle,
    config: &MethodConfig,
    iterations: usize,
    stop_gap: f64,
    x0: &[f64],
    rng: &mut RngStream,
) -> Result<Trace> {
    if iterations < 1 {
        return Err(Error::InvalidParameter("iteration count must be at least 1".into()));
    }
    if x0.len() != problem.dim() {
        return Err(Error::InvalidParameter(format!(
            "x0 has dimension {}, problem expects {}",
            x0.len(),
            problem.dim()
        )));
    }
    let d = problem.dim();
    let h = config.h();
    let eps = config.eps();
    let keep_coords = d <= PER_COORD_RETENTION_MAX_DIM;
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut per_coord: Option<Vec<Vec<f64>>> = keep_coords.then(Vec::new);
    let mut diverged = false;

    let mut state = match config.method() {
        Method::AdaGrad { norm_mode, timing } => {
            RunState::AdaGrad(AdaGradState::new(x0.to_vec(), *norm_mode, *timing))
        }
        Method::Adam { variant, bias_correction, .. } => {
            RunState::Adam(AdamState::new(x0.to_vec(), *variant, *bias_correction))
        }
    };

    loop {
        let (k, x) = match &state {
            RunState::AdaGrad(s) => (s.k, &s.x),
            RunState::Adam(s) => (s.k, &s.x),
        };
        if x.iter().any(|c| !c.is_finite()) {
            diverged = true;
            break;
        }
        let f = problem.value(x);
        let grad_full = problem.gradient(x);
        if !f.is_finite() || grad_full.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        let gap = f - problem.f_star();
        let grad_norm_sq: f64 = grad_full.iter().map(|g| g * g).sum();
        let stepping = k < iterations && gap > stop_gap;

        let g_step: Option<Vec<f64>> = if stepping {
            match oracle {
                GradientOracle::Deterministic => Some(grad_full.clone()),
                _ => match oracle.gradient(problem, x, rng) {
                    Ok(g) => Some(g),
                    Err(Error::NonFinite(_)) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                },
            }
        } else {
            None
        };

        let row = match (&state, config.method()) {
            (RunState::AdaGrad(s), _) => {
                record_row(k, gap, grad_norm_sq, &s.y, eps, 0.0, h, None, None)
            }
            (RunState::Adam(s), Method::Adam { beta1, beta2, .. }) => {
                let g_ref = g_step.as_deref().unwrap_or(&grad_full);
                let choice = next_beta1(beta1, s, g_ref);
                let h_eff = if s.bias_correction {
                    h * bias_correction_factor(k, choice.beta1, *beta2)
                } else {
                    h
                };
                let h1 = match beta1 {
                    Beta1Schedule::Theory { .. } => {
                        let theta = 0.5 * (choice.theta_lower_bound + 1.0);
                        h1_bound(s, g_ref, choice.beta1, theta, problem.smoothness())
                    }
                    _ => None,
                };
                record_row(
                    k,
                    gap,
                    grad_norm_sq,
                    s.denominator_accumulator(),
                    eps,
                    choice.beta1,
                    h_eff,
                    Some(choice.theta_lower_bound),
                    h1,
                )
            }
            _ => unreachable!("state kind matches method"),
        };
        if let Some(pc) = per_coord.as_mut() {
            let acc = match &state {
                RunState::AdaGrad(s) => s.y.clone(),
                RunState::Adam(s) => s.denominator_accumulator().to_vec(),
            };
            pc.push(acc);
        }
        let beta1_row = row.beta1_k;
        rows.push(row);
        if !stepping {
            break;
        }
        let g = g_step.expect("stepping implies a gradient was drawn");
        let step_result = match (&state, config.method()) {
            (RunState::AdaGrad(s), Method::AdaGrad { timing, .. }) => match timing {
                DenominatorTiming::PostUpdate => {
                    adagrad_step(s, &g, h, eps).map(RunState::AdaGrad)
                }
                DenominatorTiming::PreUpdate => {
                    adagrad_stochastic_step(s, &g, h, eps).map(RunState::AdaGrad)
                }
            },
            (RunState::Adam(s), Method::Adam { beta2, .. }) => {
                adam_step(s, &g, h, eps, beta1_row, *beta2).map(RunState::Adam)
            }
            _ => unreachable!("state kind matches method"),
        };
        state = match step_result {
            Ok(s) => s,
            Err(Error::NonFinite(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
    }

    Ok(Trace {
        rows,
        per_coord_acc: per_coord,
        diverged,
        stochastic: oracle.is_stochastic(),
        meta: RunMeta {
            problem: problem.name().to_string(),
            method: config.method_name().to_string(),
            oracle: oracle.kind_name().to_string(),
            h,
            eps,
            beta2: config.beta2(),
            seed: rng.seed(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            stop_gap,
            dim: d,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn record_row(
    k: usize,
    gap: f64,
    grad_norm_sq: f64,
    acc: &[f64],
    eps: f64,
    beta1_k: f64,
    h_eff: f64,
    theta_lower_bound: Option<f64>,
    h1_bound: Option<f64>,
) -> TraceRow {
    let acc_min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let acc_max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    TraceRow {
        k,
        gap,
        grad_norm_sq,
        acc_min,
        acc_max,
        denom_min: acc_min.sqrt() + eps,
        denom_max: acc_max.sqrt() + eps,
        beta1_k,
        h_eff,
        theta_lower_bound,
        h1_bound,
    }
}
