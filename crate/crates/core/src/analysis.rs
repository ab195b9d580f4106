//! Turns traces into verdicts: fitted contraction factors, accumulator
//! case-transition structure, theoretical step-size bounds, and the
//! stochastic noise-floor comparison.

use serde::Serialize;

use crate::oracle::NoiseModel;
use crate::optimizers::Trace;
use crate::{Error, Result};

/// A fit is declared linear when the log-gap regression explains the
/// data this well ...
pub const LINEAR_R2_THRESHOLD: f64 = 0.99;
/// ... and contracts at least this fast per step.
pub const LINEAR_RHO_THRESHOLD: f64 = 0.9999;

/// Minimum usable rows for a rate fit.
pub const MIN_FIT_ROWS: usize = 10;

// Gaps below this are not log-representable and end the usable window.
const LOG_FLOOR: f64 = 1e-300;

/// Result of the log-linear contraction fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    /// exp(slope) of the least-squares fit of log gap against k.
    pub rho_hat: f64,
    /// Largest consecutive gap ratio inside the fit window (the strict
    /// per-step contraction check).
    pub max_step_ratio: f64,
    /// Coefficient of determination of the log-gap fit, clamped to [0,1].
    pub r_squared: f64,
    pub k_start: usize,
    pub k_end: usize,
    /// rho_hat <= 0.9999 and R^2 >= 0.99.
    pub linear: bool,
}

/// Ordinary least squares of log(gap) against k over rows
/// `[k_start, k_end]` of the trace. The window is truncated at the first
/// non-positive (or sub-1e-300) gap; at least 10 usable rows must remain.
pub fn rate_fit(trace: &Trace, k_start: usize, k_end: usize) -> Result<RateReport> {
    let n = trace.rows.len();
    if n == 0 {
        return Err(Error::Analysis("trace is empty".into()));
    }
    if k_start >= k_end || k_end >= n {
        return Err(Error::Analysis(format!(
            "invalid fit window [{k_start}, {k_end}] for a {n}-row trace"
        )));
    }
    let mut ks: Vec<f64> = Vec::new();
    let mut logs: Vec<f64> = Vec::new();
    let mut gaps: Vec<f64> = Vec::new();
    for row in &trace.rows[k_start..=k_end] {
        if !(row.gap > LOG_FLOOR) {
            break;
        }
        ks.push(row.k as f64);
        logs.push(row.gap.ln());
        gaps.push(row.gap);
    }
    if ks.len() < MIN_FIT_ROWS {
        return Err(Error::Analysis(format!(
            "fit window has {} usable rows; need at least {MIN_FIT_ROWS}",
            ks.len()
        )));
    }
    let n = ks.len() as f64;
    let k_mean = ks.iter().sum::<f64>() / n;
    let log_mean = logs.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (k, y) in ks.iter().zip(&logs) {
        sxx += (k - k_mean) * (k - k_mean);
        sxy += (k - k_mean) * (y - log_mean);
    }
    let slope = sxy / sxx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (k, y) in ks.iter().zip(&logs) {
        let fitted = log_mean + slope * (k - k_mean);
        ss_res += (y - fitted) * (y - fitted);
        ss_tot += (y - log_mean) * (y - log_mean);
    }
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    let max_step_ratio = gaps
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let rho_hat = slope.exp();
    Ok(RateReport {
        rho_hat,
        max_step_ratio,
        r_squared,
        k_start,
        k_end: k_start + gaps.len() - 1,
        linear: rho_hat <= LINEAR_RHO_THRESHOLD && r_squared >= LINEAR_R2_THRESHOLD,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseClass {
    /// Every coordinate's accumulator crossed (1-eps)^2 and stayed above.
    CaseI,
    /// No coordinate crossed by the end of the run.
    CaseII,
    /// A mix at the end of the run.
    CaseIII,
}

/// Case-transition structure of a trace's accumulator columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub epsilon: f64,
    /// (1 - epsilon)^2.
    pub threshold: f64,
    /// First iteration from which each coordinate's accumulator stays
    /// above the threshold; None means it never crossed for good.
    /// Only available when the trace kept per-coordinate history.
    pub per_coordinate: Option<Vec<Option<usize>>>,
    /// Max over coordinates when all crossed (the overall T).
    pub transition: Option<usize>,
    pub classification: CaseClass,
    /// Measured denominator bound B: max over the trace of
    /// sqrt(accumulator) + epsilon. Always at least epsilon.
    pub denominator_bound: f64,
}

impl CaseReport {
    /// Start of the post-transition fit window: the largest finite
    /// per-coordinate crossing (0 when nothing crossed).
    pub fn fit_start(&self) -> usize {
        match (&self.per_coordinate, self.transition) {
            (_, Some(t)) => t,
            (Some(per), None) => per.iter().flatten().copied().max().unwrap_or(0),
            (None, None) => 0,
        }
    }
}

/// Smallest index from which the sequence stays strictly above the
/// threshold through the end; None if it ends at or below it.
fn stable_crossing<I: Iterator<Item = f64>>(values: I, threshold: f64) -> Option<usize> {
    let mut t = Some(0);
    let mut len = 0;
    for (idx, v) in values.enumerate() {
        len = idx + 1;
        if v <= threshold {
            t = Some(idx + 1);
        }
    }
    match t {
        Some(t) if t < len => Some(t),
        _ => None,
    }
}

/// Detect the per-coordinate first crossings of (1-eps)^2 and classify
/// the run. With per-coordinate history (d <= 64) the crossings are
/// exact; otherwise the min/max accumulator columns bound them.
pub fn case_transitions(trace: &Trace, eps: f64) -> CaseReport {
    let threshold = (1.0 - eps) * (1.0 - eps);
    let denominator_bound = trace
        .rows
        .iter()
        .map(|r| r.acc_max)
        .fold(0.0, f64::max)
        .sqrt()
        + eps;
    if let Some(per_coord) = &trace.per_coord_acc {
        let d = per_coord.first().map_or(0, |row| row.len());
        let per: Vec<Option<usize>> = (0..d)
            .map(|i| stable_crossing(per_coord.iter().map(|row| row[i]), threshold))
            .collect();
        let crossed = per.iter().filter(|t| t.is_some()).count();
        let (classification, transition) = if d == 0 || per_coord.is_empty() {
            (CaseClass::CaseII, None)
        } else if crossed == d {
            (CaseClass::CaseI, per.iter().flatten().copied().max())
        } else if crossed == 0 {
            (CaseClass::CaseII, None)
        } else {
            (CaseClass::CaseIII, None)
        };
        CaseReport {
            epsilon: eps,
            threshold,
            per_coordinate: Some(per),
            transition,
            classification,
            denominator_bound,
        }
    } else {
        let t_all = stable_crossing(trace.rows.iter().map(|r| r.acc_min), threshold);
        let t_any = stable_crossing(trace.rows.iter().map(|r| r.acc_max), threshold);
        let (classification, transition) = match (t_all, t_any) {
            (Some(t), _) => (CaseClass::CaseI, Some(t)),
            (None, None) => (CaseClass::CaseII, None),
            (None, Some(_)) => (CaseClass::CaseIII, None),
        };
        CaseReport {
            epsilon: eps,
            threshold,
            per_coordinate: None,
            transition,
            classification,
            denominator_bound,
        }
    }
}

/// `g*` is undefined when the stochastic step-size condition fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientFloor {
    Defined(f64),
    /// h >= 2 / (L * M_G).
    UndefinedDenominator,
}

impl GradientFloor {
    pub fn value(&self) -> Option<f64> {
        match self {
            GradientFloor::Defined(v) => Some(*v),
            GradientFloor::UndefinedDenominator => None,
        }
    }
}

impl Serialize for GradientFloor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GradientFloor::Defined(v) => s.serialize_f64(*v),
            GradientFloor::UndefinedDenominator => s.serialize_str("undefined (denominator <= 0)"),
        }
    }
}

/// Noise-dependent bounds; present only for stochastic runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticBounds {
    pub m_noise: f64,
    pub m_g: f64,
    /// 2 / (L * M_G).
    pub h_bar_stochastic: f64,
    /// 2 eps^2 / (L * M_G).
    pub h_bar_stochastic_small: f64,
    pub h_within_stochastic: bool,
    pub h_within_stochastic_small: bool,
    /// Per-step noise injection: L * M * d * h^2 / (2 B).
    pub omega: f64,
    /// (L M h / 2) / (1 - L M_G h / 2).
    pub g_star: GradientFloor,
    /// d * g_star.
    pub g_star_scaled: GradientFloor,
    /// omega / (1 - rho_hat) once a matched deterministic rate is known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asymptotic_gap_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_rho: Option<f64>,
}

/// Step-size bounds and noise floors instantiated from measured
/// quantities. A pure function of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryBounds {
    pub smoothness: f64,
    pub pl_constant: f64,
    pub epsilon: f64,
    /// Measured denominator bound B.
    pub denominator_bound: f64,
    pub h: f64,
    pub dim: usize,
    /// min{2 eps^2 / L, B / (2 l), 1 / (2 l)}.
    pub h_bar_deterministic: f64,
    /// 2 eps^2 / L: the descent-safe step bound.
    pub descent_bound: f64,
    pub h_within_h_bar: bool,
    pub h_within_descent_bound: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stochastic: Option<StochasticBounds>,
}

pub fn theory_bounds(
    smoothness: f64,
    pl_constant: f64,
    eps: f64,
    denominator_bound: f64,
    h: f64,
    dim: usize,
    noise: Option<&NoiseModel>,
) -> Result<TheoryBounds> {
    for (name, v) in [
        ("L", smoothness),
        ("l", pl_constant),
        ("B", denominator_bound),
        ("h", h),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::InvalidParameter(format!("{name} must be positive and finite")));
        }
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter("epsilon must lie in (0,1)".into()));
    }
    let descent_bound = 2.0 * eps * eps / smoothness;
    let h_bar_deterministic = descent_bound
        .min(denominator_bound / (2.0 * pl_constant))
        .min(1.0 / (2.0 * pl_constant));
    let stochastic = noise.map(|model| {
        let m = model.m_noise();
        let mg = model.m_g();
        let h_bar_stochastic = 2.0 / (smoothness * mg);
        let h_bar_stochastic_small = 2.0 * eps * eps / (smoothness * mg);
        let omega = smoothness * m * dim as f64 * h * h / (2.0 * denominator_bound);
        let g_star_denom = 1.0 - smoothness * mg * h / 2.0;
        let g_star = if g_star_denom > 0.0 {
            GradientFloor::Defined(smoothness * m * h / 2.0 / g_star_denom)
        } else {
            GradientFloor::UndefinedDenominator
        };
        let g_star_scaled = match g_star {
            GradientFloor::Defined(v) => GradientFloor::Defined(dim as f64 * v),
            u => u,
        };
        StochasticBounds {
            m_noise: m,
            m_g: mg,
            h_bar_stochastic,
            h_bar_stochastic_small,
            h_within_stochastic: h < h_bar_stochastic,
            h_within_stochastic_small: h < h_bar_stochastic_small,
            omega,
            g_star,
            g_star_scaled,
            asymptotic_gap_bound: None,
            matched_rho: None,
        }
    });
    Ok(TheoryBounds {
        smoothness,
        pl_constant,
        epsilon: eps,
        denominator_bound,
        h,
        dim,
        h_bar_deterministic,
        descent_bound,
        h_within_h_bar: h < h_bar_deterministic,
        h_within_descent_bound: h < descent_bound,
        stochastic,
    })
}

impl TheoryBounds {
    /// Fill the asymptotic expected-gap bound omega / (1 - rho_hat) from
    /// the contraction fitted on a matched deterministic run.
    pub fn with_matched_rho(mut self, rho_hat: f64) -> Self {
        if let Some(st) = self.stochastic.as_mut() {
            st.matched_rho = Some(rho_hat);
            st.asymptotic_gap_bound =
                (rho_hat > 0.0 && rho_hat < 1.0).then(|| st.omega / (1.0 - rho_hat));
        }
        self
    }
}

/// Tail statistics of a stochastic run against the theoretical floors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseFloorReport {
    pub tail_start: usize,
    pub tail_rows: usize,
    pub mean_tail_gap: f64,
    pub mean_tail_grad_sq: f64,
    pub omega: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asymptotic_gap_bound: Option<f64>,
    /// mean tail gap <= omega / (1 - rho_hat); None when no matched rate
    /// was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_below_floor: Option<bool>,
    pub gradient_floor: GradientFloor,
    /// Whether the mean tail squared gradient norm exceeds d * g_star.
    /// Reported, never asserted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_exceeds_floor: Option<bool>,
}

/// Compare the trailing `tail_fraction` of a stochastic trace against the
/// noise floor omega / (1 - rho_hat) and the gradient floor d * g_star.
pub fn noise_floor_check(
    trace: &Trace,
    bounds: &TheoryBounds,
    tail_fraction: f64,
) -> Result<NoiseFloorReport> {
    if !trace.stochastic {
        return Err(Error::Analysis(
            "noise floor check requires a trace from a stochastic run".into(),
        ));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 0.5) {
        return Err(Error::Analysis("tail fraction must lie in (0, 0.5]".into()));
    }
    let st = bounds
        .stochastic
        .as_ref()
        .ok_or_else(|| Error::Analysis("theory bounds carry no noise constants".into()))?;
    let n = trace.rows.len();
    let tail_rows = ((n as f64) * tail_fraction).floor() as usize;
    if tail_rows < 100 {
        return Err(Error::Analysis(format!(
            "tail window has {tail_rows} rows; need at least 100"
        )));
    }
    let tail_start = n - tail_rows;
    let tail = &trace.rows[tail_start..];
    let mean_tail_gap = tail.iter().map(|r| r.gap).sum::<f64>() / tail_rows as f64;
    let mean_tail_grad_sq = tail.iter().map(|r| r.grad_norm_sq).sum::<f64>() / tail_rows as f64;
    Ok(NoiseFloorReport {
        tail_start: trace.rows[tail_start].k,
        tail_rows,
        mean_tail_gap,
        mean_tail_grad_sq,
        omega: st.omega,
        asymptotic_gap_bound: st.asymptotic_gap_bound,
        gap_below_floor: st.asymptotic_gap_bound.map(|b| mean_tail_gap <= b),
        gradient_floor: st.g_star_scaled,
        grad_exceeds_floor: st
            .g_star_scaled
            .value()
            .map(|floor| mean_tail_grad_sq > floor),
    })
}

/// Default fit window: drop the first max(10, T) rows (the
/// pre-transition regime) and everything from the point where the gap
/// first falls below 100 * stop_gap (the floating-point floor).
pub fn default_fit_window(trace: &Trace, case: &CaseReport, stop_gap: f64) -> (usize, usize) {
    let start = case.fit_start().max(10);
    let floor = 100.0 * stop_gap;
    let mut end = trace.rows.len().saturating_sub(1);
    if let Some(idx) = trace.rows.iter().position(|r| r.gap < floor) {
        end = idx.saturating_sub(1);
    }
    (start, end)
}
