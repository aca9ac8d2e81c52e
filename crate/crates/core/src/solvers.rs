//! Decision procedures on fitted laws: the mixture ratio under a
//! general-ability budget, the ratio for a fixed domain-token supply, and
//! compute-optimal model/data allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laws::{pow_ratio, ChinchillaParams, DcptParams};

/// Bisection stops once the bracket is narrower than this.
pub const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRequest {
    pub general_law: DcptParams,
    pub domain_law: DcptParams,
    /// B-params.
    pub n0: f64,
    /// B-tokens.
    pub d0: f64,
    /// General loss before continual pre-training.
    pub lg0: f64,
    /// Allowed relative increase of the general loss.
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffResult {
    pub r_d: f64,
    pub predicted_lg: f64,
    pub predicted_ld: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitedDataRequest {
    pub domain_law: DcptParams,
    /// B-params.
    pub n0: f64,
    /// Available domain tokens, B-tokens.
    pub dd0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitedDataResult {
    pub r_d: f64,
    pub predicted_ld: f64,
    /// No interior minimum: the loss still falls at `r_d = 1`.
    pub boundary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    /// B-params.
    pub n_opt: f64,
    /// B-tokens.
    pub d_opt: f64,
    pub g_const: f64,
    pub a_exp: f64,
    pub b_exp: f64,
}

/// Whether the relative rise of the general loss stays strictly below `t`.
pub fn tradeoff_feasible(lg: f64, lg0: f64, t: f64) -> bool {
    (lg - lg0) / lg0 < t
}

fn check_law(law: &DcptParams, d: f64, what: &str) -> Result<()> {
    let rep = law.check_constraints(d);
    if !rep.all_ok() {
        return Err(Error::invalid(format!("{what} law violates the trend constraints: {rep:?}")));
    }
    Ok(())
}

/// Largest domain ratio whose predicted general loss stays within the
/// allowed relative increase.
pub fn tradeoff_optimal_ratio(req: &TradeoffRequest) -> Result<TradeoffResult> {
    if !(req.n0 > 0.0 && req.d0 > 0.0 && req.lg0 > 0.0 && req.t > 0.0) {
        return Err(Error::invalid("n0, d0, lg0 and t must be > 0"));
    }
    check_law(&req.general_law, req.d0, "general")?;
    check_law(&req.domain_law, req.d0, "domain")?;
    let lg = |rd: f64| req.general_law.evaluate(req.n0, req.d0, 1.0 - rd);
    let ok = |rd: f64| -> Result<bool> { Ok(tradeoff_feasible(lg(rd)?, req.lg0, req.t)) };

    let r_d = if ok(1.0)? {
        1.0
    } else if !ok(0.0)? {
        return Err(Error::Infeasible(format!(
            "general loss already exceeds the allowed increase at r_d = 0 ({} vs {})",
            lg(0.0)?,
            req.lg0 * (1.0 + req.t)
        )));
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > RATIO_TOLERANCE {
            let mid = 0.5 * (lo + hi);
            if ok(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(TradeoffResult { r_d, predicted_lg: lg(r_d)?, predicted_ld: req.domain_law.evaluate(req.n0, req.d0, r_d)? })
}

/// Domain loss when `dd0` domain tokens make up fraction `r` of training.
pub fn limited_data_loss(law: &DcptParams, n0: f64, dd0: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::domain(format!("ratio must be in (0,1], got {r}")));
    }
    law.evaluate(n0, dd0 / r, r)
}

/// `d/dr` of [`limited_data_loss`].
pub fn limited_data_slope(law: &DcptParams, dd0: f64, r: f64) -> f64 {
    let p = law;
    p.b * (p.eta + p.beta) * pow_ratio(r, p.eta + p.beta - 1.0) / dd0.powf(p.beta)
        - p.gamma * p.c / (r + p.epsilon).powf(p.gamma + 1.0)
}

/// Ratio minimizing the domain loss for a fixed domain-token supply.
pub fn limited_data_optimal_ratio(req: &LimitedDataRequest) -> Result<LimitedDataResult> {
    if !(req.n0 > 0.0 && req.dd0 > 0.0) {
        return Err(Error::invalid("n0 and dd0 must be > 0"));
    }
    let law = &req.domain_law;
    check_law(law, req.dd0, "domain")?;
    let slope = |r: f64| limited_data_slope(law, req.dd0, r);
    if slope(1.0) <= 0.0 {
        return Ok(LimitedDataResult {
            r_d: 1.0,
            predicted_ld: limited_data_loss(law, req.n0, req.dd0, 1.0)?,
            boundary: true,
        });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > RATIO_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r_d = 0.5 * (lo + hi);
    Ok(LimitedDataResult { r_d, predicted_ld: limited_data_loss(law, req.n0, req.dd0, r_d)?, boundary: false })
}

/// Compute-optimal model size and token count for a FLOPs budget under a
/// Chinchilla-form law.
pub fn allocate(params: &ChinchillaParams, budget_flops: f64) -> Result<AllocationResult> {
    let ChinchillaParams { a, b, alpha, beta, .. } = *params;
    if !(a > 0.0 && b > 0.0 && alpha > 0.0 && beta > 0.0) {
        return Err(Error::invalid("allocation needs A, B, alpha, beta > 0"));
    }
    let s = alpha + beta;
    let g = (alpha * a / (beta * b)).powf(1.0 / s);
    allocate_from_constants(g, beta / s, alpha / s, budget_flops)
}

/// Allocation from precomputed constants `N = G c^a`, `D = c^b / G` with
/// `c` the budget in units of `6e18` FLOPs.
pub fn allocate_from_constants(g: f64, a: f64, b: f64, budget_flops: f64) -> Result<AllocationResult> {
    if !(g > 0.0 && a > 0.0 && b > 0.0 && budget_flops > 0.0 && budget_flops.is_finite()) {
        return Err(Error::invalid("G, a, b and the budget must be > 0"));
    }
    if (a + b - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("exponents must sum to 1, got {}", a + b)));
    }
    let c = budget_flops / 6e18;
    Ok(AllocationResult { n_opt: g * c.powf(a), d_opt: c.powf(b) / g, g_const: g, a_exp: a, b_exp: b })
}
