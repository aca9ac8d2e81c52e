//! Registry of loss-surface parameterizations.
//!
//! Every law maps `(N, D, r)` (and a learnability coefficient `K` for the
//! cross-domain law) to a validation loss. `N` is in B-params and `D` in
//! B-tokens throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dlc::{DomainFeatures, KRepr, KRepresentation};
use crate::error::{Error, Result};
use crate::fitter::Metrics;
use crate::model::{CorpusSide, DataPoint};

/// Lower bound on the ratio offset `epsilon`.
pub const EPSILON_FLOOR: f64 = 1e-4;

/// `E + A/N^alpha + B/D^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaParams {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `[(N_c/N)^(alpha_N/alpha_D) + D_c/D]^alpha_D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenAiParams {
    pub n_c: f64,
    pub d_c: f64,
    pub alpha_n: f64,
    pub alpha_d: f64,
}

/// `E + A/N^alpha + B/D^beta + C/(r+epsilon)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Params {
    pub e: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

/// `E + A/N^alpha + (B/D^beta + C/(r+epsilon)^gamma)^eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Params {
    pub e: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Outer exponent.
    pub eta: f64,
    pub epsilon: f64,
}

/// The D-CPT law: `E + A/N^alpha + B r^eta / D^beta + C/(r+epsilon)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcptParams {
    pub e: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
}

/// `E + A/N^alpha + B b^r / D^beta + C / c^r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L4Params {
    pub e: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub b_base: f64,
    pub c_base: f64,
}

/// `E + A/N^alpha + B/(r D + (1-r) sigma)^beta`, `sigma` in B-tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L5Params {
    pub e: f64,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

/// D-CPT law plus a learnability term `F / K^mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainParams {
    pub base: DcptParams,
    pub f: f64,
    pub mu: f64,
    pub k: KRepresentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// `eta > 1`.
    pub eta_ok: bool,
    /// `C > C0`.
    pub c_ok: bool,
    /// `alpha, beta, gamma > 0`.
    pub positivity_ok: bool,
    /// `None` when `gamma <= 0` makes the bound undefined.
    pub c0: Option<f64>,
}

impl ConstraintReport {
    pub fn all_ok(&self) -> bool {
        self.eta_ok && self.c_ok && self.positivity_ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LawId {
    #[serde(rename = "chinchilla")]
    Chinchilla,
    #[serde(rename = "openai")]
    OpenAi,
    L1,
    L2,
    L3,
    L4,
    L5,
    #[serde(rename = "cross_domain")]
    CrossDomain,
}

impl LawId {
    pub const ALL: [LawId; 8] =
        [LawId::Chinchilla, LawId::OpenAi, LawId::L1, LawId::L2, LawId::L3, LawId::L4, LawId::L5, LawId::CrossDomain];

    pub fn as_str(self) -> &'static str {
        match self {
            LawId::Chinchilla => "chinchilla",
            LawId::OpenAi => "openai",
            LawId::L1 => "L1",
            LawId::L2 => "L2",
            LawId::L3 => "L3",
            LawId::L4 => "L4",
            LawId::L5 => "L5",
            LawId::CrossDomain => "cross_domain",
        }
    }
}

impl fmt::Display for LawId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LawId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "chinchilla" => LawId::Chinchilla,
            "openai" => LawId::OpenAi,
            "l1" => LawId::L1,
            "l2" => LawId::L2,
            "l3" | "dcpt" | "d-cpt" => LawId::L3,
            "l4" => LawId::L4,
            "l5" => LawId::L5,
            "cross_domain" | "cross-domain" => LawId::CrossDomain,
            _ => return Err(Error::invalid(format!("unknown law `{s}`"))),
        })
    }
}

/// Tagged union over every supported parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LawParams {
    Chinchilla(ChinchillaParams),
    OpenAi(OpenAiParams),
    L1(L1Params),
    L2(L2Params),
    L3(DcptParams),
    L4(L4Params),
    L5(L5Params),
    CrossDomain(CrossDomainParams),
}

/// Where a law is evaluated. `k` is required by the cross-domain law only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawPoint {
    pub n: f64,
    pub d: f64,
    pub r: f64,
    pub k: Option<f64>,
}

impl LawPoint {
    pub fn new(n: f64, d: f64, r: f64) -> Self {
        LawPoint { n, d, r, k: None }
    }

    pub fn with_k(self, k: f64) -> Self {
        LawPoint { k: Some(k), ..self }
    }
}

impl From<&DataPoint> for LawPoint {
    fn from(p: &DataPoint) -> Self {
        LawPoint::new(p.n, p.d, p.r)
    }
}

impl From<DataPoint> for LawPoint {
    fn from(p: DataPoint) -> Self {
        LawPoint::new(p.n, p.d, p.r)
    }
}

fn check_point(p: &LawPoint) -> Result<()> {
    if !(p.n > 0.0) || !(p.d > 0.0) || !(0.0..=1.0).contains(&p.r) {
        return Err(Error::domain(format!("point (n={}, d={}, r={}) outside n>0, d>0, r in [0,1]", p.n, p.d, p.r)));
    }
    Ok(())
}

fn ratio_offset(r: f64, epsilon: f64) -> Result<f64> {
    let rp = r + epsilon;
    if !(rp > 0.0) {
        return Err(Error::domain(format!("r + epsilon = {rp} must be > 0")));
    }
    Ok(rp)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::domain(format!("{what} evaluates to {v}")))
    }
}

impl ChinchillaParams {
    pub fn evaluate(&self, n: f64, d: f64) -> f64 {
        self.e + self.a / n.powf(self.alpha) + self.b / d.powf(self.beta)
    }
}

impl OpenAiParams {
    pub fn evaluate(&self, n: f64, d: f64) -> f64 {
        ((self.n_c / n).powf(self.alpha_n / self.alpha_d) + self.d_c / d).powf(self.alpha_d)
    }
}

impl DcptParams {
    /// Evaluates the law. `0^eta` is taken as 0 for `eta > 0`, so `r = 0` is
    /// admissible.
    pub fn evaluate(&self, n: f64, d: f64, r: f64) -> Result<f64> {
        let rp = ratio_offset(r, self.epsilon)?;
        let v = self.e
            + self.a / n.powf(self.alpha)
            + self.b * pow_ratio(r, self.eta) / d.powf(self.beta)
            + self.c / rp.powf(self.gamma);
        finite(v, "L3")
    }

    /// `(dL/dN, dL/dD, dL/dr)`.
    pub fn partials(&self, n: f64, d: f64, r: f64) -> Result<(f64, f64, f64)> {
        check_point(&LawPoint::new(n, d, r))?;
        let rp = ratio_offset(r, self.epsilon)?;
        let dn = -self.alpha * self.a / n.powf(self.alpha + 1.0);
        let dd = -self.beta * self.b * pow_ratio(r, self.eta) / d.powf(self.beta + 1.0);
        let dr = self.b * self.eta * pow_ratio(r, self.eta - 1.0) / d.powf(self.beta)
            - self.gamma * self.c / rp.powf(self.gamma + 1.0);
        Ok((dn, dd, dr))
    }

    /// `d2L / dD dr = -eta beta B r^(eta-1) / D^(beta+1)`.
    pub fn mixed_partial_dr_dd(&self, n: f64, d: f64, r: f64) -> Result<f64> {
        check_point(&LawPoint::new(n, d, r))?;
        ratio_offset(r, self.epsilon)?;
        if self.b == 0.0 || r == 0.0 {
            return Ok(0.0);
        }
        Ok(-self.eta * self.beta * self.b * pow_ratio(r, self.eta - 1.0) / d.powf(self.beta + 1.0))
    }

    /// Smallest `C` for which `dL/dr < 0` on every `D >= d_min`:
    /// `B eta (1+epsilon)^(gamma+1) / (gamma d_min^beta)`.
    pub fn c0_bound(&self, d_min: f64) -> Result<f64> {
        if !(self.gamma > 0.0) {
            return Err(Error::domain(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(d_min > 0.0) {
            return Err(Error::invalid(format!("d_min must be > 0, got {d_min}")));
        }
        Ok(self.b * self.eta * (1.0 + self.epsilon).powf(self.gamma + 1.0) / (self.gamma * d_min.powf(self.beta)))
    }

    pub fn check_constraints(&self, d_min: f64) -> ConstraintReport {
        let c0 = self.c0_bound(d_min).ok();
        ConstraintReport {
            eta_ok: self.eta > 1.0,
            c_ok: c0.is_some_and(|c0| self.c > c0),
            positivity_ok: self.alpha > 0.0 && self.beta > 0.0 && self.gamma > 0.0,
            c0,
        }
    }

    /// The Chinchilla law this surface collapses to at a fixed ratio `r0`.
    pub fn reduce_to_chinchilla(&self, r0: f64) -> Result<ChinchillaParams> {
        if !(0.0..=1.0).contains(&r0) {
            return Err(Error::invalid(format!("r0 must be in [0,1], got {r0}")));
        }
        let rp = ratio_offset(r0, self.epsilon)?;
        Ok(ChinchillaParams {
            e: self.e + self.c / rp.powf(self.gamma),
            a: self.a,
            b: self.b * pow_ratio(r0, self.eta),
            alpha: self.alpha,
            beta: self.beta,
        })
    }
}

impl CrossDomainParams {
    pub fn evaluate(&self, n: f64, d: f64, r: f64, k: f64) -> Result<f64> {
        if !(k > 0.0) {
            return Err(Error::domain(format!("K must be > 0, got {k}")));
        }
        let v = self.base.evaluate(n, d, r)? + self.f / k.powf(self.mu);
        finite(v, "cross-domain law")
    }

    /// `dL/dK = -mu F / K^(mu+1)`.
    pub fn partial_k(&self, k: f64) -> Result<f64> {
        if !(k > 0.0) {
            return Err(Error::domain(format!("K must be > 0, got {k}")));
        }
        Ok(-self.mu * self.f / k.powf(self.mu + 1.0))
    }

    /// Collapses the cross-domain law to a plain D-CPT law at `K = k0`.
    pub fn derive_domain_law(&self, k0: f64) -> Result<DcptParams> {
        if !(k0 > 0.0) {
            return Err(Error::domain(format!("K must be > 0, got {k0}")));
        }
        Ok(DcptParams { e: self.base.e + self.f / k0.powf(self.mu), ..self.base })
    }
}

/// `r^eta` with `0^eta = 0` for `eta > 0`.
#[inline]
pub(crate) fn pow_ratio(r: f64, eta: f64) -> f64 {
    if r == 0.0 && eta > 0.0 {
        0.0
    } else {
        r.powf(eta)
    }
}

impl LawParams {
    pub fn id(&self) -> LawId {
        match self {
            LawParams::Chinchilla(_) => LawId::Chinchilla,
            LawParams::OpenAi(_) => LawId::OpenAi,
            LawParams::L1(_) => LawId::L1,
            LawParams::L2(_) => LawId::L2,
            LawParams::L3(_) => LawId::L3,
            LawParams::L4(_) => LawId::L4,
            LawParams::L5(_) => LawId::L5,
            LawParams::CrossDomain(_) => LawId::CrossDomain,
        }
    }

    pub fn evaluate(&self, p: &LawPoint) -> Result<f64> {
        check_point(p)?;
        if let Some(k) = p.k {
            if !matches!(self, LawParams::CrossDomain(_)) {
                return Err(Error::invalid(format!("law {} takes no K", self.id())));
            }
            if !(k > 0.0) {
                return Err(Error::domain(format!("K must be > 0, got {k}")));
            }
        }
        let (n, d, r) = (p.n, p.d, p.r);
        match self {
            LawParams::Chinchilla(c) => finite(c.evaluate(n, d), "chinchilla"),
            LawParams::OpenAi(o) => finite(o.evaluate(n, d), "openai"),
            LawParams::L1(l) => {
                let rp = ratio_offset(r, l.epsilon)?;
                finite(l.e + l.a / n.powf(l.alpha) + l.b / d.powf(l.beta) + l.c / rp.powf(l.gamma), "L1")
            }
            LawParams::L2(l) => {
                let rp = ratio_offset(r, l.epsilon)?;
                let inner = l.b / d.powf(l.beta) + l.c / rp.powf(l.gamma);
                finite(l.e + l.a / n.powf(l.alpha) + inner.powf(l.eta), "L2")
            }
            LawParams::L3(l) => l.evaluate(n, d, r),
            LawParams::L4(l) => finite(
                l.e + l.a / n.powf(l.alpha) + l.b * l.b_base.powf(r) / d.powf(l.beta) + l.c / l.c_base.powf(r),
                "L4",
            ),
            LawParams::L5(l) => {
                let denom = r * d + (1.0 - r) * l.sigma;
                if !(denom > 0.0) {
                    return Err(Error::domain(format!("L5 denominator {denom} must be > 0")));
                }
                finite(l.e + l.a / n.powf(l.alpha) + l.b / denom.powf(l.beta), "L5")
            }
            LawParams::CrossDomain(c) => {
                let k = p.k.ok_or_else(|| Error::invalid("cross-domain law needs a K value"))?;
                c.evaluate(n, d, r, k)
            }
        }
    }

    /// Flat `symbol -> value` map used by the artifact document.
    pub fn to_flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: f64| {
            m.insert(k.to_string(), v);
        };
        match self {
            LawParams::Chinchilla(c) => {
                put("E", c.e);
                put("A", c.a);
                put("B", c.b);
                put("alpha", c.alpha);
                put("beta", c.beta);
            }
            LawParams::OpenAi(o) => {
                put("N_c", o.n_c);
                put("D_c", o.d_c);
                put("alpha_N", o.alpha_n);
                put("alpha_D", o.alpha_d);
            }
            LawParams::L1(l) => {
                put("E", l.e);
                put("A", l.a);
                put("B", l.b);
                put("C", l.c);
                put("alpha", l.alpha);
                put("beta", l.beta);
                put("gamma", l.gamma);
                put("epsilon", l.epsilon);
            }
            LawParams::L2(l) => {
                put("E", l.e);
                put("A", l.a);
                put("B", l.b);
                put("C", l.c);
                put("alpha", l.alpha);
                put("beta", l.beta);
                put("gamma", l.gamma);
                put("eta", l.eta);
                put("epsilon", l.epsilon);
            }
            LawParams::L3(l) => put_dcpt(&mut put, l),
            LawParams::L4(l) => {
                put("E", l.e);
                put("A", l.a);
                put("B", l.b);
                put("C", l.c);
                put("alpha", l.alpha);
                put("beta", l.beta);
                put("b", l.b_base);
                put("c", l.c_base);
            }
            LawParams::L5(l) => {
                put("E", l.e);
                put("A", l.a);
                put("B", l.b);
                put("alpha", l.alpha);
                put("beta", l.beta);
                put("sigma", l.sigma);
            }
            LawParams::CrossDomain(c) => {
                put_dcpt(&mut put, &c.base);
                put("F", c.f);
                put("mu", c.mu);
                put("w1", c.k.w1);
                put("w2", c.k.w2);
                if let Some(w3) = c.k.w3 {
                    put("w3", w3);
                }
            }
        }
        m
    }

    /// Inverse of [`LawParams::to_flat`]. `k_repr` is required for the
    /// cross-domain law and ignored otherwise.
    pub fn from_flat(id: LawId, m: &BTreeMap<String, f64>, k_repr: Option<KRepr>) -> Result<Self> {
        let get =
            |k: &str| m.get(k).copied().ok_or_else(|| Error::invalid(format!("law {id} is missing parameter `{k}`")));
        Ok(match id {
            LawId::Chinchilla => LawParams::Chinchilla(ChinchillaParams {
                e: get("E")?,
                a: get("A")?,
                b: get("B")?,
                alpha: get("alpha")?,
                beta: get("beta")?,
            }),
            LawId::OpenAi => LawParams::OpenAi(OpenAiParams {
                n_c: get("N_c")?,
                d_c: get("D_c")?,
                alpha_n: get("alpha_N")?,
                alpha_d: get("alpha_D")?,
            }),
            LawId::L1 => LawParams::L1(L1Params {
                e: get("E")?,
                a: get("A")?,
                b: get("B")?,
                c: get("C")?,
                alpha: get("alpha")?,
                beta: get("beta")?,
                gamma: get("gamma")?,
                epsilon: get("epsilon")?,
            }),
            LawId::L2 => LawParams::L2(L2Params {
                e: get("E")?,
                a: get("A")?,
                b: get("B")?,
                c: get("C")?,
                alpha: get("alpha")?,
                beta: get("beta")?,
                gamma: get("gamma")?,
                eta: get("eta")?,
                epsilon: get("epsilon")?,
            }),
            LawId::L3 => LawParams::L3(get_dcpt(&get)?),
            LawId::L4 => LawParams::L4(L4Params {
                e: get("E")?,
                a: get("A")?,
                b: get("B")?,
                c: get("C")?,
                alpha: get("alpha")?,
                beta: get("beta")?,
                b_base: get("b")?,
                c_base: get("c")?,
            }),
            LawId::L5 => LawParams::L5(L5Params {
                e: get("E")?,
                a: get("A")?,
                b: get("B")?,
                alpha: get("alpha")?,
                beta: get("beta")?,
                sigma: get("sigma")?,
            }),
            LawId::CrossDomain => {
                let repr = k_repr.ok_or_else(|| Error::invalid("cross-domain law needs k_repr"))?;
                let w3 = match repr {
                    KRepr::K4 => Some(get("w3")?),
                    _ => None,
                };
                LawParams::CrossDomain(CrossDomainParams {
                    base: get_dcpt(&get)?,
                    f: get("F")?,
                    mu: get("mu")?,
                    k: KRepresentation { repr, w1: get("w1")?, w2: get("w2")?, w3 },
                })
            }
        })
    }

    pub fn as_dcpt(&self) -> Option<&DcptParams> {
        match self {
            LawParams::L3(p) => Some(p),
            _ => None,
        }
    }
}

fn put_dcpt(put: &mut impl FnMut(&str, f64), l: &DcptParams) {
    put("E", l.e);
    put("A", l.a);
    put("B", l.b);
    put("C", l.c);
    put("alpha", l.alpha);
    put("beta", l.beta);
    put("gamma", l.gamma);
    put("eta", l.eta);
    put("epsilon", l.epsilon);
}

fn get_dcpt(get: &impl Fn(&str) -> Result<f64>) -> Result<DcptParams> {
    Ok(DcptParams {
        e: get("E")?,
        a: get("A")?,
        b: get("B")?,
        c: get("C")?,
        alpha: get("alpha")?,
        beta: get("beta")?,
        gamma: get("gamma")?,
        eta: get("eta")?,
        epsilon: get("epsilon")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub objective: f64,
    pub init_index: usize,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub n_points: usize,
    pub starts_run: usize,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<CorpusSide>,
}

/// Fitted-law artifact document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawArtifact {
    pub law_id: LawId,
    pub params: BTreeMap<String, f64>,
    pub d_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_repr: Option<KRepr>,
    #[serde(default)]
    pub metrics: Option<Metrics>,
    #[serde(default)]
    pub fit_metadata: Option<FitMetadata>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, DomainFeatures>,
}

impl LawArtifact {
    pub fn new(law: &LawParams, d_min: f64) -> Self {
        let k_repr = match law {
            LawParams::CrossDomain(p) => Some(p.k.repr),
            _ => None,
        };
        LawArtifact {
            law_id: law.id(),
            params: law.to_flat(),
            d_min,
            k_repr,
            metrics: None,
            fit_metadata: None,
            features: BTreeMap::new(),
        }
    }

    pub fn law(&self) -> Result<LawParams> {
        LawParams::from_flat(self.law_id, &self.params, self.k_repr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: LawArtifact = serde_json::from_str(text)?;
        a.law()?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example() -> DcptParams {
        DcptParams { e: 1.0, a: 2.0, alpha: 1.0, b: 1.0, beta: 1.0, eta: 2.0, c: 1.0, gamma: 1.0, epsilon: 0.1 }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn l3_evaluate_examples() {
        let p = example();
        assert!(close(p.evaluate(2.0, 1.0, 0.9).unwrap(), 3.81));
        assert!(close(p.evaluate(2.0, 1.0, 0.0).unwrap(), 12.0));
        let via_enum = LawParams::L3(p).evaluate(&LawPoint::new(2.0, 1.0, 0.9)).unwrap();
        assert!(close(via_enum, 3.81));
    }

    #[test]
    fn zero_coefficients_give_constant_law() {
        let pt = LawPoint::new(0.7, 3.0, 0.4);
        let l3 = DcptParams { a: 0.0, b: 0.0, c: 0.0, ..example() };
        assert_eq!(LawParams::L3(l3).evaluate(&pt).unwrap(), 1.0);
        let l1 = L1Params { e: 1.5, a: 0.0, b: 0.0, c: 0.0, alpha: 0.3, beta: 0.2, gamma: 0.5, epsilon: 0.1 };
        assert_eq!(LawParams::L1(l1).evaluate(&pt).unwrap(), 1.5);
        let l4 = L4Params { e: 1.5, a: 0.0, b: 0.0, c: 0.0, alpha: 0.3, beta: 0.2, b_base: 2.0, c_base: 3.0 };
        assert_eq!(LawParams::L4(l4).evaluate(&pt).unwrap(), 1.5);
        let l5 = L5Params { e: 1.5, a: 0.0, b: 0.0, alpha: 0.3, beta: 0.2, sigma: 1.0 };
        assert_eq!(LawParams::L5(l5).evaluate(&pt).unwrap(), 1.5);
        let ch = ChinchillaParams { e: 1.5, a: 0.0, b: 0.0, alpha: 0.3, beta: 0.2 };
        assert_eq!(LawParams::Chinchilla(ch).evaluate(&pt).unwrap(), 1.5);
    }

    #[test]
    fn partial_examples() {
        let p = example();
        let (dn, _dd, dr) = p.partials(2.0, 1.0, 0.9).unwrap();
        assert!(close(dn, -0.5));
        assert!(close(dr, 0.8));
        let flat = DcptParams { a: 0.0, ..p };
        assert_eq!(flat.partials(2.0, 1.0, 0.9).unwrap().0, 0.0);
    }

    #[test]
    fn mixed_partial_examples() {
        let p = example();
        assert!(close(p.mixed_partial_dr_dd(2.0, 1.0, 0.9).unwrap(), -1.8));
        assert_eq!(p.mixed_partial_dr_dd(2.0, 1.0, 0.0).unwrap(), 0.0);
        let nob = DcptParams { b: 0.0, ..p };
        assert_eq!(nob.mixed_partial_dr_dd(2.0, 1.0, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn c0_examples() {
        let p = example();
        assert!(close(p.c0_bound(1.0).unwrap(), 2.42));
        assert_eq!(DcptParams { b: 0.0, ..p }.c0_bound(1.0).unwrap(), 0.0);
        let c0 = p.c0_bound(0.1311).unwrap();
        assert!((c0 - 2.42 / 0.1311).abs() < 1e-9, "{c0}");
        assert!((c0 - 18.46).abs() < 0.01);
        assert!(DcptParams { gamma: 0.0, ..p }.c0_bound(1.0).is_err());
    }

    #[test]
    fn constraint_report() {
        let p = example();
        let rep = p.check_constraints(1.0);
        assert!(rep.eta_ok);
        assert!(!rep.c_ok);
        assert!(rep.positivity_ok);
        assert!(DcptParams { c: 3.0, ..p }.check_constraints(1.0).c_ok);
        assert!(!DcptParams { eta: 1.0, ..p }.check_constraints(1.0).eta_ok);
        let bad = DcptParams { gamma: -0.1, ..p }.check_constraints(1.0);
        assert!(!bad.positivity_ok && !bad.c_ok && bad.c0.is_none());
    }

    #[test]
    fn reduction_examples() {
        let p = example();
        let ch = p.reduce_to_chinchilla(0.9).unwrap();
        assert!(close(ch.e, 2.0));
        assert!(close(ch.b, 0.81));
        assert_eq!((ch.a, ch.alpha, ch.beta), (p.a, p.alpha, p.beta));

        let z = p.reduce_to_chinchilla(0.0).unwrap();
        assert_eq!(z.b, 0.0);
        assert!(close(z.e, 1.0 + 1.0 / 0.1));

        let noc = DcptParams { c: 0.0, epsilon: 0.37, ..p }.reduce_to_chinchilla(1.0).unwrap();
        assert_eq!(noc.e, p.e);
        assert_eq!(noc.b, p.b);
        assert!(p.reduce_to_chinchilla(1.5).is_err());
    }

    #[test]
    fn derive_domain_law_examples() {
        let cross = CrossDomainParams { base: example(), f: 2.0, mu: 0.5, k: KRepresentation::k3(1.0, 1.0) };
        assert!(close(cross.derive_domain_law(4.0).unwrap().e, 2.0));
        let nof = CrossDomainParams { f: 0.0, ..cross };
        assert_eq!(nof.derive_domain_law(4.0).unwrap().e, 1.0);
        assert!(cross.derive_domain_law(0.0).is_err());
        for k in [0.1, 1.0, 7.5] {
            assert!(cross.partial_k(k).unwrap() < 0.0);
        }
    }

    #[test]
    fn evaluate_domain_errors() {
        let cross =
            LawParams::CrossDomain(CrossDomainParams { base: example(), f: 1.0, mu: 1.0, k: KRepresentation::k1(1.0) });
        assert!(cross.evaluate(&LawPoint::new(1.0, 1.0, 0.5)).is_err());
        assert!(cross.evaluate(&LawPoint::new(1.0, 1.0, 0.5).with_k(-1.0)).is_err());
        assert!(cross.evaluate(&LawPoint::new(1.0, 1.0, 0.5).with_k(2.0)).is_ok());

        let l5 = LawParams::L5(L5Params { e: 1.0, a: 1.0, b: 1.0, alpha: 0.3, beta: 0.3, sigma: -1.0 });
        assert!(matches!(l5.evaluate(&LawPoint::new(1.0, 1.0, 0.0)), Err(Error::Domain(_))));

        let l1 =
            LawParams::L1(L1Params { e: 1.0, a: 1.0, b: 1.0, c: 1.0, alpha: 0.3, beta: 0.3, gamma: 0.5, epsilon: 0.0 });
        assert!(matches!(l1.evaluate(&LawPoint::new(1.0, 1.0, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn flat_round_trip_every_law() {
        let l3 = example();
        let laws = [
            LawParams::Chinchilla(ChinchillaParams { e: 1.0, a: 2.0, b: 3.0, alpha: 0.3, beta: 0.4 }),
            LawParams::OpenAi(OpenAiParams { n_c: 8.8, d_c: 5.4, alpha_n: 0.076, alpha_d: 0.095 }),
            LawParams::L1(L1Params { e: 1.0, a: 2.0, b: 3.0, c: 0.5, alpha: 0.3, beta: 0.4, gamma: 0.6, epsilon: 0.1 }),
            LawParams::L2(L2Params {
                e: 1.0,
                a: 2.0,
                b: 3.0,
                c: 0.5,
                alpha: 0.3,
                beta: 0.4,
                gamma: 0.6,
                eta: 1.2,
                epsilon: 0.1,
            }),
            LawParams::L3(l3),
            LawParams::L4(L4Params { e: 1.0, a: 2.0, b: 3.0, c: 0.5, alpha: 0.3, beta: 0.4, b_base: 0.5, c_base: 2.0 }),
            LawParams::L5(L5Params { e: 1.0, a: 2.0, b: 3.0, alpha: 0.3, beta: 0.4, sigma: 0.2 }),
            LawParams::CrossDomain(CrossDomainParams {
                base: l3,
                f: 0.3,
                mu: 0.7,
                k: KRepresentation::k4(1.0, 0.5, 0.01),
            }),
        ];
        for law in laws {
            let repr = match &law {
                LawParams::CrossDomain(c) => Some(c.k.repr),
                _ => None,
            };
            let back = LawParams::from_flat(law.id(), &law.to_flat(), repr).unwrap();
            assert_eq!(back, law);
            assert_eq!(law.id().as_str().parse::<LawId>().unwrap(), law.id());
        }
    }

    fn valid_l3() -> impl Strategy<Value = (DcptParams, f64)> {
        (
            0.1f64..2.0,
            0.05f64..2.0,
            0.05f64..0.8,
            0.05f64..1.0,
            0.05f64..0.8,
            0.1f64..1.5,
            1.05f64..3.0,
            0.01f64..0.5,
            0.01f64..3.0,
            0.05f64..1.0,
        )
            .prop_map(|(e, a, alpha, b, beta, gamma, eta, epsilon, c_extra, d_min)| {
                let mut p = DcptParams { e, a, b, c: 0.0, alpha, beta, gamma, eta, epsilon };
                p.c = p.c0_bound(d_min).unwrap() + c_extra;
                (p, d_min)
            })
    }

    /// Richardson-extrapolated central difference.
    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-3 * x.abs().max(1e-3);
        let c = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
        (4.0 * c(h / 2.0) - c(h)) / 3.0
    }

    /// Agreement up to `rel`, plus the cancellation error of differencing a
    /// value of size `scale` over a step proportional to `x`.
    fn fd_close(exact: f64, approx: f64, scale: f64, x: f64) -> bool {
        (exact - approx).abs() <= 1e-5 * exact.abs().max(approx.abs()) + 1e-11 * scale / x
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn constrained_laws_follow_explicit_and_implicit_trends(
            (p, d_min) in valid_l3(),
            n in 0.1f64..20.0,
            d_scale in 1.0f64..50.0,
            r in 0.0f64..=1.0,
        ) {
            let d = d_min * d_scale;
            prop_assert!(p.check_constraints(d_min).all_ok());
            let (dn, dd, dr) = p.partials(n, d, r).unwrap();
            prop_assert!(dn < 0.0);
            prop_assert!(dr < 0.0);
            if r > 0.0 {
                prop_assert!(dd < 0.0);
                prop_assert!(p.mixed_partial_dr_dd(n, d, r).unwrap() < 0.0);
            }
        }

        #[test]
        fn partials_match_finite_differences(
            (p, _d_min) in valid_l3(),
            n in 0.2f64..20.0,
            d in 0.1f64..20.0,
            r in 0.05f64..0.95,
        ) {
            let (dn, dd, dr) = p.partials(n, d, r).unwrap();
            let fdn = fd(|x| p.evaluate(x, d, r).unwrap(), n);
            let fdd = fd(|x| p.evaluate(n, x, r).unwrap(), d);
            let fdr = fd(|x| p.evaluate(n, d, x).unwrap(), r);
            let l = p.evaluate(n, d, r).unwrap();
            prop_assert!(fd_close(dn, fdn, l, n), "dN {} vs {}", dn, fdn);
            prop_assert!(fd_close(dd, fdd, l, d), "dD {} vs {}", dd, fdd);
            prop_assert!(fd_close(dr, fdr, l, r), "dr {} vs {}", dr, fdr);
        }

        #[test]
        fn chinchilla_reduction_is_an_identity((p, _d) in valid_l3(), r0 in 0.0f64..=1.0) {
            let ch = p.reduce_to_chinchilla(r0).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    let n = 0.1 * 1.6f64.powi(i);
                    let d = 0.05 * 1.8f64.powi(j);
                    let a = p.evaluate(n, d, r0).unwrap();
                    let b = ch.evaluate(n, d);
                    prop_assert!(rel_err(a, b) < 1e-12);
                }
            }
        }

        #[test]
        fn artifact_json_round_trip((p, d_min) in valid_l3(), f in 0.01f64..3.0, mu in 0.1f64..2.0, w in -1.0f64..1.0) {
            for law in [
                LawParams::L3(p),
                LawParams::CrossDomain(CrossDomainParams { base: p, f, mu, k: KRepresentation::k4(0.7, w, 1e-3) }),
            ] {
                let mut doc = LawArtifact::new(&law, d_min);
                doc.metrics = Some(Metrics { huber: f * 1e-5, r2: 1.0 - w.abs() * 1e-3 });
                let back = LawArtifact::from_json(&doc.to_json().unwrap()).unwrap();
                prop_assert_eq!(back.law().unwrap(), law);
                prop_assert_eq!(back, doc);
            }
        }

        #[test]
        fn cross_domain_uniformity((p, _d) in valid_l3(), f in 0.01f64..3.0, mu in 0.1f64..2.0, k in 0.05f64..10.0,
                                   n in 0.1f64..10.0, d in 0.1f64..10.0, r in 0.0f64..=1.0) {
            let cross = CrossDomainParams { base: p, f, mu, k: KRepresentation::k1(1.0) };
            let direct = cross.evaluate(n, d, r, k).unwrap();
            let derived = cross.derive_domain_law(k).unwrap().evaluate(n, d, r).unwrap();
            prop_assert!(rel_err(direct, derived) < 1e-12);
        }
    }
}
