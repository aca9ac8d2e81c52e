//! Learnability features from early loss curves and the cross-domain fit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{fit_problem, min_tokens, prepare_points, FitConfig, FitResult, Problem};
use crate::laws::{CrossDomainParams, LawParams};
use crate::model::{CorpusSide, DataPoint, LossCurve};

/// Steps whose evaluations feed [`extract_features`].
pub const FEATURE_STEPS: [u64; 12] = [0, 1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000, 9000, 10_000, 11_000];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlcFeatures {
    /// Loss after 1000 steps.
    pub k1: f64,
    /// Drop over the first 5000 steps.
    pub k2: f64,
    /// Mean second difference of the per-1000-step deltas.
    pub k3: f64,
}

impl DlcFeatures {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::invalid(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(self.k2.is_finite() && self.k3.is_finite()) {
            return Err(Error::invalid("k2 and k3 must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KRepr {
    K1,
    K2,
    K3,
    K4,
}

impl FromStr for KRepr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "K1" => Ok(KRepr::K1),
            "K2" => Ok(KRepr::K2),
            "K3" => Ok(KRepr::K3),
            "K4" => Ok(KRepr::K4),
            _ => Err(Error::invalid(format!("unknown K representation `{s}`"))),
        }
    }
}

impl fmt::Display for KRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A K representation with its weights. Unused weights are zero; `w3` is
/// set only for K4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KRepresentation {
    pub repr: KRepr,
    pub w1: f64,
    pub w2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w3: Option<f64>,
}

impl KRepresentation {
    pub fn k1(w1: f64) -> Self {
        KRepresentation { repr: KRepr::K1, w1, w2: 0.0, w3: None }
    }

    pub fn k2(w2: f64) -> Self {
        KRepresentation { repr: KRepr::K2, w1: 0.0, w2, w3: None }
    }

    pub fn k3(w1: f64, w2: f64) -> Self {
        KRepresentation { repr: KRepr::K3, w1, w2, w3: None }
    }

    pub fn k4(w1: f64, w2: f64, w3: f64) -> Self {
        KRepresentation { repr: KRepr::K4, w1, w2, w3: Some(w3) }
    }
}

/// Scalar K for a domain's features.
pub fn k_value(rep: &KRepresentation, f: &DlcFeatures) -> Result<f64> {
    if !(f.k1 > 0.0) {
        return Err(Error::domain(format!("k1 must be > 0, got {}", f.k1)));
    }
    let first = rep.w1 / f.k1;
    let second = rep.w2 * f.k2;
    Ok(match rep.repr {
        KRepr::K1 => first,
        KRepr::K2 => second,
        KRepr::K3 => first + second,
        KRepr::K4 => {
            if f.k3.abs() < 1e-12 {
                return Err(Error::domain(format!("K4 needs |k3| >= 1e-12, got {}", f.k3)));
            }
            first + second + rep.w3.unwrap_or(0.0) / f.k3
        }
    })
}

/// Features from a loss lookup by step. Only the steps in
/// [`FEATURE_STEPS`] are requested.
pub fn features_from_lookup(mut loss_at: impl FnMut(u64) -> Option<f64>) -> Result<DlcFeatures> {
    let mut l = [0.0; 12];
    for (slot, &step) in l.iter_mut().zip(&FEATURE_STEPS) {
        *slot = loss_at(step).ok_or_else(|| Error::InsufficientData(format!("no evaluation at step {step}")))?;
    }
    let delta: Vec<f64> = l.windows(2).map(|w| w[1] - w[0]).collect();
    let k3 = (0..10).map(|i| delta[i + 1] - delta[i]).sum::<f64>() / 10.0;
    let f = DlcFeatures { k1: l[1], k2: l[0] - l[5], k3 };
    f.validate()?;
    Ok(f)
}

/// Features from one side of a curve evaluated every 1000 steps up to
/// step 11000.
pub fn extract_features(curve: &LossCurve, side: CorpusSide) -> Result<DlcFeatures> {
    features_from_lookup(|step| curve.sample_at(step).map(|s| side.loss(s)))
}

/// Where a domain's features came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProvenance {
    pub curve_id: String,
    pub side: CorpusSide,
    /// Ratio of the probe run seen from `side`.
    pub reference_ratio: f64,
}

/// Fitting points and learnability features keyed by domain name.
pub type DomainSets = BTreeMap<String, (Vec<DataPoint>, DlcFeatures)>;

/// Features of one domain with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFeatures {
    pub features: DlcFeatures,
    pub provenance: FeatureProvenance,
}

/// Stable identifier of a run within a log.
pub fn curve_id(curve: &LossCurve) -> String {
    format!("{}/n={}/r_domain={}", curve.domain_name, curve.n, curve.r_domain)
}

/// Features for every domain in `curves`, each read from that domain's
/// probe curve (see [`reference_curve`]).
pub fn domain_features(
    curves: &[LossCurve],
    side: CorpusSide,
    reference_ratio: f64,
) -> Result<BTreeMap<String, DomainFeatures>> {
    let mut by_domain: BTreeMap<&str, Vec<LossCurve>> = BTreeMap::new();
    for c in curves {
        by_domain.entry(&c.domain_name).or_default().push(c.clone());
    }
    let mut out = BTreeMap::new();
    for (name, group) in by_domain {
        let probe = reference_curve(&group, side, reference_ratio).expect("non-empty group");
        let features =
            extract_features(probe, side).map_err(|e| Error::InsufficientData(format!("domain {name}: {e}")))?;
        out.insert(
            name.to_string(),
            DomainFeatures {
                features,
                provenance: FeatureProvenance {
                    curve_id: curve_id(probe),
                    side,
                    reference_ratio: side.ratio(probe.r_domain),
                },
            },
        );
    }
    Ok(out)
}

/// Picks the probe curve for `side`: the run whose ratio on that side is
/// closest to `reference_ratio` (1.0 means a pure-corpus run).
pub fn reference_curve(curves: &[LossCurve], side: CorpusSide, reference_ratio: f64) -> Option<&LossCurve> {
    curves.iter().min_by(|a, b| {
        let da = (side.ratio(a.r_domain) - reference_ratio).abs();
        let db = (side.ratio(b.r_domain) - reference_ratio).abs();
        da.total_cmp(&db).then(a.n.total_cmp(&b.n))
    })
}

/// Fits one cross-domain law jointly over every domain.
pub fn fit_cross_domain(
    points_by_domain: &DomainSets,
    repr: KRepr,
    cfg: &FitConfig,
) -> Result<(CrossDomainParams, FitResult)> {
    fit_cross_domain_min(points_by_domain, repr, cfg, 2)
}

/// [`fit_cross_domain`] with a configurable minimum domain count; the
/// domain holdout needs to fit on a single remaining domain when only
/// three are available.
pub(crate) fn fit_cross_domain_min(
    points_by_domain: &DomainSets,
    repr: KRepr,
    cfg: &FitConfig,
    min_domains: usize,
) -> Result<(CrossDomainParams, FitResult)> {
    if points_by_domain.len() < min_domains.max(1) {
        return Err(Error::invalid(format!(
            "cross-domain fit needs at least {min_domains} domains, got {}",
            points_by_domain.len()
        )));
    }
    cfg.validate()?;
    let mut points = Vec::new();
    let mut groups = Vec::new();
    let mut features = Vec::new();
    for (g, (pts, f)) in points_by_domain.values().enumerate() {
        f.validate()?;
        features.push(*f);
        let kept = prepare_points(pts, 0, cfg)?;
        groups.extend(std::iter::repeat_n(g as u32, kept.len()));
        points.extend(kept);
    }
    if points.is_empty() {
        return Err(Error::invalid("no usable points"));
    }
    let d_min = min_tokens(&points);
    let problem = Problem::cross_domain(repr, &points, &groups, features, d_min, cfg.delta)?;
    prepare_points(&points, problem.dim(), cfg)?;
    let res = fit_problem(&problem, cfg)?;
    match res.law {
        LawParams::CrossDomain(p) => Ok((p, res)),
        _ => unreachable!("cross-domain problem decodes to a cross-domain law"),
    }
}
