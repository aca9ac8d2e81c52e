//! Multi-start constrained L-BFGS fitting in log space.
//!
//! Every law is fitted by minimizing the mean Huber loss between the
//! log-sum-exp form of its log-prediction and the observed log loss. For
//! the D-CPT law the coefficient `C` is split as `C0 + exp(c1)` where `C0`
//! is the smallest value keeping `dL/dr < 0` over the data, and
//! `eta = 1 + exp(eta1)`, so every decoded candidate satisfies the trend
//! constraints by construction.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dlc::{k_value, DlcFeatures, KRepr, KRepresentation};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::laws::{
    ChinchillaParams, ConstraintReport, CrossDomainParams, DcptParams, FitMetadata, L1Params, L2Params, L4Params,
    L5Params, LawArtifact, LawId, LawParams, LawPoint, OpenAiParams, EPSILON_FLOOR,
};
use crate::lbfgs::{self, LbfgsConfig};
use crate::model::DataPoint;

/// Huber penalty: quadratic within `delta`, linear beyond.
pub fn huber(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
fn huber_slope(residual: f64, delta: f64) -> f64 {
    residual.clamp(-delta, delta)
}

/// Per-symbol starting values for the multi-start search.
///
/// Symbols follow the reparameterized vector: `a`, `b`, `c`, `e` are log
/// coefficients, `alpha`/`beta` raw exponents, `gamma` is mapped to
/// `log(gamma)` (non-positive entries become `log 0.5`), `eta1` is raw and
/// `epsilon` is clamped into `[1e-4, 1]`. Law-specific extras are listed in
/// [`InitGrid::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InitGrid(pub BTreeMap<String, Vec<f64>>);

impl Default for InitGrid {
    fn default() -> Self {
        let coeff: Vec<f64> = (-1..=5).map(f64::from).collect();
        let expo = vec![-0.5, 0.0, 0.5];
        let mut m = BTreeMap::new();
        m.insert("a".into(), coeff.clone());
        m.insert("b".into(), coeff.clone());
        m.insert("c".into(), coeff);
        m.insert("e".into(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        m.insert("alpha".into(), expo.clone());
        m.insert("beta".into(), expo.clone());
        m.insert("gamma".into(), expo.clone());
        m.insert("eta1".into(), expo);
        m.insert("epsilon".into(), vec![0.0, 0.5]);
        // L2 outer exponent
        m.insert("eta".into(), vec![0.5, 1.0, 1.5]);
        // L4 bases, log scale
        m.insert("log_b_base".into(), vec![-0.5, 0.0, 0.5]);
        m.insert("log_c_base".into(), vec![-0.5, 0.0, 0.5]);
        // L5 noise-token constant, log B-tokens
        m.insert("log_sigma".into(), vec![-2.0, 0.0]);
        // OpenAI scale constants and exponents, log scale
        m.insert("log_n_c".into(), vec![0.0, 2.0, 4.0]);
        m.insert("log_d_c".into(), vec![0.0, 2.0, 4.0]);
        m.insert("log_alpha_n".into(), vec![-2.5, -1.0]);
        m.insert("log_alpha_d".into(), vec![-2.5, -1.0]);
        // learnability term
        m.insert("f".into(), vec![-1.0, 0.0, 1.0]);
        m.insert("mu".into(), vec![0.5, 1.0]);
        m.insert("w1".into(), vec![1.0, 4.0]);
        m.insert("w2".into(), vec![0.5, 2.0]);
        m.insert("w3".into(), vec![0.01]);
        InitGrid(m)
    }
}

impl InitGrid {
    fn axis(&self, symbol: &str) -> Vec<f64> {
        let mut vals =
            self.0.get(symbol).cloned().or_else(|| InitGrid::default().0.get(symbol).cloned()).unwrap_or_default();
        match symbol {
            "gamma" => {
                for v in vals.iter_mut() {
                    *v = if *v > 0.0 { v.ln() } else { 0.5f64.ln() };
                }
            }
            "epsilon" => {
                for v in vals.iter_mut() {
                    *v = v.clamp(EPSILON_FLOOR, 1.0);
                }
            }
            _ => {}
        }
        let mut out: Vec<f64> = Vec::with_capacity(vals.len());
        for v in vals {
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Huber transition width.
    pub delta: f64,
    pub init_grid: InitGrid,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub function_tolerance: f64,
    /// Points with a target ratio below this are left out of fitting.
    pub r_floor: f64,
    /// Cap on the number of starts; the full grid is subsampled at evenly
    /// spaced enumeration indices when it is larger.
    pub max_grid_candidates: Option<usize>,
    pub execution: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            delta: 1e-3,
            init_grid: InitGrid::default(),
            max_iterations: 1000,
            gradient_tolerance: 1e-8,
            function_tolerance: 1e-14,
            r_floor: 0.1,
            max_grid_candidates: Some(2000),
            execution: Execution::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::invalid("delta must be > 0"));
        }
        if !(0.0..1.0).contains(&self.r_floor) {
            return Err(Error::invalid("r_floor must be in [0,1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::invalid("gradient_tolerance must be > 0"));
        }
        if self.max_grid_candidates == Some(0) {
            return Err(Error::invalid("max_grid_candidates must be positive"));
        }
        if self.init_grid.0.values().any(|v| v.is_empty()) {
            return Err(Error::invalid("init grid axes must be non-empty"));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            memory: 10,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            function_tolerance: self.function_tolerance,
        }
    }
}

/// The D-CPT law's fitting coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamVector {
    /// `log A`
    pub a: f64,
    /// `log B`
    pub b: f64,
    /// `log (C - C0)`
    pub c1: f64,
    /// `log E`
    pub e: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `log gamma`
    pub g: f64,
    /// `eta = 1 + exp(eta1)`
    pub eta1: f64,
    /// Clamped into `[1e-4, 1]` on decode.
    pub eps_raw: f64,
}

impl ReparamVector {
    pub const DIM: usize = 9;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.a, self.b, self.c1, self.e, self.alpha, self.beta, self.g, self.eta1, self.eps_raw]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < Self::DIM {
            return Err(Error::invalid(format!("reparameterized vector needs {} entries, got {}", Self::DIM, v.len())));
        }
        Ok(ReparamVector {
            a: v[0],
            b: v[1],
            c1: v[2],
            e: v[3],
            alpha: v[4],
            beta: v[5],
            g: v[6],
            eta1: v[7],
            eps_raw: v[8],
        })
    }

    pub fn decode(&self, d_min: f64) -> DcptParams {
        let gamma = self.g.exp();
        let eta = 1.0 + self.eta1.exp();
        let epsilon = self.eps_raw.clamp(EPSILON_FLOOR, 1.0);
        let b = self.b.exp();
        let c0 = b * eta * (1.0 + epsilon).powf(gamma + 1.0) / (gamma * d_min.powf(self.beta));
        DcptParams {
            e: self.e.exp(),
            a: self.a.exp(),
            b,
            c: c0 + self.c1.exp(),
            alpha: self.alpha,
            beta: self.beta,
            gamma,
            eta,
            epsilon,
        }
    }

    /// Inverse of [`ReparamVector::decode`]. Fails when the law does not
    /// satisfy `C > C0`, `eta > 1`, `gamma > 0` or has a non-positive
    /// coefficient.
    pub fn encode(p: &DcptParams, d_min: f64) -> Result<Self> {
        let c0 = p.c0_bound(d_min)?;
        if !(p.c > c0 && p.eta > 1.0 && p.a > 0.0 && p.b > 0.0 && p.e > 0.0) {
            return Err(Error::invalid("law cannot be expressed in fitting coordinates"));
        }
        Ok(ReparamVector {
            a: p.a.ln(),
            b: p.b.ln(),
            c1: (p.c - c0).ln(),
            e: p.e.ln(),
            alpha: p.alpha,
            beta: p.beta,
            g: p.gamma.ln(),
            eta1: (p.eta - 1.0).ln(),
            eps_raw: p.epsilon,
        })
    }
}

/// Fit quality: mean Huber on log residuals and R^2 on raw losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub huber: f64,
    pub r2: f64,
}

/// Metrics from paired predictions and observations.
pub fn metrics_from_predictions(predicted: &[f64], observed: &[f64], delta: f64) -> Result<Metrics> {
    if predicted.is_empty() || predicted.len() != observed.len() {
        return Err(Error::invalid("metrics need equally sized, non-empty inputs"));
    }
    let n = observed.len() as f64;
    let huber_mean = predicted.iter().zip(observed).map(|(p, o)| huber(p.ln() - o.ln(), delta)).sum::<f64>() / n;
    let mean = observed.iter().sum::<f64>() / n;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    let ss_res: f64 = predicted.iter().zip(observed).map(|(p, o)| (o - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R^2 with identical observed losses".into()));
    }
    Ok(Metrics { huber: huber_mean, r2: 1.0 - ss_res / ss_tot })
}

/// Huber (log space) and R^2 (raw space) of a law on a set of points.
pub fn metrics(law: &LawParams, points: &[DataPoint], delta: f64) -> Result<Metrics> {
    if points.is_empty() {
        return Err(Error::invalid("metrics need at least one point"));
    }
    let predicted = points.iter().map(|p| law.evaluate(&LawPoint::from(p))).collect::<Result<Vec<_>>>()?;
    let observed: Vec<f64> = points.iter().map(|p| p.loss).collect();
    metrics_from_predictions(&predicted, &observed, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub init_index: usize,
    /// `None` when the start never produced a finite objective.
    pub objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Survived the sign filters on the decoded parameters.
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub law: LawParams,
    /// Final mean Huber objective.
    pub objective: f64,
    /// Enumeration index of the winning start in the full grid.
    pub init_index: usize,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Winning vector in fitting coordinates.
    pub vector: Vec<f64>,
    pub constraints: Option<ConstraintReport>,
    /// `None` when R^2 is undefined on the fitted points.
    pub metrics: Option<Metrics>,
    pub d_min: f64,
    pub n_points: usize,
    pub starts: Vec<StartSummary>,
}

impl FitResult {
    /// Artifact document for this fit; `delta` is the Huber width used.
    pub fn artifact(&self, delta: f64) -> LawArtifact {
        let mut a = LawArtifact::new(&self.law, self.d_min);
        a.metrics = self.metrics;
        a.fit_metadata = Some(FitMetadata {
            objective: self.objective,
            init_index: self.init_index,
            iterations: self.iterations,
            converged: self.converged,
            gradient_norm: self.gradient_norm,
            n_points: self.n_points,
            starts_run: self.starts.len(),
            delta,
            side: None,
        });
        a
    }
}

// ---------------------------------------------------------------------------
// Problem setup

#[derive(Debug, Clone)]
pub(crate) enum ModelKind {
    Chinchilla,
    OpenAi,
    L1,
    L2,
    L3,
    L4,
    L5,
    Cross { repr: KRepr, features: Vec<DlcFeatures> },
}

/// Indexed view of a point set with unique `N`, `D` and `r` values pulled
/// out so per-evaluation transcendental work scales with the number of
/// distinct values, not the number of points.
#[derive(Debug, Clone)]
struct Design {
    ln_n: Vec<f64>,
    n_idx: Vec<u32>,
    ln_d: Vec<f64>,
    d_idx: Vec<u32>,
    r: Vec<f64>,
    r_idx: Vec<u32>,
    group_idx: Vec<u32>,
    n_groups: usize,
    ln_loss: Vec<f64>,
    ln_d_min: f64,
}

fn unique_index(values: impl Iterator<Item = f64>) -> (Vec<f64>, Vec<u32>) {
    let mut seen: HashMap<u64, u32> = HashMap::new();
    let mut uniq = Vec::new();
    let idx = values
        .map(|v| {
            *seen.entry(v.to_bits()).or_insert_with(|| {
                uniq.push(v);
                (uniq.len() - 1) as u32
            })
        })
        .collect();
    (uniq, idx)
}

impl Design {
    fn new(points: &[DataPoint], groups: &[u32], n_groups: usize, d_min: f64) -> Self {
        let (n_u, n_idx) = unique_index(points.iter().map(|p| p.n));
        let (d_u, d_idx) = unique_index(points.iter().map(|p| p.d));
        let (r_u, r_idx) = unique_index(points.iter().map(|p| p.r));
        Design {
            ln_n: n_u.iter().map(|v| v.ln()).collect(),
            n_idx,
            ln_d: d_u.iter().map(|v| v.ln()).collect(),
            d_idx,
            r: r_u,
            r_idx,
            group_idx: groups.to_vec(),
            n_groups,
            ln_loss: points.iter().map(|p| p.loss.ln()).collect(),
            ln_d_min: d_min.ln(),
        }
    }

    fn len(&self) -> usize {
        self.ln_loss.len()
    }
}

/// A fitting problem: law, data and loss width, exposing the objective and
/// its gradient in fitting coordinates.
#[derive(Debug, Clone)]
pub struct Problem {
    kind: ModelKind,
    design: Design,
    points: Vec<DataPoint>,
    d_min: f64,
    delta: f64,
}

const IA: usize = 0;
const IB: usize = 1;
const IC1: usize = 2;
const IE: usize = 3;
const IALPHA: usize = 4;
const IBETA: usize = 5;
const IG: usize = 6;
const IETA1: usize = 7;
const IEPS: usize = 8;
const IF: usize = 9;
const IMU: usize = 10;
const IW: usize = 11;

fn weight_symbols(repr: KRepr) -> &'static [&'static str] {
    match repr {
        KRepr::K1 => &["w1"],
        KRepr::K2 => &["w2"],
        KRepr::K3 => &["w1", "w2"],
        KRepr::K4 => &["w1", "w2", "w3"],
    }
}

fn representation_from(repr: KRepr, w: &[f64]) -> KRepresentation {
    match repr {
        KRepr::K1 => KRepresentation::k1(w[0]),
        KRepr::K2 => KRepresentation::k2(w[0]),
        KRepr::K3 => KRepresentation::k3(w[0], w[1]),
        KRepr::K4 => KRepresentation::k4(w[0], w[1], w[2]),
    }
}

/// `dK/dw` for the active weights of a representation.
fn k_weight_grad(repr: KRepr, f: &DlcFeatures, out: &mut [f64]) {
    match repr {
        KRepr::K1 => out[0] = 1.0 / f.k1,
        KRepr::K2 => out[0] = f.k2,
        KRepr::K3 => {
            out[0] = 1.0 / f.k1;
            out[1] = f.k2;
        }
        KRepr::K4 => {
            out[0] = 1.0 / f.k1;
            out[1] = f.k2;
            out[2] = 1.0 / f.k3;
        }
    }
}

impl ModelKind {
    fn symbols(&self) -> Vec<&'static str> {
        match self {
            ModelKind::Chinchilla => vec!["a", "b", "e", "alpha", "beta"],
            ModelKind::OpenAi => vec!["log_n_c", "log_d_c", "log_alpha_n", "log_alpha_d"],
            ModelKind::L1 => vec!["a", "b", "c", "e", "alpha", "beta", "gamma", "epsilon"],
            ModelKind::L2 => vec!["a", "b", "c", "e", "alpha", "beta", "gamma", "eta", "epsilon"],
            ModelKind::L3 => vec!["a", "b", "c", "e", "alpha", "beta", "gamma", "eta1", "epsilon"],
            ModelKind::L4 => vec!["a", "b", "c", "e", "alpha", "beta", "log_b_base", "log_c_base"],
            ModelKind::L5 => vec!["a", "b", "e", "alpha", "beta", "log_sigma"],
            ModelKind::Cross { repr, .. } => {
                let mut s = vec!["a", "b", "c", "e", "alpha", "beta", "gamma", "eta1", "epsilon", "f", "mu"];
                s.extend_from_slice(weight_symbols(*repr));
                s
            }
        }
    }

    fn dim(&self) -> usize {
        self.symbols().len()
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        self.symbols()
            .iter()
            .map(|s| if *s == "epsilon" { (EPSILON_FLOOR, 1.0) } else { (f64::NEG_INFINITY, f64::INFINITY) })
            .collect()
    }
}

impl Problem {
    /// Sets up a single-law fit. No point filtering happens here.
    pub fn new(law: LawId, points: &[DataPoint], d_min: f64, delta: f64) -> Result<Self> {
        let kind = match law {
            LawId::Chinchilla => ModelKind::Chinchilla,
            LawId::OpenAi => ModelKind::OpenAi,
            LawId::L1 => ModelKind::L1,
            LawId::L2 => ModelKind::L2,
            LawId::L3 => ModelKind::L3,
            LawId::L4 => ModelKind::L4,
            LawId::L5 => ModelKind::L5,
            LawId::CrossDomain => {
                return Err(Error::invalid("the cross-domain law is fitted with Problem::cross_domain"))
            }
        };
        let groups = vec![0; points.len()];
        Self::build(kind, points, &groups, 1, d_min, delta)
    }

    /// Sets up a joint fit over several domains, each with its own
    /// learnability features. `groups[i]` indexes `features` for point `i`.
    pub fn cross_domain(
        repr: KRepr,
        points: &[DataPoint],
        groups: &[u32],
        features: Vec<DlcFeatures>,
        d_min: f64,
        delta: f64,
    ) -> Result<Self> {
        if groups.len() != points.len() {
            return Err(Error::invalid("one group index per point"));
        }
        if groups.iter().any(|&g| g as usize >= features.len()) {
            return Err(Error::invalid("group index without features"));
        }
        let n = features.len();
        Self::build(ModelKind::Cross { repr, features }, points, groups, n, d_min, delta)
    }

    fn build(
        kind: ModelKind,
        points: &[DataPoint],
        groups: &[u32],
        n_groups: usize,
        d_min: f64,
        delta: f64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("objective needs at least one point"));
        }
        for p in points {
            p.validate()?;
        }
        if !(d_min > 0.0) {
            return Err(Error::invalid(format!("d_min must be > 0, got {d_min}")));
        }
        if !(delta > 0.0) {
            return Err(Error::invalid("delta must be > 0"));
        }
        Ok(Problem {
            design: Design::new(points, groups, n_groups, d_min),
            kind,
            points: points.to_vec(),
            d_min,
            delta,
        })
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn symbols(&self) -> Vec<&'static str> {
        self.kind.symbols()
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.kind.bounds()
    }

    /// Mean Huber loss of the log-space residuals.
    pub fn objective(&self, v: &[f64]) -> Result<f64> {
        self.check_dim(v)?;
        Ok(self.eval(v, None))
    }

    pub fn gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        let mut g = vec![0.0; self.dim()];
        self.eval(v, Some(&mut g));
        Ok(g)
    }

    pub fn value_and_gradient(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(v, Some(grad))
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!("vector has {} entries, law needs {}", v.len(), self.dim())));
        }
        Ok(())
    }

    /// Decodes a vector in fitting coordinates into law parameters.
    pub fn decode(&self, v: &[f64]) -> LawParams {
        let ex = f64::exp;
        match &self.kind {
            ModelKind::Chinchilla => LawParams::Chinchilla(ChinchillaParams {
                a: ex(v[0]),
                b: ex(v[1]),
                e: ex(v[2]),
                alpha: v[3],
                beta: v[4],
            }),
            ModelKind::OpenAi => {
                LawParams::OpenAi(OpenAiParams { n_c: ex(v[0]), d_c: ex(v[1]), alpha_n: ex(v[2]), alpha_d: ex(v[3]) })
            }
            ModelKind::L1 => LawParams::L1(L1Params {
                a: ex(v[0]),
                b: ex(v[1]),
                c: ex(v[2]),
                e: ex(v[3]),
                alpha: v[4],
                beta: v[5],
                gamma: ex(v[6]),
                epsilon: v[7].clamp(EPSILON_FLOOR, 1.0),
            }),
            ModelKind::L2 => LawParams::L2(L2Params {
                a: ex(v[0]),
                b: ex(v[1]),
                c: ex(v[2]),
                e: ex(v[3]),
                alpha: v[4],
                beta: v[5],
                gamma: ex(v[6]),
                eta: v[7],
                epsilon: v[8].clamp(EPSILON_FLOOR, 1.0),
            }),
            ModelKind::L3 => LawParams::L3(ReparamVector::from_slice(v).expect("dimension checked").decode(self.d_min)),
            ModelKind::L4 => LawParams::L4(L4Params {
                a: ex(v[0]),
                b: ex(v[1]),
                c: ex(v[2]),
                e: ex(v[3]),
                alpha: v[4],
                beta: v[5],
                b_base: ex(v[6]),
                c_base: ex(v[7]),
            }),
            ModelKind::L5 => LawParams::L5(L5Params {
                a: ex(v[0]),
                b: ex(v[1]),
                e: ex(v[2]),
                alpha: v[3],
                beta: v[4],
                sigma: ex(v[5]),
            }),
            ModelKind::Cross { repr, .. } => LawParams::CrossDomain(CrossDomainParams {
                base: ReparamVector::from_slice(v).expect("dimension checked").decode(self.d_min),
                f: ex(v[IF]),
                mu: v[IMU],
                k: representation_from(*repr, &v[IW..]),
            }),
        }
    }

    /// Sign filters applied to a terminal vector before it may win.
    fn admissible(&self, v: &[f64]) -> bool {
        let law = self.decode(v);
        match law {
            LawParams::Chinchilla(p) => p.alpha > 0.0 && p.beta > 0.0,
            LawParams::OpenAi(_) => true,
            LawParams::L1(p) => p.alpha > 0.0 && p.beta > 0.0,
            LawParams::L2(p) => p.alpha > 0.0 && p.beta > 0.0,
            LawParams::L3(p) => p.alpha > 0.0 && p.beta > 0.0,
            LawParams::L4(p) => p.alpha > 0.0 && p.beta > 0.0,
            LawParams::L5(p) => p.alpha > 0.0 && p.beta > 0.0,
            LawParams::CrossDomain(p) => {
                let ModelKind::Cross { features, .. } = &self.kind else { unreachable!() };
                p.base.alpha > 0.0
                    && p.base.beta > 0.0
                    && p.mu > 0.0
                    && features.iter().all(|f| k_value(&p.k, f).map(|k| k > 0.0).unwrap_or(false))
            }
        }
    }

    fn eval(&self, v: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match &self.kind {
            ModelKind::L3 => self.eval_dcpt(v, grad, None),
            ModelKind::Cross { repr, features } => self.eval_dcpt(v, grad, Some((*repr, features))),
            _ => self.eval_generic(v, grad),
        }
    }

    /// Shared Huber aggregation. `point` returns the log prediction of
    /// point `i` and, when asked, writes `d logpred / dv` into the buffer.
    fn aggregate(
        &self,
        dim: usize,
        mut grad: Option<&mut [f64]>,
        mut point: impl FnMut(usize, Option<&mut [f64]>) -> f64,
    ) -> f64 {
        let n = self.design.len();
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut local = vec![0.0; dim];
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        for i in 0..n {
            let lp = match grad {
                Some(_) => {
                    local.iter_mut().for_each(|x| *x = 0.0);
                    point(i, Some(&mut local))
                }
                None => point(i, None),
            };
            if !lp.is_finite() {
                return f64::INFINITY;
            }
            let resid = lp - self.design.ln_loss[i];
            total += huber(resid, self.delta);
            if let Some(g) = grad.as_deref_mut() {
                let slope = huber_slope(resid, self.delta) * inv_n;
                for (gk, lk) in g.iter_mut().zip(&local) {
                    *gk += slope * lk;
                }
            }
        }
        total * inv_n
    }

    fn eval_dcpt(&self, v: &[f64], grad: Option<&mut [f64]>, cross: Option<(KRepr, &[DlcFeatures])>) -> f64 {
        let dsg = &self.design;
        let (a, b, c1, e) = (v[IA], v[IB], v[IC1], v[IE]);
        let (alpha, beta, g, eta1) = (v[IALPHA], v[IBETA], v[IG], v[IETA1]);
        let eps = v[IEPS].clamp(EPSILON_FLOOR, 1.0);
        let gamma = g.exp();
        let ee = eta1.exp();
        let eta = 1.0 + ee;
        let ln1pe = (1.0 + eps).ln();
        let c0 = b + eta.ln() + (gamma + 1.0) * ln1pe - g - beta * dsg.ln_d_min;
        let big_e = e.exp();

        let n_terms: Vec<f64> = dsg.ln_n.iter().map(|l| (a - alpha * l).exp()).collect();
        let d_terms: Vec<f64> = dsg.ln_d.iter().map(|l| (-beta * l).exp()).collect();
        struct RatioCache {
            ln_r: f64,
            rp: f64,
            ln_rp: f64,
            p: f64,
            q: f64,
            s: f64,
        }
        let r_cache: Vec<RatioCache> = dsg
            .r
            .iter()
            .map(|&r| {
                let rp = r + eps;
                let ln_rp = rp.ln();
                let ln_r = if r > 0.0 { r.ln() } else { f64::NEG_INFINITY };
                RatioCache {
                    ln_r,
                    rp,
                    ln_rp,
                    p: if r > 0.0 { (b + eta * ln_r).exp() } else { 0.0 },
                    q: (c1 - gamma * ln_rp).exp(),
                    s: (c0 - gamma * ln_rp).exp(),
                }
            })
            .collect();

        // learnability term per domain: exp(f - mu ln K)
        let mut k_cache: Vec<(f64, f64, f64)> = Vec::new(); // (K, ln K, term)
        let (mut f_log, mut mu, mut n_w) = (0.0, 0.0, 0);
        if let Some((repr, features)) = cross {
            f_log = v[IF];
            mu = v[IMU];
            n_w = weight_symbols(repr).len();
            let rep = representation_from(repr, &v[IW..]);
            for f in features {
                match k_value(&rep, f) {
                    Ok(k) if k > 0.0 && k.is_finite() => {
                        let lk = k.ln();
                        k_cache.push((k, lk, (f_log - mu * lk).exp()));
                    }
                    _ => return f64::INFINITY,
                }
            }
            let _ = dsg.n_groups;
        }
        let mut dk_dw = [0.0; 3];

        let dim = v.len();
        self.aggregate(dim, grad, |i, jac| {
            let ni = dsg.n_idx[i] as usize;
            let di = dsg.d_idx[i] as usize;
            let rc = &r_cache[dsg.r_idx[i] as usize];
            let ln_n = dsg.ln_n[ni];
            let ln_d = dsg.ln_d[di];
            let mut t = [big_e, n_terms[ni], rc.p * d_terms[di], rc.q, rc.s, 0.0];
            let gi = dsg.group_idx[i] as usize;
            if cross.is_some() {
                t[5] = k_cache[gi].2;
            }
            let sum: f64 = t.iter().sum();
            let lp = if sum > 0.0 && sum.is_finite() {
                for x in t.iter_mut() {
                    *x /= sum;
                }
                sum.ln()
            } else {
                // fall back to a max-shifted log-sum-exp
                let mut logs = [
                    e,
                    a - alpha * ln_n,
                    if rc.ln_r.is_finite() { b + eta * rc.ln_r - beta * ln_d } else { f64::NEG_INFINITY },
                    c1 - gamma * rc.ln_rp,
                    c0 - gamma * rc.ln_rp,
                    if cross.is_some() { f_log - mu * k_cache[gi].1 } else { f64::NEG_INFINITY },
                ];
                let lse = log_sum_exp_weights(&mut logs);
                t = logs;
                lse
            };
            if let Some(jac) = jac {
                let w = t;
                jac[IE] = w[0];
                jac[IA] = w[1];
                jac[IALPHA] = -w[1] * ln_n;
                jac[IB] = w[2] + w[4];
                jac[IC1] = w[3];
                jac[IBETA] = -w[2] * ln_d - w[4] * dsg.ln_d_min;
                jac[IG] = -w[3] * gamma * rc.ln_rp + w[4] * (gamma * ln1pe - 1.0 - gamma * rc.ln_rp);
                let t3 = if w[2] > 0.0 { w[2] * ee * rc.ln_r } else { 0.0 };
                jac[IETA1] = t3 + w[4] * ee / eta;
                jac[IEPS] = -w[3] * gamma / rc.rp + w[4] * ((gamma + 1.0) / (1.0 + eps) - gamma / rc.rp);
                if let Some((repr, features)) = cross {
                    let (k, lk, _) = k_cache[gi];
                    jac[IF] = w[5];
                    jac[IMU] = -w[5] * lk;
                    k_weight_grad(repr, &features[gi], &mut dk_dw);
                    for j in 0..n_w {
                        jac[IW + j] = -w[5] * mu / k * dk_dw[j];
                    }
                }
            }
            lp
        })
    }

    fn eval_generic(&self, v: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let dsg = &self.design;
        let kind = &self.kind;
        let dim = v.len();
        self.aggregate(dim, grad, |i, jac| {
            let ln_n = dsg.ln_n[dsg.n_idx[i] as usize];
            let ln_d = dsg.ln_d[dsg.d_idx[i] as usize];
            let r = dsg.r[dsg.r_idx[i] as usize];
            match kind {
                ModelKind::Chinchilla => {
                    // [a, b, e, alpha, beta]
                    let mut t = [v[2], v[0] - v[3] * ln_n, v[1] - v[4] * ln_d];
                    let lp = log_sum_exp_weights(&mut t);
                    if let Some(j) = jac {
                        j[2] = t[0];
                        j[0] = t[1];
                        j[3] = -t[1] * ln_n;
                        j[1] = t[2];
                        j[4] = -t[2] * ln_d;
                    }
                    lp
                }
                ModelKind::OpenAi => {
                    // [ln N_c, ln D_c, ln alpha_N, ln alpha_D]
                    let (an, ad) = (v[2].exp(), v[3].exp());
                    let rho = an / ad;
                    let x = v[0] - ln_n;
                    let mut t = [rho * x, v[1] - ln_d];
                    let u = log_sum_exp_weights(&mut t);
                    if let Some(j) = jac {
                        j[0] = ad * t[0] * rho;
                        j[1] = ad * t[1];
                        j[2] = ad * t[0] * rho * x;
                        j[3] = ad * u - ad * t[0] * rho * x;
                    }
                    ad * u
                }
                ModelKind::L1 => {
                    // [a, b, c, e, alpha, beta, g, eps]
                    let gamma = v[6].exp();
                    let eps = v[7].clamp(EPSILON_FLOOR, 1.0);
                    let rp = r + eps;
                    let ln_rp = rp.ln();
                    let mut t = [v[3], v[0] - v[4] * ln_n, v[1] - v[5] * ln_d, v[2] - gamma * ln_rp];
                    let lp = log_sum_exp_weights(&mut t);
                    if let Some(j) = jac {
                        j[3] = t[0];
                        j[0] = t[1];
                        j[4] = -t[1] * ln_n;
                        j[1] = t[2];
                        j[5] = -t[2] * ln_d;
                        j[2] = t[3];
                        j[6] = -t[3] * gamma * ln_rp;
                        j[7] = -t[3] * gamma / rp;
                    }
                    lp
                }
                ModelKind::L2 => {
                    // [a, b, c, e, alpha, beta, g, eta, eps]
                    let gamma = v[6].exp();
                    let eta = v[7];
                    let eps = v[8].clamp(EPSILON_FLOOR, 1.0);
                    let rp = r + eps;
                    let ln_rp = rp.ln();
                    let mut inner = [v[1] - v[5] * ln_d, v[2] - gamma * ln_rp];
                    let li = log_sum_exp_weights(&mut inner);
                    let mut t = [v[3], v[0] - v[4] * ln_n, eta * li];
                    let lp = log_sum_exp_weights(&mut t);
                    if let Some(j) = jac {
                        j[3] = t[0];
                        j[0] = t[1];
                        j[4] = -t[1] * ln_n;
                        j[7] = t[2] * li;
                        let outer = t[2] * eta;
                        j[1] = outer * inner[0];
                        j[5] = -outer * inner[0] * ln_d;
                        j[2] = outer * inner[1];
                        j[6] = -outer * inner[1] * gamma * ln_rp;
                        j[8] = -outer * inner[1] * gamma / rp;
                    }
                    lp
                }
                ModelKind::L4 => {
                    // [a, b, c, e, alpha, beta, ln b_base, ln c_base]
                    let mut t = [v[3], v[0] - v[4] * ln_n, v[1] + r * v[6] - v[5] * ln_d, v[2] - r * v[7]];
                    let lp = log_sum_exp_weights(&mut t);
                    if let Some(j) = jac {
                        j[3] = t[0];
                        j[0] = t[1];
                        j[4] = -t[1] * ln_n;
                        j[1] = t[2];
                        j[5] = -t[2] * ln_d;
                        j[6] = t[2] * r;
                        j[2] = t[3];
                        j[7] = -t[3] * r;
                    }
                    lp
                }
                ModelKind::L5 => {
                    // [a, b, e, alpha, beta, ln sigma]
                    let sigma = v[5].exp();
                    let d = ln_d.exp();
                    let den = r * d + (1.0 - r) * sigma;
                    let ln_den = den.ln();
                    let mut t = [v[2], v[0] - v[3] * ln_n, v[1] - v[4] * ln_den];
                    let lp = log_sum_exp_weights(&mut t);
                    if let Some(j) = jac {
                        j[2] = t[0];
                        j[0] = t[1];
                        j[3] = -t[1] * ln_n;
                        j[1] = t[2];
                        j[4] = -t[2] * ln_den;
                        j[5] = -t[2] * v[4] * (1.0 - r) * sigma / den;
                    }
                    lp
                }
                ModelKind::L3 | ModelKind::Cross { .. } => unreachable!("handled by eval_dcpt"),
            }
        })
    }
}

/// Log-sum-exp of `xs`, overwriting `xs` with the softmax weights.
fn log_sum_exp_weights<const K: usize>(xs: &mut [f64; K]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
    m + s.ln()
}

/// Mean Huber objective of a law in fitting coordinates.
pub fn objective(law: LawId, v: &[f64], points: &[DataPoint], d_min: f64, cfg: &FitConfig) -> Result<f64> {
    Problem::new(law, points, d_min, cfg.delta)?.objective(v)
}

/// Gradient of [`objective`].
pub fn gradient(law: LawId, v: &[f64], points: &[DataPoint], d_min: f64, cfg: &FitConfig) -> Result<Vec<f64>> {
    Problem::new(law, points, d_min, cfg.delta)?.gradient(v)
}

// ---------------------------------------------------------------------------
// Multi-start search

/// Starting vectors: `(enumeration index, vector)` over the Cartesian grid,
/// thinned to `cap` evenly spaced enumeration indices when larger.
pub(crate) fn grid_starts(axes: &[Vec<f64>], cap: Option<usize>) -> Vec<(usize, Vec<f64>)> {
    let total: usize = axes.iter().map(Vec::len).product();
    let picks: Vec<usize> = match cap {
        Some(cap) if total > cap => {
            let stride = total as f64 / cap as f64;
            (0..cap).map(|k| ((k as f64 + 0.5) * stride) as usize).collect()
        }
        _ => (0..total).collect(),
    };
    picks
        .into_iter()
        .map(|mut idx| {
            let flat = idx;
            let mut v = vec![0.0; axes.len()];
            for (slot, axis) in v.iter_mut().zip(axes).rev() {
                *slot = axis[idx % axis.len()];
                idx /= axis.len();
            }
            (flat, v)
        })
        .collect()
}

pub(crate) fn fit_problem(problem: &Problem, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let axes: Vec<Vec<f64>> = problem.symbols().iter().map(|s| cfg.init_grid.axis(s)).collect();
    if axes.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every fitted symbol needs at least one start value"));
    }
    let starts = grid_starts(&axes, cfg.max_grid_candidates);
    let bounds = problem.bounds();
    let lcfg = cfg.lbfgs();

    let outcomes = exec::map(cfg.execution, &starts, |(idx, x0)| {
        let out = lbfgs::minimize(|x, g| problem.value_and_gradient(x, g), x0, &bounds, &lcfg);
        let finite = out.value.is_finite();
        let admissible = finite && problem.admissible(&out.x);
        (*idx, out, admissible)
    });

    let summaries: Vec<StartSummary> = outcomes
        .iter()
        .map(|(idx, out, ok)| StartSummary {
            init_index: *idx,
            objective: out.value.is_finite().then_some(out.value),
            iterations: out.iterations,
            converged: out.converged,
            admissible: *ok,
        })
        .collect();

    // smallest objective wins; ties go to the earliest start
    let best = outcomes
        .iter()
        .filter(|(_, _, ok)| *ok)
        .min_by(|(ia, a, _), (ib, b, _)| a.value.total_cmp(&b.value).then(ia.cmp(ib)))
        .ok_or_else(|| Error::FitFailure("no start produced an admissible fit".into()))?;

    let (init_index, out, _) = best;
    let law = problem.decode(&out.x);
    let constraints = match &law {
        LawParams::L3(p) => Some(p.check_constraints(problem.d_min)),
        LawParams::CrossDomain(p) => Some(p.base.check_constraints(problem.d_min)),
        _ => None,
    };
    let metrics = match &law {
        LawParams::CrossDomain(_) => cross_metrics(problem, &law, cfg.delta).ok(),
        _ => metrics(&law, &problem.points, cfg.delta).ok(),
    };
    Ok(FitResult {
        law,
        objective: out.value,
        init_index: *init_index,
        iterations: out.iterations,
        converged: out.converged,
        gradient_norm: out.gradient_norm,
        vector: out.x.clone(),
        constraints,
        metrics,
        d_min: problem.d_min,
        n_points: problem.points.len(),
        starts: summaries,
    })
}

fn cross_metrics(problem: &Problem, law: &LawParams, delta: f64) -> Result<Metrics> {
    let (LawParams::CrossDomain(p), ModelKind::Cross { features, .. }) = (law, &problem.kind) else {
        return Err(Error::invalid("not a cross-domain problem"));
    };
    let ks = features.iter().map(|f| k_value(&p.k, f)).collect::<Result<Vec<_>>>()?;
    let predicted = problem
        .points
        .iter()
        .zip(&problem.design.group_idx)
        .map(|(pt, &g)| p.evaluate(pt.n, pt.d, pt.r, ks[g as usize]))
        .collect::<Result<Vec<_>>>()?;
    let observed: Vec<f64> = problem.points.iter().map(|p| p.loss).collect();
    metrics_from_predictions(&predicted, &observed, delta)
}

/// Drops points below the ratio floor and checks the remainder can pin
/// down `dim` parameters.
pub(crate) fn prepare_points(points: &[DataPoint], dim: usize, cfg: &FitConfig) -> Result<Vec<DataPoint>> {
    for p in points {
        p.validate()?;
    }
    let kept: Vec<DataPoint> = points.iter().copied().filter(|p| p.r >= cfg.r_floor).collect();
    if kept.len() < dim {
        return Err(Error::invalid(format!(
            "{} usable points (r >= {}) for {} free parameters",
            kept.len(),
            cfg.r_floor,
            dim
        )));
    }
    let mut distinct: Vec<(u64, u64, u64)> =
        kept.iter().map(|p| (p.n.to_bits(), p.d.to_bits(), p.r.to_bits())).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < dim {
        return Err(Error::FitFailure(format!(
            "only {} distinct (N, D, r) points for {} free parameters",
            distinct.len(),
            dim
        )));
    }
    Ok(kept)
}

pub(crate) fn min_tokens(points: &[DataPoint]) -> f64 {
    points.iter().map(|p| p.d).fold(f64::INFINITY, f64::min)
}

/// Fits `law` to `points` from every grid start and keeps the best
/// admissible candidate.
pub fn fit(law: LawId, points: &[DataPoint], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let dim = Problem::new(law, &[DataPoint { n: 1.0, d: 1.0, r: 0.5, loss: 1.0 }], 1.0, cfg.delta)?.dim();
    let kept = prepare_points(points, dim, cfg)?;
    let problem = Problem::new(law, &kept, min_tokens(&kept), cfg.delta)?;
    fit_problem(&problem, cfg)
}
