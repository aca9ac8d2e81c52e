//! Cross-validation protocols and fitting-efficiency sampling schedules.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dlc::{self, k_value, DomainSets, KRepr};
use crate::error::{Error, Result};
use crate::exec;
use crate::fitter::{self, metrics, metrics_from_predictions, FitConfig};
use crate::laws::{LawId, LawParams};
use crate::model::{DataPoint, LossCurve, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSplit {
    pub fit: String,
    pub held_out: String,
    pub huber: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub protocol: String,
    pub splits: Vec<CvSplit>,
    pub mean_huber: f64,
    pub mean_r2: f64,
}

impl CvReport {
    pub fn new(protocol: &str, splits: Vec<CvSplit>) -> Self {
        let m = splits.len().max(1) as f64;
        CvReport {
            protocol: protocol.to_string(),
            mean_huber: splits.iter().map(|s| s.huber).sum::<f64>() / m,
            mean_r2: splits.iter().map(|s| s.r2).sum::<f64>() / m,
            splits,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per split.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        for s in &self.splits {
            w.serialize(s).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_values(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Distinct values of `key`, ascending.
fn distinct(points: &[DataPoint], key: impl Fn(&DataPoint) -> f64) -> Vec<f64> {
    let mut v: Vec<f64> = points.iter().map(&key).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
}

/// Fits on `train`, scores on `test` after the same ratio floor.
fn score_split(
    law: LawId,
    train: &[DataPoint],
    test: &[DataPoint],
    cfg: &FitConfig,
    fit_desc: String,
    held_desc: String,
) -> Result<CvSplit> {
    let res = fitter::fit(law, train, cfg)?;
    let test: Vec<DataPoint> = test.iter().copied().filter(|p| p.r >= cfg.r_floor).collect();
    if test.is_empty() {
        return Err(Error::InsufficientData(format!("no held-out points above r_floor in {held_desc}")));
    }
    let m = metrics(&res.law, &test, cfg.delta)?;
    Ok(CvSplit { fit: fit_desc, held_out: held_desc, huber: m.huber, r2: m.r2 })
}

type SplitPlan = (Vec<DataPoint>, Vec<DataPoint>, String, String);

fn run_plans(protocol: &str, law: LawId, plans: Vec<SplitPlan>, cfg: &FitConfig) -> Result<CvReport> {
    let splits = exec::map(cfg.execution, &plans, |(train, test, f, h)| {
        score_split(law, train, test, cfg, f.clone(), h.clone())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::new(protocol, splits))
}

/// Leave-one-model-size-out.
pub fn kfold_model_size(points: &[DataPoint], law: LawId, cfg: &FitConfig) -> Result<CvReport> {
    let sizes = distinct(points, |p| p.n);
    if sizes.len() < 2 {
        return Err(Error::invalid(format!("model-size CV needs >= 2 sizes, got {}", sizes.len())));
    }
    let plans = sizes
        .iter()
        .map(|&held| {
            let (test, train): (Vec<DataPoint>, Vec<DataPoint>) = points.iter().partition(|p| p.n == held);
            let rest: Vec<f64> = sizes.iter().copied().filter(|&n| n != held).collect();
            (train, test, format!("n={}", fmt_values(&rest)), format!("n={held}"))
        })
        .collect();
    run_plans("model-size", law, plans, cfg)
}

/// Three contiguous segments over the sorted distinct token counts; each
/// is held out once.
pub fn kfold_dataset_size(points: &[DataPoint], law: LawId, cfg: &FitConfig) -> Result<CvReport> {
    let ds = distinct(points, |p| p.d);
    if ds.len() < 3 {
        return Err(Error::invalid(format!("dataset-size CV needs >= 3 token counts, got {}", ds.len())));
    }
    let m = ds.len();
    let bounds: Vec<(f64, f64)> = (0..3).map(|k| (ds[k * m / 3], ds[(k + 1) * m / 3 - 1])).collect();
    let plans = bounds
        .iter()
        .enumerate()
        .map(|(k, &(lo, hi))| {
            let (test, train): (Vec<DataPoint>, Vec<DataPoint>) = points.iter().partition(|p| p.d >= lo && p.d <= hi);
            (train, test, format!("segments except {k}"), format!("segment {k}: d in [{lo}, {hi}]"))
        })
        .collect();
    run_plans("dataset-size", law, plans, cfg)
}

/// Every pair of mixture ratios is held out once.
pub fn kfold_mixture_ratio(points: &[DataPoint], law: LawId, cfg: &FitConfig) -> Result<CvReport> {
    let ratios = distinct(points, |p| p.r);
    if ratios.len() < 3 {
        return Err(Error::invalid(format!("mixture CV needs >= 3 ratios, got {}", ratios.len())));
    }
    let plans = pairs(ratios.len())
        .into_iter()
        .map(|(i, j)| {
            let (ri, rj) = (ratios[i], ratios[j]);
            let (test, train): (Vec<DataPoint>, Vec<DataPoint>) = points.iter().partition(|p| p.r == ri || p.r == rj);
            let rest: Vec<f64> = ratios.iter().copied().filter(|&r| r != ri && r != rj).collect();
            (train, test, format!("r={}", fmt_values(&rest)), format!("r={ri},{rj}"))
        })
        .collect();
    run_plans("mixture", law, plans, cfg)
}

/// Every pair of domains is held out once. The cross-domain law is fitted
/// on the remaining domains and collapsed to a per-domain law for each
/// held-out domain through its own features.
pub fn domain_holdout(domains: &DomainSets, repr: KRepr, cfg: &FitConfig) -> Result<CvReport> {
    if domains.len() < 3 {
        return Err(Error::invalid(format!("domain holdout needs >= 3 domains, got {}", domains.len())));
    }
    let names: Vec<&String> = domains.keys().collect();
    let plans = pairs(names.len());
    let splits = exec::map(cfg.execution, &plans, |&(i, j)| -> Result<CvSplit> {
        let held = [names[i], names[j]];
        let train: DomainSets =
            domains.iter().filter(|(k, _)| !held.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let (cross, _) = dlc::fit_cross_domain_min(&train, repr, cfg, 1)?;
        let mut predicted = Vec::new();
        let mut observed = Vec::new();
        for name in held {
            let (pts, feats) = &domains[name];
            let k = k_value(&cross.k, feats)?;
            let law = LawParams::L3(cross.derive_domain_law(k)?);
            for p in pts.iter().filter(|p| p.r >= cfg.r_floor) {
                predicted.push(law.evaluate(&p.into())?);
                observed.push(p.loss);
            }
        }
        let m = metrics_from_predictions(&predicted, &observed, cfg.delta)?;
        Ok(CvSplit {
            fit: train.keys().cloned().collect::<Vec<_>>().join(","),
            held_out: format!("{},{}", held[0], held[1]),
            huber: m.huber,
            r2: m.r2,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::new("domain", splits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleTag {
    M1,
    M2,
    M3,
    M4,
}

impl FromStr for ScheduleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(ScheduleTag::M1),
            "M2" => Ok(ScheduleTag::M2),
            "M3" => Ok(ScheduleTag::M3),
            "M4" => Ok(ScheduleTag::M4),
            _ => Err(Error::invalid(format!("unknown sampling schedule `{s}`"))),
        }
    }
}

impl fmt::Display for ScheduleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub tag: ScheduleTag,
    /// Decay rate of the M4 density, per sample index.
    pub lambda: f64,
    /// Number of samples M4 keeps.
    pub target_count: usize,
}

impl SamplingSchedule {
    pub fn new(tag: ScheduleTag) -> Self {
        SamplingSchedule { tag, lambda: 0.02, target_count: 45 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be > 0"));
        }
        if self.target_count < 2 {
            return Err(Error::invalid("target_count must be >= 2"));
        }
        Ok(())
    }

    /// Indices (into the positive-step samples) this schedule keeps.
    pub fn select(&self, steps: &[u64]) -> Result<Vec<usize>> {
        self.validate()?;
        let n = steps.len();
        Ok(match self.tag {
            ScheduleTag::M1 => (0..n).collect(),
            ScheduleTag::M2 => (0..n).filter(|i| (i + 1) % 5 == 0).collect(),
            ScheduleTag::M3 => {
                let last = steps.last().copied().unwrap_or(0) as f64;
                let n60 = steps.iter().filter(|&&s| s as f64 <= 0.6 * last).count();
                (0..n).filter(|&i| if i < n60 { (i + 1) % 4 == 0 } else { (i + 1 - n60) % 8 == 0 }).collect()
            }
            ScheduleTag::M4 => exponential_quantiles(n, self.lambda, self.target_count)?,
        })
    }
}

/// Indices at the `(k + 0.5) / target` quantiles of `lambda e^{-lambda x}`
/// truncated to `[0, n)`, rounded and then pushed apart so exactly
/// `target` distinct indices come out in order.
fn exponential_quantiles(n: usize, lambda: f64, target: usize) -> Result<Vec<usize>> {
    if target > n {
        return Err(Error::invalid(format!("cannot keep {target} of {n} samples")));
    }
    let mass = 1.0 - (-lambda * n as f64).exp();
    let mut idx: Vec<usize> = (0..target)
        .map(|k| {
            let q = (k as f64 + 0.5) / target as f64;
            let x = -(1.0 - q * mass).ln() / lambda;
            (x.round() as usize).min(n - 1)
        })
        .collect();
    for k in 1..target {
        idx[k] = idx[k].max(idx[k - 1] + 1);
    }
    // anything pushed past the end slides back
    let mut ceiling = n;
    for v in idx.iter_mut().rev() {
        *v = (*v).min(ceiling - 1);
        ceiling = *v;
    }
    Ok(idx)
}

/// Thins a curve. Step-0 evaluations are always kept and do not count
/// towards the schedule.
pub fn apply_schedule(curve: &LossCurve, schedule: &SamplingSchedule) -> Result<LossCurve> {
    let steps: Vec<u64> = curve.samples.iter().map(|s| s.step).collect();
    if let Some(w) = steps.windows(2).find(|w| w[1] - w[0] != steps[1] - steps[0]) {
        return Err(Error::invalid(format!("samples are not evenly spaced (gap {} after step {})", w[1] - w[0], w[0])));
    }
    let (zero, positive): (Vec<&Sample>, Vec<&Sample>) = curve.samples.iter().partition(|s| s.step == 0);
    let pos_steps: Vec<u64> = positive.iter().map(|s| s.step).collect();
    let keep = schedule.select(&pos_steps)?;
    let mut samples: Vec<_> = zero.into_iter().copied().collect();
    samples.extend(keep.into_iter().map(|i| *positive[i]));
    Ok(LossCurve { samples, ..curve.clone() })
}
