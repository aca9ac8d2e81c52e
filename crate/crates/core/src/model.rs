//! Units, conversions and the observation types shared by every module.
//!
//! Model sizes are stored in billions of parameters and token counts in
//! billions of tokens. Absolute FLOP counts only appear at the [`flops`]
//! boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which corpus a loss or ratio refers to.
///
/// A run mixes a general corpus with a domain corpus. The domain side uses
/// `r = r_domain` and the domain validation loss; the general side uses
/// `r = 1 - r_domain` and the general validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSide {
    General,
    Domain,
}

impl CorpusSide {
    /// Target-corpus ratio seen from this side.
    pub fn ratio(self, r_domain: f64) -> f64 {
        match self {
            CorpusSide::Domain => r_domain,
            CorpusSide::General => 1.0 - r_domain,
        }
    }

    /// Inverse of [`CorpusSide::ratio`].
    pub fn r_domain_for(self, r: f64) -> f64 {
        self.ratio(r)
    }

    pub fn loss(self, sample: &Sample) -> f64 {
        match self {
            CorpusSide::Domain => sample.loss_domain,
            CorpusSide::General => sample.loss_general,
        }
    }
}

impl std::str::FromStr for CorpusSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "general" | "g" => Ok(CorpusSide::General),
            "domain" | "d" => Ok(CorpusSide::Domain),
            other => Err(Error::invalid(format!("unknown corpus side `{other}`"))),
        }
    }
}

impl std::fmt::Display for CorpusSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorpusSide::General => "general",
            CorpusSide::Domain => "domain",
        })
    }
}

/// One fitting observation for a single target corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    /// Model size, B-params.
    pub n: f64,
    /// Training tokens consumed, B-tokens.
    pub d: f64,
    /// Target-corpus mixture ratio.
    pub r: f64,
    /// Validation loss, nats.
    pub loss: f64,
}

impl DataPoint {
    pub fn new(n: f64, d: f64, r: f64, loss: f64) -> Result<Self> {
        let p = DataPoint { n, d, r, loss };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n > 0.0 && self.n.is_finite()) {
            return Err(Error::invalid(format!("model size must be > 0, got {}", self.n)));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::invalid(format!("token count must be > 0, got {}", self.d)));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::invalid(format!("mixture ratio must be in [0,1], got {}", self.r)));
        }
        if !(self.loss > 0.0 && self.loss.is_finite()) {
            return Err(Error::invalid(format!("loss must be > 0, got {}", self.loss)));
        }
        Ok(())
    }
}

/// A single evaluation of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub step: u64,
    pub loss_general: f64,
    pub loss_domain: f64,
}

/// One training run's evaluation series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub domain_name: String,
    /// Model size, B-params.
    pub n: f64,
    pub r_domain: f64,
    pub samples: Vec<Sample>,
}

impl LossCurve {
    pub fn validate(&self) -> Result<()> {
        if !(self.n > 0.0 && self.n.is_finite()) {
            return Err(Error::invalid(format!("model size must be > 0, got {}", self.n)));
        }
        if !(0.0..=1.0).contains(&self.r_domain) {
            return Err(Error::invalid(format!("domain ratio must be in [0,1], got {}", self.r_domain)));
        }
        for w in self.samples.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::invalid(format!(
                    "steps must be strictly increasing ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        for s in &self.samples {
            if !(s.loss_general > 0.0 && s.loss_domain > 0.0)
                || !s.loss_general.is_finite()
                || !s.loss_domain.is_finite()
            {
                return Err(Error::invalid(format!("non-positive loss at step {}", s.step)));
            }
        }
        Ok(())
    }

    pub fn sample_at(&self, step: u64) -> Option<&Sample> {
        self.samples.binary_search_by_key(&step, |s| s.step).ok().map(|i| &self.samples[i])
    }
}

/// Conversion from optimizer steps to consumed tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// B-tokens per step.
    pub tokens_per_step: f64,
}

impl TrainConfig {
    /// 64 sequences of 2048 tokens per step.
    pub const DEFAULT_TOKENS_PER_STEP: f64 = 64.0 * 2048.0 * 1e-9;

    pub fn new(tokens_per_step: f64) -> Result<Self> {
        if !(tokens_per_step > 0.0 && tokens_per_step.is_finite()) {
            return Err(Error::invalid("tokens_per_step must be > 0"));
        }
        Ok(TrainConfig { tokens_per_step })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { tokens_per_step: Self::DEFAULT_TOKENS_PER_STEP }
    }
}

/// B-tokens consumed after `steps` optimizer steps.
pub fn tokens_from_steps(steps: u64, cfg: &TrainConfig) -> f64 {
    steps as f64 * cfg.tokens_per_step
}

/// Training compute `6 N D` in absolute FLOPs, with `n` in B-params and `d`
/// in B-tokens.
pub fn flops(n: f64, d: f64) -> Result<f64> {
    if !(n > 0.0 && d > 0.0) {
        return Err(Error::invalid(format!("flops needs n>0 and d>0, got n={n}, d={d}")));
    }
    Ok(6.0 * (n * 1e9) * (d * 1e9))
}

/// Fitting points for one side of a curve. Step-0 evaluations are skipped.
pub fn curve_to_points(curve: &LossCurve, side: CorpusSide, cfg: &TrainConfig) -> Vec<DataPoint> {
    let r = side.ratio(curve.r_domain);
    curve
        .samples
        .iter()
        .filter(|s| s.step > 0)
        .map(|s| DataPoint { n: curve.n, d: tokens_from_steps(s.step, cfg), r, loss: side.loss(s) })
        .collect()
}

/// [`curve_to_points`] over a whole set of curves.
pub fn curves_to_points(curves: &[LossCurve], side: CorpusSide, cfg: &TrainConfig) -> Vec<DataPoint> {
    curves.iter().flat_map(|c| curve_to_points(c, side, cfg)).collect()
}
