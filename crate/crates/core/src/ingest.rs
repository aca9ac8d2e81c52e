//! Run-log parsing and serialization, and synthetic curves from a known law.
//!
//! Both log formats carry one evaluation per record with the fields
//! `domain`, `model_size_b`, `ratio_domain`, `step`, `loss_general` and
//! `loss_domain`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::laws::{LawParams, LawPoint};
use crate::model::{tokens_from_steps, LossCurve, Sample, TrainConfig};

pub const FIELDS: [&str; 6] = ["domain", "model_size_b", "ratio_domain", "step", "loss_general", "loss_domain"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunLogFormat {
    JsonLines,
    Csv,
}

impl RunLogFormat {
    /// Guesses the format from a file extension; anything but `.csv` is
    /// treated as JSON lines.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => RunLogFormat::Csv,
            _ => RunLogFormat::JsonLines,
        }
    }
}

impl FromStr for RunLogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "jsonlines" | "json" => Ok(RunLogFormat::JsonLines),
            "csv" => Ok(RunLogFormat::Csv),
            _ => Err(Error::invalid(format!("unknown run-log format `{s}`"))),
        }
    }
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub domain: String,
    pub model_size_b: f64,
    pub ratio_domain: f64,
    pub step: u64,
    pub loss_general: f64,
    pub loss_domain: f64,
}

impl RunRecord {
    fn check(&self, line: usize) -> Result<()> {
        let schema = |message: String| Err(Error::Schema { line, message });
        if !(self.model_size_b > 0.0 && self.model_size_b.is_finite()) {
            return schema(format!("model_size_b must be > 0, got {}", self.model_size_b));
        }
        if !(0.0..=1.0).contains(&self.ratio_domain) {
            return schema(format!("ratio_domain must be in [0,1], got {}", self.ratio_domain));
        }
        if !(self.loss_general > 0.0 && self.loss_general.is_finite()) {
            return schema(format!("loss_general must be > 0, got {}", self.loss_general));
        }
        if !(self.loss_domain > 0.0 && self.loss_domain.is_finite()) {
            return schema(format!("loss_domain must be > 0, got {}", self.loss_domain));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GroupKey {
    domain: String,
    n: f64,
    r: f64,
}

impl Eq for GroupKey {}

impl Ord for GroupKey {
    fn cmp(&self, o: &Self) -> Ordering {
        self.domain.cmp(&o.domain).then(self.n.total_cmp(&o.n)).then(self.r.total_cmp(&o.r))
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn group(records: Vec<(usize, RunRecord)>) -> Result<Vec<LossCurve>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Sample>> = BTreeMap::new();
    for (line, rec) in records {
        let key = GroupKey { domain: rec.domain, n: rec.model_size_b, r: rec.ratio_domain };
        let sample = Sample { step: rec.step, loss_general: rec.loss_general, loss_domain: rec.loss_domain };
        let samples = groups.entry(key.clone()).or_default();
        if samples.insert(rec.step, sample).is_some() {
            return Err(Error::Conflict(format!(
                "line {line}: duplicate step {} for domain `{}`, n={}, r_domain={}",
                rec.step, key.domain, key.n, key.r
            )));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(k, s)| LossCurve { domain_name: k.domain, n: k.n, r_domain: k.r, samples: s.into_values().collect() })
        .collect())
}

fn json_field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, line: usize) -> Result<&'a Value> {
    match obj.get(name) {
        Some(Value::Null) | None => Err(Error::Schema { line, message: format!("missing field `{name}`") }),
        Some(v) => Ok(v),
    }
}

fn json_number(obj: &serde_json::Map<String, Value>, name: &str, line: usize) -> Result<f64> {
    json_field(obj, name, line)?
        .as_f64()
        .ok_or_else(|| Error::Schema { line, message: format!("field `{name}` must be a number") })
}

fn parse_json_record(text: &str, line: usize) -> Result<RunRecord> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse { line, message: e.to_string() })?;
    let Value::Object(obj) = v else {
        return Err(Error::Parse { line, message: "expected a JSON object".into() });
    };
    let domain = json_field(&obj, "domain", line)?
        .as_str()
        .ok_or_else(|| Error::Schema { line, message: "field `domain` must be a string".into() })?
        .to_string();
    let step = json_field(&obj, "step", line)?
        .as_u64()
        .ok_or_else(|| Error::Schema { line, message: "field `step` must be a non-negative integer".into() })?;
    Ok(RunRecord {
        domain,
        model_size_b: json_number(&obj, "model_size_b", line)?,
        ratio_domain: json_number(&obj, "ratio_domain", line)?,
        step,
        loss_general: json_number(&obj, "loss_general", line)?,
        loss_domain: json_number(&obj, "loss_domain", line)?,
    })
}

fn parse_jsonl(input: impl Read) -> Result<Vec<(usize, RunRecord)>> {
    let mut out = Vec::new();
    for (i, text) in BufReader::new(input).lines().enumerate() {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let rec = parse_json_record(&text, line)?;
        rec.check(line)?;
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_csv(input: impl Read) -> Result<Vec<(usize, RunRecord)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let mut col = [0usize; 6];
    for (slot, name) in col.iter_mut().zip(FIELDS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema { line: 1, message: format!("missing column `{name}`") })?;
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |k: usize| -> Result<&str> {
            match rec.get(col[k]) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Schema { line, message: format!("missing value for `{}`", FIELDS[k]) }),
            }
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?.parse::<f64>().map_err(|e| Error::Parse { line, message: format!("`{}`: {e}", FIELDS[k]) })
        };
        let r = RunRecord {
            domain: field(0)?.to_string(),
            model_size_b: num(1)?,
            ratio_domain: num(2)?,
            step: field(3)?.parse::<u64>().map_err(|e| Error::Parse { line, message: format!("`step`: {e}") })?,
            loss_general: num(4)?,
            loss_domain: num(5)?,
        };
        r.check(line)?;
        out.push((line, r));
    }
    Ok(out)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(fallback_line);
    Error::Parse { line, message: e.to_string() }
}

/// Reads a run log into curves grouped by `(domain, n, r_domain)`, each
/// sorted by step. Curves come out ordered by domain, then size, then
/// ratio.
pub fn parse_run_log(input: impl Read, format: RunLogFormat) -> Result<Vec<LossCurve>> {
    let records = match format {
        RunLogFormat::JsonLines => parse_jsonl(input)?,
        RunLogFormat::Csv => parse_csv(input)?,
    };
    group(records)
}

fn records_of(curves: &[LossCurve]) -> impl Iterator<Item = RunRecord> + '_ {
    curves.iter().flat_map(|c| {
        c.samples.iter().map(move |s| RunRecord {
            domain: c.domain_name.clone(),
            model_size_b: c.n,
            ratio_domain: c.r_domain,
            step: s.step,
            loss_general: s.loss_general,
            loss_domain: s.loss_domain,
        })
    })
}

/// Inverse of [`parse_run_log`].
pub fn write_run_log(curves: &[LossCurve], format: RunLogFormat, mut out: impl Write) -> Result<()> {
    match format {
        RunLogFormat::JsonLines => {
            for r in records_of(curves) {
                serde_json::to_writer(&mut out, &r)?;
                out.write_all(b"\n")?;
            }
        }
        RunLogFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(FIELDS).map_err(csv_io)?;
            for r in records_of(curves) {
                w.serialize(&r).map_err(csv_io)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDesign {
    #[serde(default = "default_domain_name")]
    pub domain_name: String,
    /// B-params.
    pub model_sizes: Vec<f64>,
    pub domain_ratios: Vec<f64>,
    /// Strictly increasing, all > 0.
    pub eval_steps: Vec<u64>,
    #[serde(default)]
    pub noise_rel_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_domain_name() -> String {
    "synthetic".into()
}

impl SynthDesign {
    pub fn validate(&self) -> Result<()> {
        if self.model_sizes.iter().any(|n| !(*n > 0.0 && n.is_finite())) {
            return Err(Error::invalid("model sizes must be > 0"));
        }
        if self.domain_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("domain ratios must be in [0,1]"));
        }
        if self.eval_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("eval steps must be strictly increasing"));
        }
        if !(self.noise_rel_std >= 0.0 && self.noise_rel_std.is_finite()) {
            return Err(Error::invalid("noise_rel_std must be >= 0"));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn draw_key(seed: u64, n: f64, r_domain: f64, step: u64) -> u64 {
    [n.to_bits(), r_domain.to_bits(), step].into_iter().fold(splitmix(seed), |h, x| splitmix(h ^ x))
}

/// Standard normal truncated to `[-4, 4]` by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 4.0 {
            return z;
        }
    }
}

/// Relative noise for one evaluation as `(general, domain)`, keyed by the
/// design point so any subset of curves can be regenerated on its own.
pub fn noise_pair(seed: u64, n: f64, r_domain: f64, step: u64, rel_std: f64) -> (f64, f64) {
    if rel_std == 0.0 {
        return (0.0, 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw_key(seed, n, r_domain, step));
    let g = truncated_normal(&mut rng);
    let d = truncated_normal(&mut rng);
    (rel_std * g, rel_std * d)
}

/// Curves generated from two laws: `gen_domain` at `r = r_domain` and
/// `gen_general` at `r = 1 - r_domain`, with multiplicative noise.
pub fn synthesize_curves(
    gen_general: &LawParams,
    gen_domain: &LawParams,
    design: &SynthDesign,
    cfg: &TrainConfig,
) -> Result<Vec<LossCurve>> {
    design.validate()?;
    let mut curves = Vec::with_capacity(design.model_sizes.len() * design.domain_ratios.len());
    for &n in &design.model_sizes {
        for &rd in &design.domain_ratios {
            let samples = design
                .eval_steps
                .iter()
                .map(|&step| {
                    let d = tokens_from_steps(step, cfg);
                    if d <= 0.0 {
                        return Err(Error::domain(format!("law undefined at step {step}")));
                    }
                    let lg = gen_general.evaluate(&LawPoint::new(n, d, 1.0 - rd))?;
                    let ld = gen_domain.evaluate(&LawPoint::new(n, d, rd))?;
                    let (xg, xd) = noise_pair(design.seed, n, rd, step, design.noise_rel_std);
                    Ok(Sample {
                        step,
                        loss_general: if xg == 0.0 { lg } else { lg * (1.0 + xg) },
                        loss_domain: if xd == 0.0 { ld } else { ld * (1.0 + xd) },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            curves.push(LossCurve { domain_name: design.domain_name.clone(), n, r_domain: rd, samples });
        }
    }
    Ok(curves)
}
