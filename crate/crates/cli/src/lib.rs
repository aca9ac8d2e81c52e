//! Batch workflows over run logs: ingestion, synthetic fixtures, fitting,
//! validation, learnability features and the three solvers.
//!
//! [`run`] is the whole program; the binary only forwards its arguments and
//! environment and turns the outcome into an exit status.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mixlaw_core::dlc::{domain_features, fit_cross_domain, k_value, DomainFeatures, DomainSets, KRepr};
use mixlaw_core::fitter::{self, FitConfig, StartSummary};
use mixlaw_core::ingest::{parse_run_log, synthesize_curves, write_run_log, RunLogFormat, SynthDesign};
use mixlaw_core::laws::{LawArtifact, LawId, LawParams, LawPoint};
use mixlaw_core::model::{curves_to_points, CorpusSide, DataPoint, LossCurve, TrainConfig};
use mixlaw_core::solvers::{
    allocate, allocate_from_constants, limited_data_optimal_ratio, tradeoff_optimal_ratio, AllocationResult,
    LimitedDataRequest, LimitedDataResult, TradeoffRequest, TradeoffResult,
};
use mixlaw_core::validation::{
    apply_schedule, domain_holdout, kfold_dataset_size, kfold_mixture_ratio, kfold_model_size, SamplingSchedule,
    ScheduleTag,
};
use mixlaw_core::{Error, Execution, Result};

pub const EXIT_OK: i32 = 0;
/// Unknown subcommand or flag, or an invalid flag value.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
/// Fitting failed or a law could not be evaluated.
pub const EXIT_FIT: i32 = 4;
/// Unreadable, unwritable or malformed files.
pub const EXIT_IO: i32 = 5;

/// Environment variable naming a JSON fit configuration.
pub const CONFIG_ENV: &str = "MIXLAW_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub artifacts_written: Vec<PathBuf>,
    pub summary: String,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::FitFailure(_) | Error::InsufficientData(_) | Error::Undefined(_) | Error::Domain(_) => EXIT_FIT,
        Error::Parse { .. } | Error::Schema { .. } | Error::Conflict(_) | Error::Io(_) | Error::Json(_) => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(name = "mixlaw", version, about = "Fit and apply mixture-ratio scaling laws for continual pre-training")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for the multi-start search; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file presetting the fit configuration (default: $MIXLAW_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// B-tokens consumed per optimizer step.
    #[arg(long, global = true)]
    tokens_per_step: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a run log and rewrite it normalized and sorted.
    Ingest {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long)]
        out: PathBuf,
        /// Output format (default: from the output extension).
        #[arg(long)]
        out_format: Option<LogFormat>,
    },
    /// Generate a run log from known laws.
    Synth(SynthArgs),
    /// Fit one law to one domain's runs.
    Fit {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        law: LawId,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-start objective values here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Metrics of a saved law on new runs.
    Eval {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        law: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Cross-validate a law.
    Cv {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long, default_value = "L3")]
        law: LawId,
        /// K representation for the domain protocol.
        #[arg(long, default_value = "K1")]
        repr: KRepr,
        /// Probe ratio for learnability features (domain protocol).
        #[arg(long, default_value_t = 1.0)]
        reference_ratio: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write one CSV row per split.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Learnability features of every domain.
    Dlc {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long, default_value = "domain")]
        side: CorpusSide,
        #[arg(long, default_value_t = 1.0)]
        reference_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the cross-domain law jointly over every domain.
    Crossfit {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long, default_value = "domain")]
        side: CorpusSide,
        #[arg(long)]
        repr: KRepr,
        #[arg(long, default_value_t = 1.0)]
        reference_ratio: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Mixture-ratio and allocation solvers.
    #[command(subcommand)]
    Solve(Solve),
    /// Thin every run to a sampling schedule.
    Sample {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long)]
        schedule: ScheduleTag,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observed and predicted losses as CSV for plotting.
    Plot {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        law: PathBuf,
        #[arg(long, default_value = "d")]
        x: Axis,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum Solve {
    /// Largest domain ratio keeping the general-loss rise under a bound.
    Usage1 {
        #[arg(long)]
        general_law: PathBuf,
        #[arg(long)]
        domain_law: PathBuf,
        #[arg(long)]
        n0: f64,
        #[arg(long)]
        d0: f64,
        /// Allowed relative rise of the general loss.
        #[arg(long)]
        t: f64,
        /// General loss before continual pre-training (default: the general
        /// law at r_domain = 0).
        #[arg(long)]
        lg0: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss-minimizing domain ratio with a fixed domain-token supply.
    Usage2 {
        #[arg(long)]
        law: PathBuf,
        #[arg(long)]
        n0: f64,
        #[arg(long)]
        dd0: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute-optimal model size and token count for a FLOPs budget.
    Usage3 {
        /// Chinchilla or L3 law; an L3 law needs --ratio.
        #[arg(long, conflicts_with = "constants", required_unless_present = "constants")]
        law: Option<PathBuf>,
        /// Precomputed `G,a,b`.
        #[arg(long, value_delimiter = ',')]
        constants: Option<Vec<f64>>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct LogArgs {
    /// Run log (JSON lines or CSV).
    #[arg(long = "in")]
    input: PathBuf,
    /// Input format (default: from the extension).
    #[arg(long)]
    format: Option<LogFormat>,
}

#[derive(Args, Debug)]
struct InputArgs {
    #[command(flatten)]
    log: LogArgs,
    #[arg(long, default_value = "domain")]
    side: CorpusSide,
    /// Restrict to one domain of a multi-domain log.
    #[arg(long)]
    domain: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Cap on multi-start candidates.
    #[arg(long)]
    max_starts: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    r_floor: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator for both sides.
    #[arg(long, required_unless_present_all = ["general_law", "domain_law"])]
    law: Option<PathBuf>,
    #[arg(long, requires = "domain_law")]
    general_law: Option<PathBuf>,
    #[arg(long, requires = "general_law")]
    domain_law: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.8,4")]
    sizes: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.33,0.4,0.5,0.6,0.67,0.8,0.9")]
    ratios: Vec<f64>,
    /// Evaluation steps; default every 1000 steps up to 20000.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<u64>>,
    /// Relative standard deviation of the multiplicative noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value = "synthetic")]
    domain_name: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_format: Option<LogFormat>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LogFormat {
    Jsonl,
    Csv,
}

impl From<LogFormat> for RunLogFormat {
    fn from(f: LogFormat) -> Self {
        match f {
            LogFormat::Jsonl => RunLogFormat::JsonLines,
            LogFormat::Csv => RunLogFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Protocol {
    ModelSize,
    DatasetSize,
    Mixture,
    Domain,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    N,
    D,
    R,
}

/// Runs one command. `argv` excludes the program name.
pub fn run<S: AsRef<str>>(argv: &[S], env: &HashMap<String, String>) -> CommandOutcome {
    let args = std::iter::once("mixlaw").chain(argv.iter().map(|s| s.as_ref()));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            return CommandOutcome { exit_code: code, artifacts_written: Vec::new(), summary: e.render().to_string() };
        }
    };
    let mut session = Session { env, seed: cli.seed, written: Vec::new() };
    let result = session.dispatch(&cli);
    match result {
        Ok(summary) => CommandOutcome { exit_code: EXIT_OK, artifacts_written: session.written, summary },
        Err(e) => CommandOutcome {
            exit_code: exit_code(&e),
            artifacts_written: session.written,
            summary: format!("error: {e}"),
        },
    }
}

struct Session<'a> {
    env: &'a HashMap<String, String>,
    seed: u64,
    written: Vec<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn read_law(path: &Path) -> Result<LawArtifact> {
    LawArtifact::from_json(&std::fs::read_to_string(path)?).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Schema { line: 1, message: format!("{}: {m}", path.display()) },
        e => e,
    })
}

fn read_log(log: &LogArgs) -> Result<Vec<LossCurve>> {
    let format = log.format.map(Into::into).unwrap_or_else(|| RunLogFormat::from_path(&log.input));
    parse_run_log(BufReader::new(File::open(&log.input)?), format)
}

fn only_domain(curves: Vec<LossCurve>, domain: Option<&str>) -> Result<Vec<LossCurve>> {
    if let Some(name) = domain {
        let kept: Vec<LossCurve> = curves.into_iter().filter(|c| c.domain_name == name).collect();
        if kept.is_empty() {
            return Err(Error::InvalidArgument(format!("no runs for domain `{name}`")));
        }
        return Ok(kept);
    }
    let names: std::collections::BTreeSet<&str> = curves.iter().map(|c| c.domain_name.as_str()).collect();
    if names.len() > 1 {
        let list: Vec<&str> = names.into_iter().collect();
        return Err(Error::InvalidArgument(format!(
            "log holds several domains ({}); pick one with --domain",
            list.join(", ")
        )));
    }
    Ok(curves)
}

fn json_line<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Four significant digits.
fn sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = (3 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.digits$}")
}

#[derive(Serialize)]
struct FitReport<'a> {
    law_id: LawId,
    objective: f64,
    init_index: usize,
    starts: &'a [StartSummary],
}

#[derive(Serialize)]
struct EvalReport {
    law_id: LawId,
    n_points: usize,
    huber: f64,
    r2: f64,
}

#[derive(Serialize)]
struct Solved<Q: Serialize, R: Serialize> {
    request: Q,
    result: R,
}

#[derive(Serialize)]
struct AllocationRequest {
    budget_flops: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio: Option<f64>,
}

impl Session<'_> {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    fn write_log(&mut self, path: &Path, format: Option<LogFormat>, curves: &[LossCurve]) -> Result<()> {
        let format = format.map(Into::into).unwrap_or_else(|| RunLogFormat::from_path(path));
        let mut buf = Vec::new();
        write_run_log(curves, format, &mut buf)?;
        self.write(path, &buf)
    }

    fn fit_config(&self, cli: &Cli, args: &FitArgs) -> Result<FitConfig> {
        let path = cli.config.clone().or_else(|| self.env.get(CONFIG_ENV).map(PathBuf::from));
        let mut cfg: FitConfig = match path {
            Some(p) => read_json(&p)?,
            None => FitConfig::default(),
        };
        if let Some(m) = args.max_starts {
            cfg.max_grid_candidates = Some(m);
        }
        if let Some(d) = args.delta {
            cfg.delta = d;
        }
        if let Some(r) = args.r_floor {
            cfg.r_floor = r;
        }
        if let Some(m) = args.max_iterations {
            cfg.max_iterations = m;
        }
        match cli.jobs {
            Some(0) => return Err(Error::InvalidArgument("--jobs must be >= 1".into())),
            Some(1) => cfg.execution = Execution::Sequential,
            _ if !Execution::parallel_available() => cfg.execution = Execution::Sequential,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn train_config(&self, cli: &Cli) -> Result<TrainConfig> {
        match cli.tokens_per_step {
            Some(t) => TrainConfig::new(t),
            None => Ok(TrainConfig::default()),
        }
    }

    fn dispatch(&mut self, cli: &Cli) -> Result<String> {
        #[cfg(feature = "parallel")]
        if let Some(jobs) = cli.jobs.filter(|&j| j > 1) {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            return pool.install(|| self.command(cli));
        }
        self.command(cli)
    }

    fn command(&mut self, cli: &Cli) -> Result<String> {
        let train = self.train_config(cli)?;
        match &cli.command {
            Command::Ingest { log, out, out_format } => {
                let curves = read_log(log)?;
                self.write_log(out, *out_format, &curves)?;
                let records: usize = curves.iter().map(|c| c.samples.len()).sum();
                Ok(format!("{} runs, {records} evaluations -> {}", curves.len(), out.display()))
            }
            Command::Synth(args) => self.synth(args, &train),
            Command::Fit { input, law, out, report, fit } => {
                let cfg = self.fit_config(cli, fit)?;
                let curves = only_domain(read_log(&input.log)?, input.domain.as_deref())?;
                let points = curves_to_points(&curves, input.side, &train);
                let res = fitter::fit(*law, &points, &cfg)?;
                let mut doc = res.artifact(cfg.delta);
                if let Some(m) = doc.fit_metadata.as_mut() {
                    m.side = Some(input.side);
                }
                self.write(out, doc.to_json()?.as_bytes())?;
                if let Some(path) = report {
                    let rep = FitReport {
                        law_id: *law,
                        objective: res.objective,
                        init_index: res.init_index,
                        starts: &res.starts,
                    };
                    self.write(path, &json_line(&rep)?)?;
                }
                Ok(format!(
                    "fitted {law} on {} points: huber={:.3e} r2={} ({} starts, best #{})",
                    res.n_points,
                    res.objective,
                    res.metrics.map(|m| format!("{:.6}", m.r2)).unwrap_or_else(|| "undefined".into()),
                    res.starts.len(),
                    res.init_index
                ))
            }
            Command::Eval { input, law, out, fit } => {
                let cfg = self.fit_config(cli, fit)?;
                let doc = read_law(law)?;
                let curves = read_log(&input.log)?;
                let predicted = self.predictions(&doc, &curves, input, &train, Some(cfg.r_floor))?;
                let observed: Vec<f64> = predicted.iter().map(|(p, _)| p.loss).collect();
                let m = fitter::metrics_from_predictions(
                    &predicted.iter().map(|(_, y)| *y).collect::<Vec<_>>(),
                    &observed,
                    cfg.delta,
                )?;
                if let Some(path) = out {
                    let rep = EvalReport { law_id: doc.law_id, n_points: observed.len(), huber: m.huber, r2: m.r2 };
                    self.write(path, &json_line(&rep)?)?;
                }
                Ok(format!("{} on {} points: huber={:.3e} r2={:.6}", doc.law_id, observed.len(), m.huber, m.r2))
            }
            Command::Cv { input, protocol, law, repr, reference_ratio, out, csv, fit } => {
                let cfg = self.fit_config(cli, fit)?;
                let curves = read_log(&input.log)?;
                let report = match protocol {
                    Protocol::Domain => {
                        let map = domain_sets(&curves, input.side, *reference_ratio, &train)?;
                        domain_holdout(&map, *repr, &cfg)?
                    }
                    p => {
                        let curves = only_domain(curves, input.domain.as_deref())?;
                        let points = curves_to_points(&curves, input.side, &train);
                        match p {
                            Protocol::ModelSize => kfold_model_size(&points, *law, &cfg)?,
                            Protocol::DatasetSize => kfold_dataset_size(&points, *law, &cfg)?,
                            _ => kfold_mixture_ratio(&points, *law, &cfg)?,
                        }
                    }
                };
                self.write(out, (report.to_json()? + "\n").as_bytes())?;
                if let Some(path) = csv {
                    let mut buf = Vec::new();
                    report.write_csv(&mut buf)?;
                    self.write(path, &buf)?;
                }
                Ok(format!(
                    "{} protocol: {} splits, mean huber={:.3e}, mean r2={:.6}",
                    report.protocol,
                    report.splits.len(),
                    report.mean_huber,
                    report.mean_r2
                ))
            }
            Command::Dlc { log, side, reference_ratio, out } => {
                let feats = domain_features(&read_log(log)?, *side, *reference_ratio)?;
                self.write(out, &json_line(&feats)?)?;
                let lines: Vec<String> = feats
                    .iter()
                    .map(|(name, f)| {
                        format!("{name}: k1={} k2={} k3={:.3e}", sig(f.features.k1), sig(f.features.k2), f.features.k3)
                    })
                    .collect();
                Ok(lines.join("\n"))
            }
            Command::Crossfit { log, side, repr, reference_ratio, out, report, fit } => {
                let cfg = self.fit_config(cli, fit)?;
                let curves = read_log(log)?;
                let feats = domain_features(&curves, *side, *reference_ratio)?;
                let map = domain_sets(&curves, *side, *reference_ratio, &train)?;
                let (_, res) = fit_cross_domain(&map, *repr, &cfg)?;
                let mut doc = res.artifact(cfg.delta);
                doc.features = feats;
                if let Some(m) = doc.fit_metadata.as_mut() {
                    m.side = Some(*side);
                }
                self.write(out, doc.to_json()?.as_bytes())?;
                if let Some(path) = report {
                    let rep = FitReport {
                        law_id: LawId::CrossDomain,
                        objective: res.objective,
                        init_index: res.init_index,
                        starts: &res.starts,
                    };
                    self.write(path, &json_line(&rep)?)?;
                }
                Ok(format!(
                    "fitted cross-domain law ({repr}) over {} domains, {} points: huber={:.3e} r2={}",
                    map.len(),
                    res.n_points,
                    res.objective,
                    res.metrics.map(|m| format!("{:.6}", m.r2)).unwrap_or_else(|| "undefined".into())
                ))
            }
            Command::Solve(s) => self.solve(s),
            Command::Sample { log, schedule, lambda, target, out } => {
                let mut sched = SamplingSchedule::new(*schedule);
                if let Some(l) = lambda {
                    sched.lambda = *l;
                }
                if let Some(t) = target {
                    sched.target_count = *t;
                }
                let curves = read_log(log)?;
                let thinned = curves.iter().map(|c| apply_schedule(c, &sched)).collect::<Result<Vec<_>>>()?;
                self.write_log(out, log.format, &thinned)?;
                let before: usize = curves.iter().map(|c| c.samples.len()).sum();
                let after: usize = thinned.iter().map(|c| c.samples.len()).sum();
                Ok(format!("{schedule}: kept {after} of {before} evaluations over {} runs", curves.len()))
            }
            Command::Plot { input, law, x, out } => {
                let doc = read_law(law)?;
                let curves = read_log(&input.log)?;
                let predicted = self.predictions(&doc, &curves, input, &train, None)?;
                let mut buf = String::from("x,y_observed,y_predicted\n");
                for (p, y) in &predicted {
                    let xv = match x {
                        Axis::N => p.n,
                        Axis::D => p.d,
                        Axis::R => p.r,
                    };
                    buf.push_str(&format!("{xv},{},{y}\n", p.loss));
                }
                self.write(out, buf.as_bytes())?;
                Ok(format!("{} rows -> {}", predicted.len(), out.display()))
            }
        }
    }

    /// Predictions of a saved law for every point of the selected runs,
    /// keeping points with `r >= r_floor` when a floor is given. A
    /// cross-domain law is collapsed per domain through the stored features.
    fn predictions(
        &self,
        doc: &LawArtifact,
        curves: &[LossCurve],
        input: &InputArgs,
        train: &TrainConfig,
        r_floor: Option<f64>,
    ) -> Result<Vec<(DataPoint, f64)>> {
        let law = doc.law()?;
        let groups: Vec<(LawParams, Vec<LossCurve>)> = match &law {
            LawParams::CrossDomain(cross) => {
                let mut by_domain: BTreeMap<String, Vec<LossCurve>> = BTreeMap::new();
                for c in curves.iter().filter(|c| input.domain.as_deref().is_none_or(|d| d == c.domain_name)) {
                    by_domain.entry(c.domain_name.clone()).or_default().push(c.clone());
                }
                if by_domain.is_empty() {
                    return Err(Error::InvalidArgument("no runs selected".into()));
                }
                by_domain
                    .into_iter()
                    .map(|(name, cs)| {
                        let feats: &DomainFeatures = doc.features.get(&name).ok_or_else(|| {
                            Error::InvalidArgument(format!("law has no learnability features for domain `{name}`"))
                        })?;
                        let k = k_value(&cross.k, &feats.features)?;
                        Ok((LawParams::L3(cross.derive_domain_law(k)?), cs))
                    })
                    .collect::<Result<_>>()?
            }
            _ => vec![(law, only_domain(curves.to_vec(), input.domain.as_deref())?)],
        };
        let mut predicted = Vec::new();
        for (law, cs) in groups {
            for p in curves_to_points(&cs, input.side, train) {
                if r_floor.is_some_and(|f| p.r < f) {
                    continue;
                }
                predicted.push((p, law.evaluate(&LawPoint::from(&p))?));
            }
        }
        if predicted.is_empty() {
            return Err(Error::InsufficientData("no points to evaluate".into()));
        }
        Ok(predicted)
    }

    fn synth(&mut self, args: &SynthArgs, train: &TrainConfig) -> Result<String> {
        let (general, domain) = match (&args.law, &args.general_law, &args.domain_law) {
            (_, Some(g), Some(d)) => (read_law(g)?.law()?, read_law(d)?.law()?),
            (Some(l), _, _) => {
                let law = read_law(l)?.law()?;
                (law, law)
            }
            _ => return Err(Error::InvalidArgument("synth needs --law or both side laws".into())),
        };
        let design = SynthDesign {
            domain_name: args.domain_name.clone(),
            model_sizes: args.sizes.clone(),
            domain_ratios: args.ratios.clone(),
            eval_steps: args.steps.clone().unwrap_or_else(|| (1..=20).map(|i| i * 1000).collect()),
            noise_rel_std: args.noise,
            seed: self.seed,
        };
        let curves = synthesize_curves(&general, &domain, &design, train)?;
        self.write_log(&args.out, args.out_format, &curves)?;
        Ok(format!(
            "{} runs x {} evaluations (noise {}, seed {}) -> {}",
            curves.len(),
            design.eval_steps.len(),
            args.noise,
            self.seed,
            args.out.display()
        ))
    }

    fn solve(&mut self, s: &Solve) -> Result<String> {
        let dcpt = |path: &Path| -> Result<_> {
            match read_law(path)?.law()? {
                LawParams::L3(p) => Ok(p),
                other => {
                    Err(Error::InvalidArgument(format!("{} must hold an L3 law, found {}", path.display(), other.id())))
                }
            }
        };
        match s {
            Solve::Usage1 { general_law, domain_law, n0, d0, t, lg0, out } => {
                let general = dcpt(general_law)?;
                let lg0 = match lg0 {
                    Some(v) => *v,
                    None => general.evaluate(*n0, *d0, 1.0)?,
                };
                let req = TradeoffRequest {
                    general_law: general,
                    domain_law: dcpt(domain_law)?,
                    n0: *n0,
                    d0: *d0,
                    lg0,
                    t: *t,
                };
                let res: TradeoffResult = tradeoff_optimal_ratio(&req)?;
                if let Some(path) = out {
                    self.write(path, &json_line(&Solved { request: req, result: res })?)?;
                }
                Ok(format!(
                    "r_d={} predicted general loss={} domain loss={}",
                    sig(res.r_d),
                    sig(res.predicted_lg),
                    sig(res.predicted_ld)
                ))
            }
            Solve::Usage2 { law, n0, dd0, out } => {
                let req = LimitedDataRequest { domain_law: dcpt(law)?, n0: *n0, dd0: *dd0 };
                let res: LimitedDataResult = limited_data_optimal_ratio(&req)?;
                if let Some(path) = out {
                    self.write(path, &json_line(&Solved { request: req, result: res })?)?;
                }
                Ok(format!(
                    "r_d={} predicted domain loss={}{}",
                    sig(res.r_d),
                    sig(res.predicted_ld),
                    if res.boundary { " (no interior optimum; loss still falls at r_d=1)" } else { "" }
                ))
            }
            Solve::Usage3 { law, constants, ratio, budget, out } => {
                let res: AllocationResult = match (law, constants) {
                    (_, Some(c)) => match c[..] {
                        [g, a, b] => allocate_from_constants(g, a, b, *budget)?,
                        _ => return Err(Error::InvalidArgument("--constants takes G,a,b".into())),
                    },
                    (Some(path), None) => {
                        let ch = match read_law(path)?.law()? {
                            LawParams::Chinchilla(p) => p,
                            LawParams::L3(p) => {
                                let r0 = ratio.ok_or_else(|| {
                                    Error::InvalidArgument("an L3 law needs --ratio to fix the mixture".into())
                                })?;
                                p.reduce_to_chinchilla(r0)?
                            }
                            other => {
                                return Err(Error::InvalidArgument(format!(
                                    "allocation needs a chinchilla or L3 law, found {}",
                                    other.id()
                                )))
                            }
                        };
                        allocate(&ch, *budget)?
                    }
                    (None, None) => return Err(Error::InvalidArgument("usage3 needs --law or --constants".into())),
                };
                if let Some(path) = out {
                    let req = AllocationRequest { budget_flops: *budget, ratio: *ratio };
                    self.write(path, &json_line(&Solved { request: req, result: res })?)?;
                }
                Ok(format!(
                    "N_opt={} B-params D_opt={} B-tokens (G={} a={} b={})",
                    sig(res.n_opt),
                    sig(res.d_opt),
                    sig(res.g_const),
                    sig(res.a_exp),
                    sig(res.b_exp)
                ))
            }
        }
    }
}

/// Points and learnability features per domain.
fn domain_sets(
    curves: &[LossCurve],
    side: CorpusSide,
    reference_ratio: f64,
    train: &TrainConfig,
) -> Result<DomainSets> {
    let feats = domain_features(curves, side, reference_ratio)?;
    Ok(feats
        .into_iter()
        .map(|(name, f)| {
            let cs: Vec<LossCurve> = curves.iter().filter(|c| c.domain_name == name).cloned().collect();
            (name, (curves_to_points(&cs, side, train), f.features))
        })
        .collect())
}
