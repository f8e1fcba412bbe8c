//! Seeded Monte Carlo campaigns: sweep grids, per-trial pipeline, aggregation
//! and CSV/JSON persistence.
//!
//! Every trial owns an RNG stream derived from `(master seed, point, trial)`,
//! so trials can run on any number of threads and still produce the same
//! bytes. Results are gathered by index, never by completion order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{db_to_gain, draw_channel, draw_path_loss_db, CorrelationPair};
use crate::config::{parse_config, render_config, AlgoConfig, SystemConfig, KEYS};
use crate::geometry::{build_propagation, PropagationSet};
use crate::metrics::{nmse_single, MetricsReport};
use crate::optimizer::{descend, init_multistart, optimal_alpha, ObjectiveContext};
use crate::{CMatrix, Error, Result, C64};

/// Independent, reproducible stream for one `(point, trial)` pair.
pub fn derive_trial_rng(master_seed: u64, point: u32, trial: u32) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(((point as u64) << 32) | trial as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Convergence,
    ChannelMatrix,
    SeVsStreams,
    EeVsPower,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] =
        [Self::Convergence, Self::ChannelMatrix, Self::SeVsStreams, Self::EeVsPower];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Convergence => "convergence",
            Self::ChannelMatrix => "channel_matrix",
            Self::SeVsStreams => "se_vs_streams",
            Self::EeVsPower => "ee_vs_power",
        }
    }

    /// Grid used when the caller does not sweep a key explicitly.
    pub fn default_sweep(self) -> Vec<SweepAxis> {
        let axis = |key: &str, values: &[&str]| SweepAxis {
            key: key.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        let modes = ["dual_polarized", "tied_sim_baseline"];
        match self {
            Self::Convergence => vec![],
            Self::ChannelMatrix => vec![axis("stack_mode", &modes), axis("layers", &["1", "2", "3"])],
            Self::SeVsStreams => vec![
                axis("units", &["49", "100"]),
                axis("streams_per_pol", &["1", "2", "3", "4", "5", "6"]),
            ],
            Self::EeVsPower => vec![
                axis("stack_mode", &modes),
                axis("pol_conversion_ratio", &["0.2", "0.4"]),
                axis("transmit_power", &["10dBm", "15dBm", "20dBm", "25dBm", "30dBm"]),
            ],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Validation(vec![format!("unknown experiment `{s}`")]))
    }
}

/// One swept key. Besides the configuration keys, `layers` sets both stack
/// depths and `units` sets both per-layer unit counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for SweepAxis {
    type Err = Error;
    /// `key=v1,v2,...`
    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Validation(vec![format!("sweep `{s}` is not of the form key=v1,v2,...")]))?;
        let values = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
        Ok(SweepAxis { key: key.trim().to_string(), values })
    }
}

const PSEUDO_KEYS: [(&str, [&str; 2]); 2] = [
    ("layers", ["tx_layers", "rx_layers"]),
    ("units", ["tx_units_per_layer", "rx_units_per_layer"]),
];

fn expand_key(key: &str) -> Result<Vec<&'static str>> {
    if let Some((_, keys)) = PSEUDO_KEYS.iter().find(|(k, _)| *k == key) {
        return Ok(keys.to_vec());
    }
    KEYS.iter()
        .find(|k| **k == key)
        .map(|k| vec![*k])
        .ok_or_else(|| Error::Validation(vec![format!("cannot sweep unknown key `{key}`")]))
}

/// Apply `key = value` overrides to a base configuration. Overrides are
/// spliced into the rendered document and parsed together, so only the final
/// combination has to be valid.
pub fn resolve_point(
    sys: &SystemConfig,
    algo: &AlgoConfig,
    overrides: &[(String, String)],
) -> Result<(SystemConfig, AlgoConfig)> {
    let mut replaced = Vec::new();
    let mut extra = String::new();
    for (key, value) in overrides {
        for k in expand_key(key)? {
            replaced.push(k);
            extra.push_str(&format!("{k} = {value}\n"));
        }
    }
    let base = render_config(sys, algo);
    let mut text: String = base
        .lines()
        .filter(|l| {
            let k = l.split('=').next().unwrap_or("").trim();
            !replaced.contains(&k)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(&extra);
    parse_config(&text)
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub sweep: Vec<SweepAxis>,
    pub base: (SystemConfig, AlgoConfig),
    pub output: PathBuf,
    /// Reuse the same trial streams at every sweep point, so differences
    /// between points are not masked by different channel draws.
    pub common_random_numbers: bool,
}

impl ExperimentSpec {
    /// Merge user axes over the kind's defaults (a user axis replaces the
    /// default axis of the same key) and validate every sweep point.
    pub fn new(
        kind: ExperimentKind,
        user_sweep: Vec<SweepAxis>,
        sys: SystemConfig,
        algo: AlgoConfig,
        output: PathBuf,
    ) -> Result<Self> {
        let mut sweep = kind.default_sweep();
        let dups: Vec<String> = user_sweep
            .iter()
            .enumerate()
            .filter(|(i, a)| user_sweep[..*i].iter().any(|b| b.key == a.key))
            .map(|(_, a)| format!("key `{}` swept twice", a.key))
            .collect();
        if !dups.is_empty() {
            return Err(Error::Validation(dups));
        }
        for axis in user_sweep {
            match sweep.iter_mut().find(|a| a.key == axis.key) {
                Some(slot) => *slot = axis,
                None => sweep.push(axis),
            }
        }
        let spec = ExperimentSpec { kind, sweep, base: (sys, algo), output, common_random_numbers: true };
        spec.check()?;
        Ok(spec)
    }

    /// Every axis value must be accepted on its own and every grid point must
    /// resolve to a valid configuration.
    pub fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut seen = Vec::new();
        for axis in &self.sweep {
            if seen.contains(&axis.key) {
                errs.push(format!("key `{}` swept twice", axis.key));
            }
            seen.push(axis.key.clone());
            for v in &axis.values {
                if let Err(e) = resolve_point(&self.base.0, &self.base.1, &[(axis.key.clone(), v.clone())]) {
                    errs.push(format!("{}={v}: {e}", axis.key));
                }
            }
        }
        if errs.is_empty() {
            for point in self.points() {
                if let Err(e) = resolve_point(&self.base.0, &self.base.1, &point) {
                    errs.push(format!("{}: {e}", describe(&point)));
                }
            }
        }
        if errs.is_empty() { Ok(()) } else { Err(Error::Validation(errs)) }
    }

    /// Cartesian product of the axes, first axis outermost. No axes gives the
    /// single base point; an axis with no values gives no points.
    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        let mut points = vec![vec![]];
        for axis in &self.sweep {
            points = points
                .into_iter()
                .flat_map(|p: Vec<(String, String)>| {
                    axis.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((axis.key.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

fn describe(point: &[(String, String)]) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub metrics: MetricsReport,
    /// Everything emitted for this trial, in emission order, including the
    /// `metrics` fields.
    pub values: Vec<(String, f64)>,
}

impl TrialResult {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub params: Vec<(String, String)>,
    pub trials: Vec<TrialResult>,
    pub aggregates: Vec<Aggregate>,
    /// Set when a trial failed; the point then carries no trials.
    pub error: Option<String>,
}

impl PointReport {
    pub fn aggregate(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.metric == metric)
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: String,
    pub master_seed: u64,
    pub version: String,
    pub sweep: Vec<SweepAxis>,
    pub common_random_numbers: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub provenance: Provenance,
    pub points: Vec<PointReport>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Mean, median and sample standard deviation of every metric, in first-seen
/// order.
pub fn aggregate(trials: &[TrialResult]) -> Vec<Aggregate> {
    let mut order: Vec<&str> = Vec::new();
    let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in trials {
        for (m, v) in &t.values {
            columns.entry(m).or_insert_with(|| {
                order.push(m);
                Vec::new()
            });
            columns.get_mut(m.as_str()).unwrap().push(*v);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let xs = &columns[m];
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            Aggregate { metric: m.to_string(), count: n, mean, median: median(&sorted), std: var.sqrt() }
        })
        .collect()
}

struct PointContext {
    sys: SystemConfig,
    algo: AlgoConfig,
    prop: PropagationSet,
    corr: CorrelationPair,
}

fn point_context(spec: &ExperimentSpec, params: &[(String, String)], trials: Option<usize>) -> Result<PointContext> {
    let (sys, mut algo) = resolve_point(&spec.base.0, &spec.base.1, params)?;
    if let Some(n) = trials {
        algo.monte_carlo_trials = n;
    }
    let prop = build_propagation(&sys)?;
    let corr = CorrelationPair::for_system(&sys)?;
    Ok(PointContext { sys, algo, prop, corr })
}

/// The part of a trial that does not depend on the transmit power: channel
/// draw, multistart and descent.
struct TrialCore {
    loss_db: f64,
    target: Vec<f64>,
    alpha: C64,
    h: CMatrix,
    initial_nmse: f64,
    initial_nmse_ls: f64,
    /// `(step, nmse, best-so-far nmse)` for every layer step.
    trace: Vec<(usize, f64, f64)>,
}

fn optimize_trial(pc: &PointContext, mut rng: ChaCha12Rng) -> Result<TrialCore> {
    let (sys, algo) = (&pc.sys, &pc.algo);
    let loss_db = draw_path_loss_db(&mut rng, sys)?;
    let channel = draw_channel(&mut rng, sys, &pc.corr, db_to_gain(loss_db))?;
    let mut ctx = ObjectiveContext::new(&channel, &pc.prop)?;
    let (init, gamma0) = init_multistart(&mut rng, algo.init_candidates, sys.stack_mode, algo.initial_alpha, &ctx)?;
    // The initial stack re-scored with its least-squares α: a stricter
    // baseline than the fixed starting α recorded at the head of the trace.
    ctx.refresh(&init)?;
    let init_h = ctx.cached_h(&init)?;
    let initial_nmse_ls = optimal_alpha(init_h, &channel.target).map_or(1.0, |a| nmse_single(a, init_h, &channel.target));
    let (stack, trace) = descend(init, gamma0, algo, &mut ctx)?;
    ctx.refresh(&stack)?;
    let energy = channel.target_energy();
    let best = |g: f64| if energy > 0.0 { g / energy } else { 0.0 };
    Ok(TrialCore {
        loss_db,
        alpha: stack.alpha(),
        h: ctx.cached_h(&stack)?.clone(),
        initial_nmse: trace.initial().expect("trace starts with the initialization").nmse,
        initial_nmse_ls,
        trace: trace.records.iter().skip(1).map(|r| (r.step, r.nmse, best(r.best_gamma))).collect(),
        target: channel.target,
    })
}

/// Water-fill and score an optimized trial at the point's transmit power.
fn score_trial(kind: ExperimentKind, core: &TrialCore, sys: &SystemConfig, trial: usize) -> Result<TrialResult> {
    let (alpha, h) = (core.alpha, &core.h);
    let (metrics, _) = MetricsReport::evaluate(alpha, h, &core.target, sys.noise_power, sys.transmit_power)?;
    let mut values = vec![
        ("nmse".to_string(), metrics.nmse),
        ("se".to_string(), metrics.se),
        ("se_ub".to_string(), metrics.se_ub),
        ("ee".to_string(), metrics.ee),
        ("ee_ub".to_string(), metrics.ee_ub),
        ("path_loss_db".to_string(), core.loss_db),
        ("initial_nmse".to_string(), core.initial_nmse),
        ("initial_nmse_ls".to_string(), core.initial_nmse_ls),
    ];
    match kind {
        ExperimentKind::Convergence => {
            values.extend(core.trace.iter().map(|&(k, v, _)| (format!("trace_nmse[{k}]"), v)));
            values.extend(core.trace.iter().map(|&(k, _, b)| (format!("trace_best_nmse[{k}]"), b)));
        }
        ExperimentKind::ChannelMatrix => {
            for i in 0..h.nrows() {
                for j in 0..h.ncols() {
                    values.push((format!("abs_alpha_h[{i},{j}]"), (alpha * h[(i, j)]).norm()));
                }
            }
        }
        ExperimentKind::SeVsStreams | ExperimentKind::EeVsPower => {}
    }
    Ok(TrialResult { trial, metrics, values })
}

/// Points whose resolved configurations differ only in transmit power share
/// an optimization key.
fn optimization_key(pc: &PointContext) -> String {
    let sys = SystemConfig { transmit_power: 1.0, ..pc.sys.clone() };
    let algo = AlgoConfig { monte_carlo_trials: 0, ..pc.algo.clone() };
    render_config(&sys, &algo)
}

/// Run every `(point, trial)` pair, in parallel on `threads` workers (all
/// cores when `None`), and gather the results by index.
///
/// With common random numbers, trials that would repeat the same
/// optimization (same stream, same configuration up to transmit power) run
/// it once and are scored separately.
pub fn run_experiment(spec: &ExperimentSpec, trials: Option<usize>, threads: Option<usize>) -> Result<ExperimentReport> {
    spec.check()?;
    let points = spec.points();
    let contexts: Vec<std::result::Result<PointContext, String>> = points
        .iter()
        .map(|p| point_context(spec, p, trials).map_err(|e| e.to_string()))
        .collect();

    // (point, trial) → index into `cores`; `cores` lists (stream point,
    // representative point, trial) in first-seen order.
    let mut keys: Vec<String> = Vec::new();
    let mut cores: Vec<(u32, usize, usize)> = Vec::new();
    let mut core_index: BTreeMap<(usize, u32, usize), usize> = BTreeMap::new();
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for (pi, c) in contexts.iter().enumerate() {
        let Ok(pc) = c else { continue };
        let stream_point = if spec.common_random_numbers { 0 } else { pi as u32 };
        let key = optimization_key(pc);
        let ki = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            keys.push(key);
            keys.len() - 1
        });
        for t in 0..pc.algo.monte_carlo_trials {
            let ci = *core_index.entry((ki, stream_point, t)).or_insert_with(|| {
                cores.push((stream_point, pi, t));
                cores.len() - 1
            });
            jobs.push((pi, t, ci));
        }
    }

    let seed = spec.base.1.master_seed;
    let work = || -> Vec<std::result::Result<TrialCore, String>> {
        cores
            .par_iter()
            .map(|&(sp, pi, t)| {
                let pc = contexts[pi].as_ref().expect("only valid points are scheduled");
                optimize_trial(pc, derive_trial_rng(seed, sp, t as u32)).map_err(|e| e.to_string())
            })
            .collect()
    };
    let optimized = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Validation(vec![format!("thread pool: {e}")]))?
            .install(work),
        None => work(),
    };

    let mut by_point: Vec<Vec<std::result::Result<TrialResult, String>>> = points.iter().map(|_| Vec::new()).collect();
    for &(pi, t, ci) in &jobs {
        let pc = contexts[pi].as_ref().expect("only valid points are scheduled");
        let r = match &optimized[ci] {
            Ok(core) => score_trial(spec.kind, core, &pc.sys, t).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        by_point[pi].push(r);
    }
    let reports = points
        .into_iter()
        .zip(contexts)
        .zip(by_point)
        .map(|((params, ctx), results)| {
            let failure = match ctx {
                Err(e) => Some(e),
                Ok(_) => results.iter().find_map(|r| r.as_ref().err().cloned()),
            };
            match failure {
                Some(e) => PointReport { params, trials: vec![], aggregates: vec![], error: Some(e) },
                None => {
                    let trials: Vec<TrialResult> = results.into_iter().map(|r| r.unwrap()).collect();
                    let aggregates = aggregate(&trials);
                    PointReport { params, trials, aggregates, error: None }
                }
            }
        })
        .collect();

    Ok(ExperimentReport {
        kind: spec.kind,
        provenance: Provenance {
            config: render_config(&spec.base.0, &spec.base.1),
            master_seed: seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            sweep: spec.sweep.clone(),
            common_random_numbers: spec.common_random_numbers,
        },
        points: reports,
    })
}

fn sweep_keys(report: &ExperimentReport) -> Vec<String> {
    report.provenance.sweep.iter().map(|a| a.key.clone()).collect()
}

/// `experiment,<sweep keys...>,seed,trial,metric,value`
pub fn csv_header(keys: &[String]) -> String {
    let mut cols = vec!["experiment".to_string()];
    cols.extend(keys.iter().cloned());
    cols.extend(["seed", "trial", "metric", "value"].map(String::from));
    cols.join(",")
}

/// `experiment,<sweep keys...>,metric,count,mean,median,std`
pub fn summary_header(keys: &[String]) -> String {
    let mut cols = vec!["experiment".to_string()];
    cols.extend(keys.iter().cloned());
    cols.extend(["metric", "count", "mean", "median", "std"].map(String::from));
    cols.join(",")
}

fn point_prefix(report: &ExperimentReport, point: &PointReport) -> String {
    let mut cells = vec![report.kind.as_str().to_string()];
    cells.extend(point.params.iter().map(|(_, v)| v.clone()));
    cells.join(",")
}

/// One row per `(point, trial, metric)`.
pub fn write_csv<W: Write>(report: &ExperimentReport, mut out: W) -> Result<()> {
    writeln!(out, "{}", csv_header(&sweep_keys(report)))?;
    for point in &report.points {
        let prefix = point_prefix(report, point);
        for t in &point.trials {
            for (metric, value) in &t.values {
                writeln!(out, "{prefix},{},{},{metric},{value}", report.provenance.master_seed, t.trial)?;
            }
        }
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(report: &ExperimentReport, mut out: W) -> Result<()> {
    writeln!(out, "{}", summary_header(&sweep_keys(report)))?;
    for point in &report.points {
        let prefix = point_prefix(report, point);
        for a in &point.aggregates {
            writeln!(out, "{prefix},{},{},{},{},{}", a.metric, a.count, a.mean, a.median, a.std)?;
        }
    }
    Ok(())
}

/// Write `<kind>.csv`, `<kind>_summary.csv` and `<kind>.json` into `dir`.
pub fn emit(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let name = report.kind.as_str();
    let paths = [
        dir.join(format!("{name}.csv")),
        dir.join(format!("{name}_summary.csv")),
        dir.join(format!("{name}.json")),
    ];
    let mut buf = Vec::new();
    write_csv(report, &mut buf)?;
    fs::write(&paths[0], &buf)?;
    buf.clear();
    write_summary_csv(report, &mut buf)?;
    fs::write(&paths[1], &buf)?;
    fs::write(&paths[2], serde_json::to_vec_pretty(report)?)?;
    Ok(paths.to_vec())
}

/// Read a JSON report and confirm its aggregates match its trial rows.
pub fn load(path: &Path) -> Result<ExperimentReport> {
    let report: ExperimentReport = serde_json::from_slice(&fs::read(path)?)?;
    for point in &report.points {
        if point.error.is_none() && aggregate(&point.trials) != point.aggregates {
            return Err(Error::Format(format!(
                "aggregates of point `{}` do not match its trials",
                describe(&point.params)
            )));
        }
    }
    Ok(report)
}
