//! Seeded experiment runs and report files.
//!
//! Replicate `r` of an experiment with seed `s` uses seed `s + r`. Within a
//! replicate the SCM, the sampled data and each learner run draw from
//! separate ChaCha streams of that seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{icp, IcpVariant, SubsetDecision};
use crate::cox::{fit_cox_stratified, hazard_report};
use crate::data::EnvDataset;
use crate::dsl::{parse, pretty_print, Term};
use crate::learner::{aggregate_runs, aggregate_warmup, run_prepared, DecisionRecord, LearnerConfig, Prepared, RunResult};
use crate::scm::{gen_survival_cohort, make_setting, random_scm, ScmParams, SettingSpec, SurvivalCohortSpec};
use crate::stats::{fwer, jaccard, mean_std, IndexSet};
use crate::synthesis::{count_candidates, enumerate_typesafe, mean_curve, rank_on_tasks, RankTask, RankedCandidate, SizeCount, SynthesisBudget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Synth,
    ToyFinite,
    ToyAbcd,
    Survival,
    Baselines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    Finite,
    Abcd,
}

impl Setting {
    pub fn label(self) -> &'static str {
        match self {
            Setting::Finite => "finite",
            Setting::Abcd => "abcd",
        }
    }

    fn spec(self) -> SettingSpec {
        match self {
            Setting::Finite => SettingSpec::finite(),
            Setting::Abcd => SettingSpec::abcd(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Autoci,
    Icp,
    NicpTests,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Autoci => "autoci",
            Method::Icp => IcpVariant::Classic.label(),
            Method::NicpTests => IcpVariant::NonlinearTests.label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of input variables of the goal type.
    pub n_vars: usize,
    pub max_ast_nodes: usize,
    pub sizes: Vec<usize>,
    /// SCMs in the ranking suite; 0 skips ranking.
    pub rank_tasks: usize,
    pub rank_size: usize,
    pub rank_repeats: usize,
    /// Candidates whose learning curves are reported.
    pub top_k: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_vars: 3,
            max_ast_nodes: 9,
            sizes: vec![3, 4, 5],
            rank_tasks: 0,
            rank_size: 3,
            rank_repeats: 1,
            top_k: 4,
        }
    }
}

/// Experiment description, read from TOML. Unset fields take the preset of
/// the experiment kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    /// Record wall-times. Off by default so that reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "default_program")]
    pub program: String,
    /// Methods for toy experiments; baselines experiments always run both ICP variants.
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Protocol for `baselines` experiments.
    #[serde(default)]
    pub setting: Setting,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Write every tested subset of the baselines.
    #[serde(default)]
    pub verbose_subsets: bool,
    #[serde(default)]
    pub scm: ScmParams,
    #[serde(default)]
    pub cohort: SurvivalCohortSpec,
    /// Cox refits on fresh cohorts for the confidence interval coverage check.
    #[serde(default)]
    pub coverage_replicates: usize,
    #[serde(default)]
    pub synthesis: SynthConfig,
    /// Overrides on top of the kind's learner preset.
    #[serde(default)]
    pub learner: toml::Table,
}

fn default_replicates() -> usize {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}
fn default_program() -> String {
    pretty_print(&Term::default_program())
}
fn default_methods() -> Vec<Method> {
    vec![Method::Autoci, Method::Icp, Method::NicpTests]
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        toml::from_str(&format!("kind = \"{}\"", kind.name())).expect("a bare kind is a valid config")
    }

    pub fn from_toml(src: &str) -> Result<Self, ExperimentError> {
        let c: ExperimentConfig = toml::from_str(src).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let src = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Learner settings: the kind's preset with the `[learner]` table applied.
    pub fn learner_config(&self) -> Result<LearnerConfig, ExperimentError> {
        let preset = match self.kind {
            ExperimentKind::Survival => LearnerConfig::survival(),
            ExperimentKind::ToyAbcd => LearnerConfig::toy_abcd(),
            ExperimentKind::Baselines if self.setting == Setting::Abcd => LearnerConfig::toy_abcd(),
            _ => LearnerConfig::toy(),
        };
        let mut table = toml::Table::try_from(&preset).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for (k, v) in &self.learner {
            table.insert(k.clone(), v.clone());
        }
        let cfg: LearnerConfig = table.try_into().map_err(|e: toml::de::Error| ExperimentError::Config(format!("learner: {e}")))?;
        cfg.validate().map_err(|e| ExperimentError::Config(format!("learner: {e}")))?;
        Ok(cfg)
    }

    pub fn term(&self) -> Result<Term, ExperimentError> {
        parse(&self.program).map_err(|e| ExperimentError::Config(format!("program: {e}")))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.replicates < 1 {
            return bad("replicates must be at least 1".into());
        }
        if self.formats.is_empty() {
            return bad("formats must not be empty".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)".into());
        }
        if self.scm.n_vars < 2 {
            return bad("scm.n_vars must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.scm.edge_density) {
            return bad("scm.edge_density must lie in [0, 1]".into());
        }
        self.cohort.validate().map_err(|e| ExperimentError::Config(format!("cohort: {e}")))?;
        let s = &self.synthesis;
        if s.n_vars < 1 || s.max_ast_nodes < 1 || s.sizes.iter().any(|&k| k < 1) || s.rank_size < 1 || s.rank_repeats < 1 {
            return bad("synthesis sizes, nodes, n_vars and rank_repeats must be at least 1".into());
        }
        self.learner_config()?;
        self.term()?;
        Ok(())
    }

    pub fn setting_label(&self) -> &'static str {
        match self.kind {
            ExperimentKind::Synth => "synth",
            ExperimentKind::ToyFinite => Setting::Finite.label(),
            ExperimentKind::ToyAbcd => Setting::Abcd.label(),
            ExperimentKind::Survival => "survival",
            ExperimentKind::Baselines => self.setting.label(),
        }
    }
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Synth => "synth",
            ExperimentKind::ToyFinite => "toy-finite",
            ExperimentKind::ToyAbcd => "toy-abcd",
            ExperimentKind::Survival => "survival",
            ExperimentKind::Baselines => "baselines",
        }
    }
}

/// Seed of stream `stream` of replicate seed `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const DATA_STREAM: u64 = 1;
const RUN_STREAM: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub setting: String,
    pub replicates: usize,
    pub mean_js: f64,
    pub std_js: f64,
    pub fwer: f64,
    pub failures: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub method: String,
    pub setting: String,
    pub replicate: usize,
    pub seed: u64,
    pub js: f64,
    pub s_pred: IndexSet,
    pub truth: IndexSet,
    pub failed: bool,
    /// Causal probability per variable (AutoCI only).
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub program: String,
    pub mean_js: f64,
    pub std_js: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRow {
    pub variable: String,
    pub mean_p: f64,
    pub std_p: f64,
    pub in_s_pred: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardTableRow {
    pub variable: String,
    pub causal_prob_warmup: f64,
    pub causal_prob_full: f64,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub variable: String,
    pub planted_hr: f64,
    pub replicates: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub replicate: usize,
    pub method: String,
    pub decision: SubsetDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub replicate: usize,
    pub run: usize,
    #[serde(flatten)]
    pub record: DecisionRecord,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
    pub replicates: Vec<ReplicateRow>,
    pub curves: Vec<CurvePoint>,
    pub variables: Vec<VariableRow>,
    pub hazard: Vec<HazardTableRow>,
    pub coverage: Vec<CoverageRow>,
    /// Smallest causal minus largest null mean probability (survival).
    pub separation_margin: Option<f64>,
    pub synthesis: Vec<SizeCount>,
    pub candidates: Vec<(usize, String)>,
    pub ranking: Vec<RankedCandidate>,
    pub subsets: Vec<SubsetRow>,
    pub decisions: Vec<DecisionRow>,
}

impl EvalReport {
    /// Method, setting and seconds per method.
    pub fn timing(&self) -> Vec<(String, String, f64)> {
        let mut rows: Vec<(String, String, f64)> = self.methods.iter().map(|m| (m.method.clone(), m.setting.clone(), m.seconds)).collect();
        if !self.synthesis.is_empty() {
            rows.extend(self.synthesis.iter().map(|c| (format!("synth_size_{}", c.size), "synth".to_string(), c.elapsed_seconds)));
        }
        rows
    }
}

/// Runs the experiment on a pool of `config.workers` threads and writes its
/// reports under `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport, ExperimentError> {
    config.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if config.workers > 0 {
        pool = pool.num_threads(config.workers);
    }
    let pool = pool.build().map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    let report = pool.install(|| compute(config))?;
    emit_report(&report, &config.formats, &config.out)?;
    Ok(report)
}

/// Runs the experiment without writing anything.
pub fn compute(config: &ExperimentConfig) -> Result<EvalReport, ExperimentError> {
    config.validate()?;
    let mut report = match config.kind {
        ExperimentKind::Synth => synth(config)?,
        ExperimentKind::ToyFinite | ExperimentKind::ToyAbcd => toy(config, &config.methods)?,
        ExperimentKind::Baselines => toy(config, &[Method::Icp, Method::NicpTests])?,
        ExperimentKind::Survival => survival(config)?,
    };
    report.kind = Some(config.kind);
    report.seed = config.seed;
    Ok(report)
}

fn seconds_since(start: Instant, timing: bool) -> f64 {
    if timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

fn synth(config: &ExperimentConfig) -> Result<EvalReport, ExperimentError> {
    let s = &config.synthesis;
    let mut report = EvalReport::default();
    for &size in &s.sizes {
        let budget = SynthesisBudget::new(size, s.n_vars).with_nodes(s.max_ast_nodes);
        report.synthesis.push(count_candidates(&budget, config.timing));
        report.candidates.extend(enumerate_typesafe(&budget).map(|t| (size, pretty_print(&t))));
    }
    if s.rank_tasks > 0 {
        let n = config.scm.n_vars - 1;
        let terms: Vec<Term> = enumerate_typesafe(&SynthesisBudget::new(s.rank_size, n).with_nodes(s.max_ast_nodes)).collect();
        if terms.is_empty() {
            return Err(ExperimentError::Config(format!("no type-safe candidates of size {} for {n} variables", s.rank_size)));
        }
        let tasks: Vec<RankTask> = (0..s.rank_tasks)
            .into_par_iter()
            .map(|r| {
                let seed = config.seed + r as u64;
                let scm = random_scm(&config.scm, seed);
                RankTask {
                    data: make_setting(&scm, &SettingSpec::finite(), sub_seed(seed, DATA_STREAM)),
                    truth: Some(scm.causal_set()),
                }
            })
            .collect();
        let learner = LearnerConfig {
            seed: config.seed,
            ..config.learner_config()?
        };
        let ranking = rank_on_tasks(&terms, &tasks, &learner, s.rank_repeats).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        for c in ranking.top(s.top_k) {
            report.curves.extend(c.curve.iter().enumerate().map(|(e, &(m, sd))| CurvePoint {
                epoch: e + 1,
                program: c.program.clone(),
                mean_js: m,
                std_js: sd,
            }));
        }
        report.ranking = ranking.entries;
    }
    Ok(report)
}

/// AutoCI on one dataset: `runs` seeded runs, aggregated when more than one.
fn autoci_runs(term: &Term, data: &EnvDataset, cfg: &LearnerConfig, seed: u64) -> Result<Vec<RunResult>, String> {
    let prepared = Prepared::new(data).map_err(|e| e.to_string())?;
    (0..cfg.runs)
        .into_par_iter()
        .map(|j| run_prepared(term, &prepared, cfg, sub_seed(seed, RUN_STREAM + j as u64)).map_err(|e| e.to_string()))
        .collect()
}

fn predicted_set(runs: &[RunResult], names: &[String], cutoff: f64) -> (IndexSet, Vec<f64>) {
    if let [single] = runs {
        return (single.s_pred.clone(), single.probabilities.clone());
    }
    let agg = aggregate_runs(runs, names, cutoff);
    (agg.s_pred, agg.mean)
}

struct ReplicateOutcome {
    rows: Vec<ReplicateRow>,
    seconds: Vec<f64>,
    curve: Vec<f64>,
    decisions: Vec<DecisionRow>,
    subsets: Vec<SubsetRow>,
}

fn toy(config: &ExperimentConfig, methods: &[Method]) -> Result<EvalReport, ExperimentError> {
    let term = config.term()?;
    let cfg = config.learner_config()?;
    let setting = match config.kind {
        ExperimentKind::ToyAbcd => Setting::Abcd,
        ExperimentKind::ToyFinite => Setting::Finite,
        _ => config.setting,
    };
    let label = setting.label();
    let outcomes: Vec<ReplicateOutcome> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed + r as u64;
            let started = Instant::now();
            let scm = random_scm(&config.scm, seed);
            let data = make_setting(&scm, &setting.spec(), sub_seed(seed, DATA_STREAM));
            let load = seconds_since(started, config.timing);
            let truth = scm.causal_set();
            let mut out = ReplicateOutcome {
                rows: Vec::new(),
                seconds: Vec::new(),
                curve: Vec::new(),
                decisions: Vec::new(),
                subsets: Vec::new(),
            };
            for &m in methods {
                let t0 = Instant::now();
                let (s_pred, probabilities, failed) = match m {
                    Method::Autoci => match autoci_runs(&term, &data, &cfg, seed) {
                        Ok(runs) => {
                            let (s, p) = predicted_set(&runs, &data.var_names, cfg.cutoff);
                            if let Some(first) = runs.first() {
                                out.curve = first.mask_trace.iter().map(|mask| jaccard(&support(mask), &truth)).collect();
                            }
                            for (j, run) in runs.iter().enumerate() {
                                out.decisions.extend(run.decisions.iter().map(|d| DecisionRow {
                                    replicate: r,
                                    run: j,
                                    record: d.clone(),
                                }));
                            }
                            (s, p, false)
                        }
                        Err(_) => (IndexSet::new(), Vec::new(), true),
                    },
                    Method::Icp | Method::NicpTests => {
                        let variant = if m == Method::Icp { IcpVariant::Classic } else { IcpVariant::NonlinearTests };
                        match icp(&data, config.alpha, variant) {
                            Ok(res) => {
                                if config.verbose_subsets {
                                    out.subsets.extend(res.decisions.into_iter().map(|d| SubsetRow {
                                        replicate: r,
                                        method: m.label().to_string(),
                                        decision: d,
                                    }));
                                }
                                (res.estimate, Vec::new(), false)
                            }
                            Err(_) => (IndexSet::new(), Vec::new(), true),
                        }
                    }
                };
                out.seconds.push(load + seconds_since(t0, config.timing));
                out.rows.push(ReplicateRow {
                    method: m.label().to_string(),
                    setting: label.to_string(),
                    replicate: r,
                    seed,
                    js: if failed { 0.0 } else { jaccard(&s_pred, &truth) },
                    s_pred,
                    truth: truth.clone(),
                    failed,
                    probabilities,
                });
            }
            out
        })
        .collect();

    let mut report = EvalReport::default();
    for (k, &m) in methods.iter().enumerate() {
        let rows: Vec<&ReplicateRow> = outcomes.iter().map(|o| &o.rows[k]).collect();
        let js: Vec<f64> = rows.iter().map(|r| r.js).collect();
        let (mean_js, std_js) = mean_std(&js);
        let truth_fwer: f64 = rows.iter().map(|r| fwer(std::slice::from_ref(&r.s_pred), &r.truth)).sum::<f64>() / rows.len() as f64;
        report.methods.push(MethodSummary {
            method: m.label().to_string(),
            setting: label.to_string(),
            replicates: rows.len(),
            mean_js,
            std_js,
            fwer: truth_fwer,
            failures: rows.iter().filter(|r| r.failed).count(),
            seconds: outcomes.iter().map(|o| o.seconds[k]).sum(),
        });
    }
    if methods.contains(&Method::Autoci) {
        let program = pretty_print(&term);
        report.curves = mean_curve(outcomes.iter().map(|o| o.curve.as_slice()))
            .into_iter()
            .enumerate()
            .map(|(e, (m, sd))| CurvePoint {
                epoch: e + 1,
                program: program.clone(),
                mean_js: m,
                std_js: sd,
            })
            .collect();
    }
    for o in outcomes {
        report.replicates.extend(o.rows);
        report.decisions.extend(o.decisions);
        report.subsets.extend(o.subsets);
    }
    Ok(report)
}

fn support(mask: &[bool]) -> IndexSet {
    mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
}

fn survival(config: &ExperimentConfig) -> Result<EvalReport, ExperimentError> {
    let term = config.term()?;
    let cfg = config.learner_config()?;
    let spec = &config.cohort;
    let started = Instant::now();
    let data = gen_survival_cohort(spec, config.seed);
    let runs = autoci_runs(&term, &data, &cfg, config.seed).map_err(ExperimentError::Runtime)?;
    let seconds = seconds_since(started, config.timing);
    let names = data.var_names.clone();
    let full = aggregate_runs(&runs, &names, cfg.cutoff);
    let warm = aggregate_warmup(&runs, &names, cfg.cutoff);

    let truth = spec.causal_set();
    let nulls = spec.null_set();
    let min_causal = truth.iter().map(|&i| full.mean[i]).fold(f64::INFINITY, f64::min);
    let max_null = nulls.iter().map(|&i| full.mean[i]).fold(f64::NEG_INFINITY, f64::max);

    let mut report = EvalReport {
        separation_margin: Some(min_causal - max_null),
        ..EvalReport::default()
    };
    report.methods.push(MethodSummary {
        method: Method::Autoci.label().to_string(),
        setting: "survival".to_string(),
        replicates: runs.len(),
        mean_js: jaccard(&full.s_pred, &truth),
        std_js: 0.0,
        fwer: fwer(std::slice::from_ref(&full.s_pred), &truth),
        failures: 0,
        seconds,
    });
    report.variables = names
        .iter()
        .enumerate()
        .map(|(i, n)| VariableRow {
            variable: n.clone(),
            mean_p: full.mean[i],
            std_p: full.std[i],
            in_s_pred: full.s_pred.contains(&i),
        })
        .collect();
    for (j, run) in runs.iter().enumerate() {
        report.decisions.extend(run.decisions.iter().map(|d| DecisionRow {
            replicate: 0,
            run: j,
            record: d.clone(),
        }));
    }

    let model = cox_fit(&data).map_err(ExperimentError::Runtime)?;
    let table = hazard_report(&model, &names);
    report.hazard = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, h)| HazardTableRow {
            variable: h.variable.clone(),
            causal_prob_warmup: warm.mean[i],
            causal_prob_full: full.mean[i],
            hazard_ratio: h.hazard_ratio,
            ci_low: h.ci_low,
            ci_high: h.ci_high,
            p_value: h.p_value,
        })
        .collect();

    if config.coverage_replicates > 0 {
        let hits: Vec<Result<Vec<bool>, String>> = (0..config.coverage_replicates)
            .into_par_iter()
            .map(|r| {
                let d = gen_survival_cohort(spec, config.seed + r as u64);
                let m = cox_fit(&d)?;
                Ok(hazard_report(&m, &names)
                    .rows
                    .iter()
                    .zip(&spec.covariates)
                    .map(|(h, c)| {
                        let hr = c.beta.exp();
                        h.ci_low <= hr && hr <= h.ci_high
                    })
                    .collect())
            })
            .collect();
        let hits: Vec<Vec<bool>> = hits.into_iter().collect::<Result<_, _>>().map_err(ExperimentError::Runtime)?;
        report.coverage = spec
            .covariates
            .iter()
            .enumerate()
            .map(|(i, c)| CoverageRow {
                variable: c.name.clone(),
                planted_hr: c.beta.exp(),
                replicates: hits.len(),
                coverage: hits.iter().filter(|h| h[i]).count() as f64 / hits.len() as f64,
            })
            .collect();
    }
    Ok(report)
}

/// Cox model on the raw covariates, stratified by trial.
fn cox_fit(data: &EnvDataset) -> Result<crate::cox::CoxModel, String> {
    let p = data.pooled();
    fit_cox_stratified(&p.x, data.n_vars(), &p.times, &p.events, &p.env).map_err(|e| e.to_string())
}

fn set_text(s: &IndexSet) -> String {
    s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

struct CsvFile {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvFile {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, ExperimentError> {
        let path = dir.join(name);
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut c = CsvFile {
            writer: csv::Writer::from_writer(BufWriter::new(f)),
            path,
        };
        c.row(header.iter().map(|s| s.to_string()))?;
        Ok(c)
    }

    fn row(&mut self, rec: impl IntoIterator<Item = String>) -> Result<(), ExperimentError> {
        let path = self.path.clone();
        self.writer
            .write_record(rec.into_iter().collect::<Vec<_>>())
            .map_err(|e| ExperimentError::Io { path, msg: e.to_string() })
    }

    fn finish(mut self) -> Result<(), ExperimentError> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

/// Writes the report files. Every CSV is written, header-only when empty.
pub fn emit_report(report: &EvalReport, formats: &[Format], dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    if formats.contains(&Format::Json) {
        let path = dir.join("report.json");
        let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        serde_json::to_writer_pretty(&mut f, report).map_err(|e| ExperimentError::Io {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        f.write_all(b"\n").and_then(|_| f.flush()).map_err(io_err(&path))?;

        let path = dir.join("decisions.jsonl");
        let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for d in &report.decisions {
            serde_json::to_writer(&mut f, d).map_err(|e| ExperimentError::Io {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            f.write_all(b"\n").map_err(io_err(&path))?;
        }
        f.flush().map_err(io_err(&path))?;
    }
    if !formats.contains(&Format::Csv) {
        return Ok(());
    }

    let mut w = CsvFile::create(dir, "summary.csv", &["method", "setting", "replicates", "mean_js", "std_js", "fwer", "failures"])?;
    for m in &report.methods {
        w.row([
            m.method.clone(),
            m.setting.clone(),
            m.replicates.to_string(),
            f6(m.mean_js),
            f6(m.std_js),
            f6(m.fwer),
            m.failures.to_string(),
        ])?;
    }
    w.finish()?;

    let mut w = CsvFile::create(dir, "replicates.csv", &["method", "setting", "replicate", "seed", "js", "s_pred", "truth", "failed"])?;
    for r in &report.replicates {
        w.row([
            r.method.clone(),
            r.setting.clone(),
            r.replicate.to_string(),
            r.seed.to_string(),
            f6(r.js),
            set_text(&r.s_pred),
            set_text(&r.truth),
            u8::from(r.failed).to_string(),
        ])?;
    }
    w.finish()?;

    let mut w = CsvFile::create(dir, "timing.csv", &["method", "setting", "seconds"])?;
    for (m, s, t) in report.timing() {
        w.row([m, s, format!("{t:.3}")])?;
    }
    w.finish()?;

    let mut w = CsvFile::create(dir, "js_curve.csv", &["epoch", "program", "mean_js", "std_js"])?;
    for c in &report.curves {
        w.row([c.epoch.to_string(), c.program.clone(), f6(c.mean_js), f6(c.std_js)])?;
    }
    w.finish()?;

    match report.kind {
        Some(ExperimentKind::Synth) => {
            let mut w = CsvFile::create(dir, "synth_counts.csv", &["size", "generic_count", "typesafe_count", "elapsed_seconds"])?;
            for c in &report.synthesis {
                w.row([c.size.to_string(), c.generic_count.to_string(), c.typesafe_count.to_string(), format!("{:.3}", c.elapsed_seconds)])?;
            }
            w.finish()?;
            let mut w = CsvFile::create(dir, "candidates.csv", &["size", "program"])?;
            for (s, p) in &report.candidates {
                w.row([s.to_string(), p.clone()])?;
            }
            w.finish()?;
            let mut w = CsvFile::create(dir, "ranking.csv", &["rank", "program", "trainable_size", "score", "std", "failures"])?;
            for (i, c) in report.ranking.iter().enumerate() {
                w.row([
                    (i + 1).to_string(),
                    c.program.clone(),
                    c.trainable_size.to_string(),
                    f6(c.score),
                    f6(c.std),
                    c.failures.to_string(),
                ])?;
            }
            w.finish()?;
        }
        Some(ExperimentKind::Survival) => {
            let mut w = CsvFile::create(dir, "aggregate.csv", &["variable", "mean_p", "std_p", "in_S_pred"])?;
            for v in &report.variables {
                w.row([v.variable.clone(), f6(v.mean_p), f6(v.std_p), u8::from(v.in_s_pred).to_string()])?;
            }
            w.finish()?;
            let mut w = CsvFile::create(
                dir,
                "hazard_table.csv",
                &["variable", "causal_prob_warmup", "causal_prob_full", "HR", "CI_low", "CI_high", "p"],
            )?;
            for h in &report.hazard {
                w.row([
                    h.variable.clone(),
                    f6(h.causal_prob_warmup),
                    f6(h.causal_prob_full),
                    format!("{:.4}", h.hazard_ratio),
                    format!("{:.4}", h.ci_low),
                    format!("{:.4}", h.ci_high),
                    format!("{:.3e}", h.p_value),
                ])?;
            }
            w.finish()?;
            let mut w = CsvFile::create(dir, "coverage.csv", &["variable", "planted_hr", "replicates", "coverage"])?;
            for c in &report.coverage {
                w.row([c.variable.clone(), format!("{:.4}", c.planted_hr), c.replicates.to_string(), f6(c.coverage)])?;
            }
            w.finish()?;
        }
        Some(ExperimentKind::Baselines) => {
            let mut w = CsvFile::create(dir, "subsets.csv", &["replicate", "method", "subset", "accepted", "min_p"])?;
            for s in &report.subsets {
                let min_p = s.decision.p_values.iter().copied().fold(1.0, f64::min);
                w.row([
                    s.replicate.to_string(),
                    s.method.clone(),
                    set_text(&s.decision.subset),
                    u8::from(s.decision.accepted).to_string(),
                    format!("{min_p:.6e}"),
                ])?;
            }
            w.finish()?;
        }
        _ => {}
    }
    Ok(())
}
