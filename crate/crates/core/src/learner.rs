//! Warm-up training, residual disturbance testing and greedy mask search.
//!
//! After warm-up every gated variable is tried in ascending order of its gate
//! probability: the variable is masked, the program is fine-tuned, and the
//! maximum Fréchet distance between each environment's residuals and the
//! rest (mFID) is compared with its value before masking. A variable whose
//! removal inflates mFID by more than a factor `lambda` is restored and
//! declared causal; otherwise it stays masked.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{martingale_residuals, BaselineHazard};
use crate::data::EnvDataset;
use crate::dsl::{check, DslType, Term};
use crate::runtime::{
    adam_step, loss_and_gradients, predict, AdamConfig, AdamState, LossHead, MlpArch, ParamStore, RuntimeError, Value,
};
use crate::stats::{fid, fit_gaussian_1d, mean_std, IndexSet, StatsError};

/// Floor on the baseline disturbance in the decision rule.
pub const D0_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub runs: usize,
    pub cutoff: f64,
    pub seed: u64,
    pub arch: MlpArch,
    /// Recompute the baseline disturbance before every flip rather than
    /// fixing it after warm-up.
    pub recompute_baseline: bool,
    /// Measure disturbances and losses in the search on the parameters
    /// averaged over the steps of the latest epoch.
    pub average_eval: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            lr: 0.02,
            warmup_epochs: 8,
            finetune_epochs: 1,
            batch_size: 64,
            lambda: 5.0,
            runs: 1,
            cutoff: 0.5,
            seed: 0,
            arch: MlpArch::default(),
            recompute_baseline: true,
            average_eval: false,
        }
    }
}

impl LearnerConfig {
    /// Settings used for the toy SCM experiments.
    pub fn toy() -> Self {
        LearnerConfig {
            arch: MlpArch::compact(),
            average_eval: true,
            ..LearnerConfig::default()
        }
    }

    /// Toy settings for the ABCD protocol. Its datasets have about a fifth of
    /// the rows of the finite-sample setting, so epochs are scaled up five
    /// times to keep the number of optimizer steps comparable.
    pub fn toy_abcd() -> Self {
        LearnerConfig {
            warmup_epochs: 40,
            finetune_epochs: 5,
            ..LearnerConfig::toy()
        }
    }

    /// Settings used for the survival cohort.
    pub fn survival() -> Self {
        LearnerConfig {
            lambda: 1.0,
            runs: 64,
            arch: MlpArch::compact(),
            ..LearnerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) {
            return Err("lr must be positive".into());
        }
        if self.warmup_epochs < 1 || self.finetune_epochs < 1 {
            return Err("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.lambda > 0.0) {
            return Err("lambda must be positive".into());
        }
        if self.runs < 1 {
            return Err("runs must be at least 1".into());
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err("cutoff must lie in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("program `{0}` has no causal gate")]
    NoGate(String),
    #[error("program does not type-check: {0}")]
    Type(String),
    #[error("environment `{0}` has fewer than 2 samples")]
    DegenerateEnvironment(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Causal,
    Rejected,
}

/// One flip of the mask search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub variable: usize,
    pub name: String,
    pub d0: f64,
    pub d1: f64,
    pub l0: f64,
    pub l1: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mask: Vec<bool>,
    /// Gate logits, averaged over gate instances.
    pub theta: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Causal probabilities right after warm-up, before any masking.
    pub warmup_probabilities: Vec<f64>,
    pub decisions: Vec<DecisionRecord>,
    pub s_pred: IndexSet,
    /// Mask after every training epoch, warm-up first.
    pub mask_trace: Vec<Vec<bool>>,
    pub warmup_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub s_pred: IndexSet,
}

/// Standardized, pooled view of a dataset used for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n_vars: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub env: Vec<usize>,
    pub env_tags: Vec<String>,
    pub names: Vec<String>,
    pub survival: bool,
}

fn standardize(values: &mut [f64], stride: usize, col: usize) {
    let n = values.len() / stride;
    let col_vals: Vec<f64> = (0..n).map(|r| values[r * stride + col]).collect();
    let (m, s) = mean_std(&col_vals);
    let s = if s > 0.0 { s } else { 1.0 };
    for r in 0..n {
        values[r * stride + col] = (values[r * stride + col] - m) / s;
    }
}

impl Prepared {
    pub fn new(data: &EnvDataset) -> Result<Self, LearnerError> {
        data.validate()?;
        for e in &data.environments {
            if e.rows() < 2 {
                return Err(LearnerError::DegenerateEnvironment(e.tag.clone()));
            }
        }
        let p = data.pooled();
        let n = data.n_vars();
        let mut x = p.x;
        for c in 0..n {
            standardize(&mut x, n, c);
        }
        let mut y = p.y;
        if !y.is_empty() {
            standardize(&mut y, 1, 0);
        }
        Ok(Prepared {
            n_vars: n,
            x,
            y,
            times: p.times,
            events: p.events,
            env: p.env,
            env_tags: data.environments.iter().map(|e| e.tag.clone()).collect(),
            names: data.var_names.clone(),
            survival: data.is_survival(),
        })
    }

    pub fn rows(&self) -> usize {
        self.env.len()
    }

    fn input(&self, rows: &[usize]) -> Value {
        Value::from_rows(&self.x, self.n_vars, rows)
    }

    /// Rows in the listed order, keeping environment tags and indices.
    pub fn subset(&self, rows: &[usize]) -> Prepared {
        let pick = |v: &[f64]| if v.is_empty() { Vec::new() } else { rows.iter().map(|&r| v[r]).collect() };
        let n = self.n_vars;
        Prepared {
            n_vars: n,
            x: rows.iter().flat_map(|&r| self.x[r * n..(r + 1) * n].iter().copied()).collect(),
            y: pick(&self.y),
            times: pick(&self.times),
            events: if self.events.is_empty() { Vec::new() } else { rows.iter().map(|&r| self.events[r]).collect() },
            env: rows.iter().map(|&r| self.env[r]).collect(),
            env_tags: self.env_tags.clone(),
            names: self.names.clone(),
            survival: self.survival,
        }
    }

    /// Splits off every `k`-th row of each environment as a held-out set.
    pub fn holdout_split(&self, k: usize) -> (Prepared, Prepared) {
        let mut seen = vec![0usize; self.env_tags.len()];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (r, &e) in self.env.iter().enumerate() {
            seen[e] += 1;
            if k > 0 && seen[e] % k == 0 {
                test.push(r);
            } else {
                train.push(r);
            }
        }
        (self.subset(&train), self.subset(&test))
    }
}

struct Batch {
    rows: Vec<usize>,
    y: Vec<f64>,
    times: Vec<f64>,
    events: Vec<bool>,
    strata: Vec<usize>,
}

impl Batch {
    fn gather(data: &Prepared, rows: &[usize]) -> Self {
        let pick_f = |v: &[f64]| if v.is_empty() { Vec::new() } else { rows.iter().map(|&r| v[r]).collect() };
        Batch {
            rows: rows.to_vec(),
            y: pick_f(&data.y),
            times: pick_f(&data.times),
            events: if data.events.is_empty() { Vec::new() } else { rows.iter().map(|&r| data.events[r]).collect() },
            strata: rows.iter().map(|&r| data.env[r]).collect(),
        }
    }

    fn head(&self, survival: bool) -> LossHead<'_> {
        if survival {
            LossHead::Cox {
                times: &self.times,
                events: &self.events,
                strata: &self.strata,
            }
        } else {
            LossHead::Mse { targets: &self.y }
        }
    }

    fn has_signal(&self, survival: bool) -> bool {
        !survival || self.events.iter().any(|&e| e)
    }
}

/// Mutable training state of one run.
struct Trainer<'a> {
    term: &'a Term,
    data: &'a Prepared,
    full: Batch,
    config: &'a LearnerConfig,
    adam: AdamConfig,
    state: AdamState,
    rng: ChaCha8Rng,
    /// Step average of the latest epoch.
    average: Option<ParamStore>,
}

impl<'a> Trainer<'a> {
    fn new(term: &'a Term, data: &'a Prepared, params: &ParamStore, config: &'a LearnerConfig, rng: ChaCha8Rng) -> Self {
        let all: Vec<usize> = (0..data.rows()).collect();
        Trainer {
            term,
            data,
            full: Batch::gather(data, &all),
            config,
            adam: AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            state: AdamState::new(params),
            rng,
            average: None,
        }
    }

    fn epoch(&mut self, params: &mut ParamStore) -> Result<(), LearnerError> {
        let mut order: Vec<usize> = (0..self.data.rows()).collect();
        order.shuffle(&mut self.rng);
        let mut average = self.config.average_eval.then(|| params.clone());
        let mut steps = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = Batch::gather(self.data, chunk);
            if !batch.has_signal(self.data.survival) {
                continue;
            }
            let input = self.data.input(&batch.rows);
            let (_, grads) = loss_and_gradients(self.term, params, &input, &batch.head(self.data.survival))?;
            adam_step(params, &grads.params, &mut self.state, &self.adam);
            if let Some(avg) = average.as_mut() {
                steps += 1.0;
                if steps == 1.0 {
                    *avg = params.clone();
                } else {
                    avg.blend_toward(params, 1.0 / steps);
                }
            }
        }
        self.average = average;
        Ok(())
    }

    /// Parameters the search measures on.
    fn measured<'p>(&'p self, params: &'p ParamStore) -> &'p ParamStore {
        match &self.average {
            Some(avg) if avg.mask() == params.mask() => avg,
            _ => params,
        }
    }

    fn scores(&self, params: &ParamStore) -> Result<Vec<f64>, LearnerError> {
        let out = predict(self.term, params, &self.data.input(&self.full.rows))?;
        let t = out.into_tensor().ok_or_else(|| RuntimeError::Loss("expected a Tensor(1) output".into()))?;
        Ok(t.data)
    }

    fn loss(&self, params: &ParamStore) -> Result<f64, LearnerError> {
        let out = predict(self.term, params, &self.data.input(&self.full.rows))?;
        Ok(self.full.head(self.data.survival).evaluate(&out)?.0)
    }

    fn residuals(&self, params: &ParamStore) -> Result<Vec<Vec<f64>>, LearnerError> {
        let f = self.scores(params)?;
        residuals_by_env(self.data, &f)
    }
}

/// Per-environment residuals of predictions `f` over the pooled rows:
/// `y - f` for regression, martingale residuals with a pooled Breslow
/// baseline for survival.
pub fn residuals_by_env(data: &Prepared, f: &[f64]) -> Result<Vec<Vec<f64>>, LearnerError> {
    let r: Vec<f64> = if data.survival {
        let base = BaselineHazard::fit(f, &data.times, &data.events);
        martingale_residuals(f, &data.times, &data.events, &base)
    } else {
        data.y.iter().zip(f).map(|(y, p)| y - p).collect()
    };
    let mut out = vec![Vec::new(); data.env_tags.len()];
    for (v, &e) in r.into_iter().zip(&data.env) {
        out[e].push(v);
    }
    Ok(out)
}

/// Residuals of a trained program, grouped by environment.
pub fn residuals(term: &Term, params: &ParamStore, data: &Prepared) -> Result<Vec<Vec<f64>>, LearnerError> {
    let out = predict(term, params, &data.input(&(0..data.rows()).collect::<Vec<_>>()))?;
    let t = out.into_tensor().ok_or_else(|| RuntimeError::Loss("expected a Tensor(1) output".into()))?;
    residuals_by_env(data, &t.data)
}

/// Maximum over environments of the Fréchet distance between the
/// environment's residuals and the pooled residuals of all other environments.
pub fn mfid(residuals: &[Vec<f64>]) -> Result<f64, LearnerError> {
    if residuals.len() < 2 {
        return Err(LearnerError::DegenerateEnvironment(format!("{} environments", residuals.len())));
    }
    for (k, r) in residuals.iter().enumerate() {
        if r.len() < 2 {
            return Err(LearnerError::DegenerateEnvironment(format!("#{k}")));
        }
    }
    let mut worst: f64 = 0.0;
    for u in 0..residuals.len() {
        let rest: Vec<f64> = residuals
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != u)
            .flat_map(|(_, r)| r.iter().copied())
            .collect();
        let d = fid(&fit_gaussian_1d(&residuals[u])?, &fit_gaussian_1d(&rest)?)?;
        worst = worst.max(d);
    }
    Ok(worst)
}

fn require_gate(term: &Term, n_vars: usize) -> Result<(), LearnerError> {
    check(term, &DslType::scalar_goal(n_vars), n_vars).map_err(|e| LearnerError::Type(e.to_string()))?;
    if !term.prims().iter().any(|(k, _)| *k == crate::dsl::PrimKind::Pred) {
        return Err(LearnerError::NoGate(term.to_string()));
    }
    Ok(())
}

fn warmup(trainer: &mut Trainer<'_>, params: &mut ParamStore, trace: &mut Vec<Vec<bool>>) -> Result<Vec<f64>, LearnerError> {
    let initial = params.clone();
    let l_init = trainer.loss(params)?;
    let mut losses = Vec::with_capacity(trainer.config.warmup_epochs);
    for _ in 0..trainer.config.warmup_epochs {
        trainer.epoch(params)?;
        losses.push(trainer.loss(params)?);
        trace.push(params.mask());
    }
    if losses.last().is_some_and(|&l| l > l_init) {
        *params = initial;
    }
    Ok(losses)
}

/// Trains `term` with every variable unmasked on pooled, shuffled data.
/// If training ends with a higher full-data loss than it started with, the
/// initial parameters are returned.
pub fn warmup_train(term: &Term, data: &EnvDataset, config: &LearnerConfig, seed: u64) -> Result<ParamStore, LearnerError> {
    config.validate().map_err(LearnerError::Config)?;
    let prepared = Prepared::new(data)?;
    require_gate(term, prepared.n_vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::init(term, prepared.n_vars, &config.arch, &mut rng);
    let mut trainer = Trainer::new(term, &prepared, &params, config, rng);
    warmup(&mut trainer, &mut params, &mut Vec::new())?;
    Ok(params)
}

fn search(
    trainer: &mut Trainer<'_>,
    params: &mut ParamStore,
    trace: &mut Vec<Vec<bool>>,
) -> Result<Vec<DecisionRecord>, LearnerError> {
    let config = trainer.config;
    let probs = params.gate_probabilities();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let mut fixed_d0 = None;
    let mut decisions = Vec::with_capacity(order.len());
    for i in order {
        let d0 = match fixed_d0 {
            Some(d) if !config.recompute_baseline => d,
            _ => {
                let d = mfid(&trainer.residuals(trainer.measured(params))?)?;
                fixed_d0 = Some(d);
                d
            }
        };
        let l0 = trainer.loss(trainer.measured(params))?;
        params.set_mask(i, false);
        for _ in 0..config.finetune_epochs {
            trainer.epoch(params)?;
            trace.push(params.mask());
        }
        let d1 = mfid(&trainer.residuals(trainer.measured(params))?)?;
        let l1 = trainer.loss(trainer.measured(params))?;
        let decision = if d1 > config.lambda * d0.max(D0_FLOOR) {
            params.set_mask(i, true);
            for _ in 0..config.finetune_epochs {
                trainer.epoch(params)?;
                trace.push(params.mask());
            }
            Decision::Causal
        } else {
            Decision::Rejected
        };
        decisions.push(DecisionRecord {
            variable: i,
            name: trainer.data.names.get(i).cloned().unwrap_or_default(),
            d0,
            d1,
            l0,
            l1,
            decision,
        });
    }
    Ok(decisions)
}

fn finish(params: &ParamStore, warmup_probabilities: Vec<f64>, decisions: Vec<DecisionRecord>, trace: Vec<Vec<bool>>, losses: Vec<f64>) -> RunResult {
    let mask = params.mask();
    let n = params.n_vars;
    let gates: Vec<&crate::runtime::GateParams> = params.gates().collect();
    let theta = (0..n)
        .map(|i| gates.iter().map(|g| g.theta[i]).sum::<f64>() / gates.len().max(1) as f64)
        .collect();
    RunResult {
        s_pred: mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect(),
        mask,
        theta,
        probabilities: params.causal_probabilities(),
        warmup_probabilities,
        decisions,
        mask_trace: trace,
        warmup_losses: losses,
    }
}

/// Full-data loss of a trained program: MSE for regression, Cox partial
/// likelihood per event for survival.
pub fn evaluate_loss(term: &Term, params: &ParamStore, data: &Prepared) -> Result<f64, LearnerError> {
    let all: Vec<usize> = (0..data.rows()).collect();
    let batch = Batch::gather(data, &all);
    if !batch.has_signal(data.survival) {
        return Err(RuntimeError::Loss("no events".into()).into());
    }
    let out = predict(term, params, &data.input(&all))?;
    Ok(batch.head(data.survival).evaluate(&out)?.0)
}

/// Greedy mask search from already warmed-up parameters.
pub fn mask_search(
    term: &Term,
    params: &ParamStore,
    data: &EnvDataset,
    config: &LearnerConfig,
    seed: u64,
) -> Result<RunResult, LearnerError> {
    config.validate().map_err(LearnerError::Config)?;
    let prepared = Prepared::new(data)?;
    require_gate(term, prepared.n_vars)?;
    let mut params = params.clone();
    let warm = params.causal_probabilities();
    let mut trainer = Trainer::new(term, &prepared, &params, config, ChaCha8Rng::seed_from_u64(seed));
    let mut trace = Vec::new();
    let decisions = search(&mut trainer, &mut params, &mut trace)?;
    Ok(finish(&params, warm, decisions, trace, Vec::new()))
}

/// Warm-up followed by mask search, fully determined by `seed`.
pub fn run_autoci(term: &Term, data: &EnvDataset, config: &LearnerConfig, seed: u64) -> Result<RunResult, LearnerError> {
    let prepared = Prepared::new(data)?;
    run_prepared(term, &prepared, config, seed)
}

/// [`run_autoci`] on an already prepared dataset.
pub fn run_prepared(term: &Term, prepared: &Prepared, config: &LearnerConfig, seed: u64) -> Result<RunResult, LearnerError> {
    run_with_params(term, prepared, config, seed).map(|(r, _)| r)
}

/// [`run_prepared`], also returning the final parameters.
pub fn run_with_params(
    term: &Term,
    prepared: &Prepared,
    config: &LearnerConfig,
    seed: u64,
) -> Result<(RunResult, ParamStore), LearnerError> {
    config.validate().map_err(LearnerError::Config)?;
    require_gate(term, prepared.n_vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::init(term, prepared.n_vars, &config.arch, &mut rng);
    let mut trainer = Trainer::new(term, prepared, &params, config, rng);
    let mut trace = Vec::new();
    let losses = warmup(&mut trainer, &mut params, &mut trace)?;
    let warm = params.causal_probabilities();
    let decisions = search(&mut trainer, &mut params, &mut trace)?;
    Ok((finish(&params, warm, decisions, trace, losses), params))
}

/// Per-variable mean and standard deviation of the causal probabilities;
/// variables with mean at or above `cutoff` form the prediction.
pub fn aggregate_runs(results: &[RunResult], names: &[String], cutoff: f64) -> AggregateResult {
    let n = names.len();
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for i in 0..n {
        let mut col: Vec<f64> = results.iter().map(|r| r.probabilities[i]).collect();
        // Sorting makes the floating-point sums independent of run order.
        col.sort_by(f64::total_cmp);
        (mean[i], std[i]) = mean_std(&col);
    }
    AggregateResult {
        names: names.to_vec(),
        s_pred: mean.iter().enumerate().filter(|(_, m)| **m >= cutoff).map(|(i, _)| i).collect(),
        mean,
        std,
    }
}

/// Same as [`aggregate_runs`] but using the warm-up probabilities.
pub fn aggregate_warmup(results: &[RunResult], names: &[String], cutoff: f64) -> AggregateResult {
    let swapped: Vec<RunResult> = results
        .iter()
        .map(|r| RunResult {
            probabilities: r.warmup_probabilities.clone(),
            ..r.clone()
        })
        .collect();
    aggregate_runs(&swapped, names, cutoff)
}

/// Decision log as JSON lines.
pub fn write_decision_log<W: Write>(mut w: W, decisions: &[DecisionRecord]) -> std::io::Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

impl AggregateResult {
    /// CSV with columns `variable, mean_p, std_p, in_S_pred`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variable", "mean_p", "std_p", "in_S_pred"])?;
        for (i, name) in self.names.iter().enumerate() {
            out.write_record([
                name.clone(),
                format!("{:.6}", self.mean[i]),
                format!("{:.6}", self.std[i]),
                u8::from(self.s_pred.contains(&i)).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
