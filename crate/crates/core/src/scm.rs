//! Random linear structural causal models, interventional environments and
//! a synthetic two-trial survival cohort.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EnvDataset, Environment, Outcome};
use crate::stats::IndexSet;

/// Where the outcome node sits in the random causal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPlacement {
    /// Uniform position after the first node; the outcome may have children.
    Random,
    /// Last in the order; the outcome has no children.
    #[default]
    Sink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmParams {
    /// Observed nodes, outcome included.
    pub n_vars: usize,
    pub edge_density: f64,
    pub confounded: bool,
    pub weight_range: (f64, f64),
    pub noise_var_range: (f64, f64),
    pub target: TargetPlacement,
}

impl ScmParams {
    pub fn new(n_vars: usize, edge_density: f64, confounded: bool) -> Self {
        ScmParams {
            n_vars,
            edge_density,
            confounded,
            weight_range: (0.5, 2.0),
            noise_var_range: (0.5, 1.5),
            target: TargetPlacement::default(),
        }
    }
}

impl Default for ScmParams {
    /// Four predictors plus the outcome, edge density 0.5, no confounder.
    fn default() -> Self {
        ScmParams::new(5, 0.5, false)
    }
}

/// Linear SCM over `n_nodes` nodes, possibly including one latent node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scm {
    pub n_nodes: usize,
    /// `parents[j]` lists `(i, w)` for each edge `i -> j` with weight `w`.
    pub parents: Vec<Vec<(usize, f64)>>,
    pub noise_vars: Vec<f64>,
    pub target: usize,
    pub latent: Vec<bool>,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionKind {
    DoConstant { value: f64 },
    DoGaussian { mean: f64, var: f64 },
    Shift { amount: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub node: usize,
    pub kind: InterventionKind,
}

/// Sampled rows: observed non-target columns (row-major) and the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn signed_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let m = rng.random_range(lo..=hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

impl Scm {
    /// Observed non-target node ids, in column order.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.n_nodes).filter(|&i| i != self.target && !self.latent[i]).collect()
    }

    pub fn var_names(&self) -> Vec<String> {
        (0..self.observed().len()).map(|k| format!("X{k}")).collect()
    }

    /// Column indices of the observed parents of the outcome.
    pub fn causal_set(&self) -> IndexSet {
        let obs = self.observed();
        self.parents[self.target]
            .iter()
            .filter_map(|(p, _)| obs.iter().position(|o| o == p))
            .collect()
    }

    pub fn is_acyclic(&self) -> bool {
        let mut pos = vec![usize::MAX; self.n_nodes];
        for (k, &v) in self.order.iter().enumerate() {
            pos[v] = k;
        }
        self.order.len() == self.n_nodes
            && self.parents.iter().enumerate().all(|(j, ps)| ps.iter().all(|&(i, _)| pos[i] < pos[j]))
    }

    /// Ancestral sampling of `n` rows under `interventions`.
    pub fn sample<R: Rng>(&self, n: usize, interventions: &[InterventionSpec], rng: &mut R) -> Sample {
        let obs = self.observed();
        let mut x = Vec::with_capacity(n * obs.len());
        let mut y = Vec::with_capacity(n);
        let mut v = vec![0.0; self.n_nodes];
        for _ in 0..n {
            for &j in &self.order {
                let iv = interventions.iter().find(|s| s.node == j);
                v[j] = match iv.map(|s| s.kind) {
                    Some(InterventionKind::DoConstant { value }) => value,
                    Some(InterventionKind::DoGaussian { mean, var }) => {
                        let z: f64 = StandardNormal.sample(rng);
                        mean + var.sqrt() * z
                    }
                    _ => {
                        let z: f64 = StandardNormal.sample(rng);
                        let base: f64 = self.parents[j].iter().map(|&(i, w)| w * v[i]).sum();
                        let shift = match iv.map(|s| s.kind) {
                            Some(InterventionKind::Shift { amount }) => amount,
                            _ => 0.0,
                        };
                        base + self.noise_vars[j].sqrt() * z + shift
                    }
                };
            }
            x.extend(obs.iter().map(|&i| v[i]));
            y.push(v[self.target]);
        }
        Sample { x, y }
    }
}

/// Draws a random linear SCM. In confounded mode an extra latent root is
/// added with edges into the outcome and into one observed node.
pub fn random_scm(params: &ScmParams, seed: u64) -> Scm {
    assert!(params.n_vars >= 2, "an SCM needs at least 2 observed nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obs = params.n_vars;
    let n_nodes = n_obs + usize::from(params.confounded);
    // Node n_obs - 1 is the outcome; node n_obs (if any) is latent.
    let target = n_obs - 1;
    let mut observed_order: Vec<usize> = (0..n_obs).filter(|&i| i != target).collect();
    observed_order.shuffle(&mut rng);
    let pos = match params.target {
        TargetPlacement::Sink => observed_order.len(),
        TargetPlacement::Random => rng.random_range(1..=observed_order.len()),
    };
    observed_order.insert(pos, target);
    let mut order = Vec::with_capacity(n_nodes);
    if params.confounded {
        order.push(n_obs);
    }
    order.extend(observed_order.iter().copied());

    let mut parents: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_nodes];
    for (k, &j) in observed_order.iter().enumerate() {
        for &i in &observed_order[..k] {
            if rng.random_bool(params.edge_density.clamp(0.0, 1.0)) {
                parents[j].push((i, signed_uniform(&mut rng, params.weight_range)));
            }
        }
    }
    if params.edge_density > 0.0 && parents[target].is_empty() {
        let i = observed_order[rng.random_range(0..pos)];
        parents[target].push((i, signed_uniform(&mut rng, params.weight_range)));
    }
    if params.confounded {
        let h = n_obs;
        let others: Vec<usize> = observed_order.iter().copied().filter(|&i| i != target).collect();
        let child = others[rng.random_range(0..others.len())];
        parents[target].push((h, signed_uniform(&mut rng, params.weight_range)));
        parents[child].push((h, signed_uniform(&mut rng, params.weight_range)));
    }
    for ps in parents.iter_mut() {
        ps.sort_by_key(|p| p.0);
    }
    let noise_vars = (0..n_nodes)
        .map(|_| rng.random_range(params.noise_var_range.0..=params.noise_var_range.1))
        .collect();
    let mut latent = vec![false; n_nodes];
    if params.confounded {
        latent[n_obs] = true;
    }
    let scm = Scm {
        n_nodes,
        parents,
        noise_vars,
        target,
        latent,
        order,
    };
    debug_assert!(scm.is_acyclic());
    scm
}

/// Sample sizes of an interventional protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingSpec {
    pub n_observational: usize,
    pub n_interventional: usize,
    /// Intervention means are uniform on `±[lo, hi]`.
    pub mean_range: (f64, f64),
    pub variance: f64,
}

impl SettingSpec {
    pub fn finite() -> Self {
        SettingSpec {
            n_observational: 1000,
            n_interventional: 1000,
            mean_range: (1.0, 10.0),
            variance: 1.0,
        }
    }

    pub fn abcd() -> Self {
        SettingSpec {
            n_interventional: 10,
            ..SettingSpec::finite()
        }
    }
}

/// One observational environment plus one single-node Gaussian intervention
/// environment per observed non-target variable.
pub fn make_setting(scm: &Scm, spec: &SettingSpec, seed: u64) -> EnvDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = scm.var_names();
    let mut envs = Vec::new();
    let s = scm.sample(spec.n_observational, &[], &mut rng);
    envs.push(Environment {
        tag: "obs".into(),
        x: s.x,
        outcome: Outcome::Regression(s.y),
    });
    for (k, node) in scm.observed().into_iter().enumerate() {
        let iv = InterventionSpec {
            node,
            kind: InterventionKind::DoGaussian {
                mean: signed_uniform(&mut rng, spec.mean_range),
                var: spec.variance,
            },
        };
        let s = scm.sample(spec.n_interventional, &[iv], &mut rng);
        envs.push(Environment {
            tag: format!("do({})", names[k]),
            x: s.x,
            outcome: Outcome::Regression(s.y),
        });
    }
    EnvDataset::new(names, envs).expect("simulated settings are valid")
}

pub fn make_finite_setting(scm: &Scm, seed: u64) -> EnvDataset {
    make_setting(scm, &SettingSpec::finite(), seed)
}

pub fn make_abcd_setting(scm: &Scm, seed: u64) -> EnvDataset {
    make_setting(scm, &SettingSpec::abcd(), seed)
}

/// Per-trial covariate distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    /// Bernoulli with per-trial probability.
    Binary { p: [f64; 2] },
    /// Normal with per-trial mean and standard deviation.
    Continuous { mean: [f64; 2], sd: [f64; 2] },
    /// Uniform on `[lo, hi]` in both trials.
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalCohortSpec {
    pub n_per_trial: [usize; 2],
    pub covariates: Vec<CovariateSpec>,
    pub baseline_hazard: f64,
    /// Target fraction of censored subjects.
    pub censoring_rate: f64,
}

impl Default for SurvivalCohortSpec {
    fn default() -> Self {
        let ln2 = std::f64::consts::LN_2;
        let cov = |name: &str, kind, beta| CovariateSpec {
            name: name.into(),
            kind,
            beta,
        };
        SurvivalCohortSpec {
            n_per_trial: [4000, 4000],
            covariates: vec![
                cov("LVSI", CovariateKind::Binary { p: [0.2, 0.6] }, ln2),
                cov("POLEmut", CovariateKind::Binary { p: [0.6, 0.2] }, -ln2),
                cov("Grade", CovariateKind::Binary { p: [0.25, 0.65] }, 0.5 * ln2),
                cov("PatientID", CovariateKind::Uniform { lo: 0.0, hi: 1.0 }, 0.0),
                cov(
                    "TissueArea",
                    CovariateKind::Continuous {
                        mean: [1.0, 1.2],
                        sd: [0.3, 0.3],
                    },
                    0.0,
                ),
            ],
            baseline_hazard: 0.1,
            censoring_rate: 0.3,
        }
    }
}

impl SurvivalCohortSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.covariates.iter().any(|c| !c.beta.is_finite()) {
            return Err("covariate beta must be finite".into());
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err("censoring_rate must lie in [0, 1)".into());
        }
        if !(self.baseline_hazard > 0.0) {
            return Err("baseline_hazard must be positive".into());
        }
        if self.covariates.iter().filter(|c| c.beta != 0.0).count() < 2 {
            return Err("need at least 2 covariates with nonzero beta".into());
        }
        if !self.covariates.iter().any(|c| c.beta == 0.0) {
            return Err("need at least 1 null covariate".into());
        }
        if self.n_per_trial.iter().any(|&n| n < 2) {
            return Err("each trial needs at least 2 subjects".into());
        }
        Ok(())
    }

    pub fn causal_set(&self) -> IndexSet {
        self.covariates.iter().enumerate().filter(|(_, c)| c.beta != 0.0).map(|(i, _)| i).collect()
    }

    pub fn null_set(&self) -> IndexSet {
        self.covariates.iter().enumerate().filter(|(_, c)| c.beta == 0.0).map(|(i, _)| i).collect()
    }
}

/// Censoring rate `c` with `mean_i c / (c + rate_i) = target`, by bisection.
fn calibrate_censoring(rates: &[f64], target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let frac = |c: f64| rates.iter().map(|r| c / (c + r)).sum::<f64>() / rates.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while frac(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two trials with exponential event times `rate = h0 exp(beta' x)` and
/// independent exponential censoring.
pub fn gen_survival_cohort(spec: &SurvivalCohortSpec, seed: u64) -> EnvDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spec.covariates.len();
    let mut envs = Vec::with_capacity(2);
    for (trial, &n) in spec.n_per_trial.iter().enumerate() {
        let mut x = Vec::with_capacity(n * p);
        let mut rates = Vec::with_capacity(n);
        for _ in 0..n {
            let mut eta = 0.0;
            for c in &spec.covariates {
                let v = match c.kind {
                    CovariateKind::Binary { p } => f64::from(u8::from(rng.random_bool(p[trial]))),
                    CovariateKind::Continuous { mean, sd } => {
                        Normal::new(mean[trial], sd[trial]).expect("valid normal").sample(&mut rng)
                    }
                    CovariateKind::Uniform { lo, hi } => rng.random_range(lo..=hi),
                };
                eta += c.beta * v;
                x.push(v);
            }
            rates.push(spec.baseline_hazard * eta.exp());
        }
        let c = calibrate_censoring(&rates, spec.censoring_rate);
        let mut times = Vec::with_capacity(n);
        let mut events = Vec::with_capacity(n);
        for &r in &rates {
            let t = Exp::new(r).expect("positive rate").sample(&mut rng);
            let cens = if c > 0.0 {
                Exp::new(c).expect("positive rate").sample(&mut rng)
            } else {
                f64::INFINITY
            };
            times.push(t.min(cens));
            events.push(t <= cens);
        }
        envs.push(Environment {
            tag: format!("trial-{}", trial + 1),
            x,
            outcome: Outcome::Survival { times, events },
        });
    }
    let names = spec.covariates.iter().map(|c| c.name.clone()).collect();
    EnvDataset::new(names, envs).expect("simulated cohorts are valid")
}

#[cfg(test)]
mod tests {
    use nalgebra::{DMatrix, DVector};

    use super::*;
    use crate::cox::fit_cox;

    #[test]
    fn random_scm_is_deterministic_and_acyclic() {
        for seed in 0..50 {
            for confounded in [false, true] {
                for target in [TargetPlacement::Sink, TargetPlacement::Random] {
                    let params = ScmParams {
                        target,
                        ..ScmParams::new(5, 0.4, confounded)
                    };
                    let a = random_scm(&params, seed);
                    assert_eq!(a, random_scm(&params, seed));
                    assert!(a.is_acyclic());
                    assert!(!a.parents[a.target].is_empty());
                    assert_eq!(a.observed().len(), 4);
                    for ps in &a.parents {
                        for &(_, w) in ps {
                            assert!((0.5..=2.0).contains(&w.abs()));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_density_gives_parentless_outcome() {
        let scm = random_scm(&ScmParams::new(4, 0.0, false), 3);
        assert!(scm.parents[scm.target].is_empty());
        assert!(scm.causal_set().is_empty());
    }

    #[test]
    fn confounder_is_hidden_from_causal_set() {
        let scm = random_scm(&ScmParams::new(4, 0.5, true), 11);
        let h = scm.n_nodes - 1;
        assert!(scm.latent[h]);
        assert!(scm.parents[scm.target].iter().any(|&(i, _)| i == h));
        assert_eq!(scm.parents.iter().filter(|ps| ps.iter().any(|&(i, _)| i == h)).count(), 2);
        assert!(scm.causal_set().len() < scm.parents[scm.target].len());
    }

    fn chain() -> Scm {
        Scm {
            n_nodes: 2,
            parents: vec![vec![], vec![(0, 2.0)]],
            noise_vars: vec![1.0, 0.0],
            target: 1,
            latent: vec![false, false],
            order: vec![0, 1],
        }
    }

    #[test]
    fn noiseless_chain_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = chain().sample(100, &[], &mut rng);
        for (x, y) in s.x.iter().zip(&s.y) {
            assert_eq!(*y, 2.0 * x);
        }
    }

    #[test]
    fn do_constant_fixes_the_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let iv = InterventionSpec {
            node: 0,
            kind: InterventionKind::DoConstant { value: 3.5 },
        };
        let s = chain().sample(50, &[iv], &mut rng);
        assert!(s.x.iter().all(|&v| v == 3.5));
        assert!(s.y.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn shift_moves_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let iv = InterventionSpec {
            node: 0,
            kind: InterventionKind::Shift { amount: 5.0 },
        };
        let s = chain().sample(20_000, &[iv], &mut rng);
        let m = s.x.iter().sum::<f64>() / s.x.len() as f64;
        assert!((m - 5.0).abs() < 0.05);
    }

    #[test]
    fn regression_on_parents_recovers_weights() {
        for seed in 0..3 {
            let scm = random_scm(&ScmParams::new(4, 0.6, false), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = scm.sample(100_000, &[], &mut rng);
            let obs = scm.observed();
            let cols: Vec<usize> = scm.parents[scm.target]
                .iter()
                .map(|(p, _)| obs.iter().position(|o| o == p).unwrap())
                .collect();
            let k = obs.len();
            let n = s.y.len();
            let xm = DMatrix::from_fn(n, cols.len(), |r, c| s.x[r * k + cols[c]]);
            let ym = DVector::from_column_slice(&s.y);
            let beta = (xm.transpose() * &xm).cholesky().unwrap().solve(&(xm.transpose() * ym));
            for ((_, w), b) in scm.parents[scm.target].iter().zip(beta.iter()) {
                assert!((w - b).abs() < 0.05, "weight {w} estimated {b}");
            }
        }
    }

    #[test]
    fn settings_have_expected_shape() {
        let scm = random_scm(&ScmParams::new(4, 0.5, false), 2);
        let finite = make_finite_setting(&scm, 7);
        assert_eq!(finite.environments.len(), 4);
        assert!(finite.environments.iter().all(|e| e.rows() == 1000));
        let abcd = make_abcd_setting(&scm, 7);
        assert_eq!(abcd.environments[0].rows(), 1000);
        assert!(abcd.environments[1..].iter().all(|e| e.rows() == 10));
        let tags = |d: &EnvDataset| d.environments.iter().map(|e| e.tag.clone()).collect::<Vec<_>>();
        assert_eq!(tags(&finite), tags(&make_finite_setting(&scm, 99)));
        assert_eq!(tags(&finite), vec!["obs", "do(X0)", "do(X1)", "do(X2)"]);
        assert_eq!(finite, make_finite_setting(&scm, 7));
    }

    #[test]
    fn cohort_censoring_is_calibrated() {
        let spec = SurvivalCohortSpec::default();
        spec.validate().unwrap();
        let d = gen_survival_cohort(&spec, 4);
        assert_eq!(d, gen_survival_cohort(&spec, 4));
        let p = d.pooled();
        let censored = p.events.iter().filter(|e| !**e).count() as f64 / p.events.len() as f64;
        assert!((censored - spec.censoring_rate).abs() < 0.05, "{censored}");
        assert_eq!(d.environments[1].tag, "trial-2");
    }

    fn single_binary_spec(beta: f64, n: usize) -> SurvivalCohortSpec {
        SurvivalCohortSpec {
            n_per_trial: [n / 2, n / 2],
            covariates: vec![CovariateSpec {
                name: "B".into(),
                kind: CovariateKind::Binary { p: [0.5, 0.5] },
                beta,
            }],
            baseline_hazard: 0.1,
            censoring_rate: 0.3,
        }
    }

    #[test]
    fn planted_binary_hazard_ratio_is_recovered() {
        let d = gen_survival_cohort(&single_binary_spec(std::f64::consts::LN_2, 2000), 8);
        let p = d.pooled();
        let m = fit_cox(&p.x, 1, &p.times, &p.events).unwrap();
        let hr = m.beta[0].exp();
        assert!((1.7..=2.3).contains(&hr), "{hr}");
    }

    #[test]
    fn null_cohort_gives_unit_hazard_ratios() {
        let mut spec = SurvivalCohortSpec::default();
        spec.covariates.iter_mut().for_each(|c| c.beta = 0.0);
        let d = gen_survival_cohort(&spec, 12);
        let p = d.pooled();
        let m = fit_cox(&p.x, spec.covariates.len(), &p.times, &p.events).unwrap();
        for (b, se) in m.beta.iter().zip(m.std_errors()) {
            assert!(b.abs() < 4.0 * se, "beta {b} se {se}");
        }
    }

    #[test]
    fn patient_id_ci_covers_one() {
        let spec = SurvivalCohortSpec::default();
        let id = spec.covariates.iter().position(|c| c.name == "PatientID").unwrap();
        let p_cov = spec.covariates.len();
        let mut covered = 0;
        for seed in 0..50 {
            let d = gen_survival_cohort(&spec, 1000 + seed);
            let p = d.pooled();
            let m = fit_cox(&p.x, p_cov, &p.times, &p.events).unwrap();
            let se = m.std_errors()[id];
            if (m.beta[id] - 1.96 * se..=m.beta[id] + 1.96 * se).contains(&0.0) {
                covered += 1;
            }
        }
        assert!(covered >= 45, "{covered}/50");
    }
}
