//! Multi-environment datasets.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("dataset needs at least 2 environments, got {0}")]
    TooFewEnvironments(usize),
    #[error("environment `{tag}`: {msg}")]
    Invalid { tag: String, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// Outcome column(s) of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Regression(Vec<f64>),
    Survival { times: Vec<f64>, events: Vec<bool> },
}

impl Outcome {
    pub fn len(&self) -> usize {
        match self {
            Outcome::Regression(y) => y.len(),
            Outcome::Survival { times, .. } => times.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_survival(&self) -> bool {
        matches!(self, Outcome::Survival { .. })
    }
}

/// Rows gathered under one environment. `x` is row-major with one column
/// per dataset variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub tag: String,
    pub x: Vec<f64>,
    pub outcome: Outcome,
}

impl Environment {
    pub fn rows(&self) -> usize {
        self.outcome.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDataset {
    pub var_names: Vec<String>,
    pub environments: Vec<Environment>,
}

/// All environments stacked, with each row's environment index.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub env: Vec<usize>,
}

impl EnvDataset {
    pub fn new(var_names: Vec<String>, environments: Vec<Environment>) -> Result<Self, DataError> {
        let d = EnvDataset {
            var_names,
            environments,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.environments.iter().map(Environment::rows).sum()
    }

    pub fn is_survival(&self) -> bool {
        self.environments.first().is_some_and(|e| e.outcome.is_survival())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.environments.len() < 2 {
            return Err(DataError::TooFewEnvironments(self.environments.len()));
        }
        let n = self.n_vars();
        let survival = self.is_survival();
        for e in &self.environments {
            let bad = |msg: String| DataError::Invalid {
                tag: e.tag.clone(),
                msg,
            };
            if e.x.len() != e.rows() * n {
                return Err(bad(format!("{} values for {} rows of {n} variables", e.x.len(), e.rows())));
            }
            if e.outcome.is_survival() != survival {
                return Err(bad("mixed outcome kinds".into()));
            }
            if e.x.iter().any(|v| !v.is_finite()) {
                return Err(bad("missing or non-finite covariate".into()));
            }
            match &e.outcome {
                Outcome::Regression(y) => {
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(bad("missing or non-finite outcome".into()));
                    }
                }
                Outcome::Survival { times, events } => {
                    if times.len() != events.len() {
                        return Err(bad("times and events differ in length".into()));
                    }
                    if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                        return Err(bad("survival times must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn pooled(&self) -> Pooled {
        let mut p = Pooled {
            x: Vec::with_capacity(self.n_rows() * self.n_vars()),
            y: Vec::new(),
            times: Vec::new(),
            events: Vec::new(),
            env: Vec::with_capacity(self.n_rows()),
        };
        for (k, e) in self.environments.iter().enumerate() {
            p.x.extend_from_slice(&e.x);
            p.env.extend(std::iter::repeat_n(k, e.rows()));
            match &e.outcome {
                Outcome::Regression(y) => p.y.extend_from_slice(y),
                Outcome::Survival { times, events } => {
                    p.times.extend_from_slice(times);
                    p.events.extend_from_slice(events);
                }
            }
        }
        p
    }

    /// Writes `env_tag, <vars>, y` or `env_tag, <vars>, time, event`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let io = |e: csv::Error| DataError::Io(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["env_tag".to_string()];
        header.extend(self.var_names.iter().cloned());
        if self.is_survival() {
            header.extend(["time".to_string(), "event".to_string()]);
        } else {
            header.push("y".to_string());
        }
        out.write_record(&header).map_err(io)?;
        let n = self.n_vars();
        for e in &self.environments {
            for r in 0..e.rows() {
                let mut rec = vec![e.tag.clone()];
                rec.extend(e.x[r * n..(r + 1) * n].iter().map(|v| v.to_string()));
                match &e.outcome {
                    Outcome::Regression(y) => rec.push(y[r].to_string()),
                    Outcome::Survival { times, events } => {
                        rec.push(times[r].to_string());
                        rec.push(u8::from(events[r]).to_string());
                    }
                }
                out.write_record(&rec).map_err(io)?;
            }
        }
        out.flush().map_err(|e| DataError::Io(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(f)
    }
}
