use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{InstanceId, PrimKind, Term};

/// Hidden-layer widths of every `nn` instance. Hidden units use `tanh`, the
/// output unit is linear. With `skip`, a linear map of the input is added to
/// the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub skip: bool,
}

impl Default for MlpArch {
    fn default() -> Self {
        MlpArch {
            hidden: vec![16, 16],
            skip: false,
        }
    }
}

impl MlpArch {
    /// Two `tanh` layers of width 4 plus the linear skip path.
    pub fn compact() -> Self {
        MlpArch {
            hidden: vec![4, 4],
            skip: true,
        }
    }
}

/// Fully connected layer, `w` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            w: (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
            b: vec![0.0; outputs],
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            inputs: self.inputs,
            outputs: self.outputs,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<Dense>,
}

impl MlpParams {
    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            skip: self.skip.as_ref().map(Dense::zeros_like),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().chain(&self.skip).map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters of the causal gate `mask * sigmoid(theta) * x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub theta: Vec<f64>,
    #[serde(with = "mask_bits")]
    pub mask: Vec<bool>,
}

impl GateParams {
    pub fn new(n_vars: usize) -> Self {
        GateParams {
            theta: vec![0.0; n_vars],
            mask: vec![true; n_vars],
        }
    }

    /// `mask_i * sigmoid(theta_i)`.
    pub fn probabilities(&self) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.mask)
            .map(|(&t, &m)| if m { sigmoid(t) } else { 0.0 })
            .collect()
    }
}

mod mask_bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> Result<S::Ok, S::Error> {
        mask.iter().map(|&m| u8::from(m)).collect::<Vec<u8>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        bits.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask entry {other} not in {{0, 1}}"))),
            })
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimParams {
    Nn(MlpParams),
    Pred(GateParams),
}

/// Parameters of every primitive instance of one program, keyed by
/// instance id. Serializes to the JSON checkpoint format
/// `{"prims": {"<id>": {"kind": "nn" | "pred", ...}}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub n_vars: usize,
    pub prims: BTreeMap<InstanceId, PrimParams>,
}

impl ParamStore {
    /// Glorot-uniform `nn` weights with zero biases; gates start at
    /// `theta = 0` with every mask entry on.
    pub fn init<R: Rng + ?Sized>(term: &Term, n_vars: usize, arch: &MlpArch, rng: &mut R) -> Self {
        let mut prims = BTreeMap::new();
        for (kind, id) in term.prims() {
            let p = match kind {
                PrimKind::Nn => {
                    let mut dims = vec![n_vars];
                    dims.extend(&arch.hidden);
                    dims.push(1);
                    let layers = dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
                    let skip = arch.skip.then(|| Dense::zeros(n_vars, 1));
                    PrimParams::Nn(MlpParams { layers, skip })
                }
                PrimKind::Pred => PrimParams::Pred(GateParams::new(n_vars)),
            };
            prims.insert(id, p);
        }
        ParamStore { n_vars, prims }
    }

    pub fn gates(&self) -> impl Iterator<Item = &GateParams> {
        self.prims.values().filter_map(|p| match p {
            PrimParams::Pred(g) => Some(g),
            PrimParams::Nn(_) => None,
        })
    }

    pub fn gates_mut(&mut self) -> impl Iterator<Item = &mut GateParams> {
        self.prims.values_mut().filter_map(|p| match p {
            PrimParams::Pred(g) => Some(g),
            PrimParams::Nn(_) => None,
        })
    }

    pub fn has_gate(&self) -> bool {
        self.gates().next().is_some()
    }

    /// Variable mask shared by all gates (`true` when on in every gate).
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.n_vars];
        for g in self.gates() {
            for (m, &gm) in mask.iter_mut().zip(&g.mask) {
                *m &= gm;
            }
        }
        mask
    }

    /// Sets variable `i` on or off in every gate.
    pub fn set_mask(&mut self, i: usize, on: bool) {
        for g in self.gates_mut() {
            g.mask[i] = on;
        }
    }

    /// Per-variable gate probability `sigmoid(theta_i)` averaged over gates,
    /// ignoring the mask.
    pub fn gate_probabilities(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_vars];
        let mut count = 0usize;
        for g in self.gates() {
            count += 1;
            for (a, &t) in acc.iter_mut().zip(&g.theta) {
                *a += sigmoid(t);
            }
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
        acc
    }

    /// Causal probabilities `mask_i * sigmoid(theta_i)` (averaged over gates).
    pub fn causal_probabilities(&self) -> Vec<f64> {
        let mask = self.mask();
        self.gate_probabilities()
            .into_iter()
            .zip(mask)
            .map(|(p, m)| if m { p } else { 0.0 })
            .collect()
    }

    /// Number of trainable scalars (network weights, biases and gate logits).
    pub fn trainable_len(&self) -> usize {
        self.prims
            .values()
            .map(|p| match p {
                PrimParams::Nn(m) => m.len(),
                PrimParams::Pred(g) => g.theta.len(),
            })
            .sum()
    }

    /// Trainable slices in a fixed order shared with [`PrimGrads::slices`].
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for p in self.prims.values_mut() {
            match p {
                PrimParams::Nn(m) => {
                    for l in m.layers.iter_mut().chain(&mut m.skip) {
                        out.push(&mut l.w);
                        out.push(&mut l.b);
                    }
                }
                PrimParams::Pred(g) => out.push(&mut g.theta),
            }
        }
        out
    }

    /// Read-only view of [`ParamStore::trainable_slices_mut`].
    pub fn trainable_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for p in self.prims.values() {
            match p {
                PrimParams::Nn(m) => {
                    for l in m.layers.iter().chain(&m.skip) {
                        out.push(&l.w);
                        out.push(&l.b);
                    }
                }
                PrimParams::Pred(g) => out.push(&g.theta),
            }
        }
        out
    }

    /// Moves every trainable value a fraction `weight` of the way to `other`,
    /// which must share this store's layout.
    pub fn blend_toward(&mut self, other: &ParamStore, weight: f64) {
        for (mine, theirs) in self.trainable_slices_mut().into_iter().zip(other.trainable_slices()) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += weight * (b - *a);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameters serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Gradient of one primitive instance, same layout as its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimGrad {
    Nn(MlpParams),
    Pred(Vec<f64>),
}

/// Parameter gradients keyed by instance id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrimGrads {
    pub prims: BTreeMap<InstanceId, PrimGrad>,
}

impl PrimGrads {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let prims = params
            .prims
            .iter()
            .map(|(&id, p)| {
                let g = match p {
                    PrimParams::Nn(m) => PrimGrad::Nn(m.zeros_like()),
                    PrimParams::Pred(g) => PrimGrad::Pred(vec![0.0; g.theta.len()]),
                };
                (id, g)
            })
            .collect();
        PrimGrads { prims }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in self.prims.values() {
            match g {
                PrimGrad::Nn(m) => {
                    for l in m.layers.iter().chain(&m.skip) {
                        out.push(&l.w);
                        out.push(&l.b);
                    }
                }
                PrimGrad::Pred(t) => out.push(t),
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().into_iter().flatten().copied().collect()
    }

    /// Gate-logit gradient of instance `id`.
    pub fn gate(&self, id: InstanceId) -> Option<&[f64]> {
        match self.prims.get(&id)? {
            PrimGrad::Pred(t) => Some(t),
            PrimGrad::Nn(_) => None,
        }
    }
}
