//! Forward evaluation with a recorded trace and reverse-mode backward pass.
//!
//! The trace mirrors the program tree: each node keeps exactly what its
//! vector-Jacobian product needs. Dense layers differentiate as matrix
//! products; combinators only route gradients.

use super::params::{sigmoid, Dense, GateParams, MlpParams, ParamStore, PrimGrad, PrimGrads, PrimParams};
use super::value::{Tensor, Value};
use super::RuntimeError;
use crate::dsl::{InstanceId, Term};

/// Evaluation record consumed by [`backward`].
#[derive(Debug, Clone)]
pub enum Trace {
    /// `activations[0]` is the input, then one entry per hidden layer.
    Nn { id: InstanceId, activations: Vec<Tensor> },
    Pred { id: InstanceId, input: Vec<Tensor> },
    Comp { outer: Box<Trace>, inner: Box<Trace> },
    Cat { inner: Box<Trace>, widths: Vec<usize> },
    Filter { inner: Box<Trace> },
    Map { items: Vec<Trace> },
    Fold { steps: Vec<Trace> },
}

/// Gradients of a scalar loss with respect to parameters and program input.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub params: PrimGrads,
    pub input: Value,
}

/// Evaluates `term` on a batch.
pub fn forward(term: &Term, params: &ParamStore, input: &Value) -> Result<(Value, Trace), RuntimeError> {
    eval(term, params, input.clone())
}

/// Forward pass without keeping the trace.
pub fn predict(term: &Term, params: &ParamStore, input: &Value) -> Result<Value, RuntimeError> {
    forward(term, params, input).map(|(v, _)| v)
}

fn eval(term: &Term, params: &ParamStore, input: Value) -> Result<(Value, Trace), RuntimeError> {
    match term {
        Term::Prim { id, .. } => match params.prims.get(id) {
            Some(PrimParams::Nn(mlp)) => {
                let x = input.into_tensor().ok_or_else(|| shape(term, "tensor input"))?;
                if x.cols != mlp.layers[0].inputs {
                    return Err(shape(term, &format!("{} input columns", mlp.layers[0].inputs)));
                }
                let (out, activations) = mlp_forward(mlp, x);
                if !out.is_finite() {
                    return Err(RuntimeError::NonFiniteValue { node: term.to_string() });
                }
                Ok((Value::Tensor(out), Trace::Nn { id: *id, activations }))
            }
            Some(PrimParams::Pred(gate)) => {
                let items = match input {
                    Value::List(items) => items,
                    Value::Tensor(_) => return Err(shape(term, "list input")),
                };
                if items.len() != gate.theta.len() {
                    return Err(shape(term, &format!("list of {}", gate.theta.len())));
                }
                let xs: Vec<Tensor> = items
                    .into_iter()
                    .map(|v| v.into_tensor().filter(|t| t.cols == 1))
                    .collect::<Option<_>>()
                    .ok_or_else(|| shape(term, "scalar elements"))?;
                let out = gate_forward(gate, &xs);
                if !out.iter().all(Tensor::is_finite) {
                    return Err(RuntimeError::NonFiniteValue { node: term.to_string() });
                }
                Ok((
                    Value::List(out.into_iter().map(Value::Tensor).collect()),
                    Trace::Pred { id: *id, input: xs },
                ))
            }
            None => Err(RuntimeError::MissingParams(*id)),
        },
        Term::Comp(outer, inner) => {
            let (mid, t_inner) = eval(inner, params, input)?;
            let (out, t_outer) = eval(outer, params, mid)?;
            Ok((
                out,
                Trace::Comp {
                    outer: Box::new(t_outer),
                    inner: Box::new(t_inner),
                },
            ))
        }
        Term::Cat(inner) => {
            let (list, t) = eval(inner, params, input)?;
            let items = match list {
                Value::List(items) => items,
                Value::Tensor(_) => return Err(shape(term, "list to concatenate")),
            };
            let parts: Vec<Tensor> = items
                .into_iter()
                .map(Value::into_tensor)
                .collect::<Option<_>>()
                .ok_or_else(|| shape(term, "tensor elements"))?;
            let widths: Vec<usize> = parts.iter().map(|p| p.cols).collect();
            let out = concat_cols(&parts);
            Ok((Value::Tensor(out), Trace::Cat { inner: Box::new(t), widths }))
        }
        Term::Filter(p) => {
            let (out, t) = eval(p, params, input)?;
            Ok((out, Trace::Filter { inner: Box::new(t) }))
        }
        Term::Map(f) => {
            let items = match input {
                Value::List(items) => items,
                Value::Tensor(_) => return Err(shape(term, "list input")),
            };
            let mut outs = Vec::with_capacity(items.len());
            let mut traces = Vec::with_capacity(items.len());
            for item in items {
                let (o, t) = eval(f, params, item)?;
                outs.push(o);
                traces.push(t);
            }
            Ok((Value::List(outs), Trace::Map { items: traces }))
        }
        Term::Fold(f, init) => {
            let items = match input {
                Value::List(items) => items,
                Value::Tensor(_) => return Err(shape(term, "list input")),
            };
            let Some(first) = items.first() else {
                return Err(shape(term, "non-empty list"));
            };
            let mut acc = first.filled_like(*init);
            let mut steps = Vec::with_capacity(items.len());
            for item in items {
                let (next, t) = eval(f, params, Value::List(vec![acc, item]))?;
                acc = next;
                steps.push(t);
            }
            Ok((acc, Trace::Fold { steps }))
        }
    }
}

fn shape(term: &Term, expected: &str) -> RuntimeError {
    RuntimeError::ShapeMismatch {
        node: term.to_string(),
        expected: expected.to_string(),
    }
}

fn dense_forward(layer: &Dense, x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, layer.outputs);
    for r in 0..x.rows {
        let xr = x.row(r);
        for o in 0..layer.outputs {
            let w = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
            let mut s = layer.b[o];
            for (wi, xi) in w.iter().zip(xr) {
                s += wi * xi;
            }
            out.data[r * layer.outputs + o] = s;
        }
    }
    out
}

fn mlp_forward(mlp: &MlpParams, x: Tensor) -> (Tensor, Vec<Tensor>) {
    let last = mlp.layers.len() - 1;
    let mut activations = Vec::with_capacity(mlp.layers.len());
    let mut a = x;
    for (k, layer) in mlp.layers.iter().enumerate() {
        let mut z = dense_forward(layer, &a);
        if k < last {
            z.data.iter_mut().for_each(|v| *v = v.tanh());
        }
        activations.push(a);
        a = z;
    }
    if let Some(skip) = &mlp.skip {
        let lin = dense_forward(skip, &activations[0]);
        a.data.iter_mut().zip(&lin.data).for_each(|(v, l)| *v += l);
    }
    (a, activations)
}

fn gate_forward(gate: &GateParams, xs: &[Tensor]) -> Vec<Tensor> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            if gate.mask[i] {
                let s = sigmoid(gate.theta[i]);
                Tensor::from_vec(x.rows, 1, x.data.iter().map(|v| s * v).collect())
            } else {
                Tensor::zeros(x.rows, 1)
            }
        })
        .collect()
}

fn concat_cols(parts: &[Tensor]) -> Tensor {
    let rows = parts.first().map_or(0, |p| p.rows);
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(rows, cols, data)
}

/// Reverse pass from `grad_output` (the loss gradient w.r.t. the program
/// output). Masked gate coordinates receive exact zeros.
pub fn backward(trace: &Trace, params: &ParamStore, grad_output: &Value) -> Result<GradientSet, RuntimeError> {
    let mut grads = PrimGrads::zeros_like(params);
    let input = back(trace, params, grad_output.clone(), &mut grads)?;
    let finite = grads.slices().iter().all(|s| s.iter().all(|v| v.is_finite()));
    if !finite || !input.is_finite() {
        return Err(RuntimeError::NonFiniteValue {
            node: "gradient".to_string(),
        });
    }
    Ok(GradientSet { params: grads, input })
}

fn back(trace: &Trace, params: &ParamStore, g: Value, grads: &mut PrimGrads) -> Result<Value, RuntimeError> {
    match trace {
        Trace::Nn { id, activations } => {
            let Some(PrimParams::Nn(mlp)) = params.prims.get(id) else {
                return Err(RuntimeError::MissingParams(*id));
            };
            let Some(PrimGrad::Nn(nn_grads)) = grads.prims.get_mut(id) else {
                return Err(RuntimeError::MissingParams(*id));
            };
            let g = g.into_tensor().ok_or_else(|| RuntimeError::ShapeMismatch {
                node: "nn".to_string(),
                expected: "tensor gradient".to_string(),
            })?;
            Ok(Value::Tensor(mlp_backward(mlp, activations, g, nn_grads)))
        }
        Trace::Pred { id, input } => {
            let Some(PrimParams::Pred(gate)) = params.prims.get(id) else {
                return Err(RuntimeError::MissingParams(*id));
            };
            let Some(PrimGrad::Pred(dtheta)) = grads.prims.get_mut(id) else {
                return Err(RuntimeError::MissingParams(*id));
            };
            let gs = match g {
                Value::List(items) => items,
                Value::Tensor(_) => {
                    return Err(RuntimeError::ShapeMismatch {
                        node: "pred".to_string(),
                        expected: "list gradient".to_string(),
                    })
                }
            };
            let mut dx = Vec::with_capacity(input.len());
            for (i, (x, gi)) in input.iter().zip(gs).enumerate() {
                let gi = gi.into_tensor().expect("gate gradient elements are tensors");
                if gate.mask[i] {
                    let s = sigmoid(gate.theta[i]);
                    let ds = s * (1.0 - s);
                    let dot: f64 = gi.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
                    dtheta[i] += dot * ds;
                    dx.push(Value::Tensor(Tensor::from_vec(
                        x.rows,
                        1,
                        gi.data.iter().map(|v| v * s).collect(),
                    )));
                } else {
                    dx.push(Value::Tensor(Tensor::zeros(x.rows, 1)));
                }
            }
            Ok(Value::List(dx))
        }
        Trace::Comp { outer, inner } => {
            let mid = back(outer, params, g, grads)?;
            back(inner, params, mid, grads)
        }
        Trace::Cat { inner, widths } => {
            let g = g.into_tensor().expect("concatenation gradient is a tensor");
            let mut parts = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for &w in widths {
                let mut data = Vec::with_capacity(g.rows * w);
                for r in 0..g.rows {
                    data.extend_from_slice(&g.row(r)[offset..offset + w]);
                }
                parts.push(Value::Tensor(Tensor::from_vec(g.rows, w, data)));
                offset += w;
            }
            back(inner, params, Value::List(parts), grads)
        }
        Trace::Filter { inner } => back(inner, params, g, grads),
        Trace::Map { items } => {
            let gs = match g {
                Value::List(gs) => gs,
                Value::Tensor(_) => unreachable!("map output is a list"),
            };
            items
                .iter()
                .zip(gs)
                .map(|(t, gi)| back(t, params, gi, grads))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::List)
        }
        Trace::Fold { steps } => {
            let mut g_acc = g;
            let mut g_items = Vec::with_capacity(steps.len());
            for step in steps.iter().rev() {
                let pair = back(step, params, g_acc, grads)?;
                let Value::List(mut pair) = pair else {
                    unreachable!("fold step input is a pair")
                };
                let g_item = pair.pop().expect("pair");
                g_acc = pair.pop().expect("pair");
                g_items.push(g_item);
            }
            g_items.reverse();
            Ok(Value::List(g_items))
        }
    }
}

fn dense_backward(layer: &Dense, a: &Tensor, g: &Tensor, lg: &mut Dense) -> Tensor {
    let (ni, no) = (layer.inputs, layer.outputs);
    let mut g_in = Tensor::zeros(g.rows, ni);
    for r in 0..g.rows {
        let ar = a.row(r);
        for o in 0..no {
            let go = g.data[r * no + o];
            if go == 0.0 {
                continue;
            }
            lg.b[o] += go;
            let w = &layer.w[o * ni..(o + 1) * ni];
            let gw = &mut lg.w[o * ni..(o + 1) * ni];
            let gi = &mut g_in.data[r * ni..(r + 1) * ni];
            for j in 0..ni {
                gw[j] += go * ar[j];
                gi[j] += go * w[j];
            }
        }
    }
    g_in
}

fn mlp_backward(mlp: &MlpParams, activations: &[Tensor], grad_out: Tensor, grads: &mut MlpParams) -> Tensor {
    let last = mlp.layers.len() - 1;
    let skip_in = match (&mlp.skip, &mut grads.skip) {
        (Some(skip), Some(sg)) => Some(dense_backward(skip, &activations[0], &grad_out, sg)),
        _ => None,
    };
    let mut g = grad_out;
    for k in (0..mlp.layers.len()).rev() {
        let a = &activations[k];
        let mut g_in = dense_backward(&mlp.layers[k], a, &g, &mut grads.layers[k]);
        if k > 0 {
            // activations[k] = tanh(z_{k-1}) for hidden layers.
            debug_assert!(k <= last);
            for (gv, av) in g_in.data.iter_mut().zip(&a.data) {
                *gv *= 1.0 - av * av;
            }
        }
        g = g_in;
    }
    if let Some(s) = skip_in {
        g.data.iter_mut().zip(&s.data).for_each(|(v, d)| *v += d);
    }
    g
}
