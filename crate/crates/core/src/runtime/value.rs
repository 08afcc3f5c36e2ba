use serde::{Deserialize, Serialize};

use crate::dsl::DslType;

/// Row-major `rows x cols` matrix; rows are batch entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    /// Column vector (`rows x 1`).
    pub fn column(values: Vec<f64>) -> Self {
        let rows = values.len();
        Tensor::from_vec(rows, 1, values)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A batched runtime value shaped like a [`DslType`] with a leading batch
/// dimension. Every tensor inside one value has the same number of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Tensor(Tensor),
    List(Vec<Value>),
}

impl Value {
    /// Builds the program input for selected rows of a row-major matrix
    /// with `n_vars` columns: `ListOf(Tensor(1), n_vars)`.
    pub fn from_rows(x: &[f64], n_vars: usize, rows: &[usize]) -> Self {
        let cols = (0..n_vars)
            .map(|j| Value::Tensor(Tensor::column(rows.iter().map(|&r| x[r * n_vars + j]).collect())))
            .collect();
        Value::List(cols)
    }

    /// Same as [`Value::from_rows`] over every row.
    pub fn from_matrix(x: &[f64], n_vars: usize) -> Self {
        let rows: Vec<usize> = (0..x.len() / n_vars).collect();
        Value::from_rows(x, n_vars, &rows)
    }

    pub fn batch(&self) -> usize {
        match self {
            Value::Tensor(t) => t.rows,
            Value::List(items) => items.first().map_or(0, Value::batch),
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Value::Tensor(t) => Some(t),
            Value::List(_) => None,
        }
    }

    pub fn into_tensor(self) -> Option<Tensor> {
        match self {
            Value::Tensor(t) => Some(t),
            Value::List(_) => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(items) => Some(items),
            Value::Tensor(_) => None,
        }
    }

    /// Same shape as `self`, every entry set to `v`.
    pub fn filled_like(&self, v: f64) -> Value {
        match self {
            Value::Tensor(t) => Value::Tensor(Tensor::filled(t.rows, t.cols, v)),
            Value::List(items) => Value::List(items.iter().map(|i| i.filled_like(v)).collect()),
        }
    }

    /// True when the value has type `ty` (ignoring the batch dimension).
    pub fn conforms_to(&self, ty: &DslType) -> bool {
        let batch = self.batch();
        batch >= 1 && self.conforms(ty, batch)
    }

    fn conforms(&self, ty: &DslType, batch: usize) -> bool {
        match (self, ty) {
            (Value::Tensor(t), DslType::Tensor(d)) => t.cols == *d && t.rows == batch,
            (Value::List(items), DslType::ListOf(elem, n)) => {
                items.len() == *n && items.iter().all(|i| i.conforms(elem, batch))
            }
            _ => false,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Value::Tensor(t) => t.is_finite(),
            Value::List(items) => items.iter().all(Value::is_finite),
        }
    }

    pub fn sum(&self) -> f64 {
        self.leaves().iter().flat_map(|t| t.data.iter()).sum()
    }

    /// Tensors in depth-first order.
    pub fn leaves(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        match self {
            Value::Tensor(t) => out.push(t),
            Value::List(items) => items.iter().for_each(|i| i.collect_leaves(out)),
        }
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_leaves_mut(&mut out);
        out
    }

    fn collect_leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Value::Tensor(t) => out.push(t),
            Value::List(items) => items.iter_mut().for_each(|i| i.collect_leaves_mut(out)),
        }
    }

    /// Rows `[start, end)` of every tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Value {
        match self {
            Value::Tensor(t) => Value::Tensor(Tensor::from_vec(
                end - start,
                t.cols,
                t.data[start * t.cols..end * t.cols].to_vec(),
            )),
            Value::List(items) => Value::List(items.iter().map(|i| i.slice_rows(start, end)).collect()),
        }
    }

    /// Stacks values of identical shape along the batch dimension.
    pub fn concat_rows(parts: &[Value]) -> Value {
        match &parts[0] {
            Value::Tensor(first) => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = p.as_tensor().expect("matching shapes");
                    data.extend_from_slice(&t.data);
                    rows += t.rows;
                }
                Value::Tensor(Tensor::from_vec(rows, first.cols, data))
            }
            Value::List(items) => Value::List(
                (0..items.len())
                    .map(|k| {
                        let column: Vec<Value> = parts
                            .iter()
                            .map(|p| p.as_list().expect("matching shapes")[k].clone())
                            .collect();
                        Value::concat_rows(&column)
                    })
                    .collect(),
            ),
        }
    }
}
