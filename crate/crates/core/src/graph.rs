//! Reverse-mode differentiation over dense tensors.
//!
//! A `Graph` is a Wengert list: builder methods compute values eagerly and
//! append op records; `backward` walks the list in reverse, visiting each
//! node exactly once. Every forward output is checked finite, and gradient
//! failures report the offending op by name.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive pre-softmax mask value for positions that must receive no
/// attention mass.
pub const MASK_NEG: f64 = -1e9;
/// Jitter added to a kernel diagonal when its Cholesky pivots collapse.
pub const KERNEL_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MeanPool(Var, usize),
    MaskedMeanRows {
        x: Var,
        keep: Vec<bool>,
        count: usize,
    },
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    EmbedLookup {
        table: Var,
        indices: Vec<usize>,
    },
    RowL2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    Sum(Var),
    SumVars(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
    },
    InfoNce {
        sim: Var,
        weights: Option<Tensor>,
        extra: Option<Var>,
        extra_mask: Vec<bool>,
        log_denoms: Vec<f64>,
    },
    DppLogLik {
        rel: Var,
        grad: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::AddConst(..) => "add_const",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanPool(..) => "mean_pool",
            Op::MaskedMeanRows { .. } => "masked_mean_rows",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::EmbedLookup { .. } => "embedding_lookup",
            Op::RowL2Normalize { .. } => "row_l2_normalize",
            Op::RowDot(..) => "row_dot",
            Op::Sum(..) => "sum",
            Op::SumVars(..) => "sum_vars",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::InfoNce { .. } => "info_nce",
            Op::DppLogLik { .. } => "dpp_loglik",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Per-parameter gradients produced by `Graph::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when the parameter never reached the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads[v.0].clone() {
            Some(t) => t,
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::ShapeMismatch {
        op: op.to_string(),
        detail,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], contrib: &[f64]) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    for (dst, src) in t.data_mut().iter_mut().zip(contrib) {
        *dst += src;
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("forward op {}", op.name()),
            });
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    /// Row-broadcast bias: `a[m,n] + b[n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || tb.shape().len() != 1 || tb.len() != ta.cols() {
            return Err(shape_err(
                "add_bias",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push(value, self.needs(a) || self.needs(b), Op::AddBias(a, b))
    }

    /// Add a constant tensor (no gradient flows into it). Used for
    /// additive attention masks.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(shape_err(
                "add_const",
                format!("{:?} vs {:?}", ta.shape(), c.shape()),
            ));
        }
        let data: Vec<f64> = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, self.needs(a), Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, self.needs(a), Op::Scale(a, c))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, self.needs(a) || self.needs(b), Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let value = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        self.push(value, self.needs(a) || self.needs(b), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(shape_err("transpose", format!("{:?}", ta.shape())));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let value = Tensor::matrix(n, m, transpose_raw(ta.data(), m, n))?;
        self.push(value, self.needs(a), Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, self.needs(a), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x.ln()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, self.needs(a), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x.exp()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, self.needs(a), Op::Exp(a))
    }

    /// Softmax along `axis` (0 or 1 for matrices; 0 for vectors).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let value = match (ta.shape().len(), axis) {
            (1, 0) => {
                let mut row = ta.data().to_vec();
                softmax_lane(&mut row);
                Tensor::vector(row)
            }
            (2, 1) => {
                let (m, n) = (ta.rows(), ta.cols());
                let mut data = ta.data().to_vec();
                for i in 0..m {
                    softmax_lane(&mut data[i * n..(i + 1) * n]);
                }
                Tensor::matrix(m, n, data)?
            }
            (2, 0) => {
                let (m, n) = (ta.rows(), ta.cols());
                let t = transpose_raw(ta.data(), m, n);
                let mut t = t;
                for j in 0..n {
                    softmax_lane(&mut t[j * m..(j + 1) * m]);
                }
                Tensor::matrix(m, n, transpose_raw(&t, n, m))?
            }
            _ => {
                return Err(shape_err(
                    "softmax",
                    format!("axis {axis} on shape {:?}", ta.shape()),
                ))
            }
        };
        self.push(value, self.needs(a), Op::Softmax(a, axis))
    }

    /// Per-row layer normalization with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = if tx.is_matrix() {
            (tx.rows(), tx.cols())
        } else {
            (1, tx.len())
        };
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tg.len() != n || tb.len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("width {n}, gamma {}, beta {}", tg.len(), tb.len()),
            ));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let xhat = Tensor::new(tx.shape().to_vec(), xhat)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean over `axis` of a matrix: axis 0 pools rows into one vector,
    /// axis 1 pools each row to one value.
    pub fn mean_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() || axis > 1 {
            return Err(shape_err(
                "mean_pool",
                format!("axis {axis} on shape {:?}", ta.shape()),
            ));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let value = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += ta.at(i, j);
                }
            }
            out.iter_mut().for_each(|v| *v /= m as f64);
            Tensor::vector(out)
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = ta.row(i).iter().sum::<f64>() / n as f64;
            }
            Tensor::vector(out)
        };
        self.push(value, self.needs(a), Op::MeanPool(a, axis))
    }

    /// Mean over the kept rows of a matrix. Errors when nothing is kept.
    pub fn masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() || keep.len() != tx.rows() {
            return Err(shape_err(
                "masked_mean_rows",
                format!("{} flags for shape {:?}", keep.len(), tx.shape()),
            ));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::EmptyInput {
                what: "pooling axis (no rows kept)".to_string(),
            });
        }
        let n = tx.cols();
        let mut out = vec![0.0; n];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                for j in 0..n {
                    out[j] += tx.at(i, j);
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let needs = self.needs(x);
        self.push(
            Tensor::vector(out),
            needs,
            Op::MaskedMeanRows {
                x,
                keep: keep.to_vec(),
                count,
            },
        )
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 widens rows) or
    /// vectors along axis 0.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput {
                what: "concat inputs".to_string(),
            });
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let value = if first.len() == 1 {
            if axis != 0 {
                return Err(shape_err("concat", format!("axis {axis} on vectors")));
            }
            let mut data = Vec::new();
            for &v in inputs {
                let t = self.value(v);
                if t.shape().len() != 1 {
                    return Err(shape_err("concat", "mixed ranks".to_string()));
                }
                data.extend_from_slice(t.data());
            }
            Tensor::vector(data)
        } else if axis == 0 {
            let n = first[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for &v in inputs {
                let t = self.value(v);
                if !t.is_matrix() || t.cols() != n {
                    return Err(shape_err("concat", "column widths differ".to_string()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, n, data)?
        } else if axis == 1 {
            let m = first[0];
            let widths: Vec<usize> = inputs
                .iter()
                .map(|&v| {
                    let t = self.value(v);
                    t.cols()
                })
                .collect();
            for &v in inputs {
                let t = self.value(v);
                if !t.is_matrix() || t.rows() != m {
                    return Err(shape_err("concat", "row counts differ".to_string()));
                }
            }
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; m * total];
            let mut off = 0;
            for (idx, &v) in inputs.iter().enumerate() {
                let t = self.value(v);
                let w = widths[idx];
                for i in 0..m {
                    data[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
                }
                off += w;
            }
            Tensor::matrix(m, total, data)?
        } else {
            return Err(shape_err("concat", format!("axis {axis}")));
        };
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, needs, Op::Concat(inputs.to_vec(), axis))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() || start >= end || end > ta.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("[{start}, {end}) of {:?}", ta.shape()),
            ));
        }
        let n = ta.cols();
        let data = ta.data()[start * n..end * n].to_vec();
        let value = Tensor::matrix(end - start, n, data)?;
        self.push(value, self.needs(a), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() || start >= end || end > ta.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {end}) of {:?}", ta.shape()),
            ));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let w = end - start;
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&ta.data()[i * n + start..i * n + end]);
        }
        let value = Tensor::matrix(m, w, data)?;
        self.push(value, self.needs(a), Op::SliceCols(a, start))
    }

    /// Gather rows of an embedding table; gradients scatter-add back.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if !tt.is_matrix() {
            return Err(shape_err("embedding_lookup", format!("{:?}", tt.shape())));
        }
        if indices.is_empty() {
            return Err(Error::EmptyInput {
                what: "embedding indices".to_string(),
            });
        }
        let (v, h) = (tt.rows(), tt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument {
                detail: format!("embedding index {bad} out of range (table has {v} rows)"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::matrix(indices.len(), h, data)?;
        let needs = self.needs(table);
        self.push(
            value,
            needs,
            Op::EmbedLookup {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Normalize each row to unit L2 norm. Zero rows are an error.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(shape_err("row_l2_normalize", format!("{:?}", tx.shape())));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut norms = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    op: "row_l2_normalize".to_string(),
                });
            }
            norms[i] = norm;
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let needs = self.needs(x);
        self.push(value, needs, Op::RowL2Normalize { x, norms })
    }

    /// Row-wise dot product of two equal-shape matrices -> vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || ta.shape() != tb.shape() {
            return Err(shape_err(
                "row_dot",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let m = ta.rows();
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum();
        }
        let value = Tensor::vector(out);
        self.push(value, self.needs(a) || self.needs(b), Op::RowDot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), self.needs(a), Op::Sum(a))
    }

    /// Elementwise sum of same-shape tensors (used to combine per-sample
    /// losses deterministically).
    pub fn sum_vars(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput {
                what: "sum_vars inputs".to_string(),
            });
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(inputs[0]).len()];
        for &v in inputs {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("sum_vars", "shapes differ".to_string()));
            }
            for (dst, src) in data.iter_mut().zip(t.data()) {
                *dst += src;
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data)?;
        self.push(value, needs, Op::SumVars(inputs.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.push(value, self.needs(a), Op::Reshape(a))
    }

    /// softmax(q kᵀ / √d + mask) v. Returns (output, attention weights).
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if !tq.is_matrix() || !tk.is_matrix() || !tv.is_matrix() {
            return Err(shape_err(
                "scaled_dot_attention",
                "inputs must be matrices".into(),
            ));
        }
        if tq.cols() != tk.cols() || tk.rows() != tv.rows() {
            return Err(shape_err(
                "scaled_dot_attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if let Some(m) = mask {
            if m.shape() != [tq.rows(), tk.rows()] {
                return Err(shape_err(
                    "scaled_dot_attention",
                    format!(
                        "mask {:?} for scores [{}, {}]",
                        m.shape(),
                        tq.rows(),
                        tk.rows()
                    ),
                ));
            }
        }
        let d = self.value(q).cols();
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let masked = match mask {
            Some(m) => self.add_const(scaled, m)?,
            None => scaled,
        };
        let attn = self.softmax(masked, 1)?;
        let out = self.matmul(attn, v)?;
        Ok((out, attn))
    }

    /// Teacher-forcing token loss: sum over unmasked positions of the
    /// negative log-likelihood of the target id.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        if !tl.is_matrix() || targets.len() != tl.rows() || mask.len() != tl.rows() {
            return Err(shape_err(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} mask flags",
                    tl.shape(),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let (t, v) = (tl.rows(), tl.cols());
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::InvalidArgument {
                detail: format!("target id {bad} outside vocab of {v}"),
            });
        }
        if mask.iter().all(|&m| !m) {
            return Err(Error::EmptyInput {
                what: "cross_entropy (all positions masked)".to_string(),
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] /= denom;
            }
            if mask[i] {
                loss += denom.ln() + max - row[targets[i]];
            }
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs: Tensor::matrix(t, v, probs)?,
            },
        )
    }

    /// Batch-summed InfoNCE over a temperature-scaled similarity matrix.
    ///
    /// Per sample i the denominator holds the positive `sim[i,i]`, the
    /// weighted in-batch negatives `w[i,j]·exp(sim[i,j])` for j != i, and,
    /// when `extra` is provided and flagged for i, one extra negative
    /// `exp(extra[i])`. A batch of one with no extras contributes zero.
    pub fn info_nce(
        &mut self,
        sim: Var,
        weights: Option<&Tensor>,
        extra: Option<(Var, &[bool])>,
    ) -> Result<Var> {
        let ts = self.value(sim);
        if !ts.is_matrix() || ts.rows() != ts.cols() {
            return Err(shape_err("info_nce", format!("{:?}", ts.shape())));
        }
        let b = ts.rows();
        if let Some(w) = weights {
            if w.shape() != [b, b] {
                return Err(shape_err(
                    "info_nce",
                    format!("weights {:?} for batch {b}", w.shape()),
                ));
            }
            for (idx, &wv) in w.data().iter().enumerate() {
                let (i, j) = (idx / b, idx % b);
                if i != j && wv <= 0.0 {
                    return Err(Error::InvalidArgument {
                        detail: format!("non-positive negative weight w[{i},{j}] = {wv}"),
                    });
                }
            }
        }
        let (extra_var, extra_mask): (Option<Var>, Vec<bool>) = match extra {
            Some((e, m)) => {
                let te = self.value(e);
                if te.shape() != [b] || m.len() != b {
                    return Err(shape_err(
                        "info_nce",
                        format!("extra {:?} / {} flags for batch {b}", te.shape(), m.len()),
                    ));
                }
                (Some(e), m.to_vec())
            }
            None => (None, vec![false; b]),
        };

        let mut loss = 0.0;
        let mut log_denoms = vec![0.0; b];
        for i in 0..b {
            let s_row = self.value(sim).row(i).to_vec();
            let e_i = extra_var
                .filter(|_| extra_mask[i])
                .map(|e| self.value(e).data()[i]);
            let mut m = s_row[i];
            for (j, &s) in s_row.iter().enumerate() {
                if j != i {
                    m = m.max(s);
                }
            }
            if let Some(e) = e_i {
                m = m.max(e);
            }
            let mut denom = (s_row[i] - m).exp();
            for (j, &s) in s_row.iter().enumerate() {
                if j == i {
                    continue;
                }
                let w = weights.map_or(1.0, |wt| wt.at(i, j));
                denom += w * (s - m).exp();
            }
            if let Some(e) = e_i {
                denom += (e - m).exp();
            }
            let log_denom = m + denom.ln();
            log_denoms[i] = log_denom;
            loss += log_denom - s_row[i];
        }
        let needs = self.needs(sim) || extra_var.map_or(false, |e| self.needs(e));
        self.push(
            Tensor::scalar(loss),
            needs,
            Op::InfoNce {
                sim,
                weights: weights.cloned(),
                extra: extra_var,
                extra_mask,
                log_denoms,
            },
        )
    }

    /// DPP log-likelihood of a ground-truth subset:
    /// `log det(L_A) - log det(L + I)` with `L = Diag(r) S Diag(r)`.
    /// `sim` is the constant candidate similarity matrix. Rank-deficient
    /// subsets get a diagonal jitter before the log-det.
    pub fn dpp_loglik(&mut self, rel: Var, sim: &Tensor, subset: &[usize]) -> Result<Var> {
        let tr = self.value(rel);
        if tr.shape().len() != 1 {
            return Err(shape_err(
                "dpp_loglik",
                format!("relevance {:?}", tr.shape()),
            ));
        }
        let n = tr.len();
        if sim.shape() != [n, n] {
            return Err(shape_err(
                "dpp_loglik",
                format!("similarity {:?} for {n} items", sim.shape()),
            ));
        }
        if subset.is_empty() {
            return Err(Error::EmptyInput {
                what: "dpp subset".to_string(),
            });
        }
        let mut seen = vec![false; n];
        for &i in subset {
            if i >= n {
                return Err(Error::InvalidArgument {
                    detail: format!("subset index {i} out of range {n}"),
                });
            }
            if seen[i] {
                return Err(Error::InvalidArgument {
                    detail: format!("duplicate subset index {i}"),
                });
            }
            seen[i] = true;
        }

        let r = tr.data();
        let mut l_full = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                l_full[i * n + j] = r[i] * sim.at(i, j) * r[j];
            }
        }

        // log det of the (possibly jittered) subset kernel.
        let m = subset.len();
        let mut l_sub = linalg::principal_submatrix(&l_full, n, subset);
        let chol_sub = match linalg::cholesky(&l_sub, m, linalg::CHOLESKY_TOL) {
            Some(c) => c,
            None => {
                for i in 0..m {
                    l_sub[i * m + i] += KERNEL_JITTER;
                }
                linalg::cholesky(&l_sub, m, linalg::CHOLESKY_TOL).ok_or(Error::NonFinite {
                    context: "dpp subset kernel not positive definite after jitter".to_string(),
                })?
            }
        };
        let logdet_sub = linalg::logdet_from_cholesky(&chol_sub, m);
        let inv_sub = linalg::inverse_from_cholesky(&chol_sub, m);

        // log det(L + I); always positive definite.
        let mut l_plus_i = l_full.clone();
        for i in 0..n {
            l_plus_i[i * n + i] += 1.0;
        }
        let chol_full =
            linalg::cholesky(&l_plus_i, n, linalg::CHOLESKY_TOL).ok_or(Error::NonFinite {
                context: "dpp normalizer kernel not positive definite".to_string(),
            })?;
        let logdet_full = linalg::logdet_from_cholesky(&chol_full, n);
        let inv_full = linalg::inverse_from_cholesky(&chol_full, n);

        // d logdet(M)/dr_k = 2 [(M^{-1} ∘ S) r]_k over the relevant index set.
        let mut grad = vec![0.0; n];
        for (p, &k) in subset.iter().enumerate() {
            let mut acc = 0.0;
            for (q, &j) in subset.iter().enumerate() {
                acc += inv_sub[p * m + q] * sim.at(k, j) * r[j];
            }
            grad[k] += 2.0 * acc;
        }
        for k in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += inv_full[k * n + j] * sim.at(k, j) * r[j];
            }
            grad[k] -= 2.0 * acc;
        }

        let needs = self.needs(rel);
        self.push(
            Tensor::scalar(logdet_sub - logdet_full),
            needs,
            Op::DppLogLik { rel, grad },
        )
    }

    /// Weighted binary cross-entropy on raw logits (summed).
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 1 || labels.len() != tl.len() || weights.len() != tl.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!(
                    "logits {:?}, {} labels, {} weights",
                    tl.shape(),
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let mut loss = 0.0;
        for ((&z, &y), &w) in tl.data().iter().zip(labels).zip(weights) {
            loss += w * (z.max(0.0) - y * z + (-z.abs()).exp().ln_1p());
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            needs,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients;
    /// parameters disconnected from the loss have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::InvalidArgument {
                detail: format!("backward needs a scalar loss, got shape {:?}", lt.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of op {}", self.nodes[id].op.name()),
                });
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b].iter() {
                    if self.needs(*v) {
                        add_into(&mut grads[v.0], self.value(*v).shape(), g.data());
                    }
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], self.value(*a).shape(), g.data());
                }
                if self.needs(*b) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut col = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            col[j] += g.at(i, j);
                        }
                    }
                    add_into(&mut grads[b.0], self.value(*b).shape(), &col);
                }
            }
            Op::AddConst(a) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], self.value(*a).shape(), g.data());
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                    add_into(&mut grads[a.0], self.value(*a).shape(), &contrib);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    add_into(&mut grads[a.0], self.value(*a).shape(), &contrib);
                }
                if self.needs(*b) {
                    let contrib: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    add_into(&mut grads[b.0], self.value(*b).shape(), &contrib);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    // dA = g @ B^T
                    let bt = transpose_raw(tb.data(), k, n);
                    let contrib = matmul_raw(g.data(), &bt, m, n, k);
                    add_into(&mut grads[a.0], ta.shape(), &contrib);
                }
                if self.needs(*b) {
                    // dB = A^T @ g
                    let at = transpose_raw(ta.data(), m, k);
                    let contrib = matmul_raw(&at, g.data(), k, m, n);
                    add_into(&mut grads[b.0], tb.shape(), &contrib);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let contrib = transpose_raw(g.data(), g.rows(), g.cols());
                    add_into(&mut grads[a.0], self.value(*a).shape(), &contrib);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], self.value(*a).shape(), &contrib);
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &x)| gv / x)
                        .collect();
                    add_into(&mut grads[a.0], self.value(*a).shape(), &contrib);
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, &y)| gv * y)
                        .collect();
                    add_into(&mut grads[a.0], self.value(*a).shape(), &contrib);
                }
            }
            Op::Softmax(a, axis) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let contrib = softmax_backward(y, g, *axis);
                    add_into(&mut grads[a.0], self.value(*a).shape(), &contrib);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let m = xhat.len() / n;
                let tg = self.value(*gamma);
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g.data()[i * n + j] * xhat.data()[i * n + j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &[n], &dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j];
                        }
                    }
                    add_into(&mut grads[beta.0], &[n], &db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let dxh = g.data()[i * n + j] * tg.data()[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat.data()[i * n + j];
                        }
                        for j in 0..n {
                            let dxh = g.data()[i * n + j] * tg.data()[j];
                            dx[i * n + j] = inv_std[i]
                                * (dxh
                                    - sum_dxhat / n as f64
                                    - xhat.data()[i * n + j] * sum_dxhat_xhat / n as f64);
                        }
                    }
                    add_into(&mut grads[x.0], self.value(*x).shape(), &dx);
                }
            }
            Op::MeanPool(a, axis) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut contrib = vec![0.0; m * n];
                    if *axis == 0 {
                        for i in 0..m {
                            for j in 0..n {
                                contrib[i * n + j] = g.data()[j] / m as f64;
                            }
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..n {
                                contrib[i * n + j] = g.data()[i] / n as f64;
                            }
                        }
                    }
                    add_into(&mut grads[a.0], ta.shape(), &contrib);
                }
            }
            Op::MaskedMeanRows { x, keep, count } => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        if keep[i] {
                            for j in 0..n {
                                contrib[i * n + j] = g.data()[j] / *count as f64;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], tx.shape(), &contrib);
                }
            }
            Op::Concat(inputs, axis) => {
                if *axis == 0 || self.value(inputs[0]).shape().len() == 1 {
                    let mut off = 0;
                    for &v in inputs {
                        let len = self.value(v).len();
                        if self.needs(v) {
                            add_into(
                                &mut grads[v.0],
                                self.value(v).shape(),
                                &g.data()[off..off + len],
                            );
                        }
                        off += len;
                    }
                } else {
                    let m = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for &v in inputs {
                        let w = self.value(v).cols();
                        if self.needs(v) {
                            let mut contrib = vec![0.0; m * w];
                            for i in 0..m {
                                contrib[i * w..(i + 1) * w].copy_from_slice(
                                    &g.data()[i * total + off..i * total + off + w],
                                );
                            }
                            add_into(&mut grads[v.0], self.value(v).shape(), &contrib);
                        }
                        off += w;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut contrib = vec![0.0; m * n];
                    contrib[start * n..start * n + g.len()].copy_from_slice(g.data());
                    add_into(&mut grads[a.0], ta.shape(), &contrib);
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let w = g.cols();
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        contrib[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                    }
                    add_into(&mut grads[a.0], ta.shape(), &contrib);
                }
            }
            Op::EmbedLookup { table, indices } => {
                if self.needs(*table) {
                    let tt = self.value(*table);
                    let (v, h) = (tt.rows(), tt.cols());
                    let mut contrib = vec![0.0; v * h];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..h {
                            contrib[idx * h + j] += g.at(row, j);
                        }
                    }
                    add_into(&mut grads[table.0], tt.shape(), &contrib);
                }
            }
            Op::RowL2Normalize { x, norms } => {
                if self.needs(*x) {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            contrib[i * n + j] = (g.at(i, j) - y.at(i, j) * dot) / norms[i];
                        }
                    }
                    add_into(&mut grads[x.0], self.value(*x).shape(), &contrib);
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (ta.rows(), ta.cols());
                if self.needs(*a) {
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            contrib[i * n + j] = g.data()[i] * tb.at(i, j);
                        }
                    }
                    add_into(&mut grads[a.0], ta.shape(), &contrib);
                }
                if self.needs(*b) {
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            contrib[i * n + j] = g.data()[i] * ta.at(i, j);
                        }
                    }
                    add_into(&mut grads[b.0], tb.shape(), &contrib);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let contrib = vec![g.item(); ta.len()];
                    add_into(&mut grads[a.0], ta.shape(), &contrib);
                }
            }
            Op::SumVars(inputs) => {
                for &v in inputs {
                    if self.needs(v) {
                        add_into(&mut grads[v.0], self.value(v).shape(), g.data());
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], self.value(*a).shape(), g.data());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                if self.needs(*logits) {
                    let gv = g.item();
                    let (t, v) = (probs.rows(), probs.cols());
                    let mut contrib = vec![0.0; t * v];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..v {
                            let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                            contrib[i * v + j] = gv * (probs.at(i, j) - indicator);
                        }
                    }
                    add_into(&mut grads[logits.0], self.value(*logits).shape(), &contrib);
                }
            }
            Op::InfoNce {
                sim,
                weights,
                extra,
                extra_mask,
                log_denoms,
            } => {
                let gv = g.item();
                let ts = self.value(*sim);
                let b = ts.rows();
                if self.needs(*sim) {
                    let mut contrib = vec![0.0; b * b];
                    for i in 0..b {
                        for j in 0..b {
                            let s = ts.at(i, j);
                            let ratio = (s - log_denoms[i]).exp();
                            contrib[i * b + j] = if i == j {
                                gv * (ratio - 1.0)
                            } else {
                                let w = weights.as_ref().map_or(1.0, |wt| wt.at(i, j));
                                gv * w * ratio
                            };
                        }
                    }
                    add_into(&mut grads[sim.0], ts.shape(), &contrib);
                }
                if let Some(e) = extra {
                    if self.needs(*e) {
                        let te = self.value(*e);
                        let mut contrib = vec![0.0; b];
                        for i in 0..b {
                            if extra_mask[i] {
                                contrib[i] = gv * (te.data()[i] - log_denoms[i]).exp();
                            }
                        }
                        add_into(&mut grads[e.0], te.shape(), &contrib);
                    }
                }
            }
            Op::DppLogLik { rel, grad } => {
                if self.needs(*rel) {
                    let gv = g.item();
                    let contrib: Vec<f64> = grad.iter().map(|d| gv * d).collect();
                    add_into(&mut grads[rel.0], self.value(*rel).shape(), &contrib);
                }
            }
            Op::BceWithLogits {
                logits,
                labels,
                weights,
            } => {
                if self.needs(*logits) {
                    let gv = g.item();
                    let tl = self.value(*logits);
                    let contrib: Vec<f64> = tl
                        .data()
                        .iter()
                        .zip(labels.iter().zip(weights))
                        .map(|(&z, (&y, &w))| {
                            let sig = 1.0 / (1.0 + (-z).exp());
                            gv * w * (sig - y)
                        })
                        .collect();
                    add_into(&mut grads[logits.0], tl.shape(), &contrib);
                }
            }
        }
        Ok(())
    }
}

fn softmax_lane(lane: &mut [f64]) {
    let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in lane.iter_mut() {
        *v /= denom;
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    match (y.shape().len(), axis) {
        (1, 0) => {
            let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            for j in 0..y.len() {
                out[j] = y.data()[j] * (g.data()[j] - dot);
            }
        }
        (2, 1) => {
            let (m, n) = (y.rows(), y.cols());
            for i in 0..m {
                let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[i * n + j] = y.at(i, j) * (g.at(i, j) - dot);
                }
            }
        }
        (2, 0) => {
            let (m, n) = (y.rows(), y.cols());
            for j in 0..n {
                let mut dot = 0.0;
                for i in 0..m {
                    dot += g.at(i, j) * y.at(i, j);
                }
                for i in 0..m {
                    out[i * n + j] = y.at(i, j) * (g.at(i, j) - dot);
                }
            }
        }
        _ => unreachable!("softmax forward validated the axis"),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g
            .constant(t(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let x = g
            .constant(t(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let unused = g.param(Tensor::vector(vec![3.0])).unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[1]).data(), &[0.0]);
    }

    #[test]
    fn fully_masked_attention_position_has_no_mass() {
        let mut g = Graph::new();
        let q = g.constant(t(vec![1, 2], vec![0.3, -0.1])).unwrap();
        let k = g
            .constant(t(vec![3, 2], vec![0.5, 0.2, -0.4, 0.9, 0.1, 0.1]))
            .unwrap();
        let v = g
            .constant(t(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]))
            .unwrap();
        let mask = t(vec![1, 3], vec![0.0, MASK_NEG, 0.0]);
        let (_, attn) = g.scaled_dot_attention(q, k, v, Some(&mask)).unwrap();
        assert!(g.value(attn).at(0, 1) < 1e-12);
        let row_sum: f64 = g.value(attn).row(0).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_ops_are_pure() {
        let mut g = Graph::new();
        let x = g
            .constant(t(vec![2, 2], vec![0.1, -0.7, 2.0, 0.4]))
            .unwrap();
        let a = g.softmax(x, 1).unwrap();
        let b = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn info_nce_batch_one_is_zero() {
        let mut g = Graph::new();
        let sim = g.param(t(vec![1, 1], vec![3.7])).unwrap();
        let loss = g.info_nce(sim, None, None).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn info_nce_equal_similarities_closed_form() {
        // Batch 2, all pairwise similarities equal: loss = 2 ln 2.
        let mut g = Graph::new();
        let sim = g.param(t(vec![2, 2], vec![0.4, 0.4, 0.4, 0.4])).unwrap();
        let loss = g.info_nce(sim, None, None).unwrap();
        assert!((g.value(loss).item() - 2.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn info_nce_rejects_non_positive_weights() {
        let mut g = Graph::new();
        let sim = g.param(t(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        let w = t(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        assert!(g.info_nce(sim, Some(&w), None).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let vocab = 100;
        let len = 5;
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(vec![len, vocab])).unwrap();
        let targets = vec![7usize; len];
        let mask = vec![true; len];
        let loss = g.cross_entropy(logits, &targets, &mask).unwrap();
        let want = len as f64 * (vocab as f64).ln();
        assert!((g.value(loss).item() - want).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_logits_near_zero() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 2 * 4];
        data[1] = 50.0;
        data[4 + 2] = 50.0;
        let logits = g.param(t(vec![2, 4], data)).unwrap();
        let loss = g.cross_entropy(logits, &[1, 2], &[true, true]).unwrap();
        assert!(g.value(loss).item() < 1e-6);
    }

    #[test]
    fn nonfinite_forward_is_reported_with_op_name() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0])).unwrap();
        let err = g.log(x).unwrap_err();
        match err {
            Error::NonFinite { context } => assert!(context.contains("log")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use proptest::prelude::*;
        proptest!(|(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in 0u64..1000,
        )| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut g = Graph::new();
            let x = g.constant(t(vec![rows, cols], data)).unwrap();
            let y = g.softmax(x, 1).unwrap();
            for i in 0..rows {
                let sum: f64 = g.value(y).row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        });
    }

    #[test]
    fn causal_masking_blocks_future_positions() {
        // With a causal mask, attention weights above the diagonal vanish.
        let mut g = Graph::new();
        let x = g
            .constant(t(vec![3, 2], vec![0.5, -0.3, 0.8, 0.1, -0.2, 0.9]))
            .unwrap();
        let mut mask = vec![0.0; 9];
        for i in 0..3 {
            for j in (i + 1)..3 {
                mask[i * 3 + j] = MASK_NEG;
            }
        }
        let mask = t(vec![3, 3], mask);
        let (_, attn) = g.scaled_dot_attention(x, x, x, Some(&mask)).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!(g.value(attn).at(i, j) < 1e-12);
            }
        }
    }
}
