//! Operation tape and reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Additive pre-softmax penalty used to mask entries; large enough that
/// `exp` underflows to exactly zero after max subtraction.
pub const MASK_NEG: f64 = -1e30;

/// One recorded input: either an earlier tape node or an off-tape constant
/// whose values are saved for the reverse sweep.
#[derive(Debug, Clone)]
enum Arg {
    Node(usize),
    Const { data: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Arg,
        b: Arg,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Arg,
        b: Arg,
    },
    Sub {
        a: Arg,
        b: Arg,
    },
    Mul {
        a: Arg,
        b: Arg,
    },
    Scale {
        x: Arg,
        c: f64,
    },
    AddScalar {
        x: Arg,
    },
    ScaleBy {
        x: Arg,
        s: Arg,
    },
    AddRowVec {
        x: Arg,
        v: Arg,
    },
    ScaleRows {
        x: Arg,
        w: Arg,
    },
    Tanh {
        x: Arg,
    },
    Sigmoid {
        x: Arg,
    },
    Softmax {
        x: Arg,
        axis: usize,
    },
    LayerNorm {
        x: Arg,
        gain: Arg,
        bias: Arg,
        eps: f64,
    },
    SumAxis {
        x: Arg,
        axis: usize,
        in_shape: Vec<usize>,
    },
    SumAll {
        x: Arg,
    },
    MeanAll {
        x: Arg,
    },
    Transpose {
        x: Arg,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Arg,
    },
    ConcatCols {
        xs: Vec<Arg>,
        widths: Vec<usize>,
        rows: usize,
    },
    SelectRows {
        x: Arg,
        indices: Vec<usize>,
        in_rows: usize,
        cols: usize,
    },
    SmoothL1 {
        pred: Arg,
        target: Arg,
    },
    SoftCrossEntropy {
        scores: Arg,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tape-bound tensor, or `None` when the
    /// tensor is off-tape or received no adjoint.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.tape_id?;
        let g = self.per_node.get(id)?.as_ref()?;
        Some(Tensor::with_tape(t.shape().to_vec(), g.clone(), None))
    }

    /// Like [`Gradients::get`] but zero-filled for missing adjoints.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t)
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
    }
}

/// Define-by-run recording of tensor operations.
///
/// A tape is built per forward pass; [`Tape::backward`] runs one reverse
/// sweep in creation order and is rejected if called twice without
/// [`Tape::reset`]. A tape and its tensors belong to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

// Lane decomposition of `shape` around `axis`: (outer, lane, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clear all recordings so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.spent = false;
    }

    /// Bind a tensor to the tape as a gradient-receiving leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
        });
        Tensor::with_tape(t.shape().to_vec(), t.data().to_vec(), Some(id))
    }

    fn arg(&self, t: &Tensor) -> Arg {
        match t.tape_id {
            Some(id) => Arg::Node(id),
            None => Arg::Const {
                data: t.data().to_vec(),
            },
        }
    }

    fn arg_data<'a>(&'a self, arg: &'a Arg) -> &'a [f64] {
        match arg {
            Arg::Node(id) => &self.nodes[*id].value,
            Arg::Const { data } => data,
        }
    }

    fn record(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        on_tape: bool,
    ) -> Result<Tensor> {
        if !on_tape {
            return Tensor::new(shape, data);
        }
        if self.spent {
            return Err(Error::Contract(
                "recording on a tape that already ran backward; call reset".into(),
            ));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: data.clone(),
        });
        Ok(Tensor::with_tape(shape, data, Some(id)))
    }

    // ── Forward operations ───────────────────────────────────────────

    /// Matrix product of 2-D tensors `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: [{m}x{k}] vs [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        let ad = a.data();
        let bd = b.data();
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let on_tape = a.on_tape() || b.on_tape();
        self.record(
            Op::MatMul {
                a: self.arg(a),
                b: self.arg(b),
                m,
                k,
                n,
            },
            vec![m, n],
            out,
            on_tape,
        )
    }

    fn binary(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Arg, Arg) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "{name} needs equal shapes, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let on_tape = a.on_tape() || b.on_tape();
        self.record(
            op(self.arg(a), self.arg(b)),
            a.shape().to_vec(),
            data,
            on_tape,
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v * c).collect();
        self.record(
            Op::Scale { x: self.arg(x), c },
            x.shape().to_vec(),
            data,
            x.on_tape(),
        )
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v + c).collect();
        self.record(
            Op::AddScalar { x: self.arg(x) },
            x.shape().to_vec(),
            data,
            x.on_tape(),
        )
    }

    /// Multiply a tensor by a one-element tensor (scalar broadcast).
    pub fn scale_by(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a scalar tensor, got {:?}",
                s.shape()
            )));
        }
        let sv = s.data()[0];
        let data = x.data().iter().map(|&v| v * sv).collect();
        let on_tape = x.on_tape() || s.on_tape();
        self.record(
            Op::ScaleBy {
                x: self.arg(x),
                s: self.arg(s),
            },
            x.shape().to_vec(),
            data,
            on_tape,
        )
    }

    /// Broadcast-add a vector along the trailing axis (bias add).
    pub fn add_rowvec(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let cols = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("add_rowvec on empty".into()))?;
        if v.numel() != cols {
            return Err(Error::Shape(format!(
                "add_rowvec: vector length {} vs trailing axis {}",
                v.numel(),
                cols
            )));
        }
        let vd = v.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + vd[i % cols])
            .collect();
        let on_tape = x.on_tape() || v.on_tape();
        self.record(
            Op::AddRowVec {
                x: self.arg(x),
                v: self.arg(v),
            },
            x.shape().to_vec(),
            data,
            on_tape,
        )
    }

    /// Scale row `i` of a 2-D tensor by `w[i]`.
    pub fn scale_rows(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "scale_rows needs 2-D, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if w.numel() != m {
            return Err(Error::Shape(format!(
                "scale_rows: weight length {} vs {} rows",
                w.numel(),
                m
            )));
        }
        let wd = w.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = x.data()[i * n + j] * wd[i];
            }
        }
        let on_tape = x.on_tape() || w.on_tape();
        self.record(
            Op::ScaleRows {
                x: self.arg(x),
                w: self.arg(w),
            },
            x.shape().to_vec(),
            data,
            on_tape,
        )
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.tanh()).collect();
        self.record(
            Op::Tanh { x: self.arg(x) },
            x.shape().to_vec(),
            data,
            x.on_tape(),
        )
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
        self.record(
            Op::Sigmoid { x: self.arg(x) },
            x.shape().to_vec(),
            data,
            x.on_tape(),
        )
    }

    /// Softmax along `axis`, computed with max subtraction. Entries pushed
    /// to [`MASK_NEG`] come out exactly zero.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                x.shape()
            )));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, lane, inner) = lanes(x.shape(), axis);
        let xd = x.data();
        let mut data = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * lane + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..lane {
                    mx = mx.max(xd[idx(j)]);
                }
                let mut z = 0.0;
                for j in 0..lane {
                    let e = (xd[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..lane {
                    data[idx(j)] /= z;
                }
            }
        }
        self.record(
            Op::Softmax {
                x: self.arg(x),
                axis,
            },
            x.shape().to_vec(),
            data,
            x.on_tape(),
        )
    }

    /// Softmax along the trailing axis.
    pub fn softmax_last(&mut self, x: &Tensor) -> Result<Tensor> {
        self.softmax(x, x.shape().len() - 1)
    }

    /// Per-row standardization over the trailing axis followed by the
    /// affine map `gain ⊙ x̂ + bias`. Epsilon sits inside the square root.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on empty".into()))?;
        if d < 2 {
            return Err(Error::Shape(format!(
                "layer_norm needs trailing axis >= 2, got {d}"
            )));
        }
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias length {}/{} vs axis {}",
                gain.numel(),
                bias.numel(),
                d
            )));
        }
        let rows = x.numel() / d;
        let xd = x.data();
        let (gd, bd) = (gain.data(), bias.data());
        let mut data = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let on_tape = x.on_tape() || gain.on_tape() || bias.on_tape();
        self.record(
            Op::LayerNorm {
                x: self.arg(x),
                gain: self.arg(gain),
                bias: self.arg(bias),
                eps: EPS,
            },
            x.shape().to_vec(),
            data,
            on_tape,
        )
    }

    /// Affine map `x·W + b`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xw = self.matmul(x, w)?;
        self.add_rowvec(&xw, b)
    }

    /// Sum along `axis`; the axis is removed (a 1-D input yields a scalar).
    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(Error::Shape(format!(
                "sum_axis {axis} out of range for {:?}",
                x.shape()
            )));
        }
        let (outer, lane, inner) = lanes(x.shape(), axis);
        let xd = x.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for j in 0..lane {
                    s += xd[(o * lane + j) * inner + i];
                }
                data[o * inner + i] = s;
            }
        }
        let mut shape: Vec<usize> = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.record(
            Op::SumAxis {
                x: self.arg(x),
                axis,
                in_shape: x.shape().to_vec(),
            },
            shape,
            data,
            x.on_tape(),
        )
    }

    /// Sum along the trailing axis.
    pub fn sum_last(&mut self, x: &Tensor) -> Result<Tensor> {
        self.sum_axis(x, x.shape().len() - 1)
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum();
        self.record(Op::SumAll { x: self.arg(x) }, vec![1], vec![s], x.on_tape())
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.record(
            Op::MeanAll { x: self.arg(x) },
            vec![1],
            vec![s],
            x.on_tape(),
        )
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs 2-D, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let xd = x.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        self.record(
            Op::Transpose {
                x: self.arg(x),
                rows: m,
                cols: n,
            },
            vec![n, m],
            data,
            x.on_tape(),
        )
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        self.record(
            Op::Reshape { x: self.arg(x) },
            shape,
            x.data().to_vec(),
            x.on_tape(),
        )
    }

    /// Concatenate 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let rows = xs[0].shape()[0];
        for t in xs {
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: incompatible block {:?}",
                    t.shape()
                )));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|t| t.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (t, &w) in xs.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let on_tape = xs.iter().any(|t| t.on_tape());
        let args = xs.iter().map(|t| self.arg(t)).collect();
        self.record(
            Op::ConcatCols {
                xs: args,
                widths,
                rows,
            },
            vec![rows, total],
            data,
            on_tape,
        )
    }

    /// Gather rows of a 2-D tensor by index.
    pub fn select_rows(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "select_rows needs 2-D, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        for &i in indices {
            if i >= m {
                return Err(Error::Shape(format!("row index {i} out of range {m}")));
            }
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
        }
        self.record(
            Op::SelectRows {
                x: self.arg(x),
                indices: indices.to_vec(),
                in_rows: m,
                cols: n,
            },
            vec![indices.len(), n],
            data,
            x.on_tape(),
        )
    }

    /// Smooth-L1 loss with unit transition point, mean reduction:
    /// per element `0.5 e²` for `|e| < 1`, else `|e| − 0.5`.
    pub fn smooth_l1(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "smooth_l1: {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let n = pred.numel() as f64;
        let mut s = 0.0;
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            let e = p - t;
            s += if e.abs() < 1.0 {
                0.5 * e * e
            } else {
                e.abs() - 0.5
            };
        }
        let on_tape = pred.on_tape() || target.on_tape();
        self.record(
            Op::SmoothL1 {
                pred: self.arg(pred),
                target: self.arg(target),
            },
            vec![1],
            vec![s / n],
            on_tape,
        )
    }

    /// Cross-entropy between `softmax(scores)` and fixed soft labels,
    /// computed through log-softmax. Labels must be off-tape.
    pub fn soft_cross_entropy(&mut self, scores: &Tensor, labels: &Tensor) -> Result<Tensor> {
        if labels.on_tape() {
            return Err(Error::Contract(
                "soft labels must not require gradients".into(),
            ));
        }
        if scores.shape() != labels.shape() {
            return Err(Error::Shape(format!(
                "soft_cross_entropy: {:?} vs {:?}",
                scores.shape(),
                labels.shape()
            )));
        }
        let sd = scores.data();
        let mx = sd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + sd.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let loss: f64 = sd
            .iter()
            .zip(labels.data())
            .map(|(&s, &l)| -l * (s - lse))
            .sum();
        self.record(
            Op::SoftCrossEntropy {
                scores: self.arg(scores),
                labels: labels.data().to_vec(),
            },
            vec![1],
            vec![loss],
            scores.on_tape(),
        )
    }

    // ── Reverse sweep ────────────────────────────────────────────────

    /// Accumulate dLoss/dNode for every node reachable from a scalar loss.
    ///
    /// Creation order is topological, so one reverse pass suffices. The
    /// tape is spent afterwards until [`Tape::reset`].
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Contract(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        let loss_id = loss.tape_id.ok_or_else(|| {
            Error::Contract("backward on a tensor that is not on the tape".into())
        })?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.spent = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let dy = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let ad = self.arg_data(a);
                    let bd = self.arg_data(b);
                    if let Arg::Node(ia) = a {
                        let da = grads[*ia].get_or_insert_with(|| vec![0.0; m * k]);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += dy[i * n + j] * bd[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    if let Arg::Node(ib) = b {
                        let db = grads[*ib].get_or_insert_with(|| vec![0.0; k * n]);
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += ad[i * k + p] * dy[i * n + j];
                                }
                                db[p * n + j] += s;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for arg in [a, b] {
                        if let Arg::Node(i) = arg {
                            let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                            for (gv, &d) in g.iter_mut().zip(&dy) {
                                *gv += d;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if let Arg::Node(i) = a {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for (gv, &d) in g.iter_mut().zip(&dy) {
                            *gv += d;
                        }
                    }
                    if let Arg::Node(i) = b {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for (gv, &d) in g.iter_mut().zip(&dy) {
                            *gv -= d;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let ad = self.arg_data(a).to_vec();
                    let bd = self.arg_data(b).to_vec();
                    if let Arg::Node(i) = a {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j] * bd[j];
                        }
                    }
                    if let Arg::Node(i) = b {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j] * ad[j];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if let Arg::Node(i) = x {
                        let c = *c;
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j] * c;
                        }
                    }
                }
                Op::AddScalar { x } => {
                    if let Arg::Node(i) = x {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j];
                        }
                    }
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.arg_data(s)[0];
                    let xd = self.arg_data(x).to_vec();
                    if let Arg::Node(i) = x {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j] * sv;
                        }
                    }
                    if let Arg::Node(i) = s {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; 1]);
                        g[0] += dy.iter().zip(&xd).map(|(&d, &x)| d * x).sum::<f64>();
                    }
                }
                Op::AddRowVec { x, v } => {
                    let cols = match v {
                        Arg::Node(i) => self.nodes[*i].value.len(),
                        Arg::Const { data } => data.len(),
                    };
                    if let Arg::Node(i) = x {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j];
                        }
                    }
                    if let Arg::Node(i) = v {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; cols]);
                        for (j, &d) in dy.iter().enumerate() {
                            g[j % cols] += d;
                        }
                    }
                }
                Op::ScaleRows { x, w } => {
                    let xd = self.arg_data(x).to_vec();
                    let wd = self.arg_data(w).to_vec();
                    let m = wd.len();
                    let n = dy.len() / m;
                    if let Arg::Node(i) = x {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for r in 0..m {
                            for c in 0..n {
                                g[r * n + c] += dy[r * n + c] * wd[r];
                            }
                        }
                    }
                    if let Arg::Node(i) = w {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; m]);
                        for r in 0..m {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += dy[r * n + c] * xd[r * n + c];
                            }
                            g[r] += s;
                        }
                    }
                }
                Op::Tanh { x } => {
                    if let Arg::Node(i) = x {
                        let y = &node.value;
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j] * (1.0 - y[j] * y[j]);
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if let Arg::Node(i) = x {
                        let y = &node.value;
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j] * y[j] * (1.0 - y[j]);
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if let Arg::Node(i) = x {
                        let p = &node.value;
                        let (outer, lane, inner) = lanes(&node.shape, *axis);
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for o in 0..outer {
                            for ii in 0..inner {
                                let idx = |j: usize| (o * lane + j) * inner + ii;
                                let mut dot = 0.0;
                                for j in 0..lane {
                                    dot += dy[idx(j)] * p[idx(j)];
                                }
                                for j in 0..lane {
                                    g[idx(j)] += p[idx(j)] * (dy[idx(j)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xd = self.arg_data(x).to_vec();
                    let gd = self.arg_data(gain).to_vec();
                    let d = gd.len();
                    let rows = xd.len() / d;
                    // Recompute per-row statistics for the reverse formulas.
                    let mut xhat = vec![0.0; xd.len()];
                    let mut inv_std = vec![0.0; rows];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        inv_std[r] = inv;
                        for j in 0..d {
                            xhat[r * d + j] = (row[j] - mean) * inv;
                        }
                    }
                    if let Arg::Node(i) = x {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; xd.len()]);
                        for r in 0..rows {
                            let mut mean_gy = 0.0;
                            let mut mean_gyx = 0.0;
                            for j in 0..d {
                                let gy = dy[r * d + j] * gd[j];
                                mean_gy += gy;
                                mean_gyx += gy * xhat[r * d + j];
                            }
                            mean_gy /= d as f64;
                            mean_gyx /= d as f64;
                            for j in 0..d {
                                let gy = dy[r * d + j] * gd[j];
                                g[r * d + j] +=
                                    (gy - mean_gy - xhat[r * d + j] * mean_gyx) * inv_std[r];
                            }
                        }
                    }
                    if let Arg::Node(i) = gain {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; d]);
                        for r in 0..rows {
                            for j in 0..d {
                                g[j] += dy[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if let Arg::Node(i) = bias {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; d]);
                        for r in 0..rows {
                            for j in 0..d {
                                g[j] += dy[r * d + j];
                            }
                        }
                    }
                }
                Op::SumAxis { x, axis, in_shape } => {
                    if let Arg::Node(i) = x {
                        let (outer, lane, inner) = lanes(in_shape, *axis);
                        let numel: usize = in_shape.iter().product();
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; numel]);
                        for o in 0..outer {
                            for ii in 0..inner {
                                let d = dy[o * inner + ii];
                                for j in 0..lane {
                                    g[(o * lane + j) * inner + ii] += d;
                                }
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if let Arg::Node(i) = x {
                        let n = self.nodes[*i].value.len();
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; n]);
                        for gv in g.iter_mut() {
                            *gv += dy[0];
                        }
                    }
                }
                Op::MeanAll { x } => {
                    if let Arg::Node(i) = x {
                        let n = self.nodes[*i].value.len();
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; n]);
                        let d = dy[0] / n as f64;
                        for gv in g.iter_mut() {
                            *gv += d;
                        }
                    }
                }
                Op::Transpose { x, rows, cols } => {
                    if let Arg::Node(i) = x {
                        let (m, n) = (*rows, *cols);
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; m * n]);
                        for r in 0..m {
                            for c in 0..n {
                                g[r * n + c] += dy[c * m + r];
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Arg::Node(i) = x {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for j in 0..dy.len() {
                            g[j] += dy[j];
                        }
                    }
                }
                Op::ConcatCols { xs, widths, rows } => {
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (arg, &w) in xs.iter().zip(widths) {
                        if let Arg::Node(i) = arg {
                            let g = grads[*i].get_or_insert_with(|| vec![0.0; rows * w]);
                            for r in 0..*rows {
                                for c in 0..w {
                                    g[r * w + c] += dy[r * total + off + c];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SelectRows {
                    x,
                    indices,
                    in_rows,
                    cols,
                } => {
                    if let Arg::Node(i) = x {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; in_rows * cols]);
                        for (r, &src) in indices.iter().enumerate() {
                            for c in 0..*cols {
                                g[src * cols + c] += dy[r * cols + c];
                            }
                        }
                    }
                }
                Op::SmoothL1 { pred, target } => {
                    let pd = self.arg_data(pred).to_vec();
                    let td = self.arg_data(target).to_vec();
                    let n = pd.len() as f64;
                    let elem = |j: usize| {
                        let e = pd[j] - td[j];
                        if e.abs() < 1.0 {
                            e
                        } else {
                            e.signum()
                        }
                    };
                    if let Arg::Node(i) = pred {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; pd.len()]);
                        for j in 0..pd.len() {
                            g[j] += dy[0] * elem(j) / n;
                        }
                    }
                    if let Arg::Node(i) = target {
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; td.len()]);
                        for j in 0..td.len() {
                            g[j] -= dy[0] * elem(j) / n;
                        }
                    }
                }
                Op::SoftCrossEntropy { scores, labels } => {
                    if let Arg::Node(i) = scores {
                        let sd = self.arg_data(scores).to_vec();
                        let mx = sd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = sd.iter().map(|&v| (v - mx).exp()).sum();
                        let lsum: f64 = labels.iter().sum();
                        let g = grads[*i].get_or_insert_with(|| vec![0.0; sd.len()]);
                        for j in 0..sd.len() {
                            let p = (sd[j] - mx).exp() / z;
                            g[j] += dy[0] * (p * lsum - labels[j]);
                        }
                    }
                }
            }
        }
        Ok(Gradients { per_node: grads })
    }
}
