use super::array::{Array, Element};
use super::conv::{self, ConvDims};
use crate::error::{DgError, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Operation record; indices refer to earlier tape entries.
#[derive(Clone, Debug)]
pub enum Op<E> {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    ScaleConst {
        x: TensorId,
        c: E,
    },
    /// Multiply by a 1-element tape tensor, broadcast over `x`.
    ScaleScalar {
        x: TensorId,
        s: TensorId,
    },
    /// Multiply row `b` of `x` by `w[b]`; `w` has shape `[B]`.
    ScaleRows {
        x: TensorId,
        w: TensorId,
    },
    Elementwise {
        x: TensorId,
        act: Activation,
    },
    /// Values below `tau` become zero, others pass through (inference gate).
    Threshold {
        x: TensorId,
        tau: E,
    },
    Reshape {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    Conv2d {
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        dims: ConvDims,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    FullyConnected {
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        smoothing: E,
    },
    /// Functional column update of a `[B,N,N]` matrix stack: the result is a
    /// copy of `m` with `out[b, rows[t], col] = values[b, t]`.
    ColWrite {
        m: TensorId,
        values: TensorId,
        col: usize,
        rows: Vec<usize>,
    },
    /// `out[b, i] = m[b, row, i]` for `i < len`.
    RowSlice {
        m: TensorId,
        row: usize,
        len: usize,
    },
    /// `out[b] = x[b, col]` from a `[B,W]` tensor.
    Column {
        x: TensorId,
        col: usize,
    },
}

struct Node<E> {
    value: Array<E>,
    grad: Option<Array<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Reverse-mode differentiation tape. Operations execute eagerly and record
/// themselves; [`Tape::backward`] replays the records in exact reverse
/// execution order. One tape serves one forward/backward pass and is
/// single-threaded.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array<E>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Array<E>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Array<E> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array<E>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Array<E>, requires_grad: bool, op: Op<E>) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(DgError::ShapeMismatch {
                op: "add",
                dim: "element count",
                expected: va.numel(),
                got: vb.numel(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, self.needs(&[a, b]), Op::Add { a, b }))
    }

    pub fn scale_const(&mut self, x: TensorId, c: E) -> Result<TensorId> {
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, self.needs(&[x]), Op::ScaleConst { x, c }))
    }

    pub fn scale_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(DgError::ShapeMismatch {
                op: "scale_scalar",
                dim: "scalar element count",
                expected: 1,
                got: self.value(s).numel(),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, self.needs(&[x, s]), Op::ScaleScalar { x, s }))
    }

    pub fn scale_rows(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let batch = self.value(x).shape()[0];
        let wv = self.value(w);
        if wv.shape() != [batch] {
            return Err(DgError::ShapeMismatch {
                op: "scale_rows",
                dim: "batch",
                expected: batch,
                got: wv.numel(),
            });
        }
        let row = self.value(x).numel() / batch;
        let mut data = self.value(x).data().to_vec();
        for b in 0..batch {
            let wb = wv.data()[b];
            for v in &mut data[b * row..(b + 1) * row] {
                *v = *v * wb;
            }
        }
        let out = Array::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, self.needs(&[x, w]), Op::ScaleRows { x, w }))
    }

    pub fn elementwise(&mut self, x: TensorId, act: Activation) -> Result<TensorId> {
        let out = match act {
            Activation::Relu => self.value(x).map(|v| v.max(E::zero())),
            // Clamp into the open interval: sigmoid must stay strictly
            // inside (0,1) even where the float rounds to 0 or 1.
            Activation::Sigmoid => self.value(x).map(|v| {
                let s = E::one() / (E::one() + (-v).exp());
                s.max(E::min_positive_value()).min(E::below_one())
            }),
        };
        Ok(self.push(out, self.needs(&[x]), Op::Elementwise { x, act }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.elementwise(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.elementwise(x, Activation::Sigmoid)
    }

    pub fn threshold(&mut self, x: TensorId, tau: E) -> Result<TensorId> {
        let out = self
            .value(x)
            .map(|v| if v < tau { E::zero() } else { v });
        Ok(self.push(out, self.needs(&[x]), Op::Threshold { x, tau }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, self.needs(&[x]), Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: E = self.value(x).data().iter().copied().sum();
        Ok(self.push(Array::scalar(s), self.needs(&[x]), Op::Sum { x }))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(DgError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s: E = self.value(x).data().iter().copied().sum();
        let m = s / E::from_f64(n as f64);
        Ok(self.push(Array::scalar(m), self.needs(&[x]), Op::Mean { x }))
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.value(x).shape();
        let ks = self.value(kernel).shape();
        if xs.len() != 4 {
            return Err(DgError::ShapeMismatch {
                op: "conv2d",
                dim: "input rank",
                expected: 4,
                got: xs.len(),
            });
        }
        if ks.len() != 4 {
            return Err(DgError::ShapeMismatch {
                op: "conv2d",
                dim: "kernel rank",
                expected: 4,
                got: ks.len(),
            });
        }
        if ks[2] != ks[3] {
            return Err(DgError::ShapeMismatch {
                op: "conv2d",
                dim: "kernel width",
                expected: ks[2],
                got: ks[3],
            });
        }
        if ks[1] != xs[1] {
            return Err(DgError::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: ks[1],
                got: xs[1],
            });
        }
        if ks[2] < 1 || stride < 1 {
            return Err(DgError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel size {} and stride {} must be >= 1", ks[2], stride),
            });
        }
        let k = ks[2];
        let (h_out, w_out) = match (
            ConvDims::output_extent(xs[2], k, stride, padding),
            ConvDims::output_extent(xs[3], k, stride, padding),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(DgError::InvalidArgument {
                    op: "conv2d",
                    msg: format!(
                        "kernel {k} exceeds padded input {}x{}",
                        xs[2] + 2 * padding,
                        xs[3] + 2 * padding
                    ),
                })
            }
        };
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            k,
            stride,
            padding,
            h_out,
            w_out,
        };
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [dims.c_out] {
                return Err(DgError::ShapeMismatch {
                    op: "conv2d",
                    dim: "bias channels",
                    expected: dims.c_out,
                    got: self.value(b).numel(),
                });
            }
        }
        let data = conv::forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let out = Array::new(
            vec![dims.batch, dims.c_out, dims.h_out, dims.w_out],
            data,
        )?;
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(out, rg, Op::Conv2d { x, kernel, bias, dims }))
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(DgError::ShapeMismatch {
                op: "global_avg_pool",
                dim: "input rank",
                expected: 4,
                got: xs.len(),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 1 || w < 1 {
            return Err(DgError::InvalidArgument {
                op: "global_avg_pool",
                msg: "empty spatial plane".into(),
            });
        }
        let plane = E::from_f64((h * w) as f64);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(b * c);
        for bi in 0..b {
            for ci in 0..c {
                let start = (bi * c + ci) * h * w;
                let s: E = xd[start..start + h * w].iter().copied().sum();
                data.push(s / plane);
            }
        }
        let out = Array::new(vec![b, c], data)?;
        Ok(self.push(out, self.needs(&[x]), Op::GlobalAvgPool { x }))
    }

    pub fn fully_connected(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let xs = self.value(x).shape();
        let ws = self.value(weight).shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(DgError::ShapeMismatch {
                op: "fully_connected",
                dim: "input rank",
                expected: 2,
                got: if xs.len() != 2 { xs.len() } else { ws.len() },
            });
        }
        if xs[1] != ws[0] {
            return Err(DgError::ShapeMismatch {
                op: "fully_connected",
                dim: "inner dimension",
                expected: xs[1],
                got: ws[0],
            });
        }
        let (b, c_in, c_out) = (xs[0], xs[1], ws[1]);
        if self.value(bias).shape() != [c_out] {
            return Err(DgError::ShapeMismatch {
                op: "fully_connected",
                dim: "bias",
                expected: c_out,
                got: self.value(bias).numel(),
            });
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut data = vec![E::zero(); b * c_out];
        for bi in 0..b {
            let row = &mut data[bi * c_out..(bi + 1) * c_out];
            row.copy_from_slice(bd);
            for i in 0..c_in {
                let xv = xd[bi * c_in + i];
                let w_row = &wd[i * c_out..(i + 1) * c_out];
                for o in 0..c_out {
                    row[o] = row[o] + xv * w_row[o];
                }
            }
        }
        let out = Array::new(vec![b, c_out], data)?;
        Ok(self.push(
            out,
            self.needs(&[x, weight, bias]),
            Op::FullyConnected { x, weight, bias },
        ))
    }

    pub fn cross_entropy_smoothed(
        &mut self,
        logits: TensorId,
        labels: &[usize],
        smoothing: E,
    ) -> Result<TensorId> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 {
            return Err(DgError::ShapeMismatch {
                op: "cross_entropy_smoothed",
                dim: "logits rank",
                expected: 2,
                got: ls.len(),
            });
        }
        let (b, k) = (ls[0], ls[1]);
        if labels.len() != b {
            return Err(DgError::ShapeMismatch {
                op: "cross_entropy_smoothed",
                dim: "batch",
                expected: b,
                got: labels.len(),
            });
        }
        if smoothing < E::zero() || smoothing >= E::one() {
            return Err(DgError::InvalidArgument {
                op: "cross_entropy_smoothed",
                msg: format!("smoothing {smoothing} outside [0,1)"),
            });
        }
        for &y in labels {
            if y >= k {
                return Err(DgError::LabelOutOfRange {
                    label: y,
                    classes: k,
                });
            }
        }
        let xd = self.value(logits).data();
        let uniform = smoothing / E::from_f64(k as f64);
        let mut total = E::zero();
        for bi in 0..b {
            let row = &xd[bi * k..(bi + 1) * k];
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<E>().ln();
            // -sum_k q_k (x_k - lse) with sum_k q_k = 1
            let mut dot = E::zero();
            for (kk, &v) in row.iter().enumerate() {
                let q = if kk == labels[bi] {
                    E::one() - smoothing + uniform
                } else {
                    uniform
                };
                dot = dot + q * v;
            }
            total = total + (lse - dot);
        }
        let loss = total / E::from_f64(b as f64);
        Ok(self.push(
            Array::scalar(loss),
            self.needs(&[logits]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
            },
        ))
    }

    pub fn col_write(
        &mut self,
        m: TensorId,
        col: usize,
        rows: &[usize],
        values: TensorId,
    ) -> Result<TensorId> {
        let ms = self.value(m).shape().to_vec();
        if ms.len() != 3 || ms[1] != ms[2] {
            return Err(DgError::InvalidArgument {
                op: "col_write",
                msg: format!("expected [B,N,N] matrix stack, got {ms:?}"),
            });
        }
        let (b, n) = (ms[0], ms[1]);
        if col >= n || rows.iter().any(|&r| r >= n) {
            return Err(DgError::InvalidArgument {
                op: "col_write",
                msg: format!("cell index out of range for N={n}"),
            });
        }
        let vs = self.value(values).shape();
        if vs != [b, rows.len()] {
            return Err(DgError::ShapeMismatch {
                op: "col_write",
                dim: "values",
                expected: b * rows.len(),
                got: self.value(values).numel(),
            });
        }
        let vd = self.value(values).data();
        let mut data = self.value(m).data().to_vec();
        for bi in 0..b {
            for (t, &r) in rows.iter().enumerate() {
                data[(bi * n + r) * n + col] = vd[bi * rows.len() + t];
            }
        }
        let out = Array::new(ms, data)?;
        Ok(self.push(
            out,
            self.needs(&[m, values]),
            Op::ColWrite {
                m,
                values,
                col,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn row_slice(&mut self, m: TensorId, row: usize, len: usize) -> Result<TensorId> {
        let ms = self.value(m).shape();
        if ms.len() != 3 || ms[1] != ms[2] {
            return Err(DgError::InvalidArgument {
                op: "row_slice",
                msg: format!("expected [B,N,N] matrix stack, got {ms:?}"),
            });
        }
        let (b, n) = (ms[0], ms[1]);
        if row >= n || len > n {
            return Err(DgError::InvalidArgument {
                op: "row_slice",
                msg: format!("row {row} / len {len} out of range for N={n}"),
            });
        }
        let md = self.value(m).data();
        let mut data = Vec::with_capacity(b * len);
        for bi in 0..b {
            let start = (bi * n + row) * n;
            data.extend_from_slice(&md[start..start + len]);
        }
        let out = Array::new(vec![b, len], data)?;
        Ok(self.push(out, self.needs(&[m]), Op::RowSlice { m, row, len }))
    }

    pub fn column(&mut self, x: TensorId, col: usize) -> Result<TensorId> {
        let xs = self.value(x).shape();
        if xs.len() != 2 || col >= xs[1] {
            return Err(DgError::InvalidArgument {
                op: "column",
                msg: format!("column {col} out of range for shape {xs:?}"),
            });
        }
        let (b, w) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let data = (0..b).map(|bi| xd[bi * w + col]).collect();
        let out = Array::new(vec![b], data)?;
        Ok(self.push(out, self.needs(&[x]), Op::Column { x, col }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populates gradients of everything reachable from `root`. Leaves that
    /// require gradients but are unreachable end up with explicit zeros.
    /// Each pass propagates its own unit seed and then adds into the stored
    /// gradients, so repeated passes sum contributions and a grad reset
    /// restores the single-pass values exactly.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(DgError::NonScalarRoot {
                elems: self.value(root).numel(),
            });
        }
        let mut local: Vec<Option<Array<E>>> = vec![None; root.0 + 1];
        local[root.0] = Some(Array::scalar(E::one()));
        for idx in (0..=root.0).rev() {
            if local[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = local[idx].take().expect("checked");
            for (id, contribution) in self.input_grads(idx, &g) {
                accumulate_into(&mut local[id.0], contribution);
            }
            local[idx] = Some(g);
        }
        for (idx, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                accumulate_into(&mut self.nodes[idx].grad, g);
            }
        }
        // Unreached requires-grad leaves hold d(root)/d(leaf) = 0.
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.requires_grad && n.grad.is_none() {
                n.grad = Some(Array::zeros(n.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to each of its inputs that
    /// require gradients, given the output gradient `g`.
    fn input_grads(&self, idx: usize, g: &Array<E>) -> Vec<(TensorId, Array<E>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        let mut emit = |tape: &Self, id: TensorId, arr: Array<E>| {
            if tape.nodes[id.0].requires_grad {
                out.push((id, arr));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                emit(self, *a, g.clone());
                emit(self, *b, g.clone());
            }
            Op::ScaleConst { x, c } => {
                emit(self, *x, g.map(|v| v * *c));
            }
            Op::ScaleScalar { x, s } => {
                let sv = self.value(*s).item();
                emit(self, *x, g.map(|v| v * sv));
                if self.nodes[s.0].requires_grad {
                    let dot: E = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| gv * xv)
                        .sum();
                    out.push((*s, Array::scalar(dot)));
                }
            }
            Op::ScaleRows { x, w } => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                let batch = xv.shape()[0];
                let row = xv.numel() / batch;
                if self.nodes[x.0].requires_grad {
                    let mut dx = g.data().to_vec();
                    for b in 0..batch {
                        let wb = wv.data()[b];
                        for v in &mut dx[b * row..(b + 1) * row] {
                            *v = *v * wb;
                        }
                    }
                    out.push((*x, Array::new(xv.shape().to_vec(), dx).unwrap()));
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![E::zero(); batch];
                    for (b, slot) in dw.iter_mut().enumerate() {
                        let mut s = E::zero();
                        for i in 0..row {
                            s = s + g.data()[b * row + i] * xv.data()[b * row + i];
                        }
                        *slot = s;
                    }
                    out.push((*w, Array::new(vec![batch], dw).unwrap()));
                }
            }
            Op::Elementwise { x, act } => {
                let dx = match act {
                    Activation::Relu => {
                        let xv = self.value(*x);
                        let data = g
                            .data()
                            .iter()
                            .zip(xv.data())
                            .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                            .collect();
                        Array::new(xv.shape().to_vec(), data).unwrap()
                    }
                    Activation::Sigmoid => {
                        // d sigma = sigma (1 - sigma), from the stored output
                        let y = &node.value;
                        let data = g
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &yv)| gv * yv * (E::one() - yv))
                            .collect();
                        Array::new(y.shape().to_vec(), data).unwrap()
                    }
                };
                emit(self, *x, dx);
            }
            Op::Threshold { x, tau } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v < *tau { E::zero() } else { gv })
                    .collect();
                emit(self, *x, Array::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                emit(self, *x, g.clone().reshaped(shape).unwrap());
            }
            Op::Sum { x } => {
                let g0 = g.item();
                emit(self, *x, Array::full(self.value(*x).shape().to_vec(), g0));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let g0 = g.item() / E::from_f64(n as f64);
                emit(self, *x, Array::full(self.value(*x).shape().to_vec(), g0));
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            } => {
                let (dx, dk, db) = conv::backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    dims,
                );
                emit(
                    self,
                    *x,
                    Array::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
                emit(
                    self,
                    *kernel,
                    Array::new(self.value(*kernel).shape().to_vec(), dk).unwrap(),
                );
                if let Some(b) = bias {
                    emit(self, *b, Array::new(vec![dims.c_out], db).unwrap());
                }
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let scale = E::one() / E::from_f64((h * w) as f64);
                let mut dx = vec![E::zero(); b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g.data()[bi * c + ci] * scale;
                        let start = (bi * c + ci) * h * w;
                        dx[start..start + h * w].fill(gv);
                    }
                }
                emit(self, *x, Array::new(xs, dx).unwrap());
            }
            Op::FullyConnected { x, weight, bias } => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let (b, c_in, c_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![E::zero(); b * c_in];
                    for bi in 0..b {
                        let g_row = &g.data()[bi * c_out..(bi + 1) * c_out];
                        for i in 0..c_in {
                            let w_row = &wv.data()[i * c_out..(i + 1) * c_out];
                            let mut s = E::zero();
                            for o in 0..c_out {
                                s = s + g_row[o] * w_row[o];
                            }
                            dx[bi * c_in + i] = s;
                        }
                    }
                    out.push((*x, Array::new(vec![b, c_in], dx).unwrap()));
                }
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![E::zero(); c_in * c_out];
                    for bi in 0..b {
                        let g_row = &g.data()[bi * c_out..(bi + 1) * c_out];
                        for i in 0..c_in {
                            let xv_i = xv.data()[bi * c_in + i];
                            let dw_row = &mut dw[i * c_out..(i + 1) * c_out];
                            for o in 0..c_out {
                                dw_row[o] = dw_row[o] + xv_i * g_row[o];
                            }
                        }
                    }
                    out.push((*weight, Array::new(vec![c_in, c_out], dw).unwrap()));
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![E::zero(); c_out];
                    for bi in 0..b {
                        for (o, slot) in db.iter_mut().enumerate() {
                            *slot = *slot + g.data()[bi * c_out + o];
                        }
                    }
                    out.push((*bias, Array::new(vec![c_out], db).unwrap()));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
            } => {
                let lv = self.value(*logits);
                let (b, k) = (lv.shape()[0], lv.shape()[1]);
                let uniform = *smoothing / E::from_f64(k as f64);
                let inv_b = E::one() / E::from_f64(b as f64);
                let g0 = g.item();
                let mut dl = vec![E::zero(); b * k];
                for bi in 0..b {
                    let row = &lv.data()[bi * k..(bi + 1) * k];
                    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                    let denom: E = row.iter().map(|&v| (v - m).exp()).sum();
                    for kk in 0..k {
                        let p = (row[kk] - m).exp() / denom;
                        let q = if kk == labels[bi] {
                            E::one() - *smoothing + uniform
                        } else {
                            uniform
                        };
                        dl[bi * k + kk] = g0 * (p - q) * inv_b;
                    }
                }
                emit(self, *logits, Array::new(vec![b, k], dl).unwrap());
            }
            Op::ColWrite {
                m,
                values,
                col,
                rows,
            } => {
                let ms = self.value(*m).shape().to_vec();
                let (b, n) = (ms[0], ms[1]);
                if self.nodes[m.0].requires_grad {
                    // Overwritten cells pass nothing to the previous version.
                    let mut dm = g.data().to_vec();
                    for bi in 0..b {
                        for &r in rows {
                            dm[(bi * n + r) * n + col] = E::zero();
                        }
                    }
                    out.push((*m, Array::new(ms.clone(), dm).unwrap()));
                }
                if self.nodes[values.0].requires_grad {
                    let mut dv = vec![E::zero(); b * rows.len()];
                    for bi in 0..b {
                        for (t, &r) in rows.iter().enumerate() {
                            dv[bi * rows.len() + t] = g.data()[(bi * n + r) * n + col];
                        }
                    }
                    out.push((*values, Array::new(vec![b, rows.len()], dv).unwrap()));
                }
            }
            Op::RowSlice { m, row, len } => {
                let ms = self.value(*m).shape().to_vec();
                let (b, n) = (ms[0], ms[1]);
                let mut dm = vec![E::zero(); b * n * n];
                for bi in 0..b {
                    for i in 0..*len {
                        dm[(bi * n + row) * n + i] = g.data()[bi * len + i];
                    }
                }
                emit(self, *m, Array::new(ms, dm).unwrap());
            }
            Op::Column { x, col } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, w) = (xs[0], xs[1]);
                let mut dx = vec![E::zero(); b * w];
                for bi in 0..b {
                    dx[bi * w + col] = g.data()[bi];
                }
                emit(self, *x, Array::new(xs, dx).unwrap());
            }
        }
        out
    }
}

fn accumulate_into<E: Element>(slot: &mut Option<Array<E>>, contribution: Array<E>) {
    match slot {
        Some(g) => {
            for (dst, src) in g.data_mut().iter_mut().zip(contribution.data()) {
                *dst = *dst + *src;
            }
        }
        None => *slot = Some(contribution),
    }
}
