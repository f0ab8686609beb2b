use thiserror::Error;

use super::conv;
use super::data::{Scalar, TensorData};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    Exp(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp(Var, S, S),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    LstmCell { x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    RowScale { x: Var, scale: TensorData<S> },
    Softmax(Var),
    CatLogProb { logits: Var, actions: Vec<usize> },
    CatEntropy { logits: Var },
    L1Loss(Var, Var),
    MseLoss(Var, Var),
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: TensorData<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar = f32> {
    slots: Vec<Option<TensorData<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var, shape: &[usize]) -> TensorData<S> {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => TensorData::zeros(shape),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&TensorData<S>> {
        self.slots[v.0].as_ref()
    }
}

/// Records one forward pass and plays it back in reverse for gradients.
///
/// Nodes are appended in evaluation order, so the vector itself is a
/// topological order and backward is a single reverse sweep.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorData<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<S>, value: TensorData<S>, requires_grad: bool) -> Var {
        // Forward ops on finite inputs must stay finite; cheap relative to the
        // op itself and only active with debug assertions.
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?} (shape {:?})",
            std::mem::discriminant(&op),
            value.shape()
        );
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: TensorData<S>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that participates in `backward`.
    pub fn param(&mut self, value: TensorData<S>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_check("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v, self.rg(a) || self.rg(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_check("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v, self.rg(a) || self.rg(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_check("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v, self.rg(a) || self.rg(b)))
    }

    /// Elementwise min; at ties the gradient flows to the first argument.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_check("minimum", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| if x <= y { x } else { y });
        Ok(self.push(Op::Minimum(a, b), v, self.rg(a) || self.rg(b)))
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), v, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::MulScalar(a, c), v, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid_scalar);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    /// Clamp to [lo, hi]; gradient is 1 inside the closed interval, 0 outside.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let v = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        let rg = self.rg(a);
        self.push(Op::Clamp(a, lo, hi), v, rg)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Op::Sum(a), TensorData::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.value(a).as_slice().iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Op::Mean(a), TensorData::scalar(s / S::from_f64(n as f64)), rg)
    }

    // ---- shape ops ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let v = self.value(a).reshaped(shape);
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    /// Contiguous slice of a 2D tensor along `axis` (0 = rows, 1 = cols).
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 || axis > 1 || start + len > sh[axis] {
            return Err(shape_err(
                "narrow",
                format!("shape {:?}, axis {}, start {}, len {}", sh, axis, start, len),
            ));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let src = self.value(a).as_slice();
        let v = if axis == 0 {
            TensorData::new(vec![len, cols], src[start * cols..(start + len) * cols].to_vec())
        } else {
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
            TensorData::new(vec![rows, len], out)
        };
        let rg = self.rg(a);
        Ok(self.push(Op::Narrow { x: a, axis, start, len }, v, rg))
    }

    /// Concatenate two 2D tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", format!("{:?} vs {:?}", sa, sb)));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).as_slice(), self.value(b).as_slice());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a, b), TensorData::new(vec![rows, ca + cb], out), rg))
    }

    /// Concatenate 2D tensors with equal column counts along rows.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "stack_rows", detail: "empty input list".into() });
        }
        let cols = match self.shape(parts[0]) {
            [_, c] => *c,
            other => return Err(shape_err("stack_rows", format!("want 2D, got {:?}", other))),
        };
        let mut rows = 0;
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == cols => rows += r,
                other => return Err(shape_err("stack_rows", format!("{:?} vs cols {}", other, cols))),
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).as_slice());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::StackRows(parts.to_vec()), TensorData::new(vec![rows, cols], out), rg))
    }

    /// Scale each row of `x` (N x F) by the matching constant in `scale` (N).
    pub fn row_scale(&mut self, x: Var, scale: TensorData<S>) -> Result<Var, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 || scale.shape() != [sh[0]] {
            return Err(shape_err("row_scale", format!("x {:?}, scale {:?}", sh, scale.shape())));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let src = self.value(x).as_slice();
        let sc = scale.as_slice();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(src[r * cols + c] * sc[r]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::RowScale { x, scale }, TensorData::new(vec![rows, cols], out), rg))
    }

    // ---- layers ----------------------------------------------------------------

    /// y = x . w^T + b with x (N x IN), w (OUT x IN), b (OUT).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(shape_err("linear", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (n, input, out) = (sx[0], sx[1], sw[0]);
        let mut y = vec![S::zero(); n * out];
        // y = x (n,in) * w^T (in,out)
        S::gemm(
            n, input, out,
            S::one(),
            self.value(x).as_slice(), input as isize, 1,
            self.value(w).as_slice(), 1, input as isize,
            S::zero(),
            &mut y,
        );
        let bias = self.value(b).as_slice();
        for r in 0..n {
            for c in 0..out {
                y[r * out + c] += bias[c];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, TensorData::new(vec![n, out], y), rg))
    }

    /// Valid (unpadded) 2D convolution: x (N,C,H,W), w (OC,C,KH,KW), b (OC).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(shape_err("conv2d", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        if stride == 0 || sx[2] < sw[2] || sx[3] < sw[3] {
            return Err(shape_err("conv2d", format!("image {:?} smaller than kernel {:?}", sx, sw)));
        }
        let out = conv::forward(self.value(x), self.value(w), self.value(b), stride);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Conv2d { x, w, b, stride }, out, rg))
    }

    /// One LSTM step; returns (N x 2H) with h' in the left half and c' in the
    /// right half (split with [`Tape::narrow`]). Gate order along the 4H axis
    /// is input, forget, cell, output.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<Var, TensorError> {
        let (sx, sh, sc) = (self.shape(x).to_vec(), self.shape(h).to_vec(), self.shape(c).to_vec());
        let (si, shh, sb) = (self.shape(w_ih).to_vec(), self.shape(w_hh).to_vec(), self.shape(b).to_vec());
        let ok = sx.len() == 2
            && sh.len() == 2
            && sc == sh
            && sx[0] == sh[0]
            && si.len() == 2
            && shh.len() == 2
            && si[0] == 4 * sh[1]
            && si[1] == sx[1]
            && shh[0] == 4 * sh[1]
            && shh[1] == sh[1]
            && sb == [4 * sh[1]];
        if !ok {
            return Err(shape_err(
                "lstm_cell",
                format!("x {:?}, h {:?}, c {:?}, w_ih {:?}, w_hh {:?}, b {:?}", sx, sh, sc, si, shh, sb),
            ));
        }
        let pre = lstm_preactivations(
            self.value(x),
            self.value(h),
            self.value(w_ih),
            self.value(w_hh),
            self.value(b),
        );
        let (n, hid) = (sh[0], sh[1]);
        let cv = self.value(c).as_slice();
        let mut out = vec![S::zero(); n * 2 * hid];
        for r in 0..n {
            for j in 0..hid {
                let i_g = sigmoid_scalar(pre[r * 4 * hid + j]);
                let f_g = sigmoid_scalar(pre[r * 4 * hid + hid + j]);
                let g_g = pre[r * 4 * hid + 2 * hid + j].tanh();
                let o_g = sigmoid_scalar(pre[r * 4 * hid + 3 * hid + j]);
                let c_new = f_g * cv[r * hid + j] + i_g * g_g;
                out[r * 2 * hid + j] = o_g * c_new.tanh();
                out[r * 2 * hid + hid + j] = c_new;
            }
        }
        let rg = [x, h, c, w_ih, w_hh, b].iter().any(|&v| self.rg(v));
        Ok(self.push(
            Op::LstmCell { x, h, c, w_ih, w_hh, b },
            TensorData::new(vec![n, 2 * hid], out),
            rg,
        ))
    }

    // ---- probability ops ----------------------------------------------------------

    /// Row-wise softmax of a 2D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(shape_err("softmax", format!("want 2D, got {:?}", sh)));
        }
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), v, rg))
    }

    /// log softmax(logits)[i, actions[i]] for each row i.
    pub fn categorical_log_prob(&mut self, logits: Var, actions: &[usize]) -> Result<Var, TensorError> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || actions.len() != sh[0] {
            return Err(shape_err(
                "categorical_log_prob",
                format!("logits {:?}, actions len {}", sh, actions.len()),
            ));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= sh[1]) {
            return Err(TensorError::Invalid {
                op: "categorical_log_prob",
                detail: format!("action index {} out of range {}", bad, sh[1]),
            });
        }
        let (n, a_dim) = (sh[0], sh[1]);
        let z = self.value(logits).as_slice();
        let mut out = vec![S::zero(); n];
        for r in 0..n {
            let row = &z[r * a_dim..(r + 1) * a_dim];
            let (m, lse) = log_sum_exp(row);
            out[r] = row[actions[r]] - m - lse;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CatLogProb { logits, actions: actions.to_vec() },
            TensorData::new(vec![n], out),
            rg,
        ))
    }

    /// Entropy of softmax(logits) per row.
    pub fn categorical_entropy(&mut self, logits: Var) -> Result<Var, TensorError> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 {
            return Err(shape_err("categorical_entropy", format!("want 2D, got {:?}", sh)));
        }
        let (n, a_dim) = (sh[0], sh[1]);
        let z = self.value(logits).as_slice();
        let mut out = vec![S::zero(); n];
        for r in 0..n {
            let row = &z[r * a_dim..(r + 1) * a_dim];
            let (m, lse) = log_sum_exp(row);
            let mut acc = S::zero();
            for &v in row {
                let logp = v - m - lse;
                acc -= logp.exp() * logp;
            }
            out[r] = acc;
        }
        let rg = self.rg(logits);
        Ok(self.push(Op::CatEntropy { logits }, TensorData::new(vec![n], out), rg))
    }

    // ---- losses ----------------------------------------------------------------

    /// Sum of absolute elementwise differences. The subgradient at an exact
    /// match is taken as 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.binary_check("l1_loss", pred, target)?;
        let s = self
            .value(pred)
            .as_slice()
            .iter()
            .zip(self.value(target).as_slice())
            .fold(S::zero(), |acc, (&p, &t)| acc + (p - t).abs());
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::L1Loss(pred, target), TensorData::scalar(s), rg))
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.binary_check("mse_loss", pred, target)?;
        let n = S::from_f64(self.value(pred).len().max(1) as f64);
        let s = self
            .value(pred)
            .as_slice()
            .iter()
            .zip(self.value(target).as_slice())
            .fold(S::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::MseLoss(pred, target), TensorData::scalar(s / n), rg))
    }

    // ---- backward ----------------------------------------------------------------

    /// Reverse sweep from a scalar loss; returns gradients for every node with
    /// `requires_grad`. The tape is left intact (values stay readable).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, TensorError> {
        if !self.value(loss).shape().is_empty() && self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut slots: Vec<Option<TensorData<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(TensorData::new(
            self.value(loss).shape().to_vec(),
            vec![S::one()],
        ));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.backward_node(idx, &g, &mut slots);
            // leaves keep their gradient for the caller
            if matches!(self.nodes[idx].op, Op::Leaf) {
                slots[idx] = Some(g);
            }
        }
        Ok(Gradients { slots })
    }

    fn backward_node(&self, idx: usize, g: &TensorData<S>, slots: &mut [Option<TensorData<S>>]) {
        let node = &self.nodes[idx];
        let gs = g.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(*b), |x, y| x * y);
                let gb = zip_map(g, self.value(*a), |x, y| x * y);
                self.accum(slots, *a, ga);
                self.accum(slots, *b, gb);
            }
            Op::AddScalar(a) => self.accum(slots, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accum(slots, *a, g.map(|x| x * c));
            }
            Op::Exp(a) => {
                let ga = zip_map(g, &node.value, |x, y| x * y);
                self.accum(slots, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |x, v| if v > S::zero() { x } else { S::zero() });
                self.accum(slots, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, &node.value, |x, t| x * (S::one() - t * t));
                self.accum(slots, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, &node.value, |x, s| x * s * (S::one() - s));
                self.accum(slots, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = zip_map(g, self.value(*a), |x, v| {
                    if v >= lo && v <= hi {
                        x
                    } else {
                        S::zero()
                    }
                });
                self.accum(slots, *a, ga);
            }
            Op::Minimum(a, b) => {
                let ga = zip3_map(g, self.value(*a), self.value(*b), |x, va, vb| {
                    if va <= vb {
                        x
                    } else {
                        S::zero()
                    }
                });
                let gb = zip3_map(g, self.value(*a), self.value(*b), |x, va, vb| {
                    if va <= vb {
                        S::zero()
                    } else {
                        x
                    }
                });
                self.accum(slots, *a, ga);
                self.accum(slots, *b, gb);
            }
            Op::Sum(a) => {
                let gv = gs[0];
                let sh = self.value(*a).shape().to_vec();
                let n = self.value(*a).len();
                self.accum(slots, *a, TensorData::new(sh, vec![gv; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let gv = gs[0] / S::from_f64(n as f64);
                let sh = self.value(*a).shape().to_vec();
                self.accum(slots, *a, TensorData::new(sh, vec![gv; self.value(*a).len()]));
            }
            Op::Reshape(a) => {
                self.accum(slots, *a, g.reshaped(self.value(*a).shape().to_vec()));
            }
            Op::Narrow { x, axis, start, len } => {
                let sh = self.value(*x).shape().to_vec();
                let (rows, cols) = (sh[0], sh[1]);
                let mut gx = vec![S::zero(); rows * cols];
                if *axis == 0 {
                    gx[start * cols..(start + len) * cols].copy_from_slice(gs);
                } else {
                    for r in 0..rows {
                        for c in 0..*len {
                            gx[r * cols + start + c] = gs[r * len + c];
                        }
                    }
                }
                self.accum(slots, *x, TensorData::new(sh, gx));
            }
            Op::ConcatCols(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
                let mut gav = vec![S::zero(); rows * ca];
                let mut gbv = vec![S::zero(); rows * cb];
                for r in 0..rows {
                    gav[r * ca..(r + 1) * ca].copy_from_slice(&gs[r * (ca + cb)..r * (ca + cb) + ca]);
                    gbv[r * cb..(r + 1) * cb]
                        .copy_from_slice(&gs[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                self.accum(slots, *a, TensorData::new(sa, gav));
                self.accum(slots, *b, TensorData::new(sb, gbv));
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let sh = self.value(p).shape().to_vec();
                    let n = sh.iter().product::<usize>();
                    let gp = TensorData::new(sh, gs[offset..offset + n].to_vec());
                    self.accum(slots, p, gp);
                    offset += n;
                }
            }
            Op::RowScale { x, scale } => {
                let sh = self.value(*x).shape().to_vec();
                let (rows, cols) = (sh[0], sh[1]);
                let sc = scale.as_slice();
                let mut gx = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gx.push(gs[r * cols + c] * sc[r]);
                    }
                }
                self.accum(slots, *x, TensorData::new(sh, gx));
            }
            Op::Linear { x, w, b } => {
                let (n, input) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let out = self.value(*w).shape()[0];
                // dx = g (n,out) * w (out,in)
                let mut gx = vec![S::zero(); n * input];
                S::gemm(
                    n, out, input,
                    S::one(),
                    gs, out as isize, 1,
                    self.value(*w).as_slice(), input as isize, 1,
                    S::zero(),
                    &mut gx,
                );
                // dw = g^T (out,n) * x (n,in)
                let mut gw = vec![S::zero(); out * input];
                S::gemm(
                    out, n, input,
                    S::one(),
                    gs, 1, out as isize,
                    self.value(*x).as_slice(), input as isize, 1,
                    S::zero(),
                    &mut gw,
                );
                let mut gb = vec![S::zero(); out];
                for r in 0..n {
                    for c in 0..out {
                        gb[c] += gs[r * out + c];
                    }
                }
                self.accum(slots, *x, TensorData::new(vec![n, input], gx));
                self.accum(slots, *w, TensorData::new(vec![out, input], gw));
                self.accum(slots, *b, TensorData::new(vec![out], gb));
            }
            Op::Conv2d { x, w, b, stride } => {
                let (gx, gw, gb) = conv::backward(self.value(*x), self.value(*w), g, *stride);
                self.accum(slots, *x, gx);
                self.accum(slots, *w, gw);
                self.accum(slots, *b, gb);
            }
            Op::LstmCell { x, h, c, w_ih, w_hh, b } => {
                let grads = lstm_backward(
                    self.value(*x),
                    self.value(*h),
                    self.value(*c),
                    self.value(*w_ih),
                    self.value(*w_hh),
                    self.value(*b),
                    g,
                );
                self.accum(slots, *x, grads.0);
                self.accum(slots, *h, grads.1);
                self.accum(slots, *c, grads.2);
                self.accum(slots, *w_ih, grads.3);
                self.accum(slots, *w_hh, grads.4);
                self.accum(slots, *b, grads.5);
            }
            Op::Softmax(a) => {
                // ds = p * (g - sum(g * p)) per row
                let p = node.value.as_slice();
                let sh = self.value(*a).shape().to_vec();
                let (n, cols) = (sh[0], sh[1]);
                let mut ga = vec![S::zero(); n * cols];
                for r in 0..n {
                    let mut dot = S::zero();
                    for c in 0..cols {
                        dot += gs[r * cols + c] * p[r * cols + c];
                    }
                    for c in 0..cols {
                        ga[r * cols + c] = p[r * cols + c] * (gs[r * cols + c] - dot);
                    }
                }
                self.accum(slots, *a, TensorData::new(sh, ga));
            }
            Op::CatLogProb { logits, actions } => {
                let p = softmax_rows(self.value(*logits));
                let pv = p.as_slice();
                let sh = self.value(*logits).shape().to_vec();
                let (n, a_dim) = (sh[0], sh[1]);
                let mut gl = vec![S::zero(); n * a_dim];
                for r in 0..n {
                    for c in 0..a_dim {
                        let indicator = if c == actions[r] { S::one() } else { S::zero() };
                        gl[r * a_dim + c] = gs[r] * (indicator - pv[r * a_dim + c]);
                    }
                }
                self.accum(slots, *logits, TensorData::new(sh, gl));
            }
            Op::CatEntropy { logits } => {
                // dH/dz_k = -p_k (log p_k + H)
                let sh = self.value(*logits).shape().to_vec();
                let (n, a_dim) = (sh[0], sh[1]);
                let z = self.value(*logits).as_slice();
                let ent = node.value.as_slice();
                let mut gl = vec![S::zero(); n * a_dim];
                for r in 0..n {
                    let row = &z[r * a_dim..(r + 1) * a_dim];
                    let (m, lse) = log_sum_exp(row);
                    for c in 0..a_dim {
                        let logp = row[c] - m - lse;
                        gl[r * a_dim + c] = -gs[r] * logp.exp() * (logp + ent[r]);
                    }
                }
                self.accum(slots, *logits, TensorData::new(sh, gl));
            }
            Op::L1Loss(pred, target) => {
                let gv = gs[0];
                let sign = zip_map(self.value(*pred), self.value(*target), |p, t| {
                    if p > t {
                        gv
                    } else if p < t {
                        -gv
                    } else {
                        S::zero()
                    }
                });
                self.accum(slots, *pred, sign.clone());
                self.accum(slots, *target, sign.map(|x| -x));
            }
            Op::MseLoss(pred, target) => {
                let n = S::from_f64(self.value(*pred).len().max(1) as f64);
                let gv = gs[0];
                let two = S::from_f64(2.0);
                let gp = zip_map(self.value(*pred), self.value(*target), |p, t| {
                    gv * two * (p - t) / n
                });
                self.accum(slots, *pred, gp.clone());
                self.accum(slots, *target, gp.map(|x| -x));
            }
        }
    }

    fn accum(&self, slots: &mut [Option<TensorData<S>>], v: Var, g: TensorData<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(existing) => {
                let ex = existing.make_mut();
                for (e, x) in ex.iter_mut().zip(g.as_slice()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn zip_map<S: Scalar>(a: &TensorData<S>, b: &TensorData<S>, f: impl Fn(S, S) -> S) -> TensorData<S> {
    debug_assert_eq!(a.len(), b.len());
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    TensorData::new(a.shape().to_vec(), data)
}

fn zip3_map<S: Scalar>(
    a: &TensorData<S>,
    b: &TensorData<S>,
    c: &TensorData<S>,
    f: impl Fn(S, S, S) -> S,
) -> TensorData<S> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .zip(c.as_slice())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    TensorData::new(a.shape().to_vec(), data)
}

/// (max, log sum exp(x - max)) of a row.
fn log_sum_exp<S: Scalar>(row: &[S]) -> (S, S) {
    let m = row.iter().fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
    let s = row.iter().fold(S::zero(), |acc, &v| acc + (v - m).exp());
    (m, s.ln())
}

fn softmax_rows<S: Scalar>(t: &TensorData<S>) -> TensorData<S> {
    let sh = t.shape();
    let (n, cols) = (sh[0], sh[1]);
    let z = t.as_slice();
    let mut out = vec![S::zero(); n * cols];
    for r in 0..n {
        let row = &z[r * cols..(r + 1) * cols];
        let m = row.iter().fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
        let mut s = S::zero();
        for c in 0..cols {
            let e = (row[c] - m).exp();
            out[r * cols + c] = e;
            s += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= s;
        }
    }
    TensorData::new(sh.to_vec(), out)
}

/// pre = x . w_ih^T + h . w_hh^T + b, shape (N x 4H).
fn lstm_preactivations<S: Scalar>(
    x: &TensorData<S>,
    h: &TensorData<S>,
    w_ih: &TensorData<S>,
    w_hh: &TensorData<S>,
    b: &TensorData<S>,
) -> Vec<S> {
    let n = x.shape()[0];
    let input = x.shape()[1];
    let hid = h.shape()[1];
    let mut pre = vec![S::zero(); n * 4 * hid];
    S::gemm(
        n, input, 4 * hid,
        S::one(),
        x.as_slice(), input as isize, 1,
        w_ih.as_slice(), 1, input as isize,
        S::zero(),
        &mut pre,
    );
    S::gemm(
        n, hid, 4 * hid,
        S::one(),
        h.as_slice(), hid as isize, 1,
        w_hh.as_slice(), 1, hid as isize,
        S::one(),
        &mut pre,
    );
    let bias = b.as_slice();
    for r in 0..n {
        for c in 0..4 * hid {
            pre[r * 4 * hid + c] += bias[c];
        }
    }
    pre
}

type LstmGrads<S> = (
    TensorData<S>,
    TensorData<S>,
    TensorData<S>,
    TensorData<S>,
    TensorData<S>,
    TensorData<S>,
);

/// Gradients for one LSTM step. Gates are recomputed from the stored inputs
/// rather than cached, trading a little compute for tape memory.
#[allow(clippy::too_many_arguments)]
fn lstm_backward<S: Scalar>(
    x: &TensorData<S>,
    h: &TensorData<S>,
    c: &TensorData<S>,
    w_ih: &TensorData<S>,
    w_hh: &TensorData<S>,
    b: &TensorData<S>,
    g: &TensorData<S>,
) -> LstmGrads<S> {
    let n = x.shape()[0];
    let input = x.shape()[1];
    let hid = h.shape()[1];
    let pre = lstm_preactivations(x, h, w_ih, w_hh, b);
    let cv = c.as_slice();
    let gs = g.as_slice(); // (n, 2H): dh' then dc'

    let mut dpre = vec![S::zero(); n * 4 * hid];
    for r in 0..n {
        for j in 0..hid {
            let i_g = sigmoid_scalar(pre[r * 4 * hid + j]);
            let f_g = sigmoid_scalar(pre[r * 4 * hid + hid + j]);
            let g_g = pre[r * 4 * hid + 2 * hid + j].tanh();
            let o_g = sigmoid_scalar(pre[r * 4 * hid + 3 * hid + j]);
            let c_new = f_g * cv[r * hid + j] + i_g * g_g;
            let tc = c_new.tanh();

            let dh_new = gs[r * 2 * hid + j];
            let dc_ext = gs[r * 2 * hid + hid + j];
            let d_o = dh_new * tc;
            let dc_total = dc_ext + dh_new * o_g * (S::one() - tc * tc);

            let d_i = dc_total * g_g;
            let d_f = dc_total * cv[r * hid + j];
            let d_g = dc_total * i_g;

            dpre[r * 4 * hid + j] = d_i * i_g * (S::one() - i_g);
            dpre[r * 4 * hid + hid + j] = d_f * f_g * (S::one() - f_g);
            dpre[r * 4 * hid + 2 * hid + j] = d_g * (S::one() - g_g * g_g);
            dpre[r * 4 * hid + 3 * hid + j] = d_o * o_g * (S::one() - o_g);
        }
    }

    // dc = dc_total * f  (recompute f gate)
    let mut dc = vec![S::zero(); n * hid];
    for r in 0..n {
        for j in 0..hid {
            let i_g = sigmoid_scalar(pre[r * 4 * hid + j]);
            let f_g = sigmoid_scalar(pre[r * 4 * hid + hid + j]);
            let g_g = pre[r * 4 * hid + 2 * hid + j].tanh();
            let o_g = sigmoid_scalar(pre[r * 4 * hid + 3 * hid + j]);
            let c_new = f_g * cv[r * hid + j] + i_g * g_g;
            let tc = c_new.tanh();
            let dh_new = gs[r * 2 * hid + j];
            let dc_ext = gs[r * 2 * hid + hid + j];
            let dc_total = dc_ext + dh_new * o_g * (S::one() - tc * tc);
            dc[r * hid + j] = dc_total * f_g;
        }
    }

    // dx = dpre (n,4H) * w_ih (4H,in)
    let mut dx = vec![S::zero(); n * input];
    S::gemm(
        n, 4 * hid, input,
        S::one(),
        &dpre, (4 * hid) as isize, 1,
        w_ih.as_slice(), input as isize, 1,
        S::zero(),
        &mut dx,
    );
    // dh = dpre (n,4H) * w_hh (4H,H)
    let mut dh = vec![S::zero(); n * hid];
    S::gemm(
        n, 4 * hid, hid,
        S::one(),
        &dpre, (4 * hid) as isize, 1,
        w_hh.as_slice(), hid as isize, 1,
        S::zero(),
        &mut dh,
    );
    // dw_ih = dpre^T (4H,n) * x (n,in)
    let mut dwih = vec![S::zero(); 4 * hid * input];
    S::gemm(
        4 * hid, n, input,
        S::one(),
        &dpre, 1, (4 * hid) as isize,
        x.as_slice(), input as isize, 1,
        S::zero(),
        &mut dwih,
    );
    // dw_hh = dpre^T (4H,n) * h (n,H)
    let mut dwhh = vec![S::zero(); 4 * hid * hid];
    S::gemm(
        4 * hid, n, hid,
        S::one(),
        &dpre, 1, (4 * hid) as isize,
        h.as_slice(), hid as isize, 1,
        S::zero(),
        &mut dwhh,
    );
    let mut db = vec![S::zero(); 4 * hid];
    for r in 0..n {
        for cidx in 0..4 * hid {
            db[cidx] += dpre[r * 4 * hid + cidx];
        }
    }

    (
        TensorData::new(vec![n, input], dx),
        TensorData::new(vec![n, hid], dh),
        TensorData::new(vec![n, hid], dc),
        TensorData::new(vec![4 * hid, input], dwih),
        TensorData::new(vec![4 * hid, hid], dwhh),
        TensorData::new(vec![4 * hid], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tape<f64>;

    #[test]
    fn relu_values() {
        let mut t = T64::new();
        let x = t.constant(TensorData::from_f64_slice(&[3], &[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l1_loss_identity_is_zero() {
        let mut t = T64::new();
        let x = t.param(TensorData::from_f64_slice(&[4], &[0.5, -2.0, 3.0, 0.0]));
        let y = t.constant(TensorData::from_f64_slice(&[4], &[0.5, -2.0, 3.0, 0.0]));
        let loss = t.l1_loss(x, y).unwrap();
        assert_eq!(t.value(loss).item(), 0.0);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x, &[4]).as_slice(), &[0.0; 4]);
    }

    #[test]
    fn l1_loss_gradient_is_sign() {
        let mut t = T64::new();
        let w = t.param(TensorData::from_f64_slice(&[3], &[2.0, -1.0, 0.5]));
        let target = t.constant(TensorData::from_f64_slice(&[3], &[1.0, 0.0, 0.9]));
        let loss = t.l1_loss(w, target).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w, &[3]).as_slice(), &[1.0, -1.0, -1.0]);
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut t = T64::new();
        let w = t.param(TensorData::from_f64_slice(&[3], &[1.0, 2.0, 3.0]));
        let x = t.constant(TensorData::from_f64_slice(&[3], &[4.0, 5.0, 6.0]));
        let p = t.mul(w, x).unwrap();
        let loss = t.sum(p);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w, &[3]).as_slice(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv2d_all_ones_hand_example() {
        // 3x3 ones kernel over 5x5 ones image, stride 1 -> 3x3 of 9s
        let mut t = T64::new();
        let x = t.constant(TensorData::from_f64_slice(&[1, 1, 5, 5], &[1.0; 25]));
        let w = t.param(TensorData::from_f64_slice(&[1, 1, 3, 3], &[1.0; 9]));
        let b = t.param(TensorData::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert_eq!(t.value(y).as_slice(), &[9.0; 9]);
    }

    #[test]
    fn lstm_cell_zero_weights_zero_state_gives_zero() {
        let mut t = T64::new();
        let x = t.constant(TensorData::from_f64_slice(&[2, 3], &[5.0, -1.0, 2.0, 0.3, 9.0, -4.0]));
        let h = t.constant(TensorData::zeros(&[2, 4]));
        let c = t.constant(TensorData::zeros(&[2, 4]));
        let w_ih = t.param(TensorData::zeros(&[16, 3]));
        let w_hh = t.param(TensorData::zeros(&[16, 4]));
        let b = t.param(TensorData::zeros(&[16]));
        let out = t.lstm_cell(x, h, c, w_ih, w_hh, b).unwrap();
        assert!(t.value(out).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = T64::new();
        let x = t.param(TensorData::from_f64_slice(&[2], &[1.0, 2.0]));
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = T64::new();
        let a = t.constant(TensorData::zeros(&[2]));
        let b = t.constant(TensorData::zeros(&[3]));
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[2]"));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = T64::new();
        let x = t.constant(TensorData::from_f64_slice(&[2, 4], &[0.1, 3.0, -2.0, 0.5, 1.0, 1.0, 1.0, 1.0]));
        let p = t.softmax(x).unwrap();
        let v = t.value(p).as_slice();
        for r in 0..2 {
            let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((v[4] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn forward_determinism_bitwise() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let x = t.constant(TensorData::from_f64_slice(&[2, 3], &[0.1, 0.7, -0.3, 0.9, 0.2, -0.8]));
            let w = t.param(TensorData::from_f64_slice(&[2, 3], &[0.5, -0.1, 0.2, 0.3, 0.8, -0.7]));
            let b = t.param(TensorData::from_f64_slice(&[2], &[0.05, -0.02]));
            let y = t.linear(x, w, b).unwrap();
            let y = t.tanh(y);
            let loss = t.mean(y);
            t.value(loss).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
