use crate::error::{RapError, Result};
use crate::nnkernel::params::{ParamId, ParameterSet, Tensor};

/// Probability floor inside cross-entropy so -ln never sees zero.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(u32);

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Gather { src: Val, row: usize },
    Affine { w: Val, x: Val, b: Val },
    Matvec { w: Val, x: Val },
    RnnStep { w_in: Val, x: Val, w_hh: Val, h_prev: Val, b: Val },
    RowsSum { src: Val, rows: (u32, u32) },
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    AddN { items: (u32, u32) },
    Scale(Val, f64),
    Relu(Val),
    Tanh(Val),
    Sigmoid(Val),
    Softplus(Val),
    Softmax(Val),
    Concat(Val, Val),
    CrossEntropy { probs: Val, label: usize },
    Sum(Val),
    SumSq(Val),
}

struct Node {
    off: usize,
    len: usize,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

/// Records a forward computation over dense f64 tensors and replays it in
/// reverse to accumulate gradients. Leaves may be bound to entries of a
/// [`ParameterSet`]; `backward` adds their gradients into the set's
/// persistent buffers. Buffers are bump-allocated so a tape can be `reset`
/// and reused across training steps without reallocating.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    pool: Vec<u32>,
    scratch: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all recorded nodes but keep buffer capacity.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.grads.clear();
        self.pool.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, needs_grad: bool, op: Op) -> Val {
        let len = rows * cols;
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        self.nodes.push(Node {
            off,
            len,
            rows,
            cols,
            needs_grad,
            op,
        });
        Val(self.nodes.len() as u32 - 1)
    }

    fn node(&self, v: Val) -> &Node {
        &self.nodes[v.0 as usize]
    }

    fn needs(&self, v: Val) -> bool {
        self.node(v).needs_grad
    }

    pub fn value(&self, v: Val) -> &[f64] {
        let n = self.node(v);
        &self.vals[n.off..n.off + n.len]
    }

    pub fn shape(&self, v: Val) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Val) -> f64 {
        debug_assert_eq!(self.node(v).len, 1);
        self.vals[self.node(v).off]
    }

    fn vals_mut(&mut self, v: Val) -> &mut [f64] {
        let (off, len) = {
            let n = self.node(v);
            (n.off, n.len)
        };
        &mut self.vals[off..off + len]
    }

    /// Leaf bound to a parameter: the current values are copied in and
    /// `backward` accumulates the leaf gradient into the parameter's buffer.
    pub fn param(&mut self, ps: &ParameterSet, id: ParamId) -> Val {
        let t = ps.value(id);
        let (r, c) = t.dims2();
        let v = self.push(r, c, true, Op::Leaf { param: Some(id) });
        self.vals_mut(v).copy_from_slice(&t.vals);
        v
    }

    /// Leaf whose values are treated as constants (no gradient flows).
    pub fn constant(&mut self, t: &Tensor) -> Val {
        let (r, c) = t.dims2();
        let v = self.push(r, c, false, Op::Leaf { param: None });
        self.vals_mut(v).copy_from_slice(&t.vals);
        v
    }

    /// Constant leaf built from a slice, shaped as a row vector.
    pub fn constant_vec(&mut self, data: &[f64]) -> Val {
        let v = self.push(1, data.len(), false, Op::Leaf { param: None });
        self.vals_mut(v).copy_from_slice(data);
        v
    }

    /// Unbound differentiable leaf; used by tests probing tape mechanics.
    pub fn var(&mut self, t: &Tensor) -> Val {
        let (r, c) = t.dims2();
        let v = self.push(r, c, true, Op::Leaf { param: None });
        self.vals_mut(v).copy_from_slice(&t.vals);
        v
    }

    /// Row `row` of a rank-2 node as a vector.
    pub fn gather(&mut self, src: Val, row: usize) -> Result<Val> {
        let (rows, cols, off, needs) = {
            let n = self.node(src);
            (n.rows, n.cols, n.off, n.needs_grad)
        };
        if row >= rows {
            return Err(RapError::argument(format!(
                "gather row {row} out of range for {rows}x{cols} tensor"
            )));
        }
        let v = self.push(1, cols, needs, Op::Gather { src, row });
        let (dst_off, n) = {
            let d = self.node(v);
            (d.off, d.len)
        };
        self.vals.copy_within(off + row * cols..off + row * cols + n, dst_off);
        Ok(v)
    }

    /// W x + b for `w` of shape (r, c), `x` a length-c vector, `b` length r.
    pub fn affine(&mut self, w: Val, x: Val, b: Val) -> Result<Val> {
        let (wr, wc) = self.shape(w);
        let xl = self.node(x).len;
        let bl = self.node(b).len;
        if wc != xl || wr != bl {
            return Err(RapError::Shape {
                op: "affine",
                lhs: vec![wr, wc],
                rhs: vec![xl, bl],
            });
        }
        let needs = self.needs(w) || self.needs(x) || self.needs(b);
        let v = self.push(1, wr, needs, Op::Affine { w, x, b });
        let (wo, xo, bo, vo) = (
            self.node(w).off,
            self.node(x).off,
            self.node(b).off,
            self.node(v).off,
        );
        for r in 0..wr {
            let row = &self.vals[wo + r * wc..wo + (r + 1) * wc];
            let xv = &self.vals[xo..xo + wc];
            let s = dot(row, xv) + self.vals[bo + r];
            self.vals[vo + r] = s;
        }
        Ok(v)
    }

    /// W x without bias.
    pub fn matvec(&mut self, w: Val, x: Val) -> Result<Val> {
        let (wr, wc) = self.shape(w);
        let xl = self.node(x).len;
        if wc != xl {
            return Err(RapError::Shape {
                op: "matvec",
                lhs: vec![wr, wc],
                rhs: vec![xl],
            });
        }
        let needs = self.needs(w) || self.needs(x);
        let v = self.push(1, wr, needs, Op::Matvec { w, x });
        let (wo, xo, vo) = (self.node(w).off, self.node(x).off, self.node(v).off);
        for r in 0..wr {
            let row = &self.vals[wo + r * wc..wo + (r + 1) * wc];
            let xv = &self.vals[xo..xo + wc];
            self.vals[vo + r] = dot(row, xv);
        }
        Ok(v)
    }

    /// Fused Elman cell: tanh(W_in x + W_hh h_prev + b).
    pub fn rnn_step(&mut self, w_in: Val, x: Val, w_hh: Val, h_prev: Val, b: Val) -> Result<Val> {
        let (ir, ic) = self.shape(w_in);
        let (hr, hc) = self.shape(w_hh);
        let xl = self.node(x).len;
        let hl = self.node(h_prev).len;
        let bl = self.node(b).len;
        if ic != xl || hr != hc || hc != hl || ir != hr || bl != hr {
            return Err(RapError::Shape {
                op: "rnn_step",
                lhs: vec![ir, ic, hr, hc],
                rhs: vec![xl, hl, bl],
            });
        }
        let needs = self.needs(w_in)
            || self.needs(x)
            || self.needs(w_hh)
            || self.needs(h_prev)
            || self.needs(b);
        let v = self.push(
            1,
            hr,
            needs,
            Op::RnnStep {
                w_in,
                x,
                w_hh,
                h_prev,
                b,
            },
        );
        let (io, xo, ho, po, bo, vo) = (
            self.node(w_in).off,
            self.node(x).off,
            self.node(w_hh).off,
            self.node(h_prev).off,
            self.node(b).off,
            self.node(v).off,
        );
        for r in 0..hr {
            let wi = &self.vals[io + r * ic..io + (r + 1) * ic];
            let wh = &self.vals[ho + r * hc..ho + (r + 1) * hc];
            let xv = &self.vals[xo..xo + ic];
            let pv = &self.vals[po..po + hc];
            let s = dot(wi, xv) + dot(wh, pv) + self.vals[bo + r];
            self.vals[vo + r] = s.tanh();
        }
        Ok(v)
    }

    /// Sum of the selected rows of a rank-2 node. Equivalent to multiplying
    /// by the transpose of a multi-hot indicator vector.
    pub fn rows_sum(&mut self, src: Val, rows: &[usize]) -> Result<Val> {
        let (sr, sc) = self.shape(src);
        for &r in rows {
            if r >= sr {
                return Err(RapError::argument(format!(
                    "rows_sum index {r} out of range for {sr}x{sc} tensor"
                )));
            }
        }
        let start = self.pool.len() as u32;
        self.pool.extend(rows.iter().map(|&r| r as u32));
        let needs = self.needs(src);
        let v = self.push(
            1,
            sc,
            needs,
            Op::RowsSum {
                src,
                rows: (start, rows.len() as u32),
            },
        );
        let so = self.node(src).off;
        let vo = self.node(v).off;
        for &r in rows {
            for c in 0..sc {
                self.vals[vo + c] += self.vals[so + r * sc + c];
            }
        }
        Ok(v)
    }

    fn binary_same_shape(&mut self, a: Val, b: Val, op_name: &'static str) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if self.node(a).len != self.node(b).len {
            return Err(RapError::Shape {
                op: op_name,
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        Ok((ar, ac))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let (r, c) = self.binary_same_shape(a, b, "add")?;
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(r, c, needs, Op::Add(a, b));
        let (ao, bo, vo, n) = (
            self.node(a).off,
            self.node(b).off,
            self.node(v).off,
            self.node(v).len,
        );
        for i in 0..n {
            self.vals[vo + i] = self.vals[ao + i] + self.vals[bo + i];
        }
        Ok(v)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(r, c, needs, Op::Sub(a, b));
        let (ao, bo, vo, n) = (
            self.node(a).off,
            self.node(b).off,
            self.node(v).off,
            self.node(v).len,
        );
        for i in 0..n {
            self.vals[vo + i] = self.vals[ao + i] - self.vals[bo + i];
        }
        Ok(v)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(r, c, needs, Op::Mul(a, b));
        let (ao, bo, vo, n) = (
            self.node(a).off,
            self.node(b).off,
            self.node(v).off,
            self.node(v).len,
        );
        for i in 0..n {
            self.vals[vo + i] = self.vals[ao + i] * self.vals[bo + i];
        }
        Ok(v)
    }

    /// Element-wise sum of any number of same-shape nodes.
    pub fn add_n(&mut self, items: &[Val]) -> Result<Val> {
        let Some(&first) = items.first() else {
            return Err(RapError::argument("add_n needs at least one input"));
        };
        let (r, c) = self.shape(first);
        for &it in items {
            self.binary_same_shape(first, it, "add_n")?;
        }
        let start = self.pool.len() as u32;
        self.pool.extend(items.iter().map(|v| v.0));
        let needs = items.iter().any(|&v| self.needs(v));
        let v = self.push(
            r,
            c,
            needs,
            Op::AddN {
                items: (start, items.len() as u32),
            },
        );
        let (vo, n) = (self.node(v).off, self.node(v).len);
        for &it in items {
            let io = self.node(it).off;
            for i in 0..n {
                self.vals[vo + i] += self.vals[io + i];
            }
        }
        Ok(v)
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let (r, cc) = self.shape(a);
        let needs = self.needs(a);
        let v = self.push(r, cc, needs, Op::Scale(a, c));
        let (ao, vo, n) = (self.node(a).off, self.node(v).off, self.node(v).len);
        for i in 0..n {
            self.vals[vo + i] = self.vals[ao + i] * c;
        }
        v
    }

    pub fn relu(&mut self, a: Val) -> Val {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Logistic sigmoid, stabilized so large |x| neither overflows nor
    /// produces values outside (0, 1).
    pub fn sigmoid(&mut self, a: Val) -> Val {
        self.unary(a, Op::Sigmoid(a), sigmoid_stable)
    }

    /// softplus(x) = ln(1 + e^x); -ln sigmoid(x) == softplus(-x).
    pub fn softplus(&mut self, a: Val) -> Val {
        self.unary(a, Op::Softplus(a), softplus_stable)
    }

    fn unary(&mut self, a: Val, op: Op, f: impl Fn(f64) -> f64) -> Val {
        let (r, c) = self.shape(a);
        let needs = self.needs(a);
        let v = self.push(r, c, needs, op);
        let (ao, vo, n) = (self.node(a).off, self.node(v).off, self.node(v).len);
        for i in 0..n {
            self.vals[vo + i] = f(self.vals[ao + i]);
        }
        v
    }

    /// Max-subtracted softmax over a rank-1 node.
    pub fn softmax(&mut self, a: Val) -> Result<Val> {
        let n = self.node(a).len;
        if n == 0 {
            return Err(RapError::argument("softmax of empty tensor"));
        }
        let (r, c) = self.shape(a);
        let needs = self.needs(a);
        let v = self.push(r, c, needs, Op::Softmax(a));
        let (ao, vo) = (self.node(a).off, self.node(v).off);
        let mut mx = f64::NEG_INFINITY;
        for i in 0..n {
            mx = mx.max(self.vals[ao + i]);
        }
        let mut z = 0.0;
        for i in 0..n {
            let e = (self.vals[ao + i] - mx).exp();
            self.vals[vo + i] = e;
            z += e;
        }
        for i in 0..n {
            self.vals[vo + i] /= z;
        }
        Ok(v)
    }

    pub fn concat(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ar, _) = self.shape(a);
        let (br, _) = self.shape(b);
        if ar != 1 || br != 1 {
            return Err(RapError::Shape {
                op: "concat",
                lhs: vec![ar],
                rhs: vec![br],
            });
        }
        let (al, bl) = (self.node(a).len, self.node(b).len);
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(1, al + bl, needs, Op::Concat(a, b));
        let (ao, bo, vo) = (self.node(a).off, self.node(b).off, self.node(v).off);
        self.vals.copy_within(ao..ao + al, vo);
        self.vals.copy_within(bo..bo + bl, vo + al);
        Ok(v)
    }

    /// -ln(probs[label]) with the probability floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Val, label: usize) -> Result<Val> {
        let n = self.node(probs).len;
        if label >= n {
            return Err(RapError::argument(format!(
                "class label {label} out of range for {n} classes"
            )));
        }
        let needs = self.needs(probs);
        let v = self.push(1, 1, needs, Op::CrossEntropy { probs, label });
        let p = self.vals[self.node(probs).off + label];
        let vo = self.node(v).off;
        self.vals[vo] = -(p.max(PROB_FLOOR)).ln();
        Ok(v)
    }

    pub fn sum(&mut self, a: Val) -> Val {
        let needs = self.needs(a);
        let v = self.push(1, 1, needs, Op::Sum(a));
        let (ao, vo, n) = (self.node(a).off, self.node(v).off, self.node(a).len);
        let mut s = 0.0;
        for i in 0..n {
            s += self.vals[ao + i];
        }
        self.vals[vo] = s;
        v
    }

    /// Sum of squared entries; the building block for L2 regularizers.
    pub fn sum_sq(&mut self, a: Val) -> Val {
        let needs = self.needs(a);
        let v = self.push(1, 1, needs, Op::SumSq(a));
        let (ao, vo, n) = (self.node(a).off, self.node(v).off, self.node(a).len);
        let mut s = 0.0;
        for i in 0..n {
            let x = self.vals[ao + i];
            s += x * x;
        }
        self.vals[vo] = s;
        v
    }

    /// Reverse sweep from a scalar loss. Gradients of parameter-bound leaves
    /// are added into `ps`; calling twice without `ps.zero_grads()` doubles
    /// them.
    pub fn backward(&mut self, loss: Val, ps: &mut ParameterSet) -> Result<()> {
        if (loss.0 as usize) >= self.nodes.len() {
            return Err(RapError::usage("backward on a value from a cleared or foreign tape"));
        }
        if self.node(loss).len != 1 {
            return Err(RapError::usage("backward requires a scalar loss"));
        }
        self.grads.clear();
        self.grads.resize(self.vals.len(), 0.0);
        let loss_off = self.node(loss).off;
        self.grads[loss_off] = 1.0;

        for i in (0..=loss.0 as usize).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (off, len) = (self.nodes[i].off, self.nodes[i].len);
            // Output gradient is copied out so input segments can be
            // mutated without aliasing.
            self.scratch.clear();
            self.scratch.extend_from_slice(&self.grads[off..off + len]);
            if self.scratch.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Gather { src, row } => {
                    let n = self.node(src);
                    let (so, sc) = (n.off, n.cols);
                    for c in 0..len {
                        self.grads[so + row * sc + c] += self.scratch[c];
                    }
                }
                Op::Affine { w, x, b } => {
                    let (wr, wc) = self.shape(w);
                    let (wo, xo, bo) = (self.node(w).off, self.node(x).off, self.node(b).off);
                    if self.needs(b) {
                        for r in 0..wr {
                            self.grads[bo + r] += self.scratch[r];
                        }
                    }
                    if self.needs(x) {
                        for r in 0..wr {
                            let g = self.scratch[r];
                            if g != 0.0 {
                                let (gx, wrow) =
                                    split_two(&mut self.grads, &self.vals, xo, wo + r * wc, wc);
                                axpy(gx, g, wrow);
                            }
                        }
                    }
                    if self.needs(w) {
                        for r in 0..wr {
                            let g = self.scratch[r];
                            if g != 0.0 {
                                let (gw, xv) =
                                    split_two(&mut self.grads, &self.vals, wo + r * wc, xo, wc);
                                axpy(gw, g, xv);
                            }
                        }
                    }
                }
                Op::Matvec { w, x } => {
                    let (wr, wc) = self.shape(w);
                    let (wo, xo) = (self.node(w).off, self.node(x).off);
                    if self.needs(x) {
                        for r in 0..wr {
                            let g = self.scratch[r];
                            if g != 0.0 {
                                let (gx, wrow) =
                                    split_two(&mut self.grads, &self.vals, xo, wo + r * wc, wc);
                                axpy(gx, g, wrow);
                            }
                        }
                    }
                    if self.needs(w) {
                        for r in 0..wr {
                            let g = self.scratch[r];
                            if g != 0.0 {
                                let (gw, xv) =
                                    split_two(&mut self.grads, &self.vals, wo + r * wc, xo, wc);
                                axpy(gw, g, xv);
                            }
                        }
                    }
                }
                Op::RnnStep {
                    w_in,
                    x,
                    w_hh,
                    h_prev,
                    b,
                } => {
                    let (_, ic) = self.shape(w_in);
                    let (_, hc) = self.shape(w_hh);
                    let (io, xo, ho, po, bo) = (
                        self.node(w_in).off,
                        self.node(x).off,
                        self.node(w_hh).off,
                        self.node(h_prev).off,
                        self.node(b).off,
                    );
                    // d = (1 - h^2) * g_out, computed in scratch in place.
                    for r in 0..len {
                        let h = self.vals[off + r];
                        self.scratch[r] *= 1.0 - h * h;
                    }
                    if self.needs(b) {
                        for r in 0..len {
                            self.grads[bo + r] += self.scratch[r];
                        }
                    }
                    for r in 0..len {
                        let d = self.scratch[r];
                        if d == 0.0 {
                            continue;
                        }
                        if self.needs(x) {
                            let (gx, wrow) =
                                split_two(&mut self.grads, &self.vals, xo, io + r * ic, ic);
                            axpy(gx, d, wrow);
                        }
                        if self.needs(w_in) {
                            let (gw, xv) =
                                split_two(&mut self.grads, &self.vals, io + r * ic, xo, ic);
                            axpy(gw, d, xv);
                        }
                        if self.needs(h_prev) {
                            let (gh, wrow) =
                                split_two(&mut self.grads, &self.vals, po, ho + r * hc, hc);
                            axpy(gh, d, wrow);
                        }
                        if self.needs(w_hh) {
                            let (gw, hv) =
                                split_two(&mut self.grads, &self.vals, ho + r * hc, po, hc);
                            axpy(gw, d, hv);
                        }
                    }
                }
                Op::RowsSum { src, rows } => {
                    let (so, sc) = (self.node(src).off, self.node(src).cols);
                    let (start, cnt) = rows;
                    for k in 0..cnt as usize {
                        let r = self.pool[start as usize + k] as usize;
                        for c in 0..sc {
                            self.grads[so + r * sc + c] += self.scratch[c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (tgt, wants) in [(a, self.needs(a)), (b, self.needs(b))] {
                        if wants {
                            let o = self.node(tgt).off;
                            for i in 0..len {
                                self.grads[o + i] += self.scratch[i];
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        let o = self.node(a).off;
                        for i in 0..len {
                            self.grads[o + i] += self.scratch[i];
                        }
                    }
                    if self.needs(b) {
                        let o = self.node(b).off;
                        for i in 0..len {
                            self.grads[o + i] -= self.scratch[i];
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, bo) = (self.node(a).off, self.node(b).off);
                    if self.needs(a) {
                        for i in 0..len {
                            self.grads[ao + i] += self.scratch[i] * self.vals[bo + i];
                        }
                    }
                    if self.needs(b) {
                        for i in 0..len {
                            self.grads[bo + i] += self.scratch[i] * self.vals[ao + i];
                        }
                    }
                }
                Op::AddN { items } => {
                    let (start, cnt) = items;
                    for k in 0..cnt as usize {
                        let it = Val(self.pool[start as usize + k]);
                        if self.needs(it) {
                            let o = self.node(it).off;
                            for i in 0..len {
                                self.grads[o + i] += self.scratch[i];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let o = self.node(a).off;
                    for i in 0..len {
                        self.grads[o + i] += self.scratch[i] * c;
                    }
                }
                Op::Relu(a) => {
                    let o = self.node(a).off;
                    for i in 0..len {
                        if self.vals[o + i] > 0.0 {
                            self.grads[o + i] += self.scratch[i];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let o = self.node(a).off;
                    for i in 0..len {
                        let y = self.vals[off + i];
                        self.grads[o + i] += self.scratch[i] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let o = self.node(a).off;
                    for i in 0..len {
                        let y = self.vals[off + i];
                        self.grads[o + i] += self.scratch[i] * y * (1.0 - y);
                    }
                }
                Op::Softplus(a) => {
                    let o = self.node(a).off;
                    for i in 0..len {
                        let x = self.vals[o + i];
                        self.grads[o + i] += self.scratch[i] * sigmoid_stable(x);
                    }
                }
                Op::Softmax(a) => {
                    let o = self.node(a).off;
                    let mut gp = 0.0;
                    for i in 0..len {
                        gp += self.scratch[i] * self.vals[off + i];
                    }
                    for i in 0..len {
                        let p = self.vals[off + i];
                        self.grads[o + i] += p * (self.scratch[i] - gp);
                    }
                }
                Op::Concat(a, b) => {
                    let (al, ao) = (self.node(a).len, self.node(a).off);
                    let bo = self.node(b).off;
                    if self.needs(a) {
                        for i in 0..al {
                            self.grads[ao + i] += self.scratch[i];
                        }
                    }
                    if self.needs(b) {
                        for i in 0..len - al {
                            self.grads[bo + i] += self.scratch[al + i];
                        }
                    }
                }
                Op::CrossEntropy { probs, label } => {
                    let po = self.node(probs).off;
                    let p = self.vals[po + label];
                    // Below the floor the loss is constant, so no gradient.
                    if p > PROB_FLOOR {
                        self.grads[po + label] -= self.scratch[0] / p;
                    }
                }
                Op::Sum(a) => {
                    let o = self.node(a).off;
                    let n = self.node(a).len;
                    for i in 0..n {
                        self.grads[o + i] += self.scratch[0];
                    }
                }
                Op::SumSq(a) => {
                    let o = self.node(a).off;
                    let n = self.node(a).len;
                    for i in 0..n {
                        self.grads[o + i] += 2.0 * self.scratch[0] * self.vals[o + i];
                    }
                }
            }
        }

        // Flush bound-leaf gradients into the parameter set, in node order.
        for i in 0..=loss.0 as usize {
            if let Op::Leaf { param: Some(pid) } = self.nodes[i].op {
                let (off, len) = (self.nodes[i].off, self.nodes[i].len);
                let dst = ps.grad_acc(pid);
                debug_assert_eq!(dst.len(), len);
                for k in 0..len {
                    dst[k] += self.grads[off + k];
                }
            }
        }
        Ok(())
    }

    /// Gradient of an unbound leaf after `backward`; test hook.
    pub fn leaf_grad(&self, v: Val) -> &[f64] {
        let n = self.node(v);
        &self.grads[n.off..n.off + n.len]
    }
}

/// Disjoint (&mut grads-segment, &vals-segment) views of equal length.
fn split_two<'a>(
    grads: &'a mut [f64],
    vals: &'a [f64],
    goff: usize,
    voff: usize,
    len: usize,
) -> (&'a mut [f64], &'a [f64]) {
    (&mut grads[goff..goff + len], &vals[voff..voff + len])
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Four-lane dot product; the fixed association order keeps results
/// bit-reproducible across runs while letting the optimizer vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let k = i * 4;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for k in chunks * 4..n {
        s += a[k] * b[k];
    }
    s
}

/// Logistic sigmoid clamped to the open interval (0, 1): extreme inputs
/// would otherwise round to exactly 0 or 1 in f64.
#[inline]
pub fn sigmoid_stable(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.max(f64::MIN_POSITIVE).min(1.0 - f64::EPSILON / 2.0)
}

#[inline]
pub fn softplus_stable(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
