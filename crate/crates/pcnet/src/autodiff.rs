//! Reverse-mode differentiation over a flat operation tape.
//!
//! The computation graph is static per training step, so a record-and-execute
//! tape over a fixed primitive set is sufficient: each builder call runs the
//! forward computation immediately, appends one operation record, and returns
//! the id of the slot holding its output. Slot `k` is always the output of
//! operation `k`; values live in one contiguous buffer.
//!
//! `backward` seeds the adjoint of a scalar loss slot with 1 and visits the
//! operations in exact reverse order. One backward rule per primitive:
//! logsumexp backpropagates the softmax of the shifted inputs, the rectifier
//! and the absolute value take subgradient 0 at their kinks, and the
//! Student-T log-pdf includes ∂/∂ν through the digamma function.

use crate::math::{digamma, sigmoid, softplus};
use crate::params::{ParamId, ParamLayout};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(pub u32);

impl SlotId {
    #[inline]
    fn ix(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    off: u32,
    len: u32,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Add(SlotId, SlotId),
    AddConst(SlotId),
    Sub(SlotId, SlotId),
    Mul(SlotId, SlotId),
    Scale(SlotId, f64),
    MatVec { w: SlotId, x: SlotId, rows: u32, cols: u32 },
    Relu(SlotId),
    Sigmoid(SlotId),
    Softplus(SlotId),
    LogSumExp(SlotId),
    LogSoftmax(SlotId),
    SumVec(SlotId),
    Concat { args_off: u32, args_len: u32 },
    Index { a: SlotId, i: u32 },
    Slice { a: SlotId, off: u32, len: u32 },
    GaussLogPdf { z: SlotId, mu: SlotId, log_s: SlotId },
    LaplaceLogPdf { z: SlotId, mu: SlotId, log_s: SlotId },
    StudentTLogPdf { z: SlotId, mu: SlotId, log_s: SlotId, raw_nu: SlotId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::AddConst(_) => "add_const",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatVec { .. } => "matvec",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::LogSumExp(..) => "logsumexp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SumVec(..) => "sum_vec",
            Op::Concat { .. } => "concat",
            Op::Index { .. } => "index",
            Op::Slice { .. } => "slice",
            Op::GaussLogPdf { .. } => "gaussian_log_pdf",
            Op::LaplaceLogPdf { .. } => "laplace_log_pdf",
            Op::StudentTLogPdf { .. } => "student_t_log_pdf",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("NaN gradient produced by primitive `{primitive}` (op {op_index})")]
    NanGradient { primitive: &'static str, op_index: usize },
    #[error("backward requires a scalar loss slot, got length {0}")]
    NonScalarLoss(usize),
}

/// Gradients for every parameter group, in flat layout coordinates.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    flat: Vec<f64>,
    layout: ParamLayout,
    /// Global L2 norm over all groups.
    pub norm: f64,
}

impl GradientBundle {
    pub fn zeros(layout: &ParamLayout) -> Self {
        GradientBundle {
            flat: vec![0.0; layout.total],
            layout: layout.clone(),
            norm: 0.0,
        }
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.flat[self.layout.span(id)]
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn recompute_norm(&mut self) {
        self.norm = crate::math::l2_norm(&self.flat);
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|g| g.is_finite())
    }
}

/// If ‖g‖₂ exceeds `max_norm`, scale every gradient by max_norm/‖g‖₂;
/// otherwise return the bundle unchanged.
pub fn clip_global_norm(mut g: GradientBundle, max_norm: f64) -> GradientBundle {
    assert!(max_norm > 0.0, "max_norm must be positive");
    if g.norm > max_norm {
        let s = max_norm / g.norm;
        for v in g.flat.iter_mut() {
            *v *= s;
        }
        g.recompute_norm();
    }
    g
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    adj: Vec<f64>,
    slots: Vec<Slot>,
    ops: Vec<Op>,
    args: Vec<SlotId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop all recorded operations but keep buffer capacity.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.adj.clear();
        self.slots.clear();
        self.ops.clear();
        self.args.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, s: SlotId) -> &[f64] {
        let slot = self.slots[s.ix()];
        &self.vals[slot.off as usize..(slot.off + slot.len) as usize]
    }

    pub fn scalar(&self, s: SlotId) -> f64 {
        let v = self.value(s);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn alloc(&mut self, op: Op, len: usize) -> (SlotId, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let id = SlotId(self.slots.len() as u32);
        self.slots.push(Slot {
            off: off as u32,
            len: len as u32,
        });
        self.ops.push(op);
        (id, off)
    }

    fn push_computed(&mut self, op: Op, values: &[f64]) -> SlotId {
        let (id, off) = self.alloc(op, values.len());
        self.vals[off..off + values.len()].copy_from_slice(values);
        id
    }

    // ----- recording primitives ------------------------------------------

    pub fn input(&mut self, values: &[f64]) -> SlotId {
        self.push_computed(Op::Input, values)
    }

    pub fn input_scalar(&mut self, v: f64) -> SlotId {
        self.push_computed(Op::Input, &[v])
    }

    /// Record one parameter group; gradients accumulate under its id.
    pub fn param(&mut self, flat: &[f64], layout: &ParamLayout, id: ParamId) -> SlotId {
        self.push_computed(Op::Param(id), &flat[layout.span(id)])
    }

    pub fn add(&mut self, a: SlotId, b: SlotId) -> SlotId {
        let (sa, sb) = (self.slots[a.ix()], self.slots[b.ix()]);
        debug_assert_eq!(sa.len, sb.len, "add length mismatch");
        let (id, off) = self.alloc(Op::Add(a, b), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] =
                self.vals[sa.off as usize + i] + self.vals[sb.off as usize + i];
        }
        id
    }

    pub fn add_const(&mut self, a: SlotId, c: f64) -> SlotId {
        let sa = self.slots[a.ix()];
        let (id, off) = self.alloc(Op::AddConst(a), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = self.vals[sa.off as usize + i] + c;
        }
        id
    }

    pub fn sub(&mut self, a: SlotId, b: SlotId) -> SlotId {
        let (sa, sb) = (self.slots[a.ix()], self.slots[b.ix()]);
        debug_assert_eq!(sa.len, sb.len, "sub length mismatch");
        let (id, off) = self.alloc(Op::Sub(a, b), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] =
                self.vals[sa.off as usize + i] - self.vals[sb.off as usize + i];
        }
        id
    }

    pub fn mul(&mut self, a: SlotId, b: SlotId) -> SlotId {
        let (sa, sb) = (self.slots[a.ix()], self.slots[b.ix()]);
        debug_assert_eq!(sa.len, sb.len, "mul length mismatch");
        let (id, off) = self.alloc(Op::Mul(a, b), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] =
                self.vals[sa.off as usize + i] * self.vals[sb.off as usize + i];
        }
        id
    }

    pub fn scale(&mut self, a: SlotId, c: f64) -> SlotId {
        let sa = self.slots[a.ix()];
        let (id, off) = self.alloc(Op::Scale(a, c), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = c * self.vals[sa.off as usize + i];
        }
        id
    }

    /// y = W·x with W a row-major `rows`×`cols` slot.
    pub fn matvec(&mut self, w: SlotId, x: SlotId, rows: usize, cols: usize) -> SlotId {
        let (sw, sx) = (self.slots[w.ix()], self.slots[x.ix()]);
        debug_assert_eq!(sw.len as usize, rows * cols, "matvec W shape mismatch");
        debug_assert_eq!(sx.len as usize, cols, "matvec x length mismatch");
        let (id, off) = self.alloc(
            Op::MatVec {
                w,
                x,
                rows: rows as u32,
                cols: cols as u32,
            },
            rows,
        );
        let woff = sw.off as usize;
        let xoff = sx.off as usize;
        for r in 0..rows {
            let mut acc = 0.0;
            let base = woff + r * cols;
            for c in 0..cols {
                acc += self.vals[base + c] * self.vals[xoff + c];
            }
            self.vals[off + r] = acc;
        }
        id
    }

    pub fn relu(&mut self, a: SlotId) -> SlotId {
        let sa = self.slots[a.ix()];
        let (id, off) = self.alloc(Op::Relu(a), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = self.vals[sa.off as usize + i].max(0.0);
        }
        id
    }

    pub fn sigmoid(&mut self, a: SlotId) -> SlotId {
        let sa = self.slots[a.ix()];
        let (id, off) = self.alloc(Op::Sigmoid(a), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = sigmoid(self.vals[sa.off as usize + i]);
        }
        id
    }

    pub fn softplus(&mut self, a: SlotId) -> SlotId {
        let sa = self.slots[a.ix()];
        let (id, off) = self.alloc(Op::Softplus(a), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = softplus(self.vals[sa.off as usize + i]);
        }
        id
    }

    pub fn logsumexp(&mut self, a: SlotId) -> SlotId {
        let sa = self.slots[a.ix()];
        let v = crate::math::logsumexp(
            &self.vals[sa.off as usize..(sa.off + sa.len) as usize],
        );
        self.push_computed(Op::LogSumExp(a), &[v])
    }

    pub fn log_softmax(&mut self, a: SlotId) -> SlotId {
        let sa = self.slots[a.ix()];
        let lse = crate::math::logsumexp(
            &self.vals[sa.off as usize..(sa.off + sa.len) as usize],
        );
        let (id, off) = self.alloc(Op::LogSoftmax(a), sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = self.vals[sa.off as usize + i] - lse;
        }
        id
    }

    pub fn sum_vec(&mut self, a: SlotId) -> SlotId {
        let sa = self.slots[a.ix()];
        let v: f64 = self.vals[sa.off as usize..(sa.off + sa.len) as usize]
            .iter()
            .sum();
        self.push_computed(Op::SumVec(a), &[v])
    }

    pub fn concat(&mut self, parts: &[SlotId]) -> SlotId {
        let args_off = self.args.len() as u32;
        self.args.extend_from_slice(parts);
        let total: usize = parts.iter().map(|p| self.slots[p.ix()].len as usize).sum();
        let (id, mut off) = self.alloc(
            Op::Concat {
                args_off,
                args_len: parts.len() as u32,
            },
            total,
        );
        for p in parts {
            let sp = self.slots[p.ix()];
            let (src, len) = (sp.off as usize, sp.len as usize);
            self.vals.copy_within(src..src + len, off);
            off += len;
        }
        id
    }

    pub fn index(&mut self, a: SlotId, i: usize) -> SlotId {
        let sa = self.slots[a.ix()];
        debug_assert!(i < sa.len as usize, "index out of bounds");
        let v = self.vals[sa.off as usize + i];
        self.push_computed(Op::Index { a, i: i as u32 }, &[v])
    }

    pub fn slice(&mut self, a: SlotId, off: usize, len: usize) -> SlotId {
        let sa = self.slots[a.ix()];
        debug_assert!(off + len <= sa.len as usize, "slice out of bounds");
        let (id, dst) = self.alloc(
            Op::Slice {
                a,
                off: off as u32,
                len: len as u32,
            },
            len,
        );
        let src = sa.off as usize + off;
        self.vals.copy_within(src..src + len, dst);
        id
    }

    pub fn gaussian_log_pdf(&mut self, z: SlotId, mu: SlotId, log_s: SlotId) -> SlotId {
        let v = crate::circuit::gaussian_log_pdf(
            self.scalar(z),
            self.scalar(mu),
            self.scalar(log_s),
        );
        self.push_computed(Op::GaussLogPdf { z, mu, log_s }, &[v])
    }

    pub fn laplace_log_pdf(&mut self, z: SlotId, mu: SlotId, log_s: SlotId) -> SlotId {
        let v = crate::circuit::laplace_log_pdf(
            self.scalar(z),
            self.scalar(mu),
            self.scalar(log_s),
        );
        self.push_computed(Op::LaplaceLogPdf { z, mu, log_s }, &[v])
    }

    pub fn student_t_log_pdf(
        &mut self,
        z: SlotId,
        mu: SlotId,
        log_s: SlotId,
        raw_nu: SlotId,
    ) -> SlotId {
        let v = crate::circuit::student_t_log_pdf(
            self.scalar(z),
            self.scalar(mu),
            self.scalar(log_s),
            self.scalar(raw_nu),
        );
        self.push_computed(Op::StudentTLogPdf { z, mu, log_s, raw_nu }, &[v])
    }

    // ----- backward -------------------------------------------------------

    /// Exact reverse-mode gradients of the scalar at `loss` with respect to
    /// every recorded parameter group.
    pub fn backward(
        &mut self,
        loss: SlotId,
        layout: &ParamLayout,
    ) -> Result<GradientBundle, AutodiffError> {
        let loss_slot = self.slots[loss.ix()];
        if loss_slot.len != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_slot.len as usize));
        }
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        self.adj[loss_slot.off as usize] = 1.0;

        let mut bundle = GradientBundle::zeros(layout);

        for idx in (0..=loss.ix()).rev() {
            let out = self.slots[idx];
            let (ooff, olen) = (out.off as usize, out.len as usize);
            // Scalar outputs with zero adjoint contribute nothing; skipping
            // them prunes entire satisfied-hinge subtrees.
            if olen == 1 && self.adj[ooff] == 0.0 {
                continue;
            }
            let op = self.ops[idx].clone();
            match &op {
                Op::Input => {}
                Op::Param(id) => {
                    let span = layout.span(*id);
                    for (dst, src) in bundle.flat[span].iter_mut().zip(&self.adj[ooff..ooff + olen])
                    {
                        *dst += src;
                    }
                }
                Op::Add(a, b) => {
                    self.acc(*a, ooff, olen, |g, _| g);
                    self.acc(*b, ooff, olen, |g, _| g);
                }
                Op::AddConst(a) => self.acc(*a, ooff, olen, |g, _| g),
                Op::Sub(a, b) => {
                    self.acc(*a, ooff, olen, |g, _| g);
                    self.acc(*b, ooff, olen, |g, _| -g);
                }
                Op::Mul(a, b) => {
                    let (sa, sb) = (self.slots[a.ix()], self.slots[b.ix()]);
                    for i in 0..olen {
                        let g = self.adj[ooff + i];
                        let av = self.vals[sa.off as usize + i];
                        let bv = self.vals[sb.off as usize + i];
                        self.adj[sa.off as usize + i] += g * bv;
                        self.adj[sb.off as usize + i] += g * av;
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc(*a, ooff, olen, |g, _| c * g);
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows as usize, *cols as usize);
                    let woff = self.slots[w.ix()].off as usize;
                    let xoff = self.slots[x.ix()].off as usize;
                    for r in 0..rows {
                        let g = self.adj[ooff + r];
                        if g == 0.0 {
                            continue;
                        }
                        let base = woff + r * cols;
                        for c in 0..cols {
                            self.adj[base + c] += g * self.vals[xoff + c];
                            self.adj[xoff + c] += g * self.vals[base + c];
                        }
                    }
                }
                Op::Relu(a) => {
                    let aoff = self.slots[a.ix()].off as usize;
                    for i in 0..olen {
                        if self.vals[aoff + i] > 0.0 {
                            self.adj[aoff + i] += self.adj[ooff + i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let aoff = self.slots[a.ix()].off as usize;
                    for i in 0..olen {
                        let y = self.vals[ooff + i];
                        self.adj[aoff + i] += self.adj[ooff + i] * y * (1.0 - y);
                    }
                }
                Op::Softplus(a) => {
                    let aoff = self.slots[a.ix()].off as usize;
                    for i in 0..olen {
                        self.adj[aoff + i] +=
                            self.adj[ooff + i] * sigmoid(self.vals[aoff + i]);
                    }
                }
                Op::LogSumExp(a) => {
                    let g = self.adj[ooff];
                    let y = self.vals[ooff];
                    if y != f64::NEG_INFINITY {
                        let sa = self.slots[a.ix()];
                        let aoff = sa.off as usize;
                        for i in 0..sa.len as usize {
                            let ai = self.vals[aoff + i];
                            if ai != f64::NEG_INFINITY {
                                self.adj[aoff + i] += g * (ai - y).exp();
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let aoff = self.slots[a.ix()].off as usize;
                    let gsum: f64 = self.adj[ooff..ooff + olen].iter().sum();
                    for i in 0..olen {
                        let p = self.vals[ooff + i].exp();
                        self.adj[aoff + i] += self.adj[ooff + i] - p * gsum;
                    }
                }
                Op::SumVec(a) => {
                    let g = self.adj[ooff];
                    let sa = self.slots[a.ix()];
                    let aoff = sa.off as usize;
                    for i in 0..sa.len as usize {
                        self.adj[aoff + i] += g;
                    }
                }
                Op::Concat { args_off, args_len } => {
                    let mut src = ooff;
                    for ai in *args_off..(*args_off + *args_len) {
                        let part = self.args[ai as usize];
                        let sp = self.slots[part.ix()];
                        let poff = sp.off as usize;
                        for i in 0..sp.len as usize {
                            self.adj[poff + i] += self.adj[src + i];
                        }
                        src += sp.len as usize;
                    }
                }
                Op::Index { a, i } => {
                    let aoff = self.slots[a.ix()].off as usize;
                    self.adj[aoff + *i as usize] += self.adj[ooff];
                }
                Op::Slice { a, off, len } => {
                    let aoff = self.slots[a.ix()].off as usize + *off as usize;
                    for i in 0..*len as usize {
                        self.adj[aoff + i] += self.adj[ooff + i];
                    }
                }
                Op::GaussLogPdf { z, mu, log_s } => {
                    let g = self.adj[ooff];
                    let (zv, muv, lsv) =
                        (self.scalar(*z), self.scalar(*mu), self.scalar(*log_s));
                    let s = lsv.exp();
                    let t = (zv - muv) / s;
                    self.bump(*z, g * (-t / s));
                    self.bump(*mu, g * (t / s));
                    self.bump(*log_s, g * (t * t - 1.0));
                }
                Op::LaplaceLogPdf { z, mu, log_s } => {
                    let g = self.adj[ooff];
                    let (zv, muv, lsv) =
                        (self.scalar(*z), self.scalar(*mu), self.scalar(*log_s));
                    let s = lsv.exp();
                    let t = (zv - muv) / s;
                    // Subgradient 0 exactly at the kink.
                    let sg = if t > 0.0 {
                        1.0
                    } else if t < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    self.bump(*z, g * (-sg / s));
                    self.bump(*mu, g * (sg / s));
                    self.bump(*log_s, g * (t.abs() - 1.0));
                }
                Op::StudentTLogPdf { z, mu, log_s, raw_nu } => {
                    let g = self.adj[ooff];
                    let (zv, muv, lsv, rnv) = (
                        self.scalar(*z),
                        self.scalar(*mu),
                        self.scalar(*log_s),
                        self.scalar(*raw_nu),
                    );
                    let nu = 1.0 + softplus(rnv);
                    let s = lsv.exp();
                    let t = (zv - muv) / s;
                    let q = 1.0 + t * t / nu;
                    let dt = -(nu + 1.0) * t / (nu * q);
                    let dnu = 0.5 * digamma(0.5 * (nu + 1.0)) - 0.5 * digamma(0.5 * nu)
                        - 0.5 / nu
                        - 0.5 * q.ln()
                        + 0.5 * (nu + 1.0) * t * t / (nu * nu * q);
                    self.bump(*z, g * dt / s);
                    self.bump(*mu, g * (-dt / s));
                    self.bump(*log_s, g * (-1.0 - dt * t));
                    self.bump(*raw_nu, g * dnu * sigmoid(rnv));
                }
            }
            // A NaN contribution is attributed to the primitive that wrote
            // it; earlier consumers of the same span were already checked.
            let mut nan_found = false;
            for_each_input(&op, &self.args, |inp| {
                let si = self.slots[inp.ix()];
                let span = &self.adj[si.off as usize..(si.off + si.len) as usize];
                if span.iter().any(|v| v.is_nan()) {
                    nan_found = true;
                }
            });
            if nan_found {
                return Err(AutodiffError::NanGradient {
                    primitive: op.name(),
                    op_index: idx,
                });
            }
        }

        bundle.recompute_norm();
        if !bundle.is_finite() {
            return Err(AutodiffError::NanGradient {
                primitive: "param",
                op_index: loss.ix(),
            });
        }
        Ok(bundle)
    }

    /// Elementwise adjoint accumulation `adj[a] += f(adj_out, i)`.
    #[inline]
    fn acc(&mut self, a: SlotId, ooff: usize, olen: usize, f: impl Fn(f64, usize) -> f64) {
        let aoff = self.slots[a.ix()].off as usize;
        for i in 0..olen {
            self.adj[aoff + i] += f(self.adj[ooff + i], i);
        }
    }

    #[inline]
    fn bump(&mut self, a: SlotId, dv: f64) {
        let aoff = self.slots[a.ix()].off as usize;
        self.adj[aoff] += dv;
    }
}

fn for_each_input(op: &Op, args: &[SlotId], mut f: impl FnMut(SlotId)) {
    match op {
        Op::Input | Op::Param(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            f(*a);
            f(*b);
        }
        Op::AddConst(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::LogSumExp(a)
        | Op::LogSoftmax(a)
        | Op::SumVec(a)
        | Op::Index { a, .. }
        | Op::Slice { a, .. } => f(*a),
        Op::MatVec { w, x, .. } => {
            f(*w);
            f(*x);
        }
        Op::Concat { args_off, args_len } => {
            for &a in &args[*args_off as usize..(*args_off + *args_len) as usize] {
                f(a);
            }
        }
        Op::GaussLogPdf { z, mu, log_s } | Op::LaplaceLogPdf { z, mu, log_s } => {
            f(*z);
            f(*mu);
            f(*log_s);
        }
        Op::StudentTLogPdf { z, mu, log_s, raw_nu } => {
            f(*z);
            f(*mu);
            f(*log_s);
            f(*raw_nu);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GroupKind, ParamGroup, ParamLayout};

    /// A layout with one free-standing group, for driving the tape directly.
    fn toy_layout(len: usize) -> ParamLayout {
        ParamLayout {
            groups: vec![ParamGroup {
                name: "p",
                kind: GroupKind::LeafRaw,
                offset: 0,
                len,
            }],
            sum_ranges: vec![],
            total: len,
            n_leaves: 0,
        }
    }

    const P0: ParamId = ParamId(0);

    #[test]
    fn sum_of_squares_gradient() {
        let layout = toy_layout(3);
        let flat = vec![1.0, -2.0, 0.5];
        let mut t = Tape::new();
        let p = t.param(&flat, &layout, P0);
        let sq = t.mul(p, p);
        let loss = t.sum_vec(sq);
        let g = t.backward(loss, &layout).unwrap();
        assert_eq!(g.grad(P0), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn gaussian_mode_is_stationary_in_mu() {
        let layout = toy_layout(1);
        let flat = vec![0.7];
        let mut t = Tape::new();
        let mu = t.param(&flat, &layout, P0);
        let z = t.input_scalar(0.7);
        let ls = t.input_scalar(0.0);
        let lp = t.gaussian_log_pdf(z, mu, ls);
        let g = t.backward(lp, &layout).unwrap();
        assert_eq!(g.grad(P0), &[0.0]);
    }

    /// Central finite differences of a tape-rebuilding closure.
    fn fd_grad(
        f: &dyn Fn(&[f64]) -> f64,
        at: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let mut g = Vec::with_capacity(at.len());
        let mut x = at.to_vec();
        for i in 0..at.len() {
            x[i] = at[i] + eps;
            let hi = f(&x);
            x[i] = at[i] - eps;
            let lo = f(&x);
            x[i] = at[i];
            g.push((hi - lo) / (2.0 * eps));
        }
        g
    }

    fn assert_close(analytic: &[f64], fd: &[f64], tol: f64) {
        for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
            let rel = (a - f).abs() / f.abs().max(1.0);
            assert!(rel < tol, "component {i}: analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn every_scalar_primitive_matches_finite_differences() {
        // One compound expression exercising the scalar rules.
        let layout = toy_layout(4);
        let run = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let p = t.param(x, &layout, P0);
            let a = t.index(p, 0);
            let b = t.index(p, 1);
            let c = t.index(p, 2);
            let d = t.index(p, 3);
            let sp = t.softplus(a);
            let sg = t.sigmoid(b);
            let m = t.mul(sp, sg);
            let z = t.input_scalar(0.83);
            let gp = t.gaussian_log_pdf(z, c, d);
            let lp = t.laplace_log_pdf(z, c, d);
            let tp = t.student_t_log_pdf(z, c, d, a);
            let cat = t.concat(&[gp, lp, tp, m]);
            let lsm = t.log_softmax(cat);
            let lse = t.logsumexp(lsm);
            let sum = t.sum_vec(lsm);
            let both = t.concat(&[lse, sum]);
            let s = t.sum_vec(both);
            let scaled = t.scale(s, 1.3);
            let shifted = t.add_const(scaled, -0.4);
            t.scalar(shifted)
        };
        let at = [0.3, -0.8, 0.21, -0.15];
        let analytic = {
            let mut t = Tape::new();
            let p = t.param(&at, &layout, P0);
            let a = t.index(p, 0);
            let b = t.index(p, 1);
            let c = t.index(p, 2);
            let d = t.index(p, 3);
            let sp = t.softplus(a);
            let sg = t.sigmoid(b);
            let m = t.mul(sp, sg);
            let z = t.input_scalar(0.83);
            let gp = t.gaussian_log_pdf(z, c, d);
            let lp = t.laplace_log_pdf(z, c, d);
            let tp = t.student_t_log_pdf(z, c, d, a);
            let cat = t.concat(&[gp, lp, tp, m]);
            let lsm = t.log_softmax(cat);
            let lse = t.logsumexp(lsm);
            let sum = t.sum_vec(lsm);
            let both = t.concat(&[lse, sum]);
            let s = t.sum_vec(both);
            let scaled = t.scale(s, 1.3);
            let loss = t.add_const(scaled, -0.4);
            t.backward(loss, &layout).unwrap()
        };
        let fd = fd_grad(&run, &at, 1e-5);
        assert_close(analytic.grad(P0), &fd, 1e-6);
    }

    #[test]
    fn matvec_relu_chain_matches_finite_differences() {
        let layout = toy_layout(10);
        // 2x3 matrix followed by relu and a weighted reduction; params are
        // [w(6), x(3), bias(1)].
        let run = |p: &[f64]| -> f64 {
            let mut t = Tape::new();
            let ps = t.param(p, &layout, P0);
            let w = t.slice(ps, 0, 6);
            let x = t.slice(ps, 6, 3);
            let bias = t.index(ps, 9);
            let y = t.matvec(w, x, 2, 3);
            let r = t.relu(y);
            let s = t.sum_vec(r);
            let out = t.add(s, bias);
            t.scalar(out)
        };
        let at = [0.5, -1.0, 0.3, 0.8, 0.2, -0.6, 1.5, -0.4, 0.9, 0.11];
        let fd = fd_grad(&run, &at, 1e-5);
        let analytic = {
            let mut t = Tape::new();
            let ps = t.param(&at, &layout, P0);
            let w = t.slice(ps, 0, 6);
            let x = t.slice(ps, 6, 3);
            let bias = t.index(ps, 9);
            let y = t.matvec(w, x, 2, 3);
            let r = t.relu(y);
            let s = t.sum_vec(r);
            let out = t.add(s, bias);
            t.backward(out, &layout).unwrap()
        };
        assert_close(analytic.grad(P0), &fd, 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let layout = toy_layout(3);
        let flat = vec![0.4, -1.1, 2.2];
        let (a, b) = (2.5, -0.7);
        let mut t = Tape::new();
        let p = t.param(&flat, &layout, P0);
        let sq = t.mul(p, p);
        let l1 = t.sum_vec(sq);
        let sp = t.softplus(p);
        let l2 = t.sum_vec(sp);
        let l1s = t.scale(l1, a);
        let l2s = t.scale(l2, b);
        let combined = t.add(l1s, l2s);

        let g1 = t.backward(l1, &layout).unwrap();
        let g2 = t.backward(l2, &layout).unwrap();
        let gc = t.backward(combined, &layout).unwrap();
        for i in 0..3 {
            let expect = a * g1.grad(P0)[i] + b * g2.grad(P0)[i];
            assert!((gc.grad(P0)[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_backward_handles_minus_infinity() {
        let layout = toy_layout(2);
        let flat = vec![0.5, 1.5];
        let mut t = Tape::new();
        let p = t.param(&flat, &layout, P0);
        let ninf = t.input_scalar(f64::NEG_INFINITY);
        let pi0 = t.index(p, 0);
        let pi1 = t.index(p, 1);
        let cat = t.concat(&[pi0, ninf, pi1]);
        let lse = t.logsumexp(cat);
        let g = t.backward(lse, &layout).unwrap();
        let expect0 = (flat[0] - t.scalar(lse)).exp();
        let expect1 = (flat[1] - t.scalar(lse)).exp();
        assert!((g.grad(P0)[0] - expect0).abs() < 1e-12);
        assert!((g.grad(P0)[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn clip_scales_all_entries() {
        let layout = toy_layout(4);
        let mut g = GradientBundle::zeros(&layout);
        g.flat_mut().copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        g.recompute_norm();
        assert_eq!(g.norm, 2.0);
        let clipped = clip_global_norm(g, 1.0);
        for v in clipped.flat() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!((clipped.norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_bundles_alone() {
        let layout = toy_layout(2);
        let mut g = GradientBundle::zeros(&layout);
        g.flat_mut().copy_from_slice(&[0.3, 0.4]);
        g.recompute_norm();
        let norm_before = g.norm;
        let flat_before = g.flat().to_vec();
        let clipped = clip_global_norm(g, 1.0);
        assert_eq!(clipped.flat(), flat_before.as_slice());
        assert_eq!(clipped.norm, norm_before);
    }

    #[test]
    fn nan_gradient_is_reported_with_the_primitive() {
        let layout = toy_layout(1);
        let flat = vec![0.0];
        let mut t = Tape::new();
        let p = t.param(&flat, &layout, P0);
        let inf = t.input_scalar(f64::INFINITY);
        let nan = t.sub(inf, inf);
        // Backward through mul writes g·NaN into the adjoint of `nan`.
        let prod = t.mul(nan, p);
        let err = t.backward(prod, &layout);
        match err {
            Err(AutodiffError::NanGradient { primitive: "mul", .. }) => {}
            other => panic!("expected NaN gradient error from mul, got {other:?}"),
        }
    }
}
