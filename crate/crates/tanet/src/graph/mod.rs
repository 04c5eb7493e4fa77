//! Reverse-mode differentiation over rank-4 tensors.
//!
//! [`Graph`] is a define-by-run tape: every op executes eagerly and records
//! what it needs for the reverse sweep. Parameters are copied in from a
//! [`ParamStore`] (one node per distinct name, so weight sharing accumulates
//! gradients naturally) and [`Graph::flush_grads`] moves gradients back out.

pub mod kernels;

use crate::attention::Scope;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::shape::Shape;
use crate::store::ParamStore;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Handle to a value in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to the attention weights saved by an attention-core op.
#[derive(Clone, Copy, Debug)]
pub struct WeightsRef(usize);

/// Batch statistics produced by a train-mode normalization op, used by the
/// caller to update running statistics.
pub struct BatchStats<E: Elem> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

struct Node<E: Elem> {
    shape: Shape,
    data: Vec<E>,
}

enum Op<E: Elem> {
    Conv2d { x: usize, w: usize, bias: Option<usize>, stride: usize, padding: usize, out: usize },
    Bilinear { x: usize, scale: usize, out: usize },
    AvgPool2x { x: usize, out: usize },
    Relu { x: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, factor: E, out: usize },
    ConcatChannels { xs: Vec<usize>, out: usize },
    BnTrain { x: usize, gamma: usize, beta: usize, mean: Vec<E>, inv_std: Vec<E>, out: usize },
    BnEval { x: usize, gamma: usize, beta: usize, mean: Vec<E>, inv_std: Vec<E>, out: usize },
    MaskedSoftmax { x: usize, out: usize },
    AttnCore {
        q: usize,
        k: usize,
        v: usize,
        row_emb: usize,
        col_emb: usize,
        scope: Scope,
        heads: usize,
        weights: Vec<E>,
        out: usize,
    },
    SumAll { x: usize, out: usize },
    MeanAll { x: usize, out: usize },
    BceWithLogits { logits: usize, target: usize, out: usize },
}

pub struct Graph<E: Elem> {
    exec: Exec,
    nodes: Vec<Node<E>>,
    ops: Vec<Op<E>>,
    params: Vec<(usize, String)>,
    param_index: HashMap<String, Var>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Graph::new(Exec::default())
    }
}

impl<E: Elem> Graph<E> {
    pub fn new(exec: Exec) -> Self {
        Graph {
            exec,
            nodes: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    fn push(&mut self, shape: Shape, data: Vec<E>) -> Var {
        debug_assert_eq!(shape.len(), data.len());
        debug_assert!(!shape.is_empty());
        self.nodes.push(Node { shape, data });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.shape(v), self.data(v).to_vec()).expect("node data matches shape")
    }

    /// Value of a scalar node.
    pub fn value(&self, v: Var) -> E {
        debug_assert!(self.shape(v).is_scalar());
        self.nodes[v.0].data[0]
    }

    /// Sum of a node's values (a cheap black-box sink for benchmarks).
    pub fn value_checksum(&self, v: Var) -> E {
        self.data(v).iter().copied().sum()
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ------------------------------------------------------------- leaves

    /// Untracked input; receives a gradient internally but is not flushed.
    pub fn constant(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.shape(), t.data().to_vec())
    }

    /// Leaf backed by a trainable store entry. Repeated calls with the same
    /// name return the same node, so shared weights accumulate gradients from
    /// every use.
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        if let Some(v) = self.param_index.get(name) {
            return Ok(*v);
        }
        let p = store.get(name)?;
        if !p.trainable {
            return Err(Error::Config(format!(
                "{name:?} is running state, not a trainable parameter"
            )));
        }
        let v = self.push(p.shape, p.data.clone());
        self.params.push((v.0, name.to_string()));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Untracked copy of any store entry (used for running statistics).
    pub fn constant_from_store(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        Ok(self.push(p.shape, p.data.clone()))
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!("input {} has {} channels but weight {} expects {}", xs, xs.c, ws, ws.c),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} does not fit padded input {} (padding {})", ws, xs, padding),
            ));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != ws.n {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {} must have {} values for weight {}", bs, ws.n, ws),
                ));
            }
        }
        let os = Shape::new(
            xs.n,
            ws.n,
            (xs.h + 2 * padding - ws.h) / stride + 1,
            (xs.w + 2 * padding - ws.w) / stride + 1,
        );
        let mut out = vec![E::ZERO; os.len()];
        kernels::conv2d_fwd(
            self.exec,
            self.data(x),
            xs,
            self.data(w),
            ws,
            bias.map(|b| self.data(b)),
            stride,
            padding,
            &mut out,
            os,
        );
        let o = self.push(os, out);
        self.ops.push(Op::Conv2d { x: x.0, w: w.0, bias: bias.map(|b| b.0), stride, padding, out: o.0 });
        Ok(o)
    }

    /// Bilinear upsampling by an integer factor, half-pixel-center convention.
    pub fn bilinear_upsample(&mut self, x: Var, scale: usize) -> Result<Var> {
        if scale == 0 {
            return Err(Error::Config("bilinear_upsample: scale must be >= 1".into()));
        }
        let xs = self.shape(x);
        let os = Shape::new(xs.n, xs.c, xs.h * scale, xs.w * scale);
        let mut out = vec![E::ZERO; os.len()];
        kernels::bilinear_fwd(self.exec, self.data(x), xs, scale, &mut out, os);
        let o = self.push(os, out);
        self.ops.push(Op::Bilinear { x: x.0, scale, out: o.0 });
        Ok(o)
    }

    /// 2x bilinear upsampling.
    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        self.bilinear_upsample(x, 2)
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::shape("avgpool2x", format!("input {} must have even H and W", xs)));
        }
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let mut out = vec![E::ZERO; os.len()];
        kernels::avgpool2x_fwd(self.exec, self.data(x), xs, &mut out, os);
        let o = self.push(os, out);
        self.ops.push(Op::AvgPool2x { x: x.0, out: o.0 });
        Ok(o)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let out: Vec<E> =
            self.data(x).iter().map(|v| if *v > E::ZERO { *v } else { E::ZERO }).collect();
        let o = self.push(xs, out);
        self.ops.push(Op::Relu { x: x.0, out: o.0 });
        o
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("operands {} vs {}", sa, sb)));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_shapes("add", a, b)?;
        let out: Vec<E> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let o = self.push(s, out);
        self.ops.push(Op::Add { a: a.0, b: b.0, out: o.0 });
        Ok(o)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_shapes("mul", a, b)?;
        let out: Vec<E> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let o = self.push(s, out);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out: o.0 });
        Ok(o)
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Var {
        let s = self.shape(x);
        let out: Vec<E> = self.data(x).iter().map(|v| *v * factor).collect();
        let o = self.push(s, out);
        self.ops.push(Op::Scale { x: x.0, factor, out: o.0 });
        o
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("concat_channels: no operands".into()));
        }
        let first = self.shape(xs[0]);
        let mut c_total = 0;
        for v in xs {
            let s = self.shape(*v);
            if s.n != first.n || !s.same_spatial(&first) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("operand {} does not match leading operand {}", s, first),
                ));
            }
            c_total += s.c;
        }
        let os = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = vec![E::ZERO; os.len()];
        let plane = first.plane();
        let mut offset = 0;
        for v in xs {
            let s = self.shape(*v);
            let src = self.data(*v);
            for n in 0..s.n {
                let dst_base = (n * c_total + offset) * plane;
                let src_base = n * s.c * plane;
                out[dst_base..dst_base + s.c * plane]
                    .copy_from_slice(&src[src_base..src_base + s.c * plane]);
            }
            offset += s.c;
        }
        let o = self.push(os, out);
        self.ops.push(Op::ConcatChannels { xs: xs.iter().map(|v| v.0).collect(), out: o.0 });
        Ok(o)
    }

    fn check_affine(&self, op: &'static str, xs: Shape, gamma: Var, beta: Var) -> Result<()> {
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s.len() != xs.c {
                return Err(Error::shape(
                    op,
                    format!("{what} {} must have {} values for input {}", s, xs.c, xs),
                ));
            }
        }
        Ok(())
    }

    /// Train-mode per-channel normalization. Returns the normalized output
    /// and the batch statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: E,
    ) -> Result<(Var, BatchStats<E>)> {
        let xs = self.shape(x);
        self.check_affine("batch_norm", xs, gamma, beta)?;
        let (mean, var) = kernels::bn_stats(self.exec, self.data(x), xs);
        let inv_std: Vec<E> = var.iter().map(|v| E::ONE / (*v + eps).sqrt()).collect();
        let mut out = vec![E::ZERO; xs.len()];
        kernels::bn_apply(
            self.exec,
            self.data(x),
            xs,
            self.data(gamma),
            self.data(beta),
            &mean,
            &inv_std,
            &mut out,
        );
        let o = self.push(xs, out);
        self.ops.push(Op::BnTrain {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            mean: mean.clone(),
            inv_std,
            out: o.0,
        });
        Ok((o, BatchStats { mean, var }))
    }

    /// Eval-mode normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<Var> {
        let xs = self.shape(x);
        self.check_affine("batch_norm", xs, gamma, beta)?;
        if running_mean.len() != xs.c || running_var.len() != xs.c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats must have {} values for input {}", xs.c, xs),
            ));
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<E> = running_var.iter().map(|v| E::ONE / (*v + eps).sqrt()).collect();
        let mut out = vec![E::ZERO; xs.len()];
        kernels::bn_apply(
            self.exec,
            self.data(x),
            xs,
            self.data(gamma),
            self.data(beta),
            &mean,
            &inv_std,
            &mut out,
        );
        let o = self.push(xs, out);
        self.ops.push(Op::BnEval { x: x.0, gamma: gamma.0, beta: beta.0, mean, inv_std, out: o.0 });
        Ok(o)
    }

    /// Softmax over the channel axis restricted to positions where `mask` is
    /// nonzero; masked positions come out exactly zero. The mask is a
    /// constant, not differentiated through.
    pub fn masked_softmax(&mut self, x: Var, mask: Var) -> Result<Var> {
        let xs = self.binary_shapes("masked_softmax", x, mask)?;
        // Reject any all-masked column up front.
        let plane = xs.plane();
        let md = self.data(mask);
        for n in 0..xs.n {
            for p in 0..plane {
                let any = (0..xs.c).any(|c| md[(n * xs.c + c) * plane + p] != E::ZERO);
                if !any {
                    return Err(Error::AllMasked);
                }
            }
        }
        let mut out = vec![E::ZERO; xs.len()];
        kernels::masked_softmax_channels_fwd(self.exec, self.data(x), xs, md, &mut out);
        let o = self.push(xs, out);
        self.ops.push(Op::MaskedSoftmax { x: x.0, out: o.0 });
        Ok(o)
    }

    /// Local temporal-attention aggregation over `scope`. Inputs are the
    /// already-projected query/key/value maps; `row_emb`/`col_emb` are the
    /// factorized relative-position tables, shaped
    /// (heads, row_span, d_head/2, 1) and (heads, col_span, d_head/2, 1).
    pub fn attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        row_emb: Var,
        col_emb: Var,
        scope: Scope,
        heads: usize,
    ) -> Result<(Var, WeightsRef)> {
        let xs = self.shape(q);
        for (name, other) in [("key", k), ("value", v)] {
            let s = self.shape(other);
            if s != xs {
                return Err(Error::shape(
                    "attention_core",
                    format!("query {} vs {name} {}", xs, s),
                ));
            }
        }
        if heads == 0 || xs.c % heads != 0 {
            return Err(Error::Config(format!(
                "attention_core: {} channels not divisible into {} heads",
                xs.c, heads
            )));
        }
        let d_head = xs.c / heads;
        if d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "attention_core: head dim {d_head} must be even for factorized positional encoding"
            )));
        }
        let d_half = d_head / 2;
        let res = self.shape(row_emb);
        let ces = self.shape(col_emb);
        let want_re = Shape::new(heads, scope.row_span(), d_half, 1);
        let want_ce = Shape::new(heads, scope.col_span(), d_half, 1);
        if res != want_re || ces != want_ce {
            return Err(Error::shape(
                "attention_core",
                format!(
                    "positional tables {} / {} do not match expected {} / {}",
                    res, ces, want_re, want_ce
                ),
            ));
        }
        let os = xs;
        let mut out = vec![E::ZERO; os.len()];
        let mut weights = vec![E::ZERO; xs.n * heads * scope.positions() * xs.plane()];
        kernels::attn_core_fwd(
            self.exec,
            self.data(q),
            self.data(k),
            self.data(v),
            xs,
            self.data(row_emb),
            self.data(col_emb),
            scope,
            heads,
            &mut out,
            &mut weights,
        );
        let o = self.push(os, out);
        self.ops.push(Op::AttnCore {
            q: q.0,
            k: k.0,
            v: v.0,
            row_emb: row_emb.0,
            col_emb: col_emb.0,
            scope,
            heads,
            weights,
            out: o.0,
        });
        Ok((o, WeightsRef(self.ops.len() - 1)))
    }

    /// Attention weights saved by an attention-core op, shaped
    /// (N, heads*positions, H, W); per (pixel, head) they sum to one over the
    /// valid positions.
    pub fn attention_weights(&self, r: WeightsRef) -> Tensor<E> {
        match &self.ops[r.0] {
            Op::AttnCore { weights, scope, heads, out, .. } => {
                let os = self.nodes[*out].shape;
                Tensor::new(
                    Shape::new(os.n, heads * scope.positions(), os.h, os.w),
                    weights.clone(),
                )
                .expect("weights buffer matches shape")
            }
            _ => unreachable!("WeightsRef always points at an attention op"),
        }
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for v in self.data(x) {
            acc += *v;
        }
        let o = self.push(Shape::scalar(), vec![acc]);
        self.ops.push(Op::SumAll { x: x.0, out: o.0 });
        o
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.shape(x).len();
        let mut acc = E::ZERO;
        for v in self.data(x) {
            acc += *v;
        }
        let o = self.push(Shape::scalar(), vec![acc / E::from_usize(len)]);
        self.ops.push(Op::MeanAll { x: x.0, out: o.0 });
        o
    }

    /// Mean per-pixel binary cross-entropy of sigmoid(logits) against a
    /// binary target, evaluated stably in logit space.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let s = self.binary_shapes("bce_with_logits", logits, target)?;
        if self.data(target).iter().any(|t| *t != E::ZERO && *t != E::ONE) {
            return Err(Error::Config(
                "bce_with_logits: targets must be exactly 0 or 1".into(),
            ));
        }
        let mut acc = E::ZERO;
        for (z, t) in self.data(logits).iter().zip(self.data(target)) {
            let pos = if *z > E::ZERO { *z } else { E::ZERO };
            acc += pos - *z * *t + (-z.abs()).exp().ln_1p();
        }
        let o = self.push(Shape::scalar(), vec![acc / E::from_usize(s.len())]);
        self.ops.push(Op::BceWithLogits { logits: logits.0, target: target.0, out: o.0 });
        Ok(o)
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar loss. Gradients accumulate on every node;
    /// repeated calls without clearing keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        add_into(&mut self.grads[loss.0], &[E::ONE]);

        for oi in (0..self.ops.len()).rev() {
            // Outputs are produced by exactly one op, so cloning the upstream
            // gradient here is the only copy per op.
            let g_out = match output_of(&self.ops[oi]) {
                out if self.grads[out].is_some() => self.grads[out].clone().unwrap(),
                _ => continue,
            };
            self.backward_op(oi, &g_out);
        }
        Ok(())
    }

    fn grad_buf(&mut self, node: usize) -> &mut Vec<E> {
        // Size from the shape: node data may be temporarily moved out while
        // an op's backward runs.
        let len = self.nodes[node].shape.len();
        self.grads[node].get_or_insert_with(|| vec![E::ZERO; len])
    }

    fn backward_op(&mut self, oi: usize, g: &[E]) {
        let exec = self.exec;
        match &self.ops[oi] {
            Op::Conv2d { x, w, bias, stride, padding, out } => {
                let (x, w, bias, stride, padding, out) = (*x, *w, *bias, *stride, *padding, *out);
                let xs = self.nodes[x].shape;
                let ws = self.nodes[w].shape;
                let os = self.nodes[out].shape;
                let xdata = std::mem::take(&mut self.nodes[x].data);
                let wdata = std::mem::take(&mut self.nodes[w].data);
                kernels::conv2d_bwd_x(exec, g, os, &wdata, ws, stride, padding, self.grad_buf(x), xs);
                kernels::conv2d_bwd_w(exec, g, os, &xdata, xs, stride, padding, self.grad_buf(w), ws);
                if let Some(b) = bias {
                    kernels::conv2d_bwd_b(exec, g, os, self.grad_buf(b));
                }
                self.nodes[x].data = xdata;
                self.nodes[w].data = wdata;
            }
            Op::Bilinear { x, scale, out } => {
                let (x, scale, out) = (*x, *scale, *out);
                let xs = self.nodes[x].shape;
                let os = self.nodes[out].shape;
                kernels::bilinear_bwd(exec, g, os, scale, self.grad_buf(x), xs);
            }
            Op::AvgPool2x { x, out } => {
                let (x, out) = (*x, *out);
                let xs = self.nodes[x].shape;
                let os = self.nodes[out].shape;
                kernels::avgpool2x_bwd(exec, g, os, self.grad_buf(x), xs);
            }
            Op::Relu { x, out: _ } => {
                let x = *x;
                let mask: Vec<bool> = self.nodes[x].data.iter().map(|v| *v > E::ZERO).collect();
                let dx = self.grad_buf(x);
                for (i, gv) in g.iter().enumerate() {
                    if mask[i] {
                        dx[i] += *gv;
                    }
                }
            }
            Op::Add { a, b, out: _ } => {
                let (a, b) = (*a, *b);
                add_direct(self.grad_buf(a), g);
                add_direct(self.grad_buf(b), g);
            }
            Op::Mul { a, b, out: _ } => {
                // Clone both operands: a and b may be the same node (x*x).
                let (a, b) = (*a, *b);
                let adata = self.nodes[a].data.clone();
                let bdata = self.nodes[b].data.clone();
                {
                    let da = self.grad_buf(a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bdata[i];
                    }
                }
                {
                    let db = self.grad_buf(b);
                    for i in 0..g.len() {
                        db[i] += g[i] * adata[i];
                    }
                }
            }
            Op::Scale { x, factor, out: _ } => {
                let (x, factor) = (*x, *factor);
                let dx = self.grad_buf(x);
                for (dv, gv) in dx.iter_mut().zip(g) {
                    *dv += *gv * factor;
                }
            }
            Op::ConcatChannels { xs, out } => {
                let xs = xs.clone();
                let os = self.nodes[*out].shape;
                let plane = os.plane();
                let mut offset = 0;
                for x in xs {
                    let s = self.nodes[x].shape;
                    let dx = self.grad_buf(x);
                    for n in 0..s.n {
                        let src_base = (n * os.c + offset) * plane;
                        let dst_base = n * s.c * plane;
                        for i in 0..s.c * plane {
                            dx[dst_base + i] += g[src_base + i];
                        }
                    }
                    offset += s.c;
                }
            }
            Op::BnTrain { x, gamma, beta, mean, inv_std, out: _ } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xs = self.nodes[x].shape;
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let xdata = std::mem::take(&mut self.nodes[x].data);
                let gdata = std::mem::take(&mut self.nodes[gamma].data);
                let mut dx = std::mem::take(self.grad_buf(x));
                let mut dgamma = std::mem::take(self.grad_buf(gamma));
                let mut dbeta = std::mem::take(self.grad_buf(beta));
                kernels::bn_train_bwd(
                    exec, g, &xdata, xs, &gdata, &mean, &inv_std, &mut dx, &mut dgamma, &mut dbeta,
                );
                self.nodes[x].data = xdata;
                self.nodes[gamma].data = gdata;
                self.grads[x] = Some(dx);
                self.grads[gamma] = Some(dgamma);
                self.grads[beta] = Some(dbeta);
            }
            Op::BnEval { x, gamma, beta, mean, inv_std, out: _ } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xs = self.nodes[x].shape;
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let xdata = std::mem::take(&mut self.nodes[x].data);
                let gdata = std::mem::take(&mut self.nodes[gamma].data);
                let mut dx = std::mem::take(self.grad_buf(x));
                let mut dgamma = std::mem::take(self.grad_buf(gamma));
                let mut dbeta = std::mem::take(self.grad_buf(beta));
                kernels::bn_eval_bwd(
                    exec, g, &xdata, xs, &gdata, &mean, &inv_std, &mut dx, &mut dgamma, &mut dbeta,
                );
                self.nodes[x].data = xdata;
                self.nodes[gamma].data = gdata;
                self.grads[x] = Some(dx);
                self.grads[gamma] = Some(dgamma);
                self.grads[beta] = Some(dbeta);
            }
            Op::MaskedSoftmax { x, out } => {
                let (x, out) = (*x, *out);
                let xs = self.nodes[x].shape;
                let ydata = std::mem::take(&mut self.nodes[out].data);
                kernels::masked_softmax_channels_bwd(exec, g, &ydata, xs, self.grad_buf(x));
                self.nodes[out].data = ydata;
            }
            Op::AttnCore { q, k, v, row_emb, col_emb, scope, heads, weights: _, out: _ } => {
                let (q, k, v, row_emb, col_emb, scope, heads) =
                    (*q, *k, *v, *row_emb, *col_emb, *scope, *heads);
                let xs = self.nodes[q].shape;
                let qd = std::mem::take(&mut self.nodes[q].data);
                let kd = std::mem::take(&mut self.nodes[k].data);
                let vd = std::mem::take(&mut self.nodes[v].data);
                let red = std::mem::take(&mut self.nodes[row_emb].data);
                let ced = std::mem::take(&mut self.nodes[col_emb].data);
                let wts = match &self.ops[oi] {
                    Op::AttnCore { weights, .. } => weights.clone(),
                    _ => unreachable!(),
                };
                let mut dq = std::mem::take(self.grad_buf(q));
                let mut dk = std::mem::take(self.grad_buf(k));
                let mut dv = std::mem::take(self.grad_buf(v));
                let mut dre = std::mem::take(self.grad_buf(row_emb));
                let mut dce = std::mem::take(self.grad_buf(col_emb));
                kernels::attn_core_bwd(
                    exec, g, &qd, &kd, &vd, xs, &red, &ced, &wts, scope, heads, &mut dq, &mut dk,
                    &mut dv, &mut dre, &mut dce,
                );
                self.nodes[q].data = qd;
                self.nodes[k].data = kd;
                self.nodes[v].data = vd;
                self.nodes[row_emb].data = red;
                self.nodes[col_emb].data = ced;
                self.grads[q] = Some(dq);
                self.grads[k] = Some(dk);
                self.grads[v] = Some(dv);
                self.grads[row_emb] = Some(dre);
                self.grads[col_emb] = Some(dce);
            }
            Op::SumAll { x, out: _ } => {
                let x = *x;
                let gv = g[0];
                let dx = self.grad_buf(x);
                for dv in dx.iter_mut() {
                    *dv += gv;
                }
            }
            Op::MeanAll { x, out: _ } => {
                let x = *x;
                let gv = g[0] / E::from_usize(self.nodes[x].data.len());
                let dx = self.grad_buf(x);
                for dv in dx.iter_mut() {
                    *dv += gv;
                }
            }
            Op::BceWithLogits { logits, target, out: _ } => {
                let (logits, target) = (*logits, *target);
                let zdata = std::mem::take(&mut self.nodes[logits].data);
                let tdata = std::mem::take(&mut self.nodes[target].data);
                let gv = g[0] / E::from_usize(zdata.len());
                {
                    let dz = self.grad_buf(logits);
                    for i in 0..zdata.len() {
                        let sig = E::ONE / (E::ONE + (-zdata[i]).exp());
                        dz[i] += gv * (sig - tdata[i]);
                    }
                }
                self.nodes[logits].data = zdata;
                self.nodes[target].data = tdata;
            }
        }
    }

    /// Move accumulated parameter gradients into the store (adding to any
    /// gradient already there). Parameters untouched by the loss get an
    /// explicit zero gradient.
    pub fn flush_grads(&self, store: &mut ParamStore<E>) -> Result<()> {
        for (node, name) in &self.params {
            match &self.grads.get(*node).and_then(|g| g.as_ref()) {
                Some(g) => store.accumulate_grad(name, g)?,
                None => store.touch_grad(name)?,
            }
        }
        Ok(())
    }
}

fn output_of<E: Elem>(op: &Op<E>) -> usize {
    match op {
        Op::Conv2d { out, .. }
        | Op::Bilinear { out, .. }
        | Op::AvgPool2x { out, .. }
        | Op::Relu { out, .. }
        | Op::Add { out, .. }
        | Op::Mul { out, .. }
        | Op::Scale { out, .. }
        | Op::ConcatChannels { out, .. }
        | Op::BnTrain { out, .. }
        | Op::BnEval { out, .. }
        | Op::MaskedSoftmax { out, .. }
        | Op::AttnCore { out, .. }
        | Op::SumAll { out, .. }
        | Op::MeanAll { out, .. }
        | Op::BceWithLogits { out, .. } => *out,
    }
}

fn add_into<E: Elem>(slot: &mut Option<Vec<E>>, g: &[E]) {
    match slot {
        Some(buf) => add_direct(buf, g),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_direct<E: Elem>(buf: &mut [E], g: &[E]) {
    for (b, v) in buf.iter_mut().zip(g) {
        *b += *v;
    }
}
