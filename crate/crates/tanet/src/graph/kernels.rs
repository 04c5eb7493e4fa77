//! Dense compute kernels behind the graph ops.
//!
//! Every kernel maps over disjoint output slots (see [`crate::exec`]) with all
//! accumulation done in a fixed order, so results are bit-identical across
//! sequential and parallel execution.

use crate::attention::Scope;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, map_slots, Exec};
use crate::shape::Shape;

/// First/last output coordinate whose input `o*stride + k_off - pad` lands in
/// `[0, in_len)`, clipped to `[0, out_len)`.
#[inline]
fn valid_out_range(
    in_len: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let max_i = in_len as i64 - 1 + pad as i64 - k_off as i64;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

// ---------------------------------------------------------------- conv2d

pub fn conv2d_fwd<E: Elem>(
    exec: Exec,
    x: &[E],
    xs: Shape,
    w: &[E],
    ws: Shape,
    bias: Option<&[E]>,
    stride: usize,
    padding: usize,
    out: &mut [E],
    os: Shape,
) {
    let (ci_total, h, win) = (xs.c, xs.h, xs.w);
    let (co_total, kh, kw) = (ws.n, ws.h, ws.w);
    let (ho, wo) = (os.h, os.w);
    let in_plane = h * win;
    let out_plane = ho * wo;

    for_each_chunk(exec, out, out_plane, |plane_idx, op| {
        let n = plane_idx / co_total;
        let co = plane_idx % co_total;
        op.fill(bias.map_or(E::ZERO, |b| b[co]));
        let xn = &x[n * ci_total * in_plane..][..ci_total * in_plane];
        for ci in 0..ci_total {
            let xp = &xn[ci * in_plane..][..in_plane];
            let wbase = (co * ci_total + ci) * kh * kw;
            for kr in 0..kh {
                let (oh_lo, oh_hi) = valid_out_range(h, kr, stride, padding, ho);
                for kc in 0..kw {
                    let wv = w[wbase + kr * kw + kc];
                    let (ow_lo, ow_hi) = valid_out_range(win, kc, stride, padding, wo);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kr - padding;
                        let xrow = &xp[ih * win..][..win];
                        let orow = &mut op[oh * wo..][..wo];
                        let mut iw = ow_lo * stride + kc - padding;
                        for ov in orow[ow_lo..ow_hi].iter_mut() {
                            *ov += wv * xrow[iw];
                            iw += stride;
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_bwd_x<E: Elem>(
    exec: Exec,
    g: &[E],
    os: Shape,
    w: &[E],
    ws: Shape,
    stride: usize,
    padding: usize,
    dx: &mut [E],
    xs: Shape,
) {
    let (ci_total, h, win) = (xs.c, xs.h, xs.w);
    let (co_total, kh, kw) = (ws.n, ws.h, ws.w);
    let (ho, wo) = (os.h, os.w);
    let in_plane = h * win;
    let out_plane = ho * wo;

    for_each_chunk(exec, dx, in_plane, |plane_idx, dxp| {
        let n = plane_idx / ci_total;
        let ci = plane_idx % ci_total;
        for co in 0..co_total {
            let gp = &g[(n * co_total + co) * out_plane..][..out_plane];
            let wbase = (co * ci_total + ci) * kh * kw;
            for kr in 0..kh {
                let (oh_lo, oh_hi) = valid_out_range(h, kr, stride, padding, ho);
                for kc in 0..kw {
                    let wv = w[wbase + kr * kw + kc];
                    let (ow_lo, ow_hi) = valid_out_range(win, kc, stride, padding, wo);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kr - padding;
                        let dxrow = &mut dxp[ih * win..][..win];
                        let grow = &gp[oh * wo..][..wo];
                        let mut iw = ow_lo * stride + kc - padding;
                        for gv in grow[ow_lo..ow_hi].iter() {
                            dxrow[iw] += wv * *gv;
                            iw += stride;
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_bwd_w<E: Elem>(
    exec: Exec,
    g: &[E],
    os: Shape,
    x: &[E],
    xs: Shape,
    stride: usize,
    padding: usize,
    dw: &mut [E],
    ws: Shape,
) {
    let (n_total, ci_total, h, win) = (xs.n, xs.c, xs.h, xs.w);
    let (co_total, kh, kw) = (ws.n, ws.h, ws.w);
    let (ho, wo) = (os.h, os.w);
    let in_plane = h * win;
    let out_plane = ho * wo;

    for_each_chunk(exec, dw, ci_total * kh * kw, |co, dwp| {
        for ci in 0..ci_total {
            for kr in 0..kh {
                let (oh_lo, oh_hi) = valid_out_range(h, kr, stride, padding, ho);
                for kc in 0..kw {
                    let (ow_lo, ow_hi) = valid_out_range(win, kc, stride, padding, wo);
                    let mut acc = E::ZERO;
                    for n in 0..n_total {
                        let gp = &g[(n * co_total + co) * out_plane..][..out_plane];
                        let xp = &x[(n * ci_total + ci) * in_plane..][..in_plane];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kr - padding;
                            let xrow = &xp[ih * win..][..win];
                            let grow = &gp[oh * wo..][..wo];
                            let mut iw = ow_lo * stride + kc - padding;
                            for gv in grow[ow_lo..ow_hi].iter() {
                                acc += *gv * xrow[iw];
                                iw += stride;
                            }
                        }
                    }
                    dwp[(ci * kh + kr) * kw + kc] += acc;
                }
            }
        }
    });
}

pub fn conv2d_bwd_b<E: Elem>(exec: Exec, g: &[E], os: Shape, db: &mut [E]) {
    let out_plane = os.plane();
    let co_total = os.c;
    for_each_chunk(exec, db, 1, |co, dbv| {
        let mut acc = E::ZERO;
        for n in 0..os.n {
            let gp = &g[(n * co_total + co) * out_plane..][..out_plane];
            for gv in gp {
                acc += *gv;
            }
        }
        dbv[0] += acc;
    });
}

// ---------------------------------------------------------- bilinear resize

/// Per-axis sample positions under the half-pixel-center convention:
/// `src = (dst + 0.5) / scale - 0.5`, clamped to the valid range.
fn bilinear_axis<E: Elem>(out_len: usize, in_len: usize, scale: usize) -> Vec<(usize, usize, E)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, E::from_f64(src - i0 as f64))
        })
        .collect()
}

pub fn bilinear_fwd<E: Elem>(exec: Exec, x: &[E], xs: Shape, scale: usize, out: &mut [E], os: Shape) {
    let ymap = bilinear_axis::<E>(os.h, xs.h, scale);
    let xmap = bilinear_axis::<E>(os.w, xs.w, scale);
    let in_plane = xs.plane();
    for_each_chunk(exec, out, os.plane(), |pi, op| {
        let xp = &x[pi * in_plane..][..in_plane];
        for (oh, &(y0, y1, fy)) in ymap.iter().enumerate() {
            let r0 = &xp[y0 * xs.w..][..xs.w];
            let r1 = &xp[y1 * xs.w..][..xs.w];
            let orow = &mut op[oh * os.w..][..os.w];
            for (ov, &(x0, x1, fx)) in orow.iter_mut().zip(xmap.iter()) {
                // Lerp form keeps constants exact: c + f*(c-c) == c.
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                *ov = top + fy * (bot - top);
            }
        }
    });
}

pub fn bilinear_bwd<E: Elem>(exec: Exec, g: &[E], os: Shape, scale: usize, dx: &mut [E], xs: Shape) {
    let ymap = bilinear_axis::<E>(os.h, xs.h, scale);
    let xmap = bilinear_axis::<E>(os.w, xs.w, scale);
    let out_plane = os.plane();
    for_each_chunk(exec, dx, xs.plane(), |pi, dxp| {
        let gp = &g[pi * out_plane..][..out_plane];
        for (oh, &(y0, y1, fy)) in ymap.iter().enumerate() {
            let wy1 = fy;
            let wy0 = E::ONE - fy;
            for (ow, &(x0, x1, fx)) in xmap.iter().enumerate() {
                let gv = gp[oh * os.w + ow];
                let wx1 = fx;
                let wx0 = E::ONE - fx;
                dxp[y0 * xs.w + x0] += wy0 * wx0 * gv;
                dxp[y0 * xs.w + x1] += wy0 * wx1 * gv;
                dxp[y1 * xs.w + x0] += wy1 * wx0 * gv;
                dxp[y1 * xs.w + x1] += wy1 * wx1 * gv;
            }
        }
    });
}

// ------------------------------------------------------------- avg pooling

pub fn avgpool2x_fwd<E: Elem>(exec: Exec, x: &[E], xs: Shape, out: &mut [E], os: Shape) {
    let quarter = E::from_f64(0.25);
    let in_plane = xs.plane();
    for_each_chunk(exec, out, os.plane(), |pi, op| {
        let xp = &x[pi * in_plane..][..in_plane];
        for oh in 0..os.h {
            let r0 = &xp[(2 * oh) * xs.w..][..xs.w];
            let r1 = &xp[(2 * oh + 1) * xs.w..][..xs.w];
            let orow = &mut op[oh * os.w..][..os.w];
            for (ow, ov) in orow.iter_mut().enumerate() {
                *ov = (r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1]) * quarter;
            }
        }
    });
}

pub fn avgpool2x_bwd<E: Elem>(exec: Exec, g: &[E], os: Shape, dx: &mut [E], xs: Shape) {
    let quarter = E::from_f64(0.25);
    let out_plane = os.plane();
    for_each_chunk(exec, dx, xs.plane(), |pi, dxp| {
        let gp = &g[pi * out_plane..][..out_plane];
        for oh in 0..os.h {
            for ow in 0..os.w {
                let gv = gp[oh * os.w + ow] * quarter;
                dxp[(2 * oh) * xs.w + 2 * ow] += gv;
                dxp[(2 * oh) * xs.w + 2 * ow + 1] += gv;
                dxp[(2 * oh + 1) * xs.w + 2 * ow] += gv;
                dxp[(2 * oh + 1) * xs.w + 2 * ow + 1] += gv;
            }
        }
    });
}

// ----------------------------------------------------------- normalization

/// Per-channel mean and biased variance over (N, H, W).
pub fn bn_stats<E: Elem>(exec: Exec, x: &[E], xs: Shape) -> (Vec<E>, Vec<E>) {
    let plane = xs.plane();
    let m = E::from_usize(xs.n * plane);
    let stats = map_slots(exec, xs.c, |c| {
        let mut sum = E::ZERO;
        for n in 0..xs.n {
            let xp = &x[(n * xs.c + c) * plane..][..plane];
            for v in xp {
                sum += *v;
            }
        }
        let mean = sum / m;
        let mut sq = E::ZERO;
        for n in 0..xs.n {
            let xp = &x[(n * xs.c + c) * plane..][..plane];
            for v in xp {
                let d = *v - mean;
                sq += d * d;
            }
        }
        (mean, sq / m)
    });
    stats.into_iter().unzip()
}

pub fn bn_apply<E: Elem>(
    exec: Exec,
    x: &[E],
    xs: Shape,
    gamma: &[E],
    beta: &[E],
    mean: &[E],
    inv_std: &[E],
    out: &mut [E],
) {
    let plane = xs.plane();
    for_each_chunk(exec, out, plane, |pi, op| {
        let c = pi % xs.c;
        let (g, b, m, s) = (gamma[c], beta[c], mean[c], inv_std[c]);
        let xp = &x[pi * plane..][..plane];
        for (ov, xv) in op.iter_mut().zip(xp) {
            *ov = g * (*xv - m) * s + b;
        }
    });
}

/// Backward through train-mode normalization (batch statistics are a function
/// of the input). Accumulates into dx / dgamma / dbeta.
#[allow(clippy::too_many_arguments)]
pub fn bn_train_bwd<E: Elem>(
    exec: Exec,
    g: &[E],
    x: &[E],
    xs: Shape,
    gamma: &[E],
    mean: &[E],
    inv_std: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    let plane = xs.plane();
    let m = E::from_usize(xs.n * plane);
    // Per-channel reductions, each internally in fixed (n, h, w) order.
    let sums = map_slots(exec, xs.c, |c| {
        let mut s1 = E::ZERO;
        let mut s2 = E::ZERO;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            let gp = &g[base..][..plane];
            let xp = &x[base..][..plane];
            for (gv, xv) in gp.iter().zip(xp) {
                s1 += *gv;
                s2 += *gv * (*xv - mean[c]) * inv_std[c];
            }
        }
        (s1, s2)
    });
    for (c, &(s1, s2)) in sums.iter().enumerate() {
        dbeta[c] += s1;
        dgamma[c] += s2;
    }
    for_each_chunk(exec, dx, plane, |pi, dxp| {
        let c = pi % xs.c;
        let (s1, s2) = sums[c];
        let scale = gamma[c] * inv_std[c];
        let base = pi * plane;
        let gp = &g[base..][..plane];
        let xp = &x[base..][..plane];
        for ((dv, gv), xv) in dxp.iter_mut().zip(gp).zip(xp) {
            let xhat = (*xv - mean[c]) * inv_std[c];
            *dv += scale * (*gv - s1 / m - xhat * s2 / m);
        }
    });
}

/// Backward through eval-mode normalization (statistics are constants).
#[allow(clippy::too_many_arguments)]
pub fn bn_eval_bwd<E: Elem>(
    exec: Exec,
    g: &[E],
    x: &[E],
    xs: Shape,
    gamma: &[E],
    mean: &[E],
    inv_std: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    let plane = xs.plane();
    let sums = map_slots(exec, xs.c, |c| {
        let mut s1 = E::ZERO;
        let mut s2 = E::ZERO;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            let gp = &g[base..][..plane];
            let xp = &x[base..][..plane];
            for (gv, xv) in gp.iter().zip(xp) {
                s1 += *gv;
                s2 += *gv * (*xv - mean[c]) * inv_std[c];
            }
        }
        (s1, s2)
    });
    for (c, &(s1, s2)) in sums.iter().enumerate() {
        dbeta[c] += s1;
        dgamma[c] += s2;
    }
    for_each_chunk(exec, dx, plane, |pi, dxp| {
        let c = pi % xs.c;
        let scale = gamma[c] * inv_std[c];
        let gp = &g[pi * plane..][..plane];
        for (dv, gv) in dxp.iter_mut().zip(gp) {
            *dv += scale * *gv;
        }
    });
}

// ---------------------------------------------------------- masked softmax

/// Numerically stabilized softmax over the valid entries of one slice.
/// Invalid entries map to exactly zero. Errors when nothing is valid.
pub fn masked_softmax_slice<E: Elem>(logits: &[E], valid: &[bool], out: &mut [E]) -> Result<()> {
    debug_assert_eq!(logits.len(), valid.len());
    debug_assert_eq!(logits.len(), out.len());
    let mut max: Option<E> = None;
    for (l, v) in logits.iter().zip(valid) {
        if *v {
            max = Some(match max {
                Some(m) => m.maximum(*l),
                None => *l,
            });
        }
    }
    let max = max.ok_or(Error::AllMasked)?;
    let mut sum = E::ZERO;
    for ((o, l), v) in out.iter_mut().zip(logits).zip(valid) {
        if *v {
            let e = (*l - max).exp();
            sum += e;
            *o = e;
        } else {
            *o = E::ZERO;
        }
    }
    for (o, v) in out.iter_mut().zip(valid) {
        if *v {
            *o /= sum;
        }
    }
    Ok(())
}

/// Channel-axis masked softmax over a (N,C,H,W) tensor; `mask` entries equal
/// to zero are invalid.
pub fn masked_softmax_channels_fwd<E: Elem>(
    exec: Exec,
    x: &[E],
    xs: Shape,
    mask: &[E],
    out: &mut [E],
) {
    let plane = xs.plane();
    let cstride = plane;
    let nsize = xs.c * plane;
    for_each_chunk(exec, out, nsize, |n, op| {
        let xp = &x[n * nsize..][..nsize];
        let mp = &mask[n * nsize..][..nsize];
        let mut logits = vec![E::ZERO; xs.c];
        let mut valid = vec![false; xs.c];
        let mut res = vec![E::ZERO; xs.c];
        for p in 0..plane {
            for c in 0..xs.c {
                logits[c] = xp[c * cstride + p];
                valid[c] = mp[c * cstride + p] != E::ZERO;
            }
            // Emptiness was rejected at op construction.
            masked_softmax_slice(&logits, &valid, &mut res).expect("validated mask");
            for c in 0..xs.c {
                op[c * cstride + p] = res[c];
            }
        }
    });
}

pub fn masked_softmax_channels_bwd<E: Elem>(
    exec: Exec,
    g: &[E],
    y: &[E],
    xs: Shape,
    dx: &mut [E],
) {
    let plane = xs.plane();
    let nsize = xs.c * plane;
    for_each_chunk(exec, dx, nsize, |n, dxp| {
        let gp = &g[n * nsize..][..nsize];
        let yp = &y[n * nsize..][..nsize];
        for p in 0..plane {
            let mut dot = E::ZERO;
            for c in 0..xs.c {
                dot += gp[c * plane + p] * yp[c * plane + p];
            }
            for c in 0..xs.c {
                let i = c * plane + p;
                dxp[i] += yp[i] * (gp[i] - dot);
            }
        }
    });
}

// --------------------------------------------------------- attention core

/// Layout bookkeeping shared by the attention forward/backward kernels.
struct AttnGeom {
    d_head: usize,
    d_half: usize,
    plane: usize,
    positions: usize,
    row_span: usize,
    col_span: usize,
}

impl AttnGeom {
    fn new(xs: Shape, scope: Scope, heads: usize) -> Self {
        let d_head = xs.c / heads;
        AttnGeom {
            d_head,
            d_half: d_head / 2,
            plane: xs.plane(),
            positions: scope.positions(),
            row_span: scope.row_span(),
            col_span: scope.col_span(),
        }
    }

    /// Copy one head block of a (N,C,H,W) buffer into (plane, d_head) layout.
    fn gather<E: Elem>(&self, src: &[E], n: usize, head: usize, c_total: usize, out: &mut [E]) {
        let base = (n * c_total + head * self.d_head) * self.plane;
        for ch in 0..self.d_head {
            let col = &src[base + ch * self.plane..][..self.plane];
            for (p, v) in col.iter().enumerate() {
                out[p * self.d_head + ch] = *v;
            }
        }
    }

    /// Positional-encoding table for one head: positions x d_head, first half
    /// from the row table, second half from the column table.
    fn encode<E: Elem>(&self, row_emb: &[E], col_emb: &[E], head: usize, scope: Scope, out: &mut [E]) {
        for (idx, off) in scope.offsets().iter().enumerate() {
            let re = &row_emb[(head * self.row_span + off.row_idx) * self.d_half..][..self.d_half];
            let ce = &col_emb[(head * self.col_span + off.col_idx) * self.d_half..][..self.d_half];
            out[idx * self.d_head..][..self.d_half].copy_from_slice(re);
            out[idx * self.d_head + self.d_half..][..self.d_half].copy_from_slice(ce);
        }
    }
}

/// Forward temporal-attention aggregation. `q`, `k`, `v` are (N,C,H,W);
/// per-pixel, per-head weights go to `weights` with layout
/// (N, heads, positions, H, W).
#[allow(clippy::too_many_arguments)]
pub fn attn_core_fwd<E: Elem>(
    exec: Exec,
    q: &[E],
    k: &[E],
    v: &[E],
    xs: Shape,
    row_emb: &[E],
    col_emb: &[E],
    scope: Scope,
    heads: usize,
    out: &mut [E],
    weights: &mut [E],
) {
    let geom = AttnGeom::new(xs, scope, heads);
    let (h, w) = (xs.h, xs.w);
    let (dh, plane, s) = (geom.d_head, geom.plane, geom.positions);
    let offsets = scope.offsets();

    let blocks = map_slots(exec, xs.n * heads, |slot| {
        let n = slot / heads;
        let head = slot % heads;
        let mut qt = vec![E::ZERO; plane * dh];
        let mut kt = vec![E::ZERO; plane * dh];
        let mut vt = vec![E::ZERO; plane * dh];
        geom.gather(q, n, head, xs.c, &mut qt);
        geom.gather(k, n, head, xs.c, &mut kt);
        geom.gather(v, n, head, xs.c, &mut vt);
        let mut e = vec![E::ZERO; s * dh];
        geom.encode(row_emb, col_emb, head, scope, &mut e);

        let mut out_t = vec![E::ZERO; plane * dh];
        let mut wts = vec![E::ZERO; s * plane];
        let mut logits = vec![E::ZERO; s];
        let mut valid = vec![false; s];
        let mut wrow = vec![E::ZERO; s];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let qv = &qt[p * dh..][..dh];
                for (idx, off) in offsets.iter().enumerate() {
                    let a = i as i64 + off.dr;
                    let b = j as i64 + off.dc;
                    if a < 0 || a >= h as i64 || b < 0 || b >= w as i64 {
                        valid[idx] = false;
                        logits[idx] = E::ZERO;
                        continue;
                    }
                    valid[idx] = true;
                    let kv = &kt[(a as usize * w + b as usize) * dh..][..dh];
                    let ev = &e[idx * dh..][..dh];
                    let mut acc = E::ZERO;
                    for c in 0..dh {
                        acc += qv[c] * (kv[c] + ev[c]);
                    }
                    logits[idx] = acc;
                }
                // The scope always contains the center offset, so at least
                // one neighbor is valid.
                masked_softmax_slice(&logits, &valid, &mut wrow).expect("center neighbor valid");
                let ot = &mut out_t[p * dh..][..dh];
                for (idx, off) in offsets.iter().enumerate() {
                    if !valid[idx] {
                        continue;
                    }
                    let wgt = wrow[idx];
                    wts[idx * plane + p] = wgt;
                    let pv = ((i as i64 + off.dr) as usize) * w + (j as i64 + off.dc) as usize;
                    let vv = &vt[pv * dh..][..dh];
                    for c in 0..dh {
                        ot[c] += wgt * vv[c];
                    }
                }
            }
        }
        (out_t, wts)
    });

    for (slot, (out_t, wts)) in blocks.into_iter().enumerate() {
        let n = slot / heads;
        let head = slot % heads;
        let base = (n * xs.c + head * dh) * plane;
        for ch in 0..dh {
            let col = &mut out[base + ch * plane..][..plane];
            for (p, ov) in col.iter_mut().enumerate() {
                *ov = out_t[p * dh + ch];
            }
        }
        let wbase = (n * heads + head) * s * plane;
        weights[wbase..wbase + s * plane].copy_from_slice(&wts);
    }
}

/// Reverse-mode update for the attention core. Accumulates into dq/dk/dv and
/// the two embedding-table gradients.
#[allow(clippy::too_many_arguments)]
pub fn attn_core_bwd<E: Elem>(
    exec: Exec,
    g: &[E],
    q: &[E],
    k: &[E],
    v: &[E],
    xs: Shape,
    row_emb: &[E],
    col_emb: &[E],
    weights: &[E],
    scope: Scope,
    heads: usize,
    dq: &mut [E],
    dk: &mut [E],
    dv: &mut [E],
    d_row_emb: &mut [E],
    d_col_emb: &mut [E],
) {
    let geom = AttnGeom::new(xs, scope, heads);
    let (h, w) = (xs.h, xs.w);
    let (dh, dh2, plane, s) = (geom.d_head, geom.d_half, geom.plane, geom.positions);
    let offsets = scope.offsets();

    let blocks = map_slots(exec, xs.n * heads, |slot| {
        let n = slot / heads;
        let head = slot % heads;
        let mut qt = vec![E::ZERO; plane * dh];
        let mut kt = vec![E::ZERO; plane * dh];
        let mut vt = vec![E::ZERO; plane * dh];
        let mut gt = vec![E::ZERO; plane * dh];
        geom.gather(q, n, head, xs.c, &mut qt);
        geom.gather(k, n, head, xs.c, &mut kt);
        geom.gather(v, n, head, xs.c, &mut vt);
        geom.gather(g, n, head, xs.c, &mut gt);
        let mut e = vec![E::ZERO; s * dh];
        geom.encode(row_emb, col_emb, head, scope, &mut e);
        let wts = &weights[(n * heads + head) * s * plane..][..s * plane];

        let mut dq_t = vec![E::ZERO; plane * dh];
        let mut dk_t = vec![E::ZERO; plane * dh];
        let mut dv_t = vec![E::ZERO; plane * dh];
        let mut dre = vec![E::ZERO; geom.row_span * dh2];
        let mut dce = vec![E::ZERO; geom.col_span * dh2];
        let mut dwrow = vec![E::ZERO; s];
        let mut neigh = vec![usize::MAX; s];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let gv = &gt[p * dh..][..dh];
                // d(weight) per neighbor, then the softmax VJP.
                let mut dot = E::ZERO;
                for (idx, off) in offsets.iter().enumerate() {
                    let a = i as i64 + off.dr;
                    let b = j as i64 + off.dc;
                    if a < 0 || a >= h as i64 || b < 0 || b >= w as i64 {
                        neigh[idx] = usize::MAX;
                        dwrow[idx] = E::ZERO;
                        continue;
                    }
                    let pv = a as usize * w + b as usize;
                    neigh[idx] = pv;
                    let vv = &vt[pv * dh..][..dh];
                    let mut acc = E::ZERO;
                    for c in 0..dh {
                        acc += gv[c] * vv[c];
                    }
                    dwrow[idx] = acc;
                    dot += wts[idx * plane + p] * acc;
                }
                let qv = &qt[p * dh..][..dh];
                for (idx, off) in offsets.iter().enumerate() {
                    let pv = neigh[idx];
                    if pv == usize::MAX {
                        continue;
                    }
                    let wgt = wts[idx * plane + p];
                    let dlogit = wgt * (dwrow[idx] - dot);
                    let kv = &kt[pv * dh..][..dh];
                    let ev = &e[idx * dh..][..dh];
                    let dqv = &mut dq_t[p * dh..][..dh];
                    for c in 0..dh {
                        dqv[c] += dlogit * (kv[c] + ev[c]);
                    }
                    let dkv = &mut dk_t[pv * dh..][..dh];
                    let dvv = &mut dv_t[pv * dh..][..dh];
                    for c in 0..dh {
                        dkv[c] += dlogit * qv[c];
                        dvv[c] += wgt * gv[c];
                    }
                    let dre_row = &mut dre[off.row_idx * dh2..][..dh2];
                    let dce_row = &mut dce[off.col_idx * dh2..][..dh2];
                    for c in 0..dh2 {
                        dre_row[c] += dlogit * qv[c];
                        dce_row[c] += dlogit * qv[dh2 + c];
                    }
                }
            }
        }
        (dq_t, dk_t, dv_t, dre, dce)
    });

    // Scatter per-slot grads; embedding partials reduce in slot order.
    for (slot, (dq_t, dk_t, dv_t, dre, dce)) in blocks.into_iter().enumerate() {
        let n = slot / heads;
        let head = slot % heads;
        let base = (n * xs.c + head * dh) * plane;
        for ch in 0..dh {
            for p in 0..plane {
                dq[base + ch * plane + p] += dq_t[p * dh + ch];
                dk[base + ch * plane + p] += dk_t[p * dh + ch];
                dv[base + ch * plane + p] += dv_t[p * dh + ch];
            }
        }
        let re = &mut d_row_emb[head * geom.row_span * dh2..][..geom.row_span * dh2];
        for (a, b) in re.iter_mut().zip(&dre) {
            *a += *b;
        }
        let ce = &mut d_col_emb[head * geom.col_span * dh2..][..geom.col_span * dh2];
        for (a, b) in ce.iter_mut().zip(&dce) {
            *a += *b;
        }
    }
}
