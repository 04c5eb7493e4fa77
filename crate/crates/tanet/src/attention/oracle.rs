//! Literal reference implementation of temporal attention.
//!
//! Loops over every batch entry, head, pixel and neighbor, recomputing
//! projections on the fly. Deliberately shares no code with the optimized
//! kernel so the two can check each other.

use super::{Scope, TaParams};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nested-loop temporal attention with semantics identical to the optimized
/// path: query from `x_q` at the pixel, keys/values from `x_kv` at scope
/// positions, logit `q . (k + e)`, softmax over valid neighbors.
pub fn ta_naive_oracle<E: Elem>(
    x_q: &Tensor<E>,
    x_kv: &Tensor<E>,
    params: &TaParams<E>,
    scope: Scope,
    heads: usize,
) -> Result<Tensor<E>> {
    let s = x_q.shape();
    if s != x_kv.shape() {
        return Err(Error::shape(
            "ta_naive_oracle",
            format!("temporal inputs disagree: {} vs {}", s, x_kv.shape()),
        ));
    }
    let c_in = s.c;
    let c_out = params.wq.shape().n;
    let d_head = c_out / heads;
    let d_half = d_head / 2;
    let row_radius = (scope.row_span() as i64 - 1) / 2;
    let col_radius = (scope.col_span() as i64 - 1) / 2;

    let mut out = Tensor::zeros(crate::shape::Shape::new(s.n, c_out, s.h, s.w));
    for n in 0..s.n {
        for head in 0..heads {
            for i in 0..s.h {
                for j in 0..s.w {
                    // Query vector for this head at (i, j).
                    let mut q = vec![E::ZERO; d_head];
                    for (c, qc) in q.iter_mut().enumerate() {
                        let row = head * d_head + c;
                        let mut acc = E::ZERO;
                        for ci in 0..c_in {
                            acc += params.wq.get(row, ci, 0, 0) * x_q.get(n, ci, i, j);
                        }
                        *qc = acc;
                    }

                    // Logits over the in-bounds neighbors.
                    let mut entries: Vec<(E, usize, usize)> = Vec::new();
                    for (ri, dr) in (-row_radius..=row_radius).enumerate() {
                        for (ci_off, dc) in (-col_radius..=col_radius).enumerate() {
                            let a = i as i64 + dr;
                            let b = j as i64 + dc;
                            if a < 0 || a >= s.h as i64 || b < 0 || b >= s.w as i64 {
                                continue;
                            }
                            let (a, b) = (a as usize, b as usize);
                            let mut logit = E::ZERO;
                            for c in 0..d_head {
                                let row = head * d_head + c;
                                let mut k = E::ZERO;
                                for ci in 0..c_in {
                                    k += params.wk.get(row, ci, 0, 0) * x_kv.get(n, ci, a, b);
                                }
                                let e = if c < d_half {
                                    params.row_emb.get(head, ri, c, 0)
                                } else {
                                    params.col_emb.get(head, ci_off, c - d_half, 0)
                                };
                                logit += q[c] * (k + e);
                            }
                            entries.push((logit, a, b));
                        }
                    }

                    // Softmax over the collected logits.
                    let mut max = entries[0].0;
                    for e in &entries {
                        if e.0 > max {
                            max = e.0;
                        }
                    }
                    let mut sum = E::ZERO;
                    let mut exps = Vec::with_capacity(entries.len());
                    for e in &entries {
                        let v = (e.0 - max).exp();
                        sum += v;
                        exps.push(v);
                    }

                    // Weighted aggregation of value vectors.
                    for c in 0..d_head {
                        let row = head * d_head + c;
                        let mut acc = E::ZERO;
                        for (idx, &(_, a, b)) in entries.iter().enumerate() {
                            let mut v = E::ZERO;
                            for ci in 0..c_in {
                                v += params.wv.get(row, ci, 0, 0) * x_kv.get(n, ci, a, b);
                            }
                            acc += (exps[idx] / sum) * v;
                        }
                        out.set(n, row, i, j, acc);
                    }
                }
            }
        }
    }
    Ok(out)
}
