//! Temporal attention: queries from one temporal channel score key/value
//! neighborhoods of the other within a local dependency scope, with factorized
//! relative positional encoding and channel-grouped heads.
//!
//! [`oracle`] holds an intentionally literal reference implementation that
//! shares no code with the optimized path.

pub mod oracle;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, WeightsRef};
use crate::rng::SeededRng;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Neighborhood shape a query pixel attends over: a square, or a horizontal
/// or vertical strip. Extents are odd so the scope is centered on the query.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scope {
    Square { extent: usize },
    HStrip { extent: usize },
    VStrip { extent: usize },
}

/// One scope offset: displacement plus its index into the row/column
/// positional tables.
#[derive(Clone, Copy, Debug)]
pub struct ScopeOffset {
    pub dr: i64,
    pub dc: i64,
    pub row_idx: usize,
    pub col_idx: usize,
}

impl Scope {
    pub fn square(extent: usize) -> Result<Scope> {
        Self::check(extent)?;
        Ok(Scope::Square { extent })
    }

    /// Horizontal strip of length 2*k_half+1: offsets (0, -K..K).
    pub fn hstrip(k_half: usize) -> Scope {
        Scope::HStrip { extent: 2 * k_half + 1 }
    }

    /// Vertical strip of length 2*k_half+1: offsets (-K..K, 0).
    pub fn vstrip(k_half: usize) -> Scope {
        Scope::VStrip { extent: 2 * k_half + 1 }
    }

    fn check(extent: usize) -> Result<()> {
        if extent == 0 || extent % 2 == 0 {
            return Err(Error::Config(format!(
                "scope extent must be a positive odd integer, got {extent}"
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> usize {
        match self {
            Scope::Square { extent } | Scope::HStrip { extent } | Scope::VStrip { extent } => {
                *extent
            }
        }
    }

    /// Number of distinct row offsets covered by the scope.
    pub fn row_span(&self) -> usize {
        match self {
            Scope::Square { extent } | Scope::VStrip { extent } => *extent,
            Scope::HStrip { .. } => 1,
        }
    }

    /// Number of distinct column offsets covered by the scope.
    pub fn col_span(&self) -> usize {
        match self {
            Scope::Square { extent } | Scope::HStrip { extent } => *extent,
            Scope::VStrip { .. } => 1,
        }
    }

    pub fn positions(&self) -> usize {
        self.row_span() * self.col_span()
    }

    /// All offsets in row-major order. The center (0,0) is always included.
    pub fn offsets(&self) -> Vec<ScopeOffset> {
        let rr = (self.row_span() as i64 - 1) / 2;
        let rc = (self.col_span() as i64 - 1) / 2;
        let mut out = Vec::with_capacity(self.positions());
        for (row_idx, dr) in (-rr..=rr).enumerate() {
            for (col_idx, dc) in (-rc..=rc).enumerate() {
                out.push(ScopeOffset { dr, dc, row_idx, col_idx });
            }
        }
        out
    }
}

/// A scope position relative to a query pixel; `valid` is false when it falls
/// outside the image (such positions are excluded from the softmax).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub row: i64,
    pub col: i64,
    pub valid: bool,
}

/// Every scope offset applied to query pixel (i, j) on an HxW map.
pub fn neighborhood(i: usize, j: usize, scope: Scope, h: usize, w: usize) -> Vec<Neighbor> {
    assert!(i < h && j < w, "query pixel ({i},{j}) outside {h}x{w} map");
    scope
        .offsets()
        .iter()
        .map(|off| {
            let row = i as i64 + off.dr;
            let col = j as i64 + off.dc;
            Neighbor { row, col, valid: row >= 0 && row < h as i64 && col >= 0 && col < w as i64 }
        })
        .collect()
}

/// Learnable state of one temporal-attention layer as plain tensors: 1x1
/// query/key/value projections plus the factorized relative-position tables.
#[derive(Clone, Debug)]
pub struct TaParams<E: Elem> {
    /// (c_out, c_in, 1, 1)
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    /// (heads, row_span, d_head/2, 1)
    pub row_emb: Tensor<E>,
    /// (heads, col_span, d_head/2, 1)
    pub col_emb: Tensor<E>,
}

impl<E: Elem> TaParams<E> {
    /// Fan-in-scaled random projections, small-normal positional tables.
    pub fn init(
        c_in: usize,
        c_out: usize,
        heads: usize,
        scope: Scope,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d_half = head_dims(c_out, heads)?;
        let proj_std = (2.0 / c_in as f64).sqrt();
        let proj = |rng: &mut SeededRng| {
            let mut t = Tensor::zeros(Shape::new(c_out, c_in, 1, 1));
            rng.fill_normal(t.data_mut(), proj_std);
            t
        };
        let wq = proj(rng);
        let wk = proj(rng);
        let wv = proj(rng);
        let mut row_emb = Tensor::zeros(Shape::new(heads, scope.row_span(), d_half, 1));
        rng.fill_normal(row_emb.data_mut(), 0.02);
        let mut col_emb = Tensor::zeros(Shape::new(heads, scope.col_span(), d_half, 1));
        rng.fill_normal(col_emb.data_mut(), 0.02);
        Ok(TaParams { wq, wk, wv, row_emb, col_emb })
    }

    pub fn zero_embeddings(&mut self) {
        self.row_emb.data_mut().fill(E::ZERO);
        self.col_emb.data_mut().fill(E::ZERO);
    }
}

/// d_head/2 for the factorized encoding; errors unless channels split evenly
/// into heads with an even head dimension.
pub fn head_dims(c_out: usize, heads: usize) -> Result<usize> {
    if heads == 0 || c_out % heads != 0 {
        return Err(Error::Config(format!("{c_out} channels not divisible into {heads} heads")));
    }
    let d_head = c_out / heads;
    if d_head % 2 != 0 {
        return Err(Error::Config(format!(
            "head dim {d_head} must be even for factorized positional encoding"
        )));
    }
    Ok(d_head / 2)
}

/// Graph handles for one attention layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct TaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub row_emb: Var,
    pub col_emb: Var,
}

impl TaVars {
    /// Register plain params as graph constants (for standalone use/tests).
    pub fn constants<E: Elem>(g: &mut Graph<E>, p: &TaParams<E>) -> TaVars {
        TaVars {
            wq: g.constant(&p.wq),
            wk: g.constant(&p.wk),
            wv: g.constant(&p.wv),
            row_emb: g.constant(&p.row_emb),
            col_emb: g.constant(&p.col_emb),
        }
    }
}

pub struct TaOutput {
    pub map: Var,
    pub weights: WeightsRef,
}

/// One temporal-attention layer: the query map comes from `x_q`, keys and
/// values from `x_kv`. Output channels are the concatenated head groups.
pub fn temporal_attention<E: Elem>(
    g: &mut Graph<E>,
    x_q: Var,
    x_kv: Var,
    p: &TaVars,
    scope: Scope,
    heads: usize,
) -> Result<TaOutput> {
    let (s0, s1) = (g.shape(x_q), g.shape(x_kv));
    if s0 != s1 {
        return Err(Error::shape(
            "temporal_attention",
            format!("temporal inputs disagree: {} vs {}", s0, s1),
        ));
    }
    let q = g.conv2d(x_q, p.wq, None, 1, 0)?;
    let k = g.conv2d(x_kv, p.wk, None, 1, 0)?;
    let v = g.conv2d(x_kv, p.wv, None, 1, 0)?;
    let (map, weights) = g.attention_core(q, k, v, p.row_emb, p.col_emb, scope, heads)?;
    Ok(TaOutput { map, weights })
}

pub struct ChvaOutput {
    pub map: Var,
    pub horizontal: TaOutput,
    pub vertical: TaOutput,
}

/// Concurrent horizontal and vertical strip attention of length 2*k_half+1;
/// the two branches use independent parameter sets and their maps are summed.
pub fn chva_forward<E: Elem>(
    g: &mut Graph<E>,
    x_q: Var,
    x_kv: Var,
    params_h: &TaVars,
    params_v: &TaVars,
    k_half: usize,
    heads: usize,
) -> Result<ChvaOutput> {
    let horizontal = temporal_attention(g, x_q, x_kv, params_h, Scope::hstrip(k_half), heads)?;
    let vertical = temporal_attention(g, x_q, x_kv, params_v, Scope::vstrip(k_half), heads)?;
    let map = g.add(horizontal.map, vertical.map)?;
    Ok(ChvaOutput { map, horizontal, vertical })
}

/// Integrate a strip-attention map into the square-scope map (elementwise sum).
pub fn fuse_chva<E: Elem>(g: &mut Graph<E>, square_map: Var, chva_map: Var) -> Result<Var> {
    g.add(square_map, chva_map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_spans() {
        let sq = Scope::square(5).unwrap();
        assert_eq!((sq.row_span(), sq.col_span(), sq.positions()), (5, 5, 25));
        let h = Scope::hstrip(3);
        assert_eq!((h.extent(), h.row_span(), h.col_span()), (7, 1, 7));
        let v = Scope::vstrip(2);
        assert_eq!((v.extent(), v.row_span(), v.col_span()), (5, 5, 1));
        assert!(Scope::square(4).is_err());
        assert!(Scope::square(0).is_err());
    }

    #[test]
    fn scope_1x1_neighborhood_is_center() {
        let n = neighborhood(2, 3, Scope::square(1).unwrap(), 6, 6);
        assert_eq!(n, vec![Neighbor { row: 2, col: 3, valid: true }]);
    }

    #[test]
    fn scope_3x3_at_corner_clips_to_four() {
        let n = neighborhood(0, 0, Scope::square(3).unwrap(), 4, 4);
        assert_eq!(n.len(), 9);
        assert_eq!(n.iter().filter(|x| x.valid).count(), 4);
        // Row-major order: first offset is (-1,-1).
        assert_eq!((n[0].row, n[0].col, n[0].valid), (-1, -1, false));
        assert_eq!((n[8].row, n[8].col, n[8].valid), (1, 1, true));
    }

    #[test]
    fn hstrip_neighborhood_spans_columns() {
        let n = neighborhood(2, 5, Scope::hstrip(3), 8, 16);
        let want: Vec<(i64, i64)> = (2..=8).map(|c| (2, c)).collect();
        assert_eq!(n.iter().map(|x| (x.row, x.col)).collect::<Vec<_>>(), want);
        assert!(n.iter().all(|x| x.valid));
    }
}
