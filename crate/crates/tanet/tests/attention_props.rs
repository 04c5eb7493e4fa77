//! Temporal-attention properties: equivalence with the literal oracle,
//! single-neighbor identities, receptive-field locality, head/batch
//! equivariances and the strip-attention composition.

use tanet::attention::oracle::ta_naive_oracle;
use tanet::attention::{chva_forward, temporal_attention, Scope, TaParams, TaVars};
use tanet::graph::Graph;
use tanet::rng::SeededRng;
use tanet::shape::Shape;
use tanet::tensor::Tensor;

fn random_tensor(shape: Shape, rng: &mut SeededRng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 1.0);
    t
}

fn random_params(
    c_in: usize,
    c_out: usize,
    heads: usize,
    scope: Scope,
    rng: &mut SeededRng,
) -> TaParams<f64> {
    let mut p = TaParams::init(c_in, c_out, heads, scope, rng).unwrap();
    // Stronger positional signal than the training init, so mistakes in the
    // encoding path cannot hide below tolerance.
    rng.fill_normal(p.row_emb.data_mut(), 0.5);
    rng.fill_normal(p.col_emb.data_mut(), 0.5);
    p
}

fn run_ta(
    x0: &Tensor<f64>,
    x1: &Tensor<f64>,
    p: &TaParams<f64>,
    scope: Scope,
    heads: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::default();
    let vars = TaVars::constants(&mut g, p);
    let x0v = g.constant(x0);
    let x1v = g.constant(x1);
    let out = temporal_attention(&mut g, x0v, x1v, &vars, scope, heads).unwrap();
    (g.tensor(out.map), g.attention_weights(out.weights))
}

fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1.0f64.max(x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

/// Apply a 1x1 projection the plain way (used as the identity reference).
fn project(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::default();
    let xv = g.constant(x);
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    g.tensor(y)
}

#[test]
fn optimized_path_matches_oracle_on_200_plus_cases() {
    let scopes: Vec<Scope> = vec![
        Scope::square(1).unwrap(),
        Scope::square(3).unwrap(),
        Scope::square(5).unwrap(),
        Scope::square(7).unwrap(),
        Scope::hstrip(1),
        Scope::hstrip(2),
        Scope::hstrip(3),
        Scope::vstrip(1),
        Scope::vstrip(2),
        Scope::vstrip(3),
    ];
    let mut rng = SeededRng::new(0xa77e);
    let mut cases = 0;
    for round in 0..21 {
        for scope in &scopes {
            let heads = rng.range(1, 5);
            let c_out = 2 * heads * rng.range(1, 3);
            let c_in = rng.range(1, 6);
            let n = rng.range(1, 3);
            // Cycle tiny sizes so border clipping dominates several rounds.
            let h = rng.range(1, 9);
            let w = rng.range(1, 9);
            let x0 = random_tensor(Shape::new(n, c_in, h, w), &mut rng);
            let x1 = random_tensor(Shape::new(n, c_in, h, w), &mut rng);
            let p = random_params(c_in, c_out, heads, *scope, &mut rng);
            let (fast, weights) = run_ta(&x0, &x1, &p, *scope, heads);
            let slow = ta_naive_oracle(&x0, &x1, &p, *scope, heads).unwrap();
            let err = max_rel_err(&fast, &slow);
            assert!(err < 1e-5, "round {round} scope {scope:?}: rel err {err}");
            assert!(fast.all_finite());

            // Weights per pixel and head sum to one over valid positions.
            let ws = weights.shape();
            let positions = scope.positions();
            for n_i in 0..ws.n {
                for head in 0..heads {
                    for i in 0..h {
                        for j in 0..w {
                            let mut sum = 0.0;
                            for s in 0..positions {
                                sum += weights.get(n_i, head * positions + s, i, j);
                            }
                            assert!((sum - 1.0).abs() < 1e-6, "weight sum {sum}");
                        }
                    }
                }
            }
            cases += 1;
        }
    }
    assert!(cases >= 200, "only {cases} cases");
}

#[test]
fn scope_one_with_zero_embeddings_is_exactly_the_value_projection() {
    let mut rng = SeededRng::new(2);
    let x0 = random_tensor(Shape::new(2, 3, 4, 5), &mut rng);
    let x1 = random_tensor(Shape::new(2, 3, 4, 5), &mut rng);
    let mut p = random_params(3, 8, 2, Scope::square(1).unwrap(), &mut rng);
    p.zero_embeddings();
    let (out, _) = run_ta(&x0, &x1, &p, Scope::square(1).unwrap(), 2);
    let want = project(&x1, &p.wv);
    let same = out.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "scope-1 output differs from the value projection at bit level");
}

#[test]
fn constant_kv_input_with_zero_embeddings_ignores_the_query_side() {
    let mut rng = SeededRng::new(3);
    let scope = Scope::square(3).unwrap();
    let mut p = random_params(3, 4, 2, scope, &mut rng);
    p.zero_embeddings();
    let x1 = Tensor::full(Shape::new(1, 3, 5, 5), 0.75f64);
    let x0_a = random_tensor(Shape::new(1, 3, 5, 5), &mut rng);
    let x0_b = random_tensor(Shape::new(1, 3, 5, 5), &mut rng);
    let (out_a, _) = run_ta(&x0_a, &x1, &p, scope, 2);
    let (out_b, _) = run_ta(&x0_b, &x1, &p, scope, 2);
    assert!(max_rel_err(&out_a, &out_b) < 1e-12);
    // And the output equals the projected constant everywhere.
    let want = project(&x1, &p.wv);
    assert!(max_rel_err(&out_a, &want) < 1e-12);
}

#[test]
fn oracle_clipping_degeneracy_on_1x1_input() {
    let mut rng = SeededRng::new(4);
    let x0 = random_tensor(Shape::new(1, 2, 1, 1), &mut rng);
    let x1 = random_tensor(Shape::new(1, 2, 1, 1), &mut rng);
    let p3 = random_params(2, 4, 1, Scope::square(3).unwrap(), &mut rng);
    // Reuse the same projections for the scope-1 run; only the center column
    // of the positional tables is consulted either way.
    let p1 = TaParams {
        wq: p3.wq.clone(),
        wk: p3.wk.clone(),
        wv: p3.wv.clone(),
        row_emb: Tensor::new(
            Shape::new(1, 1, 2, 1),
            vec![p3.row_emb.get(0, 1, 0, 0), p3.row_emb.get(0, 1, 1, 0)],
        )
        .unwrap(),
        col_emb: Tensor::new(
            Shape::new(1, 1, 2, 1),
            vec![p3.col_emb.get(0, 1, 0, 0), p3.col_emb.get(0, 1, 1, 0)],
        )
        .unwrap(),
    };
    let a = ta_naive_oracle(&x0, &x1, &p3, Scope::square(3).unwrap(), 1).unwrap();
    let b = ta_naive_oracle(&x0, &x1, &p1, Scope::square(1).unwrap(), 1).unwrap();
    assert!(max_rel_err(&a, &b) < 1e-12);
}

#[test]
fn batch_entries_are_independent() {
    let mut rng = SeededRng::new(5);
    let scope = Scope::square(3).unwrap();
    let p = random_params(3, 4, 2, scope, &mut rng);
    let x0 = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
    let x1 = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
    let swap = |t: &Tensor<f64>| {
        Tensor::from_fn(t.shape(), |n, c, h, w| t.get(1 - n, c, h, w))
    };
    let out = ta_naive_oracle(&x0, &x1, &p, scope, 2).unwrap();
    let out_swapped = ta_naive_oracle(&swap(&x0), &swap(&x1), &p, scope, 2).unwrap();
    for n in 0..2 {
        for c in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(
                        out.get(n, c, i, j).to_bits(),
                        out_swapped.get(1 - n, c, i, j).to_bits()
                    );
                }
            }
        }
    }
}

// ------------------------------------------------------- locality bounds

struct Locality {
    scope: Scope,
    heads: usize,
}

impl Locality {
    /// Returns per-pixel equality of two runs differing by one perturbed
    /// input pixel.
    fn changed_pixels(&self, perturb_kv: bool, pi: usize, pj: usize) -> Vec<(usize, usize)> {
        let mut rng = SeededRng::new(77);
        let (h, w) = (7, 7);
        let x0 = random_tensor(Shape::new(1, 3, h, w), &mut rng);
        let x1 = random_tensor(Shape::new(1, 3, h, w), &mut rng);
        let p = random_params(3, 4, self.heads, self.scope, &mut rng);
        let (base, _) = run_ta(&x0, &x1, &p, self.scope, self.heads);
        let mut x0p = x0.clone();
        let mut x1p = x1.clone();
        if perturb_kv {
            let v = x1p.get(0, 1, pi, pj);
            x1p.set(0, 1, pi, pj, v + 0.37);
        } else {
            let v = x0p.get(0, 1, pi, pj);
            x0p.set(0, 1, pi, pj, v + 0.37);
        }
        let (pert, _) = run_ta(&x0p, &x1p, &p, self.scope, self.heads);
        let mut changed = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let same = (0..4).all(|c| {
                    base.get(0, c, i, j).to_bits() == pert.get(0, c, i, j).to_bits()
                });
                if !same {
                    changed.push((i, j));
                }
            }
        }
        changed
    }
}

#[test]
fn square_scope_kv_perturbation_stays_within_chebyshev_radius() {
    for k in [1usize, 3, 5] {
        let r = (k - 1) / 2;
        let loc = Locality { scope: Scope::square(k).unwrap(), heads: 2 };
        let changed = loc.changed_pixels(true, 3, 3);
        assert!(!changed.is_empty());
        for (i, j) in changed {
            let cheb = (i as i64 - 3).abs().max((j as i64 - 3).abs()) as usize;
            assert!(cheb <= r, "scope {k}: pixel ({i},{j}) outside radius {r}");
        }
    }
}

#[test]
fn query_perturbation_affects_only_its_own_pixel() {
    for scope in [Scope::square(5).unwrap(), Scope::hstrip(2), Scope::vstrip(3)] {
        let loc = Locality { scope, heads: 2 };
        let changed = loc.changed_pixels(false, 2, 4);
        assert_eq!(changed, vec![(2, 4)], "scope {scope:?}");
    }
}

#[test]
fn strip_scopes_stay_on_their_axis() {
    let k = 2usize;
    let loc_h = Locality { scope: Scope::hstrip(k), heads: 2 };
    for (i, j) in loc_h.changed_pixels(true, 3, 3) {
        assert_eq!(i, 3, "horizontal strip leaked across rows");
        assert!((j as i64 - 3).unsigned_abs() as usize <= k);
    }
    let loc_v = Locality { scope: Scope::vstrip(k), heads: 2 };
    for (i, j) in loc_v.changed_pixels(true, 3, 3) {
        assert_eq!(j, 3, "vertical strip leaked across columns");
        assert!((i as i64 - 3).unsigned_abs() as usize <= k);
    }
}

// --------------------------------------------------- head/batch structure

#[test]
fn permuting_head_parameter_groups_permutes_output_channel_groups() {
    let mut rng = SeededRng::new(6);
    let scope = Scope::square(3).unwrap();
    let heads = 3;
    let c_out = 12;
    let d_head = c_out / heads;
    let p = random_params(3, c_out, heads, scope, &mut rng);
    let x0 = random_tensor(Shape::new(1, 3, 4, 4), &mut rng);
    let x1 = random_tensor(Shape::new(1, 3, 4, 4), &mut rng);

    let perm = [2usize, 0, 1];
    let permute_rows = |t: &Tensor<f64>| {
        Tensor::from_fn(t.shape(), |row, c, h, w| {
            let head = row / d_head;
            let within = row % d_head;
            t.get(perm[head] * d_head + within, c, h, w)
        })
    };
    let permute_heads = |t: &Tensor<f64>| {
        Tensor::from_fn(t.shape(), |head, s, d, w| t.get(perm[head], s, d, w))
    };
    let pp = TaParams {
        wq: permute_rows(&p.wq),
        wk: permute_rows(&p.wk),
        wv: permute_rows(&p.wv),
        row_emb: permute_heads(&p.row_emb),
        col_emb: permute_heads(&p.col_emb),
    };

    let (base, _) = run_ta(&x0, &x1, &p, scope, heads);
    let (permuted, _) = run_ta(&x0, &x1, &pp, scope, heads);
    for head in 0..heads {
        for within in 0..d_head {
            for i in 0..4 {
                for j in 0..4 {
                    let a = permuted.get(0, head * d_head + within, i, j);
                    let b = base.get(0, perm[head] * d_head + within, i, j);
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}

// ----------------------------------------------------------------- strips

#[test]
fn degenerate_1x1_strips_double_the_value_projection() {
    let mut rng = SeededRng::new(8);
    let mut p = random_params(3, 4, 2, Scope::hstrip(0), &mut rng);
    p.zero_embeddings();
    let x0 = random_tensor(Shape::new(1, 3, 3, 3), &mut rng);
    let x1 = random_tensor(Shape::new(1, 3, 3, 3), &mut rng);
    let mut g = Graph::default();
    let vars = TaVars::constants(&mut g, &p);
    let x0v = g.constant(&x0);
    let x1v = g.constant(&x1);
    let out = chva_forward(&mut g, x0v, x1v, &vars, &vars, 0, 2).unwrap();
    let got = g.tensor(out.map);
    let proj = project(&x1, &p.wv);
    for (a, b) in got.data().iter().zip(proj.data()) {
        assert_eq!(a.to_bits(), (2.0 * b).to_bits());
    }
}

#[test]
fn chva_equals_sum_of_independent_strip_oracles() {
    let mut rng = SeededRng::new(9);
    let k = 2usize;
    let heads = 2;
    let ph = random_params(8, 8, heads, Scope::hstrip(k), &mut rng);
    let pv = random_params(8, 8, heads, Scope::vstrip(k), &mut rng);
    let x0 = random_tensor(Shape::new(1, 8, 7, 7), &mut rng);
    let x1 = random_tensor(Shape::new(1, 8, 7, 7), &mut rng);

    let mut g = Graph::default();
    let vh = TaVars::constants(&mut g, &ph);
    let vv = TaVars::constants(&mut g, &pv);
    let x0v = g.constant(&x0);
    let x1v = g.constant(&x1);
    let out = chva_forward(&mut g, x0v, x1v, &vh, &vv, k, heads).unwrap();
    let got = g.tensor(out.map);

    let oh = ta_naive_oracle(&x0, &x1, &ph, Scope::hstrip(k), heads).unwrap();
    let ov = ta_naive_oracle(&x0, &x1, &pv, Scope::vstrip(k), heads).unwrap();
    let want = Tensor::from_fn(oh.shape(), |n, c, i, j| oh.get(n, c, i, j) + ov.get(n, c, i, j));
    assert!(max_rel_err(&got, &want) < 1e-5);
}

#[test]
fn fuse_is_elementwise_addition() {
    let mut rng = SeededRng::new(10);
    let a = random_tensor(Shape::new(1, 4, 3, 3), &mut rng);
    let b = random_tensor(Shape::new(1, 4, 3, 3), &mut rng);
    let mut g = Graph::default();
    let av = g.constant(&a);
    let bv = g.constant(&b);
    let zero = g.constant(&Tensor::zeros(a.shape()));

    let same = tanet::attention::fuse_chva(&mut g, av, zero).unwrap();
    assert_eq!(g.data(same), a.data());

    let doubled = tanet::attention::fuse_chva(&mut g, av, av).unwrap();
    let want2: Vec<f64> = a.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.data(doubled), &want2[..]);

    let fused = tanet::attention::fuse_chva(&mut g, av, bv).unwrap();
    let want: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    assert_eq!(g.data(fused), &want[..]);
}

#[test]
fn temporal_inputs_must_agree_in_shape() {
    let mut rng = SeededRng::new(11);
    let p = random_params(3, 4, 2, Scope::square(3).unwrap(), &mut rng);
    let mut g = Graph::default();
    let vars = TaVars::constants(&mut g, &p);
    let x0 = g.constant(&Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4)));
    let x1 = g.constant(&Tensor::<f64>::zeros(Shape::new(1, 3, 5, 4)));
    let err = temporal_attention(&mut g, x0, x1, &vars, Scope::square(3).unwrap(), 2).unwrap_err();
    assert!(err.to_string().contains("temporal inputs disagree"), "{err}");
}
