//! Forward-op oracles: brute-force convolution, direct bilinear evaluation,
//! softmax by definition, plus bit-exact determinism across executions.

use tanet::exec::Exec;
use tanet::graph::kernels::masked_softmax_slice;
use tanet::graph::Graph;
use tanet::rng::SeededRng;
use tanet::shape::Shape;
use tanet::tensor::Tensor;

fn random_tensor(shape: Shape, rng: &mut SeededRng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 1.0);
    t
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs().max(b.abs()))
}

/// Six nested loops, straight from the definition. No shared code with the
/// production kernel.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let ho = (xs.h + 2 * padding - ws.h) / stride + 1;
    let wo = (xs.w + 2 * padding - ws.w) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, ho, wo));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..xs.c {
                        for kr in 0..ws.h {
                            for kc in 0..ws.w {
                                let ih = (oh * stride + kr) as i64 - padding as i64;
                                let iw = (ow * stride + kc) as i64 - padding as i64;
                                if ih < 0 || ih >= xs.h as i64 || iw < 0 || iw >= xs.w as i64 {
                                    continue;
                                }
                                acc += w.get(co, ci, kr, kc)
                                    * x.get(n, ci, ih as usize, iw as usize);
                            }
                        }
                    }
                    out.set(n, co, oh, ow, acc);
                }
            }
        }
    }
    out
}

fn run_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
    exec: Exec,
) -> Tensor<f64> {
    let mut g = Graph::new(exec);
    let xv = g.constant(x);
    let wv = g.constant(w);
    let bv = bias.map(|b| g.constant(b));
    let y = g.conv2d(xv, wv, bv, stride, padding).unwrap();
    g.tensor(y)
}

#[test]
fn conv_identity_1x1_kernel() {
    let mut rng = SeededRng::new(1);
    let x = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
    let mut w = Tensor::zeros(Shape::new(2, 2, 1, 1));
    w.set(0, 0, 0, 0, 1.0);
    w.set(1, 1, 0, 0, 1.0);
    let y = run_conv(&x, &w, None, 1, 0, Exec::default());
    assert_eq!(x.data(), y.data());
}

#[test]
fn conv_zero_weight_zero_bias_gives_zero() {
    let mut rng = SeededRng::new(2);
    let x = random_tensor(Shape::new(2, 3, 5, 5), &mut rng);
    let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
    let b = Tensor::zeros(Shape::new(4, 1, 1, 1));
    let y = run_conv(&x, &w, Some(&b), 1, 1, Exec::default());
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_matches_oracle_on_spec_case() {
    let mut rng = SeededRng::new(3);
    let x = random_tensor(Shape::new(1, 2, 5, 5), &mut rng);
    let w = random_tensor(Shape::new(3, 2, 3, 3), &mut rng);
    let y = run_conv(&x, &w, None, 1, 1, Exec::default());
    let want = conv_oracle(&x, &w, None, 1, 1);
    for (a, b) in y.data().iter().zip(want.data()) {
        assert!(rel_err(*a, *b) < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn conv_matches_oracle_on_120_random_cases() {
    let mut rng = SeededRng::new(0xc0);
    for case in 0..120 {
        let n = rng.range(1, 3);
        let ci = rng.range(1, 4);
        let co = rng.range(1, 4);
        let kh = rng.range(1, 4);
        let kw = rng.range(1, 4);
        let stride = rng.range(1, 3);
        let padding = rng.range(0, 3);
        let h = rng.range(kh.saturating_sub(2 * padding).max(1), 8);
        let w = rng.range(kw.saturating_sub(2 * padding).max(1), 8);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            continue;
        }
        let x = random_tensor(Shape::new(n, ci, h, w), &mut rng);
        let wt = random_tensor(Shape::new(co, ci, kh, kw), &mut rng);
        let use_bias = rng.chance(0.5);
        let b = random_tensor(Shape::new(co, 1, 1, 1), &mut rng);
        let bias = use_bias.then_some(&b);
        let y = run_conv(&x, &wt, bias, stride, padding, Exec::default());
        let want = conv_oracle(&x, &wt, bias.map(|t| t.data()), stride, padding);
        assert_eq!(y.shape(), want.shape(), "case {case}");
        for (a, bb) in y.data().iter().zip(want.data()) {
            assert!(rel_err(*a, *bb) < 1e-6, "case {case}: {a} vs {bb}");
        }
    }
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut g: Graph<f64> = Graph::default();
    let x = g.constant(&Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = g.constant(&Tensor::zeros(Shape::new(3, 5, 3, 3)));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(1,2,4,4)") && msg.contains("(3,5,3,3)"), "{msg}");
}

// --------------------------------------------------------------- bilinear

#[test]
fn upsample_constant_stays_constant() {
    let x = Tensor::full(Shape::new(1, 3, 3, 5), 2.75f64);
    let mut g = Graph::default();
    let xv = g.constant(&x);
    let y = g.bilinear_upsample2x(xv).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 3, 6, 10));
    assert!(g.data(y).iter().all(|v| *v == 2.75));
}

#[test]
fn upsample_1x1_broadcasts_value() {
    let x = Tensor::full(Shape::new(1, 1, 1, 1), -1.5f64);
    let mut g = Graph::default();
    let xv = g.constant(&x);
    let y = g.bilinear_upsample2x(xv).unwrap();
    assert_eq!(g.data(y), &[-1.5; 4]);
}

#[test]
fn upsample_matches_direct_formula_on_3x3() {
    // Independent evaluation of half-pixel-center bilinear interpolation.
    let mut rng = SeededRng::new(7);
    let x = random_tensor(Shape::new(1, 1, 3, 3), &mut rng);
    let mut g = Graph::default();
    let xv = g.constant(&x);
    let y = g.bilinear_upsample2x(xv).unwrap();
    let yt = g.tensor(y);
    for oh in 0..6 {
        for ow in 0..6 {
            let sy = ((oh as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 2.0);
            let sx = ((ow as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 2.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(2));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let want = (1.0 - fy) * (1.0 - fx) * x.get(0, 0, y0, x0)
                + (1.0 - fy) * fx * x.get(0, 0, y0, x1)
                + fy * (1.0 - fx) * x.get(0, 0, y1, x0)
                + fy * fx * x.get(0, 0, y1, x1);
            assert!(rel_err(yt.get(0, 0, oh, ow), want) < 1e-12);
        }
    }
}

// --------------------------------------------------------- masked softmax

#[test]
fn softmax_single_valid_entry_gets_weight_one() {
    let mut out = [0.0f64; 3];
    masked_softmax_slice(&[42.0, -7.0, 3.0], &[false, true, false], &mut out).unwrap();
    assert_eq!(out, [0.0, 1.0, 0.0]);
}

#[test]
fn softmax_two_equal_valid_logits_split_evenly() {
    let mut out = [0.0f64; 2];
    masked_softmax_slice(&[1.25, 1.25], &[true, true], &mut out).unwrap();
    assert_eq!(out, [0.5, 0.5]);
}

#[test]
fn softmax_matches_direct_evaluation() {
    let mut out = [0.0f64; 3];
    masked_softmax_slice(&[1.0, 2.0, 3.0], &[true, true, true], &mut out).unwrap();
    let want = [0.0900, 0.2447, 0.6652];
    for (a, b) in out.iter().zip(want) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn softmax_rejects_all_invalid() {
    let mut out = [0.0f64; 2];
    let err = masked_softmax_slice(&[1.0, 2.0], &[false, false], &mut out).unwrap_err();
    assert!(matches!(err, tanet::Error::AllMasked));
}

#[test]
fn softmax_valid_entries_sum_to_one_randomized() {
    let mut rng = SeededRng::new(11);
    for _ in 0..300 {
        let n = rng.range(1, 12);
        let logits: Vec<f64> = (0..n).map(|_| rng.normal() * 20.0).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.chance(0.6)).collect();
        if valid.iter().all(|v| !v) {
            let i = rng.range(0, n);
            valid[i] = true;
        }
        let mut out = vec![0.0; n];
        masked_softmax_slice(&logits, &valid, &mut out).unwrap();
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
        for (o, v) in out.iter().zip(&valid) {
            if *v {
                assert!(*o > 0.0);
            } else {
                assert_eq!(*o, 0.0);
            }
        }
    }
}

// ----------------------------------------------------- pointwise and pool

#[test]
fn relu_example() {
    let x = Tensor::new(Shape::new(1, 3, 1, 1), vec![-1.0f64, 0.0, 2.0]).unwrap();
    let mut g = Graph::default();
    let xv = g.constant(&x);
    let y = g.relu(xv);
    assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn concat_shape_arithmetic() {
    let mut g: Graph<f64> = Graph::default();
    let a = g.constant(&Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let b = g.constant(&Tensor::zeros(Shape::new(1, 5, 4, 4)));
    let y = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 8, 4, 4));
    let c = g.constant(&Tensor::zeros(Shape::new(1, 2, 3, 4)));
    assert!(g.concat_channels(&[a, c]).is_err());
}

#[test]
fn avgpool_constant_halves_resolution() {
    let x = Tensor::full(Shape::new(2, 3, 6, 8), 1.25f64);
    let mut g = Graph::default();
    let xv = g.constant(&x);
    let y = g.avgpool2x(xv).unwrap();
    assert_eq!(g.shape(y), Shape::new(2, 3, 3, 4));
    assert!(g.data(y).iter().all(|v| *v == 1.25));
}

// ------------------------------------------------------------ determinism

/// Forward every op twice under both execution strategies; all four results
/// must agree bit-for-bit.
#[test]
fn forward_ops_bit_identical_across_runs_and_exec() {
    let execs: &[Exec] = if cfg!(feature = "parallel") {
        &[Exec::Sequential, Exec::Parallel, Exec::Sequential, Exec::Parallel]
    } else {
        &[Exec::Sequential, Exec::Sequential]
    };
    let mut reference: Option<Vec<u64>> = None;
    for exec in execs {
        let mut rng = SeededRng::new(99);
        let x = random_tensor(Shape::new(2, 4, 6, 6), &mut rng);
        let w = random_tensor(Shape::new(4, 4, 3, 3), &mut rng);
        let gamma = random_tensor(Shape::new(4, 1, 1, 1), &mut rng);
        let beta = random_tensor(Shape::new(4, 1, 1, 1), &mut rng);
        let re = random_tensor(Shape::new(2, 3, 1, 1), &mut rng);
        let ce = random_tensor(Shape::new(2, 3, 1, 1), &mut rng);

        let mut g = Graph::new(*exec);
        let xv = g.constant(&x);
        let wv = g.constant(&w);
        let conv = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let gv = g.constant(&gamma);
        let bv = g.constant(&beta);
        let (bn, _) = g.batch_norm_train(conv, gv, bv, 1e-5).unwrap();
        let act = g.relu(bn);
        let pool = g.avgpool2x(act).unwrap();
        let up = g.bilinear_upsample2x(pool).unwrap();
        let rev = g.constant(&re);
        let cev = g.constant(&ce);
        let (attn, _) = g
            .attention_core(up, xv, xv, rev, cev, tanet::attention::Scope::square(3).unwrap(), 2)
            .unwrap();
        let bits: Vec<u64> = g.data(attn).iter().map(|v| v.to_bits()).collect();
        match &reference {
            None => reference = Some(bits),
            Some(want) => assert_eq!(want, &bits, "exec {exec:?} diverged"),
        }
    }
}
