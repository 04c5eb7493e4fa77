//! Reverse-mode gradients against central finite differences, plus the
//! backward-pass contracts (accumulation, linearity, error paths).

use tanet::gradcheck::suite::{op_suite, DEFAULT_TOLERANCE};
use tanet::graph::Graph;
use tanet::rng::SeededRng;
use tanet::shape::Shape;
use tanet::store::ParamStore;
use tanet::tensor::Tensor;
use tanet::Error;

fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 1.0);
    t
}

#[test]
fn every_op_passes_finite_difference_checks() {
    let results = op_suite(tanet::Exec::default()).unwrap();
    assert!(results.len() >= 13, "suite shrank to {} cases", results.len());
    for r in &results {
        assert!(
            r.max_rel_err < DEFAULT_TOLERANCE,
            "{}: rel err {} over tolerance",
            r.name,
            r.max_rel_err
        );
    }
}

#[test]
fn linear_loss_gradient_is_the_fixed_factor() {
    // loss = sum(w * x) with x constant: d/dw = x exactly.
    let x = random_tensor(Shape::new(1, 2, 3, 3), 5);
    let mut store = ParamStore::new();
    store.insert("w", random_tensor(Shape::new(1, 2, 3, 3), 6), true).unwrap();
    let mut g = Graph::default();
    let w = g.param(&store, "w").unwrap();
    let xv = g.constant(&x);
    let prod = g.mul(w, xv).unwrap();
    let loss = g.sum_all(prod);
    g.backward(loss).unwrap();
    g.flush_grads(&mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad.as_deref().unwrap(), x.data());
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("used", random_tensor(Shape::new(1, 1, 2, 2), 7), true).unwrap();
    store.insert("unused", random_tensor(Shape::new(1, 1, 2, 2), 8), true).unwrap();
    let mut g = Graph::default();
    let u = g.param(&store, "used").unwrap();
    let _also_registered = g.param(&store, "unused").unwrap();
    let loss = g.sum_all(u);
    g.backward(loss).unwrap();
    g.flush_grads(&mut store).unwrap();
    assert_eq!(store.get("unused").unwrap().grad.as_deref().unwrap(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g: Graph<f64> = Graph::default();
    let x = g.constant(&Tensor::zeros(Shape::new(1, 2, 2, 2)));
    let err = g.backward(x).unwrap_err();
    assert!(matches!(err, Error::NonScalarLoss(_)), "{err}");
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(2.0f64), true).unwrap();
    let run = |store: &mut ParamStore<f64>| {
        let mut g = Graph::default();
        let w = g.param(store, "w").unwrap();
        let loss = g.scale(w, 3.0);
        g.backward(loss).unwrap();
        g.flush_grads(store).unwrap();
    };
    run(&mut store);
    run(&mut store);
    assert_eq!(store.get("w").unwrap().grad.as_deref().unwrap(), &[6.0]);
    store.zero_grads();
    run(&mut store);
    assert_eq!(store.get("w").unwrap().grad.as_deref().unwrap(), &[3.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a*f + b*g) == a*grad(f) + b*grad(g) for random a, b.
    let mut rng = SeededRng::new(42);
    let a = rng.normal();
    let b = rng.normal();
    let p1 = random_tensor(Shape::new(1, 2, 2, 2), 10);
    let p2 = random_tensor(Shape::new(1, 2, 2, 2), 11);
    let w0 = random_tensor(Shape::new(1, 2, 2, 2), 12);

    let grad_of = |loss_a: f64, loss_b: f64| -> Vec<f64> {
        let mut store = ParamStore::new();
        store.insert("w", w0.clone(), true).unwrap();
        let mut g = Graph::default();
        let w = g.param(&store, "w").unwrap();
        let p1v = g.constant(&p1);
        let p2v = g.constant(&p2);
        // f = sum(w*p1), g = sum(w*w*p2)
        let f_prod = g.mul(w, p1v).unwrap();
        let f = g.sum_all(f_prod);
        let sq = g.mul(w, w).unwrap();
        let g_prod = g.mul(sq, p2v).unwrap();
        let gg = g.sum_all(g_prod);
        let fa = g.scale(f, loss_a);
        let gb = g.scale(gg, loss_b);
        let loss = g.add(fa, gb).unwrap();
        g.backward(loss).unwrap();
        g.flush_grads(&mut store).unwrap();
        store.get("w").unwrap().grad.clone().unwrap()
    };

    let combined = grad_of(a, b);
    let f_only = grad_of(1.0, 0.0);
    let g_only = grad_of(0.0, 1.0);
    for i in 0..combined.len() {
        let want = a * f_only[i] + b * g_only[i];
        assert!((combined[i] - want).abs() < 1e-10, "{} vs {want}", combined[i]);
    }
}

#[test]
fn shared_parameter_uses_accumulate_gradients() {
    // The same weight consumed by two ops gets the sum of both VJPs.
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(4.0f64), true).unwrap();
    let mut g = Graph::default();
    let w1 = g.param(&store, "w").unwrap();
    let w2 = g.param(&store, "w").unwrap();
    assert_eq!(w1, w2);
    let double = g.scale(w1, 2.0);
    let triple = g.scale(w2, 3.0);
    let loss = g.add(double, triple).unwrap();
    g.backward(loss).unwrap();
    g.flush_grads(&mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad.as_deref().unwrap(), &[5.0]);
}

#[cfg(feature = "parallel")]
#[test]
fn backward_bit_identical_across_exec() {
    use tanet::Exec;
    let x = random_tensor(Shape::new(2, 4, 6, 6), 20);
    let w = random_tensor(Shape::new(4, 4, 3, 3), 21);
    let run = |exec: Exec| -> Vec<u64> {
        let mut store = ParamStore::new();
        store.insert("w", w.clone(), true).unwrap();
        let mut g = Graph::new(exec);
        let xv = g.constant(&x);
        let wv = g.param(&store, "w").unwrap();
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let act = g.relu(y);
        let loss = g.mean_all(act);
        g.backward(loss).unwrap();
        g.flush_grads(&mut store).unwrap();
        store.get("w").unwrap().grad.as_deref().unwrap().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}
