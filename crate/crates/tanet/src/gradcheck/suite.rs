//! The standard gradient-verification suite: every differentiable op under a
//! randomized probe loss, plus the full tiny model. Shared by the test suite
//! and the `gradcheck` CLI command.

use super::{finite_difference_gradcheck, GradCheckConfig};
use crate::attention::Scope;
use crate::error::Result;
use crate::exec::Exec;
use crate::graph::{Graph, Var};
use crate::network::{AttentionMode, Model, ModelConfig, Phase};
use crate::rng::SeededRng;
use crate::shape::Shape;
use crate::store::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
}

fn random_tensor(shape: Shape, rng: &mut SeededRng, std: f64) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), std);
    t
}

/// Values bounded away from zero so the ReLU kink never sits on a sample.
fn random_tensor_away_from_zero(shape: Shape, rng: &mut SeededRng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let x = rng.normal();
        *v = if x.abs() < 0.2 {
            if x >= 0.0 {
                0.2
            } else {
                -0.2
            }
        } else {
            x
        };
    }
    t
}

/// sum(out * probe): a fixed random probe keeps upstream gradients
/// non-uniform, which would otherwise mask VJP errors in normalizing ops.
fn probe_loss(g: &mut Graph<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(probe);
    let prod = g.mul(out, p)?;
    Ok(g.sum_all(prod))
}

fn check<F>(name: &str, mut store: ParamStore<f64>, cfg: &GradCheckConfig, f: F) -> Result<SuiteResult>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let report = finite_difference_gradcheck(f, &mut store, cfg)?;
    Ok(SuiteResult { name: name.to_string(), max_rel_err: report.max_rel_err })
}

/// Gradient checks for every differentiable operation. All cases run in f64
/// with central differences of half-step `cfg.step`.
pub fn op_suite(exec: Exec) -> Result<Vec<SuiteResult>> {
    let cfg = GradCheckConfig { exec, ..GradCheckConfig::default() };
    let mut rng = SeededRng::new(0x5eed);
    let mut results = Vec::new();

    // conv2d, stride 1 with padding and bias.
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(Shape::new(2, 3, 5, 6), &mut rng, 1.0), true)?;
        store.insert("w", random_tensor(Shape::new(4, 3, 3, 3), &mut rng, 0.5), true)?;
        store.insert("b", random_tensor(Shape::new(4, 1, 1, 1), &mut rng, 0.5), true)?;
        let probe = random_tensor(Shape::new(2, 4, 5, 6), &mut rng, 1.0);
        results.push(check("conv2d_s1_p1_bias", store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = g.conv2d(x, w, Some(b), 1, 1)?;
            probe_loss(g, y, &probe)
        })?);
    }

    // conv2d, stride 2, no padding.
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(Shape::new(1, 2, 7, 7), &mut rng, 1.0), true)?;
        store.insert("w", random_tensor(Shape::new(3, 2, 3, 3), &mut rng, 0.5), true)?;
        let probe = random_tensor(Shape::new(1, 3, 3, 3), &mut rng, 1.0);
        results.push(check("conv2d_s2_p0", store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let y = g.conv2d(x, w, None, 2, 0)?;
            probe_loss(g, y, &probe)
        })?);
    }

    // Bilinear upsampling at the two scales the decoder uses.
    for scale in [2usize, 4] {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(Shape::new(1, 2, 3, 4), &mut rng, 1.0), true)?;
        let probe = random_tensor(Shape::new(1, 2, 3 * scale, 4 * scale), &mut rng, 1.0);
        results.push(check(&format!("bilinear_upsample{scale}x"), store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.bilinear_upsample(x, scale)?;
            probe_loss(g, y, &probe)
        })?);
    }

    // avgpool2x.
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(Shape::new(1, 3, 4, 6), &mut rng, 1.0), true)?;
        let probe = random_tensor(Shape::new(1, 3, 2, 3), &mut rng, 1.0);
        results.push(check("avgpool2x", store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.avgpool2x(x)?;
            probe_loss(g, y, &probe)
        })?);
    }

    // relu away from the kink.
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor_away_from_zero(Shape::new(1, 2, 4, 4), &mut rng), true)?;
        let probe = random_tensor(Shape::new(1, 2, 4, 4), &mut rng, 1.0);
        results.push(check("relu", store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.relu(x);
            probe_loss(g, y, &probe)
        })?);
    }

    // add / mul / scale composite.
    {
        let mut store = ParamStore::new();
        store.insert("a", random_tensor(Shape::new(1, 2, 3, 3), &mut rng, 1.0), true)?;
        store.insert("b", random_tensor(Shape::new(1, 2, 3, 3), &mut rng, 1.0), true)?;
        let probe = random_tensor(Shape::new(1, 2, 3, 3), &mut rng, 1.0);
        results.push(check("add_mul_scale", store, &cfg, move |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let prod = g.mul(a, b)?;
            let half_a = g.scale(a, 0.5);
            let y = g.add(prod, half_a)?;
            probe_loss(g, y, &probe)
        })?);
    }

    // concat_channels.
    {
        let mut store = ParamStore::new();
        store.insert("a", random_tensor(Shape::new(1, 2, 3, 3), &mut rng, 1.0), true)?;
        store.insert("b", random_tensor(Shape::new(1, 3, 3, 3), &mut rng, 1.0), true)?;
        let probe = random_tensor(Shape::new(1, 5, 3, 3), &mut rng, 1.0);
        results.push(check("concat_channels", store, &cfg, move |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = g.concat_channels(&[a, b])?;
            probe_loss(g, y, &probe)
        })?);
    }

    // Normalization, batch statistics and frozen statistics.
    for (name, train) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(Shape::new(2, 3, 4, 4), &mut rng, 1.0), true)?;
        store.insert("gamma", random_tensor(Shape::new(3, 1, 1, 1), &mut rng, 0.5), true)?;
        store.insert("beta", random_tensor(Shape::new(3, 1, 1, 1), &mut rng, 0.5), true)?;
        let probe = random_tensor(Shape::new(2, 3, 4, 4), &mut rng, 1.0);
        let rm = vec![0.1f64, -0.2, 0.3];
        let rv = vec![1.1f64, 0.7, 1.4];
        results.push(check(name, store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            let gamma = g.param(s, "gamma")?;
            let beta = g.param(s, "beta")?;
            let y = if train {
                g.batch_norm_train(x, gamma, beta, 1e-5)?.0
            } else {
                g.batch_norm_eval(x, gamma, beta, &rm, &rv, 1e-5)?
            };
            probe_loss(g, y, &probe)
        })?);
    }

    // Masked softmax composed with a dot product (random 7-vector, two
    // positions masked out).
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(Shape::new(1, 7, 1, 1), &mut rng, 1.0), true)?;
        let mut mask = Tensor::full(Shape::new(1, 7, 1, 1), 1.0f64);
        mask.data_mut()[2] = 0.0;
        mask.data_mut()[5] = 0.0;
        let probe = random_tensor(Shape::new(1, 7, 1, 1), &mut rng, 1.0);
        results.push(check("masked_softmax_dot", store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            let m = g.constant(&mask);
            let y = g.masked_softmax(x, m)?;
            probe_loss(g, y, &probe)
        })?);
    }

    // Attention core over square and strip scopes (projections included, so
    // every attention parameter gets checked through the real path).
    let attn_cases = [
        ("attention_square3", Scope::square(3)?, 2usize),
        ("attention_square1", Scope::square(1)?, 2),
        ("attention_hstrip_k2", Scope::hstrip(2), 2),
        ("attention_vstrip_k2", Scope::vstrip(2), 2),
    ];
    for (name, scope, heads) in attn_cases {
        let c = 8usize;
        let d_half = c / heads / 2;
        let mut store = ParamStore::new();
        store.insert("x0", random_tensor(Shape::new(1, c, 5, 5), &mut rng, 1.0), true)?;
        store.insert("x1", random_tensor(Shape::new(1, c, 5, 5), &mut rng, 1.0), true)?;
        store.insert("wq", random_tensor(Shape::new(c, c, 1, 1), &mut rng, 0.4), true)?;
        store.insert("wk", random_tensor(Shape::new(c, c, 1, 1), &mut rng, 0.4), true)?;
        store.insert("wv", random_tensor(Shape::new(c, c, 1, 1), &mut rng, 0.4), true)?;
        store.insert(
            "re",
            random_tensor(Shape::new(heads, scope.row_span(), d_half, 1), &mut rng, 0.3),
            true,
        )?;
        store.insert(
            "ce",
            random_tensor(Shape::new(heads, scope.col_span(), d_half, 1), &mut rng, 0.3),
            true,
        )?;
        let probe = random_tensor(Shape::new(1, c, 5, 5), &mut rng, 1.0);
        results.push(check(name, store, &cfg, move |g, s| {
            let x0 = g.param(s, "x0")?;
            let x1 = g.param(s, "x1")?;
            let wq = g.param(s, "wq")?;
            let wk = g.param(s, "wk")?;
            let wv = g.param(s, "wv")?;
            let re = g.param(s, "re")?;
            let ce = g.param(s, "ce")?;
            let q = g.conv2d(x0, wq, None, 1, 0)?;
            let k = g.conv2d(x1, wk, None, 1, 0)?;
            let v = g.conv2d(x1, wv, None, 1, 0)?;
            let (y, _) = g.attention_core(q, k, v, re, ce, scope, heads)?;
            probe_loss(g, y, &probe)
        })?);
    }

    // Binary cross-entropy (mean reduction built in).
    {
        let mut store = ParamStore::new();
        store.insert("z", random_tensor(Shape::new(1, 1, 4, 4), &mut rng, 2.0), true)?;
        let mut target = Tensor::zeros(Shape::new(1, 1, 4, 4));
        for (i, v) in target.data_mut().iter_mut().enumerate() {
            *v = f64::from(u8::from(i % 3 == 0));
        }
        results.push(check("bce_with_logits", store, &cfg, move |g, s| {
            let z = g.param(s, "z")?;
            let t = g.constant(&target);
            g.bce_with_logits(z, t)
        })?);
    }

    // mean_all on its own.
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(Shape::new(1, 2, 3, 3), &mut rng, 1.0), true)?;
        results.push(check("mean_all", store, &cfg, move |g, s| {
            let x = g.param(s, "x")?;
            Ok(g.mean_all(x))
        })?);
    }

    Ok(results)
}

/// The tiny end-to-end configuration used for whole-model checking.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        width_mult: 0.125,
        input_size: (32, 32),
        attention_mode: AttentionMode::Drtam,
        chva: true,
        ..ModelConfig::default()
    }
}

/// Full-model gradient check: forward in train mode (batch statistics) into
/// the training loss, differentiated against every parameter.
pub fn model_gradcheck(exec: Exec, samples_per_param: usize) -> Result<SuiteResult> {
    let model = Model::new(tiny_model_config())?;
    let mut store: ParamStore<f64> = model.init_params(17);
    let mut rng = SeededRng::new(0xda7a);
    let (h, w) = model.config().input_size;
    let x0 = random_tensor(Shape::new(1, 3, h, w), &mut rng, 0.5);
    let x1 = random_tensor(Shape::new(1, 3, h, w), &mut rng, 0.5);
    let mut target = Tensor::zeros(Shape::new(1, 1, h, w));
    for (i, v) in target.data_mut().iter_mut().enumerate() {
        *v = f64::from(u8::from(i % 7 < 2));
    }

    let cfg = GradCheckConfig {
        exec,
        max_samples_per_param: samples_per_param,
        ..GradCheckConfig::default()
    };
    let report = finite_difference_gradcheck(
        |g, s| {
            let detail = model.forward_detail(g, s, &x0, &x1, Phase::Train)?;
            let t = g.constant(&target);
            g.bce_with_logits(detail.logits, t)
        },
        &mut store,
        &cfg,
    )?;
    Ok(SuiteResult { name: "tiny_model_bce".into(), max_rel_err: report.max_rel_err })
}
