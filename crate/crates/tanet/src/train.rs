//! Loss, first-order optimizer and the training loop.

use serde::{Deserialize, Serialize};

use crate::data::PairSource;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{Graph, Var};
use crate::metrics::{binarize, confusion, evaluate_counts, Confusion, MetricsReport};
use crate::network::{images_to_tensor, masks_to_tensor, AttentionMode, Model, ModelConfig};
use crate::rng::SeededRng;
use crate::store::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// 0 picks the scope-dependent default (16, or 8 at scope 7x7).
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epochs() -> usize {
    100
}
fn default_eval_every() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            batch_size: 0,
            epochs: default_epochs(),
            seed: 0,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 && self.lr != 0.0 {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {b}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Batch size, defaulting to 16 and dropping to 8 when any level runs a
    /// 7x7 scope.
    pub fn effective_batch_size(&self, model: &ModelConfig) -> usize {
        if self.batch_size != 0 {
            return self.batch_size;
        }
        let widest = match model.attention_mode {
            AttentionMode::Fixed(k) => k,
            AttentionMode::Drtam => 7,
        };
        if widest >= 7 {
            8
        } else {
            16
        }
    }
}

/// Mean binary cross-entropy of sigmoid(logits) against binary targets.
pub fn bce_loss<E: Elem>(g: &mut Graph<E>, logits: Var, target: Var) -> Result<Var> {
    g.bce_with_logits(logits, target)
}

// ------------------------------------------------------------------- adam

/// First/second-moment state aligned with the store's trainable entries.
pub struct AdamState<E: Elem> {
    m: Vec<(String, Vec<E>)>,
    v: Vec<Vec<E>>,
    step: u64,
}

pub const ADAM_EPS: f64 = 1e-8;

impl<E: Elem> AdamState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let m: Vec<(String, Vec<E>)> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| (name.to_string(), vec![E::ZERO; p.data.len()]))
            .collect();
        let v = m.iter().map(|(_, buf)| vec![E::ZERO; buf.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected moment update over every trainable parameter.
pub fn adam_step<E: Elem>(
    store: &mut ParamStore<E>,
    state: &mut AdamState<E>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one_m_b1 = E::ONE - b1;
    let one_m_b2 = E::ONE - b2;
    let bc1 = E::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = E::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = E::from_f64(cfg.lr);
    let eps = E::from_f64(ADAM_EPS);

    for ((name, m), v) in state.m.iter_mut().zip(state.v.iter_mut()) {
        let param = store.get_mut(name)?;
        let grad = param.grad.as_ref().ok_or_else(|| Error::MissingGrad(name.clone()))?;
        for i in 0..grad.len() {
            let gi = grad[i];
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- training

pub struct EvalOutcome {
    pub aggregate: MetricsReport,
    pub per_image_mean: MetricsReport,
}

pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// (epoch, aggregate report, per-image-mean report) at each evaluation.
    pub evals: Vec<(usize, MetricsReport, MetricsReport)>,
    pub best_f1: f64,
    pub best_epoch: usize,
    /// Parameters at the best validation F1.
    pub best_params: ParamStore<f32>,
    /// Epochs actually run (early stop may end sooner).
    pub epochs_run: usize,
}

pub struct TrainOptions {
    pub exec: Exec,
    /// Stop once the validation aggregate F1 reaches this value.
    pub stop_at_f1: Option<f64>,
    /// Per-epoch progress callback: (epoch, mean loss, eval result if any).
    #[allow(clippy::type_complexity)]
    pub progress: Option<Box<dyn FnMut(usize, f64, Option<&EvalOutcome>)>>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { exec: Exec::default(), stop_at_f1: None, progress: None }
    }
}

fn batch_tensors(
    source: &dyn PairSource,
    indices: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let pairs: Vec<_> = indices.iter().map(|i| source.get(*i)).collect::<Result<_>>()?;
    let t0s: Vec<_> = pairs.iter().map(|p| &p.t0).collect();
    let t1s: Vec<_> = pairs.iter().map(|p| &p.t1).collect();
    let masks: Vec<_> = pairs
        .iter()
        .map(|p| p.mask.as_ref().ok_or_else(|| Error::Dataset("training pair lacks a mask".into())))
        .collect::<Result<_>>()?;
    Ok((images_to_tensor(&t0s)?, images_to_tensor(&t1s)?, masks_to_tensor(&masks)?))
}

/// Evaluate the model over a source, one pair at a time, with frozen
/// statistics.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    source: &dyn PairSource,
    exec: Exec,
) -> Result<EvalOutcome> {
    let mut counts: Vec<Confusion> = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let pair = source.get(i)?;
        let mask = pair.mask.as_ref().ok_or_else(|| Error::Dataset("eval pair lacks a mask".into()))?;
        let x0 = images_to_tensor(&[&pair.t0])?;
        let x1 = images_to_tensor(&[&pair.t1])?;
        let mut g = Graph::new(exec);
        let logits = model.forward_eval(&mut g, store, &x0, &x1)?;
        let pred = binarize(&g.tensor(logits), 0.5);
        counts.push(confusion(&pred, &mask.data)?);
    }
    let (aggregate, per_image_mean) = evaluate_counts(&counts);
    Ok(EvalOutcome { aggregate, per_image_mean })
}

/// Seeded training loop: shuffled mini-batches, mean-BCE loss, moment-based
/// updates, periodic validation, best-F1 checkpoint retention. Aborts on a
/// non-finite loss naming the offending batch.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    train_src: &dyn PairSource,
    val_src: &dyn PairSource,
    cfg: &TrainConfig,
    mut opts: TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_src.is_empty() {
        return Err(Error::Dataset("training source is empty".into()));
    }
    let batch = cfg.effective_batch_size(model.config());
    let mut adam = AdamState::new(store);
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        evals: Vec::new(),
        best_f1: -1.0,
        best_epoch: 0,
        best_params: store.convert(),
        epochs_run: 0,
    };

    let mut indices: Vec<usize> = (0..train_src.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = SeededRng::stream(cfg.seed, epoch as u64);
        rng.shuffle(&mut indices);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in indices.chunks(batch).enumerate() {
            let (x0, x1, target) = batch_tensors(train_src, chunk)?;
            let mut g = Graph::new(opts.exec);
            let logits = model.forward_train(&mut g, store, &x0, &x1)?;
            let t = g.constant(&target);
            let loss = bce_loss(&mut g, logits, t)?;
            let loss_value = g.value(loss) as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += loss_value;
            batches += 1;
            store.zero_grads();
            g.backward(loss)?;
            g.flush_grads(store)?;
            adam_step(store, &mut adam, cfg)?;
        }
        let mean_loss = loss_sum / batches as f64;
        report.epoch_losses.push(mean_loss);
        report.epochs_run = epoch + 1;

        let mut eval_out = None;
        if (epoch + 1) % cfg.eval_every == 0 && !val_src.is_empty() {
            let outcome = evaluate(model, store, val_src, opts.exec)?;
            if outcome.aggregate.f1 > report.best_f1 {
                report.best_f1 = outcome.aggregate.f1;
                report.best_epoch = epoch;
                report.best_params = store.convert();
            }
            report.evals.push((epoch, outcome.aggregate, outcome.per_image_mean));
            eval_out = Some(outcome);
        }
        if let Some(cb) = opts.progress.as_mut() {
            cb(epoch, mean_loss, eval_out.as_ref());
        }
        if let (Some(target_f1), Some(out)) = (opts.stop_at_f1, eval_out.as_ref()) {
            if out.aggregate.f1 >= target_f1 {
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Shape;

    fn tiny_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(Shape::new(2, 1, 1, 1), vec![1.0, -2.0]).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = tiny_store();
        s.zero_grads();
        let mut adam = AdamState::new(&s);
        adam_step(&mut s, &mut adam, &TrainConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_under_unit_gradient() {
        // Bias correction makes the first update exactly lr * g/|g|.
        let mut s = tiny_store();
        s.zero_grads();
        s.accumulate_grad("w", &[1.0, 1.0]).unwrap();
        let mut adam = AdamState::new(&s);
        let cfg = TrainConfig { lr: 0.001, ..TrainConfig::default() };
        adam_step(&mut s, &mut adam, &cfg).unwrap();
        let w = &s.get("w").unwrap().data;
        assert!((w[0] - (1.0 - 0.001)).abs() < 1e-6, "{w:?}");
        assert!((w[1] - (-2.0 - 0.001)).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn identical_grads_give_identical_updates() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(0.5f32), true).unwrap();
        s.insert("b", Tensor::scalar(0.5f32), true).unwrap();
        s.zero_grads();
        s.accumulate_grad("a", &[0.3]).unwrap();
        s.accumulate_grad("b", &[0.3]).unwrap();
        let mut adam = AdamState::new(&s);
        adam_step(&mut s, &mut adam, &TrainConfig::default()).unwrap();
        assert_eq!(s.get("a").unwrap().data[0].to_bits(), s.get("b").unwrap().data[0].to_bits());
    }

    #[test]
    fn missing_grad_is_rejected_by_name() {
        let mut s = tiny_store();
        let mut adam = AdamState::new(&s);
        let err = adam_step(&mut s, &mut adam, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }
}
