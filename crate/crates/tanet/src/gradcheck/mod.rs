//! Central finite-difference verification of reverse-mode gradients.
//!
//! Runs in f64 only. The checker evaluates the loss twice up front and
//! rejects non-deterministic functions, then compares every sampled
//! coordinate's analytic gradient against a central difference.

pub mod suite;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{Graph, Var};
use crate::rng::SeededRng;
use crate::store::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all when the tensor is
    /// smaller).
    pub max_samples_per_param: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, max_samples_per_param: 8, seed: 0, exec: Exec::default() }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    /// (parameter name, worst relative error over sampled coordinates).
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

/// Check d(loss)/d(params) for a scalar-valued builder `f`. The builder must
/// construct the loss from the given store through a fresh graph each call.
pub fn finite_difference_gradcheck<F>(
    mut f: F,
    store: &mut ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, f: &mut F| -> Result<f64> {
        let mut g = Graph::new(cfg.exec);
        let loss = f(&mut g, store)?;
        let shape = g.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        Ok(g.value(loss))
    };

    let first = eval(store, &mut f)?;
    let second = eval(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    // Analytic gradients.
    store.zero_grads();
    {
        let mut g = Graph::new(cfg.exec);
        let loss = f(&mut g, store)?;
        g.backward(loss)?;
        g.flush_grads(store)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(name, p)| (name.to_string(), p.grad.clone().unwrap_or_default()))
        .collect();

    let mut rng = SeededRng::new(cfg.seed);
    let mut report = GradCheckReport { per_param: Vec::new(), max_rel_err: 0.0 };
    for (name, grad) in analytic {
        let len = grad.len();
        let coords: Vec<usize> = if len <= cfg.max_samples_per_param {
            (0..len).collect()
        } else {
            // Distinct seeded picks.
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < cfg.max_samples_per_param {
                seen.insert(rng.range(0, len));
            }
            seen.into_iter().collect()
        };

        let mut worst = 0.0f64;
        for coord in coords {
            let original = store.get(&name)?.data[coord];
            store.get_mut(&name)?.data[coord] = original + cfg.step;
            let plus = eval(store, &mut f)?;
            store.get_mut(&name)?.data[coord] = original - cfg.step;
            let minus = eval(store, &mut f)?;
            store.get_mut(&name)?.data[coord] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad[coord];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs());
            if rel > worst {
                worst = rel;
            }
        }
        if worst > report.max_rel_err {
            report.max_rel_err = worst;
        }
        report.per_param.push((name, worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Shape;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_matches_analytic_six() {
        // loss = w^2 summed over a scalar parameter at w = 3: d/dw = 6.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(3.0f64), true).unwrap();
        let report = finite_difference_gradcheck(
            |g, s| {
                let w = g.param(s, "w")?;
                let sq = g.mul(w, w)?;
                Ok(g.sum_all(sq))
            },
            &mut store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
        assert!((store.get("w").unwrap().grad.as_ref().unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn loss_independent_of_param_gives_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::scalar(2.0f64), true).unwrap();
        store.insert("unused", Tensor::scalar(5.0f64), true).unwrap();
        let report = finite_difference_gradcheck(
            |g, s| {
                let w = g.param(s, "used")?;
                // Register the unused parameter too so it appears in the report.
                let _ = g.param(s, "unused")?;
                Ok(g.sum_all(w))
            },
            &mut store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9);
        assert_eq!(store.get("unused").unwrap().grad.as_deref().unwrap(), &[0.0]);
    }

    #[test]
    fn nondeterminism_is_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let counter = AtomicUsize::new(0);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0f64), true).unwrap();
        let err = finite_difference_gradcheck(
            |g, s| {
                let w = g.param(s, "w")?;
                let jitter = counter.fetch_add(1, Ordering::SeqCst) as f64;
                let c = g.constant(&Tensor::scalar(jitter));
                let sum = g.add(w, c)?;
                Ok(g.sum_all(sum))
            },
            &mut store,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
