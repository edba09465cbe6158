//! Central-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates drawn uniformly over all trainable entries.
    pub samples: usize,
    /// Extra coordinates drawn from every trainable parameter tensor.
    pub per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples: 50,
            per_param: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compare analytic gradients of `loss` against central differences on
/// sampled trainable coordinates. Frozen parameters are never perturbed.
pub fn grad_check<F>(
    store: &ParamStore,
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(s, &mut g)?;
        let v = g.value(l).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    if !g.value(l).data()[0].is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(l)?;

    let trainable: Vec<usize> = (0..store.len())
        .filter(|&i| store.by_index(i).trainable)
        .collect();
    let total: usize = trainable
        .iter()
        .map(|&i| store.by_index(i).value.len())
        .sum();
    let mut rng = RngStream::new(opts.seed, 0x6772_6164);
    let mut coords = Vec::new();
    for &pi in &trainable {
        let n = store.by_index(pi).value.len();
        for _ in 0..opts.per_param.min(n) {
            coords.push((pi, rng.below(n)));
        }
    }
    for _ in 0..opts.samples.min(total) {
        let mut k = rng.below(total);
        for &pi in &trainable {
            let n = store.by_index(pi).value.len();
            if k < n {
                coords.push((pi, k));
                break;
            }
            k -= n;
        }
    }

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (pi, idx) in coords {
        let orig = work.by_index(pi).value.data()[idx];
        work.by_index_mut(pi).value.data_mut()[idx] = orig + opts.step;
        let plus = eval(&work)?;
        work.by_index_mut(pi).value.data_mut()[idx] = orig - opts.step;
        let minus = eval(&work)?;
        work.by_index_mut(pi).value.data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = grads.get(pi).map_or(0.0, |t| t.data()[idx]);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Worst {
                param: work.by_index(pi).id.clone(),
                index: idx,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert(
                "theta",
                Tensor::new(vec![3], vec![0.3, -1.2, 2.5]).unwrap(),
                true,
            )
            .unwrap();
        let report = grad_check(
            &store,
            |s, g| {
                let t = g.param(s, "theta")?;
                let sq = g.mul(t, t)?;
                let m = g.mean(sq)?;
                g.scale(m, 3.0)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!(report.checked >= 3);
    }

    #[test]
    fn frozen_params_are_not_sampled() {
        let mut store = ParamStore::new();
        store
            .insert("frozen", Tensor::full(&[4], 2.0), false)
            .unwrap();
        store.insert("live", Tensor::full(&[1], 0.5), true).unwrap();
        let report = grad_check(
            &store,
            |s, g| {
                let f = g.param(s, "frozen")?;
                let l = g.param(s, "live")?;
                let y = g.mul_scalar(f, l)?;
                g.mean(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.worst.unwrap().param, "live");
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[1], 1.0), true).unwrap();
        let r = grad_check(
            &store,
            |s, g| {
                let x = g.param(s, "x")?;
                let c = g.constant(Tensor::full(&[1], f64::MAX))?;
                let y = g.mul(x, c)?;
                let y = g.affine(y, 10.0, 0.0)?;
                g.mean(y)
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
