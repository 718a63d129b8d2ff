//! Central-difference verification of hand-written backward passes.

use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamSet};
use crate::rng::Seed;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub h: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: Seed,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: 1e-5,
            max_coords: None,
            seed: Seed(0),
        }
    }
}

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates, where
/// `a` is the analytic gradient returned by `loss_fn` at `params` and `n` is
/// `(f(p + h) - f(p - h)) / 2h`.
///
/// Parameters absent from the analytic gradient are treated as having zero
/// gradient and are checked as well.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParamSet, opts: CheckOptions) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, Gradients)>,
{
    let (f0, analytic) = loss_fn(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut worst = 0.0f64;
    for (name, t) in params.iter() {
        let n = t.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut rng = opts.seed.derive(name).rng();
                sample(&mut rng, n, m).into_vec()
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.get(name);
        for idx in coords {
            let a = grad.map_or(0.0, |g| g.data()[idx]);
            let mut plus = params.clone();
            plus.nudge(name, idx, opts.h);
            let mut minus = params.clone();
            minus.nudge(name, idx, -opts.h);
            let (fp, _) = loss_fn(&plus)?;
            let (fm, _) = loss_fn(&minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::sigmoid;
    use crate::tensor::Tensor;

    fn single(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(p));
        ps
    }

    fn scalar_fn(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> impl Fn(&ParamSet) -> Result<(f64, Gradients)> {
        move |ps: &ParamSet| {
            let p = ps.get("p")?.data()[0];
            let mut g = Gradients::new();
            g.insert("p".into(), Tensor::scalar(df(p)));
            Ok((f(p), g))
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let err = finite_difference_check(scalar_fn(|p| p * p, |p| 2.0 * p), &single(3.0), CheckOptions::default()).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let s = |p: f64| sigmoid(p);
        let ds = |p: f64| sigmoid(p) * (1.0 - sigmoid(p));
        let err = finite_difference_check(scalar_fn(s, ds), &single(0.0), CheckOptions::default()).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_doubled_gradient() {
        let err = finite_difference_check(scalar_fn(|p| p * p, |p| 4.0 * p), &single(3.0), CheckOptions::default()).unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = finite_difference_check(scalar_fn(|_| f64::NAN, |_| 0.0), &single(1.0), CheckOptions::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
