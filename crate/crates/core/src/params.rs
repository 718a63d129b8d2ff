//! Named parameter sets, Xavier initialization and the MBGD optimizer.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn with_version(version: u64) -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
            version,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    /// Insert or replace a tensor. Bumps the version.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
        self.version += 1;
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Entries whose name starts with `prefix`, as a new set with the same version.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            version: self.version,
        }
    }

    /// Copy every entry of `other` into `self` without touching the version.
    pub fn merge_from(&mut self, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// CRC-32 over names, shapes and value bits.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(&x.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Perturb a single coordinate in place without a version bump.
    pub(crate) fn nudge(&mut self, name: &str, idx: usize, delta: f64) {
        if let Some(t) = self.tensors.get_mut(name) {
            t.data_mut()[idx] += delta;
        }
    }
}

/// i.i.d. uniform samples on `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(shape: &[usize], fan_in: usize, fan_out: usize, seed: Seed) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 || shape.iter().any(|&d| d == 0) {
        return Err(Error::DegenerateShape);
    }
    let bound = xavier_bound(fan_in, fan_out);
    let mut rng = seed.rng();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// Layer-wise learning rates with geometric decay per step.
///
/// The rate for a parameter is taken from the longest matching name prefix in
/// `rates`, falling back to `default_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub default_rate: f64,
    pub rates: BTreeMap<String, f64>,
    pub decay: f64,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(default_rate: f64, decay: f64) -> Result<Self> {
        if !(default_rate >= 0.0 && default_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config("decay must lie in (0, 1]"));
        }
        Ok(OptimizerState {
            default_rate,
            rates: BTreeMap::new(),
            decay,
            step: 0,
        })
    }

    pub fn with_rate(mut self, prefix: &str, rate: f64) -> Self {
        self.rates.insert(prefix.into(), rate);
        self
    }

    pub fn base_rate(&self, name: &str) -> f64 {
        self.rates
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.default_rate, |(_, &r)| r)
    }

    pub fn rate(&self, name: &str) -> f64 {
        self.base_rate(name) * libm::pow(self.decay, self.step as f64)
    }
}

/// One mini-batch gradient descent update: `p <- p - rate(p) * g`.
///
/// Returns a new parameter set; the input is left untouched.
pub fn mbgd_step(params: &ParamSet, grads: &Gradients, opt: &mut OptimizerState) -> Result<ParamSet> {
    let mut next = params.clone();
    for (name, g) in grads {
        let p = params.get(name)?;
        if !p.same_shape(g) {
            return Err(Error::shape(name, p.shape(), g.shape()));
        }
        let rate = opt.rate(name);
        let t = next.tensors.get_mut(name).expect("checked above");
        for (x, dx) in t.data_mut().iter_mut().zip(g.data()) {
            *x -= rate * dx;
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    next.version = params.version + 1;
    opt.step += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(p));
        ps
    }

    fn grad(g: f64) -> Gradients {
        let mut m = Gradients::new();
        m.insert("w".into(), Tensor::scalar(g));
        m
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let t = xavier_init(&[50, 50], 3, 3, Seed(1)).unwrap();
        assert!(t.data().iter().all(|x| x.abs() <= 1.0));
        assert!((xavier_bound(1, 2) - 1.414_213_562_373_095).abs() < 1e-12);
        assert_eq!(t, xavier_init(&[50, 50], 3, 3, Seed(1)).unwrap());
        assert_eq!(xavier_init(&[2], 0, 3, Seed(1)), Err(Error::DegenerateShape));
    }

    #[test]
    fn mbgd_examples() {
        let mut opt = OptimizerState::new(0.1, 1.0).unwrap();
        let p = one(1.0);
        let next = mbgd_step(&p, &grad(0.5), &mut opt).unwrap();
        assert!((next.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert!(next.version() > p.version());

        let zero = mbgd_step(&next, &grad(0.0), &mut opt).unwrap();
        assert_eq!(zero.get("w").unwrap(), next.get("w").unwrap());
        assert_eq!(zero.version(), next.version() + 1);

        let mut opt = OptimizerState::new(0.4, 0.5).unwrap();
        let a = mbgd_step(&one(1.0), &grad(1.0), &mut opt).unwrap();
        let b = mbgd_step(&a, &grad(1.0), &mut opt).unwrap();
        assert!((b.get("w").unwrap().data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::vector(vec![1.0, 2.0]));
        let mut opt = OptimizerState::new(0.1, 1.0).unwrap();
        match mbgd_step(&one(1.0), &g, &mut opt) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layerwise_rates_use_longest_prefix() {
        let opt = OptimizerState::new(0.1, 1.0)
            .unwrap()
            .with_rate("temporal.", 0.2)
            .with_rate("temporal.gru.", 0.3);
        assert_eq!(opt.base_rate("temporal.gru.W_z"), 0.3);
        assert_eq!(opt.base_rate("temporal.W_peak"), 0.2);
        assert_eq!(opt.base_rate("policy.W"), 0.1);
    }
}
