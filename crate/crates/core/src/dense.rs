//! Fully connected layers with hand-written backward passes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::params::{xavier_init, Gradients, ParamSet};
use crate::rng::Seed;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs, inputs]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, act: Activation) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
            act,
        }
    }

    pub fn init(inputs: usize, outputs: usize, act: Activation, seed: Seed) -> Result<Self> {
        let w = xavier_init(&[outputs, inputs], inputs, outputs, seed)?.into_data();
        Ok(Dense {
            inputs,
            outputs,
            w,
            b: vec![0.0; outputs],
            act,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.outputs];
        tensor::affine(&self.w, &self.b, x, &mut y);
        y.iter_mut().for_each(|v| *v = self.act.apply(*v));
        y
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let da: Vec<f64> = dy
            .iter()
            .zip(y)
            .map(|(g, &yv)| g * self.act.derivative_from_output(yv))
            .collect();
        tensor::outer_acc(&da, x, &mut grad.w);
        tensor::add_assign(&mut grad.b, &da);
        let mut dx = vec![0.0; self.inputs];
        tensor::matvec_t_acc(&self.w, &da, &mut dx);
        dx
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs to every layer plus the final output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    pub activations: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }
}

impl Mlp {
    /// `sizes` lists every width from input to output; `hidden` is used on all
    /// layers except the last, which uses `last`.
    pub fn init(sizes: &[usize], hidden: Activation, last: Activation, seed: Seed) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::DegenerateShape);
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Dense::init(sizes[i], sizes[i + 1], act, seed.index(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs, l.act)).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn forward(&self, x: &[f64]) -> MlpTrace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for l in &self.layers {
            let y = l.forward(activations.last().expect("non-empty"));
            activations.push(y);
        }
        MlpTrace { activations }
    }

    pub fn backward(&self, trace: &MlpTrace, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut g = dy.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            g = l.backward(&trace.activations[i], &trace.activations[i + 1], &g, &mut grad.layers[i]);
        }
        g
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            tensor::add_assign(&mut a.w, &b.w);
            tensor::add_assign(&mut a.b, &b.b);
        }
    }

    fn named(&self, prefix: &str) -> impl Iterator<Item = (String, Tensor)> + '_ {
        let prefix = String::from(prefix);
        self.layers.iter().enumerate().flat_map(move |(i, l)| {
            [
                (
                    format!("{prefix}{i}.W"),
                    Tensor::new(vec![l.outputs, l.inputs], l.w.clone()).expect("layer shape"),
                ),
                (format!("{prefix}{i}.b"), Tensor::new(vec![l.outputs], l.b.clone()).expect("layer shape")),
            ]
        })
    }

    pub fn write_into(&self, prefix: &str, ps: &mut ParamSet) {
        for (n, t) in self.named(prefix) {
            ps.insert(n, t);
        }
    }

    pub fn to_gradients(&self, prefix: &str) -> Gradients {
        self.named(prefix).collect()
    }

    /// Load weights into a network of the same architecture as `self`.
    pub fn load(&self, prefix: &str, ps: &ParamSet) -> Result<Mlp> {
        let mut out = self.clone();
        for (i, l) in out.layers.iter_mut().enumerate() {
            let wn = format!("{prefix}{i}.W");
            let bn = format!("{prefix}{i}.b");
            let w = ps.get(&wn)?;
            if w.shape() != [l.outputs, l.inputs] {
                return Err(Error::shape(&wn, &[l.outputs, l.inputs], w.shape()));
            }
            let b = ps.get(&bn)?;
            if b.shape() != [l.outputs] {
                return Err(Error::shape(&bn, &[l.outputs], b.shape()));
            }
            l.w.copy_from_slice(w.data());
            l.b.copy_from_slice(b.data());
        }
        Ok(out)
    }
}
