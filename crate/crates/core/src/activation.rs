use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => libm::tanh(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn apply_activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn activation_examples() {
        let r = apply_activation(&Tensor::vector(vec![-1.0, 0.0, 2.0]), Activation::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        // (e^x - e^-x) / (e^x + e^-x) at 0.5 from exp alone.
        let (a, b) = (libm::exp(0.5), libm::exp(-0.5));
        let oracle = (a - b) / (a + b);
        let t = apply_activation(&Tensor::vector(vec![0.5]), Activation::Tanh);
        assert!((t.data()[0] - oracle).abs() < 1e-15);
        assert!((t.data()[0] - 0.462_117_157_260_009_8).abs() < 1e-15);
    }

    #[test]
    fn ranges_hold_on_extremes() {
        for &x in &[-800.0, -30.0, -1.0, 0.0, 1.0, 30.0, 800.0] {
            let s = sigmoid(x);
            assert!((0.0..=1.0).contains(&s) && s.is_finite());
            assert!(libm::tanh(x).abs() <= 1.0);
            assert!(relu(x) >= 0.0);
        }
        assert!(sigmoid(20.0) < 1.0 && sigmoid(-20.0) > 0.0);
    }
}
