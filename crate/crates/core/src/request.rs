use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Non-negative request counts indexed `[user][day][interval]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestTensor {
    users: usize,
    days: usize,
    intervals: usize,
    data: Vec<f64>,
}

impl RequestTensor {
    pub fn zeros(users: usize, days: usize, intervals: usize) -> Self {
        RequestTensor {
            users,
            days,
            intervals,
            data: vec![0.0; users * days * intervals],
        }
    }

    pub fn from_vec(users: usize, days: usize, intervals: usize, data: Vec<f64>) -> Result<Self> {
        if users == 0 || days == 0 || intervals == 0 {
            return Err(Error::DegenerateShape);
        }
        if data.len() != users * days * intervals {
            return Err(Error::shape("request tensor", &[users, days, intervals], &[data.len()]));
        }
        if data.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::config("request counts must be finite and non-negative"));
        }
        Ok(RequestTensor {
            users,
            days,
            intervals,
            data,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.users, self.days, self.intervals]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, user: usize, day: usize) -> usize {
        (user * self.days + day) * self.intervals
    }

    /// The length-T series `X_u^d`.
    pub fn series(&self, user: usize, day: usize) -> &[f64] {
        let o = self.offset(user, day);
        &self.data[o..o + self.intervals]
    }

    pub fn series_mut(&mut self, user: usize, day: usize) -> &mut [f64] {
        let o = self.offset(user, day);
        &mut self.data[o..o + self.intervals]
    }

    pub fn get(&self, user: usize, day: usize, interval: usize) -> f64 {
        self.data[self.offset(user, day) + interval]
    }

    pub fn add(&mut self, user: usize, day: usize, interval: usize, count: f64) {
        let o = self.offset(user, day) + interval;
        self.data[o] += count;
    }

    /// Days `start..start + len` as a new tensor.
    pub fn day_window(&self, start: usize, len: usize) -> Result<RequestTensor> {
        if len == 0 || start + len > self.days {
            return Err(Error::config("day window out of range"));
        }
        let mut out = RequestTensor::zeros(self.users, len, self.intervals);
        for u in 0..self.users {
            for d in 0..len {
                out.series_mut(u, d).copy_from_slice(self.series(u, start + d));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &RequestTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape("request tensor", &self.dims(), &other.dims()));
        }
        tensor::add_assign(&mut self.data, &other.data);
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Per-user sum over the given intervals of one day.
    pub fn user_window_totals(&self, day: usize, intervals: &[usize]) -> Vec<f64> {
        (0..self.users)
            .map(|u| {
                let s = self.series(u, day);
                intervals.iter().map(|&t| s[t]).sum()
            })
            .collect()
    }

    /// The whole tensor scaled to unit L2 norm (zeros stay zeros).
    pub fn l2_normalized(&self) -> RequestTensor {
        let n = tensor::norm(&self.data);
        let mut out = self.clone();
        if n > tensor::NORM_EPS {
            out.data.iter_mut().for_each(|x| *x /= n);
        } else {
            out.data.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims().to_vec(), self.data.clone()).expect("dims are positive")
    }

    /// Unchecked constructor for gradients, which may be negative.
    pub(crate) fn from_raw(users: usize, days: usize, intervals: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), users * days * intervals);
        RequestTensor {
            users,
            days,
            intervals,
            data,
        }
    }
}
