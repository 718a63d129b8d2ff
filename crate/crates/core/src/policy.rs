//! Accumulation by cluster and the policy layers.
//!
//! Videos sharing a cluster are summed into one request tensor, normalized,
//! run through the shared temporal layers and mapped to one dispatch
//! probability per user.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::activation::Activation;
use crate::dense::{Mlp, MlpTrace};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamSet};
use crate::request::RequestTensor;
use crate::rng::Seed;
use crate::temporal::{temporal_backward, temporal_forward, PeakIndexSet, TemporalCache, TemporalConfig, TemporalParams};
use crate::tensor::{self, Tensor};

pub const PREFIX: &str = "policy.";
const HEAD: &str = "policy.head.";

/// Cluster index → summed request tensor `XA^c`. Empty clusters are absent.
pub type ClusterRequests = BTreeMap<usize, RequestTensor>;

/// `XA^c = Σ_{v : C(v) = c} X_(v)`.
pub fn accumulate_by_cluster<'a, I>(videos: I, assignment: impl Fn(u64) -> Option<usize>) -> Result<ClusterRequests>
where
    I: IntoIterator<Item = (u64, &'a RequestTensor)>,
{
    let mut out = ClusterRequests::new();
    let mut missing = Vec::new();
    for (id, x) in videos {
        let Some(c) = assignment(id) else {
            missing.push(id);
            continue;
        };
        match out.get_mut(&c) {
            Some(acc) => acc.add_assign(x)?,
            None => {
                out.insert(c, x.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Unassigned(missing));
    }
    Ok(out)
}

/// Fully connected head `|U|·H → … → |U|` with a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHead {
    pub net: Mlp,
}

impl PolicyHead {
    /// `hidden` empty gives a single linear+sigmoid layer.
    pub fn init(users: usize, cfg: &TemporalConfig, hidden: &[usize], seed: Seed) -> Result<Self> {
        let mut sizes = vec![users * cfg.hidden];
        sizes.extend_from_slice(hidden);
        sizes.push(users);
        Ok(PolicyHead {
            net: Mlp::init(&sizes, Activation::Tanh, Activation::Sigmoid, seed)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        PolicyHead { net: self.net.zeros_like() }
    }

    pub fn users(&self) -> usize {
        self.net.outputs()
    }

    pub fn write_into(&self, ps: &mut ParamSet) {
        self.net.write_into(HEAD, ps);
    }

    pub fn to_gradients(&self) -> Gradients {
        self.net.to_gradients(HEAD)
    }

    pub fn load(&self, ps: &ParamSet) -> Result<Self> {
        Ok(PolicyHead {
            net: self.net.load(HEAD, ps)?,
        })
    }

    pub fn add_assign(&mut self, other: &PolicyHead) {
        self.net.add_assign(&other.net);
    }
}

#[derive(Debug, Clone)]
pub struct PolicyCache {
    input: RequestTensor,
    normalized: RequestTensor,
    temporal: TemporalCache,
    head: MlpTrace,
}

/// `UP = head(temporal(normalize(XA)))`, one probability per user.
pub fn policy_forward(
    xa: &RequestTensor,
    cfg: &TemporalConfig,
    temporal: &TemporalParams,
    head: &PolicyHead,
    peaks: &PeakIndexSet,
) -> Result<(Vec<f64>, PolicyCache)> {
    if xa.users() != head.users() {
        return Err(Error::shape("policy input users", &[head.users()], &[xa.users()]));
    }
    let normalized = xa.l2_normalized();
    let (t, tcache) = temporal_forward(&normalized, cfg, temporal, peaks)?;
    let trace = head.net.forward(t.data());
    Ok((
        trace.output().to_vec(),
        PolicyCache {
            input: xa.clone(),
            normalized,
            temporal: tcache,
            head: trace,
        },
    ))
}

/// Accumulate head and temporal gradients for upstream `dL/dUP`; returns `dL/dXA`.
pub fn policy_backward(
    cache: &PolicyCache,
    d_up: &[f64],
    temporal: &TemporalParams,
    head: &PolicyHead,
    grad_temporal: &mut TemporalParams,
    grad_head: &mut PolicyHead,
) -> Result<RequestTensor> {
    let dt = head.net.backward(&cache.head, d_up, &mut grad_head.net);
    let (gt, dn) = temporal_backward(&cache.temporal, &dt, temporal)?;
    grad_temporal.add_assign(&gt);
    let dx = tensor::l2_normalize_backward(cache.input.data(), cache.normalized.data(), dn.data());
    let [u, d, t] = cache.input.dims();
    Ok(RequestTensor::from_raw(u, d, t, dx))
}

/// Per-user share of requests over `window` on `day`; `None` when the cluster
/// had no requests there (it is then left out of the loss).
pub fn make_policy_target(xa: &RequestTensor, day: usize, window: &[usize]) -> Option<Vec<f64>> {
    let totals = xa.user_window_totals(day, window);
    let sum: f64 = totals.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    Some(totals.into_iter().map(|x| x / sum).collect())
}

/// `loss_p = ½ Σ_c ‖UP_c − R_c‖²` over clusters present in both maps, with
/// `dL/dUP_c = UP_c − R_c`.
pub fn policy_loss(
    up: &BTreeMap<usize, Vec<f64>>,
    targets: &BTreeMap<usize, Vec<f64>>,
) -> Result<(f64, BTreeMap<usize, Vec<f64>>)> {
    let mut loss = 0.0;
    let mut grads = BTreeMap::new();
    for (c, p) in up {
        let Some(r) = targets.get(c) else { continue };
        if p.len() != r.len() {
            return Err(Error::shape("policy target", &[p.len()], &[r.len()]));
        }
        let g: Vec<f64> = p.iter().zip(r).map(|(a, b)| a - b).collect();
        loss += 0.5 * tensor::dot(&g, &g);
        grads.insert(*c, g);
    }
    if grads.is_empty() {
        return Err(Error::EmptyTrainingSignal);
    }
    Ok((loss, grads))
}

/// Flattened `T_(c)` for inspection.
pub fn cluster_embedding(
    xa: &RequestTensor,
    cfg: &TemporalConfig,
    temporal: &TemporalParams,
    peaks: &PeakIndexSet,
) -> Result<Tensor> {
    Ok(temporal_forward(&xa.l2_normalized(), cfg, temporal, peaks)?.0)
}
