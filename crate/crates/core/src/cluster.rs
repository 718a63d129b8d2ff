//! Clustering layers: L2 normalization, a 2-D autoencoder and a fixed
//! hierarchical grid over the encoder plane.
//!
//! The grid depends only on `(NDH, budget)`, never on data, so a video's
//! cluster is a function of its own encoding alone and stays stable across
//! batches, shards and iterations.

use alloc::vec;
use alloc::vec::Vec;

use crate::activation::Activation;
use crate::dense::{Mlp, MlpTrace};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamSet};
use crate::rng::Seed;
use crate::tensor::{self, Tensor};

pub const PREFIX: &str = "cluster.";
const ENCODER: &str = "cluster.enc.";
const DECODER: &str = "cluster.dec.";
const PARTITION: &str = "cluster.partition.intervals";
const PARTITION_META: &str = "cluster.partition.meta";

/// An open interval `(left, right)` of one grid axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub left: f64,
    pub right: f64,
}

impl Interval {
    pub fn mid(&self) -> f64 {
        0.5 * (self.left + self.right)
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    ndh: usize,
    budget: usize,
    /// Sorted by left endpoint; contiguous over `[-1, 1]`.
    intervals: Vec<Interval>,
}

/// Build the hierarchical grid.
///
/// The right half `(0, 1)` is split into `ndh` equal parts; the part nearest
/// zero is split again, and so on, until at least `½·sqrt(budget)` outer
/// parts have been produced. The innermost part, the outer parts and their
/// mirror images on `(-1, 0)` form the axis intervals; blocks are the
/// Cartesian square of those intervals.
pub fn build_block_partition(ndh: usize, budget: usize) -> Result<BlockPartition> {
    if ndh < 2 {
        return Err(Error::config("NDH must be at least 2"));
    }
    if budget < 4 {
        return Err(Error::config("cluster budget must be at least 4"));
    }
    let target = 0.5 * libm::sqrt(budget as f64);
    let mut rintv = Interval { left: 0.0, right: 1.0 };
    let mut outer: Vec<Interval> = Vec::new();
    while (outer.len() as f64) < target {
        let w = rintv.width() / ndh as f64;
        let subs: Vec<Interval> = (0..ndh)
            .map(|j| Interval {
                left: if j == 0 { rintv.left } else { rintv.left + w * j as f64 },
                right: if j + 1 == ndh { rintv.right } else { rintv.left + w * (j + 1) as f64 },
            })
            .collect();
        outer.extend_from_slice(&subs[1..]);
        rintv = subs[0];
    }
    let mut right = Vec::with_capacity(outer.len() + 1);
    right.push(rintv);
    right.extend(outer);
    let mut intervals: Vec<Interval> = right
        .iter()
        .map(|iv| Interval {
            left: -iv.right,
            right: -iv.left,
        })
        .chain(right.iter().copied())
        .collect();
    intervals.sort_by(|a, b| a.left.total_cmp(&b.left));
    Ok(BlockPartition { ndh, budget, intervals })
}

impl BlockPartition {
    pub fn ndh(&self) -> usize {
        self.ndh
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    /// `|ℜ(C)| = |Intv¹|²`.
    pub fn cluster_count(&self) -> usize {
        self.intervals.len() * self.intervals.len()
    }

    /// Index of the interval containing `x` under the `[left, right)` rule.
    fn locate(&self, x: f64) -> Result<usize> {
        if !(x > -1.0 && x < 1.0) {
            return Err(Error::OutOfRange(x));
        }
        Ok(self.intervals.partition_point(|iv| iv.left <= x) - 1)
    }

    pub fn block_axes(&self, block: usize) -> (usize, usize) {
        let n = self.intervals.len();
        (block / n, block % n)
    }

    pub fn center(&self, block: usize) -> [f64; 2] {
        let (ix, iy) = self.block_axes(block);
        [self.intervals[ix].mid(), self.intervals[iy].mid()]
    }

    pub fn area(&self, block: usize) -> f64 {
        let (ix, iy) = self.block_axes(block);
        self.intervals[ix].width() * self.intervals[iy].width()
    }

    /// Block whose center is nearest to `e`; ties go to the lowest index.
    pub fn nearest_center(&self, e: [f64; 2]) -> usize {
        // Centers form a product grid, so the axes can be minimized separately.
        let best = |v: f64| {
            let mut arg = 0;
            let mut d = f64::INFINITY;
            for (i, iv) in self.intervals.iter().enumerate() {
                let di = (v - iv.mid()) * (v - iv.mid());
                if di < d {
                    d = di;
                    arg = i;
                }
            }
            arg
        };
        best(e[0]) * self.intervals.len() + best(e[1])
    }

    /// Store the grid as `cluster.partition.*` entries.
    pub fn write_into(&self, ps: &mut ParamSet) {
        let flat: Vec<f64> = self.intervals.iter().flat_map(|iv| [iv.left, iv.right]).collect();
        ps.insert(PARTITION, Tensor::new(vec![self.intervals.len(), 2], flat).expect("non-empty"));
        ps.insert(PARTITION_META, Tensor::vector(vec![self.ndh as f64, self.budget as f64]));
    }

    /// Rebuild from checkpoint entries, checking the stored endpoints bit for bit.
    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        let meta = ps.get(PARTITION_META)?.data();
        if meta.len() != 2 {
            return Err(Error::Checkpoint("partition meta must hold NDH and budget".into()));
        }
        let part = build_block_partition(meta[0] as usize, meta[1] as usize)?;
        let stored = ps.get(PARTITION)?.data();
        let same = stored.len() == part.intervals.len() * 2
            && part
                .intervals
                .iter()
                .flat_map(|iv| [iv.left, iv.right])
                .zip(stored)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Checkpoint("stored partition differs from its construction".into()));
        }
        Ok(part)
    }
}

/// Cluster index of an encoder output: `ix·|Intv¹| + iy`.
pub fn assign_cluster(e: [f64; 2], partition: &BlockPartition) -> Result<usize> {
    let ix = partition.locate(e[0])?;
    let iy = partition.locate(e[1])?;
    Ok(ix * partition.intervals.len() + iy)
}

/// Encoder `input → hidden… → 2` (tanh) and mirrored linear-output decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    pub fn init(input: usize, hidden: &[usize], seed: Seed) -> Result<Self> {
        let mut enc_sizes = vec![input];
        enc_sizes.extend_from_slice(hidden);
        enc_sizes.push(2);
        let dec_sizes: Vec<usize> = enc_sizes.iter().rev().copied().collect();
        Ok(Autoencoder {
            encoder: Mlp::init(&enc_sizes, Activation::Tanh, Activation::Tanh, seed.derive("encoder"))?,
            decoder: Mlp::init(&dec_sizes, Activation::Tanh, Activation::Identity, seed.derive("decoder"))?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Autoencoder {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.encoder.inputs()
    }

    pub fn encode(&self, nt: &[f64]) -> [f64; 2] {
        let tr = self.encoder.forward(nt);
        let e = tr.output();
        [e[0], e[1]]
    }

    pub fn add_assign(&mut self, other: &Autoencoder) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
    }

    pub fn write_into(&self, ps: &mut ParamSet) {
        self.encoder.write_into(ENCODER, ps);
        self.decoder.write_into(DECODER, ps);
    }

    pub fn to_gradients(&self) -> Gradients {
        let mut g = self.encoder.to_gradients(ENCODER);
        g.extend(self.decoder.to_gradients(DECODER));
        g
    }

    /// Load weights into the architecture of `self`.
    pub fn load(&self, ps: &ParamSet) -> Result<Self> {
        Ok(Autoencoder {
            encoder: self.encoder.load(ENCODER, ps)?,
            decoder: self.decoder.load(DECODER, ps)?,
        })
    }
}

/// Forward state of one video through the clustering layers.
#[derive(Debug, Clone)]
pub struct ClusterCache {
    flat: Vec<f64>,
    nt: Vec<f64>,
    enc: MlpTrace,
    dec: MlpTrace,
    nearest: usize,
    omega: f64,
}

#[derive(Debug, Clone)]
pub struct ClusterOutput {
    pub encoding: [f64; 2],
    pub decoded: Vec<f64>,
    pub cluster: usize,
    pub loss: f64,
    pub cache: ClusterCache,
}

/// `NT = normalize(T_v)`, `E = enc(NT)`, `D = dec(E)`,
/// `loss = ½‖NT − D‖² + ω·min_b ‖E − O_b‖²`.
pub fn cluster_forward(t_v: &Tensor, ae: &Autoencoder, partition: &BlockPartition, omega: f64) -> Result<ClusterOutput> {
    if !(omega >= 0.0) {
        return Err(Error::config("omega must be non-negative"));
    }
    if t_v.len() != ae.inputs() {
        return Err(Error::shape("clustering input", &[ae.inputs()], t_v.shape()));
    }
    let flat = t_v.data().to_vec();
    let nt = tensor::l2_normalize(t_v).into_data();
    let enc = ae.encoder.forward(&nt);
    let e = [enc.output()[0], enc.output()[1]];
    let dec = ae.decoder.forward(&e);
    let recon: f64 = nt.iter().zip(dec.output()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
    let nearest = partition.nearest_center(e);
    let c = partition.center(nearest);
    let quant = (e[0] - c[0]) * (e[0] - c[0]) + (e[1] - c[1]) * (e[1] - c[1]);
    let cluster = assign_cluster(e, partition)?;
    Ok(ClusterOutput {
        encoding: e,
        decoded: dec.output().to_vec(),
        cluster,
        loss: recon + omega * quant,
        cache: ClusterCache {
            flat,
            nt,
            enc,
            dec,
            nearest,
            omega,
        },
    })
}

/// Gradients of `scale · loss` for the autoencoder and for `T_v`.
///
/// The quantization term pulls only toward the nearest center.
pub fn cluster_backward(
    cache: &ClusterCache,
    ae: &Autoencoder,
    partition: &BlockPartition,
    scale: f64,
    grad: &mut Autoencoder,
) -> Vec<f64> {
    let d_out: Vec<f64> = cache.dec.output().iter().zip(&cache.nt).map(|(d, n)| scale * (d - n)).collect();
    let mut de = ae.decoder.backward(&cache.dec, &d_out, &mut grad.decoder);
    let e = cache.enc.output();
    let c = partition.center(cache.nearest);
    de[0] += scale * 2.0 * cache.omega * (e[0] - c[0]);
    de[1] += scale * 2.0 * cache.omega * (e[1] - c[1]);
    let mut dnt = ae.encoder.backward(&cache.enc, &de, &mut grad.encoder);
    for (g, d) in dnt.iter_mut().zip(&d_out) {
        *g -= d;
    }
    tensor::l2_normalize_backward(&cache.flat, &cache.nt, &dnt)
}
