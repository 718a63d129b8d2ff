//! Versioned model exchange and the two coupled training loops.
//!
//! The policy trainer owns the temporal and policy families, the clustering
//! trainer owns the clustering family. They only meet through immutable
//! snapshots in a [`ModelStore`]: the clustering trainer fetches the temporal
//! model every `fetch_period` iterations, and the policy trainer re-derives
//! cluster assignments from the newest clustering snapshot every iteration.
//!
//! A clustering snapshot carries the `cluster.*` parameters together with the
//! frozen `temporal.*` copy they were trained against, so any reader can map a
//! video to its cluster exactly as the trainer did.
//!
//! [`run_interleaved`] is the deterministic single-threaded schedule;
//! [`run_replay`] re-executes any recorded [`FetchLog`], which is how a
//! concurrent run is reproduced bit for bit.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::cluster::{self, build_block_partition, cluster_backward, cluster_forward, Autoencoder, BlockPartition};
use crate::error::{Error, Result};
use crate::params::{mbgd_step, Gradients, OptimizerState, ParamSet};
use crate::policy::{self, make_policy_target, policy_backward, policy_forward, PolicyHead};
use crate::request::RequestTensor;
use crate::rng::Seed;
use crate::temporal::{self, temporal_forward, PeakIndexSet, PeakScope, TemporalConfig, TemporalParams};
use crate::tensor::Tensor;
use crate::worldgen::LogIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Temporal,
    Clustering,
    Policy,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Temporal, Family::Clustering, Family::Policy];

    pub fn name(self) -> &'static str {
        match self {
            Family::Temporal => "temporal",
            Family::Clustering => "clustering",
            Family::Policy => "policy",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }

    /// Whether this family may carry a parameter of the given name.
    pub fn owns(self, name: &str) -> bool {
        match self {
            Family::Temporal => name.starts_with(temporal::PREFIX),
            Family::Policy => name.starts_with(policy::PREFIX),
            Family::Clustering => name.starts_with(cluster::PREFIX) || name.starts_with(temporal::PREFIX),
        }
    }
}

/// An immutable published model.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub family: Family,
    pub version: u64,
    /// Publisher-supplied clock reading; not part of the model.
    pub tag: u64,
    pub params: ParamSet,
    checksum: u32,
}

impl Snapshot {
    pub fn new(family: Family, version: u64, tag: u64, mut params: ParamSet) -> Self {
        params.set_version(version);
        let checksum = params.checksum();
        Snapshot {
            family,
            version,
            tag,
            params,
            checksum,
        }
    }

    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    pub fn verify(&self) -> Result<()> {
        if self.params.checksum() != self.checksum || self.params.version() != self.version {
            return Err(Error::Checksum(alloc::format!("{} v{}", self.family.name(), self.version)));
        }
        Ok(())
    }
}

/// Publish/fetch seam between the trainers.
///
/// Versions are strictly increasing per family; reads hand out whole snapshots.
pub trait ModelStore {
    fn latest(&self, family: Family) -> Option<Arc<Snapshot>>;
    fn get(&self, family: Family, version: u64) -> Option<Arc<Snapshot>>;
    /// Publish `params` as version `params.version()`.
    fn publish(&self, family: Family, params: ParamSet, tag: u64) -> Result<Arc<Snapshot>>;
}

/// Ownership and monotonicity checks shared by store implementations.
pub fn admit(family: Family, params: ParamSet, latest: Option<u64>, tag: u64) -> Result<Snapshot> {
    if let Some(name) = params.names().find(|n| !family.owns(n)) {
        return Err(Error::config(alloc::format!("{} may not publish `{name}`", family.name())));
    }
    if latest.is_some_and(|v| params.version() <= v) {
        return Err(Error::config(alloc::format!(
            "{} version {} does not advance past {}",
            family.name(),
            params.version(),
            latest.unwrap_or(0)
        )));
    }
    let version = params.version();
    Ok(Snapshot::new(family, version, tag, params))
}

/// Latest snapshot, checksum-verified.
pub fn fetch_latest(store: &dyn ModelStore, family: Family) -> Result<Option<Arc<Snapshot>>> {
    let s = store.latest(family);
    if let Some(s) = &s {
        s.verify()?;
    }
    Ok(s)
}

/// A specific version, checksum-verified.
pub fn fetch_version(store: &dyn ModelStore, family: Family, version: u64) -> Result<Arc<Snapshot>> {
    let s = store
        .get(family, version)
        .ok_or_else(|| Error::config(alloc::format!("{} v{version} is not in the store", family.name())))?;
    s.verify()?;
    Ok(s)
}

/// Single-threaded store keeping every published version.
#[derive(Debug, Default)]
pub struct LocalStore {
    history: RefCell<[Vec<Arc<Snapshot>>; 3]>,
}

impl LocalStore {
    pub fn new() -> Self {
        LocalStore::default()
    }
}

impl ModelStore for LocalStore {
    fn latest(&self, family: Family) -> Option<Arc<Snapshot>> {
        self.history.borrow()[family.slot()].last().cloned()
    }

    fn get(&self, family: Family, version: u64) -> Option<Arc<Snapshot>> {
        let h = self.history.borrow();
        let list = &h[family.slot()];
        list.binary_search_by_key(&version, |s| s.version).ok().map(|i| list[i].clone())
    }

    fn publish(&self, family: Family, params: ParamSet, tag: u64) -> Result<Arc<Snapshot>> {
        let mut h = self.history.borrow_mut();
        let list = &mut h[family.slot()];
        let snap = Arc::new(admit(family, params, list.last().map(|s| s.version), tag)?);
        list.push(snap.clone());
        Ok(snap)
    }
}

/// One video over `D + 1` days starting at absolute day `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video: u64,
    pub start: usize,
    pub upload_day: i64,
    pub x: RequestTensor,
}

impl Sample {
    /// The first `days` days, which the models see.
    pub fn input(&self, days: usize) -> Result<RequestTensor> {
        self.x.day_window(0, days)
    }
}

/// Samples plus the order the trainers visit them in.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDataset {
    samples: Vec<Sample>,
    order: Vec<usize>,
}

impl ReplayDataset {
    /// Visit order is chronological: by start day, then video id.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.x.dims() != first.x.dims()) {
                return Err(Error::config("samples must share tensor dimensions"));
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by_key(|&i| (samples[i].start, samples[i].video));
        Ok(ReplayDataset { samples, order })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.order.iter().map(|&i| &self.samples[i])
    }
}

/// Seeded Fisher–Yates permutation of the visit order.
pub fn shuffle_dataset(ds: &ReplayDataset, seed: Seed) -> Result<ReplayDataset> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = ds.clone();
    out.order.shuffle(&mut seed.rng());
    Ok(out)
}

/// Training samples for every window whose target day precedes `holdout`.
///
/// A video enters a window once it has at least one request in the input
/// days.
pub fn build_dataset(index: &LogIndex, days: usize, holdout: usize) -> Result<ReplayDataset> {
    if holdout < days + 1 || holdout > index.dims()[1] {
        return Err(Error::TooShort {
            needed: days + 1,
            got: holdout,
        });
    }
    let mut samples = Vec::new();
    for start in 0..holdout - days {
        for video in index.videos() {
            let x = index.window(video, start, days + 1)?;
            let active = (0..x.users()).any(|u| (0..days).any(|d| x.series(u, d).iter().any(|&c| c > 0.0)));
            if active {
                samples.push(Sample {
                    video,
                    start,
                    upload_day: index.upload_day(video),
                    x,
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ReplayDataset::new(samples)
}

/// Supplies top-K peak positions for an entity's input window.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSource {
    scope: PeakScope,
    peaks: usize,
    /// Corpus peaks per window start.
    corpus: BTreeMap<usize, PeakIndexSet>,
}

impl PeakSource {
    /// Peaks from the per-(user, day) totals of every video in `totals`.
    pub fn corpus(totals: &RequestTensor, cfg: &TemporalConfig) -> Result<Self> {
        if totals.days() < cfg.days {
            return Err(Error::TooShort {
                needed: cfg.days,
                got: totals.days(),
            });
        }
        let mut corpus = BTreeMap::new();
        for start in 0..=totals.days() - cfg.days {
            corpus.insert(start, PeakIndexSet::from_totals(&totals.day_window(start, cfg.days)?, cfg.peaks)?);
        }
        Ok(PeakSource {
            scope: PeakScope::Corpus,
            peaks: cfg.peaks,
            corpus,
        })
    }

    /// Peaks from whatever tensors share the entity's batch.
    pub fn batch(cfg: &TemporalConfig) -> Self {
        PeakSource {
            scope: PeakScope::Batch,
            peaks: cfg.peaks,
            corpus: BTreeMap::new(),
        }
    }

    pub fn scope(&self) -> PeakScope {
        self.scope
    }

    pub fn for_window<'a>(&'a self, start: usize, batch: &[&RequestTensor]) -> Result<Cow<'a, PeakIndexSet>> {
        match self.scope {
            PeakScope::Corpus => self.corpus.get(&start).map(Cow::Borrowed).ok_or(Error::TooShort {
                needed: start + 1,
                got: self.corpus.len(),
            }),
            PeakScope::Batch => Ok(Cow::Owned(PeakIndexSet::from_members(batch.iter().copied(), self.peaks)?)),
        }
    }
}

/// Architecture shared by training and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub temporal: TemporalConfig,
    pub users: usize,
    pub ae_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub ndh: usize,
    pub budget: usize,
    pub omega: f64,
    /// Intervals of day `D + 1` whose per-user shares form the policy target.
    pub target_window: Vec<usize>,
}

impl ModelConfig {
    pub fn desk(users: usize, target_window: Vec<usize>) -> Self {
        ModelConfig {
            temporal: TemporalConfig::desk(),
            users,
            ae_hidden: alloc::vec![64, 16],
            head_hidden: alloc::vec![32],
            ndh: 2,
            budget: 16,
            omega: 0.1,
            target_window,
        }
    }

    pub fn embedding_len(&self) -> usize {
        self.users * self.temporal.hidden
    }

    pub fn partition(&self) -> Result<BlockPartition> {
        build_block_partition(self.ndh, self.budget)
    }

    pub fn validate(&self) -> Result<()> {
        self.temporal.validate()?;
        if self.users == 0 {
            return Err(Error::config("at least one user is required"));
        }
        if self.target_window.is_empty() || self.target_window.iter().any(|&t| t >= self.temporal.intervals) {
            return Err(Error::config("target window must be a non-empty subset of [0, T)"));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::config("omega must be non-negative"));
        }
        self.partition().map(|_| ())
    }
}

/// Initial parameters of the three families, each at version 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialModels {
    pub temporal: ParamSet,
    pub policy: ParamSet,
    pub clustering: ParamSet,
}

impl InitialModels {
    pub fn new(cfg: &ModelConfig, seed: Seed) -> Result<Self> {
        cfg.validate()?;
        let mut temporal = TemporalParams::init(&cfg.temporal, seed.derive("temporal"))?.to_param_set(&cfg.temporal);
        temporal.set_version(1);
        let mut policy = ParamSet::with_version(1);
        PolicyHead::init(cfg.users, &cfg.temporal, &cfg.head_hidden, seed.derive("policy"))?.write_into(&mut policy);
        policy.set_version(1);
        let mut clustering = ParamSet::new();
        Autoencoder::init(cfg.embedding_len(), &cfg.ae_hidden, seed.derive("autoencoder"))?.write_into(&mut clustering);
        cfg.partition()?.write_into(&mut clustering);
        clustering.set_version(1);
        Ok(InitialModels {
            temporal,
            policy,
            clustering,
        })
    }
}

/// Maps a video's input window to its cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPredictor {
    cfg: TemporalConfig,
    temporal: TemporalParams,
    ae: Autoencoder,
    partition: BlockPartition,
    pub version: u64,
}

impl ClusterPredictor {
    /// From a clustering snapshot (autoencoder, grid and frozen temporal copy).
    pub fn from_param_set(ps: &ParamSet, cfg: &ModelConfig) -> Result<Self> {
        let shape = Autoencoder::init(cfg.embedding_len(), &cfg.ae_hidden, Seed(0))?;
        Ok(ClusterPredictor {
            cfg: cfg.temporal,
            temporal: TemporalParams::from_param_set(ps, &cfg.temporal)?,
            ae: shape.load(ps)?,
            partition: BlockPartition::from_param_set(ps)?,
            version: ps.version(),
        })
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    /// `T_v` of one video's input window.
    pub fn embed(&self, input: &RequestTensor, peaks: &PeakIndexSet) -> Result<Tensor> {
        Ok(temporal_forward(&input.l2_normalized(), &self.cfg, &self.temporal, peaks)?.0)
    }

    /// Cluster index and encoder output.
    pub fn assign(&self, input: &RequestTensor, peaks: &PeakIndexSet) -> Result<(usize, [f64; 2])> {
        let t = self.embed(input, peaks)?;
        let nt = crate::tensor::l2_normalize(&t);
        let e = self.ae.encode(nt.data());
        Ok((cluster::assign_cluster(e, &self.partition)?, e))
    }
}

/// The three trained families, ready for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub config: ModelConfig,
    pub temporal: TemporalParams,
    pub head: PolicyHead,
    pub predictor: ClusterPredictor,
}

impl Models {
    pub fn from_param_sets(cfg: &ModelConfig, temporal: &ParamSet, policy: &ParamSet, clustering: &ParamSet) -> Result<Self> {
        let shape = PolicyHead::init(cfg.users, &cfg.temporal, &cfg.head_hidden, Seed(0))?;
        Ok(Models {
            config: cfg.clone(),
            temporal: TemporalParams::from_param_set(temporal, &cfg.temporal)?,
            head: shape.load(policy)?,
            predictor: ClusterPredictor::from_param_set(clustering, cfg)?,
        })
    }

    /// `UP` for one accumulated input window.
    pub fn user_probabilities(&self, xa: &RequestTensor, peaks: &PeakIndexSet) -> Result<Vec<f64>> {
        Ok(policy_forward(xa, &self.config.temporal, &self.temporal, &self.head, peaks)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub policy_batch: usize,
    pub cluster_batch: usize,
    pub policy_iterations: u64,
    pub cluster_iterations: u64,
    /// Cluster iterations between temporal fetches; `u64::MAX` never refreshes.
    pub fetch_period: u64,
    /// Policy iterations before the clustering trainer starts.
    pub warmup: u64,
    pub temporal_rate: f64,
    pub head_rate: f64,
    pub ae_rate: f64,
    pub decay: f64,
    /// Visit order: seeded reshuffle per epoch, or chronological date halves.
    pub shuffle: bool,
    pub seed: Seed,
    pub divergence_limit: f64,
}

impl TrainConfig {
    pub fn desk(seed: Seed) -> Self {
        TrainConfig {
            policy_batch: 64,
            cluster_batch: 20,
            policy_iterations: 5_000,
            cluster_iterations: 10_000,
            fetch_period: 200,
            warmup: 200,
            temporal_rate: 2.0,
            head_rate: 1.0,
            ae_rate: 0.05,
            decay: 1.0,
            shuffle: true,
            seed,
            divergence_limit: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy_batch == 0 || self.cluster_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.fetch_period == 0 {
            return Err(Error::config("fetch period must be at least 1"));
        }
        if self.warmup > self.policy_iterations {
            return Err(Error::config("warmup exceeds policy iterations"));
        }
        for r in [self.temporal_rate, self.head_rate, self.ae_rate] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::config("learning rates must be finite and non-negative"));
            }
        }
        OptimizerState::new(self.head_rate, self.decay).map(|_| ())
    }
}

/// One row of a loss trace; versions are 0 where a family was not involved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub loss: f64,
    pub temporal_version: u64,
    pub clustering_version: u64,
    pub policy_version: u64,
}

fn guard(iteration: u64, loss: f64, limit: f64) -> Result<()> {
    if !loss.is_finite() || loss > limit {
        return Err(Error::Divergence { iteration, loss });
    }
    Ok(())
}

/// Cyclic visit order over a subset of the dataset, reshuffled per epoch.
#[derive(Debug, Clone, PartialEq)]
struct Cursor {
    pool: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: Option<Seed>,
}

impl Cursor {
    fn new(pool: Vec<usize>, seed: Option<Seed>) -> Self {
        let mut c = Cursor {
            pool,
            pos: 0,
            epoch: 0,
            seed,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        if let Some(s) = self.seed {
            self.pool.sort_unstable();
            self.pool.shuffle(&mut s.index(self.epoch).rng());
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if n >= self.pool.len() {
            out.extend_from_slice(&self.pool);
            return out;
        }
        while out.len() < n {
            if self.pos == self.pool.len() {
                self.pos = 0;
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.pool[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Where the policy trainer's cluster indices come from.
pub enum Assignment<'a> {
    /// Seeded uniform index per video, before any clustering snapshot exists.
    Random { seed: Seed, clusters: usize },
    Predictor(&'a ClusterPredictor),
    Fixed(&'a dyn Fn(&Sample) -> usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub entities: usize,
}

/// Owner of the temporal and policy families.
#[derive(Debug, Clone)]
pub struct PolicyTrainer {
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    params: ParamSet,
    temporal: TemporalParams,
    head: PolicyHead,
    opt: OptimizerState,
    iteration: u64,
    first_half: Cursor,
    second_half: Option<Cursor>,
    pub trace: Vec<TraceRow>,
}

impl PolicyTrainer {
    pub fn new(mcfg: &ModelConfig, tcfg: &TrainConfig, ds: &ReplayDataset, temporal: &ParamSet, policy: &ParamSet) -> Result<Self> {
        tcfg.validate()?;
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if temporal.version() != policy.version() {
            return Err(Error::config("temporal and policy versions must match"));
        }
        let mut params = temporal.clone();
        params.merge_from(policy);
        params.set_version(temporal.version());
        let head = PolicyHead::init(mcfg.users, &mcfg.temporal, &mcfg.head_hidden, Seed(0))?.load(&params)?;
        let order = ds.order().to_vec();
        let (first_half, second_half) = if tcfg.shuffle {
            (Cursor::new(order, Some(tcfg.seed.derive("policy-order"))), None)
        } else {
            let mid = order.len() / 2;
            (Cursor::new(order[..mid.max(1)].to_vec(), None), Some(Cursor::new(order[mid..].to_vec(), None)))
        };
        Ok(PolicyTrainer {
            temporal: TemporalParams::from_param_set(&params, &mcfg.temporal)?,
            head,
            opt: OptimizerState::new(tcfg.head_rate, tcfg.decay)?.with_rate(temporal::PREFIX, tcfg.temporal_rate),
            params,
            mcfg: mcfg.clone(),
            tcfg: tcfg.clone(),
            iteration: 0,
            first_half,
            second_half,
            trace: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn version(&self) -> u64 {
        self.params.version()
    }

    pub fn temporal_params(&self) -> ParamSet {
        let mut p = self.params.subset(temporal::PREFIX);
        p.set_version(self.version());
        p
    }

    pub fn policy_params(&self) -> ParamSet {
        let mut p = self.params.subset(policy::PREFIX);
        p.set_version(self.version());
        p
    }

    /// Iteration at which the unshuffled schedule moves to the later half.
    pub fn switch_iteration(&self) -> Option<u64> {
        self.second_half.as_ref().map(|_| self.tcfg.policy_iterations / 2)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.tcfg.policy_batch;
        let late = self.switch_iteration().is_some_and(|at| self.iteration >= at);
        match &mut self.second_half {
            Some(second) if late => second.take(b),
            _ => self.first_half.take(b),
        }
    }

    /// Draw a batch, accumulate by cluster, and take one MBGD step on the
    /// temporal and policy parameters.
    pub fn step(&mut self, ds: &ReplayDataset, peaks: &PeakSource, assignment: Assignment<'_>, clustering_version: u64) -> Result<StepReport> {
        let batch = self.next_batch();
        let days = self.mcfg.temporal.days;

        let mut inputs = BTreeMap::new();
        let mut entities: BTreeMap<(usize, usize), RequestTensor> = BTreeMap::new();
        for &i in &batch {
            let s = &ds.samples()[i];
            let input = s.input(days)?;
            let c = match &assignment {
                Assignment::Random { seed, clusters } => seed.index(s.video).rng().random_range(0..*clusters),
                Assignment::Fixed(f) => f(s),
                Assignment::Predictor(p) => {
                    let pk = peaks.for_window(s.start, &[&input])?;
                    p.assign(&input, &pk)?.0
                }
            };
            inputs.entry(s.start).or_insert_with(Vec::new).push(input);
            match entities.get_mut(&(s.start, c)) {
                Some(acc) => acc.add_assign(&s.x)?,
                None => {
                    entities.insert((s.start, c), s.x.clone());
                }
            }
        }

        let mut work = Vec::new();
        for (&(start, _), full) in &entities {
            if let Some(target) = make_policy_target(full, days, &self.mcfg.target_window) {
                work.push((start, full.day_window(0, days)?, target));
            }
        }
        if work.is_empty() {
            return Err(Error::EmptyTrainingSignal);
        }
        let n = work.len() as f64;
        let mut g_temporal = TemporalParams::zeros(&self.mcfg.temporal);
        let mut g_head = self.head.zeros_like();
        let mut loss = 0.0;
        for (start, xa, target) in &work {
            let members: Vec<&RequestTensor> = inputs[start].iter().collect();
            let pk = peaks.for_window(*start, &members)?;
            let (up, cache) = policy_forward(xa, &self.mcfg.temporal, &self.temporal, &self.head, &pk)?;
            let d: Vec<f64> = up.iter().zip(target).map(|(p, r)| p - r).collect();
            loss += 0.5 * crate::tensor::dot(&d, &d) / n;
            let d_up: Vec<f64> = d.iter().map(|x| x / n).collect();
            policy_backward(&cache, &d_up, &self.temporal, &self.head, &mut g_temporal, &mut g_head)?;
        }
        guard(self.iteration, loss, self.tcfg.divergence_limit)?;

        let mut grads: Gradients = g_temporal.to_gradients(&self.mcfg.temporal);
        grads.extend(g_head.to_gradients());
        self.params = mbgd_step(&self.params, &grads, &mut self.opt)?;
        self.temporal = TemporalParams::from_param_set(&self.params, &self.mcfg.temporal)?;
        self.head = self.head.load(&self.params)?;
        self.iteration += 1;
        self.trace.push(TraceRow {
            iteration: self.iteration,
            loss,
            temporal_version: self.version(),
            clustering_version,
            policy_version: self.version(),
        });
        Ok(StepReport {
            loss,
            entities: work.len(),
        })
    }
}

/// Owner of the clustering family; trains the autoencoder against a frozen
/// temporal copy.
#[derive(Debug, Clone)]
pub struct ClusterTrainer {
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    params: ParamSet,
    ae: Autoencoder,
    partition: BlockPartition,
    temporal: Option<(TemporalParams, ParamSet)>,
    opt: OptimizerState,
    iteration: u64,
    cursor: Cursor,
    pub trace: Vec<TraceRow>,
}

impl ClusterTrainer {
    pub fn new(mcfg: &ModelConfig, tcfg: &TrainConfig, ds: &ReplayDataset, clustering: &ParamSet) -> Result<Self> {
        tcfg.validate()?;
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let own = clustering.subset(cluster::PREFIX);
        let ae = Autoencoder::init(mcfg.embedding_len(), &mcfg.ae_hidden, Seed(0))?.load(&own)?;
        let partition = BlockPartition::from_param_set(&own)?;
        if partition != mcfg.partition()? {
            return Err(Error::config("stored partition does not match the model configuration"));
        }
        // A resumed snapshot may carry its temporal copy.
        let temporal = TemporalParams::from_param_set(clustering, &mcfg.temporal).ok().map(|t| (t, clustering.subset(temporal::PREFIX)));
        let mut params = own;
        params.set_version(clustering.version());
        Ok(ClusterTrainer {
            mcfg: mcfg.clone(),
            tcfg: tcfg.clone(),
            params,
            ae,
            partition,
            temporal,
            opt: OptimizerState::new(tcfg.ae_rate, tcfg.decay)?,
            iteration: 0,
            cursor: Cursor::new(ds.order().to_vec(), Some(tcfg.seed.derive("cluster-order"))),
            trace: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn version(&self) -> u64 {
        self.params.version()
    }

    /// Version of the temporal copy in use, 0 before the first fetch.
    pub fn temporal_version(&self) -> u64 {
        self.temporal.as_ref().map_or(0, |(_, p)| p.version())
    }

    /// Whether the next iteration is scheduled to refresh the temporal copy.
    pub fn fetch_due(&self) -> bool {
        self.temporal.is_none() || (self.iteration % self.tcfg.fetch_period == 0 && self.tcfg.fetch_period != u64::MAX)
    }

    /// Replace the frozen temporal copy; the autoencoder is untouched.
    pub fn install_temporal(&mut self, snapshot: &Snapshot) -> Result<()> {
        if snapshot.family != Family::Temporal {
            return Err(Error::config("expected a temporal snapshot"));
        }
        snapshot.verify()?;
        let t = TemporalParams::from_param_set(&snapshot.params, &self.mcfg.temporal)?;
        self.temporal = Some((t, snapshot.params.clone()));
        Ok(())
    }

    /// Clustering snapshot contents: own parameters plus the temporal copy.
    pub fn snapshot_params(&self) -> ParamSet {
        let mut p = self.params.clone();
        if let Some((_, t)) = &self.temporal {
            p.merge_from(t);
        }
        p.set_version(self.version());
        p
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.ae
    }

    pub fn step(&mut self, ds: &ReplayDataset, peaks: &PeakSource) -> Result<StepReport> {
        let Some((temporal, tps)) = &self.temporal else {
            return Err(Error::config("clustering trainer has no temporal model"));
        };
        let batch = self.cursor.take(self.tcfg.cluster_batch);
        let days = self.mcfg.temporal.days;
        let inputs: Vec<(usize, RequestTensor)> = batch
            .iter()
            .map(|&i| {
                let s = &ds.samples()[i];
                Ok((s.start, s.input(days)?))
            })
            .collect::<Result<_>>()?;
        let n = inputs.len() as f64;
        let mut grad = self.ae.zeros_like();
        let mut loss = 0.0;
        for (start, x) in &inputs {
            let members: Vec<&RequestTensor> = inputs.iter().filter(|(s, _)| s == start).map(|(_, t)| t).collect();
            let pk = peaks.for_window(*start, &members)?;
            let (t_v, _) = temporal_forward(&x.l2_normalized(), &self.mcfg.temporal, temporal, &pk)?;
            let out = cluster_forward(&t_v, &self.ae, &self.partition, self.mcfg.omega)?;
            loss += out.loss / n;
            cluster_backward(&out.cache, &self.ae, &self.partition, 1.0 / n, &mut grad);
        }
        guard(self.iteration, loss, self.tcfg.divergence_limit)?;
        self.params = mbgd_step(&self.params, &grad.to_gradients(), &mut self.opt)?;
        self.ae = self.ae.load(&self.params)?;
        self.iteration += 1;
        let tv = tps.version();
        self.trace.push(TraceRow {
            iteration: self.iteration,
            loss,
            temporal_version: tv,
            clustering_version: self.version(),
            policy_version: 0,
        });
        Ok(StepReport {
            loss,
            entities: inputs.len(),
        })
    }
}

/// Which snapshot versions each loop consumed, per iteration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FetchLog {
    /// Clustering version used by each policy iteration; `None` is random.
    pub policy: Vec<Option<u64>>,
    /// Temporal version fetched before each cluster iteration, if any.
    pub cluster: Vec<Option<u64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub temporal: Arc<Snapshot>,
    pub policy: Arc<Snapshot>,
    pub clustering: Option<Arc<Snapshot>>,
    pub policy_trace: Vec<TraceRow>,
    pub cluster_trace: Vec<TraceRow>,
    pub fetch_log: FetchLog,
    /// Iteration where an unshuffled run switches date halves.
    pub switch_iteration: Option<u64>,
}

/// Everything a run needs besides the store.
pub struct TrainJob<'a> {
    pub dataset: &'a ReplayDataset,
    pub peaks: &'a PeakSource,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub init: &'a InitialModels,
}

impl TrainJob<'_> {
    pub fn policy_trainer(&self) -> Result<PolicyTrainer> {
        PolicyTrainer::new(self.model, self.train, self.dataset, &self.init.temporal, &self.init.policy)
    }

    pub fn cluster_trainer(&self) -> Result<ClusterTrainer> {
        ClusterTrainer::new(self.model, self.train, self.dataset, &self.init.clustering)
    }

    /// Seed of the pre-clustering random assignment.
    pub fn random_assignment(&self) -> Result<Assignment<'static>> {
        Ok(Assignment::Random {
            seed: self.train.seed.derive("warmup-assignment"),
            clusters: self.model.partition()?.cluster_count(),
        })
    }

    /// One policy iteration against the given clustering snapshot.
    pub fn policy_step(&self, trainer: &mut PolicyTrainer, clustering: Option<&Snapshot>) -> Result<StepReport> {
        match clustering {
            None => trainer.step(self.dataset, self.peaks, self.random_assignment()?, 0),
            Some(s) => {
                let p = ClusterPredictor::from_param_set(&s.params, self.model)?;
                trainer.step(self.dataset, self.peaks, Assignment::Predictor(&p), s.version)
            }
        }
    }
}

/// Publish the policy trainer's temporal and policy families.
pub fn publish_policy(store: &dyn ModelStore, p: &PolicyTrainer, tag: u64) -> Result<(Arc<Snapshot>, Arc<Snapshot>)> {
    Ok((
        store.publish(Family::Temporal, p.temporal_params(), tag)?,
        store.publish(Family::Policy, p.policy_params(), tag)?,
    ))
}

/// Gather the latest snapshots and both traces once the loops are done.
pub fn collect_outcome(store: &dyn ModelStore, p: PolicyTrainer, c: ClusterTrainer, log: FetchLog) -> Result<TrainOutcome> {
    let missing = || Error::config("model family never published");
    Ok(TrainOutcome {
        temporal: fetch_latest(store, Family::Temporal)?.ok_or_else(missing)?,
        policy: fetch_latest(store, Family::Policy)?.ok_or_else(missing)?,
        clustering: fetch_latest(store, Family::Clustering)?,
        switch_iteration: p.switch_iteration(),
        policy_trace: p.trace,
        cluster_trace: c.trace,
        fetch_log: log,
    })
}

/// Deterministic schedule: `warmup` policy iterations on random clusters, then
/// cluster iterations spread evenly between the remaining policy iterations.
pub fn run_interleaved(job: &TrainJob<'_>, store: &dyn ModelStore) -> Result<TrainOutcome> {
    let mut policy = job.policy_trainer()?;
    let mut clusterer = job.cluster_trainer()?;
    let mut log = FetchLog::default();
    let tcfg = job.train;
    let mut tick = 0u64;
    publish_policy(store, &policy, tick)?;

    let cluster_step = |clusterer: &mut ClusterTrainer, log: &mut FetchLog, tick: u64| -> Result<()> {
        let fetched = if clusterer.fetch_due() {
            let t = fetch_latest(store, Family::Temporal)?.ok_or(Error::config("no temporal snapshot"))?;
            clusterer.install_temporal(&t)?;
            Some(t.version)
        } else {
            None
        };
        log.cluster.push(fetched);
        clusterer.step(job.dataset, job.peaks)?;
        store.publish(Family::Clustering, clusterer.snapshot_params(), tick)?;
        Ok(())
    };

    let main = tcfg.policy_iterations - tcfg.warmup;
    while policy.iteration() < tcfg.policy_iterations {
        tick += 1;
        let clustering = fetch_latest(store, Family::Clustering)?;
        log.policy.push(clustering.as_ref().map(|s| s.version));
        job.policy_step(&mut policy, clustering.as_deref())?;
        publish_policy(store, &policy, tick)?;
        if policy.iteration() > tcfg.warmup {
            let done = policy.iteration() - tcfg.warmup;
            let due = (u128::from(done) * u128::from(tcfg.cluster_iterations) / u128::from(main.max(1))) as u64;
            while clusterer.iteration() < due.min(tcfg.cluster_iterations) {
                cluster_step(&mut clusterer, &mut log, tick)?;
            }
        }
    }
    while clusterer.iteration() < tcfg.cluster_iterations {
        tick += 1;
        cluster_step(&mut clusterer, &mut log, tick)?;
    }
    collect_outcome(store, policy, clusterer, log)
}

/// Re-execute a recorded fetch schedule sequentially.
///
/// Each loop advances as soon as the versions it consumed are available;
/// `store` must start empty.
pub fn run_replay(job: &TrainJob<'_>, store: &dyn ModelStore, log: &FetchLog) -> Result<TrainOutcome> {
    let mut policy = job.policy_trainer()?;
    let mut clusterer = job.cluster_trainer()?;
    let (np, nc) = (log.policy.len() as u64, log.cluster.len() as u64);
    let mut tick = 0u64;
    publish_policy(store, &policy, tick)?;
    while policy.iteration() < np || clusterer.iteration() < nc {
        tick += 1;
        let mut progressed = false;
        if policy.iteration() < np {
            let need = log.policy[policy.iteration() as usize];
            let ready = need.is_none_or(|v| clusterer.version() >= v && clusterer.iteration() > 0);
            if ready {
                let snap = need.map(|v| fetch_version(store, Family::Clustering, v)).transpose()?;
                job.policy_step(&mut policy, snap.as_deref())?;
                publish_policy(store, &policy, tick)?;
                progressed = true;
            }
        }
        if clusterer.iteration() < nc {
            let need = log.cluster[clusterer.iteration() as usize];
            if need.is_none_or(|v| policy.version() >= v) {
                if let Some(v) = need {
                    clusterer.install_temporal(&*fetch_version(store, Family::Temporal, v)?)?;
                }
                clusterer.step(job.dataset, job.peaks)?;
                store.publish(Family::Clustering, clusterer.snapshot_params(), tick)?;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::config("fetch log references versions that are never produced"));
        }
    }
    collect_outcome(store, policy, clusterer, log.clone())
}

/// Mean of `xs[from..to]`.
pub fn window_mean(xs: &[f64], from: usize, to: usize) -> f64 {
    let s = &xs[from.min(xs.len())..to.min(xs.len())];
    if s.is_empty() {
        return f64::NAN;
    }
    s.iter().sum::<f64>() / s.len() as f64
}

/// Relative jump of the loss at `at`: mean of the `w` values after over the
/// mean of the `w` values before, minus one.
pub fn loss_jump(losses: &[f64], at: usize, w: usize) -> f64 {
    window_mean(losses, at, at + w) / window_mean(losses, at.saturating_sub(w), at) - 1.0
}

/// Non-overlapping windowed means.
pub fn windowed_means(losses: &[f64], w: usize) -> Vec<f64> {
    losses.chunks(w.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, WorldConfig};
    use alloc::vec;

    fn small_setup(seed: u64) -> (ReplayDataset, PeakSource, ModelConfig, TrainConfig, InitialModels) {
        let wcfg = WorldConfig {
            users: 3,
            cdns: 1,
            serving: vec![vec![0]; 3],
            videos: 40,
            days: 5,
            intervals: 8,
            peak_window: vec![6, 7],
            daily_uploads: 4,
            profiles: 3,
            daily_requests: 300.0,
            ..WorldConfig::reference(Seed(seed))
        };
        let world = generate_world(&wcfg).unwrap();
        let idx = LogIndex::new(&world.log);
        let tc = TemporalConfig::new(8, 2, 2, 3, (2, 4), (4, 2), (1, 2), (2, 2), 3).unwrap();
        let mcfg = ModelConfig {
            temporal: tc,
            users: 3,
            ae_hidden: vec![4],
            head_hidden: vec![],
            ndh: 2,
            budget: 16,
            omega: 0.1,
            target_window: vec![6, 7],
        };
        let ds = build_dataset(&idx, 2, 5).unwrap();
        let peaks = PeakSource::corpus(&idx.totals(), &tc).unwrap();
        let tcfg = TrainConfig {
            policy_batch: 8,
            cluster_batch: 4,
            policy_iterations: 30,
            cluster_iterations: 50,
            fetch_period: 7,
            warmup: 5,
            ..TrainConfig::desk(Seed(seed))
        };
        let init = InitialModels::new(&mcfg, Seed(seed)).unwrap();
        (ds, peaks, mcfg, tcfg, init)
    }

    #[test]
    fn store_is_monotone_and_checks_ownership() {
        let store = LocalStore::new();
        let mut p = ParamSet::with_version(1);
        p.insert("temporal.x", Tensor::scalar(1.0));
        p.set_version(1);
        store.publish(Family::Temporal, p.clone(), 0).unwrap();
        assert!(store.publish(Family::Temporal, p.clone(), 1).is_err());
        p.set_version(2);
        assert!(store.publish(Family::Policy, p.clone(), 1).is_err());
        store.publish(Family::Temporal, p, 1).unwrap();
        assert_eq!(store.latest(Family::Temporal).unwrap().version, 2);
        assert_eq!(store.get(Family::Temporal, 1).unwrap().version, 1);
        assert!(store.latest(Family::Clustering).is_none());
    }

    #[test]
    fn tampered_snapshot_fails_verification() {
        let mut p = ParamSet::new();
        p.insert("temporal.x", Tensor::scalar(1.0));
        let mut s = Snapshot::new(Family::Temporal, 3, 0, p);
        s.verify().unwrap();
        s.params.nudge("temporal.x", 0, 1e-12);
        assert!(matches!(s.verify(), Err(Error::Checksum(_))));
    }

    fn toy_samples(n: usize) -> ReplayDataset {
        let samples = (0..n)
            .map(|v| Sample {
                video: v as u64,
                start: 0,
                upload_day: 0,
                x: RequestTensor::from_vec(1, 1, 1, vec![v as f64]).unwrap(),
            })
            .collect();
        ReplayDataset::new(samples).unwrap()
    }

    #[test]
    fn shuffle_examples() {
        let one = toy_samples(1);
        assert_eq!(shuffle_dataset(&one, Seed(5)).unwrap().order(), &[0]);
        let three = toy_samples(3);
        let a = shuffle_dataset(&three, Seed(42)).unwrap();
        assert_eq!(a, shuffle_dataset(&three, Seed(42)).unwrap());
        // Pinned from a reference run.
        assert_eq!(a.order(), &[2, 1, 0]);
        assert_eq!(a.samples(), three.samples());
        assert_eq!(shuffle_dataset(&toy_samples(0), Seed(1)), Err(Error::EmptyDataset));
    }

    #[test]
    fn zero_rate_gives_constant_loss() {
        let (ds, peaks, mcfg, mut tcfg, init) = small_setup(1);
        tcfg.policy_batch = ds.len();
        tcfg.temporal_rate = 0.0;
        tcfg.head_rate = 0.0;
        let mut t = PolicyTrainer::new(&mcfg, &tcfg, &ds, &init.temporal, &init.policy).unwrap();
        let fixed = |s: &Sample| (s.video % 3) as usize;
        let losses: Vec<f64> = (0..5).map(|_| t.step(&ds, &peaks, Assignment::Fixed(&fixed), 0).unwrap().loss).collect();
        assert!(losses.iter().all(|&l| l.to_bits() == losses[0].to_bits()));
    }

    #[test]
    fn single_cluster_toy_reaches_zero_loss() {
        // Two users, fixed request pattern, target shares (0.7, 0.3).
        let tc = TemporalConfig::new(8, 2, 2, 3, (2, 4), (4, 2), (1, 2), (2, 2), 3).unwrap();
        let mcfg = ModelConfig {
            temporal: tc,
            users: 2,
            ae_hidden: vec![4],
            head_hidden: vec![],
            ndh: 2,
            budget: 16,
            omega: 0.1,
            target_window: vec![6, 7],
        };
        let mut data = vec![0.0; 2 * 3 * 8];
        for (k, x) in data.iter_mut().enumerate() {
            *x = ((k * 7) % 5) as f64;
        }
        // Day 2 peak window: user 0 -> 7 requests, user 1 -> 3.
        for (u, c) in [(0usize, 7.0), (1, 3.0)] {
            let o = (u * 3 + 2) * 8;
            data[o + 6] = c;
            data[o + 7] = 0.0;
        }
        let x = RequestTensor::from_vec(2, 3, 8, data).unwrap();
        let ds = ReplayDataset::new(vec![Sample { video: 0, start: 0, upload_day: 0, x: x.clone() }]).unwrap();
        let peaks = PeakSource::corpus(&x, &tc).unwrap();
        let tcfg = TrainConfig {
            policy_batch: 1,
            temporal_rate: 0.5,
            head_rate: 0.5,
            ..TrainConfig::desk(Seed(3))
        };
        let init = InitialModels::new(&mcfg, Seed(3)).unwrap();
        let mut t = PolicyTrainer::new(&mcfg, &tcfg, &ds, &init.temporal, &init.policy).unwrap();
        let zero = |_: &Sample| 0usize;
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            last = t.step(&ds, &peaks, Assignment::Fixed(&zero), 0).unwrap().loss;
        }
        assert!(last < 1e-6, "final loss {last}");
    }

    #[test]
    fn frozen_temporal_when_never_fetched() {
        let (ds, peaks, mcfg, mut tcfg, init) = small_setup(2);
        tcfg.fetch_period = u64::MAX;
        let job = TrainJob {
            dataset: &ds,
            peaks: &peaks,
            model: &mcfg,
            train: &tcfg,
            init: &init,
        };
        let out = run_interleaved(&job, &LocalStore::new()).unwrap();
        let fetched: Vec<u64> = out.fetch_log.cluster.iter().flatten().copied().collect();
        assert_eq!(fetched.len(), 1);
        assert!(out.cluster_trace.iter().all(|r| r.temporal_version == fetched[0]));
    }

    #[test]
    fn temporal_refresh_keeps_autoencoder() {
        let (ds, peaks, mcfg, tcfg, init) = small_setup(3);
        let mut c = ClusterTrainer::new(&mcfg, &tcfg, &ds, &init.clustering).unwrap();
        c.install_temporal(&Snapshot::new(Family::Temporal, 1, 0, init.temporal.clone())).unwrap();
        c.step(&ds, &peaks).unwrap();
        let ae = c.autoencoder().clone();
        let other = InitialModels::new(&mcfg, Seed(99)).unwrap();
        c.install_temporal(&Snapshot::new(Family::Temporal, 2, 0, other.temporal)).unwrap();
        assert_eq!(c.autoencoder(), &ae);
        assert_eq!(c.temporal_version(), 2);
        assert!(c.snapshot_params().names().all(|n| Family::Clustering.owns(n)));
    }

    #[test]
    fn interleaved_is_reproducible_and_replayable() {
        let (ds, peaks, mcfg, tcfg, init) = small_setup(4);
        let job = TrainJob {
            dataset: &ds,
            peaks: &peaks,
            model: &mcfg,
            train: &tcfg,
            init: &init,
        };
        let a = run_interleaved(&job, &LocalStore::new()).unwrap();
        let b = run_interleaved(&job, &LocalStore::new()).unwrap();
        assert_eq!(a.policy_trace, b.policy_trace);
        assert_eq!(a.temporal.params, b.temporal.params);
        assert_eq!(a.fetch_log.policy.len(), 30);
        assert_eq!(a.fetch_log.cluster.len(), 50);
        assert!(a.fetch_log.policy[..5].iter().all(Option::is_none));
        assert!(a.fetch_log.policy[6..].iter().all(Option::is_some));

        let r = run_replay(&job, &LocalStore::new(), &a.fetch_log).unwrap();
        assert_eq!(r.temporal.params, a.temporal.params);
        assert_eq!(r.policy.params, a.policy.params);
        assert_eq!(r.clustering.as_ref().unwrap().params, a.clustering.as_ref().unwrap().params);
        assert_eq!(r.policy_trace, a.policy_trace);
        assert_eq!(r.cluster_trace, a.cluster_trace);
        assert!(a.policy_trace.iter().chain(&a.cluster_trace).all(|r| r.loss.is_finite()));
    }

    #[test]
    fn divergence_guard_trips() {
        assert!(guard(3, f64::NAN, 1e6).is_err());
        assert_eq!(guard(3, 2e6, 1e6), Err(Error::Divergence { iteration: 3, loss: 2e6 }));
        assert!(guard(3, 5.0, 1e6).is_ok());
    }

    #[test]
    fn loss_jump_measures_relative_change() {
        let xs = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        assert!((loss_jump(&xs, 3, 3) - 1.0).abs() < 1e-15);
        assert_eq!(windowed_means(&xs, 3), vec![1.0, 2.0]);
    }
}
