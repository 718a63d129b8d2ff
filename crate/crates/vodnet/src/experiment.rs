//! End-to-end runs on a generated world: dataset, training, prediction,
//! dispatch and evaluation against the held-out day.

use std::collections::BTreeMap;

use vodnet_core::dispatch::{self, Candidate, ClusterMatrix, Dispatch, DispatchPlan, EvalReport, Topology};
use vodnet_core::policy::accumulate_by_cluster;
use vodnet_core::temporal::PeakScope;
use vodnet_core::trainer::{build_dataset, InitialModels, ModelConfig, Models, PeakSource, ReplayDataset, TrainConfig, TrainJob};
use vodnet_core::worldgen::{cluster_quality_report, generate_world, stationarity_report, ClusterMember, ClusterQuality, LogIndex, RequestLog, StationarityReport, WorldConfig};
use vodnet_core::{RequestTensor, Result};

/// A world split into training days and one held-out day.
pub struct Experiment {
    pub world: WorldConfig,
    pub log: RequestLog,
    pub index: LogIndex,
    /// First day the models never see; evaluation runs on it.
    pub holdout: usize,
    pub model: ModelConfig,
    pub dataset: ReplayDataset,
    pub peaks: PeakSource,
    pub topology: Topology,
}

/// One video's view at prediction time.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub video: u64,
    pub cluster: usize,
    pub encoding: [f64; 2],
    pub input: RequestTensor,
}

impl Experiment {
    /// Generate the world and the training set for days before `holdout`.
    pub fn new(world_cfg: &WorldConfig, model: ModelConfig, holdout: usize, scope: PeakScope, budget: usize, capacity: f64) -> Result<Self> {
        let world = generate_world(world_cfg)?;
        Experiment::from_log(world.config, world.log, model, holdout, scope, budget, capacity)
    }

    /// Wrap an existing log; `world` supplies the topology and the peak window.
    pub fn from_log(world: WorldConfig, log: RequestLog, model: ModelConfig, holdout: usize, scope: PeakScope, budget: usize, capacity: f64) -> Result<Self> {
        model.validate()?;
        if log.users != world.users || log.intervals != world.intervals || holdout >= log.days || holdout < model.temporal.days {
            return Err(vodnet_core::Error::config("log dimensions do not match the world configuration and holdout day"));
        }
        let index = LogIndex::new(&log);
        let dataset = build_dataset(&index, model.temporal.days, holdout)?;
        let peaks = match scope {
            PeakScope::Corpus => PeakSource::corpus(&index.totals().day_window(0, holdout)?, &model.temporal)?,
            PeakScope::Batch => PeakSource::batch(&model.temporal),
        };
        let cfg = &world;
        let topology = Topology::new(cfg.users, cfg.cdns, cfg.serving.clone(), vec![budget; cfg.cdns], vec![capacity; cfg.cdns])?;
        Ok(Experiment {
            world,
            log,
            index,
            holdout,
            model,
            dataset,
            peaks,
            topology,
        })
    }

    pub fn job<'a>(&'a self, train: &'a TrainConfig, init: &'a InitialModels) -> TrainJob<'a> {
        TrainJob {
            dataset: &self.dataset,
            peaks: &self.peaks,
            model: &self.model,
            train,
            init,
        }
    }

    /// First day of the input window that predicts the held-out day.
    pub fn eval_start(&self) -> usize {
        self.holdout - self.model.temporal.days
    }

    /// Cluster every video with requests in the evaluation input window.
    pub fn predict_clusters(&self, models: &Models) -> Result<Vec<Prediction>> {
        let days = self.model.temporal.days;
        let start = self.eval_start();
        let mut out = Vec::new();
        for video in self.index.videos() {
            let input = self.index.window(video, start, days)?;
            if input.total() <= 0.0 {
                continue;
            }
            let pk = self.peaks.for_window(start, &[&input])?;
            let (cluster, encoding) = models.predictor.assign(&input, &pk)?;
            out.push(Prediction {
                video,
                cluster,
                encoding,
                input,
            });
        }
        Ok(out)
    }

    /// `UP` per cluster from the accumulated evaluation inputs.
    pub fn user_probabilities(&self, models: &Models, predictions: &[Prediction]) -> Result<ClusterMatrix> {
        let assignment: BTreeMap<u64, usize> = predictions.iter().map(|p| (p.video, p.cluster)).collect();
        let xa = accumulate_by_cluster(predictions.iter().map(|p| (p.video, &p.input)), |v| assignment.get(&v).copied())?;
        let members: Vec<&RequestTensor> = predictions.iter().map(|p| &p.input).collect();
        let pk = self.peaks.for_window(self.eval_start(), &members)?;
        xa.iter().map(|(&c, x)| Ok((c, models.user_probabilities(x, &pk)?))).collect()
    }

    /// Clustering predictor → policy predictor → CP → ranked plan.
    pub fn learned_plan(&self, models: &Models) -> Result<(DispatchPlan, Vec<Prediction>)> {
        let predictions = self.predict_clusters(models)?;
        let up = self.user_probabilities(models, &predictions)?;
        let cp = dispatch::compute_cp(&up, &self.topology)?;
        let candidates: Vec<Candidate> = predictions
            .iter()
            .map(|p| Candidate {
                video: p.video,
                cluster: p.cluster,
                upload_time: self.index.upload_day(p.video),
            })
            .collect();
        Ok((dispatch::build_dispatch_plan(&cp, &candidates, &self.topology)?, predictions))
    }

    /// Threshold dispatch reacting to the held-out day as it unfolds, peak included.
    pub fn baseline_dispatches(&self, h: f64, p: usize) -> Result<Vec<Dispatch>> {
        dispatch::baseline_dispatch(&self.log.day_requests(self.holdout), h, p, &self.topology)
    }

    pub fn evaluate(&self, dispatches: &[Dispatch]) -> Result<EvalReport> {
        let peak: Vec<u64> = self.world.peak_window.iter().map(|&t| t as u64).collect();
        dispatch::evaluate_metrics(dispatches, &self.log.day_requests(self.holdout), &peak, &self.topology)
    }

    /// Peak-window requests of the held-out day.
    pub fn peak_requests(&self) -> Vec<dispatch::Request> {
        let cfg = &self.world;
        self.log.day_requests(self.holdout).into_iter().filter(|r| cfg.in_peak(r.interval as usize)).collect()
    }

    /// Objective of a learned plan over the held-out peak; videos first seen
    /// on that day are left out.
    pub fn plan_objective(&self, plan: &DispatchPlan, predictions: &[Prediction]) -> Result<f64> {
        let assignment: BTreeMap<u64, usize> = predictions.iter().map(|p| (p.video, p.cluster)).collect();
        let reqs: Vec<_> = self.peak_requests().into_iter().filter(|r| assignment.contains_key(&r.video)).collect();
        let induced = dispatch::plan_induced_cp(plan, self.topology.cdns());
        dispatch::evaluate_objective(|v| assignment.get(&v).copied(), &induced, &reqs, &self.topology)
    }

    /// Stationarity statistics over every (video, user) series of the training days.
    pub fn stationarity(&self) -> Result<StationarityReport> {
        let t = self.world.intervals;
        let series: Vec<Vec<f64>> = self.index.user_series().into_iter().map(|s| s[..self.holdout * t].to_vec()).filter(|s| s.iter().any(|&x| x > 0.0)).collect();
        stationarity_report(&series, t)
    }

    /// Cluster quality of the evaluation-window clustering.
    pub fn cluster_quality(&self, models: &Models, predictions: &[Prediction]) -> Result<ClusterQuality> {
        let members: Vec<ClusterMember> = predictions
            .iter()
            .map(|p| ClusterMember {
                cluster: p.cluster,
                encoding: p.encoding,
                requests: p.input.data().to_vec(),
            })
            .collect();
        cluster_quality_report(&members, models.predictor.partition())
    }
}
