//! `vodnet gen | train | dispatch | report`.
//!
//! Output layout under `--out`:
//!
//! ```text
//! world/log.csv, world/uploads.csv
//! models/{temporal,clustering,policy}.ckpt
//! traces/policy.csv, traces/cluster.csv, traces/fetch_schedule.csv
//! dispatch/plan.csv | dispatch/baseline.csv, dispatch/eval.json
//! report/report.json, report/rank_frequency.csv
//! <command>.config
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vodnet_core::dispatch::EvalReport;
use vodnet_core::trainer::{run_interleaved, Family, InitialModels, LocalStore, Models, TrainOutcome};
use vodnet_core::worldgen::{generate_world, head_share, peak_load_ratio, rank_frequency};
use vodnet_core::Seed;

use crate::async_train::{run_async, SharedStore};
use crate::config::{Resolved, RunConfig};
use crate::error::{CliError, Result};
use crate::experiment::Experiment;
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "vodnet", version, about = "Next-day peak video dispatch with coupled clustering and policy networks")]
pub struct Cli {
    /// key=value configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory shared by all commands.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override any configuration key, e.g. `--set train.warmup=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic request log.
    Gen,
    /// Train the temporal, clustering and policy models.
    Train {
        #[arg(long, value_enum, default_value_t = Mode::Interleaved)]
        mode: Mode,
        /// Keep chronological order and train on the two date halves in turn.
        #[arg(long)]
        no_shuffle: bool,
        /// Start from the checkpoints in `models/` and continue their versions.
        #[arg(long)]
        resume: bool,
    },
    /// Build a dispatch plan for the held-out day and evaluate it.
    Dispatch {
        #[arg(long, value_enum, default_value_t = Policy::Learned)]
        policy: Policy,
        /// Threshold on per-interval requests for the threshold policy.
        #[arg(long)]
        h: Option<f64>,
        /// Consecutive intervals above `h` that trigger a dispatch.
        #[arg(long)]
        p: Option<usize>,
    },
    /// Stationarity, long-tail and cluster-quality analyses.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Two threads exchanging snapshots.
    Async,
    /// Single thread, bit-reproducible.
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Learned,
    Threshold,
}

impl Cli {
    fn command_name(&self) -> &'static str {
        match self.command {
            Command::Gen => "gen",
            Command::Train { .. } => "train",
            Command::Dispatch { .. } => "dispatch",
            Command::Report => "report",
        }
    }

    /// Defaults, then `--config`, then `--seed`, `--set` and command flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        match &self.command {
            Command::Train { no_shuffle: true, .. } => cfg.set("train.shuffle", "false")?,
            Command::Dispatch { h, p, .. } => {
                if let Some(h) = h {
                    cfg.set("dispatch.h", &h.to_string())?;
                }
                if let Some(p) = p {
                    cfg.set("dispatch.p", &p.to_string())?;
                }
            }
            _ => {}
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let raw = cli.run_config()?;
    let cfg = raw.resolve()?;
    io::ensure_dir(&cli.out)?;
    io::write_text(&cli.out.join(format!("{}.config", cli.command_name())), &raw.render())?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, &cli.out),
        Command::Train { mode, resume, .. } => cmd_train(&cfg, &cli.out, *mode, *resume).map(drop),
        Command::Dispatch { policy, .. } => cmd_dispatch(&cfg, &cli.out, *policy).map(drop),
        Command::Report => cmd_report(&cfg, &cli.out).map(drop),
    }
}

fn world_dir(out: &Path) -> PathBuf {
    out.join("world")
}

fn model_path(out: &Path, f: Family) -> PathBuf {
    out.join("models").join(format!("{}.ckpt", f.name()))
}

pub fn cmd_gen(cfg: &Resolved, out: &Path) -> Result<()> {
    let world = generate_world(&cfg.world)?;
    io::write_log(&world_dir(out), &world.log)
}

fn load_experiment(cfg: &Resolved, out: &Path) -> Result<Experiment> {
    let w = &cfg.world;
    let log = io::read_log(&world_dir(out), w.users, w.days, w.intervals)?;
    Ok(Experiment::from_log(w.clone(), log, cfg.model.clone(), cfg.holdout, cfg.scope, cfg.budget, cfg.capacity)?)
}

fn load_models(cfg: &Resolved, out: &Path) -> Result<Models> {
    let t = io::load_checkpoint(&model_path(out, Family::Temporal))?;
    let p = io::load_checkpoint(&model_path(out, Family::Policy))?;
    let c = io::load_checkpoint(&model_path(out, Family::Clustering))?;
    Ok(Models::from_param_sets(&cfg.model, &t, &p, &c)?)
}

pub fn cmd_train(cfg: &Resolved, out: &Path, mode: Mode, resume: bool) -> Result<TrainOutcome> {
    if cfg.train.cluster_iterations == 0 {
        return Err(CliError::Config("train.cluster_iterations must be positive to produce a clustering model".into()));
    }
    let exp = load_experiment(cfg, out)?;
    let init = if resume {
        let t = io::load_checkpoint(&model_path(out, Family::Temporal))?;
        let p = io::load_checkpoint(&model_path(out, Family::Policy))?;
        let c = io::load_checkpoint(&model_path(out, Family::Clustering))?;
        InitialModels {
            temporal: t,
            policy: p,
            clustering: c,
        }
    } else {
        InitialModels::new(&cfg.model, Seed(cfg.seed))?
    };
    let job = exp.job(&cfg.train, &init);
    let outcome = match mode {
        Mode::Interleaved => run_interleaved(&job, &LocalStore::new())?,
        Mode::Async => run_async(&job, &SharedStore::new(), Duration::from_secs(cfg.stall_timeout_secs))?,
    };
    let models = out.join("models");
    io::ensure_dir(&models)?;
    let clustering = outcome.clustering.as_ref().ok_or_else(|| CliError::Config("no clustering snapshot was produced".into()))?;
    io::save_checkpoint(&model_path(out, Family::Temporal), &outcome.temporal.params)?;
    io::save_checkpoint(&model_path(out, Family::Policy), &outcome.policy.params)?;
    io::save_checkpoint(&model_path(out, Family::Clustering), &clustering.params)?;
    let traces = out.join("traces");
    io::ensure_dir(&traces)?;
    io::write_trace(&traces.join("policy.csv"), &outcome.policy_trace)?;
    io::write_trace(&traces.join("cluster.csv"), &outcome.cluster_trace)?;
    let mut schedule = String::from("loop,iteration,version\n");
    for (name, list) in [("policy", &outcome.fetch_log.policy), ("cluster", &outcome.fetch_log.cluster)] {
        for (i, v) in list.iter().enumerate() {
            schedule.push_str(&format!("{name},{},{}\n", i + 1, v.map_or(String::new(), |v| v.to_string())));
        }
    }
    io::write_text(&traces.join("fetch_schedule.csv"), &schedule)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalJson {
    pub accuracy: f64,
    pub r_whole: f64,
    pub r_peak: f64,
    pub dispatched: usize,
    pub peak_hits: usize,
    pub whole_hits: usize,
    pub objective: Option<f64>,
}

impl From<&EvalReport> for EvalJson {
    fn from(r: &EvalReport) -> Self {
        EvalJson {
            accuracy: r.accuracy,
            r_whole: r.r_whole,
            r_peak: r.r_peak,
            dispatched: r.dispatched,
            peak_hits: r.peak_hits,
            whole_hits: r.whole_hits,
            objective: r.objective,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DispatchJson {
    pub holdout_day: usize,
    pub budget_per_cdn: usize,
    pub threshold_h: f64,
    pub threshold_p: usize,
    pub learned: Option<EvalJson>,
    pub baseline: EvalJson,
    /// Learned accuracy over baseline accuracy.
    pub accuracy_ratio: Option<f64>,
}

pub fn cmd_dispatch(cfg: &Resolved, out: &Path, policy: Policy) -> Result<DispatchJson> {
    let exp = load_experiment(cfg, out)?;
    let dir = out.join("dispatch");
    io::ensure_dir(&dir)?;
    let base_dispatches = exp.baseline_dispatches(cfg.threshold_h, cfg.threshold_p)?;
    io::write_baseline(&dir.join("baseline.csv"), &base_dispatches)?;
    let baseline = exp.evaluate(&base_dispatches)?;
    let learned = match policy {
        Policy::Threshold => None,
        Policy::Learned => {
            let models = load_models(cfg, out)?;
            let (plan, predictions) = exp.learned_plan(&models)?;
            for u in plan.capacity_usage(&exp.topology) {
                if u.exceeded {
                    eprintln!("warning: cdn {} plan uses {:.3} of capacity {}", u.cdn, u.used, u.capacity);
                }
            }
            io::write_plan(&dir.join("plan.csv"), &plan)?;
            let mut report = exp.evaluate(&plan.dispatches())?;
            report.objective = Some(exp.plan_objective(&plan, &predictions)?);
            Some(report)
        }
    };
    let json = DispatchJson {
        holdout_day: cfg.holdout,
        budget_per_cdn: cfg.budget,
        threshold_h: cfg.threshold_h,
        threshold_p: cfg.threshold_p,
        accuracy_ratio: learned.as_ref().map(|l| l.accuracy / baseline.accuracy),
        learned: learned.as_ref().map(EvalJson::from),
        baseline: EvalJson::from(&baseline),
    };
    io::write_json(&dir.join("eval.json"), &json)?;
    Ok(json)
}

#[derive(Debug, Clone, Serialize)]
pub struct QualityJson {
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub intra_cv: f64,
    pub inter_cv: f64,
    pub corr_nv_area: Option<f64>,
    pub corr_nv_ad: Option<f64>,
    /// Intra-cluster inner products exceed inter-cluster ones.
    pub intra_exceeds_inter: bool,
    pub ns_mean: f64,
    pub l1_mean: f64,
    pub l2_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportJson {
    pub populated_clusters: usize,
    /// `None` when fewer than two clusters are populated.
    pub quality: Option<QualityJson>,
    pub dom_raw: f64,
    pub dom_diff: f64,
    pub top1pct_share: f64,
    pub peak_load_ratio: f64,
    pub stationarity_sequences: usize,
}

pub fn cmd_report(cfg: &Resolved, out: &Path) -> Result<ReportJson> {
    let exp = load_experiment(cfg, out)?;
    let models = load_models(cfg, out)?;
    let dir = out.join("report");
    io::ensure_dir(&dir)?;
    let freq = rank_frequency(&exp.log, None);
    io::write_rank_frequency(&dir.join("rank_frequency.csv"), &freq)?;
    let st = exp.stationarity()?;
    let predictions = exp.predict_clusters(&models)?;
    let populated = predictions.iter().map(|p| p.cluster).collect::<std::collections::BTreeSet<_>>().len();
    let quality = match exp.cluster_quality(&models, &predictions) {
        Ok(q) => Some(QualityJson {
            intra_mean: q.intra.mean,
            inter_mean: q.inter.mean,
            intra_cv: q.intra.cv,
            inter_cv: q.inter.cv,
            corr_nv_area: q.corr_nv_area,
            corr_nv_ad: q.corr_nv_ad,
            intra_exceeds_inter: q.intra.mean > q.inter.mean,
            ns_mean: q.ns.mean,
            l1_mean: q.l1.mean,
            l2_mean: q.l2.mean,
        }),
        Err(vodnet_core::Error::TooFewClusters) => {
            eprintln!("warning: {populated} cluster(s) populated; cluster quality omitted");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let json = ReportJson {
        populated_clusters: populated,
        quality,
        dom_raw: st.raw,
        dom_diff: st.differenced,
        top1pct_share: head_share(&freq, 0.01),
        peak_load_ratio: peak_load_ratio(&exp.log, &cfg.world.peak_window),
        stationarity_sequences: st.sequences,
    };
    io::write_json(&dir.join("report.json"), &json)?;
    Ok(json)
}
