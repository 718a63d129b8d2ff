//! Concurrent dual-trainer run: the policy loop and the clustering loop on
//! their own threads, exchanging immutable snapshots through a shared store.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use vodnet_core::trainer::{
    admit, collect_outcome, fetch_latest, publish_policy, ClusterTrainer, Family, FetchLog, ModelStore, PolicyTrainer, Snapshot,
    TrainJob, TrainOutcome,
};
use vodnet_core::ParamSet;

use crate::error::{CliError, Result};

/// Thread-safe store keeping every published version.
///
/// Publishing takes the write lock only to append; readers clone an `Arc`.
#[derive(Debug, Default)]
pub struct SharedStore {
    history: RwLock<BTreeMap<Family, Vec<Arc<Snapshot>>>>,
    publications: Mutex<u64>,
    published: Condvar,
}

impl SharedStore {
    pub fn new() -> Self {
        SharedStore::default()
    }

    /// Block until `ready()` holds, re-checking after every publication.
    fn wait_for(&self, ready: impl Fn() -> bool, deadline: Duration) -> bool {
        let until = Instant::now() + deadline;
        let mut seen = self.publications.lock().unwrap_or_else(|e| e.into_inner());
        while !ready() {
            let now = Instant::now();
            if now >= until {
                return false;
            }
            seen = self.published.wait_timeout(seen, until - now).unwrap_or_else(|e| e.into_inner()).0;
        }
        true
    }

    fn notify(&self) {
        *self.publications.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.published.notify_all();
    }
}

impl ModelStore for SharedStore {
    fn latest(&self, family: Family) -> Option<Arc<Snapshot>> {
        let h = self.history.read().unwrap_or_else(|e| e.into_inner());
        h.get(&family).and_then(|l| l.last().cloned())
    }

    fn get(&self, family: Family, version: u64) -> Option<Arc<Snapshot>> {
        let h = self.history.read().unwrap_or_else(|e| e.into_inner());
        let list = h.get(&family)?;
        list.binary_search_by_key(&version, |s| s.version).ok().map(|i| list[i].clone())
    }

    fn publish(&self, family: Family, params: ParamSet, tag: u64) -> vodnet_core::Result<Arc<Snapshot>> {
        let snap = {
            let mut h = self.history.write().unwrap_or_else(|e| e.into_inner());
            let list = h.entry(family).or_default();
            let snap = Arc::new(admit(family, params, list.last().map(|s| s.version), tag)?);
            list.push(snap.clone());
            snap
        };
        self.notify();
        Ok(snap)
    }
}

/// Shared progress counters, readable from either loop and from a stall report.
#[derive(Default)]
struct Progress {
    policy: AtomicU64,
    cluster: AtomicU64,
    abort: AtomicBool,
}

impl Progress {
    fn dump(&self, store: &SharedStore) -> String {
        let v = |f| store.latest(f).map_or(0, |s| s.version);
        format!(
            "policy iteration {}, cluster iteration {}, latest versions temporal {} clustering {} policy {}",
            self.policy.load(Ordering::SeqCst),
            self.cluster.load(Ordering::SeqCst),
            v(Family::Temporal),
            v(Family::Clustering),
            v(Family::Policy)
        )
    }
}

/// Run both loops concurrently; the fetch schedule they happen to follow is
/// recorded in the outcome so it can be replayed sequentially.
///
/// The clustering loop starts once the policy loop has finished its warmup;
/// if that takes longer than `stall_timeout` the run aborts with a state dump.
pub fn run_async(job: &TrainJob<'_>, store: &SharedStore, stall_timeout: Duration) -> Result<TrainOutcome> {
    let tcfg = job.train;
    let progress = Progress::default();
    let start = Instant::now();
    let tag = || start.elapsed().as_millis() as u64;

    let policy_loop = || -> Result<(PolicyTrainer, Vec<Option<u64>>)> {
        let mut p = job.policy_trainer()?;
        publish_policy(store, &p, tag())?;
        let mut log = Vec::with_capacity(tcfg.policy_iterations as usize);
        while p.iteration() < tcfg.policy_iterations {
            if progress.abort.load(Ordering::SeqCst) {
                return Err(CliError::Aborted);
            }
            let clustering = fetch_latest(store, Family::Clustering)?;
            log.push(clustering.as_ref().map(|s| s.version));
            job.policy_step(&mut p, clustering.as_deref())?;
            publish_policy(store, &p, tag())?;
            progress.policy.store(p.iteration(), Ordering::SeqCst);
        }
        Ok((p, log))
    };

    let cluster_loop = || -> Result<(ClusterTrainer, Vec<Option<u64>>)> {
        let mut c = job.cluster_trainer()?;
        let warm = || progress.policy.load(Ordering::SeqCst) >= tcfg.warmup || progress.abort.load(Ordering::SeqCst);
        if !store.wait_for(warm, stall_timeout) {
            return Err(CliError::Stalled(progress.dump(store)));
        }
        let mut log = Vec::with_capacity(tcfg.cluster_iterations as usize);
        while c.iteration() < tcfg.cluster_iterations {
            if progress.abort.load(Ordering::SeqCst) {
                return Err(CliError::Aborted);
            }
            let fetched = if c.fetch_due() {
                let t = fetch_latest(store, Family::Temporal)?.ok_or_else(|| CliError::Stalled(progress.dump(store)))?;
                c.install_temporal(&t)?;
                Some(t.version)
            } else {
                None
            };
            log.push(fetched);
            c.step(job.dataset, job.peaks)?;
            store.publish(Family::Clustering, c.snapshot_params(), tag())?;
            progress.cluster.store(c.iteration(), Ordering::SeqCst);
        }
        Ok((c, log))
    };

    let (p, c) = thread::scope(|s| {
        let ph = s.spawn(|| stop_on_error(policy_loop(), &progress, store));
        let ch = s.spawn(|| stop_on_error(cluster_loop(), &progress, store));
        (join(ph), join(ch))
    });
    // Report the loop that failed first, not the one it stopped.
    let (p, c) = match (p, c) {
        (Ok(p), Ok(c)) => (p, c),
        (Err(e), Ok(_)) | (Ok(_), Err(e)) => return Err(e),
        (Err(pe), Err(ce)) => return Err(if is_abort(&pe) { ce } else { pe }),
    };
    let log = FetchLog { policy: p.1, cluster: c.1 };
    Ok(collect_outcome(store, p.0, c.0, log)?)
}

/// Tell the other loop to stop, and wake it if it is waiting.
fn stop_on_error<T>(r: Result<T>, progress: &Progress, store: &SharedStore) -> Result<T> {
    if r.is_err() {
        progress.abort.store(true, Ordering::SeqCst);
        store.notify();
    }
    r
}

fn join<T>(h: thread::ScopedJoinHandle<'_, Result<T>>) -> Result<T> {
    h.join().unwrap_or_else(|_| Err(CliError::Stalled("training thread panicked".into())))
}

fn is_abort(e: &CliError) -> bool {
    matches!(e, CliError::Aborted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vodnet_core::temporal::{PeakScope, TemporalConfig};
    use vodnet_core::trainer::{run_interleaved, run_replay, InitialModels, LocalStore, ModelConfig, TrainConfig};
    use vodnet_core::worldgen::WorldConfig;
    use vodnet_core::Seed;

    use crate::experiment::Experiment;

    fn tiny() -> (Experiment, TrainConfig) {
        let mut w = WorldConfig::reference(Seed(5));
        w.videos = 80;
        w.days = 6;
        w.daily_uploads = 6;
        w.daily_requests = 1200.0;
        let mut model = ModelConfig::desk(w.users, w.peak_window.clone());
        model.temporal = TemporalConfig::new(24, 6, 3, 3, (6, 4), (4, 6), (3, 2), (2, 2), 4).unwrap();
        model.ae_hidden = vec![8];
        model.head_hidden = vec![8];
        let exp = Experiment::new(&w, model, 5, PeakScope::Corpus, 5, f64::INFINITY).unwrap();
        let mut t = TrainConfig::desk(Seed(5));
        t.policy_iterations = 40;
        t.cluster_iterations = 60;
        t.warmup = 10;
        t.fetch_period = 7;
        t.policy_batch = 16;
        t.cluster_batch = 8;
        (exp, t)
    }

    #[test]
    fn async_run_replays_exactly() {
        let (exp, t) = tiny();
        let init = InitialModels::new(&exp.model, Seed(5)).unwrap();
        let job = exp.job(&t, &init);
        let store = SharedStore::new();
        let out = run_async(&job, &store, Duration::from_secs(60)).unwrap();
        assert_eq!(out.fetch_log.policy.len(), 40);
        assert_eq!(out.fetch_log.cluster.len(), 60);
        assert!(out.fetch_log.policy[..10].iter().all(Option::is_none));
        let replay = run_replay(&job, &LocalStore::new(), &out.fetch_log).unwrap();
        assert_eq!(replay.temporal.params, out.temporal.params);
        assert_eq!(replay.policy.params, out.policy.params);
        assert_eq!(replay.clustering.as_ref().unwrap().params, out.clustering.as_ref().unwrap().params);
        assert_eq!(replay.policy_trace, out.policy_trace);
        assert_eq!(replay.cluster_trace, out.cluster_trace);
    }

    #[test]
    fn interleaved_schedule_replays_exactly() {
        let (exp, t) = tiny();
        let init = InitialModels::new(&exp.model, Seed(5)).unwrap();
        let job = exp.job(&t, &init);
        let a = run_interleaved(&job, &SharedStore::new()).unwrap();
        let b = run_replay(&job, &SharedStore::new(), &a.fetch_log).unwrap();
        assert_eq!(a.temporal.params, b.temporal.params);
        assert_eq!(a.cluster_trace, b.cluster_trace);
    }

    #[test]
    fn wait_times_out_and_reports_progress() {
        let store = SharedStore::new();
        let progress = Progress::default();
        progress.cluster.store(4, Ordering::SeqCst);
        let ok = store.wait_for(|| progress.policy.load(Ordering::SeqCst) >= 5, Duration::from_millis(50));
        assert!(!ok);
        let dump = progress.dump(&store);
        assert!(dump.contains("policy iteration 0") && dump.contains("cluster iteration 4"), "{dump}");
    }

    #[test]
    fn store_rejects_stale_versions_and_foreign_params() {
        let store = SharedStore::new();
        let mut p = ParamSet::new();
        p.insert("policy.w", vodnet_core::Tensor::new(vec![1], vec![1.0]).unwrap());
        p.set_version(3);
        store.publish(Family::Policy, p.clone(), 0).unwrap();
        assert!(store.publish(Family::Policy, p.clone(), 1).is_err());
        assert!(store.publish(Family::Temporal, p, 1).is_err());
        assert_eq!(store.latest(Family::Policy).unwrap().version, 3);
        assert!(store.get(Family::Policy, 2).is_none());
    }
}
