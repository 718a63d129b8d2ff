//! Post-processing from per-user probabilities to per-CDN dispatch lists, the
//! reactive threshold baseline, the peak-miss objective and evaluation metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Users, CDNs, who serves whom, and per-CDN budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    users: usize,
    cdns: usize,
    /// `I_u` for every user, ascending.
    serving: Vec<Vec<usize>>,
    /// Dispatch budget `N_i`.
    budgets: Vec<usize>,
    /// Soft capacity `CPT_i` on the summed dispatch probability.
    capacities: Vec<f64>,
    /// Row-major `|U| × |I|`, column-stochastic.
    uc: Vec<f64>,
}

impl Topology {
    pub fn new(users: usize, cdns: usize, serving: Vec<Vec<usize>>, budgets: Vec<usize>, capacities: Vec<f64>) -> Result<Self> {
        if serving.len() != users || budgets.len() != cdns || capacities.len() != cdns {
            return Err(Error::config("topology lists must match user and CDN counts"));
        }
        let mut serving = serving;
        let mut served_by = vec![0usize; cdns];
        for (u, s) in serving.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if s.is_empty() {
                return Err(Error::config(alloc::format!("user {u} is not served by any CDN")));
            }
            for &i in s.iter() {
                if i >= cdns {
                    return Err(Error::config(alloc::format!("user {u} references unknown CDN {i}")));
                }
                served_by[i] += 1;
            }
        }
        if let Some(i) = served_by.iter().position(|&n| n == 0) {
            return Err(Error::config(alloc::format!("CDN {i} serves no users")));
        }
        if let Some(i) = budgets.iter().position(|&n| n == 0) {
            return Err(Error::InvalidBudget(i));
        }
        let mut uc = vec![0.0; users * cdns];
        for (u, s) in serving.iter().enumerate() {
            for &i in s {
                uc[u * cdns + i] = 1.0 / served_by[i] as f64;
            }
        }
        Ok(Topology {
            users,
            cdns,
            serving,
            budgets,
            capacities,
            uc,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn cdns(&self) -> usize {
        self.cdns
    }

    pub fn serving(&self, user: usize) -> &[usize] {
        &self.serving[user]
    }

    pub fn serves(&self, cdn: usize, user: usize) -> bool {
        self.serving[user].binary_search(&cdn).is_ok()
    }

    pub fn budget(&self, cdn: usize) -> usize {
        self.budgets[cdn]
    }

    pub fn capacity(&self, cdn: usize) -> f64 {
        self.capacities[cdn]
    }

    pub fn uc(&self, user: usize, cdn: usize) -> f64 {
        self.uc[user * self.cdns + cdn]
    }

    /// Same serving map with every budget replaced by `n`.
    pub fn with_budget(&self, n: usize) -> Result<Self> {
        Topology::new(self.users, self.cdns, self.serving.clone(), vec![n; self.cdns], self.capacities.clone())
    }
}

/// Cluster → one value per user (`UP`) or per CDN (`CP`).
pub type ClusterMatrix = BTreeMap<usize, Vec<f64>>;

/// `CP = UP · UC`.
pub fn compute_cp(up: &ClusterMatrix, topo: &Topology) -> Result<ClusterMatrix> {
    up.iter()
        .map(|(&c, row)| {
            if row.len() != topo.users {
                return Err(Error::shape("UP row", &[topo.users], &[row.len()]));
            }
            let cp = (0..topo.cdns)
                .map(|i| row.iter().enumerate().map(|(u, p)| p * topo.uc(u, i)).sum())
                .collect();
            Ok((c, cp))
        })
        .collect()
}

/// A dispatch candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub video: u64,
    pub cluster: usize,
    pub upload_time: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub video: u64,
    pub cluster: usize,
    pub cp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    /// Ranked video list per CDN.
    pub per_cdn: Vec<Vec<PlanEntry>>,
    pub cp: ClusterMatrix,
}

impl DispatchPlan {
    pub fn len(&self) -> usize {
        self.per_cdn.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(cdn, video)` pairs dispatched before the evaluated day.
    pub fn dispatches(&self) -> Vec<Dispatch> {
        self.per_cdn
            .iter()
            .enumerate()
            .flat_map(|(i, list)| {
                list.iter().map(move |e| Dispatch {
                    cdn: i,
                    video: e.video,
                    interval: None,
                })
            })
            .collect()
    }

    /// `Σ CP_{C(v), i}` over the videos sent to each CDN, against `CPT_i`.
    pub fn capacity_usage(&self, topo: &Topology) -> Vec<CapacityUse> {
        self.per_cdn
            .iter()
            .enumerate()
            .map(|(i, list)| {
                let used = list.iter().map(|e| e.cp).sum();
                CapacityUse {
                    cdn: i,
                    used,
                    capacity: topo.capacity(i),
                    exceeded: used > topo.capacity(i),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityUse {
    pub cdn: usize,
    pub used: f64,
    pub capacity: f64,
    pub exceeded: bool,
}

/// Rank candidates per CDN by `CP_{C(v),i}` descending, then newest upload,
/// then smallest id; keep the first `N_i`.
pub fn build_dispatch_plan(cp: &ClusterMatrix, candidates: &[Candidate], topo: &Topology) -> Result<DispatchPlan> {
    let missing: Vec<u64> = candidates.iter().filter(|c| !cp.contains_key(&c.cluster)).map(|c| c.video).collect();
    if !missing.is_empty() {
        return Err(Error::Unassigned(missing));
    }
    let mut per_cdn = Vec::with_capacity(topo.cdns);
    for i in 0..topo.cdns {
        let n = topo.budget(i);
        if n == 0 {
            return Err(Error::InvalidBudget(i));
        }
        let mut ranked: Vec<PlanEntry> = candidates
            .iter()
            .map(|c| PlanEntry {
                video: c.video,
                cluster: c.cluster,
                cp: cp[&c.cluster][i],
            })
            .collect();
        let upload: BTreeMap<u64, i64> = candidates.iter().map(|c| (c.video, c.upload_time)).collect();
        ranked.sort_by(|a, b| {
            b.cp.total_cmp(&a.cp)
                .then(upload[&b.video].cmp(&upload[&a.video]))
                .then(a.video.cmp(&b.video))
        });
        ranked.dedup_by_key(|e| e.video);
        ranked.truncate(n);
        per_cdn.push(ranked);
    }
    Ok(DispatchPlan { per_cdn, cp: cp.clone() })
}

/// One request record on the global interval clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Request {
    pub video: u64,
    pub user: usize,
    pub interval: u64,
    pub count: f64,
}

/// A video sent to a CDN; `interval` is `None` for ahead-of-time dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Dispatch {
    pub cdn: usize,
    pub video: u64,
    pub interval: Option<u64>,
}

/// Reactive baseline: dispatch `v` to `i` once the requests for `v` from the
/// users `i` serves exceed `h` for `p` consecutive intervals. Each pair fires
/// at most once; a CDN stops receiving videos after `N_i` dispatches. Within an
/// interval, larger sums fire first, then smaller ids.
pub fn baseline_dispatch(stream: &[Request], h: f64, p: usize, topo: &Topology) -> Result<Vec<Dispatch>> {
    if !(h >= 0.0) {
        return Err(Error::config("threshold h must be non-negative"));
    }
    if p < 1 {
        return Err(Error::config("period p must be at least 1"));
    }
    if stream.windows(2).any(|w| w[0].interval > w[1].interval) {
        return Err(Error::config("request stream must be ordered by interval"));
    }
    let mut runs: BTreeMap<(u64, usize), usize> = BTreeMap::new();
    let mut fired: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut sent = vec![0usize; topo.cdns];
    let mut out = Vec::new();
    let mut start = 0;
    while start < stream.len() {
        let t = stream[start].interval;
        let end = start + stream[start..].iter().take_while(|r| r.interval == t).count();
        let mut sums: BTreeMap<(u64, usize), f64> = BTreeMap::new();
        for r in &stream[start..end] {
            for &i in topo.serving(r.user) {
                *sums.entry((r.video, i)).or_insert(0.0) += r.count;
            }
        }
        let mut next_runs = BTreeMap::new();
        let mut firing = Vec::new();
        for (&key, &s) in &sums {
            if s > h {
                let run = runs.get(&key).copied().unwrap_or(0) + 1;
                next_runs.insert(key, run);
                if run >= p && !fired.contains(&key) {
                    firing.push((key, s));
                }
            }
        }
        runs = next_runs;
        firing.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for ((video, cdn), _) in firing {
            fired.insert((video, cdn));
            if sent[cdn] < topo.budget(cdn) {
                sent[cdn] += 1;
                out.push(Dispatch {
                    cdn,
                    video,
                    interval: Some(t),
                });
            }
        }
        start = end;
    }
    Ok(out)
}

/// `Σ_u Σ_{r ∈ PR_u} count(r) · Π_{i ∈ I_u} (1 − CP_{C(r), i})`.
pub fn evaluate_objective(
    assignment: impl Fn(u64) -> Option<usize>,
    cp: &ClusterMatrix,
    peak_requests: &[Request],
    topo: &Topology,
) -> Result<f64> {
    let mut missing = BTreeSet::new();
    let mut total = 0.0;
    for r in peak_requests {
        let Some(row) = assignment(r.video).and_then(|c| cp.get(&c)) else {
            missing.insert(r.video);
            continue;
        };
        let miss: f64 = topo.serving(r.user).iter().map(|&i| 1.0 - row[i]).product();
        total += r.count * miss;
    }
    if !missing.is_empty() {
        return Err(Error::Unassigned(missing.into_iter().collect()));
    }
    Ok(total)
}

/// CP restricted to the clusters each CDN actually received.
pub fn plan_induced_cp(plan: &DispatchPlan, cdns: usize) -> ClusterMatrix {
    let mut out: ClusterMatrix = plan.cp.keys().map(|&c| (c, vec![0.0; cdns])).collect();
    for (i, list) in plan.per_cdn.iter().enumerate() {
        for e in list {
            out.get_mut(&e.cluster).expect("plan clusters come from cp")[i] = plan.cp[&e.cluster][i];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub r_whole: f64,
    pub r_peak: f64,
    pub accuracy: f64,
    pub dispatched: usize,
    pub whole_hits: usize,
    pub peak_hits: usize,
    pub objective: Option<f64>,
}

/// Hit ratios of `(cdn, video)` dispatches against the evaluated day.
///
/// A dispatch counts as requested when a user served by that CDN requests the
/// video after the dispatch interval (anywhere in the day for ahead-of-time
/// dispatch); for the peak ratios the request must also fall inside `peak`.
pub fn evaluate_metrics(dispatches: &[Dispatch], day_requests: &[Request], peak: &[u64], topo: &Topology) -> Result<EvalReport> {
    if dispatches.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let peak: BTreeSet<u64> = peak.iter().copied().collect();
    // Earliest request interval per (video, cdn), overall and in the peak window.
    let mut by_pair: BTreeMap<(u64, usize), Vec<u64>> = BTreeMap::new();
    for r in day_requests.iter().filter(|r| r.count > 0.0) {
        for &i in topo.serving(r.user) {
            by_pair.entry((r.video, i)).or_default().push(r.interval);
        }
    }
    let mut whole = 0;
    let mut peak_hits = 0;
    for d in dispatches {
        let from = d.interval.map_or(0, |t| t + 1);
        if let Some(times) = by_pair.get(&(d.video, d.cdn)) {
            if times.iter().any(|&t| t >= from) {
                whole += 1;
            }
            if times.iter().any(|&t| t >= from && peak.contains(&t)) {
                peak_hits += 1;
            }
        }
    }
    let n = dispatches.len() as f64;
    Ok(EvalReport {
        r_whole: whole as f64 / n,
        r_peak: peak_hits as f64 / n,
        accuracy: peak_hits as f64 / n,
        dispatched: dispatches.len(),
        whole_hits: whole,
        peak_hits,
        objective: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_user_topo() -> Topology {
        // CDN-A (0) serves a and b; CDN-B (1) serves b only.
        Topology::new(2, 2, vec![vec![0], vec![0, 1]], vec![2, 2], vec![10.0, 10.0]).unwrap()
    }

    #[test]
    fn uc_is_column_stochastic() {
        let t = two_user_topo();
        assert_eq!((t.uc(0, 0), t.uc(1, 0), t.uc(0, 1), t.uc(1, 1)), (0.5, 0.5, 0.0, 1.0));
        assert!(Topology::new(2, 2, vec![vec![0], vec![]], vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(Topology::new(1, 2, vec![vec![0]], vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(Topology::new(1, 1, vec![vec![0]], vec![0], vec![1.0]).is_err());
    }

    #[test]
    fn cp_examples() {
        let t = two_user_topo();
        let cp = compute_cp(&[(0, vec![0.5, 0.9])].into(), &t).unwrap();
        assert!((cp[&0][0] - 0.7).abs() < 1e-15 && (cp[&0][1] - 0.9).abs() < 1e-15);
        let flat = compute_cp(&[(3, vec![0.3, 0.3])].into(), &t).unwrap();
        assert!(flat[&3].iter().all(|&x| (x - 0.3).abs() < 1e-15));
        let single = Topology::new(1, 1, vec![vec![0]], vec![1], vec![1.0]).unwrap();
        assert_eq!(compute_cp(&[(0, vec![0.42])].into(), &single).unwrap()[&0], vec![0.42]);
        assert!(compute_cp(&[(0, vec![0.1])].into(), &t).is_err());
    }

    #[test]
    fn plan_ranking_examples() {
        let t = Topology::new(1, 1, vec![vec![0]], vec![2], vec![5.0]).unwrap();
        let cp: ClusterMatrix = [(0, vec![0.9]), (1, vec![0.2])].into();
        let cands = [
            Candidate { video: 1, cluster: 0, upload_time: 3 },
            Candidate { video: 2, cluster: 1, upload_time: 9 },
            Candidate { video: 3, cluster: 0, upload_time: 7 },
        ];
        let plan = build_dispatch_plan(&cp, &cands, &t).unwrap();
        let ids: Vec<u64> = plan.per_cdn[0].iter().map(|e| e.video).collect();
        assert_eq!(ids, vec![3, 1]);
        let wide = build_dispatch_plan(&cp, &cands, &t.with_budget(10).unwrap()).unwrap();
        assert_eq!(wide.per_cdn[0].iter().map(|e| e.video).collect::<Vec<_>>(), vec![3, 1, 2]);
        let same = [
            Candidate { video: 9, cluster: 0, upload_time: 1 },
            Candidate { video: 4, cluster: 0, upload_time: 1 },
        ];
        let tie = build_dispatch_plan(&cp, &same, &t).unwrap();
        assert_eq!(tie.per_cdn[0].iter().map(|e| e.video).collect::<Vec<_>>(), vec![4, 9]);
        assert_eq!(build_dispatch_plan(&cp, &same, &t).unwrap(), tie);
    }

    fn series(sums: &[f64]) -> Vec<Request> {
        sums.iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(t, &c)| Request { video: 1, user: 0, interval: t as u64, count: c })
            .collect()
    }

    #[test]
    fn baseline_examples() {
        let t = Topology::new(1, 1, vec![vec![0]], vec![5], vec![5.0]).unwrap();
        let d = baseline_dispatch(&series(&[1.0, 4.0, 5.0, 2.0]), 3.0, 2, &t).unwrap();
        assert_eq!(d, vec![Dispatch { cdn: 0, video: 1, interval: Some(2) }]);
        assert!(baseline_dispatch(&series(&[1e9, 1e9]), f64::INFINITY, 1, &t).unwrap().is_empty());
        let d = baseline_dispatch(&series(&[0.0, 1.0, 3.0]), 0.0, 1, &t).unwrap();
        assert_eq!(d, vec![Dispatch { cdn: 0, video: 1, interval: Some(1) }]);
        assert!(baseline_dispatch(&[], -1.0, 1, &t).is_err());
        assert!(baseline_dispatch(&[], 1.0, 0, &t).is_err());
    }

    #[test]
    fn baseline_respects_budget_and_resets_runs() {
        let t = Topology::new(1, 1, vec![vec![0]], vec![1], vec![5.0]).unwrap();
        let mut s = Vec::new();
        for tt in 0..4u64 {
            for v in [1u64, 2] {
                if !(v == 1 && tt == 1) {
                    s.push(Request { video: v, user: 0, interval: tt, count: 2.0 });
                }
            }
        }
        let d = baseline_dispatch(&s, 1.0, 2, &t).unwrap();
        // Video 2 completes a run first; video 1's run is broken at t=1.
        assert_eq!(d, vec![Dispatch { cdn: 0, video: 2, interval: Some(1) }]);
    }

    #[test]
    fn objective_examples() {
        let t = two_user_topo();
        let reqs = [
            Request { video: 1, user: 0, interval: 0, count: 3.0 },
            Request { video: 2, user: 1, interval: 0, count: 2.0 },
        ];
        let assign = |v: u64| Some(v as usize);
        let ones: ClusterMatrix = [(1, vec![1.0, 1.0]), (2, vec![1.0, 1.0])].into();
        assert_eq!(evaluate_objective(assign, &ones, &reqs, &t).unwrap(), 0.0);
        let zeros: ClusterMatrix = [(1, vec![0.0, 0.0]), (2, vec![0.0, 0.0])].into();
        assert_eq!(evaluate_objective(assign, &zeros, &reqs, &t).unwrap(), 5.0);
        let err = evaluate_objective(|v| (v == 1).then_some(1), &zeros, &reqs, &t);
        assert_eq!(err, Err(Error::Unassigned(vec![2])));
    }

    #[test]
    fn objective_matches_brute_force_sum() {
        // 2 users, 2 CDNs, 3 videos with hand-set CP.
        let t = Topology::new(2, 2, vec![vec![0, 1], vec![1]], vec![1, 1], vec![1.0, 1.0]).unwrap();
        let cp: ClusterMatrix = [(0, vec![0.2, 0.5]), (1, vec![0.7, 0.1])].into();
        let cluster_of = [0usize, 1, 0];
        let counts = [[2.0, 0.0, 1.0], [4.0, 3.0, 0.0]];
        let mut reqs = Vec::new();
        for (u, row) in counts.iter().enumerate() {
            for (v, &c) in row.iter().enumerate() {
                if c > 0.0 {
                    reqs.push(Request { video: v as u64, user: u, interval: 0, count: c });
                }
            }
        }
        let got = evaluate_objective(|v| Some(cluster_of[v as usize]), &cp, &reqs, &t).unwrap();
        let mut want = 0.0;
        for u in 0..2 {
            for v in 0..3 {
                let mut miss = 1.0;
                for i in 0..2 {
                    if t.serves(i, u) {
                        miss *= 1.0 - cp[&cluster_of[v]][i];
                    }
                }
                want += counts[u][v] * miss;
            }
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        let t = Topology::new(1, 1, vec![vec![0]], vec![4], vec![1.0]).unwrap();
        let plan: Vec<Dispatch> = (0..4).map(|v| Dispatch { cdn: 0, video: v, interval: None }).collect();
        let reqs = [
            Request { video: 0, user: 0, interval: 5, count: 1.0 },
            Request { video: 1, user: 0, interval: 6, count: 2.0 },
            Request { video: 2, user: 0, interval: 1, count: 1.0 },
            Request { video: 3, user: 0, interval: 2, count: 1.0 },
        ];
        let r = evaluate_metrics(&plan, &reqs, &[5, 6], &t).unwrap();
        assert_eq!((r.accuracy, r.r_peak, r.r_whole), (0.5, 0.5, 1.0));
        assert_eq!(evaluate_metrics(&[], &reqs, &[5], &t), Err(Error::EmptyPlan));
        // A dispatch only earns requests made after it.
        let late = [Dispatch { cdn: 0, video: 1, interval: Some(6) }];
        assert_eq!(evaluate_metrics(&late, &reqs, &[5, 6], &t).unwrap().accuracy, 0.0);
        let early = [Dispatch { cdn: 0, video: 1, interval: Some(5) }];
        assert_eq!(evaluate_metrics(&early, &reqs, &[5, 6], &t).unwrap().accuracy, 1.0);
    }
}
