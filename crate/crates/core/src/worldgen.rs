//! Synthetic VOD workloads and the statistics used to judge them.
//!
//! Requests are Poisson with intensity `popularity × age × affinity × activity
//! × diurnal shape`. Two video kinds exist: peak-kind videos are watched in the
//! evening window by users of one regional profile, off-peak-kind videos are
//! watched through the day by everyone. Each user's activity drifts over the
//! days, so request series carry a trend.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

use crate::cluster::BlockPartition;
use crate::dispatch::Request;
use crate::error::{Error, Result};
use crate::request::RequestTensor;
use crate::rng::Seed;

/// Share of a peak-kind video's daily interest that falls in the peak window;
/// off-peak-kind videos put the complement there.
const PEAK_KIND_MASS: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub users: usize,
    pub cdns: usize,
    /// CDNs serving each user.
    pub serving: Vec<Vec<usize>>,
    /// Catalog plus every later upload.
    pub videos: usize,
    /// Total simulated days, including any held-out day.
    pub days: usize,
    pub intervals: usize,
    /// Interval positions of the daily peak window.
    pub peak_window: Vec<usize>,
    pub zipf: f64,
    /// New videos per day after day 0.
    pub daily_uploads: usize,
    /// Catalog videos are uploaded up to this many days before day 0.
    pub catalog_age: usize,
    pub profiles: usize,
    /// Affinity mass a peak-kind video puts on its own profile's users.
    pub loyalty: f64,
    /// Fraction of videos that are peak-kind.
    pub peak_share: f64,
    /// Mean per-interval peak load over mean per-interval off-peak load.
    pub peak_ratio: f64,
    /// Expected requests per day over all users.
    pub daily_requests: f64,
    /// E-folding time of popularity with age, in days.
    pub age_scale: f64,
    /// Share of interest a video keeps however old it gets.
    pub residual_interest: f64,
    /// Bound on each user's log-activity change over the whole horizon.
    pub drift: f64,
    /// Probability that an alive video gets a burst on a given day.
    pub burst_rate: f64,
    /// Consecutive intervals a burst lasts; zero disables bursts.
    pub burst_len: usize,
    /// Expected extra requests per burst interval, from one random user.
    pub burst_size: f64,
    pub seed: Seed,
}

impl WorldConfig {
    /// 500 videos, 8 users, 3 CDNs, 4 profiles, 15 hourly days, peak 18:00-24:00.
    pub fn reference(seed: Seed) -> Self {
        WorldConfig {
            users: 8,
            cdns: 3,
            serving: vec![vec![0], vec![0], vec![0, 1], vec![1], vec![1], vec![1, 2], vec![2], vec![2]],
            videos: 500,
            days: 15,
            intervals: 24,
            peak_window: (18..24).collect(),
            zipf: 1.0,
            daily_uploads: 20,
            catalog_age: 10,
            profiles: 4,
            loyalty: 0.85,
            peak_share: 0.7,
            peak_ratio: 7.0,
            daily_requests: 6000.0,
            age_scale: 3.0,
            residual_interest: 0.5,
            drift: 1.5,
            burst_rate: 0.05,
            burst_len: 3,
            burst_size: 3.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.cdns == 0 || self.videos == 0 || self.days == 0 || self.intervals == 0 {
            return Err(Error::config("world dimensions must be positive"));
        }
        if self.peak_window.is_empty() {
            return Err(Error::config("peak window is empty"));
        }
        if self.peak_window.len() >= self.intervals || self.peak_window.iter().any(|&t| t >= self.intervals) {
            return Err(Error::config("peak window must be a proper subset of [0, T)"));
        }
        let mut w = self.peak_window.clone();
        w.sort_unstable();
        w.dedup();
        if w.len() != self.peak_window.len() {
            return Err(Error::config("peak window positions must be distinct"));
        }
        if self.serving.len() != self.users || self.serving.iter().flatten().any(|&i| i >= self.cdns) {
            return Err(Error::config("serving map must list valid CDNs for every user"));
        }
        if !(self.zipf >= 0.0) || !(self.peak_ratio > 0.0) || !(self.daily_requests > 0.0) || !(self.age_scale > 0.0) {
            return Err(Error::config("zipf, peak ratio, volume and age scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.residual_interest) {
            return Err(Error::config("residual interest must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.loyalty) || !(0.0..=1.0).contains(&self.peak_share) || !(self.drift >= 0.0) {
            return Err(Error::config("loyalty and peak share must lie in [0, 1], drift must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.burst_rate) || !(self.burst_size >= 0.0) || self.burst_len > self.intervals {
            return Err(Error::config("burst rate must lie in [0, 1], size non-negative, length at most T"));
        }
        if self.profiles == 0 {
            return Err(Error::config("at least one profile is required"));
        }
        if self.daily_uploads * (self.days - 1) > self.videos {
            return Err(Error::config("uploads exceed the video count"));
        }
        Ok(())
    }

    pub fn in_peak(&self, t: usize) -> bool {
        self.peak_window.contains(&t)
    }

    /// Main profile of a user.
    pub fn profile_of(&self, user: usize) -> usize {
        user * self.profiles / self.users
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LogRecord {
    pub day: u32,
    pub interval: u32,
    pub video: u64,
    pub user: u32,
    pub count: u32,
}

/// Chronologically ordered request records plus upload days.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestLog {
    pub users: usize,
    pub days: usize,
    pub intervals: usize,
    pub records: Vec<LogRecord>,
    /// `(video, upload day)`, ordered by video id.
    pub uploads: Vec<(u64, i64)>,
}

impl RequestLog {
    pub fn new(users: usize, days: usize, intervals: usize, mut records: Vec<LogRecord>, mut uploads: Vec<(u64, i64)>) -> Result<Self> {
        for r in &records {
            if r.count == 0 || r.user as usize >= users || r.day as usize >= days || r.interval as usize >= intervals {
                return Err(Error::config("log record out of range or with zero count"));
            }
        }
        records.sort_unstable();
        uploads.sort_unstable();
        Ok(RequestLog {
            users,
            days,
            intervals,
            records,
            uploads,
        })
    }

    pub fn total(&self) -> u64 {
        self.records.iter().map(|r| u64::from(r.count)).sum()
    }

    /// Requests of one day as dispatcher records on that day's interval clock.
    pub fn day_requests(&self, day: usize) -> Vec<Request> {
        self.records
            .iter()
            .filter(|r| r.day as usize == day)
            .map(|r| Request {
                video: r.video,
                user: r.user as usize,
                interval: u64::from(r.interval),
                count: f64::from(r.count),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoTraits {
    pub profile: usize,
    pub peak_kind: bool,
    /// Popularity rank, 1-based.
    pub rank: usize,
    pub upload_day: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub log: RequestLog,
    pub traits: Vec<VideoTraits>,
    /// Expected requests per video per day.
    pub popularity: Vec<Vec<f64>>,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (nu, nd, nt, nv) = (cfg.users, cfg.days, cfg.intervals, cfg.videos);
    let mut rng = cfg.seed.derive("traits").rng();

    let mut ranks: Vec<usize> = (1..=nv).collect();
    ranks.shuffle(&mut rng);
    let catalog = nv - cfg.daily_uploads * (nd - 1);
    let traits: Vec<VideoTraits> = (0..nv)
        .map(|v| {
            let upload_day = if v < catalog {
                -(rng.random_range(0..=cfg.catalog_age) as i64)
            } else {
                (1 + (v - catalog) / cfg.daily_uploads.max(1)) as i64
            };
            VideoTraits {
                profile: rng.random_range(0..cfg.profiles),
                peak_kind: rng.random::<f64>() < cfg.peak_share,
                rank: ranks[v],
                upload_day,
            }
        })
        .collect();
    // Diurnal shapes, each summing to one.
    let peak_len = cfg.peak_window.len() as f64;
    let off_len = (nt - cfg.peak_window.len()) as f64;
    let shape = |peak_kind: bool| -> Vec<f64> {
        let in_peak = if peak_kind { PEAK_KIND_MASS } else { 1.0 - PEAK_KIND_MASS };
        (0..nt)
            .map(|t| if cfg.in_peak(t) { in_peak / peak_len } else { (1.0 - in_peak) / off_len })
            .collect()
    };
    let shapes = [shape(false), shape(true)];
    let activity: Vec<f64> = (0..nu).map(|_| rng.random_range(-cfg.drift..=cfg.drift)).collect();

    // Unscaled intensity per (video, user, day, interval).
    let cell = |v: usize, u: usize, d: usize| ((v * nu + u) * nd + d) * nt;
    let mut smooth = vec![0.0; nv * nu * nd * nt];
    let mut burst = vec![0.0; nv * nu * nd * nt];
    let mut brng = cfg.seed.derive("bursts").rng();
    for (v, tr) in traits.iter().enumerate() {
        let fresh_on = |d: usize| {
            let age = d as i64 - tr.upload_day;
            let r = cfg.residual_interest;
            (age >= 0).then(|| r + (1.0 - r) * libm::exp(-(age as f64) / cfg.age_scale))
        };
        // Mean daily interest over the alive days follows Zipf.
        let alive: Vec<f64> = (0..nd).filter_map(fresh_on).collect();
        let mean_fresh = alive.iter().sum::<f64>() / alive.len().max(1) as f64;
        let pop = 1.0 / libm::pow(tr.rank as f64, cfg.zipf) / mean_fresh;
        let s = &shapes[tr.peak_kind as usize];
        for d in 0..nd {
            let Some(fresh) = fresh_on(d) else { continue };
            for u in 0..nu {
                let aff = if tr.peak_kind {
                    if cfg.profile_of(u) == tr.profile || cfg.profiles == 1 {
                        cfg.loyalty
                    } else {
                        (1.0 - cfg.loyalty) / (cfg.profiles - 1) as f64
                    }
                } else {
                    1.0 / cfg.profiles as f64
                };
                let act = libm::exp(activity[u] * (d as f64 / (nd.max(2) - 1) as f64 - 0.5));
                let m = pop * fresh * aff * act;
                let o = cell(v, u, d);
                for t in 0..nt {
                    smooth[o + t] = m * s[t];
                }
            }
            if cfg.burst_len > 0 && brng.random::<f64>() < cfg.burst_rate {
                let u = brng.random_range(0..nu);
                let t0 = brng.random_range(0..=nt - cfg.burst_len);
                let o = cell(v, u, d);
                for t in t0..t0 + cfg.burst_len {
                    burst[o + t] += cfg.burst_size;
                }
            }
        }
    }

    // Per day, choose a factor `a` for smooth peak intensity and `b` for smooth
    // off-peak intensity so that the day has the configured volume and the
    // configured per-interval peak:off-peak ratio, bursts included.
    let kappa = cfg.peak_ratio * peak_len / off_len;
    let mut factors = vec![(0.0, 0.0); nd];
    for (d, f) in factors.iter_mut().enumerate() {
        let (mut ps, mut os, mut pb, mut ob) = (0.0, 0.0, 0.0, 0.0);
        for v in 0..nv {
            for u in 0..nu {
                let o = cell(v, u, d);
                for t in 0..nt {
                    if cfg.in_peak(t) {
                        ps += smooth[o + t];
                        pb += burst[o + t];
                    } else {
                        os += smooth[o + t];
                        ob += burst[o + t];
                    }
                }
            }
        }
        if ps == 0.0 || os == 0.0 {
            continue;
        }
        let b = (cfg.daily_requests - pb - ob - kappa * ob + pb) / ((kappa + 1.0) * os);
        let a = (kappa * (os * b + ob) - pb) / ps;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::config("bursts alone exceed the daily volume or peak ratio"));
        }
        *f = (a, b);
    }

    let mut records = Vec::new();
    let mut popularity = vec![vec![0.0; nd]; nv];
    for v in 0..nv {
        let mut vrng = cfg.seed.derive("requests").index(v as u64).rng();
        for u in 0..nu {
            for d in 0..nd {
                let (a, b) = factors[d];
                let o = cell(v, u, d);
                for t in 0..nt {
                    let lambda = smooth[o + t] * if cfg.in_peak(t) { a } else { b } + burst[o + t];
                    if lambda <= 0.0 {
                        continue;
                    }
                    popularity[v][d] += lambda;
                    let count = Poisson::new(lambda).map_err(|_| Error::NonFinite("request intensity".into()))?.sample(&mut vrng);
                    if count > 0.0 {
                        records.push(LogRecord {
                            day: d as u32,
                            interval: t as u32,
                            video: v as u64,
                            user: u as u32,
                            count: count as u32,
                        });
                    }
                }
            }
        }
    }
    let uploads = traits.iter().enumerate().map(|(v, tr)| (v as u64, tr.upload_day)).collect();
    let log = RequestLog::new(nu, nd, nt, records, uploads)?;
    Ok(World {
        config: cfg.clone(),
        log,
        traits,
        popularity,
    })
}

/// Dense per-video `[users, days, intervals]` counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LogIndex {
    users: usize,
    days: usize,
    intervals: usize,
    series: BTreeMap<u64, Vec<f64>>,
    uploads: BTreeMap<u64, i64>,
}

impl LogIndex {
    pub fn new(log: &RequestLog) -> Self {
        let len = log.users * log.days * log.intervals;
        let mut series: BTreeMap<u64, Vec<f64>> = log.uploads.iter().map(|&(v, _)| (v, vec![0.0; len])).collect();
        for r in &log.records {
            let s = series.entry(r.video).or_insert_with(|| vec![0.0; len]);
            s[(r.user as usize * log.days + r.day as usize) * log.intervals + r.interval as usize] += f64::from(r.count);
        }
        LogIndex {
            users: log.users,
            days: log.days,
            intervals: log.intervals,
            series,
            uploads: log.uploads.iter().copied().collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.users, self.days, self.intervals]
    }

    pub fn videos(&self) -> impl Iterator<Item = u64> + '_ {
        self.series.keys().copied()
    }

    /// Upload day; videos seen only in the log count as present from day 0.
    pub fn upload_day(&self, video: u64) -> i64 {
        self.uploads.get(&video).copied().unwrap_or(0)
    }

    /// Days `start..start + len` of one video.
    pub fn window(&self, video: u64, start: usize, len: usize) -> Result<RequestTensor> {
        if start + len > self.days {
            return Err(Error::TooShort {
                needed: start + len,
                got: self.days,
            });
        }
        let s = self.series.get(&video).ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(self.users * len * self.intervals);
        for u in 0..self.users {
            let o = (u * self.days + start) * self.intervals;
            data.extend_from_slice(&s[o..o + len * self.intervals]);
        }
        RequestTensor::from_vec(self.users, len, self.intervals, data)
    }

    /// Per-(user, day, interval) totals over every video.
    pub fn totals(&self) -> RequestTensor {
        let mut t = RequestTensor::zeros(self.users, self.days, self.intervals);
        for s in self.series.values() {
            for u in 0..self.users {
                for d in 0..self.days {
                    let o = (u * self.days + d) * self.intervals;
                    for (k, &x) in s[o..o + self.intervals].iter().enumerate() {
                        if x != 0.0 {
                            t.add(u, d, k, x);
                        }
                    }
                }
            }
        }
        t
    }

    /// Full-horizon series of every (video, user) pair that has requests.
    pub fn user_series(&self) -> Vec<Vec<f64>> {
        let len = self.days * self.intervals;
        let mut out = Vec::new();
        for s in self.series.values() {
            for u in 0..self.users {
                let seq = &s[u * len..(u + 1) * len];
                if seq.iter().any(|&x| x > 0.0) {
                    out.push(seq.to_vec());
                }
            }
        }
        out
    }
}

/// Per-interval peak load over per-interval off-peak load, pooled over the log.
pub fn peak_load_ratio(log: &RequestLog, peak_window: &[usize]) -> f64 {
    let (mut p, mut o) = (0.0, 0.0);
    for r in &log.records {
        if peak_window.contains(&(r.interval as usize)) {
            p += f64::from(r.count);
        } else {
            o += f64::from(r.count);
        }
    }
    let off = (log.intervals - peak_window.len()) as f64;
    (p / peak_window.len() as f64) / (o / off)
}

/// Request totals per video, descending. With `uploaded_before`, videos
/// uploaded on or after that day are left out.
pub fn rank_frequency(log: &RequestLog, uploaded_before: Option<i64>) -> Vec<u64> {
    let keep = |day: i64| uploaded_before.is_none_or(|cut| day < cut);
    let mut per: BTreeMap<u64, u64> = log.uploads.iter().filter(|&&(_, d)| keep(d)).map(|&(v, _)| (v, 0)).collect();
    for r in &log.records {
        if let Some(c) = per.get_mut(&r.video) {
            *c += u64::from(r.count);
        } else if uploaded_before.is_none() {
            per.insert(r.video, u64::from(r.count));
        }
    }
    let mut f: Vec<u64> = per.into_values().collect();
    f.sort_unstable_by(|a, b| b.cmp(a));
    f
}

/// Share of all requests carried by the top `fraction` of videos.
pub fn head_share(freq: &[u64], fraction: f64) -> f64 {
    let total: u64 = freq.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = libm::ceil(freq.len() as f64 * fraction) as usize;
    freq.iter().take(n.max(1)).sum::<u64>() as f64 / total as f64
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("pearson", &[xs.len()], &[ys.len()]));
    }
    if xs.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: xs.len() });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityReport {
    /// Mean |difference of adjacent window means| of the raw series.
    pub raw: f64,
    /// The same after first-order differencing.
    pub differenced: f64,
    pub sequences: usize,
}

/// Mean absolute change between a sliding window's mean and the next
/// window's mean; `x` needs at least `2·window` points.
pub fn difference_of_means(x: &[f64], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::config("window must be positive"));
    }
    if x.len() < 2 * window {
        return Err(Error::TooShort {
            needed: 2 * window,
            got: x.len(),
        });
    }
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    let w = window as f64;
    let steps = x.len() - 2 * window + 1;
    let mut acc = 0.0;
    for k in 0..steps {
        let a = (prefix[k + window] - prefix[k]) / w;
        let b = (prefix[k + 2 * window] - prefix[k + window]) / w;
        acc += (b - a).abs();
    }
    Ok(acc / steps as f64)
}

/// Raw and first-differenced [`difference_of_means`], averaged over sequences.
pub fn stationarity_report(sequences: &[Vec<f64>], window: usize) -> Result<StationarityReport> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut raw, mut diff) = (0.0, 0.0);
    for s in sequences {
        if s.len() < 2 * window + 1 {
            return Err(Error::TooShort {
                needed: 2 * window + 1,
                got: s.len(),
            });
        }
        raw += difference_of_means(s, window)?;
        let d: Vec<f64> = s.windows(2).map(|p| p[1] - p[0]).collect();
        diff += difference_of_means(&d, window)?;
    }
    let n = sequences.len() as f64;
    Ok(StationarityReport {
        raw: raw / n,
        differenced: diff / n,
        sequences: sequences.len(),
    })
}

/// One clustered video for [`cluster_quality_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMember {
    pub cluster: usize,
    pub encoding: [f64; 2],
    pub requests: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanCv {
    pub mean: f64,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterQuality {
    pub intra: MeanCv,
    pub inter: MeanCv,
    pub ns: MeanCv,
    pub l1: MeanCv,
    pub l2: MeanCv,
    /// Over populated blocks, like `corr_nv_ad`; `None` when a side has zero
    /// variance.
    pub corr_nv_area: Option<f64>,
    /// Over populated blocks.
    pub corr_nv_ad: Option<f64>,
    pub populated: usize,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(x) => Ok(Some(x)),
        Err(Error::ZeroVariance) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean_cv(xs: &[f64]) -> MeanCv {
    if xs.is_empty() {
        return MeanCv::default();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let cv = if mean != 0.0 { libm::sqrt(var) / mean.abs() } else { 0.0 };
    MeanCv { mean, cv }
}

/// Pairwise inner products within vs across clusters, per-cluster sparsity
/// densities, and how the member count tracks block area and spread.
pub fn cluster_quality_report(members: &[ClusterMember], partition: &BlockPartition) -> Result<ClusterQuality> {
    let blocks = partition.cluster_count();
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, m) in members.iter().enumerate() {
        if m.cluster >= blocks {
            return Err(Error::config("cluster index outside the partition"));
        }
        by_cluster.entry(m.cluster).or_default().push(k);
    }
    if by_cluster.len() < 2 {
        return Err(Error::TooFewClusters);
    }
    let len = members[0].requests.len();
    if members.iter().any(|m| m.requests.len() != len) {
        return Err(Error::config("request vectors must share a length"));
    }

    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for a in 0..members.len() {
        for b in a + 1..members.len() {
            let ip = crate::tensor::dot(&members[a].requests, &members[b].requests);
            if members[a].cluster == members[b].cluster {
                intra.push(ip);
            } else {
                inter.push(ip);
            }
        }
    }

    let (mut ns, mut l1, mut l2) = (Vec::new(), Vec::new(), Vec::new());
    let mut nv_pop = Vec::new();
    let mut ad = Vec::new();
    let mut areas = Vec::new();
    for (&c, idx) in &by_cluster {
        let mut acc = vec![0.0; len];
        for &k in idx {
            crate::tensor::add_assign(&mut acc, &members[k].requests);
        }
        let n = len as f64;
        ns.push(acc.iter().filter(|&&x| x != 0.0).count() as f64 / n);
        l1.push(acc.iter().map(|x| x.abs()).sum::<f64>() / n);
        l2.push(crate::tensor::norm(&acc) / n);
        let center = partition.center(c);
        let dist: f64 = idx
            .iter()
            .map(|&k| {
                let e = members[k].encoding;
                libm::sqrt((e[0] - center[0]) * (e[0] - center[0]) + (e[1] - center[1]) * (e[1] - center[1]))
            })
            .sum();
        nv_pop.push(idx.len() as f64);
        ad.push(dist / idx.len() as f64);
        areas.push(partition.area(c));
    }

    Ok(ClusterQuality {
        intra: mean_cv(&intra),
        inter: mean_cv(&inter),
        ns: mean_cv(&ns),
        l1: mean_cv(&l1),
        l2: mean_cv(&l2),
        corr_nv_area: defined(pearson(&nv_pop, &areas))?,
        corr_nv_ad: defined(pearson(&nv_pop, &ad))?,
        populated: by_cluster.len(),
    })
}
