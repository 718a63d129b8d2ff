//! Flat `key=value` run configuration.
//!
//! Every key has a default; files and flags override them in that order, and
//! the fully resolved map is what gets echoed next to the outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use vodnet_core::temporal::{PeakScope, TemporalConfig};
use vodnet_core::trainer::{ModelConfig, TrainConfig};
use vodnet_core::worldgen::WorldConfig;
use vodnet_core::Seed;

use crate::error::{CliError, Result};

/// Raw key=value pairs, always holding every known key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Typed view of a [`RunConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scope: PeakScope,
    /// Day held out for evaluation; training sees only earlier days.
    pub holdout: usize,
    /// Dispatches per CDN.
    pub budget: usize,
    pub capacity: f64,
    pub threshold_h: f64,
    pub threshold_p: usize,
    /// Async trainer gives up after this long without progress.
    pub stall_timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_resolved(&Resolved::defaults(0))
    }
}

impl RunConfig {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Override one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Apply `key=value` lines; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.merge_text(&text)
    }

    /// One `key=value` line per key, sorted.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let g = |k: &str| self.values[k].as_str();
        let seed: u64 = parse(g("seed"), "seed")?;
        let world = WorldConfig {
            users: parse(g("world.users"), "world.users")?,
            cdns: parse(g("world.cdns"), "world.cdns")?,
            serving: parse_serving(g("world.serving"))?,
            videos: parse(g("world.videos"), "world.videos")?,
            days: parse(g("world.days"), "world.days")?,
            intervals: parse(g("world.intervals"), "world.intervals")?,
            peak_window: parse_list(g("world.peak_window"), "world.peak_window")?,
            zipf: parse(g("world.zipf"), "world.zipf")?,
            daily_uploads: parse(g("world.daily_uploads"), "world.daily_uploads")?,
            catalog_age: parse(g("world.catalog_age"), "world.catalog_age")?,
            profiles: parse(g("world.profiles"), "world.profiles")?,
            loyalty: parse(g("world.loyalty"), "world.loyalty")?,
            peak_share: parse(g("world.peak_share"), "world.peak_share")?,
            peak_ratio: parse(g("world.peak_ratio"), "world.peak_ratio")?,
            daily_requests: parse(g("world.daily_requests"), "world.daily_requests")?,
            age_scale: parse(g("world.age_scale"), "world.age_scale")?,
            residual_interest: parse(g("world.residual_interest"), "world.residual_interest")?,
            drift: parse(g("world.drift"), "world.drift")?,
            burst_rate: parse(g("world.burst_rate"), "world.burst_rate")?,
            burst_len: parse(g("world.burst_len"), "world.burst_len")?,
            burst_size: parse(g("world.burst_size"), "world.burst_size")?,
            seed: Seed(seed),
        };
        world.validate()?;
        let temporal = TemporalConfig::new(
            world.intervals,
            parse(g("model.peaks"), "model.peaks")?,
            parse(g("model.days"), "model.days")?,
            parse(g("model.conv_width"), "model.conv_width")?,
            parse_pair(g("model.row_shape"), "model.row_shape")?,
            parse_pair(g("model.column_shape"), "model.column_shape")?,
            parse_pair(g("model.block_grid"), "model.block_grid")?,
            parse_pair(g("model.block_tile"), "model.block_tile")?,
            parse(g("model.hidden"), "model.hidden")?,
        )?;
        let model = ModelConfig {
            temporal,
            users: world.users,
            ae_hidden: parse_list(g("model.ae_hidden"), "model.ae_hidden")?,
            head_hidden: parse_list(g("model.head_hidden"), "model.head_hidden")?,
            ndh: parse(g("model.ndh"), "model.ndh")?,
            budget: parse(g("model.cluster_budget"), "model.cluster_budget")?,
            omega: parse(g("model.omega"), "model.omega")?,
            target_window: world.peak_window.clone(),
        };
        model.validate()?;
        let train = TrainConfig {
            policy_batch: parse(g("train.policy_batch"), "train.policy_batch")?,
            cluster_batch: parse(g("train.cluster_batch"), "train.cluster_batch")?,
            policy_iterations: parse(g("train.policy_iterations"), "train.policy_iterations")?,
            cluster_iterations: parse(g("train.cluster_iterations"), "train.cluster_iterations")?,
            fetch_period: parse(g("train.fetch_period"), "train.fetch_period")?,
            warmup: parse(g("train.warmup"), "train.warmup")?,
            temporal_rate: parse(g("train.temporal_rate"), "train.temporal_rate")?,
            head_rate: parse(g("train.head_rate"), "train.head_rate")?,
            ae_rate: parse(g("train.ae_rate"), "train.ae_rate")?,
            decay: parse(g("train.decay"), "train.decay")?,
            shuffle: parse(g("train.shuffle"), "train.shuffle")?,
            seed: Seed(seed),
            divergence_limit: parse(g("train.divergence_limit"), "train.divergence_limit")?,
        };
        train.validate()?;
        let scope = match g("model.peak_scope") {
            "corpus" => PeakScope::Corpus,
            "batch" => PeakScope::Batch,
            other => return Err(CliError::Config(format!("model.peak_scope: expected corpus or batch, got `{other}`"))),
        };
        let holdout: usize = parse(g("dispatch.holdout"), "dispatch.holdout")?;
        if holdout >= world.days || holdout < model.temporal.days + 1 {
            return Err(CliError::Config(format!(
                "dispatch.holdout must lie in [{}, {})",
                model.temporal.days + 1,
                world.days
            )));
        }
        let budget: usize = parse(g("dispatch.budget"), "dispatch.budget")?;
        if budget == 0 {
            return Err(CliError::Config("dispatch.budget must be positive".into()));
        }
        let threshold_h: f64 = parse(g("dispatch.h"), "dispatch.h")?;
        let threshold_p: usize = parse(g("dispatch.p"), "dispatch.p")?;
        if !(threshold_h >= 0.0) || threshold_p == 0 {
            return Err(CliError::Config("dispatch.h must be >= 0 and dispatch.p >= 1".into()));
        }
        Ok(Resolved {
            seed,
            world,
            model,
            train,
            scope,
            holdout,
            budget,
            capacity: parse(g("dispatch.capacity"), "dispatch.capacity")?,
            threshold_h,
            threshold_p,
            stall_timeout_secs: parse(g("train.stall_timeout_secs"), "train.stall_timeout_secs")?,
        })
    }

    pub fn from_resolved(r: &Resolved) -> Self {
        let w = &r.world;
        let m = &r.model;
        let t = &r.train;
        let list = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let pair = |(a, b): (usize, usize)| format!("{a}x{b}");
        let serving = w.serving.iter().map(|s| list(s)).collect::<Vec<_>>().join("|");
        let entries: Vec<(&str, String)> = vec![
            ("seed", r.seed.to_string()),
            ("world.users", w.users.to_string()),
            ("world.cdns", w.cdns.to_string()),
            ("world.serving", serving),
            ("world.videos", w.videos.to_string()),
            ("world.days", w.days.to_string()),
            ("world.intervals", w.intervals.to_string()),
            ("world.peak_window", list(&w.peak_window)),
            ("world.zipf", w.zipf.to_string()),
            ("world.daily_uploads", w.daily_uploads.to_string()),
            ("world.catalog_age", w.catalog_age.to_string()),
            ("world.profiles", w.profiles.to_string()),
            ("world.loyalty", w.loyalty.to_string()),
            ("world.peak_share", w.peak_share.to_string()),
            ("world.peak_ratio", w.peak_ratio.to_string()),
            ("world.daily_requests", w.daily_requests.to_string()),
            ("world.age_scale", w.age_scale.to_string()),
            ("world.residual_interest", w.residual_interest.to_string()),
            ("world.drift", w.drift.to_string()),
            ("world.burst_rate", w.burst_rate.to_string()),
            ("world.burst_len", w.burst_len.to_string()),
            ("world.burst_size", w.burst_size.to_string()),
            ("model.peaks", m.temporal.peaks.to_string()),
            ("model.days", m.temporal.days.to_string()),
            ("model.conv_width", m.temporal.conv_width.to_string()),
            ("model.row_shape", pair(m.temporal.row_shape)),
            ("model.column_shape", pair(m.temporal.column_shape)),
            ("model.block_grid", pair(m.temporal.block_grid)),
            ("model.block_tile", pair(m.temporal.block_tile)),
            ("model.hidden", m.temporal.hidden.to_string()),
            ("model.ae_hidden", list(&m.ae_hidden)),
            ("model.head_hidden", list(&m.head_hidden)),
            ("model.ndh", m.ndh.to_string()),
            ("model.cluster_budget", m.budget.to_string()),
            ("model.omega", m.omega.to_string()),
            (
                "model.peak_scope",
                match r.scope {
                    PeakScope::Corpus => "corpus".into(),
                    PeakScope::Batch => "batch".into(),
                },
            ),
            ("train.policy_batch", t.policy_batch.to_string()),
            ("train.cluster_batch", t.cluster_batch.to_string()),
            ("train.policy_iterations", t.policy_iterations.to_string()),
            ("train.cluster_iterations", t.cluster_iterations.to_string()),
            ("train.fetch_period", t.fetch_period.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.temporal_rate", t.temporal_rate.to_string()),
            ("train.head_rate", t.head_rate.to_string()),
            ("train.ae_rate", t.ae_rate.to_string()),
            ("train.decay", t.decay.to_string()),
            ("train.shuffle", t.shuffle.to_string()),
            ("train.divergence_limit", t.divergence_limit.to_string()),
            ("train.stall_timeout_secs", r.stall_timeout_secs.to_string()),
            ("dispatch.holdout", r.holdout.to_string()),
            ("dispatch.budget", r.budget.to_string()),
            ("dispatch.capacity", r.capacity.to_string()),
            ("dispatch.h", r.threshold_h.to_string()),
            ("dispatch.p", r.threshold_p.to_string()),
        ];
        RunConfig {
            values: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl Resolved {
    /// The reference world, the desk model and the default schedule.
    pub fn defaults(seed: u64) -> Self {
        let world = WorldConfig::reference(Seed(seed));
        let model = ModelConfig::desk(world.users, world.peak_window.clone());
        Resolved {
            seed,
            holdout: world.days - 1,
            world,
            model,
            train: TrainConfig::desk(Seed(seed)),
            scope: PeakScope::Corpus,
            budget: 20,
            capacity: f64::INFINITY,
            threshold_h: 1.0,
            threshold_p: 2,
            stall_timeout_secs: 300,
        }
    }
}

fn parse<T: FromStr>(s: &str, key: &str) -> Result<T>
where
    T::Err: Display,
{
    s.parse().map_err(|e| CliError::Config(format!("{key}: cannot parse `{s}`: {e}")))
}

fn parse_list<T: FromStr>(s: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| parse(x.trim(), key)).collect()
}

fn parse_pair(s: &str, key: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once('x').ok_or_else(|| CliError::Config(format!("{key}: expected AxB, got `{s}`")))?;
    Ok((parse(a.trim(), key)?, parse(b.trim(), key)?))
}

/// `0|0|0,1`: CDN lists per user, users separated by `|`.
fn parse_serving(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split('|').map(|u| parse_list(u.trim(), "world.serving")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let r = cfg.resolve().unwrap();
        assert_eq!(r, Resolved::defaults(0));
        let mut again = RunConfig::default();
        again.merge_text(&cfg.render()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.merge_text("world.users=8\nworld.color=blue\n").unwrap_err();
        assert!(matches!(err, CliError::Config(m) if m.contains("world.color")));
    }

    #[test]
    fn overrides_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.merge_text("# comment\n\nseed = 7\ntrain.shuffle=false\nworld.peak_window=20,21,22,23\nmodel.peak_scope=batch\n").unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.seed, 7);
        assert_eq!(r.world.seed, Seed(7));
        assert!(!r.train.shuffle);
        assert_eq!(r.model.target_window, vec![20, 21, 22, 23]);
        assert_eq!(r.scope, PeakScope::Batch);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for line in ["world.users=eight", "dispatch.holdout=3", "model.row_shape=6by4", "dispatch.p=0", "model.peak_scope=global"] {
            let mut cfg = RunConfig::default();
            cfg.merge_text(line).unwrap();
            let e = cfg.resolve().unwrap_err();
            assert_eq!(e.exit_code(), 2, "{line}: {e}");
        }
        let mut cfg = RunConfig::default();
        assert!(cfg.merge_text("no equals sign").is_err());
    }
}
