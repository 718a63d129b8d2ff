//! On-disk formats: request logs, plans and traces as CSV, models as binary
//! checkpoints, reports as JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vodnet_core::checkpoint;
use vodnet_core::dispatch::{Dispatch, DispatchPlan};
use vodnet_core::trainer::TraceRow;
use vodnet_core::worldgen::{LogRecord, RequestLog};
use vodnet_core::ParamSet;

use crate::error::{CliError, Result};

pub const LOG_FILE: &str = "log.csv";
pub const UPLOADS_FILE: &str = "uploads.csv";

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    video_id: u64,
    user_id: u32,
    day: u32,
    interval: u32,
    count: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct UploadRow {
    video_id: u64,
    upload_day: i64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PlanRow {
    pub cdn_id: usize,
    pub rank: usize,
    pub video_id: u64,
    pub cluster: usize,
    pub cp: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct BaselineRow {
    pub cdn_id: usize,
    pub video_id: u64,
    pub interval: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceCsvRow {
    iteration: u64,
    loss: f64,
    temporal_version: u64,
    clustering_version: u64,
    policy_version: u64,
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, format!("{other:?}")),
    }
}

/// `log.csv` and `uploads.csv` inside `dir`.
pub fn write_log(dir: &Path, log: &RequestLog) -> Result<()> {
    ensure_dir(dir)?;
    write_rows(
        &dir.join(LOG_FILE),
        log.records.iter().map(|r| LogRow {
            video_id: r.video,
            user_id: r.user,
            day: r.day,
            interval: r.interval,
            count: r.count,
        }),
    )?;
    write_rows(
        &dir.join(UPLOADS_FILE),
        log.uploads.iter().map(|&(video_id, upload_day)| UploadRow { video_id, upload_day }),
    )
}

/// Read a log written by [`write_log`], checking it against the expected dimensions.
pub fn read_log(dir: &Path, users: usize, days: usize, intervals: usize) -> Result<RequestLog> {
    let path = dir.join(LOG_FILE);
    let records = read_rows::<LogRow>(&path)?
        .into_iter()
        .map(|r| LogRecord {
            day: r.day,
            interval: r.interval,
            video: r.video_id,
            user: r.user_id,
            count: r.count,
        })
        .collect();
    let uploads = read_rows::<UploadRow>(&dir.join(UPLOADS_FILE))?.into_iter().map(|r| (r.video_id, r.upload_day)).collect();
    RequestLog::new(users, days, intervals, records, uploads).map_err(|e| CliError::format(&path, e))
}

pub fn plan_rows(plan: &DispatchPlan) -> Vec<PlanRow> {
    plan.per_cdn
        .iter()
        .enumerate()
        .flat_map(|(cdn_id, list)| {
            list.iter().enumerate().map(move |(rank, e)| PlanRow {
                cdn_id,
                rank,
                video_id: e.video,
                cluster: e.cluster,
                cp: e.cp,
            })
        })
        .collect()
}

pub fn write_plan(path: &Path, plan: &DispatchPlan) -> Result<()> {
    write_rows(path, plan_rows(plan))
}

pub fn read_plan(path: &Path) -> Result<Vec<PlanRow>> {
    read_rows(path)
}

pub fn write_baseline(path: &Path, dispatches: &[Dispatch]) -> Result<()> {
    write_rows(
        path,
        dispatches.iter().map(|d| BaselineRow {
            cdn_id: d.cdn,
            video_id: d.video,
            interval: d.interval,
        }),
    )
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_rows(
        path,
        rows.iter().map(|r| TraceCsvRow {
            iteration: r.iteration,
            loss: r.loss,
            temporal_version: r.temporal_version,
            clustering_version: r.clustering_version,
            policy_version: r.policy_version,
        }),
    )
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    Ok(read_rows::<TraceCsvRow>(path)?
        .into_iter()
        .map(|r| TraceRow {
            iteration: r.iteration,
            loss: r.loss,
            temporal_version: r.temporal_version,
            clustering_version: r.clustering_version,
            policy_version: r.policy_version,
        })
        .collect())
}

/// One `rank,frequency` row per video, most requested first.
pub fn write_rank_frequency(path: &Path, freq: &[u64]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        rank: usize,
        frequency: u64,
    }
    write_rows(path, freq.iter().enumerate().map(|(i, &frequency)| Row { rank: i + 1, frequency }))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, checkpoint::encode(params)).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    checkpoint::decode(&bytes).map_err(|e| CliError::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vodnet_core::worldgen::{generate_world, WorldConfig};
    use vodnet_core::Seed;

    fn small_world() -> vodnet_core::worldgen::World {
        let mut cfg = WorldConfig::reference(Seed(3));
        cfg.videos = 60;
        cfg.days = 4;
        cfg.daily_uploads = 5;
        cfg.daily_requests = 500.0;
        generate_world(&cfg).unwrap()
    }

    #[test]
    fn log_round_trip() {
        let world = small_world();
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), &world.log).unwrap();
        let back = read_log(dir.path(), world.log.users, world.log.days, world.log.intervals).unwrap();
        assert_eq!(back, world.log);
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert!(text.starts_with("video_id,user_id,day,interval,count\n"));
        let up = fs::read_to_string(dir.path().join(UPLOADS_FILE)).unwrap();
        assert!(up.starts_with("video_id,upload_day\n"));
    }

    #[test]
    fn log_with_wrong_dimensions_is_rejected() {
        let world = small_world();
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), &world.log).unwrap();
        assert!(matches!(read_log(dir.path(), 2, 4, 24), Err(CliError::Format { .. })));
    }

    #[test]
    fn missing_files_are_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let e = read_log(&dir.path().join("nowhere"), 8, 4, 24).unwrap_err();
        assert_eq!(e.exit_code(), 4, "{e}");
        assert_eq!(load_checkpoint(&dir.path().join("x.ckpt")).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn trace_round_trip() {
        let rows = vec![
            TraceRow {
                iteration: 1,
                loss: 0.25,
                temporal_version: 2,
                clustering_version: 0,
                policy_version: 2,
            },
            TraceRow {
                iteration: 2,
                loss: 1.0 / 3.0,
                temporal_version: 3,
                clustering_version: 1,
                policy_version: 3,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trace(&p, &rows).unwrap();
        assert_eq!(read_trace(&p).unwrap(), rows);
        assert!(fs::read_to_string(&p).unwrap().starts_with("iteration,loss,temporal_version,clustering_version,policy_version\n"));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let mut ps = ParamSet::new();
        ps.insert("policy.w", vodnet_core::Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap());
        ps.set_version(9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("policy.ckpt");
        save_checkpoint(&p, &ps).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ps);
        assert_eq!(back.version(), 9);
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CliError::Format { .. })));
    }
}
