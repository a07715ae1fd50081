//! On-disk logs: the trajectory JSONL stream, the metrics CSV and the tidy
//! plotting export.
//!
//! A trajectory line looks like
//!
//! ```json
//! {"episode_id":3,"t":0,"obs":[[0.0,1.0],[1.0,0.0]],"action":[4,1],
//!  "reward_raw":-0.01,"reward_smoothed":-0.01,"continuation":1.0,"source":"real"}
//! ```
//!
//! An episode of `L` transitions has `L + 1` lines; the last one carries the
//! final observation and nulls elsewhere. Pseudo lines have a null
//! `reward_raw` and the predicted reward in `reward_smoothed`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::buffer::{EpisodeMeta, EpisodeTrajectory, PseudoSegment};
use crate::error::{GawmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub episode_id: u64,
    pub t: usize,
    pub obs: Vec<Vec<f64>>,
    pub action: Option<Vec<usize>>,
    pub reward_raw: Option<f64>,
    pub reward_smoothed: Option<f64>,
    pub continuation: Option<f64>,
    pub source: Source,
}

fn rows(t: &crate::autograd::Tensor) -> Vec<Vec<f64>> {
    t.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn episode_records(ep: &EpisodeTrajectory) -> Vec<TrajectoryRecord> {
    let l = ep.len();
    (0..=l)
        .map(|t| TrajectoryRecord {
            episode_id: ep.episode_id,
            t,
            obs: rows(&ep.observations[t]),
            action: ep.actions.get(t).cloned(),
            reward_raw: ep.rewards_raw.get(t).copied(),
            reward_smoothed: ep.rewards_smoothed.get(t).copied(),
            continuation: ep.continuations.get(t).copied(),
            source: Source::Real,
        })
        .collect()
}

pub fn segment_records(seg: &PseudoSegment, segment_id: u64) -> Vec<TrajectoryRecord> {
    (0..=seg.len())
        .map(|t| TrajectoryRecord {
            episode_id: segment_id,
            t,
            obs: rows(&seg.observations[t]),
            action: seg.actions.get(t).cloned(),
            reward_raw: None,
            reward_smoothed: seg.rewards.get(t).copied(),
            continuation: seg.continuations.get(t).copied(),
            source: Source::Pseudo,
        })
        .collect()
}

/// Appends JSON lines to a file.
pub struct TrajectoryWriter {
    out: BufWriter<File>,
    path: String,
}

impl TrajectoryWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| GawmError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.display().to_string(),
        })
    }

    pub fn write(&mut self, records: &[TrajectoryRecord]) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut self.out, r)?;
            self.out
                .write_all(b"\n")
                .map_err(|e| GawmError::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| GawmError::io(&self.path, e))
    }
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GawmError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GawmError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| GawmError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Regroups real records into episodes, in order of first appearance. The
/// log does not carry episode metadata, so `meta` gets `env` and a success
/// flag read off a positive final reward.
pub fn episodes_from_records(records: &[TrajectoryRecord], env: &str) -> Result<Vec<EpisodeTrajectory>> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<u64, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.source == Source::Real) {
        let g = groups.entry(r.episode_id).or_default();
        if g.is_empty() {
            order.push(r.episode_id);
        }
        g.push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let mut steps = groups.remove(&id).expect("grouped");
            steps.sort_by_key(|r| r.t);
            if steps.iter().enumerate().any(|(i, r)| r.t != i) {
                return Err(GawmError::Format(format!("episode {id} has missing or repeated steps")));
            }
            let l = steps.len() - 1;
            let field = |name: &str, v: Option<f64>, t: usize| {
                v.ok_or_else(|| GawmError::Format(format!("episode {id} step {t}: missing {name}")))
            };
            let mut ep = EpisodeTrajectory {
                episode_id: id,
                observations: Vec::with_capacity(l + 1),
                actions: Vec::with_capacity(l),
                rewards_raw: Vec::with_capacity(l),
                rewards_smoothed: Vec::with_capacity(l),
                continuations: Vec::with_capacity(l),
                meta: EpisodeMeta {
                    seed: 0,
                    env: env.to_string(),
                    success: false,
                },
            };
            for r in &steps {
                let n = r.obs.len();
                let d = r.obs.first().map_or(0, Vec::len);
                let flat: Vec<f64> = r.obs.iter().flatten().copied().collect();
                let obs = Array2::from_shape_vec((n, d), flat)
                    .map_err(|_| GawmError::Format(format!("episode {id} step {}: ragged obs", r.t)))?;
                ep.observations.push(obs);
                if r.t < l {
                    ep.actions.push(
                        r.action
                            .clone()
                            .ok_or_else(|| GawmError::Format(format!("episode {id} step {}: missing action", r.t)))?,
                    );
                    ep.rewards_raw.push(field("reward_raw", r.reward_raw, r.t)?);
                    ep.rewards_smoothed.push(field("reward_smoothed", r.reward_smoothed, r.t)?);
                    ep.continuations.push(field("continuation", r.continuation, r.t)?);
                }
            }
            ep.meta.success = ep.rewards_raw.last().is_some_and(|&r| r > 0.0);
            ep.validate().map_err(|e| GawmError::Format(e.to_string()))?;
            Ok(ep)
        })
        .collect()
}

/// One row of the metrics CSV. `eval_success_rate` is blank for iterations
/// without an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub outer_episode: usize,
    pub env_steps: usize,
    pub wm_obs_nll: f64,
    pub wm_reward_nll: f64,
    pub wm_discount_nll: f64,
    pub wm_kl: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub eval_success_rate: Option<f64>,
}

pub const METRICS_HEADER: [&str; 9] = [
    "outer_episode",
    "env_steps",
    "wm_obs_nll",
    "wm_reward_nll",
    "wm_discount_nll",
    "wm_kl",
    "actor_loss",
    "value_loss",
    "eval_success_rate",
];

/// Append-only metrics file; the header is written when the file is empty.
pub struct MetricsWriter {
    out: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GawmError::io(path, e))?;
        let fresh = file.metadata().map_err(|e| GawmError::io(path, e))?.len() == 0;
        let out = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.out.serialize(row)?;
        self.out.flush().map_err(|e| GawmError::Format(e.to_string()))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => GawmError::io(path, io),
        other => GawmError::Format(format!("{}: {other:?}", path.display())),
    })?;
    let header = reader.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(GawmError::Format(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e: csv::Error| GawmError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// One line of the tidy plotting export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub run_id: String,
    pub env_steps: f64,
    pub metric: String,
    pub value: f64,
}

/// Long-format rows for every run plus a `mean` series that averages the
/// runs row by row (row `i` of each run is its `i`-th outer iteration).
/// Blank cells are skipped; the averaged `env_steps` is the mean over the
/// runs contributing to that point.
pub fn tidy_export(runs: &[(String, Vec<MetricsRow>)]) -> Vec<TidyRow> {
    type Getter = fn(&MetricsRow) -> Option<f64>;
    let metrics: [(&str, Getter); 7] = [
        ("wm_obs_nll", |r| Some(r.wm_obs_nll)),
        ("wm_reward_nll", |r| Some(r.wm_reward_nll)),
        ("wm_discount_nll", |r| Some(r.wm_discount_nll)),
        ("wm_kl", |r| Some(r.wm_kl)),
        ("actor_loss", |r| Some(r.actor_loss)),
        ("value_loss", |r| Some(r.value_loss)),
        ("eval_success_rate", |r| r.eval_success_rate),
    ];
    let mut out = Vec::new();
    for (run_id, rows) in runs {
        for row in rows {
            for (name, get) in &metrics {
                if let Some(v) = get(row) {
                    out.push(TidyRow {
                        run_id: run_id.clone(),
                        env_steps: row.env_steps as f64,
                        metric: name.to_string(),
                        value: v,
                    });
                }
            }
        }
    }
    let longest = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    for (name, get) in &metrics {
        for i in 0..longest {
            let points: Vec<(f64, f64)> = runs
                .iter()
                .filter_map(|(_, rows)| rows.get(i))
                .filter_map(|r| get(r).map(|v| (r.env_steps as f64, v)))
                .collect();
            if points.is_empty() {
                continue;
            }
            let n = points.len() as f64;
            out.push(TidyRow {
                run_id: "mean".into(),
                env_steps: points.iter().map(|p| p.0).sum::<f64>() / n,
                metric: name.to_string(),
                value: points.iter().map(|p| p.1).sum::<f64>() / n,
            });
        }
    }
    out
}

pub fn write_tidy(path: impl AsRef<Path>, rows: &[TidyRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| GawmError::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| GawmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, steps: usize, eval: Option<f64>) -> MetricsRow {
        MetricsRow {
            outer_episode: i,
            env_steps: steps,
            wm_obs_nll: i as f64,
            wm_reward_nll: 0.5,
            wm_discount_nll: 0.25,
            wm_kl: 1.0,
            actor_loss: -0.1,
            value_loss: 0.2,
            eval_success_rate: eval,
        }
    }

    #[test]
    fn metrics_round_trip_with_blank_eval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        {
            let mut w = MetricsWriter::open(&path).unwrap();
            w.write(&row(0, 10, None)).unwrap();
        }
        {
            let mut w = MetricsWriter::open(&path).unwrap();
            w.write(&row(1, 20, Some(0.5))).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert!(text.lines().nth(1).unwrap().ends_with(','));
        assert_eq!(read_metrics(&path).unwrap(), vec![row(0, 10, None), row(1, 20, Some(0.5))]);
    }

    #[test]
    fn bad_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_metrics(&path), Err(GawmError::Format(_))));
    }

    #[test]
    fn single_run_mean_is_the_run() {
        let rows = vec![row(0, 10, None), row(1, 25, Some(0.2))];
        let tidy = tidy_export(&[("a".into(), rows)]);
        let own: Vec<_> = tidy.iter().filter(|r| r.run_id == "a").collect();
        let mean: Vec<_> = tidy.iter().filter(|r| r.run_id == "mean").collect();
        assert_eq!(own.len(), mean.len());
        for m in &mean {
            assert!(own
                .iter()
                .any(|o| o.metric == m.metric && o.env_steps == m.env_steps && o.value == m.value));
        }
    }

    #[test]
    fn mean_over_three_runs() {
        let runs: Vec<(String, Vec<MetricsRow>)> = (0..3)
            .map(|s| (format!("seed{s}"), vec![row(s, 10 * (s + 1), Some(s as f64))]))
            .collect();
        let tidy = tidy_export(&runs);
        let m = tidy
            .iter()
            .find(|r| r.run_id == "mean" && r.metric == "eval_success_rate")
            .unwrap();
        assert_eq!(m.value, 1.0);
        assert_eq!(m.env_steps, 20.0);
    }
}
