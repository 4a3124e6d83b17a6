use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    LocalTrain,
    LocalTest,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub round: usize,
    pub strategy: String,
    pub client_id: usize,
    pub group_id: usize,
    pub role: String,
    pub split: Split,
    pub accuracy: f64,
    pub weighted_auc: f64,
    pub weighted_f1: f64,
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "run_id",
    "round",
    "strategy",
    "client_id",
    "group_id",
    "role",
    "split",
    "accuracy",
    "weighted_auc",
    "weighted_f1",
];

/// Writes records, preceded by the header row when `header` is set (also
/// for an empty record list, so a header can be emitted before streaming).
pub fn write_metrics_csv<W: Write>(w: W, records: &[MetricsRecord], header: bool) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        out.write_record(METRICS_COLUMNS)?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<_, csv::Error>>()
        .map_err(MetricsError::from)
}

/// Mean and population standard deviation of accuracy across the clients
/// of one group at one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub round: usize,
    pub group_id: usize,
    pub split: Split,
    pub clients: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn groupwise_summary(records: &[MetricsRecord]) -> Vec<GroupSummary> {
    let mut buckets: BTreeMap<(usize, usize, Split), Vec<f64>> = BTreeMap::new();
    for r in records {
        buckets
            .entry((r.round, r.group_id, r.split))
            .or_default()
            .push(r.accuracy);
    }
    buckets
        .into_iter()
        .map(|((round, group_id, split), accs)| {
            let (mean, std) = mean_std(&accs);
            GroupSummary {
                round,
                group_id,
                split,
                clients: accs.len(),
                mean,
                std,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub sample_id: usize,
    pub group_id: usize,
    pub x: f64,
    pub y: f64,
}

/// 2-D coordinates of estimated preferences at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionDump {
    pub run_id: String,
    pub round: usize,
    pub points: Vec<ProjectionPoint>,
}

#[derive(Serialize, Deserialize)]
struct ProjectionRow {
    run_id: String,
    round: usize,
    sample_id: usize,
    group_id: usize,
    x: f64,
    y: f64,
}

pub fn write_projections_csv<W: Write>(w: W, dumps: &[ProjectionDump]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for d in dumps {
        for p in &d.points {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(MetricsError::Invalid(format!(
                    "non-finite projection for sample {}",
                    p.sample_id
                )));
            }
            out.serialize(ProjectionRow {
                run_id: d.run_id.clone(),
                round: d.round,
                sample_id: p.sample_id,
                group_id: p.group_id,
                x: p.x,
                y: p.y,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_projections_csv<R: Read>(r: R) -> Result<Vec<ProjectionDump>> {
    let mut dumps: Vec<ProjectionDump> = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: ProjectionRow = row?;
        let point = ProjectionPoint {
            sample_id: row.sample_id,
            group_id: row.group_id,
            x: row.x,
            y: row.y,
        };
        match dumps.last_mut() {
            Some(d) if d.run_id == row.run_id && d.round == row.round => d.points.push(point),
            _ => dumps.push(ProjectionDump {
                run_id: row.run_id,
                round: row.round,
                points: vec![point],
            }),
        }
    }
    Ok(dumps)
}
