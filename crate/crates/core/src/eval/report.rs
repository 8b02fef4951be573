use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Segment};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub pred: Option<Segment>,
    pub gt: Option<Segment>,
    pub iou: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub task: String,
    pub perturbation: String,
    pub metrics: BTreeMap<String, f64>,
    pub samples: Vec<SampleRecord>,
    #[serde(default)]
    pub histogram: Option<Vec<Vec<f64>>>,
}

impl EvalReport {
    pub fn new(task: &str, perturbation: &str) -> Self {
        EvalReport {
            schema: SCHEMA_VERSION,
            task: task.to_string(),
            perturbation: perturbation.to_string(),
            metrics: BTreeMap::new(),
            samples: Vec::new(),
            histogram: None,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json`, `samples.csv` and, when present, `histogram.csv`
/// (`start_bin,end_bin,mass`, one row per cell).
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.json");
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("samples.csv");
    let keys: BTreeSet<&String> = report.samples.iter().flat_map(|r| r.extra.keys()).collect();
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header: Vec<String> = ["id", "pred_start", "pred_end", "gt_start", "gt_end", "iou"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(keys.iter().map(|k| k.to_string()));
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for r in &report.samples {
        let mut row = vec![
            r.id.clone(),
            opt(r.pred.map(|p| p.start)),
            opt(r.pred.map(|p| p.end)),
            opt(r.gt.map(|g| g.start)),
            opt(r.gt.map(|g| g.end)),
            r.iou.to_string(),
        ];
        row.extend(keys.iter().map(|k| opt(r.extra.get(*k).copied())));
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if let Some(h) = &report.histogram {
        let path = dir.join("histogram.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["start_bin", "end_bin", "mass"]).map_err(|e| csv_err(&path, e))?;
        for (i, row) in h.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                w.write_record([i.to_string(), j.to_string(), m.to_string()])
                    .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("report.json");
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let r: EvalReport = serde_json::from_str(&s)?;
    if r.schema != SCHEMA_VERSION {
        return Err(Error::Data(format!("report schema {} is not {}", r.schema, SCHEMA_VERSION)));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> EvalReport {
        let mut r = EvalReport::new("tg", "none");
        r.metrics.insert("miou".into(), 0.5);
        for i in 0..3 {
            let mut extra = BTreeMap::new();
            extra.insert("loc_count".into(), 1.0);
            r.samples.push(SampleRecord {
                id: format!("a,{i}"),
                pred: (i != 1).then(|| Segment::new(i as f64, 10.0)),
                gt: Some(Segment::new(0.0, 10.0)),
                iou: 0.1 * i as f64,
                extra,
            });
        }
        r.histogram = Some(vec![vec![0.5, 0.5], vec![0.0, 0.0]]);
        r
    }

    #[test]
    fn round_trip_and_bytes() {
        let r = sample_report();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_report(&r, a.path()).unwrap();
        write_report(&r, b.path()).unwrap();
        assert_eq!(read_report(a.path()).unwrap(), r);
        for f in ["report.json", "samples.csv", "histogram.csv"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let mut rd = csv::Reader::from_path(a.path().join("samples.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(&rows[0][0], "a,0");
        assert_eq!(&rows[1][1], "");
    }
}
