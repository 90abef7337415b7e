//! CSV format: `run_id,timestamp,chamber,<channels...>,target_mrr`, one row per
//! timestamp. The target may instead live in a sidecar `targets.csv`
//! (`run_id,target_mrr`) next to the data file. Unrecognized columns (stage,
//! wafer or machine identifiers) are accepted and ignored.

use std::collections::HashMap;
use std::path::Path;

use super::{Mode, WaferRun, CHANNEL_NAMES};
use crate::error::{Error, Result};

struct Row {
    timestamp: f64,
    values: Vec<f64>,
    target: Option<f64>,
}

fn parse_num(cell: &str, line: u64, col: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("line {line}: column {col}: non-numeric value {cell:?}")))
}

fn read_targets(path: &Path) -> Result<HashMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let id_col = headers.iter().position(|h| h == "run_id");
    let t_col = headers.iter().position(|h| h == "target_mrr");
    let (Some(id_col), Some(t_col)) = (id_col, t_col) else {
        return Err(Error::Data(format!("{}: expected columns run_id,target_mrr", path.display())));
    };
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        out.insert(rec[id_col].to_string(), parse_num(&rec[t_col], line, "target_mrr")?);
    }
    Ok(out)
}

/// Loads runs using the standard 19-channel schema.
pub fn load_runs(path: &Path) -> Result<Vec<WaferRun>> {
    load_runs_with_schema(path, &CHANNEL_NAMES)
}

/// Loads runs, grouping rows by `run_id` (first-appearance order) and sorting
/// each run by timestamp.
pub fn load_runs_with_schema(path: &Path, schema: &[&str]) -> Result<Vec<WaferRun>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut missing = Vec::new();
    let mut col = |name: &str| {
        let idx = find(name);
        if idx.is_none() {
            missing.push(name.to_string());
        }
        idx.unwrap_or(0)
    };
    let id_col = col("run_id");
    let ts_col = col("timestamp");
    let ch_col = col("chamber");
    let channel_cols: Vec<usize> = schema.iter().map(|n| col(n)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing columns: {}", missing.join(", "))));
    }
    let target_col = find("target_mrr");
    let sidecar = match target_col {
        Some(_) => None,
        None => {
            let side = path.with_file_name("targets.csv");
            if !side.exists() {
                return Err(Error::Data(
                    "missing columns: target_mrr (and no targets.csv sidecar)".into(),
                ));
            }
            Some(read_targets(&side)?)
        }
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (u32, Vec<Row>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let run_id = rec[id_col].trim().to_string();
        let timestamp = parse_num(&rec[ts_col], line, "timestamp")?;
        let chamber = rec[ch_col].trim().parse::<u32>().map_err(|_| {
            Error::Data(format!("line {line}: column chamber: non-integer value {:?}", &rec[ch_col]))
        })?;
        Mode::from_chamber(chamber).map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let values = channel_cols
            .iter()
            .zip(schema)
            .map(|(&c, name)| parse_num(&rec[c], line, name))
            .collect::<Result<Vec<_>>>()?;
        let target = target_col.map(|c| parse_num(&rec[c], line, "target_mrr")).transpose()?;
        let entry = groups.entry(run_id.clone()).or_insert_with(|| {
            order.push(run_id.clone());
            (chamber, Vec::new())
        });
        if entry.0 != chamber {
            return Err(Error::Data(format!("line {line}: run {run_id} changes chamber")));
        }
        entry.1.push(Row { timestamp, values, target });
    }
    if order.is_empty() {
        return Err(Error::Data("no runs".into()));
    }

    let mut runs = Vec::with_capacity(order.len());
    for run_id in order {
        let (chamber, mut rows) = groups.remove(&run_id).expect("grouped");
        rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let target_mrr = match &sidecar {
            Some(map) => *map
                .get(&run_id)
                .ok_or_else(|| Error::Data(format!("run {run_id} missing from targets.csv")))?,
            None => {
                let t = rows[0].target.expect("target column present");
                if rows.iter().any(|r| r.target != Some(t)) {
                    return Err(Error::Data(format!("run {run_id} has inconsistent targets")));
                }
                t
            }
        };
        let timestamps: Vec<f64> = rows.iter().map(|r| r.timestamp).collect();
        let channels = (0..schema.len())
            .map(|c| rows.iter().map(|r| r.values[c]).collect())
            .collect();
        let run = WaferRun {
            mode: Mode::from_chamber(chamber)?,
            chamber,
            polishing_time: timestamps[timestamps.len() - 1] - timestamps[0],
            timestamps,
            channels,
            target_mrr,
            run_id,
        };
        run.validate(schema.len())?;
        runs.push(run);
    }
    Ok(runs)
}

/// Writes runs in the ingestion format with the target repeated per row.
/// Floats use shortest round-trip formatting, so reloading is bit-exact.
pub fn write_runs(path: &Path, runs: &[WaferRun], schema: &[&str]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run_id", "timestamp", "chamber"];
    header.extend_from_slice(schema);
    header.push("target_mrr");
    w.write_record(&header)?;
    for run in runs {
        run.validate(schema.len())?;
        let chamber = run.chamber.to_string();
        let target = run.target_mrr.to_string();
        for t in 0..run.len() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(run.run_id.clone());
            rec.push(run.timestamps[t].to_string());
            rec.push(chamber.clone());
            rec.extend(run.channels.iter().map(|c| c[t].to_string()));
            rec.push(target.clone());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
