use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};

use crate::spec::WorkloadSpec;
use crate::trial::TrialResult;

pub const SCHEMA: &str = "smr-bench/1";

fn object<T: serde::Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("plain data serializes") {
        Value::Object(m) => m,
        _ => unreachable!("structs serialize to objects"),
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Column names: every spec field followed by every result field.
pub fn csv_header() -> Vec<String> {
    object(&WorkloadSpec::default())
        .keys()
        .chain(object(&TrialResult::default()).keys())
        .cloned()
        .collect()
}

/// One CSV row per trial, with a header row even when there are no trials.
pub fn write_csv<W: std::io::Write>(out: W, rows: &[(WorkloadSpec, TrialResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header())?;
    for (spec, res) in rows {
        let cells = object(spec).values().chain(object(res).values()).map(cell).collect::<Vec<_>>();
        w.write_record(cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Means of the numeric result fields over each run of trials that share a
/// spec.
pub fn averages(rows: &[(WorkloadSpec, TrialResult)]) -> Vec<Value> {
    let mut groups: Vec<(&WorkloadSpec, Vec<&TrialResult>)> = Vec::new();
    for (spec, res) in rows {
        match groups.iter_mut().find(|(s, _)| *s == spec) {
            Some((_, v)) => v.push(res),
            None => groups.push((spec, vec![res])),
        }
    }
    groups
        .into_iter()
        .map(|(spec, results)| {
            let objs: Vec<_> = results.iter().map(|r| object(*r)).collect();
            let mut mean = Map::new();
            for key in objs[0].keys() {
                if key == "trial" {
                    continue;
                }
                let nums: Vec<f64> = objs.iter().filter_map(|o| o[key].as_f64()).collect();
                if nums.len() == objs.len() {
                    mean.insert(key.clone(), json!(nums.iter().sum::<f64>() / nums.len() as f64));
                }
            }
            let passed = results.iter().filter(|r| r.passed).count();
            json!({ "spec": spec, "trials": results.len(), "passed": passed, "mean": mean })
        })
        .collect()
}

pub fn to_json(rows: &[(WorkloadSpec, TrialResult)]) -> Value {
    let trials: Vec<Value> = rows.iter().map(|(s, r)| json!({ "spec": s, "result": r })).collect();
    json!({ "schema": SCHEMA, "trials": trials, "averages": averages(rows) })
}

/// Writes `results.csv` and `results.json` into `dir`, creating it if needed.
pub fn emit(dir: &Path, rows: &[(WorkloadSpec, TrialResult)]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("results.csv");
    let f = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_csv(f, rows).with_context(|| format!("writing {}", csv_path.display()))?;
    let json_path = dir.join("results.json");
    let text = serde_json::to_string_pretty(&to_json(rows))?;
    fs::write(&json_path, text).with_context(|| format!("writing {}", json_path.display()))?;
    Ok((csv_path, json_path))
}
