//! Per-evaluation metrics records and cross-run comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Rounds completed when the record was taken.
    pub round: usize,
    pub method: Method,
    pub seed: u64,
    /// Mean zero-shot accuracy over the test clients.
    pub global_acc: f64,
    /// Accuracy of each expert (or model) on the whole test set.
    pub per_expert_acc: Vec<f64>,
    /// Fraction of test samples routed to their label's expert; absent when
    /// no ground-truth routing exists.
    pub routing_acc: Option<f64>,
    pub floats_down_cum: u64,
    pub floats_up_cum: u64,
    /// Mean test-client accuracy per label group (scenario runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_acc: Option<Vec<f64>>,
}

pub fn to_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialises"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines stream; blank lines are skipped.
pub fn parse_jsonl(text: &str, file: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV mirror of the JSON-lines stream; per-expert columns are padded to the
/// widest record.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let experts = records.iter().map(|r| r.per_expert_acc.len()).max().unwrap_or(0);
    let groups = records
        .iter()
        .map(|r| r.group_acc.as_ref().map_or(0, Vec::len))
        .max()
        .unwrap_or(0);
    let mut out = String::from("round,method,seed,global_acc,routing_acc,floats_down_cum,floats_up_cum");
    for e in 0..experts {
        let _ = write!(out, ",expert_{e}_acc");
    }
    for g in 0..groups {
        let _ = write!(out, ",group_{g}_acc");
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            r.method.name(),
            r.seed,
            r.global_acc,
            opt(r.routing_acc),
            r.floats_down_cum,
            r.floats_up_cum
        );
        for e in 0..experts {
            let _ = write!(out, ",{}", opt(r.per_expert_acc.get(e).copied()));
        }
        for g in 0..groups {
            let v = r.group_acc.as_ref().and_then(|a| a.get(g).copied());
            let _ = write!(out, ",{}", opt(v));
        }
        out.push('\n');
    }
    out
}

/// Highest `global_acc` among the last `k` records.
pub fn best_of_last(records: &[MetricsRecord], k: usize) -> Option<f64> {
    let start = records.len().saturating_sub(k);
    records[start..].iter().map(|r| r.global_acc).reduce(f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub source: String,
    pub method: Method,
    pub seed: u64,
    pub evaluations: usize,
    pub best_last_k: f64,
    pub final_acc: f64,
    pub floats_down_total: u64,
    pub floats_up_total: u64,
}

/// One row per metrics file, in input order.
pub fn report_rows(runs: &[(String, Vec<MetricsRecord>)], last_k: usize) -> Result<Vec<ReportRow>> {
    runs.iter()
        .map(|(source, records)| {
            let last = records
                .last()
                .ok_or_else(|| Error::config(format!("{source} contains no records")))?;
            if let Some(r) = records.iter().find(|r| r.method != last.method) {
                return Err(Error::config(format!(
                    "{source} mixes methods {} and {}",
                    r.method.name(),
                    last.method.name()
                )));
            }
            Ok(ReportRow {
                source: source.clone(),
                method: last.method,
                seed: last.seed,
                evaluations: records.len(),
                best_last_k: best_of_last(records, last_k).unwrap(),
                final_acc: last.global_acc,
                floats_down_total: last.floats_down_cum,
                floats_up_total: last.floats_up_cum,
            })
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow], last_k: usize) -> String {
    let mut out = format!(
        "source,method,seed,evaluations,best_last_{last_k},final_acc,floats_down_total,floats_up_total\n"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.source,
            r.method.name(),
            r.seed,
            r.evaluations,
            r.best_last_k,
            r.final_acc,
            r.floats_down_total,
            r.floats_up_total
        );
    }
    out
}

/// Mean of `best_last_k` per method, averaged over that method's rows.
pub fn method_summary(rows: &[ReportRow]) -> BTreeMap<Method, f64> {
    let mut acc: BTreeMap<Method, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.method).or_default();
        e.0 += r.best_last_k;
        e.1 += 1;
    }
    acc.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}
