//! Metrics and evaluation records as CSV, written atomically.
//!
//! Column order of the metrics file is fixed: `step, block,
//! episode_return`, then per agent (in roster order) the group `w_<kind>,
//! loss_<kind>, rel_mse_<kind>, assign_<kind>`, then `chosen_agent`.
//! Floats print in Rust's shortest round-trip form, so reading a file back
//! reproduces the values exactly.

use std::fs;
use std::path::Path;

use crate::agents::AgentKind;
use crate::error::{Error, Result};

/// One logging event.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub block: usize,
    /// Return of the most recently completed episode (0 before the first).
    pub episode_return: f64,
    /// Per-agent metrics in roster order.
    pub per_agent: Vec<AgentMetrics>,
    /// Index (into the roster) of the highest-weighted agent this step.
    pub chosen_agent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMetrics {
    pub weight: f64,
    /// Most recent training-batch mean loss.
    pub loss: f64,
    /// Smoothed reliability divided by that loss.
    pub rel_mse: f64,
    /// Agency assignments received since the previous row.
    pub assignments: u64,
}

pub fn metrics_header(roster: &[AgentKind]) -> String {
    let mut cols = vec!["step".to_string(), "block".into(), "episode_return".into()];
    for kind in roster {
        cols.push(format!("w_{kind}"));
        cols.push(format!("loss_{kind}"));
        cols.push(format!("rel_mse_{kind}"));
        cols.push(format!("assign_{kind}"));
    }
    cols.push("chosen_agent".into());
    cols.join(",")
}

/// Writes rows to `path` via a temp file and rename.
pub fn write_metrics(rows: &[MetricsRow], roster: &[AgentKind], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&metrics_header(roster));
    out.push('\n');
    for row in rows {
        if row.per_agent.len() != roster.len() {
            return Err(Error::invalid("metrics row does not match the roster"));
        }
        out.push_str(&format!(
            "{},{},{}",
            row.step, row.block, row.episode_return
        ));
        for m in &row.per_agent {
            out.push_str(&format!(
                ",{},{},{},{}",
                m.weight, m.loss, m.rel_mse, m.assignments
            ));
        }
        out.push_str(&format!(",{}\n", row.chosen_agent));
    }
    write_atomic(path, out.as_bytes())
}

/// Parses a metrics file back into rows plus the roster it was written for.
pub fn read_metrics(path: &Path) -> Result<(Vec<AgentKind>, Vec<MetricsRow>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{}: empty metrics file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "step" || *cols.last().unwrap() != "chosen_agent" {
        return Err(Error::invalid(format!(
            "{}: unrecognized metrics header",
            path.display()
        )));
    }
    let mut roster = Vec::new();
    let mut i = 3;
    while i + 3 < cols.len() - 1 + 1 && cols[i].starts_with("w_") {
        let kind: AgentKind = cols[i][2..].parse()?;
        roster.push(kind);
        i += 4;
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + 4 * roster.len() + 1 {
            return Err(Error::invalid(format!(
                "{}: row has {} fields, expected {}",
                path.display(),
                fields.len(),
                3 + 4 * roster.len() + 1
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::invalid(format!("bad float {s:?}")))
        };
        let mut per_agent = Vec::with_capacity(roster.len());
        for a in 0..roster.len() {
            per_agent.push(AgentMetrics {
                weight: parse_f(fields[3 + 4 * a])?,
                loss: parse_f(fields[4 + 4 * a])?,
                rel_mse: parse_f(fields[5 + 4 * a])?,
                assignments: fields[6 + 4 * a]
                    .parse()
                    .map_err(|_| Error::invalid("bad assignment count"))?,
            });
        }
        rows.push(MetricsRow {
            step: fields[0]
                .parse()
                .map_err(|_| Error::invalid("bad step"))?,
            block: fields[1]
                .parse()
                .map_err(|_| Error::invalid("bad block"))?,
            episode_return: parse_f(fields[2])?,
            per_agent,
            chosen_agent: fields[fields.len() - 1]
                .parse()
                .map_err(|_| Error::invalid("bad chosen_agent"))?,
        });
    }
    Ok((roster, rows))
}

/// One evaluation event.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub block: usize,
    pub episodes: u32,
    pub mean_return: f64,
    pub std_return: f64,
}

pub fn write_evals(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,block,episodes,mean_return,std_return\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.block, r.episodes, r.mean_return, r.std_return
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_evals(path: &Path) -> Result<Vec<EvalRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::invalid(format!(
                "{}: eval row has {} fields",
                path.display(),
                f.len()
            )));
        }
        rows.push(EvalRow {
            step: f[0].parse().map_err(|_| Error::invalid("bad step"))?,
            block: f[1].parse().map_err(|_| Error::invalid("bad block"))?,
            episodes: f[2].parse().map_err(|_| Error::invalid("bad episodes"))?,
            mean_return: f[3].parse().map_err(|_| Error::invalid("bad mean"))?,
            std_return: f[4].parse().map_err(|_| Error::invalid("bad std"))?,
        });
    }
    Ok(rows)
}

/// Writes bytes to a sibling temp file, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
