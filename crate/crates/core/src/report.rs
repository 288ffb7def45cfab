//! Run artifacts on disk.
//!
//! | file | contents |
//! |---|---|
//! | `metrics.csv` | `round,client,phase,accuracy,params,flops,model_size_bytes`, one row per reported (round, client) |
//! | `summary.json` | final-round mean and population std of accuracy, mean params/FLOPs/size |
//! | `search_log.csv` | `round,client,edge,cell_kind,op,acc_without,kept`, one row per scored op |
//! | `cells_client_<k>.dot` | the client's final normal and reduction cells |
//! | `mask_client_<k>.json` | the client's final mask |
//!
//! Output is a pure function of the run: emitting twice gives identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::federation::{mean, RunOutput};
use crate::space::export_dot;

pub const METRICS_HEADER: [&str; 7] = [
    "round",
    "client",
    "phase",
    "accuracy",
    "params",
    "flops",
    "model_size_bytes",
];
pub const SEARCH_LOG_HEADER: [&str; 7] = ["round", "client", "edge", "cell_kind", "op", "acc_without", "kept"];

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Summary {
    pub method: String,
    /// Round of the final report; absent for a run with no reports.
    pub round: Option<usize>,
    pub clients: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_params: Option<f64>,
    pub mean_flops: Option<f64>,
    pub mean_model_size_bytes: Option<f64>,
}

pub fn summarize(run: &RunOutput) -> Summary {
    let last = run.reports.last();
    let avg = |f: fn(&crate::federation::ClientReport) -> f64| last.map(|r| mean(r.clients.iter().map(f)));
    Summary {
        method: run.mode.name().to_string(),
        round: last.map(|r| r.round),
        clients: run.clients.len(),
        mean_accuracy: last.map(|r| r.mean_accuracy()),
        std_accuracy: last.map(|r| r.std_accuracy()),
        mean_params: avg(|c| c.params as f64),
        mean_flops: avg(|c| c.flops as f64),
        mean_model_size_bytes: avg(|c| c.model_size_bytes as f64),
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn metrics_csv(run: &RunOutput) -> Vec<u8> {
    let rows = run
        .reports
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(move |c| {
                vec![
                    r.round.to_string(),
                    c.client.to_string(),
                    c.phase.to_string(),
                    c.accuracy.to_string(),
                    c.params.to_string(),
                    c.flops.to_string(),
                    c.model_size_bytes.to_string(),
                ]
            })
        })
        .collect();
    csv_bytes(&METRICS_HEADER, rows)
}

pub fn search_log_csv(run: &RunOutput) -> Vec<u8> {
    let mut rows = Vec::new();
    for e in &run.events {
        for d in &e.decisions {
            let row = |op: String, acc: String| {
                vec![
                    e.round.to_string(),
                    e.client.to_string(),
                    e.edge.to_string(),
                    d.kind.name().to_string(),
                    op,
                    acc,
                    d.kept.name().to_string(),
                ]
            };
            if d.scores.is_empty() {
                rows.push(row(d.kept.name().to_string(), String::new()));
            }
            for (op, acc) in &d.scores {
                rows.push(row(op.name().to_string(), acc.to_string()));
            }
        }
    }
    csv_bytes(&SEARCH_LOG_HEADER, rows)
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes every artifact into `dir` (created if missing) and returns the paths written.
pub fn emit_reports(run: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    write(dir.join("metrics.csv"), &metrics_csv(run), &mut written)?;
    let mut summary = serde_json::to_string_pretty(&summarize(run)).expect("summary serializes");
    summary.push('\n');
    write(dir.join("summary.json"), summary.as_bytes(), &mut written)?;
    write(dir.join("search_log.csv"), &search_log_csv(run), &mut written)?;
    for c in &run.clients {
        write(
            dir.join(format!("cells_client_{}.dot", c.client)),
            export_dot(&c.mask).as_bytes(),
            &mut written,
        )?;
        let mut json = c.mask.to_json();
        json.push('\n');
        write(
            dir.join(format!("mask_client_{}.json", c.client)),
            json.as_bytes(),
            &mut written,
        )?;
    }
    Ok(written)
}
