//! CSV summaries of episode logs, evaluation reports and predictor accuracy.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::orchestrator::EvalRow;
use crate::simenv::EpisodeRecord;
use crate::vp::AccuracyReport;
use crate::Error;

fn row_error(what: &str, row: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{what} row {row}: {e}"))
}

/// Reads a log written by `write_episode_log`. Row numbers in errors count
/// data rows from 1.
pub fn read_episode_log<R: Read>(r: R) -> Result<Vec<EpisodeRecord>, Error> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<EpisodeRecord>().enumerate() {
        let rec = rec.map_err(|e| row_error("episode log", i + 1, e))?;
        let finite = [rec.r_in, rec.r_out, rec.l_c, rec.q1, rec.q2, rec.q3, rec.qoe_total, rec.buffer]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(row_error("episode log", i + 1, "non-finite value"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_eval_csv<R: Read>(r: R) -> Result<Vec<EvalRow>, Error> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<EvalRow>().enumerate() {
        let rec = rec.map_err(|e| row_error("evaluation report", i + 1, e))?;
        if rec.chunks == 0 || !rec.qoe_mean.is_finite() {
            return Err(row_error("evaluation report", i + 1, "empty or non-finite episode"));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Splits a concatenated log wherever the chunk index restarts at 0.
pub fn split_episodes(records: &[EpisodeRecord]) -> Vec<&[EpisodeRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..records.len() {
        if records[i].chunk == 0 {
            out.push(&records[start..i]);
            start = i;
        }
    }
    if start < records.len() {
        out.push(&records[start..]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub chunks: usize,
    pub qoe_mean: f64,
    pub q1_mean: f64,
    pub q2_mean: f64,
    pub rebuffer_total: f64,
    pub r_in_mean: f64,
    pub r_out_mean: f64,
}

pub const EPISODE_SUMMARY_HEADER: [&str; 8] = [
    "episode",
    "chunks",
    "qoe_mean",
    "q1_mean",
    "q2_mean",
    "rebuffer_total",
    "r_in_mean",
    "r_out_mean",
];

pub fn summarize_episodes(records: &[EpisodeRecord]) -> Vec<EpisodeSummary> {
    split_episodes(records)
        .into_iter()
        .enumerate()
        .map(|(i, ep)| {
            let n = ep.len() as f64;
            let mean = |f: fn(&EpisodeRecord) -> f64| ep.iter().map(f).sum::<f64>() / n;
            EpisodeSummary {
                episode: i,
                chunks: ep.len(),
                qoe_mean: mean(|r| r.qoe_total),
                q1_mean: mean(|r| r.q1),
                q2_mean: mean(|r| r.q2),
                rebuffer_total: ep.iter().map(|r| r.q3).sum(),
                r_in_mean: mean(|r| r.r_in),
                r_out_mean: mean(|r| r.r_out),
            }
        })
        .collect()
}

/// Linear-interpolated percentile, `p` in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-preference aggregate of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub policy: String,
    pub pref_index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub episodes: usize,
    pub qoe_mean: f64,
    pub qoe_p10: f64,
    pub qoe_p50: f64,
    pub qoe_p90: f64,
    pub q1_mean: f64,
    pub q2_mean: f64,
    /// Stall seconds per chunk.
    pub q3_mean: f64,
    /// Stall seconds per episode.
    pub rebuffer_mean: f64,
    pub r_in_mean: f64,
}

pub const PREFERENCE_SUMMARY_HEADER: [&str; 15] = [
    "policy",
    "pref_index",
    "lambda1",
    "lambda2",
    "lambda3",
    "episodes",
    "qoe_mean",
    "qoe_p10",
    "qoe_p50",
    "qoe_p90",
    "q1_mean",
    "q2_mean",
    "q3_mean",
    "rebuffer_mean",
    "r_in_mean",
];

/// Groups rows by (policy, preference) in first-seen order.
pub fn summarize_eval(rows: &[EvalRow]) -> Vec<PreferenceSummary> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let k = (r.policy.clone(), r.pref_index);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(policy, pi)| {
            let group: Vec<&EvalRow> = rows.iter().filter(|r| r.policy == policy && r.pref_index == pi).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&EvalRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            let qoe: Vec<f64> = group.iter().map(|r| r.qoe_mean).collect();
            PreferenceSummary {
                policy,
                pref_index: pi,
                lambda1: group[0].lambda1,
                lambda2: group[0].lambda2,
                lambda3: group[0].lambda3,
                episodes: group.len(),
                qoe_mean: mean(|r| r.qoe_mean),
                qoe_p10: percentile(&qoe, 10.0),
                qoe_p50: percentile(&qoe, 50.0),
                qoe_p90: percentile(&qoe, 90.0),
                q1_mean: mean(|r| r.q1_mean),
                q2_mean: mean(|r| r.q2_mean),
                q3_mean: mean(|r| r.rebuffer_total / r.chunks as f64),
                rebuffer_mean: mean(|r| r.rebuffer_total),
                r_in_mean: mean(|r| r.r_in_mean),
            }
        })
        .collect()
}

fn write_rows<W: Write, T: Serialize>(rows: &[T], header: &[&str], w: W) -> Result<(), Error> {
    let mut wtr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wtr.write_record(header)?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

pub fn write_episode_summary<W: Write>(rows: &[EpisodeSummary], w: W) -> Result<(), Error> {
    write_rows(rows, &EPISODE_SUMMARY_HEADER, w)
}

pub fn write_preference_summary<W: Write>(rows: &[PreferenceSummary], w: W) -> Result<(), Error> {
    write_rows(rows, &PREFERENCE_SUMMARY_HEADER, w)
}

/// `step,seconds,ensemble,head0,head1,...`
pub fn write_accuracy_csv<W: Write>(report: &AccuracyReport, step_seconds: f64, w: W) -> Result<(), Error> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["step".to_string(), "seconds".to_string(), "ensemble".to_string()];
    header.extend((0..report.heads.len()).map(|i| format!("head{i}")));
    wtr.write_record(&header)?;
    for (j, e) in report.ensemble.iter().enumerate() {
        let mut row = vec![(j + 1).to_string(), ((j + 1) as f64 * step_seconds).to_string(), e.to_string()];
        row.extend(report.heads.iter().map(|h| h[j].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<accuracy>", e))?;
    Ok(())
}
