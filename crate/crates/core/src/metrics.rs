//! Display-latency and prompt-quality metrics over decoded timelines.
//!
//! Prompt tokens are scored position-wise against the final hypothesis of
//! their utterance, starting at the committed length when the prompt was
//! shown. Rates are printed truncated, not rounded.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{edit_distance, EditCounts, TokenSeq};
use crate::engine::Timeline;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no reference for utterance(s): {}", .0.join(", "))]
    MissingReferences(Vec<String>),
    #[error("prompt record for unknown utterance {0}")]
    UnknownUtterance(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Integer ratio kept alongside its formatted value so reports can be
/// diffed on raw counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn value(&self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    pub fn add(&mut self, other: Ratio) {
        self.num += other.num;
        self.den += other.den;
    }

    /// `num/den × scale` truncated to `decimals` places, computed in
    /// integers so values like 0.39 are not at the mercy of float rounding.
    pub fn truncated(&self, scale: u64, decimals: u32) -> Option<String> {
        if self.den == 0 {
            return None;
        }
        let unit = 10u64.pow(decimals);
        let scaled = (self.num as u128 * scale as u128 * unit as u128) / self.den as u128;
        let whole = scaled / unit as u128;
        let frac = scaled % unit as u128;
        Some(if decimals == 0 {
            whole.to_string()
        } else {
            format!("{whole}.{frac:0width$}", width = decimals as usize)
        })
    }

    /// `PE / NP = x.y%`, or `-` when there were no prompts.
    pub fn format_percent(&self) -> String {
        match self.truncated(100, 1) {
            Some(p) => format!("{} / {} = {p}%", self.num, self.den),
            None => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tdt {
    pub first_ms: u32,
    pub last_ms: u32,
}

/// First and last token display time. `None` when the final hypothesis is
/// empty (or, degenerately, the timeline has no events).
///
/// A token counts as displayed once the screen is long enough to hold it,
/// even if a later refinement changes what it says.
pub fn tdt(timeline: &Timeline) -> Option<Tdt> {
    let final_len = timeline.final_hyp.len();
    if final_len == 0 {
        return None;
    }
    let first = timeline.events.iter().find(|e| e.display_len() > 0)?;
    let last = timeline.events.iter().find(|e| e.display_len() >= final_len)?;
    Some(Tdt {
        first_ms: first.cumulative_ms,
        last_ms: last.cumulative_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub utt_id: String,
    pub chunk_index: usize,
    pub is_first_chunk: bool,
    pub is_last_chunk: bool,
    pub prompt: TokenSeq,
    pub committed_len_at_emission: usize,
}

/// One record per event of a timeline.
///
/// The "last chunk" is the last one whose committed text is still shorter
/// than the final hypothesis, i.e. the last chunk with anything left to
/// predict. After it every prompt token necessarily lies past the end of the
/// final hypothesis. If the hypothesis is empty the final event is used.
pub fn prompt_records(timeline: &Timeline) -> Vec<PromptRecord> {
    let final_len = timeline.final_hyp.len();
    let last = timeline
        .events
        .iter()
        .rposition(|e| e.committed.len() < final_len)
        .unwrap_or(timeline.events.len().saturating_sub(1));
    timeline
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| PromptRecord {
            utt_id: timeline.utt_id.clone(),
            chunk_index: e.chunk_index,
            is_first_chunk: i == 0,
            is_last_chunk: i == last,
            prompt: e.prompt.clone(),
            committed_len_at_emission: e.committed.len(),
        })
        .collect()
}

/// `(PE, NP)` for one prompt. A position is an error if it differs from the
/// final hypothesis or runs past its end.
pub fn prompt_errors(rec: &PromptRecord, final_hyp: &TokenSeq) -> Ratio {
    let start = rec.committed_len_at_emission;
    let pe = rec
        .prompt
        .iter()
        .enumerate()
        .filter(|&(k, tok)| final_hyp.get(start + k) != Some(tok))
        .count();
    Ratio::new(pe as u64, rec.prompt.len() as u64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub ref_len: u64,
}

impl WerCounts {
    pub fn errors(&self) -> u64 {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn ratio(&self) -> Ratio {
        Ratio::new(self.errors(), self.ref_len)
    }

    fn add_edits(&mut self, e: EditCounts, ref_len: usize) {
        self.substitutions += e.substitutions as u64;
        self.deletions += e.deletions as u64;
        self.insertions += e.insertions as u64;
        self.ref_len += ref_len as u64;
    }
}

/// Corpus-level token error counts. Every hypothesis id needs a reference.
pub fn wer(hyps: &[(String, TokenSeq)], refs: &BTreeMap<String, TokenSeq>) -> Result<WerCounts> {
    let missing: Vec<String> = hyps
        .iter()
        .filter(|(id, _)| !refs.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingReferences(missing));
    }
    let mut counts = WerCounts::default();
    for (id, hyp) in hyps {
        let r = &refs[id];
        counts.add_edits(edit_distance(hyp, r), r.len());
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttTdt {
    pub utt_id: String,
    pub tdt_f_ms: Option<u32>,
    pub tdt_l_ms: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub processing_seconds: f64,
    pub audio_seconds: f64,
}

impl Timing {
    pub fn rtf(&self) -> Option<f64> {
        (self.audio_seconds > 0.0).then(|| self.processing_seconds / self.audio_seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub utterances: Vec<UttTdt>,
    pub mean_tdt_f_ms: Option<f64>,
    pub mean_tdt_l_ms: Option<f64>,
    pub per_f: Ratio,
    pub per_l: Ratio,
    pub per_a: Ratio,
    /// Total prompt tokens over total processed chunks.
    pub ppc: Ratio,
    pub wer: WerCounts,
    pub timing: Timing,
}

fn mean(xs: impl Iterator<Item = u32>) -> Option<f64> {
    let (sum, n) = xs.fold((0u64, 0u64), |(s, n), x| (s + x as u64, n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

pub fn aggregate(
    records: &[PromptRecord],
    timelines: &[Timeline],
    refs: &BTreeMap<String, TokenSeq>,
) -> Result<MetricsReport> {
    if timelines.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let finals: BTreeMap<&str, &TokenSeq> = timelines
        .iter()
        .map(|t| (t.utt_id.as_str(), &t.final_hyp))
        .collect();

    let (mut per_f, mut per_l, mut per_a) = (Ratio::default(), Ratio::default(), Ratio::default());
    for rec in records {
        let final_hyp = finals
            .get(rec.utt_id.as_str())
            .ok_or_else(|| MetricsError::UnknownUtterance(rec.utt_id.clone()))?;
        let r = prompt_errors(rec, final_hyp);
        per_a.add(r);
        if rec.is_first_chunk {
            per_f.add(r);
        }
        if rec.is_last_chunk {
            per_l.add(r);
        }
    }

    let utterances: Vec<UttTdt> = timelines
        .iter()
        .map(|t| {
            let v = tdt(t);
            UttTdt {
                utt_id: t.utt_id.clone(),
                tdt_f_ms: v.map(|v| v.first_ms),
                tdt_l_ms: v.map(|v| v.last_ms),
            }
        })
        .collect();
    let hyps: Vec<(String, TokenSeq)> = timelines
        .iter()
        .map(|t| (t.utt_id.clone(), t.final_hyp.clone()))
        .collect();
    let chunks: u64 = timelines.iter().map(|t| t.num_chunks as u64).sum();
    let timing = timelines.iter().fold(Timing::default(), |acc, t| Timing {
        processing_seconds: acc.processing_seconds + t.processing_seconds,
        audio_seconds: acc.audio_seconds + t.audio_seconds,
    });
    Ok(MetricsReport {
        mean_tdt_f_ms: mean(utterances.iter().filter_map(|u| u.tdt_f_ms)),
        mean_tdt_l_ms: mean(utterances.iter().filter_map(|u| u.tdt_l_ms)),
        utterances,
        per_f,
        per_l,
        per_a,
        ppc: Ratio::new(per_a.den, chunks),
        wer: wer(&hyps, refs)?,
        timing,
    })
}

/// Convenience: records from every timeline, then [`aggregate`].
pub fn evaluate_timelines(timelines: &[Timeline], refs: &BTreeMap<String, TokenSeq>) -> Result<MetricsReport> {
    let records: Vec<PromptRecord> = timelines.iter().flat_map(prompt_records).collect();
    aggregate(&records, timelines, refs)
}

/// One decoding configuration's row in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub chunk_ms: u32,
    pub mode: String,
    pub zp_ms: u32,
    pub start_layer: i32,
    pub lookahead_ms: u32,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RowCounts {
    chunk_ms: u32,
    mode: String,
    zp_ms: u32,
    start_layer: i32,
    lookahead_ms: u32,
    mean_tdt_f_ms: Option<f64>,
    mean_tdt_l_ms: Option<f64>,
    per_f: Ratio,
    per_l: Ratio,
    per_a: Ratio,
    ppc: Ratio,
    wer: WerCounts,
    utterances: Vec<UttTdt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RowTiming {
    chunk_ms: u32,
    mode: String,
    zp_ms: u32,
    start_layer: i32,
    lookahead_ms: u32,
    processing_seconds: f64,
    audio_seconds: f64,
    rtf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportDoc {
    rows: Vec<RowCounts>,
    /// Wall-clock measurements; the only part that varies between runs.
    timing: Vec<RowTiming>,
}

fn ms(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.0}ms"))
}

/// The report as JSON. Everything outside the `timing` section is a pure
/// function of the model, corpus and configurations.
pub fn report_json(rows: &[ReportRow]) -> String {
    let doc = ReportDoc {
        rows: rows
            .iter()
            .map(|r| RowCounts {
                chunk_ms: r.chunk_ms,
                mode: r.mode.clone(),
                zp_ms: r.zp_ms,
                start_layer: r.start_layer,
                lookahead_ms: r.lookahead_ms,
                mean_tdt_f_ms: r.metrics.mean_tdt_f_ms,
                mean_tdt_l_ms: r.metrics.mean_tdt_l_ms,
                per_f: r.metrics.per_f,
                per_l: r.metrics.per_l,
                per_a: r.metrics.per_a,
                ppc: r.metrics.ppc,
                wer: r.metrics.wer,
                utterances: r.metrics.utterances.clone(),
            })
            .collect(),
        timing: rows
            .iter()
            .map(|r| RowTiming {
                chunk_ms: r.chunk_ms,
                mode: r.mode.clone(),
                zp_ms: r.zp_ms,
                start_layer: r.start_layer,
                lookahead_ms: r.lookahead_ms,
                processing_seconds: r.metrics.timing.processing_seconds,
                audio_seconds: r.metrics.timing.audio_seconds,
                rtf: r.metrics.timing.rtf(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("report serializes")
}

/// Plain-text table, one line per row, grouped by chunk size.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let mut current_chunk = None;
    for r in rows {
        if current_chunk != Some(r.chunk_ms) {
            current_chunk = Some(r.chunk_ms);
            let _ = writeln!(out, "== {}ms chunk ==", r.chunk_ms);
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>8} {:>8} {:>22} {:>22} {:>22} {:>16} {:>8} {:>5}",
                "mode", "layer", "TDT-F", "TDT-L", "PER-F", "PER-L", "PER-A", "WER", "RTF", "PPC"
            );
        }
        let m = &r.metrics;
        let prompting = r.mode == "zeroprompt" && r.zp_ms > 0 && r.start_layer >= 0;
        let per = |x: &Ratio| if prompting { x.format_percent() } else { "-".into() };
        let label = match r.mode.as_str() {
            "zeroprompt" => format!("zp {}ms", r.zp_ms),
            "lookahead" => format!("la {}ms", r.lookahead_ms),
            other => other.to_string(),
        };
        let wer = m.wer.ratio();
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>8} {:>8} {:>22} {:>22} {:>22} {:>16} {:>8} {:>5}",
            label,
            r.start_layer,
            ms(m.mean_tdt_f_ms),
            ms(m.mean_tdt_l_ms),
            per(&m.per_f),
            per(&m.per_l),
            per(&m.per_a),
            format!("{} / {} = {}%", wer.num, wer.den, wer.truncated(100, 2).unwrap_or("-".into())),
            m.timing.rtf().map_or("-".to_string(), |v| format!("{v:.5}")),
            if prompting { m.ppc.truncated(1, 2).unwrap_or("-".into()) } else { "-".into() },
        );
    }
    out
}
