//! The chunk loop and the on-screen text it produces.
//!
//! Every processed chunk yields a [`DisplayEvent`]: the text committed from
//! real frames so far plus, in zero-prompt mode, provisional tokens decoded
//! from the zeroed frames. Provisional tokens are dropped wholesale at the
//! next event and never feed back into the committed text, so the final
//! hypothesis is the same in every mode.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Utterance;
use crate::ctc::{greedy_collapse, CollapseState, TokenId, TokenSeq};
use crate::encoder::{forward_chunk, AttentionCache, EncoderError, Model, ZeroPromptSpec};
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid stream config: {0}")]
    Config(String),
    #[error("empty feature matrix")]
    Empty,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Decode each chunk as soon as it is complete.
    Causal,
    /// Append zeroed frames to every chunk and show their predictions.
    ZeroPrompt,
    /// Wait for `lookahead_ms` of real future audio before showing a chunk.
    LookAhead,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "causal" => Ok(Mode::Causal),
            "zeroprompt" => Ok(Mode::ZeroPrompt),
            "lookahead" => Ok(Mode::LookAhead),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Causal => "causal",
            Mode::ZeroPrompt => "zeroprompt",
            Mode::LookAhead => "lookahead",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub chunk_ms: u32,
    pub mode: Mode,
    /// Zero-prompt length; zero-prompt mode only.
    pub zp_ms: u32,
    /// Layer receiving the zero prompt; `-1` disables it. Zero-prompt mode only.
    pub start_layer: i32,
    /// LookAhead mode only.
    pub lookahead_ms: u32,
}

impl StreamConfig {
    pub fn causal(chunk_ms: u32) -> Self {
        Self {
            chunk_ms,
            mode: Mode::Causal,
            zp_ms: 0,
            start_layer: -1,
            lookahead_ms: 0,
        }
    }

    pub fn zero_prompt(chunk_ms: u32, zp_ms: u32, start_layer: i32) -> Self {
        Self {
            chunk_ms,
            mode: Mode::ZeroPrompt,
            zp_ms,
            start_layer,
            lookahead_ms: 0,
        }
    }

    pub fn look_ahead(chunk_ms: u32, lookahead_ms: u32) -> Self {
        Self {
            chunk_ms,
            mode: Mode::LookAhead,
            zp_ms: 0,
            start_layer: -1,
            lookahead_ms,
        }
    }
}

/// Frame counts derived from a [`StreamConfig`] for a particular model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedStream {
    /// Input feature frames per chunk.
    pub chunk_feat_frames: usize,
    /// Encoder frames per chunk.
    pub chunk_enc_frames: usize,
    pub zp: ZeroPromptSpec,
    pub lookahead_ms: u32,
}

fn ms_to_frames(ms: u32, frame_ms: u32, what: &str) -> Result<usize> {
    if ms % frame_ms != 0 {
        return Err(EngineError::Config(format!(
            "{what} {ms}ms is not a multiple of the {frame_ms}ms frame"
        )));
    }
    Ok((ms / frame_ms) as usize)
}

impl StreamConfig {
    pub fn resolve(&self, model: &Model) -> Result<ResolvedStream> {
        let cfg = &model.config;
        let enc_ms = cfg.encoder_frame_ms();
        let chunk_enc_frames = ms_to_frames(self.chunk_ms, enc_ms, "chunk_ms")?;
        if chunk_enc_frames == 0 {
            return Err(EngineError::Config("chunk_ms must be positive".into()));
        }
        let zp = match self.mode {
            Mode::ZeroPrompt => {
                let spec = ZeroPromptSpec::new(
                    ms_to_frames(self.zp_ms, enc_ms, "zp_ms")?,
                    self.start_layer,
                );
                if self.start_layer < -1 || self.start_layer >= cfg.num_layers as i32 {
                    return Err(EncoderError::StartLayer {
                        start_layer: self.start_layer,
                        num_layers: cfg.num_layers,
                    }
                    .into());
                }
                spec
            }
            _ => ZeroPromptSpec::disabled(),
        };
        let lookahead_ms = match self.mode {
            Mode::LookAhead => {
                ms_to_frames(self.lookahead_ms, cfg.frame_ms, "lookahead_ms")?;
                self.lookahead_ms
            }
            _ => 0,
        };
        Ok(ResolvedStream {
            chunk_feat_frames: chunk_enc_frames * cfg.subsample,
            chunk_enc_frames,
            zp,
            lookahead_ms,
        })
    }
}

/// What is on screen after one chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayEvent {
    pub chunk_index: usize,
    /// Audio consumed when the event fires.
    pub cumulative_ms: u32,
    /// All tokens decoded from real frames so far.
    pub committed: TokenSeq,
    /// Provisional tokens from this chunk's zeroed frames.
    pub prompt: TokenSeq,
}

impl DisplayEvent {
    pub fn display(&self) -> TokenSeq {
        self.committed.concat(&self.prompt)
    }

    pub fn display_len(&self) -> usize {
        self.committed.len() + self.prompt.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub utt_id: String,
    pub chunk_ms: u32,
    /// Chunks run through the encoder. Equals `events.len()` except in
    /// lookahead mode, where chunks that become visible at the same instant
    /// share one event.
    pub num_chunks: usize,
    pub events: Vec<DisplayEvent>,
    pub final_hyp: TokenSeq,
    pub processing_seconds: f64,
    pub audio_seconds: f64,
}

impl Timeline {
    pub fn utterance_ms(&self) -> u32 {
        (self.audio_seconds * 1000.0).round() as u32
    }
}

/// Greedy continuation over the zeroed frames. `state` is the collapse state
/// after the last real frame; a prompt token equal to that frame's argmax
/// merges into it instead of being shown twice.
pub fn extract_prompts(logprobs_zp: &Matrix, state: CollapseState) -> TokenSeq {
    let ids: Vec<TokenId> = logprobs_zp.argmax_rows().into_iter().map(|i| i as TokenId).collect();
    greedy_collapse(&ids, state).0
}

/// New screen contents after an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refinement {
    pub display: TokenSeq,
    /// Length of the prefix shared with the previous display; everything
    /// after it was replaced.
    pub kept: usize,
}

/// Prompt-and-refine: the screen becomes `committed ++ prompt`. Earlier
/// prompt tokens are replaced, never merged.
pub fn refine(prev_display: &TokenSeq, event: &DisplayEvent) -> Refinement {
    let display = event.display();
    let kept = prev_display
        .iter()
        .zip(display.iter())
        .take_while(|(a, b)| a == b)
        .count();
    Refinement { display, kept }
}

/// Runs one utterance through the chunk loop.
pub fn stream_decode(model: &Model, utt_id: &str, feats: &Matrix, cfg: &StreamConfig) -> Result<Timeline> {
    if feats.rows() == 0 {
        return Err(EngineError::Empty);
    }
    let resolved = cfg.resolve(model)?;
    let enc_cfg = model.config_with_chunk(resolved.chunk_enc_frames);
    let frame_ms = model.config.frame_ms;
    let utt_ms = feats.rows() as u32 * frame_ms;

    let started = Instant::now();
    let mut cache = AttentionCache::new(&enc_cfg);
    let mut state = CollapseState::default();
    let mut committed = TokenSeq::new();
    let mut events: Vec<DisplayEvent> = Vec::new();
    let num_chunks = feats.rows().div_ceil(resolved.chunk_feat_frames);
    for i in 0..num_chunks {
        let start = i * resolved.chunk_feat_frames;
        let end = (start + resolved.chunk_feat_frames).min(feats.rows());
        let out = forward_chunk(
            &enc_cfg,
            &model.weights,
            &cache,
            &feats.slice_rows(start, end),
            resolved.zp,
        )?;
        cache = out.cache;
        let ids: Vec<TokenId> = out
            .logprobs_real
            .argmax_rows()
            .into_iter()
            .map(|i| i as TokenId)
            .collect();
        let (new_tokens, next_state) = greedy_collapse(&ids, state);
        state = next_state;
        committed.extend_from(&new_tokens);
        let prompt = extract_prompts(&out.logprobs_zp, state);

        let causal_ms = end as u32 * frame_ms;
        let cumulative_ms = (causal_ms + resolved.lookahead_ms).min(utt_ms);
        let event = DisplayEvent {
            chunk_index: i,
            cumulative_ms,
            committed: committed.clone(),
            prompt,
        };
        match events.last_mut() {
            // Only reachable in lookahead mode once the future runs out.
            Some(last) if last.cumulative_ms == cumulative_ms => *last = event,
            _ => events.push(event),
        }
    }
    Ok(Timeline {
        utt_id: utt_id.to_string(),
        chunk_ms: cfg.chunk_ms,
        num_chunks,
        events,
        final_hyp: committed,
        processing_seconds: started.elapsed().as_secs_f64(),
        audio_seconds: utt_ms as f64 / 1000.0,
    })
}

/// Decodes every utterance, in parallel across `threads` workers. Output
/// order follows input order.
pub fn decode_corpus(
    model: &Model,
    utts: &[Utterance],
    cfg: &StreamConfig,
    threads: usize,
) -> Result<Vec<Timeline>> {
    let run = || {
        utts.par_iter()
            .map(|u| stream_decode(model, &u.id, &u.feats, cfg))
            .collect::<Result<Vec<_>>>()
    };
    if threads == 1 {
        return utts
            .iter()
            .map(|u| stream_decode(model, &u.id, &u.feats, cfg))
            .collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EngineError::Pool(e.to_string()))?
        .install(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Event {
        utt: String,
        chunk: usize,
        cumulative_ms: u32,
        committed: String,
        prompt: String,
    },
    Final {
        utt: String,
        final_hyp: String,
        processing_seconds: f64,
        audio_seconds: f64,
    },
}

/// One JSON object per line: an `event` record per display event, then a
/// `final` record.
pub fn write_timeline_log<W: Write>(w: &mut W, t: &Timeline) -> std::io::Result<()> {
    for e in &t.events {
        let rec = LogRecord::Event {
            utt: t.utt_id.clone(),
            chunk: e.chunk_index,
            cumulative_ms: e.cumulative_ms,
            committed: e.committed.to_text(),
            prompt: e.prompt.to_text(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    let rec = LogRecord::Final {
        utt: t.utt_id.clone(),
        final_hyp: t.final_hyp.to_text(),
        processing_seconds: t.processing_seconds,
        audio_seconds: t.audio_seconds,
    };
    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    Ok(())
}
