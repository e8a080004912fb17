//! Synthetic corpus generation, CTC training and evaluation of the toy model.
//!
//! Utterances are sampled from a bigram grammar over a small alphabet. Each
//! token is rendered as a fixed number of noisy frames: an onset that may be
//! shared with other tokens, then the token's own embedding at a random
//! strength. Silence is all-zero frames, the same thing the engine feeds as
//! prompt frames.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Utterance;
use crate::ctc::{TokenId, TokenSeq};
use crate::encoder::{loss_and_grad, EncoderConfig, EncoderError, EncoderWeights, Model};
use crate::engine::{decode_corpus, EngineError, StreamConfig};
use crate::linalg::Matrix;
use crate::metrics::{evaluate_timelines, MetricsError, ReportRow};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid grammar: {0}")]
    Grammar(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error("utterance {0} cannot be aligned to its reference")]
    Infeasible(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    /// Including the blank, which is never emitted.
    pub vocab_size: usize,
    /// `vocab_size × vocab_size`; row 0 is the start distribution, row `a`
    /// the distribution of the token following `a`. Column 0 is unused.
    pub transitions: Vec<Vec<f64>>,
    /// `vocab_size × feat_dim`; row 0 is unused.
    pub embeddings: Matrix,
    /// Like `embeddings`, used for the first `onset_frames` frames of a token.
    pub onset_embeddings: Matrix,
    pub onset_frames: usize,
    pub frames_per_token: usize,
    /// The non-onset frames are scaled by a factor drawn uniformly from
    /// `[min_amplitude, 1]` once per token.
    pub min_amplitude: f32,
    pub leading_silence: RangeInclusive<usize>,
    pub trailing_silence: RangeInclusive<usize>,
    pub noise_std: f32,
    pub seed: u64,
}

impl SyntheticGrammar {
    /// Grammar used by the toy model: 16 tokens, each usually followed by
    /// its successor (p = 0.7) or the token four places on (p = 0.2), with
    /// the rest spread over the other tokens. The first token is uniform.
    /// Tokens `t` and `t + 4k` share an onset, so an onset alone narrows a
    /// token down to four candidates, and together with the previous token
    /// usually to one.
    pub fn toy(feat_dim: usize, seed: u64) -> Self {
        let n = 16;
        let vocab_size = n + 1;
        let mut transitions = vec![vec![0.0; vocab_size]; vocab_size];
        for t in 1..=n {
            transitions[0][t] = 1.0 / n as f64;
        }
        for a in 1..=n {
            let s1 = a % n + 1;
            let s2 = (a + 3) % n + 1;
            let others: Vec<usize> = (1..=n).filter(|&t| t != a && t != s1 && t != s2).collect();
            transitions[a][s1] = 0.7;
            transitions[a][s2] = 0.2;
            for &t in &others {
                transitions[a][t] = 0.1 / others.len() as f64;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut embeddings = Matrix::zeros(vocab_size, feat_dim);
        let mut onset_embeddings = Matrix::zeros(vocab_size, feat_dim);
        for t in 1..vocab_size {
            for c in 0..feat_dim {
                embeddings.set(t, c, normal.sample(&mut rng));
            }
        }
        for class in 0..4 {
            let onset: Vec<f32> = (0..feat_dim).map(|_| normal.sample(&mut rng)).collect();
            for t in (1 + class..vocab_size).step_by(4) {
                onset_embeddings.row_mut(t).copy_from_slice(&onset);
            }
        }
        Self {
            vocab_size,
            transitions,
            embeddings,
            onset_embeddings,
            onset_frames: 2,
            frames_per_token: 4,
            min_amplitude: 0.0,
            leading_silence: 2..=10,
            trailing_silence: 0..=0,
            noise_std: 0.5,
            seed,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Grammar(m));
        if self.vocab_size < 2 {
            return bad("need at least one non-blank token".into());
        }
        if self.transitions.len() != self.vocab_size
            || self.embeddings.rows() != self.vocab_size
            || self.onset_embeddings.shape() != self.embeddings.shape()
        {
            return bad("table sizes disagree with vocab_size".into());
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != self.vocab_size || row.iter().any(|p| !(*p >= 0.0)) || row[0] != 0.0 {
                return bad(format!("row {i} malformed"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("row {i} sums to {sum}"));
            }
        }
        if self.frames_per_token < 2 {
            return bad("frames_per_token must be at least 2".into());
        }
        if self.onset_frames >= self.frames_per_token {
            return bad("onset must be shorter than the token".into());
        }
        if !(0.0..=1.0).contains(&self.min_amplitude) {
            return bad("min_amplitude must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be nonnegative".into());
        }
        Ok(())
    }

    fn sample_tokens(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let dists: Vec<WeightedIndex<f64>> = self
            .transitions
            .iter()
            .map(|row| WeightedIndex::new(row).expect("validated row"))
            .collect();
        let mut prev = 0;
        (0..len)
            .map(|_| {
                prev = dists[prev].sample(rng);
                prev as TokenId
            })
            .collect()
    }

    /// Feature frames for a token sequence, with explicit silence lengths.
    pub fn render(&self, tokens: &[TokenId], leading: usize, trailing: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let fd = self.feat_dim();
        let rows = leading + tokens.len() * self.frames_per_token + trailing;
        let mut m = Matrix::zeros(rows, fd);
        let noise = Normal::new(0.0f32, self.noise_std.max(f32::MIN_POSITIVE)).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            let amp = if self.min_amplitude < 1.0 {
                rng.random_range(self.min_amplitude..=1.0)
            } else {
                1.0
            };
            for f in 0..self.frames_per_token {
                let r = leading + i * self.frames_per_token + f;
                let (src, scale) = if f < self.onset_frames {
                    (&self.onset_embeddings, 1.0)
                } else {
                    (&self.embeddings, amp)
                };
                for c in 0..fd {
                    let n = if self.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    m.set(r, c, scale * src.get(t as usize, c) + n);
                }
            }
        }
        m
    }
}

/// `n_utts` utterances with token counts drawn from `len_range`. Ids are
/// `{prefix}{index:05}`.
pub fn gen_corpus(
    grammar: &SyntheticGrammar,
    n_utts: usize,
    len_range: RangeInclusive<usize>,
    seed: u64,
    prefix: &str,
) -> Result<Vec<Utterance>> {
    grammar.validate()?;
    if n_utts == 0 || len_range.is_empty() {
        return Err(TrainError::Config("need at least one utterance and a nonempty length range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_utts)
        .map(|i| {
            let len = rng.random_range(len_range.clone());
            let tokens = grammar.sample_tokens(len, &mut rng);
            let lead = rng.random_range(grammar.leading_silence.clone());
            let trail = rng.random_range(grammar.trailing_silence.clone());
            Utterance {
                id: format!("{prefix}{i:05}"),
                feats: grammar.render(&tokens, lead, trail, &mut rng),
                reference: TokenSeq(tokens),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean per-utterance CTC loss of each epoch.
    pub loss_curve: Vec<f64>,
}

fn global_norm(g: &EncoderWeights) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|(_, m)| m.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Mini-batch gradient descent on the CTC loss, with the chunk mask of the
/// model's own chunk size. Single-threaded and deterministic.
pub fn train(model: &Model, corpus: &[Utterance], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg: &EncoderConfig = &model.config;
    let mut weights = model.weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| (weights.zeros_like(), weights.zeros_like()));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = weights.zeros_like();
            for &i in batch {
                let u = &corpus[i];
                let lg = loss_and_grad(mcfg, &weights, &u.feats, &u.reference)?;
                if lg.loss.is_infinite() {
                    return Err(TrainError::Infeasible(u.id.clone()));
                }
                if !lg.loss.is_finite() {
                    return Err(TrainError::Diverged { step });
                }
                epoch_loss += lg.loss;
                acc.zip_mut(&lg.grads, |a, g| a.add_assign(g));
            }
            let norm = global_norm(&acc) / batch.len() as f64;
            let clip = if norm > cfg.grad_clip as f64 { cfg.grad_clip as f64 / norm } else { 1.0 };
            let scale = (clip / batch.len() as f64) as f32;
            match adam.as_mut() {
                None => {
                    let factor = -cfg.learning_rate * scale;
                    weights.zip_mut(&acc, |w, g| {
                        for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                            *wv += factor * gv;
                        }
                    });
                }
                Some((m1, m2)) => {
                    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                    let t = (step + 1) as i32;
                    let lr_t = cfg.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
                    for (((_, w), (_, g)), ((_, m), (_, v))) in weights
                        .tensors_mut()
                        .into_iter()
                        .zip(acc.tensors())
                        .zip(m1.tensors_mut().into_iter().zip(m2.tensors_mut()))
                    {
                        let it = w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                        for ((wv, &gv), (mv, vv)) in it {
                            let gv = gv * scale;
                            *mv = b1 * *mv + (1.0 - b1) * gv;
                            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                            *wv -= lr_t * *mv / (vv.sqrt() + eps);
                        }
                    }
                }
            }
            if !weights.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            step += 1;
        }
        loss_curve.push(epoch_loss / corpus.len() as f64);
    }
    Ok(TrainOutcome {
        model: Model::new(model.config.clone(), weights)?,
        loss_curve,
    })
}

/// Two columns: epoch (from 1) and mean loss.
pub fn format_loss_curve(curve: &[f64]) -> String {
    let mut s = String::from("# epoch mean_ctc_loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{} {:.6}", i + 1, l);
    }
    s
}

pub fn references(corpus: &[Utterance]) -> BTreeMap<String, TokenSeq> {
    corpus.iter().map(|u| (u.id.clone(), u.reference.clone())).collect()
}

/// Streams the corpus under each configuration and aggregates metrics.
pub fn evaluate(model: &Model, corpus: &[Utterance], configs: &[StreamConfig], threads: usize) -> Result<Vec<ReportRow>> {
    let refs = references(corpus);
    configs
        .iter()
        .map(|cfg| {
            let timelines = decode_corpus(model, corpus, cfg, threads)?;
            Ok(ReportRow {
                chunk_ms: cfg.chunk_ms,
                mode: cfg.mode.to_string(),
                zp_ms: cfg.zp_ms,
                start_layer: cfg.start_layer,
                lookahead_ms: cfg.lookahead_ms,
                metrics: evaluate_timelines(&timelines, &refs)?,
            })
        })
        .collect()
}

/// Everything needed to rebuild the toy model from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub model_seed: u64,
    pub grammar_seed: u64,
    pub corpus_seed: u64,
    pub heldout_seed: u64,
    pub train_utts: usize,
    pub heldout_utts: usize,
    pub tokens_per_utt: RangeInclusive<usize>,
    pub frames_per_token: usize,
    pub onset_frames: usize,
    pub min_amplitude: f32,
    pub leading_silence: RangeInclusive<usize>,
    pub trailing_silence: RangeInclusive<usize>,
    pub noise_std: f32,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

/// Seed of the committed toy model. Acceptance assertions about trained
/// behaviour are made against this exact run.
pub const TOY_SEED: u64 = 7;

impl ToyRecipe {
    pub fn new(seed: u64) -> Self {
        Self {
            model_seed: seed,
            grammar_seed: seed.wrapping_add(1),
            corpus_seed: seed.wrapping_add(2),
            heldout_seed: seed.wrapping_add(3),
            train_utts: 2000,
            heldout_utts: 100,
            tokens_per_utt: 4..=10,
            frames_per_token: 6,
            onset_frames: 3,
            min_amplitude: 0.0,
            leading_silence: 2..=24,
            trailing_silence: 0..=6,
            noise_std: 0.3,
            encoder: EncoderConfig {
                num_layers: 4,
                d_model: 32,
                n_heads: 4,
                ffn_dim: 64,
                vocab_size: 17,
                feat_dim: 8,
                frame_ms: 20,
                subsample: 2,
                chunk_frames: 4,
                left_chunks: None,
            },
            train: TrainConfig {
                epochs: 60,
                optimizer: Optimizer::Adam,
                learning_rate: 0.003,
                batch_size: 8,
                grad_clip: 1.0,
                seed,
            },
        }
    }

    /// Streaming chunk length the model was trained with.
    pub fn chunk_ms(&self) -> u32 {
        self.encoder.chunk_frames as u32 * self.encoder.encoder_frame_ms()
    }

    pub fn grammar(&self) -> SyntheticGrammar {
        SyntheticGrammar {
            frames_per_token: self.frames_per_token,
            onset_frames: self.onset_frames,
            min_amplitude: self.min_amplitude,
            leading_silence: self.leading_silence.clone(),
            trailing_silence: self.trailing_silence.clone(),
            noise_std: self.noise_std,
            ..SyntheticGrammar::toy(self.encoder.feat_dim, self.grammar_seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyArtifacts {
    pub recipe: ToyRecipe,
    pub grammar: SyntheticGrammar,
    pub train_corpus: Vec<Utterance>,
    pub heldout_corpus: Vec<Utterance>,
    pub outcome: TrainOutcome,
}

pub fn train_toy(recipe: &ToyRecipe) -> Result<ToyArtifacts> {
    let grammar = recipe.grammar();
    let train_corpus = gen_corpus(
        &grammar,
        recipe.train_utts,
        recipe.tokens_per_utt.clone(),
        recipe.corpus_seed,
        "train",
    )?;
    let heldout_corpus = gen_corpus(
        &grammar,
        recipe.heldout_utts,
        recipe.tokens_per_utt.clone(),
        recipe.heldout_seed,
        "heldout",
    )?;
    let init = Model::init(recipe.encoder.clone(), recipe.model_seed)?;
    let outcome = train(&init, &train_corpus, &recipe.train)?;
    Ok(ToyArtifacts {
        recipe: recipe.clone(),
        grammar,
        train_corpus,
        heldout_corpus,
        outcome,
    })
}
