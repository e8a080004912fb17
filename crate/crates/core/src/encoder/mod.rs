//! Chunk-streaming transformer encoder with a CTC head.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, then `x + ffn(ln(x))`), absolute
//! sinusoidal positions added after the input projection, and a linear output
//! layer followed by log-softmax. Streaming keeps per-layer key/value caches
//! of past real frames; zero-prompt frames can be appended either at the input
//! (start layer 0) or as zero hidden rows in front of a later layer.

mod backprop;
mod mask;
mod model_file;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, layer_norm, linear, log_softmax, LinalgError, Matrix};
use crate::tensorfile::FormatError;

pub use backprop::{loss_and_grad, LossAndGrad};
pub use mask::{build_chunk_mask, offline_chunk_mask};
pub use model_file::MODEL_MAGIC;

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("weights do not match config: {0}")]
    Weights(String),
    #[error("cache does not match config: {0}")]
    Cache(String),
    #[error("start layer {start_layer} out of range for {num_layers} layers")]
    StartLayer { start_layer: i32, num_layers: usize },
    #[error("features have {got} columns, model expects {want}")]
    FeatDim { got: usize, want: usize },
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Output classes including the blank at id 0.
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Duration of one input feature frame.
    pub frame_ms: u32,
    /// Number of consecutive feature frames stacked into one encoder frame.
    pub subsample: usize,
    /// Chunk length in encoder frames.
    pub chunk_frames: usize,
    /// History span in chunks; `None` keeps the whole past.
    pub left_chunks: Option<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.num_layers == 0 {
            return fail("num_layers must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.chunk_frames == 0 {
            return fail("chunk_frames must be at least 1");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.feat_dim == 0 || self.ffn_dim == 0 || self.subsample == 0 || self.frame_ms == 0 {
            return fail("feat_dim, ffn_dim, subsample and frame_ms must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn input_dim(&self) -> usize {
        self.feat_dim * self.subsample
    }

    /// Duration of one encoder frame.
    pub fn encoder_frame_ms(&self) -> u32 {
        self.frame_ms * self.subsample as u32
    }

    /// Maximum cached frames per layer, if bounded.
    pub fn cache_limit(&self) -> Option<usize> {
        self.left_chunks.map(|l| l * self.chunk_frames)
    }
}

/// How many zeroed frames to append to each chunk and where to inject them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroPromptSpec {
    zp_frames: usize,
    start_layer: i32,
}

impl ZeroPromptSpec {
    /// `start_layer == -1` or `zp_frames == 0` both give the disabled spec.
    pub fn new(zp_frames: usize, start_layer: i32) -> Self {
        if zp_frames == 0 || start_layer < 0 {
            Self::disabled()
        } else {
            Self {
                zp_frames,
                start_layer,
            }
        }
    }

    pub fn disabled() -> Self {
        Self {
            zp_frames: 0,
            start_layer: -1,
        }
    }

    pub fn zp_frames(&self) -> usize {
        self.zp_frames
    }

    pub fn start_layer(&self) -> i32 {
        self.start_layer
    }

    pub fn is_disabled(&self) -> bool {
        self.zp_frames == 0
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.start_layer < -1 || self.start_layer >= num_layers as i32 {
            return Err(EncoderError::StartLayer {
                start_layer: self.start_layer,
                num_layers,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

const LAYER_TENSOR_NAMES: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

impl LayerWeights {
    fn tensors(&self) -> [&Matrix; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All trainable tensors. Biases and layer-norm parameters are `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub input_w: Matrix,
    pub input_b: Matrix,
    pub layers: Vec<LayerWeights>,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0f64 / (fan_in + fan_out) as f64).sqrt() as f32;
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape")
}

fn filled(n: usize, v: f32) -> Matrix {
    Matrix::from_vec(1, n, vec![v; n]).expect("shape")
}

impl EncoderWeights {
    /// Xavier-uniform matrices, zero biases, unit layer-norm gains.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                ln1_gamma: filled(d, 1.0),
                ln1_beta: filled(d, 0.0),
                wq: xavier(&mut rng, d, d),
                bq: filled(d, 0.0),
                wk: xavier(&mut rng, d, d),
                bk: filled(d, 0.0),
                wv: xavier(&mut rng, d, d),
                bv: filled(d, 0.0),
                wo: xavier(&mut rng, d, d),
                bo: filled(d, 0.0),
                ln2_gamma: filled(d, 1.0),
                ln2_beta: filled(d, 0.0),
                w1: xavier(&mut rng, d, cfg.ffn_dim),
                b1: filled(cfg.ffn_dim, 0.0),
                w2: xavier(&mut rng, cfg.ffn_dim, d),
                b2: filled(d, 0.0),
            })
            .collect();
        Self {
            input_w: xavier(&mut rng, cfg.input_dim(), d),
            input_b: filled(d, 0.0),
            layers,
            out_w: xavier(&mut rng, d, cfg.vocab_size),
            out_b: filled(cfg.vocab_size, 0.0),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.data_mut().fill(0.0);
        }
        z
    }

    /// Every tensor with its file name, in file order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input_w),
            ("input.bias".to_string(), &self.input_b),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("output.weight".to_string(), &self.out_w));
        out.push(("output.bias".to_string(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("input.weight".to_string(), &mut self.input_w),
            ("input.bias".to_string(), &mut self.input_b),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("output.weight".to_string(), &mut self.out_w));
        out.push(("output.bias".to_string(), &mut self.out_b));
        out
    }

    /// Applies `f` to matching tensor pairs; shapes must agree.
    pub fn zip_mut(&mut self, other: &EncoderWeights, mut f: impl FnMut(&mut Matrix, &Matrix)) {
        for ((_, m), (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            assert_eq!(m.shape(), o.shape(), "zip_mut shape");
            f(m, o);
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.d_model;
        let mut expected = vec![
            ("input.weight".to_string(), (cfg.input_dim(), d)),
            ("input.bias".to_string(), (1, d)),
        ];
        let layer_shapes = [
            (1, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
            (d, cfg.ffn_dim),
            (1, cfg.ffn_dim),
            (cfg.ffn_dim, d),
            (1, d),
        ];
        for i in 0..cfg.num_layers {
            for (name, shape) in LAYER_TENSOR_NAMES.iter().zip(layer_shapes) {
                expected.push((format!("layers.{i}.{name}"), shape));
            }
        }
        expected.push(("output.weight".into(), (d, cfg.vocab_size)));
        expected.push(("output.bias".into(), (1, cfg.vocab_size)));

        let actual: Vec<(String, (usize, usize))> =
            self.tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if actual.len() != expected.len() {
            return Err(EncoderError::Weights(format!(
                "{} tensors, expected {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((an, ashape), (en, eshape)) in actual.iter().zip(&expected) {
            if an != en || ashape != eshape {
                return Err(EncoderError::Weights(format!(
                    "{an} has shape {ashape:?}, expected {en} with {eshape:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Config plus weights; the unit stored in a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub weights: EncoderWeights,
}

impl Model {
    pub fn new(config: EncoderConfig, weights: EncoderWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = EncoderWeights::init(&config, seed);
        Ok(Self { config, weights })
    }

    /// Config with a different streaming chunk length; weights are shared.
    pub fn config_with_chunk(&self, chunk_frames: usize) -> EncoderConfig {
        EncoderConfig {
            chunk_frames,
            ..self.config.clone()
        }
    }
}

/// Per-layer keys/values of past real frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Matrix,
    pub values: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub layers: Vec<LayerCache>,
    /// Encoder frames consumed so far; also the position index of the next
    /// real frame.
    pub frames_consumed: usize,
}

impl AttentionCache {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            layers: (0..cfg.num_layers)
                .map(|_| LayerCache {
                    keys: Matrix::zeros(0, cfg.d_model),
                    values: Matrix::zeros(0, cfg.d_model),
                })
                .collect(),
            frames_consumed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.layers.len() != cfg.num_layers {
            return Err(EncoderError::Cache(format!(
                "{} layers, config has {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        let n = self.len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.keys.shape() != (n, cfg.d_model) || l.values.shape() != (n, cfg.d_model) {
                return Err(EncoderError::Cache(format!("layer {i} has inconsistent shape")));
            }
        }
        if n > self.frames_consumed {
            return Err(EncoderError::Cache("more cached rows than frames consumed".into()));
        }
        if let Some(limit) = cfg.cache_limit() {
            if n > limit {
                return Err(EncoderError::Cache(format!("{n} cached rows exceed limit {limit}")));
            }
        }
        Ok(())
    }
}

/// Result of one streaming step.
#[derive(Debug, Clone)]
pub struct ChunkOutput {
    /// `n_real × vocab` log-probabilities for the real frames.
    pub logprobs_real: Matrix,
    /// `zp_frames × vocab` log-probabilities for the zero-prompt frames.
    pub logprobs_zp: Matrix,
    pub cache: AttentionCache,
}

/// Stacks `factor` consecutive rows side by side; a trailing partial group is
/// zero-padded.
pub fn stack_frames(feats: &Matrix, factor: usize) -> Matrix {
    if factor == 1 {
        return feats.clone();
    }
    let rows = feats.rows().div_ceil(factor);
    let cols = feats.cols() * factor;
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..feats.rows() {
        let (g, k) = (r / factor, r % factor);
        out.row_mut(g)[k * feats.cols()..(k + 1) * feats.cols()].copy_from_slice(feats.row(r));
    }
    out
}

/// Sinusoidal encoding for absolute positions `start..start + n`.
pub fn positional_encoding(start: usize, n: usize, d_model: usize) -> Matrix {
    let mut pe = Matrix::zeros(n, d_model);
    for r in 0..n {
        let pos = (start + r) as f64;
        for i in 0..d_model {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(r, i, v as f32);
        }
    }
    pe
}

fn embed(cfg: &EncoderConfig, w: &EncoderWeights, x: &Matrix, start: usize) -> Result<Matrix> {
    let mut h = linear(x, &w.input_w, w.input_b.data())?;
    h.add_assign(&positional_encoding(start, x.rows(), cfg.d_model));
    Ok(h)
}

/// Multi-head attention of `queries` (already layer-normed and projected)
/// against full key/value matrices.
fn multi_head(
    cfg: &EncoderConfig,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &linalg::AttnMask,
) -> Result<Matrix> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = Matrix::zeros(q.rows(), cfg.d_model);
    for h in 0..cfg.n_heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let out = linalg::masked_attention(
            &q.slice_cols(a, b),
            &k.slice_cols(a, b),
            &v.slice_cols(a, b),
            mask,
            scale,
        )?;
        ctx.set_cols(a, &out);
    }
    Ok(ctx)
}

fn feed_forward(lw: &LayerWeights, x: &Matrix) -> Result<Matrix> {
    let h = layer_norm(x, lw.ln2_gamma.data(), lw.ln2_beta.data(), LN_EPS)?;
    let mut f = linear(&h, &lw.w1, lw.b1.data())?;
    for v in f.data_mut() {
        *v = v.max(0.0);
    }
    Ok(linear(&f, &lw.w2, lw.b2.data())?)
}

fn keep_last_rows(m: Matrix, limit: Option<usize>) -> Matrix {
    match limit {
        Some(l) if m.rows() > l => m.slice_rows(m.rows() - l, m.rows()),
        _ => m,
    }
}

/// One streaming step over `real_feats` (raw feature frames, stacked here by
/// `cfg.subsample`), optionally extended by a zero prompt.
///
/// The real-frame log-probabilities never depend on `zp`: real queries are
/// masked away from every prompt key and rows are computed independently.
pub fn forward_chunk(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    cache: &AttentionCache,
    real_feats: &Matrix,
    zp: ZeroPromptSpec,
) -> Result<ChunkOutput> {
    cfg.validate()?;
    weights.check(cfg)?;
    cache.check(cfg)?;
    zp.validate(cfg.num_layers)?;
    if real_feats.rows() == 0 {
        return Err(EncoderError::Empty);
    }
    if real_feats.cols() != cfg.feat_dim {
        return Err(EncoderError::FeatDim {
            got: real_feats.cols(),
            want: cfg.feat_dim,
        });
    }

    let x = stack_frames(real_feats, cfg.subsample);
    let n_real = x.rows();
    let start = cache.frames_consumed;
    let mut h = embed(cfg, weights, &x, start)?;
    if zp.start_layer == 0 {
        let zeros = Matrix::zeros(zp.zp_frames, cfg.input_dim());
        h = h.vstack(&embed(cfg, weights, &zeros, start + n_real)?)?;
    }

    let mut new_layers = Vec::with_capacity(cfg.num_layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        if zp.start_layer > 0 && l == zp.start_layer as usize {
            h = h.vstack(&Matrix::zeros(zp.zp_frames, cfg.d_model))?;
        }
        let n_zp = h.rows() - n_real;
        let hn = layer_norm(&h, lw.ln1_gamma.data(), lw.ln1_beta.data(), LN_EPS)?;
        let q = linear(&hn, &lw.wq, lw.bq.data())?;
        let k = linear(&hn, &lw.wk, lw.bk.data())?;
        let v = linear(&hn, &lw.wv, lw.bv.data())?;
        let past = &cache.layers[l];
        let k_all = past.keys.vstack(&k)?;
        let v_all = past.values.vstack(&v)?;
        let mask = build_chunk_mask(past.keys.rows(), n_real, n_zp, cfg.chunk_frames);
        let ctx = multi_head(cfg, &q, &k_all, &v_all, &mask)?;
        h.add_assign(&linear(&ctx, &lw.wo, lw.bo.data())?);
        h.add_assign(&feed_forward(lw, &h)?);

        // Only real rows ever enter the cache.
        let limit = cfg.cache_limit();
        let n_past = past.keys.rows();
        new_layers.push(LayerCache {
            keys: keep_last_rows(k_all.slice_rows(0, n_past + n_real), limit),
            values: keep_last_rows(v_all.slice_rows(0, n_past + n_real), limit),
        });
    }

    let logprobs = log_softmax(&linear(&h, &weights.out_w, weights.out_b.data())?);
    Ok(ChunkOutput {
        logprobs_real: logprobs.slice_rows(0, n_real),
        logprobs_zp: logprobs.slice_rows(n_real, logprobs.rows()),
        cache: AttentionCache {
            layers: new_layers,
            frames_consumed: start + n_real,
        },
    })
}

/// Whole-utterance pass under the chunk-causal mask that streaming induces.
/// Returns `frames × vocab` log-probabilities.
pub fn forward_offline(cfg: &EncoderConfig, weights: &EncoderWeights, feats: &Matrix) -> Result<Matrix> {
    cfg.validate()?;
    weights.check(cfg)?;
    if feats.rows() == 0 {
        return Err(EncoderError::Empty);
    }
    if feats.cols() != cfg.feat_dim {
        return Err(EncoderError::FeatDim {
            got: feats.cols(),
            want: cfg.feat_dim,
        });
    }
    let x = stack_frames(feats, cfg.subsample);
    let mask = offline_chunk_mask(x.rows(), cfg.chunk_frames, cfg.left_chunks);
    let mut h = embed(cfg, weights, &x, 0)?;
    for lw in &weights.layers {
        let hn = layer_norm(&h, lw.ln1_gamma.data(), lw.ln1_beta.data(), LN_EPS)?;
        let q = linear(&hn, &lw.wq, lw.bq.data())?;
        let k = linear(&hn, &lw.wk, lw.bk.data())?;
        let v = linear(&hn, &lw.wv, lw.bv.data())?;
        let ctx = multi_head(cfg, &q, &k, &v, &mask)?;
        h.add_assign(&linear(&ctx, &lw.wo, lw.bo.data())?);
        h.add_assign(&feed_forward(lw, &h)?);
    }
    Ok(log_softmax(&linear(&h, &weights.out_w, weights.out_b.data())?))
}
