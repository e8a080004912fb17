//! CTC decoding, loss and gradient, plus token-level edit distance.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

pub type TokenId = u32;

/// The reserved "no emission" symbol.
pub const BLANK: TokenId = 0;

/// Ordered token ids. Decoder outputs never contain [`BLANK`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn extend_from(&mut self, other: &TokenSeq) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut out = self.clone();
        out.extend_from(other);
        out
    }

    pub fn contains_blank(&self) -> bool {
        self.0.contains(&BLANK)
    }

    /// Renders ids as letters (`1 → a`, `2 → b`, …); ids past `z` print as
    /// `<id>`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &id in &self.0 {
            match id {
                1..=26 => s.push((b'a' + (id - 1) as u8) as char),
                _ => s.push_str(&format!("<{id}>")),
            }
        }
        s
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Last frame-level argmax seen by the greedy decoder, carried across chunk
/// boundaries of a single utterance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollapseState {
    pub last: Option<TokenId>,
}

/// Standard CTC greedy rule: merge repeats, then drop blanks. Repeats are
/// judged against `state`, so decoding a sequence in pieces gives the same
/// tokens as decoding it whole.
pub fn greedy_collapse(frame_argmax: &[TokenId], state: CollapseState) -> (TokenSeq, CollapseState) {
    let mut out = TokenSeq::new();
    let mut last = state.last;
    for &id in frame_argmax {
        if id != BLANK && Some(id) != last {
            out.push(id);
        }
        last = Some(id);
    }
    (out, CollapseState { last })
}

/// Whether some alignment of `target` fits into `frames` frames.
pub fn is_feasible(frames: usize, target: &[TokenId]) -> bool {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    frames >= target.len() + repeats
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn extended_labels(target: &[TokenId]) -> Vec<TokenId> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &t in target {
        ext.push(t);
        ext.push(BLANK);
    }
    ext
}

/// Log-space forward variables. `alpha[t][s]` includes the emission at `t`.
fn forward_vars(lp: &[f64], vocab: usize, ext: &[TokenId]) -> Vec<Vec<f64>> {
    let frames = lp.len() / vocab;
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    alpha[0][0] = lp[ext[0] as usize];
    if s_len > 1 {
        alpha[0][1] = lp[ext[1] as usize];
    }
    for t in 1..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + row[ext[s] as usize];
        }
    }
    alpha
}

/// Log-space backward variables. `beta[t][s]` covers frames after `t` only.
fn backward_vars(lp: &[f64], vocab: usize, ext: &[TokenId]) -> Vec<Vec<f64>> {
    let frames = lp.len() / vocab;
    let s_len = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let next = &lp[(t + 1) * vocab..(t + 2) * vocab];
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + next[ext[s] as usize];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1] + next[ext[s + 1] as usize]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[t + 1][s + 2] + next[ext[s + 2] as usize]);
            }
            beta[t][s] = acc;
        }
    }
    beta
}

fn total_log_prob(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let s_len = last.len();
    let mut lp = last[s_len - 1];
    if s_len > 1 {
        lp = log_add(lp, last[s_len - 2]);
    }
    lp
}

/// CTC negative log-likelihood over row-major `frames × vocab` log-probs.
/// Returns `+inf` for an infeasible target.
pub fn ctc_loss_f64(logprobs: &[f64], vocab: usize, target: &[TokenId]) -> f64 {
    let frames = logprobs.len() / vocab;
    assert!(frames >= 1, "ctc_loss needs at least one frame");
    if !is_feasible(frames, target) {
        return f64::INFINITY;
    }
    let ext = extended_labels(target);
    -total_log_prob(&forward_vars(logprobs, vocab, &ext))
}

/// Gradient of the CTC loss with respect to the logits that produced
/// `logprobs` through a log-softmax. `None` when the target is infeasible.
pub fn ctc_grad_f64(logprobs: &[f64], vocab: usize, target: &[TokenId]) -> Option<Vec<f64>> {
    let frames = logprobs.len() / vocab;
    assert!(frames >= 1, "ctc_grad needs at least one frame");
    if !is_feasible(frames, target) {
        return None;
    }
    let ext = extended_labels(target);
    let alpha = forward_vars(logprobs, vocab, &ext);
    let beta = backward_vars(logprobs, vocab, &ext);
    let log_p = total_log_prob(&alpha);

    let mut grad = vec![0.0f64; logprobs.len()];
    for t in 0..frames {
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = logprobs[t * vocab + k].exp();
        }
        for (s, &label) in ext.iter().enumerate() {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > f64::NEG_INFINITY {
                g[label as usize] -= occ.exp();
            }
        }
    }
    Some(grad)
}

fn to_f64(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// CTC loss for a `T × V` matrix of log-probabilities.
pub fn ctc_loss(logprobs: &Matrix, target: &[TokenId]) -> f64 {
    ctc_loss_f64(&to_f64(logprobs), logprobs.cols(), target)
}

#[derive(Debug, Clone)]
pub struct CtcGrad {
    /// `T × V` gradient with respect to pre-softmax logits; all zeros when
    /// infeasible.
    pub grad: Matrix,
    pub feasible: bool,
}

pub fn ctc_grad(logprobs: &Matrix, target: &[TokenId]) -> CtcGrad {
    let (rows, cols) = logprobs.shape();
    match ctc_grad_f64(&to_f64(logprobs), cols, target) {
        Some(g) => CtcGrad {
            grad: Matrix::from_vec(rows, cols, g.into_iter().map(|v| v as f32).collect())
                .expect("shape preserved"),
            feasible: true,
        },
        None => CtcGrad {
            grad: Matrix::zeros(rows, cols),
            feasible: false,
        },
    }
}

/// Edit operations turning `ref` into `hyp`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
    }
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the one with
/// the most substitutions is chosen; given the total and the substitution
/// count, deletions and insertions are then fixed by the two lengths, so the
/// result does not depend on traversal order.
pub fn edit_distance(hyp: &[TokenId], reference: &[TokenId]) -> EditCounts {
    let (n, m) = (hyp.len(), reference.len());
    // (cost, substitutions) minimized lexicographically on (cost, -subs).
    let mut dp = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = (i, 0);
    }
    for j in 0..=m {
        dp[0][j] = (j, 0);
    }
    let better = |a: (usize, usize), b: (usize, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);
    for i in 1..=n {
        for j in 1..=m {
            let (c, s) = dp[i - 1][j - 1];
            let mut best = if hyp[i - 1] == reference[j - 1] {
                (c, s)
            } else {
                (c + 1, s + 1)
            };
            let ins = (dp[i - 1][j].0 + 1, dp[i - 1][j].1);
            if better(ins, best) {
                best = ins;
            }
            let del = (dp[i][j - 1].0 + 1, dp[i][j - 1].1);
            if better(del, best) {
                best = del;
            }
            dp[i][j] = best;
        }
    }
    let (total, substitutions) = dp[n][m];
    // matches + S + D = m and matches + S + I = n, so D - I = m - n.
    let rest = (total - substitutions) as i64;
    let deletions = ((rest + m as i64 - n as i64) / 2) as usize;
    let rest = rest as usize;
    EditCounts {
        substitutions,
        deletions,
        insertions: rest - deletions,
    }
}
