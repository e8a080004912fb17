use crate::linalg::AttnMask;

/// Visibility for one streaming step.
///
/// Keys are laid out as `[cache | real | zp]`, queries as `[real | zp]`.
/// Real queries see the cache and every real frame but no zero-prompt frame,
/// so appending prompt frames cannot change their output. The zero-prompt
/// region is cut into consecutive `block`-frame pieces (the last may be
/// short); a prompt query sees the cache, the real frames, and prompt frames
/// up to the end of its own piece.
pub fn build_chunk_mask(n_cache: usize, n_real: usize, n_zp: usize, block: usize) -> AttnMask {
    assert!(block >= 1, "block must be at least one frame");
    let n_key = n_cache + n_real + n_zp;
    let mut mask = AttnMask::none_allowed(n_real + n_zp, n_key);
    let context = n_cache + n_real;
    for q in 0..n_real {
        mask.allow_range(q, 0..context);
    }
    for j in 0..n_zp {
        let block_end = ((j / block + 1) * block).min(n_zp);
        mask.allow_range(n_real + j, 0..context + block_end);
    }
    mask
}

/// Whole-utterance mask equivalent to streaming with `chunk`-frame chunks
/// and `left_chunks` chunks of history (`None` keeps everything).
pub fn offline_chunk_mask(frames: usize, chunk: usize, left_chunks: Option<usize>) -> AttnMask {
    assert!(chunk >= 1, "chunk must be at least one frame");
    let mut mask = AttnMask::none_allowed(frames, frames);
    for q in 0..frames {
        let c = q / chunk;
        let first_chunk = match left_chunks {
            Some(left) => c.saturating_sub(left),
            None => 0,
        };
        let end = ((c + 1) * chunk).min(frames);
        mask.allow_range(q, first_chunk * chunk..end);
    }
    mask
}
