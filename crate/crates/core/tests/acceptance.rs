//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zeroprompt::ctc::{ctc_grad_f64, ctc_loss_f64, greedy_collapse, CollapseState, TokenId, TokenSeq};
use zeroprompt::encoder::{forward_chunk, forward_offline, AttentionCache, EncoderConfig, Model, ZeroPromptSpec};
use zeroprompt::engine::{decode_corpus, stream_decode, DisplayEvent, StreamConfig, Timeline};
use zeroprompt::linalg::Matrix;
use zeroprompt::metrics::{aggregate, prompt_errors, tdt, wer, PromptRecord, Ratio, Tdt};
use zeroprompt::trainer::{evaluate, train_toy, ToyArtifacts, ToyRecipe, TOY_SEED};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < budget, || format!("took {took:.1?}, budget {budget:?}"))
}

fn random_config(rng: &mut ChaCha8Rng) -> EncoderConfig {
    let n_heads = *[1, 2].choose(rng).unwrap();
    EncoderConfig {
        num_layers: rng.random_range(1..=4),
        d_model: n_heads * [2, 4].choose(rng).unwrap(),
        n_heads,
        ffn_dim: rng.random_range(4..=12),
        vocab_size: rng.random_range(3..=6),
        feat_dim: rng.random_range(2..=5),
        frame_ms: 10,
        subsample: *[1, 2].choose(rng).unwrap(),
        chunk_frames: *[2, 4].choose(rng).unwrap(),
        left_chunks: if rng.random_bool(0.5) { None } else { Some(rng.random_range(1..=3)) },
    }
}

fn random_feats(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

/// Per-chunk real-frame log-probs from driving the encoder directly.
fn chunk_logprobs(model: &Model, feats: &Matrix, chunk_frames: usize, zp: ZeroPromptSpec) -> Vec<Matrix> {
    let cfg = model.config_with_chunk(chunk_frames);
    let step = chunk_frames * cfg.subsample;
    let mut cache = AttentionCache::new(&cfg);
    let mut out = Vec::new();
    for start in (0..feats.rows()).step_by(step) {
        let end = (start + step).min(feats.rows());
        let r = forward_chunk(&cfg, &model.weights, &cache, &feats.slice_rows(start, end), zp).unwrap();
        cache = r.cache;
        out.push(r.logprobs_real);
    }
    out
}

fn bits(ms: &[Matrix]) -> Vec<u32> {
    ms.iter().flat_map(|m| m.data().iter().map(|v| v.to_bits())).collect()
}

fn zp_grid(chunk_ms: u32, num_layers: usize) -> Vec<StreamConfig> {
    let last = num_layers as i32 - 1;
    let mut layers = vec![0, last / 2, last, -1];
    layers.dedup();
    let mut out = Vec::new();
    for zp in [0, chunk_ms / 2, chunk_ms, 2 * chunk_ms] {
        for &l in &layers {
            out.push(StreamConfig::zero_prompt(chunk_ms, zp, l));
        }
    }
    out
}

/// Causality and final-hypothesis invariance for one model over a corpus.
fn check_invariance(model: &Model, utts: &[(Matrix, TokenSeq)], chunk_frames: usize) -> Result<usize, String> {
    let chunk_ms = chunk_frames as u32 * model.config.encoder_frame_ms();
    let refs: BTreeMap<String, TokenSeq> =
        utts.iter().enumerate().map(|(i, (_, r))| (format!("u{i}"), r.clone())).collect();
    let causal: Vec<Timeline> = utts
        .iter()
        .enumerate()
        .map(|(i, (f, _))| stream_decode(model, &format!("u{i}"), f, &StreamConfig::causal(chunk_ms)).unwrap())
        .collect();
    let hyps = |ts: &[Timeline]| ts.iter().map(|t| (t.utt_id.clone(), t.final_hyp.clone())).collect::<Vec<_>>();
    let base_wer = wer(&hyps(&causal), &refs).unwrap();
    let mut checks = 0;
    for cfg in zp_grid(chunk_ms, model.config.num_layers) {
        let resolved = cfg.resolve(model).map_err(|e| e.to_string())?;
        let mut ts = Vec::new();
        for (i, (f, _)) in utts.iter().enumerate() {
            let base = chunk_logprobs(model, f, chunk_frames, ZeroPromptSpec::disabled());
            let with = chunk_logprobs(model, f, chunk_frames, resolved.zp);
            ensure(bits(&base) == bits(&with), || format!("log-probs differ under {cfg:?}"))?;
            let t = stream_decode(model, &format!("u{i}"), f, &cfg).unwrap();
            ensure(t.final_hyp == causal[i].final_hyp, || format!("final_hyp differs under {cfg:?}"))?;
            ts.push(t);
            checks += 1;
        }
        ensure(wer(&hyps(&ts), &refs).unwrap() == base_wer, || format!("WER differs under {cfg:?}"))?;
    }
    Ok(checks)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checks = 0;
    let mut nonempty = 0;
    let n_models = 120;
    for m in 0..n_models {
        let cfg = random_config(&mut rng);
        let model = Model::init(cfg.clone(), 1000 + m).unwrap();
        let utts: Vec<(Matrix, TokenSeq)> = (0..3)
            .map(|_| {
                let rows = rng.random_range(1..=24);
                let r: Vec<TokenId> = (0..rng.random_range(0..5))
                    .map(|_| rng.random_range(1..cfg.vocab_size as TokenId))
                    .collect();
                (random_feats(&mut rng, rows, cfg.feat_dim), TokenSeq(r))
            })
            .collect();
        checks += check_invariance(&model, &utts, cfg.chunk_frames)?;
        nonempty += utts
            .iter()
            .filter(|(f, _)| {
                let chunk_ms = cfg.chunk_frames as u32 * cfg.encoder_frame_ms();
                !stream_decode(&model, "x", f, &StreamConfig::causal(chunk_ms)).unwrap().final_hyp.is_empty()
            })
            .count();
    }
    within(started, Duration::from_secs(60))?;
    Ok(format!(
        "{n_models} models, {checks} utterance/config pairs bit-identical ({nonempty} nonempty causal hypotheses), {:.1?}",
        started.elapsed()
    ))
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut bounded, mut unbounded) = (0, 0);
    let mut worst = 0.0f32;
    for case in 0..80 {
        let mut cfg = random_config(&mut rng);
        cfg.left_chunks = if case % 2 == 0 { None } else { Some(rng.random_range(1..=2)) };
        let model = Model::init(cfg.clone(), 2000 + case).unwrap();
        let rows = rng.random_range(1..=40);
        let feats = random_feats(&mut rng, rows, cfg.feat_dim);
        let zp = ZeroPromptSpec::new(rng.random_range(0..=4), rng.random_range(-1..cfg.num_layers as i32));
        let streamed = chunk_logprobs(&model, &feats, cfg.chunk_frames, zp);
        let streamed = streamed.iter().skip(1).fold(streamed[0].clone(), |acc, m| acc.vstack(m).unwrap());
        let offline = forward_offline(&cfg, &model.weights, &feats).unwrap();
        let d = streamed.max_abs_diff(&offline);
        worst = worst.max(d);
        ensure(d <= 1e-5, || format!("case {case}: max-abs {d:e} with {cfg:?}"))?;
        if cfg.left_chunks.is_some() {
            bounded += 1;
        } else {
            unbounded += 1;
        }
    }
    within(started, Duration::from_secs(60))?;
    Ok(format!("{bounded} bounded + {unbounded} unbounded cases, worst max-abs {worst:e}"))
}

/// A record whose first `errors` prompt tokens disagree with an all-ones
/// final hypothesis.
fn record(utt: &str, chunk: usize, first: bool, last: bool, np: usize, errors: usize) -> PromptRecord {
    let prompt: Vec<TokenId> = (0..np).map(|k| if k < errors { 2 } else { 1 }).collect();
    PromptRecord {
        utt_id: utt.into(),
        chunk_index: chunk,
        is_first_chunk: first,
        is_last_chunk: last,
        prompt: TokenSeq(prompt),
        committed_len_at_emission: 0,
    }
}

const HYP_LEN: usize = 50;

/// Builds a corpus with the given first/last/all (PE, NP) totals and chunk
/// count, then aggregates it. Prompts are spread over many short utterances
/// so the WER alignment stays small.
fn table_row(first: (usize, usize), last: (usize, usize), all: (usize, usize), chunks: usize) -> (Ratio, Ratio, Ratio, Ratio) {
    let middle = (all.0 - first.0 - last.0, all.1 - first.1 - last.1);
    let mut records = Vec::new();
    for (kind, (mut errors, mut total)) in [(0, first), (1, middle), (2, last)] {
        while total > 0 {
            let np = total.min(HYP_LEN);
            let pe = errors.min(np);
            let utt = format!("u{:05}", records.len());
            records.push(record(&utt, kind, kind == 0, kind == 2, np, pe));
            total -= np;
            errors -= pe;
        }
    }
    let final_hyp = TokenSeq(vec![1; HYP_LEN]);
    let per_utt = chunks / records.len();
    let timelines: Vec<Timeline> = records
        .iter()
        .enumerate()
        .map(|(i, r)| Timeline {
            utt_id: r.utt_id.clone(),
            chunk_ms: 640,
            num_chunks: if i == 0 { chunks - per_utt * (records.len() - 1) } else { per_utt },
            events: vec![DisplayEvent {
                chunk_index: 0,
                cumulative_ms: 640,
                committed: final_hyp.clone(),
                prompt: TokenSeq::new(),
            }],
            final_hyp: final_hyp.clone(),
            processing_seconds: 0.0,
            audio_seconds: 1.0,
        })
        .collect();
    for r in &records {
        assert_eq!(prompt_errors(r, &final_hyp).den as usize, r.prompt.len());
    }
    let refs: BTreeMap<_, _> = timelines.iter().map(|t| (t.utt_id.clone(), t.final_hyp.clone())).collect();
    let rep = aggregate(&records, &timelines, &refs).unwrap();
    (rep.per_f, rep.per_l, rep.per_a, rep.ppc)
}

fn criterion_3() -> Outcome {
    let (f, l, a, ppc) = table_row((87, 2191), (7, 947), (442, 12059), 59081);
    let got = [f.format_percent(), l.format_percent(), a.format_percent(), ppc.truncated(1, 2).unwrap()];
    let want = ["87 / 2191 = 3.9%", "7 / 947 = 0.7%", "442 / 12059 = 3.6%", "0.20"];
    ensure(got == want, || format!("80ms row: got {got:?}"))?;

    let (f, l, a, ppc) = table_row((266, 4351), (19, 1937), (1162, 23450), 59081);
    let got = [f.format_percent(), l.format_percent(), a.format_percent(), ppc.truncated(1, 2).unwrap()];
    // 19/1937 = 0.98% and 23450/59081 = 0.397 only match the table when truncated.
    let want = ["266 / 4351 = 6.1%", "19 / 1937 = 0.9%", "1162 / 23450 = 4.9%", "0.39"];
    ensure(got == want, || format!("160ms row: got {got:?}"))?;
    Ok("PER 87/2191=3.9%, 7/947=0.7%, 266/4351=6.1%; PPC 0.20 and 0.39 reproduced".into())
}

fn criterion_4() -> Outcome {
    // 600ms chunks; the second token's audio ends at 1000ms, so it can only
    // be shown once the second chunk is complete.
    let ev = |i: usize, ms: u32, c: &[TokenId], p: &[TokenId]| DisplayEvent {
        chunk_index: i,
        cumulative_ms: ms,
        committed: TokenSeq(c.to_vec()),
        prompt: TokenSeq(p.to_vec()),
    };
    let mk = |events: Vec<DisplayEvent>, audio_ms: u32| Timeline {
        utt_id: "u".into(),
        chunk_ms: 600,
        num_chunks: events.len(),
        final_hyp: events.last().unwrap().committed.clone(),
        events,
        processing_seconds: 0.0,
        audio_seconds: audio_ms as f64 / 1000.0,
    };
    let causal = mk(vec![ev(0, 600, &[1], &[]), ev(1, 1200, &[1, 2], &[]), ev(2, 1500, &[1, 2], &[])], 1500);
    let got = tdt(&causal);
    ensure(got == Some(Tdt { first_ms: 600, last_ms: 1200 }), || format!("causal example: {got:?}"))?;
    let late_first = mk(vec![ev(0, 600, &[], &[]), ev(1, 1200, &[1], &[])], 1200);
    ensure(tdt(&late_first).map(|t| t.first_ms) == Some(1200), || "first token in chunk 2".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0;
    for _ in 0..1000 {
        let chunk_ms: u32 = 40 * rng.random_range(1..=16);
        let utt_ms: u32 = 40 * rng.random_range(1..=60);
        let lookahead: u32 = if rng.random_bool(0.3) { 40 * rng.random_range(1..=8) } else { 0 };
        let n_chunks = utt_ms.div_ceil(chunk_ms) as usize;
        let mut committed = Vec::new();
        let mut events: Vec<DisplayEvent> = Vec::new();
        for i in 0..n_chunks {
            for _ in 0..rng.random_range(0..=2) {
                committed.push(rng.random_range(1..8));
            }
            let prompt: Vec<TokenId> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..8)).collect();
            let ms = ((i as u32 + 1) * chunk_ms + lookahead).min(utt_ms);
            let e = ev(i, ms, &committed, &prompt);
            match events.last_mut() {
                Some(l) if l.cumulative_ms == ms => *l = e,
                _ => events.push(e),
            }
        }
        let mut t = mk(events, utt_ms);
        t.num_chunks = n_chunks;
        if let Some(v) = tdt(&t) {
            ensure(v.first_ms >= chunk_ms.min(utt_ms), || format!("tdt_f {} below chunk {chunk_ms}", v.first_ms))?;
            ensure(v.first_ms <= v.last_ms, || format!("tdt_f {} > tdt_l {}", v.first_ms, v.last_ms))?;
            checked += 1;
        }
    }
    Ok(format!("1200ms example reproduced; {checked} fuzzed timelines satisfy chunk floor and tdt_f <= tdt_l"))
}

fn brute_force_nll(logprobs: &[f64], vocab: usize, target: &[TokenId]) -> f64 {
    let frames = logprobs.len() / vocab;
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        let ids: Vec<TokenId> = path.iter().map(|&p| p as TokenId).collect();
        if greedy_collapse(&ids, CollapseState::default()).0 .0 == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| logprobs[t * vocab + k]).sum();
            let m = total.max(lp);
            total = if m == f64::NEG_INFINITY { m } else { m + ((total - m).exp() + (lp - m).exp()).ln() };
        }
        let mut i = 0;
        loop {
            if i == frames {
                return -total;
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn log_softmax_rows(logits: &[f64], vocab: usize) -> Vec<f64> {
    logits
        .chunks(vocab)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(move |x| x - lse).collect::<Vec<_>>()
        })
        .collect()
}

fn all_targets(len: usize, vocab: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (1..vocab as TokenId).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut instances, mut worst) = (0, 0.0f64);
    for frames in 1..=4 {
        for vocab in 2..=3 {
            for len in 0..=2 {
                for target in all_targets(len, vocab) {
                    for _ in 0..5 {
                        let logits: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-4.0..4.0)).collect();
                        let lp = log_softmax_rows(&logits, vocab);
                        let got = ctc_loss_f64(&lp, vocab, &target);
                        let want = brute_force_nll(&lp, vocab, &target);
                        if want.is_infinite() {
                            ensure(got == want, || format!("T={frames} V={vocab} {target:?}: {got} vs inf"))?;
                        } else {
                            let d = (got - want).abs();
                            worst = worst.max(d);
                            ensure(d <= 1e-10, || format!("T={frames} V={vocab} {target:?}: {got} vs {want}"))?;
                        }
                        instances += 1;
                    }
                }
            }
        }
    }

    let mut grads = 0;
    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let vocab = rng.random_range(2..=5);
        let frames = rng.random_range(1..=8);
        let len = rng.random_range(0..=frames.min(3));
        let target: Vec<TokenId> = (0..len).map(|_| rng.random_range(1..vocab as TokenId)).collect();
        let logits: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let Some(g) = ctc_grad_f64(&log_softmax_rows(&logits, vocab), vocab, &target) else {
            continue;
        };
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up[i] += h;
            let mut down = logits.clone();
            down[i] -= h;
            let fd = (ctc_loss_f64(&log_softmax_rows(&up, vocab), vocab, &target)
                - ctc_loss_f64(&log_softmax_rows(&down, vocab), vocab, &target))
                / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            worst_rel = worst_rel.max(rel);
            ensure(rel <= 1e-4, || format!("grad {i}: analytic {} vs fd {fd}", g[i]))?;
        }
        grads += 1;
    }
    within(started, Duration::from_secs(60))?;
    Ok(format!(
        "{instances} loss instances (worst {worst:e}), {grads} gradient checks (worst rel {worst_rel:e})"
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for case in 0..1000 {
        let vocab = rng.random_range(2..=5);
        let n = rng.random_range(0..=40);
        let ids: Vec<TokenId> = (0..n)
            .map(|_| if rng.random_bool(0.4) { 0 } else { rng.random_range(0..vocab) })
            .collect();
        let whole = greedy_collapse(&ids, CollapseState::default()).0;
        let mut cuts: Vec<usize> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..=n)).collect();
        cuts.sort();
        let mut state = CollapseState::default();
        let mut out = TokenSeq::new();
        let mut prev = 0;
        for &c in cuts.iter().chain(std::iter::once(&n)) {
            let (part, s) = greedy_collapse(&ids[prev..c], state);
            out.extend_from(&part);
            state = s;
            prev = c;
        }
        ensure(out == whole, || format!("case {case}: {ids:?} cut at {cuts:?}"))?;
    }
    Ok("1000 random splits decode identically to whole sequences".into())
}

fn silent_prompts(art: &ToyArtifacts, chunk_ms: u32) -> usize {
    let fd = art.recipe.encoder.feat_dim;
    let mut n = 0;
    for rows in [4, 8, 16, 40, 80] {
        for zp in [chunk_ms / 2, chunk_ms, 2 * chunk_ms] {
            let t = stream_decode(
                &art.outcome.model,
                "silence",
                &Matrix::zeros(rows, fd),
                &StreamConfig::zero_prompt(chunk_ms, zp, 0),
            )
            .unwrap();
            n += t.events.iter().map(|e| e.prompt.len()).sum::<usize>();
        }
    }
    n
}

fn criterion_7(art: &ToyArtifacts, train_time: Duration) -> Outcome {
    let started = Instant::now();
    let chunk_ms = art.recipe.chunk_ms();
    let rows = evaluate(
        &art.outcome.model,
        &art.heldout_corpus,
        &[StreamConfig::causal(chunk_ms), StreamConfig::zero_prompt(chunk_ms, chunk_ms, 0)],
        1,
    )
    .map_err(|e| e.to_string())?;
    let (base, zp) = (&rows[0].metrics, &rows[1].metrics);
    let wer = base.wer.ratio();
    let mut failures = Vec::new();
    if wer.num * 10 > wer.den {
        failures.push(format!("WER {}/{} above 10%", wer.num, wer.den));
    }
    if zp.ppc.num == 0 {
        failures.push("no prompts at zp = chunk".into());
    }
    let (tf0, tf1) = (base.mean_tdt_f_ms.unwrap_or(f64::NAN), zp.mean_tdt_f_ms.unwrap_or(f64::NAN));
    if !(tf1 < tf0) {
        failures.push(format!("TDT-F not reduced ({tf0:.1} -> {tf1:.1})"));
    }
    let (pf, pl) = (zp.per_f, zp.per_l);
    let per_ok = pf.den > 0 && pl.den > 0 && (pl.num as u128 * pf.den as u128) < (pf.num as u128 * pl.den as u128);
    if !per_ok {
        failures.push(format!("PER-L {} not below PER-F {}", pl.format_percent(), pf.format_percent()));
    }
    let silent = silent_prompts(art, chunk_ms);
    if silent > 0 {
        failures.push(format!("{silent} prompt tokens on all-silence input"));
    }
    let total = train_time + started.elapsed();
    if total > Duration::from_secs(600) {
        failures.push(format!("training + evaluation took {total:.0?}"));
    }
    let summary = format!(
        "WER {}/{}; PPC {}/{}; TDT-F {tf0:.1} -> {tf1:.1} ms; PER-F {}; PER-L {}; silence prompts {silent}; {total:.1?}",
        wer.num,
        wer.den,
        zp.ppc.num,
        zp.ppc.den,
        pf.format_percent(),
        pl.format_percent()
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

fn criterion_8(art: &ToyArtifacts) -> Outcome {
    let model = &art.outcome.model;
    let chunk_ms = art.recipe.chunk_ms();
    let layers = model.config.num_layers as i32;
    let configs: Vec<StreamConfig> = (0..layers).map(|l| StreamConfig::zero_prompt(chunk_ms, chunk_ms, l)).collect();
    let rows = evaluate(model, &art.heldout_corpus, &configs, 1).map_err(|e| e.to_string())?;
    let trend: Vec<String> = rows
        .iter()
        .map(|r| format!("L{}={}", r.start_layer, r.metrics.ppc.truncated(1, 2).unwrap()))
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].metrics.ppc.num <= w[0].metrics.ppc.num);

    // Every start layer on real held-out audio, not just random weights.
    let base = decode_corpus(model, &art.heldout_corpus, &StreamConfig::causal(chunk_ms), 1).unwrap();
    for cfg in &configs {
        let ts = decode_corpus(model, &art.heldout_corpus, cfg, 1).unwrap();
        ensure(ts.iter().zip(&base).all(|(a, b)| a.final_hyp == b.final_hyp), || {
            format!("final hypotheses differ at start layer {}", cfg.start_layer)
        })?;
    }
    let utts: Vec<(Matrix, TokenSeq)> =
        art.heldout_corpus.iter().take(20).map(|u| (u.feats.clone(), u.reference.clone())).collect();
    let checks = check_invariance(model, &utts, model.config.chunk_frames)?;
    let line = format!("PPC by start layer: {}; {checks} invariance checks", trend.join(" "));
    if monotone {
        Ok(line)
    } else {
        Err(format!("PPC not monotone nonincreasing; {line}"))
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(msg) => println!("criterion {name}: PASS ({msg})"),
        Err(msg) => {
            failed += 1;
            println!("criterion {name}: FAIL ({msg})");
        }
    };
    report("1 causality / WER invariance", criterion_1());
    report("2 streaming / offline equivalence", criterion_2());
    report("3 metric arithmetic", criterion_3());
    report("4 token display time", criterion_4());
    report("5 CTC oracle", criterion_5());
    report("6 chunked greedy decode", criterion_6());

    let started = Instant::now();
    match train_toy(&ToyRecipe::new(TOY_SEED)) {
        Ok(art) => {
            let train_time = started.elapsed();
            report("7 trained toy behaviour", criterion_7(&art, train_time));
            report("8 start-layer sweep", criterion_8(&art));
        }
        Err(e) => {
            report("7 trained toy behaviour", Err(format!("training failed: {e}")));
            report("8 start-layer sweep", Err("no trained model".into()));
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
