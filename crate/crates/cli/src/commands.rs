use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use zeroprompt::corpus::{self, Utterance};
use zeroprompt::encoder::{build_chunk_mask, Model};
use zeroprompt::engine::{decode_corpus, write_timeline_log, Mode, StreamConfig};
use zeroprompt::metrics::{report_json, report_table};
use zeroprompt::trainer::{self, format_loss_curve, ToyRecipe};

use crate::manifest::RunManifest;
use crate::{BenchArgs, CliError, DecodeArgs, InspectMaskArgs, TrainToyArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_corpus(path: &Path) -> anyhow::Result<Vec<Utterance>> {
    let utts = corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))?;
    anyhow::ensure!(!utts.is_empty(), "corpus {} is empty", path.display());
    Ok(utts)
}

fn training_chunk_ms(model: &Model) -> u32 {
    model.config.chunk_frames as u32 * model.config.encoder_frame_ms()
}

fn check_start_layer(layer: i32) -> Result<()> {
    if layer < -1 {
        return Err(usage(format!("--start-layer {layer}: must be -1 or a layer index")));
    }
    Ok(())
}

pub fn train_toy(args: &TrainToyArgs) -> Result<()> {
    let mut recipe = ToyRecipe::new(args.seed);
    if let Some(e) = args.epochs {
        recipe.train.epochs = e;
    }
    create_dir(&args.out)?;
    let art = trainer::train_toy(&recipe)?;
    let model = &art.outcome.model;

    let model_path = args.out.join("model.zpm");
    let train_path = args.out.join("train.zpc");
    let heldout_path = args.out.join("heldout.zpc");
    let loss_path = args.out.join("loss.txt");
    let grammar_path = args.out.join("grammar.json");
    model.save(&model_path)?;
    corpus::save(&art.train_corpus, &train_path)?;
    corpus::save(&art.heldout_corpus, &heldout_path)?;
    fs::write(&loss_path, format_loss_curve(&art.outcome.loss_curve))?;
    fs::write(&grammar_path, serde_json::to_string_pretty(&art.grammar)? + "\n")?;

    let chunk_ms = recipe.chunk_ms();
    let rows = trainer::evaluate(model, &art.heldout_corpus, &[StreamConfig::causal(chunk_ms)], 1)?;
    let wer = rows[0].metrics.wer.ratio();
    println!(
        "final loss {:.4}; held-out WER {} / {} = {}%",
        art.outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
        wer.num,
        wer.den,
        wer.truncated(100, 2).unwrap_or_else(|| "-".into())
    );

    let mut m = RunManifest::new("train-toy", &recipe);
    m.seed = Some(args.seed);
    m.outputs = vec![model_path, train_path, heldout_path, loss_path, grammar_path];
    m.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct DecodeConfig {
    stream: StreamConfig,
    threads: usize,
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let mode: Mode = args.mode.parse().map_err(usage)?;
    if let Some(l) = args.start_layer {
        check_start_layer(l)?;
    }
    if args.chunk_ms == Some(0) {
        return Err(usage("--chunk-ms must be positive"));
    }
    if args.threads == Some(0) {
        return Err(usage("--threads must be positive"));
    }
    if mode != Mode::ZeroPrompt && (args.zp_ms.is_some() || args.start_layer.is_some()) {
        eprintln!("warning: --zp-ms/--start-layer only apply to --mode zeroprompt; ignored");
    }
    if mode != Mode::LookAhead && args.lookahead_ms.is_some() {
        eprintln!("warning: --lookahead-ms only applies to --mode lookahead; ignored");
    }

    let model = load_model(&args.model)?;
    let utts = load_corpus(&args.feats)?;
    let chunk_ms = args.chunk_ms.unwrap_or_else(|| training_chunk_ms(&model));
    let stream = match mode {
        Mode::Causal => StreamConfig::causal(chunk_ms),
        Mode::ZeroPrompt => {
            StreamConfig::zero_prompt(chunk_ms, args.zp_ms.unwrap_or(chunk_ms), args.start_layer.unwrap_or(0))
        }
        Mode::LookAhead => StreamConfig::look_ahead(chunk_ms, args.lookahead_ms.unwrap_or(chunk_ms)),
    };
    stream.resolve(&model)?;
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    create_dir(&args.out)?;
    let timelines = decode_corpus(&model, &utts, &stream, threads)?;
    let log_path = args.out.join("timeline.jsonl");
    let mut w = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    for t in &timelines {
        write_timeline_log(&mut w, t)?;
    }
    w.flush()?;

    let mut m = RunManifest::new("decode", DecodeConfig { stream, threads });
    m.inputs = vec![args.model.clone(), args.feats.clone()];
    m.outputs = vec![log_path];
    m.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchConfig {
    chunk_ms: Vec<u32>,
    zp_ms: Vec<u32>,
    start_layer: Vec<i32>,
    threads: usize,
    rows: Vec<StreamConfig>,
}

/// One row per (chunk, zp, layer); every disabled combination collapses
/// into a single causal row per chunk size.
fn sweep(chunks: &[u32], zps: &[u32], layers: &[i32]) -> Vec<StreamConfig> {
    let mut rows = Vec::new();
    for &c in chunks {
        for &zp in zps {
            for &l in layers {
                let cfg = if zp == 0 || l < 0 {
                    StreamConfig::causal(c)
                } else {
                    StreamConfig::zero_prompt(c, zp, l)
                };
                if !rows.contains(&cfg) {
                    rows.push(cfg);
                }
            }
        }
    }
    rows
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    if args.threads != 1 {
        return Err(usage(format!(
            "--threads {}: timing is measured single-threaded, only 1 is accepted",
            args.threads
        )));
    }
    for (name, empty) in [
        ("--chunk-ms", args.chunk_ms.as_ref().is_some_and(Vec::is_empty)),
        ("--zp-ms", args.zp_ms.as_ref().is_some_and(Vec::is_empty)),
        ("--start-layer", args.start_layer.as_ref().is_some_and(Vec::is_empty)),
    ] {
        if empty {
            return Err(usage(format!("{name}: empty list")));
        }
    }
    if let Some(ls) = &args.start_layer {
        for &l in ls {
            check_start_layer(l)?;
        }
    }
    if args.chunk_ms.as_ref().is_some_and(|v| v.contains(&0)) {
        return Err(usage("--chunk-ms values must be positive"));
    }

    let model = load_model(&args.model)?;
    let utts = load_corpus(&args.corpus)?;
    let chunk_ms = args.chunk_ms.clone().unwrap_or_else(|| vec![training_chunk_ms(&model)]);
    let zp_ms = args.zp_ms.clone().unwrap_or_else(|| vec![0, chunk_ms[0]]);
    let start_layer = args.start_layer.clone().unwrap_or_else(|| vec![0]);
    let rows = sweep(&chunk_ms, &zp_ms, &start_layer);
    for r in &rows {
        r.resolve(&model)?;
    }

    create_dir(&args.out)?;
    let report = trainer::evaluate(&model, &utts, &rows, 1)?;
    let json_path = args.out.join("report.json");
    let txt_path = args.out.join("report.txt");
    fs::write(&json_path, report_json(&report) + "\n")?;
    let table = report_table(&report);
    fs::write(&txt_path, &table)?;
    print!("{table}");

    let mut m = RunManifest::new(
        "bench",
        BenchConfig {
            chunk_ms,
            zp_ms,
            start_layer,
            threads: 1,
            rows,
        },
    );
    m.inputs = vec![args.model.clone(), args.corpus.clone()];
    m.outputs = vec![json_path, txt_path];
    m.write(&args.out)?;
    Ok(())
}

pub fn inspect_mask(args: &InspectMaskArgs) -> Result<()> {
    if args.real == 0 && args.zp == 0 {
        return Err(usage("need --real or --zp to be at least 1"));
    }
    if args.block == 0 {
        return Err(usage("--block must be at least 1"));
    }
    let mask = build_chunk_mask(args.cache, args.real, args.zp, args.block);
    print!("{}", mask.render());
    Ok(())
}
