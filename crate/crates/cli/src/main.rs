//! `mblab` — command-line workbench for the bimodal sequence-recognition
//! experiments: corpus generation, the five training recipes, evaluation
//! suites, latent-similarity analysis, and path-cost tables.
//!
//! Every subcommand is deterministic given its configuration, seed, and
//! input artifact bytes. Runs that write artifacts also write a
//! `resolved.cfg` sidecar (the complete configuration, which reproduces
//! the run when passed back via `--config`) and append a line to
//! `manifest.jsonl` recording inputs, outputs, and wall time.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 numeric abort.

mod config;
mod manifest;

use clap::{Parser, Subcommand};
use config::RunConfig;
use manifest::{artifact_id, write_text, ManifestEntry};
use mblab_core::corpus::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusSpec};
use mblab_core::evaluation::{
    corpus_cer_vs_labels, decode, degradation_curve, similarity_matrix, DecodeConfig, DecodeMode,
    InputMode,
};
use mblab_core::forward::TapTag;
use mblab_core::model::{
    load_checkpoint, save_checkpoint, AdapterConfig, ForwardPath, InsertPart, Model, ModelConfig,
    SeqLens,
};
use mblab_core::training::{
    provenance_for, train_adapters, train_audio_only, train_mda_kd, train_plain_dropout,
    train_teacher, RecipeKind, TrainLog, TrainRecipe,
};
use mblab_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "mblab",
    version,
    about = "Workbench for modality-bias experiments on synthetic audio-visual corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired audio-visual corpus file.
    GenCorpus {
        /// Configuration file (flat `section.key = value` text).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Global seed; overrides the config's `seed` key.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one recipe and write a checkpoint plus its training log.
    Train {
        /// teacher | plain-dropout | mda-kd | adapter | audio-only
        #[arg(long)]
        recipe: String,
        /// Corpus file to train on.
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to initialize from (plain-dropout continuation, and
        /// the base model for the adapter recipe).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Frozen teacher checkpoint (mda-kd only).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: single condition or the full degradation grid.
    Eval {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Corpus file with reference labels.
        #[arg(long)]
        corpus: PathBuf,
        /// degradation | single
        #[arg(long, default_value = "single")]
        suite: String,
        /// complete | audio-only
        #[arg(long, default_value = "complete")]
        mode: String,
        /// Worker threads for the degradation grid (default: MBLAB_THREADS
        /// or 1); results are independent of the thread count.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Latent-similarity matrix between two checkpoints at one tap.
    Analyze {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// video_frontend_out | video_block_1 | fusion_out | joint_mid | joint_out
        #[arg(long, default_value = "fusion_out")]
        tap: String,
        /// Input mode for model A: complete | audio-only
        #[arg(long, default_value = "complete")]
        mode_a: String,
        /// Input mode for model B: complete | audio-only
        #[arg(long, default_value = "complete")]
        mode_b: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// FLOP and parameter counts per forward path.
    Flops {
        #[arg(long)]
        model: PathBuf,
        /// full | audio-only (omit for both plus their ratio)
        #[arg(long)]
        path: Option<String>,
        /// Audio frames for the cost model.
        #[arg(long, default_value_t = 32)]
        t_audio: usize,
        /// Video frames for the cost model.
        #[arg(long, default_value_t = 16)]
        t_video: usize,
        /// Decoder positions for the cost model.
        #[arg(long, default_value_t = 9)]
        t_targets: usize,
    },
}

fn main() {
    let started = Instant::now();
    let raw: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match config::extract_overrides(raw) {
        Ok(x) => x,
        Err(e) => die(&e),
    };
    let cli = Cli::parse_from(rest);
    if let Err(e) = run(cli, &overrides, started) {
        die(&e);
    }
}

fn die(e: &Error) -> ! {
    eprintln!("error: {e}");
    let code = match e {
        Error::Contract(_) | Error::Config(_) | Error::Format(_) => 2,
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
    };
    std::process::exit(code)
}

fn run(cli: Cli, overrides: &[(String, String)], started: Instant) -> Result<()> {
    match cli.command {
        Command::GenCorpus { config, out, seed } => {
            let cfg = resolve(config.as_deref(), overrides, seed)?;
            cmd_gen_corpus(&cfg, &out, started)
        }
        Command::Train {
            recipe,
            corpus,
            init,
            teacher,
            config,
            out,
            seed,
        } => {
            let cfg = resolve(config.as_deref(), overrides, seed)?;
            cmd_train(
                &cfg,
                &recipe,
                &corpus,
                init.as_deref(),
                teacher.as_deref(),
                &out,
                started,
            )
        }
        Command::Eval {
            model,
            corpus,
            suite,
            mode,
            threads,
            config,
            out,
            seed,
        } => {
            let cfg = resolve(config.as_deref(), overrides, seed)?;
            cmd_eval(&cfg, &model, &corpus, &suite, &mode, threads, &out, started)
        }
        Command::Analyze {
            model_a,
            model_b,
            corpus,
            tap,
            mode_a,
            mode_b,
            config,
            out,
            seed,
        } => {
            let cfg = resolve(config.as_deref(), overrides, seed)?;
            cmd_analyze(
                &cfg, &model_a, &model_b, &corpus, &tap, &mode_a, &mode_b, &out, started,
            )
        }
        Command::Flops {
            model,
            path,
            t_audio,
            t_video,
            t_targets,
        } => cmd_flops(&model, path.as_deref(), t_audio, t_video, t_targets),
    }
}

fn resolve(file: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults();
    if let Some(p) = file {
        cfg.apply_file(p)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn corpus_spec_from(cfg: &RunConfig) -> Result<CorpusSpec> {
    Ok(CorpusSpec {
        vocab_size: cfg.usize("corpus.vocab_size")?,
        n_general: cfg.usize("corpus.n_general")?,
        n_audio_confusable_pairs: cfg.usize("corpus.n_audio_confusable_pairs")?,
        n_video_confusable_pairs: cfg.usize("corpus.n_video_confusable_pairs")?,
        frames_per_token_audio: cfg.usize("corpus.frames_per_token_audio")?,
        frames_per_token_video: cfg.usize("corpus.frames_per_token_video")?,
        feature_dim_audio: cfg.usize("corpus.feature_dim_audio")?,
        feature_dim_video: cfg.usize("corpus.feature_dim_video")?,
        noise_std_audio: cfg.f64("corpus.noise_std_audio")?,
        noise_std_video: cfg.f64("corpus.noise_std_video")?,
        min_len: cfg.usize("corpus.min_len")?,
        max_len: cfg.usize("corpus.max_len")?,
        n_utterances: cfg.usize("corpus.n_utterances")?,
        seed: cfg.u64("seed")?,
    })
}

fn model_config_from(cfg: &RunConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let mc = ModelConfig {
        d_model: cfg.usize("model.d_model")?,
        n_heads: cfg.usize("model.n_heads")?,
        d_ffn: cfg.usize("model.d_ffn")?,
        n_audio_blocks: cfg.usize("model.n_audio_blocks")?,
        n_video_blocks: cfg.usize("model.n_video_blocks")?,
        n_fusion_blocks: cfg.usize("model.n_fusion_blocks")?,
        n_joint_blocks: cfg.usize("model.n_joint_blocks")?,
        n_decoder_blocks: cfg.usize("model.n_decoder_blocks")?,
        vocab_size_with_blank: corpus.spec.vocab_size + 1,
        max_len: cfg.usize("model.max_len")?,
        intermediate_ctc_taps: cfg.usize_list("model.intermediate_ctc_taps")?,
        audio_feature_dim: corpus.spec.feature_dim_audio,
        video_feature_dim: corpus.spec.feature_dim_video,
        disable_audio_to_video: cfg.bool("model.disable_audio_to_video")?,
    };
    mc.validate()?;
    Ok(mc)
}

fn recipe_from(cfg: &RunConfig, kind: RecipeKind) -> Result<TrainRecipe> {
    let seed = cfg.u64("seed")?;
    let rate = cfg.f64("train.dropout_rate")?;
    let mut recipe = match kind {
        RecipeKind::Teacher => TrainRecipe::teacher(seed),
        RecipeKind::PlainDropout => TrainRecipe::plain_dropout(rate, seed),
        RecipeKind::MdaKd => TrainRecipe::mda_kd(rate, seed),
        RecipeKind::AudioOnly => TrainRecipe::audio_only(seed),
        RecipeKind::Adapter => TrainRecipe::adapter(seed, cfg.bool("train.augment")?),
    };
    recipe.epochs = cfg.usize("train.epochs")?;
    recipe.batch_size = cfg.usize("train.batch_size")?;
    recipe.learning_rate = cfg.f64("train.learning_rate")?;
    recipe.warmup_steps = cfg.u64("train.warmup_steps")?;
    recipe.val_fraction = cfg.f64("train.val_fraction")?;
    recipe.weights.lambda = cfg.f64("train.lambda")?;
    recipe.weights.w_kd = cfg.f64("train.w_kd")?;
    recipe.weights.temperature = cfg.f64("train.temperature")?;
    recipe.validate()?;
    Ok(recipe)
}

fn decode_config_from(cfg: &RunConfig) -> Result<DecodeConfig> {
    let dc = DecodeConfig {
        mode: DecodeMode::parse(cfg.str("eval.decode_mode")?)?,
        beam_width: cfg.usize("eval.beam_width")?,
        max_decode_len: cfg.usize("eval.max_decode_len")?,
    };
    dc.validate()?;
    Ok(dc)
}

fn parse_input_mode(s: &str) -> Result<&'static str> {
    match s {
        "complete" => Ok("complete"),
        "audio-only" | "audio_only" => Ok("audio_only"),
        other => Err(Error::config(format!(
            "unknown input mode '{other}' (expected complete or audio-only)"
        ))),
    }
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

fn finish(
    out: &Path,
    subcommand: &str,
    cfg: &RunConfig,
    inputs: Vec<(String, PathBuf, String)>,
    outputs: Vec<PathBuf>,
    started: Instant,
) -> Result<()> {
    write_text(&out.join("resolved.cfg"), &cfg.render())?;
    ManifestEntry {
        subcommand: subcommand.to_string(),
        inputs,
        outputs,
        resolved_config: cfg.render(),
        wall_time_s: started.elapsed().as_secs_f64(),
    }
    .append_to(out)
}

fn cmd_gen_corpus(cfg: &RunConfig, out: &Path, started: Instant) -> Result<()> {
    ensure_out(out)?;
    let spec = corpus_spec_from(cfg)?;
    let corpus = generate_corpus(&spec)?;
    let path = out.join("corpus.mbc");
    write_corpus(&path, &corpus)?;
    println!(
        "wrote {} ({} utterances, vocab {}, id {})",
        path.display(),
        corpus.utterances.len(),
        spec.vocab_size,
        artifact_id(&path)?
    );
    finish(out, "gen-corpus", cfg, Vec::new(), vec![path], started)
}

fn load_model(path: &Path) -> Result<(Model, mblab_core::model::Provenance, String)> {
    let (model, prov) = load_checkpoint(path)?;
    let id = artifact_id(path)?;
    Ok((model, prov, id))
}

fn train_log_json(log: &TrainLog) -> String {
    let mut value = log.summary();
    // Wall time belongs to the run ledger, not the report: reports must be
    // byte-identical across reruns.
    value.as_object_mut().expect("summary object").remove("wall_time_s");
    value.to_string()
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    recipe_str: &str,
    corpus_path: &Path,
    init: Option<&Path>,
    teacher: Option<&Path>,
    out: &Path,
    started: Instant,
) -> Result<()> {
    ensure_out(out)?;
    let kind = RecipeKind::parse(&recipe_str.replace('-', "_"))?;
    let corpus = read_corpus(corpus_path)?;
    let recipe = recipe_from(cfg, kind)?;
    let mut inputs = vec![(
        "corpus".to_string(),
        corpus_path.to_path_buf(),
        artifact_id(corpus_path)?,
    )];

    let (model, log, parent) = match kind {
        RecipeKind::Teacher => {
            let mc = model_config_from(cfg, &corpus)?;
            let (m, l) = train_teacher(mc, &corpus.utterances, &recipe)?;
            (m, l, None)
        }
        RecipeKind::PlainDropout => match init {
            Some(p) => {
                let (im, _prov, id) = load_model(p)?;
                inputs.push(("init".to_string(), p.to_path_buf(), id.clone()));
                let (m, l) =
                    train_plain_dropout(im.config().clone(), Some(&im), &corpus.utterances, &recipe)?;
                (m, l, Some(id))
            }
            None => {
                let mc = model_config_from(cfg, &corpus)?;
                let (m, l) = train_plain_dropout(mc, None, &corpus.utterances, &recipe)?;
                (m, l, None)
            }
        },
        RecipeKind::MdaKd => {
            let tp = teacher.ok_or_else(|| {
                Error::config("recipe mda-kd needs --teacher <checkpoint>")
            })?;
            let (tm, _prov, id) = load_model(tp)?;
            inputs.push(("teacher".to_string(), tp.to_path_buf(), id.clone()));
            let (m, l) = train_mda_kd(&tm, &corpus.utterances, &recipe)?;
            (m, l, Some(id))
        }
        RecipeKind::AudioOnly => {
            let mc = model_config_from(cfg, &corpus)?;
            let (m, l) = train_audio_only(mc, &corpus.utterances, &recipe)?;
            (m, l, None)
        }
        RecipeKind::Adapter => {
            let ip = init.ok_or_else(|| {
                Error::config("recipe adapter needs --init <checkpoint>")
            })?;
            let (mut im, _prov, id) = load_model(ip)?;
            inputs.push(("init".to_string(), ip.to_path_buf(), id.clone()));
            if !im.adapters_attached() {
                let insert = match cfg.str("train.adapter_insert")? {
                    "encoder" => InsertPart::Encoder,
                    "encoder_and_decoder" | "encoder-and-decoder" => InsertPart::EncoderAndDecoder,
                    other => {
                        return Err(Error::config(format!(
                            "train.adapter_insert: unknown value '{other}'"
                        )))
                    }
                };
                im.insert_adapters(
                    AdapterConfig::with_rank(cfg.usize("train.adapter_rank")?, insert),
                    recipe.seed,
                )?;
            }
            im.set_adapter_active(true)?;
            let (m, l) = train_adapters(&im, &corpus.utterances, &recipe)?;
            (m, l, Some(id))
        }
    };

    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &model, &provenance_for(&recipe, parent))?;
    let csv = out.join("train_log.csv");
    write_text(&csv, &log.to_csv())?;
    let json = out.join("train_log.json");
    write_text(&json, &train_log_json(&log))?;

    let last_val = log.epoch_val_cer.last().copied();
    println!(
        "trained {} for {} steps; {}wrote {}",
        kind.name(),
        log.steps.len(),
        match last_val {
            Some(c) => format!("final validation CER {c:.4}; "),
            None => String::new(),
        },
        ckpt.display()
    );
    finish(out, "train", cfg, inputs, vec![ckpt, csv, json], started)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    model_path: &Path,
    corpus_path: &Path,
    suite: &str,
    mode: &str,
    threads: Option<usize>,
    out: &Path,
    started: Instant,
) -> Result<()> {
    ensure_out(out)?;
    let (model, prov, model_id) = load_model(model_path)?;
    let corpus = read_corpus(corpus_path)?;
    let dc = decode_config_from(cfg)?;
    let seed = cfg.u64("seed")?;

    let mode_name = parse_input_mode(mode)?;
    let input = match mode_name {
        "audio_only" => {
            if !model.adapters_attached() && prov.recipe != "audio_only" {
                return Err(Error::config(
                    "audio-only evaluation needs an adapter-equipped checkpoint or one trained by the audio-only recipe",
                ));
            }
            InputMode::AudioOnly
        }
        _ => InputMode::Complete,
    };

    let inputs = vec![
        ("model".to_string(), model_path.to_path_buf(), model_id),
        (
            "corpus".to_string(),
            corpus_path.to_path_buf(),
            artifact_id(corpus_path)?,
        ),
    ];

    let outputs = match suite {
        "single" => {
            let hyps = decode(&model, &corpus.utterances, &dc, &input)?;
            let cer = corpus_cer_vs_labels(&corpus.utterances, &hyps)?;
            let report = serde_json::json!({
                "suite": "single",
                "mode": mode_name,
                "decode_mode": dc.mode.name(),
                "n_utterances": corpus.utterances.len(),
                "cer": cer,
            });
            let json = out.join("eval.json");
            write_text(&json, &report.to_string())?;
            let csv = out.join("eval.csv");
            write_text(
                &csv,
                &format!("suite,mode,decode_mode,n_utterances,cer\nsingle,{},{},{},{:.6}\n",
                    mode_name, dc.mode.name(), corpus.utterances.len(), cer),
            )?;
            println!("single {} CER {:.4}", mode_name, cer);
            vec![json, csv]
        }
        "degradation" => {
            let n_threads = effective_threads(threads)?;
            let curve = degradation_curve(&model, &corpus.utterances, &dc, &input, seed, n_threads)?;
            let json = out.join("degradation.json");
            write_text(&json, &serde_json::to_string(&curve).expect("serializable curve"))?;
            let csv = out.join("degradation.csv");
            write_text(&csv, &curve.to_csv())?;
            let rate1 = curve.at("averaged", 1.0).unwrap_or(f64::NAN);
            println!(
                "degradation suite over {} utterances: method-averaged CER at rate 1.0 = {:.4}",
                corpus.utterances.len(),
                rate1
            );
            vec![json, csv]
        }
        other => {
            return Err(Error::config(format!(
                "unknown suite '{other}' (expected degradation or single)"
            )))
        }
    };
    finish(out, "eval", cfg, inputs, outputs, started)
}

fn effective_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("MBLAB_THREADS") {
            Ok(v) => v.parse().map_err(|_| {
                Error::config(format!("MBLAB_THREADS: expected a positive integer, got '{v}'"))
            })?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::config("thread count must be at least 1"));
    }
    Ok(n)
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    cfg: &RunConfig,
    a_path: &Path,
    b_path: &Path,
    corpus_path: &Path,
    tap: &str,
    mode_a: &str,
    mode_b: &str,
    out: &Path,
    started: Instant,
) -> Result<()> {
    ensure_out(out)?;
    let (model_a, _prov_a, id_a) = load_model(a_path)?;
    let (model_b, _prov_b, id_b) = load_model(b_path)?;
    let corpus = read_corpus(corpus_path)?;
    let corpus_id = artifact_id(corpus_path)?;
    let seed = cfg.u64("seed")?;

    let tag = TapTag::parse(tap)
        .ok_or_else(|| Error::config(format!("unknown tap '{tap}'")))?;
    let to_input = |name: &str| -> InputMode {
        match name {
            "audio_only" => InputMode::AudioOnly,
            _ => InputMode::Complete,
        }
    };
    let ma = parse_input_mode(mode_a)?;
    let mb = parse_input_mode(mode_b)?;
    let sim = similarity_matrix(
        &model_a,
        &to_input(ma),
        &model_b,
        &to_input(mb),
        &corpus.utterances,
        tag,
    )?;

    let report = serde_json::json!({
        "tap": sim.tap,
        "n": sim.n,
        "diag_mean": sim.diag_mean,
        "values": sim.values,
        "provenance": {
            "model_a": id_a,
            "model_b": id_b,
            "corpus": corpus_id,
            "seed": seed,
            "mode_a": ma,
            "mode_b": mb,
        },
    });
    let json = out.join("similarity.json");
    write_text(&json, &report.to_string())?;
    let csv = out.join("similarity.csv");
    write_text(&csv, &sim.to_csv())?;
    println!("{} diag_mean {:.4} over {} utterances", sim.tap, sim.diag_mean, sim.n);

    let inputs = vec![
        ("model_a".to_string(), a_path.to_path_buf(), id_a),
        ("model_b".to_string(), b_path.to_path_buf(), id_b),
        ("corpus".to_string(), corpus_path.to_path_buf(), corpus_id),
    ];
    finish(out, "analyze", cfg, inputs, vec![json, csv], started)
}

fn cmd_flops(
    model_path: &Path,
    path: Option<&str>,
    t_audio: usize,
    t_video: usize,
    t_targets: usize,
) -> Result<()> {
    let (model, _prov, _id) = load_model(model_path)?;
    let lens = SeqLens {
        t_audio,
        t_video,
        t_targets,
    };
    let both = [
        ("full", ForwardPath::Full),
        ("audio-only", ForwardPath::AudioOnly),
    ];
    let selected: Vec<_> = match path {
        None => both.to_vec(),
        Some("full") => vec![both[0]],
        Some("audio-only") | Some("audio_only") => vec![both[1]],
        Some(other) => {
            return Err(Error::config(format!(
                "unknown path '{other}' (expected full or audio-only)"
            )))
        }
    };
    println!("path        flops         params   (t_audio={t_audio}, t_video={t_video}, t_targets={t_targets})");
    let mut costs = Vec::new();
    for (name, p) in &selected {
        let c = model.count_flops_params(*p, &lens);
        println!("{name:<11} {:>12}  {:>9}", c.flops, c.params);
        costs.push(c);
    }
    if costs.len() == 2 {
        println!(
            "ratio       {:.4} (audio-only / full flops)",
            costs[1].flops as f64 / costs[0].flops as f64
        );
    }
    Ok(())
}
