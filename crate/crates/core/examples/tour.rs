//! A one-minute tour of the workbench: build a corpus, train the recipes
//! at toy scale, round-trip a checkpoint, and run every instrument.
//!
//!     cargo run --example tour

use mblab_core::corpus::{generate_corpus, CorpusSpec};
use mblab_core::evaluation::{
    bias_proxy_report, corpus_cer_vs_labels, decode, degradation_curve, DecodeConfig, DecodeMode,
    InputMode,
};
use mblab_core::model::{
    load_checkpoint, save_checkpoint, AdapterConfig, InsertPart, ModelConfig,
};
use mblab_core::training::{
    provenance_for, train_adapters, train_audio_only, train_mda_kd, train_teacher, TrainRecipe,
};
use std::path::Path;

fn main() {
    let corpus = generate_corpus(&CorpusSpec::toy(40, 3)).unwrap();
    let test = generate_corpus(&CorpusSpec::toy(12, 4)).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        n_audio_blocks: 1,
        n_video_blocks: 1,
        n_fusion_blocks: 1,
        n_joint_blocks: 2,
        n_decoder_blocks: 1,
        vocab_size_with_blank: 13,
        max_len: 128,
        intermediate_ctc_taps: vec![1],
        audio_feature_dim: 16,
        video_feature_dim: 12,
        disable_audio_to_video: false,
    };

    // A few abbreviated epochs; enough to watch the loss move, not enough
    // to converge.
    let mut recipe = TrainRecipe::teacher(7);
    recipe.epochs = 3;
    recipe.batch_size = 8;
    recipe.warmup_steps = 10;
    recipe.learning_rate = 3e-3;
    let (teacher, tlog) = train_teacher(cfg.clone(), &corpus.utterances, &recipe).unwrap();
    println!(
        "teacher: first-epoch loss {:.3}, last {:.3}, val cer {:?}",
        tlog.epoch_mean(0, |r| r.total),
        tlog.epoch_mean(2, |r| r.total),
        tlog.epoch_val_cer
    );

    let mut kd = TrainRecipe::mda_kd(0.5, 11);
    kd.epochs = 2;
    kd.batch_size = 8;
    kd.warmup_steps = 10;
    let (student, slog) = train_mda_kd(&teacher, &corpus.utterances, &kd).unwrap();
    println!(
        "student: mean kd first epoch {:.4}, last {:.4}",
        slog.epoch_mean(0, |r| r.kd),
        slog.epoch_mean(1, |r| r.kd)
    );

    let mut adapted = student.clone();
    adapted
        .insert_adapters(AdapterConfig::with_rank(4, InsertPart::Encoder), 13)
        .unwrap();
    adapted.set_adapter_active(true).unwrap();
    let mut ar = TrainRecipe::adapter(17, true);
    ar.epochs = 1;
    ar.batch_size = 8;
    ar.warmup_steps = 10;
    let (adapted, alog) = train_adapters(&adapted, &corpus.utterances, &ar).unwrap();
    println!(
        "adapter: effective training set {} (doubled), base frozen: {}",
        alog.n_train,
        adapted.base_checksum() == student.base_checksum()
    );

    let ckpt = std::env::temp_dir().join("tour_student.ckpt");
    save_checkpoint(&ckpt, &adapted, &provenance_for(&ar, Some("teacher-7".into()))).unwrap();
    let (reloaded, prov) = load_checkpoint(&ckpt).unwrap();
    println!(
        "checkpoint: recipe {}, parent {:?}, adapters attached: {}",
        prov.recipe,
        prov.parent,
        reloaded.adapters_attached()
    );

    let dc = DecodeConfig::new(DecodeMode::CtcGreedy);
    let hyps = decode(&teacher, &test.utterances, &dc, &InputMode::Complete).unwrap();
    println!(
        "teacher complete-input cer {:.3}",
        corpus_cer_vs_labels(&test.utterances, &hyps).unwrap()
    );
    let curve =
        degradation_curve(&student, &test.utterances, &dc, &InputMode::Complete, 99, 2).unwrap();
    println!("student method-averaged curve {:?}", curve.averaged);

    let mut ao = TrainRecipe::audio_only(23);
    ao.epochs = 1;
    ao.batch_size = 8;
    let (audio_ref, _) = train_audio_only(cfg, &corpus.utterances, &ao).unwrap();
    let report = bias_proxy_report(&student, &audio_ref, &test.utterances, &dc, 101).unwrap();
    println!("bias report: {}", serde_json::to_string_pretty(&report).unwrap());

    let beam = decode(
        &reloaded,
        &test.utterances,
        &DecodeConfig::new(DecodeMode::AttentionBeam),
        &InputMode::AudioOnly,
    )
    .unwrap();
    println!(
        "adapter-path beam decode: {} hypotheses, {} truncated",
        beam.len(),
        beam.iter().filter(|h| h.truncated).count()
    );
    let _ = std::fs::remove_file(&ckpt);
}
