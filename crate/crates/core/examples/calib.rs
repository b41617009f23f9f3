//! Scratch calibration harness. Not part of the crate surface.

use mblab_core::corpus::*;
use mblab_core::evaluation::*;
use mblab_core::model::*;
use mblab_core::training::*;
use std::time::Instant;

fn small_config(d: usize, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(16, 12, vocab);
    c.d_model = d;
    c.d_ffn = 2 * d;
    c
}

fn recipe_tweak(r: &mut TrainRecipe, epochs: usize, lr: f64, warmup: u64, batch: usize) {
    r.batch_size = batch;
    r.epochs = epochs;
    r.learning_rate = lr;
    r.warmup_steps = warmup;
    r.val_fraction = 0.0;
}

fn cc(model: &Model, utts: &[Utterance], input: &InputMode) -> f64 {
    let cfg = DecodeConfig::new(DecodeMode::CtcGreedy);
    let hyps = decode(model, utts, &cfg, input).unwrap();
    corpus_cer_vs_labels(utts, &hyps).unwrap()
}

fn vmiss(seed: u64) -> InputMode {
    InputMode::Dropped(DropoutSpec {
        method: DropoutMethod::Utterance,
        rate: 1.0,
        target: StreamTarget::Video,
        seed,
    })
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let phase = args.get(1).map(|s| s.as_str()).unwrap_or("time");
    let d: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let n_train: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(128);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(32);

    let mut cs = CorpusSpec::toy(n_train + 96, 1001);
    if let Ok(s) = std::env::var("CAL_SIGMA") {
        cs.noise_std_audio = s.parse().unwrap();
    }
    let corpus = generate_corpus(&cs).unwrap();
    let (train_utts, test_utts) = corpus.utterances.split_at(n_train);
    let cfgm = small_config(d, corpus.spec.vocab_size);
    let warmup = 30u64;

    match phase {
        "time" => {
            for dd in [32usize, 64] {
                let c = small_config(dd, corpus.spec.vocab_size);
                let mut r = TrainRecipe::teacher(11);
                recipe_tweak(&mut r, 1, lr, warmup, batch);
                let t0 = Instant::now();
                let (m, _) = train_teacher(c, train_utts, &r).unwrap();
                let t1 = t0.elapsed().as_secs_f64();
                let t2 = Instant::now();
                let _ = cc(&m, test_utts, &InputMode::Complete);
                let t3 = t2.elapsed().as_secs_f64();
                println!(
                    "d={dd}: {:.1}s/epoch ({} utts, batch 32), decode48 {:.2}s",
                    t1, n_train, t3
                );
            }
        }
        "trend" => {
            let seed: u64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(11);
            println!("== trend seed {seed} ==");
            let t0 = Instant::now();
            let mut rt = TrainRecipe::teacher(seed);
            recipe_tweak(&mut rt, epochs, lr, warmup, batch);
            let (teacher, log_t) = train_teacher(cfgm.clone(), train_utts, &rt).unwrap();
            println!(
                "teacher: {:.1}s, last-epoch loss {:.3}",
                t0.elapsed().as_secs_f64(),
                log_t.epoch_mean(log_t.n_epochs() - 1, |s| s.total)
            );
            let mut students: Vec<(f64, Model)> = vec![(0.0, teacher.clone())];
            for rate in [0.3, 0.7] {
                let t1 = Instant::now();
                let mut r = TrainRecipe::plain_dropout(rate, seed);
                recipe_tweak(&mut r, epochs, lr, warmup, batch);
                let (m, _) = train_plain_dropout(cfgm.clone(), None, train_utts, &r).unwrap();
                println!("plain {rate}: {:.1}s", t1.elapsed().as_secs_f64());
                students.push((rate, m));
            }
            let t2 = Instant::now();
            let mut ra = TrainRecipe::audio_only(seed);
            recipe_tweak(&mut ra, epochs, lr, warmup, batch);
            let (aref, _) = train_audio_only(cfgm.clone(), train_utts, &ra).unwrap();
            println!("audio-only: {:.1}s", t2.elapsed().as_secs_f64());

            let cfgd = DecodeConfig::new(DecodeMode::CtcGreedy);
            let audio_hyps =
                decode(&aref, test_utts, &cfgd, &InputMode::AudioOnly).unwrap();
            let a_cer = corpus_cer_vs_labels(test_utts, &audio_hyps).unwrap();
            println!("audio-only baseline CER {:.4}", a_cer);
            for (rate, m) in &students {
                let complete = cc(m, test_utts, &InputMode::Complete);
                let r1 = cc(m, test_utts, &vmiss(997));
                let sim = similarity_matrix(
                    m,
                    &InputMode::Complete,
                    &aref,
                    &InputMode::AudioOnly,
                    test_utts,
                    mblab_core::forward::TapTag::FusionOut,
                )
                .unwrap()
                .diag_mean;
                let hyps = decode(m, test_utts, &cfgd, &InputMode::Complete).unwrap();
                let rel = relative_cer(&audio_hyps, &hyps).unwrap();
                println!(
                    "rate {rate}: complete {:.4}  rate1.0 {:.4}  fusion_sim {:.4}  rel_cer {:.4}",
                    complete, r1, sim, rel
                );
            }
            println!("total {:.1}s", t0.elapsed().as_secs_f64());
        }
        "audio" => {
            let t0 = Instant::now();
            let mut ra = TrainRecipe::audio_only(11);
            recipe_tweak(&mut ra, epochs, lr, warmup, batch);
            let (aref, log) = train_audio_only(cfgm.clone(), train_utts, &ra).unwrap();
            println!(
                "audio-only: {:.1}s  last-epoch loss {:.3}  CER {:.4}",
                t0.elapsed().as_secs_f64(),
                log.epoch_mean(log.n_epochs() - 1, |s| s.total),
                cc(&aref, test_utts, &InputMode::AudioOnly)
            );
        }
        "kd" => {
            let w_kd: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.5);
            let seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(11);
            println!("== kd seed {seed} w_kd {w_kd} ==");
            let mut rt = TrainRecipe::teacher(seed);
            recipe_tweak(&mut rt, epochs, lr, warmup, batch);
            let (teacher, _) = train_teacher(cfgm.clone(), train_utts, &rt).unwrap();
            let t_complete = cc(&teacher, test_utts, &InputMode::Complete);
            let t_r1 = cc(&teacher, test_utts, &vmiss(997));
            println!("teacher: complete {:.4}  rate1.0 {:.4}", t_complete, t_r1);
            let t0 = Instant::now();
            let mut rk = TrainRecipe::mda_kd(0.7, seed);
            recipe_tweak(&mut rk, epochs, lr, warmup, batch);
            rk.weights.w_kd = w_kd;
            let (student, _) = train_mda_kd(&teacher, train_utts, &rk).unwrap();
            let s_complete = cc(&student, test_utts, &InputMode::Complete);
            let s_r1 = cc(&student, test_utts, &vmiss(997));
            println!(
                "mda w_kd={w_kd}: {:.1}s complete {:.4} (d {:+.2}pt)  rate1.0 {:.4} (d {:+.2}pt)",
                t0.elapsed().as_secs_f64(),
                s_complete,
                (s_complete - t_complete) * 100.0,
                s_r1,
                (s_r1 - t_r1) * 100.0
            );
        }
        "kdadapter" => {
            let w_kd: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.5);
            let seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(11);
            println!("== kd+adapter seed {seed} w_kd {w_kd} ==");
            let mut rt = TrainRecipe::teacher(seed);
            recipe_tweak(&mut rt, epochs, lr, warmup, batch);
            let (teacher, _) = train_teacher(cfgm.clone(), train_utts, &rt).unwrap();
            let t_complete = cc(&teacher, test_utts, &InputMode::Complete);
            let cfgd = DecodeConfig::new(DecodeMode::CtcGreedy);
            let t_curve = degradation_curve(
                &teacher, test_utts, &cfgd, &InputMode::Complete, 4242, 1,
            )
            .unwrap();
            let t_r1 = t_curve.at("averaged", 1.0).unwrap();
            println!("teacher: complete {:.4}  avg rate1.0 {:.4}", t_complete, t_r1);
            let t0 = Instant::now();
            let mut rk = TrainRecipe::mda_kd(0.7, seed);
            recipe_tweak(&mut rk, epochs, lr, warmup, batch);
            rk.weights.w_kd = w_kd;
            let (mut student, _) = train_mda_kd(&teacher, train_utts, &rk).unwrap();
            let s_complete = cc(&student, test_utts, &InputMode::Complete);
            let s_curve = degradation_curve(
                &student, test_utts, &cfgd, &InputMode::Complete, 4242, 1,
            )
            .unwrap();
            let s_r1 = s_curve.at("averaged", 1.0).unwrap();
            println!(
                "mda w_kd={w_kd}: {:.1}s complete {:.4} (d {:+.2}pt)  avg rate1.0 {:.4} (d {:+.2}pt)",
                t0.elapsed().as_secs_f64(),
                s_complete,
                (s_complete - t_complete) * 100.0,
                s_r1,
                (s_r1 - t_r1) * 100.0
            );
            let full_r1 = cc(&student, test_utts, &vmiss(997));
            student
                .insert_adapters(AdapterConfig::with_rank(4, InsertPart::Encoder), seed)
                .unwrap();
            student.set_adapter_active(true).unwrap();
            let pre_audio = cc(&student, test_utts, &InputMode::AudioOnly);
            let t0 = Instant::now();
            let mut ra = TrainRecipe::adapter(seed, true);
            recipe_tweak(&mut ra, epochs, lr, warmup, batch);
            let (tuned, _) = train_adapters(&student, train_utts, &ra).unwrap();
            let post_audio = cc(&tuned, test_utts, &InputMode::AudioOnly);
            println!(
                "adapter: {:.1}s  full-path rate1.0 {:.4}  audio pre {:.4} post {:.4}",
                t0.elapsed().as_secs_f64(),
                full_r1,
                pre_audio,
                post_audio
            );
        }
        "floor" => {
            let fl = generate_corpus(&CorpusSpec::audio_floor_example(n_train + 96, 3003)).unwrap();
            let (fl_train_utts, fl_test_utts) = fl.utterances.split_at(n_train);
            
            let oracle =
                nearest_prototype_token_error(&fl.spec, false, 20000, 555).unwrap();
            println!("oracle floor {:.4} (analytic 0.1667)", oracle);
            let t0 = Instant::now();
            let mut ra = TrainRecipe::audio_only(11);
            recipe_tweak(&mut ra, epochs, lr, warmup, batch);
            let c = small_config(d, fl.spec.vocab_size);
            let (m, _) = train_audio_only(c, fl_train_utts, &ra).unwrap();
            let cer = cc(&m, fl_test_utts, &InputMode::AudioOnly);
            println!(
                "floor model: {:.1}s  CER {:.4}  delta {:+.2}pt",
                t0.elapsed().as_secs_f64(),
                cer,
                (cer - 1.0 / 6.0) * 100.0
            );
        }
        other => eprintln!("unknown phase {other}"),
    }
}
