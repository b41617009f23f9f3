//! Training recipes over one shared deterministic loop.
//!
//! Five recipes cover the workbench: a clean-input bimodal teacher, plain
//! video-dropout training, distillation from a frozen teacher onto dropped
//! inputs, an audio-only baseline on the video-disabled path, and low-rank
//! adapter tuning with the base network frozen. All randomness (validation
//! split, batch order, per-sample dropout) is derived from the recipe seed,
//! so a recipe re-run reproduces its checkpoint bit for bit.

use crate::corpus::{apply_training_policy, DropoutMethod, TrainingDropoutPolicy, Utterance};
use crate::error::{Error, Result};
use crate::evaluation::{corpus_cer_vs_labels, decode, DecodeConfig, DecodeMode, InputMode};
use crate::forward::{decoder_teacher_io, TapTag};
use crate::graph::{Graph, NodeId};
use crate::model::{Model, ModelConfig, ParamBinding, Provenance};
use crate::objectives::{
    kd_loss, multitask_loss, student_loss, KdPair, LossWeights, MultitaskOutcome,
};
use crate::optim::{lr_at, AdamState};
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    /// Clean-input bimodal model; the distillation source.
    Teacher,
    /// Bimodal training under the video-dropout policy.
    PlainDropout,
    /// Distillation: a frozen teacher sees complete inputs, the student
    /// sees dropped inputs and matches the teacher's latents.
    MdaKd,
    /// Audio-only baseline on the video-disabled path, no adapters.
    AudioOnly,
    /// Low-rank adapter tuning on the video-disabled path; every base
    /// parameter stays frozen.
    Adapter,
}

impl RecipeKind {
    pub fn name(&self) -> &'static str {
        match self {
            RecipeKind::Teacher => "teacher",
            RecipeKind::PlainDropout => "plain_dropout",
            RecipeKind::MdaKd => "mda_kd",
            RecipeKind::AudioOnly => "audio_only",
            RecipeKind::Adapter => "adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(RecipeKind::Teacher),
            "plain_dropout" => Ok(RecipeKind::PlainDropout),
            "mda_kd" => Ok(RecipeKind::MdaKd),
            "audio_only" => Ok(RecipeKind::AudioOnly),
            "adapter" => Ok(RecipeKind::Adapter),
            other => Err(Error::config(format!("unknown recipe '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub kind: RecipeKind,
    pub dropout: TrainingDropoutPolicy,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    /// Fraction of utterances held out for the per-epoch validation CER.
    pub val_fraction: f64,
    /// Adapter recipe only: double the training set with audio-stream
    /// speed variants and adjacent-utterance concatenations.
    pub augment: bool,
}

fn no_dropout() -> TrainingDropoutPolicy {
    TrainingDropoutPolicy {
        d_prob: 0.0,
        method_pool: Vec::new(),
        rate: 0.0,
    }
}

fn video_dropout(rate: f64) -> TrainingDropoutPolicy {
    TrainingDropoutPolicy {
        d_prob: 1.0,
        method_pool: vec![
            DropoutMethod::Segment,
            DropoutMethod::Utterance,
            DropoutMethod::Interval,
        ],
        rate,
    }
}

impl TrainRecipe {
    fn base(kind: RecipeKind, dropout: TrainingDropoutPolicy, seed: u64) -> Self {
        TrainRecipe {
            kind,
            dropout,
            weights: LossWeights::default(),
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 200,
            seed,
            val_fraction: 0.1,
            augment: false,
        }
    }

    pub fn teacher(seed: u64) -> Self {
        TrainRecipe::base(RecipeKind::Teacher, no_dropout(), seed)
    }

    pub fn plain_dropout(rate: f64, seed: u64) -> Self {
        TrainRecipe::base(RecipeKind::PlainDropout, video_dropout(rate), seed)
    }

    pub fn mda_kd(rate: f64, seed: u64) -> Self {
        TrainRecipe::base(RecipeKind::MdaKd, video_dropout(rate), seed)
    }

    pub fn audio_only(seed: u64) -> Self {
        TrainRecipe::base(RecipeKind::AudioOnly, no_dropout(), seed)
    }

    pub fn adapter(seed: u64, augment: bool) -> Self {
        TrainRecipe {
            augment,
            ..TrainRecipe::base(RecipeKind::Adapter, no_dropout(), seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup must be at least 1 step"));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "validation fraction {} outside [0, 0.5]",
                self.val_fraction
            )));
        }
        self.weights.validate()?;
        self.dropout.validate()?;
        match self.kind {
            RecipeKind::Teacher | RecipeKind::AudioOnly | RecipeKind::Adapter => {
                if self.dropout.d_prob != 0.0 {
                    return Err(Error::config(format!(
                        "the {} recipe trains on unaugmented streams; training dropout must be disabled",
                        self.kind.name()
                    )));
                }
            }
            RecipeKind::PlainDropout | RecipeKind::MdaKd => {}
        }
        if self.augment && self.kind != RecipeKind::Adapter {
            return Err(Error::config(
                "audio augmentation belongs to the adapter recipe",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Logs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Batch means of the loss components, in nats.
    pub ctc: f64,
    pub attention: f64,
    pub kd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub recipe: String,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub steps: Vec<StepRecord>,
    /// Corpus CER of CTC-greedy decoding on the held-out split after each
    /// epoch; empty when the recipe holds nothing out.
    pub epoch_val_cer: Vec<f64>,
    /// Effective training-set size (augmentation included).
    pub n_train: usize,
    pub n_val: usize,
    /// Informational only; excluded from determinism comparisons.
    pub wall_time_s: f64,
}

impl TrainLog {
    pub fn epoch_records(&self, epoch: usize) -> &[StepRecord] {
        let lo = epoch * self.steps_per_epoch;
        let hi = ((epoch + 1) * self.steps_per_epoch).min(self.steps.len());
        &self.steps[lo.min(self.steps.len())..hi]
    }

    pub fn n_epochs(&self) -> usize {
        if self.steps_per_epoch == 0 {
            return 0;
        }
        self.steps.len().div_ceil(self.steps_per_epoch)
    }

    pub fn epoch_mean(&self, epoch: usize, pick: impl Fn(&StepRecord) -> f64) -> f64 {
        let recs = self.epoch_records(epoch);
        if recs.is_empty() {
            return f64::NAN;
        }
        recs.iter().map(pick).sum::<f64>() / recs.len() as f64
    }

    /// One `step,ctc,attention,kd,total` line per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,ctc,attention,kd,total\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.step, r.ctc, r.attention, r.kd, r.total
            ));
        }
        out
    }

    pub fn summary(&self) -> serde_json::Value {
        let epochs = self.n_epochs();
        let first = if epochs > 0 {
            self.epoch_mean(0, |r| r.total)
        } else {
            f64::NAN
        };
        let last = if epochs > 0 {
            self.epoch_mean(epochs - 1, |r| r.total)
        } else {
            f64::NAN
        };
        serde_json::json!({
            "recipe": self.recipe,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "steps": self.steps.len(),
            "steps_per_epoch": self.steps_per_epoch,
            "epochs": epochs,
            "first_epoch_mean_total": first,
            "last_epoch_mean_total": last,
            "epoch_val_cer": self.epoch_val_cer,
            "wall_time_s": self.wall_time_s,
        })
    }
}

/// Checkpoint lineage record for a finished recipe.
pub fn provenance_for(recipe: &TrainRecipe, parent: Option<String>) -> Provenance {
    Provenance {
        recipe: recipe.kind.name().to_string(),
        seed: recipe.seed,
        parent,
    }
}

// ---------------------------------------------------------------------------
// Audio augmentation (adapter recipe)
// ---------------------------------------------------------------------------

/// Synthetic-variant ids live far above corpus ids.
const VARIANT_ID_OFFSET: u64 = 1 << 32;

/// Audio-stream speed variant: `stretch` duplicates every 10th frame
/// (roughly 0.9x playback speed), otherwise every 10th frame is dropped
/// (roughly 1.1x). Labels and the video stream are untouched; the video
/// stream is never read on the path this recipe trains.
fn speed_variant(utt: &Utterance, stretch: bool) -> Utterance {
    const K: usize = 10;
    let src = &utt.audio;
    let mut data: Vec<f32> = Vec::with_capacity(src.data.len() + src.cols * (src.rows / K));
    let mut rows = 0usize;
    for i in 0..src.rows {
        let tenth = (i + 1) % K == 0;
        if tenth && !stretch {
            continue;
        }
        data.extend_from_slice(src.row(i));
        rows += 1;
        if tenth && stretch {
            data.extend_from_slice(src.row(i));
            rows += 1;
        }
    }
    let mut out = utt.clone();
    out.id = VARIANT_ID_OFFSET + utt.id;
    out.audio = crate::corpus::FrameMatrix {
        rows,
        cols: src.cols,
        data,
    };
    out
}

/// Two utterances played back to back: both streams and the labels
/// concatenate.
fn concat_variant(a: &Utterance, b: &Utterance) -> Utterance {
    let join = |x: &crate::corpus::FrameMatrix, y: &crate::corpus::FrameMatrix| {
        let mut data = x.data.clone();
        data.extend_from_slice(&y.data);
        crate::corpus::FrameMatrix {
            rows: x.rows + y.rows,
            cols: x.cols,
            data,
        }
    };
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    let mut mask = a.natural_video_mask.clone();
    mask.extend_from_slice(&b.natural_video_mask);
    Utterance {
        id: VARIANT_ID_OFFSET + a.id,
        audio: join(&a.audio, &b.audio),
        video: join(&a.video, &b.video),
        labels,
        natural_video_mask: mask,
    }
}

/// One variant per training utterance, so the effective set size exactly
/// doubles: every 4th position concatenates with its neighbor, the rest
/// alternate between the two speed variants.
pub(crate) fn audio_variants(train: &[Utterance]) -> Vec<Utterance> {
    let n = train.len();
    (0..n)
        .map(|i| {
            if n > 1 && i % 4 == 3 {
                concat_variant(&train[i], &train[(i + 1) % n])
            } else {
                speed_variant(&train[i], i % 2 == 1)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainPath {
    Full,
    AudioPlain,
    AudioAdapters,
}

struct SampleLoss {
    node: NodeId,
    ctc: f64,
    attention: f64,
    kd: f64,
}

#[allow(clippy::too_many_arguments)]
fn sample_loss(
    g: &mut Graph,
    model: &Model,
    binding: &ParamBinding,
    teacher: Option<(&Model, &ParamBinding)>,
    path: TrainPath,
    dropped: &Utterance,
    clean: &Utterance,
    weights: &LossWeights,
) -> Result<SampleLoss> {
    let (dec_inputs, dec_targets) = decoder_teacher_io(&dropped.labels, model.config().bos_eos());
    let fp = match path {
        TrainPath::Full => model.forward_full(
            g,
            binding,
            &dropped.audio.to_tensor(),
            dropped.audio.rows,
            &dropped.video.to_tensor(),
            dropped.video.rows,
            Some(&dec_inputs),
        )?,
        TrainPath::AudioPlain => model.forward_audio_path(
            g,
            binding,
            &dropped.audio.to_tensor(),
            dropped.audio.rows,
            Some(&dec_inputs),
            false,
        )?,
        TrainPath::AudioAdapters => model.forward_audio_only(
            g,
            binding,
            &dropped.audio.to_tensor(),
            dropped.audio.rows,
            Some(&dec_inputs),
        )?,
    };
    let logits = fp.decoder_logits.expect("decoder inputs were supplied");
    let ml = match multitask_loss(
        g,
        &fp.ctc_log_probs,
        &dropped.labels,
        logits,
        &dec_targets,
        weights,
    )? {
        MultitaskOutcome::Feasible(ml) => ml,
        MultitaskOutcome::Infeasible => {
            return Err(Error::contract(format!(
                "utterance {}: {} frames cannot carry its {} labels",
                dropped.id,
                dropped.audio.rows,
                dropped.labels.len()
            )));
        }
    };
    let (kd_node, kd_val) = match teacher {
        Some((t_model, t_binding)) => {
            let t_fp = t_model.forward_full(
                g,
                t_binding,
                &clean.audio.to_tensor(),
                clean.audio.rows,
                &clean.video.to_tensor(),
                clean.video.rows,
                None,
            )?;
            let mut pairs = Vec::with_capacity(TapTag::ALL.len());
            for tag in TapTag::ALL {
                let t = t_fp.latent(tag).expect("full path produces every tap");
                let s = fp.latent(tag).expect("full path produces every tap");
                pairs.push(KdPair {
                    tag: tag.as_str(),
                    teacher: t,
                    student: s,
                });
            }
            let kd = kd_loss(g, &pairs, weights.temperature)?;
            (Some(kd), g.value(kd).item())
        }
        None => (None, 0.0),
    };
    let total = student_loss(g, kd_node, ml.total, if kd_node.is_some() { weights.w_kd } else { 0.0 })?;
    Ok(SampleLoss {
        node: total,
        ctc: g.value(ml.ctc_mean).item(),
        attention: g.value(ml.attention).item(),
        kd: kd_val,
    })
}

fn run(
    mut model: Model,
    teacher: Option<&Model>,
    path: TrainPath,
    adapters_only: bool,
    utts: &[Utterance],
    recipe: &TrainRecipe,
) -> Result<(Model, TrainLog)> {
    recipe.validate()?;
    if utts.is_empty() {
        return Err(Error::config("training needs at least one utterance"));
    }
    let started = std::time::Instant::now();

    // Held-out split, fixed by the recipe seed before any augmentation.
    let mut order: Vec<usize> = (0..utts.len()).collect();
    Rng::derive(recipe.seed, &[tags::SPLIT]).shuffle(&mut order);
    let mut n_val = (utts.len() as f64 * recipe.val_fraction).round() as usize;
    if recipe.val_fraction > 0.0 && utts.len() > 1 {
        n_val = n_val.clamp(1, utts.len() - 1);
    } else {
        n_val = 0;
    }
    let val: Vec<Utterance> = order[..n_val].iter().map(|&i| utts[i].clone()).collect();
    let mut train: Vec<Utterance> = order[n_val..].iter().map(|&i| utts[i].clone()).collect();

    if recipe.augment {
        let variants = audio_variants(&train);
        train.extend(variants);
    }

    let use_kd = teacher.is_some() && recipe.weights.w_kd > 0.0;
    let slot_sizes: Vec<usize> = if adapters_only {
        (0..model.n_adapter_tensors())
            .map(|i| model.adapter_tensor(i).len())
            .collect()
    } else {
        (0..model.n_params()).map(|i| model.param(i).len()).collect()
    };
    let mut adam = AdamState::new(&slot_sizes, recipe.learning_rate);

    let steps_per_epoch = train.len().div_ceil(recipe.batch_size);
    let mut log = TrainLog {
        recipe: recipe.kind.name().to_string(),
        seed: recipe.seed,
        steps_per_epoch,
        steps: Vec::with_capacity(steps_per_epoch * recipe.epochs),
        epoch_val_cer: Vec::new(),
        n_train: train.len(),
        n_val: val.len(),
        wall_time_s: 0.0,
    };

    let mut global_step: u64 = 0;
    for epoch in 0..recipe.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derive(recipe.seed, &[tags::BATCH_ORDER, epoch as u64]).shuffle(&mut order);
        for chunk in order.chunks(recipe.batch_size) {
            global_step += 1;
            let clean_batch: Vec<Utterance> = chunk.iter().map(|&i| train[i].clone()).collect();
            // Per-sample randomness is keyed by (epoch seed, utterance id):
            // independent of batch composition, fresh each epoch.
            let dropped_batch = if recipe.dropout.d_prob > 0.0 {
                let epoch_seed =
                    Rng::derive(recipe.seed, &[tags::TRAIN_DROPOUT, epoch as u64]).next_u64();
                apply_training_policy(&clean_batch, &recipe.dropout, epoch_seed)?
            } else {
                clean_batch.clone()
            };

            let mut g = Graph::new();
            let binding = model.bind(&mut g, !adapters_only, adapters_only);
            let teacher_bound = match teacher {
                Some(t) if use_kd => Some((t, t.bind(&mut g, false, false))),
                _ => None,
            };

            let mut sum_node: Option<NodeId> = None;
            let (mut ctc_acc, mut att_acc, mut kd_acc) = (0.0f64, 0.0f64, 0.0f64);
            for (clean, dropped) in clean_batch.iter().zip(&dropped_batch) {
                let s = sample_loss(
                    &mut g,
                    &model,
                    &binding,
                    teacher_bound.as_ref().map(|(t, b)| (*t, b)),
                    path,
                    dropped,
                    clean,
                    &recipe.weights,
                )?;
                ctc_acc += s.ctc;
                att_acc += s.attention;
                kd_acc += s.kd;
                sum_node = Some(match sum_node {
                    None => s.node,
                    Some(acc) => g.add(acc, s.node)?,
                });
            }
            let k = dropped_batch.len() as f64;
            let batch_loss = g.mul_scalar(sum_node.expect("nonempty batch"), 1.0 / k);
            let total = g.value(batch_loss).item();
            if !total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training loss at step {global_step} (epoch {epoch}, recipe {})",
                    recipe.kind.name()
                )));
            }
            let grads = g.backward(batch_loss)?;
            adam.learning_rate = lr_at(global_step, recipe.learning_rate, recipe.warmup_steps);
            if adapters_only {
                let gvec: Vec<Tensor> = binding
                    .adapter
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| grads.wrt_or_zeros(n, model.adapter_tensor(i).shape()))
                    .collect();
                let ad = model.adapters.as_mut().expect("adapters attached");
                let mut refs: Vec<&mut Tensor> = ad.tensors.iter_mut().collect();
                adam.step(&mut refs, &gvec)?;
            } else {
                let gvec: Vec<Tensor> = binding
                    .base
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| grads.wrt_or_zeros(n, model.param(i).shape()))
                    .collect();
                let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
                adam.step(&mut refs, &gvec)?;
            }
            log.steps.push(StepRecord {
                step: global_step,
                ctc: ctc_acc / k,
                attention: att_acc / k,
                kd: kd_acc / k,
                total,
            });
        }
        if !val.is_empty() {
            let mode = match path {
                TrainPath::Full => InputMode::Complete,
                TrainPath::AudioPlain | TrainPath::AudioAdapters => InputMode::AudioOnly,
            };
            let hyps = decode(&model, &val, &DecodeConfig::new(DecodeMode::CtcGreedy), &mode)?;
            log.epoch_val_cer.push(corpus_cer_vs_labels(&val, &hyps)?);
        }
    }
    log.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, log))
}

fn require_kind(recipe: &TrainRecipe, kind: RecipeKind) -> Result<()> {
    if recipe.kind != kind {
        return Err(Error::config(format!(
            "recipe kind {} handed to the {} entry point",
            recipe.kind.name(),
            kind.name()
        )));
    }
    Ok(())
}

/// Train a clean-input bimodal teacher from a fresh seed-derived
/// initialization.
pub fn train_teacher(
    config: ModelConfig,
    utts: &[Utterance],
    recipe: &TrainRecipe,
) -> Result<(Model, TrainLog)> {
    require_kind(recipe, RecipeKind::Teacher)?;
    let model = Model::build(config, recipe.seed)?;
    run(model, None, TrainPath::Full, false, utts, recipe)
}

/// Bimodal training under the recipe's video-dropout policy. `init_from`
/// continues from an existing model (its configuration must match);
/// otherwise initialization is fresh from the recipe seed.
pub fn train_plain_dropout(
    config: ModelConfig,
    init_from: Option<&Model>,
    utts: &[Utterance],
    recipe: &TrainRecipe,
) -> Result<(Model, TrainLog)> {
    require_kind(recipe, RecipeKind::PlainDropout)?;
    let model = match init_from {
        Some(m) => {
            if *m.config() != config {
                return Err(Error::contract(
                    "initialization model configuration does not match the requested configuration",
                ));
            }
            m.clone()
        }
        None => Model::build(config, recipe.seed)?,
    };
    run(model, None, TrainPath::Full, false, utts, recipe)
}

/// Distill a frozen teacher into a student initialized from the teacher's
/// parameters. The teacher always sees the complete inputs; the student
/// sees the dropout-augmented ones. With `w_kd` = 0 the trajectory is
/// bit-identical to [`train_plain_dropout`] from the same initialization
/// and seed.
pub fn train_mda_kd(
    teacher: &Model,
    utts: &[Utterance],
    recipe: &TrainRecipe,
) -> Result<(Model, TrainLog)> {
    require_kind(recipe, RecipeKind::MdaKd)?;
    let student = teacher.clone();
    run(student, Some(teacher), TrainPath::Full, false, utts, recipe)
}

/// Audio-only baseline: fresh initialization, trained end to end on the
/// video-disabled path without adapters.
pub fn train_audio_only(
    config: ModelConfig,
    utts: &[Utterance],
    recipe: &TrainRecipe,
) -> Result<(Model, TrainLog)> {
    require_kind(recipe, RecipeKind::AudioOnly)?;
    let model = Model::build(config, recipe.seed)?;
    run(model, None, TrainPath::AudioPlain, false, utts, recipe)
}

/// Tune attached, activated adapters on the audio-only path. Base
/// parameters are bound as constants, so they are frozen bit for bit.
pub fn train_adapters(
    model: &Model,
    utts: &[Utterance],
    recipe: &TrainRecipe,
) -> Result<(Model, TrainLog)> {
    require_kind(recipe, RecipeKind::Adapter)?;
    if !model.adapters_attached() {
        return Err(Error::contract("adapter recipe needs attached adapters"));
    }
    if !model.adapter_active() {
        return Err(Error::contract("adapter recipe needs activated adapters"));
    }
    run(
        model.clone(),
        None,
        TrainPath::AudioAdapters,
        true,
        utts,
        recipe,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::model::{AdapterConfig, ModelConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            n_audio_blocks: 1,
            n_video_blocks: 1,
            n_fusion_blocks: 1,
            n_joint_blocks: 2,
            n_decoder_blocks: 1,
            vocab_size_with_blank: 13,
            max_len: 64,
            intermediate_ctc_taps: vec![1],
            audio_feature_dim: 16,
            video_feature_dim: 12,
            disable_audio_to_video: false,
        }
    }

    fn utterances(n: usize, seed: u64) -> Vec<Utterance> {
        generate_corpus(&CorpusSpec::toy(n, seed)).unwrap().utterances
    }

    fn fast(recipe: TrainRecipe) -> TrainRecipe {
        TrainRecipe {
            epochs: 2,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_steps: 5,
            val_fraction: 0.0,
            ..recipe
        }
    }

    fn params_bits(m: &Model) -> Vec<u64> {
        (0..m.n_params())
            .flat_map(|i| m.param(i).data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn recipe_validation_enforces_kind_contracts() {
        let mut r = TrainRecipe::teacher(1);
        r.dropout = video_dropout(0.5);
        assert!(r.validate().is_err());
        let mut r = TrainRecipe::audio_only(1);
        r.dropout.d_prob = 0.1;
        assert!(r.validate().is_err());
        let mut r = TrainRecipe::plain_dropout(0.3, 1);
        r.augment = true;
        assert!(r.validate().is_err());
        assert!(TrainRecipe::plain_dropout(0.3, 1).validate().is_ok());
        assert!(TrainRecipe::adapter(1, true).validate().is_ok());
        // Entry points check the recipe kind.
        let utts = utterances(4, 3);
        let err = train_teacher(tiny_config(), &utts, &fast(TrainRecipe::plain_dropout(0.3, 1)));
        assert!(err.is_err());
    }

    #[test]
    fn teacher_loss_decreases_and_log_shape_is_complete() {
        let utts = utterances(16, 5);
        let recipe = TrainRecipe {
            epochs: 5,
            val_fraction: 0.25,
            ..fast(TrainRecipe::teacher(11))
        };
        let (_, log) = train_teacher(tiny_config(), &utts, &recipe).unwrap();
        assert_eq!(log.n_val, 4);
        assert_eq!(log.n_train, 12);
        assert_eq!(log.steps_per_epoch, 2);
        assert_eq!(log.steps.len(), 10);
        assert_eq!(log.epoch_val_cer.len(), 5);
        assert!(log.steps.iter().all(|r| r.total.is_finite() && r.kd == 0.0));
        assert!(log.epoch_val_cer.iter().all(|c| c.is_finite()));
        let first = log.epoch_mean(0, |r| r.total);
        let last = log.epoch_mean(4, |r| r.total);
        assert!(
            last < first,
            "mean loss should fall: first epoch {first}, last epoch {last}"
        );
        // CSV: header plus one line per step.
        assert_eq!(log.to_csv().lines().count(), 11);
        assert_eq!(log.summary()["epochs"], 5);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let utts = utterances(10, 7);
        let recipe = fast(TrainRecipe::plain_dropout(0.5, 21));
        let (m1, l1) = train_plain_dropout(tiny_config(), None, &utts, &recipe).unwrap();
        let (m2, l2) = train_plain_dropout(tiny_config(), None, &utts, &recipe).unwrap();
        assert_eq!(params_bits(&m1), params_bits(&m2));
        assert_eq!(l1.steps, l2.steps);
        assert_eq!(l1.epoch_val_cer, l2.epoch_val_cer);
    }

    #[test]
    fn rate_zero_dropout_matches_the_teacher_recipe_bitwise() {
        // A dropout policy at rate 0 never changes a frame, so plain
        // dropout training collapses to the teacher recipe exactly.
        let utts = utterances(10, 9);
        let teacher_recipe = fast(TrainRecipe::teacher(33));
        let plain_recipe = fast(TrainRecipe::plain_dropout(0.0, 33));
        let (mt, _) = train_teacher(tiny_config(), &utts, &teacher_recipe).unwrap();
        let (mp, _) = train_plain_dropout(tiny_config(), None, &utts, &plain_recipe).unwrap();
        assert_eq!(params_bits(&mt), params_bits(&mp));
    }

    #[test]
    fn zero_kd_weight_matches_plain_dropout_bitwise() {
        let utts = utterances(10, 13);
        let teacher = Model::build(tiny_config(), 17).unwrap();
        let mut kd_recipe = fast(TrainRecipe::mda_kd(0.5, 29));
        kd_recipe.weights.w_kd = 0.0;
        let plain_recipe = fast(TrainRecipe::plain_dropout(0.5, 29));
        let (ms, ls) = train_mda_kd(&teacher, &utts, &kd_recipe).unwrap();
        let (mp, lp) =
            train_plain_dropout(tiny_config(), Some(&teacher), &utts, &plain_recipe).unwrap();
        assert_eq!(params_bits(&ms), params_bits(&mp));
        assert_eq!(ls.steps, lp.steps);
    }

    #[test]
    fn distillation_freezes_the_teacher_and_trains_the_student() {
        let utts = utterances(10, 19);
        let teacher = Model::build(tiny_config(), 23).unwrap();
        let checksum = teacher.base_checksum();
        let recipe = fast(TrainRecipe::mda_kd(0.5, 31));
        let (student, log) = train_mda_kd(&teacher, &utts, &recipe).unwrap();
        assert_eq!(teacher.base_checksum(), checksum);
        assert_ne!(params_bits(&student), params_bits(&teacher));
        // The distillation term is live and measured.
        assert!(log.steps.iter().all(|r| r.kd > 0.0));
    }

    #[test]
    fn adapter_recipe_freezes_every_base_parameter() {
        let utts = utterances(10, 25);
        let mut model = Model::build(tiny_config(), 37).unwrap();
        let recipe = fast(TrainRecipe::adapter(41, false));
        // Attached and activated adapters are a precondition.
        assert!(train_adapters(&model, &utts, &recipe).is_err());
        model
            .insert_adapters(AdapterConfig::with_rank(2, crate::model::InsertPart::Encoder), 43)
            .unwrap();
        assert!(train_adapters(&model, &utts, &recipe).is_err());
        model.set_adapter_active(true).unwrap();
        let checksum = model.base_checksum();
        let before: Vec<u64> = (0..model.n_adapter_tensors())
            .flat_map(|i| model.adapter_tensor(i).data().iter().map(|v| v.to_bits()))
            .collect();
        let (trained, log) = train_adapters(&model, &utts, &recipe).unwrap();
        assert_eq!(trained.base_checksum(), checksum);
        assert_eq!(params_bits(&trained), params_bits(&model));
        let after: Vec<u64> = (0..trained.n_adapter_tensors())
            .flat_map(|i| trained.adapter_tensor(i).data().iter().map(|v| v.to_bits()))
            .collect();
        assert_ne!(before, after);
        assert!(log.steps.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn adapter_augmentation_exactly_doubles_the_training_set() {
        let utts = utterances(12, 43);
        let variants = audio_variants(&utts);
        assert_eq!(variants.len(), utts.len());
        // Even positions speed up (shorter), odd positions stretch
        // (longer), every 4th concatenates with its neighbor.
        let t0 = utts[0].audio.rows;
        assert_eq!(variants[0].audio.rows, t0 - t0 / 10);
        let t1 = utts[1].audio.rows;
        assert_eq!(variants[1].audio.rows, t1 + t1 / 10);
        assert_eq!(
            variants[3].labels,
            [utts[3].labels.clone(), utts[4].labels.clone()].concat()
        );
        assert_eq!(
            variants[3].audio.rows,
            utts[3].audio.rows + utts[4].audio.rows
        );
        // Ids never collide with corpus ids.
        assert!(variants.iter().all(|v| v.id >= VARIANT_ID_OFFSET));
        // End to end: the log records the doubled effective set.
        let mut model = Model::build(tiny_config(), 47).unwrap();
        model
            .insert_adapters(AdapterConfig::with_rank(2, crate::model::InsertPart::Encoder), 53)
            .unwrap();
        model.set_adapter_active(true).unwrap();
        let recipe = TrainRecipe {
            epochs: 1,
            ..fast(TrainRecipe::adapter(59, true))
        };
        let (_, log) = train_adapters(&model, &utts, &recipe).unwrap();
        assert_eq!(log.n_train, 24);
    }

    #[test]
    fn non_finite_loss_aborts_with_the_step_index() {
        let utts = utterances(6, 61);
        let mut poisoned = Model::build(tiny_config(), 67).unwrap();
        // Poison the decoder head so the attention term goes non-finite
        // while the CTC recursion stays numerically ordinary.
        let idx = (0..poisoned.n_params())
            .find(|&i| poisoned.param_name(i) == "decoder.head.w")
            .unwrap();
        poisoned.param_mut(idx).data_mut()[0] = f64::NAN;
        let recipe = fast(TrainRecipe::plain_dropout(0.3, 71));
        let err = train_plain_dropout(tiny_config(), Some(&poisoned), &utts, &recipe)
            .unwrap_err()
            .to_string();
        assert!(err.contains("step 1"), "unexpected message: {err}");
    }
}
