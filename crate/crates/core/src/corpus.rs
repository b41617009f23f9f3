//! Synthetic bimodal corpus.
//!
//! Each token class owns fixed prototype vectors in the audio and video
//! feature spaces; a frame is its token's prototype plus iid Gaussian noise.
//! Class design creates controlled ambiguity: audio-confusable pairs share
//! an audio prototype (only video disambiguates them), video-confusable
//! pairs share a video prototype (only audio disambiguates). General tokens
//! are distinct in both streams. Audio runs at a higher frame rate than
//! video and both streams are token-aligned by construction.
//!
//! Prototypes are an orthonormal family derived from the corpus seed
//! (Gram-Schmidt over Gaussian draws) when the feature dimension allows,
//! falling back to unit-norm draws otherwise; either way they are pairwise
//! distinct and a pure function of the spec.

use crate::error::{Error, Result};
use crate::format;
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Token vocabulary size V; ids 1..=V, 0 is reserved for the CTC blank.
    pub vocab_size: usize,
    pub n_general: usize,
    pub n_audio_confusable_pairs: usize,
    pub n_video_confusable_pairs: usize,
    pub frames_per_token_audio: usize,
    pub frames_per_token_video: usize,
    pub feature_dim_audio: usize,
    pub feature_dim_video: usize,
    pub noise_std_audio: f64,
    pub noise_std_video: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub n_utterances: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// Small default configuration: audio is the higher-rate dominant
    /// stream, but two audio-confusable pairs make video the only source
    /// of their disambiguating cues, so a complete-input model has to use
    /// both streams.
    pub fn toy(n_utterances: usize, seed: u64) -> Self {
        CorpusSpec {
            vocab_size: 12,
            n_general: 6,
            n_audio_confusable_pairs: 2,
            n_video_confusable_pairs: 1,
            frames_per_token_audio: 4,
            frames_per_token_video: 2,
            feature_dim_audio: 16,
            feature_dim_video: 12,
            noise_std_audio: 0.3,
            noise_std_video: 0.4,
            min_len: 3,
            max_len: 8,
            n_utterances,
            seed,
        }
    }

    /// Configuration with a closed-form audio-only error floor: noiseless
    /// audio, two audio-confusable pairs, no video-confusable pairs. A
    /// Bayes-optimal audio-only classifier errs on exactly half of the
    /// confusable-pair draws: (4/12) * (1/2) = 1/6.
    pub fn audio_floor_example(n_utterances: usize, seed: u64) -> Self {
        CorpusSpec {
            n_general: 8,
            n_audio_confusable_pairs: 2,
            n_video_confusable_pairs: 0,
            noise_std_audio: 0.0,
            ..CorpusSpec::toy(n_utterances, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        let classes =
            self.n_general + 2 * (self.n_audio_confusable_pairs + self.n_video_confusable_pairs);
        if classes != self.vocab_size {
            return Err(Error::config(format!(
                "token classes must partition the vocabulary: general {} + 2*(audio pairs {} + video pairs {}) = {} != V = {}",
                self.n_general,
                self.n_audio_confusable_pairs,
                self.n_video_confusable_pairs,
                classes,
                self.vocab_size
            )));
        }
        if self.frames_per_token_audio == 0 || self.frames_per_token_video == 0 {
            return Err(Error::config("frames per token must be at least 1"));
        }
        if self.feature_dim_audio == 0 || self.feature_dim_video == 0 {
            return Err(Error::config("feature dims must be positive"));
        }
        if self.noise_std_audio < 0.0 || self.noise_std_video < 0.0 {
            return Err(Error::config("noise std must be nonnegative"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "utterance length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Row-major frame matrix stored as f32, the corpus on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FrameMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FrameMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn zero_row(&mut self, i: usize) {
        self.data[i * self.cols..(i + 1) * self.cols].fill(0.0);
    }

    pub fn zero_all(&mut self) {
        self.data.fill(0.0);
    }

    pub fn row_is_zero(&self, i: usize) -> bool {
        self.row(i).iter().all(|&v| v == 0.0)
    }

    /// Widen to the engine's f64 tensors (exact).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("frame matrix dims consistent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub audio: FrameMatrix,
    pub video: FrameMatrix,
    /// Token ids in 1..=V.
    pub labels: Vec<u16>,
    /// Per-video-frame availability at generation time; generation never
    /// withholds frames, so this is all true. Dropout zero-fills frames and
    /// leaves availability untouched.
    pub natural_video_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

/// Prototype tables plus the token -> prototype-row maps. Recomputable from
/// any spec, so they are not serialized with the corpus.
pub struct Prototypes {
    /// [n_audio_protos x d_a]
    pub audio: Vec<Vec<f64>>,
    /// [n_video_protos x d_v]
    pub video: Vec<Vec<f64>>,
    /// Indexed by token id - 1.
    pub audio_of_token: Vec<usize>,
    pub video_of_token: Vec<usize>,
}

impl Prototypes {
    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let g = spec.n_general;
        let ap = spec.n_audio_confusable_pairs;
        let vp = spec.n_video_confusable_pairs;

        // Audio prototypes: distinct for general tokens, one shared per
        // audio-confusable pair, distinct for each video-pair member.
        let n_audio = g + ap + 2 * vp;
        // Video prototypes: mirrored.
        let n_video = g + 2 * ap + vp;

        let mut rng_a = Rng::derive(spec.seed, &[tags::PROTO_AUDIO]);
        let mut rng_v = Rng::derive(spec.seed, &[tags::PROTO_VIDEO]);
        let audio = unit_family(&mut rng_a, n_audio, spec.feature_dim_audio);
        let video = unit_family(&mut rng_v, n_video, spec.feature_dim_video);

        let mut audio_of_token = Vec::with_capacity(spec.vocab_size);
        let mut video_of_token = Vec::with_capacity(spec.vocab_size);
        for t in 0..g {
            audio_of_token.push(t);
            video_of_token.push(t);
        }
        for p in 0..ap {
            for member in 0..2 {
                audio_of_token.push(g + p);
                video_of_token.push(g + 2 * p + member);
            }
        }
        for p in 0..vp {
            for member in 0..2 {
                audio_of_token.push(g + ap + 2 * p + member);
                video_of_token.push(g + 2 * ap + p);
            }
        }
        Ok(Prototypes {
            audio,
            video,
            audio_of_token,
            video_of_token,
        })
    }

    pub fn audio_proto(&self, token: u16) -> &[f64] {
        &self.audio[self.audio_of_token[token as usize - 1]]
    }

    pub fn video_proto(&self, token: u16) -> &[f64] {
        &self.video[self.video_of_token[token as usize - 1]]
    }
}

/// `n` unit vectors in `dim` dimensions. Orthonormal (Gram-Schmidt over
/// Gaussian draws) while n <= dim; later vectors fall back to plain
/// normalized draws. Deterministic given the generator state.
fn unit_family(rng: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut family: Vec<Vec<f64>> = Vec::with_capacity(n);
    while family.len() < n {
        let mut v = vec![0.0; dim];
        rng.fill_gaussian(&mut v, 1.0);
        if family.len() < dim {
            for prev in &family {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // Degenerate draw; take another.
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        family.push(v);
    }
    family
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let protos = Prototypes::from_spec(spec)?;
    let mut utterances = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances as u64 {
        let mut rng_lab = Rng::derive(spec.seed, &[tags::UTT_LABEL, i]);
        let len = rng_lab.next_range(spec.min_len as u64, spec.max_len as u64) as usize;
        let labels: Vec<u16> = (0..len)
            .map(|_| rng_lab.next_range(1, spec.vocab_size as u64) as u16)
            .collect();

        let mut rng_a = Rng::derive(spec.seed, &[tags::UTT_AUDIO_NOISE, i]);
        let audio = render_stream(
            &labels,
            spec.frames_per_token_audio,
            spec.feature_dim_audio,
            spec.noise_std_audio,
            |t| protos.audio_proto(t),
            &mut rng_a,
        );
        let mut rng_v = Rng::derive(spec.seed, &[tags::UTT_VIDEO_NOISE, i]);
        let video = render_stream(
            &labels,
            spec.frames_per_token_video,
            spec.feature_dim_video,
            spec.noise_std_video,
            |t| protos.video_proto(t),
            &mut rng_v,
        );

        let t_v = video.rows;
        utterances.push(Utterance {
            id: i,
            audio,
            video,
            labels,
            natural_video_mask: vec![true; t_v],
        });
    }
    Ok(Corpus {
        spec: spec.clone(),
        utterances,
    })
}

fn render_stream<'a>(
    labels: &[u16],
    frames_per_token: usize,
    dim: usize,
    noise_std: f64,
    proto: impl Fn(u16) -> &'a [f64],
    rng: &mut Rng,
) -> FrameMatrix {
    let rows = labels.len() * frames_per_token;
    let mut data = Vec::with_capacity(rows * dim);
    for &token in labels {
        let p = proto(token);
        for _ in 0..frames_per_token {
            for &pj in p.iter().take(dim) {
                data.push((pj + noise_std * rng.next_gaussian()) as f32);
            }
        }
    }
    FrameMatrix {
        rows,
        cols: dim,
        data,
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMethod {
    Segment,
    Utterance,
    Interval,
    PerFrame,
    AvUtterance,
    None,
}

impl DropoutMethod {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "segment" => DropoutMethod::Segment,
            "utterance" => DropoutMethod::Utterance,
            "interval" => DropoutMethod::Interval,
            "per_frame" => DropoutMethod::PerFrame,
            "av_utterance" => DropoutMethod::AvUtterance,
            "none" => DropoutMethod::None,
            other => {
                return Err(Error::config(format!(
                    "unknown dropout method '{other}' (expected segment|utterance|interval|per_frame|av_utterance|none)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DropoutMethod::Segment => "segment",
            DropoutMethod::Utterance => "utterance",
            DropoutMethod::Interval => "interval",
            DropoutMethod::PerFrame => "per_frame",
            DropoutMethod::AvUtterance => "av_utterance",
            DropoutMethod::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTarget {
    Video,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub method: DropoutMethod,
    pub rate: f64,
    /// Stream the dropout applies to. Ignored by av_utterance, which picks
    /// a whole modality by coin flip.
    pub target: StreamTarget,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1]",
                self.rate
            )));
        }
        Ok(())
    }
}

fn target_stream(utt: &mut Utterance, target: StreamTarget) -> &mut FrameMatrix {
    match target {
        StreamTarget::Video => &mut utt.video,
        StreamTarget::Audio => &mut utt.audio,
    }
}

/// Zero-fill a contiguous span of round(rate * T) frames; start position
/// uniform over valid placements.
pub fn apply_segment_dropout(
    utt: &Utterance,
    rate: f64,
    target: StreamTarget,
    start_seed: u64,
) -> Result<Utterance> {
    check_rate(rate)?;
    let mut out = utt.clone();
    let stream = target_stream(&mut out, target);
    let t = stream.rows;
    let n_drop = ((rate * t as f64).round() as usize).min(t);
    if n_drop > 0 {
        let mut rng = Rng::new(start_seed);
        let start = rng.next_below((t - n_drop + 1) as u64) as usize;
        for i in start..start + n_drop {
            stream.zero_row(i);
        }
    }
    Ok(out)
}

/// With probability `rate`, zero-fill the entire stream. The rate is the
/// expected fraction of fully-dropped utterances, so a suite evaluated at
/// rate r has r of its utterances missing the stream in expectation.
pub fn apply_utterance_dropout(
    utt: &Utterance,
    rate: f64,
    target: StreamTarget,
    coin_seed: u64,
) -> Result<Utterance> {
    check_rate(rate)?;
    let mut out = utt.clone();
    let mut rng = Rng::new(coin_seed);
    if rng.next_bool(rate) {
        target_stream(&mut out, target).zero_all();
    }
    Ok(out)
}

/// Deterministic periodic dropout. For rate <= 0.5 with k = round(1/rate),
/// zero frames where (i+1) mod k == 0; for rate > 0.5 with
/// k = round(1/(1-rate)), zero everything EXCEPT those frames. rate 0 is a
/// no-op and rate 1 zeroes all frames. Needs no seed.
pub fn apply_interval_dropout(utt: &Utterance, rate: f64, target: StreamTarget) -> Result<Utterance> {
    check_rate(rate)?;
    let mut out = utt.clone();
    let stream = target_stream(&mut out, target);
    if rate == 0.0 {
        return Ok(out);
    }
    if rate == 1.0 {
        stream.zero_all();
        return Ok(out);
    }
    if rate <= 0.5 {
        let k = (1.0 / rate).round() as usize;
        for i in 0..stream.rows {
            if (i + 1) % k == 0 {
                stream.zero_row(i);
            }
        }
    } else {
        let k = (1.0 / (1.0 - rate)).round() as usize;
        for i in 0..stream.rows {
            if (i + 1) % k != 0 {
                stream.zero_row(i);
            }
        }
    }
    Ok(out)
}

/// Zero-fill each frame independently with probability `rate`.
pub fn apply_per_frame_dropout(
    utt: &Utterance,
    rate: f64,
    target: StreamTarget,
    seed: u64,
) -> Result<Utterance> {
    check_rate(rate)?;
    let mut out = utt.clone();
    let stream = target_stream(&mut out, target);
    let mut rng = Rng::new(seed);
    for i in 0..stream.rows {
        if rng.next_bool(rate) {
            stream.zero_row(i);
        }
    }
    Ok(out)
}

/// With probability `rate`, zero-fill one whole stream chosen by fair coin.
pub fn apply_av_utterance_dropout(utt: &Utterance, rate: f64, seed: u64) -> Result<Utterance> {
    check_rate(rate)?;
    let mut out = utt.clone();
    let mut rng = Rng::new(seed);
    if rng.next_bool(rate) {
        if rng.next_below(2) == 0 {
            out.audio.zero_all();
        } else {
            out.video.zero_all();
        }
    }
    Ok(out)
}

/// Dispatch on a [`DropoutSpec`].
pub fn apply_dropout(utt: &Utterance, spec: &DropoutSpec) -> Result<Utterance> {
    spec.validate()?;
    match spec.method {
        DropoutMethod::Segment => apply_segment_dropout(utt, spec.rate, spec.target, spec.seed),
        DropoutMethod::Utterance => apply_utterance_dropout(utt, spec.rate, spec.target, spec.seed),
        DropoutMethod::Interval => apply_interval_dropout(utt, spec.rate, spec.target),
        DropoutMethod::PerFrame => apply_per_frame_dropout(utt, spec.rate, spec.target, spec.seed),
        DropoutMethod::AvUtterance => apply_av_utterance_dropout(utt, spec.rate, spec.seed),
        DropoutMethod::None => Ok(utt.clone()),
    }
}

/// Augmentation policy for training: a fraction `d_prob` of samples receive
/// one dropout method drawn uniformly from the pool, applied at `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDropoutPolicy {
    pub d_prob: f64,
    pub method_pool: Vec<DropoutMethod>,
    pub rate: f64,
}

impl TrainingDropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.d_prob) {
            return Err(Error::config(format!(
                "d_prob {} outside [0, 1]",
                self.d_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::config(format!("rate {} outside [0, 1]", self.rate)));
        }
        if self.d_prob > 0.0 && self.method_pool.is_empty() {
            return Err(Error::config(
                "dropout method pool must be nonempty when d_prob > 0",
            ));
        }
        Ok(())
    }
}

/// Apply the policy to a batch. Randomness is keyed by (seed, utterance id),
/// never by batch position, so the augmentation a sample receives does not
/// depend on batch composition or ordering. Per-sample draw order: the
/// d_prob coin, then the method index, then method-specific draws.
pub fn apply_training_policy(
    batch: &[Utterance],
    policy: &TrainingDropoutPolicy,
    seed: u64,
) -> Result<Vec<Utterance>> {
    policy.validate()?;
    let mut out = Vec::with_capacity(batch.len());
    for utt in batch {
        let mut rng = Rng::derive(seed, &[tags::TRAIN_DROPOUT, utt.id]);
        if policy.d_prob == 0.0 || !rng.next_bool(policy.d_prob) {
            out.push(utt.clone());
            continue;
        }
        let method = policy.method_pool[rng.next_below(policy.method_pool.len() as u64) as usize];
        let sub_seed = rng.next_u64();
        let spec = DropoutSpec {
            method,
            rate: policy.rate,
            target: StreamTarget::Video,
            seed: sub_seed,
        };
        out.push(apply_dropout(utt, &spec)?);
    }
    Ok(out)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1]")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    spec: CorpusSpec,
    utterances: Vec<UttIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct UttIndexEntry {
    id: u64,
    label_len: u32,
    /// Byte offsets into the blob region.
    audio_offset: u64,
    video_offset: u64,
    label_offset: u64,
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    corpus.spec.validate()?;
    let mut blob = Vec::new();
    let mut index = Vec::with_capacity(corpus.utterances.len());
    for utt in &corpus.utterances {
        let audio_offset = blob.len() as u64;
        format::push_f32s(&mut blob, &utt.audio.data);
        let video_offset = blob.len() as u64;
        format::push_f32s(&mut blob, &utt.video.data);
        let label_offset = blob.len() as u64;
        format::push_u16s(&mut blob, &utt.labels);
        index.push(UttIndexEntry {
            id: utt.id,
            label_len: utt.labels.len() as u32,
            audio_offset,
            video_offset,
            label_offset,
        });
    }
    let manifest = serde_json::to_vec(&CorpusManifest {
        spec: corpus.spec.clone(),
        utterances: index,
    })
    .map_err(|e| Error::format(format!("corpus manifest: {e}")))?;
    format::write_container(path, format::CORPUS_MAGIC, &manifest, &blob)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let container = format::read_container(path, format::CORPUS_MAGIC)?;
    let manifest: CorpusManifest = serde_json::from_slice(&container.manifest)
        .map_err(|e| Error::format(format!("corpus manifest: {e}")))?;
    manifest.spec.validate()?;
    let spec = manifest.spec;
    let blob = &container.blob;

    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for entry in &manifest.utterances {
        let len = entry.label_len as usize;
        let t_a = len * spec.frames_per_token_audio;
        let t_v = len * spec.frames_per_token_video;
        let audio = FrameMatrix {
            rows: t_a,
            cols: spec.feature_dim_audio,
            data: format::read_f32s(blob, entry.audio_offset as usize, t_a * spec.feature_dim_audio)?,
        };
        let video = FrameMatrix {
            rows: t_v,
            cols: spec.feature_dim_video,
            data: format::read_f32s(blob, entry.video_offset as usize, t_v * spec.feature_dim_video)?,
        };
        let labels = format::read_u16s(blob, entry.label_offset as usize, len)?;
        for &l in &labels {
            if l == 0 || l as usize > spec.vocab_size {
                return Err(Error::format(format!(
                    "utterance {}: label {} outside 1..={} (label block at byte offset {})",
                    entry.id, l, spec.vocab_size, entry.label_offset
                )));
            }
        }
        utterances.push(Utterance {
            id: entry.id,
            audio,
            video,
            labels,
            natural_video_mask: vec![true; t_v],
        });
    }
    Ok(Corpus { spec, utterances })
}

// ---------------------------------------------------------------------------
// Bayes oracle
// ---------------------------------------------------------------------------

/// Expected token error of a Bayes-optimal nearest-prototype classifier,
/// estimated over `n_samples` token draws.
///
/// For iid isotropic Gaussian noise the Bayes rule reduces to minimizing
/// the noise-weighted squared distance between per-stream frame means and
/// prototypes, summed over the streams in use. Ties break to the lowest
/// token id, so a shared prototype costs exactly half of its pair's draws.
pub fn nearest_prototype_token_error(
    spec: &CorpusSpec,
    use_video: bool,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let protos = Prototypes::from_spec(spec)?;
    let mut rng = Rng::new(seed);
    let v = spec.vocab_size as u64;
    // Weight per stream: frames / noise variance. A noiseless stream gets a
    // large finite weight; its distances are exactly zero at the true
    // prototype, so the scale only needs to dominate the noisy stream.
    let weight = |frames: usize, std: f64| frames as f64 / std.max(1e-6).powi(2);
    let w_a = weight(spec.frames_per_token_audio, spec.noise_std_audio);
    let w_v = weight(spec.frames_per_token_video, spec.noise_std_video);

    let mut errors = 0usize;
    let mut mean_a = vec![0.0; spec.feature_dim_audio];
    let mut mean_v = vec![0.0; spec.feature_dim_video];
    for _ in 0..n_samples {
        let token = rng.next_range(1, v) as u16;
        stream_mean(
            protos.audio_proto(token),
            spec.frames_per_token_audio,
            spec.noise_std_audio,
            &mut rng,
            &mut mean_a,
        );
        if use_video {
            stream_mean(
                protos.video_proto(token),
                spec.frames_per_token_video,
                spec.noise_std_video,
                &mut rng,
                &mut mean_v,
            );
        }
        let mut best = (f64::INFINITY, 0u16);
        for cand in 1..=spec.vocab_size as u16 {
            let mut score = w_a * dist2(&mean_a, protos.audio_proto(cand));
            if use_video {
                score += w_v * dist2(&mean_v, protos.video_proto(cand));
            }
            if score < best.0 {
                best = (score, cand);
            }
        }
        if best.1 != token {
            errors += 1;
        }
    }
    Ok(errors as f64 / n_samples as f64)
}

fn stream_mean(proto: &[f64], frames: usize, std: f64, rng: &mut Rng, out: &mut [f64]) {
    out.copy_from_slice(proto);
    if std == 0.0 || frames == 0 {
        return;
    }
    let mut acc = vec![0.0; out.len()];
    for _ in 0..frames {
        for a in acc.iter_mut() {
            *a += std * rng.next_gaussian();
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o += a / frames as f64;
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_rejects_bad_partitions() {
        let mut spec = CorpusSpec::toy(10, 1);
        spec.n_general = 7;
        assert!(spec.validate().is_err());
        spec.n_general = 6;
        assert!(spec.validate().is_ok());
        spec.min_len = 9;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let spec = CorpusSpec::toy(20, 42);
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);

        let other = generate_corpus(&CorpusSpec::toy(20, 43)).unwrap();
        assert_ne!(a, other);

        for utt in &a.utterances {
            let l = utt.labels.len();
            assert!(l >= spec.min_len && l <= spec.max_len);
            assert_eq!(utt.audio.rows, l * spec.frames_per_token_audio);
            assert_eq!(utt.audio.cols, spec.feature_dim_audio);
            assert_eq!(utt.video.rows, l * spec.frames_per_token_video);
            assert_eq!(utt.video.cols, spec.feature_dim_video);
            assert!(utt.labels.iter().all(|&t| t >= 1 && t as usize <= spec.vocab_size));
            assert!(utt.natural_video_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn confusable_pairs_share_exactly_the_right_prototypes() {
        let spec = CorpusSpec::toy(1, 7);
        let p = Prototypes::from_spec(&spec).unwrap();
        // Tokens 7,8 and 9,10 are the audio-confusable pairs; 11,12 the
        // video-confusable pair (after 6 general tokens).
        assert_eq!(p.audio_of_token[6], p.audio_of_token[7]);
        assert_eq!(p.audio_of_token[8], p.audio_of_token[9]);
        assert_ne!(p.video_of_token[6], p.video_of_token[7]);
        assert_eq!(p.video_of_token[10], p.video_of_token[11]);
        assert_ne!(p.audio_of_token[10], p.audio_of_token[11]);
        // General tokens are distinct everywhere.
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_ne!(p.audio_of_token[i], p.audio_of_token[j]);
                assert_ne!(p.video_of_token[i], p.video_of_token[j]);
            }
        }
        // Orthonormal family: unit norm, near-zero pairwise dot.
        for (i, a) in p.audio.iter().enumerate() {
            let n: f64 = a.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
            for b in p.audio.iter().skip(i + 1) {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_matches_closed_form_audio_floor() {
        let spec = CorpusSpec::audio_floor_example(1, 11);
        let err = nearest_prototype_token_error(&spec, false, 10_000, 99).unwrap();
        assert!(
            (err - 1.0 / 6.0).abs() < 0.015,
            "audio-only floor: got {err}, want ~0.1667"
        );
        // Bimodal with noiseless audio and default video noise resolves the
        // audio pairs; all prototypes jointly distinct.
        let mut noiseless = spec.clone();
        noiseless.noise_std_video = 0.0;
        let bi = nearest_prototype_token_error(&noiseless, true, 10_000, 99).unwrap();
        assert_eq!(bi, 0.0, "bimodal error at zero noise");
    }

    #[test]
    fn oracle_shows_video_helps_on_toy_defaults() {
        let spec = CorpusSpec::toy(1, 5);
        let audio_only = nearest_prototype_token_error(&spec, false, 10_000, 3).unwrap();
        let bimodal = nearest_prototype_token_error(&spec, true, 10_000, 3).unwrap();
        assert!(
            audio_only > 0.10 && audio_only < 0.40,
            "audio-only error {audio_only} outside expected band"
        );
        assert!(
            bimodal < audio_only - 0.05,
            "bimodal {bimodal} should clearly beat audio-only {audio_only}"
        );
        assert!(bimodal < 0.10, "bimodal error {bimodal} unexpectedly high");
    }

    fn fixed_utt(t_v: usize) -> Utterance {
        let spec = CorpusSpec::toy(1, 3);
        let mut corpus = generate_corpus(&spec).unwrap();
        let mut utt = corpus.utterances.remove(0);
        // Reshape video to the requested frame count for interval tests.
        utt.video = FrameMatrix {
            rows: t_v,
            cols: 3,
            data: (0..t_v * 3).map(|x| x as f32 + 1.0).collect(),
        };
        utt.natural_video_mask = vec![true; t_v];
        utt
    }

    #[test]
    fn interval_dropout_matches_stated_mapping() {
        let utt = fixed_utt(8);
        let low = apply_interval_dropout(&utt, 0.25, StreamTarget::Video).unwrap();
        let zeroed: Vec<usize> = (0..8).filter(|&i| low.video.row_is_zero(i)).collect();
        assert_eq!(zeroed, vec![3, 7]);

        let high = apply_interval_dropout(&utt, 0.75, StreamTarget::Video).unwrap();
        let kept: Vec<usize> = (0..8).filter(|&i| !high.video.row_is_zero(i)).collect();
        assert_eq!(kept, vec![3, 7]);

        let half = apply_interval_dropout(&utt, 0.5, StreamTarget::Video).unwrap();
        let zeroed: Vec<usize> = (0..8).filter(|&i| half.video.row_is_zero(i)).collect();
        assert_eq!(zeroed, vec![1, 3, 5, 7]);

        let none = apply_interval_dropout(&utt, 0.0, StreamTarget::Video).unwrap();
        assert_eq!(none, utt);
        let all = apply_interval_dropout(&utt, 1.0, StreamTarget::Video).unwrap();
        assert!((0..8).all(|i| all.video.row_is_zero(i)));
    }

    #[test]
    fn interval_realized_rate_is_within_discretization() {
        for &rate in &[0.1f64, 0.2, 0.25, 1.0 / 3.0, 0.5, 2.0 / 3.0, 0.75, 0.8, 0.9] {
            let k = if rate <= 0.5 {
                (1.0 / rate).round()
            } else {
                (1.0 / (1.0 - rate)).round()
            };
            for t_v in [(2.0 * k) as usize, 24, 40, 61] {
                if (t_v as f64) < 2.0 * k {
                    continue;
                }
                let utt = fixed_utt(t_v);
                let d = apply_interval_dropout(&utt, rate, StreamTarget::Video).unwrap();
                let dropped = (0..t_v).filter(|&i| d.video.row_is_zero(i)).count();
                let realized = dropped as f64 / t_v as f64;
                assert!(
                    (realized - rate).abs() <= 1.0 / k,
                    "rate {rate} T {t_v}: realized {realized}"
                );
            }
        }
    }

    #[test]
    fn segment_dropout_zeroes_one_contiguous_span() {
        let utt = fixed_utt(10);
        let d = apply_segment_dropout(&utt, 0.5, StreamTarget::Video, 1234).unwrap();
        let zeroed: Vec<usize> = (0..10).filter(|&i| d.video.row_is_zero(i)).collect();
        assert_eq!(zeroed.len(), 5);
        for w in zeroed.windows(2) {
            assert_eq!(w[1], w[0] + 1, "span must be contiguous: {zeroed:?}");
        }
        assert_eq!(
            apply_segment_dropout(&utt, 0.0, StreamTarget::Video, 1).unwrap(),
            utt
        );
        let all = apply_segment_dropout(&utt, 1.0, StreamTarget::Video, 1).unwrap();
        assert!((0..10).all(|i| all.video.row_is_zero(i)));
        // Audio and labels untouched.
        assert_eq!(d.audio, utt.audio);
        assert_eq!(d.labels, utt.labels);
        assert_eq!(d.natural_video_mask, utt.natural_video_mask);
    }

    #[test]
    fn utterance_dropout_is_all_or_nothing_with_matching_frequency() {
        let utt = fixed_utt(6);
        let always = apply_utterance_dropout(&utt, 1.0, StreamTarget::Video, 9).unwrap();
        assert!((0..6).all(|i| always.video.row_is_zero(i)));
        let never = apply_utterance_dropout(&utt, 0.0, StreamTarget::Video, 9).unwrap();
        assert_eq!(never, utt);

        let mut dropped = 0;
        let n = 10_000;
        for s in 0..n {
            let d = apply_utterance_dropout(&utt, 0.25, StreamTarget::Video, s).unwrap();
            if d.video.row_is_zero(0) {
                assert!((0..6).all(|i| d.video.row_is_zero(i)));
                dropped += 1;
            }
        }
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.02, "dropped fraction {frac}");
    }

    #[test]
    fn av_utterance_dropout_picks_one_stream() {
        let utt = fixed_utt(6);
        let mut audio_drops = 0;
        let mut video_drops = 0;
        for s in 0..2000 {
            let d = apply_av_utterance_dropout(&utt, 1.0, s).unwrap();
            let audio_zero = (0..d.audio.rows).all(|i| d.audio.row_is_zero(i));
            let video_zero = (0..d.video.rows).all(|i| d.video.row_is_zero(i));
            assert!(audio_zero != video_zero, "exactly one stream must drop");
            if audio_zero {
                audio_drops += 1;
            } else {
                video_drops += 1;
            }
        }
        assert!((audio_drops as f64 / 2000.0 - 0.5).abs() < 0.05);
        assert!(video_drops > 0);
    }

    #[test]
    fn training_policy_respects_d_prob() {
        let corpus = generate_corpus(&CorpusSpec::toy(200, 8)).unwrap();
        let unchanged = apply_training_policy(
            &corpus.utterances,
            &TrainingDropoutPolicy {
                d_prob: 0.0,
                method_pool: vec![],
                rate: 0.5,
            },
            1,
        )
        .unwrap();
        assert_eq!(unchanged, corpus.utterances);

        let all = apply_training_policy(
            &corpus.utterances,
            &TrainingDropoutPolicy {
                d_prob: 1.0,
                method_pool: vec![DropoutMethod::Utterance],
                rate: 1.0,
            },
            1,
        )
        .unwrap();
        for utt in &all {
            assert!((0..utt.video.rows).all(|i| utt.video.row_is_zero(i)));
        }

        // Empty pool with positive d_prob is a config error.
        assert!(apply_training_policy(
            &corpus.utterances,
            &TrainingDropoutPolicy {
                d_prob: 0.5,
                method_pool: vec![],
                rate: 0.5,
            },
            1,
        )
        .is_err());
    }

    #[test]
    fn training_policy_alteration_frequency_matches_d_prob() {
        let spec = CorpusSpec::toy(10_000, 21);
        let corpus = generate_corpus(&spec).unwrap();
        let policy = TrainingDropoutPolicy {
            d_prob: 0.5,
            method_pool: vec![DropoutMethod::Utterance],
            rate: 1.0,
        };
        let out = apply_training_policy(&corpus.utterances, &policy, 77).unwrap();
        let altered = out
            .iter()
            .zip(&corpus.utterances)
            .filter(|(a, b)| a != b)
            .count();
        let frac = altered as f64 / corpus.utterances.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "altered fraction {frac}");
    }

    #[test]
    fn training_policy_is_independent_of_batch_composition() {
        let corpus = generate_corpus(&CorpusSpec::toy(10, 31)).unwrap();
        let policy = TrainingDropoutPolicy {
            d_prob: 1.0,
            method_pool: vec![DropoutMethod::Segment, DropoutMethod::Interval],
            rate: 0.5,
        };
        let full = apply_training_policy(&corpus.utterances, &policy, 5).unwrap();
        // Same utterance in a different batch slice gets the same treatment.
        let tail = apply_training_policy(&corpus.utterances[7..], &policy, 5).unwrap();
        assert_eq!(full[7..], tail[..]);
    }

    #[test]
    fn corpus_file_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        let corpus = generate_corpus(&CorpusSpec::toy(25, 4)).unwrap();
        write_corpus(&path, &corpus).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(corpus, back);

        // Empty corpus is valid and round trips.
        let empty = Corpus {
            spec: CorpusSpec::toy(0, 4),
            utterances: vec![],
        };
        let path2 = dir.path().join("empty.bin");
        write_corpus(&path2, &empty).unwrap();
        assert_eq!(read_corpus(&path2).unwrap(), empty);
    }

    #[test]
    fn corrupted_corpus_files_report_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        let corpus = generate_corpus(&CorpusSpec::toy(5, 4)).unwrap();
        write_corpus(&path, &corpus).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_magic = dir.path().join("bad_magic.bin");
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(
            read_corpus(&bad_magic).unwrap_err(),
            Error::Format(_)
        ));

        let mut truncated = std::fs::read(&path).unwrap();
        truncated.truncate(truncated.len() - 10);
        let trunc_path = dir.path().join("trunc.bin");
        std::fs::write(&trunc_path, &truncated).unwrap();
        let err = read_corpus(&trunc_path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("byte"), "{err}");
    }
}
