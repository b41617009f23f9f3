//! Decoding, error metrics, robustness curves, and latent-similarity
//! diagnostics.
//!
//! Everything here is deterministic given (model, utterances, seeds): the
//! stochastic evaluation points key their randomness off a suite seed and
//! the utterance id, never off iteration order or thread scheduling.

use crate::corpus::{apply_dropout, DropoutMethod, DropoutSpec, StreamTarget, Utterance};
use crate::error::{Error, Result};
use crate::forward::{Encoded, TapTag};
use crate::graph::Graph;
use crate::model::{Model, ParamBinding};
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Per-frame argmax over the final CTC head, then collapse: merge
    /// repeats, drop blanks.
    CtcGreedy,
    /// Autoregressive argmax from the attention decoder.
    AttentionGreedy,
    /// Beam search over the attention decoder, ranked by mean token
    /// log-probability. The greedy continuation is always among the final
    /// candidates, so the beam score never falls below the greedy score.
    AttentionBeam,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ctc_greedy" => Ok(DecodeMode::CtcGreedy),
            "attention_greedy" => Ok(DecodeMode::AttentionGreedy),
            "attention_beam" => Ok(DecodeMode::AttentionBeam),
            other => Err(Error::config(format!("unknown decode mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::CtcGreedy => "ctc_greedy",
            DecodeMode::AttentionGreedy => "attention_greedy",
            DecodeMode::AttentionBeam => "attention_beam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Cap on emitted symbols per utterance; hitting it sets `truncated`.
    pub max_decode_len: usize,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode) -> Self {
        DecodeConfig {
            mode,
            beam_width: 4,
            max_decode_len: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam width must be at least 1"));
        }
        if self.max_decode_len == 0 {
            return Err(Error::config("max decode length must be at least 1"));
        }
        Ok(())
    }
}

/// What the model sees at evaluation time.
///
/// `Dropped` re-keys its spec seed per utterance so a corpus pass does not
/// reuse one random placement everywhere. `AudioOnly` runs the
/// video-disabled path: through the adapters when they are attached and
/// active, plainly otherwise (the audio-only baseline has none).
#[derive(Debug, Clone, PartialEq)]
pub enum InputMode {
    Complete,
    Dropped(DropoutSpec),
    AudioOnly,
}

impl InputMode {
    pub fn name(&self) -> &'static str {
        match self {
            InputMode::Complete => "complete",
            InputMode::Dropped(_) => "dropped",
            InputMode::AudioOnly => "audio_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: u64,
    pub tokens: Vec<u16>,
    /// Mean per-symbol log-probability for attention modes; mean per-frame
    /// max log-probability for CTC greedy.
    pub score: f64,
    pub truncated: bool,
}

fn per_utterance_spec(spec: &DropoutSpec, utt_id: u64) -> DropoutSpec {
    let mut rng = Rng::derive(spec.seed, &[tags::EVAL_POINT, utt_id]);
    DropoutSpec {
        seed: rng.next_u64(),
        ..spec.clone()
    }
}

fn materialize(utt: &Utterance, input: &InputMode) -> Result<Utterance> {
    match input {
        InputMode::Complete | InputMode::AudioOnly => Ok(utt.clone()),
        InputMode::Dropped(spec) => apply_dropout(utt, &per_utterance_spec(spec, utt.id)),
    }
}

/// Encode one (already materialized) utterance on the path the input mode
/// selects. Returns the encoder outputs and whether decoder calls should
/// apply adapters.
fn encode_for(
    model: &Model,
    g: &mut Graph,
    binding: &ParamBinding,
    utt: &Utterance,
    input: &InputMode,
) -> Result<(Encoded, bool)> {
    match input {
        InputMode::Complete | InputMode::Dropped(_) => {
            let enc = model.encode_full(
                g,
                binding,
                &utt.audio.to_tensor(),
                utt.audio.rows,
                &utt.video.to_tensor(),
                utt.video.rows,
            )?;
            Ok((enc, false))
        }
        InputMode::AudioOnly => {
            let apply = model.adapters_attached() && model.adapter_active();
            let enc =
                model.encode_audio_path(g, binding, &utt.audio.to_tensor(), utt.audio.rows, apply)?;
            Ok((enc, apply))
        }
    }
}

/// Per-frame argmax then collapse (merge repeats, then drop blanks).
/// Returns the tokens and the mean per-frame max log-probability.
pub fn ctc_greedy_tokens(log_probs: &Tensor) -> (Vec<u16>, f64) {
    let mut tokens = Vec::new();
    let mut prev = usize::MAX;
    let mut score_sum = 0.0;
    let rows = log_probs.rows();
    for t in 0..rows {
        let row = log_probs.row(t);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        score_sum += row[best];
        if best != prev && best != 0 {
            tokens.push(best as u16);
        }
        prev = best;
    }
    let score = if rows == 0 { 0.0 } else { score_sum / rows as f64 };
    (tokens, score)
}

struct BeamEntry {
    /// Decoder symbol stream, starting with the start marker.
    ids: Vec<usize>,
    sum_lp: f64,
}

impl BeamEntry {
    /// Mean log-probability over emitted symbols (everything past the
    /// start marker, end marker included).
    fn normalized(&self) -> f64 {
        self.sum_lp / (self.ids.len() - 1).max(1) as f64
    }
}

fn emitted_tokens(ids: &[usize], eos: usize) -> Vec<u16> {
    let body = match ids.last() {
        Some(&last) if last == eos => &ids[1..ids.len() - 1],
        _ => &ids[1..],
    };
    body.iter().map(|&s| s as u16).collect()
}

/// Beam rollout against a fixed encoder memory. Candidates are pruned by
/// total log-probability; the final hypothesis is the candidate with the
/// best mean token log-probability. Ties break toward the lexicographically
/// smaller symbol stream, so decoding is deterministic.
fn attention_rollout(
    model: &Model,
    g: &mut Graph,
    binding: &ParamBinding,
    memory: crate::graph::NodeId,
    width: usize,
    max_len: usize,
    apply_adapters: bool,
) -> Result<(Vec<u16>, f64, bool)> {
    let bos = model.config.bos_eos();
    let eos = model.config.bos_eos();
    let mut live = vec![BeamEntry {
        ids: vec![bos],
        sum_lp: 0.0,
    }];
    let mut finished: Vec<BeamEntry> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<BeamEntry> = Vec::new();
        for beam in &live {
            let logits = model.decoder_logits(g, binding, memory, &beam.ids, apply_adapters)?;
            let lsm = g.log_softmax(logits)?;
            let row = g.value(lsm).row(beam.ids.len() - 1).to_vec();
            for (sym, &lp) in row.iter().enumerate() {
                let mut ids = beam.ids.clone();
                ids.push(sym);
                cands.push(BeamEntry {
                    ids,
                    sum_lp: beam.sum_lp + lp,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.sum_lp
                .total_cmp(&a.sum_lp)
                .then_with(|| a.ids.cmp(&b.ids))
        });
        cands.truncate(width);
        live = Vec::new();
        for c in cands {
            if *c.ids.last().expect("nonempty") == eos {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let mut best: Option<(BeamEntry, bool)> = None;
    for (entry, truncated) in finished
        .into_iter()
        .map(|e| (e, false))
        .chain(live.into_iter().map(|e| (e, true)))
    {
        let better = match &best {
            None => true,
            Some((cur, _)) => {
                entry.normalized() > cur.normalized()
                    || (entry.normalized() == cur.normalized() && entry.ids < cur.ids)
            }
        };
        if better {
            best = Some((entry, truncated));
        }
    }
    let (entry, truncated) = best.expect("rollout produces at least one candidate");
    Ok((emitted_tokens(&entry.ids, eos), entry.normalized(), truncated))
}

fn decode_one(
    model: &Model,
    utt: &Utterance,
    cfg: &DecodeConfig,
    input: &InputMode,
) -> Result<Hypothesis> {
    let materialized = materialize(utt, input)?;
    let mut g = Graph::new();
    let binding = model.bind(&mut g, false, false);
    let (enc, apply_dec) = encode_for(model, &mut g, &binding, &materialized, input)?;
    match cfg.mode {
        DecodeMode::CtcGreedy => {
            let lp = g.value(*enc.ctc_log_probs.last().expect("at least one CTC tap"));
            let (tokens, score) = ctc_greedy_tokens(lp);
            Ok(Hypothesis {
                id: utt.id,
                tokens,
                score,
                truncated: false,
            })
        }
        DecodeMode::AttentionGreedy => {
            let (tokens, score, truncated) = attention_rollout(
                model,
                &mut g,
                &binding,
                enc.memory,
                1,
                cfg.max_decode_len,
                apply_dec,
            )?;
            Ok(Hypothesis {
                id: utt.id,
                tokens,
                score,
                truncated,
            })
        }
        DecodeMode::AttentionBeam => {
            let (b_tokens, b_score, b_trunc) = attention_rollout(
                model,
                &mut g,
                &binding,
                enc.memory,
                cfg.beam_width,
                cfg.max_decode_len,
                apply_dec,
            )?;
            let (g_tokens, g_score, g_trunc) = attention_rollout(
                model,
                &mut g,
                &binding,
                enc.memory,
                1,
                cfg.max_decode_len,
                apply_dec,
            )?;
            let (tokens, score, truncated) = if g_score > b_score {
                (g_tokens, g_score, g_trunc)
            } else {
                (b_tokens, b_score, b_trunc)
            };
            Ok(Hypothesis {
                id: utt.id,
                tokens,
                score,
                truncated,
            })
        }
    }
}

/// Decode a batch of utterances under one input mode.
pub fn decode(
    model: &Model,
    utts: &[Utterance],
    cfg: &DecodeConfig,
    input: &InputMode,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    utts.iter().map(|u| decode_one(model, u, cfg, input)).collect()
}

// ---------------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------------

/// Classic two-row edit distance (insert/delete/substitute, unit costs).
pub fn levenshtein(a: &[u16], b: &[u16]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token error rate for one utterance: edit distance over reference length.
/// An empty reference scores the hypothesis length, so inserting into
/// nothing is maximally penalized rather than undefined.
pub fn cer(reference: &[u16], hypothesis: &[u16]) -> f64 {
    if reference.is_empty() {
        return hypothesis.len() as f64;
    }
    levenshtein(reference, hypothesis) as f64 / reference.len() as f64
}

/// Pooled corpus rate: total edits over total reference length. Falls back
/// to total hypothesis length if every reference is empty, mirroring the
/// single-utterance convention.
pub fn corpus_cer(references: &[&[u16]], hypotheses: &[&[u16]]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::contract(format!(
            "corpus rate over {} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        edits += levenshtein(r, h);
        ref_len += r.len();
    }
    if ref_len == 0 {
        return Ok(hypotheses.iter().map(|h| h.len()).sum::<usize>() as f64);
    }
    Ok(edits as f64 / ref_len as f64)
}

/// Pooled corpus rate of hypotheses against the ground-truth labels.
pub fn corpus_cer_vs_labels(utts: &[Utterance], hyps: &[Hypothesis]) -> Result<f64> {
    if utts.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} utterances but {} hypotheses",
            utts.len(),
            hyps.len()
        )));
    }
    for (u, h) in utts.iter().zip(hyps) {
        if u.id != h.id {
            return Err(Error::contract(format!(
                "hypothesis id {} does not match utterance id {}",
                h.id, u.id
            )));
        }
    }
    let refs: Vec<&[u16]> = utts.iter().map(|u| u.labels.as_slice()).collect();
    let out: Vec<&[u16]> = hyps.iter().map(|h| h.tokens.as_slice()).collect();
    corpus_cer(&refs, &out)
}

/// Corpus rate of one system's hypotheses measured against another system's
/// hypotheses on the same utterances: how far the second system drifts from
/// the first, independent of ground truth. The reference side's output is
/// the denominator, so the measure is asymmetric by design.
pub fn relative_cer(reference_hyps: &[Hypothesis], hyps: &[Hypothesis]) -> Result<f64> {
    if reference_hyps.len() != hyps.len() {
        return Err(Error::contract(format!(
            "relative rate over {} reference hypotheses but {} hypotheses",
            reference_hyps.len(),
            hyps.len()
        )));
    }
    for (r, h) in reference_hyps.iter().zip(hyps) {
        if r.id != h.id {
            return Err(Error::contract(format!(
                "relative rate id mismatch: reference {} vs hypothesis {}",
                r.id, h.id
            )));
        }
    }
    let refs: Vec<&[u16]> = reference_hyps.iter().map(|h| h.tokens.as_slice()).collect();
    let out: Vec<&[u16]> = hyps.iter().map(|h| h.tokens.as_slice()).collect();
    corpus_cer(&refs, &out)
}

// ---------------------------------------------------------------------------
// Degradation curves
// ---------------------------------------------------------------------------

/// The evaluation grid: every listed method crossed with every rate.
pub const SUITE_RATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const SUITE_METHODS: [DropoutMethod; 3] = [
    DropoutMethod::Segment,
    DropoutMethod::Utterance,
    DropoutMethod::Interval,
];

fn method_tag(method: DropoutMethod) -> u64 {
    match method {
        DropoutMethod::None => 0,
        DropoutMethod::Segment => 1,
        DropoutMethod::Utterance => 2,
        DropoutMethod::Interval => 3,
        DropoutMethod::PerFrame => 4,
        DropoutMethod::AvUtterance => 5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub rates: Vec<f64>,
    /// One (method name, per-rate corpus CER) row per method.
    pub per_method: Vec<(String, Vec<f64>)>,
    /// Arithmetic mean across methods at each rate.
    pub averaged: Vec<f64>,
}

impl DegradationCurve {
    /// CER at a given method and rate; `method` "averaged" reads the mean row.
    pub fn at(&self, method: &str, rate: f64) -> Option<f64> {
        let col = self.rates.iter().position(|&r| r == rate)?;
        if method == "averaged" {
            return self.averaged.get(col).copied();
        }
        self.per_method
            .iter()
            .find(|(m, _)| m == method)
            .and_then(|(_, row)| row.get(col).copied())
    }

    /// One `method,rate,cer` line per grid point, mean row included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,rate,cer\n");
        for (name, row) in &self.per_method {
            for (rate, cer) in self.rates.iter().zip(row) {
                out.push_str(&format!("{name},{rate},{cer:.6}\n"));
            }
        }
        for (rate, cer) in self.rates.iter().zip(&self.averaged) {
            out.push_str(&format!("averaged,{rate},{cer:.6}\n"));
        }
        out
    }
}

/// Corpus CER at every (method, rate) grid point, applying video-stream
/// dropout on top of the base input mode. Per-point randomness is keyed by
/// (suite seed, method, rate index, utterance id), so the matrix is
/// reproducible bitwise and independent of evaluation order and of
/// `n_threads`.
pub fn degradation_curve(
    model: &Model,
    utts: &[Utterance],
    cfg: &DecodeConfig,
    base: &InputMode,
    suite_seed: u64,
    n_threads: usize,
) -> Result<DegradationCurve> {
    cfg.validate()?;
    if matches!(base, InputMode::Dropped(_)) {
        return Err(Error::contract(
            "degradation curve composes its own dropout; base mode must be complete or audio_only",
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..SUITE_METHODS.len())
        .flat_map(|m| (0..SUITE_RATES.len()).map(move |r| (m, r)))
        .collect();

    let run_job = |&(mi, ri): &(usize, usize)| -> Result<f64> {
        let method = SUITE_METHODS[mi];
        let rate = SUITE_RATES[ri];
        let mut dropped = Vec::with_capacity(utts.len());
        for utt in utts {
            let seed = Rng::derive(suite_seed, &[tags::EVAL_POINT, method_tag(method), ri as u64, utt.id])
                .next_u64();
            let spec = DropoutSpec {
                method,
                rate,
                target: StreamTarget::Video,
                seed,
            };
            dropped.push(apply_dropout(utt, &spec)?);
        }
        let hyps = decode(model, &dropped, cfg, base)?;
        // Score against the original labels: dropout corrupts inputs, not
        // references.
        corpus_cer_vs_labels(utts, &hyps)
    };

    let workers = n_threads.max(1).min(jobs.len());
    let mut cells = vec![0.0f64; jobs.len()];
    if workers <= 1 {
        for (slot, job) in jobs.iter().enumerate() {
            cells[slot] = run_job(job)?;
        }
    } else {
        let results: Vec<Result<Vec<(usize, f64)>>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let jobs = &jobs;
                let run_job = &run_job;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    for (slot, job) in jobs.iter().enumerate().skip(w).step_by(workers) {
                        out.push((slot, run_job(job)?));
                    }
                    Ok(out)
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        for batch in results {
            for (slot, value) in batch? {
                cells[slot] = value;
            }
        }
    }

    let per_method: Vec<(String, Vec<f64>)> = (0..SUITE_METHODS.len())
        .map(|mi| {
            let row = (0..SUITE_RATES.len())
                .map(|ri| cells[mi * SUITE_RATES.len() + ri])
                .collect();
            (SUITE_METHODS[mi].name().to_string(), row)
        })
        .collect();
    let averaged = (0..SUITE_RATES.len())
        .map(|ri| {
            per_method.iter().map(|(_, row)| row[ri]).sum::<f64>() / per_method.len() as f64
        })
        .collect();
    Ok(DegradationCurve {
        rates: SUITE_RATES.to_vec(),
        per_method,
        averaged,
    })
}

// ---------------------------------------------------------------------------
// Latent similarity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub tap: String,
    pub n: usize,
    /// Row-major n x n cosine similarities; rows index the first model's
    /// utterances, columns the second's.
    pub values: Vec<f64>,
    pub diag_mean: f64,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.6}", self.at(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Time-mean-pool one utterance's latent at `tap` into a unit vector.
/// All-zero poolings stay zero (their cosines read 0).
fn pooled_latent(
    model: &Model,
    utt: &Utterance,
    input: &InputMode,
    tap: TapTag,
) -> Result<Vec<f64>> {
    let materialized = materialize(utt, input)?;
    let mut g = Graph::new();
    let binding = model.bind(&mut g, false, false);
    let (enc, _) = encode_for(model, &mut g, &binding, &materialized, input)?;
    let node = enc.latent(tap).ok_or_else(|| {
        Error::contract(format!(
            "tap {} is not produced on the {} path",
            tap.as_str(),
            input.name()
        ))
    })?;
    let value = g.value(node);
    let (rows, cols) = (value.rows(), value.cols());
    let mut pooled = vec![0.0f64; cols];
    for i in 0..rows {
        for (j, p) in pooled.iter_mut().enumerate() {
            *p += value.at(i, j);
        }
    }
    for p in pooled.iter_mut() {
        *p /= rows.max(1) as f64;
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for p in pooled.iter_mut() {
            *p /= norm;
        }
    }
    Ok(pooled)
}

/// Pairwise cosine similarity between two models' pooled latents at one tap
/// over a shared utterance list. Entry (i, j) compares model A on utterance
/// i with model B on utterance j; the diagonal mean summarizes how closely
/// the two representations agree utterance by utterance.
pub fn similarity_matrix(
    model_a: &Model,
    input_a: &InputMode,
    model_b: &Model,
    input_b: &InputMode,
    utts: &[Utterance],
    tap: TapTag,
) -> Result<SimilarityMatrix> {
    if model_a.config.d_model != model_b.config.d_model {
        return Err(Error::contract(format!(
            "latent widths differ: {} vs {}",
            model_a.config.d_model, model_b.config.d_model
        )));
    }
    if utts.is_empty() {
        return Err(Error::contract("similarity needs at least one utterance"));
    }
    let a: Vec<Vec<f64>> = utts
        .iter()
        .map(|u| pooled_latent(model_a, u, input_a, tap))
        .collect::<Result<_>>()?;
    let b: Vec<Vec<f64>> = utts
        .iter()
        .map(|u| pooled_latent(model_b, u, input_b, tap))
        .collect::<Result<_>>()?;
    let n = utts.len();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
        }
    }
    let diag_mean = (0..n).map(|i| values[i * n + i]).sum::<f64>() / n as f64;
    Ok(SimilarityMatrix {
        tap: tap.as_str().to_string(),
        n,
        values,
        diag_mean,
    })
}

// ---------------------------------------------------------------------------
// Bias proxy report
// ---------------------------------------------------------------------------

/// Taps shared by the full and video-disabled paths, the ones comparable
/// against an audio-only reference.
pub const SHARED_TAPS: [TapTag; 3] = [TapTag::FusionOut, TapTag::JointMid, TapTag::JointOut];

/// How much a model leans on each stream: corpus CER with complete input,
/// with the video stream fully missing, and with the audio stream fully
/// missing, plus the diagonal similarity of its shared taps to an
/// audio-only reference model. JSON keys are fixed:
/// `cer_complete`, `cer_video_missing`, `cer_audio_missing`,
/// `similarity_to_audio_reference` (tap name -> diagonal mean),
/// `n_utterances`, `decode_mode`.
pub fn bias_proxy_report(
    model: &Model,
    audio_reference: &Model,
    utts: &[Utterance],
    cfg: &DecodeConfig,
    suite_seed: u64,
) -> Result<serde_json::Value> {
    cfg.validate()?;
    let complete = decode(model, utts, cfg, &InputMode::Complete)?;
    let cer_complete = corpus_cer_vs_labels(utts, &complete)?;

    let video_missing = InputMode::Dropped(DropoutSpec {
        method: DropoutMethod::Utterance,
        rate: 1.0,
        target: StreamTarget::Video,
        seed: Rng::derive(suite_seed, &[tags::EVAL_POINT, 1]).next_u64(),
    });
    let hyps = decode(model, utts, cfg, &video_missing)?;
    let cer_video_missing = corpus_cer_vs_labels(utts, &hyps)?;

    let audio_missing = InputMode::Dropped(DropoutSpec {
        method: DropoutMethod::Utterance,
        rate: 1.0,
        target: StreamTarget::Audio,
        seed: Rng::derive(suite_seed, &[tags::EVAL_POINT, 2]).next_u64(),
    });
    let hyps = decode(model, utts, cfg, &audio_missing)?;
    let cer_audio_missing = corpus_cer_vs_labels(utts, &hyps)?;

    let mut sims = serde_json::Map::new();
    for tap in SHARED_TAPS {
        let sim = similarity_matrix(
            model,
            &InputMode::Complete,
            audio_reference,
            &InputMode::AudioOnly,
            utts,
            tap,
        )?;
        sims.insert(tap.as_str().to_string(), serde_json::json!(sim.diag_mean));
    }

    Ok(serde_json::json!({
        "cer_complete": cer_complete,
        "cer_video_missing": cer_video_missing,
        "cer_audio_missing": cer_audio_missing,
        "similarity_to_audio_reference": serde_json::Value::Object(sims),
        "n_utterances": utts.len(),
        "decode_mode": cfg.mode.name(),
    }))
}
