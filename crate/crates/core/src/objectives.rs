//! Training losses: CTC, attention cross-entropy, their multitask
//! combination, frame-level distillation, and the student objective.
//!
//! Losses are built per utterance on the caller's graph and combined by the
//! training loop; every function returns node handles so gradients flow
//! through the same tape as the model forward pass.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// CTC weight in the multitask combination; attention gets 1 - lambda.
    pub lambda: f64,
    /// Distillation weight in the student objective.
    pub w_kd: f64,
    /// Softmax temperature for distillation.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.7,
            w_kd: 0.1,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.w_kd) {
            return Err(Error::config(format!("w_kd {} outside [0, 1]", self.w_kd)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// CTC needs one frame per label plus one blank separator per repeated
/// adjacent label.
pub fn ctc_min_frames(labels: &[u16]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Result of building a CTC loss: infeasible frame/label combinations are
/// reported instead of producing a non-finite node.
pub enum CtcOutcome {
    Feasible(NodeId),
    /// Too few frames for the label sequence; conventional loss is +inf.
    Infeasible,
}

/// Negative log-probability of all alignments of `labels` under per-frame
/// log-probabilities `log_probs` [T x C] with blank id 0.
///
/// Forward pass is the standard log-space DP over the blank-interleaved
/// label sequence. The gradient w.r.t. the log-probabilities comes from the
/// alpha-beta recursion and is attached as a precomputed-gradient node:
/// d loss / d lp[t][k] = -exp(LSE_{s: z_s=k}(alpha[t][s] + beta[t][s]) - logP).
/// A consequence used as a sanity invariant: each frame's gradients sum to
/// exactly -1.
pub fn ctc_loss(g: &mut Graph, log_probs: NodeId, labels: &[u16]) -> Result<CtcOutcome> {
    let lp = g.value(log_probs);
    if lp.shape().len() != 2 || lp.cols() < 2 {
        return Err(Error::contract(
            "ctc_loss: log_probs must be [T x C] with C >= 2",
        ));
    }
    let (t_frames, c) = (lp.rows(), lp.cols());
    for &l in labels {
        if l == 0 || l as usize >= c {
            return Err(Error::contract(format!(
                "ctc_loss: label {l} outside 1..={}",
                c - 1
            )));
        }
    }
    if t_frames < ctc_min_frames(labels) {
        return Ok(CtcOutcome::Infeasible);
    }

    // Blank-interleaved sequence: blank, l1, blank, l2, ..., blank.
    let s_len = 2 * labels.len() + 1;
    let z = |s: usize| -> usize {
        if s % 2 == 1 {
            labels[s / 2] as usize
        } else {
            0
        }
    };
    let lp_at = |t: usize, k: usize| g.value(log_probs).at(t, k);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_frames * s_len];
    alpha[0] = lp_at(0, z(0));
    if s_len > 1 {
        alpha[1] = lp_at(0, z(1));
    }
    for t in 1..t_frames {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && z(s) != 0 && z(s) != z(s - 2) {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp_at(t, z(s)) };
        }
    }
    let mut log_p = alpha[(t_frames - 1) * s_len + s_len - 1];
    if s_len >= 2 {
        log_p = lse2(log_p, alpha[(t_frames - 1) * s_len + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::numeric(
            "ctc_loss: total path probability vanished despite feasible lengths",
        ));
    }

    // Suffix probabilities, excluding the emission at t itself.
    let mut beta = vec![ninf; t_frames * s_len];
    beta[(t_frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len >= 2 {
        beta[(t_frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + lp_at(t + 1, z(s));
            if s + 1 < s_len {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 1] + lp_at(t + 1, z(s + 1)));
            }
            if s + 2 < s_len && z(s + 2) != 0 && z(s + 2) != z(s) {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 2] + lp_at(t + 1, z(s + 2)));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = Tensor::zeros(vec![t_frames, c]);
    let mut acc_k = vec![ninf; c];
    for t in 0..t_frames {
        acc_k.iter_mut().for_each(|x| *x = ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            let k = z(s);
            acc_k[k] = lse2(acc_k[k], ab);
        }
        for (k, &a) in acc_k.iter().enumerate() {
            if a > ninf {
                grad.set(t, k, -((a - log_p).exp()));
            }
        }
    }

    let node = g.precomputed_scalar(log_probs, -log_p, grad)?;
    Ok(CtcOutcome::Feasible(node))
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Mean token cross-entropy over the first `valid_len` positions of
/// teacher-forced decoder logits [L x C]. Positions past `valid_len` are
/// padding and never touch the loss.
pub fn attention_ce(
    g: &mut Graph,
    logits: NodeId,
    targets: &[usize],
    valid_len: usize,
) -> Result<NodeId> {
    let v = g.value(logits);
    if v.shape().len() != 2 {
        return Err(Error::contract("attention_ce: logits must be [L x C]"));
    }
    if targets.len() != v.rows() {
        return Err(Error::contract(format!(
            "attention_ce: {} targets for {} logit rows",
            targets.len(),
            v.rows()
        )));
    }
    if valid_len == 0 {
        return Err(Error::contract(
            "attention_ce: at least one unmasked position required",
        ));
    }
    if valid_len > targets.len() {
        return Err(Error::contract(format!(
            "attention_ce: valid_len {} exceeds {} positions",
            valid_len,
            targets.len()
        )));
    }
    let active = if valid_len == v.rows() {
        logits
    } else {
        g.slice(logits, 0, 0, valid_len)?
    };
    let lsm = g.log_softmax(active)?;
    let picked = g.pick_per_row(lsm, &targets[..valid_len])?;
    let mean = g.mean_all(picked)?;
    Ok(g.mul_scalar(mean, -1.0))
}

/// Multitask components plus their weighted total.
pub struct MultitaskLoss {
    pub total: NodeId,
    pub ctc_mean: NodeId,
    pub attention: NodeId,
}

pub enum MultitaskOutcome {
    Feasible(MultitaskLoss),
    /// At least one CTC tap had too few frames for the labels.
    Infeasible,
}

/// lambda * mean(CTC over all tapped log-prob matrices) + (1 - lambda) *
/// attention cross-entropy. Exact affine combination in lambda.
pub fn multitask_loss(
    g: &mut Graph,
    ctc_log_probs: &[NodeId],
    labels: &[u16],
    decoder_logits: NodeId,
    decoder_targets: &[usize],
    weights: &LossWeights,
) -> Result<MultitaskOutcome> {
    weights.validate()?;
    if ctc_log_probs.is_empty() {
        return Err(Error::contract("multitask_loss: no CTC taps supplied"));
    }
    let mut ctc_nodes = Vec::with_capacity(ctc_log_probs.len());
    for &lp in ctc_log_probs {
        match ctc_loss(g, lp, labels)? {
            CtcOutcome::Feasible(n) => ctc_nodes.push(n),
            CtcOutcome::Infeasible => return Ok(MultitaskOutcome::Infeasible),
        }
    }
    let mut ctc_sum = ctc_nodes[0];
    for &n in &ctc_nodes[1..] {
        ctc_sum = g.add(ctc_sum, n)?;
    }
    let ctc_mean = g.mul_scalar(ctc_sum, 1.0 / ctc_nodes.len() as f64);
    let attention = attention_ce(g, decoder_logits, decoder_targets, decoder_targets.len())?;

    let weighted_ctc = g.mul_scalar(ctc_mean, weights.lambda);
    let weighted_att = g.mul_scalar(attention, 1.0 - weights.lambda);
    let total = g.add(weighted_ctc, weighted_att)?;
    Ok(MultitaskOutcome::Feasible(MultitaskLoss {
        total,
        ctc_mean,
        attention,
    }))
}

/// One named distillation pair: matching latent taps from teacher and
/// student. The teacher node is expected to carry no gradient (bound as a
/// constant leaf by the caller).
pub struct KdPair {
    pub tag: &'static str,
    pub teacher: NodeId,
    pub student: NodeId,
}

/// Frame-level distillation: per tag and per frame,
/// KL(softmax_T(teacher row) || softmax_T(student row)) over the feature
/// dimension, scaled by T^2, averaged over frames and tags.
pub fn kd_loss(g: &mut Graph, pairs: &[KdPair], temperature: f64) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::contract("kd_loss: no tap pairs supplied"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::config(format!(
            "kd_loss: temperature {temperature} must be positive"
        )));
    }
    let mut acc: Option<NodeId> = None;
    for pair in pairs {
        let (ts, ss) = (g.value(pair.teacher).shape(), g.value(pair.student).shape());
        if ts != ss {
            return Err(Error::contract(format!(
                "kd_loss: tap '{}' shapes differ: teacher {:?} vs student {:?}",
                pair.tag, ts, ss
            )));
        }
        let cols = g.value(pair.teacher).cols() as f64;
        let t_scaled = g.mul_scalar(pair.teacher, 1.0 / temperature);
        let s_scaled = g.mul_scalar(pair.student, 1.0 / temperature);
        let p = g.softmax(t_scaled)?;
        let lp_t = g.log_softmax(t_scaled)?;
        let lp_s = g.log_softmax(s_scaled)?;
        let diff = g.sub(lp_t, lp_s)?;
        let prod = g.mul(p, diff)?;
        // mean_all averages over frames AND features; scale by the feature
        // count to get the mean over frames of per-frame KL row sums.
        let m = g.mean_all(prod)?;
        let framewise = g.mul_scalar(m, cols);
        acc = Some(match acc {
            None => framewise,
            Some(a) => g.add(a, framewise)?,
        });
    }
    let sum = acc.expect("nonempty pairs");
    Ok(g.mul_scalar(sum, temperature * temperature / pairs.len() as f64))
}

/// w_kd * kd + (1 - w_kd) * multitask. The endpoints return the input node
/// itself, so w_kd = 0 is bitwise identical to the plain multitask loss.
pub fn student_loss(
    g: &mut Graph,
    kd: Option<NodeId>,
    multitask: NodeId,
    w_kd: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&w_kd) {
        return Err(Error::config(format!("w_kd {w_kd} outside [0, 1]")));
    }
    match kd {
        None => {
            if w_kd > 0.0 {
                return Err(Error::contract(
                    "student_loss: w_kd > 0 requires a distillation term",
                ));
            }
            Ok(multitask)
        }
        Some(kd) if w_kd == 0.0 => {
            let _ = kd;
            Ok(multitask)
        }
        Some(kd) if w_kd == 1.0 => Ok(kd),
        Some(kd) => {
            let wk = g.mul_scalar(kd, w_kd);
            let wm = g.mul_scalar(multitask, 1.0 - w_kd);
            g.add(wk, wm)
        }
    }
}
