//! Graph construction for the recognizer's inference paths.
//!
//! Two encoder paths share every audio-side parameter:
//!
//! * full: audio branch + video branch -> dual cross-attention fusion ->
//!   joint encoder. The fusion stage runs self-attention, cross-attention to
//!   the other stream, and a feed-forward per stream; the audio-rate stream
//!   concatenated with its video context is projected back to model width
//!   and feeds the joint encoder.
//! * audio: the video branch and fusion stage are skipped entirely; the
//!   joint encoder consumes the audio-branch output. Low-rank adapter
//!   deltas, when attached and active, apply on this path only.
//!
//! Named latent taps are exposed for distillation and similarity analysis.
//! On the audio path the `fusion_out` tag denotes the joint-encoder input
//! (the audio-branch output), keeping tap shapes aligned across paths.

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, NodeId};
use crate::model::{
    AttnIdx, DecBlockIdx, EncBlockIdx, FfnIdx, Lin, LnIdx, Model, ParamBinding,
};
use crate::tensor::Tensor;
use std::collections::HashMap;

const LN_EPS: f64 = 1e-5;

/// Fixed set of named intermediate representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapTag {
    VideoFrontendOut,
    VideoBlock1,
    FusionOut,
    JointMid,
    JointOut,
}

impl TapTag {
    pub const ALL: [TapTag; 5] = [
        TapTag::VideoFrontendOut,
        TapTag::VideoBlock1,
        TapTag::FusionOut,
        TapTag::JointMid,
        TapTag::JointOut,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TapTag::VideoFrontendOut => "video_frontend_out",
            TapTag::VideoBlock1 => "video_block_1",
            TapTag::FusionOut => "fusion_out",
            TapTag::JointMid => "joint_mid",
            TapTag::JointOut => "joint_out",
        }
    }

    pub fn parse(s: &str) -> Option<TapTag> {
        TapTag::ALL.iter().copied().find(|t| t.as_str() == s)
    }
}

/// Encoder-side outputs: the decoder memory, per-tap CTC log-probabilities,
/// and the named latents.
pub struct Encoded {
    /// Final-norm joint encoder output, the decoder cross-attention memory.
    pub memory: NodeId,
    /// CTC log-probability matrices, one per tapped joint block.
    pub ctc_log_probs: Vec<NodeId>,
    /// 1-based joint block index behind each entry of `ctc_log_probs`.
    pub ctc_tap_blocks: Vec<usize>,
    pub latents: Vec<(TapTag, NodeId)>,
}

impl Encoded {
    pub fn latent(&self, tag: TapTag) -> Option<NodeId> {
        self.latents.iter().find(|(t, _)| *t == tag).map(|(_, n)| *n)
    }
}

pub struct ForwardPass {
    pub memory: NodeId,
    pub ctc_log_probs: Vec<NodeId>,
    pub ctc_tap_blocks: Vec<usize>,
    pub latents: Vec<(TapTag, NodeId)>,
    pub decoder_logits: Option<NodeId>,
}

impl ForwardPass {
    pub fn latent(&self, tag: TapTag) -> Option<NodeId> {
        self.latents.iter().find(|(t, _)| *t == tag).map(|(_, n)| *n)
    }

    fn from_parts(encoded: Encoded, decoder_logits: Option<NodeId>) -> Self {
        ForwardPass {
            memory: encoded.memory,
            ctc_log_probs: encoded.ctc_log_probs,
            ctc_tap_blocks: encoded.ctc_tap_blocks,
            latents: encoded.latents,
            decoder_logits,
        }
    }
}

/// Teacher-forcing decoder sequences for a label sequence: inputs start
/// with the start/end marker, targets end with it.
pub fn decoder_teacher_io(labels: &[u16], bos_eos: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(labels.len() + 1);
    inputs.push(bos_eos);
    inputs.extend(labels.iter().map(|&l| l as usize));
    let mut targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    targets.push(bos_eos);
    (inputs, targets)
}

/// Sinusoidal position table for `t` rows of width `d`.
fn posenc(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(vec![t, d]);
    for pos in 0..t {
        let row = pe.row_mut(pos);
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
        if d % 2 == 1 {
            let freq = 1.0 / 10000f64.powf((d - 1) as f64 / d as f64);
            row[d - 1] = (pos as f64 * freq).sin();
        }
    }
    pe
}

fn rows_prefix(x: &Tensor, valid: usize) -> Tensor {
    let cols = x.cols();
    Tensor::new(
        vec![valid, cols],
        x.data()[..valid * cols].to_vec(),
    )
    .expect("prefix shape consistent")
}

/// Adapter delta lookup: weight-table index -> bound (B, A) factor nodes.
type AdapterDeltas = HashMap<usize, (NodeId, NodeId)>;

/// Per-forward helper carrying the graph, the binding, and the adapter
/// delta map for this path.
struct Fwd<'a, 'g> {
    g: &'g mut Graph,
    b: &'a ParamBinding,
    m: &'a Model,
    deltas: AdapterDeltas,
    scaling: f64,
}

impl<'a, 'g> Fwd<'a, 'g> {
    fn node(&self, idx: usize) -> NodeId {
        self.b.base[idx]
    }

    fn linear(&mut self, l: &Lin, x: NodeId) -> Result<NodeId> {
        self.g.linear(x, self.node(l.w), self.node(l.b))
    }

    /// Attention projection: base linear plus the low-rank delta
    /// x·B·A·scaling when this weight is decorated on the current path.
    fn proj(&mut self, l: &Lin, x: NodeId) -> Result<NodeId> {
        let base = self.linear(l, x)?;
        if let Some(&(a, b)) = self.deltas.get(&l.w) {
            let xb = self.g.matmul(x, b)?;
            let xba = self.g.matmul(xb, a)?;
            let scaled = self.g.mul_scalar(xba, self.scaling);
            return self.g.add(base, scaled);
        }
        Ok(base)
    }

    fn ln(&mut self, l: &LnIdx, x: NodeId) -> Result<NodeId> {
        let n = self.g.layer_norm(x, LN_EPS)?;
        let scaled = self.g.mul_row(n, self.node(l.g))?;
        self.g.add_row(scaled, self.node(l.b))
    }

    fn mha(&mut self, a: &AttnIdx, q_in: NodeId, kv_in: NodeId, mask: AttnMask) -> Result<NodeId> {
        let q = self.proj(&a.q, q_in)?;
        let k = self.proj(&a.k, kv_in)?;
        let v = self.proj(&a.v, kv_in)?;
        let ctx = self
            .g
            .attention(q, k, v, self.m.config().n_heads, mask)?;
        self.proj(&a.o, ctx)
    }

    fn ffn(&mut self, f: &FfnIdx, x: NodeId) -> Result<NodeId> {
        let h = self.linear(&f.l1, x)?;
        let h = self.g.gelu(h);
        self.linear(&f.l2, h)
    }

    /// Pre-norm residual block: x + SA(LN(x)), then x + FFN(LN(x)).
    fn enc_block(&mut self, blk: &EncBlockIdx, x: NodeId) -> Result<NodeId> {
        let n = self.ln(&blk.ln_attn, x)?;
        let att = self.mha(&blk.attn, n, n, AttnMask::None)?;
        let x = self.g.add(x, att)?;
        let n = self.ln(&blk.ln_ffn, x)?;
        let f = self.ffn(&blk.ffn, n)?;
        self.g.add(x, f)
    }

    fn frontend(&mut self, lin: &Lin, frames: NodeId) -> Result<NodeId> {
        let x = self.linear(lin, frames)?;
        let t = self.g.value(x).rows();
        let d = self.g.value(x).cols();
        let pe = self.g.leaf(posenc(t, d));
        self.g.add(x, pe)
    }

    /// Joint encoder over its input plus CTC taps and final latents.
    fn joint_and_heads(&mut self, joint_in: NodeId, mut latents: Vec<(TapTag, NodeId)>) -> Result<Encoded> {
        latents.push((TapTag::FusionOut, joint_in));
        let mid = self.m.config().joint_mid_block();
        let n_joint = self.m.config().n_joint_blocks;
        let mut block_out = Vec::with_capacity(n_joint);
        let mut x = joint_in;
        let joint_blocks = self.m.layout.joint_blocks.clone();
        for (i, blk) in joint_blocks.iter().enumerate() {
            x = self.enc_block(blk, x)?;
            block_out.push(x);
            if i + 1 == mid {
                latents.push((TapTag::JointMid, x));
            }
        }
        latents.push((TapTag::JointOut, x));

        let enc_ln = self.m.layout.enc_ln;
        let ctc_head = self.m.layout.ctc_head;
        let mut ctc_log_probs = Vec::new();
        let mut ctc_tap_blocks = Vec::new();
        for tap in self.m.config().effective_ctc_taps() {
            let repr = self.ln(&enc_ln, block_out[tap - 1])?;
            let logits = self.linear(&ctc_head, repr)?;
            ctc_log_probs.push(self.g.log_softmax(logits)?);
            ctc_tap_blocks.push(tap);
        }
        let memory = self.ln(&enc_ln, x)?;
        Ok(Encoded {
            memory,
            ctc_log_probs,
            ctc_tap_blocks,
            latents,
        })
    }
}

impl Model {
    fn adapter_delta_map(
        &self,
        binding: &ParamBinding,
        apply: bool,
    ) -> Result<(AdapterDeltas, f64)> {
        if !apply {
            return Ok((HashMap::new(), 0.0));
        }
        let ad = self
            .adapters
            .as_ref()
            .ok_or_else(|| Error::contract("adapter path requested without attached adapters"))?;
        if binding.adapter.len() != ad.tensors.len() {
            return Err(Error::contract(
                "binding missing adapter tensors for the adapter path",
            ));
        }
        let map = ad
            .sites
            .iter()
            .map(|s| (s.target_w, (binding.adapter[s.a], binding.adapter[s.b])))
            .collect();
        Ok((map, ad.config.scaling))
    }

    fn check_stream(
        &self,
        name: &str,
        frames: &Tensor,
        valid: usize,
        feature_dim: usize,
    ) -> Result<()> {
        if frames.shape().len() != 2 || frames.cols() != feature_dim {
            return Err(Error::contract(format!(
                "{name} frames must be [T x {feature_dim}], got {:?}",
                frames.shape()
            )));
        }
        if valid == 0 || valid > frames.rows() {
            return Err(Error::contract(format!(
                "{name} valid length {valid} outside 1..={}",
                frames.rows()
            )));
        }
        if valid > self.config.max_len {
            return Err(Error::contract(format!(
                "{name} length {valid} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Full audio-visual encoder. Rows past the valid lengths are padding
    /// and are dropped before the network sees them.
    pub fn encode_full(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        audio: &Tensor,
        audio_valid: usize,
        video: &Tensor,
        video_valid: usize,
    ) -> Result<Encoded> {
        self.check_stream("audio", audio, audio_valid, self.config.audio_feature_dim)?;
        self.check_stream("video", video, video_valid, self.config.video_feature_dim)?;
        let (deltas, scaling) = (HashMap::new(), 0.0);
        let mut f = Fwd {
            g,
            b: binding,
            m: self,
            deltas,
            scaling,
        };

        let a_in = f.g.leaf(rows_prefix(audio, audio_valid));
        let v_in = f.g.leaf(rows_prefix(video, video_valid));
        let audio_frontend = self.layout.audio_frontend;
        let video_frontend = self.layout.video_frontend;
        let mut a = f.frontend(&audio_frontend, a_in)?;
        let mut v = f.frontend(&video_frontend, v_in)?;
        let mut latents = vec![(TapTag::VideoFrontendOut, v)];

        let audio_blocks = self.layout.audio_blocks.clone();
        for blk in &audio_blocks {
            a = f.enc_block(blk, a)?;
        }
        let video_blocks = self.layout.video_blocks.clone();
        for (i, blk) in video_blocks.iter().enumerate() {
            v = f.enc_block(blk, v)?;
            if i == 0 {
                latents.push((TapTag::VideoBlock1, v));
            }
        }

        let fusion_blocks = self.layout.fusion_blocks.clone();
        let mut audio_ctx = None;
        for blk in &fusion_blocks {
            // Video stream: self-attention, optional cross-attention into
            // the audio stream, feed-forward.
            let n = f.ln(&blk.video.ln_sa, v)?;
            let sa = f.mha(&blk.video.sa, n, n, AttnMask::None)?;
            let v_sa = f.g.add(v, sa)?;
            let v_ca = if self.config.disable_audio_to_video {
                v_sa
            } else {
                let q = f.ln(&blk.video.ln_ca, v_sa)?;
                let ca = f.mha(&blk.video.ca, q, a, AttnMask::None)?;
                f.g.add(v_sa, ca)?
            };
            let n = f.ln(&blk.video.ln_ffn, v_ca)?;
            let ff = f.ffn(&blk.video.ffn, n)?;
            let v_out = f.g.add(v_ca, ff)?;

            // Audio stream: self-attention, cross-attention into the
            // updated video stream, feed-forward.
            let n = f.ln(&blk.audio.ln_sa, a)?;
            let sa = f.mha(&blk.audio.sa, n, n, AttnMask::None)?;
            let a_sa = f.g.add(a, sa)?;
            let q = f.ln(&blk.audio.ln_ca, a_sa)?;
            let ctx = f.mha(&blk.audio.ca, q, v_out, AttnMask::None)?;
            let a_ca = f.g.add(a_sa, ctx)?;
            let n = f.ln(&blk.audio.ln_ffn, a_ca)?;
            let ff = f.ffn(&blk.audio.ffn, n)?;
            a = f.g.add(a_ca, ff)?;
            v = v_out;
            audio_ctx = Some(ctx);
        }
        let ctx = audio_ctx.expect("at least one fusion block");
        let merged = f.g.concat(a, ctx, 1)?;
        let fusion_merge = self.layout.fusion_merge;
        let fused = f.linear(&fusion_merge, merged)?;

        f.joint_and_heads(fused, latents)
    }

    /// Video-disabled encoder: the audio branch feeds the joint encoder
    /// directly. With `apply_adapters` the attached low-rank deltas decorate
    /// the audio-path self-attention projections.
    pub fn encode_audio_path(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        audio: &Tensor,
        audio_valid: usize,
        apply_adapters: bool,
    ) -> Result<Encoded> {
        self.check_stream("audio", audio, audio_valid, self.config.audio_feature_dim)?;
        let (deltas, scaling) = self.adapter_delta_map(binding, apply_adapters)?;
        let mut f = Fwd {
            g,
            b: binding,
            m: self,
            deltas,
            scaling,
        };
        let a_in = f.g.leaf(rows_prefix(audio, audio_valid));
        let audio_frontend = self.layout.audio_frontend;
        let mut a = f.frontend(&audio_frontend, a_in)?;
        let audio_blocks = self.layout.audio_blocks.clone();
        for blk in &audio_blocks {
            a = f.enc_block(blk, a)?;
        }
        f.joint_and_heads(a, Vec::new())
    }

    /// Teacher-forced decoder logits [len x decoder_vocab] over `input_ids`
    /// attending to the encoder memory.
    pub fn decoder_logits(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        memory: NodeId,
        input_ids: &[usize],
        apply_adapters: bool,
    ) -> Result<NodeId> {
        if input_ids.is_empty() {
            return Err(Error::contract("decoder needs at least one input symbol"));
        }
        if input_ids.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "decoder length {} exceeds max_len {}",
                input_ids.len(),
                self.config.max_len
            )));
        }
        let vocab = self.config.decoder_vocab();
        for &id in input_ids {
            if id >= vocab {
                return Err(Error::contract(format!(
                    "decoder symbol {id} outside vocabulary {vocab}"
                )));
            }
        }
        let apply = apply_adapters
            && self
                .adapters
                .as_ref()
                .map(|a| a.config.insert_part == crate::model::InsertPart::EncoderAndDecoder)
                .unwrap_or(false);
        let (deltas, scaling) = self.adapter_delta_map(binding, apply)?;
        let mut f = Fwd {
            g,
            b: binding,
            m: self,
            deltas,
            scaling,
        };
        let d = self.config.d_model;
        let emb = f.g.embedding_lookup(f.node(self.layout.dec_embed), input_ids)?;
        let emb = f.g.mul_scalar(emb, (d as f64).sqrt());
        let pe = f.g.leaf(posenc(input_ids.len(), d));
        let mut x = f.g.add(emb, pe)?;
        let dec_blocks = self.layout.dec_blocks.clone();
        for blk in &dec_blocks {
            let blk: &DecBlockIdx = blk;
            let n = f.ln(&blk.ln_sa, x)?;
            let sa = f.mha(&blk.sa, n, n, AttnMask::Causal)?;
            x = f.g.add(x, sa)?;
            let n = f.ln(&blk.ln_ca, x)?;
            let ca = f.mha(&blk.ca, n, memory, AttnMask::None)?;
            x = f.g.add(x, ca)?;
            let n = f.ln(&blk.ln_ffn, x)?;
            let ff = f.ffn(&blk.ffn, n)?;
            x = f.g.add(x, ff)?;
        }
        let dec_ln = self.layout.dec_ln;
        let dec_head = self.layout.dec_head;
        let n = f.ln(&dec_ln, x)?;
        f.linear(&dec_head, n)
    }

    /// Full multimodal forward. Attached adapters are ignored on this path.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_full(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        audio: &Tensor,
        audio_valid: usize,
        video: &Tensor,
        video_valid: usize,
        decoder_inputs: Option<&[usize]>,
    ) -> Result<ForwardPass> {
        let enc = self.encode_full(g, binding, audio, audio_valid, video, video_valid)?;
        let dec = match decoder_inputs {
            Some(ids) => Some(self.decoder_logits(g, binding, enc.memory, ids, false)?),
            None => None,
        };
        Ok(ForwardPass::from_parts(enc, dec))
    }

    /// Video-disabled forward used by the audio-only baseline recipe and,
    /// with `apply_adapters`, by the switched decision path.
    pub fn forward_audio_path(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        audio: &Tensor,
        audio_valid: usize,
        decoder_inputs: Option<&[usize]>,
        apply_adapters: bool,
    ) -> Result<ForwardPass> {
        let enc = self.encode_audio_path(g, binding, audio, audio_valid, apply_adapters)?;
        let dec = match decoder_inputs {
            Some(ids) => {
                Some(self.decoder_logits(g, binding, enc.memory, ids, apply_adapters)?)
            }
            None => None,
        };
        Ok(ForwardPass::from_parts(enc, dec))
    }

    /// The switched audio-only decision path: requires attached, activated
    /// adapters and never reads any video input.
    pub fn forward_audio_only(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        audio: &Tensor,
        audio_valid: usize,
        decoder_inputs: Option<&[usize]>,
    ) -> Result<ForwardPass> {
        let ad = self
            .adapters
            .as_ref()
            .ok_or_else(|| Error::contract("forward_audio_only: no adapters attached"))?;
        if !ad.active {
            return Err(Error::contract(
                "forward_audio_only: adapters attached but not activated",
            ));
        }
        self.forward_audio_path(g, binding, audio, audio_valid, decoder_inputs, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, CheckSettings};
    use crate::model::{AdapterConfig, InsertPart, Model, ModelConfig};
    use crate::objectives::{
        kd_loss, multitask_loss, student_loss, KdPair, LossWeights, MultitaskOutcome,
    };
    use crate::rng::Rng;

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
            vocab_size_with_blank: 5,
            max_len: 32,
            intermediate_ctc_taps: vec![1, 2],
            audio_feature_dim: 6,
            video_feature_dim: 4,
            disable_audio_to_video: false,
        }
    }

    fn rand(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let mut rng = Rng::new(seed);
        rng.fill_gaussian(t.data_mut(), scale);
        t
    }

    fn run_full(m: &Model, audio: &Tensor, video: &Tensor, dec: &[usize]) -> Vec<Tensor> {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        let out = m
            .forward_full(
                &mut g,
                &b,
                audio,
                audio.rows(),
                video,
                video.rows(),
                Some(dec),
            )
            .unwrap();
        let mut vals: Vec<Tensor> = out
            .ctc_log_probs
            .iter()
            .map(|&n| g.value(n).clone())
            .collect();
        vals.push(g.value(out.decoder_logits.unwrap()).clone());
        for (_, n) in &out.latents {
            vals.push(g.value(*n).clone());
        }
        vals
    }

    #[test]
    fn forward_shapes_taps_and_determinism() {
        let m = Model::build(tiny_config(), 21).unwrap();
        let audio = rand(vec![12, 6], 1, 1.0);
        let video = rand(vec![8, 4], 2, 1.0);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        let out = m
            .forward_full(&mut g, &b, &audio, 12, &video, 8, Some(&[5, 1, 2, 3]))
            .unwrap();

        assert_eq!(out.ctc_tap_blocks, vec![1, 2]);
        for &lp in &out.ctc_log_probs {
            let t = g.value(lp);
            assert_eq!(t.shape(), &[12, 5]);
            for i in 0..t.rows() {
                let total: f64 = t.row(i).iter().map(|x| x.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
        let dec = g.value(out.decoder_logits.unwrap());
        assert_eq!(dec.shape(), &[4, 6]);

        let tags: Vec<&str> = out.latents.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(
            tags,
            vec![
                "video_frontend_out",
                "video_block_1",
                "fusion_out",
                "joint_mid",
                "joint_out"
            ]
        );
        assert_eq!(
            g.value(out.latent(TapTag::VideoBlock1).unwrap()).shape(),
            &[8, 8]
        );
        assert_eq!(
            g.value(out.latent(TapTag::FusionOut).unwrap()).shape(),
            &[12, 8]
        );

        // A second graph reproduces every output bitwise.
        let again = run_full(&m, &audio, &video, &[5, 1, 2, 3]);
        let first = run_full(&m, &audio, &video, &[5, 1, 2, 3]);
        assert_eq!(first, again);
    }

    #[test]
    fn padding_rows_never_reach_the_network() {
        let m = Model::build(tiny_config(), 22).unwrap();
        let audio = rand(vec![10, 6], 3, 1.0);
        let video = rand(vec![6, 4], 4, 1.0);
        // Same frames plus garbage rows past the valid lengths.
        let mut audio_pad = Tensor::zeros(vec![13, 6]);
        audio_pad.data_mut()[..60].copy_from_slice(audio.data());
        audio_pad.data_mut()[60..].iter_mut().for_each(|x| *x = 777.0);
        let mut video_pad = Tensor::zeros(vec![9, 4]);
        video_pad.data_mut()[..24].copy_from_slice(video.data());
        video_pad.data_mut()[24..].iter_mut().for_each(|x| *x = -55.0);

        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        let clean = m
            .forward_full(&mut g, &b, &audio, 10, &video, 6, Some(&[5, 1]))
            .unwrap();
        let padded = m
            .forward_full(&mut g, &b, &audio_pad, 10, &video_pad, 6, Some(&[5, 1]))
            .unwrap();
        for (a, p) in clean.ctc_log_probs.iter().zip(&padded.ctc_log_probs) {
            assert_eq!(g.value(*a), g.value(*p));
        }
        assert_eq!(
            g.value(clean.decoder_logits.unwrap()),
            g.value(padded.decoder_logits.unwrap())
        );
    }

    #[test]
    fn length_contracts_are_enforced() {
        let m = Model::build(tiny_config(), 23).unwrap();
        let audio = rand(vec![40, 6], 5, 1.0);
        let video = rand(vec![8, 4], 6, 1.0);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        // 40 audio frames exceed max_len 32.
        assert!(m
            .forward_full(&mut g, &b, &audio, 40, &video, 8, None)
            .is_err());
        let audio = rand(vec![10, 6], 5, 1.0);
        assert!(m
            .forward_full(&mut g, &b, &audio, 0, &video, 8, None)
            .is_err());
        let enc = m
            .encode_full(&mut g, &b, &audio, 10, &video, 8)
            .unwrap();
        assert!(m
            .decoder_logits(&mut g, &b, enc.memory, &[], false)
            .is_err());
        assert!(m
            .decoder_logits(&mut g, &b, enc.memory, &[6], false)
            .is_err());
    }

    #[test]
    fn zero_filled_video_still_runs() {
        let m = Model::build(tiny_config(), 24).unwrap();
        let audio = rand(vec![12, 6], 7, 1.0);
        let video = Tensor::zeros(vec![8, 4]);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        let out = m
            .forward_full(&mut g, &b, &audio, 12, &video, 8, Some(&[5, 2]))
            .unwrap();
        for &lp in &out.ctc_log_probs {
            assert!(g.value(lp).is_finite());
        }
        assert!(g.value(out.decoder_logits.unwrap()).is_finite());
    }

    #[test]
    fn audio_to_video_cut_makes_video_taps_audio_invariant() {
        let mut cfg = tiny_config();
        cfg.disable_audio_to_video = true;
        let m = Model::build(cfg, 25).unwrap();
        let video = rand(vec![8, 4], 8, 1.0);
        let audio_a = rand(vec![12, 6], 9, 1.0);
        let audio_b = rand(vec![12, 6], 10, 1.0);

        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        let out_a = m
            .forward_full(&mut g, &b, &audio_a, 12, &video, 8, None)
            .unwrap();
        let out_b = m
            .forward_full(&mut g, &b, &audio_b, 12, &video, 8, None)
            .unwrap();
        for tag in [TapTag::VideoFrontendOut, TapTag::VideoBlock1] {
            assert_eq!(
                g.value(out_a.latent(tag).unwrap()),
                g.value(out_b.latent(tag).unwrap()),
                "{} must not depend on audio",
                tag.as_str()
            );
        }
        // Audio still matters downstream of the video branch.
        assert_ne!(
            g.value(out_a.latent(TapTag::FusionOut).unwrap()),
            g.value(out_b.latent(TapTag::FusionOut).unwrap())
        );

        // And the cut changes the computation relative to the default wiring.
        let m_open = Model::build(tiny_config(), 25).unwrap();
        let mut g2 = Graph::new();
        let b2 = m_open.bind(&mut g2, false, false);
        let open = m_open
            .forward_full(&mut g2, &b2, &audio_a, 12, &video, 8, None)
            .unwrap();
        assert_ne!(
            g.value(out_a.ctc_log_probs[1]),
            g2.value(open.ctc_log_probs[1])
        );
    }

    #[test]
    fn fresh_adapters_are_an_exact_identity() {
        let mut m = Model::build(tiny_config(), 26).unwrap();
        let audio = rand(vec![12, 6], 11, 1.0);
        let video = rand(vec![8, 4], 12, 1.0);
        let dec = [5usize, 1, 4];
        let before_full = run_full(&m, &audio, &video, &dec);
        let before_audio = {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false, false);
            let out = m
                .forward_audio_path(&mut g, &b, &audio, 12, Some(&dec), false)
                .unwrap();
            g.value(out.ctc_log_probs[1]).clone()
        };

        m.insert_adapters(AdapterConfig::with_rank(3, InsertPart::EncoderAndDecoder), 13)
            .unwrap();
        m.set_adapter_active(true).unwrap();

        // Full path ignores adapters entirely.
        assert_eq!(run_full(&m, &audio, &video, &dec), before_full);

        // Audio-only path with B = 0 is the identity delta, bit for bit.
        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        let out = m
            .forward_audio_only(&mut g, &b, &audio, 12, Some(&dec))
            .unwrap();
        assert_eq!(g.value(out.ctc_log_probs[1]), &before_audio);

        // Toggling the switch never perturbs base tensors or full outputs.
        let sum_before = m.base_checksum();
        m.set_adapter_active(false).unwrap();
        m.set_adapter_active(true).unwrap();
        m.set_adapter_active(false).unwrap();
        assert_eq!(m.base_checksum(), sum_before);
        assert_eq!(run_full(&m, &audio, &video, &dec), before_full);
    }

    #[test]
    fn audio_only_path_requires_active_adapters_and_skips_fusion() {
        let mut m = Model::build(tiny_config(), 27).unwrap();
        let audio = rand(vec![12, 6], 14, 1.0);
        let video = rand(vec![8, 4], 15, 1.0);
        {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false, false);
            assert!(m.forward_audio_only(&mut g, &b, &audio, 12, None).is_err());
        }
        let mut cfg = AdapterConfig::with_rank(2, InsertPart::Encoder);
        cfg.scaling = 0.0;
        m.insert_adapters(cfg, 16).unwrap();
        {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false, false);
            assert!(m.forward_audio_only(&mut g, &b, &audio, 12, None).is_err());
        }
        m.set_adapter_active(true).unwrap();

        // Even with zero-scaled (inert) deltas the path differs from the
        // full multimodal computation: fusion is skipped, not approximated.
        let mut g = Graph::new();
        let b = m.bind(&mut g, false, false);
        let audio_out = m
            .forward_audio_only(&mut g, &b, &audio, 12, None)
            .unwrap();
        let full_out = m
            .forward_full(&mut g, &b, &audio, 12, &video, 8, None)
            .unwrap();
        assert_ne!(
            g.value(audio_out.ctc_log_probs[1]),
            g.value(full_out.ctc_log_probs[1])
        );
        // The audio-only latents carry the joint-path tags only.
        assert!(audio_out.latent(TapTag::VideoBlock1).is_none());
        assert!(audio_out.latent(TapTag::FusionOut).is_some());
    }

    #[test]
    fn trained_adapter_deltas_move_only_the_audio_path() {
        let mut m = Model::build(tiny_config(), 28).unwrap();
        let audio = rand(vec![12, 6], 17, 1.0);
        let video = rand(vec![8, 4], 18, 1.0);
        let dec = [5usize, 3];
        let base_full = run_full(&m, &audio, &video, &dec);
        m.insert_adapters(AdapterConfig::with_rank(2, InsertPart::Encoder), 19)
            .unwrap();
        m.set_adapter_active(true).unwrap();
        let untrained = {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false, false);
            let out = m
                .forward_audio_only(&mut g, &b, &audio, 12, Some(&dec))
                .unwrap();
            g.value(out.ctc_log_probs[1]).clone()
        };
        // Simulate training: push every B factor off zero.
        for i in 0..m.n_adapter_tensors() {
            if m.adapter_tensor_name(i).ends_with(".b") {
                m.adapter_tensor_mut(i)
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = 0.05);
            }
        }
        let trained = {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false, false);
            let out = m
                .forward_audio_only(&mut g, &b, &audio, 12, Some(&dec))
                .unwrap();
            g.value(out.ctc_log_probs[1]).clone()
        };
        assert_ne!(untrained, trained);
        assert_eq!(run_full(&m, &audio, &video, &dec), base_full);
    }

    /// End-to-end gradient check: every parameter of a d_model=8 model
    /// through the combined CTC + attention + distillation objective.
    #[test]
    fn student_objective_gradients_match_finite_differences() {
        let m = Model::build(tiny_config(), 29).unwrap();
        let audio = rand(vec![10, 6], 30, 0.8);
        let video = rand(vec![6, 4], 31, 0.8);
        let labels = [1u16, 2, 1];
        let (dec_in, dec_tgt) = decoder_teacher_io(&labels, m.config().bos_eos());
        let teacher_fusion = rand(vec![10, 8], 32, 0.7);
        let teacher_joint = rand(vec![10, 8], 33, 0.7);

        let inputs: Vec<Tensor> = (0..m.n_params()).map(|i| m.param(i).clone()).collect();
        let model = m.clone();
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let binding = ParamBinding::from_base_nodes(ids);
            let out = model.forward_full(
                g,
                &binding,
                &audio,
                10,
                &video,
                6,
                Some(&dec_in),
            )?;
            let w = LossWeights::default();
            let mt = match multitask_loss(
                g,
                &out.ctc_log_probs,
                &labels,
                out.decoder_logits.unwrap(),
                &dec_tgt,
                &w,
            )? {
                MultitaskOutcome::Feasible(m) => m.total,
                MultitaskOutcome::Infeasible => return Err(Error::contract("infeasible")),
            };
            let t_fusion = g.leaf(teacher_fusion.clone());
            let t_joint = g.leaf(teacher_joint.clone());
            let kd = kd_loss(
                g,
                &[
                    KdPair {
                        tag: TapTag::FusionOut.as_str(),
                        teacher: t_fusion,
                        student: out.latent(TapTag::FusionOut).unwrap(),
                    },
                    KdPair {
                        tag: TapTag::JointOut.as_str(),
                        teacher: t_joint,
                        student: out.latent(TapTag::JointOut).unwrap(),
                    },
                ],
                1.0,
            )?;
            student_loss(g, Some(kd), mt, w.w_kd)
        };
        let settings = CheckSettings {
            probes_per_input: 4,
            ..CheckSettings::default()
        };
        let report = check_gradients(build, &inputs, &settings).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "worst input {} coord {}: analytic {} numeric {} rel {}",
            report.worst_input,
            report.worst_coord,
            report.analytic,
            report.numeric,
            report.max_rel_err
        );
    }
}
