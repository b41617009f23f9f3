//! The bimodal recognizer: audio and video encoder branches, a dual
//! cross-attention fusion stage, a joint encoder with intermediate CTC taps,
//! and an attention decoder, plus low-rank audio-path adapters that switch
//! the network onto an audio-only decision path.
//!
//! Parameters live in a flat named table; the forward pass (see `forward`)
//! binds them into a graph per batch. Checkpoints store every tensor as
//! little-endian f32 under its table name.

use crate::error::{Error, Result};
use crate::format;
use crate::graph::{Graph, NodeId};
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_audio_blocks: usize,
    pub n_video_blocks: usize,
    pub n_fusion_blocks: usize,
    pub n_joint_blocks: usize,
    pub n_decoder_blocks: usize,
    /// CTC output size: blank (id 0) plus the token vocabulary.
    pub vocab_size_with_blank: usize,
    /// Hard cap on any sequence length entering the network.
    pub max_len: usize,
    /// Joint-encoder blocks (1-based) whose outputs feed the shared CTC
    /// head. The final block is always included.
    pub intermediate_ctc_taps: Vec<usize>,
    pub audio_feature_dim: usize,
    pub video_feature_dim: usize,
    /// Ablation switch: cut the audio-to-video cross-attention direction in
    /// the fusion stage.
    pub disable_audio_to_video: bool,
}

impl ModelConfig {
    /// Desk-scale default sized for the synthetic corpus.
    pub fn toy(audio_feature_dim: usize, video_feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_audio_blocks: 2,
            n_video_blocks: 2,
            n_fusion_blocks: 1,
            n_joint_blocks: 2,
            n_decoder_blocks: 2,
            vocab_size_with_blank: vocab_size + 1,
            max_len: 128,
            intermediate_ctc_taps: vec![1, 2],
            audio_feature_dim,
            video_feature_dim,
            disable_audio_to_video: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 {
            return Err(Error::config("d_ffn must be positive"));
        }
        for (name, v) in [
            ("n_audio_blocks", self.n_audio_blocks),
            ("n_video_blocks", self.n_video_blocks),
            ("n_fusion_blocks", self.n_fusion_blocks),
            ("n_joint_blocks", self.n_joint_blocks),
            ("n_decoder_blocks", self.n_decoder_blocks),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size_with_blank < 2 {
            return Err(Error::config("vocabulary needs at least one non-blank token"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        for &t in &self.intermediate_ctc_taps {
            if t == 0 || t > self.n_joint_blocks {
                return Err(Error::config(format!(
                    "ctc tap {} outside joint blocks 1..={}",
                    t, self.n_joint_blocks
                )));
            }
        }
        if self.audio_feature_dim == 0 || self.video_feature_dim == 0 {
            return Err(Error::config("feature dims must be positive"));
        }
        Ok(())
    }

    /// Decoder symbol space: blank + tokens + a shared start/end marker.
    pub fn decoder_vocab(&self) -> usize {
        self.vocab_size_with_blank + 1
    }

    /// Id of the shared start/end decoder symbol.
    pub fn bos_eos(&self) -> usize {
        self.vocab_size_with_blank
    }

    /// Sorted, deduplicated CTC tap blocks, final block always present.
    pub fn effective_ctc_taps(&self) -> Vec<usize> {
        let mut taps = self.intermediate_ctc_taps.clone();
        taps.push(self.n_joint_blocks);
        taps.sort_unstable();
        taps.dedup();
        taps
    }

    /// Joint block (1-based) tapped as the mid-network latent.
    pub fn joint_mid_block(&self) -> usize {
        self.n_joint_blocks.div_ceil(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertPart {
    Encoder,
    EncoderAndDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Low-rank width of the weight delta.
    pub rank: usize,
    /// Which self-attention stacks on the audio path receive deltas.
    pub insert_part: InsertPart,
    /// Multiplier on the delta; conventionally 1/rank.
    pub scaling: f64,
}

impl AdapterConfig {
    pub fn with_rank(rank: usize, insert_part: InsertPart) -> Self {
        AdapterConfig {
            rank,
            insert_part,
            scaling: 1.0 / rank as f64,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= d_model {
            return Err(Error::config(format!(
                "adapter rank {} must satisfy 1 <= rank < d_model ({})",
                self.rank, d_model
            )));
        }
        if !self.scaling.is_finite() || self.scaling < 0.0 {
            return Err(Error::config(format!(
                "adapter scaling {} must be finite and non-negative",
                self.scaling
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub recipe: String,
    pub seed: u64,
    pub parent: Option<String>,
}

impl Provenance {
    pub fn fresh(recipe: &str, seed: u64) -> Self {
        Provenance {
            recipe: recipe.to_string(),
            seed,
            parent: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub l1: Lin,
    pub l2: Lin,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncBlockIdx {
    pub ln_attn: LnIdx,
    pub attn: AttnIdx,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FusionStreamIdx {
    pub ln_sa: LnIdx,
    pub sa: AttnIdx,
    pub ln_ca: LnIdx,
    pub ca: AttnIdx,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FusionBlockIdx {
    pub video: FusionStreamIdx,
    pub audio: FusionStreamIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecBlockIdx {
    pub ln_sa: LnIdx,
    pub sa: AttnIdx,
    pub ln_ca: LnIdx,
    pub ca: AttnIdx,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub audio_frontend: Lin,
    pub video_frontend: Lin,
    pub audio_blocks: Vec<EncBlockIdx>,
    pub video_blocks: Vec<EncBlockIdx>,
    pub fusion_blocks: Vec<FusionBlockIdx>,
    pub fusion_merge: Lin,
    pub joint_blocks: Vec<EncBlockIdx>,
    pub enc_ln: LnIdx,
    pub ctc_head: Lin,
    pub dec_embed: usize,
    pub dec_blocks: Vec<DecBlockIdx>,
    pub dec_ln: LnIdx,
    pub dec_head: Lin,
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    FanIn(usize),
    Zero,
    One,
}

struct TableBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<InitKind>,
}

impl TableBuilder {
    fn new() -> Self {
        TableBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn lin(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Lin {
        let w = self.push(
            format!("{prefix}.w"),
            vec![d_in, d_out],
            InitKind::FanIn(d_in),
        );
        let b = self.push(format!("{prefix}.b"), vec![d_out], InitKind::Zero);
        Lin { w, b }
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        let g = self.push(format!("{prefix}.g"), vec![d], InitKind::One);
        let b = self.push(format!("{prefix}.b"), vec![d], InitKind::Zero);
        LnIdx { g, b }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.lin(&format!("{prefix}.q"), d, d),
            k: self.lin(&format!("{prefix}.k"), d, d),
            v: self.lin(&format!("{prefix}.v"), d, d),
            o: self.lin(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            l1: self.lin(&format!("{prefix}.l1"), d, f),
            l2: self.lin(&format!("{prefix}.l2"), f, d),
        }
    }

    fn enc_block(&mut self, prefix: &str, d: usize, f: usize) -> EncBlockIdx {
        EncBlockIdx {
            ln_attn: self.ln(&format!("{prefix}.ln_attn"), d),
            attn: self.attn(&format!("{prefix}.attn"), d),
            ln_ffn: self.ln(&format!("{prefix}.ln_ffn"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, f),
        }
    }

    fn fusion_stream(&mut self, prefix: &str, d: usize, f: usize) -> FusionStreamIdx {
        FusionStreamIdx {
            ln_sa: self.ln(&format!("{prefix}.ln_sa"), d),
            sa: self.attn(&format!("{prefix}.sa"), d),
            ln_ca: self.ln(&format!("{prefix}.ln_ca"), d),
            ca: self.attn(&format!("{prefix}.ca"), d),
            ln_ffn: self.ln(&format!("{prefix}.ln_ffn"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, f),
        }
    }

    fn dec_block(&mut self, prefix: &str, d: usize, f: usize) -> DecBlockIdx {
        DecBlockIdx {
            ln_sa: self.ln(&format!("{prefix}.ln_sa"), d),
            sa: self.attn(&format!("{prefix}.sa"), d),
            ln_ca: self.ln(&format!("{prefix}.ln_ca"), d),
            ca: self.attn(&format!("{prefix}.ca"), d),
            ln_ffn: self.ln(&format!("{prefix}.ln_ffn"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, f),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, TableBuilder) {
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let mut t = TableBuilder::new();
    let audio_frontend = t.lin("audio_frontend", cfg.audio_feature_dim, d);
    let video_frontend = t.lin("video_frontend", cfg.video_feature_dim, d);
    let audio_blocks = (0..cfg.n_audio_blocks)
        .map(|i| t.enc_block(&format!("audio_block{i}"), d, f))
        .collect();
    let video_blocks = (0..cfg.n_video_blocks)
        .map(|i| t.enc_block(&format!("video_block{i}"), d, f))
        .collect();
    let fusion_blocks = (0..cfg.n_fusion_blocks)
        .map(|i| FusionBlockIdx {
            video: t.fusion_stream(&format!("fusion{i}.video"), d, f),
            audio: t.fusion_stream(&format!("fusion{i}.audio"), d, f),
        })
        .collect();
    let fusion_merge = t.lin("fusion_merge", 2 * d, d);
    let joint_blocks = (0..cfg.n_joint_blocks)
        .map(|i| t.enc_block(&format!("joint_block{i}"), d, f))
        .collect();
    let enc_ln = t.ln("enc_ln", d);
    let ctc_head = t.lin("ctc_head", d, cfg.vocab_size_with_blank);
    let dec_embed = t.push(
        "decoder.embed".to_string(),
        vec![cfg.decoder_vocab(), d],
        InitKind::FanIn(d),
    );
    let dec_blocks = (0..cfg.n_decoder_blocks)
        .map(|i| t.dec_block(&format!("decoder.block{i}"), d, f))
        .collect();
    let dec_ln = t.ln("decoder.ln", d);
    let dec_head = t.lin("decoder.head", d, cfg.decoder_vocab());
    (
        Layout {
            audio_frontend,
            video_frontend,
            audio_blocks,
            video_blocks,
            fusion_blocks,
            fusion_merge,
            joint_blocks,
            enc_ln,
            ctc_head,
            dec_embed,
            dec_blocks,
            dec_ln,
            dec_head,
        },
        t,
    )
}

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

/// One low-rank delta site: the decorated weight plus its A [r x d] and
/// B [d x r] factors in the adapter tensor table.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AdapterSite {
    pub target_w: usize,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Adapters {
    pub config: AdapterConfig,
    pub active: bool,
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
    pub sites: Vec<AdapterSite>,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<Tensor>,
    pub(crate) names: Vec<String>,
    pub(crate) adapters: Option<Adapters>,
}

/// Graph handles for every bound parameter of one model.
pub struct ParamBinding {
    pub(crate) base: Vec<NodeId>,
    pub(crate) adapter: Vec<NodeId>,
}

impl ParamBinding {
    /// Binding assembled from externally created nodes (finite-difference
    /// probes bind parameters themselves); covers base parameters only.
    pub fn from_base_nodes(nodes: &[NodeId]) -> Self {
        ParamBinding {
            base: nodes.to_vec(),
            adapter: Vec::new(),
        }
    }

    /// Externally created nodes for base and adapter tensors alike, in the
    /// model's storage order.
    pub fn from_parts(base: &[NodeId], adapter: &[NodeId]) -> Self {
        ParamBinding {
            base: base.to_vec(),
            adapter: adapter.to_vec(),
        }
    }
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let (layout, table) = build_layout(&config);
        let mut params = Vec::with_capacity(table.names.len());
        for (idx, (shape, init)) in table.shapes.iter().zip(&table.inits).enumerate() {
            let mut t = Tensor::zeros(shape.clone());
            match init {
                InitKind::FanIn(fan_in) => {
                    let bound = 1.0 / (*fan_in as f64).sqrt();
                    let mut rng = Rng::derive(seed, &[tags::INIT, idx as u64]);
                    rng.fill_uniform_sym(t.data_mut(), bound);
                }
                InitKind::Zero => {}
                InitKind::One => t.data_mut().iter_mut().for_each(|x| *x = 1.0),
            }
            params.push(t);
        }
        Ok(Model {
            config,
            layout,
            params,
            names: table.names,
            adapters: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, idx: usize) -> &Tensor {
        &self.params[idx]
    }

    pub fn param_name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub(crate) fn param_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx]
    }

    pub fn adapters_attached(&self) -> bool {
        self.adapters.is_some()
    }

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        self.adapters.as_ref().map(|a| &a.config)
    }

    pub fn adapter_active(&self) -> bool {
        self.adapters.as_ref().map(|a| a.active).unwrap_or(false)
    }

    pub fn n_adapter_tensors(&self) -> usize {
        self.adapters.as_ref().map(|a| a.tensors.len()).unwrap_or(0)
    }

    pub fn adapter_tensor(&self, idx: usize) -> &Tensor {
        &self.adapters.as_ref().expect("adapters attached").tensors[idx]
    }

    pub fn adapter_tensor_name(&self, idx: usize) -> &str {
        &self.adapters.as_ref().expect("adapters attached").names[idx]
    }

    pub(crate) fn adapter_tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.adapters.as_mut().expect("adapters attached").tensors[idx]
    }

    /// Total adapter parameter count: 2 * rank * d_model per decorated
    /// projection.
    pub fn adapter_param_count(&self) -> usize {
        self.adapters
            .as_ref()
            .map(|a| a.tensors.iter().map(|t| t.len()).sum())
            .unwrap_or(0)
    }

    /// Weight-table indices of the self-attention projections on the audio
    /// decision path that adapters decorate.
    fn adapter_target_weights(&self, insert_part: InsertPart) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let attn_ws = |attn: &AttnIdx| [attn.q.w, attn.k.w, attn.v.w, attn.o.w];
        for blk in &self.layout.audio_blocks {
            out.extend(attn_ws(&blk.attn));
        }
        for blk in &self.layout.joint_blocks {
            out.extend(attn_ws(&blk.attn));
        }
        if insert_part == InsertPart::EncoderAndDecoder {
            for blk in &self.layout.dec_blocks {
                out.extend(attn_ws(&blk.sa));
            }
        }
        out.into_iter()
            .map(|w| (self.names[w].clone(), w))
            .collect()
    }

    /// Attach fresh low-rank deltas to the audio-path self-attention
    /// projections. B starts at zero, so the attached model computes
    /// exactly what the base model computed until training moves B.
    pub fn insert_adapters(&mut self, config: AdapterConfig, seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::contract("adapters already attached"));
        }
        config.validate(self.config.d_model)?;
        let d = self.config.d_model;
        let r = config.rank;
        let mut tensors = Vec::new();
        let mut names = Vec::new();
        let mut sites = Vec::new();
        for (i, (name, w)) in self
            .adapter_target_weights(config.insert_part)
            .into_iter()
            .enumerate()
        {
            let mut a = Tensor::zeros(vec![r, d]);
            let mut rng = Rng::derive(seed, &[tags::ADAPTER_INIT, i as u64]);
            rng.fill_uniform_sym(a.data_mut(), 1.0 / (d as f64).sqrt());
            let b = Tensor::zeros(vec![d, r]);
            let a_idx = tensors.len();
            tensors.push(a);
            names.push(format!("adapter.{name}.a"));
            let b_idx = tensors.len();
            tensors.push(b);
            names.push(format!("adapter.{name}.b"));
            sites.push(AdapterSite {
                target_w: w,
                a: a_idx,
                b: b_idx,
            });
        }
        self.adapters = Some(Adapters {
            config,
            active: false,
            tensors,
            names,
            sites,
        });
        Ok(())
    }

    /// Route inference through the audio-only decision path (true) or the
    /// full multimodal path (false). Base tensors are never touched.
    pub fn set_adapter_active(&mut self, active: bool) -> Result<()> {
        match &mut self.adapters {
            Some(a) => {
                a.active = active;
                Ok(())
            }
            None => Err(Error::contract(
                "set_adapter_active: no adapters attached",
            )),
        }
    }

    /// Bind parameters into a graph. Trainable tensors become gradient
    /// targets; frozen ones enter as constants.
    pub fn bind(&self, g: &mut Graph, base_trainable: bool, adapter_trainable: bool) -> ParamBinding {
        let base = self
            .params
            .iter()
            .map(|t| {
                if base_trainable {
                    g.param(t.clone())
                } else {
                    g.leaf(t.clone())
                }
            })
            .collect();
        let adapter = match &self.adapters {
            Some(a) => a
                .tensors
                .iter()
                .map(|t| {
                    if adapter_trainable {
                        g.param(t.clone())
                    } else {
                        g.leaf(t.clone())
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        ParamBinding { base, adapter }
    }

    /// Order-independent content digest over base parameters (used by
    /// freeze audits).
    pub fn base_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.params {
            for &x in t.data() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// FLOP / parameter accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardPath {
    Full,
    AudioOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeqLens {
    pub t_audio: usize,
    pub t_video: usize,
    pub t_targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PathCost {
    pub flops: u64,
    pub params: u64,
}

fn lin_flops(t: usize, d_in: usize, d_out: usize) -> u64 {
    2 * t as u64 * d_in as u64 * d_out as u64
}

/// Scores plus context application; projections are counted separately.
fn attn_core_flops(t_q: usize, t_k: usize, d: usize) -> u64 {
    2 * (2 * t_q as u64 * t_k as u64 * d as u64)
}

impl Model {
    /// Analytic multiply-accumulate count (matmul-class work only: linear
    /// maps, attention scores and context, adapter factors) plus the
    /// parameter count of every tensor the path touches.
    pub fn count_flops_params(&self, path: ForwardPath, lens: &SeqLens) -> PathCost {
        let cfg = &self.config;
        let d = cfg.d_model;
        let f = cfg.d_ffn;
        let (ta, tv, td) = (lens.t_audio, lens.t_video, lens.t_targets);
        let enc_self = |t: usize| 4 * lin_flops(t, d, d) + attn_core_flops(t, t, d);
        let cross = |t_q: usize, t_k: usize| {
            2 * lin_flops(t_q, d, d) + 2 * lin_flops(t_k, d, d) + attn_core_flops(t_q, t_k, d)
        };
        let ffn_flops = |t: usize| lin_flops(t, d, f) + lin_flops(t, f, d);
        let enc_block = |t: usize| enc_self(t) + ffn_flops(t);

        let mut flops = 0u64;
        let mut param_ids: Vec<usize> = Vec::new();
        let take_lin = |ids: &mut Vec<usize>, l: &Lin| ids.extend([l.w, l.b]);
        let take_ln = |ids: &mut Vec<usize>, l: &LnIdx| ids.extend([l.g, l.b]);
        let take_attn = |ids: &mut Vec<usize>, a: &AttnIdx| {
            ids.extend([a.q.w, a.q.b, a.k.w, a.k.b, a.v.w, a.v.b, a.o.w, a.o.b])
        };
        let take_ffn = |ids: &mut Vec<usize>, fx: &FfnIdx| {
            ids.extend([fx.l1.w, fx.l1.b, fx.l2.w, fx.l2.b])
        };
        let take_enc = |ids: &mut Vec<usize>, b: &EncBlockIdx| {
            take_ln(ids, &b.ln_attn);
            take_attn(ids, &b.attn);
            take_ln(ids, &b.ln_ffn);
            take_ffn(ids, &b.ffn);
        };

        // Audio branch.
        flops += lin_flops(ta, cfg.audio_feature_dim, d);
        take_lin(&mut param_ids, &self.layout.audio_frontend);
        for blk in &self.layout.audio_blocks {
            flops += enc_block(ta);
            take_enc(&mut param_ids, blk);
        }

        if path == ForwardPath::Full {
            // Video branch.
            flops += lin_flops(tv, cfg.video_feature_dim, d);
            take_lin(&mut param_ids, &self.layout.video_frontend);
            for blk in &self.layout.video_blocks {
                flops += enc_block(tv);
                take_enc(&mut param_ids, blk);
            }
            // Fusion: per block each stream runs self-attention,
            // cross-attention to the other stream, and a feed-forward.
            for blk in &self.layout.fusion_blocks {
                flops += enc_self(tv) + ffn_flops(tv);
                if !cfg.disable_audio_to_video {
                    flops += cross(tv, ta);
                }
                flops += enc_self(ta) + cross(ta, tv) + ffn_flops(ta);
                for stream in [&blk.video, &blk.audio] {
                    take_ln(&mut param_ids, &stream.ln_sa);
                    take_attn(&mut param_ids, &stream.sa);
                    take_ln(&mut param_ids, &stream.ln_ca);
                    take_attn(&mut param_ids, &stream.ca);
                    take_ln(&mut param_ids, &stream.ln_ffn);
                    take_ffn(&mut param_ids, &stream.ffn);
                }
            }
            flops += lin_flops(ta, 2 * d, d);
            take_lin(&mut param_ids, &self.layout.fusion_merge);
        }

        // Joint encoder and CTC taps.
        for blk in &self.layout.joint_blocks {
            flops += enc_block(ta);
            take_enc(&mut param_ids, blk);
        }
        take_ln(&mut param_ids, &self.layout.enc_ln);
        let n_taps = self.config.effective_ctc_taps().len() as u64;
        flops += n_taps * lin_flops(ta, d, cfg.vocab_size_with_blank);
        take_lin(&mut param_ids, &self.layout.ctc_head);

        // Decoder (embedding lookup is copy-only).
        param_ids.push(self.layout.dec_embed);
        for blk in &self.layout.dec_blocks {
            flops += enc_self(td) + cross(td, ta) + ffn_flops(td);
            take_ln(&mut param_ids, &blk.ln_sa);
            take_attn(&mut param_ids, &blk.sa);
            take_ln(&mut param_ids, &blk.ln_ca);
            take_attn(&mut param_ids, &blk.ca);
            take_ln(&mut param_ids, &blk.ln_ffn);
            take_ffn(&mut param_ids, &blk.ffn);
        }
        take_ln(&mut param_ids, &self.layout.dec_ln);
        flops += lin_flops(td, d, cfg.decoder_vocab());
        take_lin(&mut param_ids, &self.layout.dec_head);

        let mut params: u64 = param_ids.iter().map(|&i| self.params[i].len() as u64).sum();

        // Adapter deltas ride only the audio-only decision path: two extra
        // rank-r factors per decorated projection.
        if path == ForwardPath::AudioOnly {
            if let Some(ad) = &self.adapters {
                let r = ad.config.rank;
                let per_site = |t: usize| lin_flops(t, d, r) + lin_flops(t, r, d);
                for site in &ad.sites {
                    let name = &self.names[site.target_w];
                    let t = if name.starts_with("decoder.") { td } else { ta };
                    flops += per_site(t);
                }
                params += self.adapter_param_count() as u64;
            }
        }

        PathCost { flops, params }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct AdapterManifest {
    config: AdapterConfig,
    active: bool,
}

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    config: ModelConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<AdapterManifest>,
}

/// Write every parameter (and adapter tensor, if attached) as f32.
pub fn save_checkpoint(path: &Path, model: &Model, provenance: &Provenance) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let push = |name: &str, t: &Tensor, blob: &mut Vec<u8>, tensors: &mut Vec<TensorEntry>| {
        let offset = blob.len() as u64;
        let f32s: Vec<f32> = t.data().iter().map(|&x| x as f32).collect();
        format::push_f32s(blob, &f32s);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
        });
    };
    for (name, t) in model.names.iter().zip(&model.params) {
        push(name, t, &mut blob, &mut tensors);
    }
    if let Some(ad) = &model.adapters {
        for (name, t) in ad.names.iter().zip(&ad.tensors) {
            push(name, t, &mut blob, &mut tensors);
        }
    }
    let manifest = CkptManifest {
        config: model.config.clone(),
        provenance: provenance.clone(),
        tensors,
        adapter: model.adapters.as_ref().map(|a| AdapterManifest {
            config: a.config.clone(),
            active: a.active,
        }),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::format(format!("checkpoint manifest encoding: {e}")))?;
    format::write_container(path, format::CHECKPOINT_MAGIC, &manifest_bytes, &blob)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Provenance)> {
    let container = format::read_container(path, format::CHECKPOINT_MAGIC)?;
    let manifest: CkptManifest = serde_json::from_slice(&container.manifest)
        .map_err(|e| Error::format(format!("checkpoint manifest decoding: {e}")))?;
    let mut model = Model::build(manifest.config.clone(), 0)?;
    if let Some(ad) = &manifest.adapter {
        model.insert_adapters(ad.config.clone(), 0)?;
        model.set_adapter_active(ad.active)?;
    }

    let mut by_name: std::collections::HashMap<&str, &TensorEntry> = std::collections::HashMap::new();
    for e in &manifest.tensors {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::format(format!("duplicate tensor '{}'", e.name)));
        }
    }
    let expected: usize =
        model.names.len() + model.adapters.as_ref().map(|a| a.names.len()).unwrap_or(0);
    if manifest.tensors.len() != expected {
        return Err(Error::format(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.tensors.len(),
            expected
        )));
    }

    let fill = |name: &str, dst: &mut Tensor| -> Result<()> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor '{name}'")))?;
        if entry.dtype != "f32" {
            return Err(Error::format(format!(
                "tensor '{name}' has dtype '{}', expected f32",
                entry.dtype
            )));
        }
        if entry.shape != dst.shape() {
            return Err(Error::format(format!(
                "tensor '{name}' has shape {:?}, model expects {:?}",
                entry.shape,
                dst.shape()
            )));
        }
        let vals = format::read_f32s(&container.blob, entry.offset as usize, dst.len())?;
        for (d, v) in dst.data_mut().iter_mut().zip(vals) {
            *d = v as f64;
        }
        Ok(())
    };

    let names = model.names.clone();
    for (i, name) in names.iter().enumerate() {
        fill(name, model.param_mut(i))?;
    }
    if model.adapters_attached() {
        let ad_names: Vec<String> = model.adapters.as_ref().unwrap().names.clone();
        for (i, name) in ad_names.iter().enumerate() {
            fill(name, model.adapter_tensor_mut(i))?;
        }
    }
    Ok((model, manifest.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

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

    #[test]
    fn build_is_deterministic_in_seed() {
        let a = Model::build(tiny_config(), 7).unwrap();
        let b = Model::build(tiny_config(), 7).unwrap();
        let c = Model::build(tiny_config(), 8).unwrap();
        assert_eq!(a.n_params(), b.n_params());
        for i in 0..a.n_params() {
            assert_eq!(a.param(i), b.param(i), "param {} ({})", i, a.param_name(i));
        }
        assert_ne!(a.base_checksum(), c.base_checksum());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_config();
        cfg.d_model = 10;
        cfg.n_heads = 4;
        assert!(Model::build(cfg, 1).is_err());

        let mut cfg = tiny_config();
        cfg.n_fusion_blocks = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.intermediate_ctc_taps = vec![3];
        assert!(cfg.validate().is_err());

        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn adapter_attachment_rules() {
        let mut m = Model::build(tiny_config(), 3).unwrap();
        assert!(m.set_adapter_active(true).is_err());
        assert!(m
            .insert_adapters(AdapterConfig::with_rank(8, InsertPart::Encoder), 5)
            .is_err());

        let cfg = AdapterConfig::with_rank(3, InsertPart::Encoder);
        m.insert_adapters(cfg.clone(), 5).unwrap();
        assert!(m.insert_adapters(cfg, 5).is_err());
        // Audio branch (1 block) + joint (2 blocks), 4 projections each,
        // 2 factors of rank*d_model parameters per projection.
        assert_eq!(m.adapter_param_count(), 3 * 4 * (2 * 3 * 8));
        m.set_adapter_active(true).unwrap();
        assert!(m.adapter_active());

        let mut m2 = Model::build(tiny_config(), 3).unwrap();
        m2.insert_adapters(
            AdapterConfig::with_rank(3, InsertPart::EncoderAndDecoder),
            5,
        )
        .unwrap();
        // One decoder block adds 4 more projections.
        assert_eq!(m2.adapter_param_count(), 4 * 4 * (2 * 3 * 8));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly_at_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = Model::build(tiny_config(), 11).unwrap();
        m.insert_adapters(AdapterConfig::with_rank(2, InsertPart::Encoder), 9)
            .unwrap();
        m.set_adapter_active(true).unwrap();
        let prov = Provenance {
            recipe: "teacher".to_string(),
            seed: 11,
            parent: Some("root".to_string()),
        };
        save_checkpoint(&path, &m, &prov).unwrap();
        let (m2, prov2) = load_checkpoint(&path).unwrap();
        assert_eq!(prov2, prov);
        assert!(m2.adapters_attached());
        assert!(m2.adapter_active());
        assert_eq!(m2.adapter_config().unwrap().rank, 2);

        // Storage is f32; a second save of the loaded model is a fixed
        // point, byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &m2, &prov2).unwrap();
        let (m3, _) = load_checkpoint(&path2).unwrap();
        for i in 0..m2.n_params() {
            assert_eq!(m2.param(i), m3.param(i));
        }
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2, "save(load(x)) must reproduce the file");
    }

    #[test]
    fn checkpoint_mismatches_name_the_offending_tensor() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = Model::build(tiny_config(), 1).unwrap();
        save_checkpoint(&path, &m, &Provenance::fresh("teacher", 1)).unwrap();

        let c = format::read_container(&path, format::CHECKPOINT_MAGIC).unwrap();
        let mut manifest: serde_json::Value = serde_json::from_slice(&c.manifest).unwrap();
        manifest["tensors"][0]["shape"] = serde_json::json!([1, 1]);
        let bad = dir.path().join("bad.ckpt");
        format::write_container(
            &bad,
            format::CHECKPOINT_MAGIC,
            &serde_json::to_vec(&manifest).unwrap(),
            &c.blob,
        )
        .unwrap();
        let err = load_checkpoint(&bad).unwrap_err().to_string();
        assert!(err.contains("audio_frontend.w"), "error was: {err}");

        let mut manifest: serde_json::Value = serde_json::from_slice(&c.manifest).unwrap();
        manifest["tensors"][0]["name"] = serde_json::json!("no_such_tensor");
        let bad2 = dir.path().join("bad2.ckpt");
        format::write_container(
            &bad2,
            format::CHECKPOINT_MAGIC,
            &serde_json::to_vec(&manifest).unwrap(),
            &c.blob,
        )
        .unwrap();
        let err = load_checkpoint(&bad2).unwrap_err().to_string();
        assert!(err.contains("audio_frontend.w"), "error was: {err}");
    }

    #[test]
    fn flops_match_per_layer_hand_count() {
        // Default desk-scale shape: d=64, ffn=128, 4 heads, audio dim 16,
        // video dim 12, vocab 12 (+blank = 13, decoder space 14), blocks
        // 2/2/1/2/2, CTC taps {1, 2}.
        let m = Model::build(ModelConfig::toy(16, 12, 12), 1).unwrap();
        let lens = SeqLens {
            t_audio: 32,
            t_video: 16,
            t_targets: 9,
        };
        let full = m.count_flops_params(ForwardPath::Full, &lens);
        let audio = m.count_flops_params(ForwardPath::AudioOnly, &lens);

        // Hand enumeration (multiply-accumulate counts, 2 flops per MAC):
        //   audio frontend  2*32*16*64                          =     65,536
        //   encoder block(t) = 8*t*64*64 + 4*t*t*64 + 4*t*64*128
        //     audio blocks   2 * (2,097,152 + 262,144 + wait)   headroom below
        // Per-block at t=32: proj 8*32*4096 = 1,048,576;
        //   core 4*32*32*64 = 262,144; ffn 4*32*64*128 = 1,048,576
        //   -> 2,359,296; two audio blocks -> 4,718,592.
        // Video frontend 2*16*12*64 = 24,576; per-block at t=16:
        //   proj 524,288 + core 65,536 + ffn 524,288 = 1,114,112;
        //   two video blocks -> 2,228,224.
        // Fusion video stream: self 589,824 + cross(16<-32) 917,504
        //   + ffn 524,288 = 2,031,616.
        // Fusion audio stream: self 1,310,720 + cross(32<-16) 917,504
        //   + ffn 1,048,576 = 3,276,800.
        // Merge 2*32*128*64 = 524,288.
        // Joint blocks: 2 * 2,359,296 = 4,718,592.
        // CTC head: 2 taps * 2*32*64*13 = 106,496.
        // Decoder block at t=9: self 315,648 + cross(9<-32) 745,472
        //   + ffn 294,912 = 1,356,032; two blocks -> 2,712,064.
        // Decoder head: 2*9*64*14 = 16,128.
        assert_eq!(full.flops, 20_422_912);
        assert_eq!(audio.flops, 12_337_408);

        // Parameters: frontends 1,088 + 832; six encoder blocks (audio,
        // video, joint) at 33,472; fusion streams 2 * 50,240; merge 8,256;
        // enc LN 128; CTC head 845; decoder embed 896; decoder blocks
        // 2 * 50,240; decoder LN 128; decoder head 910.
        assert_eq!(full.params, 414_875);
        assert_eq!(audio.params, 238_363);
    }

    #[test]
    fn flops_monotone_in_length_and_width_and_path() {
        let m = Model::build(ModelConfig::toy(16, 12, 12), 1).unwrap();
        let lens = SeqLens {
            t_audio: 32,
            t_video: 16,
            t_targets: 9,
        };
        let longer = SeqLens {
            t_audio: 40,
            ..lens
        };
        let full = m.count_flops_params(ForwardPath::Full, &lens);
        let audio = m.count_flops_params(ForwardPath::AudioOnly, &lens);
        assert!(audio.flops < full.flops);
        assert!(audio.params < full.params);
        assert!(
            m.count_flops_params(ForwardPath::Full, &longer).flops > full.flops
        );
        assert!(
            m.count_flops_params(ForwardPath::AudioOnly, &longer).flops > audio.flops
        );

        let mut wide_cfg = ModelConfig::toy(16, 12, 12);
        wide_cfg.d_model = 96;
        let wide = Model::build(wide_cfg, 1).unwrap();
        assert!(
            wide.count_flops_params(ForwardPath::Full, &lens).flops > full.flops
        );

        // Attached adapters add their factor flops to the audio path only.
        let mut with_ad = Model::build(ModelConfig::toy(16, 12, 12), 1).unwrap();
        with_ad
            .insert_adapters(AdapterConfig::with_rank(8, InsertPart::Encoder), 2)
            .unwrap();
        let ad_audio = with_ad.count_flops_params(ForwardPath::AudioOnly, &lens);
        let ad_full = with_ad.count_flops_params(ForwardPath::Full, &lens);
        assert_eq!(ad_full.flops, full.flops);
        // 16 decorated projections, 2*32*64*8 + 2*32*8*64 each.
        assert_eq!(ad_audio.flops, audio.flops + 16 * (2 * 32 * 64 * 8 * 2));
        assert_eq!(
            ad_audio.params,
            audio.params + with_ad.adapter_param_count() as u64
        );
        assert!(ad_audio.flops < ad_full.flops);
    }
}
