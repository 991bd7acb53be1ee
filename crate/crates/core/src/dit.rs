//! Toy MoE DiT block with dual-path conditioning: a unified text+tag
//! condition sequence with type embeddings feeds cross-attention, while the
//! global tag vector fused with the timestep embedding drives per-sub-layer
//! AdaLN scale/shift. The feed-forward is a two-expert mixture routed by
//! noise level.

use std::sync::Arc;

use thiserror::Error;

use crate::guidance::ConditionMode;
use crate::numerics::{Graph, NodeId, NumericsError, ParamMap, SeededRng, Tensor};
use crate::tag_encoder::{TagEncoder, TagEncoderError, TagEncoderNodes, INIT_STD};
use crate::taxonomy::ProductionSpec;

#[derive(Debug, Error)]
pub enum DitError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    TagEncoder(#[from] TagEncoderError),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Noise-window boundary between the two feed-forward experts.
pub const EXPERT_BOUNDARY: f64 = 0.9;

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

/// Sinusoidal features of the diffusion time followed by a trainable linear
/// map. The time in [0, 1] is scaled by 1000 before the standard
/// interleaved sin/cos features.
#[derive(Clone, Debug)]
pub struct TimestepEmbedder {
    /// `[d_sin x d]`.
    pub w: Tensor,
    d_sin: usize,
}

impl TimestepEmbedder {
    pub const TIME_SCALE: f64 = 1000.0;

    pub fn new(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            w: Tensor::randn(vec![d, d], INIT_STD, rng),
            d_sin: d,
        }
    }

    /// Deterministic sinusoidal features `[1 x d_sin]`.
    pub fn features(&self, t: f64) -> Tensor {
        let pos = t * Self::TIME_SCALE;
        let half = self.d_sin / 2;
        let mut data = vec![0.0; self.d_sin];
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
            data[2 * i] = (pos * freq).sin();
            data[2 * i + 1] = (pos * freq).cos();
        }
        Tensor::row(data)
    }

    pub fn embed(&self, t: f64) -> Tensor {
        self.features(t).matmul(&self.w).expect("shapes fixed")
    }
}

// ---------------------------------------------------------------------------
// Text channel
// ---------------------------------------------------------------------------

/// Pluggable directive-text embedder producing `[L x d_text]`.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Tensor;
    fn width(&self) -> usize;
}

/// Deterministic stand-in for the frozen production text encoder: each
/// token hashes to a fixed pseudo-random vector.
#[derive(Clone, Debug)]
pub struct HashTextEmbedder {
    pub d_text: usize,
    pub max_tokens: usize,
}

impl HashTextEmbedder {
    pub fn new(d_text: usize, max_tokens: usize) -> Self {
        Self { d_text, max_tokens }
    }

    fn token_hash(token: &str) -> u64 {
        // FNV-1a, stable across platforms.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

impl TextEmbedder for HashTextEmbedder {
    fn embed(&self, text: &str) -> Tensor {
        let tokens: Vec<String> = text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .take(self.max_tokens)
            .collect();
        let mut rows = Vec::with_capacity(tokens.len());
        for tok in &tokens {
            let mut rng = SeededRng::new(Self::token_hash(tok));
            rows.push((0..self.d_text).map(|_| rng.normal()).collect::<Vec<f64>>());
        }
        if rows.is_empty() {
            Tensor::zeros(vec![0, self.d_text])
        } else {
            Tensor::from_rows(&rows).expect("uniform rows")
        }
    }

    fn width(&self) -> usize {
        self.d_text
    }
}

// ---------------------------------------------------------------------------
// Conditioning channels and bundle
// ---------------------------------------------------------------------------

/// Origin of each token in the condition sequence.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Text,
    Tag,
    NullText,
    NullTag,
}

/// Everything needed to assemble condition sequences: the trainable tag
/// encoder, the frozen text embedder with its projection, type embeddings,
/// null embeddings, and the timestep embedder.
#[derive(Clone)]
pub struct ConditioningChannels {
    pub d: usize,
    pub tag_encoder: TagEncoder,
    pub text_embedder: Arc<dyn TextEmbedder>,
    /// `[d_text x d]` learned projection into the conditioning space.
    pub w_proj: Tensor,
    pub tau_text: Tensor,
    pub tau_tag: Tensor,
    pub null_text: Tensor,
    pub null_tag_seq: Tensor,
    pub null_tag_global: Tensor,
    pub timestep: TimestepEmbedder,
}

impl ConditioningChannels {
    pub fn new(
        tag_encoder: TagEncoder,
        text_embedder: Arc<dyn TextEmbedder>,
        rng: &mut SeededRng,
    ) -> Self {
        let d = tag_encoder.d;
        let d_text = text_embedder.width();
        Self {
            d,
            tag_encoder,
            text_embedder,
            w_proj: Tensor::randn(vec![d_text, d], INIT_STD, rng),
            tau_text: Tensor::randn(vec![1, d], INIT_STD, rng),
            tau_tag: Tensor::randn(vec![1, d], INIT_STD, rng),
            null_text: Tensor::randn(vec![1, d], INIT_STD, rng),
            null_tag_seq: Tensor::randn(vec![1, d], INIT_STD, rng),
            null_tag_global: Tensor::randn(vec![1, d], INIT_STD, rng),
            timestep: TimestepEmbedder::new(d, rng),
        }
    }
}

impl ParamMap for ConditioningChannels {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.tag_encoder.visit(f);
        f("channels.w_proj", &self.w_proj);
        f("channels.tau_text", &self.tau_text);
        f("channels.tau_tag", &self.tau_tag);
        f("channels.null_text", &self.null_text);
        f("channels.null_tag_seq", &self.null_tag_seq);
        f("channels.null_tag_global", &self.null_tag_global);
        f("channels.timestep_w", &self.timestep.w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.tag_encoder.visit_mut(f);
        f("channels.w_proj", &mut self.w_proj);
        f("channels.tau_text", &mut self.tau_text);
        f("channels.tau_tag", &mut self.tau_tag);
        f("channels.null_text", &mut self.null_text);
        f("channels.null_tag_seq", &mut self.null_tag_seq);
        f("channels.null_tag_global", &mut self.null_tag_global);
        f("channels.timestep_w", &mut self.timestep.w);
    }
}

/// Graph handles for the channel parameters, in `ParamMap` order.
pub struct ChannelNodes {
    pub tag: TagEncoderNodes,
    pub w_proj: NodeId,
    pub tau_text: NodeId,
    pub tau_tag: NodeId,
    pub null_text: NodeId,
    pub null_tag_seq: NodeId,
    pub null_tag_global: NodeId,
    pub timestep_w: NodeId,
}

impl ChannelNodes {
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = self.tag.flat();
        out.extend([
            self.w_proj,
            self.tau_text,
            self.tau_tag,
            self.null_text,
            self.null_tag_seq,
            self.null_tag_global,
            self.timestep_w,
        ]);
        out
    }
}

impl ConditioningChannels {
    pub fn leaves(&self, g: &mut Graph) -> ChannelNodes {
        ChannelNodes {
            tag: self.tag_encoder.leaves(g),
            w_proj: g.leaf(self.w_proj.clone()),
            tau_text: g.leaf(self.tau_text.clone()),
            tau_tag: g.leaf(self.tau_tag.clone()),
            null_text: g.leaf(self.null_text.clone()),
            null_tag_seq: g.leaf(self.null_tag_seq.clone()),
            null_tag_global: g.leaf(self.null_tag_global.clone()),
            timestep_w: g.leaf(self.timestep.w.clone()),
        }
    }
}

/// Assembled condition sequence plus the AdaLN inputs, as graph nodes.
pub struct BundleNodes {
    pub h_cond: NodeId,
    pub h_tag_global: NodeId,
    pub t_emb: NodeId,
    pub sources: Vec<TokenSource>,
    pub noise_level: f64,
    pub mode: ConditionMode,
}

/// Assembled condition sequence (`[(L+k) x d]` with type embeddings), the
/// global tag vector, the timestep embedding, per-token source masks, and
/// the noise level that routes the feed-forward expert.
#[derive(Clone, Debug)]
pub struct ConditioningBundle {
    pub h_cond: Tensor,
    pub h_tag_global: Tensor,
    pub t_emb: Tensor,
    pub sources: Vec<TokenSource>,
    pub noise_level: f64,
    pub mode: ConditionMode,
}

impl ConditioningBundle {
    pub fn text_token_count(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| matches!(s, TokenSource::Text | TokenSource::NullText))
            .count()
    }

    pub fn tag_token_count(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| matches!(s, TokenSource::Tag | TokenSource::NullTag))
            .count()
    }
}

/// Build the condition bundle on a graph. A missing or empty channel is
/// replaced by its learned null embedding; type embeddings are added to all
/// tokens of each channel before concatenation.
pub fn bundle_graph(
    channels: &ConditioningChannels,
    g: &mut Graph,
    nodes: &ChannelNodes,
    text: Option<&str>,
    spec: Option<&ProductionSpec>,
    noise_level: f64,
) -> Result<BundleNodes, DitError> {
    let mut sources = Vec::new();

    // Text side: project then offset by the text type embedding.
    let text_tokens = text.map(|t| channels.text_embedder.embed(t));
    let text_part = match &text_tokens {
        Some(tokens) if tokens.rows() > 0 => {
            let raw = g.constant(tokens.clone());
            let projected = g.matmul(raw, nodes.w_proj)?;
            sources.extend(std::iter::repeat(TokenSource::Text).take(tokens.rows()));
            g.add_row(projected, nodes.tau_text)?
        }
        _ => {
            sources.push(TokenSource::NullText);
            g.add_row(nodes.null_text, nodes.tau_text)?
        }
    };
    let text_is_null = matches!(sources.last(), Some(TokenSource::NullText));

    // Tag side: encode, then offset by the tag type embedding. An empty
    // spec degenerates to the null tag channel.
    let tag_active = spec.map(|s| !s.is_empty()).unwrap_or(false);
    let (tag_part, h_tag_global) = if tag_active {
        let spec = spec.expect("checked above");
        let (h_seq, h_global) = channels.tag_encoder.encode_graph(g, &nodes.tag, spec.tags())?;
        sources.extend(std::iter::repeat(TokenSource::Tag).take(spec.len()));
        (g.add_row(h_seq, nodes.tau_tag)?, h_global)
    } else {
        sources.push(TokenSource::NullTag);
        (
            g.add_row(nodes.null_tag_seq, nodes.tau_tag)?,
            nodes.null_tag_global,
        )
    };

    let h_cond = g.concat_rows(&[text_part, tag_part])?;

    let feats = g.constant(channels.timestep.features(noise_level));
    let t_emb = g.matmul(feats, nodes.timestep_w)?;

    let mode = match (text_is_null, !tag_active) {
        (false, false) => ConditionMode::Hybrid,
        (true, false) => ConditionMode::TagOnly,
        (false, true) => ConditionMode::TextOnly,
        (true, true) => ConditionMode::Unconditional,
    };

    Ok(BundleNodes {
        h_cond,
        h_tag_global,
        t_emb,
        sources,
        noise_level,
        mode,
    })
}

/// Assemble a condition bundle as plain tensors.
pub fn build_condition(
    channels: &ConditioningChannels,
    text: Option<&str>,
    spec: Option<&ProductionSpec>,
    noise_level: f64,
) -> Result<ConditioningBundle, DitError> {
    let mut g = Graph::new();
    let nodes = channels.leaves(&mut g);
    let b = bundle_graph(channels, &mut g, &nodes, text, spec, noise_level)?;
    Ok(ConditioningBundle {
        h_cond: g.value(b.h_cond).clone(),
        h_tag_global: g.value(b.h_tag_global).clone(),
        t_emb: g.value(b.t_emb).clone(),
        sources: b.sources,
        noise_level,
        mode: b.mode,
    })
}

// ---------------------------------------------------------------------------
// AdaLN and the block
// ---------------------------------------------------------------------------

/// Fuse the timestep embedding and the global tag vector:
/// c = SiLU(t_emb W_t + h_global W_g).
pub fn fuse_condition(
    t_emb: &Tensor,
    h_tag_global: &Tensor,
    w_t: &Tensor,
    w_g: &Tensor,
) -> Result<Tensor, NumericsError> {
    Ok(crate::numerics::silu(
        &t_emb.matmul(w_t)?.add(&h_tag_global.matmul(w_g)?)?,
    ))
}

/// Per-sub-layer modulation projections. W_beta is zero-initialized and
/// W_gamma enters through the residual "+1", so a fresh block modulates at
/// exactly (gamma, beta) = (1, 0).
#[derive(Clone, Debug)]
pub struct AdalnPair {
    pub w_gamma: Tensor,
    pub w_beta: Tensor,
}

impl AdalnPair {
    fn zeros(d: usize) -> Self {
        Self {
            w_gamma: Tensor::zeros(vec![d, d]),
            w_beta: Tensor::zeros(vec![d, d]),
        }
    }
}

/// gamma = c W_gamma + 1, beta = c W_beta.
pub fn adaln_params(c: &Tensor, pair: &AdalnPair) -> Result<(Tensor, Tensor), NumericsError> {
    let gamma = c.matmul(&pair.w_gamma)?.map(|x| x + 1.0);
    let beta = c.matmul(&pair.w_beta)?;
    Ok((gamma, beta))
}

/// gamma ⊙ LayerNorm(x) + beta, broadcasting the `[1 x d]` scale/shift over
/// rows.
pub fn modulate(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, NumericsError> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(NumericsError::Shape {
            op: "modulate",
            detail: format!(
                "scale/shift length {}/{} does not match feature dim {d}",
                gamma.len(),
                beta.len()
            ),
        });
    }
    let normed = crate::numerics::layer_norm(x);
    let mut data = normed.data().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        *v = gamma.data()[i % d] * *v + beta.data()[i % d];
    }
    Ok(Tensor::new(x.shape().to_vec(), data).expect("shape preserved"))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    HighNoise,
    LowNoise,
}

/// Hard routing by noise level; the boundary belongs to the high-noise
/// expert (window [boundary, 1.0]).
pub fn route_expert(noise_level: f64, boundary: f64) -> ExpertKind {
    if noise_level >= boundary {
        ExpertKind::HighNoise
    } else {
        ExpertKind::LowNoise
    }
}

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttnParams {
    fn new(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            wq: Tensor::randn(vec![d, d], INIT_STD, rng),
            wk: Tensor::randn(vec![d, d], INIT_STD, rng),
            wv: Tensor::randn(vec![d, d], INIT_STD, rng),
            // Zero output projection: a fresh block is exactly the identity.
            wo: Tensor::zeros(vec![d, d]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpertFfn {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl ExpertFfn {
    fn new(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            w1: Tensor::randn(vec![d, d * 4], INIT_STD, rng),
            w2: Tensor::zeros(vec![d * 4, d]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DitBlockParams {
    pub w_t: Tensor,
    pub w_g: Tensor,
    pub adaln_sa: AdalnPair,
    pub adaln_ca: AdalnPair,
    pub adaln_ffn: AdalnPair,
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub expert_high: ExpertFfn,
    pub expert_low: ExpertFfn,
    pub boundary: f64,
}

impl DitBlockParams {
    pub fn new(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            w_t: Tensor::randn(vec![d, d], INIT_STD, rng),
            w_g: Tensor::randn(vec![d, d], INIT_STD, rng),
            adaln_sa: AdalnPair::zeros(d),
            adaln_ca: AdalnPair::zeros(d),
            adaln_ffn: AdalnPair::zeros(d),
            self_attn: AttnParams::new(d, rng),
            cross_attn: AttnParams::new(d, rng),
            expert_high: ExpertFfn::new(d, rng),
            expert_low: ExpertFfn::new(d, rng),
            boundary: EXPERT_BOUNDARY,
        }
    }

    pub fn width(&self) -> usize {
        self.w_t.shape()[0]
    }
}

impl ParamMap for DitBlockParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("block.w_t", &self.w_t);
        f("block.w_g", &self.w_g);
        for (s, pair) in [
            ("sa", &self.adaln_sa),
            ("ca", &self.adaln_ca),
            ("ffn", &self.adaln_ffn),
        ] {
            f(&format!("block.adaln_{s}.w_gamma"), &pair.w_gamma);
            f(&format!("block.adaln_{s}.w_beta"), &pair.w_beta);
        }
        for (s, attn) in [("self", &self.self_attn), ("cross", &self.cross_attn)] {
            f(&format!("block.{s}_attn.wq"), &attn.wq);
            f(&format!("block.{s}_attn.wk"), &attn.wk);
            f(&format!("block.{s}_attn.wv"), &attn.wv);
            f(&format!("block.{s}_attn.wo"), &attn.wo);
        }
        for (s, ffn) in [("high", &self.expert_high), ("low", &self.expert_low)] {
            f(&format!("block.expert_{s}.w1"), &ffn.w1);
            f(&format!("block.expert_{s}.w2"), &ffn.w2);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("block.w_t", &mut self.w_t);
        f("block.w_g", &mut self.w_g);
        for (s, pair) in [
            ("sa", &mut self.adaln_sa),
            ("ca", &mut self.adaln_ca),
            ("ffn", &mut self.adaln_ffn),
        ] {
            f(&format!("block.adaln_{s}.w_gamma"), &mut pair.w_gamma);
            f(&format!("block.adaln_{s}.w_beta"), &mut pair.w_beta);
        }
        for (s, attn) in [
            ("self", &mut self.self_attn),
            ("cross", &mut self.cross_attn),
        ] {
            f(&format!("block.{s}_attn.wq"), &mut attn.wq);
            f(&format!("block.{s}_attn.wk"), &mut attn.wk);
            f(&format!("block.{s}_attn.wv"), &mut attn.wv);
            f(&format!("block.{s}_attn.wo"), &mut attn.wo);
        }
        for (s, ffn) in [
            ("high", &mut self.expert_high),
            ("low", &mut self.expert_low),
        ] {
            f(&format!("block.expert_{s}.w1"), &mut ffn.w1);
            f(&format!("block.expert_{s}.w2"), &mut ffn.w2);
        }
    }
}

pub struct AdalnNodes {
    pub w_gamma: NodeId,
    pub w_beta: NodeId,
}

pub struct AttnNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

pub struct FfnNodes {
    pub w1: NodeId,
    pub w2: NodeId,
}

pub struct BlockNodes {
    pub w_t: NodeId,
    pub w_g: NodeId,
    pub adaln_sa: AdalnNodes,
    pub adaln_ca: AdalnNodes,
    pub adaln_ffn: AdalnNodes,
    pub self_attn: AttnNodes,
    pub cross_attn: AttnNodes,
    pub expert_high: FfnNodes,
    pub expert_low: FfnNodes,
}

impl BlockNodes {
    pub fn flat(&self) -> Vec<NodeId> {
        vec![
            self.w_t,
            self.w_g,
            self.adaln_sa.w_gamma,
            self.adaln_sa.w_beta,
            self.adaln_ca.w_gamma,
            self.adaln_ca.w_beta,
            self.adaln_ffn.w_gamma,
            self.adaln_ffn.w_beta,
            self.self_attn.wq,
            self.self_attn.wk,
            self.self_attn.wv,
            self.self_attn.wo,
            self.cross_attn.wq,
            self.cross_attn.wk,
            self.cross_attn.wv,
            self.cross_attn.wo,
            self.expert_high.w1,
            self.expert_high.w2,
            self.expert_low.w1,
            self.expert_low.w2,
        ]
    }
}

/// The toy DiT block.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub params: DitBlockParams,
}

impl DitBlock {
    pub fn new(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            params: DitBlockParams::new(d, rng),
        }
    }

    pub fn leaves(&self, g: &mut Graph) -> BlockNodes {
        let p = &self.params;
        BlockNodes {
            w_t: g.leaf(p.w_t.clone()),
            w_g: g.leaf(p.w_g.clone()),
            adaln_sa: AdalnNodes {
                w_gamma: g.leaf(p.adaln_sa.w_gamma.clone()),
                w_beta: g.leaf(p.adaln_sa.w_beta.clone()),
            },
            adaln_ca: AdalnNodes {
                w_gamma: g.leaf(p.adaln_ca.w_gamma.clone()),
                w_beta: g.leaf(p.adaln_ca.w_beta.clone()),
            },
            adaln_ffn: AdalnNodes {
                w_gamma: g.leaf(p.adaln_ffn.w_gamma.clone()),
                w_beta: g.leaf(p.adaln_ffn.w_beta.clone()),
            },
            self_attn: AttnNodes {
                wq: g.leaf(p.self_attn.wq.clone()),
                wk: g.leaf(p.self_attn.wk.clone()),
                wv: g.leaf(p.self_attn.wv.clone()),
                wo: g.leaf(p.self_attn.wo.clone()),
            },
            cross_attn: AttnNodes {
                wq: g.leaf(p.cross_attn.wq.clone()),
                wk: g.leaf(p.cross_attn.wk.clone()),
                wv: g.leaf(p.cross_attn.wv.clone()),
                wo: g.leaf(p.cross_attn.wo.clone()),
            },
            expert_high: FfnNodes {
                w1: g.leaf(p.expert_high.w1.clone()),
                w2: g.leaf(p.expert_high.w2.clone()),
            },
            expert_low: FfnNodes {
                w1: g.leaf(p.expert_low.w1.clone()),
                w2: g.leaf(p.expert_low.w2.clone()),
            },
        }
    }

    fn adaln_graph(
        g: &mut Graph,
        c: NodeId,
        pair: &AdalnNodes,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let gamma_raw = g.matmul(c, pair.w_gamma)?;
        let gamma = g.add_scalar(gamma_raw, 1.0);
        let beta = g.matmul(c, pair.w_beta)?;
        Ok((gamma, beta))
    }

    fn modulate_graph(
        g: &mut Graph,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let normed = g.layer_norm(x);
        let scaled = g.mul_row(normed, gamma)?;
        g.add_row(scaled, beta)
    }

    fn attention_graph(
        g: &mut Graph,
        d: usize,
        queries: NodeId,
        keys_values: NodeId,
        attn: &AttnNodes,
    ) -> Result<NodeId, NumericsError> {
        let q = g.matmul(queries, attn.wq)?;
        let k = g.matmul(keys_values, attn.wk)?;
        let v = g.matmul(keys_values, attn.wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
        let probs = g.softmax_rows(scaled);
        let ctx = g.matmul(probs, v)?;
        g.matmul(ctx, attn.wo)
    }

    /// Full block computation on a graph: modulated self-attention, modulated
    /// cross-attention over the condition sequence, and a modulated expert
    /// feed-forward, each with a residual connection.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        nodes: &BlockNodes,
        x: NodeId,
        bundle: &BundleNodes,
    ) -> Result<NodeId, NumericsError> {
        let d = self.params.width();
        let t_proj = g.matmul(bundle.t_emb, nodes.w_t)?;
        let g_proj = g.matmul(bundle.h_tag_global, nodes.w_g)?;
        let fused = g.add(t_proj, g_proj)?;
        let c = g.silu(fused);

        let (gamma_sa, beta_sa) = Self::adaln_graph(g, c, &nodes.adaln_sa)?;
        let x_hat = Self::modulate_graph(g, x, gamma_sa, beta_sa)?;
        let sa_out = Self::attention_graph(g, d, x_hat, x_hat, &nodes.self_attn)?;
        let x1 = g.add(x, sa_out)?;

        let (gamma_ca, beta_ca) = Self::adaln_graph(g, c, &nodes.adaln_ca)?;
        let x1_hat = Self::modulate_graph(g, x1, gamma_ca, beta_ca)?;
        let ca_out = Self::attention_graph(g, d, x1_hat, bundle.h_cond, &nodes.cross_attn)?;
        let x2 = g.add(x1, ca_out)?;

        let (gamma_ffn, beta_ffn) = Self::adaln_graph(g, c, &nodes.adaln_ffn)?;
        let x2_hat = Self::modulate_graph(g, x2, gamma_ffn, beta_ffn)?;
        let expert = match route_expert(bundle.noise_level, self.params.boundary) {
            ExpertKind::HighNoise => &nodes.expert_high,
            ExpertKind::LowNoise => &nodes.expert_low,
        };
        let hidden = g.matmul(x2_hat, expert.w1)?;
        let act = g.silu(hidden);
        let ffn_out = g.matmul(act, expert.w2)?;
        g.add(x2, ffn_out)
    }

    /// Plain-tensor forward pass.
    pub fn forward(&self, x: &Tensor, bundle: &ConditioningBundle) -> Result<Tensor, DitError> {
        let mut g = Graph::new();
        let nodes = self.leaves(&mut g);
        let b = BundleNodes {
            h_cond: g.constant(bundle.h_cond.clone()),
            h_tag_global: g.constant(bundle.h_tag_global.clone()),
            t_emb: g.constant(bundle.t_emb.clone()),
            sources: bundle.sources.clone(),
            noise_level: bundle.noise_level,
            mode: bundle.mode,
        };
        let x_id = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &nodes, x_id, &b)?;
        Ok(g.value(out).clone())
    }
}

// ---------------------------------------------------------------------------
// Latent video and I2V concatenation
// ---------------------------------------------------------------------------

/// Latent clip `[t' x h x w x c]`, flattened to a token sequence for
/// attention. In the toy setup the channel count equals the model width.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<Self, DitError> {
        if tensor.shape().len() != 4 {
            return Err(DitError::Invalid(format!(
                "latent video must be rank 4, got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor })
    }

    /// Construct from a raw frame count; frames compress temporally by 4x.
    pub fn from_frame_count(
        frames: usize,
        h: usize,
        w: usize,
        c: usize,
        fill: f64,
    ) -> Result<Self, DitError> {
        if frames % 4 != 0 {
            return Err(DitError::Invalid(format!(
                "frame count {frames} is not divisible by 4"
            )));
        }
        Ok(Self {
            tensor: Tensor::filled(vec![frames / 4, h, w, c], fill),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn compressed_frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// Flatten to `[t'*h*w x c]` tokens.
    pub fn to_tokens(&self) -> Tensor {
        let s = self.tensor.shape();
        self.tensor
            .reshape(vec![s[0] * s[1] * s[2], s[3]])
            .expect("element count preserved")
    }

    pub fn from_tokens(tokens: &Tensor, t: usize, h: usize, w: usize) -> Result<Self, DitError> {
        let c = tokens.cols();
        Ok(Self {
            tensor: tokens.reshape(vec![t, h, w, c]).map_err(DitError::Numerics)?,
        })
    }
}

/// Concatenate a reference-frame latent `[1 x h x w x c]` with a noisy
/// latent `[t' x h x w x c]` along the temporal axis.
pub fn i2v_concat(z_ref: &Tensor, z_t: &Tensor) -> Result<Tensor, DitError> {
    if z_ref.shape().len() != 4 || z_ref.shape()[0] != 1 {
        return Err(DitError::Invalid(format!(
            "reference latent must be [1 x h x w x c], got {:?}",
            z_ref.shape()
        )));
    }
    Tensor::concat_rows(&[z_ref, z_t]).map_err(DitError::Numerics)
}

// ---------------------------------------------------------------------------
// The composed toy denoiser
// ---------------------------------------------------------------------------

/// Tag encoder + conditioning channels + one DiT block, predicting the clean
/// latent from a noisy one. The single-pass prediction is read directly from
/// the block output (latent channels equal the model width in the toy).
#[derive(Clone)]
pub struct ToyDenoiser {
    pub channels: ConditioningChannels,
    pub block: DitBlock,
}

pub struct DenoiserNodes {
    pub channels: ChannelNodes,
    pub block: BlockNodes,
}

impl DenoiserNodes {
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = self.channels.flat();
        out.extend(self.block.flat());
        out
    }
}

impl ToyDenoiser {
    pub fn new(vocab: &crate::taxonomy::Vocabulary, d: usize, d_text: usize, rng: &mut SeededRng) -> Self {
        let tag_encoder = TagEncoder::new(vocab, d, rng);
        let embedder: Arc<dyn TextEmbedder> = Arc::new(HashTextEmbedder::new(d_text, 64));
        let channels = ConditioningChannels::new(tag_encoder, embedder, rng);
        let block = DitBlock::new(d, rng);
        Self { channels, block }
    }

    pub fn width(&self) -> usize {
        self.channels.d
    }

    pub fn leaves(&self, g: &mut Graph) -> DenoiserNodes {
        DenoiserNodes {
            channels: self.channels.leaves(g),
            block: self.block.leaves(g),
        }
    }

    /// Graph forward: build the bundle and run the block.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        nodes: &DenoiserNodes,
        x_t: &Tensor,
        text: Option<&str>,
        spec: Option<&ProductionSpec>,
        noise_level: f64,
    ) -> Result<NodeId, DitError> {
        let bundle = bundle_graph(&self.channels, g, &nodes.channels, text, spec, noise_level)?;
        let x = g.constant(x_t.clone());
        Ok(self.block.forward_graph(g, &nodes.block, x, &bundle)?)
    }

    /// Predict the clean latent from a noisy one.
    pub fn predict_x0(
        &self,
        x_t: &Tensor,
        text: Option<&str>,
        spec: Option<&ProductionSpec>,
        noise_level: f64,
    ) -> Result<Tensor, DitError> {
        let mut g = Graph::new();
        let nodes = self.leaves(&mut g);
        let out = self.forward_graph(&mut g, &nodes, x_t, text, spec, noise_level)?;
        Ok(g.value(out).clone())
    }
}

impl ParamMap for ToyDenoiser {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.channels.visit(f);
        self.block.params.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.channels.visit_mut(f);
        self.block.params.visit_mut(f);
    }
}
