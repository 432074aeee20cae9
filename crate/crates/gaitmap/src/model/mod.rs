//! Modality-specific transformer encoders, latent attention pooling fusion,
//! and the screening classifier head.

pub mod config;
pub mod text;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeMap, N_FEATURES};
use crate::params::ParamStore;
use crate::pose::{Label, CLIP_LEN};
use crate::synth::SILHOUETTE_SIZE;
use crate::tensor::{Graph, TensorId};

pub use config::{EncoderConfig, FusionConfig, FusionVariant, Modality, ModelConfig, RopeMode};
pub use text::{TextProvider, DEFAULT_PROMPTS};

use rand::SeedableRng;

/// Encoded tokens of one modality plus their temporal clock.
pub struct TokenSequence {
    /// [n, d_model] node in the graph.
    pub tokens: TensorId,
    /// Frame-unit positions (text sits at 0).
    pub positions: Vec<f64>,
    pub modality: Modality,
}

/// Identity of one fused token, for attention remapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenMeta {
    pub modality: Modality,
    /// First frame of the token's patch window, when temporal.
    pub frame_start: Option<usize>,
}

pub struct ForwardOutput {
    pub logits: TensorId,
    pub embedding: TensorId,
    /// Latent pooling attention probabilities, flattened heads x K x N,
    /// present only for the CatLatent variant.
    pub pool_attention: Option<Vec<f64>>,
    pub attention_dims: Option<(usize, usize, usize)>,
    pub token_meta: Vec<TokenMeta>,
}

const CANONICAL_ORDER: [Modality; 3] = [Modality::KnowledgeMap, Modality::Video, Modality::Text];
const LN_EPS: f64 = 1e-5;

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Seeded Gaussian initialization (std 0.02, biases zero, LN gains one).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.encoder.d_model;
        for m in CANONICAL_ORDER {
            if !config.fusion.modalities.contains(&m) {
                continue;
            }
            match m {
                Modality::KnowledgeMap => {
                    p.add_gaussian("map.patch.w", vec![config.map_patch_width(), d], &mut rng);
                    p.add_const("map.patch.b", vec![d], 0.0);
                    add_encoder_stack(&mut p, "map", &config, &mut rng);
                }
                Modality::Video => {
                    p.add_gaussian("video.patch.w", vec![config.video_patch_width(), d], &mut rng);
                    p.add_const("video.patch.b", vec![d], 0.0);
                    add_encoder_stack(&mut p, "video", &config, &mut rng);
                }
                Modality::Text => {
                    p.add_gaussian("text.proj.w", vec![config.text_dim, d], &mut rng);
                    p.add_const("text.proj.b", vec![d], 0.0);
                }
            }
        }
        match config.fusion.variant {
            FusionVariant::Cat => {}
            FusionVariant::CatAtt => add_attention_params(&mut p, "att", d, &mut rng),
            FusionVariant::CatLatent => {
                p.add_gaussian("pool.latents", vec![config.n_latents, d], &mut rng);
                add_attention_params(&mut p, "pool", d, &mut rng);
                let hidden = d * config.encoder.mlp_ratio;
                p.add_gaussian("pool.mlp.w1", vec![d, hidden], &mut rng);
                p.add_const("pool.mlp.b1", vec![hidden], 0.0);
                p.add_gaussian("pool.mlp.w2", vec![hidden, d], &mut rng);
                p.add_const("pool.mlp.b2", vec![d], 0.0);
            }
        }
        p.add_gaussian("head.w", vec![d, 2], &mut rng);
        p.add_const("head.b", vec![2], 0.0);
        Ok(Model { config, params: p })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        Ok(Model { config, params })
    }

    /// Project a standardized 96x238 knowledge map into patch tokens.
    pub fn patch_embed_map(&self, g: &mut Graph, map: &KnowledgeMap) -> Result<TokenSequence> {
        if map.t != CLIP_LEN {
            return Err(Error::Shape(format!("knowledge map must have {CLIP_LEN} rows, got {}", map.t)));
        }
        let pf = self.config.encoder.patch_frames;
        let n = self.config.n_patches();
        let x = g.constant(map.values.clone(), vec![CLIP_LEN, N_FEATURES])?;
        // Row-major frames: a patch of 8 consecutive frames is contiguous.
        let patches = g.reshape(x, vec![n, pf * N_FEATURES])?;
        let w = self.params.leaf(g, "map.patch.w")?;
        let b = self.params.leaf(g, "map.patch.b")?;
        let t = g.matmul(patches, w)?;
        let tokens = g.add_bias(t, b)?;
        Ok(TokenSequence {
            tokens,
            positions: (0..n).map(|j| (j * pf) as f64).collect(),
            modality: Modality::KnowledgeMap,
        })
    }

    /// Project 96 silhouette frames into temporal-block patch tokens.
    pub fn patch_embed_video(&self, g: &mut Graph, frames: &[Vec<f64>]) -> Result<TokenSequence> {
        if frames.len() != CLIP_LEN {
            return Err(Error::Shape(format!("video must have {CLIP_LEN} frames, got {}", frames.len())));
        }
        let px = SILHOUETTE_SIZE * SILHOUETTE_SIZE;
        let mut flat = Vec::with_capacity(CLIP_LEN * px);
        for f in frames {
            if f.len() != px {
                return Err(Error::Shape(format!("silhouette frame has {} px, expected {px}", f.len())));
            }
            flat.extend_from_slice(f);
        }
        let pf = self.config.encoder.patch_frames;
        let n = self.config.n_patches();
        let x = g.constant(flat, vec![CLIP_LEN, px])?;
        let patches = g.reshape(x, vec![n, pf * px])?;
        let w = self.params.leaf(g, "video.patch.w")?;
        let b = self.params.leaf(g, "video.patch.b")?;
        let t = g.matmul(patches, w)?;
        let tokens = g.add_bias(t, b)?;
        Ok(TokenSequence {
            tokens,
            positions: (0..n).map(|j| (j * pf) as f64).collect(),
            modality: Modality::Video,
        })
    }

    /// One token per prompt at position 0.
    pub fn embed_text(&self, g: &mut Graph, prompts: &[String], provider: &TextProvider) -> Result<TokenSequence> {
        let mut flat = Vec::with_capacity(prompts.len() * self.config.text_dim);
        for prompt in prompts {
            flat.extend_from_slice(&provider.embed(prompt)?);
        }
        let x = g.constant(flat, vec![prompts.len(), self.config.text_dim])?;
        let w = self.params.leaf(g, "text.proj.w")?;
        let b = self.params.leaf(g, "text.proj.b")?;
        let tokens = if prompts.is_empty() {
            // Zero-row matmul is fine, but skip the bias broadcast.
            g.matmul(x, w)?
        } else {
            let t = g.matmul(x, w)?;
            g.add_bias(t, b)?
        };
        Ok(TokenSequence { tokens, positions: vec![0.0; prompts.len()], modality: Modality::Text })
    }

    /// Pre-norm transformer stack over one modality's tokens; positions pass
    /// through unchanged.
    pub fn encode(&self, g: &mut Graph, seq: TokenSequence, prefix: &str) -> Result<TokenSequence> {
        let n = g.shape(seq.tokens)[0];
        let rope_positions = self.rope_positions(&seq.positions, n);
        let mut x = seq.tokens;
        for l in 0..self.config.encoder.n_layers {
            x = self.encoder_block(g, x, &rope_positions, &format!("{prefix}.enc{l}"))?;
        }
        Ok(TokenSequence { tokens: x, positions: seq.positions, modality: seq.modality })
    }

    fn rope_positions(&self, temporal: &[f64], n: usize) -> Vec<f64> {
        match self.config.encoder.rope_mode {
            RopeMode::Aligned => temporal.to_vec(),
            RopeMode::NonAligned => (0..n).map(|i| i as f64).collect(),
        }
    }

    fn encoder_block(&self, g: &mut Graph, x: TensorId, positions: &[f64], prefix: &str) -> Result<TensorId> {
        let p = &self.params;
        let g1 = p.leaf(g, &format!("{prefix}.ln1.g"))?;
        let b1 = p.leaf(g, &format!("{prefix}.ln1.b"))?;
        let h1 = g.layer_norm(x, g1, b1, LN_EPS)?;
        let (attn_out, _) = self.attention(g, h1, h1, Some(positions), Some(positions), prefix)?;
        let x = g.add(x, attn_out)?;
        let g2 = p.leaf(g, &format!("{prefix}.ln2.g"))?;
        let b2 = p.leaf(g, &format!("{prefix}.ln2.b"))?;
        let h2 = g.layer_norm(x, g2, b2, LN_EPS)?;
        let m = self.mlp(g, h2, prefix)?;
        g.add(x, m)
    }

    fn mlp(&self, g: &mut Graph, x: TensorId, prefix: &str) -> Result<TensorId> {
        let p = &self.params;
        let w1 = p.leaf(g, &format!("{prefix}.mlp.w1"))?;
        let b1 = p.leaf(g, &format!("{prefix}.mlp.b1"))?;
        let w2 = p.leaf(g, &format!("{prefix}.mlp.w2"))?;
        let b2 = p.leaf(g, &format!("{prefix}.mlp.b2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        g.add_bias(h, b2)
    }

    /// Multi-head attention with rotary q/k. `q_positions`/`k_positions`
    /// None means no rotation on that side (position-free latent queries).
    /// Returns the output projection and the concatenated per-head attention
    /// probabilities (heads x Nq x Nk).
    fn attention(
        &self,
        g: &mut Graph,
        q_in: TensorId,
        kv_in: TensorId,
        q_positions: Option<&[f64]>,
        k_positions: Option<&[f64]>,
        prefix: &str,
    ) -> Result<(TensorId, Vec<f64>)> {
        let p = &self.params;
        let e = &self.config.encoder;
        let hd = self.config.head_dim();
        let wq = p.leaf(g, &format!("{prefix}.wq"))?;
        let wk = p.leaf(g, &format!("{prefix}.wk"))?;
        let wv = p.leaf(g, &format!("{prefix}.wv"))?;
        let wo = p.leaf(g, &format!("{prefix}.wo"))?;
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(kv_in, wk)?;
        let v = g.matmul(kv_in, wv)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx_heads = Vec::with_capacity(e.n_heads);
        let mut attn_data = Vec::new();
        for h in 0..e.n_heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let mut qh = g.slice_cols(q, lo, hi)?;
            let mut kh = g.slice_cols(k, lo, hi)?;
            if let Some(pos) = q_positions {
                qh = g.rope(qh, pos, e.rope_base)?;
            }
            if let Some(pos) = k_positions {
                kh = g.rope(kh, pos, e.rope_base)?;
            }
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let probs = g.softmax(scaled)?;
            attn_data.extend_from_slice(g.data(probs));
            ctx_heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&ctx_heads)?;
        let out = g.matmul(ctx, wo)?;
        Ok((out, attn_data))
    }

    /// Concatenate encoded modalities in the fixed canonical order. Aligned
    /// mode keeps temporal positions; NonAligned overwrites them with fused
    /// ordinals.
    pub fn fuse(&self, g: &mut Graph, seqs: Vec<TokenSequence>) -> Result<(TokenSequence, Vec<TokenMeta>)> {
        if seqs.is_empty() {
            return Err(Error::Validation("fuse needs at least one modality".into()));
        }
        let d = self.config.encoder.d_model;
        for s in &seqs {
            if g.shape(s.tokens)[1] != d {
                return Err(Error::Shape(format!(
                    "fuse width mismatch: {} vs d_model {d}",
                    g.shape(s.tokens)[1]
                )));
            }
        }
        let pf = self.config.encoder.patch_frames;
        let mut meta = Vec::new();
        let mut positions = Vec::new();
        let parts: Vec<TensorId> = seqs
            .iter()
            .map(|s| {
                for (i, &pos) in s.positions.iter().enumerate() {
                    let frame_start = match s.modality {
                        Modality::Text => None,
                        _ => Some(i * pf),
                    };
                    meta.push(TokenMeta { modality: s.modality, frame_start });
                    positions.push(pos);
                }
                s.tokens
            })
            .collect();
        let tokens = g.concat_rows(&parts)?;
        let n = positions.len();
        let positions = match self.config.encoder.rope_mode {
            RopeMode::Aligned => positions,
            RopeMode::NonAligned => (0..n).map(|i| i as f64).collect(),
        };
        Ok((TokenSequence { tokens, positions, modality: seqs[0].modality }, meta))
    }

    pub fn pool_mean(&self, g: &mut Graph, tokens: TensorId) -> Result<TensorId> {
        if g.shape(tokens)[0] == 0 {
            return Err(Error::Validation("cannot pool an empty token sequence".into()));
        }
        g.mean_rows(tokens)
    }

    /// One self-attention layer with residual, then mean pooling.
    pub fn pool_att(&self, g: &mut Graph, tokens: TensorId, positions: &[f64]) -> Result<TensorId> {
        if g.shape(tokens)[0] == 0 {
            return Err(Error::Validation("cannot pool an empty token sequence".into()));
        }
        let (a, _) = self.attention(g, tokens, tokens, Some(positions), Some(positions), "att")?;
        let h = g.add(tokens, a)?;
        g.mean_rows(h)
    }

    /// Latent dictionary cross-attention pooling: position-free latent
    /// queries attend over the fused tokens (rotary on keys only), each
    /// latent output passes a 2-layer GELU MLP with residual, and the final
    /// embedding is the mean over latents. Returns the attention
    /// probabilities (heads x K x N) for interpretation.
    pub fn pool_latent(
        &self,
        g: &mut Graph,
        tokens: TensorId,
        positions: &[f64],
    ) -> Result<(TensorId, Vec<f64>, (usize, usize, usize))> {
        let n = g.shape(tokens)[0];
        if n == 0 {
            return Err(Error::Validation("cannot pool an empty token sequence".into()));
        }
        let latents = self.params.leaf(g, "pool.latents")?;
        let (attended, attn) = self.attention(g, latents, tokens, None, Some(positions), "pool")?;
        let m = self.mlp(g, attended, "pool")?;
        let o = g.add(attended, m)?;
        let embedding = g.mean_rows(o)?;
        let dims = (self.config.encoder.n_heads, self.config.n_latents, n);
        Ok((embedding, attn, dims))
    }

    /// Linear head to 2 logits (index 0 negative, 1 positive).
    pub fn classify(&self, g: &mut Graph, embedding: TensorId) -> Result<TensorId> {
        let w = self.params.leaf(g, "head.w")?;
        let b = self.params.leaf(g, "head.b")?;
        let l = g.matmul(embedding, w)?;
        g.add_bias(l, b)
    }

    /// Full clip forward pass.
    pub fn forward(&self, g: &mut Graph, input: &ClipInput, provider: &TextProvider) -> Result<ForwardOutput> {
        let mut seqs = Vec::new();
        for m in CANONICAL_ORDER {
            if !self.config.fusion.modalities.contains(&m) {
                continue;
            }
            let seq = match m {
                Modality::KnowledgeMap => {
                    let map = input
                        .map
                        .as_ref()
                        .ok_or_else(|| Error::Validation("model requires a knowledge map input".into()))?;
                    let s = self.patch_embed_map(g, map)?;
                    self.encode(g, s, "map")?
                }
                Modality::Video => {
                    let frames = input
                        .video
                        .as_ref()
                        .ok_or_else(|| Error::Validation("model requires a video input".into()))?;
                    let s = self.patch_embed_video(g, frames)?;
                    self.encode(g, s, "video")?
                }
                Modality::Text => self.embed_text(g, &input.prompts, provider)?,
            };
            seqs.push(seq);
        }
        let (fused, meta) = self.fuse(g, seqs)?;
        let (embedding, pool_attention, attention_dims) = match self.config.fusion.variant {
            FusionVariant::Cat => (self.pool_mean(g, fused.tokens)?, None, None),
            FusionVariant::CatAtt => (self.pool_att(g, fused.tokens, &fused.positions)?, None, None),
            FusionVariant::CatLatent => {
                let (e, a, dims) = self.pool_latent(g, fused.tokens, &fused.positions)?;
                (e, Some(a), Some(dims))
            }
        };
        let logits = self.classify(g, embedding)?;
        Ok(ForwardOutput { logits, embedding, pool_attention, attention_dims, token_meta: meta })
    }
}

fn add_encoder_stack(p: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.encoder.d_model;
    let hidden = d * cfg.encoder.mlp_ratio;
    for l in 0..cfg.encoder.n_layers {
        let pre = format!("{prefix}.enc{l}");
        p.add_const(&format!("{pre}.ln1.g"), vec![d], 1.0);
        p.add_const(&format!("{pre}.ln1.b"), vec![d], 0.0);
        add_attention_params(p, &pre, d, rng);
        p.add_const(&format!("{pre}.ln2.g"), vec![d], 1.0);
        p.add_const(&format!("{pre}.ln2.b"), vec![d], 0.0);
        p.add_gaussian(&format!("{pre}.mlp.w1"), vec![d, hidden], rng);
        p.add_const(&format!("{pre}.mlp.b1"), vec![hidden], 0.0);
        p.add_gaussian(&format!("{pre}.mlp.w2"), vec![hidden, d], rng);
        p.add_const(&format!("{pre}.mlp.b2"), vec![d], 0.0);
    }
}

fn add_attention_params(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    p.add_gaussian(&format!("{prefix}.wq"), vec![d, d], rng);
    p.add_gaussian(&format!("{prefix}.wk"), vec![d, d], rng);
    p.add_gaussian(&format!("{prefix}.wv"), vec![d, d], rng);
    p.add_gaussian(&format!("{prefix}.wo"), vec![d, d], rng);
}

/// All modality inputs for one clip; only the configured modalities are read.
pub struct ClipInput {
    /// Standardized knowledge map.
    pub map: Option<KnowledgeMap>,
    /// 96 silhouette frames of 32x32 intensities.
    pub video: Option<Vec<Vec<f64>>>,
    pub prompts: Vec<String>,
}

/// Softmax probabilities and the predicted label; exact ties resolve to
/// negative (screening does not call disease on a coin flip).
pub fn predict_from_logits(logits: &[f64]) -> (Label, f64) {
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let p_pos = e1 / (e0 + e1);
    let label = if p_pos > 0.5 { Label::Positive } else { Label::Negative };
    (label, p_pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge;
    use crate::pose::segment_clips;
    use crate::synth::{generate_subject, rasterize_silhouette, synthesize_sequence};

    fn sample_clip(cobb: f64, seed: u64) -> crate::pose::Clip {
        let subject = generate_subject("s", cobb, seed).unwrap();
        let seq = synthesize_sequence(&subject, CLIP_LEN, 30.0).unwrap();
        segment_clips(&seq, subject.label, Some(cobb)).unwrap().remove(0)
    }

    fn sample_input(cobb: f64, seed: u64) -> ClipInput {
        let clip = sample_clip(cobb, seed);
        let map = knowledge::extract(&clip, 30.0).unwrap();
        let video: Vec<Vec<f64>> =
            clip.frames.iter().map(|f| rasterize_silhouette(f, SILHOUETTE_SIZE).unwrap()).collect();
        ClipInput {
            map: Some(map),
            video: Some(video),
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn tiny_model(variant: FusionVariant, rope: RopeMode) -> Model {
        let cfg = ModelConfig::tiny(
            vec![Modality::KnowledgeMap, Modality::Video, Modality::Text],
            variant,
            rope,
        );
        Model::new(cfg, 42).unwrap()
    }

    #[test]
    fn patch_counts_and_positions() {
        let model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        let mut g = Graph::new();
        let input = sample_input(0.0, 1);
        let map_seq = model.patch_embed_map(&mut g, input.map.as_ref().unwrap()).unwrap();
        assert_eq!(g.shape(map_seq.tokens), &[12, 8]);
        assert_eq!(map_seq.positions[1], 8.0);
        let vid_seq = model.patch_embed_video(&mut g, input.video.as_ref().unwrap()).unwrap();
        assert_eq!(g.shape(vid_seq.tokens), &[12, 8]);
        // Shared temporal clock.
        assert_eq!(map_seq.positions, vid_seq.positions);
    }

    #[test]
    fn zero_patch_weights_give_zero_tokens() {
        let mut model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        for name in ["map.patch.w", "map.patch.b"] {
            let p = model.params.get_mut(name).unwrap();
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let input = sample_input(0.0, 1);
        let seq = model.patch_embed_map(&mut g, input.map.as_ref().unwrap()).unwrap();
        assert!(g.data(seq.tokens).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_prompt_list_gives_empty_tokens() {
        let model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        let mut g = Graph::new();
        let seq = model.embed_text(&mut g, &[], &TextProvider::Fallback).unwrap();
        assert_eq!(g.shape(seq.tokens), &[0, 8]);
    }

    #[test]
    fn fuse_counts_and_aligned_positions() {
        let model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        let mut g = Graph::new();
        let input = sample_input(5.0, 2);
        let m = model.patch_embed_map(&mut g, input.map.as_ref().unwrap()).unwrap();
        let v = model.patch_embed_video(&mut g, input.video.as_ref().unwrap()).unwrap();
        let t = model.embed_text(&mut g, &input.prompts, &TextProvider::Fallback).unwrap();
        let mut expected: Vec<f64> = Vec::new();
        expected.extend(&m.positions);
        expected.extend(&v.positions);
        expected.extend(&t.positions);
        let (fused, meta) = model.fuse(&mut g, vec![m, v, t]).unwrap();
        assert_eq!(g.shape(fused.tokens), &[28, 8]);
        assert_eq!(meta.len(), 28);
        // Aligned: fused positions are the concatenated temporal clocks.
        let mut got = fused.positions.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, expected);
    }

    #[test]
    fn non_aligned_fuse_uses_ordinals() {
        let model = tiny_model(FusionVariant::Cat, RopeMode::NonAligned);
        let mut g = Graph::new();
        let input = sample_input(5.0, 2);
        let m = model.patch_embed_map(&mut g, input.map.as_ref().unwrap()).unwrap();
        let v = model.patch_embed_video(&mut g, input.video.as_ref().unwrap()).unwrap();
        let (fused, _) = model.fuse(&mut g, vec![m, v]).unwrap();
        assert_eq!(fused.positions, (0..24).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn encode_preserves_shape_and_positions() {
        let model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        let mut g = Graph::new();
        let input = sample_input(5.0, 3);
        let seq = model.patch_embed_map(&mut g, input.map.as_ref().unwrap()).unwrap();
        let positions = seq.positions.clone();
        let out = model.encode(&mut g, seq, "map").unwrap();
        assert_eq!(g.shape(out.tokens), &[12, 8]);
        assert_eq!(out.positions, positions);
    }

    #[test]
    fn zeroed_projections_make_encode_identity() {
        let mut model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        let zero_names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("map.enc") && (n.ends_with(".wo") || n.ends_with(".mlp.w2")))
            .cloned()
            .collect();
        for name in zero_names {
            model.params.get_mut(&name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let input = sample_input(5.0, 3);
        let seq = model.patch_embed_map(&mut g, input.map.as_ref().unwrap()).unwrap();
        let before = g.data(seq.tokens).to_vec();
        let out = model.encode(&mut g, seq, "map").unwrap();
        for (a, b) in before.iter().zip(g.data(out.tokens)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_att_zero_wo_equals_mean() {
        let mut model = tiny_model(FusionVariant::CatAtt, RopeMode::Aligned);
        model.params.get_mut("att.wo").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, -1.0, 0.0, 1.0, 2.0, 0.5, 0.5, 0.5, 0.5], vec![2, 8]).unwrap();
        let pooled = model.pool_att(&mut g, x, &[0.0, 8.0]).unwrap();
        let mean = model.pool_mean(&mut g, x).unwrap();
        for (a, b) in g.data(pooled).iter().zip(g.data(mean)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_latent_single_token_and_simplex() {
        let model = tiny_model(FusionVariant::CatLatent, RopeMode::Aligned);
        let mut g = Graph::new();
        let x = g.constant(vec![0.3, -0.2, 0.8, 0.1, 0.0, 0.4, -0.6, 0.9], vec![1, 8]).unwrap();
        let (emb, attn, (h, k, n)) = model.pool_latent(&mut g, x, &[0.0]).unwrap();
        assert_eq!((h, k, n), (2, 2, 1));
        // Single key: every attention row is exactly [1.0].
        for &a in &attn {
            assert_eq!(a, 1.0);
        }
        assert_eq!(g.shape(emb), &[1, 8]);

        // Random sequence: rows are a probability simplex.
        let y = g
            .constant((0..40).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect(), vec![5, 8])
            .unwrap();
        let (_, attn2, (h2, k2, n2)) = model.pool_latent(&mut g, y, &[0.0, 8.0, 16.0, 24.0, 32.0]).unwrap();
        for row in attn2.chunks(n2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(attn2.len(), h2 * k2 * n2);
    }

    #[test]
    fn pool_latent_permutation_invariance() {
        let model = tiny_model(FusionVariant::CatLatent, RopeMode::Aligned);
        let data: Vec<f64> = (0..40).map(|i| ((i * 17) % 13) as f64 * 0.1 - 0.6).collect();
        let positions = [0.0, 8.0, 16.0, 24.0, 32.0];
        let perm = [3usize, 0, 4, 1, 2];
        let mut g = Graph::new();
        let x = g.constant(data.clone(), vec![5, 8]).unwrap();
        let (emb, _, _) = model.pool_latent(&mut g, x, &positions).unwrap();
        let base = g.data(emb).to_vec();

        let mut pdata = Vec::new();
        let mut ppos = Vec::new();
        for &i in &perm {
            pdata.extend_from_slice(&data[i * 8..(i + 1) * 8]);
            ppos.push(positions[i]);
        }
        let mut g2 = Graph::new();
        let x2 = g2.constant(pdata, vec![5, 8]).unwrap();
        let (emb2, _, _) = model.pool_latent(&mut g2, x2, &ppos).unwrap();
        for (a, b) in base.iter().zip(g2.data(emb2)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn classify_zero_weights_ties_to_negative() {
        let mut model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        for name in ["head.w", "head.b"] {
            model.params.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let e = g.constant(vec![0.5; 8], vec![1, 8]).unwrap();
        let logits = model.classify(&mut g, e).unwrap();
        let (label, p) = predict_from_logits(g.data(logits));
        assert_eq!(label, Label::Negative);
        assert!((p - 0.5).abs() < 1e-12);
        let (label2, _) = predict_from_logits(&[3.0, 3.0]);
        assert_eq!(label2, Label::Negative);
    }

    #[test]
    fn aligned_angles_match_across_modalities() {
        // Same frame index => identical rotary angles in aligned mode; in
        // non-aligned mode the fused ordinals differ between modalities.
        let model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        let mut g = Graph::new();
        let input = sample_input(5.0, 4);
        let m = model.patch_embed_map(&mut g, input.map.as_ref().unwrap()).unwrap();
        let v = model.patch_embed_video(&mut g, input.video.as_ref().unwrap()).unwrap();
        let (fused, meta) = model.fuse(&mut g, vec![m, v]).unwrap();
        for j in 0..12 {
            let map_tok = j;
            let vid_tok = 12 + j;
            assert_eq!(meta[map_tok].frame_start, meta[vid_tok].frame_start);
            assert_eq!(fused.positions[map_tok], fused.positions[vid_tok]);
        }
        let non_aligned = tiny_model(FusionVariant::Cat, RopeMode::NonAligned);
        let mut g2 = Graph::new();
        let m2 = non_aligned.patch_embed_map(&mut g2, input.map.as_ref().unwrap()).unwrap();
        let v2 = non_aligned.patch_embed_video(&mut g2, input.video.as_ref().unwrap()).unwrap();
        let (fused2, _) = non_aligned.fuse(&mut g2, vec![m2, v2]).unwrap();
        for j in 0..12 {
            assert_ne!(fused2.positions[j], fused2.positions[12 + j]);
        }
    }

    #[test]
    fn cat_variant_has_no_cross_token_mixing_after_encoding() {
        // Perturbing one fused token changes the embedding by exactly its
        // mean-pool contribution.
        let model = tiny_model(FusionVariant::Cat, RopeMode::Aligned);
        let mut g = Graph::new();
        let n = 4;
        let data: Vec<f64> = (0..n * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(data.clone(), vec![n, 8]).unwrap();
        let pooled = model.pool_mean(&mut g, x).unwrap();
        let base = g.data(pooled).to_vec();
        let mut perturbed = data.clone();
        perturbed[2 * 8 + 3] += 1.0;
        let x2 = g.constant(perturbed, vec![n, 8]).unwrap();
        let pooled2 = model.pool_mean(&mut g, x2).unwrap();
        let got = g.data(pooled2).to_vec();
        for c in 0..8 {
            let expected = base[c] + if c == 3 { 1.0 / n as f64 } else { 0.0 };
            assert!((got[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_runs_for_all_variants() {
        let input = sample_input(20.0, 6);
        for variant in [FusionVariant::Cat, FusionVariant::CatAtt, FusionVariant::CatLatent] {
            for rope in [RopeMode::Aligned, RopeMode::NonAligned] {
                let model = tiny_model(variant, rope);
                let mut g = Graph::new();
                let out = model.forward(&mut g, &input, &TextProvider::Fallback).unwrap();
                assert_eq!(g.shape(out.logits), &[1, 2]);
                assert_eq!(out.token_meta.len(), 28);
                assert_eq!(out.pool_attention.is_some(), variant == FusionVariant::CatLatent);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let input = sample_input(15.0, 7);
        let model = tiny_model(FusionVariant::CatLatent, RopeMode::Aligned);
        let mut g1 = Graph::new();
        let o1 = model.forward(&mut g1, &input, &TextProvider::Fallback).unwrap();
        let mut g2 = Graph::new();
        let o2 = model.forward(&mut g2, &input, &TextProvider::Fallback).unwrap();
        assert_eq!(g1.data(o1.logits), g2.data(o2.logits));
    }

    #[test]
    fn full_tiny_model_gradcheck() {
        // End-to-end finite-difference check of every parameter in the tiny
        // 3-modality CatLatent model.
        let input = sample_input(18.0, 8);
        let model = tiny_model(FusionVariant::CatLatent, RopeMode::Aligned);
        let provider = TextProvider::Fallback;

        let loss_of = |m: &Model| -> f64 {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &input, &provider).unwrap();
            let l = g.cross_entropy(out.logits, &[1], &[1.0, 1.0]).unwrap();
            g.data(l)[0]
        };

        // Analytic gradients.
        let mut g = Graph::new();
        let out = model.forward(&mut g, &input, &provider).unwrap();
        let l = g.cross_entropy(out.logits, &[1], &[1.0, 1.0]).unwrap();
        g.backward(l).unwrap();

        let analytic = model.params.collect_grads(&g);

        let mut checked = 0;
        let h = 1e-6;
        let mut worst = 0.0f64;
        let mut work = Model::from_parts(model.config.clone(), model.params.clone()).unwrap();
        for (name, p) in model.params.iter() {
            let Some(ga) = analytic.get(name) else { continue };
            // Spot-check a few coordinates per parameter to keep runtime sane.
            let stride = (p.numel() / 5).max(1);
            for i in (0..p.numel()).step_by(stride) {
                let orig = p.data[i];
                work.params.get_mut(name).unwrap().data[i] = orig + h;
                let up = loss_of(&work);
                work.params.get_mut(name).unwrap().data[i] = orig - h;
                let down = loss_of(&work);
                work.params.get_mut(name).unwrap().data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(ga[i].abs()).max(1e-3);
                worst = worst.max((fd - ga[i]).abs() / denom);
                checked += 1;
            }
        }
        assert!(checked > 50, "gradcheck covered too few coordinates");
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }
}
