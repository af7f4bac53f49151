//! Multimodal unified image-sequence classifier.
//!
//! Encoder: a ViT encodes each image separately; the per-image features are
//! concatenated, tagged with an image-index embedding and mixed by a few
//! full-attention fusion blocks. Decoder: a causal text decoder over
//! `title ++ <sep> ++ feedback` that cross-attends to the fused features.
//! The next-token head drives feedback generation and the class head reads
//! the hidden state at `<sep>`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kv;
use crate::model::vit::VitWeights;
use crate::model::MuiscConfig;
use crate::nn::{
    add_positions, attention, embed, linear_head, pffn, AttentionConfig, AttentionWeights, Ctx, EncoderBlock,
    FeedForwardWeights, Initializer, KvSource, ParamId, ParamStore,
};
use crate::tensor::{Tensor, Var};
use crate::vocab;

/// One training example for the sequence classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub images: Vec<Image>,
    pub title: Vec<usize>,
    pub feedback: Vec<usize>,
    pub label: usize,
}

impl SequenceSample {
    /// Same sample with images taken in `order` (old positions, 0-based).
    /// Image positions named in the feedback (`image <k>`) follow their
    /// image.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let n = self.images.len();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Contract(format!("{order:?} is not a permutation of {n} images")));
        }
        let mut feedback = self.feedback.clone();
        for (slot, pair) in feedback.iter_mut().skip(1).zip(self.feedback.windows(2)) {
            if pair[0] != vocab::IMAGE {
                continue;
            }
            if let Some(old) = (0..n).find(|&i| vocab::index_token(i + 1) == Some(pair[1])) {
                let new = order.iter().position(|&o| o == old).expect("checked permutation");
                if let Some(t) = vocab::index_token(new + 1) {
                    *slot = t;
                }
            }
        }
        Ok(Self {
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            title: self.title.clone(),
            feedback,
            label: self.label,
        })
    }
}

/// Decoder token sequence with the position of the separator.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    tokens: Vec<usize>,
    sep_pos: usize,
    feedback_len: usize,
}

impl DecoderInput {
    /// `title ++ <sep> ++ feedback ++ <eot>`; the title is dropped when
    /// `title_input` is off.
    pub fn training(title: &[usize], feedback: &[usize], title_input: bool) -> Result<Self> {
        if feedback.is_empty() {
            return Err(Error::Contract("training input needs a non-empty feedback".into()));
        }
        let mut din = Self::inference(title, title_input)?;
        check_plain("feedback", feedback)?;
        din.tokens.extend_from_slice(feedback);
        din.tokens.push(vocab::EOT);
        din.feedback_len = feedback.len();
        Ok(din)
    }

    /// `title ++ <sep>`.
    pub fn inference(title: &[usize], title_input: bool) -> Result<Self> {
        let mut tokens = Vec::with_capacity(title.len() + 8);
        if title_input {
            check_plain("title", title)?;
            tokens.extend_from_slice(title);
        }
        let sep_pos = tokens.len();
        tokens.push(vocab::SEP);
        Ok(Self {
            tokens,
            sep_pos,
            feedback_len: 0,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn sep_pos(&self) -> usize {
        self.sep_pos
    }

    pub fn feedback_len(&self) -> usize {
        self.feedback_len
    }

    pub fn is_training(&self) -> bool {
        self.feedback_len > 0
    }

    /// Feedback tokens, each predicted from the position just before it.
    pub fn feedback_targets(&self) -> &[usize] {
        &self.tokens[self.sep_pos + 1..self.sep_pos + 1 + self.feedback_len]
    }
}

fn check_plain(what: &str, tokens: &[usize]) -> Result<()> {
    if tokens.iter().any(|&t| t == vocab::SEP || t == vocab::EOT) {
        return Err(Error::Contract(format!("{what} must not contain <sep> or <eot>")));
    }
    Ok(())
}

/// Everything produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Fused sequence feature, `(N^p + 1)·K^t × D`.
    pub features: Var,
    /// Decoder hidden states `K^d × D` (absent without a decoder).
    pub hidden: Option<Var>,
    /// Next-token logits `K^d × V`.
    pub lm_logits: Option<Var>,
    /// Class logits `1 × K^g`.
    pub class_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// `None` when the generation term is switched off.
    pub nlg: Option<Var>,
    pub mcc: Var,
    pub total: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Probability of the qualified class.
    pub p_t: f64,
    pub p_mcc: Vec<f64>,
}

/// `λ_nlg·nlg + λ_mcc·mcc`, with the generation term dropped when the task
/// is disabled.
pub fn total_loss(nlg: f64, mcc: f64, cfg: &MuiscConfig) -> f64 {
    if cfg.nlg_task {
        cfg.lambda_nlg * nlg + cfg.lambda_mcc * mcc
    } else {
        cfg.lambda_mcc * mcc
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attn: AttentionWeights,
    cross_attn: Option<AttentionWeights>,
    ffn: FeedForwardWeights,
}

#[derive(Clone, Debug)]
struct DecoderWeights {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<DecoderBlock>,
    lm_w: ParamId,
    lm_b: ParamId,
}

#[derive(Clone, Debug)]
struct Weights {
    vit: VitWeights,
    image_index: ParamId,
    fusion: Vec<EncoderBlock>,
    decoder: Option<DecoderWeights>,
    cls_w: ParamId,
    cls_b: ParamId,
}

#[derive(Clone)]
pub struct Muisc {
    cfg: MuiscConfig,
    store: ParamStore,
    w: Weights,
}

impl std::fmt::Debug for Muisc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Muisc")
            .field("cfg", &self.cfg)
            .field("params", &self.store.num_values())
            .finish_non_exhaustive()
    }
}

impl Muisc {
    pub fn new(cfg: MuiscConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(cfg.init_seed, cfg.init_std);
        let d = cfg.embed_dim;
        let vit = VitWeights::init(&mut store, &mut init, "enc", &cfg.vit());
        let image_index = store.add("fuse.image_index", init.trunc_normal(&[cfg.seq_len, d]));
        let fusion = if cfg.hierarchical_fusion {
            (0..cfg.fusion_blocks)
                .map(|i| EncoderBlock::init(&mut store, &mut init, &format!("fuse.block{i}"), d, cfg.ffn_mult))
                .collect()
        } else {
            Vec::new()
        };
        let decoder = cfg.use_decoder.then(|| {
            let tok = store.add("dec.tok", init.trunc_normal(&[cfg.vocab_size, d]));
            let pos = store.add("dec.pos", init.trunc_normal(&[cfg.max_text_len, d]));
            let blocks = (0..cfg.decoder_blocks)
                .map(|i| {
                    let p = format!("dec.block{i}");
                    DecoderBlock {
                        self_attn: AttentionWeights::init(&mut store, &mut init, &format!("{p}.self"), d),
                        cross_attn: cfg
                            .has_cross_attention(i)
                            .then(|| AttentionWeights::init(&mut store, &mut init, &format!("{p}.cross"), d)),
                        ffn: FeedForwardWeights::init(&mut store, &mut init, &format!("{p}.ffn"), d, cfg.ffn_mult),
                    }
                })
                .collect();
            let lm_w = store.add("dec.lm_w", init.trunc_normal(&[d, cfg.vocab_size]));
            let lm_b = store.add("dec.lm_b", Tensor::zeros(&[cfg.vocab_size]));
            DecoderWeights {
                tok,
                pos,
                blocks,
                lm_w,
                lm_b,
            }
        });
        let cls_w = store.add("head.cls_w", init.trunc_normal(&[d, cfg.num_classes]));
        let cls_b = store.add("head.cls_b", Tensor::zeros(&[cfg.num_classes]));
        Ok(Self {
            cfg,
            store,
            w: Weights {
                vit,
                image_index,
                fusion,
                decoder,
                cls_w,
                cls_b,
            },
        })
    }

    pub fn config(&self) -> &MuiscConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn kv_config(&self) -> Result<String> {
        kv::to_text(&self.cfg)
    }

    pub fn from_kv_config(text: &str) -> Result<Self> {
        Self::new(MuiscConfig::from_kv(text)?)
    }

    fn attn_cfg(&self, causal: bool, kv_source: KvSource) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.cfg.embed_dim,
            num_heads: self.cfg.num_heads,
            causal,
            kv_source,
            pre_norm: self.cfg.pre_norm,
        }
    }

    /// Per-image ViT feature `(N^p + 1) × D`.
    pub fn encode_image(&self, ctx: &mut Ctx, img: &Image) -> Result<Var> {
        self.w.vit.encode(ctx, img, &self.cfg.vit())
    }

    /// Concatenates per-image features in sequence order, adds the
    /// image-index embedding and applies the fusion blocks.
    pub fn fuse_sequence(&self, ctx: &mut Ctx, per_image: &[Var]) -> Result<Var> {
        if per_image.len() != self.cfg.seq_len {
            return Err(Error::Contract(format!(
                "expected {} image features, got {}",
                self.cfg.seq_len,
                per_image.len()
            )));
        }
        let rows = self.cfg.num_patches() + 1;
        let x = ctx.graph.concat_rows(per_image)?;
        let ids: Vec<usize> = (0..self.cfg.seq_len)
            .flat_map(|k| std::iter::repeat_n(k, rows))
            .collect();
        let index = ctx.graph.gather_rows(ctx.p(self.w.image_index), &ids)?;
        let mut x = ctx.graph.add(x, index)?;
        let attn = self.attn_cfg(false, KvSource::SelfAttention);
        for block in &self.w.fusion {
            x = block.forward(ctx, x, &attn)?;
        }
        Ok(x)
    }

    pub fn encode_sequence(&self, ctx: &mut Ctx, images: &[Image]) -> Result<Var> {
        let feats = images
            .iter()
            .map(|img| self.encode_image(ctx, img))
            .collect::<Result<Vec<_>>>()?;
        self.fuse_sequence(ctx, &feats)
    }

    /// Runs the decoder; returns `(hidden, lm_logits, class_logits)`.
    pub fn decode(&self, ctx: &mut Ctx, features: Var, din: &DecoderInput) -> Result<(Var, Var, Var)> {
        let dec = self
            .w
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built without a decoder".into()))?;
        if din.tokens.len() > self.cfg.max_text_len {
            return Err(Error::Capacity {
                what: "decoder input",
                len: din.tokens.len(),
                limit: self.cfg.max_text_len,
            });
        }
        let x = embed(ctx, &din.tokens, dec.tok)?;
        let x = add_positions(ctx, x, dec.pos)?;
        let mut h = ctx.dropout(x)?;
        let masked = self.attn_cfg(true, KvSource::SelfAttention);
        let cross = self.attn_cfg(false, KvSource::Cross);
        for block in &dec.blocks {
            h = attention(ctx, h, h, &block.self_attn, &masked)?;
            if let Some(ca) = &block.cross_attn {
                h = attention(ctx, h, features, ca, &cross)?;
            }
            h = pffn(ctx, h, &block.ffn, self.cfg.pre_norm)?;
        }
        let lm = linear_head(ctx, h, dec.lm_w, dec.lm_b)?;
        let s = ctx.graph.slice_rows(h, din.sep_pos, 1)?;
        let class_logits = linear_head(ctx, s, self.w.cls_w, self.w.cls_b)?;
        Ok((h, lm, class_logits))
    }

    /// Full forward pass. Without a decoder the class head reads the
    /// mean-pooled sequence feature and `din` is ignored.
    pub fn forward(&self, ctx: &mut Ctx, images: &[Image], din: &DecoderInput) -> Result<ForwardOutput> {
        let features = self.encode_sequence(ctx, images)?;
        self.forward_from_features(ctx, features, din)
    }

    pub fn forward_from_features(&self, ctx: &mut Ctx, features: Var, din: &DecoderInput) -> Result<ForwardOutput> {
        if self.cfg.use_decoder {
            let (hidden, lm, class_logits) = self.decode(ctx, features, din)?;
            Ok(ForwardOutput {
                features,
                hidden: Some(hidden),
                lm_logits: Some(lm),
                class_logits,
            })
        } else {
            let pooled = ctx.graph.mean_rows(features)?;
            let class_logits = linear_head(ctx, pooled, self.w.cls_w, self.w.cls_b)?;
            Ok(ForwardOutput {
                features,
                hidden: None,
                lm_logits: None,
                class_logits,
            })
        }
    }

    /// Sum over feedback tokens of `-log p(token | prefix, images, title)`.
    /// Title and separator positions are context only.
    pub fn loss_nlg(&self, ctx: &mut Ctx, out: &ForwardOutput, din: &DecoderInput) -> Result<Var> {
        if !din.is_training() {
            return Err(Error::Contract(
                "generation loss needs a training-mode decoder input".into(),
            ));
        }
        let lm = out
            .lm_logits
            .ok_or_else(|| Error::Contract("generation loss needs the decoder".into()))?;
        let rows = ctx.graph.slice_rows(lm, din.sep_pos, din.feedback_len)?;
        let mean = ctx.graph.cross_entropy_logits(rows, din.feedback_targets())?;
        Ok(ctx.graph.scale(mean, din.feedback_len as f64))
    }

    /// `-log p^mcc[label]`.
    pub fn loss_mcc(&self, ctx: &mut Ctx, out: &ForwardOutput, label: usize) -> Result<Var> {
        Ok(ctx.graph.cross_entropy_logits(out.class_logits, &[label])?)
    }

    pub fn loss_total(&self, ctx: &mut Ctx, nlg: Option<Var>, mcc: Var) -> Result<Var> {
        let weighted_mcc = ctx.graph.scale(mcc, self.cfg.lambda_mcc);
        if !self.cfg.nlg_task {
            return Ok(weighted_mcc);
        }
        let nlg = nlg.ok_or_else(|| Error::Contract("nlg_task is on but no generation loss was given".into()))?;
        let weighted_nlg = ctx.graph.scale(nlg, self.cfg.lambda_nlg);
        Ok(ctx.graph.add(weighted_nlg, weighted_mcc)?)
    }

    /// Decoder input for a training sample under this model's flags.
    pub fn training_input(&self, sample: &SequenceSample) -> Result<DecoderInput> {
        DecoderInput::training(&sample.title, &sample.feedback, self.cfg.title_input)
    }

    /// Forward pass plus all loss terms for one sample.
    pub fn sample_losses(&self, ctx: &mut Ctx, sample: &SequenceSample) -> Result<LossParts> {
        let din = self.training_input(sample)?;
        let out = self.forward(ctx, &sample.images, &din)?;
        let nlg = if self.cfg.nlg_task {
            Some(self.loss_nlg(ctx, &out, &din)?)
        } else {
            None
        };
        let mcc = self.loss_mcc(ctx, &out, sample.label)?;
        let total = self.loss_total(ctx, nlg, mcc)?;
        Ok(LossParts { nlg, mcc, total })
    }

    /// Qualified probability and class distribution for an image sequence
    /// and a title. Deterministic: no dropout, no gradients.
    pub fn predict(&self, images: &[Image], title: &[usize]) -> Result<Prediction> {
        let mut ctx = Ctx::new(&self.store, false);
        let din = DecoderInput::inference(title, self.cfg.title_input)?;
        let out = self.forward(&mut ctx, images, &din)?;
        let p_mcc = softmax(ctx.value(out.class_logits).data());
        Ok(Prediction { p_t: p_mcc[0], p_mcc })
    }

    /// Greedy feedback decoding for inspection. Stops at `<eot>`, after
    /// "yes", or after `max_tokens`.
    pub fn greedy_feedback(&self, images: &[Image], title: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
        if !self.cfg.use_decoder {
            return Ok(Vec::new());
        }
        let mut ctx = Ctx::new(&self.store, false);
        let features = self.encode_sequence(&mut ctx, images)?;
        let mut din = DecoderInput::inference(title, self.cfg.title_input)?;
        let mut generated = Vec::new();
        while generated.len() < max_tokens && din.tokens.len() < self.cfg.max_text_len {
            let (_, lm, _) = self.decode(&mut ctx, features, &din)?;
            let logits = ctx.value(lm);
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            if next == vocab::EOT {
                break;
            }
            generated.push(next);
            din.tokens.push(next);
            if next == vocab::YES {
                break;
            }
        }
        Ok(generated)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use rand::{Rng, SeedableRng};

    fn image(cfg: &MuiscConfig, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_height * cfg.image_width * 3;
        Image::new(
            cfg.image_height,
            cfg.image_width,
            (0..n).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    fn images(cfg: &MuiscConfig, seed: u64) -> Vec<Image> {
        (0..cfg.seq_len).map(|k| image(cfg, seed * 10 + k as u64)).collect()
    }

    fn tokens(words: &str) -> Vec<usize> {
        vocab::tokenize(words).unwrap()
    }

    #[test]
    fn reordering_moves_feedback_indices() {
        let cfg = MuiscConfig::desk();
        let s = SequenceSample {
            images: images(&cfg, 1),
            title: tokens("small red circle cup"),
            feedback: tokens("duplicate image 3"),
            label: 3,
        };
        let r = s.reordered(&[0, 2, 1]).unwrap();
        assert_eq!(r.feedback, tokens("duplicate image 2"));
        assert_eq!(
            r.images,
            vec![s.images[0].clone(), s.images[2].clone(), s.images[1].clone()]
        );
        assert_eq!((r.title, r.label), (s.title.clone(), 3));
        assert_eq!(s.reordered(&[0, 1, 2]).unwrap(), s);
        assert!(s.reordered(&[0, 1, 1]).is_err());
        assert!(s.reordered(&[0, 1]).is_err());
    }

    fn desk(f: impl FnOnce(&mut MuiscConfig)) -> Muisc {
        let mut cfg = MuiscConfig::desk();
        cfg.dropout = 0.0;
        cfg.init_std = 0.2;
        f(&mut cfg);
        Muisc::new(cfg).unwrap()
    }

    #[test]
    fn decoder_input_layout() {
        let title = tokens("small red circle cup");
        let din = DecoderInput::training(&title, &tokens("logo image 1"), true).unwrap();
        assert_eq!(din.sep_pos(), 4);
        assert_eq!(din.tokens().len(), 4 + 1 + 3 + 1);
        assert_eq!(*din.tokens().last().unwrap(), vocab::EOT);
        assert_eq!(din.feedback_targets(), &tokens("logo image 1")[..]);
        assert_eq!(din.tokens().iter().filter(|&&t| t == vocab::SEP).count(), 1);

        let din = DecoderInput::inference(&title, false).unwrap();
        assert_eq!(din.tokens(), &[vocab::SEP]);
        assert!(DecoderInput::training(&title, &[], true).is_err());
        assert!(DecoderInput::training(&[vocab::SEP], &[vocab::YES], true).is_err());
    }

    #[test]
    fn sequence_feature_shapes() {
        let m = desk(|_| {});
        let mut ctx = Ctx::new(m.store(), false);
        let imgs = images(m.config(), 1);
        let f = m.encode_image(&mut ctx, &imgs[0]).unwrap();
        assert_eq!(ctx.graph.shape(f), &[17, 64]);
        let fe = m.encode_sequence(&mut ctx, &imgs).unwrap();
        assert_eq!(ctx.graph.shape(fe), &[51, 64]);
        assert!(matches!(m.fuse_sequence(&mut ctx, &[f]), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_images_have_identical_features() {
        let m = desk(|_| {});
        let img = image(m.config(), 3);
        let mut ctx = Ctx::new(m.store(), false);
        let a = m.encode_image(&mut ctx, &img).unwrap();
        let b = m.encode_image(&mut ctx, &img).unwrap();
        assert_eq!(ctx.value(a), ctx.value(b));
    }

    #[test]
    fn without_fusion_blocks_output_is_concat_plus_index() {
        let m = desk(|c| c.hierarchical_fusion = false);
        let imgs = images(m.config(), 4);
        let mut ctx = Ctx::new(m.store(), false);
        let feats: Vec<Var> = imgs.iter().map(|i| m.encode_image(&mut ctx, i).unwrap()).collect();
        let fe = m.fuse_sequence(&mut ctx, &feats).unwrap();
        let idx = m.store().get(m.store().find("fuse.image_index").unwrap()).clone();
        let out = ctx.value(fe).clone();
        for (k, f) in feats.iter().enumerate() {
            let ft = ctx.value(*f);
            for r in 0..17 {
                for c in 0..64 {
                    assert_eq!(out.at(k * 17 + r, c), ft.at(r, c) + idx.at(k, c));
                }
            }
        }
    }

    #[test]
    fn fused_feature_is_order_sensitive() {
        let m = desk(|_| {});
        let imgs = images(m.config(), 5);
        let swapped = vec![imgs[0].clone(), imgs[2].clone(), imgs[1].clone()];
        let run = |imgs: &[Image]| {
            let mut ctx = Ctx::new(m.store(), false);
            let fe = m.encode_sequence(&mut ctx, imgs).unwrap();
            ctx.value(fe).clone()
        };
        let (a, b) = (run(&imgs), run(&swapped));
        // Rows of image 2 in `a` against rows of image 2 in `b` (same pixels,
        // different slot).
        let diff: f64 = (0..17 * 64)
            .map(|i| (a.data()[17 * 64 + i] - b.data()[2 * 17 * 64 + i]).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn decoder_is_causal() {
        let m = desk(|_| {});
        let imgs = images(m.config(), 6);
        let title = tokens("large blue star vase");
        let short = DecoderInput::inference(&title, true).unwrap();
        let long = DecoderInput::training(&title, &tokens("color image 2"), true).unwrap();
        let run = |din: &DecoderInput| {
            let mut ctx = Ctx::new(m.store(), false);
            let out = m.forward(&mut ctx, &imgs, din).unwrap();
            (
                ctx.value(out.hidden.unwrap()).clone(),
                ctx.value(out.class_logits).clone(),
            )
        };
        let (hs, cs) = run(&short);
        let (hl, cl) = run(&long);
        for r in 0..short.tokens().len() {
            for c in 0..64 {
                assert!((hs.at(r, c) - hl.at(r, c)).abs() < 1e-12);
            }
        }
        for (a, b) in cs.data().iter().zip(cl.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_logits_depend_on_images_through_cross_attention() {
        let m = desk(|_| {});
        let title = tokens("small green square box");
        let a = m.predict(&images(m.config(), 7), &title).unwrap();
        let b = m.predict(&images(m.config(), 8), &title).unwrap();
        assert!(a.p_mcc.iter().zip(&b.p_mcc).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn title_conditioning_follows_flag() {
        let imgs = images(&MuiscConfig::desk(), 9);
        for on in [true, false] {
            let m = desk(|c| c.title_input = on);
            let a = m.predict(&imgs, &tokens("small red circle cup")).unwrap();
            let b = m.predict(&imgs, &tokens("large blue star lamp")).unwrap();
            let differs = a.p_mcc.iter().zip(&b.p_mcc).any(|(x, y)| (x - y).abs() > 1e-9);
            assert_eq!(differs, on);
        }
    }

    #[test]
    fn mean_pooled_head_without_decoder() {
        let m = desk(|c| {
            c.use_decoder = false;
            c.nlg_task = false;
            c.title_input = false;
        });
        let imgs = images(m.config(), 10);
        let mut ctx = Ctx::new(m.store(), false);
        let din = DecoderInput::inference(&[], false).unwrap();
        let out = m.forward(&mut ctx, &imgs, &din).unwrap();
        assert!(out.hidden.is_none());
        let pooled = ctx.graph.mean_rows(out.features).unwrap();
        let w = ctx.p(m.store().find("head.cls_w").unwrap());
        let b = ctx.p(m.store().find("head.cls_b").unwrap());
        let l = ctx.graph.matmul(pooled, w).unwrap();
        let l = ctx.graph.add_bias(l, b).unwrap();
        assert_eq!(ctx.value(l), ctx.value(out.class_logits));
    }

    #[test]
    fn uniform_model_losses() {
        // Zero every output head so that all logits are exactly uniform.
        let mut m = desk(|_| {});
        for name in ["dec.lm_w", "head.cls_w"] {
            let id = m.store().find(name).unwrap();
            m.store_mut().get_mut(id).data_mut().fill(0.0);
        }
        let sample = SequenceSample {
            images: images(m.config(), 11),
            title: tokens("small red circle cup"),
            feedback: vec![vocab::YES],
            label: 0,
        };
        let mut ctx = Ctx::new(m.store(), false);
        let parts = m.sample_losses(&mut ctx, &sample).unwrap();
        let nlg = ctx.value(parts.nlg.unwrap()).item();
        let mcc = ctx.value(parts.mcc).item();
        assert!((nlg - 64f64.ln()).abs() < 1e-12);
        assert!((nlg - 4.1589).abs() < 1e-4);
        assert!((mcc - 6f64.ln()).abs() < 1e-12);
        assert!((mcc - 1.7918).abs() < 1e-4);
        let total = ctx.value(parts.total).item();
        assert!((total - (0.1 * nlg + mcc)).abs() < 1e-12);
        assert!((total_loss(4.1589, 1.7918, m.config()) - 2.20769).abs() < 1e-12);
    }

    #[test]
    fn qualified_loss_is_log_prob_of_yes() {
        let m = desk(|_| {});
        let imgs = images(m.config(), 12);
        let title = tokens("medium cyan triangle mug");
        let din = DecoderInput::training(&title, &[vocab::YES], true).unwrap();
        let mut ctx = Ctx::new(m.store(), false);
        let out = m.forward(&mut ctx, &imgs, &din).unwrap();
        let loss = m.loss_nlg(&mut ctx, &out, &din).unwrap();
        let lm = ctx.value(out.lm_logits.unwrap());
        let p = softmax(lm.row(din.sep_pos()));
        assert!((ctx.value(loss).item() + p[vocab::YES].ln()).abs() < 1e-12);
    }

    #[test]
    fn teacher_forced_loss_is_sum_of_conditionals() {
        let m = desk(|_| {});
        let imgs = images(m.config(), 13);
        let title = tokens("small pink star hat");
        let feedback = tokens("blur image");
        let din = DecoderInput::training(&title, &feedback, true).unwrap();
        let mut ctx = Ctx::new(m.store(), false);
        let out = m.forward(&mut ctx, &imgs, &din).unwrap();
        let joint = m.loss_nlg(&mut ctx, &out, &din).unwrap();
        let joint = ctx.value(joint).item();

        // Each term from its own prefix-only forward pass.
        let mut prefix = title.clone();
        prefix.push(vocab::SEP);
        let mut expected = 0.0;
        for &target in &feedback {
            let din = DecoderInput {
                tokens: prefix.clone(),
                sep_pos: title.len(),
                feedback_len: 0,
            };
            let mut ctx = Ctx::new(m.store(), false);
            let out = m.forward(&mut ctx, &imgs, &din).unwrap();
            let lm = ctx.value(out.lm_logits.unwrap());
            expected -= softmax(lm.row(prefix.len() - 1))[target].ln();
            prefix.push(target);
        }
        assert!((joint - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_errors() {
        let m = desk(|_| {});
        let imgs = images(m.config(), 14);
        let din = DecoderInput::inference(&tokens("small red circle cup"), true).unwrap();
        let mut ctx = Ctx::new(m.store(), false);
        let out = m.forward(&mut ctx, &imgs, &din).unwrap();
        assert!(matches!(m.loss_nlg(&mut ctx, &out, &din), Err(Error::Contract(_))));
        assert!(matches!(m.loss_mcc(&mut ctx, &out, 6), Err(Error::Tensor(_))));
        let long: Vec<usize> = std::iter::repeat_n(vocab::id("cup").unwrap(), 40).collect();
        let din = DecoderInput::inference(&long, true).unwrap();
        assert!(matches!(m.forward(&mut ctx, &imgs, &din), Err(Error::Capacity { .. })));
    }

    #[test]
    fn nlg_off_total_equals_mcc() {
        let m = desk(|c| c.nlg_task = false);
        let sample = SequenceSample {
            images: images(m.config(), 15),
            title: tokens("small red circle cup"),
            feedback: tokens("logo image 1"),
            label: 1,
        };
        let mut ctx = Ctx::new(m.store(), false);
        let parts = m.sample_losses(&mut ctx, &sample).unwrap();
        assert_eq!(ctx.value(parts.total).item(), ctx.value(parts.mcc).item());
    }

    #[test]
    fn predict_is_normalised_and_deterministic() {
        let m = desk(|_| {});
        let imgs = images(m.config(), 16);
        let title = tokens("large orange circle bag");
        let a = m.predict(&imgs, &title).unwrap();
        let b = m.predict(&imgs, &title).unwrap();
        assert_eq!(a.p_t.to_bits(), b.p_t.to_bits());
        assert!((a.p_mcc.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&a.p_t));
        assert_eq!(a.p_t, a.p_mcc[0]);
        let fb = m.greedy_feedback(&imgs, &title, 3).unwrap();
        assert!(fb.len() <= 3);
    }

    #[test]
    fn sparse_cross_attention_mask() {
        let m = desk(|c| c.cross_attention = vec![false, true]);
        assert!(m.store().find("dec.block0.cross.wq").is_none());
        assert!(m.store().find("dec.block1.cross.wq").is_some());
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let m = Muisc::new(MuiscConfig::tiny()).unwrap();
        let sample = SequenceSample {
            images: images(m.config(), 17),
            title: tokens("small red circle"),
            feedback: tokens("logo image 2"),
            label: 2,
        };
        let report = grad_check_params(m.store(), |ctx| Ok(m.sample_losses(ctx, &sample)?.total), 1e-5).unwrap();
        assert_eq!(report.len(), m.store().len());
        for (name, err) in report {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
