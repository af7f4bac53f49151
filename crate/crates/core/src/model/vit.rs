use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kv;
use crate::nn::{
    add_positions, linear_head, AttentionConfig, Ctx, EncoderBlock, Initializer, KvSource, ParamId, ParamStore,
};
use crate::tensor::{Tensor, Var};

/// Shape of a ViT image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub pre_norm: bool,
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.embed_dim,
            num_heads: self.num_heads,
            causal: false,
            kv_source: KvSource::SelfAttention,
            pre_norm: self.pre_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        self.attention().validate()
    }
}

/// Patch embedding, CLS token, positions and encoder blocks.
#[derive(Clone, Debug)]
pub struct VitWeights {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl VitWeights {
    pub fn init(store: &mut ParamStore, init: &mut Initializer, prefix: &str, cfg: &VitConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_w: store.add(format!("{prefix}.patch_w"), init.trunc_normal(&[cfg.patch_dim(), d])),
            patch_b: store.add(format!("{prefix}.patch_b"), Tensor::zeros(&[d])),
            cls: store.add(format!("{prefix}.cls"), init.trunc_normal(&[1, d])),
            pos: store.add(format!("{prefix}.pos"), init.trunc_normal(&[cfg.num_patches() + 1, d])),
            blocks: (0..cfg.blocks)
                .map(|i| EncoderBlock::init(store, init, &format!("{prefix}.block{i}"), d, cfg.ffn_mult))
                .collect(),
        }
    }

    /// Encodes one image into `(N^p + 1) × D` features, CLS row first.
    pub fn encode(&self, ctx: &mut Ctx, img: &Image, cfg: &VitConfig) -> Result<Var> {
        if img.height() != cfg.image_height || img.width() != cfg.image_width {
            return Err(Error::Contract(format!(
                "image is {}x{}, encoder expects {}x{}",
                img.height(),
                img.width(),
                cfg.image_height,
                cfg.image_width
            )));
        }
        let patches = Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], img.patchify(cfg.patch_size)?)?;
        let patches = ctx.graph.constant(patches);
        let emb = ctx.graph.matmul(patches, ctx.p(self.patch_w))?;
        let emb = ctx.graph.add_bias(emb, ctx.p(self.patch_b))?;
        let x = ctx.graph.concat_rows(&[ctx.p(self.cls), emb])?;
        let x = add_positions(ctx, x, self.pos)?;
        let mut x = ctx.dropout(x)?;
        let attn = cfg.attention();
        for block in &self.blocks {
            x = block.forward(ctx, x, &attn)?;
        }
        Ok(x)
    }
}

/// Configuration of a binary single-image classifier (primary selection or
/// non-compliance detection).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            embed_dim: 32,
            num_heads: 2,
            blocks: 1,
            ffn_mult: 4,
            dropout: 0.0,
            init_std: crate::model::config::DESK_INIT_STD,
            init_seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn vit(&self) -> VitConfig {
        VitConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            blocks: self.blocks,
            ffn_mult: self.ffn_mult,
            pre_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.vit().validate()
    }
}

/// Tiny ViT with a two-way head on the CLS feature. The positive-class
/// probability is `softmax(logits)[1]`, i.e. a sigmoid of the logit gap.
#[derive(Clone)]
pub struct ImageClassifier {
    cfg: ClassifierConfig,
    store: ParamStore,
    vit: VitWeights,
    head_w: ParamId,
    head_b: ParamId,
}

impl std::fmt::Debug for ImageClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageClassifier")
            .field("cfg", &self.cfg)
            .field("params", &self.store.num_values())
            .finish_non_exhaustive()
    }
}

impl ImageClassifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(cfg.init_seed, cfg.init_std);
        let vit = VitWeights::init(&mut store, &mut init, "vit", &cfg.vit());
        let head_w = store.add("head.w", init.trunc_normal(&[cfg.embed_dim, 2]));
        let head_b = store.add("head.b", Tensor::zeros(&[2]));
        Ok(Self {
            cfg,
            store,
            vit,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
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
        Self::new(kv::merge(&ClassifierConfig::default(), text)?)
    }

    /// Two logits `[1×2]` read from the CLS feature.
    pub fn logits(&self, ctx: &mut Ctx, img: &Image) -> Result<Var> {
        let f = self.vit.encode(ctx, img, &self.cfg.vit())?;
        let cls = ctx.graph.slice_rows(f, 0, 1)?;
        linear_head(ctx, cls, self.head_w, self.head_b)
    }

    pub fn loss(&self, ctx: &mut Ctx, img: &Image, label: bool) -> Result<Var> {
        let logits = self.logits(ctx, img)?;
        Ok(ctx.graph.cross_entropy_logits(logits, &[label as usize])?)
    }

    /// Probability of the positive class.
    pub fn probability(&self, img: &Image) -> Result<f64> {
        let mut ctx = Ctx::new(&self.store, false);
        let logits = self.logits(&mut ctx, img)?;
        let l = ctx.value(logits).data();
        Ok(crate::tensor::sigmoid(l[1] - l[0]))
    }
}
