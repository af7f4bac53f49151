use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;
use crate::model::vit::VitConfig;

/// Init scale for the 64-wide desk models. The usual 0.02 leaves a model
/// this narrow stuck at the class prior for thousands of steps.
pub const DESK_INIT_STD: f64 = 0.2;

/// Architecture, loss weights and ablation switches of the sequence
/// classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuiscConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_blocks: usize,
    pub fusion_blocks: usize,
    pub decoder_blocks: usize,
    /// PFFN hidden width as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Images per target sequence.
    pub seq_len: usize,
    pub max_text_len: usize,
    pub lambda_nlg: f64,
    pub lambda_mcc: f64,
    pub dropout: f64,
    pub pre_norm: bool,
    /// Per decoder block: whether it carries cross-attention. Empty means
    /// every block does.
    pub cross_attention: Vec<bool>,
    pub hierarchical_fusion: bool,
    pub use_decoder: bool,
    pub nlg_task: bool,
    pub title_input: bool,
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for MuiscConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MuiscConfig {
    /// CPU-sized default used for training and tests.
    pub fn desk() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            encoder_blocks: 2,
            fusion_blocks: 1,
            decoder_blocks: 2,
            ffn_mult: 4,
            vocab_size: crate::vocab::SIZE,
            num_classes: 6,
            seq_len: 3,
            max_text_len: 32,
            lambda_nlg: 0.1,
            lambda_mcc: 1.0,
            dropout: 0.0,
            pre_norm: false,
            cross_attention: Vec::new(),
            hierarchical_fusion: true,
            use_decoder: true,
            nlg_task: true,
            title_input: true,
            init_std: DESK_INIT_STD,
            init_seed: 0,
        }
    }

    /// Published model size (ViT-B/16 at 224², 3 decoder blocks, 45
    /// classes). Only ever used for a single forward pass.
    pub fn full() -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            embed_dim: 768,
            num_heads: 12,
            encoder_blocks: 12,
            fusion_blocks: 1,
            decoder_blocks: 3,
            num_classes: 45,
            max_text_len: 64,
            dropout: 0.1,
            init_std: 0.02,
            ..Self::desk()
        }
    }

    /// Smallest configuration exercising every component; used for
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            encoder_blocks: 1,
            fusion_blocks: 1,
            decoder_blocks: 1,
            vocab_size: crate::vocab::SIZE,
            num_classes: 3,
            seq_len: 2,
            max_text_len: 12,
            dropout: 0.0,
            init_std: 0.5,
            ..Self::desk()
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Rows of the fused sequence feature.
    pub fn sequence_rows(&self) -> usize {
        (self.num_patches() + 1) * self.seq_len
    }

    pub fn has_cross_attention(&self, block: usize) -> bool {
        self.cross_attention.get(block).copied().unwrap_or(true)
    }

    pub fn vit(&self) -> VitConfig {
        VitConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            blocks: self.encoder_blocks,
            ffn_mult: self.ffn_mult,
            pre_norm: self.pre_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit().validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < crate::vocab::SIZE {
            return fail(format!(
                "vocab_size {} is smaller than the fixed vocabulary",
                self.vocab_size
            ));
        }
        if self.num_classes < 2 || self.seq_len == 0 || self.max_text_len < 2 {
            return fail("num_classes >= 2, seq_len >= 1 and max_text_len >= 2 are required".into());
        }
        if !(self.lambda_nlg > 0.0 && self.lambda_mcc > 0.0) {
            return fail("loss weights must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.cross_attention.is_empty() && self.cross_attention.len() != self.decoder_blocks {
            return fail("cross_attention needs one flag per decoder block".into());
        }
        if !self.use_decoder && (self.nlg_task || self.title_input) {
            return fail("nlg_task and title_input need use_decoder".into());
        }
        if self.use_decoder && self.decoder_blocks == 0 {
            return fail("use_decoder needs at least one decoder block".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Result<String> {
        kv::to_text(self)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg: Self = kv::merge(&Self::desk(), text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
