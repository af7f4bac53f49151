//! End-to-end flow: Stage-1 filters pick and assemble a sequence, the
//! sequence classifier scores it, and the score is compared to a threshold.

pub mod checkpoint;
pub mod manifest;

use serde::{Deserialize, Serialize};

use crate::error::{AbortReason, Error, Result};
use crate::image::Image;
use crate::model::{ImageClassifier, Muisc};
use crate::stage1::{run_stage1, CandidateSet, Stage1Config};
use crate::vocab;

pub const DEFAULT_THRESHOLD: f64 = 0.3;
/// Longest feedback in the rule world: `<rule> image <k>`. The decoder is
/// never trained to emit `<eot>`, so generation stops here.
const MAX_FEEDBACK_TOKENS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Submitted,
    Rejected,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<AbortReason>,
    /// Candidate indices, primary first. Empty when aborted.
    pub sequence: Vec<usize>,
    pub p_t: Option<f64>,
    pub p_mcc: Vec<f64>,
    pub feedback: Option<String>,
}

impl PipelineResult {
    fn aborted(reason: AbortReason) -> Self {
        Self {
            outcome: Outcome::Aborted,
            reason: Some(reason),
            sequence: Vec::new(),
            p_t: None,
            p_mcc: Vec::new(),
            feedback: None,
        }
    }
}

/// All trained parts the pipeline needs.
pub struct Models {
    pub primary: ImageClassifier,
    pub noncompliant: ImageClassifier,
    pub muisc: Muisc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub stage1: Stage1Config,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Runs both stages on one product. Stage-1 aborts become an `Aborted`
/// result; every other failure is returned as an error.
pub fn run_pipeline(
    candidates: Vec<Image>,
    title: &[usize],
    models: &Models,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PipelineResult> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", cfg.threshold)));
    }
    if candidates.is_empty() {
        return Err(Error::Format("no candidate images".into()));
    }
    let mcfg = models.muisc.config();
    if let Some(img) = candidates
        .iter()
        .find(|i| i.height() != mcfg.image_height || i.width() != mcfg.image_width)
    {
        return Err(Error::Format(format!(
            "candidate is {}x{}, models expect {}x{}",
            img.height(),
            img.width(),
            mcfg.image_height,
            mcfg.image_width
        )));
    }
    let mut set = CandidateSet::new(candidates)?;
    set.score(&models.primary, &models.noncompliant)?;
    let images: Vec<Image> = set.candidates().iter().map(|c| c.image.clone()).collect();
    let out = match run_stage1(set, &cfg.stage1, seed) {
        Ok(out) => out,
        Err(Error::Abort(reason)) => return Ok(PipelineResult::aborted(reason)),
        Err(e) => return Err(e),
    };
    let seq: Vec<Image> = out.sequence.iter().map(|&i| images[i].clone()).collect();
    let pred = models.muisc.predict(&seq, title)?;
    let feedback = if mcfg.use_decoder {
        let tokens = models.muisc.greedy_feedback(&seq, title, MAX_FEEDBACK_TOKENS)?;
        Some(vocab::detokenize(&tokens).ok_or_else(|| Error::Contract("decoder produced an unknown token".into()))?)
    } else {
        None
    };
    let outcome = if pred.p_t > cfg.threshold {
        Outcome::Submitted
    } else {
        Outcome::Rejected
    };
    Ok(PipelineResult {
        outcome,
        reason: None,
        sequence: out.sequence,
        p_t: Some(pred.p_t),
        p_mcc: pred.p_mcc,
        feedback,
    })
}
