//! Optimisation, training loops, metrics and evaluation.

mod eval;
mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eval::{
    ablation_rows, ablation_suite, ablation_table, evaluate, noncompliant_examples, predict_all, primary_examples,
    AblationRow, EvalReport, EvalSample, REFERENCE_AUC,
};
pub use metrics::{recall_at_precision, roc_auc};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{ImageClassifier, Muisc, SequenceSample};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from `grads` (store order).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Contract(format!(
                    "gradient of {} has shape {:?}, parameter has {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, &gi) in grads[k].data().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= c.lr * (update + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// A model that can be trained by [`train`].
pub trait Trainable: Sync {
    type Sample: Sync;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn dropout(&self) -> f64;
    fn sample_loss(&self, ctx: &mut Ctx, sample: &Self::Sample) -> Result<Var>;

    /// Label-preserving random variant of a training sample, if the model
    /// has one.
    fn augment(&self, _sample: &Self::Sample, _seed: u64) -> Result<Option<Self::Sample>> {
        Ok(None)
    }
}

impl Trainable for Muisc {
    type Sample = SequenceSample;

    fn store(&self) -> &ParamStore {
        Muisc::store(self)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        Muisc::store_mut(self)
    }

    fn dropout(&self) -> f64 {
        self.config().dropout
    }

    fn sample_loss(&self, ctx: &mut Ctx, sample: &SequenceSample) -> Result<Var> {
        Ok(self.sample_losses(ctx, sample)?.total)
    }

    /// Shuffles the images after the primary. Stage 1 draws them in random
    /// order and every rule only pins the primary's position.
    fn augment(&self, sample: &SequenceSample, seed: u64) -> Result<Option<SequenceSample>> {
        if sample.images.len() < 3 {
            return Ok(None);
        }
        let mut order: Vec<usize> = (0..sample.images.len()).collect();
        order[1..].shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        sample.reordered(&order).map(Some)
    }
}

/// One image with a binary label, for the Stage-1 classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: bool,
}

impl Trainable for ImageClassifier {
    type Sample = LabeledImage;

    fn store(&self) -> &ParamStore {
        ImageClassifier::store(self)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        ImageClassifier::store_mut(self)
    }

    fn dropout(&self) -> f64 {
        self.config().dropout
    }

    fn sample_loss(&self, ctx: &mut Ctx, sample: &LabeledImage) -> Result<Var> {
        self.loss(ctx, &sample.image, sample.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
    /// Train on [`Trainable::augment`] variants of the samples.
    pub augment: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            seed: 0,
            max_steps: None,
            augment: true,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    /// Training loss of every optimiser step.
    pub batch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` with an empty field when no validation
    /// set was given.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.curve {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, val));
        }
        out
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finaliser over the combined inputs.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradients of one sample, the loss scaled by `weight`.
fn sample_grads<M: Trainable>(
    model: &M,
    sample: &M::Sample,
    weight: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut ctx = Ctx::new(model.store(), true).with_dropout(model.dropout(), dropout_seed);
    let loss = model.sample_loss(&mut ctx, sample)?;
    let value = ctx.value(loss).item();
    let scaled = ctx.graph.scale(loss, weight);
    let grads = ctx.graph.backward(scaled)?;
    Ok((value, ctx.param_grads(&grads)))
}

/// Mean loss with dropout disabled.
pub fn mean_loss<M: Trainable>(model: &M, samples: &[M::Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("mean loss of an empty set".into()));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut ctx = Ctx::new(model.store(), false);
            let l = model.sample_loss(&mut ctx, s)?;
            Ok(ctx.value(l).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mini-batch AdamW training with seeded shuffling. Per-sample gradients
/// are merged in batch order, so results do not depend on thread count.
pub fn train<M: Trainable>(
    model: &mut M,
    data: &[M::Sample],
    val: &[M::Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.store());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                if count > 0 {
                    report.curve.push(epoch_entry(model, val, epoch, sum / count as f64)?);
                }
                break 'epochs;
            }
            let weight = 1.0 / batch.len() as f64;
            let step = report.steps as u64;
            let parts: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let seed = mix(cfg.seed, step + 1, k as u64 + 1);
                    let variant = if cfg.augment {
                        model.augment(&data[i], !seed)?
                    } else {
                        None
                    };
                    sample_grads(model, variant.as_ref().unwrap_or(&data[i]), weight, seed)
                })
                .collect::<Result<_>>()?;
            let mut parts = parts.into_iter();
            let (first_loss, mut grads) = parts.next().expect("batches are non-empty");
            let mut batch_loss = first_loss;
            for (loss, g) in parts {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
                }
            }
            opt.step(model.store_mut(), &grads)?;
            let batch_loss = batch_loss * weight;
            report.batch_losses.push(batch_loss);
            report.steps += 1;
            sum += batch_loss;
            count += 1;
            log::debug!("epoch {epoch} step {} loss {batch_loss:.5}", report.steps);
        }
        report.curve.push(epoch_entry(model, val, epoch, sum / count as f64)?);
        let last = report.curve.last().expect("just pushed");
        log::info!(
            "epoch {} train {:.5} val {:?}",
            epoch + 1,
            last.train_loss,
            last.val_loss
        );
    }
    Ok(report)
}

fn epoch_entry<M: Trainable>(model: &M, val: &[M::Sample], epoch: usize, train_loss: f64) -> Result<EpochLoss> {
    let val_loss = if val.is_empty() {
        None
    } else {
        Some(mean_loss(model, val)?)
    };
    Ok(EpochLoss {
        epoch: epoch + 1,
        train_loss,
        val_loss,
    })
}
