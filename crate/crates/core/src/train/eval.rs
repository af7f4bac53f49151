use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{recall_at_precision, roc_auc};
use super::{train, LabeledImage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Muisc, MuiscConfig, Prediction, SequenceSample};
use crate::stage1::label_primary;
use crate::world::{Category, ReviewRecord, RuleClass, Subsets};

/// A test sample with the record id used by the category subsets.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: usize,
    pub sample: SequenceSample,
}

impl From<&ReviewRecord> for EvalSample {
    fn from(r: &ReviewRecord) -> Self {
        Self {
            id: r.id,
            sample: r.sample(),
        }
    }
}

/// Predictions in input order.
pub fn predict_all(model: &Muisc, samples: &[SequenceSample]) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|s| model.predict(&s.images, &s.title)).collect()
}

/// Flat evaluation summary. Serialises to a JSON object of named numbers;
/// confusion counts appear as `confusion_<true>_<predicted>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub auc: f64,
    pub r_at_p80: f64,
    pub r_at_p85: f64,
    pub r_at_p90: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc_single: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc_pair: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc_multi: Option<f64>,
    pub mcc_accuracy: f64,
    #[serde(flatten)]
    pub confusion: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn category_auc(&self, c: Category) -> Option<f64> {
        match c {
            Category::Single => self.auc_single,
            Category::Pair => self.auc_pair,
            Category::Multi => self.auc_multi,
            Category::Qualified => None,
        }
    }

    pub fn confusion_count(&self, truth: RuleClass, predicted: RuleClass) -> f64 {
        self.confusion
            .get(&confusion_key(truth, predicted))
            .copied()
            .unwrap_or(0.0)
    }
}

fn confusion_key(truth: RuleClass, predicted: RuleClass) -> String {
    format!("confusion_{}_{}", truth.name(), predicted.name())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Binary AUC and recall at precision 0.8/0.85/0.9 over the whole test set
/// (score `p_t`, positive = qualified), AUC on each category subset, and
/// multi-class confusion counts.
pub fn evaluate(model: &Muisc, test: &[EvalSample], subsets: &Subsets) -> Result<EvalReport> {
    let samples: Vec<SequenceSample> = test.iter().map(|e| e.sample.clone()).collect();
    let preds = predict_all(model, &samples)?;
    report_from_predictions(test, &preds, subsets)
}

pub(crate) fn report_from_predictions(
    test: &[EvalSample],
    preds: &[Prediction],
    subsets: &Subsets,
) -> Result<EvalReport> {
    let scores: Vec<f64> = preds.iter().map(|p| p.p_t).collect();
    let labels: Vec<bool> = test.iter().map(|e| e.sample.label == 0).collect();
    let by_id: HashMap<usize, usize> = test.iter().enumerate().map(|(i, e)| (e.id, i)).collect();

    let subset_auc = |cat: Category| -> Option<f64> {
        let ids = subsets.get(cat)?;
        let idx: Vec<usize> = ids.iter().filter_map(|id| by_id.get(id).copied()).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        match roc_auc(&s, &l) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{cat:?} subset AUC omitted: {e}");
                None
            }
        }
    };

    let mut confusion = BTreeMap::new();
    for t in RuleClass::ALL {
        for p in RuleClass::ALL {
            confusion.insert(confusion_key(t, p), 0.0);
        }
    }
    let mut correct = 0usize;
    for (e, p) in test.iter().zip(preds) {
        let truth = RuleClass::from_index(e.sample.label)
            .ok_or_else(|| Error::Contract(format!("label {} out of range", e.sample.label)))?;
        let pred = RuleClass::from_index(argmax(&p.p_mcc))
            .ok_or_else(|| Error::Contract("model has more classes than the rule world".into()))?;
        correct += (truth == pred) as usize;
        *confusion
            .get_mut(&confusion_key(truth, pred))
            .expect("all keys inserted") += 1.0;
    }

    Ok(EvalReport {
        samples: test.len(),
        auc: roc_auc(&scores, &labels)?,
        r_at_p80: recall_at_precision(&scores, &labels, 0.8)?,
        r_at_p85: recall_at_precision(&scores, &labels, 0.85)?,
        r_at_p90: recall_at_precision(&scores, &labels, 0.9)?,
        auc_single: subset_auc(Category::Single),
        auc_pair: subset_auc(Category::Pair),
        auc_multi: subset_auc(Category::Multi),
        mcc_accuracy: correct as f64 / test.len().max(1) as f64,
        confusion,
    })
}

/// Primary-classifier examples: every pool image of every qualified
/// record, positive iff it opens the approved sequence.
pub fn primary_examples(records: &[ReviewRecord]) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.label == RuleClass::Qualified) {
        for (i, img) in r.pool.iter().enumerate() {
            out.push(LabeledImage {
                image: img.clone(),
                label: label_primary(i, r.pool.len(), &r.sequence)?,
            });
        }
    }
    Ok(out)
}

/// Non-compliance examples: every pool image, positive iff it carries a
/// logo.
pub fn noncompliant_examples(records: &[ReviewRecord]) -> Vec<LabeledImage> {
    records
        .iter()
        .flat_map(|r| {
            r.pool.iter().enumerate().map(|(i, img)| LabeledImage {
                image: img.clone(),
                label: r.oracle.noncompliant.contains(&i),
            })
        })
        .collect()
}

/// Published ablation AUCs, for reference only.
pub const REFERENCE_AUC: [f64; 5] = [0.764, 0.778, 0.780, 0.792, 0.800];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub hierarchical_fusion: bool,
    pub use_decoder: bool,
    pub nlg_task: bool,
    pub title_input: bool,
    pub ref_auc: f64,
    pub final_train_loss: f64,
    pub report: EvalReport,
}

/// The five cumulative flag settings, from plain late fusion to the full
/// model.
pub fn ablation_rows(base: &MuiscConfig) -> Vec<(String, MuiscConfig)> {
    let names = [
        "late-fusion mcc",
        "+ hierarchical fusion",
        "+ encoder-decoder",
        "+ nlg task",
        "+ title input",
    ];
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut c = base.clone();
            c.hierarchical_fusion = i >= 1;
            c.use_decoder = i >= 2;
            c.nlg_task = i >= 3;
            c.title_input = i >= 4;
            (name.to_string(), c)
        })
        .collect()
}

/// Trains and evaluates every ablation row with the same data and seed.
pub fn ablation_suite(
    base: &MuiscConfig,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    test: &[EvalSample],
    subsets: &Subsets,
    tcfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    ablation_rows(base)
        .into_iter()
        .zip(REFERENCE_AUC)
        .map(|((name, cfg), ref_auc)| {
            log::info!("ablation row: {name}");
            let mut model = Muisc::new(cfg.clone())?;
            let report = train(&mut model, train_set, val_set, tcfg)?;
            Ok(AblationRow {
                name,
                hierarchical_fusion: cfg.hierarchical_fusion,
                use_decoder: cfg.use_decoder,
                nlg_task: cfg.nlg_task,
                title_input: cfg.title_input,
                ref_auc,
                final_train_loss: report.curve.last().map_or(f64::NAN, |e| e.train_loss),
                report: evaluate(&model, test, subsets)?,
            })
        })
        .collect()
}

fn flag(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Plain-text comparison table. Reference values are published figures, for comparison only.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("row                     hier dec  nlg  title  auc    single pair   multi  ref_auc\n");
    for r in rows {
        out.push_str(&format!(
            "{:<24}{:<5}{:<5}{:<5}{:<7}{:<7.3}{:<7}{:<7}{:<7}{:.3}\n",
            r.name,
            flag(r.hierarchical_fusion),
            flag(r.use_decoder),
            flag(r.nlg_task),
            flag(r.title_input),
            r.report.auc,
            opt(r.report.auc_single),
            opt(r.report.auc_pair),
            opt(r.report.auc_multi),
            r.ref_auc
        ));
    }
    out
}
