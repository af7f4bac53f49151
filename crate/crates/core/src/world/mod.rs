//! Rule world: a deterministic generator of product-image review records.
//!
//! Every product has three clean views. A record either keeps the clean
//! `[front, detail, back]` sequence (qualified) or carries exactly one
//! injected rule violation, and always comes with a candidate pool holding
//! extra distractor images for Stage 1.

mod render;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use render::{
    add_logo, box_blur, color_index, dominant_hue, glyph_box, hsv_to_rgb, hue_distance, inject_violation,
    random_jitter, region_difference, render_views, rgb_to_hsv, shift, ProductSpec, Shape, Views, Violation,
    BACKGROUND, COLOR_HUES, LOGO_CONTRAST, MAX_JITTER, MIN_HUE_SHIFT,
};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::SequenceSample;
use crate::stage1::Box2;
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Qualified,
    Single,
    Pair,
    Multi,
}

/// Sequence classes; the index is the class label and 0 is qualified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleClass {
    Qualified,
    Logo,
    Blur,
    Duplicate,
    #[serde(rename = "color")]
    ColorMismatch,
    Order,
}

impl RuleClass {
    pub const ALL: [RuleClass; 6] = [
        RuleClass::Qualified,
        RuleClass::Logo,
        RuleClass::Blur,
        RuleClass::Duplicate,
        RuleClass::ColorMismatch,
        RuleClass::Order,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn category(self) -> Category {
        match self {
            RuleClass::Qualified => Category::Qualified,
            RuleClass::Logo | RuleClass::Blur => Category::Single,
            RuleClass::Duplicate | RuleClass::ColorMismatch => Category::Pair,
            RuleClass::Order => Category::Multi,
        }
    }

    /// Lower-case class name used in reports.
    pub fn name(self) -> &'static str {
        match self {
            RuleClass::Qualified => "qualified",
            RuleClass::ColorMismatch => "color",
            other => other.word(),
        }
    }

    /// Rule-name word used in feedback ("yes" for qualified).
    pub fn word(self) -> &'static str {
        match self {
            RuleClass::Qualified => "yes",
            RuleClass::Logo => "logo",
            RuleClass::Blur => "blur",
            RuleClass::Duplicate => "duplicate",
            RuleClass::ColorMismatch => "color",
            RuleClass::Order => "order",
        }
    }

    /// Class named by a feedback sequence (its first token).
    pub fn from_feedback(feedback: &[usize]) -> Option<Self> {
        let first = vocab::word(*feedback.first()?)?;
        Self::ALL.into_iter().find(|r| r.word() == first)
    }
}

/// `["yes"]` for qualified, otherwise `[rule, "image", index]` with a
/// 1-based image index.
pub fn make_feedback(rule: RuleClass, violating_one_based: usize) -> Result<Vec<usize>> {
    if rule == RuleClass::Qualified {
        return Ok(vec![vocab::YES]);
    }
    let index = vocab::index_token(violating_one_based)
        .filter(|_| violating_one_based >= 1)
        .ok_or_else(|| Error::Contract(format!("no token for image index {violating_one_based}")))?;
    let rule_token = vocab::id(rule.word()).expect("rule words are in the vocabulary");
    Ok(vec![rule_token, vocab::IMAGE, index])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Category proportions; single and pair mass is split evenly between
/// their two rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub qualified: f64,
    pub single: f64,
    pub pair: f64,
    pub multi: f64,
}

impl Default for Mixture {
    fn default() -> Self {
        Self {
            qualified: 0.71,
            single: 0.12,
            pair: 0.07,
            multi: 0.10,
        }
    }
}

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.qualified, self.single, self.pair, self.multi];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "mixture must be non-negative and sum to 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Per-class probabilities in class-index order.
    pub fn class_probabilities(&self) -> [f64; 6] {
        [
            self.qualified,
            self.single / 2.0,
            self.single / 2.0,
            self.pair / 2.0,
            self.pair / 2.0,
            self.multi,
        ]
    }

    /// Class counts for `n` records by largest remainder.
    pub fn class_counts(&self, n: usize) -> [usize; 6] {
        let probs = self.class_probabilities();
        let mut counts = probs.map(|p| (p * n as f64).floor() as usize);
        let mut rest: Vec<(f64, usize)> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| (p * n as f64 - counts[i] as f64, i))
            .collect();
        rest.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let missing = n - counts.iter().sum::<usize>();
        for &(_, i) in rest.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub supersample: usize,
    pub min_pool: usize,
    pub max_pool: usize,
    pub max_records_per_sku: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            supersample: 3,
            min_pool: 6,
            max_pool: 8,
            max_records_per_sku: 3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16
            || self.width < 16
            || self.min_pool < 4
            || self.max_pool < self.min_pool
            || self.max_records_per_sku == 0
        {
            return Err(Error::Config(format!("invalid world config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleBox {
    /// Pool index.
    pub image: usize,
    pub bbox: Box2,
}

/// Ground truth kept alongside every record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Oracle {
    /// Pool index of the clean front view.
    pub true_primary: usize,
    /// Pool indices of images carrying a logo.
    pub noncompliant: Vec<usize>,
    /// 0-based sequence positions that violate the labelled rule.
    pub violating: Vec<usize>,
    pub boxes: Vec<OracleBox>,
    /// Pool indices of injected near-copies, with the pool index they copy.
    pub duplicates: Vec<(usize, usize)>,
}

/// Everything the generator decides before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordPlan {
    pub id: usize,
    pub sku: usize,
    pub split: Split,
    pub label: RuleClass,
    pub spec: ProductSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReviewRecord {
    pub id: usize,
    pub sku: usize,
    pub split: Split,
    pub label: RuleClass,
    pub title: Vec<usize>,
    pub feedback: Vec<usize>,
    pub pool: Vec<Image>,
    /// Pool indices of the submitted sequence, primary first.
    pub sequence: Vec<usize>,
    pub oracle: Oracle,
}

impl ReviewRecord {
    pub fn sequence_images(&self) -> Vec<Image> {
        self.sequence.iter().map(|&i| self.pool[i].clone()).collect()
    }

    pub fn sample(&self) -> SequenceSample {
        SequenceSample {
            images: self.sequence_images(),
            title: self.title.clone(),
            feedback: self.feedback.clone(),
            label: self.label.index(),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SKU_STREAM: u64 = 1 << 40;
const LAYOUT_STREAM: u64 = 1 << 41;

/// Assigns classes, SKUs and splits. Class counts follow the mixture by
/// largest remainder. Test and validation each receive exactly `n / 10`
/// records (rounded down) from whole SKUs; training gets the rest.
pub fn plan_dataset(n: usize, mixture: &Mixture, seed: u64, cfg: &WorldConfig) -> Result<Vec<RecordPlan>> {
    mixture.validate()?;
    cfg.validate()?;
    let mut layout = rng_for(seed, LAYOUT_STREAM);
    let counts = mixture.class_counts(n);
    let mut labels: Vec<RuleClass> = RuleClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&r, c)| std::iter::repeat_n(r, c))
        .collect();
    labels.shuffle(&mut layout);

    let mut sku_sizes = Vec::new();
    let mut total = 0;
    while total < n {
        let size = layout.random_range(1..=cfg.max_records_per_sku).min(n - total);
        sku_sizes.push(size);
        total += size;
    }
    let mut order: Vec<usize> = (0..sku_sizes.len()).collect();
    order.shuffle(&mut layout);
    let (test_target, val_target) = (n / 10, n / 10);
    let (mut test, mut val) = (0, 0);
    let mut sku_split = vec![Split::Train; sku_sizes.len()];
    for &s in &order {
        let size = sku_sizes[s];
        if test + size <= test_target {
            sku_split[s] = Split::Test;
            test += size;
        } else if val + size <= val_target {
            sku_split[s] = Split::Val;
            val += size;
        }
    }

    let mut plans = Vec::with_capacity(n);
    let mut id = 0;
    for (sku, &size) in sku_sizes.iter().enumerate() {
        let spec = ProductSpec::random(&mut rng_for(seed, SKU_STREAM + sku as u64));
        for _ in 0..size {
            plans.push(RecordPlan {
                id,
                sku,
                split: sku_split[sku],
                label: labels[id],
                spec: spec.clone(),
                seed: rng_for(seed, id as u64).random(),
            });
            id += 1;
        }
    }
    Ok(plans)
}

/// Renders one planned record.
pub fn generate_record(plan: &RecordPlan, cfg: &WorldConfig) -> Result<ReviewRecord> {
    plan.spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let views = render_views(&plan.spec, cfg);
    let clean: Vec<Image> = views.in_order().into_iter().cloned().collect();

    let (seq_images, violating, logos, boxes) = if plan.label == RuleClass::Qualified {
        (clean.clone(), None, Vec::new(), Vec::new())
    } else {
        let v = inject_violation(&plan.spec, &views, plan.label, rng.random(), cfg)?;
        (v.sequence, Some(v.violating), v.logos, v.boxes)
    };

    // Pool before shuffling: clean views, then any new sequence images.
    let mut pool = clean.clone();
    let mut is_logo = vec![false; 3];
    let mut copies: Vec<(usize, usize)> = Vec::new();
    let mut sequence = Vec::with_capacity(seq_images.len());
    for (pos, img) in seq_images.iter().enumerate() {
        let idx = match pool.iter().position(|p| p == img) {
            Some(i) => i,
            None => {
                pool.push(img.clone());
                is_logo.push(logos.contains(&pos));
                pool.len() - 1
            }
        };
        sequence.push(idx);
    }
    if plan.label == RuleClass::Duplicate {
        let target = sequence[violating.expect("violations name an image")];
        let source = boxes
            .iter()
            .find(|(p, _)| sequence[*p] != target)
            .map(|(p, _)| sequence[*p]);
        if let Some(source) = source {
            copies.push((target, source));
        }
    }

    // Distractors: logo copies (non-compliant) alternate with near-copies of
    // the detail or back view.
    let pool_size = rng.random_range(cfg.min_pool..=cfg.max_pool).max(pool.len());
    let mut logo_next = rng.random_bool(0.5);
    let mut extra_boxes = Vec::new();
    while pool.len() < pool_size {
        if logo_next {
            let src = rng.random_range(0..3);
            let (img, bbox) = add_logo(&clean[src], &mut rng);
            extra_boxes.push((pool.len(), bbox));
            pool.push(img);
            is_logo.push(true);
        } else {
            let src = rng.random_range(1..3);
            let (dx, dy) = random_jitter(&mut rng);
            copies.push((pool.len(), src));
            pool.push(shift(&clean[src], dx, dy));
            is_logo.push(false);
        }
        logo_next = !logo_next;
    }

    let mut perm: Vec<usize> = (0..pool.len()).collect();
    perm.shuffle(&mut rng);
    // perm[new] = old; invert to map old indices.
    let mut new_of = vec![0; pool.len()];
    for (new, &old) in perm.iter().enumerate() {
        new_of[old] = new;
    }
    let shuffled: Vec<Image> = perm.iter().map(|&old| pool[old].clone()).collect();

    let mut oracle_boxes: Vec<OracleBox> = boxes
        .iter()
        .map(|&(pos, bbox)| OracleBox {
            image: new_of[sequence[pos]],
            bbox,
        })
        .collect();
    oracle_boxes.extend(
        extra_boxes
            .iter()
            .map(|&(i, bbox)| OracleBox { image: new_of[i], bbox }),
    );
    let mut noncompliant: Vec<usize> = (0..pool.len()).filter(|&i| is_logo[i]).map(|i| new_of[i]).collect();
    noncompliant.sort_unstable();
    let mut duplicates: Vec<(usize, usize)> = copies.iter().map(|&(c, s)| (new_of[c], new_of[s])).collect();
    duplicates.sort_unstable();

    let feedback = make_feedback(plan.label, violating.map_or(0, |v| v + 1))?;
    debug_assert_eq!(RuleClass::from_feedback(&feedback), Some(plan.label));
    Ok(ReviewRecord {
        id: plan.id,
        sku: plan.sku,
        split: plan.split,
        label: plan.label,
        title: plan.spec.title(),
        feedback,
        pool: shuffled,
        sequence: sequence.iter().map(|&i| new_of[i]).collect(),
        oracle: Oracle {
            true_primary: new_of[0],
            noncompliant,
            violating: violating.into_iter().collect(),
            boxes: oracle_boxes,
            duplicates,
        },
    })
}

/// Plans and renders `n` records; output order is by id regardless of
/// thread scheduling.
pub fn generate_dataset(n: usize, mixture: &Mixture, seed: u64, cfg: &WorldConfig) -> Result<Vec<ReviewRecord>> {
    let plans = plan_dataset(n, mixture, seed, cfg)?;
    plans.par_iter().map(|p| generate_record(p, cfg)).collect()
}

/// Test-split record ids per rule category, each padded with the same
/// number of randomly chosen qualified test records.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsets {
    pub single: Vec<usize>,
    pub pair: Vec<usize>,
    pub multi: Vec<usize>,
}

impl Subsets {
    pub fn get(&self, category: Category) -> Option<&[usize]> {
        match category {
            Category::Single => Some(&self.single),
            Category::Pair => Some(&self.pair),
            Category::Multi => Some(&self.multi),
            Category::Qualified => None,
        }
    }
}

/// Builds the balanced category subsets from `(id, split, label)` triples.
pub fn balanced_subsets(records: impl IntoIterator<Item = (usize, Split, RuleClass)>, seed: u64) -> Subsets {
    let test: Vec<(usize, RuleClass)> = records
        .into_iter()
        .filter(|r| r.1 == Split::Test)
        .map(|r| (r.0, r.2))
        .collect();
    let qualified: Vec<usize> = test
        .iter()
        .filter(|r| r.1 == RuleClass::Qualified)
        .map(|r| r.0)
        .collect();
    let mut rng = rng_for(seed, LAYOUT_STREAM + 1);
    let mut build = |cat: Category| {
        let mut ids: Vec<usize> = test.iter().filter(|r| r.1.category() == cat).map(|r| r.0).collect();
        let take = ids.len().min(qualified.len());
        ids.extend(
            rand::seq::index::sample(&mut rng, qualified.len(), take)
                .into_iter()
                .map(|i| qualified[i]),
        );
        ids.sort_unstable();
        ids
    };
    Subsets {
        single: build(Category::Single),
        pair: build(Category::Pair),
        multi: build(Category::Multi),
    }
}
