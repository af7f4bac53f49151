//! Stage 1: rule-specific filters in front of the sequence classifier.
//!
//! Primary selection and non-compliance filtering use per-image binary
//! classifiers; duplicate pairs are found by patch matching and resolved in
//! favour of the primary or the more compliant image.

mod regions;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use regions::{descriptor, match_patches, propose_regions, Box2, DuplicateMatch, PatchDescriptor, RegionProposal};

use crate::error::{AbortReason, Error, Result};
use crate::image::Image;
use crate::kv;
use crate::model::ImageClassifier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub primary_threshold: f64,
    /// Images with `p_nc` strictly above this are removed; 1.0 keeps all.
    pub nc_threshold: f64,
    pub num_proposals: usize,
    pub k: usize,
    /// Descriptor distance below which a mutual nearest pair matches.
    pub tau_dup: f64,
    /// Matched pairs needed for a duplicate verdict.
    pub min_matches: usize,
    pub seq_len: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            primary_threshold: 0.5,
            nc_threshold: 0.5,
            num_proposals: 32,
            k: 3,
            tau_dup: 0.15,
            min_matches: 12,
            seq_len: 3,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.primary_threshold > 0.0 && self.primary_threshold < 1.0) {
            return Err(Error::Config(format!(
                "primary_threshold must be in (0,1), got {}",
                self.primary_threshold
            )));
        }
        if !(self.nc_threshold > 0.0 && self.nc_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "nc_threshold must be in (0,1], got {}",
                self.nc_threshold
            )));
        }
        if self.num_proposals == 0 || self.k == 0 || self.min_matches == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "num_proposals, k, min_matches and seq_len must be positive".into(),
            ));
        }
        if self.tau_dup.is_nan() || self.tau_dup <= 0.0 {
            return Err(Error::Config("tau_dup must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Result<String> {
        kv::to_text(self)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg: Self = kv::merge(&Self::default(), text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub id: usize,
    pub image: Image,
    pub p_primary: f64,
    pub p_nc: f64,
}

/// Candidate images kept sorted by id.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    candidates: Vec<Candidate>,
    primary: Option<usize>,
}

impl CandidateSet {
    /// Candidates with ids `0..n` and unset scores.
    pub fn new(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Contract("candidate set must not be empty".into()));
        }
        let candidates = images
            .into_iter()
            .enumerate()
            .map(|(id, image)| Candidate {
                id,
                image,
                p_primary: 0.0,
                p_nc: 0.0,
            })
            .collect();
        Ok(Self {
            candidates,
            primary: None,
        })
    }

    /// Candidates with externally computed scores.
    pub fn with_scores(images: Vec<Image>, p_primary: &[f64], p_nc: &[f64]) -> Result<Self> {
        if p_primary.len() != images.len() || p_nc.len() != images.len() {
            return Err(Error::Contract("one score per candidate required".into()));
        }
        let mut set = Self::new(images)?;
        for (c, (&pp, &pn)) in set.candidates.iter_mut().zip(p_primary.iter().zip(p_nc)) {
            if !(0.0..=1.0).contains(&pp) || !(0.0..=1.0).contains(&pn) {
                return Err(Error::Contract(format!(
                    "candidate {} has a probability outside [0,1]",
                    c.id
                )));
            }
            c.p_primary = pp;
            c.p_nc = pn;
        }
        Ok(set)
    }

    /// Fills both probabilities from the two classifiers.
    pub fn score(&mut self, primary: &ImageClassifier, noncompliant: &ImageClassifier) -> Result<()> {
        let scores: Vec<(f64, f64)> = self
            .candidates
            .par_iter()
            .map(|c| Ok((primary.probability(&c.image)?, noncompliant.probability(&c.image)?)))
            .collect::<Result<_>>()?;
        for (c, (pp, pn)) in self.candidates.iter_mut().zip(scores) {
            c.p_primary = pp;
            c.p_nc = pn;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.id).collect()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn get(&self, id: usize) -> Option<&Candidate> {
        self.candidates
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.candidates[i])
    }

    pub fn primary(&self) -> Option<usize> {
        self.primary
    }

    fn retain(&mut self, keep: impl Fn(&Candidate) -> bool) {
        self.candidates.retain(keep);
        if let Some(p) = self.primary {
            if self.get(p).is_none() {
                self.primary = None;
            }
        }
    }
}

/// Training label for the primary classifier: whether pool image `index`
/// opens the approved sequence (given as pool indices).
pub fn label_primary(index: usize, pool_size: usize, sequence: &[usize]) -> Result<bool> {
    if index >= pool_size {
        return Err(Error::Contract(format!(
            "image {index} is not in a pool of {pool_size}"
        )));
    }
    let first = sequence
        .first()
        .ok_or_else(|| Error::Contract("approved sequence is empty".into()))?;
    Ok(index == *first)
}

/// Picks the candidate with the largest `p_primary` (lowest id on ties);
/// it must strictly exceed the threshold.
pub fn select_primary(set: &mut CandidateSet, cfg: &Stage1Config) -> Result<usize> {
    let best = set
        .candidates
        .iter()
        .fold(None::<&Candidate>, |best, c| match best {
            Some(b) if b.p_primary >= c.p_primary => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| Error::Contract("candidate set must not be empty".into()))?;
    if best.p_primary <= cfg.primary_threshold {
        return Err(Error::Abort(AbortReason::NoPrimary));
    }
    let id = best.id;
    set.primary = Some(id);
    Ok(id)
}

/// Removes every candidate with `p_nc` above the threshold. Aborts when
/// fewer than `seq_len` remain. If the selected primary was removed, the
/// primary is selected again among the survivors.
pub fn filter_noncompliant(mut set: CandidateSet, cfg: &Stage1Config) -> Result<CandidateSet> {
    let had_primary = set.primary.is_some();
    set.retain(|c| c.p_nc <= cfg.nc_threshold);
    if set.len() < cfg.seq_len {
        return Err(Error::Abort(AbortReason::TooFew));
    }
    if had_primary && set.primary.is_none() {
        select_primary(&mut set, cfg)?;
    }
    Ok(set)
}

/// Duplicate verdicts over all unordered pairs, as `(lower id, higher id)`
/// in ascending order.
pub fn duplicate_pairs(set: &CandidateSet, cfg: &Stage1Config) -> Vec<(usize, usize)> {
    let c = &set.candidates;
    let pairs: Vec<(usize, usize)> = (0..c.len())
        .flat_map(|i| (i + 1..c.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .filter(|&&(i, j)| match_patches(&c[i].image, &c[j].image, cfg).duplicate)
        .map(|&(i, j)| (c[i].id, c[j].id))
        .collect()
}

/// Drops one image of every duplicate pair: the primary is always kept,
/// otherwise the image with the smaller `p_nc` (lower id on ties). Pairs are
/// visited in ascending order and pairs with an already removed member are
/// skipped, so no duplicate pair survives.
pub fn dedup_resolve(
    mut set: CandidateSet,
    verdicts: &[(usize, usize)],
    primary: usize,
    cfg: &Stage1Config,
) -> Result<CandidateSet> {
    let mut pairs: Vec<(usize, usize)> = verdicts.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut removed = std::collections::BTreeSet::new();
    for (a, b) in pairs {
        if a == b || removed.contains(&a) || removed.contains(&b) {
            continue;
        }
        let (ca, cb) = match (set.get(a), set.get(b)) {
            (Some(ca), Some(cb)) => (ca, cb),
            _ => continue,
        };
        // Never drop the primary; otherwise keep the more compliant image.
        let drop = if b == primary || (a != primary && cb.p_nc < ca.p_nc) {
            a
        } else {
            b
        };
        removed.insert(drop);
    }
    set.retain(|c| !removed.contains(&c.id));
    if set.len() < cfg.seq_len {
        return Err(Error::Abort(AbortReason::TooFew));
    }
    Ok(set)
}

/// Primary first, then `seq_len - 1` other candidates drawn uniformly
/// without replacement, in draw order.
pub fn assemble_sequence(set: &CandidateSet, primary: usize, seq_len: usize, seed: u64) -> Result<Vec<usize>> {
    if set.get(primary).is_none() {
        return Err(Error::Contract(format!("primary {primary} is not a candidate")));
    }
    if seq_len == 0 || set.len() < seq_len {
        return Err(Error::Contract(format!(
            "need {seq_len} candidates to assemble a sequence, have {}",
            set.len()
        )));
    }
    let rest: Vec<usize> = set.ids().into_iter().filter(|&id| id != primary).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = vec![primary];
    seq.extend(
        rand::seq::index::sample(&mut rng, rest.len(), seq_len - 1)
            .into_iter()
            .map(|i| rest[i]),
    );
    Ok(seq)
}

/// Stage-1 result: surviving candidates and the assembled sequence.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub primary: usize,
    pub survivors: Vec<usize>,
    pub duplicates: Vec<(usize, usize)>,
    pub sequence: Vec<usize>,
}

/// Runs all Stage-1 steps on a scored candidate set.
pub fn run_stage1(mut set: CandidateSet, cfg: &Stage1Config, seed: u64) -> Result<Stage1Output> {
    cfg.validate()?;
    select_primary(&mut set, cfg)?;
    let set = filter_noncompliant(set, cfg)?;
    let primary = set
        .primary()
        .ok_or_else(|| Error::Contract("primary lost during filtering".into()))?;
    let duplicates = duplicate_pairs(&set, cfg);
    let set = dedup_resolve(set, &duplicates, primary, cfg)?;
    let sequence = assemble_sequence(&set, primary, cfg.seq_len, seed)?;
    Ok(Stage1Output {
        primary,
        survivors: set.ids(),
        duplicates,
        sequence,
    })
}
