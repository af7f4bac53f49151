//! Region proposals, patch descriptors and kNN patch matching.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Stage1Config;
use crate::image::Image;

/// Window sides as fractions (in eighths) of the shorter image side.
const SCALES_EIGHTHS: [usize; 3] = [2, 3, 4];
const STRIDE: usize = 2;
const NMS_IOU: f64 = 0.5;
/// Smallest window side in pixels.
pub const MIN_PATCH: usize = 4;
const DESC_SIDE: usize = 16;
const BINS: usize = 8;
pub const DESCRIPTOR_LEN: usize = 4 * BINS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box2 {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Box2 {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn iou(&self, other: &Box2) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = ((x1 - x0) * (y1 - y0)) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionProposal {
    pub bbox: Box2,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDescriptor {
    pub bbox: Box2,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DuplicateMatch {
    pub duplicate: bool,
    /// Matched `(box in a, box in b, distance)`.
    pub pairs: Vec<(Box2, Box2, f64)>,
}

/// Central-difference gradients of a single-channel map.
fn gradients(gray: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| gray[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            gy[i] = (at(y + 1, x) - at(y - 1, x)) / 2.0;
        }
    }
    (gx, gy)
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(v: &[f64], h: usize, w: usize) -> Self {
        let mut s = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += v[y * w + x];
                s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, s }
    }

    fn sum(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let at = |yy: usize, xx: usize| self.s[yy * self.w + xx];
        at(y + h, x + w) - at(y, x + w) - at(y + h, x) + at(y, x)
    }
}

/// Edge-based objectness proposals: square sliding windows at three scales,
/// scored by the gradient mass strictly inside the window minus the mass on
/// its one-pixel border, divided by the perimeter. Windows with a positive
/// score are greedily suppressed at IoU 0.5 and the best `num_proposals`
/// are kept. Order is by descending score, then position.
pub fn propose_regions(img: &Image, cfg: &Stage1Config) -> Vec<RegionProposal> {
    let (h, w) = (img.height(), img.width());
    let (gx, gy) = gradients(&img.gray(), h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let table = Integral::new(&mag, h, w);
    let short = h.min(w);

    let mut windows = Vec::new();
    for eighths in SCALES_EIGHTHS {
        let side = short * eighths / 8;
        if side < MIN_PATCH {
            continue;
        }
        for y in (0..=h - side).step_by(STRIDE) {
            for x in (0..=w - side).step_by(STRIDE) {
                let total = table.sum(x, y, side, side);
                let inner = table.sum(x + 1, y + 1, side - 2, side - 2);
                let score = (2.0 * inner - total) / (2 * side) as f64;
                // Tiny positive scores come from rounding on flat images.
                if score > 1e-9 {
                    windows.push(RegionProposal {
                        bbox: Box2 { x, y, w: side, h: side },
                        score,
                    });
                }
            }
        }
    }
    windows.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.y.cmp(&b.bbox.y))
            .then(a.bbox.x.cmp(&b.bbox.x))
            .then(a.bbox.w.cmp(&b.bbox.w))
    });
    let mut kept: Vec<RegionProposal> = Vec::new();
    for cand in windows {
        if kept.len() == cfg.num_proposals {
            break;
        }
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= NMS_IOU) {
            kept.push(cand);
        }
    }
    kept
}

fn normalize_l1(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
}

/// Colour histograms (8 bins per channel) and a magnitude-weighted unsigned
/// gradient orientation histogram (8 bins) of the box resampled to 16×16.
/// Each histogram sums to one, and the concatenation is scaled to unit
/// L2 norm.
pub fn descriptor(img: &Image, bbox: Box2) -> PatchDescriptor {
    let n = DESC_SIDE;
    let mut patch = vec![[0.0; 3]; n * n];
    for v in 0..n {
        let sy = bbox.y as f64 + (v as f64 + 0.5) * bbox.h as f64 / n as f64 - 0.5;
        for u in 0..n {
            let sx = bbox.x as f64 + (u as f64 + 0.5) * bbox.w as f64 / n as f64 - 0.5;
            patch[v * n + u] = bilinear(img, sy, sx);
        }
    }

    let mut feature = vec![0.0; DESCRIPTOR_LEN];
    for px in &patch {
        for (c, &value) in px.iter().enumerate() {
            let bin = ((value * BINS as f64) as usize).min(BINS - 1);
            feature[c * BINS + bin] += 1.0;
        }
    }
    for c in 0..3 {
        normalize_l1(&mut feature[c * BINS..(c + 1) * BINS]);
    }

    let gray: Vec<f64> = patch.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let (gx, gy) = gradients(&gray, n, n);
    let orient = &mut feature[3 * BINS..];
    for (dx, dy) in gx.iter().zip(&gy) {
        let m = dx.hypot(*dy);
        if m == 0.0 {
            continue;
        }
        let angle = dy.atan2(*dx).rem_euclid(PI);
        let bin = ((angle / PI * BINS as f64) as usize).min(BINS - 1);
        orient[bin] += m;
    }
    normalize_l1(orient);

    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    feature.iter_mut().for_each(|v| *v /= norm);
    PatchDescriptor { bbox, feature }
}

fn bilinear(img: &Image, y: f64, x: f64) -> [f64; 3] {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let p00 = img.pixel_clamped(y0, x0);
    let p01 = img.pixel_clamped(y0, x0 + 1);
    let p10 = img.pixel_clamped(y0 + 1, x0);
    let p11 = img.pixel_clamped(y0 + 1, x0 + 1);
    std::array::from_fn(|c| (1.0 - fy) * ((1.0 - fx) * p00[c] + fx * p01[c]) + fy * ((1.0 - fx) * p10[c] + fx * p11[c]))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices of the `k` nearest rows of `to` (ties to the lower index).
fn knn(from: &[f64], to: &[PatchDescriptor], k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = to
        .iter()
        .enumerate()
        .map(|(j, d)| (distance(from, &d.feature), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Mutual k-nearest-neighbour patch matching. A pair matches when each
/// descriptor is among the other's `k` nearest and their distance is below
/// `tau_dup`; the images are duplicates with at least `min_matches` pairs.
pub fn match_patches(a: &Image, b: &Image, cfg: &Stage1Config) -> DuplicateMatch {
    let describe = |img: &Image| -> Vec<PatchDescriptor> {
        propose_regions(img, cfg)
            .into_iter()
            .map(|p| descriptor(img, p.bbox))
            .collect()
    };
    let (da, db) = (describe(a), describe(b));
    let b_nn: Vec<Vec<usize>> = db.iter().map(|d| knn(&d.feature, &da, cfg.k)).collect();
    let mut pairs = Vec::new();
    for (i, d) in da.iter().enumerate() {
        for j in knn(&d.feature, &db, cfg.k) {
            let dist = distance(&d.feature, &db[j].feature);
            if dist < cfg.tau_dup && b_nn[j].contains(&i) {
                pairs.push((d.bbox, db[j].bbox, dist));
            }
        }
    }
    DuplicateMatch {
        duplicate: pairs.len() >= cfg.min_matches,
        pairs,
    }
}
