//! Analytic product rendering and rule-violation injection.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RuleClass, WorldConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::stage1::Box2;
use crate::vocab;

pub const BACKGROUND: [f64; 3] = [0.88, 0.88, 0.88];
/// Glyph radius as a fraction of the image side, per size class.
const SIZE_RADIUS: [f64; 3] = [0.26, 0.32, 0.38];
pub const DETAIL_ZOOM: f64 = 2.2;
pub const BACK_SCALE: f64 = 0.8;
pub const BACK_VALUE: f64 = 0.55;
/// Smallest hue change applied by a colour-mismatch violation.
pub const MIN_HUE_SHIFT: f64 = 0.3;
pub const MAX_JITTER: i64 = 2;
/// Smallest mean per-channel difference between a logo and what it covers.
pub const LOGO_CONTRAST: f64 = 0.2;
const SATURATION: f64 = 0.8;
const VALUE: f64 = 0.9;
const STRIPE_DARK: f64 = 0.72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        vocab::SHAPES[self as usize]
    }

    /// Membership test in glyph coordinates (unit radius, y down).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 0.95 * 0.95,
            Shape::Square => u.abs().max(v.abs()) <= 0.8,
            Shape::Triangle => v <= 0.5 && u.abs() <= 0.866 * (v + 1.0) / 1.5,
            Shape::Star => {
                let rho = u.hypot(v);
                let theta = v.atan2(u) + PI / 2.0;
                let c = (1.0 + (5.0 * theta).cos()) / 2.0;
                rho <= 0.42 + 0.58 * c * c
            }
        }
    }
}

/// Hue centres of the eight colour words.
pub const COLOR_HUES: [f64; 8] = [0.0, 0.08, 0.16, 0.33, 0.5, 0.64, 0.77, 0.9];

/// Colour word index nearest to a hue on the hue circle.
pub fn color_index(hue: f64) -> usize {
    let mut best = 0;
    for (i, &c) in COLOR_HUES.iter().enumerate() {
        if hue_distance(hue, c) < hue_distance(hue, COLOR_HUES[best]) {
            best = i;
        }
    }
    best
}

pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductSpec {
    pub shape: Shape,
    /// In `[0, 1)`.
    pub hue: f64,
    /// Size class 0..3 (small, medium, large).
    pub size: usize,
    pub texture_seed: u64,
    pub noun: usize,
}

impl ProductSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        let color = rng.random_range(0..COLOR_HUES.len());
        Self {
            shape: Shape::ALL[rng.random_range(0..4)],
            hue: (COLOR_HUES[color] + rng.random_range(-0.02..0.02)).rem_euclid(1.0),
            size: rng.random_range(0..3),
            texture_seed: rng.random(),
            noun: rng.random_range(0..vocab::NOUNS.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.hue) || self.size >= SIZE_RADIUS.len() || self.noun >= vocab::NOUNS.len() {
            return Err(Error::Contract(format!("invalid product spec {self:?}")));
        }
        Ok(())
    }

    /// `[size, color, shape, noun]` tokens.
    pub fn title(&self) -> Vec<usize> {
        [
            vocab::SIZES[self.size],
            vocab::COLORS[color_index(self.hue)],
            self.shape.word(),
            vocab::NOUNS[self.noun],
        ]
        .iter()
        .map(|w| vocab::id(w).expect("title words are in the vocabulary"))
        .collect()
    }

    /// Stripe angle and period (in glyph radii).
    fn texture(&self) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        (rng.random_range(0.0..PI), rng.random_range(0.3..0.55))
    }
}

/// Camera setup of one view.
#[derive(Clone, Copy, Debug)]
struct View {
    zoom: f64,
    /// Scene point shown at the image centre, in image-side units.
    centre: (f64, f64),
    mirror: bool,
    scale: f64,
    value: f64,
}

const FRONT: View = View {
    zoom: 1.0,
    centre: (0.5, 0.5),
    mirror: false,
    scale: 1.0,
    value: 1.0,
};

const DETAIL: View = View {
    zoom: DETAIL_ZOOM,
    centre: (0.58, 0.56),
    mirror: false,
    scale: 1.0,
    value: 1.0,
};

const BACK: View = View {
    zoom: 1.0,
    centre: (0.5, 0.5),
    mirror: true,
    scale: BACK_SCALE,
    value: BACK_VALUE,
};

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// `(hue, saturation, value)` of an RGB colour.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, max)
}

fn render(spec: &ProductSpec, hue: f64, view: View, cfg: &WorldConfig) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let radius = SIZE_RADIUS[spec.size] * view.scale;
    let (angle, period) = spec.texture();
    let (ca, sa) = (angle.cos(), angle.sin());
    let ss = cfg.supersample.max(1);
    let mut data = Vec::with_capacity(h * w * 3);
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let fx = (px as f64 + (sx as f64 + 0.5) / ss as f64) / side;
                    let fy = (py as f64 + (sy as f64 + 0.5) / ss as f64) / side;
                    let mut x = (fx - 0.5) / view.zoom + view.centre.0;
                    let y = (fy - 0.5) / view.zoom + view.centre.1;
                    if view.mirror {
                        x = 1.0 - x;
                    }
                    let (u, v) = ((x - 0.5) / radius, (y - 0.5) / radius);
                    let rgb = if spec.shape.contains(u, v) {
                        let t = (u * ca + v * sa) / period;
                        let stripe = if t.rem_euclid(1.0) < 0.5 { 1.0 } else { STRIPE_DARK };
                        hsv_to_rgb(hue, SATURATION, VALUE * stripe * view.value)
                    } else {
                        BACKGROUND
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            let n = (ss * ss) as f64;
            data.extend(acc.map(|v| v / n));
        }
    }
    Image::new(h, w, data).expect("rendered size matches").quantized()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub front: Image,
    pub detail: Image,
    pub back: Image,
}

impl Views {
    pub fn in_order(&self) -> [&Image; 3] {
        [&self.front, &self.detail, &self.back]
    }
}

/// Front (whole glyph, centred), detail (zoomed crop) and back (mirrored,
/// smaller, darker glyph) views.
pub fn render_views(spec: &ProductSpec, cfg: &WorldConfig) -> Views {
    render_views_with_hue(spec, spec.hue, cfg)
}

fn render_views_with_hue(spec: &ProductSpec, hue: f64, cfg: &WorldConfig) -> Views {
    Views {
        front: render(spec, hue, FRONT, cfg),
        detail: render(spec, hue, DETAIL, cfg),
        back: render(spec, hue, BACK, cfg),
    }
}

/// 5×5 box filter with replicated borders.
pub fn box_blur(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let mut acc = [0.0; 3];
            for dy in -2..=2isize {
                for dx in -2..=2isize {
                    let p = img.pixel_clamped(y as isize + dy, x as isize + dx);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set_pixel(y, x, acc.map(|v| v / 25.0));
        }
    }
    out.quantized()
}

/// Translation by `(dx, dy)` with replicated borders.
pub fn shift(img: &Image, dx: i64, dy: i64) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set_pixel(
                y,
                x,
                img.pixel_clamped(y as isize - dy as isize, x as isize - dx as isize),
            );
        }
    }
    out
}

/// Random non-zero translation of at most `MAX_JITTER` pixels per axis.
pub fn random_jitter(rng: &mut impl Rng) -> (i64, i64) {
    loop {
        let d = (
            rng.random_range(-MAX_JITTER..=MAX_JITTER),
            rng.random_range(-MAX_JITTER..=MAX_JITTER),
        );
        if d != (0, 0) {
            return d;
        }
    }
}

/// Composites a striped white/red banner into a random corner.
pub fn add_logo(img: &Image, rng: &mut impl Rng) -> (Image, Box2) {
    let side = img.height().min(img.width());
    let (lw, lh) = ((side * 10).div_ceil(32).max(4), (side * 6).div_ceil(32).max(3));
    let margin = 1;
    let corner = rng.random_range(0..4);
    let x = if corner % 2 == 0 {
        margin
    } else {
        img.width() - lw - margin
    };
    let y = if corner < 2 { margin } else { img.height() - lh - margin };
    let bbox = Box2 { x, y, w: lw, h: lh };
    let mut out = img.clone();
    for yy in y..y + lh {
        for xx in x..x + lw {
            let rgb = if (xx - x) / 2 % 2 == 0 {
                [1.0, 1.0, 1.0]
            } else {
                [0.9, 0.08, 0.08]
            };
            out.set_pixel(yy, xx, rgb);
        }
    }
    let out = out.quantized();
    let contrast = region_difference(img, &out, bbox);
    assert!(contrast >= LOGO_CONTRAST, "logo contrast {contrast} below margin");
    (out, bbox)
}

/// Mean absolute per-channel difference inside a box.
pub fn region_difference(a: &Image, b: &Image, bbox: Box2) -> f64 {
    let mut total = 0.0;
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            let (p, q) = (a.pixel(y, x), b.pixel(y, x));
            total += (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>();
        }
    }
    total / (3 * bbox.area()) as f64
}

/// Bounding box of pixels that differ from the background.
pub fn glyph_box(img: &Image) -> Option<Box2> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            if (0..3).any(|c| (p[c] - BACKGROUND[c]).abs() > 0.05) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| Box2 {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Circular mean hue of the saturated pixels.
pub fn dominant_hue(img: &Image) -> Option<f64> {
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (h, s, v) = rgb_to_hsv(img.pixel(y, x));
            if s > 0.3 && v > 0.1 {
                sx += (2.0 * PI * h).cos();
                sy += (2.0 * PI * h).sin();
            }
        }
    }
    (sx != 0.0 || sy != 0.0).then(|| (sy.atan2(sx) / (2.0 * PI)).rem_euclid(1.0))
}

/// A rendered sequence after an injected violation.
#[derive(Clone, Debug)]
pub struct Violation {
    /// The three sequence images.
    pub sequence: Vec<Image>,
    /// 0-based sequence position named in the feedback.
    pub violating: usize,
    /// Sequence positions carrying a logo.
    pub logos: Vec<usize>,
    /// Annotated boxes as `(sequence position, box)`.
    pub boxes: Vec<(usize, Box2)>,
}

/// Applies one rule violation to the clean `[front, detail, back]` sequence.
pub fn inject_violation(
    spec: &ProductSpec,
    views: &Views,
    rule: RuleClass,
    seed: u64,
    cfg: &WorldConfig,
) -> Result<Violation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequence: Vec<Image> = views.in_order().into_iter().cloned().collect();
    let mut logos = Vec::new();
    let mut boxes = Vec::new();
    let violating = match rule {
        RuleClass::Qualified => {
            return Err(Error::Contract(
                "cannot inject a violation for a qualified sample".into(),
            ))
        }
        RuleClass::Logo => {
            let k = rng.random_range(0..3);
            let (img, bbox) = add_logo(&sequence[k], &mut rng);
            sequence[k] = img;
            logos.push(k);
            boxes.push((k, bbox));
            k
        }
        RuleClass::Blur => {
            let k = rng.random_range(0..3);
            sequence[k] = box_blur(&sequence[k]);
            k
        }
        RuleClass::Duplicate => {
            // The primary is never replaced, so the sequence still opens with
            // a front view.
            let target = rng.random_range(1..3);
            let source = [0, 1, 2]
                .into_iter()
                .filter(|&s| s != target)
                .nth(rng.random_range(0..2))
                .unwrap();
            let (dx, dy) = random_jitter(&mut rng);
            assert!(dx.abs() <= MAX_JITTER && dy.abs() <= MAX_JITTER);
            sequence[target] = shift(&sequence[source], dx, dy);
            if let Some(b) = glyph_box(&sequence[source]) {
                boxes.push((source, b));
            }
            if let Some(b) = glyph_box(&sequence[target]) {
                boxes.push((target, b));
            }
            target
        }
        RuleClass::ColorMismatch => {
            let k = rng.random_range(0..3);
            let delta = rng.random_range(MIN_HUE_SHIFT..1.0 - MIN_HUE_SHIFT);
            let hue = (spec.hue + delta).rem_euclid(1.0);
            assert!(hue_distance(hue, spec.hue) >= MIN_HUE_SHIFT - 1e-12);
            let shifted = render_views_with_hue(spec, hue, cfg);
            sequence[k] = shifted.in_order()[k].clone();
            k
        }
        RuleClass::Order => {
            sequence.swap(0, 1);
            0
        }
    };
    Ok(Violation {
        sequence,
        violating,
        logos,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, hue: f64) -> ProductSpec {
        ProductSpec {
            shape,
            hue,
            size: 1,
            texture_seed: 11,
            noun: 0,
        }
    }

    #[test]
    fn hsv_round_trip() {
        for i in 0..20 {
            let h = i as f64 / 20.0;
            let rgb = hsv_to_rgb(h, 0.8, 0.9);
            let (h2, s, v) = rgb_to_hsv(rgb);
            assert!(hue_distance(h, h2) < 1e-9);
            assert!((s - 0.8).abs() < 1e-9 && (v - 0.9).abs() < 1e-9);
        }
    }

    #[test]
    fn views_are_deterministic_and_distinct() {
        let cfg = WorldConfig::default();
        for shape in Shape::ALL {
            let s = spec(shape, 0.33);
            let a = render_views(&s, &cfg);
            assert_eq!(a, render_views(&s, &cfg));
            assert!(a.front.l2_sq(&a.detail) > 0.0);
            assert!(a.front.l2_sq(&a.back) > 0.0);
            assert!(glyph_box(&a.front).is_some());
            assert!(a.front.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hue_moves_mean_channels_monotonically() {
        let cfg = WorldConfig::default();
        let means: Vec<[f64; 3]> = (0..=6)
            .map(|i| {
                render_views(&spec(Shape::Square, i as f64 * 0.05), &cfg)
                    .front
                    .mean_channels()
            })
            .collect();
        // Red to green: the green channel rises, the red channel falls.
        for w in means.windows(2) {
            assert!(w[1][1] >= w[0][1]);
            assert!(w[1][0] <= w[0][0]);
        }
        assert!(means[6][1] > means[0][1] && means[6][0] < means[0][0]);
    }

    #[test]
    fn dominant_hue_matches_title_colour() {
        let cfg = WorldConfig::default();
        for (i, &h) in COLOR_HUES.iter().enumerate() {
            let views = render_views(&spec(Shape::Circle, h), &cfg);
            for img in views.in_order() {
                assert_eq!(color_index(dominant_hue(img).unwrap()), i);
            }
        }
    }

    #[test]
    fn injected_violations() {
        let cfg = WorldConfig::default();
        let s = spec(Shape::Star, 0.64);
        let views = render_views(&s, &cfg);
        for seed in 0..20 {
            let v = inject_violation(&s, &views, RuleClass::Logo, seed, &cfg).unwrap();
            let (k, bbox) = v.boxes[0];
            assert_eq!(k, v.violating);
            assert!(region_difference(views.in_order()[k], &v.sequence[k], bbox) >= LOGO_CONTRAST);

            let v = inject_violation(&s, &views, RuleClass::Blur, seed, &cfg).unwrap();
            assert!(v.sequence[v.violating].l2_sq(views.in_order()[v.violating]) > 0.0);

            let v = inject_violation(&s, &views, RuleClass::Duplicate, seed, &cfg).unwrap();
            assert!(v.violating >= 1);
            assert_eq!(v.boxes.len(), 2);

            let v = inject_violation(&s, &views, RuleClass::ColorMismatch, seed, &cfg).unwrap();
            let h = dominant_hue(&v.sequence[v.violating]).unwrap();
            assert!(hue_distance(h, s.hue) >= 0.25);
            let title_colour = vocab::id(vocab::COLORS[color_index(s.hue)]).unwrap();
            assert_eq!(s.title()[1], title_colour);
            assert_ne!(color_index(h), color_index(s.hue));
        }
        let v = inject_violation(&s, &views, RuleClass::Order, 0, &cfg).unwrap();
        assert_eq!(v.sequence[0], views.detail);
        assert_eq!(v.sequence[1], views.front);
        assert!(inject_violation(&s, &views, RuleClass::Qualified, 0, &cfg).is_err());
    }

    #[test]
    fn shift_and_blur() {
        let img = render_views(&spec(Shape::Triangle, 0.1), &WorldConfig::default()).front;
        let s = shift(&img, 2, -1);
        assert_eq!(s.pixel(10, 12), img.pixel(11, 10));
        assert_eq!(
            box_blur(&Image::filled(8, 8, [0.2, 0.4, 0.6])),
            Image::filled(8, 8, [0.2, 0.4, 0.6]).quantized()
        );
    }
}
