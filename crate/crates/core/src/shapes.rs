//! Synthetic colored-shape images with known factors of variation.
//!
//! Every image is a single filled shape centered on a 32x32 gray canvas. The
//! factors are the shape's hue, its size, its outline class and the background
//! brightness. Edges are rendered with a one-pixel linear coverage ramp on the
//! shape's distance function, which makes the factors exactly recoverable from
//! pixels (see [`measure_factors`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const CANVAS: usize = 32;
pub const CHANNELS: usize = 3;
pub const CENTER: usize = 16;
pub const RADIUS_MIN: f32 = 4.0;
pub const RADIUS_MAX: f32 = 10.0;
/// Hue is drawn from `[0, HUE_MAX]` (red through cyan), so it never wraps.
pub const HUE_MAX: f32 = 0.5;
pub const BACKGROUND_MIN: f32 = 0.05;
pub const BACKGROUND_MAX: f32 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeClass {
    Circle,
    Square,
    Diamond,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Diamond];

    pub fn index(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Diamond => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Diamond => "diamond",
        }
    }

    fn norm(self, dx: f32, dy: f32) -> f32 {
        match self {
            ShapeClass::Circle => (dx * dx + dy * dy).sqrt(),
            ShapeClass::Square => dx.abs().max(dy.abs()),
            ShapeClass::Diamond => dx.abs() + dy.abs(),
        }
    }

    /// Norm of the unit diagonal step (1, 1).
    fn diagonal_norm(self) -> f32 {
        self.norm(1.0, 1.0)
    }
}

/// Ground-truth factors of one image. All continuous factors live in `[0, 1]`
/// except hue, which lives in `[0, HUE_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFactors {
    pub hue: f32,
    pub size: f32,
    pub shape: ShapeClass,
    pub background: f32,
}

impl ShapeFactors {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hue: rng.random::<f32>() * HUE_MAX,
            size: rng.random::<f32>(),
            shape: ShapeClass::ALL[rng.random_range(0..3)],
            background: rng.random::<f32>(),
        }
    }

    pub fn radius(&self) -> f32 {
        RADIUS_MIN + self.size * (RADIUS_MAX - RADIUS_MIN)
    }

    pub fn background_level(&self) -> f32 {
        BACKGROUND_MIN + self.background * (BACKGROUND_MAX - BACKGROUND_MIN)
    }

    pub fn color(&self) -> [f32; 3] {
        hsv_to_rgb(self.hue, 1.0, 1.0)
    }

    /// Factor vector in the order used by the oracle encoder.
    pub fn to_vec(&self) -> [f32; 4] {
        [self.hue, self.size, self.shape.index() as f32, self.background]
    }
}

/// Renders an image as channel-major RGB in `[0, 1]`, length `3 * 32 * 32`.
pub fn render(f: &ShapeFactors) -> Vec<f32> {
    let radius = f.radius();
    let bg = f.background_level();
    let color = f.color();
    let mut out = vec![0.0f32; CHANNELS * CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let dx = x as f32 - CENTER as f32;
            let dy = y as f32 - CENTER as f32;
            let cov = (0.5 + radius - f.shape.norm(dx, dy)).clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                out[c * CANVAS * CANVAS + y * CANVAS + x] = bg + cov * (color[c] - bg);
            }
        }
    }
    out
}

/// Maps `[0, 1]` RGB to the model's `[-1, 1]` latent range.
pub fn rgb_to_latent(rgb: &[f32]) -> Vec<f32> {
    rgb.iter().map(|v| 2.0 * v - 1.0).collect()
}

pub fn latent_to_rgb(latent: &[f32]) -> Vec<f32> {
    latent.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
}

/// Factors read back from pixels, continuous where the image is off-manifold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredFactors {
    pub hue: f32,
    pub size: f32,
    pub shape_index: f32,
    pub background: f32,
    /// Diagonal-to-axis extent ratio: 1 for squares, 1/sqrt(2) for circles, 1/2 for diamonds.
    pub diagonal_ratio: f32,
}

impl MeasuredFactors {
    pub fn to_vec(&self) -> [f32; 4] {
        [self.hue, self.size, self.shape_index, self.background]
    }
}

#[inline]
fn px(img: &[f32], c: usize, y: usize, x: usize) -> f32 {
    img[c * CANVAS * CANVAS + y * CANVAS + x]
}

/// Recovers the generating factors from a rendered `[0, 1]` RGB image.
///
/// The background is read from the four 3x3 corner patches and the object
/// color from the center pixel. Along the center row the coverage ramp sums to
/// exactly `2 * radius` for every shape class, which gives the size; the same
/// sum along the diagonal identifies the outline's norm.
pub fn measure_factors(img: &[f32]) -> MeasuredFactors {
    assert_eq!(img.len(), CHANNELS * CANVAS * CANVAS, "expected a 3x32x32 image");
    let mut bg = [0.0f32; 3];
    let corners = [(0usize, 0usize), (0, CANVAS - 3), (CANVAS - 3, 0), (CANVAS - 3, CANVAS - 3)];
    for (c, slot) in bg.iter_mut().enumerate() {
        let mut s = 0.0;
        for &(y0, x0) in &corners {
            for y in y0..y0 + 3 {
                for x in x0..x0 + 3 {
                    s += px(img, c, y, x);
                }
            }
        }
        *slot = s / 36.0;
    }
    let bg_level = (bg[0] + bg[1] + bg[2]) / 3.0;
    let color = [
        px(img, 0, CENTER, CENTER),
        px(img, 1, CENTER, CENTER),
        px(img, 2, CENTER, CENTER),
    ];
    let (hue, _, _) = rgb_to_hsv(color);
    // Report hue in [-0.25, 0.75) so the dataset range sits away from the wrap.
    let hue = if hue >= 0.75 { hue - 1.0 } else { hue };
    let contrast: [f32; 3] = [color[0] - bg[0], color[1] - bg[1], color[2] - bg[2]];
    let denom: f32 = contrast.iter().map(|v| v * v).sum::<f32>().max(1e-12);
    let coverage = |y: usize, x: usize| -> f32 {
        let dot: f32 = (0..3).map(|c| (px(img, c, y, x) - bg[c]) * contrast[c]).sum();
        (dot / denom).clamp(0.0, 1.0)
    };
    let row_sum: f32 = (0..CANVAS).map(|x| coverage(CENTER, x)).sum();
    let radius = 0.5 * row_sum;
    // One diagonal arm from the center: sum_j clamp(0.5 + R - j * n) ~= R / n - 0.5.
    let diag_sum: f32 = (1..CANVAS - CENTER).map(|j| coverage(CENTER + j, CENTER + j)).sum();
    let diagonal_ratio = if radius > 1e-3 { (diag_sum + 0.5) / radius } else { 0.0 };
    let shape_index = ShapeClass::ALL
        .iter()
        .min_by(|a, b| {
            let da = (diagonal_ratio - 1.0 / a.diagonal_norm()).abs();
            let db = (diagonal_ratio - 1.0 / b.diagonal_norm()).abs();
            da.total_cmp(&db)
        })
        .map(|s| s.index())
        .unwrap_or(0);
    MeasuredFactors {
        hue,
        size: (radius - RADIUS_MIN) / (RADIUS_MAX - RADIUS_MIN),
        shape_index: shape_index as f32,
        background: (bg_level - BACKGROUND_MIN) / (BACKGROUND_MAX - BACKGROUND_MIN),
        diagonal_ratio,
    }
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Standard RGB to HSV conversion; hue in `[0, 1)`.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, v)
}

/// Named hues used by captions, in hue order.
pub const COLOR_WORDS: [(&str, f32); 7] = [
    ("red", 0.0),
    ("orange", 1.0 / 12.0),
    ("yellow", 1.0 / 6.0),
    ("lime", 0.25),
    ("green", 1.0 / 3.0),
    ("teal", 5.0 / 12.0),
    ("cyan", 0.5),
];

pub const SIZE_WORDS: [(&str, f32); 3] = [("small", 1.0 / 6.0), ("medium", 0.5), ("large", 5.0 / 6.0)];

pub const BACKGROUND_WORDS: [(&str, f32); 3] = [("dark", 1.0 / 6.0), ("gray", 0.5), ("light", 5.0 / 6.0)];

fn nearest_word(table: &[(&'static str, f32)], value: f32) -> &'static str {
    table
        .iter()
        .min_by(|a, b| (a.1 - value).abs().total_cmp(&(b.1 - value).abs()))
        .map(|(w, _)| *w)
        .expect("non-empty table")
}

fn band_word(table: &[(&'static str, f32)], value: f32) -> &'static str {
    let idx = ((value * table.len() as f32) as usize).min(table.len() - 1);
    table[idx].0
}

/// Which factors a caption mentions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptionMask {
    pub color: bool,
    pub size: bool,
    pub shape: bool,
    pub background: bool,
}

impl CaptionMask {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Self {
        Self {
            color: rng.random_bool(p),
            size: rng.random_bool(p),
            shape: rng.random_bool(p),
            background: rng.random_bool(p),
        }
    }
}

/// Caption template: `a [size] [color] <shape|shape-word> [on a <bg> background]`.
pub fn caption(f: &ShapeFactors, mask: CaptionMask) -> String {
    let mut words = vec!["a"];
    if mask.size {
        words.push(band_word(&SIZE_WORDS, f.size));
    }
    if mask.color {
        words.push(nearest_word(&COLOR_WORDS, f.hue));
    }
    words.push(if mask.shape { f.shape.name() } else { "shape" });
    let mut s = words.join(" ");
    if mask.background {
        s.push_str(" on a ");
        s.push_str(band_word(&BACKGROUND_WORDS, f.background));
        s.push_str(" background");
    }
    s
}

/// Factor targets named by a prompt; unmentioned factors are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptTargets {
    pub hue: Option<f32>,
    pub size: Option<f32>,
    pub shape: Option<ShapeClass>,
    pub background: Option<f32>,
}

impl PromptTargets {
    /// Fills unmentioned factors with the dataset's midpoints.
    pub fn resolve(&self) -> ShapeFactors {
        ShapeFactors {
            hue: self.hue.unwrap_or(HUE_MAX / 2.0),
            size: self.size.unwrap_or(0.5),
            shape: self.shape.unwrap_or(ShapeClass::Circle),
            background: self.background.unwrap_or(0.5),
        }
    }
}

/// Parses the caption vocabulary out of free text. Unknown words are ignored.
pub fn parse_prompt(prompt: &str) -> PromptTargets {
    let mut out = PromptTargets::default();
    let lower = prompt.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    for (i, w) in words.iter().enumerate() {
        if let Some((_, h)) = COLOR_WORDS.iter().find(|(n, _)| n == w) {
            out.hue = Some(*h);
        }
        if let Some((_, s)) = SIZE_WORDS.iter().find(|(n, _)| n == w) {
            out.size = Some(*s);
        }
        if let Some(s) = ShapeClass::ALL.iter().find(|s| s.name() == *w) {
            out.shape = Some(*s);
        }
        if let Some((_, b)) = BACKGROUND_WORDS.iter().find(|(n, _)| n == w) {
            if words.get(i + 1) == Some(&"background") {
                out.background = Some(*b);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hsv_round_trip() {
        for i in 0..50 {
            let h = i as f32 / 100.0;
            let (h2, s, v) = rgb_to_hsv(hsv_to_rgb(h, 1.0, 1.0));
            assert!((h - h2).abs() < 1e-6, "{h} vs {h2}");
            assert!((s - 1.0).abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn measured_factors_match_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let f = ShapeFactors::sample(&mut rng);
            let m = measure_factors(&render(&f));
            assert!((m.hue - f.hue).abs() < 1e-5, "{f:?} {m:?}");
            assert!((m.size - f.size).abs() < 1e-4, "{f:?} {m:?}");
            assert_eq!(m.shape_index as usize, f.shape.index(), "{f:?} {m:?}");
            assert!((m.background - f.background).abs() < 1e-5, "{f:?} {m:?}");
        }
    }

    #[test]
    fn specific_factors_are_recovered() {
        let f = ShapeFactors {
            hue: 0.3,
            size: 0.5,
            shape: ShapeClass::Square,
            background: 0.25,
        };
        let m = measure_factors(&render(&f)).to_vec();
        let want = f.to_vec();
        for (a, b) in m.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-5, "{m:?} vs {want:?}");
        }
    }

    #[test]
    fn captions_parse_back() {
        let f = ShapeFactors {
            hue: 1.0 / 3.0,
            size: 0.9,
            shape: ShapeClass::Diamond,
            background: 0.1,
        };
        let all = CaptionMask {
            color: true,
            size: true,
            shape: true,
            background: true,
        };
        let c = caption(&f, all);
        assert_eq!(c, "a large green diamond on a dark background");
        let t = parse_prompt(&c);
        assert_eq!(t.shape, Some(ShapeClass::Diamond));
        assert_eq!(t.hue, Some(1.0 / 3.0));
        assert_eq!(caption(&f, CaptionMask::default()), "a shape");
        assert_eq!(parse_prompt("a shape"), PromptTargets::default());
    }
}
