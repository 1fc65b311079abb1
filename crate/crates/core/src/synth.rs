//! Synthetic stand-in for a face corpus: a structured "face" pattern (light
//! oval, two dark eyes, a dark mouth bar) on smooth textures, plus scenes
//! with planted patterns for end-to-end detection tests.
//!
//! The pattern is piecewise constant, so a pattern rendered at twice the
//! size has the same edges at twice the spacing.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::detector::Detection;
use crate::error::{DcfError, Result};
use crate::tensor::Tensor;

/// Side of a training window.
pub const WINDOW: usize = 32;

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

/// One labelled 32x32 grey window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == POSITIVE).count()
    }

    /// First `n` samples and the rest.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        (self, Dataset { samples: rest })
    }

    pub fn mean_pixel(&self, label: usize) -> f64 {
        let (sum, n) = self
            .samples
            .iter()
            .filter(|s| s.label == label)
            .fold((0.0, 0usize), |(s, n), x| (s + x.image.as_slice().iter().sum::<f64>(), n + x.image.len()));
        sum / n as f64
    }
}

/// Grey levels and small geometric variations of one pattern instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternStyle {
    pub face: f64,
    pub features: f64,
    pub eye_spread: f64,
    pub mouth_width: f64,
    pub show_face: bool,
    pub show_features: bool,
}

impl PatternStyle {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            face: rng.random_range(0.6..0.9),
            features: rng.random_range(0.02..0.25),
            eye_spread: rng.random_range(0.16..0.2),
            mouth_width: rng.random_range(0.13..0.19),
            show_face: true,
            show_features: true,
        }
    }
}

fn in_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    let a = (u - cu) / ru;
    let b = (v - cv) / rv;
    a * a + b * b <= 1.0
}

/// Grey level of the pattern at normalised coordinates, `None` outside it.
fn pattern_value(u: f64, v: f64, s: &PatternStyle) -> Option<f64> {
    if s.show_features {
        let eye = |cu| in_ellipse(u, v, cu, 0.4, 0.1, 0.075);
        let mouth = (u - 0.5).abs() <= s.mouth_width && (v - 0.72).abs() <= 0.045;
        if eye(0.5 - s.eye_spread) || eye(0.5 + s.eye_spread) || mouth {
            return Some(s.features);
        }
    }
    (s.show_face && in_ellipse(u, v, 0.5, 0.5, 0.4, 0.47)).then_some(s.face)
}

/// Paints a pattern of side `size` with its top-left corner at `(x0, y0)`
/// into a `height x width` canvas, sampling at pixel centres.
pub fn render_pattern(canvas: &mut [f64], width: usize, x0: f64, y0: f64, size: f64, style: &PatternStyle) {
    let height = canvas.len() / width;
    let r0 = y0.floor().max(0.0) as usize;
    let c0 = x0.floor().max(0.0) as usize;
    let r1 = ((y0 + size).ceil().max(0.0) as usize).min(height);
    let c1 = ((x0 + size).ceil().max(0.0) as usize).min(width);
    for r in r0..r1 {
        for c in c0..c1 {
            let u = (c as f64 + 0.5 - x0) / size;
            let v = (r as f64 + 0.5 - y0) / size;
            if let Some(val) = pattern_value(u, v, style) {
                canvas[r * width + c] = val;
            }
        }
    }
}

/// Bilinear value noise on a `cell`-pixel grid plus white noise.
pub fn texture(rng: &mut impl Rng, height: usize, width: usize) -> Vec<f64> {
    let cell = *[3usize, 6, 12, 24].choose(rng).expect("non-empty");
    let mean = rng.random_range(0.2..0.7);
    let amp = rng.random_range(0.03..0.3);
    let sigma: f64 = rng.random_range(0.0..0.04);
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| mean + amp * rng.random_range(-1.0..1.0)).collect();
    let noise = Normal::new(0.0, sigma.max(1e-12)).expect("finite");
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let gy = r as f64 / cell as f64;
        let (iy, fy) = (gy.floor() as usize, gy.fract());
        for c in 0..width {
            let gx = c as f64 / cell as f64;
            let (ix, fx) = (gx.floor() as usize, gx.fract());
            let g = |y: usize, x: usize| grid[y * gw + x];
            let top = g(iy, ix) * (1.0 - fx) + g(iy, ix + 1) * fx;
            let bottom = g(iy + 1, ix) * (1.0 - fx) + g(iy + 1, ix + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy + noise.sample(rng));
        }
    }
    out
}

fn add_noise(canvas: &mut [f64], rng: &mut impl Rng, sigma: f64) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite");
        for v in canvas.iter_mut() {
            *v += n.sample(rng);
        }
    }
}

fn random_blobs(canvas: &mut [f64], width: usize, rng: &mut impl Rng) {
    let height = canvas.len() / width;
    for _ in 0..rng.random_range(1..=5) {
        let value = rng.random_range(0.0..1.0);
        let (cx, cy) = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
        let (rx, ry) = (rng.random_range(2.0..14.0), rng.random_range(2.0..14.0));
        let rect = rng.random_bool(0.4);
        for r in 0..height {
            for c in 0..width {
                let (dx, dy) = ((c as f64 + 0.5 - cx) / rx, (r as f64 + 0.5 - cy) / ry);
                let inside = if rect { dx.abs() <= 1.0 && dy.abs() <= 1.0 } else { dx * dx + dy * dy <= 1.0 };
                if inside {
                    canvas[r * width + c] = value;
                }
            }
        }
    }
}

/// Shifts the window to mean `target`, then clamps to `[0, 1]`.
fn normalise_mean(canvas: &mut [f64], target: f64) {
    let mean = canvas.iter().sum::<f64>() / canvas.len() as f64;
    for v in canvas.iter_mut() {
        *v = (*v - mean + target).clamp(0.0, 1.0);
    }
}

fn positive(rng: &mut impl Rng) -> Vec<f64> {
    let mut canvas = texture(rng, WINDOW, WINDOW);
    let size = rng.random_range(31.0..33.0);
    let centre = (WINDOW as f64 - size) / 2.0;
    let x0 = centre + rng.random_range(-2.0..=2.0);
    let y0 = centre + rng.random_range(-2.0..=2.0);
    render_pattern(&mut canvas, WINDOW, x0, y0, size, &PatternStyle::random(rng));
    canvas
}

/// Relative frequency of the seven negative kinds, in match-arm order.
const NEGATIVE_WEIGHTS: [u32; 7] = [1, 1, 2, 4, 2, 1, 1];

static NEGATIVE_KINDS: std::sync::LazyLock<WeightedIndex<u32>> =
    std::sync::LazyLock::new(|| WeightedIndex::new(NEGATIVE_WEIGHTS).expect("positive weights"));

fn negative(rng: &mut impl Rng) -> Vec<f64> {
    let mut canvas = texture(rng, WINDOW, WINDOW);
    let mut style = PatternStyle::random(rng);
    let w = WINDOW as f64;
    // Partial views of larger and smaller patterns are what a scanning
    // detector meets most, so they are drawn more often.
    let kind = NEGATIVE_KINDS.sample(rng);
    match kind {
        0 => {}
        1 => random_blobs(&mut canvas, WINDOW, rng),
        2 => {
            // Displaced by at least a quarter window along one axis.
            let far = |rng: &mut dyn rand::RngCore| {
                let d = rng.random_range(8.0..24.0);
                if rng.random_bool(0.5) { d } else { -d }
            };
            let (dx, dy) = match rng.random_range(0..3) {
                0 => (far(rng), rng.random_range(-3.0..3.0)),
                1 => (rng.random_range(-3.0..3.0), far(rng)),
                _ => (far(rng), far(rng)),
            };
            render_pattern(&mut canvas, WINDOW, dx, dy, w, &style);
        }
        3 => {
            // Twice the size: the window sees a part of a larger pattern.
            let (x0, y0) = (rng.random_range(-1.25 * w..0.25 * w), rng.random_range(-1.25 * w..0.25 * w));
            render_pattern(&mut canvas, WINDOW, x0, y0, 2.0 * w, &style);
        }
        4 => {
            // Half the size, anywhere in the window.
            let (x0, y0) = (rng.random_range(-4.0..w / 2.0 + 4.0), rng.random_range(-4.0..w / 2.0 + 4.0));
            render_pattern(&mut canvas, WINDOW, x0, y0, w / 2.0, &style);
        }
        5 => {
            // Incomplete pattern in place.
            if rng.random_bool(0.5) {
                style.show_features = false;
            } else {
                style.show_face = false;
            }
            render_pattern(&mut canvas, WINDOW, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), w, &style);
        }
        _ => {
            // Pattern with blobs over it.
            render_pattern(&mut canvas, WINDOW, rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), w, &style);
            random_blobs(&mut canvas, WINDOW, rng);
        }
    }
    canvas
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` windows alternating negative / positive, each drawn from its own
/// stream of `seed`, contrast-jittered, noised and shifted to a random mean.
pub fn generate_dataset(seed: u64, count: usize) -> Result<Dataset> {
    if count < 100 {
        return Err(DcfError::InvalidArgument(format!("dataset needs at least 100 samples, got {count}")));
    }
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let label = i % 2;
            let mut canvas = if label == POSITIVE { positive(&mut rng) } else { negative(&mut rng) };
            let contrast = rng.random_range(0.6..1.3);
            let mean = canvas.iter().sum::<f64>() / canvas.len() as f64;
            for v in canvas.iter_mut() {
                *v = mean + (*v - mean) * contrast;
            }
            let sigma = rng.random_range(0.0..0.05);
            add_noise(&mut canvas, &mut rng, sigma);
            normalise_mean(&mut canvas, rng.random_range(0.35..0.65));
            Sample { image: Tensor::new(WINDOW, WINDOW, 1, canvas).expect("finite pixels"), label }
        })
        .collect();
    Ok(Dataset { samples })
}

/// A grey image with the boxes of its planted patterns.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor<f64>,
    pub boxes: Vec<Detection>,
}

/// `side x side` scene with 1 to 3 non-overlapping patterns, each of side
/// `32` or `64`.
pub fn generate_scene(seed: u64, index: u64, side: usize) -> Scene {
    let mut rng = sample_rng(seed ^ 0x5CE4E, index);
    let mut canvas = texture(&mut rng, side, side);
    let wanted = rng.random_range(1..=3);
    let mut boxes: Vec<Detection> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < wanted && attempts < 200 {
        attempts += 1;
        let size = if rng.random_bool(0.5) { WINDOW } else { 2 * WINDOW } as f64;
        if size > side as f64 {
            continue;
        }
        let x = rng.random_range(0..=side - size as usize) as f64;
        let y = rng.random_range(0..=side - size as usize) as f64;
        let b = Detection { x, y, w: size, h: size, score: 1.0, scale: WINDOW as f64 / size };
        let margin = 4.0;
        let clear = boxes.iter().all(|o| {
            x + size + margin <= o.x || o.x + o.w + margin <= x || y + size + margin <= o.y || o.y + o.h + margin <= y
        });
        if clear {
            render_pattern(&mut canvas, side, x, y, size, &PatternStyle::random(&mut rng));
            boxes.push(b);
        }
    }
    let sigma = rng.random_range(0.0..0.03);
    add_noise(&mut canvas, &mut rng, sigma);
    for v in canvas.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Scene { image: Tensor::new(side, side, 1, canvas).expect("finite pixels"), boxes }
}

/// Recall and precision of `detections` against `truth` under greedy
/// best-score-first matching at `iou` overlap.
pub fn match_detections(detections: &[Detection], truth: &[Detection], iou: f64) -> (usize, Vec<Option<usize>>) {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut taken = vec![false; truth.len()];
    let mut assignment = vec![None; detections.len()];
    let mut hits = 0;
    for d in order {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(t, _)| !taken[*t])
            .map(|(t, b)| (t, detections[d].iou(b)))
            .filter(|&(_, o)| o >= iou)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((t, _)) = best {
            taken[t] = true;
            assignment[d] = Some(t);
            hits += 1;
        }
    }
    (hits, assignment)
}
