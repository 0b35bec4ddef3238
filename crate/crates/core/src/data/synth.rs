//! Synthetic "local glyph" images.
//!
//! Each class owns one 4×4 binary glyph. An image is a 16×16 RGB canvas with a
//! dark random background, the bright class glyph at a uniformly random
//! position, and dimmer distractor glyphs (shared by all classes) at other
//! non-overlapping positions. Colors are jittered per image and per glyph, so
//! the only class evidence is the shape of one small patch.

use std::collections::HashSet;

use crate::data::{Dataset, SampleKind};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const GLYPH_SIZE: usize = 4;
pub const MAX_CLASSES: usize = 16;
const IMAGE_SIZE: usize = 16;
const DISTRACTOR_GLYPHS: usize = 4;
const DISTRACTORS_PER_IMAGE: usize = 2;
const MIN_HAMMING: u32 = 6;

/// A 4×4 binary pattern, bit `r*4 + c` set when cell `(r, c)` is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Glyph(pub u16);

impl Glyph {
    pub fn cell(&self, r: usize, c: usize) -> bool {
        self.0 >> (r * GLYPH_SIZE + c) & 1 == 1
    }

    pub fn hamming(&self, other: &Glyph) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    fn spans_box(&self) -> bool {
        let rows = (0..4).filter(|&r| (0..4).any(|c| self.cell(r, c))).count();
        let cols = (0..4).filter(|&c| (0..4).any(|r| self.cell(r, c))).count();
        rows == 4 && cols == 4
    }
}

fn pick_glyphs(count: usize, rng: &mut Rng) -> Vec<Glyph> {
    let mut out: Vec<Glyph> = Vec::with_capacity(count);
    while out.len() < count {
        let g = Glyph(rng.next_u64() as u16);
        let on = g.0.count_ones();
        if !(6..=10).contains(&on) || !g.spans_box() {
            continue;
        }
        if out.iter().all(|o| o.hamming(&g) >= MIN_HAMMING) {
            out.push(g);
        }
    }
    out
}

/// Class glyphs followed by distractor glyphs, all pairwise at Hamming
/// distance ≥ 6. The bound is re-verified exhaustively before returning.
pub fn class_glyphs(k: usize, seed: u64) -> Result<(Vec<Glyph>, Vec<Glyph>)> {
    if !(2..=MAX_CLASSES).contains(&k) {
        return Err(Error::Contract(format!(
            "synthetic glyph classes must be in 2..={MAX_CLASSES}, got {k}"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed ^ 0x6c79_7068_5f67_6c79);
    let all = pick_glyphs(k + DISTRACTOR_GLYPHS, &mut rng);
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if a.hamming(b) < MIN_HAMMING {
                return Err(Error::Contract(format!("glyphs {a:?} and {b:?} too similar")));
            }
        }
    }
    let distractors = all[k..].to_vec();
    let mut classes = all;
    classes.truncate(k);
    Ok((classes, distractors))
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    // one pixel of clearance keeps neighbouring glyphs from touching
    let span = GLYPH_SIZE + 1;
    a.0 < b.0 + span && b.0 < a.0 + span && a.1 < b.1 + span && b.1 < a.1 + span
}

/// Brightness range of the class glyph.
const GLYPH_LEVEL: (f64, f64) = (0.8, 1.0);
/// Distractors are dimmer so they read as background texture.
const DISTRACTOR_LEVEL: (f64, f64) = (0.3, 0.5);
const BACKGROUND_LEVEL: (f64, f64) = (0.0, 0.1);
/// Per-channel jitter around a drawn brightness level.
const TINT: f64 = 0.2;

fn glyph_color(level: (f64, f64), rng: &mut Rng) -> [f64; 3] {
    let base = rng.uniform(level.0, level.1);
    std::array::from_fn(|_| base - rng.uniform(0.0, TINT))
}

fn render(class_glyph: Glyph, distractors: &[Glyph], rng: &mut Rng) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let max_pos = (n - GLYPH_SIZE) as u64 + 1;
    let base = rng.uniform(BACKGROUND_LEVEL.0, BACKGROUND_LEVEL.1);
    let background: Vec<f64> = (0..3).map(|_| base + rng.uniform(-TINT / 4.0, TINT / 4.0)).collect();
    let mut img: Vec<f64> = (0..3).flat_map(|c| std::iter::repeat(background[c]).take(n * n)).collect();

    let stamp = |img: &mut Vec<f64>, g: Glyph, at: (usize, usize), color: [f64; 3]| {
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                if g.cell(r, c) {
                    for (ch, &col) in color.iter().enumerate() {
                        img[ch * n * n + (at.0 + r) * n + at.1 + c] = col;
                    }
                }
            }
        }
    };

    let mut placed: Vec<(usize, usize)> = Vec::new();
    let pos = (rng.below(max_pos) as usize, rng.below(max_pos) as usize);
    stamp(&mut img, class_glyph, pos, glyph_color(GLYPH_LEVEL, rng));
    placed.push(pos);

    for _ in 0..DISTRACTORS_PER_IMAGE {
        let g = distractors[rng.below(distractors.len() as u64) as usize];
        for _attempt in 0..64 {
            let p = (rng.below(max_pos) as usize, rng.below(max_pos) as usize);
            if placed.iter().all(|&q| !overlaps(p, q)) {
                stamp(&mut img, g, p, glyph_color(DISTRACTOR_LEVEL, rng));
                placed.push(p);
                break;
            }
        }
    }
    img.into_iter().map(quantize).collect()
}

/// Generates `n_train` and `n_test` images per class for `k` classes.
///
/// Samples are stored class-major. Pixel values lie on the 1/255 grid so the
/// images survive an 8-bit PPM round trip exactly. No test image equals any
/// training image.
pub fn synth_glyphs(k: usize, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (glyphs, distractors) = class_glyphs(k, seed)?;
    let mut root = Rng::seed_from_u64(seed);
    let mut train_rng = root.fork();
    let mut test_rng = root.fork();

    let class_names: Vec<String> = (0..k).map(|c| format!("class_{c:02}")).collect();
    let make = |per_class: usize, rng: &mut Rng, exclude: &HashSet<Vec<u32>>| {
        let mut data = Vec::with_capacity(k * per_class * 3 * IMAGE_SIZE * IMAGE_SIZE);
        let mut labels = Vec::with_capacity(k * per_class);
        let mut seen = HashSet::new();
        for (label, &g) in glyphs.iter().enumerate() {
            for _ in 0..per_class {
                let img = loop {
                    let img = render(g, &distractors, rng);
                    let key: Vec<u32> = img.iter().map(|v| v.to_bits()).collect();
                    if !exclude.contains(&key) {
                        seen.insert(key);
                        break img;
                    }
                };
                data.extend(img);
                labels.push(label);
            }
        }
        let ds = Dataset {
            kind: SampleKind::Image,
            sample_shape: [3, IMAGE_SIZE, IMAGE_SIZE],
            data,
            labels,
            class_names: class_names.clone(),
        };
        (ds, seen)
    };

    let (train, train_keys) = make(n_train, &mut train_rng, &HashSet::new());
    let (test, _) = make(n_test, &mut test_rng, &train_keys);
    Ok((train, test))
}
