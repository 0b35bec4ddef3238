use crate::data::{SampleBatch, SampleKind};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Train-time image augmentation. All knobs at zero leave batches untouched.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentConfig {
    /// Maximum integer shift in pixels along each axis.
    pub translate_px: usize,
    /// Brightness shift drawn uniformly from `[-delta, delta]`.
    pub brightness_delta: f64,
    pub gauss_noise_sigma: f64,
    /// Random horizontal flip with probability ½.
    pub hflip: bool,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.translate_px == 0 && self.brightness_delta == 0.0 && self.gauss_noise_sigma == 0.0 && !self.hflip
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.brightness_delta) {
            return Err(Error::Config {
                key: "aug.brightness".into(),
                msg: format!("must lie in [0, 1), got {}", self.brightness_delta),
            });
        }
        if !(self.gauss_noise_sigma >= 0.0) || !self.gauss_noise_sigma.is_finite() {
            return Err(Error::Config {
                key: "aug.noise_sigma".into(),
                msg: format!("must be >= 0, got {}", self.gauss_noise_sigma),
            });
        }
        Ok(())
    }
}

/// Shifts a `C×H×W` image by `(dy, dx)` pixels, filling with zeros.
pub fn translate(img: &[f32], c: usize, h: usize, w: usize, dy: i64, dx: i64) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[(ch * h + y as usize) * w + x as usize] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn hflip(img: &mut [f32], w: usize) {
    for row in img.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Adds `delta` to every pixel and clamps to `[0, 1]`.
pub fn adjust_brightness(img: &mut [f32], delta: f32) {
    for v in img {
        *v = (*v + delta).clamp(0.0, 1.0);
    }
}

/// Per-sample random translation, flip, brightness and Gaussian noise.
pub fn augment(batch: &SampleBatch, cfg: &AugmentConfig, rng: &mut Rng) -> Result<SampleBatch> {
    if batch.kind != SampleKind::Image {
        return Err(Error::Contract("augmentation applies to image batches only".into()));
    }
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(batch.clone());
    }
    let shape = batch.inputs.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut out = batch.clone();
    for img in out.inputs.data_mut().chunks_exact_mut(c * h * w) {
        if cfg.translate_px > 0 {
            let t = cfg.translate_px as i64;
            let dy = rng.range_inclusive(-t, t);
            let dx = rng.range_inclusive(-t, t);
            let moved = translate(img, c, h, w, dy, dx);
            img.copy_from_slice(&moved);
        }
        if cfg.hflip && rng.bernoulli(0.5) {
            hflip(img, w);
        }
        if cfg.brightness_delta > 0.0 {
            let d = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta) as f32;
            adjust_brightness(img, d);
        }
        if cfg.gauss_noise_sigma > 0.0 {
            for v in img.iter_mut() {
                *v += (cfg.gauss_noise_sigma * rng.normal()) as f32;
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{class_glyphs, GLYPH_SIZE};
    use crate::tensor::Tensor;

    fn image_batch(n: usize) -> SampleBatch {
        let data: Vec<f32> = (0..n * 3 * 16 * 16).map(|i| (i % 97) as f32 / 96.0).collect();
        SampleBatch {
            kind: SampleKind::Image,
            inputs: Tensor::new(&[n, 3, 16, 16], data).unwrap(),
            labels: (0..n).collect(),
        }
    }

    #[test]
    fn zero_config_is_identity() {
        let b = image_batch(3);
        let mut rng = Rng::seed_from_u64(1);
        let before = rng.clone();
        assert_eq!(augment(&b, &AugmentConfig::default(), &mut rng).unwrap(), b);
        assert_eq!(rng, before);
    }

    #[test]
    fn brightness_clamps_at_one() {
        let mut px = [0.95f32];
        adjust_brightness(&mut px, 0.1);
        assert_eq!(px[0], 1.0);
    }

    #[test]
    fn feature_batches_rejected() {
        let mut b = image_batch(1);
        b.kind = SampleKind::Features;
        let cfg = AugmentConfig {
            translate_px: 1,
            ..Default::default()
        };
        assert!(matches!(
            augment(&b, &cfg, &mut Rng::seed_from_u64(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn preserves_labels_shape_and_range() {
        let b = image_batch(4);
        let cfg = AugmentConfig {
            translate_px: 2,
            brightness_delta: 0.3,
            gauss_noise_sigma: 0.2,
            hflip: true,
        };
        let out = augment(&b, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.labels, b.labels);
        assert_eq!(out.inputs.shape(), b.inputs.shape());
        assert!(out.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out.inputs, b.inputs);
    }

    #[test]
    fn centered_glyph_survives_max_translation() {
        let (glyphs, _) = class_glyphs(8, 0).unwrap();
        let (h, w) = (16, 16);
        let top = (h - GLYPH_SIZE) / 2;
        for g in glyphs {
            let mut img = vec![0.0f32; h * w];
            let mut on = 0;
            for r in 0..GLYPH_SIZE {
                for c in 0..GLYPH_SIZE {
                    if g.cell(r, c) {
                        img[(top + r) * w + top + c] = 1.0;
                        on += 1;
                    }
                }
            }
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let moved = translate(&img, 1, h, w, dy, dx);
                    assert_eq!(moved.iter().filter(|&&v| v == 1.0).count(), on);
                }
            }
        }
    }

    #[test]
    fn hflip_mirrors_rows() {
        let mut img = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        hflip(&mut img, 3);
        assert_eq!(img, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}
