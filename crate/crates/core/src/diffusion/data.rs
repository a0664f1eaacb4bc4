//! Synthetic two-part images.
//!
//! A "face" glyph is a disk of concentric bright rings; a "hand" glyph is a
//! field of oriented parallel stripes on a darker level. Scenes place a face
//! in the left half and a hand in the right half; close-ups fill the frame
//! with a single glyph.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MoleError, Result};
use crate::tensor::Tensor;

const BACKGROUND: f64 = -0.4;
const BACKGROUND_NOISE: f64 = 0.05;
const RING_LEVEL: f64 = 0.45;
const RING_AMPLITUDE: f64 = 0.5;
const STRIPE_LEVEL: f64 = -0.2;
const STRIPE_AMPLITUDE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Scene,
    FaceCloseup,
    HandCloseup,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Scene => "scene",
            SceneKind::FaceCloseup => "face_closeup",
            SceneKind::HandCloseup => "hand_closeup",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scene" => Some(SceneKind::Scene),
            "face_closeup" | "face" => Some(SceneKind::FaceCloseup),
            "hand_closeup" | "hand" => Some(SceneKind::HandCloseup),
            _ => None,
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[H × W]`, values in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub face_present: bool,
    pub hand_present: bool,
    pub kind: SceneKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Region {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }
}

#[derive(Debug, Clone, Copy)]
struct Rings {
    cx: f64,
    cy: f64,
    radius: f64,
    period: f64,
}

impl Rings {
    fn sample(region: Region, rng: &mut ChaCha8Rng) -> Self {
        let cx = region.x0 + region.w / 2.0 + rng.gen_range(-0.75..0.75);
        let cy = region.y0 + region.h / 2.0 + rng.gen_range(-0.75..0.75);
        let radius = 0.45 * region.w.min(region.h) * rng.gen_range(0.85..1.0);
        let period = rng.gen_range(2.5..3.5);
        Self {
            cx,
            cy,
            radius,
            period,
        }
    }

    fn radius_at(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt()
    }

    fn value(&self, x: f64, y: f64) -> Option<f64> {
        let r = self.radius_at(x, y);
        (r <= self.radius).then(|| RING_LEVEL + RING_AMPLITUDE * (2.0 * PI * r / self.period).cos())
    }

    /// Inside the disk and on a bright band.
    fn on_band(&self, x: f64, y: f64) -> bool {
        let r = self.radius_at(x, y);
        r <= self.radius && (2.0 * PI * r / self.period).cos() > 0.5
    }
}

#[derive(Debug, Clone, Copy)]
struct Stripes {
    angle: f64,
    freq: f64,
    phase: f64,
}

impl Stripes {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            angle: rng.gen_range(0.0..PI),
            freq: rng.gen_range(0.2..0.33),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let u = x * self.angle.cos() + y * self.angle.sin();
        STRIPE_LEVEL + STRIPE_AMPLITUDE * (2.0 * PI * self.freq * u + self.phase).sin()
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 8 || !size.is_multiple_of(2) {
        return Err(MoleError::Config(format!(
            "image size must be even and at least 8, got {size}"
        )));
    }
    Ok(())
}

fn render(
    size: usize,
    rng: &mut ChaCha8Rng,
    mut glyph: impl FnMut(f64, f64) -> Option<f64>,
) -> Tensor<f32> {
    Tensor::from_fn([size, size], |k| {
        let (y, x) = ((k / size) as f64 + 0.5, (k % size) as f64 + 0.5);
        let noise: f64 = rng.sample(StandardNormal);
        let v = glyph(x, y).unwrap_or(BACKGROUND) + BACKGROUND_NOISE * noise;
        v.clamp(-1.0, 1.0) as f32
    })
}

/// Face glyph in the left half, hand glyph in the right half.
pub fn gen_scene(size: usize, seed: u64) -> Result<SyntheticScene> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = size as f64 / 2.0;
    let left = Region {
        x0: 0.5,
        y0: 0.5,
        w: half - 1.0,
        h: size as f64 - 1.0,
    };
    let right = Region {
        x0: half + 0.5,
        y0: 0.5,
        w: half - 1.0,
        h: size as f64 - 1.0,
    };
    let rings = Rings::sample(left, &mut rng);
    let stripes = Stripes::sample(&mut rng);
    let image = render(size, &mut rng, |x, y| {
        if left.contains(x, y) {
            rings.value(x, y)
        } else if right.contains(x, y) {
            Some(stripes.value(x, y))
        } else {
            None
        }
    });
    Ok(SyntheticScene {
        image,
        face_present: true,
        hand_present: true,
        kind: SceneKind::Scene,
        seed,
    })
}

pub fn gen_closeup(kind: SceneKind, size: usize, seed: u64) -> Result<SyntheticScene> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = Region {
        x0: 0.0,
        y0: 0.0,
        w: size as f64,
        h: size as f64,
    };
    let (image, face, hand) = match kind {
        SceneKind::FaceCloseup => {
            let rings = Rings::sample(frame, &mut rng);
            (
                render(size, &mut rng, |x, y| rings.value(x, y)),
                true,
                false,
            )
        }
        SceneKind::HandCloseup => {
            let stripes = Stripes::sample(&mut rng);
            (
                render(size, &mut rng, |x, y| Some(stripes.value(x, y))),
                false,
                true,
            )
        }
        SceneKind::Scene => {
            return Err(MoleError::Config(
                "close-up kind must be face_closeup or hand_closeup".into(),
            ))
        }
    };
    Ok(SyntheticScene {
        image,
        face_present: face,
        hand_present: hand,
        kind,
        seed,
    })
}

pub fn generate(kind: SceneKind, size: usize, seed: u64) -> Result<SyntheticScene> {
    match kind {
        SceneKind::Scene => gen_scene(size, seed),
        k => gen_closeup(k, size, seed),
    }
}

/// Pixel mask of the bright ring bands of a face close-up (regenerated from the seed).
pub fn face_band_mask(size: usize, seed: u64) -> Result<Vec<bool>> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = Region {
        x0: 0.0,
        y0: 0.0,
        w: size as f64,
        h: size as f64,
    };
    let rings = Rings::sample(frame, &mut rng);
    Ok((0..size * size)
        .map(|k| rings.on_band((k % size) as f64 + 0.5, (k / size) as f64 + 0.5))
        .collect())
}

/// Pixel mask of a face close-up's background (outside the disk).
pub fn face_background_mask(size: usize, seed: u64) -> Result<Vec<bool>> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = Region {
        x0: 0.0,
        y0: 0.0,
        w: size as f64,
        h: size as f64,
    };
    let rings = Rings::sample(frame, &mut rng);
    Ok((0..size * size)
        .map(|k| rings.radius_at((k % size) as f64 + 0.5, (k / size) as f64 + 0.5) > rings.radius)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masked_mean_abs(img: &Tensor<f32>, mask: &[bool]) -> f64 {
        let vals: Vec<f64> = img
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| f64::from(v.abs()))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn scenes_contain_both_parts_in_range() {
        for seed in 0..5 {
            let s = gen_scene(16, seed).unwrap();
            assert!(s.face_present && s.hand_present);
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_scene(16, 9).unwrap();
        let b = gen_scene(16, 9).unwrap();
        assert_eq!(a.image.to_le_bytes(), b.image.to_le_bytes());
        let c = gen_closeup(SceneKind::HandCloseup, 16, 9).unwrap();
        let d = gen_closeup(SceneKind::HandCloseup, 16, 9).unwrap();
        assert_eq!(c.image.to_le_bytes(), d.image.to_le_bytes());
    }

    #[test]
    fn closeups_hold_one_glyph() {
        let f = gen_closeup(SceneKind::FaceCloseup, 16, 1).unwrap();
        assert!(f.face_present && !f.hand_present);
        let h = gen_closeup(SceneKind::HandCloseup, 16, 1).unwrap();
        assert!(!h.face_present && h.hand_present);
        assert!(gen_closeup(SceneKind::Scene, 16, 1).is_err());
        assert!(gen_scene(7, 1).is_err());
    }

    #[test]
    fn ring_bands_outshine_background() {
        for seed in 0..10 {
            let img = gen_closeup(SceneKind::FaceCloseup, 16, seed).unwrap().image;
            let band = masked_mean_abs(&img, &face_band_mask(16, seed).unwrap());
            let bg = masked_mean_abs(&img, &face_background_mask(16, seed).unwrap());
            assert!(band > bg, "seed {seed}: band {band} bg {bg}");
        }
    }
}
