//! Training-time augmentation: flip, rotation, translation, zoom,
//! brightness, and contrast, each with independently sampled parameters and
//! fully deterministic given a seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bilinear_sample, FaceImage, OutOfFrame};

/// Ranges for each augmentation transform. All magnitudes are symmetric
/// around the identity; setting a range to zero (or flip probability to 0)
/// disables that transform exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Maximum in-plane rotation, degrees.
    pub max_rotation_deg: f64,
    /// Maximum translation as a fraction of width/height.
    pub max_translation_frac: f64,
    /// Uniform zoom range (low, high); 1.0 is identity.
    pub zoom_range: (f64, f64),
    /// Maximum additive brightness shift.
    pub max_brightness_shift: f64,
    /// Multiplicative contrast range (low, high); 1.0 is identity.
    pub contrast_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            max_translation_frac: 0.10,
            zoom_range: (0.9, 1.1),
            max_brightness_shift: 0.1,
            contrast_range: (0.8, 1.2),
        }
    }
}

impl AugmentPolicy {
    /// A policy whose every transform is the identity.
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            max_translation_frac: 0.0,
            zoom_range: (1.0, 1.0),
            max_brightness_shift: 0.0,
            contrast_range: (1.0, 1.0),
        }
    }
}

/// Parameters actually sampled for one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AugmentParams {
    flip: bool,
    rotation_deg: f64,
    translate: (f64, f64),
    zoom: f64,
    brightness: f64,
    contrast: f64,
}

fn sample_params(rng: &mut ChaCha8Rng, policy: &AugmentPolicy, shape: (usize, usize)) -> AugmentParams {
    let (h, w) = (shape.0 as f64, shape.1 as f64);
    // Every parameter is drawn unconditionally so the RNG stream does not
    // depend on which transforms a policy enables.
    let flip = rng.gen_bool(policy.flip_prob.clamp(0.0, 1.0));
    let r = policy.max_rotation_deg.abs();
    let rotation_deg = rng.gen_range(-r..=r);
    let t = policy.max_translation_frac.abs();
    let translate = (rng.gen_range(-t..=t) * w, rng.gen_range(-t..=t) * h);
    let zoom = rng.gen_range(policy.zoom_range.0..=policy.zoom_range.1);
    let b = policy.max_brightness_shift.abs();
    let brightness = rng.gen_range(-b..=b);
    let contrast = rng.gen_range(policy.contrast_range.0..=policy.contrast_range.1);
    AugmentParams {
        flip,
        rotation_deg,
        translate,
        zoom,
        brightness,
        contrast,
    }
}

/// Apply the augmentation stack with parameters drawn from `seed`.
///
/// Transforms whose sampled parameter is exactly the identity are skipped,
/// so an identity policy returns a bit-identical copy. Output values are
/// clipped to [0, 1]; shape is never changed. Landmarks, when present, are
/// carried through the geometric transforms.
pub fn augment(image: &FaceImage, seed: u64, policy: &AugmentPolicy) -> FaceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = sample_params(&mut rng, policy, image.shape());
    let (h, w) = image.shape();
    let mut pixels = image.pixels.clone();
    let mut landmarks = image.landmarks.clone();

    if params.flip {
        let flipped = Array2::from_shape_fn((h, w), |(r, c)| pixels[(r, w - 1 - c)]);
        pixels = flipped;
        if let Some(lms) = &mut landmarks {
            for p in lms.iter_mut() {
                p.0 = (w - 1) as f64 - p.0;
            }
        }
    }

    let theta = params.rotation_deg.to_radians();
    let (dx, dy) = params.translate;
    if theta != 0.0 || dx != 0.0 || dy != 0.0 || params.zoom != 1.0 {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = theta.sin_cos();
        let warped = Array2::from_shape_fn((h, w), |(r, c)| {
            // Invert p' = R(theta) * zoom * (p - c) + c + t.
            let px = (c as f64 - cx - dx) / params.zoom;
            let py = (r as f64 - cy - dy) / params.zoom;
            let sx = cx + cos * px + sin * py;
            let sy = cy - sin * px + cos * py;
            bilinear_sample(&pixels, sx, sy, OutOfFrame::Zero)
        });
        pixels = warped;
        if let Some(lms) = &mut landmarks {
            for p in lms.iter_mut() {
                let px = (p.0 - cx) * params.zoom;
                let py = (p.1 - cy) * params.zoom;
                *p = (cx + cos * px - sin * py + dx, cy + sin * px + cos * py + dy);
            }
        }
    }

    if params.brightness != 0.0 {
        pixels.mapv_inplace(|v| (v + params.brightness).clamp(0.0, 1.0));
    }
    if params.contrast != 1.0 {
        pixels.mapv_inplace(|v| ((v - 0.5) * params.contrast + 0.5).clamp(0.0, 1.0));
    }

    let mut provenance = image.provenance.clone();
    provenance.push(format!("augment(seed={seed})"));
    FaceImage {
        pixels,
        landmarks,
        provenance,
    }
}
