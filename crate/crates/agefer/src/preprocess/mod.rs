//! Face preprocessing: detection/crop, eye alignment, grayscale conversion,
//! contrast stretching, and resizing, plus the training-time augmentation
//! stack, a preprocessed-tensor disk cache, and image stores.

mod augment;
mod cache;
mod store;

pub use augment::{augment, AugmentPolicy};
pub(crate) use cache::fnv1a64;
pub use cache::{TensorCache, PIPELINE_VERSION};
pub use store::{DirImageStore, ImageStore, MemImageStore};

use image::DynamicImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the left eye center in a landmark list.
pub const LM_LEFT_EYE: usize = 0;
/// Index of the right eye center in a landmark list.
pub const LM_RIGHT_EYE: usize = 1;
/// Index of the left mouth corner in a landmark list.
pub const LM_MOUTH_LEFT: usize = 2;
/// Index of the right mouth corner in a landmark list.
pub const LM_MOUTH_RIGHT: usize = 3;

/// Canonical landmark positions as fractions of the face frame
/// (x_frac, y_frac), in the order eyes then mouth corners.
pub const LANDMARK_FRACTIONS: [(f64, f64); 4] = [(0.30, 0.40), (0.70, 0.40), (0.35, 0.75), (0.65, 0.75)];

/// A single-channel face image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceImage {
    /// H×W grayscale intensities.
    pub pixels: Array2<f64>,
    /// Tracked landmark points (x, y) in pixel coordinates of `pixels`,
    /// ordered per the `LM_*` indices. `None` when never detected.
    pub landmarks: Option<Vec<(f64, f64)>>,
    /// Names of the processing steps applied, in order.
    pub provenance: Vec<String>,
}

impl FaceImage {
    pub fn new(pixels: Array2<f64>) -> Self {
        FaceImage {
            pixels,
            landmarks: None,
            provenance: Vec::new(),
        }
    }

    /// (height, width)
    pub fn shape(&self) -> (usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1)
    }
}

/// Axis-aligned face bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

/// Face-detection contract. `Ok(None)` means "no face found"; `Err` means
/// the detector itself failed — the pipeline keeps the two cases distinct.
pub trait FaceDetector {
    fn detect_face(&self, image: &DynamicImage) -> std::result::Result<Option<BoundingBox>, String>;
}

/// Landmark-detection contract, run on the cropped face. Must return at
/// least the two eye centers (`LM_LEFT_EYE`, `LM_RIGHT_EYE`); four points
/// including the mouth corners enable the explanation pipeline.
pub trait LandmarkDetector {
    fn detect_landmarks(&self, face: &DynamicImage) -> std::result::Result<Vec<(f64, f64)>, String>;
}

/// The pluggable detector pair used by [`preprocess`].
pub struct DetectorAdapters {
    pub face: Box<dyn FaceDetector + Send + Sync>,
    pub landmarks: Box<dyn LandmarkDetector + Send + Sync>,
}

impl DetectorAdapters {
    /// Stub adapters: whole-frame face box and template landmarks. Suitable
    /// for the bundled synthetic data, where faces fill the frame at known
    /// positions.
    pub fn stub() -> Self {
        DetectorAdapters {
            face: Box::new(FullFrameDetector),
            landmarks: Box::new(TemplateLandmarks),
        }
    }
}

/// Face "detector" that reports the whole frame as the face box.
#[derive(Debug, Clone, Copy)]
pub struct FullFrameDetector;

impl FaceDetector for FullFrameDetector {
    fn detect_face(&self, image: &DynamicImage) -> std::result::Result<Option<BoundingBox>, String> {
        Ok(Some(BoundingBox {
            x: 0.0,
            y: 0.0,
            width: image.width() as f64,
            height: image.height() as f64,
        }))
    }
}

/// Landmark "detector" that places the four template landmarks at fixed
/// fractions of the face frame.
#[derive(Debug, Clone, Copy)]
pub struct TemplateLandmarks;

impl LandmarkDetector for TemplateLandmarks {
    fn detect_landmarks(&self, face: &DynamicImage) -> std::result::Result<Vec<(f64, f64)>, String> {
        let (w, h) = (face.width() as f64, face.height() as f64);
        Ok(LANDMARK_FRACTIONS.iter().map(|&(fx, fy)| (fx * w, fy * h)).collect())
    }
}

/// Landmark "detector" returning a fixed list of absolute points.
#[derive(Debug, Clone)]
pub struct FixedLandmarks(pub Vec<(f64, f64)>);

impl LandmarkDetector for FixedLandmarks {
    fn detect_landmarks(&self, _face: &DynamicImage) -> std::result::Result<Vec<(f64, f64)>, String> {
        Ok(self.0.clone())
    }
}

/// Preprocessing knobs. Defaults follow the training recipe: full min–max
/// contrast stretching and 224×224 output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub output_size: usize,
    /// Percentiles (low, high) mapped to [0, 1] by the contrast stretch.
    pub contrast_percentiles: (f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            output_size: 224,
            contrast_percentiles: (0.0, 100.0),
        }
    }
}

/// How sampling outside the source frame is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OutOfFrame {
    Zero,
    Clamp,
}

/// Bilinear sample of `grid` at fractional position (x, y).
pub(crate) fn bilinear_sample(grid: &Array2<f64>, x: f64, y: f64, oob: OutOfFrame) -> f64 {
    let (h, w) = (grid.nrows() as isize, grid.ncols() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let fetch = |yy: isize, xx: isize| -> f64 {
        match oob {
            OutOfFrame::Zero => {
                if yy < 0 || yy >= h || xx < 0 || xx >= w {
                    0.0
                } else {
                    grid[(yy as usize, xx as usize)]
                }
            }
            OutOfFrame::Clamp => {
                let yy = yy.clamp(0, h - 1) as usize;
                let xx = xx.clamp(0, w - 1) as usize;
                grid[(yy, xx)]
            }
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1);
    let v10 = fetch(y0 + 1, x0);
    let v11 = fetch(y0 + 1, x0 + 1);
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bot * fy
}

/// Rotate `grid` by `angle` radians about its center (positive =
/// counterclockwise in image coordinates), zero-filling uncovered corners.
/// Returns the rotated grid; `map_point` gives the forward point transform.
pub(crate) fn rotate_about_center(grid: &Array2<f64>, angle: f64) -> Array2<f64> {
    let (h, w) = (grid.nrows(), grid.ncols());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    Array2::from_shape_fn((h, w), |(r, c)| {
        // Inverse map: rotate the output pixel back by -angle.
        let dx = c as f64 - cx;
        let dy = r as f64 - cy;
        let sx = cx + cos * dx + sin * dy;
        let sy = cy - sin * dx + cos * dy;
        bilinear_sample(grid, sx, sy, OutOfFrame::Zero)
    })
}

fn rotate_point_about_center(p: (f64, f64), angle: f64, shape: (usize, usize)) -> (f64, f64) {
    let (h, w) = shape;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let dx = p.0 - cx;
    let dy = p.1 - cy;
    (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
}

/// Map the (low, high) intensity percentiles to [0, 1], clamping the rest.
/// A constant image is returned unchanged (guarded divide). With the default
/// (0, 100) percentiles this is plain min–max stretching and is idempotent.
pub fn contrast_stretch(grid: &Array2<f64>, percentiles: (f64, f64)) -> Array2<f64> {
    let (lo_p, hi_p) = percentiles;
    let (lo, hi) = if lo_p <= 0.0 && hi_p >= 100.0 {
        let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    } else {
        let mut sorted: Vec<f64> = grid.iter().cloned().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| -> f64 {
            let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 < sorted.len() {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            } else {
                sorted[i]
            }
        };
        (q(lo_p), q(hi_p))
    };
    let range = hi - lo;
    if range <= 0.0 {
        return grid.clone();
    }
    grid.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Resize to `size`×`size` with bilinear interpolation (pixel-center
/// alignment, edges clamped). A same-size input is returned unchanged.
pub(crate) fn resize_bilinear(grid: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = (grid.nrows(), grid.ncols());
    if h == size && w == size {
        return grid.clone();
    }
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    Array2::from_shape_fn((size, size), |(r, c)| {
        let src_x = (c as f64 + 0.5) * sx - 0.5;
        let src_y = (r as f64 + 0.5) * sy - 0.5;
        bilinear_sample(grid, src_x, src_y, OutOfFrame::Clamp)
    })
}

fn resize_point(p: (f64, f64), from: (usize, usize), size: usize) -> (f64, f64) {
    let (h, w) = from;
    let sx = size as f64 / w as f64;
    let sy = size as f64 / h as f64;
    ((p.0 + 0.5) * sx - 0.5, (p.1 + 0.5) * sy - 0.5)
}

/// Run the full five-step pipeline on a color image:
/// face detection and crop, in-plane rotation aligning the eyes
/// horizontally, luminance grayscale conversion, contrast stretching, and
/// resize to the configured output size. Landmarks are tracked through every
/// geometric step.
pub fn preprocess(image: &DynamicImage, adapters: &DetectorAdapters, config: &PreprocessConfig) -> Result<FaceImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::EmptyImage);
    }

    // (i) Face detection and crop.
    let bbox = adapters
        .face
        .detect_face(image)
        .map_err(Error::DetectorFailure)?
        .ok_or(Error::NoFaceDetected)?;
    let x0 = bbox.x.floor().max(0.0) as u32;
    let y0 = bbox.y.floor().max(0.0) as u32;
    let x1 = ((bbox.x + bbox.width).ceil() as i64).clamp(0, image.width() as i64) as u32;
    let y1 = ((bbox.y + bbox.height).ceil() as i64).clamp(0, image.height() as i64) as u32;
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::DegenerateBox {
            width: x1.saturating_sub(x0) as usize,
            height: y1.saturating_sub(y0) as usize,
        });
    }
    let crop = image.crop_imm(x0, y0, x1 - x0, y1 - y0);
    let (ch, cw) = (crop.height() as usize, crop.width() as usize);

    // (ii) In-plane rotation so the eye centers are horizontal. Landmarks
    // are detected on the crop; rotation happens per color channel so the
    // later grayscale step sees geometrically consistent planes.
    let mut landmarks = adapters
        .landmarks
        .detect_landmarks(&crop)
        .map_err(Error::LandmarkFailure)?;
    if landmarks.len() < 2 {
        return Err(Error::LandmarkFailure(format!(
            "need at least both eye centers, got {} points",
            landmarks.len()
        )));
    }
    let (lx, ly) = landmarks[LM_LEFT_EYE];
    let (rx, ry) = landmarks[LM_RIGHT_EYE];
    let theta = (ry - ly).atan2(rx - lx);

    let rgb = crop.to_rgb32f();
    let mut planes: Vec<Array2<f64>> = (0..3)
        .map(|ch_i| Array2::from_shape_fn((ch, cw), |(r, c)| rgb.get_pixel(c as u32, r as u32).0[ch_i] as f64))
        .collect();
    if theta != 0.0 {
        // Rotating by -theta maps the eye vector onto the horizontal axis.
        for plane in &mut planes {
            *plane = rotate_about_center(plane, -theta);
        }
        for p in &mut landmarks {
            *p = rotate_point_about_center(*p, -theta, (ch, cw));
        }
    }

    // (iii) Grayscale via Rec. 709 luminance weights.
    let gray = {
        let (r, g, b) = (&planes[0], &planes[1], &planes[2]);
        Array2::from_shape_fn((ch, cw), |idx| 0.2126 * r[idx] + 0.7152 * g[idx] + 0.0722 * b[idx])
    };

    // (iv) Contrast stretch to [0, 1].
    let stretched = contrast_stretch(&gray, config.contrast_percentiles);

    // (v) Resize to the square output size.
    let resized = resize_bilinear(&stretched, config.output_size);
    let landmarks: Vec<(f64, f64)> = landmarks
        .into_iter()
        .map(|p| resize_point(p, (ch, cw), config.output_size))
        .collect();

    Ok(FaceImage {
        pixels: resized,
        landmarks: Some(landmarks),
        provenance: vec![
            "face_crop".into(),
            "eye_align".into(),
            "grayscale".into(),
            "contrast_stretch".into(),
            format!("resize_{}", config.output_size),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: u32, h: u32) -> DynamicImage {
        let img = RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 7 + y * 13) % 256) as u8;
            Rgb([v, v.wrapping_add(40), v.wrapping_add(80)])
        });
        DynamicImage::ImageRgb8(img)
    }

    fn adapters_with_eyes(points: Vec<(f64, f64)>) -> DetectorAdapters {
        DetectorAdapters {
            face: Box::new(FullFrameDetector),
            landmarks: Box::new(FixedLandmarks(points)),
        }
    }

    #[test]
    fn pipeline_shape_and_range() {
        for (w, h) in [(300, 200), (224, 224), (50, 90), (700, 700)] {
            let out = preprocess(&gradient_image(w, h), &DetectorAdapters::stub(), &PreprocessConfig::default()).unwrap();
            assert_eq!(out.shape(), (224, 224), "input {w}x{h}");
            assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(out.provenance.len(), 5);
            let min = out.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = out.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(min < 0.02 && max > 0.98, "stretch must span [0,1]: {min}..{max}");
        }
    }

    #[test]
    fn eye_alignment_closed_form() {
        // Eyes at (60,100) and (160,140): rotation by -atan2(40,100) makes
        // them horizontal.
        let adapters = adapters_with_eyes(vec![(60.0, 100.0), (160.0, 140.0)]);
        let out = preprocess(&gradient_image(224, 224), &adapters, &PreprocessConfig::default()).unwrap();
        let lms = out.landmarks.unwrap();
        let dy = (lms[LM_LEFT_EYE].1 - lms[LM_RIGHT_EYE].1).abs();
        assert!(dy < 0.5, "post-rotation eye rows differ by {dy}");
        let dx = lms[LM_RIGHT_EYE].0 - lms[LM_LEFT_EYE].0;
        let expected = (100.0f64 * 100.0 + 40.0 * 40.0).sqrt();
        assert!((dx - expected).abs() < 1e-6, "eye distance must be preserved: {dx} vs {expected}");
    }

    #[test]
    fn eye_alignment_residual_many_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = gradient_image(224, 224);
        for _ in 0..100 {
            let l = (rng.gen_range(20.0..100.0), rng.gen_range(20.0..200.0));
            let r = (rng.gen_range(120.0..200.0), rng.gen_range(20.0..200.0));
            let out = preprocess(&img, &adapters_with_eyes(vec![l, r]), &PreprocessConfig::default()).unwrap();
            let lms = out.landmarks.unwrap();
            let dy = (lms[0].1 - lms[1].1).abs();
            assert!(dy <= 0.5, "eyes {l:?} {r:?} left residual {dy}");
        }
    }

    #[test]
    fn aligned_input_is_fixed_point() {
        // Horizontal eyes and a full-frame box: rotation angle is exactly 0
        // and the crop is the identity, so the output equals plain
        // grayscale + stretch of the input.
        let img = gradient_image(224, 224);
        let out = preprocess(&img, &DetectorAdapters::stub(), &PreprocessConfig::default()).unwrap();

        let rgb = img.to_rgb32f();
        let gray = Array2::from_shape_fn((224, 224), |(r, c)| {
            let p = rgb.get_pixel(c as u32, r as u32).0;
            0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64
        });
        let expected = contrast_stretch(&gray, (0.0, 100.0));
        assert_eq!(out.pixels, expected);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(64, 64, Rgb([128, 128, 128])));
        let out = preprocess(&img, &DetectorAdapters::stub(), &PreprocessConfig::default()).unwrap();
        let first = out.pixels[(0, 0)];
        assert!(out.pixels.iter().all(|&v| v == first));
    }

    #[test]
    fn contrast_stretch_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Array2::from_shape_fn((40, 40), |_| rng.gen_range(0.2..0.7));
        let once = contrast_stretch(&grid, (0.0, 100.0));
        let twice = contrast_stretch(&once, (0.0, 100.0));
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let min = once.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = once.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn contrast_stretch_percentile_clips() {
        let mut vals: Vec<f64> = (0..100).map(|i| i as f64 / 99.0 * 0.5 + 0.25).collect();
        vals[0] = 0.0;
        vals[99] = 1.0;
        let grid = Array2::from_shape_vec((10, 10), vals).unwrap();
        let out = contrast_stretch(&grid, (5.0, 95.0));
        assert_eq!(out.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(out.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        let clipped_low = out.iter().filter(|&&v| v == 0.0).count();
        assert!(clipped_low >= 2, "low tail must clip to 0");
    }

    struct NoFace;
    impl FaceDetector for NoFace {
        fn detect_face(&self, _: &DynamicImage) -> std::result::Result<Option<BoundingBox>, String> {
            Ok(None)
        }
    }

    struct BrokenDetector;
    impl FaceDetector for BrokenDetector {
        fn detect_face(&self, _: &DynamicImage) -> std::result::Result<Option<BoundingBox>, String> {
            Err("model file corrupt".into())
        }
    }

    struct ZeroBox;
    impl FaceDetector for ZeroBox {
        fn detect_face(&self, _: &DynamicImage) -> std::result::Result<Option<BoundingBox>, String> {
            Ok(Some(BoundingBox {
                x: 10.0,
                y: 10.0,
                width: 0.0,
                height: 0.0,
            }))
        }
    }

    #[test]
    fn detector_error_cases_are_distinct() {
        let img = gradient_image(64, 64);
        let config = PreprocessConfig::default();
        let mk = |face: Box<dyn FaceDetector + Send + Sync>| DetectorAdapters {
            face,
            landmarks: Box::new(TemplateLandmarks),
        };
        assert!(matches!(
            preprocess(&img, &mk(Box::new(NoFace)), &config),
            Err(Error::NoFaceDetected)
        ));
        assert!(matches!(
            preprocess(&img, &mk(Box::new(BrokenDetector)), &config),
            Err(Error::DetectorFailure(_))
        ));
        assert!(matches!(
            preprocess(&img, &mk(Box::new(ZeroBox)), &config),
            Err(Error::DegenerateBox { .. })
        ));
    }

    #[test]
    fn too_few_landmarks_rejected() {
        let img = gradient_image(64, 64);
        let adapters = adapters_with_eyes(vec![(10.0, 10.0)]);
        assert!(matches!(
            preprocess(&img, &adapters, &PreprocessConfig::default()),
            Err(Error::LandmarkFailure(_))
        ));
    }

    #[test]
    fn crop_then_resize_tracks_landmarks() {
        // Face box in the middle of a larger frame; template landmarks land
        // at their fractional positions in the 224 output.
        struct MidBox;
        impl FaceDetector for MidBox {
            fn detect_face(&self, _: &DynamicImage) -> std::result::Result<Option<BoundingBox>, String> {
                Ok(Some(BoundingBox {
                    x: 100.0,
                    y: 50.0,
                    width: 112.0,
                    height: 112.0,
                }))
            }
        }
        let adapters = DetectorAdapters {
            face: Box::new(MidBox),
            landmarks: Box::new(TemplateLandmarks),
        };
        let out = preprocess(&gradient_image(400, 300), &adapters, &PreprocessConfig::default()).unwrap();
        let lms = out.landmarks.unwrap();
        for (i, &(fx, fy)) in LANDMARK_FRACTIONS.iter().enumerate() {
            // crop coords (fx*112) scaled by 2 with pixel-center alignment.
            let want_x = (fx * 112.0 + 0.5) * 2.0 - 0.5;
            let want_y = (fy * 112.0 + 0.5) * 2.0 - 0.5;
            assert!((lms[i].0 - want_x).abs() < 1e-9, "landmark {i} x");
            assert!((lms[i].1 - want_y).abs() < 1e-9, "landmark {i} y");
        }
    }

    #[test]
    fn grayscale_uses_luminance_weights() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(32, 32, Rgb([255, 0, 0])));
        // Pure red is constant, so the stretch leaves the luminance value.
        let out = preprocess(&img, &DetectorAdapters::stub(), &PreprocessConfig::default()).unwrap();
        assert!((out.pixels[(5, 5)] - 0.2126).abs() < 1e-3);
    }
}
