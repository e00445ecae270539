//! Synthetic face-like dataset generator with controllable age bias.
//!
//! Images are grayscale composites: a face oval with eye/mouth features at
//! the canonical landmark positions, an age-scaled wrinkle texture, one
//! mirror-symmetric "signature" pattern per expression class, optional
//! confounder blending (a class's signature mixed toward another class's in
//! one age group), and seeded noise. The generator is fully deterministic:
//! the same spec produces byte-identical images and manifests.

use std::collections::BTreeMap;

use image::{DynamicImage, GrayImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{AgeGroup, AgeSource, DatasetManifest, Expression, SampleRecord, Split};
use crate::preprocess::{MemImageStore, LANDMARK_FRACTIONS, LM_LEFT_EYE, LM_RIGHT_EYE};

/// Sample count for one (expression, age-group) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub expression: Expression,
    pub group: AgeGroup,
    pub count: usize,
}

/// Blend one group's true-class signature toward a confounder class.
/// `blend` is the confounder share: 0 leaves the class untouched, 1 replaces
/// its signature entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionInjection {
    pub group: AgeGroup,
    pub truth: Expression,
    pub confounder: Expression,
    pub blend: f64,
}

/// Full recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise (pixels are in [0,1]).
    pub noise_std: f64,
    /// Peak brightness added by a class signature.
    pub signature_amplitude: f64,
    /// Wrinkle ripple amplitude at age 90; scales linearly with age/90.
    pub wrinkle_amplitude: f64,
    /// Age-progressive softening of the class signatures: the Gaussian
    /// sigma at age 90, as a fraction of the image side (0 disables it).
    /// Older faces render their expression textures with less definition,
    /// so sparse old-age training cells genuinely under-cover their own
    /// appearance range.
    pub texture_fade: f64,
    pub train_cells: Vec<CellSpec>,
    pub test_cells: Vec<CellSpec>,
    pub injections: Vec<ConfusionInjection>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 224,
            seed: 0,
            noise_std: 0.02,
            signature_amplitude: 0.4,
            wrinkle_amplitude: 0.25,
            texture_fade: 0.0,
            train_cells: Vec::new(),
            test_cells: Vec::new(),
            injections: Vec::new(),
        }
    }
}

fn all_cells(count: usize) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for expression in Expression::ALL {
        for group in AgeGroup::ALL {
            cells.push(CellSpec {
                expression,
                group,
                count,
            });
        }
    }
    cells
}

impl SynthSpec {
    /// Every (expression, age-group) cell gets the same count.
    pub fn balanced(per_cell: usize, test_per_cell: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            train_cells: all_cells(per_cell),
            test_cells: all_cells(test_per_cell),
            ..SynthSpec::default()
        }
    }

    /// The bundled demonstration scenario: children and adults get
    /// `per_cell` training samples per cell, the elderly group only
    /// `elderly_per_cell`, and elderly-neutral faces carry a sadness-leaning
    /// confounder signature. Test sets stay balanced so per-group
    /// evaluation is on equal footing.
    pub fn demo_bias(per_cell: usize, elderly_per_cell: usize, test_per_cell: usize, blend: f64, seed: u64) -> SynthSpec {
        let mut train_cells = all_cells(per_cell);
        for cell in &mut train_cells {
            if cell.group == AgeGroup::Elderly {
                cell.count = elderly_per_cell;
            }
        }
        SynthSpec {
            seed,
            texture_fade: 0.017,
            train_cells,
            test_cells: all_cells(test_per_cell),
            injections: vec![ConfusionInjection {
                group: AgeGroup::Elderly,
                truth: Expression::Neutral,
                confounder: Expression::Sadness,
                blend,
            }],
            ..SynthSpec::default()
        }
    }
}

/// A generated dataset: one training manifest, one test manifest per age
/// group, and the in-memory image store all of their `image_ref`s resolve in.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: DatasetManifest,
    pub test_manifests: BTreeMap<AgeGroup, DatasetManifest>,
    pub images: MemImageStore,
}

/// Inclusive pixel bounding box (rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRegion {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl PixelRegion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row <= self.row1 && col >= self.col0 && col <= self.col1
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)
    }
}

/// The region stamp of a class signature at the given image size: 1 inside
/// the class's patch, 0 outside.
///
/// Every region is a function of (|x - cx|, y) only, so a horizontal flip of
/// the image maps each region exactly onto itself: flip augmentation cannot
/// erase class evidence. The seven regions are pairwise disjoint and clear
/// of the shared face features (eyes, mouth bar).
pub fn signature_mask(expression: Expression, size: usize) -> Array2<f64> {
    let s = size as f64;
    let cx = (s - 1.0) / 2.0;
    let mut mask = Array2::zeros((size, size));
    for row in 0..size {
        let v = row as f64 / s;
        for col in 0..size {
            let u = (col as f64 - cx).abs() / s;
            if signature_hit(expression, u, v) {
                mask[(row, col)] = 1.0;
            }
        }
    }
    mask
}

/// The textured stamp actually composited into images: the region mask
/// filled with a class-specific pattern (solid, stripes of two orientations
/// and frequencies, or checkerboards). Texture phase depends on `|x - cx|`
/// and `y` only, keeping the flip symmetry of the region.
pub fn signature_pattern(expression: Expression, size: usize) -> Array2<f64> {
    let s = size as f64;
    let cx = (s - 1.0) / 2.0;
    let mut pattern = Array2::zeros((size, size));
    for row in 0..size {
        let v = row as f64 / s;
        for col in 0..size {
            let u = (col as f64 - cx).abs() / s;
            if signature_hit(expression, u, v) {
                pattern[(row, col)] = signature_texture(expression, u, v);
            }
        }
    }
    pattern
}

/// Membership test in normalized coordinates: `u` is the absolute horizontal
/// distance from the centerline, `v` the vertical position, both as
/// fractions of the image size.
fn signature_hit(expression: Expression, u: f64, v: f64) -> bool {
    match expression {
        // Forehead bar.
        Expression::Neutral => u <= 0.16 && (0.19..=0.27).contains(&v),
        // Crescent below the mouth, corners rising.
        Expression::Happiness => u <= 0.15 && v >= 0.77 - 0.4 * u * u && v <= 0.83 - 0.4 * u * u,
        // Crescent above the mouth, corners drooping.
        Expression::Sadness => u <= 0.15 && v >= 0.615 + 0.4 * u * u && v <= 0.675 + 0.4 * u * u,
        // Ring on the chin.
        Expression::Surprise => {
            let r = (u * u + (v - 0.91) * (v - 0.91)).sqrt();
            (0.025..=0.065).contains(&r)
        }
        // Vertical bar pair above the eyes.
        Expression::Fear => (u - 0.20).abs() <= 0.035 && (0.22..=0.36).contains(&v),
        // Angled brow wedges pointing inward.
        Expression::Anger => segment_distance(u, v, (0.04, 0.37), (0.12, 0.31)) <= 0.035,
        // Cross at the nose bridge.
        Expression::Disgust => {
            (u <= 0.09 && (v - 0.52).abs() <= 0.03) || (u <= 0.03 && (0.44..=0.60).contains(&v))
        }
    }
}

/// Per-class fill texture in [0, 1]. Wavelengths are in normalized units so
/// the patterns scale with the image.
fn signature_texture(expression: Expression, u: f64, v: f64) -> f64 {
    use std::f64::consts::TAU;
    let hstripes = |wavelength: f64| 0.5 + 0.5 * (TAU * v / wavelength).sin();
    let vstripes = |wavelength: f64| 0.5 + 0.5 * (TAU * u / wavelength).sin();
    let checker = |wavelength: f64| 0.5 + 0.5 * (TAU * v / wavelength).sin() * (TAU * u / wavelength).sin();
    match expression {
        Expression::Neutral => 1.0,
        Expression::Happiness => hstripes(0.06),
        Expression::Sadness => hstripes(0.12),
        Expression::Surprise => vstripes(0.06),
        Expression::Fear => vstripes(0.12),
        Expression::Anger => checker(0.06),
        Expression::Disgust => checker(0.12),
    }
}

fn segment_distance(u: f64, v: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = (((u - ax) * dx + (v - ay) * dy) / len2).clamp(0.0, 1.0);
    let (px, py) = (ax + t * dx, ay + t * dy);
    ((u - px) * (u - px) + (v - py) * (v - py)).sqrt()
}

/// Tight bounding box of a signature stamp, for region-level saliency checks.
pub fn signature_bbox(expression: Expression, size: usize) -> PixelRegion {
    let mask = signature_mask(expression, size);
    let (mut row0, mut col0, mut row1, mut col1) = (size, size, 0, 0);
    for ((r, c), &m) in mask.indexed_iter() {
        if m > 0.0 {
            row0 = row0.min(r);
            col0 = col0.min(c);
            row1 = row1.max(r);
            col1 = col1.max(c);
        }
    }
    assert!(row0 <= row1, "signature stamp is empty at size {size}");
    PixelRegion { row0, col0, row1, col1 }
}

/// Mirror-symmetric ripple, unit amplitude; the composite scales it by
/// `wrinkle_amplitude * age / 90`, masked to the face oval. The fold
/// wavelengths (~0.35 of the image) sit well below the expression-texture
/// band so age evidence and class evidence occupy separate spatial
/// frequencies.
fn wrinkle_field(size: usize) -> Array2<f64> {
    let s = size as f64;
    let cx = (s - 1.0) / 2.0;
    let mut field = Array2::zeros((size, size));
    for row in 0..size {
        let v = row as f64 / s;
        for col in 0..size {
            let u = (col as f64 - cx).abs() / s;
            field[(row, col)] = (18.0 * v).sin() * (14.0 * u).cos();
        }
    }
    field
}

/// Separable Gaussian blur with clamped edges; a non-positive sigma is the
/// identity.
fn gaussian_blur(grid: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 1e-9 {
        return grid.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = (grid.nrows() as isize, grid.ncols() as isize);
    let mut horizontal = Array2::zeros(grid.dim());
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = (c + ki as isize - radius).clamp(0, w - 1);
                acc += k * grid[(r as usize, cc as usize)];
            }
            horizontal[(r as usize, c as usize)] = acc;
        }
    }
    let mut blurred = Array2::zeros(grid.dim());
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = (r + ki as isize - radius).clamp(0, h - 1);
                acc += k * horizontal[(rr as usize, c as usize)];
            }
            blurred[(r as usize, c as usize)] = acc;
        }
    }
    blurred
}

fn inside_face(u: f64, v: f64) -> bool {
    // Face oval centered at (0.5, 0.52) with radii (0.38, 0.46).
    let nx = u / 0.38;
    let ny = (v - 0.52) / 0.46;
    nx * nx + ny * ny <= 1.0
}

struct Painter {
    size: usize,
    patterns: Vec<Array2<f64>>,
    wrinkles: Array2<f64>,
    face: Array2<f64>,
}

impl Painter {
    fn new(size: usize) -> Painter {
        Painter {
            size,
            patterns: Expression::ALL.iter().map(|&e| signature_pattern(e, size)).collect(),
            wrinkles: wrinkle_field(size),
            face: {
                let s = size as f64;
                let cx = (s - 1.0) / 2.0;
                let mut face = Array2::zeros((size, size));
                for row in 0..size {
                    let v = row as f64 / s;
                    for col in 0..size {
                        let u = (col as f64 - cx).abs() / s;
                        if inside_face(u, v) {
                            face[(row, col)] = 1.0;
                        }
                    }
                }
                face
            },
        }
    }

    /// Base face: background, oval, eye disks at the landmark positions,
    /// mouth bar between the mouth-corner landmarks.
    fn base(&self, tone: f64) -> Array2<f64> {
        let size = self.size;
        let s = size as f64;
        let (ex, ey) = LANDMARK_FRACTIONS[LM_LEFT_EYE];
        debug_assert_eq!(LANDMARK_FRACTIONS[LM_RIGHT_EYE].1, ey);
        let eye_r = 0.030;
        let mut img = Array2::from_elem((size, size), 0.18);
        for row in 0..size {
            let v = row as f64 / s;
            for col in 0..size {
                let cx = (s - 1.0) / 2.0;
                let u = (col as f64 - cx).abs() / s;
                if self.face[(row, col)] > 0.0 {
                    img[(row, col)] = tone;
                }
                // Eye disks: left eye is at fraction (ex, ey); by symmetry
                // u measures distance from centerline, so one test covers
                // both eyes.
                let du = u - (0.5 - ex);
                let dv = v - ey;
                if (du * du + dv * dv).sqrt() <= eye_r {
                    img[(row, col)] = 0.12;
                }
                // Mouth bar spanning the mouth-corner landmarks.
                if u <= 0.15 && (v - 0.75).abs() <= 0.008 {
                    img[(row, col)] = 0.15;
                }
            }
        }
        img
    }

    fn compose(
        &self,
        expression: Expression,
        wrinkle_scale: f64,
        blend: Option<(Expression, f64)>,
        amp: f64,
        tone: f64,
        fade_sigma: f64,
    ) -> Array2<f64> {
        let mut img = self.base(tone);
        add_wrinkles(&mut img, &self.wrinkles, &self.face, wrinkle_scale);
        // The expression signatures soften with age: older faces render the
        // same class texture at lower definition, so their appearance is not
        // a copy of the younger groups' with extras bolted on.
        let truth = gaussian_blur(&self.patterns[expression.index()], fade_sigma);
        match blend {
            None => {
                img += &(&truth * amp);
            }
            Some((confounder, beta)) => {
                let conf = gaussian_blur(&self.patterns[confounder.index()], fade_sigma);
                img += &(&truth * (amp * (1.0 - beta)));
                img += &(&conf * (amp * beta));
            }
        }
        img
    }
}

/// Add the ripple texture inside the face oval, scaled by `scale`
/// (`wrinkle_amplitude * age / 90` in the composite).
fn add_wrinkles(img: &mut Array2<f64>, field: &Array2<f64>, face: &Array2<f64>, scale: f64) {
    ndarray::Zip::from(img).and(field).and(face).for_each(|px, &f, &m| {
        if m > 0.0 {
            *px += scale * f;
        }
    });
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.image_size < 32 {
        return Err(Error::BadSynthSpec(format!(
            "image_size {} is too small (need at least 32)",
            spec.image_size
        )));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::BadSynthSpec(format!("noise_std {} must be >= 0", spec.noise_std)));
    }
    if !(spec.signature_amplitude > 0.0) || !(spec.wrinkle_amplitude >= 0.0) {
        return Err(Error::BadSynthSpec("amplitudes must be positive".to_string()));
    }
    if !(0.0..=0.1).contains(&spec.texture_fade) {
        return Err(Error::BadSynthSpec(format!(
            "texture_fade {} outside [0, 0.1]",
            spec.texture_fade
        )));
    }
    for inj in &spec.injections {
        if !(0.0..=1.0).contains(&inj.blend) {
            return Err(Error::BadSynthSpec(format!("blend {} outside [0, 1]", inj.blend)));
        }
        if inj.truth == inj.confounder {
            return Err(Error::BadSynthSpec("confounder equals the true class".to_string()));
        }
    }
    let total: usize = spec.train_cells.iter().map(|c| c.count).sum();
    if total == 0 {
        return Err(Error::BadSynthSpec("no training samples requested".to_string()));
    }
    Ok(())
}

/// Merge duplicate cells and fix iteration order so generation is
/// reproducible regardless of how the spec lists its cells.
fn sorted_cells(cells: &[CellSpec]) -> Vec<CellSpec> {
    let mut merged: BTreeMap<(Expression, AgeGroup), usize> = BTreeMap::new();
    for c in cells {
        *merged.entry((c.expression, c.group)).or_insert(0) += c.count;
    }
    merged
        .into_iter()
        .filter(|(_, count)| *count > 0)
        .map(|((expression, group), count)| CellSpec {
            expression,
            group,
            count,
        })
        .collect()
}

fn age_range(group: AgeGroup) -> (f64, f64) {
    match group {
        AgeGroup::Children => (6.0, 17.0),
        AgeGroup::Adults => (18.0, 59.0),
        AgeGroup::Elderly => (60.0, 90.0),
    }
}

fn quantize(img: &Array2<f64>) -> GrayImage {
    let (h, w) = img.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in img.indexed_iter() {
        out.get_pixel_mut(c as u32, r as u32).0[0] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

/// Generate the dataset described by `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    validate(spec)?;
    let size = spec.image_size;
    let painter = Painter::new(size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("validated noise_std"))
    } else {
        None
    };
    let mut images = MemImageStore::new();

    let make_records = |cells: &[CellSpec], split: Split, tag: &str, rng: &mut ChaCha8Rng, images: &mut MemImageStore| -> Vec<SampleRecord> {
        let mut records = Vec::new();
        for cell in cells {
            let (lo, hi) = age_range(cell.group);
            let blend = spec
                .injections
                .iter()
                .find(|inj| inj.group == cell.group && inj.truth == cell.expression)
                .map(|inj| (inj.confounder, inj.blend));
            for i in 0..cell.count {
                let age: f64 = rng.gen_range(lo..=hi);
                let tone = 0.55 + rng.gen_range(-0.05..=0.05);
                let amp = spec.signature_amplitude * rng.gen_range(0.85..=1.15);
                let wrinkle_scale = spec.wrinkle_amplitude * age / 90.0;
                let fade_sigma = spec.texture_fade * size as f64 * age / 90.0;
                let mut img =
                    painter.compose(cell.expression, wrinkle_scale, blend, amp, tone, fade_sigma);
                if let Some(n) = &noise {
                    for px in img.iter_mut() {
                        *px += n.sample(rng);
                    }
                }
                let sample_id = format!("{tag}-{}-{}-{i:04}", cell.group, cell.expression);
                let image_ref = format!("images/{sample_id}.png");
                images.insert(image_ref.clone(), DynamicImage::ImageLuma8(quantize(&img)));
                records.push(SampleRecord {
                    sample_id,
                    image_ref,
                    expression: cell.expression,
                    age_years: Some(age),
                    age_source: Some(AgeSource::GroundTruth),
                    fold: None,
                    split,
                });
            }
        }
        records
    };

    let train_cells = sorted_cells(&spec.train_cells);
    let train_records = make_records(&train_cells, Split::Train, "train", &mut rng, &mut images);
    let train_manifest = DatasetManifest::new("synth-train", train_records)?;

    let mut test_manifests = BTreeMap::new();
    let test_cells = sorted_cells(&spec.test_cells);
    for group in AgeGroup::ALL {
        let cells: Vec<CellSpec> = test_cells.iter().copied().filter(|c| c.group == group).collect();
        if cells.is_empty() {
            continue;
        }
        let tag = format!("test-{group}");
        let records = make_records(&cells, Split::Test, &tag, &mut rng, &mut images);
        test_manifests.insert(group, DatasetManifest::new(tag.clone(), records)?);
    }

    Ok(SynthOutput {
        train_manifest,
        test_manifests,
        images,
    })
}
