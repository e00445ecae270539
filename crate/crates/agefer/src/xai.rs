//! Explanation pipeline: per-image gradient saliency, warping into a shared
//! canonical face frame, and per-(expression, age group) aggregation.
//!
//! The three stages are independent: [`saliency`] needs a model and an
//! image, [`to_common_space`] needs landmarks and a [`LandmarkTemplate`],
//! and [`aggregate_heatmaps`] is a pure reduction over warped grids, so
//! callers can fan the first two out over samples and checkpoints and
//! reduce at the end.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{AgeGroup, Expression};
use crate::modelkit::{predict_expression, Backbone, ModelVariant};
use crate::preprocess::{fnv1a64, FaceImage, LANDMARK_FRACTIONS};

/// Per-pixel magnitude of the gradient of one class logit with respect to
/// the input image. Same shape as the input; all entries finite and >= 0.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub grid: Array2<f64>,
    pub sample_id: String,
    /// Argmax class of the same forward pass the gradient was taken from.
    pub predicted: Expression,
    /// Class whose logit was differentiated.
    pub target: Expression,
}

/// |d logit_target / d pixel| for one image, from a single forward and
/// backward pass. `age_norm` is the normalized age scalar and is required
/// exactly when the model variant consumes one.
pub fn saliency<B: Backbone>(
    model: &ModelVariant<B>,
    face: &FaceImage,
    age_norm: Option<f64>,
    target: Expression,
    sample_id: impl Into<String>,
) -> Result<SaliencyMap> {
    let (h, w) = face.pixels.dim();
    let x = face
        .pixels
        .view()
        .into_shape_with_order((1, 1, h, w))
        .expect("standard layout")
        .to_owned();
    let ages = age_norm.map(|a| ndarray::Array1::from_vec(vec![a]));
    let (out, cache) = model.forward(&x, ages.as_ref())?;
    if out.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let predicted = predict_expression(&out.logits.row(0).to_owned());

    let mut dlogits = Array2::zeros((1, Expression::COUNT));
    dlogits[(0, target.index())] = 1.0;
    let (_, dinput) = model.backward(&cache, &dlogits, None, true);
    let dinput = dinput.expect("input gradient was requested");
    let grid = dinput
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .mapv(f64::abs);
    Ok(SaliencyMap {
        grid,
        sample_id: sample_id.into(),
        predicted,
        target,
    })
}

/// Canonical landmark frame shared by all warped heatmaps of a run. The
/// `id` is a content hash, so two templates compare equal iff their ids do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTemplate {
    /// Canonical grid is `size` x `size` pixels.
    pub size: usize,
    /// (x, y) positions in canonical pixel coordinates.
    pub landmarks: Vec<(f64, f64)>,
    pub id: String,
}

impl LandmarkTemplate {
    fn content_id(size: usize, landmarks: &[(f64, f64)]) -> String {
        let mut bytes = Vec::with_capacity(8 + landmarks.len() * 16);
        bytes.extend_from_slice(&(size as u64).to_le_bytes());
        for &(x, y) in landmarks {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        format!("tmpl-{:016x}", fnv1a64(&bytes))
    }

    pub fn new(size: usize, landmarks: Vec<(f64, f64)>) -> Result<Self> {
        check_landmarks(&landmarks)?;
        let id = Self::content_id(size, &landmarks);
        Ok(LandmarkTemplate { size, landmarks, id })
    }

    /// The fixed aligned-crop landmark layout at a given grid size.
    pub fn canonical(size: usize) -> Self {
        let landmarks = LANDMARK_FRACTIONS
            .iter()
            .map(|&(fx, fy)| (fx * size as f64, fy * size as f64))
            .collect();
        Self::new(size, landmarks).expect("canonical layout is non-degenerate")
    }

    /// Element-wise mean landmark configuration over a set of landmark
    /// lists (one per evaluated image), the per-run template.
    pub fn from_mean<'a, I>(sets: I, size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [(f64, f64)]>,
    {
        let mut sum: Vec<(f64, f64)> = Vec::new();
        let mut n = 0usize;
        for set in sets {
            if sum.is_empty() {
                sum = vec![(0.0, 0.0); set.len()];
            } else if set.len() != sum.len() {
                return Err(Error::DegenerateLandmarks(format!(
                    "landmark sets of unequal length ({} vs {})",
                    set.len(),
                    sum.len()
                )));
            }
            for (acc, &(x, y)) in sum.iter_mut().zip(set) {
                acc.0 += x;
                acc.1 += y;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::DegenerateLandmarks("no landmark sets given".into()));
        }
        let mean = sum.into_iter().map(|(x, y)| (x / n as f64, y / n as f64)).collect();
        Self::new(size, mean)
    }
}

/// Reject landmark sets a similarity transform cannot be anchored to:
/// fewer than two points, (near-)coincident points, or collinear points.
fn check_landmarks(points: &[(f64, f64)]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::DegenerateLandmarks(format!(
            "need at least 2 landmarks, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x / n, ay + y / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let spread = sxx + syy;
    if spread <= 1e-12 {
        return Err(Error::DegenerateLandmarks("all landmarks coincide".into()));
    }
    let det = sxx * syy - sxy * sxy;
    if det <= 1e-9 * spread * spread {
        return Err(Error::DegenerateLandmarks("landmarks are collinear".into()));
    }
    Ok(())
}

/// Similarity transform q = s R p + t, parameterized as
/// x' = a x - b y + tx, y' = b x + a y + ty (scale s = sqrt(a^2 + b^2)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    /// Inverse map; errors if the forward scale is (near) zero.
    pub fn invert(&self) -> Result<Similarity> {
        let s2 = self.a * self.a + self.b * self.b;
        if s2 <= 1e-18 {
            return Err(Error::DegenerateLandmarks("similarity scale collapsed to zero".into()));
        }
        let (ia, ib) = (self.a / s2, -self.b / s2);
        Ok(Similarity {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        })
    }
}

/// Least-squares similarity mapping `src` onto `dst` (translation,
/// rotation, uniform scale; no reflection). Both point sets must be
/// non-degenerate and of equal length.
pub fn fit_similarity(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::DegenerateLandmarks(format!(
            "landmark count {} does not match template count {}",
            src.len(),
            dst.len()
        )));
    }
    check_landmarks(src)?;
    check_landmarks(dst)?;
    let n = src.len() as f64;
    let (pmx, pmy) = src
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x / n, ay + y / n));
    let (qmx, qmy) = dst
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x / n, ay + y / n));
    let mut denom = 0.0;
    let mut dot = 0.0;
    let mut cross = 0.0;
    for (&(px, py), &(qx, qy)) in src.iter().zip(dst) {
        let (px, py) = (px - pmx, py - pmy);
        let (qx, qy) = (qx - qmx, qy - qmy);
        denom += px * px + py * py;
        dot += qx * px + qy * py;
        cross += qy * px - qx * py;
    }
    let a = dot / denom;
    let b = cross / denom;
    Ok(Similarity {
        a,
        b,
        tx: qmx - (a * pmx - b * pmy),
        ty: qmy - (b * pmx + a * pmy),
    })
}

/// A heatmap resampled into the canonical frame. `mask` is 1 where the
/// canonical pixel maps inside the source frame and 0 where the grid was
/// zero-filled.
#[derive(Debug, Clone)]
pub struct WarpedMap {
    pub grid: Array2<f64>,
    pub mask: Array2<f64>,
}

/// Resample a saliency grid into the template's canonical frame using the
/// least-squares similarity from the image's landmarks to the template's,
/// with bilinear interpolation; out-of-frame pixels are zero-filled and
/// masked out.
pub fn to_common_space(
    map: &SaliencyMap,
    landmarks: &[(f64, f64)],
    template: &LandmarkTemplate,
) -> Result<WarpedMap> {
    let forward = fit_similarity(landmarks, &template.landmarks)?;
    let inverse = forward.invert()?;
    let (h, w) = map.grid.dim();
    let size = template.size;
    let mut grid = Array2::zeros((size, size));
    let mut mask = Array2::zeros((size, size));
    for r in 0..size {
        for c in 0..size {
            // Canonical pixel centers are (x = col, y = row).
            let (sx, sy) = inverse.apply(c as f64, r as f64);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            grid[(r, c)] = bilinear(&map.grid, sx, sy);
            mask[(r, c)] = 1.0;
        }
    }
    Ok(WarpedMap { grid, mask })
}

fn bilinear(grid: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = grid.dim();
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = grid[(y0, x0)] * (1.0 - fx) + grid[(y0, x1)] * fx;
    let bottom = grid[(y1, x0)] * (1.0 - fx) + grid[(y1, x1)] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Mean of individually min-max standardized canonical grids for one
/// (expression, age group) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedHeatmap {
    /// Element-wise mean of the standardized member grids; every entry is
    /// in [0, 1].
    pub grid: Array2<f64>,
    pub expression: Expression,
    pub group: AgeGroup,
    /// Number of grids that contributed (constant grids are excluded).
    pub n_samples: usize,
    pub template_id: String,
}

impl AggregatedHeatmap {
    /// Final display normalization: min-max to [0, 1]; a constant grid
    /// renders as all zeros.
    pub fn display_grid(&self) -> Array2<f64> {
        match standardize(&self.grid) {
            Some(g) => g,
            None => Array2::zeros(self.grid.dim()),
        }
    }
}

/// Min-max to [0, 1]; `None` for constant grids, which cannot be
/// standardized.
fn standardize(grid: &Array2<f64>) -> Option<Array2<f64>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in grid {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 1e-12) {
        return None;
    }
    Some(grid.mapv(|v| (v - lo) / range))
}

/// Standardize each grid to [0, 1] and average element-wise. Constant
/// grids carry no contrast and are skipped, reducing `n_samples`; an empty
/// list, or a list with nothing left after skipping, is an error. The
/// reduction is permutation-invariant.
pub fn aggregate_heatmaps(
    maps: &[WarpedMap],
    expression: Expression,
    group: AgeGroup,
    template_id: &str,
) -> Result<AggregatedHeatmap> {
    let first = maps.first().ok_or(Error::EmptyAggregation)?;
    let shape = first.grid.dim();
    let mut acc = Array2::zeros(shape);
    let mut kept = 0usize;
    for map in maps {
        if map.grid.dim() != shape {
            return Err(Error::GridShapeMismatch {
                expected: shape,
                got: map.grid.dim(),
            });
        }
        if let Some(standardized) = standardize(&map.grid) {
            acc += &standardized;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::EmptyAggregation);
    }
    Ok(AggregatedHeatmap {
        grid: acc / kept as f64,
        expression,
        group,
        n_samples: kept,
        template_id: template_id.to_string(),
    })
}

/// Equal-weight average of per-fold aggregates for the same cell (each
/// fold's member is already a per-sample mean); `n_samples` accumulates.
pub fn merge_fold_heatmaps(folds: &[AggregatedHeatmap]) -> Result<AggregatedHeatmap> {
    let first = folds.first().ok_or(Error::EmptyAggregation)?;
    let shape = first.grid.dim();
    let mut acc = Array2::zeros(shape);
    let mut n_samples = 0usize;
    for fold in folds {
        if (fold.expression, fold.group) != (first.expression, first.group)
            || fold.template_id != first.template_id
        {
            return Err(Error::ReportStructureMismatch(format!(
                "cannot merge heatmap for ({:?}, {:?}, {}) with ({:?}, {:?}, {})",
                fold.expression, fold.group, fold.template_id, first.expression, first.group, first.template_id
            )));
        }
        if fold.grid.dim() != shape {
            return Err(Error::GridShapeMismatch {
                expected: shape,
                got: fold.grid.dim(),
            });
        }
        acc += &fold.grid;
        n_samples += fold.n_samples;
    }
    Ok(AggregatedHeatmap {
        grid: acc / folds.len() as f64,
        expression: first.expression,
        group: first.group,
        n_samples,
        template_id: first.template_id.clone(),
    })
}

/// Nearest-rank percentile: the smallest grid value v such that at least
/// `q` of all values are <= v, for q in (0, 1]; q = 0 returns the minimum.
pub fn percentile(grid: &Array2<f64>, q: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "q must be in [0, 1], got {q}");
    let mut values: Vec<f64> = grid.iter().copied().collect();
    assert!(!values.is_empty(), "empty grid");
    values.sort_unstable_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).max(1) - 1;
    values[rank.min(values.len() - 1)]
}
