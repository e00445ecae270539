//! Sample-weight schemes: per-expression class weights, joint
//! expression × age-group weights, and inverse-density weights for the
//! age-regression target.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{AgeGroup, DatasetManifest, Expression};

/// Which weighting scheme a [`WeightTable`] encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One weight per expression, replicated across age groups.
    ClassOnly,
    /// One weight per (expression, age group) cell.
    JointAge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellWeight {
    pub count: usize,
    pub weight: f64,
}

/// Frequency-derived loss weights over the 21 (expression, age group) cells.
///
/// Weights are `n_min / count` where `n_min` is the smallest non-empty cell
/// (or class) count, so the rarest cell gets weight 1 and every other cell is
/// scaled down proportionally. Cells absent from the data carry weight 0 and
/// do not participate in `n_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "WeightTableRepr", try_from = "WeightTableRepr")]
pub struct WeightTable {
    mode: WeightMode,
    n_min: usize,
    cells: BTreeMap<(Expression, AgeGroup), CellWeight>,
}

/// Flat serialization proxy: tuple-keyed maps are not representable in
/// JSON-style formats, so the table serializes as a row list.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightTableRepr {
    mode: WeightMode,
    cells: Vec<(Expression, AgeGroup, CellWeight)>,
}

impl From<WeightTable> for WeightTableRepr {
    fn from(t: WeightTable) -> Self {
        WeightTableRepr {
            mode: t.mode,
            cells: t.cells.into_iter().map(|((e, g), c)| (e, g, c)).collect(),
        }
    }
}

impl TryFrom<WeightTableRepr> for WeightTable {
    type Error = Error;

    fn try_from(repr: WeightTableRepr) -> Result<Self> {
        let cells: BTreeMap<_, _> = repr.cells.into_iter().map(|(e, g, c)| ((e, g), c)).collect();
        if cells.len() != Expression::COUNT * AgeGroup::ALL.len() {
            return Err(Error::MissingColumn(format!("expected 21 weight cells, found {}", cells.len())));
        }
        WeightTable::from_cells(repr.mode, cells)
    }
}

impl WeightTable {
    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    /// Smallest non-empty cell (joint mode) or class (class mode) count.
    pub fn n_min(&self) -> usize {
        self.n_min
    }

    /// Loss weight for a sample.
    ///
    /// In class mode the age group is ignored. In joint mode a sample with no
    /// known age group gets weight 0, i.e. it contributes nothing to the
    /// weighted loss.
    pub fn weight(&self, expression: Expression, age_group: Option<AgeGroup>) -> f64 {
        match self.mode {
            WeightMode::ClassOnly => self.cells[&(expression, AgeGroup::Children)].weight,
            WeightMode::JointAge => match age_group {
                Some(g) => self.cells[&(expression, g)].weight,
                None => 0.0,
            },
        }
    }

    pub fn cell(&self, expression: Expression, age_group: AgeGroup) -> CellWeight {
        self.cells[&(expression, age_group)]
    }

    pub fn cells(&self) -> impl Iterator<Item = (Expression, AgeGroup, CellWeight)> + '_ {
        self.cells.iter().map(|(&(e, g), &c)| (e, g, c))
    }

    /// `n_min` is derived from the counts; a table whose cells are all
    /// count-free (like the uniform table) gets `n_min = 0`. The compute
    /// functions reject genuinely empty training pools before reaching here.
    fn from_cells(mode: WeightMode, cells: BTreeMap<(Expression, AgeGroup), CellWeight>) -> Result<Self> {
        debug_assert_eq!(cells.len(), Expression::COUNT * AgeGroup::ALL.len());
        let n_min = cells
            .values()
            .filter(|c| c.count > 0)
            .map(|c| c.count)
            .min()
            .unwrap_or(0);
        Ok(WeightTable { mode, n_min, cells })
    }

    /// A table that weights every sample 1.0: the unweighted-loss baseline.
    pub fn uniform() -> WeightTable {
        let cells = Expression::ALL
            .iter()
            .flat_map(|&e| {
                AgeGroup::ALL
                    .iter()
                    .map(move |&g| ((e, g), CellWeight { count: 0, weight: 1.0 }))
            })
            .collect();
        WeightTable {
            mode: WeightMode::ClassOnly,
            n_min: 0,
            cells,
        }
    }
}

/// Per-expression class weights over the training pool:
/// `weight(class) = (min class count) / (class count)`.
pub fn compute_class_weights(manifest: &DatasetManifest) -> Result<WeightTable> {
    let mut counts: BTreeMap<Expression, usize> = Expression::ALL.iter().map(|&e| (e, 0)).collect();
    for &i in &manifest.train_pool() {
        *counts.get_mut(&manifest.records()[i].expression).unwrap() += 1;
    }
    for (&expr, &n) in &counts {
        if n == 0 {
            return Err(Error::EmptyClass(expr));
        }
    }
    let n_min = *counts.values().min().unwrap();
    let mut cells = BTreeMap::new();
    for (&expr, &n) in &counts {
        let weight = n_min as f64 / n as f64;
        for group in AgeGroup::ALL {
            cells.insert((expr, group), CellWeight { count: n, weight });
        }
    }
    WeightTable::from_cells(WeightMode::ClassOnly, cells)
}

/// Joint expression × age-group weights over the training pool:
/// `weight(s, a) = n_min / count(s, a)` for non-empty cells, 0 for empty
/// ones. Records without a known age are not counted.
pub fn compute_joint_weights(manifest: &DatasetManifest) -> Result<WeightTable> {
    let mut counts: BTreeMap<(Expression, AgeGroup), usize> = Expression::ALL
        .iter()
        .flat_map(|&e| AgeGroup::ALL.iter().map(move |&g| ((e, g), 0)))
        .collect();
    for &i in &manifest.train_pool() {
        let r = &manifest.records()[i];
        if let Some(g) = r.age_group() {
            *counts.get_mut(&(r.expression, g)).unwrap() += 1;
        }
    }
    let n_min = counts.values().copied().filter(|&n| n > 0).min().ok_or(Error::AllCellsEmpty)?;
    let cells = counts
        .into_iter()
        .map(|(key, count)| {
            let weight = if count > 0 { n_min as f64 / count as f64 } else { 0.0 };
            (key, CellWeight { count, weight })
        })
        .collect();
    WeightTable::from_cells(WeightMode::JointAge, cells)
}

/// Serialize a weight table as a four-column tabular file
/// (expression, age_group, count, weight). Weights use the shortest decimal
/// representation that round-trips, so read-back is bit-exact.
pub fn write_weight_table(table: &WeightTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["expression", "age_group", "count", "weight"])?;
    for (expr, group, cell) in table.cells() {
        writer.write_record([expr.name(), group.name(), &cell.count.to_string(), &cell.weight.to_string()])?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read back a weight table written by [`write_weight_table`]. The mode is
/// not stored in the file, so the caller states which scheme it expects.
pub fn read_weight_table(path: impl AsRef<Path>, mode: WeightMode) -> Result<WeightTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut cells = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize, name: &str| row.get(i).map(str::trim).ok_or_else(|| Error::MissingColumn(name.into()));
        let expr = Expression::from_str(get(0, "expression")?)?;
        let group = AgeGroup::from_str(get(1, "age_group")?)?;
        let count: usize = get(2, "count")?.parse().map_err(|_| Error::MissingColumn("count".into()))?;
        let weight: f64 = get(3, "weight")?.parse().map_err(|_| Error::MissingColumn("weight".into()))?;
        cells.insert((expr, group), CellWeight { count, weight });
    }
    if cells.len() != Expression::COUNT * AgeGroup::ALL.len() {
        return Err(Error::MissingColumn(format!("expected 21 weight rows, found {}", cells.len())));
    }
    WeightTable::from_cells(mode, cells)
}

/// Inverse-density sample weights for a continuous target (age in years).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityWeights {
    ages: Vec<f64>,
    weights: Vec<f64>,
    bandwidth: f64,
}

impl DensityWeights {
    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }
}

/// Inverse Gaussian-KDE weights, normalized to mean 1.
///
/// Density at each sample age is the Gaussian kernel density estimate over
/// the whole list; the raw weight is `1 / max(density, eps)` with
/// `eps = 1e-6 × peak density`, then the list is rescaled so its mean is 1.
/// Rare ages therefore get weights above 1 and over-represented ages weights
/// below 1, with the floor keeping extreme outliers finite.
pub fn compute_density_weights(ages: &[f64], bandwidth: f64) -> Result<DensityWeights> {
    if ages.is_empty() || ages.iter().any(|a| !a.is_finite()) {
        return Err(Error::BadAgeList);
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::BadBandwidth(bandwidth));
    }
    let n = ages.len() as f64;
    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let densities: Vec<f64> = ages
        .iter()
        .map(|&a| {
            let sum: f64 = ages
                .iter()
                .map(|&b| {
                    let z = (a - b) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum();
            norm * sum
        })
        .collect();
    let peak = densities.iter().cloned().fold(f64::MIN, f64::max);
    let eps = 1e-6 * peak;
    let raw: Vec<f64> = densities.iter().map(|&d| 1.0 / d.max(eps)).collect();
    // A constant list normalizes to exactly 1; summing would round.
    let weights = if raw.iter().all(|&w| w == raw[0]) {
        vec![1.0; raw.len()]
    } else {
        let mean = raw.iter().sum::<f64>() / n;
        raw.iter().map(|&w| w / mean).collect()
    };
    Ok(DensityWeights {
        ages: ages.to_vec(),
        weights,
        bandwidth,
    })
}

/// Silverman's rule-of-thumb bandwidth:
/// `0.9 × min(σ, IQR / 1.34) × n^(-1/5)`.
///
/// Degenerate inputs fall back gracefully: if the IQR is zero the standard
/// deviation alone is used, and if the list has no spread at all the
/// bandwidth is 1 year (any positive value yields uniform weights there).
pub fn silverman_bandwidth(ages: &[f64]) -> Result<f64> {
    if ages.is_empty() || ages.iter().any(|a| !a.is_finite()) {
        return Err(Error::BadAgeList);
    }
    let n = ages.len() as f64;
    let mean = ages.iter().sum::<f64>() / n;
    let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();

    let mut sorted = ages.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let iqr = quantile(0.75) - quantile(0.25);

    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        (false, _) => return Ok(1.0),
    };
    Ok(0.9 * spread * n.powf(-0.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{DatasetManifest, SampleRecord};
    use proptest::prelude::*;

    #[test]
    fn uniform_table_weights_everything_one() {
        let table = WeightTable::uniform();
        for expr in Expression::ALL {
            assert_eq!(table.weight(expr, Some(AgeGroup::Elderly)), 1.0);
            assert_eq!(table.weight(expr, None), 1.0);
        }
        // Count-free tables must survive serialization (they ride along in
        // checkpoints).
        let json = serde_json::to_string(&table).unwrap();
        let back: WeightTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, table);
    }

    fn manifest_from_counts(counts: &[(Expression, AgeGroup, usize)]) -> DatasetManifest {
        let age_for = |g: AgeGroup| match g {
            AgeGroup::Children => 10.0,
            AgeGroup::Adults => 30.0,
            AgeGroup::Elderly => 70.0,
        };
        let mut records = Vec::new();
        for &(expr, group, n) in counts {
            for j in 0..n {
                let mut r = SampleRecord::new(format!("{expr}-{group}-{j}"), "x.png", expr);
                r.age_years = Some(age_for(group));
                records.push(r);
            }
        }
        DatasetManifest::new("w", records).unwrap()
    }

    fn uniform_counts(n: usize) -> Vec<(Expression, AgeGroup, usize)> {
        Expression::ALL
            .iter()
            .flat_map(|&e| AgeGroup::ALL.iter().map(move |&g| (e, g, n)))
            .collect()
    }

    #[test]
    fn class_weights_equal_counts_are_one() {
        let m = manifest_from_counts(&uniform_counts(10));
        let t = compute_class_weights(&m).unwrap();
        for e in Expression::ALL {
            assert_eq!(t.weight(e, None), 1.0);
        }
        assert_eq!(t.n_min(), 30);
    }

    #[test]
    fn class_weights_min_over_count() {
        // happiness 1000, everything else 100 -> happiness 0.1, rest 1.0.
        let mut counts = Vec::new();
        for e in Expression::ALL {
            let n = if e == Expression::Happiness { 1000 } else { 100 };
            counts.push((e, AgeGroup::Adults, n));
        }
        let m = manifest_from_counts(&counts);
        let t = compute_class_weights(&m).unwrap();
        assert_eq!(t.weight(Expression::Happiness, None), 0.1);
        assert_eq!(t.weight(Expression::Fear, None), 1.0);
        assert_eq!(t.n_min(), 100);
    }

    #[test]
    fn class_weights_reject_empty_class() {
        let counts: Vec<_> = Expression::ALL
            .iter()
            .filter(|&&e| e != Expression::Disgust)
            .map(|&e| (e, AgeGroup::Adults, 5))
            .collect();
        let m = manifest_from_counts(&counts);
        assert!(matches!(
            compute_class_weights(&m),
            Err(Error::EmptyClass(Expression::Disgust))
        ));
    }

    #[test]
    fn joint_weights_hand_example() {
        // (happiness, adults) = 1000, all other cells = 50:
        // w(happiness, adults) = 50/1000 = 0.05, w elsewhere = 1.0.
        let counts: Vec<_> = Expression::ALL
            .iter()
            .flat_map(|&e| {
                AgeGroup::ALL.iter().map(move |&g| {
                    let n = if e == Expression::Happiness && g == AgeGroup::Adults { 1000 } else { 50 };
                    (e, g, n)
                })
            })
            .collect();
        let m = manifest_from_counts(&counts);
        let t = compute_joint_weights(&m).unwrap();
        assert_eq!(t.weight(Expression::Happiness, Some(AgeGroup::Adults)), 0.05);
        assert_eq!(t.weight(Expression::Sadness, Some(AgeGroup::Elderly)), 1.0);
        assert_eq!(t.n_min(), 50);
    }

    #[test]
    fn joint_weights_all_equal_are_one() {
        let m = manifest_from_counts(&uniform_counts(8));
        let t = compute_joint_weights(&m).unwrap();
        for (_, _, cell) in t.cells() {
            assert_eq!(cell.weight, 1.0);
        }
    }

    #[test]
    fn joint_weights_empty_cell_is_zero() {
        let counts: Vec<_> = Expression::ALL
            .iter()
            .flat_map(|&e| {
                AgeGroup::ALL.iter().filter_map(move |&g| {
                    if e == Expression::Surprise && g == AgeGroup::Elderly {
                        None
                    } else {
                        Some((e, g, 114))
                    }
                })
            })
            .collect();
        let m = manifest_from_counts(&counts);
        let t = compute_joint_weights(&m).unwrap();
        assert_eq!(t.weight(Expression::Surprise, Some(AgeGroup::Elderly)), 0.0);
        assert_eq!(t.n_min(), 114);
        assert_eq!(t.weight(Expression::Surprise, Some(AgeGroup::Adults)), 1.0);
    }

    #[test]
    fn joint_identity_and_max_weight() {
        let counts: Vec<_> = Expression::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, &e)| {
                AgeGroup::ALL
                    .iter()
                    .enumerate()
                    .map(move |(j, &g)| (e, g, 7 + 13 * i + 29 * j))
            })
            .collect();
        let m = manifest_from_counts(&counts);
        let t = compute_joint_weights(&m).unwrap();
        let mut max_w = 0.0f64;
        for (_, _, cell) in t.cells() {
            if cell.count > 0 {
                let prod = cell.weight * cell.count as f64;
                let rel = (prod - t.n_min() as f64).abs() / t.n_min() as f64;
                assert!(rel <= 1e-12, "identity violated: {prod} vs {}", t.n_min());
            }
            max_w = max_w.max(cell.weight);
        }
        assert_eq!(max_w, 1.0);
    }

    #[test]
    fn joint_weights_scale_invariant() {
        let base: Vec<_> = Expression::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, &e)| {
                AgeGroup::ALL
                    .iter()
                    .enumerate()
                    .map(move |(j, &g)| (e, g, 3 + 2 * i + 5 * j))
            })
            .collect();
        let scaled: Vec<_> = base.iter().map(|&(e, g, n)| (e, g, 17 * n)).collect();
        let t1 = compute_joint_weights(&manifest_from_counts(&base)).unwrap();
        let t2 = compute_joint_weights(&manifest_from_counts(&scaled)).unwrap();
        for ((e, g, c1), (_, _, c2)) in t1.cells().zip(t2.cells()) {
            assert_eq!(
                c1.weight.to_bits(),
                c2.weight.to_bits(),
                "scale invariance must be exact for ({e},{g})"
            );
        }
    }

    #[test]
    fn joint_single_group_matches_class_weights() {
        let counts: Vec<_> = Expression::ALL
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, AgeGroup::Adults, 10 + i * 4))
            .collect();
        let m = manifest_from_counts(&counts);
        let joint = compute_joint_weights(&m).unwrap();
        let class = compute_class_weights(&m).unwrap();
        for e in Expression::ALL {
            assert_eq!(joint.weight(e, Some(AgeGroup::Adults)), class.weight(e, None));
        }
    }

    #[test]
    fn joint_weights_all_empty_errors() {
        // Records exist but none carry an age, so every cell is empty.
        let records: Vec<_> = (0..5)
            .map(|i| SampleRecord::new(format!("s{i}"), "x.png", Expression::Fear))
            .collect();
        let m = DatasetManifest::new("no-age", records).unwrap();
        assert!(matches!(compute_joint_weights(&m), Err(Error::AllCellsEmpty)));
    }

    #[test]
    fn weight_table_round_trip_bit_exact() {
        let counts: Vec<_> = Expression::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, &e)| {
                AgeGroup::ALL
                    .iter()
                    .enumerate()
                    .map(move |(j, &g)| (e, g, 3 + 7 * i + 11 * j))
            })
            .collect();
        let table = compute_joint_weights(&manifest_from_counts(&counts)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        write_weight_table(&table, &path).unwrap();
        let back = read_weight_table(&path, WeightMode::JointAge).unwrap();
        assert_eq!(back.n_min(), table.n_min());
        for ((e, g, c1), (_, _, c2)) in table.cells().zip(back.cells()) {
            assert_eq!(c1.count, c2.count, "count mismatch at ({e},{g})");
            assert_eq!(c1.weight.to_bits(), c2.weight.to_bits(), "weight mismatch at ({e},{g})");
        }
    }

    #[test]
    fn weight_table_serde_round_trip() {
        let counts: Vec<_> = Expression::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, &e)| AgeGroup::ALL.iter().enumerate().map(move |(j, &g)| (e, g, 5 + 3 * i + j)))
            .collect();
        let table = compute_joint_weights(&manifest_from_counts(&counts)).unwrap();
        let json = serde_json::to_string(&table).unwrap();
        let back: WeightTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn density_uniform_ages_near_one() {
        let ages: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let d = compute_density_weights(&ages, 200.0).unwrap();
        for (i, (&a, &w)) in d.ages().iter().zip(d.weights()).enumerate() {
            if (25.0..=75.0).contains(&a) {
                assert!((w - 1.0).abs() < 0.05, "weight[{i}] = {w} at age {a}");
            }
        }
    }

    #[test]
    fn density_rare_age_upweighted() {
        let mut ages = vec![25.0; 99];
        ages.push(80.0);
        let d = compute_density_weights(&ages, 2.0).unwrap();
        let w25 = d.weights()[0];
        let w80 = d.weights()[99];
        assert!(w80 > w25, "rare age must be upweighted: {w80} vs {w25}");

        // Brute-force KDE oracle at both points.
        let kde = |x: f64| -> f64 {
            ages.iter()
                .map(|&b| {
                    let z = (x - b) / 2.0;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                / (100.0 * 2.0 * (2.0 * std::f64::consts::PI).sqrt())
        };
        assert!((w80 / w25 - kde(25.0) / kde(80.0)).abs() < 1e-9);
    }

    #[test]
    fn density_single_value_is_one() {
        let d = compute_density_weights(&[42.0; 12], 3.0).unwrap();
        for &w in d.weights() {
            assert_eq!(w, 1.0);
        }
    }

    #[test]
    fn density_mean_one_and_positive() {
        let ages: Vec<f64> = (0..200).map(|i| (i * i % 91) as f64).collect();
        let d = compute_density_weights(&ages, silverman_bandwidth(&ages).unwrap()).unwrap();
        let mean: f64 = d.weights().iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
        assert!(d.weights().iter().all(|&w| w > 0.0 && w.is_finite()));
    }

    #[test]
    fn density_rejects_bad_input() {
        assert!(matches!(compute_density_weights(&[], 1.0), Err(Error::BadAgeList)));
        assert!(matches!(compute_density_weights(&[1.0, f64::NAN], 1.0), Err(Error::BadAgeList)));
        assert!(matches!(compute_density_weights(&[1.0], 0.0), Err(Error::BadBandwidth(_))));
        assert!(matches!(compute_density_weights(&[1.0], -2.0), Err(Error::BadBandwidth(_))));
    }

    #[test]
    fn silverman_matches_hand_computation() {
        // Ages 10, 20, 30, 40, 50: sd = sqrt(250), IQR = 20.
        let ages = [10.0, 20.0, 30.0, 40.0, 50.0];
        let h = silverman_bandwidth(&ages).unwrap();
        let sd = 250.0f64.sqrt();
        let expected = 0.9 * sd.min(20.0 / 1.34) * 5.0f64.powf(-0.2);
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn silverman_degenerate_falls_back() {
        assert_eq!(silverman_bandwidth(&[30.0; 10]).unwrap(), 1.0);
        assert!(silverman_bandwidth(&[]).is_err());
    }

    proptest! {
        #[test]
        fn density_permutation_invariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ages: Vec<f64> = (0..40).map(|i| ((i * 37) % 83) as f64).collect();
            let d1 = compute_density_weights(&ages, 5.0).unwrap();

            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..ages.len()).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<f64> = perm.iter().map(|&i| ages[i]).collect();
            let d2 = compute_density_weights(&shuffled, 5.0).unwrap();

            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((d1.weights()[i] - d2.weights()[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn joint_weights_bounded(counts in proptest::collection::vec(0usize..200, 21)) {
            prop_assume!(counts.iter().any(|&n| n > 0));
            let spec: Vec<_> = Expression::ALL
                .iter()
                .enumerate()
                .flat_map(|(i, &e)| {
                    AgeGroup::ALL
                        .iter()
                        .enumerate()
                        .map(move |(j, &g)| (e, g, i * 3 + j))
                })
                .map(|(e, g, k)| (e, g, counts[k]))
                .collect();
            prop_assume!(spec.iter().any(|&(_, _, n)| n > 0));
            let m = manifest_from_counts(&spec);
            let t = compute_joint_weights(&m).unwrap();
            for (_, _, cell) in t.cells() {
                prop_assert!(cell.weight >= 0.0 && cell.weight <= 1.0);
                if cell.count > 0 {
                    prop_assert!(cell.weight > 0.0);
                }
            }
        }
    }
}
