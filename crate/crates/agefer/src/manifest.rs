//! Dataset manifests: labeled sample records, age-group binning, ingestion
//! from line-delimited files, age annotation, and stratified fold assignment.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven expression classes. "contempt" is deliberately not representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expression {
    Neutral,
    Happiness,
    Sadness,
    Surprise,
    Fear,
    Anger,
    Disgust,
}

impl Expression {
    pub const ALL: [Expression; 7] = [
        Expression::Neutral,
        Expression::Happiness,
        Expression::Sadness,
        Expression::Surprise,
        Expression::Fear,
        Expression::Anger,
        Expression::Disgust,
    ];

    pub const COUNT: usize = 7;

    /// Stable class index used for logits and confusion-matrix rows.
    pub fn index(self) -> usize {
        Expression::ALL.iter().position(|&e| e == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Expression> {
        Expression::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Expression::Neutral => "neutral",
            Expression::Happiness => "happiness",
            Expression::Sadness => "sadness",
            Expression::Surprise => "surprise",
            Expression::Fear => "fear",
            Expression::Anger => "anger",
            Expression::Disgust => "disgust",
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Expression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neutral" => Ok(Expression::Neutral),
            "happiness" | "happy" => Ok(Expression::Happiness),
            "sadness" | "sad" => Ok(Expression::Sadness),
            "surprise" => Ok(Expression::Surprise),
            "fear" => Ok(Expression::Fear),
            "anger" | "angry" => Ok(Expression::Anger),
            "disgust" => Ok(Expression::Disgust),
            other => Err(Error::UnknownExpression(other.to_string())),
        }
    }
}

/// Evaluation age strata: children (<18), adults (18-59), elderly (60+).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Children,
    Adults,
    Elderly,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 3] = [AgeGroup::Children, AgeGroup::Adults, AgeGroup::Elderly];

    pub fn name(self) -> &'static str {
        match self {
            AgeGroup::Children => "children",
            AgeGroup::Adults => "adults",
            AgeGroup::Elderly => "elderly",
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "children" => Ok(AgeGroup::Children),
            "adults" => Ok(AgeGroup::Adults),
            "elderly" => Ok(AgeGroup::Elderly),
            other => Err(Error::UnknownAgeGroup(other.to_string())),
        }
    }
}

/// Bin an age in years into its group.
///
/// Boundary convention: 18 and 60 map to the older-side group, so the ranges
/// are [0, 18) children, [18, 60) adults, [60, inf) elderly.
pub fn age_group_of(age_years: f64) -> Result<AgeGroup> {
    if !age_years.is_finite() || age_years < 0.0 {
        return Err(Error::InvalidAge(age_years));
    }
    Ok(if age_years < 18.0 {
        AgeGroup::Children
    } else if age_years < 60.0 {
        AgeGroup::Adults
    } else {
        AgeGroup::Elderly
    })
}

/// Provenance of an age label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeSource {
    GroundTruth,
    Estimated,
}

impl fmt::Display for AgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgeSource::GroundTruth => "ground_truth",
            AgeSource::Estimated => "estimated",
        })
    }
}

impl FromStr for AgeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ground_truth" => Ok(AgeSource::GroundTruth),
            "estimated" => Ok(AgeSource::Estimated),
            other => Err(Error::UnknownAgeGroup(other.to_string())),
        }
    }
}

/// Role of a record in the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownAgeGroup(other.to_string())),
        }
    }
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_ref: String,
    pub expression: Expression,
    /// Age in years; `None` until annotated (or permanently, if estimation failed).
    pub age_years: Option<f64>,
    pub age_source: Option<AgeSource>,
    pub fold: Option<u32>,
    pub split: Split,
}

impl SampleRecord {
    pub fn new(sample_id: impl Into<String>, image_ref: impl Into<String>, expression: Expression) -> Self {
        SampleRecord {
            sample_id: sample_id.into(),
            image_ref: image_ref.into(),
            expression,
            age_years: None,
            age_source: None,
            fold: None,
            split: Split::Train,
        }
    }

    /// Age group derived from `age_years`; `None` when the age is unknown.
    pub fn age_group(&self) -> Option<AgeGroup> {
        self.age_years.and_then(|a| age_group_of(a).ok())
    }
}

/// An immutable collection of sample records with tallies.
///
/// Construction validates sample-id uniqueness and recomputes the tallies, so
/// they are exact by construction. Operations that change records return a
/// fresh manifest. Serialization goes through the tabular manifest format
/// ([`write_manifest`]/[`ingest_manifest`]), not serde.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    records: Vec<SampleRecord>,
    class_counts: BTreeMap<Expression, usize>,
    group_counts: BTreeMap<(Expression, AgeGroup), usize>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, records: Vec<SampleRecord>) -> Result<Self> {
        let name = name.into();
        if records.is_empty() {
            return Err(Error::EmptyManifest(name));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(Error::DuplicateSampleId(r.sample_id.clone()));
            }
        }
        let mut class_counts = BTreeMap::new();
        let mut group_counts = BTreeMap::new();
        for r in &records {
            *class_counts.entry(r.expression).or_insert(0) += 1;
            if let Some(g) = r.age_group() {
                *group_counts.entry((r.expression, g)).or_insert(0) += 1;
            }
        }
        Ok(DatasetManifest {
            name,
            records,
            class_counts,
            group_counts,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Tally of records per expression.
    pub fn class_counts(&self) -> &BTreeMap<Expression, usize> {
        &self.class_counts
    }

    /// Tally of records per (expression, age group); records without a known
    /// age are not counted here.
    pub fn group_counts(&self) -> &BTreeMap<(Expression, AgeGroup), usize> {
        &self.group_counts
    }

    /// Indices of the training pool (records with `split == Train`).
    pub fn train_pool(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Maps manifest file columns onto record fields. Defaults to identity names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSchema {
    pub sample_id: String,
    pub image_ref: String,
    pub expression: String,
    pub age_years: String,
    pub age_source: String,
    pub fold: String,
    pub split: String,
}

impl Default for ManifestSchema {
    fn default() -> Self {
        ManifestSchema {
            sample_id: "sample_id".into(),
            image_ref: "image_ref".into(),
            expression: "expression".into(),
            age_years: "age_years".into(),
            age_source: "age_source".into(),
            fold: "fold".into(),
            split: "split".into(),
        }
    }
}

/// Outcome of [`ingest_manifest`]: the validated manifest plus drop tallies.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    /// Records dropped during ingestion, by reason.
    pub dropped: BTreeMap<DropReason, usize>,
}

impl Ingested {
    pub fn drop_count(&self) -> usize {
        self.dropped.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    UnknownExpression,
    MissingImageRef,
    UnparsableAge,
}

/// Ingest a line-delimited manifest file (UTF-8, header line defines field
/// order). Records with unknown expression labels (including "contempt"),
/// missing image refs, or unparsable ages are dropped and counted; structural
/// problems (unreadable file, zero valid records, duplicate sample ids) are
/// errors.
pub fn ingest_manifest(path: impl AsRef<Path>, schema: &ManifestSchema) -> Result<Ingested> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(&schema.sample_id).ok_or_else(|| Error::MissingColumn(schema.sample_id.clone()))?;
    let ref_col = col(&schema.image_ref).ok_or_else(|| Error::MissingColumn(schema.image_ref.clone()))?;
    let expr_col = col(&schema.expression).ok_or_else(|| Error::MissingColumn(schema.expression.clone()))?;
    let age_col = col(&schema.age_years);
    let src_col = col(&schema.age_source);
    let fold_col = col(&schema.fold);
    let split_col = col(&schema.split);

    let mut records = Vec::new();
    let mut dropped: BTreeMap<DropReason, usize> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();

        let expression = match field(expr_col).parse::<Expression>() {
            Ok(e) => e,
            Err(_) => {
                *dropped.entry(DropReason::UnknownExpression).or_insert(0) += 1;
                continue;
            }
        };
        let image_ref = field(ref_col);
        if image_ref.is_empty() {
            *dropped.entry(DropReason::MissingImageRef).or_insert(0) += 1;
            continue;
        }

        let age_field = age_col.map(field).unwrap_or("");
        let age_years = if age_field.is_empty() {
            None
        } else {
            match age_field.parse::<f64>() {
                Ok(a) if a.is_finite() && a >= 0.0 => Some(a),
                _ => {
                    *dropped.entry(DropReason::UnparsableAge).or_insert(0) += 1;
                    continue;
                }
            }
        };

        let age_source = match src_col.map(field) {
            Some(s) if !s.is_empty() => Some(s.parse::<AgeSource>()?),
            _ => age_years.map(|_| AgeSource::GroundTruth),
        };
        let fold = match fold_col.map(field) {
            Some(s) if !s.is_empty() => Some(s.parse::<u32>().map_err(|_| Error::MissingColumn(schema.fold.clone()))?),
            _ => None,
        };
        let split = match split_col.map(field) {
            Some(s) if !s.is_empty() => s.parse::<Split>()?,
            _ => Split::Train,
        };

        records.push(SampleRecord {
            sample_id: field(id_col).to_string(),
            image_ref: image_ref.to_string(),
            expression,
            age_years,
            age_source,
            fold,
            split,
        });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let manifest = DatasetManifest::new(name, records)?;
    Ok(Ingested { manifest, dropped })
}

/// Canonical column order used by [`write_manifest`].
const MANIFEST_COLUMNS: [&str; 7] = [
    "sample_id",
    "image_ref",
    "expression",
    "age_years",
    "age_source",
    "fold",
    "split",
];

/// Write a manifest in the canonical line-delimited format. Re-ingesting the
/// emitted file reproduces the records exactly (f64 ages round-trip via the
/// shortest decimal representation).
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(MANIFEST_COLUMNS)?;
    for r in manifest.records() {
        writer.write_record([
            r.sample_id.as_str(),
            r.image_ref.as_str(),
            r.expression.name(),
            &r.age_years.map(|a| a.to_string()).unwrap_or_default(),
            &r.age_source.map(|s| s.to_string()).unwrap_or_default(),
            &r.fold.map(|f| f.to_string()).unwrap_or_default(),
            &r.split.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Per-image age estimation contract. Implementations must return a finite,
/// non-negative age in years.
pub trait AgeEstimator {
    fn estimate_age(&self, image_ref: &str) -> std::result::Result<f64, String>;
}

/// Stub estimator returning a fixed age, for tests and dry runs.
#[derive(Debug, Clone, Copy)]
pub struct ConstantAgeEstimator(pub f64);

impl AgeEstimator for ConstantAgeEstimator {
    fn estimate_age(&self, _image_ref: &str) -> std::result::Result<f64, String> {
        Ok(self.0)
    }
}

/// Outcome of [`annotate_ages`].
#[derive(Debug, Clone)]
pub struct Annotated {
    pub manifest: DatasetManifest,
    /// Number of records that received an estimated age.
    pub annotated: usize,
    /// Records the estimator failed on; they keep `age_years = None` and are
    /// excluded from age-aware training downstream.
    pub failed: Vec<String>,
}

/// Fill missing ages from an estimator. Records that already carry an age are
/// untouched; estimator failures are flagged, not fatal.
pub fn annotate_ages(manifest: &DatasetManifest, estimator: &dyn AgeEstimator) -> Result<Annotated> {
    let mut records = manifest.records().to_vec();
    let mut annotated = 0;
    let mut failed = Vec::new();
    for r in &mut records {
        if r.age_years.is_some() {
            continue;
        }
        match estimator.estimate_age(&r.image_ref) {
            Ok(age) if age.is_finite() && age >= 0.0 => {
                r.age_years = Some(age);
                r.age_source = Some(AgeSource::Estimated);
                annotated += 1;
            }
            Ok(_) | Err(_) => failed.push(r.sample_id.clone()),
        }
    }
    let manifest = DatasetManifest::new(manifest.name.clone(), records)?;
    Ok(Annotated {
        manifest,
        annotated,
        failed,
    })
}

/// Assign cross-validation folds to every training-pool record.
///
/// Stratified by (expression, age group): records in each cell are shuffled
/// with a seeded RNG and dealt round-robin from a random starting fold, so
/// per-fold cell counts deviate from proportionality by at most 1. When k
/// exceeds the smallest non-empty cell, stratification falls back to
/// expression only (with a warning). Deterministic given the seed.
pub fn assign_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::BadFoldCount(k));
    }
    let pool = manifest.train_pool();
    if pool.is_empty() {
        return Err(Error::EmptyManifest(manifest.name.clone()));
    }

    let mut records = manifest.records().to_vec();

    // Strata keyed by (expression index, age-group index or "unknown").
    let cell_key = |r: &SampleRecord, by_group: bool| -> (usize, usize) {
        let g = if by_group {
            r.age_group().map(|g| 1 + g as usize).unwrap_or(0)
        } else {
            0
        };
        (r.expression.index(), g)
    };

    let strata = |by_group: bool| -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for &i in &pool {
            cells.entry(cell_key(&records[i], by_group)).or_default().push(i);
        }
        cells
    };

    let mut cells = strata(true);
    let smallest = cells.values().map(Vec::len).min().unwrap_or(0);
    if smallest < k {
        log::warn!(
            "smallest (expression, age group) stratum has {smallest} records < k={k}; \
             falling back to expression-only stratification"
        );
        cells = strata(false);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for indices in cells.values() {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let start: usize = rng.gen_range(0..k);
        for (j, &i) in shuffled.iter().enumerate() {
            records[i].fold = Some(((start + j) % k) as u32);
        }
    }

    DatasetManifest::new(manifest.name.clone(), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample(id: &str, expr: Expression, age: Option<f64>) -> SampleRecord {
        let mut r = SampleRecord::new(id, format!("{id}.png"), expr);
        r.age_years = age;
        r.age_source = age.map(|_| AgeSource::GroundTruth);
        r
    }

    #[test]
    fn age_group_boundaries() {
        assert_eq!(age_group_of(17.0).unwrap(), AgeGroup::Children);
        assert_eq!(age_group_of(18.0).unwrap(), AgeGroup::Adults);
        assert_eq!(age_group_of(60.0).unwrap(), AgeGroup::Elderly);
        assert_eq!(age_group_of(0.0).unwrap(), AgeGroup::Children);
        assert_eq!(age_group_of(59.999).unwrap(), AgeGroup::Adults);
        assert!(matches!(age_group_of(-1.0), Err(Error::InvalidAge(_))));
        assert!(age_group_of(f64::NAN).is_err());
    }

    #[test]
    fn age_group_monotone_and_surjective() {
        let mut last = AgeGroup::Children;
        let mut seen = HashSet::new();
        for i in 0..=1200 {
            let g = age_group_of(i as f64 / 10.0).unwrap();
            assert!(g >= last, "age_group_of must be monotone in age");
            last = g;
            seen.insert(g);
        }
        assert_eq!(seen.len(), 3);
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_well_formed() {
        let mut body = String::from("sample_id,image_ref,expression,age_years\n");
        for i in 0..10 {
            body.push_str(&format!("s{i},img{i}.png,happiness,{}\n", 20 + i));
        }
        let f = write_temp(&body);
        let out = ingest_manifest(f.path(), &ManifestSchema::default()).unwrap();
        assert_eq!(out.manifest.len(), 10);
        assert_eq!(out.drop_count(), 0);
        assert_eq!(out.manifest.class_counts()[&Expression::Happiness], 10);
    }

    #[test]
    fn ingest_drops_contempt() {
        let mut body = String::from("sample_id,image_ref,expression\n");
        for i in 0..9 {
            body.push_str(&format!("s{i},img{i}.png,fear\n"));
        }
        body.push_str("s9,img9.png,contempt\n");
        let f = write_temp(&body);
        let out = ingest_manifest(f.path(), &ManifestSchema::default()).unwrap();
        assert_eq!(out.manifest.len(), 9);
        assert_eq!(out.drop_count(), 1);
        assert_eq!(out.dropped[&DropReason::UnknownExpression], 1);
    }

    #[test]
    fn ingest_rejects_duplicate_ids() {
        let body = "sample_id,image_ref,expression\na,x.png,fear\na,y.png,anger\n";
        let f = write_temp(body);
        let err = ingest_manifest(f.path(), &ManifestSchema::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateSampleId(id) if id == "a"));
    }

    #[test]
    fn ingest_rejects_empty() {
        let f = write_temp("sample_id,image_ref,expression\n");
        assert!(matches!(
            ingest_manifest(f.path(), &ManifestSchema::default()),
            Err(Error::EmptyManifest(_))
        ));
    }

    #[test]
    fn ingest_respects_schema_mapping() {
        let body = "id,file,label\nz1,z1.png,surprise\n";
        let f = write_temp(body);
        let schema = ManifestSchema {
            sample_id: "id".into(),
            image_ref: "file".into(),
            expression: "label".into(),
            ..ManifestSchema::default()
        };
        let out = ingest_manifest(f.path(), &schema).unwrap();
        assert_eq!(out.manifest.records()[0].expression, Expression::Surprise);
    }

    #[test]
    fn manifest_round_trip_exact() {
        let mut records = Vec::new();
        for i in 0..20 {
            let mut r = sample(&format!("s{i}"), Expression::ALL[i % 7], Some(3.25 + i as f64 * 7.1));
            r.fold = Some((i % 5) as u32);
            r.split = if i % 4 == 0 { Split::Test } else { Split::Train };
            records.push(r);
        }
        records.push(sample("no-age", Expression::Fear, None));
        let manifest = DatasetManifest::new("rt", records).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&manifest, &path).unwrap();
        let back = ingest_manifest(&path, &ManifestSchema::default()).unwrap();
        assert_eq!(back.drop_count(), 0);
        assert_eq!(back.manifest.records(), manifest.records());
    }

    #[test]
    fn annotate_fills_missing_only() {
        let records = vec![
            sample("a", Expression::Fear, Some(40.0)),
            sample("b", Expression::Fear, None),
            sample("c", Expression::Anger, None),
            sample("d", Expression::Anger, None),
        ];
        let manifest = DatasetManifest::new("t", records).unwrap();
        let out = annotate_ages(&manifest, &ConstantAgeEstimator(25.0)).unwrap();
        assert_eq!(out.annotated, 3);
        assert!(out.failed.is_empty());
        let recs = out.manifest.records();
        assert_eq!(recs[0].age_years, Some(40.0));
        assert_eq!(recs[0].age_source, Some(AgeSource::GroundTruth));
        for r in &recs[1..] {
            assert_eq!(r.age_years, Some(25.0));
            assert_eq!(r.age_source, Some(AgeSource::Estimated));
            assert_eq!(r.age_group(), Some(AgeGroup::Adults));
        }
    }

    #[test]
    fn annotate_all_present_is_noop() {
        let records = vec![sample("a", Expression::Fear, Some(12.0))];
        let manifest = DatasetManifest::new("t", records).unwrap();
        let out = annotate_ages(&manifest, &ConstantAgeEstimator(99.0)).unwrap();
        assert_eq!(out.annotated, 0);
        assert_eq!(out.manifest, manifest);
    }

    struct FlakyEstimator;
    impl AgeEstimator for FlakyEstimator {
        fn estimate_age(&self, image_ref: &str) -> std::result::Result<f64, String> {
            if image_ref.contains("bad") {
                Err("detector crashed".into())
            } else {
                Ok(33.0)
            }
        }
    }

    #[test]
    fn annotate_flags_failures() {
        let mut records: Vec<_> = (0..4).map(|i| sample(&format!("s{i}"), Expression::Fear, None)).collect();
        records.push(SampleRecord::new("s4", "bad.png", Expression::Fear));
        let manifest = DatasetManifest::new("t", records).unwrap();
        let out = annotate_ages(&manifest, &FlakyEstimator).unwrap();
        assert_eq!(out.annotated, 4);
        assert_eq!(out.failed, vec!["s4".to_string()]);
        assert_eq!(out.manifest.records()[4].age_years, None);
    }

    fn balanced_manifest(per_cell: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for expr in Expression::ALL {
            for (gi, age) in [10.0, 30.0, 70.0].iter().enumerate() {
                for j in 0..per_cell {
                    records.push(sample(&format!("{expr}-{gi}-{j}"), expr, Some(*age)));
                }
            }
        }
        DatasetManifest::new("balanced", records).unwrap()
    }

    #[test]
    fn folds_partition_the_pool() {
        let manifest = balanced_manifest(5);
        let folded = assign_folds(&manifest, 5, 7).unwrap();
        let mut per_fold = vec![0usize; 5];
        for r in folded.records() {
            per_fold[r.fold.unwrap() as usize] += 1;
        }
        assert_eq!(per_fold.iter().sum::<usize>(), folded.len());
        assert_eq!(per_fold, vec![21; 5]);
    }

    #[test]
    fn folds_deterministic() {
        let manifest = balanced_manifest(4);
        let a = assign_folds(&manifest, 5, 42).unwrap();
        let b = assign_folds(&manifest, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = assign_folds(&manifest, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn folds_stratified_within_one() {
        // 14 records per cell, k=5: per-fold cell counts must be 2 or 3.
        let manifest = balanced_manifest(14);
        let folded = assign_folds(&manifest, 5, 3).unwrap();
        let mut counts: BTreeMap<(Expression, AgeGroup, u32), usize> = BTreeMap::new();
        for r in folded.records() {
            *counts.entry((r.expression, r.age_group().unwrap(), r.fold.unwrap())).or_insert(0) += 1;
        }
        for ((expr, group, fold), n) in counts {
            assert!(
                n == 2 || n == 3,
                "cell ({expr},{group}) fold {fold} has {n} records"
            );
        }
    }

    #[test]
    fn folds_fall_back_when_k_exceeds_stratum() {
        let mut records = vec![sample("only", Expression::Fear, Some(70.0))];
        for i in 0..30 {
            records.push(sample(&format!("a{i}"), Expression::Fear, Some(30.0)));
            records.push(sample(&format!("h{i}"), Expression::Happiness, Some(30.0)));
        }
        let manifest = DatasetManifest::new("skewed", records).unwrap();
        let folded = assign_folds(&manifest, 5, 1).unwrap();
        assert!(folded.records().iter().all(|r| r.fold.is_some()));
    }

    #[test]
    fn folds_reject_bad_k() {
        let manifest = balanced_manifest(2);
        assert!(matches!(assign_folds(&manifest, 1, 0), Err(Error::BadFoldCount(1))));
    }
}
