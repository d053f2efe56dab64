//! Datasets of `(x, c, y)` triples.
//!
//! Synthetic data comes from a Gaussian copula: a latent `u ~ N(0, Σ_true)`
//! with block-constant correlation is thresholded into binary concepts, mixed
//! into noisy features, and pushed through a random linear labeller.
//! External data is read from the `concept-csv` directory layout.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::gaussian::cholesky;
use crate::nn::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid_config("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic { spec: SyntheticSpec, seed: u64 },
    External(PathBuf),
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub concepts: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub block_size: usize,
    /// Within-block correlation of the latent Gaussian.
    pub rho: f64,
    pub feature_noise: f64,
    /// Weight of each block's mean latent in the features. Below 1 the block
    /// mean is partly hidden from `x`, so concepts in a block stay correlated
    /// after conditioning on the input.
    pub shared_visibility: f64,
    /// Fraction of labels replaced by a different, uniformly drawn class.
    pub label_noise: f64,
    /// Seed of the linear labeller `y = argmax(W·(2c − 1) + b)`.
    pub label_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            concepts: 16,
            classes: 8,
            input_dim: 32,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            block_size: 4,
            rho: 0.7,
            feature_noise: 0.3,
            shared_visibility: 1.0,
            label_noise: 0.0,
            label_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concepts == 0 {
            return Err(invalid_config("concepts", "must be positive"));
        }
        if self.classes < 2 {
            return Err(invalid_config("classes", "need at least two classes"));
        }
        if self.input_dim == 0 {
            return Err(invalid_config("input_dim", "must be positive"));
        }
        if self.block_size == 0 || self.block_size > self.concepts {
            return Err(invalid_config("block_size", "must lie in 1..=concepts"));
        }
        if self.block_size > 1 {
            let lower = -1.0 / (self.block_size as f64 - 1.0);
            if !(self.rho > lower && self.rho < 1.0) {
                return Err(Error::InvalidCorrelation(format!(
                    "rho {} outside ({lower}, 1) for block size {}",
                    self.rho, self.block_size
                )));
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(invalid_config("feature_noise", "must be a nonnegative number"));
        }
        if !(0.0..=1.0).contains(&self.shared_visibility) {
            return Err(invalid_config("shared_visibility", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(invalid_config("label_noise", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Block-diagonal latent correlation matrix.
    pub fn latent_correlation(&self) -> DMatrix<f64> {
        let c = self.concepts;
        DMatrix::from_fn(c, c, |i, j| {
            if i == j {
                1.0
            } else if i / self.block_size == j / self.block_size {
                self.rho
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    concepts: Vec<Vec<u8>>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    classes: usize,
    concept_names: Vec<String>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        concepts: Vec<Vec<u8>>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = features.len();
        if concepts.len() != n || labels.len() != n || splits.len() != n {
            return Err(Error::ShapeMismatch("features, concepts, labels and splits differ in length".into()));
        }
        let d = features.first().map_or(0, Vec::len);
        let c = concepts.first().map_or(0, Vec::len);
        for (i, row) in features.iter().enumerate() {
            if row.len() != d {
                return Err(Error::ShapeMismatch(format!("feature row {i} has {} columns, expected {d}", row.len())));
            }
        }
        for (i, row) in concepts.iter().enumerate() {
            if row.len() != c {
                return Err(Error::ShapeMismatch(format!("concept row {i} has {} columns, expected {c}", row.len())));
            }
            if let Some(j) = row.iter().position(|&v| v > 1) {
                return Err(Error::ShapeMismatch(format!("concept ({i}, {j}) is not binary")));
            }
        }
        if let Some(i) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::InvalidLabel(format!("row {i} has label {} >= {classes}", labels[i])));
        }
        let concept_names = (0..c).map(|i| format!("concept_{i}")).collect();
        Ok(Self {
            features,
            concepts,
            labels,
            splits,
            classes,
            concept_names,
            provenance,
        })
    }

    pub fn with_concept_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_concepts() {
            return Err(Error::ShapeMismatch(format!(
                "{} concept names for {} concepts",
                names.len(),
                self.num_concepts()
            )));
        }
        self.concept_names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.first().map_or(0, Vec::len)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn features(&self, row: usize) -> &[f64] {
        &self.features[row]
    }

    pub fn concepts(&self, row: usize) -> &[u8] {
        &self.concepts[row]
    }

    /// Concept row as `0.0`/`1.0`.
    pub fn concepts_f64(&self, row: usize) -> Vec<f64> {
        self.concepts[row].iter().map(|&v| v as f64).collect()
    }

    pub fn label(&self, row: usize) -> usize {
        self.labels[row]
    }

    pub fn split(&self, row: usize) -> Split {
        self.splits[row]
    }

    /// Row indices belonging to `split`, in order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Draws a synthetic dataset; identical seeds give identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.concepts;
    let d = spec.input_dim;
    let k = spec.classes;
    let chol = cholesky(&spec.latent_correlation())
        .map_err(|e| Error::InvalidCorrelation(format!("latent correlation not PD: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix_normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("finite");
    let mixing = DMatrix::from_fn(d, c, |_, _| mix_normal.sample(&mut rng));

    // label flips use their own stream so x and c do not depend on the rate
    let mut flip_rng = ChaCha8Rng::seed_from_u64(seed);
    flip_rng.set_stream(1);
    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.label_seed);
    let label_w = DMatrix::from_fn(k, c, |_, _| label_rng.sample::<f64, _>(StandardNormal));
    let label_b = DVector::from_fn(k, |_, _| label_rng.sample::<f64, _>(StandardNormal));

    let n = spec.n_train + spec.n_val + spec.n_test;
    let mut features = Vec::with_capacity(n);
    let mut concepts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let eps = DVector::from_fn(c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &chol * eps;
        let cvec: Vec<u8> = u.iter().map(|&v| u8::from(v > 0.0)).collect();
        let signs = DVector::from_fn(c, |j, _| 2.0 * f64::from(cvec[j]) - 1.0);
        let mut seen = u.clone();
        for block in (0..c).step_by(spec.block_size) {
            let end = (block + spec.block_size).min(c);
            let mean = u.rows(block, end - block).mean();
            for j in block..end {
                seen[j] -= (1.0 - spec.shared_visibility) * mean;
            }
        }
        let mut x = &mixing * &seen;
        for v in x.iter_mut() {
            *v += spec.feature_noise * rng.sample::<f64, _>(StandardNormal);
        }
        let scores = &label_w * &signs + &label_b;
        let mut y = argmax(scores.as_slice());
        if spec.label_noise > 0.0 && flip_rng.random::<f64>() < spec.label_noise {
            let other = flip_rng.random_range(0..k - 1);
            y = if other >= y { other + 1 } else { other };
        }
        features.push(x.as_slice().to_vec());
        concepts.push(cvec);
        labels.push(y);
        splits.push(if i < spec.n_train {
            Split::Train
        } else if i < spec.n_train + spec.n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Dataset::new(
        features,
        concepts,
        labels,
        splits,
        k,
        Provenance::Synthetic {
            spec: spec.clone(),
            seed,
        },
    )
}

pub const CSV_FORMAT_NAME: &str = "concept-csv";
pub const CSV_FORMAT_VERSION: u32 = 1;

/// `manifest.json` of the concept-csv layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub concepts: usize,
    pub classes: usize,
    /// Half-open row ranges per split.
    pub splits: SplitRanges,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
}

/// Writes `features.csv`, `concepts.csv`, `labels.csv` and `manifest.json`.
///
/// Rows must be grouped train, then val, then test.
pub fn save_external(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ranges = contiguous_ranges(data)?;
    let manifest = Manifest {
        format: CSV_FORMAT_NAME.into(),
        version: CSV_FORMAT_VERSION,
        input_dim: data.input_dim(),
        concepts: data.num_concepts(),
        classes: data.classes(),
        splits: ranges,
        concept_names: Some(data.concept_names().to_vec()),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;

    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_path(dir.join("features.csv")).map_err(csv_err)?;
    w.write_record((0..data.input_dim()).map(|j| format!("f{j}"))).map_err(csv_err)?;
    for i in 0..data.len() {
        w.write_record(data.features(i).iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("concepts.csv")).map_err(csv_err)?;
    w.write_record(data.concept_names()).map_err(csv_err)?;
    for i in 0..data.len() {
        w.write_record(data.concepts(i).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_err)?;
    w.write_record(["label"]).map_err(csv_err)?;
    for i in 0..data.len() {
        w.write_record([data.label(i).to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn contiguous_ranges(data: &Dataset) -> Result<SplitRanges> {
    let mut bounds = [[0usize; 2]; 3];
    let order = [Split::Train, Split::Val, Split::Test];
    let mut pos = 0;
    for (slot, split) in order.iter().enumerate() {
        let start = pos;
        while pos < data.len() && data.split(pos) == *split {
            pos += 1;
        }
        bounds[slot] = [start, pos];
    }
    if pos != data.len() {
        return Err(Error::ShapeMismatch("rows must be ordered train, val, test".into()));
    }
    Ok(SplitRanges {
        train: bounds[0],
        val: bounds[1],
        test: bounds[2],
    })
}

/// Reads a concept-csv directory.
pub fn load_external(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text).map_err(|e| Error::Parse {
        file: "manifest.json".into(),
        row: e.line(),
        column: e.column(),
        reason: e.to_string(),
    })?;
    if manifest.format != CSV_FORMAT_NAME || manifest.version != CSV_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "expected {CSV_FORMAT_NAME} v{CSV_FORMAT_VERSION}, got {} v{}",
            manifest.format, manifest.version
        )));
    }
    let features: Vec<Vec<f64>> = read_table(dir, "features.csv", manifest.input_dim, |s| {
        s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or("not a finite number")
    })?;
    let concepts: Vec<Vec<u8>> = read_table(dir, "concepts.csv", manifest.concepts, |s| match s.trim() {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        _ => Err("concept value must be 0 or 1"),
    })?;
    let classes = manifest.classes;
    let labels: Vec<usize> = read_table(dir, "labels.csv", 1, |s| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&y| y < classes)
            .ok_or("label must be an integer class index below the declared class count")
    })?
    .into_iter()
    .map(|r| r[0])
    .collect();

    let n = features.len();
    if concepts.len() != n || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "row counts differ: features {n}, concepts {}, labels {}",
            concepts.len(),
            labels.len()
        )));
    }
    let r = &manifest.splits;
    let ordered = r.train[0] == 0 && r.train[1] == r.val[0] && r.val[1] == r.test[0] && r.test[1] == n;
    let well_formed = r.train[0] <= r.train[1] && r.val[0] <= r.val[1] && r.test[0] <= r.test[1];
    if !(ordered && well_formed) {
        return Err(Error::ShapeMismatch(format!(
            "split ranges must partition 0..{n} as train, val, test"
        )));
    }
    let splits = (0..n)
        .map(|i| {
            if i < r.train[1] {
                Split::Train
            } else if i < r.val[1] {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    let ds = Dataset::new(features, concepts, labels, splits, classes, Provenance::External(dir.to_path_buf()))?;
    match manifest.concept_names {
        Some(names) => ds.with_concept_names(names),
        None => Ok(ds),
    }
}

fn read_table<T>(
    dir: &Path,
    name: &str,
    width: usize,
    parse: impl Fn(&str) -> std::result::Result<T, &'static str>,
) -> Result<Vec<Vec<T>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(dir.join(name))
        .map_err(|e| Error::Io(format!("{name}: {e}")))?;
    let header_len = reader
        .headers()
        .map_err(|e| Error::Io(format!("{name}: {e}")))?
        .len();
    if header_len != width {
        return Err(Error::ShapeMismatch(format!("{name}: header has {header_len} columns, manifest declares {width}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // line 1 is the header
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: name.into(),
            row: line,
            column: 0,
            reason: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::ShapeMismatch(format!("{name}: row {line} has {} columns, expected {width}", rec.len())));
        }
        let mut row = Vec::with_capacity(width);
        for (j, cell) in rec.iter().enumerate() {
            let v = parse(cell).map_err(|reason| Error::Parse {
                file: name.into(),
                row: line,
                column: j + 1,
                reason: format!("{reason}: {cell:?}"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}
