//! Synthetic open-set domain pairs, CSV ingestion and the stochastic
//! feature transform used for consistency training.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Features with class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData<T> {
    pub features: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledData<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Ground-truth target labels. Only evaluation code takes this type; the
/// adaptation entry points accept bare feature matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair<T> {
    pub source: LabeledData<T>,
    pub target_features: Array2<T>,
    pub target_labels_hidden: HiddenLabels,
    pub num_known: usize,
    pub num_unknown: usize,
}

impl<T: Scalar> DomainPair<T> {
    pub fn num_target_classes(&self) -> usize {
        self.num_known + self.num_unknown
    }
}

/// Placement of the target-only classes on the circle of class centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownPlacement {
    /// Unknown classes occupy the slots after the known ones.
    #[default]
    Trailing,
    /// Unknown classes are spread evenly between known classes.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_known: usize,
    pub num_unknown: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub radius: f64,
    pub blob_std: f64,
    /// Rotation (radians) of the target domain in the first coordinate plane.
    pub shift_rotation: f64,
    /// Translation of the target domain; missing trailing entries are zero.
    pub shift_translation: Vec<f64>,
    pub placement: UnknownPlacement,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            num_known: 4,
            num_unknown: 2,
            source_per_class: 200,
            target_per_class: 150,
            radius: 4.0,
            blob_std: 0.5,
            shift_rotation: 25f64.to_radians(),
            shift_translation: vec![0.5, 0.5],
            placement: UnknownPlacement::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(contract("synthetic data needs dim >= 2"));
        }
        if self.num_known < 2 {
            return Err(contract("synthetic data needs at least 2 known classes"));
        }
        if self.source_per_class < 8 || self.target_per_class < 8 {
            return Err(contract("per-class counts must be at least 8"));
        }
        if !(self.blob_std >= 0.0) || !self.radius.is_finite() {
            return Err(contract("blob_std must be >= 0 and radius finite"));
        }
        if self.shift_translation.len() > self.dim {
            return Err(contract("shift_translation longer than dim"));
        }
        Ok(())
    }

    /// Angular slot of each target class (known classes first).
    fn slots(&self) -> Vec<usize> {
        let total = self.num_known + self.num_unknown;
        match self.placement {
            UnknownPlacement::Trailing => (0..total).collect(),
            UnknownPlacement::Interleaved => {
                // Bresenham-style spread of unknown slots among all slots.
                let mut known = Vec::new();
                let mut unknown = Vec::new();
                let mut acc = 0usize;
                for slot in 0..total {
                    acc += self.num_unknown;
                    if acc >= total && unknown.len() < self.num_unknown {
                        acc -= total;
                        unknown.push(slot);
                    } else {
                        known.push(slot);
                    }
                }
                known.extend(unknown);
                known
            }
        }
    }

    /// Angle of every target class center, known classes first.
    pub fn angles(&self) -> Vec<f64> {
        let total = self.num_known + self.num_unknown;
        self.slots()
            .into_iter()
            .map(|slot| 2.0 * PI * slot as f64 / total as f64)
            .collect()
    }

    /// Source-domain class centers for every target class, known classes first.
    pub fn centers(&self) -> Array2<f64> {
        let total = self.num_known + self.num_unknown;
        let mut centers = Array2::zeros((total, self.dim));
        for (class, angle) in self.angles().into_iter().enumerate() {
            centers[[class, 0]] = self.radius * angle.cos();
            centers[[class, 1]] = self.radius * angle.sin();
        }
        centers
    }

    /// Applies the configured domain shift to one point.
    pub fn shift_point(&self, x: &mut [f64]) {
        let (c, s) = (self.shift_rotation.cos(), self.shift_rotation.sin());
        let (a, b) = (x[0], x[1]);
        x[0] = c * a - s * b;
        x[1] = s * a + c * b;
        for (v, t) in x.iter_mut().zip(&self.shift_translation) {
            *v += t;
        }
    }

    /// Class centers as they appear in the target domain.
    pub fn target_centers(&self) -> Array2<f64> {
        let mut c = self.centers();
        for mut row in c.rows_mut() {
            self.shift_point(row.as_slice_mut().expect("standard layout"));
        }
        c
    }
}

fn sample_blobs(
    centers: &Array2<f64>,
    classes: std::ops::Range<usize>,
    per_class: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = centers.ncols();
    let mut points = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for class in classes {
        for _ in 0..per_class {
            let p: Vec<f64> = (0..dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    centers[[class, j]] + std * z
                })
                .collect();
            points.push(p);
            labels.push(class);
        }
    }
    (points, labels)
}

fn to_matrix<T: Scalar>(rows: &[Vec<f64>], dim: usize) -> Array2<T> {
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| T::of(rows[i][j]))
}

/// Gaussian blobs around class centers on a circle.
///
/// The source holds the known classes; the target holds known and unknown
/// classes, all moved by the configured rotation and translation. Target rows
/// are shuffled. Deterministic in `(config, seed)`.
pub fn generate_synthetic<T: Scalar>(config: &SynthConfig, seed: u64) -> Result<DomainPair<T>> {
    config.validate()?;
    if config.radius == 0.0 && config.blob_std >= 0.0 {
        log::warn!("synthetic config has zero class separation; classes overlap completely");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = config.centers();
    let total = config.num_known + config.num_unknown;

    let (src, src_labels) = sample_blobs(
        &centers,
        0..config.num_known,
        config.source_per_class,
        config.blob_std,
        &mut rng,
    );
    let (mut tgt, tgt_labels) =
        sample_blobs(&centers, 0..total, config.target_per_class, config.blob_std, &mut rng);
    for p in &mut tgt {
        config.shift_point(p);
    }
    let mut order: Vec<usize> = (0..tgt.len()).collect();
    order.shuffle(&mut rng);
    let tgt: Vec<Vec<f64>> = order.iter().map(|&i| tgt[i].clone()).collect();
    let tgt_labels: Vec<usize> = order.iter().map(|&i| tgt_labels[i]).collect();

    Ok(DomainPair {
        source: LabeledData {
            features: to_matrix(&src, config.dim),
            labels: src_labels,
        },
        target_features: to_matrix(&tgt, config.dim),
        target_labels_hidden: HiddenLabels::new(tgt_labels),
        num_known: config.num_known,
        num_unknown: config.num_unknown,
    })
}

/// A table read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub feature_names: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

/// Reads a headered CSV. Every column except `label_column` is a feature.
///
/// With `has_labels == false` the label column is ignored if present.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, has_labels: bool) -> Result<CsvDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers.iter().position(|h| h == label_column);
    if has_labels && label_idx.is_none() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("label column {label_column:?} not found"),
        });
    }
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: "no feature columns".into(),
        });
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Schema {
                path: path.to_path_buf(),
                message: format!("ragged row {}: {len} fields, expected {expected_len}", r + 1),
            },
            _ => Error::Csv(e),
        })?;
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                column: headers[c].to_string(),
                message: format!("{cell:?} is not a number"),
            })?;
            values.push(v);
        }
        if let (true, Some(li)) = (has_labels, label_idx) {
            let cell = &record[li];
            let v: usize = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                column: label_column.to_string(),
                message: format!("{cell:?} is not a class index"),
            })?;
            labels.push(v);
        }
        rows += 1;
    }
    Ok(CsvDataset {
        feature_names: feature_cols.iter().map(|&c| headers[c].to_string()).collect(),
        features: Array2::from_shape_vec((rows, feature_cols.len()), values).expect("counted"),
        labels: has_labels.then_some(labels),
    })
}

/// Writes features (and optionally labels) as CSV with columns `x0..x{d-1}`.
pub fn write_csv<T: Scalar>(
    path: impl AsRef<Path>,
    features: &Array2<T>,
    labels: Option<(&str, &[usize])>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let mut header: Vec<String> = (0..features.ncols()).map(|j| format!("x{j}")).collect();
    if let Some((name, _)) = labels {
        header.push(name.to_string());
    }
    w.write_record(&header)?;
    for (i, row) in features.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some((_, l)) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.flush()?;
    Ok(())
}

/// Random label-preserving perturbation `scale · R · x + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformPolicy {
    pub noise_std: f64,
    /// Maximum rotation angle (radians) in a random coordinate plane.
    pub rotation_max: f64,
    pub scale_range: (f64, f64),
}

impl Default for TransformPolicy {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            rotation_max: 10f64.to_radians(),
            scale_range: (0.9, 1.1),
        }
    }
}

impl TransformPolicy {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            rotation_max: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_std >= 0.0) || !(self.rotation_max >= 0.0) || !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(contract(format!("invalid transform policy {self:?}")));
        }
        Ok(())
    }

    /// Transformed copy of one feature row.
    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, x: ArrayView1<T>, rng: &mut R) -> Array1<T> {
        let mut out = x.to_owned();
        let d = out.len();
        if self.rotation_max > 0.0 && d >= 2 {
            let theta = rng.random_range(-self.rotation_max..=self.rotation_max);
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            let (c, s) = (T::of(theta.cos()), T::of(theta.sin()));
            let (a, b) = (out[i], out[j]);
            out[i] = c * a - s * b;
            out[j] = s * a + c * b;
        }
        let (lo, hi) = self.scale_range;
        if lo != 1.0 || hi != 1.0 {
            let k = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            out.mapv_inplace(|v| v * T::of(k));
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("validated std");
            out.mapv_inplace(|v| v + T::of(normal.sample(rng)));
        }
        out
    }

    /// Transforms every row independently.
    pub fn apply_batch<T: Scalar, R: Rng + ?Sized>(&self, x: &Array2<T>, rng: &mut R) -> Array2<T> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.apply(row, rng));
        }
        out
    }
}

/// Index of the nearest row of `centers` (Euclidean).
pub fn nearest_center(x: ArrayView1<f64>, centers: &Array2<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centers.rows().into_iter().enumerate() {
        let d: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}
