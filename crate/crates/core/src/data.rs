//! Dataset construction: synthetic 2-D sets, CIFAR binary ingestion, CSV
//! I/O, covariate-shift corruptions, OOD generators and splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Matrix;

/// Channel-planar image layout: pixel (y, x) of channel c lives at
/// column `c·H·W + y·W + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const CIFAR: ImageShape = ImageShape {
        height: 32,
        width: 32,
        channels: 3,
    };

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        c * self.height * self.width + y * self.width + x
    }
}

/// Per-feature affine normalisation `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-column statistics. Zero-variance columns get std 1.
    pub fn fit(ds: &Dataset) -> Self {
        let mean = ds.x.col_means();
        let std =
            ds.x.col_stds()
                .into_iter()
                .map(|s| if s > 0.0 { s } else { 1.0 })
                .collect();
        Self { mean, std }
    }

    /// One statistic per image channel, broadcast over that channel's pixels.
    pub fn fit_channels(ds: &Dataset, shape: ImageShape) -> Result<Self> {
        if ds.dim() != shape.len() {
            return Err(Error::Shape("image shape does not match feature count".into()));
        }
        let plane = shape.height * shape.width;
        let mut mean = Vec::with_capacity(shape.len());
        let mut std = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            let vals: Vec<f64> =
                ds.x.row_iter()
                    .flat_map(|r| r[c * plane..(c + 1) * plane].iter().copied())
                    .collect();
            let n = vals.len().max(1) as f64;
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let s = if v > 0.0 { v.sqrt() } else { 1.0 };
            mean.extend(std::iter::repeat_n(m, plane));
            std.extend(std::iter::repeat_n(s, plane));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if self.mean.len() != ds.dim() {
            return Err(Error::Shape(format!(
                "normalisation stats for {} features applied to {}",
                self.mean.len(),
                ds.dim()
            )));
        }
        let mut out = ds.clone();
        for r in 0..out.x.rows() {
            for ((v, m), s) in out.x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out.norm = Some(self.clone());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    pub norm: Option<NormStats>,
    pub image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.rows(), labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            x,
            labels,
            num_classes,
            name: name.into(),
            norm: None,
            image: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
            norm: self.norm.clone(),
            image: self.image,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Indices grouped by class, ascending within each class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            groups[y].push(i);
        }
        groups
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut out = Dataset::new(
            self.x.vstack(&other.x)?,
            labels,
            self.num_classes.max(other.num_classes),
            self.name.clone(),
        )?;
        out.norm = self.norm.clone();
        out.image = self.image;
        Ok(out)
    }
}

fn check_size(n: usize, k: usize) -> Result<()> {
    if k == 0 || n < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "need at least two samples per class (n = {n}, k = {k})"
        )));
    }
    Ok(())
}

fn shuffled(x: Matrix, labels: Vec<usize>, k: usize, name: &str, rng: &mut RngState) -> Result<Dataset> {
    let perm = rng.permutation(labels.len());
    let ds = Dataset::new(x, labels, k, name)?;
    Ok(ds.subset(&perm))
}

/// Two interleaving half circles. Class 0 lies on the upper arc centred at
/// the origin, class 1 on the lower arc centred at (1, 0.5); both have radius 1.
pub fn make_two_moons(n: usize, noise_sd: f64, rng: &mut RngState) -> Result<Dataset> {
    check_size(n, 2)?;
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sd {noise_sd}")));
    }
    let n0 = n / 2;
    let n1 = n - n0;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let pi = std::f64::consts::PI;
    for i in 0..n0 {
        let t = pi * i as f64 / (n0 - 1) as f64;
        rows.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n1 {
        let t = pi * i as f64 / (n1 - 1) as f64;
        rows.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_sd > 0.0 {
        for r in &mut rows {
            r[0] += noise_sd * rng.normal();
            r[1] += noise_sd * rng.normal();
        }
    }
    shuffled(Matrix::from_rows(&rows)?, labels, 2, "two_moons", rng)
}

/// Centres of `k` blobs spaced evenly on a circle of radius `separation`
/// in the first two coordinates (remaining coordinates zero).
pub fn blob_centers(k: usize, separation: f64, dim: usize) -> Vec<Vec<f64>> {
    let tau = 2.0 * std::f64::consts::PI;
    (0..k)
        .map(|c| {
            let a = tau * c as f64 / k as f64;
            let mut v = vec![0.0; dim.max(2)];
            v[0] = separation * a.cos();
            v[1] = separation * a.sin();
            v
        })
        .collect()
}

/// Isotropic Gaussian blobs around [`blob_centers`], balanced across classes.
pub fn make_gaussian_blobs(
    n: usize,
    k: usize,
    separation: f64,
    noise_sd: f64,
    dim: usize,
    rng: &mut RngState,
) -> Result<Dataset> {
    check_size(n, k)?;
    if dim < 2 {
        return Err(Error::InvalidArgument("blobs need at least two dimensions".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sd {noise_sd}")));
    }
    let centers = blob_centers(k, separation, dim);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for &m in &centers[c] {
            data.push(m + noise_sd * rng.normal());
        }
        labels.push(c);
    }
    shuffled(Matrix::from_vec(n, dim, data)?, labels, k, "blobs", rng)
}

/// A single Gaussian blob used as an out-of-distribution set. Labels are
/// placeholders (all zero) with `num_classes` kept for shape compatibility.
pub fn make_ood_blob(
    n: usize,
    center: &[f64],
    noise_sd: f64,
    num_classes: usize,
    rng: &mut RngState,
) -> Result<Dataset> {
    let dim = center.len();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for &m in center {
            data.push(m + noise_sd * rng.normal());
        }
    }
    Dataset::new(
        Matrix::from_vec(n, dim, data)?,
        vec![0; n],
        num_classes.max(1),
        "ood_blob",
    )
}

/// Uniform noise in the box `[-half_width, half_width]^dim`.
pub fn make_uniform_box(
    n: usize,
    dim: usize,
    half_width: f64,
    num_classes: usize,
    rng: &mut RngState,
) -> Result<Dataset> {
    let data = (0..n * dim).map(|_| half_width * (2.0 * rng.uniform() - 1.0)).collect();
    Dataset::new(
        Matrix::from_vec(n, dim, data)?,
        vec![0; n],
        num_classes.max(1),
        "uniform_box",
    )
}

pub const CIFAR_RECORD: usize = 3073;

/// Reads CIFAR-10 binary records (1 label byte + 3072 planar RGB bytes).
/// Pixels are scaled to [0, 1]; normalisation is left to [`NormStats`] so
/// that statistics can come from the training split only.
pub fn load_cifar_binary(path: impl AsRef<Path>, max_per_class: usize) -> Result<Dataset> {
    let bytes = fs::read(path.as_ref())?;
    parse_cifar_binary(&bytes, max_per_class)
}

pub fn parse_cifar_binary(bytes: &[u8], max_per_class: usize) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "file size {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut taken = [0usize; 10];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!("record {i} has label byte {label}")));
        }
        if taken[label] >= max_per_class {
            continue;
        }
        taken[label] += 1;
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let n = labels.len();
    let mut ds = Dataset::new(Matrix::from_vec(n, CIFAR_RECORD - 1, data)?, labels, 10, "cifar")?;
    ds.image = Some(ImageShape::CIFAR);
    Ok(ds)
}

/// Header-free CSV rows `f1,…,fd,label`.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(e.to_string()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() < 2 {
            return Err(Error::Format(format!("line {}: need features and a label", i + 1)));
        }
        let d = rec.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(Error::Format(format!("line {}: ragged row", i + 1)));
        }
        for f in rec.iter().take(d) {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number '{f}'", i + 1)))?,
            );
        }
        let l = &rec[d];
        labels.push(
            l.parse::<usize>()
                .map_err(|_| Error::Format(format!("line {}: bad label '{l}'", i + 1)))?,
        );
    }
    let dim = dim.unwrap_or(0);
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, k, name)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())
        .map_err(|e| Error::Io(e.to_string()))?;
    for (row, y) in ds.x.row_iter().zip(&ds.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    FeatureShift,
    FeatureScale,
    Rotation2d,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureShift,
        CorruptionKind::FeatureScale,
        CorruptionKind::Rotation2d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::FeatureShift => "feature_shift",
            CorruptionKind::FeatureScale => "feature_scale",
            CorruptionKind::Rotation2d => "rotation2d",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption '{s}'")))
    }
}

/// Noise sd per intensity level, in units of each feature's sd.
pub const NOISE_SCHEDULE: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];
/// Shift magnitude per level, in feature-sd units.
pub const SHIFT_SCHEDULE: [f64; 5] = [0.1, 0.25, 0.5, 1.0, 2.0];
/// Spread factor about the feature mean per level.
pub const SCALE_SCHEDULE: [f64; 5] = [1.1, 1.25, 1.5, 2.0, 3.0];
/// Rotation angle in degrees per level.
pub const ROTATION_SCHEDULE: [f64; 5] = [5.0, 10.0, 20.0, 35.0, 60.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    intensity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, intensity: u8) -> Result<Self> {
        if !(1..=5).contains(&intensity) {
            return Err(Error::InvalidArgument(format!(
                "intensity must be in 1..=5, got {intensity}"
            )));
        }
        Ok(Self { kind, intensity })
    }

    pub fn intensity(&self) -> u8 {
        self.intensity
    }

    fn level(&self) -> usize {
        self.intensity as usize - 1
    }
}

/// Covariate-shift corruption. Labels are never touched.
pub fn corrupt(ds: &Dataset, spec: CorruptionSpec, rng: &mut RngState) -> Result<Dataset> {
    let mut out = ds.clone();
    out.name = format!("{}-{}{}", ds.name, spec.kind.as_str(), spec.intensity);
    let sd: Vec<f64> =
        ds.x.col_stds()
            .into_iter()
            .map(|s| if s > 0.0 { s } else { 1.0 })
            .collect();
    let d = ds.dim();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = NOISE_SCHEDULE[spec.level()];
            for r in 0..out.x.rows() {
                for (v, s) in out.x.row_mut(r).iter_mut().zip(&sd) {
                    *v += sigma * s * rng.normal();
                }
            }
        }
        CorruptionKind::FeatureShift => {
            let mag = SHIFT_SCHEDULE[spec.level()];
            let signs: Vec<f64> = (0..d).map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 }).collect();
            for r in 0..out.x.rows() {
                for ((v, s), sign) in out.x.row_mut(r).iter_mut().zip(&sd).zip(&signs) {
                    *v += sign * mag * s;
                }
            }
        }
        CorruptionKind::FeatureScale => {
            let f = SCALE_SCHEDULE[spec.level()];
            let mean = ds.x.col_means();
            for r in 0..out.x.rows() {
                for (v, m) in out.x.row_mut(r).iter_mut().zip(&mean) {
                    *v = m + f * (*v - m);
                }
            }
        }
        CorruptionKind::Rotation2d => {
            if d < 2 {
                return Err(Error::InvalidArgument("rotation2d needs at least two features".into()));
            }
            let a = ROTATION_SCHEDULE[spec.level()].to_radians();
            let (s, c) = a.sin_cos();
            for r in 0..out.x.rows() {
                let row = out.x.row_mut(r);
                let (x0, x1) = (row[0], row[1]);
                row[0] = c * x0 - s * x1;
                row[1] = s * x0 + c * x1;
            }
        }
    }
    Ok(out)
}

/// Random split into (train, held-out). With `stratified`, each class is
/// split separately so per-class proportions are preserved to within one sample.
pub fn split(ds: &Dataset, train_frac: f64, stratified: bool, rng: &mut RngState) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_frac} outside (0,1)"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    if stratified {
        for (c, mut group) in ds.indices_by_class().into_iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            if group.len() < 2 {
                return Err(Error::InvalidArgument(format!("class {c} has fewer than two samples")));
            }
            rng.shuffle(&mut group);
            let n_train = ((group.len() as f64) * train_frac).round() as usize;
            let n_train = n_train.clamp(1, group.len() - 1);
            train_idx.extend_from_slice(&group[..n_train]);
            test_idx.extend_from_slice(&group[n_train..]);
        }
        rng.shuffle(&mut train_idx);
        rng.shuffle(&mut test_idx);
    } else {
        let perm = rng.permutation(ds.len());
        let n_train = ((ds.len() as f64) * train_frac).round() as usize;
        train_idx.extend_from_slice(&perm[..n_train]);
        test_idx.extend_from_slice(&perm[n_train..]);
    }
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Count of rows per label value, for diagnostics.
pub fn label_histogram(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &y in labels {
        *m.entry(y).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = make_two_moons(200, 0.0, &mut RngState::new(1)).unwrap();
        assert_eq!(ds.class_counts(), vec![100, 100]);
        for (r, &y) in ds.x.row_iter().zip(&ds.labels) {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let rad = ((r[0] - cx).powi(2) + (r[1] - cy).powi(2)).sqrt();
            assert!((rad - 1.0).abs() < 1e-12);
            if y == 0 {
                assert!(r[1] >= -1e-12);
            } else {
                assert!(r[1] <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = make_two_moons(100, 0.1, &mut RngState::new(3)).unwrap();
        let b = make_two_moons(100, 0.1, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        let a = make_gaussian_blobs(90, 3, 4.0, 0.5, 2, &mut RngState::new(3)).unwrap();
        let b = make_gaussian_blobs(90, 3, 4.0, 0.5, 2, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(make_two_moons(3, 0.1, &mut RngState::new(0)).is_err());
        assert!(make_gaussian_blobs(5, 3, 1.0, 0.1, 2, &mut RngState::new(0)).is_err());
        assert!(make_two_moons(10, -1.0, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn well_separated_blobs_are_centroid_classifiable() {
        let ds = make_gaussian_blobs(1000, 5, 10.0, 0.1, 2, &mut RngState::new(9)).unwrap();
        let centers = blob_centers(5, 10.0, 2);
        let correct =
            ds.x.row_iter()
                .zip(&ds.labels)
                .filter(|(r, &y)| {
                    let d = |c: &Vec<f64>| (r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2);
                    let best = (0..5)
                        .min_by(|&a, &b| d(&centers[a]).partial_cmp(&d(&centers[b])).unwrap())
                        .unwrap();
                    best == y
                })
                .count();
        assert!(correct as f64 / 1000.0 >= 0.99);
    }

    fn synthetic_cifar(labels: &[u8], fill: u8) -> Vec<u8> {
        let mut out = Vec::new();
        for &l in labels {
            out.push(l);
            out.extend(std::iter::repeat_n(fill, 3072));
        }
        out
    }

    #[test]
    fn cifar_saturated_record() {
        let ds = parse_cifar_binary(&synthetic_cifar(&[3], 255), 100).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![3]);
        assert!(ds.x.data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.image, Some(ImageShape::CIFAR));
    }

    #[test]
    fn cifar_format_errors() {
        let mut bytes = synthetic_cifar(&[1, 2], 0);
        bytes.pop();
        assert!(matches!(parse_cifar_binary(&bytes, 10), Err(Error::Format(_))));
        let bad = synthetic_cifar(&[10], 0);
        assert!(matches!(parse_cifar_binary(&bad, 10), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_subsampling_counts() {
        let labels: Vec<u8> = (0..60).map(|i| (i % 4) as u8).collect();
        let ds = parse_cifar_binary(&synthetic_cifar(&labels, 7), 10).unwrap();
        // 4 labels present, 15 records each, capped at 10
        assert_eq!(ds.len(), 40);
        assert_eq!(
            label_histogram(&ds.labels).values().copied().collect::<Vec<_>>(),
            vec![10; 4]
        );
    }

    #[test]
    fn channel_normalisation_uses_supplied_stats() {
        let mut bytes = synthetic_cifar(&[0], 0);
        bytes.extend(synthetic_cifar(&[1], 255));
        let ds = parse_cifar_binary(&bytes, 10).unwrap();
        let stats = NormStats::fit_channels(&ds, ImageShape::CIFAR).unwrap();
        let n = stats.apply(&ds).unwrap();
        assert!(n.x.row(0).iter().all(|&v| (v + 1.0).abs() < 1e-12));
        assert!(n.x.row(1).iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gaussian_noise_level_one_magnitude() {
        // Unit-sd features in d = 200 so the chi mean ≈ σ√d.
        let mut rng = RngState::new(5);
        let n = 2000;
        let d = 200;
        let x = Matrix::from_vec(n, d, rng.normal_vec(n * d)).unwrap();
        let ds = Dataset::new(x, vec![0; n], 1, "unit").unwrap();
        let sd = ds.x.col_stds();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 1).unwrap();
        let c = corrupt(&ds, spec, &mut rng).unwrap();
        let mean_sd = sd.iter().sum::<f64>() / d as f64;
        let expected = 0.05 * mean_sd * (d as f64).sqrt();
        let mean_l2: f64 = (0..n)
            .map(|i| {
                c.x.row(i)
                    .iter()
                    .zip(ds.x.row(i))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean_l2 / expected - 1.0).abs() < 0.05, "{mean_l2} vs {expected}");
        assert_eq!(c.labels, ds.labels);
    }

    #[test]
    fn intensity_zero_rejected() {
        assert!(CorruptionSpec::new(CorruptionKind::GaussianNoise, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::GaussianNoise, 6).is_err());
    }

    #[test]
    fn rotation_preserves_norms_and_labels() {
        let mut rng = RngState::new(2);
        let ds = make_two_moons(100, 0.2, &mut rng).unwrap();
        for level in 1..=5 {
            let spec = CorruptionSpec::new(CorruptionKind::Rotation2d, level).unwrap();
            let r = corrupt(&ds, spec, &mut rng).unwrap();
            assert_eq!(r.labels, ds.labels);
            for (a, b) in r.x.row_iter().zip(ds.x.row_iter()) {
                let na = a[0].hypot(a[1]);
                let nb = b[0].hypot(b[1]);
                assert!((na - nb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn intensity_is_monotone_for_every_kind() {
        let ds = make_gaussian_blobs(300, 3, 3.0, 1.0, 2, &mut RngState::new(8)).unwrap();
        for kind in CorruptionKind::ALL {
            let mags: Vec<f64> = (1..=5)
                .map(|lvl| {
                    let spec = CorruptionSpec::new(kind, lvl).unwrap();
                    let c = corrupt(&ds, spec, &mut RngState::new(77)).unwrap();
                    c.x.sub(&ds.x).unwrap().data().iter().map(|v| v * v).sum::<f64>()
                })
                .collect();
            assert!(mags[4] >= mags[0], "{kind:?}: {mags:?}");
            assert!(mags.windows(2).all(|w| w[1] >= w[0]), "{kind:?}: {mags:?}");
        }
    }

    #[test]
    fn stratified_ninety_ten() {
        let ds = make_gaussian_blobs(1000, 10, 5.0, 0.5, 2, &mut RngState::new(1)).unwrap();
        let (tr, te) = split(&ds, 0.9, true, &mut RngState::new(2)).unwrap();
        assert_eq!(tr.len(), 900);
        assert_eq!(te.len(), 100);
        assert_eq!(tr.class_counts(), vec![90; 10]);
        assert_eq!(te.class_counts(), vec![10; 10]);
    }

    #[test]
    fn split_is_a_partition_and_deterministic() {
        let ds = make_two_moons(101, 0.1, &mut RngState::new(4)).unwrap();
        for strat in [false, true] {
            let (a, b) = split(&ds, 0.7, strat, &mut RngState::new(6)).unwrap();
            let (a2, b2) = split(&ds, 0.7, strat, &mut RngState::new(6)).unwrap();
            assert_eq!((&a, &b), (&a2, &b2));
            let mut rows: Vec<Vec<u64>> =
                a.x.row_iter()
                    .chain(b.x.row_iter())
                    .map(|r| r.iter().map(|v| v.to_bits()).collect())
                    .collect();
            let mut orig: Vec<Vec<u64>> =
                ds.x.row_iter()
                    .map(|r| r.iter().map(|v| v.to_bits()).collect())
                    .collect();
            rows.sort();
            orig.sort();
            assert_eq!(rows, orig);
        }
    }

    #[test]
    fn stratified_split_needs_two_per_class() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let ds = Dataset::new(x, vec![0, 0, 1], 2, "tiny").unwrap();
        assert!(split(&ds, 0.5, true, &mut RngState::new(0)).is_err());
        assert!(split(&ds, 1.0, false, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.csv");
        let ds = make_two_moons(20, 0.1, &mut RngState::new(2)).unwrap();
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, Some(2)).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.labels, ds.labels);
    }
}
