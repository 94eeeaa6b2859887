//! Evaluation metrics: AUROC, calibration error, temperature scaling, the
//! Fisher criterion and interpolation entropy profiles.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::nn::{argmax, softmax, Network, LOG_FLOOR};
use crate::rng::RngState;
use crate::tensor::{Cholesky, Matrix};
use crate::uncertainty::{class_stats, row_entropy, Measure, UncertaintyScores};

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_PROFILE_PAIRS: usize = 1000;
pub const PROFILE_LAMBDAS: usize = 20;
pub const PROFILE_ENTROPY_BINS: usize = 30;

/// Average ranks (1-based, ties share the mean rank) doubled so they stay
/// integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end+1 share rank (start+1 + end+1)/2
        let r2 = (start + 1 + end + 1) as u64;
        for &i in &order[start..=end] {
            ranks[i] = r2;
        }
        start = end + 1;
    }
    ranks
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    doubled_ranks(values).into_iter().map(|r| r as f64 / 2.0).collect()
}

/// Probability that a random out-of-distribution score exceeds a random
/// in-distribution score, ties counted one half.
pub fn auroc(in_scores: &UncertaintyScores, out_scores: &UncertaintyScores) -> Result<f64> {
    if in_scores.measure != out_scores.measure {
        return Err(Error::InvalidArgument(format!(
            "measure mismatch: {} vs {}",
            in_scores.measure, out_scores.measure
        )));
    }
    auroc_values(&in_scores.values, &out_scores.values)
}

/// [`auroc`] on raw value slices.
pub fn auroc_values(in_values: &[f64], out_values: &[f64]) -> Result<f64> {
    if in_values.is_empty() || out_values.is_empty() {
        return Err(Error::InvalidArgument("auroc needs non-empty score sets".into()));
    }
    if in_values.iter().chain(out_values).any(|v| v.is_nan()) {
        return Err(Error::Domain("auroc scores contain NaN".into()));
    }
    let mut all = Vec::with_capacity(in_values.len() + out_values.len());
    all.extend_from_slice(in_values);
    all.extend_from_slice(out_values);
    let ranks = doubled_ranks(&all);
    let n_in = in_values.len() as u64;
    let n_out = out_values.len() as u64;
    let rank_sum: u64 = ranks[in_values.len()..].iter().sum();
    let u2 = rank_sum - n_out * (n_out + 1);
    Ok(u2 as f64 / (2 * n_in * n_out) as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return shape_err("spearman needs two equal-length samples of size ≥ 2");
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numeric("spearman of a constant sample".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    EqualWidth,
    EqualMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub mode: BinningMode,
    pub n_bins: usize,
}

impl BinningSpec {
    pub fn equal_width(n_bins: usize) -> Self {
        Self {
            mode: BinningMode::EqualWidth,
            n_bins,
        }
    }

    pub fn equal_mass(n_bins: usize) -> Self {
        Self {
            mode: BinningMode::EqualMass,
            n_bins,
        }
    }
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self::equal_width(DEFAULT_BINS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Max-probability confidence and correctness per row.
fn confidences(probs: &Matrix, labels: &[usize]) -> Result<Vec<(f64, bool)>> {
    if probs.rows() != labels.len() {
        return shape_err(format!("{} prob rows but {} labels", probs.rows(), labels.len()));
    }
    Ok(probs
        .row_iter()
        .zip(labels)
        .map(|(r, &y)| {
            let k = argmax(r);
            (r[k], k == y)
        })
        .collect())
}

fn equal_width_bin(c: f64, n_bins: usize) -> usize {
    // bins are (b/B, (b+1)/B], the first one also takes 0
    let edge = |b: usize| b as f64 / n_bins as f64;
    let mut b = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
    while b > 0 && c <= edge(b) {
        b -= 1;
    }
    while b + 1 < n_bins && c > edge(b + 1) {
        b += 1;
    }
    b
}

fn summarize(items: &[(f64, bool)]) -> BinStat {
    if items.is_empty() {
        return BinStat {
            count: 0,
            accuracy: 0.0,
            confidence: 0.0,
        };
    }
    let n = items.len() as f64;
    BinStat {
        count: items.len(),
        accuracy: items.iter().filter(|c| c.1).count() as f64 / n,
        confidence: items.iter().map(|c| c.0).sum::<f64>() / n,
    }
}

/// Per-bin accuracy and mean confidence. Equal-mass bins follow sorted
/// confidence with sizes `⌊N/B⌋ + 1` for the first `N mod B` bins and
/// `⌊N/B⌋` after; samples tied across a boundary stay in the left bin.
pub fn calibration_bins(probs: &Matrix, labels: &[usize], spec: BinningSpec) -> Result<Vec<BinStat>> {
    if spec.n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be ≥ 1".into()));
    }
    let conf = confidences(probs, labels)?;
    match spec.mode {
        BinningMode::EqualWidth => {
            let mut groups: Vec<Vec<(f64, bool)>> = vec![Vec::new(); spec.n_bins];
            for &c in &conf {
                groups[equal_width_bin(c.0, spec.n_bins)].push(c);
            }
            Ok(groups.iter().map(|g| summarize(g)).collect())
        }
        BinningMode::EqualMass => {
            let n = conf.len();
            if spec.n_bins > n {
                return Err(Error::InvalidArgument(format!(
                    "{} equal-mass bins for {} samples",
                    spec.n_bins, n
                )));
            }
            let mut sorted = conf;
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (q, r) = (n / spec.n_bins, n % spec.n_bins);
            let mut out = Vec::with_capacity(spec.n_bins);
            let mut start = 0;
            let mut nominal = 0;
            for b in 0..spec.n_bins {
                nominal += q + usize::from(b < r);
                let mut end = nominal.max(start);
                while end > 0 && end < n && sorted[end].0 == sorted[end - 1].0 {
                    end += 1;
                }
                out.push(summarize(&sorted[start..end]));
                start = end;
            }
            Ok(out)
        }
    }
}

fn weighted_gap(bins: &[BinStat], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

/// Calibration error under an explicit binning.
pub fn calibration_error(probs: &Matrix, labels: &[usize], spec: BinningSpec) -> Result<f64> {
    let bins = calibration_bins(probs, labels, spec)?;
    Ok(weighted_gap(&bins, labels.len()))
}

/// Expected calibration error with equal-width bins.
pub fn ece(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    calibration_error(probs, labels, BinningSpec::equal_width(n_bins))
}

/// Adaptive (equal-mass) expected calibration error.
pub fn adaece(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    calibration_error(probs, labels, BinningSpec::equal_mass(n_bins))
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub const MIN: f64 = 0.1;
    pub const MAX: f64 = 10.0;

    pub fn new(t: f64) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&t) {
            return Err(Error::Domain(format!("temperature {t} outside [0.1, 10]")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `0.100, 0.101, …, 10.000`.
pub fn temperature_grid() -> impl Iterator<Item = f64> {
    (0..=9900u32).map(|i| f64::from(100 + i) / 1000.0)
}

pub fn apply_temperature(logits: &Matrix, t: Temperature) -> Matrix {
    softmax(&logits.map(|v| v / t.value()))
}

/// Grid search for the temperature minimising calibration error on
/// validation logits; ties go to the smaller temperature.
pub fn fit_temperature(logits_val: &Matrix, labels_val: &[usize], spec: BinningSpec) -> Result<Temperature> {
    let mut best = (f64::INFINITY, 1.0);
    for t in temperature_grid() {
        let err = calibration_error(&softmax(&logits_val.map(|v| v / t)), labels_val, spec)?;
        if err < best.0 {
            best = (err, t);
        }
    }
    Temperature::new(best.1)
}

/// `trace((S_W + εI)⁻¹ S_B)` for within-class scatter `S_W` and
/// between-class scatter `S_B`.
pub fn fisher_criterion(features: &Matrix, labels: &[usize], epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be ≥ 0, got {epsilon}")));
    }
    let (means, scatter, counts) = class_stats(features, labels)?;
    if means.len() < 2 {
        return Err(Error::InvalidArgument(
            "fisher criterion needs at least two classes".into(),
        ));
    }
    let d = features.cols();
    let n: usize = counts.iter().sum();
    let mut global = vec![0.0; d];
    for (mu, &c) in means.iter().zip(&counts) {
        for (g, m) in global.iter_mut().zip(mu) {
            *g += c as f64 * m / n as f64;
        }
    }
    let mut sw = Matrix::zeros(d, d);
    let mut sb = Matrix::zeros(d, d);
    for ((mu, s), &c) in means.iter().zip(&scatter).zip(&counts) {
        sw.axpy(1.0, s)?;
        let diff: Vec<f64> = mu.iter().zip(&global).map(|(a, b)| a - b).collect();
        sb.axpy(c as f64, &crate::tensor::outer(&diff, &diff))?;
    }
    let chol =
        Cholesky::new(&sw.add_diag(epsilon)?).map_err(|_| Error::Numeric("within-class scatter is singular".into()))?;
    Ok(chol.solve_matrix(&sb)?.trace())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub lambda_grid: Vec<f64>,
    /// `(i, j)` sample indices; the mix is `λ x_i + (1 − λ) x_j`.
    pub pairs: Vec<(usize, usize)>,
    /// One row per pair, one column per λ.
    pub entropies: Vec<Vec<f64>>,
    /// Upper end of the entropy axis (`ln K`).
    pub max_entropy: f64,
    /// `histogram[λ index][entropy bin]` sample counts.
    pub histogram: Vec<Vec<usize>>,
}

/// `n` equally spaced points from 0 to 1 inclusive.
pub fn linspace01(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|t| t as f64 / (n - 1) as f64).collect(),
    }
}

pub fn entropy_profile(net: &Network, ds: &Dataset, n_pairs: usize, rng: &mut RngState) -> Result<EntropyProfile> {
    entropy_profile_with(net, ds, n_pairs, PROFILE_LAMBDAS, PROFILE_ENTROPY_BINS, rng)
}

/// Entropy of the prediction along interpolation paths between random
/// pairs of differently-labelled samples.
pub fn entropy_profile_with(
    net: &Network,
    ds: &Dataset,
    n_pairs: usize,
    n_lambdas: usize,
    n_entropy_bins: usize,
    rng: &mut RngState,
) -> Result<EntropyProfile> {
    if ds.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidArgument("entropy profile needs two classes".into()));
    }
    if n_lambdas < 2 || n_entropy_bins == 0 {
        return Err(Error::InvalidArgument(
            "profile needs ≥ 2 lambdas and ≥ 1 entropy bin".into(),
        ));
    }
    let n = ds.len();
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let i = rng.below(n);
        let j = rng.below(n);
        if ds.labels[i] != ds.labels[j] {
            pairs.push((i, j));
        }
    }
    let lambda_grid = linspace01(n_lambdas);
    let d = ds.dim();
    let mut x = Matrix::zeros(n_pairs * n_lambdas, d);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let (xi, xj) = (ds.x.row(i), ds.x.row(j));
        for (t, &lam) in lambda_grid.iter().enumerate() {
            let row = x.row_mut(p * n_lambdas + t);
            for ((v, a), b) in row.iter_mut().zip(xi).zip(xj) {
                *v = lam * a + (1.0 - lam) * b;
            }
        }
    }
    let probs = net.predict_proba(&x)?;
    let max_entropy = (net.num_classes() as f64).ln();
    let mut histogram = vec![vec![0usize; n_entropy_bins]; n_lambdas];
    let mut entropies = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let row: Vec<f64> = (0..n_lambdas)
            .map(|t| row_entropy(probs.row(p * n_lambdas + t)))
            .collect();
        for (t, &h) in row.iter().enumerate() {
            let frac = if max_entropy > 0.0 {
                h.max(0.0) / max_entropy
            } else {
                0.0
            };
            let bin = ((frac * n_entropy_bins as f64) as usize).min(n_entropy_bins - 1);
            histogram[t][bin] += 1;
        }
        entropies.push(row);
    }
    Ok(EntropyProfile {
        lambda_grid,
        pairs,
        entropies,
        max_entropy,
        histogram,
    })
}

/// Mean entropy for λ in [0.4, 0.6] over mean entropy for λ in
/// [0, 0.05] ∪ [0.95, 1]; the denominator is floored at `LOG_FLOOR`.
pub fn barrier_statistic(profile: &EntropyProfile) -> Result<f64> {
    let mean_where = |pred: &dyn Fn(f64) -> bool| -> Option<f64> {
        let mut mean = 0.0;
        let mut count = 0usize;
        for row in &profile.entropies {
            for (&lam, &h) in profile.lambda_grid.iter().zip(row) {
                if pred(lam) {
                    count += 1;
                    mean += (h - mean) / count as f64;
                }
            }
        }
        (count > 0).then_some(mean)
    };
    let mid = mean_where(&|l| (0.4..=0.6).contains(&l));
    let ends = mean_where(&|l| l <= 0.05 || l >= 0.95);
    match (mid, ends) {
        (Some(m), Some(e)) => Ok(m / e.max(LOG_FLOOR)),
        _ => Err(Error::InvalidArgument(
            "profile has no λ in the middle or end ranges".into(),
        )),
    }
}

/// Heatmap of an entropy profile, λ on the x axis and entropy on the y axis.
pub fn heatmap_svg(profile: &EntropyProfile) -> String {
    let cols = profile.histogram.len();
    let rows = profile.histogram.first().map_or(0, Vec::len);
    let (cell_w, cell_h, pad) = (24.0, 12.0, 50.0);
    let width = pad * 2.0 + cols as f64 * cell_w;
    let height = pad * 2.0 + rows as f64 * cell_h;
    let peak = profile.histogram.iter().flatten().copied().max().unwrap_or(0).max(1);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (t, col) in profile.histogram.iter().enumerate() {
        for (b, &count) in col.iter().enumerate() {
            let shade = 255 - (255 * count / peak) as u8;
            let x = pad + t as f64 * cell_w;
            let y = pad + (rows - 1 - b) as f64 * cell_h;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="rgb({shade},{shade},255)"><title>{count}</title></rect>"#
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">λ</text>"#,
        width / 2.0,
        height - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">entropy (0 to {:.3})</text>"#,
        height / 2.0,
        height / 2.0,
        profile.max_entropy
    );
    s.push_str("</svg>\n");
    s
}

/// Reliability diagram: per-bin accuracy bars against the diagonal.
pub fn reliability_svg(bins: &[BinStat]) -> String {
    let size = 300.0;
    let pad = 40.0;
    let full = size + 2.0 * pad;
    let n = bins.len().max(1) as f64;
    let bar = size / n;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(s, r#"<rect width="{full}" height="{full}" fill="white"/>"#);
    for (b, stat) in bins.iter().enumerate() {
        if stat.count == 0 {
            continue;
        }
        let h = stat.accuracy * size;
        let x = pad + b as f64 * bar;
        let y = pad + size - h;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="{bar}" height="{h}" fill="steelblue" stroke="black"><title>n={} acc={:.4} conf={:.4}</title></rect>"#,
            stat.count, stat.accuracy, stat.confidence
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{pad}" stroke="red" stroke-dasharray="4"/>"#,
        pad + size,
        pad + size
    );
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    s.push_str("</svg>\n");
    s
}

/// One line of a metric table.
#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub dataset: String,
    pub metric: String,
    pub measure: String,
    pub value: f64,
    pub strategy: String,
    pub seed: u64,
}

pub const METRIC_HEADER: [&str; 7] = ["model", "dataset", "metric", "measure", "value", "strategy", "seed"];

pub fn write_metric_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    out.write_record(METRIC_HEADER).map_err(io)?;
    for r in rows {
        out.serialize(r).map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metric_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().ne(METRIC_HEADER) {
        return Err(Error::Format(format!("unexpected metric header {headers:?}")));
    }
    rdr.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// DS is reported unless it trails entropy by more than 0.05 AUROC.
pub fn reported_measure(ds_auroc: f64, entropy_auroc: f64) -> Measure {
    if ds_auroc + 0.05 < entropy_auroc {
        Measure::Entropy
    } else {
        Measure::Ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_two_moons;
    use crate::nn::Activation;
    use crate::uncertainty::entropy_score;

    fn scores(v: &[f64]) -> UncertaintyScores {
        UncertaintyScores::new(Measure::Entropy, v.to_vec())
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&scores(&[0.1, 0.2]), &scores(&[0.5, 0.9, 0.7])).unwrap(), 1.0);
        assert_eq!(auroc(&scores(&[1.0; 4]), &scores(&[1.0; 3])).unwrap(), 0.5);
        assert_eq!(auroc(&scores(&[0.1, 0.4]), &scores(&[0.3, 0.5])).unwrap(), 0.75);
    }

    #[test]
    fn auroc_errors() {
        assert!(auroc(&scores(&[]), &scores(&[1.0])).is_err());
        let ds = UncertaintyScores::new(Measure::Ds, vec![1.0]);
        assert!(auroc(&scores(&[0.0]), &ds).is_err());
        assert!(auroc_values(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn saturated_half_wrong_ece() {
        let probs = Matrix::from_rows(&[[1.0, 0.0]; 4]).unwrap();
        let labels = [0, 1, 0, 1];
        assert_eq!(ece(&probs, &labels, 15).unwrap(), 0.5);
        assert_eq!(adaece(&probs, &labels, 2).unwrap(), 0.5);
    }

    #[test]
    fn calibrated_bins_have_zero_error() {
        // confidence 0.75 everywhere, 3 of 4 right
        let probs = Matrix::from_rows(&[[0.75, 0.25]; 8]).unwrap();
        let labels = [0, 0, 0, 1, 0, 0, 0, 1];
        assert_eq!(ece(&probs, &labels, 15).unwrap(), 0.0);
        assert_eq!(adaece(&probs, &labels, 4).unwrap(), 0.0);
    }

    #[test]
    fn equal_width_edges() {
        assert_eq!(equal_width_bin(0.0, 10), 0);
        assert_eq!(equal_width_bin(0.1, 10), 0);
        assert_eq!(equal_width_bin(0.1000001, 10), 1);
        assert_eq!(equal_width_bin(1.0, 10), 9);
        assert_eq!(equal_width_bin(0.3, 10), 2);
        assert_eq!(equal_width_bin(0.7, 10), 6);
    }

    #[test]
    fn equal_mass_sizes_and_ties() {
        let conf = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.97];
        let probs = Matrix::from_rows(&conf.iter().map(|&c| vec![c, 1.0 - c]).collect::<Vec<_>>()).unwrap();
        let labels = vec![0; 7];
        let bins = calibration_bins(&probs, &labels, BinningSpec::equal_mass(3)).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 2, 2]);
        let tied = Matrix::from_rows(&[[0.6, 0.4], [0.7, 0.3], [0.7, 0.3], [0.9, 0.1]]).unwrap();
        let bins = calibration_bins(&tied, &[0; 4], BinningSpec::equal_mass(2)).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 1]);
        assert!(calibration_bins(&tied, &[0; 4], BinningSpec::equal_mass(5)).is_err());
        assert!(calibration_bins(&tied, &[0; 4], BinningSpec::equal_width(0)).is_err());
    }

    #[test]
    fn temperature_grid_and_bounds() {
        let g: Vec<f64> = temperature_grid().collect();
        assert_eq!(g.len(), 9901);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[900], 1.0);
        assert_eq!(*g.last().unwrap(), 10.0);
        assert!(Temperature::new(0.05).is_err());
        assert!(Temperature::new(10.5).is_err());
    }

    #[test]
    fn temperature_preserves_argmax_and_never_hurts() {
        let mut rng = RngState::new(3);
        let logits = Matrix::from_vec(200, 3, rng.normal_vec(600).iter().map(|v| 4.0 * v).collect()).unwrap();
        let labels: Vec<usize> = (0..200)
            .map(|i| {
                if rng.uniform() < 0.7 {
                    argmax(logits.row(i))
                } else {
                    rng.below(3)
                }
            })
            .collect();
        let spec = BinningSpec::default();
        let t = fit_temperature(&logits, &labels, spec).unwrap();
        let before = calibration_error(&softmax(&logits), &labels, spec).unwrap();
        let after = calibration_error(&apply_temperature(&logits, t), &labels, spec).unwrap();
        assert!(after <= before);
        let scaled = apply_temperature(&logits, t);
        for r in 0..200 {
            assert_eq!(argmax(scaled.row(r)), argmax(logits.row(r)));
        }
    }

    #[test]
    fn fisher_zero_for_coincident_means() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        assert!(fisher_criterion(&x, &[0, 0, 1, 1], 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn fisher_two_by_two_oracle() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.2], [0.5, 1.0], [3.0, 3.0], [4.0, 2.5], [3.5, 4.5]]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let got = fisher_criterion(&x, &y, 0.0).unwrap();
        let mean = |c: usize, k: usize| (0..6).filter(|&i| y[i] == c).map(|i| x.get(i, k)).sum::<f64>() / 3.0;
        let (m0, m1) = ([mean(0, 0), mean(0, 1)], [mean(1, 0), mean(1, 1)]);
        let g = [(m0[0] + m1[0]) / 2.0, (m0[1] + m1[1]) / 2.0];
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for i in 0..6 {
            let m = if y[i] == 0 { m0 } else { m1 };
            let (dx, dy) = (x.get(i, 0) - m[0], x.get(i, 1) - m[1]);
            a += dx * dx;
            b += dx * dy;
            c += dy * dy;
        }
        let det = a * c - b * b;
        let inv = [[c / det, -b / det], [-b / det, a / det]];
        let mut sb = [[0.0; 2]; 2];
        for m in [m0, m1] {
            let d = [m[0] - g[0], m[1] - g[1]];
            for r in 0..2 {
                for s in 0..2 {
                    sb[r][s] += 3.0 * d[r] * d[s];
                }
            }
        }
        let tr = (0..2)
            .map(|r| (0..2).map(|k| inv[r][k] * sb[k][r]).sum::<f64>())
            .sum::<f64>();
        assert!((got - tr).abs() < 1e-9 * tr.abs().max(1.0));
    }

    #[test]
    fn fisher_errors() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(fisher_criterion(&x, &[0, 0, 0], 0.0).is_err());
        assert!(fisher_criterion(&x, &[0, 0, 1], 0.0).is_err());
        let flat = Matrix::from_rows(&[[0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [3.0, 1.0]]).unwrap();
        assert!(matches!(
            fisher_criterion(&flat, &[0, 0, 1, 1], 0.0),
            Err(Error::Numeric(_))
        ));
        assert!(fisher_criterion(&flat, &[0, 0, 1, 1], 1e-3).is_ok());
    }

    fn moons_net() -> (Network, Dataset) {
        let mut rng = RngState::new(8);
        let ds = make_two_moons(100, 0.1, &mut rng).unwrap();
        let net = Network::mlp(2, &[16], 2, Activation::Relu, &mut rng).unwrap();
        (net, ds)
    }

    #[test]
    fn profile_counts_and_endpoints() {
        let (net, ds) = moons_net();
        let p = entropy_profile(&net, &ds, 50, &mut RngState::new(1)).unwrap();
        assert_eq!(p.lambda_grid.len(), 20);
        assert_eq!(p.lambda_grid[0], 0.0);
        assert_eq!(p.lambda_grid[19], 1.0);
        let total: usize = p.histogram.iter().flatten().sum();
        assert_eq!(total, 50 * 20);
        assert_eq!(p.histogram[0].len(), 30);
        for (&(i, j), row) in p.pairs.iter().zip(&p.entropies) {
            assert_ne!(ds.labels[i], ds.labels[j]);
            let xi = Matrix::from_rows(&[ds.x.row(i)]).unwrap();
            let xj = Matrix::from_rows(&[ds.x.row(j)]).unwrap();
            assert_eq!(row[19], entropy_score(&net.predict_proba(&xi).unwrap()).values[0]);
            assert_eq!(row[0], entropy_score(&net.predict_proba(&xj).unwrap()).values[0]);
        }
        let one = ds.subset(&ds.indices_by_class()[0]);
        assert!(entropy_profile(&net, &one, 5, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn barrier_of_constant_profile_is_one() {
        let p = EntropyProfile {
            lambda_grid: linspace01(20),
            pairs: vec![(0, 1); 3],
            entropies: vec![vec![0.3; 20]; 3],
            max_entropy: 2f64.ln(),
            histogram: vec![],
        };
        assert_eq!(barrier_statistic(&p).unwrap(), 1.0);
        let zero = EntropyProfile {
            entropies: vec![vec![0.0; 20]; 3],
            ..p.clone()
        };
        assert_eq!(barrier_statistic(&zero).unwrap(), 0.0);
        let empty = EntropyProfile { entropies: vec![], ..p };
        assert!(barrier_statistic(&empty).is_err());
    }

    #[test]
    fn svgs_are_well_formed() {
        let (net, ds) = moons_net();
        let p = entropy_profile(&net, &ds, 10, &mut RngState::new(2)).unwrap();
        let svg = heatmap_svg(&p);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 1 + 20 * 30);
        let bins = calibration_bins(&net.predict_proba(&ds.x).unwrap(), &ds.labels, BinningSpec::default()).unwrap();
        assert!(reliability_svg(&bins).contains("</svg>"));
    }

    #[test]
    fn metric_csv_round_trip() {
        let rows = vec![MetricRow {
            model: "erm-s0".into(),
            dataset: "moons".into(),
            metric: "accuracy".into(),
            measure: "".into(),
            value: 0.875,
            strategy: "erm".into(),
            seed: 0,
        }];
        let mut buf = Vec::new();
        write_metric_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("model,dataset,metric,measure,value,strategy,seed\n"));
        assert_eq!(read_metric_csv(&buf[..]).unwrap(), rows);
        let mut empty = Vec::new();
        write_metric_csv(&[], &mut empty).unwrap();
        assert_eq!(
            String::from_utf8(empty).unwrap(),
            "model,dataset,metric,measure,value,strategy,seed\n"
        );
    }

    #[test]
    fn reported_measure_rule() {
        assert_eq!(reported_measure(0.9, 0.92), Measure::Ds);
        assert_eq!(reported_measure(0.6, 0.9), Measure::Entropy);
    }
}
