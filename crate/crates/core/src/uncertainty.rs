//! Per-sample uncertainty scores and a last-layer Laplace posterior.
//!
//! Every score is oriented so that larger values mean more uncertain.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::nn::{logsumexp, softmax, softmax_in_place, Network};
use crate::rng::RngState;
use crate::tensor::{kron, outer, Cholesky, Matrix};

/// Monte-Carlo sample count used when callers have no preference.
pub const DEFAULT_MC_SAMPLES: usize = 1000;
/// Mean-field rescaling constant matching the probit approximation.
pub const MEANFIELD_LAMBDA: f64 = std::f64::consts::PI / 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Entropy,
    Ds,
    Energy,
    MpsUncertainty,
    Mahalanobis,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::Entropy,
        Measure::Ds,
        Measure::Energy,
        Measure::MpsUncertainty,
        Measure::Mahalanobis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Entropy => "entropy",
            Measure::Ds => "ds",
            Measure::Energy => "energy",
            Measure::MpsUncertainty => "mps_uncertainty",
            Measure::Mahalanobis => "mahalanobis",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown measure '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScores {
    pub measure: Measure,
    pub values: Vec<f64>,
}

impl UncertaintyScores {
    pub fn new(measure: Measure, values: Vec<f64>) -> Self {
        Self { measure, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Writes `sample_index,measure,value` rows, one per score.
pub fn write_scores_csv<W: Write>(scores: &[UncertaintyScores], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    out.write_record(["sample_index", "measure", "value"]).map_err(io)?;
    for s in scores {
        for (i, v) in s.values.iter().enumerate() {
            out.write_record([i.to_string(), s.measure.to_string(), v.to_string()])
                .map_err(io)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Shannon entropy (nats) of one probability row, with `0·log 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn entropy_score(probs: &Matrix) -> UncertaintyScores {
    UncertaintyScores::new(Measure::Entropy, probs.row_iter().map(row_entropy).collect())
}

/// `K / (K + Σ exp s)`, evaluated as a logistic of `ln K − logsumexp(s)`.
pub fn ds_score(logits: &Matrix) -> UncertaintyScores {
    let ln_k = (logits.cols() as f64).ln();
    let values = logits
        .row_iter()
        .map(|r| {
            let t = logsumexp(r) - ln_k;
            if t >= 0.0 {
                let e = (-t).exp();
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + t.exp())
            }
        })
        .collect();
    UncertaintyScores::new(Measure::Ds, values)
}

/// `−logsumexp(s)`.
pub fn energy_score(logits: &Matrix) -> UncertaintyScores {
    UncertaintyScores::new(Measure::Energy, logits.row_iter().map(|r| -logsumexp(r)).collect())
}

/// `1 − max_k p_k`.
pub fn mps_score(probs: &Matrix) -> UncertaintyScores {
    let values = probs
        .row_iter()
        .map(|r| 1.0 - r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    UncertaintyScores::new(Measure::MpsUncertainty, values)
}

/// Per-class Gaussian fit of penultimate features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussians {
    pub means: Vec<Vec<f64>>,
    /// Maximum-likelihood covariances (normalised by the class count).
    pub covariances: Vec<Matrix>,
    pub epsilon: f64,
    factors: Vec<Cholesky>,
}

fn check_labels(features: &Matrix, labels: &[usize]) -> Result<()> {
    if features.rows() != labels.len() {
        return shape_err(format!("{} feature rows but {} labels", features.rows(), labels.len()));
    }
    Ok(())
}

/// Per-class means, scatter matrices and counts.
pub(crate) type ClassStats = (Vec<Vec<f64>>, Vec<Matrix>, Vec<usize>);

pub(crate) fn class_stats(features: &Matrix, labels: &[usize]) -> Result<ClassStats> {
    check_labels(features, labels)?;
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let d = features.cols();
    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0.0; d]; k];
    for (row, &y) in features.row_iter().zip(labels) {
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (c, (m, &n)) in means.iter_mut().zip(&counts).enumerate() {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {n} samples, need at least 2"
            )));
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut scatter = vec![Matrix::zeros(d, d); k];
    for (row, &y) in features.row_iter().zip(labels) {
        let diff: Vec<f64> = row.iter().zip(&means[y]).map(|(a, b)| a - b).collect();
        let s = &mut scatter[y];
        for i in 0..d {
            for j in 0..d {
                let v = s.get(i, j) + diff[i] * diff[j];
                s.set(i, j, v);
            }
        }
    }
    Ok((means, scatter, counts))
}

/// `1e-3 ×` the mean diagonal entry of the class covariances.
pub fn default_mahalanobis_epsilon(features: &Matrix, labels: &[usize]) -> Result<f64> {
    let (_, scatter, counts) = class_stats(features, labels)?;
    let d = features.cols().max(1);
    let total: f64 = scatter.iter().zip(&counts).map(|(s, &n)| s.trace() / n as f64).sum();
    Ok(1e-3 * total / (d * scatter.len()) as f64)
}

pub fn fit_class_gaussians(features: &Matrix, labels: &[usize], epsilon: f64) -> Result<ClassGaussians> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (means, scatter, counts) = class_stats(features, labels)?;
    let covariances: Vec<Matrix> = scatter
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.scale(1.0 / n as f64))
        .collect();
    let factors = covariances
        .iter()
        .map(|c| Cholesky::new(&c.add_diag(epsilon)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassGaussians {
        means,
        covariances,
        epsilon,
        factors,
    })
}

/// Minimum over classes of `(φ − μ_k)ᵀ (Σ_k + εI)⁻¹ (φ − μ_k)`.
pub fn mahalanobis_score(g: &ClassGaussians, features: &Matrix) -> Result<UncertaintyScores> {
    let d = g.means.first().map_or(0, Vec::len);
    if features.cols() != d {
        return shape_err(format!("features are {}-d, gaussians {}-d", features.cols(), d));
    }
    let values = features
        .row_iter()
        .map(|row| {
            g.means
                .iter()
                .zip(&g.factors)
                .map(|(mu, chol)| {
                    let diff: Vec<f64> = row.iter().zip(mu).map(|(a, b)| a - b).collect();
                    chol.inv_quad_form(&diff)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(UncertaintyScores::new(Measure::Mahalanobis, values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceOptions {
    pub sigma0: f64,
    /// Also form and invert the full last-layer GGN.
    pub exact: bool,
    /// Treat the last-layer bias as random (constant-1 feature) or fixed.
    pub include_bias: bool,
}

impl LaplaceOptions {
    pub fn new(sigma0: f64) -> Self {
        Self {
            sigma0,
            exact: false,
            include_bias: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMode {
    Kfac,
    Exact,
}

/// Gaussian posterior over the last-layer weights.
///
/// Parameters are ordered class-major: index `k·d + i` is the weight from
/// augmented feature `i` to logit `k`, where `d` counts the bias feature
/// when it is included.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    /// `d × K` MAP weights, bias as the last row when included.
    pub map_weights: Matrix,
    /// Bias used as a constant when it is not part of the posterior.
    pub fixed_bias: Option<Vec<f64>>,
    /// Feature-side precision factor (`d × d`).
    pub v: Matrix,
    /// Output-side precision factor (`K × K`).
    pub u: Matrix,
    pub sigma0: f64,
    /// Full `Kd × Kd` posterior covariance, when fitted in exact mode.
    pub exact_covariance: Option<Matrix>,
    v_factor: Cholesky,
    u_inv: Matrix,
}

/// Per-sample Gaussian over logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGaussian {
    pub mean: Matrix,
    pub covariances: Vec<Matrix>,
}

impl LaplacePosterior {
    /// Builds a posterior from explicit precision factors.
    pub fn from_factors(
        map_weights: Matrix,
        fixed_bias: Option<Vec<f64>>,
        v: Matrix,
        u: Matrix,
        sigma0: f64,
        exact_covariance: Option<Matrix>,
    ) -> Result<Self> {
        let (d, k) = map_weights.shape();
        if v.shape() != (d, d) || u.shape() != (k, k) {
            return shape_err("laplace factors do not match the weight shape");
        }
        if let Some(c) = &exact_covariance {
            if c.shape() != (d * k, d * k) {
                return shape_err("exact covariance does not match the weight shape");
            }
        }
        let v_factor = Cholesky::new(&v)?;
        let u_inv = Cholesky::new(&u)?.inverse();
        Ok(Self {
            map_weights,
            fixed_bias,
            v,
            u,
            sigma0,
            exact_covariance,
            v_factor,
            u_inv,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.map_weights.cols()
    }

    fn augment(&self, features: &Matrix) -> Result<Matrix> {
        let d = self.map_weights.rows();
        let phi = if self.fixed_bias.is_none() {
            features.append_const_col(1.0)
        } else {
            features.clone()
        };
        if phi.cols() != d {
            return shape_err(format!(
                "features have {} columns, posterior expects {}",
                features.cols(),
                if self.fixed_bias.is_none() { d - 1 } else { d }
            ));
        }
        Ok(phi)
    }

    /// MAP logits for penultimate features.
    pub fn map_logits(&self, features: &Matrix) -> Result<Matrix> {
        let phi = self.augment(features)?;
        let mut s = phi.matmul(&self.map_weights)?;
        if let Some(b) = &self.fixed_bias {
            for r in 0..s.rows() {
                s.row_mut(r).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
        }
        Ok(s)
    }

    fn exact(&self) -> Result<&Matrix> {
        self.exact_covariance
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("posterior was fitted without exact mode".into()))
    }

    /// Logit covariance for each augmented feature row.
    fn covariance(&self, phi: &[f64], mode: CovarianceMode) -> Result<Matrix> {
        let k = self.num_classes();
        match mode {
            CovarianceMode::Kfac => Ok(self.u_inv.scale(self.v_factor.inv_quad_form(phi))),
            CovarianceMode::Exact => {
                let c = self.exact()?;
                let d = phi.len();
                let mut out = Matrix::zeros(k, k);
                for a in 0..k {
                    for b in a..k {
                        let mut s = 0.0;
                        for i in 0..d {
                            let row = c.row(a * d + i);
                            let inner: f64 = (0..d).map(|j| row[b * d + j] * phi[j]).sum();
                            s += phi[i] * inner;
                        }
                        out.set(a, b, s);
                        out.set(b, a, s);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn logit_gaussian(&self, features: &Matrix, mode: CovarianceMode) -> Result<LogitGaussian> {
        let phi = self.augment(features)?;
        let mean = self.map_logits(features)?;
        let covariances = phi
            .row_iter()
            .map(|r| self.covariance(r, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(LogitGaussian { mean, covariances })
    }
}

/// Fits the KFAC posterior with the bias folded into the weights.
pub fn fit_laplace_last_layer(net: &Network, train_ds: &Dataset, sigma0: f64) -> Result<LaplacePosterior> {
    fit_laplace_last_layer_with(net, train_ds, LaplaceOptions::new(sigma0))
}

/// Generalised Gauss–Newton Laplace fit of the last layer.
///
/// With `N` training points, augmented features `φ` and softmax curvature
/// `Λ = diag(p) − ppᵀ`, the factors are
/// `V = √N·E[φφᵀ] + σ₀⁻¹ I` and `U = √N·E[Λ] + σ₀⁻¹ I`, so that
/// `U ⊗ V ≈ Σ_n Λ_n ⊗ φ_nφ_nᵀ + σ₀⁻² I`, the exact-mode precision.
pub fn fit_laplace_last_layer_with(
    net: &Network,
    train_ds: &Dataset,
    opts: LaplaceOptions,
) -> Result<LaplacePosterior> {
    if !(opts.sigma0 > 0.0) || !opts.sigma0.is_finite() {
        return Err(Error::Domain(format!("sigma0 must be > 0, got {}", opts.sigma0)));
    }
    if train_ds.is_empty() {
        return Err(Error::InvalidArgument("laplace fit needs training data".into()));
    }
    let cache = net.forward(&train_ds.x)?;
    let probs = softmax(cache.logits());
    let last = net.last_layer();
    let (phi, map_weights, fixed_bias) = if opts.include_bias {
        let phi = cache.features().append_const_col(1.0);
        (phi, last.weights.vstack(&last.bias)?, None)
    } else {
        (
            cache.features().clone(),
            last.weights.clone(),
            Some(last.bias.data().to_vec()),
        )
    };
    let n = phi.rows() as f64;
    let d = phi.cols();
    let k = probs.cols();

    let mut phi_outer = phi.t_matmul(&phi)?;
    let mut curvature = Matrix::zeros(k, k);
    let mut exact_prec = opts.exact.then(|| Matrix::zeros(d * k, d * k));
    for (p, f) in probs.row_iter().zip(phi.row_iter()) {
        let mut lam = outer(p, p).scale(-1.0);
        for i in 0..k {
            lam.set(i, i, lam.get(i, i) + p[i]);
        }
        if let Some(prec) = exact_prec.as_mut() {
            prec.axpy(1.0, &kron(&lam, &outer(f, f)))?;
        }
        curvature.axpy(1.0, &lam)?;
    }
    let root_n = n.sqrt();
    let prior = 1.0 / opts.sigma0;
    phi_outer = phi_outer.scale(root_n / n).add_diag(prior)?;
    curvature = curvature.scale(root_n / n).add_diag(prior)?;
    let exact_covariance = match exact_prec {
        Some(p) => {
            let p = p.add_diag(prior * prior)?;
            Some(Cholesky::new(&p)?.inverse())
        }
        None => None,
    };
    LaplacePosterior::from_factors(
        map_weights,
        fixed_bias,
        phi_outer,
        curvature,
        opts.sigma0,
        exact_covariance,
    )
}

/// Per-sample logit variances σ_k² (`N × K`).
pub fn laplace_logit_variance(post: &LaplacePosterior, features: &Matrix, mode: CovarianceMode) -> Result<Matrix> {
    let g = post.logit_gaussian(features, mode)?;
    let k = post.num_classes();
    let mut out = Matrix::zeros(features.rows(), k);
    for (r, c) in g.covariances.iter().enumerate() {
        for j in 0..k {
            out.set(r, j, c.get(j, j));
        }
    }
    Ok(out)
}

/// Average softmax over `m` draws from each row's logit Gaussian.
pub fn mc_predictive_gaussian(g: &LogitGaussian, m: usize, rng: &mut RngState) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::InvalidArgument("mc sample count must be ≥ 1".into()));
    }
    if g.covariances.len() != g.mean.rows() {
        return shape_err("one covariance per logit row required");
    }
    let k = g.mean.cols();
    let mut out = Matrix::zeros(g.mean.rows(), k);
    let mut sample = vec![0.0; k];
    for (r, cov) in g.covariances.iter().enumerate() {
        let chol = Cholesky::new_psd(cov, 1e-12)?;
        let mean = g.mean.row(r);
        let acc = out.row_mut(r);
        for t in 0..m {
            let z = rng.normal_vec(k);
            let noise = chol.mul_factor(&z);
            for ((s, mu), e) in sample.iter_mut().zip(mean).zip(&noise) {
                *s = mu + e;
            }
            softmax_in_place(&mut sample);
            let w = 1.0 / (t + 1) as f64;
            for (a, p) in acc.iter_mut().zip(&sample) {
                *a += (p - *a) * w;
            }
        }
    }
    Ok(out)
}

pub fn mc_predictive(
    post: &LaplacePosterior,
    features: &Matrix,
    mode: CovarianceMode,
    m: usize,
    rng: &mut RngState,
) -> Result<Matrix> {
    mc_predictive_gaussian(&post.logit_gaussian(features, mode)?, m, rng)
}

/// `softmax(s_k / √(1 + λ σ_k²))` row by row.
pub fn meanfield_rescale(mean: &Matrix, variances: &Matrix, mf_lambda: f64) -> Result<Matrix> {
    if !(mf_lambda >= 0.0) {
        return Err(Error::Domain(format!("mean-field lambda must be ≥ 0, got {mf_lambda}")));
    }
    if mean.shape() != variances.shape() {
        return shape_err("logit and variance shapes differ");
    }
    let mut s = mean.clone();
    for (v, &var) in s.data_mut().iter_mut().zip(variances.data()) {
        *v /= (1.0 + mf_lambda * var).sqrt();
    }
    Ok(softmax(&s))
}

pub fn meanfield_predictive(
    post: &LaplacePosterior,
    features: &Matrix,
    mode: CovarianceMode,
    mf_lambda: f64,
) -> Result<Matrix> {
    let mean = post.map_logits(features)?;
    let var = laplace_logit_variance(post, features, mode)?;
    meanfield_rescale(&mean, &var, mf_lambda)
}
