//! Vicinal distributions: symmetric Beta sampling, Mixup interpolation,
//! CutMix patching and the RegMixup objective
//! `CE(p(x), y) + η·CE(p(x̄), ȳ)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{shape_err, Error, Result};
use crate::nn::{GradientSet, Network};
use crate::rng::RngState;
use crate::tensor::Matrix;

/// Symmetric Beta(α, α).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    alpha: f64,
}

impl BetaParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("beta alpha must be > 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Closed-form variance `1 / (4(2α + 1))`.
    pub fn variance(&self) -> f64 {
        1.0 / (4.0 * (2.0 * self.alpha + 1.0))
    }
}

/// λ ~ Beta(α, α) as `g₁ / (g₁ + g₂)` with `gᵢ ~ Gamma(α)`, evaluated in
/// log space so tiny gamma draws do not collapse to 0/0.
pub fn sample_lambda(params: BetaParams, rng: &mut RngState) -> f64 {
    let l1 = rng
        .ln_gamma_variate(params.alpha)
        .expect("alpha validated by BetaParams");
    let l2 = rng
        .ln_gamma_variate(params.alpha)
        .expect("alpha validated by BetaParams");
    1.0 / (1.0 + (l2 - l1).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// One λ for the whole batch.
    PerBatch,
    /// An independent λ for each (i, pair(i)).
    PerPair,
}

impl FromStr for LambdaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_batch" => Ok(LambdaMode::PerBatch),
            "per_pair" => Ok(LambdaMode::PerPair),
            _ => Err(Error::InvalidArgument(format!("unknown lambda mode '{s}'"))),
        }
    }
}

/// Mixed inputs and soft targets. `lambdas[i]` is the weight on row `i`'s
/// own sample; `1 − lambdas[i]` goes to row `pairing[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub x: Matrix,
    pub y: Matrix,
    pub lambdas: Vec<f64>,
    pub pairing: Vec<usize>,
}

/// Partner for every row: shuffle the batch, then pair each position with
/// the one a random non-zero cyclic shift away. Never pairs a row with itself.
pub fn random_pairing(n: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "mixing needs a batch of at least 2, got {n}"
        )));
    }
    let order = rng.permutation(n);
    let shift = 1 + rng.below(n - 1);
    let mut pairing = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        pairing[i] = order[(pos + shift) % n];
    }
    Ok(pairing)
}

fn check_batch(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() != y.rows() {
        return shape_err(format!("{} inputs but {} targets", x.rows(), y.rows()));
    }
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("mixing needs a batch of at least 2".into()));
    }
    Ok(())
}

/// Deterministic core of Mixup: `x̄ᵢ = λᵢxᵢ + (1−λᵢ)x_{pair(i)}`, same for targets.
pub fn mixup_with(x: &Matrix, y: &Matrix, pairing: &[usize], lambdas: &[f64]) -> Result<MixedBatch> {
    check_batch(x, y)?;
    let n = x.rows();
    if pairing.len() != n || lambdas.len() != n {
        return shape_err("pairing/lambda length must equal batch size");
    }
    if let Some(&l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Domain(format!("lambda {l} outside [0,1]")));
    }
    let mut xm = Matrix::zeros(n, x.cols());
    let mut ym = Matrix::zeros(n, y.cols());
    for i in 0..n {
        let j = pairing[i];
        if j >= n || j == i {
            return Err(Error::InvalidArgument(format!("invalid partner {j} for row {i}")));
        }
        let l = lambdas[i];
        for ((o, a), b) in xm.row_mut(i).iter_mut().zip(x.row(i)).zip(x.row(j)) {
            *o = l * a + (1.0 - l) * b;
        }
        for ((o, a), b) in ym.row_mut(i).iter_mut().zip(y.row(i)).zip(y.row(j)) {
            *o = l * a + (1.0 - l) * b;
        }
    }
    Ok(MixedBatch {
        x: xm,
        y: ym,
        lambdas: lambdas.to_vec(),
        pairing: pairing.to_vec(),
    })
}

pub fn mixup_batch(
    x: &Matrix,
    y_onehot: &Matrix,
    params: BetaParams,
    mode: LambdaMode,
    rng: &mut RngState,
) -> Result<MixedBatch> {
    check_batch(x, y_onehot)?;
    let n = x.rows();
    let pairing = random_pairing(n, rng)?;
    let lambdas = match mode {
        LambdaMode::PerBatch => vec![sample_lambda(params, rng); n],
        LambdaMode::PerPair => (0..n).map(|_| sample_lambda(params, rng)).collect(),
    };
    mixup_with(x, y_onehot, &pairing, &lambdas)
}

/// Axis-aligned patch `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Patch whose area is as close as the pixel grid allows to `(1−λ)·H·W`:
/// side lengths `round(H·√(1−λ))`, `round(W·√(1−λ))`, placed uniformly at
/// random fully inside the image.
pub fn sample_patch(shape: ImageShape, lambda: f64, rng: &mut RngState) -> PatchBox {
    let r = (1.0 - lambda).clamp(0.0, 1.0).sqrt();
    let height = ((shape.height as f64 * r).round() as usize).min(shape.height);
    let width = ((shape.width as f64 * r).round() as usize).min(shape.width);
    let top = rng.below(shape.height - height + 1);
    let left = rng.below(shape.width - width + 1);
    PatchBox {
        top,
        left,
        height,
        width,
    }
}

/// Deterministic core of CutMix: paste `patch` from each row's partner into
/// the row. Target weights come from the realised patch area.
pub fn cutmix_with(
    x_img: &Matrix,
    y: &Matrix,
    shape: ImageShape,
    pairing: &[usize],
    patch: PatchBox,
) -> Result<MixedBatch> {
    check_batch(x_img, y)?;
    if x_img.cols() != shape.len() {
        return shape_err(format!(
            "image rows have {} values, shape {:?} needs {}",
            x_img.cols(),
            shape,
            shape.len()
        ));
    }
    if patch.top + patch.height > shape.height || patch.left + patch.width > shape.width {
        return Err(Error::InvalidArgument("patch extends past the image".into()));
    }
    let n = x_img.rows();
    if pairing.len() != n {
        return shape_err("pairing length must equal batch size");
    }
    let lambda = 1.0 - patch.area() as f64 / (shape.height * shape.width) as f64;
    let mut xm = x_img.clone();
    for i in 0..n {
        let j = pairing[i];
        if j >= n || j == i {
            return Err(Error::InvalidArgument(format!("invalid partner {j} for row {i}")));
        }
        let src = x_img.row(j);
        let dst = xm.row_mut(i);
        for c in 0..shape.channels {
            for yy in patch.top..patch.top + patch.height {
                let start = shape.index(c, yy, patch.left);
                dst[start..start + patch.width].copy_from_slice(&src[start..start + patch.width]);
            }
        }
    }
    let lambdas = vec![lambda; n];
    let mut ym = Matrix::zeros(n, y.cols());
    for i in 0..n {
        let j = pairing[i];
        for ((o, a), b) in ym.row_mut(i).iter_mut().zip(y.row(i)).zip(y.row(j)) {
            *o = lambda * a + (1.0 - lambda) * b;
        }
    }
    Ok(MixedBatch {
        x: xm,
        y: ym,
        lambdas,
        pairing: pairing.to_vec(),
    })
}

/// CutMix with probability 1: one λ and one patch per batch.
pub fn cutmix_batch(
    x_img: &Matrix,
    y_onehot: &Matrix,
    shape: Option<ImageShape>,
    params: BetaParams,
    rng: &mut RngState,
) -> Result<MixedBatch> {
    let shape = shape.ok_or_else(|| Error::InvalidArgument("cutmix needs image-shaped inputs".into()))?;
    check_batch(x_img, y_onehot)?;
    let pairing = random_pairing(x_img.rows(), rng)?;
    let lambda = sample_lambda(params, rng);
    let patch = sample_patch(shape, lambda, rng);
    cutmix_with(x_img, y_onehot, shape, &pairing, patch)
}

/// Clean cross-entropy plus `eta` times the mixed-batch cross-entropy, with
/// the matching gradient. `eta == 0` skips the mixed pass entirely, so the
/// result is bit-identical to plain ERM.
pub fn regmix_loss(
    net: &Network,
    x: &Matrix,
    y_onehot: &Matrix,
    mixed: &MixedBatch,
    eta: f64,
) -> Result<(f64, GradientSet)> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be ≥ 0, got {eta}")));
    }
    let (clean_loss, mut grads) = net.loss_and_grad(x, y_onehot)?;
    if eta == 0.0 {
        return Ok((clean_loss, grads));
    }
    let (mixed_loss, mixed_grads) = net.loss_and_grad(&mixed.x, &mixed.y)?;
    grads.add_scaled(eta, &mixed_grads)?;
    Ok((clean_loss + eta * mixed_loss, grads))
}

/// Mixing weight γ of the equivalent ERM/VRM mixture distribution.
pub fn gamma_from_eta(eta: f64) -> f64 {
    1.0 / (1.0 + eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy_soft, one_hot, softmax, Activation};

    #[test]
    fn pairing_never_self() {
        let mut rng = RngState::new(1);
        for n in 2..40 {
            let p = random_pairing(n, &mut rng).unwrap();
            assert!(p.iter().enumerate().all(|(i, &j)| i != j && j < n));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
        assert!(random_pairing(1, &mut rng).is_err());
    }

    #[test]
    fn lambda_one_is_identity() {
        let mut rng = RngState::new(2);
        let x = Matrix::from_vec(6, 3, rng.normal_vec(18)).unwrap();
        let y = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let p = random_pairing(6, &mut rng).unwrap();
        let m = mixup_with(&x, &y, &p, &[1.0; 6]).unwrap();
        assert_eq!(m.x, x);
        assert_eq!(m.y, y);
    }

    #[test]
    fn midpoint_example() {
        let x = Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0]]).unwrap();
        let y = one_hot(&[0, 1], 4).unwrap();
        let m = mixup_with(&x, &y, &[1, 0], &[0.5, 0.5]).unwrap();
        assert_eq!(m.x.row(0), &[1.0, 1.0]);
        assert_eq!(m.y.row(0), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn mixup_rejects_singletons_and_bad_lambda() {
        let x = Matrix::zeros(1, 2);
        let y = one_hot(&[0], 2).unwrap();
        let beta = BetaParams::new(1.0).unwrap();
        assert!(mixup_batch(&x, &y, beta, LambdaMode::PerBatch, &mut RngState::new(0)).is_err());
        let x2 = Matrix::zeros(2, 2);
        let y2 = one_hot(&[0, 1], 2).unwrap();
        assert!(mixup_with(&x2, &y2, &[1, 0], &[1.5, 0.5]).is_err());
        assert!(mixup_with(&x2, &y2, &[0, 1], &[0.5, 0.5]).is_err());
        assert!(BetaParams::new(0.0).is_err());
        assert!(BetaParams::new(-2.0).is_err());
    }

    #[test]
    fn per_batch_uses_single_lambda() {
        let mut rng = RngState::new(3);
        let x = Matrix::from_vec(8, 2, rng.normal_vec(16)).unwrap();
        let y = one_hot(&[0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let beta = BetaParams::new(0.4).unwrap();
        let m = mixup_batch(&x, &y, beta, LambdaMode::PerBatch, &mut rng).unwrap();
        assert!(m.lambdas.iter().all(|&l| l == m.lambdas[0]));
        let m = mixup_batch(&x, &y, beta, LambdaMode::PerPair, &mut rng).unwrap();
        assert!(m.lambdas.iter().any(|&l| l != m.lambdas[0]));
    }

    #[test]
    fn soft_targets_stay_on_simplex() {
        let mut rng = RngState::new(4);
        let beta = BetaParams::new(0.3).unwrap();
        for trial in 0..1000 {
            let n = 2 + trial % 9;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(5)).collect();
            let y = one_hot(&labels, 5).unwrap();
            let x = Matrix::from_vec(n, 2, rng.normal_vec(2 * n)).unwrap();
            let mode = if trial % 2 == 0 {
                LambdaMode::PerBatch
            } else {
                LambdaMode::PerPair
            };
            let m = mixup_batch(&x, &y, beta, mode, &mut rng).unwrap();
            for r in m.y.row_iter() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(r.iter().filter(|&&v| v != 0.0).count() <= 2);
                assert!(r.iter().all(|&v| v >= 0.0));
            }
            assert!(m.lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
        }
    }

    fn image_batch(rng: &mut RngState, n: usize, shape: ImageShape) -> Matrix {
        Matrix::from_vec(n, shape.len(), rng.uniform_vec(n * shape.len())).unwrap()
    }

    #[test]
    fn cutmix_lambda_one_is_identity() {
        let shape = ImageShape {
            height: 6,
            width: 5,
            channels: 2,
        };
        let mut rng = RngState::new(5);
        let x = image_batch(&mut rng, 4, shape);
        let y = one_hot(&[0, 1, 2, 3], 4).unwrap();
        let patch = sample_patch(shape, 1.0, &mut rng);
        assert_eq!(patch.area(), 0);
        let m = cutmix_with(&x, &y, shape, &[1, 2, 3, 0], patch).unwrap();
        assert_eq!(m.x, x);
        assert_eq!(m.y, y);
    }

    #[test]
    fn cutmix_full_patch_replaces_image() {
        let shape = ImageShape {
            height: 4,
            width: 4,
            channels: 3,
        };
        let mut rng = RngState::new(6);
        let x = image_batch(&mut rng, 3, shape);
        let y = one_hot(&[0, 1, 2], 3).unwrap();
        let patch = sample_patch(shape, 0.0, &mut rng);
        assert_eq!(patch.area(), 16);
        let pairing = [2, 0, 1];
        let m = cutmix_with(&x, &y, shape, &pairing, patch).unwrap();
        for i in 0..3 {
            assert_eq!(m.x.row(i), x.row(pairing[i]));
            assert_eq!(m.y.row(i), y.row(pairing[i]));
        }
    }

    #[test]
    fn cutmix_weights_match_pixel_count() {
        let shape = ImageShape {
            height: 9,
            width: 7,
            channels: 1,
        };
        let mut rng = RngState::new(7);
        let beta = BetaParams::new(1.0).unwrap();
        for _ in 0..200 {
            // Distinct constant images make copied pixels countable.
            let n = 3;
            let mut x = Matrix::zeros(n, shape.len());
            for i in 0..n {
                x.row_mut(i).iter_mut().for_each(|v| *v = i as f64 + 1.0);
            }
            let y = one_hot(&[0, 1, 2], 3).unwrap();
            let m = cutmix_batch(&x, &y, Some(shape), beta, &mut rng).unwrap();
            for i in 0..n {
                let j = m.pairing[i];
                let from_partner = m.x.row(i).iter().filter(|&&v| v == j as f64 + 1.0).count();
                let expected = 1.0 - from_partner as f64 / shape.len() as f64;
                assert!((m.y.get(i, i) - expected).abs() < 1e-12);
                assert!((m.y.get(i, j) - (1.0 - expected)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cutmix_requires_image_shape() {
        let x = Matrix::zeros(2, 4);
        let y = one_hot(&[0, 1], 2).unwrap();
        let beta = BetaParams::new(1.0).unwrap();
        assert!(cutmix_batch(&x, &y, None, beta, &mut RngState::new(0)).is_err());
        let wrong = ImageShape {
            height: 3,
            width: 3,
            channels: 1,
        };
        assert!(cutmix_batch(&x, &y, Some(wrong), beta, &mut RngState::new(0)).is_err());
    }

    fn toy() -> (Network, Matrix, Matrix, MixedBatch) {
        let mut rng = RngState::new(11);
        let net = Network::mlp(3, &[6], 3, Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_vec(8, 3, rng.normal_vec(24)).unwrap();
        let y = one_hot(&[0, 1, 2, 0, 1, 2, 0, 1], 3).unwrap();
        let beta = BetaParams::new(2.0).unwrap();
        let m = mixup_batch(&x, &y, beta, LambdaMode::PerPair, &mut rng).unwrap();
        (net, x, y, m)
    }

    #[test]
    fn eta_zero_is_erm() {
        let (net, x, y, m) = toy();
        let (l, g) = regmix_loss(&net, &x, &y, &m, 0.0).unwrap();
        let (l0, g0) = net.loss_and_grad(&x, &y).unwrap();
        assert_eq!(l.to_bits(), l0.to_bits());
        assert_eq!(g, g0);
        assert!(regmix_loss(&net, &x, &y, &m, -1.0).is_err());
    }

    #[test]
    fn normalised_loss_is_gamma_mixture() {
        let (net, x, y, m) = toy();
        for eta in [0.1, 1.0, 2.0, 7.5] {
            let (l, _) = regmix_loss(&net, &x, &y, &m, eta).unwrap();
            let clean = cross_entropy_soft(&net.predict_proba(&x).unwrap(), &y).unwrap();
            let mixed = cross_entropy_soft(&net.predict_proba(&m.x).unwrap(), &m.y).unwrap();
            let gamma = gamma_from_eta(eta);
            let mixture = gamma * clean + (1.0 - gamma) * mixed;
            assert!((l / (1.0 + eta) - mixture).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_lambda_one_collapses_onto_clean_term() {
        let (net, x, y, _) = toy();
        let p = random_pairing(8, &mut RngState::new(1)).unwrap();
        let m = mixup_with(&x, &y, &p, &[1.0; 8]).unwrap();
        for eta in [0.5, 1.0, 3.0] {
            let (l, _) = regmix_loss(&net, &x, &y, &m, eta).unwrap();
            let clean = cross_entropy_soft(&softmax(&net.logits(&x).unwrap()), &y).unwrap();
            assert!((l - (1.0 + eta) * clean).abs() < 1e-12);
        }
    }
}
