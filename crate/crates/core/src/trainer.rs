//! Training loops for ERM and the Mixup family, seed ensembles, and
//! accuracy-driven cross-validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{
    accuracy, cross_entropy_soft, one_hot, sgd_step, softmax, Activation, GradientSet, Network, OptimState, Schedule,
};
use crate::rng::RngState;
use crate::tensor::Matrix;
use crate::vicinal::{
    cutmix_batch, mixup_batch, mixup_with, random_pairing, regmix_loss, BetaParams, LambdaMode, MixedBatch,
};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Mixup α values searched for plain Mixup.
pub const MIXUP_ALPHA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 5.0, 10.0, 20.0];
/// RegMixup α values.
pub const REGMIXUP_ALPHA_GRID: [f64; 11] = [0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 5.0, 10.0, 15.0, 20.0, 30.0];
/// RegMixup mixing weights η.
pub const REGMIXUP_ETA_GRID: [f64; 3] = [0.1, 1.0, 2.0];
pub const CUTMIX_ALPHA_GRID: [f64; 6] = [0.1, 0.2, 0.3, 1.0, 10.0, 20.0];
pub const MIXUP_CUTMIX_ALPHA_GRID: [f64; 4] = [0.1, 0.3, 1.0, 10.0];

// Stream tags for RngState::fork.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_MIX: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Erm,
    Mixup,
    Regmixup,
    Cutmix,
    Regcutmix,
    MixupPlusCutmix,
    RegMixupPlusRegcutmix,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Erm,
        Strategy::Mixup,
        Strategy::Regmixup,
        Strategy::Cutmix,
        Strategy::Regcutmix,
        Strategy::MixupPlusCutmix,
        Strategy::RegMixupPlusRegcutmix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Erm => "erm",
            Strategy::Mixup => "mixup",
            Strategy::Regmixup => "regmixup",
            Strategy::Cutmix => "cutmix",
            Strategy::Regcutmix => "regcutmix",
            Strategy::MixupPlusCutmix => "mixup_plus_cutmix",
            Strategy::RegMixupPlusRegcutmix => "reg_mixup_plus_regcutmix",
        }
    }

    pub fn needs_alpha(self) -> bool {
        self != Strategy::Erm
    }

    /// Keeps the clean cross-entropy term alongside the mixed one.
    pub fn is_regularized(self) -> bool {
        matches!(
            self,
            Strategy::Regmixup | Strategy::Regcutmix | Strategy::RegMixupPlusRegcutmix
        )
    }

    pub fn uses_cutmix(self) -> bool {
        matches!(
            self,
            Strategy::Cutmix | Strategy::Regcutmix | Strategy::MixupPlusCutmix | Strategy::RegMixupPlusRegcutmix
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub lambda_mode: LambdaMode,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Replaces every sampled λ with this value. Used to check strategy
    /// degeneracies; `None` in normal runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_lambda: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Erm,
            alpha: None,
            eta: None,
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            seed: 0,
            lambda_mode: LambdaMode::PerBatch,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            forced_lambda: None,
        }
    }
}

impl TrainConfig {
    pub fn erm() -> Self {
        Self::default()
    }

    pub fn mixup(alpha: f64) -> Self {
        Self {
            strategy: Strategy::Mixup,
            alpha: Some(alpha),
            ..Self::default()
        }
    }

    pub fn regmixup(alpha: f64, eta: f64) -> Self {
        Self {
            strategy: Strategy::Regmixup,
            alpha: Some(alpha),
            eta: Some(eta),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.strategy.needs_alpha() {
            match self.alpha {
                Some(a) => {
                    BetaParams::new(a)?;
                }
                None => return bad(format!("strategy {} requires alpha", self.strategy)),
            }
        }
        if self.strategy.is_regularized() {
            match self.eta {
                Some(e) if e >= 0.0 && e.is_finite() => {}
                Some(e) => return bad(format!("eta must be ≥ 0, got {e}")),
                None => return bad(format!("strategy {} requires eta", self.strategy)),
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch size must be ≥ 2".into());
        }
        if let Some(l) = self.forced_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("forced lambda {l} outside [0,1]"));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be ≥ 1".into());
        }
        OptimState::new(self.learning_rate, self.momentum, self.weight_decay, self.schedule)?;
        Ok(())
    }

    fn beta(&self) -> Result<BetaParams> {
        BetaParams::new(self.alpha.unwrap_or(1.0))
    }
}

/// Persisted outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub train_dataset: String,
    pub val_dataset: String,
    pub seed: u64,
    /// Mean objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub final_val_accuracy: f64,
    pub final_val_loss: f64,
    /// Only filled by callers that opt into timing; the library never reads clocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl ExperimentRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ExperimentRecord = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if rec.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported record schema {}",
                rec.schema_version
            )));
        }
        Ok(rec)
    }
}

/// Objective and gradient for one batch under `config.strategy`.
/// `rng` supplies pairing, λ and (for alternating strategies) the coin.
pub fn batch_objective(
    config: &TrainConfig,
    net: &Network,
    x: &Matrix,
    y: &Matrix,
    image: Option<ImageShape>,
    rng: &mut RngState,
) -> Result<(f64, GradientSet)> {
    if config.strategy == Strategy::Erm {
        return net.loss_and_grad(x, y);
    }
    let beta = config.beta()?;
    let use_cutmix = match config.strategy {
        Strategy::Mixup | Strategy::Regmixup => false,
        Strategy::Cutmix | Strategy::Regcutmix => true,
        Strategy::MixupPlusCutmix | Strategy::RegMixupPlusRegcutmix => rng.bernoulli(0.5),
        Strategy::Erm => unreachable!(),
    };
    let mixed = make_mixed(config, x, y, image, beta, use_cutmix, rng)?;
    if config.strategy.is_regularized() {
        regmix_loss(net, x, y, &mixed, config.eta.unwrap_or(0.0))
    } else {
        net.loss_and_grad(&mixed.x, &mixed.y)
    }
}

fn make_mixed(
    config: &TrainConfig,
    x: &Matrix,
    y: &Matrix,
    image: Option<ImageShape>,
    beta: BetaParams,
    use_cutmix: bool,
    rng: &mut RngState,
) -> Result<MixedBatch> {
    match (use_cutmix, config.forced_lambda) {
        (false, None) => mixup_batch(x, y, beta, config.lambda_mode, rng),
        (false, Some(l)) => {
            let pairing = random_pairing(x.rows(), rng)?;
            mixup_with(x, y, &pairing, &vec![l; x.rows()])
        }
        (true, None) => cutmix_batch(x, y, image, beta, rng),
        (true, Some(l)) => {
            let shape = image.ok_or_else(|| Error::InvalidArgument("cutmix needs image-shaped inputs".into()))?;
            let pairing = random_pairing(x.rows(), rng)?;
            let patch = crate::vicinal::sample_patch(shape, l, rng);
            crate::vicinal::cutmix_with(x, y, shape, &pairing, patch)
        }
    }
}

/// Contiguous batches over `perm`; a trailing batch of one is merged into
/// its predecessor because mixing needs two rows.
fn batches(perm: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = perm.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &perm[start..];
    }
    out
}

fn check_datasets(config: &TrainConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<()> {
    config.validate()?;
    if train_ds.len() < 2 {
        return Err(Error::InvalidArgument("training set needs at least two samples".into()));
    }
    if train_ds.dim() != val_ds.dim() || train_ds.num_classes != val_ds.num_classes {
        return Err(Error::Shape(format!(
            "train ({}-d, {} classes) and val ({}-d, {} classes) disagree",
            train_ds.dim(),
            train_ds.num_classes,
            val_ds.dim(),
            val_ds.num_classes
        )));
    }
    if config.strategy.uses_cutmix() && train_ds.image.is_none() {
        return Err(Error::InvalidArgument(format!(
            "strategy {} needs an image dataset",
            config.strategy
        )));
    }
    Ok(())
}

/// Accuracy and mean cross-entropy of `net` on `ds`.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let probs = net.predict_proba(&ds.x)?;
    let targets = one_hot(&ds.labels, net.num_classes())?;
    Ok((accuracy(&probs, &ds.labels), cross_entropy_soft(&probs, &targets)?))
}

/// Trains one network. Every random choice comes from streams forked off
/// `config.seed`, so equal configs give bit-identical networks and records.
pub fn train(config: &TrainConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<(Network, ExperimentRecord)> {
    check_datasets(config, train_ds, val_ds)?;
    let root = RngState::new(config.seed);
    let mut net = Network::mlp(
        train_ds.dim(),
        &config.hidden,
        train_ds.num_classes,
        config.activation,
        &mut root.fork(STREAM_INIT),
    )?;
    let mut opt = OptimState::new(
        config.learning_rate,
        config.momentum,
        config.weight_decay,
        config.schedule,
    )?;
    let targets = one_hot(&train_ds.labels, train_ds.num_classes)?;
    let n = train_ds.len();
    let per_epoch = batches(&(0..n).collect::<Vec<_>>(), config.batch_size).len();
    let total_steps = (config.epochs * per_epoch) as f64;
    let mix_root = root.fork(STREAM_MIX);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let perm = root.fork2(STREAM_SHUFFLE, epoch as u64).permutation(n);
        let mut loss_sum = 0.0;
        let batch_list = batches(&perm, config.batch_size);
        for (b, idx) in batch_list.iter().enumerate() {
            let xb = train_ds.x.select_rows(idx);
            let yb = targets.select_rows(idx);
            let mut rng = mix_root.fork2(epoch as u64, b as u64);
            let (loss, grads) = batch_objective(config, &net, &xb, &yb, train_ds.image, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}, batch {b}")));
            }
            sgd_step(&mut net, &grads, &mut opt, step as f64 / total_steps)?;
            loss_sum += loss;
            step += 1;
        }
        epoch_losses.push(loss_sum / batch_list.len() as f64);
    }

    let (val_acc, val_loss) = evaluate(&net, val_ds)?;
    let record = ExperimentRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        config: config.clone(),
        train_dataset: train_ds.name.clone(),
        val_dataset: val_ds.name.clone(),
        seed: config.seed,
        epoch_losses,
        final_val_accuracy: val_acc,
        final_val_loss: val_loss,
        wall_clock_secs: None,
        checkpoint: None,
    };
    Ok((net, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMetric {
    Accuracy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub best_index: usize,
    pub best: TrainConfig,
    pub scores: Vec<f64>,
}

/// Trains every grid entry on a stratified 90% split of `train_ds` and
/// returns the one with the highest held-out accuracy (earliest on ties).
pub fn cross_validate(
    grid: &[TrainConfig],
    train_ds: &Dataset,
    metric: CvMetric,
    split_seed: u64,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("cross-validation grid is empty".into()));
    }
    let (fit, held) = split(train_ds, 0.9, true, &mut RngState::new(split_seed))?;
    let mut scores = Vec::with_capacity(grid.len());
    for cfg in grid {
        let (net, _) = train(cfg, &fit, &held)?;
        let score = match metric {
            CvMetric::Accuracy => evaluate(&net, &held)?.0,
        };
        scores.push(score);
    }
    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(CvOutcome {
        best_index,
        best: grid[best_index].clone(),
        scores,
    })
}

/// Mixup grid over [`MIXUP_ALPHA_GRID`], other fields from `base`.
pub fn mixup_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    MIXUP_ALPHA_GRID
        .iter()
        .map(|&a| TrainConfig {
            strategy: Strategy::Mixup,
            alpha: Some(a),
            eta: None,
            ..base.clone()
        })
        .collect()
}

/// RegMixup grid over [`REGMIXUP_ALPHA_GRID`] × [`REGMIXUP_ETA_GRID`].
pub fn regmixup_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for &a in &REGMIXUP_ALPHA_GRID {
        for &e in &REGMIXUP_ETA_GRID {
            out.push(TrainConfig {
                strategy: Strategy::Regmixup,
                alpha: Some(a),
                eta: Some(e),
                ..base.clone()
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<Network>,
}

impl EnsembleModel {
    pub fn new(members: Vec<Network>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
        let specs = first.specs();
        if members.iter().any(|m| m.specs() != specs) {
            return Err(Error::Shape("ensemble members have different architectures".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Trains `n_members` copies of `config` with seeds `seed, seed+1, …`.
pub fn train_ensemble(
    config: &TrainConfig,
    n_members: usize,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<(EnsembleModel, Vec<ExperimentRecord>)> {
    if n_members == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let mut nets = Vec::with_capacity(n_members);
    let mut records = Vec::with_capacity(n_members);
    for i in 0..n_members {
        let cfg = config.clone().with_seed(config.seed.wrapping_add(i as u64));
        let (net, rec) = train(&cfg, train_ds, val_ds)?;
        nets.push(net);
        records.push(rec);
    }
    Ok((EnsembleModel::new(nets)?, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Average of member softmax outputs.
    MeanProb,
    /// Softmax of the averaged logits (what temperature scaling is applied to).
    MeanLogit,
}

/// Running mean, exact when all inputs are equal.
fn accumulate_mean(acc: &mut Matrix, next: &Matrix, count: usize) {
    let w = 1.0 / count as f64;
    for (a, &v) in acc.data_mut().iter_mut().zip(next.data()) {
        *a += (v - *a) * w;
    }
}

/// Returns `(probs, mean_logits)`.
pub fn ensemble_predict(ens: &EnsembleModel, x: &Matrix, mode: EnsembleMode) -> Result<(Matrix, Matrix)> {
    let mut mean_logits: Option<Matrix> = None;
    let mut mean_probs: Option<Matrix> = None;
    for (i, m) in ens.members.iter().enumerate() {
        let logits = m.logits(x)?;
        let probs = softmax(&logits);
        match (&mut mean_logits, &mut mean_probs) {
            (Some(ml), Some(mp)) => {
                accumulate_mean(ml, &logits, i + 1);
                accumulate_mean(mp, &probs, i + 1);
            }
            _ => {
                mean_logits = Some(logits);
                mean_probs = Some(probs);
            }
        }
    }
    let mean_logits = mean_logits.expect("ensemble is non-empty");
    let probs = match mode {
        EnsembleMode::MeanProb => mean_probs.expect("ensemble is non-empty"),
        EnsembleMode::MeanLogit => softmax(&mean_logits),
    };
    Ok((probs, mean_logits))
}
