//! Dense multilayer perceptron with exact backpropagation, soft-target
//! cross-entropy and SGD with Nesterov momentum.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::RngState;
use crate::tensor::Matrix;

/// Floor applied inside `log` when evaluating cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::InvalidArgument(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// One dense layer: `y = act(x W + b)` with `W` stored `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    // Bumped on every parameter update; caches remember the value they saw.
    generation: u64,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    generation: u64,
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer; the last one is the logits.
    pre: Vec<Matrix>,
}

impl ActivationCache {
    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("network has at least one layer")
    }

    /// Penultimate activations φ(x), i.e. the input of the last layer.
    pub fn features(&self) -> &Matrix {
        self.inputs.last().expect("network has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Matrix,
}

/// Per-layer parameter gradients, congruent with the owning [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: Matrix::zeros(1, l.bias.cols()),
                })
                .collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return shape_err("gradient sets have different depth");
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.axpy(s, &b.weights)?;
            a.bias.axpy(s, &b.bias)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.data_mut().iter_mut().for_each(|v| *v *= s);
            l.bias.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flattened in the same order as [`Network::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }
}

impl Network {
    /// Zero-initialised network. Consecutive dims must chain and the last
    /// layer must be linear (it produces logits).
    pub fn new(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&spec| Layer {
                spec,
                weights: Matrix::zeros(spec.in_dim, spec.out_dim),
                bias: Matrix::zeros(1, spec.out_dim),
            })
            .collect();
        Ok(Self { layers, generation: 0 })
    }

    /// He-uniform weights for ReLU layers, Xavier-uniform otherwise; zero biases.
    pub fn init(specs: &[LayerSpec], rng: &mut RngState) -> Result<Self> {
        let mut net = Self::new(specs)?;
        for layer in &mut net.layers {
            let LayerSpec {
                in_dim,
                out_dim,
                activation,
            } = layer.spec;
            let limit = match activation {
                Activation::Relu => (6.0 / in_dim as f64).sqrt(),
                _ => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            };
            for w in layer.weights.data_mut() {
                *w = limit * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(net)
    }

    /// `input → hidden[0] → … → classes`, hidden layers sharing `activation`.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        Self::init(&mlp_specs(input, hidden, classes, activation), rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().spec.out_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().spec.in_dim
    }

    pub fn last_layer(&self) -> &Layer {
        self.layers.last().unwrap()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ActivationCache> {
        if x.cols() != self.input_dim() {
            return shape_err(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weights)?;
            let b = layer.bias.data();
            for r in 0..z.rows() {
                for (v, bb) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bb;
                }
            }
            let act = layer.spec.activation;
            let next = z.map(|v| act.apply(v));
            inputs.push(current);
            pre.push(z);
            current = next;
        }
        Ok(ActivationCache {
            generation: self.generation,
            inputs,
            pre,
        })
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.pre.pop().unwrap())
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.inputs.pop().unwrap())
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Exact gradient of the batch-mean soft-target cross-entropy of
    /// `softmax(logits)` against `soft_targets`.
    pub fn backward(&self, cache: &ActivationCache, soft_targets: &Matrix) -> Result<GradientSet> {
        if cache.generation != self.generation || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache from generation {}, network at {}",
                cache.generation, self.generation
            )));
        }
        for (layer, input) in self.layers.iter().zip(&cache.inputs) {
            if input.cols() != layer.spec.in_dim {
                return Err(Error::StaleCache("cache does not match layer shapes".into()));
            }
        }
        let logits = cache.logits();
        if logits.shape() != soft_targets.shape() {
            return shape_err(format!(
                "targets {}x{} vs logits {}x{}",
                soft_targets.rows(),
                soft_targets.cols(),
                logits.rows(),
                logits.cols()
            ));
        }
        let n = logits.rows().max(1) as f64;
        // dL/ds = (p − t) / n for the softmax-CE composite
        let mut delta = softmax(logits).sub(soft_targets)?.scale(1.0 / n);

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            if li + 1 < self.layers.len() || layer.spec.activation != Activation::Identity {
                let act = layer.spec.activation;
                let z = &cache.pre[li];
                for (d, &p) in delta.data_mut().iter_mut().zip(z.data()) {
                    *d *= act.derivative(p);
                }
            }
            let input = &cache.inputs[li];
            let gw = input.t_matmul(&delta)?;
            let mut gb = Matrix::zeros(1, delta.cols());
            for r in delta.row_iter() {
                for (acc, v) in gb.data_mut().iter_mut().zip(r) {
                    *acc += v;
                }
            }
            if li > 0 {
                delta = delta.matmul_t(&layer.weights)?;
            }
            grads.push(LayerGrad { weights: gw, bias: gb });
        }
        grads.reverse();
        Ok(GradientSet { layers: grads })
    }

    /// Batch-mean cross-entropy and its gradient in one call.
    pub fn loss_and_grad(&self, x: &Matrix, soft_targets: &Matrix) -> Result<(f64, GradientSet)> {
        let cache = self.forward(x)?;
        let loss = cross_entropy_soft(&softmax(cache.logits()), soft_targets)?;
        let grads = self.backward(&cache, soft_targets)?;
        Ok((loss, grads))
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.data().len())
            .sum()
    }

    /// All parameters, layer by layer (weights then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return shape_err("parameter vector length mismatch");
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.data().len();
            l.bias.data_mut().copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Writes the plain-text checkpoint. Floats use Rust's shortest
    /// round-trip formatting, so a save/load cycle is bit-exact.
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "layers {}", self.layers.len())?;
        for l in &self.layers {
            writeln!(w, "layer {} {} {}", l.spec.in_dim, l.spec.out_dim, l.spec.activation)?;
        }
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(w, "weights {i}")?;
            for r in l.weights.row_iter() {
                write_row(&mut w, r)?;
            }
            writeln!(w, "bias {i}")?;
            write_row(&mut w, l.bias.data())?;
        }
        Ok(())
    }

    pub fn load_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = move || -> Result<String> {
            match lines.next() {
                Some(l) => Ok(l?),
                None => Err(Error::Format("unexpected end of checkpoint".into())),
            }
        };
        let magic = next()?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint header '{magic}'")));
        }
        let count_line = next()?;
        let n: usize = expect_keyword(&count_line, "layers")?
            .first()
            .ok_or_else(|| Error::Format("missing layer count".into()))?
            .parse()
            .map_err(|_| Error::Format("bad layer count".into()))?;
        let mut specs = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next()?;
            let f = expect_keyword(&line, "layer")?;
            if f.len() != 3 {
                return Err(Error::Format(format!("bad layer line '{line}'")));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad dimension '{s}'")))
            };
            specs.push(LayerSpec {
                in_dim: parse(f[0])?,
                out_dim: parse(f[1])?,
                activation: f[2].parse()?,
            });
        }
        let mut net = Network::new(&specs).map_err(|e| Error::Format(e.to_string()))?;
        for i in 0..n {
            let (rows, cols) = net.layers[i].weights.shape();
            expect_keyword(&next()?, "weights")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                data.extend(parse_row(&next()?, cols)?);
            }
            net.layers[i].weights = Matrix::from_vec(rows, cols, data)?;
            expect_keyword(&next()?, "bias")?;
            net.layers[i].bias = Matrix::from_vec(1, cols, parse_row(&next()?, cols)?)?;
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &str = "vrl-checkpoint v1";

fn write_row<W: Write>(w: &mut W, row: &[f64]) -> Result<()> {
    let s: Vec<String> = row.iter().map(|v| v.to_string()).collect();
    writeln!(w, "{}", s.join(" "))?;
    Ok(())
}

fn parse_row(line: &str, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number '{t}'"))))
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::Format(format!(
            "row has {} values, expected {expected}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn expect_keyword<'a>(line: &'a str, kw: &str) -> Result<Vec<&'a str>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(kw) {
        return Err(Error::Format(format!("expected '{kw}', got '{line}'")));
    }
    Ok(it.collect())
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return shape_err(format!(
                "layer {} outputs {} but layer {i} expects {}",
                i - 1,
                specs[i - 1].out_dim,
                s.in_dim
            ));
        }
    }
    if specs.last().unwrap().activation != Activation::Identity {
        return Err(Error::InvalidArgument("last layer must be linear (logits)".into()));
    }
    Ok(())
}

pub fn mlp_specs(input: usize, hidden: &[usize], classes: usize, act: Activation) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden {
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: h,
            activation: act,
        });
        prev = h;
    }
    specs.push(LayerSpec {
        in_dim: prev,
        out_dim: classes,
        activation: Activation::Identity,
    });
    specs
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, stabilised.
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean over rows of `−Σ_k t_k log max(p_k, LOG_FLOOR)`.
pub fn cross_entropy_soft(probs: &Matrix, soft_targets: &Matrix) -> Result<f64> {
    if probs.shape() != soft_targets.shape() {
        return shape_err(format!(
            "probs {}x{} vs targets {}x{}",
            probs.rows(),
            probs.cols(),
            soft_targets.rows(),
            soft_targets.cols()
        ));
    }
    if let Some(v) = soft_targets.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Domain(format!("negative target entry {v}")));
    }
    if probs.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in probs.row_iter().zip(soft_targets.row_iter()) {
        for (&pk, &tk) in p.iter().zip(t) {
            if tk != 0.0 {
                total -= tk * pk.max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(total / probs.rows() as f64)
}

/// One-hot encoding of integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        m.set(i, y, 1.0);
    }
    Ok(m)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs_or_logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = probs_or_logits
        .row_iter()
        .zip(labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown schedule '{s}'"))),
        }
    }
}

/// SGD hyperparameters plus the per-parameter velocity buffers.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    velocity: Option<GradientSet>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, schedule: Schedule) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0,1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight decay {weight_decay}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            schedule,
            velocity: None,
        })
    }

    /// Learning rate at `epoch_frac ∈ [0, 1]` of training.
    pub fn lr_at(&self, epoch_frac: f64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let f = epoch_frac.clamp(0.0, 1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
            }
        }
    }
}

/// One Nesterov-momentum SGD update with L2 weight decay folded into the
/// gradient: `g ← ∇ + wd·θ; v ← μv + g; θ ← θ − lr·(g + μv)`.
pub fn sgd_step(net: &mut Network, grads: &GradientSet, opt: &mut OptimState, epoch_frac: f64) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return shape_err("gradient set does not match network");
    }
    let lr = opt.lr_at(epoch_frac);
    let mu = opt.momentum;
    let wd = opt.weight_decay;
    let velocity = opt.velocity.get_or_insert_with(|| GradientSet::zeros_like(net));
    for ((layer, g), v) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
        if layer.weights.shape() != g.weights.shape() || layer.bias.shape() != g.bias.shape() {
            return shape_err("gradient shape does not match layer");
        }
        update_block(
            layer.weights.data_mut(),
            g.weights.data(),
            v.weights.data_mut(),
            lr,
            mu,
            wd,
        );
        update_block(layer.bias.data_mut(), g.bias.data(), v.bias.data_mut(), lr, mu, wd);
    }
    Ok(())
}

#[inline]
fn update_block(theta: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
        let g = if wd != 0.0 { g + wd * *t } else { g };
        if mu != 0.0 {
            *v = mu * *v + g;
            *t -= lr * (g + mu * *v);
        } else {
            *t -= lr * g;
        }
    }
}
