//! Typed view of an experiment config.

use std::path::{Path, PathBuf};

use vrl_core::data::{
    load_cifar_binary, load_csv, make_gaussian_blobs, make_ood_blob, make_two_moons, make_uniform_box, split,
    CorruptionKind, Dataset, NormStats,
};
use vrl_core::nn::{Activation, Schedule};
use vrl_core::trainer::{Strategy, TrainConfig};
use vrl_core::vicinal::LambdaMode;
use vrl_core::RngState;

use crate::config::Config;
use crate::error::CliError;

const KNOWN_KEYS: &[&str] = &[
    "name",
    "seeds",
    "seed_base",
    "data.kind",
    "data.n",
    "data.test_n",
    "data.noise",
    "data.classes",
    "data.separation",
    "data.dim",
    "data.seed",
    "data.train_path",
    "data.test_path",
    "data.max_per_class",
    "data.normalize",
    "data.val_fraction",
    "ood.kind",
    "ood.n",
    "ood.center",
    "ood.noise",
    "ood.half_width",
    "ood.path",
    "ood.mahalanobis_epsilon",
    "ood.laplace_sigma0",
    "train.strategies",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.schedule",
    "train.hidden",
    "train.activation",
    "train.lambda_mode",
    "train.cross_validate",
    "train.alpha",
    "train.eta",
    "eval.bins",
    "eval.corruptions",
    "eval.intensities",
    "heatmap.pairs",
    "heatmap.lambdas",
    "heatmap.entropy_bins",
    "fisher.epsilon",
];

fn known(key: &str) -> bool {
    if KNOWN_KEYS.contains(&key) {
        return true;
    }
    // per-strategy hyperparameters: train.<strategy>.alpha / .eta
    let parts: Vec<&str> = key.split('.').collect();
    parts.len() == 3
        && parts[0] == "train"
        && parts[1].parse::<Strategy>().is_ok()
        && matches!(parts[2], "alpha" | "eta")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    TwoMoons,
    Blobs,
    Csv,
    Cifar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodKind {
    None,
    Blob,
    Uniform,
    Csv,
    Cifar,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub config: Config,
    pub name: String,
    pub seeds: Vec<u64>,
    pub data_kind: DataKind,
    pub n: usize,
    pub test_n: usize,
    pub noise: f64,
    pub classes: usize,
    pub separation: f64,
    pub dim: usize,
    pub data_seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub max_per_class: usize,
    pub normalize: bool,
    pub val_fraction: f64,
    pub ood_kind: OodKind,
    pub ood_n: usize,
    pub ood_center: Vec<f64>,
    pub ood_noise: f64,
    pub ood_half_width: f64,
    pub ood_path: Option<PathBuf>,
    pub mahalanobis_epsilon: Option<f64>,
    pub laplace_sigma0: Option<f64>,
    pub strategies: Vec<Strategy>,
    pub train: TrainConfig,
    pub cross_validate: bool,
    pub bins: usize,
    pub corruptions: Vec<CorruptionKind>,
    pub intensities: Vec<u8>,
    pub heatmap_pairs: usize,
    pub heatmap_lambdas: usize,
    pub heatmap_entropy_bins: usize,
    pub fisher_epsilon: f64,
}

/// Train / validation / test splits plus an optional OOD set, all
/// normalised with statistics of the training split.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub ood: Option<Dataset>,
}

fn default_alpha(s: Strategy) -> f64 {
    match s {
        Strategy::Regmixup => 10.0,
        _ => 1.0,
    }
}

impl Manifest {
    pub fn load(path: &Path, seeds_override: Option<usize>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Config::parse(&text)?;
        if let Some(s) = seeds_override {
            config.set("seeds", s.to_string());
        }
        Self::from_config(config, path)
    }

    pub fn from_config(config: Config, path: &Path) -> Result<Self, CliError> {
        if let Some(bad) = config.keys().find(|k| !known(k)) {
            return Err(CliError::Schema(format!("unknown config key '{bad}'")));
        }
        let c = &config;
        let base_dir = path.parent().unwrap_or(Path::new("."));
        let resolve = |key: &str| c.raw(key).map(|p| base_dir.join(p));

        let seeds_n: usize = c.get_or("seeds", 5)?;
        if seeds_n == 0 {
            return Err(CliError::Usage("at least one seed is required".into()));
        }
        let seed_base: u64 = c.get_or("seed_base", 0)?;
        let data_kind = match c.raw("data.kind").unwrap_or("two_moons") {
            "two_moons" => DataKind::TwoMoons,
            "blobs" => DataKind::Blobs,
            "csv" => DataKind::Csv,
            "cifar" => DataKind::Cifar,
            other => return Err(CliError::Schema(format!("data.kind: unknown '{other}'"))),
        };
        let n: usize = c.get_or("data.n", 500)?;
        let default_noise = if data_kind == DataKind::Blobs { 0.7 } else { 0.1 };
        let noise: f64 = c.get_or("data.noise", default_noise)?;
        let dim: usize = c.get_or("data.dim", 2)?;
        let ood_kind = match c.raw("ood.kind").unwrap_or("none") {
            "none" => OodKind::None,
            "blob" => OodKind::Blob,
            "uniform" => OodKind::Uniform,
            "csv" => OodKind::Csv,
            "cifar" => OodKind::Cifar,
            other => return Err(CliError::Schema(format!("ood.kind: unknown '{other}'"))),
        };
        let test_n = c.get_or("data.test_n", n)?;

        let strategies: Vec<Strategy> = c
            .get_list("train.strategies")?
            .unwrap_or_else(|| vec![Strategy::Erm, Strategy::Mixup, Strategy::Regmixup]);
        let train = TrainConfig {
            epochs: c.get_or("train.epochs", 100)?,
            batch_size: c.get_or("train.batch_size", 128)?,
            learning_rate: c.get_or("train.lr", 0.1)?,
            momentum: c.get_or("train.momentum", 0.9)?,
            weight_decay: c.get_or("train.weight_decay", 5e-4)?,
            schedule: c.get_or("train.schedule", Schedule::Cosine)?,
            hidden: c.get_list("train.hidden")?.unwrap_or_else(|| vec![64, 64]),
            activation: c.get_or("train.activation", Activation::Relu)?,
            lambda_mode: c.get_or("train.lambda_mode", LambdaMode::PerBatch)?,
            ..TrainConfig::default()
        };
        let corruptions = c.get_list("eval.corruptions")?.unwrap_or_else(|| {
            CorruptionKind::ALL
                .into_iter()
                .filter(|&k| k != CorruptionKind::Rotation2d || dim >= 2)
                .collect()
        });
        let intensities: Vec<u8> = c.get_list("eval.intensities")?.unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
        if let Some(bad) = intensities.iter().find(|&&i| !(1..=5).contains(&i)) {
            return Err(CliError::Schema(format!("eval.intensities: {bad} outside 1..=5")));
        }

        let m = Manifest {
            name: c.raw("name").unwrap_or("experiment").to_string(),
            seeds: (0..seeds_n as u64).map(|i| seed_base + i).collect(),
            data_kind,
            n,
            test_n,
            noise,
            classes: c.get_or("data.classes", 3)?,
            separation: c.get_or("data.separation", 4.0)?,
            dim,
            data_seed: c.get_or("data.seed", 0)?,
            train_path: resolve("data.train_path"),
            test_path: resolve("data.test_path"),
            max_per_class: c.get_or("data.max_per_class", 0)?,
            normalize: c.get_or("data.normalize", true)?,
            val_fraction: c.get_or("data.val_fraction", 0.1)?,
            ood_kind,
            ood_n: c.get_or("ood.n", test_n)?,
            ood_center: c.get_list("ood.center")?.unwrap_or_default(),
            ood_noise: c.get_or("ood.noise", noise)?,
            ood_half_width: c.get_or("ood.half_width", 6.0)?,
            ood_path: resolve("ood.path"),
            mahalanobis_epsilon: c.get("ood.mahalanobis_epsilon")?,
            laplace_sigma0: c.get("ood.laplace_sigma0")?,
            strategies,
            train,
            cross_validate: c.get_or("train.cross_validate", false)?,
            bins: c.get_or("eval.bins", 15)?,
            corruptions,
            intensities,
            heatmap_pairs: c.get_or("heatmap.pairs", 1000)?,
            heatmap_lambdas: c.get_or("heatmap.lambdas", 20)?,
            heatmap_entropy_bins: c.get_or("heatmap.entropy_bins", 30)?,
            fisher_epsilon: c.get_or("fisher.epsilon", 1e-6)?,
            config,
        };
        for s in &m.strategies {
            m.train_config(*s, 0)?.validate()?;
        }
        if m.bins == 0 {
            return Err(CliError::Schema("eval.bins must be ≥ 1".into()));
        }
        Ok(m)
    }

    /// Training configuration for one strategy and seed.
    pub fn train_config(&self, strategy: Strategy, seed: u64) -> Result<TrainConfig, CliError> {
        // train.<strategy>.<p>, then train.<p>, then the built-in default
        let lookup = |p: &str, default: f64| -> Result<f64, CliError> {
            let own = format!("train.{}.{p}", strategy.as_str());
            let shared = format!("train.{p}");
            match self.config.raw(&own) {
                Some(_) => self.config.get_or(&own, default),
                None => self.config.get_or(&shared, default),
            }
        };
        let alpha = strategy
            .needs_alpha()
            .then(|| lookup("alpha", default_alpha(strategy)))
            .transpose()?;
        let eta = strategy.is_regularized().then(|| lookup("eta", 1.0)).transpose()?;
        Ok(TrainConfig {
            strategy,
            alpha,
            eta,
            seed,
            ..self.train.clone()
        })
    }

    /// Output directory for this manifest under `out`.
    pub fn run_dir(&self, out: &Path) -> PathBuf {
        out.join(self.config.content_hash())
    }

    fn required(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        p.clone()
            .ok_or_else(|| CliError::Schema(format!("{key} is required for this data kind")))
    }

    fn load_file(&self, path: &Path, cifar: bool, classes: Option<usize>) -> Result<Dataset, CliError> {
        if !path.exists() {
            return Err(CliError::Missing(path.display().to_string()));
        }
        Ok(if cifar {
            load_cifar_binary(path, self.max_per_class)?
        } else {
            load_csv(path, classes)?
        })
    }

    /// Builds every dataset the manifest describes. Deterministic in
    /// `data.seed`.
    pub fn datasets(&self) -> Result<Datasets, CliError> {
        let root = RngState::new(self.data_seed);
        let (full, test) = match self.data_kind {
            DataKind::TwoMoons => (
                make_two_moons(self.n, self.noise, &mut root.fork(1))?,
                make_two_moons(self.test_n, self.noise, &mut root.fork(2))?,
            ),
            DataKind::Blobs => (
                make_gaussian_blobs(
                    self.n,
                    self.classes,
                    self.separation,
                    self.noise,
                    self.dim,
                    &mut root.fork(1),
                )?,
                make_gaussian_blobs(
                    self.test_n,
                    self.classes,
                    self.separation,
                    self.noise,
                    self.dim,
                    &mut root.fork(2),
                )?,
            ),
            DataKind::Csv | DataKind::Cifar => {
                let cifar = self.data_kind == DataKind::Cifar;
                let tr = self.load_file(&self.required(&self.train_path, "data.train_path")?, cifar, None)?;
                let te = self.load_file(
                    &self.required(&self.test_path, "data.test_path")?,
                    cifar,
                    Some(tr.num_classes),
                )?;
                (tr, te)
            }
        };
        if test.dim() != full.dim() {
            return Err(CliError::Incompatible(format!(
                "train has {} features, test {}",
                full.dim(),
                test.dim()
            )));
        }
        let (train, val) = split(&full, 1.0 - self.val_fraction, true, &mut root.fork(4))?;
        let k = full.num_classes;
        let ood = match self.ood_kind {
            OodKind::None => None,
            OodKind::Blob => {
                let center = if self.ood_center.is_empty() {
                    vec![0.0; full.dim()]
                } else {
                    self.ood_center.clone()
                };
                if center.len() != full.dim() {
                    return Err(CliError::Incompatible(format!(
                        "ood.center has {} coordinates, data has {} features",
                        center.len(),
                        full.dim()
                    )));
                }
                Some(make_ood_blob(
                    self.ood_n,
                    &center,
                    self.ood_noise,
                    k,
                    &mut root.fork(3),
                )?)
            }
            OodKind::Uniform => Some(make_uniform_box(
                self.ood_n,
                full.dim(),
                self.ood_half_width,
                k,
                &mut root.fork(3),
            )?),
            OodKind::Csv | OodKind::Cifar => {
                let p = self.required(&self.ood_path, "ood.path")?;
                let mut ds = self.load_file(&p, self.ood_kind == OodKind::Cifar, None)?;
                ds.num_classes = k;
                ds.labels.iter_mut().for_each(|l| *l = 0);
                Some(ds)
            }
        };
        if let Some(o) = &ood {
            if o.dim() != full.dim() {
                return Err(CliError::Incompatible(format!(
                    "ood set has {} features, data has {}",
                    o.dim(),
                    full.dim()
                )));
            }
        }
        let norm = if !self.normalize {
            None
        } else if let Some(shape) = train.image {
            Some(NormStats::fit_channels(&train, shape)?)
        } else {
            Some(NormStats::fit(&train))
        };
        let apply = |ds: Dataset, name: &str| -> Result<Dataset, CliError> {
            let ds = ds.with_name(name);
            Ok(match &norm {
                Some(n) => n.apply(&ds)?,
                None => ds,
            })
        };
        Ok(Datasets {
            train: apply(train, "train")?,
            val: apply(val, "val")?,
            test: apply(test, "test")?,
            ood: ood.map(|o| apply(o, "ood")).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(text: &str) -> Result<Manifest, CliError> {
        Manifest::from_config(Config::parse(text).unwrap(), Path::new("x.cfg"))
    }

    #[test]
    fn defaults() {
        let m = manifest("").unwrap();
        assert_eq!(m.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.strategies, vec![Strategy::Erm, Strategy::Mixup, Strategy::Regmixup]);
        let r = m.train_config(Strategy::Regmixup, 3).unwrap();
        assert_eq!((r.alpha, r.eta, r.seed), (Some(10.0), Some(1.0), 3));
        assert_eq!(m.train_config(Strategy::Erm, 0).unwrap().alpha, None);
        assert_eq!(m.bins, 15);
        assert_eq!(m.heatmap_pairs, 1000);
    }

    #[test]
    fn per_strategy_overrides() {
        let m = manifest("train.mixup.alpha = 0.3\ntrain.regmixup.eta = 2").unwrap();
        assert_eq!(m.train_config(Strategy::Mixup, 0).unwrap().alpha, Some(0.3));
        assert_eq!(m.train_config(Strategy::Regmixup, 0).unwrap().eta, Some(2.0));
        let m = manifest("train.alpha = 0.4\ntrain.cutmix.alpha = 2").unwrap();
        assert_eq!(m.train_config(Strategy::Regmixup, 0).unwrap().alpha, Some(0.4));
        assert_eq!(m.train_config(Strategy::Cutmix, 0).unwrap().alpha, Some(2.0));
    }

    #[test]
    fn schema_violations() {
        assert!(matches!(manifest("data.colour = red"), Err(CliError::Schema(_))));
        assert!(matches!(manifest("train.sngp.alpha = 1"), Err(CliError::Schema(_))));
        assert!(matches!(manifest("seeds = 0"), Err(CliError::Usage(_))));
        assert!(manifest("train.mixup.alpha = -1").is_err());
        assert!(manifest("eval.intensities = 0,6").is_err());
    }

    #[test]
    fn datasets_are_deterministic_and_normalised() {
        let m = manifest("data.kind = blobs\ndata.n = 200\nood.kind = blob").unwrap();
        let a = m.datasets().unwrap();
        let b = m.datasets().unwrap();
        assert_eq!(a.train.x, b.train.x);
        assert_eq!(a.train.len() + a.val.len(), 200);
        let means = a.train.x.col_means();
        assert!(means.iter().all(|v| v.abs() < 1e-12));
        assert!(a.ood.is_some());
    }
}
