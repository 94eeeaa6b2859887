//! Subcommand implementations. Every command reads a manifest, writes new
//! files under the manifest's hash-keyed run directory and never touches
//! its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vrl_core::data::{corrupt, CorruptionSpec, Dataset};
use vrl_core::eval::{
    adaece, apply_temperature, auroc, barrier_statistic, calibration_bins, ece, entropy_profile_with, fisher_criterion,
    fit_temperature, heatmap_svg, read_metric_csv, reliability_svg, reported_measure, write_metric_csv, BinningSpec,
    MetricRow,
};
use vrl_core::nn::{accuracy, softmax, Network};
use vrl_core::trainer::{
    cross_validate, mixup_grid, regmixup_grid, train, CvMetric, ExperimentRecord, Strategy, TrainConfig,
    CUTMIX_ALPHA_GRID, MIXUP_CUTMIX_ALPHA_GRID, REGMIXUP_ETA_GRID,
};
use vrl_core::uncertainty::{
    default_mahalanobis_epsilon, ds_score, energy_score, entropy_score, fit_class_gaussians, fit_laplace_last_layer,
    mahalanobis_score, meanfield_predictive, mps_score, CovarianceMode, Measure, MEANFIELD_LAMBDA,
};
use vrl_core::RngState;

use crate::config::hash_hex;
use crate::error::CliError;
use crate::manifest::Manifest;
use crate::pool;

const CORRUPTION_STREAM: u64 = 100;
const HEATMAP_STREAM: u64 = 0x4845;

pub struct Ctx {
    pub out: PathBuf,
    pub workers: usize,
    pub records: Option<PathBuf>,
}

pub struct Model {
    pub label: String,
    pub record: ExperimentRecord,
    pub net: Network,
}

fn label(strategy: Strategy, seed: u64) -> String {
    format!("{strategy}-seed{seed}")
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(p, bytes).map_err(|e| CliError::io(p, e))
}

fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_metric_csv(rows, &mut buf)?;
    write_file(path, buf)
}

fn run_dir(m: &Manifest, ctx: &Ctx) -> Result<PathBuf, CliError> {
    let dir = m.run_dir(&ctx.out);
    create_dir(&dir)?;
    write_file(&dir.join("manifest.cfg"), m.config.normalized())?;
    Ok(dir)
}

fn cv_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let with = |strategy, alpha: f64, eta: Option<f64>| TrainConfig {
        strategy,
        alpha: Some(alpha),
        eta,
        ..base.clone()
    };
    let reg_grid = |strategy, alphas: &[f64]| {
        alphas
            .iter()
            .flat_map(|&a| REGMIXUP_ETA_GRID.iter().map(move |&e| (a, e)))
            .map(|(a, e)| with(strategy, a, Some(e)))
            .collect()
    };
    match base.strategy {
        Strategy::Erm => vec![base.clone()],
        Strategy::Mixup => mixup_grid(base),
        Strategy::Regmixup => regmixup_grid(base),
        Strategy::Cutmix => CUTMIX_ALPHA_GRID
            .iter()
            .map(|&a| with(Strategy::Cutmix, a, None))
            .collect(),
        Strategy::MixupPlusCutmix => MIXUP_CUTMIX_ALPHA_GRID
            .iter()
            .map(|&a| with(Strategy::MixupPlusCutmix, a, None))
            .collect(),
        Strategy::Regcutmix => reg_grid(Strategy::Regcutmix, &CUTMIX_ALPHA_GRID),
        Strategy::RegMixupPlusRegcutmix => reg_grid(Strategy::RegMixupPlusRegcutmix, &MIXUP_CUTMIX_ALPHA_GRID),
    }
}

/// Trains every (strategy, seed) pair and writes one record and checkpoint each.
pub fn cmd_train(m: &Manifest, ctx: &Ctx, timing: bool) -> Result<Vec<PathBuf>, CliError> {
    let dir = run_dir(m, ctx)?;
    let rec_dir = dir.join("records");
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&rec_dir)?;
    create_dir(&ckpt_dir)?;
    let data = m.datasets()?;
    let jobs: Vec<(Strategy, u64)> = m
        .strategies
        .iter()
        .flat_map(|&s| m.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    pool::run(&jobs, ctx.workers, |&(strategy, seed)| {
        let start = timing.then(Instant::now);
        let mut cfg = m.train_config(strategy, seed)?;
        if m.cross_validate {
            cfg = cross_validate(&cv_grid(&cfg), &data.train, CvMetric::Accuracy, m.data_seed)?.best;
        }
        let (net, mut rec) = train(&cfg, &data.train, &data.val)?;
        let name = label(strategy, seed);
        let ckpt_rel = format!("checkpoints/{name}.ckpt");
        let mut ckpt = Vec::new();
        net.save_checkpoint(&mut ckpt)?;
        write_file(&dir.join(&ckpt_rel), ckpt)?;
        rec.checkpoint = Some(ckpt_rel);
        rec.wall_clock_secs = start.map(|s| s.elapsed().as_secs_f64());
        let path = rec_dir.join(format!("{name}.json"));
        write_file(&path, rec.to_json())?;
        Ok(path)
    })
}

/// Loads every record (and its checkpoint) from the records directory.
pub fn load_models(m: &Manifest, ctx: &Ctx) -> Result<Vec<Model>, CliError> {
    let rec_dir = match &ctx.records {
        Some(p) => p.clone(),
        None => m.run_dir(&ctx.out).join("records"),
    };
    let base = rec_dir.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let entries = fs::read_dir(&rec_dir).map_err(|e| CliError::io(&rec_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let record =
                ExperimentRecord::from_json(&text).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?;
            let ckpt = record
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Schema(format!("{}: record has no checkpoint", p.display())))?;
            let ckpt_path = base.join(ckpt);
            let file = fs::File::open(&ckpt_path).map_err(|e| CliError::io(&ckpt_path, e))?;
            let net = Network::load_checkpoint(std::io::BufReader::new(file))
                .map_err(|e| CliError::Schema(format!("{}: {e}", ckpt_path.display())))?;
            Ok(Model {
                label: label(record.config.strategy, record.seed),
                record,
                net,
            })
        })
        .collect()
}

fn check_compat(model: &Model, ds: &Dataset) -> Result<(), CliError> {
    if model.net.input_dim() != ds.dim() || model.net.num_classes() != ds.num_classes {
        return Err(CliError::Incompatible(format!(
            "{} expects {} features / {} classes, dataset '{}' has {} / {}",
            model.label,
            model.net.input_dim(),
            model.net.num_classes(),
            ds.name,
            ds.dim(),
            ds.num_classes
        )));
    }
    Ok(())
}

fn row(model: &Model, dataset: &str, metric: &str, measure: &str, value: f64) -> MetricRow {
    MetricRow {
        model: model.label.clone(),
        dataset: dataset.to_string(),
        metric: metric.to_string(),
        measure: measure.to_string(),
        value,
        strategy: model.record.config.strategy.to_string(),
        seed: model.record.seed,
    }
}

/// Corrupted copies of the test set. One noise stream per corruption kind,
/// shared across intensities so that levels differ only in magnitude.
fn corrupted_sets(m: &Manifest, test: &Dataset) -> Result<Vec<(String, Dataset)>, CliError> {
    let root = RngState::new(m.data_seed);
    let mut out = Vec::new();
    for (k, &kind) in m.corruptions.iter().enumerate() {
        for &level in &m.intensities {
            let spec = CorruptionSpec::new(kind, level)?;
            let ds = corrupt(test, spec, &mut root.fork2(CORRUPTION_STREAM, k as u64))?;
            out.push((format!("{}@{level}", kind.as_str()), ds));
        }
    }
    Ok(out)
}

fn per_model<F>(models: &[Model], ctx: &Ctx, f: F) -> Result<Vec<MetricRow>, CliError>
where
    F: Fn(&Model) -> Result<Vec<MetricRow>, CliError> + Sync,
{
    Ok(pool::run(models, ctx.workers, f)?.into_iter().flatten().collect())
}

/// Accuracy and calibration on the clean and corrupted test sets.
pub fn cmd_eval(m: &Manifest, ctx: &Ctx) -> Result<PathBuf, CliError> {
    let models = load_models(m, ctx)?;
    let dir = run_dir(m, ctx)?;
    let data = m.datasets()?;
    let mut sets = vec![("test".to_string(), data.test.clone())];
    sets.extend(corrupted_sets(m, &data.test)?);
    let rows = per_model(&models, ctx, |model| {
        let mut rows = Vec::new();
        for (name, ds) in &sets {
            check_compat(model, ds)?;
            let probs = model.net.predict_proba(&ds.x)?;
            rows.push(row(model, name, "accuracy", "", accuracy(&probs, &ds.labels)));
            rows.push(row(model, name, "ece", "", ece(&probs, &ds.labels, m.bins)?));
            rows.push(row(
                model,
                name,
                "adaece",
                "",
                adaece(&probs, &ds.labels, m.bins.min(ds.len()))?,
            ));
        }
        Ok(rows)
    })?;
    let path = dir.join("eval.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}

/// AUROC of every uncertainty measure for test (negative) vs OOD (positive).
pub fn cmd_ood(m: &Manifest, ctx: &Ctx) -> Result<PathBuf, CliError> {
    let models = load_models(m, ctx)?;
    let dir = run_dir(m, ctx)?;
    let data = m.datasets()?;
    let ood = data
        .ood
        .as_ref()
        .ok_or_else(|| CliError::Usage("manifest has no ood set (set ood.kind)".into()))?;
    let rows = per_model(&models, ctx, |model| {
        check_compat(model, &data.test)?;
        check_compat(model, ood)?;
        let (li, lo) = (model.net.logits(&data.test.x)?, model.net.logits(&ood.x)?);
        let (pi, po) = (softmax(&li), softmax(&lo));
        let mut pairs = vec![
            (entropy_score(&pi), entropy_score(&po)),
            (ds_score(&li), ds_score(&lo)),
            (energy_score(&li), energy_score(&lo)),
            (mps_score(&pi), mps_score(&po)),
        ];
        let train_feat = model.net.features(&data.train.x)?;
        let eps = match m.mahalanobis_epsilon {
            Some(e) => e,
            None => default_mahalanobis_epsilon(&train_feat, &data.train.labels)?,
        };
        let g = fit_class_gaussians(&train_feat, &data.train.labels, eps)?;
        pairs.push((
            mahalanobis_score(&g, &model.net.features(&data.test.x)?)?,
            mahalanobis_score(&g, &model.net.features(&ood.x)?)?,
        ));
        let mut rows = Vec::new();
        for (a, b) in &pairs {
            rows.push(row(model, "ood", "auroc", a.measure.as_str(), auroc(a, b)?));
        }
        if let Some(s0) = m.laplace_sigma0 {
            let post = fit_laplace_last_layer(&model.net, &data.train, s0)?;
            let predictive = |x| -> Result<_, CliError> {
                let f = model.net.features(x)?;
                Ok(entropy_score(&meanfield_predictive(
                    &post,
                    &f,
                    CovarianceMode::Kfac,
                    MEANFIELD_LAMBDA,
                )?))
            };
            let v = auroc(&predictive(&data.test.x)?, &predictive(&ood.x)?)?;
            rows.push(row(model, "ood", "auroc_laplace", Measure::Entropy.as_str(), v));
        }
        Ok(rows)
    })?;
    let path = dir.join("ood.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}

/// Temperature fitted on the validation split; test metrics before and after.
pub fn cmd_calibrate(m: &Manifest, ctx: &Ctx) -> Result<PathBuf, CliError> {
    let models = load_models(m, ctx)?;
    let dir = run_dir(m, ctx)?;
    let diagram_dir = dir.join("calibrate");
    create_dir(&diagram_dir)?;
    let data = m.datasets()?;
    let spec = BinningSpec::equal_width(m.bins);
    let mass_bins = m.bins.min(data.test.len());
    let rows = per_model(&models, ctx, |model| {
        check_compat(model, &data.val)?;
        check_compat(model, &data.test)?;
        let t = fit_temperature(&model.net.logits(&data.val.x)?, &data.val.labels, spec)?;
        let logits = model.net.logits(&data.test.x)?;
        let (pre, post) = (softmax(&logits), apply_temperature(&logits, t));
        let y = &data.test.labels;
        let bins = calibration_bins(&post, y, spec)?;
        write_file(
            &diagram_dir.join(format!("{}.svg", model.label)),
            reliability_svg(&bins),
        )?;
        Ok(vec![
            row(model, "val", "temperature", "", t.value()),
            row(model, "test", "accuracy_pre", "", accuracy(&pre, y)),
            row(model, "test", "accuracy_post", "", accuracy(&post, y)),
            row(model, "test", "ece_pre", "", ece(&pre, y, m.bins)?),
            row(model, "test", "ece_post", "", ece(&post, y, m.bins)?),
            row(model, "test", "adaece_pre", "", adaece(&pre, y, mass_bins)?),
            row(model, "test", "adaece_post", "", adaece(&post, y, mass_bins)?),
        ])
    })?;
    let path = dir.join("calibrate.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}

/// Entropy-profile heatmaps over training pairs, plus the barrier statistic.
pub fn cmd_heatmap(
    m: &Manifest,
    ctx: &Ctx,
    strategy: Option<Strategy>,
    seed: Option<u64>,
) -> Result<PathBuf, CliError> {
    let models: Vec<Model> = load_models(m, ctx)?
        .into_iter()
        .filter(|md| strategy.is_none_or(|s| md.record.config.strategy == s))
        .filter(|md| seed.is_none_or(|s| md.record.seed == s))
        .collect();
    let dir = run_dir(m, ctx)?;
    let svg_dir = dir.join("heatmap");
    create_dir(&svg_dir)?;
    let data = m.datasets()?;
    let rows = per_model(&models, ctx, |model| {
        check_compat(model, &data.train)?;
        let mut rng = RngState::new(model.record.seed).fork(HEATMAP_STREAM);
        let profile = entropy_profile_with(
            &model.net,
            &data.train,
            m.heatmap_pairs,
            m.heatmap_lambdas,
            m.heatmap_entropy_bins,
            &mut rng,
        )?;
        write_file(&svg_dir.join(format!("{}.svg", model.label)), heatmap_svg(&profile))?;
        Ok(vec![row(
            model,
            "train",
            "barrier",
            "entropy",
            barrier_statistic(&profile)?,
        )])
    })?;
    let path = dir.join("heatmap.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}

/// Fisher criterion of penultimate features on clean and corrupted test sets.
pub fn cmd_fisher(m: &Manifest, ctx: &Ctx) -> Result<PathBuf, CliError> {
    let models = load_models(m, ctx)?;
    let dir = run_dir(m, ctx)?;
    let data = m.datasets()?;
    let mut sets = vec![("test".to_string(), data.test.clone())];
    sets.extend(corrupted_sets(m, &data.test)?);
    let rows = per_model(&models, ctx, |model| {
        let mut rows = Vec::new();
        for (name, ds) in &sets {
            check_compat(model, ds)?;
            let f = model.net.features(&ds.x)?;
            rows.push(row(
                model,
                name,
                "fisher",
                "",
                fisher_criterion(&f, &ds.labels, m.fisher_epsilon)?,
            ));
        }
        Ok(rows)
    })?;
    let path = dir.join("fisher.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}

const RESULT_FILES: [&str; 5] = ["eval.csv", "ood.csv", "calibrate.csv", "fisher.csv", "heatmap.csv"];

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-mean ± seed-stddev table across one or more manifests. AUROC rows
/// keep only the reported measure for each strategy.
pub fn cmd_compare(manifests: &[Manifest], ctx: &Ctx) -> Result<PathBuf, CliError> {
    type Key = (String, String, String, String, String);
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for m in manifests {
        let dir = m.run_dir(&ctx.out);
        let mut found = false;
        for f in RESULT_FILES {
            let p = dir.join(f);
            if !p.exists() {
                continue;
            }
            found = true;
            let file = fs::File::open(&p).map_err(|e| CliError::io(&p, e))?;
            let rows = read_metric_csv(file).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?;
            for r in rows {
                groups
                    .entry((m.name.clone(), r.strategy, r.dataset, r.metric, r.measure))
                    .or_default()
                    .push(r.value);
            }
        }
        if !found {
            return Err(CliError::Missing(format!(
                "no result tables under {} (run train and eval/ood first)",
                dir.display()
            )));
        }
    }
    let seed_mean = |k: &Key, measure: Measure| {
        let key = (
            k.0.clone(),
            k.1.clone(),
            k.2.clone(),
            k.3.clone(),
            measure.as_str().to_string(),
        );
        groups.get(&key).map(|v| mean_std(v).0)
    };
    let mut out = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    out.write_record([
        "experiment",
        "strategy",
        "dataset",
        "metric",
        "measure",
        "mean",
        "std",
        "n_seeds",
    ])
    .map_err(csv_err)?;
    for (k, v) in &groups {
        if k.3 == "auroc" {
            let reported = match (seed_mean(k, Measure::Ds), seed_mean(k, Measure::Entropy)) {
                (Some(ds), Some(ent)) => reported_measure(ds, ent),
                _ => Measure::Ds,
            };
            if k.4 != reported.as_str() {
                continue;
            }
        }
        let (mean, std) = mean_std(v);
        out.write_record([
            k.0.as_str(),
            &k.1,
            &k.2,
            &k.3,
            &k.4,
            &mean.to_string(),
            &std.to_string(),
            &v.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = out.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut hashes: Vec<String> = manifests.iter().map(|m| m.config.content_hash()).collect();
    hashes.sort();
    let dir = ctx
        .out
        .join(format!("compare-{}", hash_hex(hashes.join(",").as_bytes())));
    create_dir(&dir)?;
    let path = dir.join("compare.csv");
    write_file(&path, bytes)?;
    Ok(path)
}
