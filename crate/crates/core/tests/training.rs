use std::fs::File;
use std::io::{BufReader, BufWriter};

use vrl_core::data::{make_gaussian_blobs, make_two_moons, NormStats};
use vrl_core::nn::{Activation, Network};
use vrl_core::trainer::{evaluate, train, Strategy, TrainConfig};

fn small(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        alpha: strategy.needs_alpha().then_some(1.0),
        eta: strategy.is_regularized().then_some(1.0),
        epochs: 5,
        batch_size: 32,
        hidden: vec![16],
        seed: 3,
        ..TrainConfig::default()
    }
}

fn moons() -> (vrl_core::data::Dataset, vrl_core::data::Dataset) {
    let mut rng = vrl_core::RngState::new(11);
    let tr = make_two_moons(200, 0.1, &mut rng).unwrap();
    let va = make_two_moons(100, 0.1, &mut rng).unwrap();
    (tr, va)
}

#[test]
fn mixup_with_lambda_one_is_erm() {
    let (tr, va) = moons();
    let (erm, _) = train(&small(Strategy::Erm), &tr, &va).unwrap();
    let cfg = TrainConfig {
        forced_lambda: Some(1.0),
        ..small(Strategy::Mixup)
    };
    let (mix, _) = train(&cfg, &tr, &va).unwrap();
    assert_eq!(erm.params_flat(), mix.params_flat());
}

#[test]
fn regmixup_with_zero_eta_is_erm() {
    let (tr, va) = moons();
    let (erm, erm_rec) = train(&small(Strategy::Erm), &tr, &va).unwrap();
    let cfg = TrainConfig {
        eta: Some(0.0),
        ..small(Strategy::Regmixup)
    };
    let (reg, reg_rec) = train(&cfg, &tr, &va).unwrap();
    assert_eq!(erm.params_flat(), reg.params_flat());
    assert_eq!(erm_rec.epoch_losses, reg_rec.epoch_losses);
}

#[test]
fn training_is_reproducible_and_learns() {
    let (tr, va) = moons();
    let cfg = TrainConfig {
        epochs: 40,
        ..small(Strategy::Regmixup)
    };
    let (a, rec_a) = train(&cfg, &tr, &va).unwrap();
    let (b, rec_b) = train(&cfg, &tr, &va).unwrap();
    assert_eq!(a, b);
    assert_eq!(rec_a.to_json(), rec_b.to_json());
    assert!(rec_a.epoch_losses.last().unwrap() < &rec_a.epoch_losses[0]);
    assert!(rec_a.final_val_accuracy > 0.9, "accuracy {}", rec_a.final_val_accuracy);
}

#[test]
fn every_vector_strategy_trains_on_blobs() {
    let mut rng = vrl_core::RngState::new(5);
    let raw = make_gaussian_blobs(300, 3, 4.0, 0.7, 2, &mut rng).unwrap();
    let norm = NormStats::fit(&raw);
    let tr = norm.apply(&raw).unwrap();
    for s in [Strategy::Erm, Strategy::Mixup, Strategy::Regmixup] {
        let cfg = TrainConfig { epochs: 20, ..small(s) };
        let (net, _) = train(&cfg, &tr, &tr).unwrap();
        let (acc, _) = evaluate(&net, &tr).unwrap();
        assert!(acc > 0.95, "{s}: {acc}");
    }
}

#[test]
fn checkpoint_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut rng = vrl_core::RngState::new(1);
    let net = Network::mlp(3, &[7, 5], 4, Activation::Tanh, &mut rng).unwrap();
    net.save_checkpoint(BufWriter::new(File::create(&path).unwrap()))
        .unwrap();
    let back = Network::load_checkpoint(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(net.params_flat(), back.params_flat());
    assert_eq!(net.specs(), back.specs());
}

#[test]
fn cutmix_rejects_vector_data() {
    let (tr, va) = moons();
    assert!(train(&small(Strategy::Cutmix), &tr, &va).is_err());
}

#[test]
fn regmixup_raises_midpoint_entropy_on_moons() {
    use vrl_core::eval::entropy_profile_with;
    for seed in 0..2u64 {
        let mut rng = vrl_core::RngState::new(40 + seed);
        let tr = make_two_moons(500, 0.1, &mut rng).unwrap();
        let va = make_two_moons(500, 0.1, &mut rng).unwrap();
        let base = TrainConfig {
            epochs: 100,
            batch_size: 64,
            seed,
            ..TrainConfig::default()
        };
        let reg = TrainConfig {
            strategy: Strategy::Regmixup,
            alpha: Some(10.0),
            eta: Some(1.0),
            ..base.clone()
        };
        let mut mid = Vec::new();
        let mut acc = Vec::new();
        for cfg in [&base, &reg] {
            let (net, rec) = train(cfg, &tr, &va).unwrap();
            // 21 grid points put λ = 0.5 at index 10
            let prof = entropy_profile_with(&net, &va, 300, 21, 30, &mut vrl_core::RngState::new(seed)).unwrap();
            mid.push(prof.entropies.iter().map(|r| r[10]).sum::<f64>() / prof.entropies.len() as f64);
            acc.push(rec.final_val_accuracy);
        }
        assert!((acc[1] - acc[0]).abs() <= 0.02, "accuracy {acc:?}");
        assert!(mid[1] >= 2.0 * mid[0], "midpoint entropy {mid:?}");
    }
}
