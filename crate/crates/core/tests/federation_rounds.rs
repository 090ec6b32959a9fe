use fedpick::analysis::accuracy;
use fedpick::autodiff::Tensor;
use fedpick::datasets::{gen_synthetic_domains, ClientData, Dataset, SyntheticConfig};
use fedpick::federation::{
    aggregate, build_clients, client_update, evaluate_on, make_partition, model_dims_for, run_training, stream_seed,
    Ablations, Algorithm, ClientState, RoundConfig, SharedSnapshot,
};
use fedpick::metrics::Split;
use fedpick::model::{argmax_rows, PfsmConfig, Role};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_benchmark(n_clients: usize, seed: u64) -> Vec<ClientData<f64>> {
    let cfg = SyntheticConfig {
        n_clients,
        input_dim: 8,
        num_classes: 3,
        samples_per_client: 120,
        nuisance_dims: 3,
        domain_magnitudes: vec![1.0; n_clients],
        ..SyntheticConfig::default()
    };
    gen_synthetic_domains(&cfg, seed).unwrap()
}

fn clients(alg: Algorithm, n: usize, cfg: &RoundConfig, seed: u64) -> Vec<ClientState<f64>> {
    let dims = model_dims_for(alg, 8, &[12, 10], 3, PfsmConfig::default());
    build_clients(small_benchmark(n, seed), &dims, cfg, seed).unwrap()
}

#[test]
fn aggregation_matches_weighted_mean_oracle() {
    let snaps: Vec<SharedSnapshot<f64>> = [1.0, 2.0, 3.0]
        .iter()
        .map(|&v| SharedSnapshot { tensors: vec![("w".into(), Tensor::vector(vec![v]))] })
        .collect();
    let sizes = [1usize, 2, 5];
    let uploads: Vec<(usize, &SharedSnapshot<f64>)> = sizes.iter().copied().zip(&snaps).collect();
    let got = aggregate(&uploads).unwrap().tensors[0].1.data()[0];
    let oracle = sizes.iter().zip([1.0, 2.0, 3.0]).map(|(m, p)| *m as f64 * p).sum::<f64>() / 8.0;
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 20.0 / 8.0).abs() < 1e-12);
}

#[test]
fn aggregation_rejects_incompatible_uploads() {
    let a = SharedSnapshot { tensors: vec![("w".into(), Tensor::vector(vec![1.0]))] };
    let b = SharedSnapshot { tensors: vec![("w".into(), Tensor::vector(vec![1.0, 2.0]))] };
    assert!(aggregate(&[(1, &a), (1, &b)]).is_err());
    assert!(aggregate::<f64>(&[]).is_err());
    assert!(aggregate(&[(0, &a)]).is_err());
}

#[test]
fn partitions_follow_the_algorithm() {
    use Role::*;
    let p = make_partition(Algorithm::FedPick, &Ablations::default()).unwrap();
    assert_eq!(p.shared.iter().copied().collect::<Vec<_>>(), vec![EncoderWeights, ClassifierG]);
    assert_eq!(p.local.iter().copied().collect::<Vec<_>>(), vec![EncoderBn, Pfsm]);
    let p = make_partition(Algorithm::FedPick, &Ablations { share_bn: true, share_pfsm: true, ..Default::default() })
        .unwrap();
    assert!(p.local.is_empty());
    assert!(make_partition(Algorithm::FedBn, &Ablations { soft_mask: true, ..Default::default() }).is_err());
    assert!(!make_partition(Algorithm::SingleSet, &Ablations::default()).unwrap().aggregates());
    assert!(make_partition(Algorithm::FedPer, &Ablations::default()).unwrap().local.contains(&ClassifierG));
}

#[test]
fn zero_learning_rate_is_a_fixed_point_of_trainable_parameters() {
    let cfg = RoundConfig { rounds: 2, lr: 0.0, algorithm: Algorithm::FedBn, ..RoundConfig::default() };
    let mut cs = clients(Algorithm::FedBn, 2, &cfg, 1);
    let partition = make_partition(cfg.algorithm, &cfg.ablations).unwrap();
    let broadcast = SharedSnapshot::extract(&cs[0].model, &partition);
    let before = cs[1].model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    client_update(&mut cs[1], Some(&broadcast), &partition, &cfg, &mut rng).unwrap();
    let after = cs[1].model.entries();
    let shared_names: Vec<&str> = broadcast.tensors.iter().map(|(n, _)| n.as_str()).collect();
    for (a, b) in after.iter().zip(before.entries()) {
        if !a.trainable {
            continue;
        }
        if shared_names.contains(&a.name.as_str()) {
            let sent = &broadcast.tensors.iter().find(|(n, _)| *n == a.name).unwrap().1;
            assert_eq!(a.tensor, sent, "{}", a.name);
        } else {
            assert_eq!(a.tensor, b.tensor, "{}", a.name);
        }
    }
}

#[test]
fn one_epoch_with_a_full_batch_is_one_step() {
    let cfg = RoundConfig { rounds: 1, batch_size: 1000, algorithm: Algorithm::FedPick, ..RoundConfig::default() };
    let mut cs = clients(Algorithm::FedPick, 1, &cfg, 2);
    let partition = make_partition(cfg.algorithm, &cfg.ablations).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let up = client_update(&mut cs[0], None, &partition, &cfg, &mut rng).unwrap();
    assert_eq!(up.steps, 1);
}

#[test]
fn local_training_reduces_the_loss() {
    let cfg = RoundConfig {
        rounds: 1,
        local_epochs: 30,
        batch_size: 16,
        lr: 0.05,
        algorithm: Algorithm::SingleSet,
        ..RoundConfig::default()
    };
    let mut cs = clients(Algorithm::SingleSet, 1, &cfg, 3);
    let partition = make_partition(cfg.algorithm, &cfg.ablations).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let up = client_update(&mut cs[0], None, &partition, &cfg, &mut rng).unwrap();
    let first = up.epoch_losses.first().unwrap().total;
    let last = up.epoch_losses.last().unwrap().total;
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn fedavg_on_identical_data_keeps_clients_identical() {
    let cfg = RoundConfig { rounds: 3, algorithm: Algorithm::FedAvg, batch_size: 32, ..RoundConfig::default() };
    let one = small_benchmark(1, 4).remove(0);
    let data =
        vec![one.clone(), ClientData { train: one.train.clone(), test: one.test.clone(), domain: one.domain.clone() }];
    let dims = model_dims_for(Algorithm::FedAvg, 8, &[12, 10], 3, PfsmConfig::default());
    let mut cs = build_clients(data, &dims, &cfg, 4).unwrap();
    run_training(&mut cs, &cfg, 4, 2).unwrap();
    // Different RNG streams shuffle differently, but aggregation leaves every tensor equal.
    assert_eq!(cs[0].model, cs[1].model);
}

#[test]
fn single_client_federation_runs() {
    let cfg = RoundConfig { rounds: 2, ..RoundConfig::default() };
    let mut cs = clients(Algorithm::FedPick, 1, &cfg, 5);
    let log = run_training(&mut cs, &cfg, 5, 1).unwrap();
    assert_eq!(log.series(0, Split::Test, "accuracy").len(), 2);
}

#[test]
fn metrics_have_one_row_per_round_client_and_metric() {
    let cfg = RoundConfig { rounds: 3, ..RoundConfig::default() };
    let mut cs = clients(Algorithm::FedPick, 3, &cfg, 6);
    let log = run_training(&mut cs, &cfg, 6, 2).unwrap();
    for metric in ["accuracy", "loss_total", "selection_ratio", "sparsity_pre_agg", "sparsity_post_agg"] {
        assert_eq!(log.select(Split::Test, metric).count(), 9, "{metric}");
    }
    assert_eq!(log.select(Split::Train, "loss_total").count(), 9);
    let text = log.to_csv();
    assert_eq!(fedpick::metrics::MetricsLog::from_csv(&text).unwrap().to_csv(), text);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let cfg = RoundConfig { rounds: 2, ..RoundConfig::default() };
    let mut a = clients(Algorithm::FedPick, 3, &cfg, 7);
    let mut b = clients(Algorithm::FedPick, 3, &cfg, 7);
    let la = run_training(&mut a, &cfg, 7, 1).unwrap();
    let lb = run_training(&mut b, &cfg, 7, 4).unwrap();
    assert_eq!(la.to_csv(), lb.to_csv());
}

#[test]
fn local_roles_stay_personal() {
    let cfg = RoundConfig { rounds: 2, ..RoundConfig::default() };
    let mut cs = clients(Algorithm::FedPick, 2, &cfg, 8);
    run_training(&mut cs, &cfg, 8, 2).unwrap();
    let (a, b) = (cs[0].model.entries(), cs[1].model.entries());
    for (x, y) in a.iter().zip(&b) {
        match x.role {
            Role::EncoderWeights | Role::ClassifierG => assert_eq!(x.tensor, y.tensor, "{}", x.name),
            Role::EncoderBn | Role::Pfsm => assert_ne!(x.tensor, y.tensor, "{}", x.name),
        }
    }
}

#[test]
fn stream_seeds_differ_across_clients_and_rounds() {
    let s = stream_seed(1, 0, 1);
    assert_ne!(s, stream_seed(1, 1, 1));
    assert_ne!(s, stream_seed(1, 0, 2));
    assert_ne!(s, stream_seed(2, 0, 1));
    assert_eq!(s, stream_seed(1, 0, 1));
}

#[test]
fn invalid_round_configs_are_rejected() {
    let mut cs = clients(Algorithm::FedPick, 1, &RoundConfig::default(), 9);
    for cfg in [
        RoundConfig { rounds: 0, ..RoundConfig::default() },
        RoundConfig { batch_size: 0, ..RoundConfig::default() },
        RoundConfig { momentum: 1.0, ..RoundConfig::default() },
        RoundConfig { lr: -0.1, ..RoundConfig::default() },
    ] {
        assert!(run_training(&mut cs, &cfg, 0, 1).is_err());
    }
    let fedavg = RoundConfig { algorithm: Algorithm::FedAvg, ..RoundConfig::default() };
    assert!(run_training(&mut cs, &fedavg, 0, 1).is_err());
}

#[test]
fn isolated_models_degrade_on_foreign_domains() {
    let cfg = RoundConfig { rounds: 15, algorithm: Algorithm::SingleSet, batch_size: 16, ..RoundConfig::default() };
    let data = gen_synthetic_domains::<f64>(
        &SyntheticConfig { n_clients: 2, domain_magnitudes: vec![1.5, 1.5], ..SyntheticConfig::default() },
        10,
    )
    .unwrap();
    let dims = model_dims_for(Algorithm::SingleSet, 20, &[32, 32], 10, PfsmConfig::default());
    let mut cs = build_clients(data, &dims, &cfg, 10).unwrap();
    run_training(&mut cs, &cfg, 10, 2).unwrap();
    let own_set = cs[0].test.clone();
    let own = evaluate_on(&mut cs[0].model, &own_set, &cfg).unwrap().accuracy;
    let foreign_set: Dataset<f64> = cs[1].test.clone();
    let probs = cs[0].model.predict_proba(&foreign_set.features, false).unwrap();
    let foreign = accuracy(&argmax_rows(&probs), &foreign_set.labels);
    assert!(own > foreign + 0.1, "own {own}, foreign {foreign}");
}
