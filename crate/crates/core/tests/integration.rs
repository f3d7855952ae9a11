use iforge_core::attacks::{self, AttackConfig, Norm, QuadraticLoss, Steps};
use iforge_core::data::{gen_dataset, DatasetSpec, Generator};
use iforge_core::densela::{self, norm2, norm_inf, Matrix, SymMatrix};
use iforge_core::gametheory::{self, CoalitionGame, Model, UnitPartition, ValueKind};
use iforge_core::netcore::{self, linearize, Arch, LossKind, ReluNet};
use iforge_core::seed::derive;
use iforge_core::theoremlab::{self, CheckId, CheckSpec, CorrelationConfig};
use iforge_core::Error;
use proptest::prelude::*;

fn psd(seed: u64, n: usize, scale: f64) -> SymMatrix {
    let mut r = iforge_core::seed::rng(seed);
    let a = Matrix::from_fn(n, n, |_, _| rand::Rng::random_range(&mut r, -1.0..1.0));
    let g = SymMatrix::gram(&a);
    let top = g.max_abs().max(1e-12);
    SymMatrix::from_fn(n, |i, j| scale * g.get(i, j) / top)
}

fn trained(
    arch: Arch,
    dims: &[usize],
    data: &iforge_core::data::SyntheticDataset,
    epochs: usize,
    seed: u64,
) -> ReluNet {
    let mut net = ReluNet::random(arch, dims, seed).unwrap();
    netcore::train_sgd(&mut net, &data.inputs, &data.labels, 0.05, epochs, derive(seed, 1), &mut |_, x, _| {
        Ok(vec![0.0; x.len()])
    })
    .unwrap();
    net
}

#[test]
fn multi_step_on_quadratic_matches_closed_form() {
    let n = 6;
    let h = psd(11, n, 0.8);
    let g: Vec<f64> = (0..n).map(|i| (i as f64 - 2.5) / 3.0).collect();
    let obj = QuadraticLoss::new(g.clone(), h.clone()).unwrap();
    let cfg = AttackConfig::from_beta(1.5, 40);
    let sim = attacks::multi_step(&obj, &cfg).unwrap();
    let eig = densela::spectral(&h, &g).unwrap();
    let cf = attacks::closed_form_perturbation(&eig, &cfg, Steps::Finite(40)).unwrap();
    let err = norm2(&densela::sub(&sim.delta, &cf.delta)) / norm2(&cf.delta);
    assert!(err < 1e-10, "relative error {err}");
    // more steps at the same beta approach the infinite-step form
    let fine = attacks::multi_step(&obj, &AttackConfig::from_beta(1.5, 10_000)).unwrap();
    let inf = attacks::closed_form_perturbation(&eig, &cfg, Steps::Infinite).unwrap();
    assert!(norm2(&densela::sub(&fine.delta, &inf.delta)) / norm2(&inf.delta) < 1e-3);
}

#[test]
fn rings_need_a_hidden_layer() {
    let spec = |seed| DatasetSpec { generator: Generator::Ring { classes: 2, noise: 0.1 }, samples: 200, seed };
    let train = gen_dataset(&spec(1)).unwrap();
    let test = gen_dataset(&spec(2)).unwrap();
    let linear = trained(Arch::Plain, &[2, 2], &train, 60, 3);
    let mlp = trained(Arch::Plain, &[2, 32, 2], &train, 60, 3);
    let acc_lin = netcore::accuracy(&linear, &test.inputs, &test.labels).unwrap();
    let acc_mlp = netcore::accuracy(&mlp, &test.inputs, &test.labels).unwrap();
    assert!(acc_lin < 1.0, "linear accuracy {acc_lin}");
    assert!(acc_mlp > acc_lin, "mlp {acc_mlp} vs linear {acc_lin}");
}

#[test]
fn datasets_are_seeded() {
    let spec = DatasetSpec {
        generator: Generator::GridTexture { classes: 3, height: 5, width: 7, noise: 0.2 },
        samples: 30,
        seed: 9,
    };
    let a = gen_dataset(&spec).unwrap();
    assert_eq!(a, gen_dataset(&spec).unwrap());
    assert_eq!(a.shape, Some((5, 7)));
    assert_ne!(a.inputs, gen_dataset(&DatasetSpec { seed: 10, ..spec }).unwrap().inputs);
}

fn blobs(seed: u64, samples: usize) -> iforge_core::data::SyntheticDataset {
    gen_dataset(&DatasetSpec {
        generator: Generator::GaussianBlobs { classes: 3, dim: 4, spread: 2.0, noise: 1.0 },
        samples,
        seed,
    })
    .unwrap()
}

#[test]
fn self_transfer_raises_the_loss() {
    let data = blobs(5, 90);
    let net = trained(Arch::Plain, &[4, 8, 3], &data, 20, 6);
    let cfg = CorrelationConfig { cs: vec![0.0, 0.1], ps: vec![2.0], max_steps: 300, ..CorrelationConfig::default() };
    let res = theoremlab::correlation_experiment(&net, &net, &data.inputs[..8], &data.labels[..8], &cfg, 1).unwrap();
    assert_eq!(res.cells.len(), 2);
    for c in &res.cells {
        assert!(c.transfer_utility > 0.0, "cell {c:?}");
        assert_eq!(c.samples, 8);
    }
}

#[test]
fn single_cell_correlation_is_degenerate() {
    let data = blobs(5, 60);
    let net = trained(Arch::Plain, &[4, 6, 3], &data, 10, 2);
    let cfg = CorrelationConfig { cs: vec![0.0], ps: vec![2.0], max_steps: 50, ..CorrelationConfig::default() };
    let res = theoremlab::correlation_experiment(&net, &net, &data.inputs[..4], &data.labels[..4], &cfg, 3).unwrap();
    assert!(res.degenerate);
    assert!(res.pearson_r.is_nan());
    let bad = CorrelationConfig { ps: vec![0.5], ..cfg };
    assert!(matches!(
        theoremlab::correlation_experiment(&net, &net, &data.inputs[..4], &data.labels[..4], &bad, 3),
        Err(Error::BadSpec(_))
    ));
}

#[test]
fn fast_sum_matches_exact_report_on_a_network() {
    let data = blobs(8, 40);
    let net = trained(Arch::Plain, &[4, 10, 3], &data, 10, 4);
    let (x, y) = (&data.inputs[0], data.labels[0]);
    let loss = LossKind::for_net(&net, y);
    let lin = linearize(&net, x).unwrap();
    let obj = attacks::FrozenLoss::new(&lin, x, loss).unwrap();
    let delta = attacks::multi_step(&obj, &AttackConfig::from_beta(0.5, 10)).unwrap().delta;
    for model in [Model::Net(&net), Model::Linear(&lin)] {
        let game =
            CoalitionGame::new(model, x.clone(), delta.clone(), UnitPartition::singletons(4), ValueKind::LossGap, loss)
                .unwrap();
        let exact = gametheory::interaction_report_exact(&game).unwrap();
        let fast = gametheory::sum_interactions_fast(&game);
        assert!((exact.off_diagonal_sum - fast.off_diagonal).abs() < 1e-12);
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(exact.get(a, b), exact.get(b, a));
            }
        }
    }
}

#[test]
fn check_ids_and_spec_validation() {
    for id in CheckId::ALL {
        let spec = CheckSpec::default_for(*id, 1);
        spec.validate().unwrap();
        assert_eq!(id.to_string().parse::<CheckId>().unwrap(), *id);
    }
    assert!(matches!("nope".parse::<CheckId>(), Err(Error::UnknownCheck(_))));
    let spec = CheckSpec { trials: 0, ..CheckSpec::default_for(CheckId::T1, 1) };
    assert!(spec.validate().is_err());
}

#[test]
fn checks_are_reproducible_and_order_independent() {
    let spec = CheckSpec { trials: 40, ..CheckSpec::default_for(CheckId::P1, 77) };
    let forward: Vec<_> = (0..40).map(|i| theoremlab::run_trial(&spec, i).unwrap()).collect();
    let mut backward: Vec<_> = (0..40).rev().map(|i| theoremlab::run_trial(&spec, i).unwrap()).collect();
    backward.reverse();
    assert_eq!(forward, backward);
    assert_eq!(theoremlab::reduce(&spec, forward), theoremlab::run_check(&spec).unwrap());
}

#[test]
fn balance_check_rejects_unbalanced_pairs() {
    // off-class vectors with p_y = 0.6
    let p = [0.2, 0.15, 0.05];
    let uniform = [0.4 / 3.0; 3];
    assert_eq!(theoremlab::balance_check(&uniform, &p, 0.6, 1.0, 1.0), Err(Error::NotBalancedPair));
    let (ip, iq) = theoremlab::balance_check(&p, &uniform, 0.6, 1.0, 1.0).unwrap();
    assert!(iq < ip);
    assert!(matches!(theoremlab::balance_check(&p, &uniform, 0.4, 1.0, 1.0), Err(Error::BadSpec(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projections_respect_the_budget(v in proptest::collection::vec(-3.0f64..3.0, 1..12), eps in 0.01f64..2.0) {
        let l2 = attacks::project_norm(&v, Norm::L2, eps);
        prop_assert!(norm2(&l2) <= eps * (1.0 + 1e-12));
        let li = attacks::project_norm(&v, Norm::Linf, eps);
        prop_assert!(norm_inf(&li) <= eps);
        prop_assert_eq!(attacks::project_norm(&v, Norm::Unconstrained, eps), v.clone());
        if norm2(&v) <= eps {
            prop_assert_eq!(l2, v);
        }
    }

    #[test]
    fn redistribution_matrices_are_valid(
        h in 2usize..6,
        w in 2usize..6,
        seed in any::<u64>(),
        eight in any::<bool>(),
    ) {
        let mut r = iforge_core::seed::rng(seed);
        let taus: Vec<f64> = (0..h * w).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
        let pi = attacks::PiRedistribution::new(h, w, taus, if eight { 8 } else { 4 }).unwrap();
        pi.validate().unwrap();
        for j in 0..h * w {
            let s: f64 = (0..h * w).map(|i| pi.a.get(i, j)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_interactions_follow_the_hessian(seed in any::<u64>(), n in 2usize..7) {
        let h = psd(seed, n, 1.0);
        let mut r = iforge_core::seed::rng(seed ^ 1);
        let g: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let game = gametheory::QuadraticGame::new(g, h.clone(), d.clone(), UnitPartition::singletons(n)).unwrap();
        let rep = gametheory::interaction_report_exact(&game).unwrap();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    prop_assert!((rep.get(a, b) - d[a] * h.get(a, b) * d[b]).abs() < 1e-10);
                }
            }
        }
        prop_assert!((rep.sum_all - h.quad(&d)).abs() < 1e-9 * h.quad(&d).abs().max(1.0));
    }
}
