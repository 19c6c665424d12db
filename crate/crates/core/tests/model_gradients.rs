use fedsim_core::basis::BasisSet;
use fedsim_core::csbm::{generate_csbm, CsbmParams};
use fedsim_core::graph::{Graph, Masks};
use fedsim_core::model::{
    evaluate, forward, loss, loss_and_gradients, train_local, LocalModel, TrainConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;

fn random_instance(seed: u64, n: usize, d: usize, c: usize) -> (Graph, LocalModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((u, v));
            }
        }
    }
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let train: Vec<usize> = (0..n).filter(|i| i % 3 != 2).collect();
    let test: Vec<usize> = (0..n).filter(|i| i % 3 == 2).collect();
    let masks = Masks::from_ids(n, &train, &[], &test).unwrap();
    let g = Graph::new(c, edges, x, labels, masks).unwrap();
    let mut model = LocalModel::init(2, d, c, rng.random_range(0.0..=1.0), 0.5, seed);
    model.coeffs = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    (g, model)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..20 {
        let (g, model) = random_instance(seed, 12, 5, 3);
        let b = BasisSet::build(&g, 2).unwrap();
        let mask = &g.masks().train;
        let grads = loss_and_gradients(&model, &b, g.labels(), mask).unwrap();
        let eval = |m: &LocalModel| loss(m, &b, g.labels(), mask).unwrap();

        for k in 0..model.coeffs.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.coeffs[k] += FD_STEP;
            minus.coeffs[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let err = relative_error(grads.coeffs[k], numeric);
            assert!(
                err <= 1e-4,
                "seed {seed} coeff {k}: {} vs {numeric}",
                grads.coeffs[k]
            );
        }
        for idx in 0..model.w_mlp.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.w_mlp[idx] += FD_STEP;
            minus.w_mlp[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let err = relative_error(grads.mlp[idx], numeric);
            assert!(
                err <= 1e-4,
                "seed {seed} mlp {idx}: {} vs {numeric}",
                grads.mlp[idx]
            );
        }
    }
}

#[test]
fn positive_rescaling_keeps_predictions() {
    let (g, model) = random_instance(5, 12, 5, 3);
    let b = BasisSet::build(&g, 2).unwrap();
    let (_, logits) = forward(&model, &b).unwrap();
    let beta = 2.5;
    let mut scaled = model.clone();
    scaled.coeffs.iter_mut().for_each(|w| *w *= beta);
    scaled.w_mlp *= beta;
    let (_, scaled_logits) = forward(&scaled, &b).unwrap();
    assert!((scaled_logits - &logits * (beta * beta)).abs().max() < 1e-10);
    let mask = &g.masks().test;
    let before = evaluate(&model, &b, g.labels(), mask).unwrap();
    let after = evaluate(&scaled, &b, g.labels(), mask).unwrap();
    assert_eq!(before.accuracy, after.accuracy);
}

#[test]
fn homophily_only_forward_is_linear_in_features() {
    let (g, mut model) = random_instance(8, 12, 5, 3);
    model.tau = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let x1 = DMatrix::from_fn(12, 5, |_, _| rng.random::<f64>());
    let x2 = DMatrix::from_fn(12, 5, |_, _| rng.random::<f64>());
    let logits = |x: DMatrix<f64>| {
        let b = BasisSet::build(&g.with_features(x).unwrap(), 2).unwrap();
        forward(&model, &b).unwrap().1
    };
    let sum = logits(&x1 + &x2);
    let parts = logits(x1) + logits(x2);
    assert!((sum - parts).abs().max() < 1e-10);
}

#[test]
fn loss_is_non_increasing_on_separable_data() {
    let g = generate_csbm(&CsbmParams {
        n: 120,
        c: 2,
        d: 4,
        p_in: 0.1,
        p_out: 0.01,
        mu: 4.0,
        sigma_f: 0.3,
        seed: 2,
    })
    .unwrap();
    let b = BasisSet::build(&g, 2).unwrap();
    let mut model = LocalModel::init(2, 4, 2, 0.5, 0.1, 2);
    let mask = &g.masks().train;
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let mut prev = loss(&model, &b, g.labels(), mask).unwrap();
    for _ in 0..20 {
        model = train_local(&model, &b, g.labels(), mask, &cfg).unwrap();
        let now = loss(&model, &b, g.labels(), mask).unwrap();
        assert!(now <= prev + 1e-9, "{now} > {prev}");
        prev = now;
    }
}

#[test]
fn zero_learning_rate_and_repeat_runs() {
    let (g, model) = random_instance(12, 12, 5, 3);
    let b = BasisSet::build(&g, 2).unwrap();
    let mask = &g.masks().train;
    let frozen = TrainConfig {
        epochs: 5,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(
        train_local(&model, &b, g.labels(), mask, &frozen).unwrap(),
        model
    );
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let a = train_local(&model, &b, g.labels(), mask, &cfg).unwrap();
    let again = train_local(&model, &b, g.labels(), mask, &cfg).unwrap();
    let bits = |m: &LocalModel| m.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&again));
}
