use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mildrop::data::{synth_generate, SynthSpec};
use mildrop::diagnostics::{dataset_loss, full_dataset_gradient, hvp, hvp_step};
use mildrop::models::{build_forward, ModelConfig, ModelParams, PoolingKind};
use mildrop::parallel::Parallelism;
use mildrop::tensor::{finite_diff_grad, max_relative_error, Graph, Matrix};

fn toy(pooling: PoolingKind, seed: u64) -> (ModelParams, Vec<f64>) {
    let cfg = ModelConfig {
        input_dim: 3,
        hidden: vec![4, 3],
        attention_dim: 2,
        pooling,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
    let theta: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-0.7..0.7)).collect();
    p.set_flat(&theta).unwrap();
    (p, theta)
}

#[test]
fn bag_loss_gradient_matches_finite_differences() {
    for (i, pooling) in [PoolingKind::Abmil, PoolingKind::AbmilGated].into_iter().enumerate() {
        let (params, theta) = toy(pooling, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let bag = Matrix::new(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let fw = build_forward(&mut g, &bag, &params, None).unwrap();
        let loss = g.bce(fw.prob, 1.0).unwrap();
        g.backward(loss).unwrap();
        let analytic = fw.params.flat_grad(&g);
        let numeric = finite_diff_grad(
            |x| {
                let p = params.with_flat(x).unwrap();
                let mut g = Graph::new();
                let fw = build_forward(&mut g, &bag, &p, None).unwrap();
                let l = g.bce(fw.prob, 1.0).unwrap();
                g.value(l).data()[0]
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }
}

#[test]
fn dataset_gradient_matches_finite_differences() {
    let (params, theta) = toy(PoolingKind::Abmil, 7);
    let bags = synth_generate(&SynthSpec {
        n_bags: 6,
        min_instances: 2,
        max_instances: 6,
        dim: 3,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap()
    .dataset
    .bags;
    let analytic = full_dataset_gradient(&params, &bags).unwrap().gradient;
    let numeric = finite_diff_grad(
        |x| dataset_loss(&params.with_flat(x).unwrap(), &bags, Parallelism::Sequential).unwrap(),
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(max_relative_error(&analytic, &numeric) < 1e-6);
}

#[test]
fn hessian_vector_product_is_symmetric() {
    let (params, theta) = toy(PoolingKind::AbmilGated, 3);
    let bags = synth_generate(&SynthSpec {
        n_bags: 4,
        min_instances: 2,
        max_instances: 4,
        dim: 3,
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap()
    .dataset
    .bags;
    let grad = |x: &[f64]| Ok(full_dataset_gradient(&params.with_flat(x)?, &bags)?.gradient);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = hvp_step(&theta);
    let hu = hvp(&grad, &theta, &u, h).unwrap();
    let hv = hvp(&grad, &theta, &v, h).unwrap();
    let a: f64 = v.iter().zip(&hu).map(|(x, y)| x * y).sum();
    let b: f64 = u.iter().zip(&hv).map(|(x, y)| x * y).sum();
    assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0));
}
