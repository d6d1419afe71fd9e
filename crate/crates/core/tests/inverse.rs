//! Inverse adversary behaviour beyond the corner oracle.

mod common;

use common::Affine;
use iat::inverse::{inverse_step, InverseConfig, UniversalBank};
use iat::{NetworkSpec, NetworkState, Tensor};

#[test]
fn tiny_steps_lower_the_loss_monotonically() {
    for seed in 0..20 {
        let model = Affine::random(3, 4, seed);
        let x = Tensor::new(
            vec![2, 3],
            [
                common::random_point(3, seed),
                common::random_point(3, seed + 99),
            ]
            .concat(),
        )
        .unwrap();
        let y = [seed as usize % 4, (seed as usize + 1) % 4];
        let eps = 0.1;
        let step = 1e-3 * eps;
        let mut delta = Tensor::zeros(&[2, 3]);
        let mut last = f32::INFINITY;
        for _ in 0..6 {
            let (next, eval) =
                inverse_step(&model, &x, &delta, &y, None, 0.0, step, eps, None).unwrap();
            assert!(eval.loss <= last, "seed {seed}: {} > {last}", eval.loss);
            last = eval.loss;
            delta = next;
        }
    }
}

#[test]
fn duplicated_batches_step_the_same_way() {
    let model = NetworkState::init(NetworkSpec::mlp(2, &[16], 3), 9).unwrap();
    let x = Tensor::from_rows(&[
        vec![0.1, 0.7],
        vec![0.4, 0.2],
        vec![0.9, 0.5],
        vec![0.3, 0.3],
    ])
    .unwrap();
    let y = vec![0, 1, 2, 1];
    let cfg = InverseConfig::scaled(0.05).with_beta(0.0);
    let start = UniversalBank::init(3, &[2], 0.05, 1).unwrap();
    let mut once = start.clone();
    once.update(&model, &x, &y, None, &cfg).unwrap();
    for m in [2, 3] {
        let rows: Vec<usize> = (0..m).flat_map(|_| 0..4).collect();
        let labels: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
        let mut dup = start.clone();
        dup.update(&model, &x.select_rows(&rows), &labels, None, &cfg)
            .unwrap();
        assert_eq!(dup, once, "m = {m}");
    }
}
