//! Class-wise universal inverse perturbations: one offset per class,
//! learned from batches, that lowers the loss for most examples.

use iat::data::gaussian_blobs;
use iat::inverse::{inverse_loss_per_example, InverseConfig, UniversalBank};
use iat::objective::ObjectiveTag;
use iat::trainer::{epoch_order, train, TrainConfig};
use iat::NetworkSpec;

fn main() -> anyhow::Result<()> {
    let centers = vec![vec![0.0, 2.0], vec![1.7, -1.0], vec![-1.7, -1.0]];
    let data = gaussian_blobs(1500, &centers, 0.9, 5)?;
    let model = train(
        &data,
        NetworkSpec::mlp(2, &[32], 3),
        &TrainConfig::new(ObjectiveTag::Natural, 0.2, 8),
    )?
    .state;

    let eps = 0.15;
    let cfg = InverseConfig {
        universal_step_size: 0.01,
        ..InverseConfig::scaled(eps).with_clamp(None).with_beta(0.0)
    };
    let mut bank = UniversalBank::init(3, &[2], eps, 0)?;
    let (x, y) = (&data.inputs, &data.labels);
    let base = inverse_loss_per_example(&model, x, x, None, y, 0.0)?;

    for epoch in 1..=5 {
        for batch in epoch_order(data.len(), 0, epoch).chunks(64) {
            let (bx, by) = data.batch(batch);
            bank.update(&model, &bx, &by, None, &cfg)?;
        }
        let shifted = bank.apply(x, y, None)?;
        let moved = inverse_loss_per_example(&model, &shifted, x, None, y, 0.0)?;
        let better = moved.iter().zip(&base).filter(|(a, b)| a < b).count();
        println!(
            "epoch {epoch}: mean CE {:.4} -> {:.4}, lower for {:.1}% of examples",
            base.iter().sum::<f32>() / base.len() as f32,
            moved.iter().sum::<f32>() / moved.len() as f32,
            100.0 * better as f32 / base.len() as f32
        );
    }
    for c in 0..3 {
        println!("z_{c} = {:?}", bank.get(c).data());
    }
    Ok(())
}
