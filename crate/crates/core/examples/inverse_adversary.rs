//! Instance-wise inverse adversaries raise the model's confidence in the
//! true class; adversaries at the same radius lower it.

use iat::attack::{pgd_attack, AttackConfig};
use iat::data::two_moons;
use iat::inverse::{instance_inverse, InverseConfig};
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::{Classifier, NetworkSpec, Tensor};

fn mean_true_prob(model: &impl Classifier, x: &Tensor, y: &[usize]) -> anyhow::Result<f32> {
    let p = model.forward(x, false)?.probabilities();
    Ok(y.iter().enumerate().map(|(i, &c)| p.row(i)[c]).sum::<f32>() / y.len() as f32)
}

fn main() -> anyhow::Result<()> {
    let data = two_moons(1000, 0.25, 4)?;
    let out = train(
        &data,
        NetworkSpec::mlp(2, &[32, 32], 2),
        &TrainConfig::new(ObjectiveTag::Sat, 0.1, 10),
    )?;
    let model = &out.state;
    let (x, y) = data.batch(&(0..300).collect::<Vec<_>>());

    println!("radius  p(y|x̌)   p(y|x)   p(y|x̂)");
    for radius in [0.02, 0.05, 0.1] {
        let inv_cfg = InverseConfig::scaled(radius)
            .with_clamp(None)
            .with_beta(0.0);
        let x_check = instance_inverse(model, &x, &y, None, &inv_cfg, 1)?;
        let x_hat = pgd_attack(
            model,
            &x,
            &y,
            &AttackConfig::pgd_scaled(radius, 10).with_clamp(None),
            1,
        )?;
        println!(
            "{radius:<6}  {:.4}   {:.4}   {:.4}",
            mean_true_prob(model, &x_check, &y)?,
            mean_true_prob(model, &x, &y)?,
            mean_true_prob(model, &x_hat, &y)?
        );
    }

    // With β > 0 the descent also pulls penultimate features toward x and away from x̂.
    let x_hat = pgd_attack(
        model,
        &x,
        &y,
        &AttackConfig::pgd_scaled(0.1, 10).with_clamp(None),
        2,
    )?;
    let cfg = InverseConfig::scaled(0.05).with_clamp(None);
    let x_check = instance_inverse(model, &x, &y, Some(&x_hat), &cfg, 2)?;
    println!(
        "β = 1, ε′ = 0.05: p(y|x̌) = {:.4}",
        mean_true_prob(model, &x_check, &y)?
    );
    Ok(())
}
