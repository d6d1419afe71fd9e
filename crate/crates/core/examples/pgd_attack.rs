//! PGD with each ascent objective against a briefly trained classifier.

use iat::attack::{attack_loss, pgd_attack, AttackConfig, LossKind};
use iat::data::two_moons;
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::{Classifier, NetworkSpec};

fn main() -> anyhow::Result<()> {
    let data = two_moons(1000, 0.1, 3)?;
    let out = train(
        &data,
        NetworkSpec::mlp(2, &[32, 32], 2),
        &TrainConfig::new(ObjectiveTag::Natural, 0.1, 10),
    )?;
    let model = &out.state;
    let (x, y) = data.batch(&(0..200).collect::<Vec<_>>());
    let clean = model.forward(&x, false)?.probabilities();

    for loss in [LossKind::CrossEntropy, LossKind::CwMargin, LossKind::Kl] {
        let cfg = AttackConfig::pgd_scaled(0.2, 20)
            .with_clamp(None)
            .with_loss(loss);
        let target = (loss == LossKind::Kl).then_some(&clean);
        let adv = pgd_attack(model, &x, &y, &cfg, 7)?;
        let before = attack_loss(model, &x, &y, loss, target)?;
        let after = attack_loss(model, &adv, &y, loss, target)?;
        let wrong = model
            .forward(&adv, false)?
            .predictions()
            .iter()
            .zip(&y)
            .filter(|(p, t)| p != t)
            .count();
        println!(
            "{:<3} summed loss {before:>9.3} -> {after:>9.3}  max |δ| {:.3}  misclassified {wrong}/200",
            loss.name(),
            adv.max_abs_diff(&x)?
        );
    }
    Ok(())
}
