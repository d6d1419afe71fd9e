//! RS-FGSM training with and without the universal inverse term, and what
//! the extra term costs in forward and backward passes per batch.

use iat::attack::AttackConfig;
use iat::data::two_moons;
use iat::eval::{natural_accuracy, robust_accuracy};
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::NetworkSpec;

fn main() -> anyhow::Result<()> {
    let train_set = two_moons(2000, 0.15, 8)?;
    let test_set = two_moons(1000, 0.15, 9)?;
    let eps = 0.1;
    let attack = AttackConfig::pgd_scaled(eps, 20).with_clamp(None);
    for tag in [ObjectiveTag::SingleStep, ObjectiveTag::SingleStepUiat] {
        let mut cfg = TrainConfig::new(tag, eps, 20);
        cfg.report_examples = 200;
        let out = train(&train_set, NetworkSpec::mlp(2, &[64, 64], 2), &cfg)?;
        let (fwd, bwd) = out.report.passes_per_batch();
        println!(
            "{:<16} natural {:.4}  PGD-20 {:.4}  passes/batch fwd {fwd:.2} bwd {bwd:.2}",
            tag.name(),
            natural_accuracy(&out.state, &test_set)?,
            robust_accuracy(&out.state, &test_set, &attack, 0)?
        );
    }

    // N-FGSM: larger random start, no projection after the step.
    let mut cfg = TrainConfig::new(ObjectiveTag::SingleStepUiat, eps, 20);
    cfg.attack = AttackConfig::n_fgsm(eps);
    let out = train(&train_set, NetworkSpec::mlp(2, &[64, 64], 2), &cfg)?;
    println!(
        "n-fgsm + uiat     PGD-20 {:.4}",
        robust_accuracy(&out.state, &test_set, &attack, 0)?
    );
    Ok(())
}
