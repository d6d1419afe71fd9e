//! SAT, TRADES and UIAT on the same data, seed and budget.

use iat::attack::AttackConfig;
use iat::data::two_moons;
use iat::eval::{natural_accuracy, robust_accuracy};
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::NetworkSpec;

fn main() -> anyhow::Result<()> {
    let train_set = two_moons(2000, 0.2, 11)?;
    let test_set = two_moons(1000, 0.2, 12)?;
    let eps = 0.15;
    let attack = AttackConfig::pgd_scaled(eps, 20).with_clamp(None);
    println!("{:<8} {:>8} {:>8}", "method", "natural", "PGD-20");
    for tag in [
        ObjectiveTag::Natural,
        ObjectiveTag::Sat,
        ObjectiveTag::Trades,
        ObjectiveTag::Uiat,
    ] {
        let mut cfg = TrainConfig::new(tag, eps, 20).with_seed(3);
        cfg.report_examples = 200;
        let state = train(&train_set, NetworkSpec::mlp(2, &[64, 64], 2), &cfg)?.state;
        println!(
            "{:<8} {:>8.4} {:>8.4}",
            tag.name(),
            natural_accuracy(&state, &test_set)?,
            robust_accuracy(&state, &test_set, &attack, 0)?
        );
    }
    Ok(())
}
