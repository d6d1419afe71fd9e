//! Accuracy over an ε grid that runs from inverse (negative) to adversarial
//! (positive) radii, split into low-loss and high-loss halves.

use iat::attack::AttackConfig;
use iat::data::two_moons;
use iat::eval::{
    accuracy_curve, curve_difference, parse_grid, write_curve_csv, write_difference_csv, CurveSpec,
};
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::NetworkSpec;

fn main() -> anyhow::Result<()> {
    let train_set = two_moons(1500, 0.2, 6)?;
    let test_set = two_moons(600, 0.2, 7)?;
    let spec = NetworkSpec::mlp(2, &[32, 32], 2);
    let natural = train(
        &train_set,
        spec.clone(),
        &TrainConfig::new(ObjectiveTag::Natural, 0.1, 15),
    )?
    .state;
    let sat = train(
        &train_set,
        spec,
        &TrainConfig::new(ObjectiveTag::Sat, 0.1, 15),
    )?
    .state;

    let grid = parse_grid("-0.1:0.2:0.05")?;
    let curve = CurveSpec::new(grid, AttackConfig::pgd_scaled(0.1, 10), 0).with_groups(true);
    let a = accuracy_curve(&sat, &test_set, &curve)?;
    let b = accuracy_curve(&natural, &test_set, &curve)?;

    let mut stdout = std::io::stdout().lock();
    println!("# SAT model");
    write_curve_csv(&mut stdout, &a)?;
    println!("# SAT minus natural");
    write_difference_csv(&mut stdout, &curve_difference(&a, &b)?)?;
    Ok(())
}
