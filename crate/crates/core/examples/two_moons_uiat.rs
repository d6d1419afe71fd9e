//! Train an MLP on two moons with UIAT, evaluate it, save and reload it.
//!
//!     cargo run --release --example two_moons_uiat -- [epochs] [seed]

use iat::attack::AttackConfig;
use iat::checkpoint;
use iat::data::two_moons;
use iat::eval::{natural_accuracy, robust_accuracy};
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::NetworkSpec;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let train_set = two_moons(2000, 0.1, 1)?;
    let test_set = two_moons(1000, 0.1, 2)?;
    let eps = 0.1;
    let cfg = TrainConfig::new(ObjectiveTag::Uiat, eps, epochs).with_seed(seed);
    let out = train(&train_set, NetworkSpec::mlp(2, &[64, 64], 2), &cfg)?;

    for r in &out.report.epochs {
        println!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  train nat {:.3}  rob {:.3}",
            r.epoch, r.lr, r.loss, r.train_nat_acc, r.train_rob_acc
        );
    }
    let attack = AttackConfig::pgd_scaled(eps, 20).with_clamp(None);
    println!(
        "test natural {:.4}",
        natural_accuracy(&out.state, &test_set)?
    );
    println!(
        "test PGD-20  {:.4}",
        robust_accuracy(&out.state, &test_set, &attack, 0)?
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("uiat.ckpt");
    checkpoint::save(&out.state, out.bank.as_ref(), &path)?;
    let (state, bank) = checkpoint::load(&path)?;
    assert_eq!(state, out.state);
    println!(
        "checkpoint reloaded; bank radius {} max |z| {:.4}",
        bank.as_ref().map_or(0.0, |b| b.epsilon()),
        bank.as_ref().map_or(0.0, |b| b.max_norm())
    );
    Ok(())
}
