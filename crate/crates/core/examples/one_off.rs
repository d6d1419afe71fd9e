//! One-off UIAT: natural predictions are the targets until the generation
//! epoch, after which each example keeps the inverse prediction recorded
//! then. Momentum UIAT blends instead; both stores are shown.

use iat::data::two_moons;
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::NetworkSpec;

fn main() -> anyhow::Result<()> {
    let data = two_moons(600, 0.2, 10)?;
    for tag in [ObjectiveTag::UiatOneOff, ObjectiveTag::Uiat] {
        let cfg = TrainConfig::new(tag, 0.1, 10);
        println!(
            "{tag}: momentum from epoch {}, one-off targets at epoch {}",
            cfg.momentum_start(),
            cfg.oneoff_epoch()
        );
        let out = train(&data, NetworkSpec::mlp(2, &[32, 32], 2), &cfg)?;
        let store = out.store.expect("uiat keeps a store");
        for i in 0..4 {
            println!(
                "  example {i} (class {}): target {:?}",
                data.labels[i],
                store.get(i).unwrap_or(&[])
            );
        }
        let mut csv = Vec::new();
        store.write_csv(&mut csv)?;
        println!(
            "  store dump: {} rows",
            String::from_utf8(csv)?.lines().count() - 1
        );
    }
    Ok(())
}
