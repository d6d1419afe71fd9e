//! Train the small CNN on IDX files.
//!
//!     cargo run --release --example mnist_idx -- train-images train-labels test-images test-labels
//!
//! Without arguments a tiny synthetic IDX set (bars of two orientations) is
//! written to a temporary directory and used instead.

use std::path::PathBuf;

use iat::attack::AttackConfig;
use iat::data::{load_idx, write_idx, Dataset, Domain};
use iat::eval::{natural_accuracy, robust_accuracy};
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig};
use iat::{NetworkSpec, Tensor};

fn bars(n: usize, side: usize) -> anyhow::Result<Dataset> {
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let line = (i / 2) % side;
        for r in 0..side {
            for c in 0..side {
                let on = if label == 0 { r == line } else { c == line };
                data.push(if on {
                    1.0
                } else {
                    ((r * 7 + c * 3 + i) % 5) as f32 / 20.0
                });
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, 1, side, side], data)?;
    // Round to gray levels so the IDX round trip is exact.
    let images = images.map(|v| (v * 255.0).round() / 255.0);
    Ok(Dataset::new(images, labels, 2, Domain::Unit)?)
}

fn main() -> anyhow::Result<()> {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let _tmp;
    let paths = if let [a, b, c, d] = args.as_slice() {
        [a.clone(), b.clone(), c.clone(), d.clone()]
    } else {
        let dir = tempfile::tempdir()?;
        let p = |n: &str| dir.path().join(n);
        let paths = [
            p("train-images"),
            p("train-labels"),
            p("test-images"),
            p("test-labels"),
        ];
        write_idx(&bars(400, 8)?, &paths[0], &paths[1])?;
        write_idx(&bars(100, 8)?, &paths[2], &paths[3])?;
        _tmp = dir;
        paths
    };
    let train_set = load_idx(&paths[0], &paths[1])?;
    let test_set = load_idx(&paths[2], &paths[3])?;
    let [c, h, w] = [
        train_set.input_shape()[0],
        train_set.input_shape()[1],
        train_set.input_shape()[2],
    ];
    println!(
        "{} training images of {c}×{h}×{w}, {} classes",
        train_set.len(),
        train_set.classes
    );

    let eps = 8.0 / 255.0;
    let mut cfg = TrainConfig::new(ObjectiveTag::Uiat, eps, 3);
    cfg.batch_size = 32;
    cfg.peak_lr = 0.05;
    cfg.report_examples = 64;
    let spec = NetworkSpec::small_cnn([c, h, w], train_set.classes.max(test_set.classes));
    let out = train(&train_set, spec, &cfg)?;
    let attack = AttackConfig::pgd_scaled(eps, 10);
    println!("natural {:.3}", natural_accuracy(&out.state, &test_set)?);
    println!(
        "PGD-10  {:.3}",
        robust_accuracy(&out.state, &test_set, &attack, 0)?
    );
    Ok(())
}
