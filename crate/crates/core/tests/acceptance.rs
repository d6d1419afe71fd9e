//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`. Every tolerance is pinned here.

mod common;

use std::time::{Duration, Instant};

use iat::attack::AttackConfig;
use iat::data::{two_moons, Dataset};
use iat::eval::{accuracy_curve, natural_accuracy, robust_accuracy, CurveSpec};
use iat::gradcheck::run_suite;
use iat::inverse::inverse_loss_per_example;
use iat::objective::ObjectiveTag;
use iat::trainer::{train, TrainConfig, TrainOutcome};
use iat::NetworkSpec;

const GRADIENT_REL_ERR: f64 = 1e-3;
const GRADIENT_SEEDS: u64 = 5;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_MODELS: u64 = 100;
const ATTACK_LOSS_TOL: f64 = 1e-5;
const ATTACK_BUDGET: Duration = Duration::from_secs(60);
const MOMENTUM_HORIZON: usize = 20;

const TOY_SEEDS: u64 = 3;
const TOY_TRAIN: usize = 2000;
const TOY_TEST: usize = 1000;
const TOY_NOISE: f32 = 0.1;
const TOY_EPS: f32 = 0.1;
const TOY_EPOCHS: usize = 40;
const TOY_BUDGET: Duration = Duration::from_secs(600);
/// Frozen from the reference run (3 seeds, noise 0.1): natural 0.9993/0.9817,
/// SAT 0.9987/0.9833, UIAT 0.9987/0.9847, one-off 0.9987/0.9840.
const UIAT_OVER_NATURAL_ROBUST: f32 = 0.15;
const UIAT_VS_SAT_SLACK: f32 = 0.02;
const ONEOFF_PARITY: f32 = 0.03;
const SINGLE_STEP_ROBUST_SLACK: f32 = 0.01;
const UIAT_EXTRA_FORWARD: f64 = 2.0;
const UIAT_EXTRA_BACKWARD: f64 = 1.0;
const MAJORITY: f64 = 0.5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_oracle() -> Verdict {
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..GRADIENT_SEEDS).collect();
    let report = run_suite(&seeds, None).expect("suite runs");
    let elapsed = t0.elapsed();
    let worst = report
        .entries
        .iter()
        .map(|(_, c)| c.worst)
        .fold(0.0, f64::max);
    let failing: Vec<&str> = report
        .entries
        .iter()
        .filter(|(_, c)| c.worst.is_nan() || c.worst >= GRADIENT_REL_ERR || c.checked == 0)
        .map(|(n, _)| n.as_str())
        .collect();
    verdict(
        failing.is_empty() && elapsed < GRADIENT_BUDGET,
        format!(
            "{} checks, worst rel err {worst:.2e} (< {GRADIENT_REL_ERR:e}), failing {failing:?}, {:.1}s",
            report.entries.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn attack_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut escaped = 0;
    for seed in 0..ORACLE_MODELS {
        let (gap, inside) = common::pgd_corner_gap(seed, 2);
        worst = worst.max(gap.abs());
        escaped += usize::from(!inside);
    }
    let elapsed = t0.elapsed();
    verdict(
        worst <= ATTACK_LOSS_TOL && escaped == 0 && elapsed < ATTACK_BUDGET,
        format!(
            "{ORACLE_MODELS} binary affine models, worst |corner − pgd| = {worst:.2e} (≤ {ATTACK_LOSS_TOL:e}), {escaped} left the box, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn inverse_oracle() -> Verdict {
    let misses = (0..ORACLE_MODELS)
        .filter(|&s| !common::inverse_matches_corner(s, 2))
        .count();
    verdict(
        misses == 0,
        format!("{misses} of {ORACLE_MODELS} single steps missed the CE-minimising corner"),
    )
}

fn universal_equivalence() -> Verdict {
    let mut mismatches = Vec::new();
    for seed in 0..10 {
        for classes in [2, 3, 5] {
            for beta in [0.0, 1.0] {
                if !common::bank_matches_instance_steps(seed, classes, beta) {
                    mismatches.push((seed, classes, beta));
                }
            }
        }
    }
    let excess = (0..3)
        .map(|s| common::bank_norm_excess(s, 10))
        .fold(f32::NEG_INFINITY, f32::max);
    verdict(
        mismatches.is_empty() && excess <= 0.0,
        format!("bit-exact mismatches {mismatches:?}; max ‖z‖∞ − ε′ over 3 × 10-epoch runs = {excess:.3e}"),
    )
}

fn momentum_exactness() -> Verdict {
    let mut worst_ratio = 0.0f64;
    for seed in 0..20 {
        for classes in [2, 3, 10] {
            let (err, budget) = common::momentum_decay_error(seed, classes, MOMENTUM_HORIZON);
            worst_ratio = worst_ratio.max(err / budget);
        }
    }
    verdict(
        worst_ratio <= 1.0,
        format!("worst deviation from 0.9^k decay is {worst_ratio:.3} of the f32 rounding budget"),
    )
}

fn objective_reductions() -> Verdict {
    let mut notes = Vec::new();
    for seed in [0, 7] {
        if common::trajectory(ObjectiveTag::Sat, 3.5, 6.0, seed)
            != common::trajectory(ObjectiveTag::Uiat, 0.0, 6.0, seed)
        {
            notes.push(format!("uiat λ=0 ≠ sat (seed {seed})"));
        }
        if common::trajectory(ObjectiveTag::Natural, 3.5, 6.0, seed)
            != common::trajectory(ObjectiveTag::Trades, 3.5, 0.0, seed)
        {
            notes.push(format!("trades ω=0 ≠ natural (seed {seed})"));
        }
    }
    let pass = notes.is_empty();
    verdict(
        pass,
        if pass {
            "every update bit-identical over 2 seeds".into()
        } else {
            notes.join("; ")
        },
    )
}

struct ToyRun {
    outcome: TrainOutcome,
    train: Dataset,
    test: Dataset,
    nat: f32,
    rob: f32,
}

fn eval_attack() -> AttackConfig {
    AttackConfig::pgd_scaled(TOY_EPS, 20).with_clamp(None)
}

fn toy_run(tag: ObjectiveTag, seed: u64) -> ToyRun {
    let train_set = two_moons(TOY_TRAIN, TOY_NOISE, 100 + seed).unwrap();
    let test = two_moons(TOY_TEST, TOY_NOISE, 200 + seed).unwrap();
    let mut cfg = TrainConfig::new(tag, TOY_EPS, TOY_EPOCHS).with_seed(seed);
    cfg.report_examples = 200;
    let outcome = train(&train_set, NetworkSpec::mlp(2, &[64, 64], 2), &cfg).unwrap();
    let nat = natural_accuracy(&outcome.state, &test).unwrap();
    let rob = robust_accuracy(&outcome.state, &test, &eval_attack(), 7).unwrap();
    ToyRun {
        outcome,
        train: train_set,
        test,
        nat,
        rob,
    }
}

struct Toy {
    natural: Vec<ToyRun>,
    sat: Vec<ToyRun>,
    uiat: Vec<ToyRun>,
    oneoff: Vec<ToyRun>,
    elapsed: Duration,
}

fn mean(runs: &[ToyRun], f: impl Fn(&ToyRun) -> f32) -> f32 {
    runs.iter().map(f).sum::<f32>() / runs.len() as f32
}

fn toy_models() -> Toy {
    let t0 = Instant::now();
    let runs = |tag| (0..TOY_SEEDS).map(|s| toy_run(tag, s)).collect::<Vec<_>>();
    Toy {
        natural: runs(ObjectiveTag::Natural),
        sat: runs(ObjectiveTag::Sat),
        uiat: runs(ObjectiveTag::Uiat),
        oneoff: runs(ObjectiveTag::UiatOneOff),
        elapsed: t0.elapsed(),
    }
}

fn method_ordering(toy: &Toy) -> Verdict {
    let (nat_n, nat_r) = (mean(&toy.natural, |r| r.nat), mean(&toy.natural, |r| r.rob));
    let (sat_n, sat_r) = (mean(&toy.sat, |r| r.nat), mean(&toy.sat, |r| r.rob));
    let (u_n, u_r) = (mean(&toy.uiat, |r| r.nat), mean(&toy.uiat, |r| r.rob));
    let o_r = mean(&toy.oneoff, |r| r.rob);
    let a = u_r >= nat_r + UIAT_OVER_NATURAL_ROBUST;
    let b = u_n >= sat_n - UIAT_VS_SAT_SLACK && u_r >= sat_r - UIAT_VS_SAT_SLACK;
    let c = (o_r - u_r).abs() <= ONEOFF_PARITY;
    let fast = toy.elapsed < TOY_BUDGET;
    let tag = |ok: bool| if ok { "pass" } else { "FAIL" };
    verdict(
        a && b && c && fast,
        format!(
            "(a) {}: uiat rob {u_r:.4} vs natural rob {nat_r:.4} + {UIAT_OVER_NATURAL_ROBUST}; \
             (b) {}: uiat nat/rob {u_n:.4}/{u_r:.4} vs sat {sat_n:.4}/{sat_r:.4} − {UIAT_VS_SAT_SLACK}; \
             (c) {}: one-off rob {o_r:.4} within {ONEOFF_PARITY}; natural nat {nat_n:.4}; {:.0}s",
            tag(a),
            tag(b),
            tag(c),
            toy.elapsed.as_secs_f64()
        ),
    )
}

fn group_and_inverse_trends(toy: &Toy) -> Verdict {
    let spec = CurveSpec::new(vec![-0.05, 0.0, TOY_EPS], eval_attack(), 11).with_groups(true);
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, runs) in [("natural", &toy.natural), ("sat", &toy.sat)] {
        for (seed, run) in runs.iter().enumerate() {
            let curve = accuracy_curve(&run.outcome.state, &run.test, &spec).unwrap();
            let (inv, zero, atk) = (&curve[0], &curve[1], &curve[2]);
            let inverse_ok = inv.accuracy >= zero.accuracy;
            pass &= inverse_ok;
            let mut note = format!(
                "{name}#{seed} acc(−0.05)={:.3} acc(0)={:.3}",
                inv.accuracy, zero.accuracy
            );
            if name == "sat" {
                let (top0, bot0) = zero.groups.unwrap();
                let (top1, bot1) = atk.groups.unwrap();
                let drops_ok = bot0 - bot1 > top0 - top1;
                pass &= drops_ok;
                note.push_str(&format!(
                    " drop top {:.3} bottom {:.3}",
                    top0 - top1,
                    bot0 - bot1
                ));
            }
            notes.push(note);
        }
    }
    verdict(pass, notes.join("; "))
}

/// The loss is read as `L_inv(·, y)` without the anchor term (β = 0). The
/// triplet part is smallest at `x` itself by the triangle inequality, so with
/// β = 1 any offset starts behind; that reading is reported but does not gate.
fn majority_property(toy: &Toy) -> Verdict {
    let mut plain = Vec::new();
    let mut anchored = Vec::new();
    for run in &toy.uiat {
        let model = &run.outcome.state;
        let bank = run.outcome.bank.as_ref().expect("uiat returns its bank");
        let (x, y) = (&run.train.inputs, &run.train.labels);
        let shifted = bank.apply(x, y, None).unwrap();
        let fraction = |x_hat: Option<&iat::Tensor>, beta: f32| {
            let at_bank = inverse_loss_per_example(model, &shifted, x, x_hat, y, beta).unwrap();
            let at_x = inverse_loss_per_example(model, x, x, x_hat, y, beta).unwrap();
            at_bank.iter().zip(&at_x).filter(|(a, b)| a < b).count() as f64 / y.len() as f64
        };
        plain.push(fraction(None, 0.0));
        let attack = AttackConfig::pgd_scaled(TOY_EPS, 10).with_clamp(None);
        let x_hat = iat::attack::pgd_attack(model, x, y, &attack, 3).unwrap();
        anchored.push(fraction(Some(&x_hat), 1.0));
    }
    verdict(
        plain.iter().all(|&f| f > MAJORITY),
        format!(
            "fraction with L_inv(x + z_y, y) < L_inv(x, y) per seed: {plain:.3?} (> {MAJORITY}); \
             with the β = 1 triplet term: {anchored:.3?}"
        ),
    )
}

fn single_step() -> Verdict {
    let rs: Vec<ToyRun> = (0..TOY_SEEDS)
        .map(|s| toy_run(ObjectiveTag::SingleStep, s))
        .collect();
    let su: Vec<ToyRun> = (0..TOY_SEEDS)
        .map(|s| toy_run(ObjectiveTag::SingleStepUiat, s))
        .collect();
    let (rs_n, rs_r) = (mean(&rs, |r| r.nat), mean(&rs, |r| r.rob));
    let (su_n, su_r) = (mean(&su, |r| r.nat), mean(&su, |r| r.rob));
    let per_batch = |runs: &[ToyRun]| {
        let (f, b) = runs
            .iter()
            .map(|r| r.outcome.report.passes_per_batch())
            .fold((0.0, 0.0), |(f, b), (x, y)| (f + x, b + y));
        (f / runs.len() as f64, b / runs.len() as f64)
    };
    let ((rf, rb), (uf, ub)) = (per_batch(&rs), per_batch(&su));
    let accuracy_ok = su_r >= rs_r - SINGLE_STEP_ROBUST_SLACK && su_n >= rs_n;
    let cost_ok = uf - rf <= UIAT_EXTRA_FORWARD && ub - rb <= UIAT_EXTRA_BACKWARD;
    verdict(
        accuracy_ok && cost_ok,
        format!(
            "rs-fgsm nat/rob {rs_n:.4}/{rs_r:.4}, +uiat {su_n:.4}/{su_r:.4}; \
             extra passes per batch forward {:.2} backward {:.2}",
            uf - rf,
            ub - rb
        ),
    )
}

fn determinism_and_io() -> Verdict {
    use iat::checkpoint::{decode, encode};
    use iat::{Error, NetworkState};
    let dir = tempfile::tempdir().unwrap();
    let differ = common::determinism_diff(dir.path());

    let state = NetworkState::init(NetworkSpec::mlp(2, &[8], 3), 5).unwrap();
    let bank = iat::inverse::UniversalBank::init(3, &[2], 0.05, 5).unwrap();
    let bytes = encode(&state, Some(&bank));
    let (back, back_bank) = decode(&bytes).unwrap();
    let ckpt_ok = encode(&back, back_bank.as_ref()) == bytes;

    let images = iat::Tensor::new(
        vec![3, 1, 2, 2],
        (0..12).map(|i| (i * 20) as f32 / 255.0).collect(),
    )
    .unwrap();
    let idx = iat::data::encode_idx_images(&images).unwrap();
    let idx_ok = iat::data::parse_idx_images(&idx).unwrap().bit_eq(&images);

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let errors_ok = matches!(decode(&bad_magic), Err(Error::BadMagic { .. }))
        && matches!(decode(&bytes[..bytes.len() / 2]), Err(Error::Truncated(_)))
        && matches!(
            iat::data::parse_idx_images(&idx[..idx.len() - 1]),
            Err(Error::Truncated(_))
        );
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let (code, _, _) = common::cli(&["eval", "--checkpoint", junk.to_str().unwrap()]);

    verdict(
        differ.is_empty() && ckpt_ok && idx_ok && errors_ok && code == 2,
        format!(
            "differing artifacts {differ:?}; checkpoint round trip {ckpt_ok}; idx round trip {idx_ok}; \
             error kinds {errors_ok}; bad checkpoint exit {code}"
        ),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut lines: Vec<(&str, Verdict)> = vec![
        ("1 gradient oracle", gradient_oracle()),
        ("2 attack oracle", attack_oracle()),
        ("3 inverse oracle", inverse_oracle()),
        ("4 universal-update equivalence", universal_equivalence()),
        ("5 momentum exactness", momentum_exactness()),
        ("6 objective reductions", objective_reductions()),
    ];
    let toy = toy_models();
    lines.push(("7 toy method ordering", method_ordering(&toy)));
    lines.push(("8 group and inverse trends", group_and_inverse_trends(&toy)));
    lines.push(("9 universal majority", majority_property(&toy)));
    lines.push(("10 single-step improvement", single_step()));
    lines.push(("11 determinism and i/o", determinism_and_io()));

    let mut failed = 0;
    for (name, v) in &lines {
        println!(
            "criterion {name}: {} | {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed, {:.0}s",
        lines.len() - failed,
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
