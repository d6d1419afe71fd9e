//! Shared fixtures: affine-logit classifiers with f64 reference math.
#![allow(dead_code)]

use iat::model::ForwardNodes;
use iat::{Classifier, NodeId, Result, Tensor, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `logits = x·W + b` on flat inputs. Features are the input itself.
#[derive(Debug, Clone)]
pub struct Affine {
    pub shape: Vec<usize>,
    /// `[dim, classes]`, row-major.
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    pub fn random(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..dim * classes)
            .map(|_| rng.random_range(-3.0f32..3.0))
            .collect();
        let b = (0..classes)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        Self {
            shape: vec![dim],
            w: Tensor::new(vec![dim, classes], w).unwrap(),
            b: Tensor::new(vec![classes], b).unwrap(),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn logits64(&self, x: &[f32]) -> Vec<f64> {
        let c = self.classes();
        (0..c)
            .map(|k| {
                self.b.data()[k] as f64
                    + x.iter()
                        .enumerate()
                        .map(|(i, &v)| v as f64 * self.w.data()[i * c + k] as f64)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Cross-entropy in f64 via a shifted log-sum-exp.
    pub fn ce64(&self, x: &[f32], y: usize) -> f64 {
        let z = self.logits64(x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
    }
}

impl Classifier for Affine {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn bind(&self, trace: &mut Trace, trainable: bool) -> Result<Vec<NodeId>> {
        [&self.w, &self.b]
            .into_iter()
            .map(|p| {
                if trainable {
                    trace.leaf(p.clone())
                } else {
                    trace.constant(p.clone())
                }
            })
            .collect()
    }

    fn forward_bound(
        &self,
        trace: &mut Trace,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<ForwardNodes> {
        let z = trace.matmul(x, params[0])?;
        let logits = trace.add_bias(z, params[1])?;
        Ok(ForwardNodes {
            features: x,
            logits,
        })
    }
}

/// Every corner `x + s·ε` of the ℓ∞ box, computed in f32 like the library.
pub fn corners(x: &[f32], eps: f32) -> Vec<Vec<f32>> {
    (0..1usize << x.len())
        .map(|mask| {
            x.iter()
                .enumerate()
                .map(|(i, &v)| if mask >> i & 1 == 1 { v + eps } else { v - eps })
                .collect()
        })
        .collect()
}

pub fn random_point(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub const ORACLE_EPS: f32 = 0.25;

/// Worst-case CE over the box corners minus the CE that PGD-20 reaches.
/// Returns the gap and whether the adversary stayed inside the box.
pub fn pgd_corner_gap(seed: u64, classes: usize) -> (f64, bool) {
    use iat::attack::{pgd_attack, AttackConfig};
    let model = Affine::random(2, classes, seed);
    let x = random_point(2, seed);
    let y = seed as usize % classes;
    let cfg = AttackConfig::pgd(ORACLE_EPS, ORACLE_EPS / 4.0, 20).with_clamp(None);
    let input = Tensor::new(vec![1, 2], x.clone()).unwrap();
    let adv = pgd_attack(&model, &input, &[y], &cfg, seed).unwrap();
    let inside = adv
        .data()
        .iter()
        .zip(&x)
        .all(|(a, b)| (a - b).abs() <= ORACLE_EPS * (1.0 + 1e-6));
    let best = corners(&x, ORACLE_EPS)
        .iter()
        .map(|c| model.ce64(c, y))
        .fold(f64::NEG_INFINITY, f64::max);
    (best - model.ce64(adv.data(), y), inside)
}

/// One β = 0 inverse step with α′ = 2ε′ against the CE-minimising corner.
pub fn inverse_matches_corner(seed: u64, classes: usize) -> bool {
    use iat::inverse::{instance_inverse, InverseConfig};
    let model = Affine::random(2, classes, seed);
    let x = random_point(2, seed);
    let y = seed as usize % classes;
    let cfg = InverseConfig {
        epsilon: ORACLE_EPS,
        step_size: 2.0 * ORACLE_EPS,
        universal_step_size: ORACLE_EPS,
        steps: 1,
        beta: 0.0,
        clamp: None,
    };
    let input = Tensor::new(vec![1, 2], x.clone()).unwrap();
    let got = instance_inverse(&model, &input, &[y], None, &cfg, seed).unwrap();
    let best = corners(&x, ORACLE_EPS)
        .into_iter()
        .min_by(|a, b| model.ce64(a, y).total_cmp(&model.ce64(b, y)))
        .unwrap();
    got.data()
        .iter()
        .zip(&best)
        .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Updates a bank on a batch holding one example per class and replays
/// each class as a separate instance step from `x + z_c`. True when every
/// class agrees bit for bit.
pub fn bank_matches_instance_steps(seed: u64, classes: usize, beta: f32) -> bool {
    use iat::attack::{pgd_attack, AttackConfig};
    use iat::inverse::{inverse_step, Anchors, InverseConfig, UniversalBank};
    use iat::{NetworkSpec, NetworkState};
    let model = NetworkState::init(NetworkSpec::mlp(3, &[16, 8], classes), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..classes).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let data: Vec<f32> = (0..classes * 3)
        .map(|_| rng.random_range(0.0f32..1.0))
        .collect();
    let x = Tensor::new(vec![classes, 3], data).unwrap();
    let cfg = InverseConfig::scaled(0.1).with_beta(beta);
    let x_hat = pgd_attack(&model, &x, &labels, &AttackConfig::pgd(0.2, 0.05, 5), seed).unwrap();
    let anchors = Anchors::when_needed(&model, &x, Some(&x_hat), beta).unwrap();

    let before = UniversalBank::init(classes, &[3], cfg.epsilon, seed).unwrap();
    let mut bank = before.clone();
    bank.update(&model, &x, &labels, anchors.as_ref(), &cfg)
        .unwrap();

    (0..classes).all(|j| {
        let xj = x.select_rows(&[j]);
        let yj = labels[j];
        let aj = Anchors::when_needed(&model, &xj, Some(&x_hat.select_rows(&[j])), beta).unwrap();
        let delta = Tensor::stack(&[before.get(yj).clone()]).unwrap();
        let (next, _) = inverse_step(
            &model,
            &xj,
            &delta,
            &[yj],
            aj.as_ref(),
            beta,
            cfg.universal_step_size,
            cfg.epsilon,
            cfg.clamp,
        )
        .unwrap();
        next.data()
            .iter()
            .zip(bank.get(yj).data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

/// Largest `‖z_c‖∞ − ε′` seen after any bank update in a short UIAT run.
pub fn bank_norm_excess(seed: u64, epochs: usize) -> f32 {
    use iat::data::two_moons;
    use iat::objective::ObjectiveTag;
    use iat::trainer::{train_from, TrainConfig};
    use iat::{NetworkSpec, NetworkState};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = two_moons(
        200 + rng.random_range(0..200),
        rng.random_range(0.05f32..0.3),
        seed,
    )
    .unwrap();
    let eps = rng.random_range(0.02f32..0.3);
    let mut cfg = TrainConfig::new(ObjectiveTag::Uiat, eps, epochs).with_seed(seed);
    cfg.batch_size = rng.random_range(8..64);
    cfg.inverse.universal_step_size = rng.random_range(0.1f32..2.0) * cfg.inverse.epsilon;
    cfg.report_examples = 50;
    let limit = cfg.inverse.epsilon;
    let state = NetworkState::init(NetworkSpec::mlp(2, &[16, 16], 2), seed).unwrap();
    let mut worst = f32::NEG_INFINITY;
    train_from(&data, state, &cfg, |ev| {
        let bank = ev.bank.expect("uiat keeps a bank");
        worst = worst.max(bank.max_norm() - limit);
    })
    .unwrap();
    worst
}

/// Parameter bits after every update of a short two-moons run.
pub fn trajectory(
    tag: iat::objective::ObjectiveTag,
    lambda: f32,
    omega: f32,
    seed: u64,
) -> Vec<Vec<u32>> {
    use iat::data::two_moons;
    use iat::trainer::{train_from, TrainConfig};
    use iat::{NetworkSpec, NetworkState};
    let data = two_moons(256, 0.1, seed).unwrap();
    let mut cfg = TrainConfig::new(tag, 0.1, 4).with_seed(seed);
    cfg.objective.lambda = lambda;
    cfg.objective.omega = omega;
    cfg.batch_size = 32;
    cfg.report_examples = 32;
    let state = NetworkState::init(NetworkSpec::mlp(2, &[16, 16], 2), seed).unwrap();
    let mut steps = Vec::new();
    train_from(&data, state, &cfg, |ev| {
        steps.push(
            ev.state
                .params
                .iter()
                .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
                .collect(),
        );
    })
    .unwrap();
    steps
}

/// `max_k |‖p^(T+k) − c‖∞ − γ^k‖p^(T) − c‖∞|` over `k ≤ horizon`, with
/// the ideal decay computed in f64, and the matching f32 rounding budget.
pub fn momentum_decay_error(seed: u64, classes: usize, horizon: usize) -> (f64, f64) {
    use iat::momentum::{ProbStore, StoreMode};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_probs = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / s) as f32).collect::<Vec<f32>>()
    };
    let start = 3;
    let mut store = ProbStore::new(4, classes, StoreMode::Momentum { gamma: 0.9, start }).unwrap();
    for epoch in 1..start {
        let p = random_probs(&mut rng);
        store.momentum_target(2, &p, epoch).unwrap();
    }
    let c = random_probs(&mut rng);
    let dist = |p: &[f32]| {
        p.iter()
            .zip(&c)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    };
    let p_t = store.momentum_target(2, &c, start).unwrap();
    let d0 = dist(&p_t);
    let mut worst = 0.0f64;
    for k in 1..=horizon {
        let p = store.momentum_target(2, &c, start + k).unwrap();
        let ideal = 0.9f64.powi(k as i32) * d0;
        worst = worst.max((dist(&p) - ideal).abs());
    }
    // Each update rounds a product pair and a sum: a few ulps of 1.
    let budget = 4.0 * horizon as f64 * f32::EPSILON as f64;
    (worst, budget)
}

/// Runs the command line in process.
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = iat::cli::run(
        std::iter::once("iat").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

pub const SMALL_RUN: &str = "\
# two-moons smoke run
objective.kind = uiat
train.epochs = 3
train.batch_size = 64
data.train_size = 300
data.test_size = 200
model.hidden = 16,16
eval.steps = 5
train.checkpoint_every = 1
output.timing = false
output.dump_momentum = true
";

/// Trains the same configuration twice and compares every produced file.
/// Returns the files that differ (empty when deterministic).
pub fn determinism_diff(root: &std::path::Path) -> Vec<String> {
    let cfg = root.join("run.cfg");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    let mut manifests = Vec::new();
    for name in ["a", "b"] {
        let out = root.join(name);
        let (code, _, err) = cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        manifests.push(std::fs::read_to_string(out.join("manifest.txt")).unwrap());
    }
    let mut differ = Vec::new();
    if manifests[0] != manifests[1] {
        differ.push("manifest.txt".into());
    }
    for file in manifests[0].lines() {
        let a = std::fs::read(root.join("a").join(file)).unwrap();
        let b = std::fs::read(root.join("b").join(file));
        if b.ok().as_deref() != Some(a.as_slice()) {
            differ.push(file.to_string());
        }
    }
    differ
}
