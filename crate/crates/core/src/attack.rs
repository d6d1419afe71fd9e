//! ℓ∞-bounded adversarial examples: multi-step PGD and the single-step
//! family (FGSM, RS-FGSM, N-FGSM).

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{softmax_rows, Classifier};
use crate::rng::{self, Stream};
use crate::tensor::{sign, Tensor};
use crate::trace::{Reduction, Trace};

/// Objective the attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// `max_{i≠y} z_i − z_y`.
    CwMargin,
    /// `KL(f(x) ‖ f(x + δ))` with the natural prediction held fixed; the
    /// TRADES inner maximization. Needs a random start, since the gradient
    /// vanishes at `δ = 0`.
    Kl,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::CwMargin => "cw",
            LossKind::Kl => "kl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ce" | "cross-entropy" => Some(LossKind::CrossEntropy),
            "cw" | "cw-margin" => Some(LossKind::CwMargin),
            "kl" => Some(LossKind::Kl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// ℓ∞ radius in input units.
    pub epsilon: f32,
    pub step_size: f32,
    pub steps: usize,
    pub rand_init: bool,
    /// Random start is uniform on `[−r, r]` with `r = init_radius_factor · ε`.
    pub init_radius_factor: f32,
    /// Single-step only: project `δ` back to radius `ε` after the step.
    pub project_after_step: bool,
    pub loss: LossKind,
    /// Valid input range, e.g. `[0, 1]` for images.
    pub clamp: Option<(f32, f32)>,
}

impl Default for AttackConfig {
    /// PGD-20, ε = 8/255, α = 2/255 on `[0, 1]` images.
    fn default() -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, 20)
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f32, step_size: f32, steps: usize) -> Self {
        Self {
            epsilon,
            step_size,
            steps,
            rand_init: true,
            init_radius_factor: 1.0,
            project_after_step: true,
            loss: LossKind::CrossEntropy,
            clamp: Some((0.0, 1.0)),
        }
    }

    /// PGD with `α = ε/4`, the 2/255-at-8/255 ratio.
    pub fn pgd_scaled(epsilon: f32, steps: usize) -> Self {
        Self::pgd(epsilon, epsilon / 4.0, steps)
    }

    /// Classic FGSM: no random start, one step of size ε.
    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            steps: 1,
            rand_init: false,
            init_radius_factor: 0.0,
            project_after_step: true,
            loss: LossKind::CrossEntropy,
            clamp: Some((0.0, 1.0)),
        }
    }

    /// RS-FGSM: uniform start on `[−ε, ε]`, step `1.25ε`, projected.
    pub fn rs_fgsm(epsilon: f32) -> Self {
        Self {
            step_size: 1.25 * epsilon,
            rand_init: true,
            init_radius_factor: 1.0,
            ..Self::fgsm(epsilon)
        }
    }

    /// N-FGSM: uniform start on `[−2ε, 2ε]`, step `ε`, not projected.
    pub fn n_fgsm(epsilon: f32) -> Self {
        Self {
            step_size: epsilon,
            rand_init: true,
            init_radius_factor: 2.0,
            project_after_step: false,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn with_clamp(mut self, clamp: Option<(f32, f32)>) -> Self {
        self.clamp = clamp;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_rand_init(mut self, rand_init: bool) -> Self {
        self.rand_init = rand_init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f32| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "attack {name} must be finite and ≥ 0, got {v}"
                )))
            }
        };
        finite_nonneg("epsilon", self.epsilon)?;
        finite_nonneg("step_size", self.step_size)?;
        finite_nonneg("init_radius_factor", self.init_radius_factor)?;
        if let Some((lo, hi)) = self.clamp {
            if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config(format!("empty clamp domain [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn init_radius(&self) -> f32 {
        if self.rand_init {
            self.init_radius_factor * self.epsilon
        } else {
            0.0
        }
    }
}

fn clamp_domain(v: f32, clamp: Option<(f32, f32)>) -> f32 {
    match clamp {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    }
}

/// Clamps `candidate` into `[reference − ε, reference + ε]` and then into
/// the input domain.
pub fn linf_project(
    candidate: &Tensor,
    reference: &Tensor,
    epsilon: f32,
    clamp: Option<(f32, f32)>,
) -> Result<Tensor> {
    candidate.zip_map(reference, |c, r| {
        clamp_domain(c.clamp(r - epsilon, r + epsilon), clamp)
    })
}

/// Uniform noise on `[−radius, radius]`, one draw per coordinate.
pub(crate) fn uniform_noise(like: &Tensor, radius: f32, rng: &mut rng::Rng) -> Tensor {
    if radius == 0.0 {
        return Tensor::zeros(like.shape());
    }
    let data = (0..like.len())
        .map(|_| rng.random_range(-radius..=radius))
        .collect();
    Tensor::new(like.shape().to_vec(), data).expect("shape taken from an existing tensor")
}

/// Loss value and input gradient of `loss` at `x`. Per-example losses are
/// summed so every row's gradient is independent of the batch size.
pub fn input_gradient<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    loss: LossKind,
    kl_target: Option<&Tensor>,
) -> Result<(f32, Tensor)> {
    model.check_input(x)?;
    let mut trace = Trace::new();
    let params = model.bind(&mut trace, false)?;
    let input = trace.leaf(x.clone())?;
    let out = model.forward_on(&mut trace, &params, input)?;
    let root = match loss {
        LossKind::CrossEntropy => {
            trace.softmax_cross_entropy(out.logits, labels, Reduction::Sum)?
        }
        LossKind::CwMargin => trace.cw_margin(out.logits, labels, Reduction::Sum)?,
        LossKind::Kl => {
            let target = kl_target.ok_or_else(|| {
                Error::Config("KL attack needs the natural prediction as target".into())
            })?;
            let p = trace.constant(target.clone())?;
            let q = trace.softmax(out.logits)?;
            trace.kl_divergence(p, q, Reduction::Sum)?
        }
    };
    let grads = trace.backward(root)?;
    Ok((trace.value(root)?.item(), grads.wrt(&trace, input)?))
}

/// Batch-summed value of an attack objective at `x`.
pub fn attack_loss<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    loss: LossKind,
    kl_target: Option<&Tensor>,
) -> Result<f32> {
    let out = model.forward(x, false)?;
    let mut trace = Trace::new();
    let z = trace.constant(out.logits)?;
    let root = match loss {
        LossKind::CrossEntropy => trace.softmax_cross_entropy(z, labels, Reduction::Sum)?,
        LossKind::CwMargin => trace.cw_margin(z, labels, Reduction::Sum)?,
        LossKind::Kl => {
            let target = kl_target.ok_or_else(|| Error::Config("KL loss needs a target".into()))?;
            let p = trace.constant(target.clone())?;
            let q = trace.softmax(z)?;
            trace.kl_divergence(p, q, Reduction::Sum)?
        }
    };
    Ok(trace.value(root)?.item())
}

fn natural_target<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    loss: LossKind,
) -> Result<Option<Tensor>> {
    Ok(match loss {
        LossKind::Kl => Some(softmax_rows(&model.forward(x, false)?.logits)),
        _ => None,
    })
}

/// Multi-step projected gradient ascent:
/// `x ← Π(x + α·sign(∇ₓ L(x, y)))` for `cfg.steps` iterations.
pub fn pgd_attack<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    model.check_input(x)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng::stream(seed, Stream::Attack, &[]);
    let target = natural_target(model, x, cfg.loss)?;
    let noise = uniform_noise(x, cfg.init_radius().min(cfg.epsilon), &mut rng);
    let start = x.zip_map(&noise, |a, b| a + b)?;
    let mut adv = linf_project(&start, x, cfg.epsilon, cfg.clamp)?;
    for iteration in 0..cfg.steps {
        let (loss, grad) = input_gradient(model, &adv, labels, cfg.loss, target.as_ref())
            .map_err(|e| diverged(e, "pgd_attack", iteration))?;
        if !loss.is_finite() || grad.check_finite("pgd_attack").is_err() {
            return Err(Error::Diverged {
                stage: "pgd_attack",
                iteration,
            });
        }
        let stepped = adv.zip_map(&grad, |a, g| a + cfg.step_size * sign(g))?;
        adv = linf_project(&stepped, x, cfg.epsilon, cfg.clamp)?;
    }
    Ok(adv)
}

fn diverged(err: Error, stage: &'static str, iteration: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged { stage, iteration },
        other => other,
    }
}

/// One signed step from a random start:
/// `δ = ψ(η + α·sign(∇ₓ L(x + η, y)))`, `η ~ U[−r, r]`.
///
/// `ψ` projects to radius ε when `project_after_step` is set and is the
/// identity otherwise; the domain clamp always applies.
pub fn single_step_attack<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    model.check_input(x)?;
    let mut rng = rng::stream(seed, Stream::Attack, &[]);
    let target = natural_target(model, x, cfg.loss)?;
    let eta = uniform_noise(x, cfg.init_radius(), &mut rng);
    let start = x.zip_map(&eta, |a, n| clamp_domain(a + n, cfg.clamp))?;
    let (loss, grad) = input_gradient(model, &start, labels, cfg.loss, target.as_ref())
        .map_err(|e| diverged(e, "single_step_attack", 0))?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            stage: "single_step_attack",
            iteration: 0,
        });
    }
    let delta = eta.zip_map(&grad, |n, g| {
        let d = n + cfg.step_size * sign(g);
        if cfg.project_after_step {
            d.clamp(-cfg.epsilon, cfg.epsilon)
        } else {
            d
        }
    })?;
    x.zip_map(&delta, |a, d| clamp_domain(a + d, cfg.clamp))
}

/// Mean over the batch of `max_{i≠y} z_i − z_y`.
pub fn cw_margin_loss(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let mut trace = Trace::new();
    let z = trace.constant(logits.clone())?;
    let root = trace.cw_margin(z, labels, Reduction::Mean)?;
    Ok(trace.value(root)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetworkSpec, NetworkState};

    fn moons_model() -> NetworkState {
        NetworkState::init(NetworkSpec::mlp(2, &[16, 16], 2), 1).unwrap()
    }

    fn batch() -> (Tensor, Vec<usize>) {
        let x = Tensor::from_rows(&[vec![0.2, 0.4], vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        (x, vec![0, 1, 0])
    }

    #[test]
    fn projection_examples() {
        let r = Tensor::scalar(0.5);
        let p = linf_project(&Tensor::scalar(0.9), &r, 8.0 / 255.0, Some((0.0, 1.0))).unwrap();
        assert!((p.item() - 0.5314).abs() < 1e-4);
        assert_eq!(p.item(), 0.5 + 8.0 / 255.0);
        let inside = linf_project(&Tensor::scalar(0.51), &r, 0.1, None).unwrap();
        assert_eq!(inside.item(), 0.51);
        let dom = linf_project(
            &Tensor::scalar(-0.2),
            &Tensor::scalar(0.0),
            0.5,
            Some((0.0, 1.0)),
        )
        .unwrap();
        assert_eq!(dom.item(), 0.0);
    }

    #[test]
    fn zero_radius_and_zero_steps_are_identity() {
        let model = moons_model();
        let (x, y) = batch();
        let cfg = AttackConfig::pgd(0.0, 0.1, 10).with_clamp(None);
        assert!(pgd_attack(&model, &x, &y, &cfg, 3).unwrap().bit_eq(&x));
        let cfg = AttackConfig::pgd(0.3, 0.1, 0)
            .with_clamp(None)
            .with_rand_init(false);
        assert!(pgd_attack(&model, &x, &y, &cfg, 3).unwrap().bit_eq(&x));
        let mut ss = AttackConfig::rs_fgsm(0.0).with_clamp(None);
        ss.init_radius_factor = 0.0;
        assert!(single_step_attack(&model, &x, &y, &ss, 3)
            .unwrap()
            .bit_eq(&x));
    }

    #[test]
    fn pgd_stays_in_ball_and_domain() {
        let model = moons_model();
        let (x, y) = batch();
        let cfg = AttackConfig::pgd(0.2, 0.07, 7);
        let adv = pgd_attack(&model, &x, &y, &cfg, 9).unwrap();
        for (a, r) in adv.data().iter().zip(x.data()) {
            assert!(*a <= r + 0.2 && *a >= r - 0.2);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn fgsm_reduces_to_signed_gradient_step() {
        let model = moons_model();
        let (x, y) = batch();
        let cfg = AttackConfig::fgsm(0.1).with_clamp(None);
        let adv = single_step_attack(&model, &x, &y, &cfg, 0).unwrap();
        let (_, g) = input_gradient(&model, &x, &y, LossKind::CrossEntropy, None).unwrap();
        let expect = x.zip_map(&g, |a, g| a + 0.1 * sign(g)).unwrap();
        assert!(adv.bit_eq(&expect));
    }

    #[test]
    fn single_step_bounds() {
        let model = moons_model();
        let (x, y) = batch();
        let eps = 0.1;
        for seed in 0..20 {
            let rs = single_step_attack(
                &model,
                &x,
                &y,
                &AttackConfig::rs_fgsm(eps).with_clamp(None),
                seed,
            )
            .unwrap();
            assert!(rs.zip_map(&x, |a, b| (a - b).abs()).unwrap().max_abs() <= eps + 1e-6);
            let n = single_step_attack(
                &model,
                &x,
                &y,
                &AttackConfig::n_fgsm(eps).with_clamp(None),
                seed,
            )
            .unwrap();
            assert!(n.zip_map(&x, |a, b| (a - b).abs()).unwrap().max_abs() <= 3.0 * eps + 1e-6);
        }
    }

    #[test]
    fn attacks_are_reproducible() {
        let model = moons_model();
        let (x, y) = batch();
        let cfg = AttackConfig::pgd(0.2, 0.05, 5).with_clamp(None);
        let a = pgd_attack(&model, &x, &y, &cfg, 42).unwrap();
        let b = pgd_attack(&model, &x, &y, &cfg, 42).unwrap();
        assert!(a.bit_eq(&b));
        let c = pgd_attack(&model, &x, &y, &cfg, 43).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn cw_margin_values() {
        let z = Tensor::from_rows(&[vec![5.0, 1.0]]).unwrap();
        assert_eq!(cw_margin_loss(&z, &[0]).unwrap(), -4.0);
        let tie = Tensor::from_rows(&[vec![0.3, 0.3]]).unwrap();
        assert_eq!(cw_margin_loss(&tie, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_attack_moves_away_from_natural_prediction() {
        let model = moons_model();
        let (x, y) = batch();
        let cfg = AttackConfig::pgd(0.3, 0.05, 10)
            .with_clamp(None)
            .with_loss(LossKind::Kl);
        let adv = pgd_attack(&model, &x, &y, &cfg, 5).unwrap();
        let p = softmax_rows(&model.forward(&x, false).unwrap().logits);
        let kl = attack_loss(&model, &adv, &y, LossKind::Kl, Some(&p)).unwrap();
        assert!(kl > 0.0);
    }
}
