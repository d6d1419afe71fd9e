//! Inverse adversarial examples: inputs nudged inside a small ℓ∞ ball to
//! *lower* the classification loss, either per example or through one
//! universal perturbation per class.
//!
//! Both paths keep the offset `δ = x̌ − x` as the state being descended, so a
//! bank entry `z_c` and an instance offset follow the same update rule.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::cross_entropy_row;
use crate::model::{softmax_rows, Classifier};
use crate::rng::{self, Stream};
use crate::tensor::{sign, Tensor};
use crate::trace::{Reduction, Trace};

/// Standard deviation of the Gaussian used to seed inverse offsets.
pub const INIT_NOISE_SD: f32 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseConfig {
    /// Radius ε′ of the inverse ball.
    pub epsilon: f32,
    /// Instance-wise step size α′.
    pub step_size: f32,
    /// Step size of the single signed step applied to bank entries.
    pub universal_step_size: f32,
    /// Instance-wise descent steps n.
    pub steps: usize,
    /// Weight of the feature triplet term.
    pub beta: f32,
    pub clamp: Option<(f32, f32)>,
}

impl Default for InverseConfig {
    /// ε′ = 4/255, instance α′ = 2/255 with n = 5, universal α′ = 4/255, β = 1.
    fn default() -> Self {
        Self::scaled(4.0 / 255.0)
    }
}

impl InverseConfig {
    /// Defaults at an arbitrary radius: universal step ε′, instance step ε′/2.
    pub fn scaled(epsilon: f32) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 2.0,
            universal_step_size: epsilon,
            steps: 5,
            beta: 1.0,
            clamp: Some((0.0, 1.0)),
        }
    }

    pub fn with_clamp(mut self, clamp: Option<(f32, f32)>) -> Self {
        self.clamp = clamp;
        self
    }

    pub fn with_beta(mut self, beta: f32) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("step_size", self.step_size),
            ("universal_step_size", self.universal_step_size),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "inverse {name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config(format!("empty clamp domain [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Penultimate features the triplet term pulls toward (`F(x)`) and pushes
/// away from (`F(x̂)`). Only needed when β > 0.
#[derive(Debug, Clone)]
pub struct Anchors {
    pub natural: Tensor,
    pub adversarial: Tensor,
}

impl Anchors {
    pub fn compute<M: Classifier + ?Sized>(model: &M, x: &Tensor, x_hat: &Tensor) -> Result<Self> {
        Ok(Self {
            natural: model.forward(x, false)?.features,
            adversarial: model.forward(x_hat, false)?.features,
        })
    }

    /// Anchors when β > 0, `None` otherwise.
    pub fn when_needed<M: Classifier + ?Sized>(
        model: &M,
        x: &Tensor,
        x_hat: Option<&Tensor>,
        beta: f32,
    ) -> Result<Option<Self>> {
        if beta == 0.0 {
            return Ok(None);
        }
        let x_hat = x_hat.ok_or_else(|| {
            Error::Config("triplet term with β > 0 needs the adversarial example".into())
        })?;
        Self::compute(model, x, x_hat).map(Some)
    }
}

/// Result of differentiating the inverse loss at a batch of points.
#[derive(Debug, Clone)]
pub struct InverseEval {
    /// Batch-summed inverse loss.
    pub loss: f32,
    /// Gradient with respect to the evaluated points, one row per example.
    pub gradient: Tensor,
    /// Softmax at the evaluated points.
    pub probabilities: Tensor,
}

/// Differentiates `CE(f(x̌), y) + β·[L1(F(x̌), F(x)) − L1(F(x̌), F(x̂))]`
/// with respect to `x̌`, summed over the batch.
pub fn inverse_gradient<M: Classifier + ?Sized>(
    model: &M,
    x_check: &Tensor,
    labels: &[usize],
    anchors: Option<&Anchors>,
    beta: f32,
) -> Result<InverseEval> {
    model.check_input(x_check)?;
    let mut trace = Trace::new();
    let params = model.bind(&mut trace, false)?;
    let input = trace.leaf(x_check.clone())?;
    let out = model.forward_on(&mut trace, &params, input)?;
    let mut root = trace.softmax_cross_entropy(out.logits, labels, Reduction::Sum)?;
    if beta != 0.0 {
        let anchors = anchors
            .ok_or_else(|| Error::Config("triplet term with β > 0 needs feature anchors".into()))?;
        let nat = trace.constant(anchors.natural.clone())?;
        let adv = trace.constant(anchors.adversarial.clone())?;
        let pull = trace.l1_distance(out.features, nat, Reduction::Sum)?;
        let push = trace.l1_distance(out.features, adv, Reduction::Sum)?;
        root = trace.add_scaled(root, pull, beta)?;
        root = trace.add_scaled(root, push, -beta)?;
    }
    let grads = trace.backward(root)?;
    let gradient = grads.wrt(&trace, input)?;
    let logits = trace.value(out.logits)?;
    Ok(InverseEval {
        loss: trace.value(root)?.item(),
        gradient,
        probabilities: softmax_rows(logits),
    })
}

/// Batch mean of the inverse loss at `x̌`. `x_hat` may be `None` when β = 0.
pub fn inverse_loss<M: Classifier + ?Sized>(
    model: &M,
    x_check: &Tensor,
    x: &Tensor,
    x_hat: Option<&Tensor>,
    labels: &[usize],
    beta: f32,
) -> Result<f32> {
    let per = inverse_loss_per_example(model, x_check, x, x_hat, labels, beta)?;
    Ok(per.iter().map(|&v| f64::from(v)).sum::<f64>() as f32 / per.len() as f32)
}

/// Inverse loss of every example separately.
pub fn inverse_loss_per_example<M: Classifier + ?Sized>(
    model: &M,
    x_check: &Tensor,
    x: &Tensor,
    x_hat: Option<&Tensor>,
    labels: &[usize],
    beta: f32,
) -> Result<Vec<f32>> {
    x_check.expect_same_shape("inverse_loss", x)?;
    if let Some(h) = x_hat {
        x_check.expect_same_shape("inverse_loss", h)?;
    }
    let anchors = Anchors::when_needed(model, x, x_hat, beta)?;
    let out = model.forward(x_check, false)?;
    let classes = model.num_classes();
    if labels.len() != x_check.batch() {
        return Err(Error::shape(
            "inverse_loss",
            format!("{} labels for a batch of {}", labels.len(), x_check.batch()),
        ));
    }
    labels
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let z = out.logits.row(j);
            let mut loss = cross_entropy_row(z, y);
            if let Some(a) = &anchors {
                let f = out.features.row(j);
                loss += beta * (l1_mean(f, a.natural.row(j)) - l1_mean(f, a.adversarial.row(j)));
            }
            Ok(loss)
        })
        .collect()
}

fn l1_mean(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f32>() / a.len() as f32
}

fn clamp_domain(v: f32, clamp: Option<(f32, f32)>) -> f32 {
    match clamp {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    }
}

/// `x + δ`, clamped to the domain. `delta` has the shape of `x`.
pub fn offset(x: &Tensor, delta: &Tensor, clamp: Option<(f32, f32)>) -> Result<Tensor> {
    x.zip_map(delta, |a, d| clamp_domain(a + d, clamp))
}

/// One signed descent step on the offset: `δ ← clip_{ε′}(δ − α·sign g)`.
pub fn descend(delta: &Tensor, gradient: &Tensor, step_size: f32, epsilon: f32) -> Result<Tensor> {
    delta.zip_map(gradient, |d, g| {
        (d - step_size * sign(g)).clamp(-epsilon, epsilon)
    })
}

/// Evaluates the inverse loss at `x + δ` and takes one step on `δ`.
/// Returns the new offset together with the evaluation at the old point.
#[allow(clippy::too_many_arguments)]
pub fn inverse_step<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    delta: &Tensor,
    labels: &[usize],
    anchors: Option<&Anchors>,
    beta: f32,
    step_size: f32,
    epsilon: f32,
    clamp: Option<(f32, f32)>,
) -> Result<(Tensor, InverseEval)> {
    let point = offset(x, delta, clamp)?;
    let eval = inverse_gradient(model, &point, labels, anchors, beta)?;
    let next = descend(delta, &eval.gradient, step_size, epsilon)?;
    Ok((next, eval))
}

fn gaussian_offset(shape: &[usize], epsilon: f32, rng: &mut rng::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            (INIT_NOISE_SD * v).clamp(-epsilon, epsilon)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// Instance-wise inverse adversaries: from `x` plus tiny Gaussian noise, `n`
/// signed descent steps on the inverse loss, each projected to radius ε′.
pub fn instance_inverse<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    x_hat: Option<&Tensor>,
    cfg: &InverseConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    model.check_input(x)?;
    let anchors = Anchors::when_needed(model, x, x_hat, cfg.beta)?;
    let mut rng = rng::stream(seed, Stream::Inverse, &[]);
    let mut delta = gaussian_offset(x.shape(), cfg.epsilon, &mut rng);
    for iteration in 0..cfg.steps {
        let (next, eval) = inverse_step(
            model,
            x,
            &delta,
            labels,
            anchors.as_ref(),
            cfg.beta,
            cfg.step_size,
            cfg.epsilon,
            cfg.clamp,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                stage: "instance_inverse",
                iteration,
            },
            other => other,
        })?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                stage: "instance_inverse",
                iteration,
            });
        }
        delta = next;
    }
    offset(x, &delta, cfg.clamp)
}

/// One perturbation per class, each shaped like a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalBank {
    perturbations: Vec<Tensor>,
    epsilon: f32,
}

/// What a bank update saw before it moved the perturbations.
#[derive(Debug, Clone)]
pub struct BankUpdate {
    /// `x + z_y` under the bank as it was before the step.
    pub x_check: Tensor,
    /// `f(x̌)` at those points.
    pub probabilities: Tensor,
    /// Batch-summed inverse loss at those points.
    pub loss: f32,
}

impl UniversalBank {
    /// `z_c ~ 0.001·N(0, 1)`, clipped to radius ε′.
    pub fn init(classes: usize, input_shape: &[usize], epsilon: f32, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "bank needs ≥ 2 classes, got {classes}"
            )));
        }
        let mut rng = rng::stream(seed, Stream::Bank, &[]);
        let perturbations = (0..classes)
            .map(|_| gaussian_offset(input_shape, epsilon, &mut rng))
            .collect();
        Ok(Self {
            perturbations,
            epsilon,
        })
    }

    pub fn zeros(classes: usize, input_shape: &[usize], epsilon: f32) -> Self {
        Self {
            perturbations: (0..classes).map(|_| Tensor::zeros(input_shape)).collect(),
            epsilon,
        }
    }

    pub fn from_parts(perturbations: Vec<Tensor>, epsilon: f32) -> Result<Self> {
        if perturbations.len() < 2 {
            return Err(Error::Config("bank needs ≥ 2 classes".into()));
        }
        let shape = perturbations[0].shape().to_vec();
        for z in &perturbations {
            if z.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "universal_bank",
                    "class perturbations differ in shape",
                ));
            }
            z.check_finite("universal_bank")?;
            if z.max_abs() > epsilon {
                return Err(Error::Config(format!(
                    "bank entry exceeds radius {epsilon}: {}",
                    z.max_abs()
                )));
            }
        }
        Ok(Self {
            perturbations,
            epsilon,
        })
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn classes(&self) -> usize {
        self.perturbations.len()
    }

    pub fn get(&self, class: usize) -> &Tensor {
        &self.perturbations[class]
    }

    pub fn perturbations(&self) -> &[Tensor] {
        &self.perturbations
    }

    /// Largest `‖z_c‖∞` over classes.
    pub fn max_norm(&self) -> f32 {
        self.perturbations
            .iter()
            .map(Tensor::max_abs)
            .fold(0.0, f32::max)
    }

    /// Row `j` of the result is `z_{y_j}`.
    pub fn offsets(&self, labels: &[usize]) -> Result<Tensor> {
        let classes = self.classes();
        let rows = labels
            .iter()
            .map(|&y| {
                self.perturbations
                    .get(y)
                    .cloned()
                    .ok_or(Error::LabelOutOfRange { label: y, classes })
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&rows)
    }

    /// `x̌_j = x_j + z_{y_j}`, clamped to the domain.
    pub fn apply(&self, x: &Tensor, labels: &[usize], clamp: Option<(f32, f32)>) -> Result<Tensor> {
        if labels.len() != x.batch() {
            return Err(Error::shape(
                "apply_universal",
                format!("{} labels for a batch of {}", labels.len(), x.batch()),
            ));
        }
        offset(x, &self.offsets(labels)?, clamp)
    }

    /// One signed step per class present in the batch on the summed inverse
    /// loss of its members. Absent classes are left untouched.
    pub fn update<M: Classifier + ?Sized>(
        &mut self,
        model: &M,
        x: &Tensor,
        labels: &[usize],
        anchors: Option<&Anchors>,
        cfg: &InverseConfig,
    ) -> Result<BankUpdate> {
        cfg.validate()?;
        if x.batch() == 0 {
            return Err(Error::Config("bank update needs a non-empty batch".into()));
        }
        let x_check = self.apply(x, labels, cfg.clamp)?;
        let eval = inverse_gradient(model, &x_check, labels, anchors, cfg.beta)?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                stage: "universal_update",
                iteration: 0,
            });
        }
        let width = x.row_len();
        let mut sums: Vec<Option<Vec<f32>>> = vec![None; self.classes()];
        for (j, &y) in labels.iter().enumerate() {
            let row = eval.gradient.row(j);
            match &mut sums[y] {
                Some(acc) => acc.iter_mut().zip(row).for_each(|(a, g)| *a += g),
                slot => *slot = Some(row.to_vec()),
            }
        }
        for (z, sum) in self.perturbations.iter_mut().zip(sums) {
            let Some(sum) = sum else { continue };
            debug_assert_eq!(sum.len(), width);
            for (v, g) in z.data_mut().iter_mut().zip(sum) {
                *v = (*v - cfg.universal_step_size * sign(g)).clamp(-self.epsilon, self.epsilon);
            }
        }
        Ok(BankUpdate {
            x_check,
            probabilities: eval.probabilities,
            loss: eval.loss,
        })
    }
}
