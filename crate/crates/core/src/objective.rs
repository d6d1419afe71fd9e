//! Training losses, both as trace builders (for parameter gradients) and as
//! plain values.
//!
//! Every builder takes the model's parameters already bound on the trace and
//! returns the scalar root, averaged over the batch.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;
use crate::trace::{check_probabilities, NodeId, Reduction, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveTag {
    /// Plain cross-entropy on clean inputs.
    Natural,
    /// Cross-entropy on PGD adversaries.
    Sat,
    Trades,
    /// Instance-wise inverse targets.
    Iat,
    /// Universal inverse targets with momentum.
    Uiat,
    /// Universal inverse targets generated once, then frozen.
    UiatOneOff,
    /// Single-step adversaries, no inverse term.
    SingleStep,
    /// Single-step adversaries with a universal inverse target.
    SingleStepUiat,
}

impl ObjectiveTag {
    pub const ALL: [ObjectiveTag; 8] = [
        ObjectiveTag::Natural,
        ObjectiveTag::Sat,
        ObjectiveTag::Trades,
        ObjectiveTag::Iat,
        ObjectiveTag::Uiat,
        ObjectiveTag::UiatOneOff,
        ObjectiveTag::SingleStep,
        ObjectiveTag::SingleStepUiat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveTag::Natural => "natural",
            ObjectiveTag::Sat => "sat",
            ObjectiveTag::Trades => "trades",
            ObjectiveTag::Iat => "iat",
            ObjectiveTag::Uiat => "uiat",
            ObjectiveTag::UiatOneOff => "uiat-oneoff",
            ObjectiveTag::SingleStep => "singlestep",
            ObjectiveTag::SingleStepUiat => "singlestep-uiat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Whether training keeps a universal bank.
    pub fn uses_bank(self) -> bool {
        matches!(
            self,
            ObjectiveTag::Uiat | ObjectiveTag::UiatOneOff | ObjectiveTag::SingleStepUiat
        )
    }

    pub fn single_step(self) -> bool {
        matches!(
            self,
            ObjectiveTag::SingleStep | ObjectiveTag::SingleStepUiat
        )
    }
}

impl fmt::Display for ObjectiveTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveKind {
    pub tag: ObjectiveTag,
    /// Weight λ of the inverse KL term.
    pub lambda: f32,
    /// TRADES weight ω.
    pub omega: f32,
}

impl ObjectiveKind {
    pub fn new(tag: ObjectiveTag) -> Self {
        Self {
            tag,
            lambda: 3.5,
            omega: 6.0,
        }
    }

    pub fn with_lambda(mut self, lambda: f32) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_omega(mut self, omega: f32) -> Self {
        self.omega = omega;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::Config(format!(
                "omega must be ≥ 0, got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

/// `CE(f(x), y)`.
pub fn build_cross_entropy<M: Classifier + ?Sized>(
    trace: &mut Trace,
    model: &M,
    params: &[NodeId],
    x: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let out = model.forward_on(trace, params, x)?;
    trace.softmax_cross_entropy(out.logits, labels, Reduction::Mean)
}

/// `CE(f(x), y) + ω·KL(f(x) ‖ f(x̂))`, with gradients through both sides.
pub fn build_trades<M: Classifier + ?Sized>(
    trace: &mut Trace,
    model: &M,
    params: &[NodeId],
    x: NodeId,
    x_hat: NodeId,
    labels: &[usize],
    omega: f32,
) -> Result<NodeId> {
    let clean = model.forward_on(trace, params, x)?;
    let ce = trace.softmax_cross_entropy(clean.logits, labels, Reduction::Mean)?;
    if omega == 0.0 {
        return Ok(ce);
    }
    let adv = model.forward_on(trace, params, x_hat)?;
    let p = trace.softmax(clean.logits)?;
    let q = trace.softmax(adv.logits)?;
    let kl = trace.kl_divergence(p, q, Reduction::Mean)?;
    trace.add_scaled(ce, kl, omega)
}

/// `CE(f(x̂), y) + λ·KL(p ‖ f(x̂))` for a fixed target `p`.
pub fn build_targeted<M: Classifier + ?Sized>(
    trace: &mut Trace,
    model: &M,
    params: &[NodeId],
    x_hat: NodeId,
    labels: &[usize],
    target: &Tensor,
    lambda: f32,
) -> Result<NodeId> {
    let adv = model.forward_on(trace, params, x_hat)?;
    let ce = trace.softmax_cross_entropy(adv.logits, labels, Reduction::Mean)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    check_probabilities("target", target)?;
    let p = trace.constant(target.clone())?;
    let q = trace.softmax(adv.logits)?;
    let kl = trace.kl_divergence(p, q, Reduction::Mean)?;
    trace.add_scaled(ce, kl, lambda)
}

/// `CE(f(x̂), y) + λ·KL(f(x̌) ‖ f(x̂))` with a live forward on `x̌`. The
/// target is detached unless `flow_through` is set.
#[allow(clippy::too_many_arguments)]
pub fn build_inverse_live<M: Classifier + ?Sized>(
    trace: &mut Trace,
    model: &M,
    params: &[NodeId],
    x_hat: NodeId,
    x_check: NodeId,
    labels: &[usize],
    lambda: f32,
    flow_through: bool,
) -> Result<NodeId> {
    let adv = model.forward_on(trace, params, x_hat)?;
    let ce = trace.softmax_cross_entropy(adv.logits, labels, Reduction::Mean)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let inv = model.forward_on(trace, params, x_check)?;
    let mut p = trace.softmax(inv.logits)?;
    if !flow_through {
        p = trace.detach(p)?;
    }
    let q = trace.softmax(adv.logits)?;
    let kl = trace.kl_divergence(p, q, Reduction::Mean)?;
    trace.add_scaled(ce, kl, lambda)
}

fn evaluate<M: Classifier + ?Sized>(
    model: &M,
    build: impl FnOnce(&mut Trace, &[NodeId]) -> Result<NodeId>,
) -> Result<f32> {
    let mut trace = Trace::new();
    let params = model.bind(&mut trace, false)?;
    let root = build(&mut trace, &params)?;
    Ok(trace.value(root)?.item())
}

/// `CE(f(x̂), y)`.
pub fn sat_loss<M: Classifier + ?Sized>(
    model: &M,
    x_hat: &Tensor,
    labels: &[usize],
) -> Result<f32> {
    model.check_input(x_hat)?;
    evaluate(model, |t, p| {
        let x = t.constant(x_hat.clone())?;
        build_cross_entropy(t, model, p, x, labels)
    })
}

/// `CE(f(x), y) + ω·KL(f(x) ‖ f(x̂))`.
pub fn trades_loss<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    x_hat: &Tensor,
    labels: &[usize],
    omega: f32,
) -> Result<f32> {
    model.check_input(x)?;
    x.expect_same_shape("trades_loss", x_hat)?;
    evaluate(model, |t, p| {
        let xn = t.constant(x.clone())?;
        let xh = t.constant(x_hat.clone())?;
        build_trades(t, model, p, xn, xh, labels, omega)
    })
}

/// `CE(f(x̂), y) + λ·KL(p_t ‖ f(x̂))`.
pub fn uiat_loss<M: Classifier + ?Sized>(
    model: &M,
    x_hat: &Tensor,
    labels: &[usize],
    target: &Tensor,
    lambda: f32,
) -> Result<f32> {
    model.check_input(x_hat)?;
    check_probabilities("target", target)?;
    evaluate(model, |t, p| {
        let xh = t.constant(x_hat.clone())?;
        build_targeted(t, model, p, xh, labels, target, lambda)
    })
}

/// `CE(f(x̂), y) + λ·KL(f(x̌) ‖ f(x̂))`.
pub fn singlestep_uiat_loss<M: Classifier + ?Sized>(
    model: &M,
    x_hat: &Tensor,
    labels: &[usize],
    x_check: &Tensor,
    lambda: f32,
) -> Result<f32> {
    model.check_input(x_hat)?;
    x_hat.expect_same_shape("singlestep_uiat_loss", x_check)?;
    evaluate(model, |t, p| {
        let xh = t.constant(x_hat.clone())?;
        let xc = t.constant(x_check.clone())?;
        build_inverse_live(t, model, p, xh, xc, labels, lambda, false)
    })
}
