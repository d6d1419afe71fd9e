//! Central finite-difference checks of every primitive and every composite
//! training objective.
//!
//! The error of one coordinate is `|a − n| / max(|a|, |n|, 1)`: relative for
//! gradients of magnitude above one and absolute below, since single
//! precision central differences with `h = 1e-3` carry roughly `1e-4` of
//! absolute roundoff on losses of order one.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;

use crate::error::Result;
use crate::inverse::Anchors;
use crate::model::{softmax_rows, Architecture, Classifier, NetworkSpec, NetworkState};
use crate::objective::{build_cross_entropy, build_inverse_live, build_targeted, build_trades};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::trace::{NodeId, OpKind, Reduction, Trace};

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const DENOMINATOR_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Check {
    /// Largest per-coordinate error.
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose probes crossed a kink.
    pub skipped: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst < TOLERANCE
    }

    fn merge(&mut self, other: Check) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn coordinate_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

fn readout(trace: &Trace, out: NodeId, seed: &Tensor) -> Result<f64> {
    let v = trace.value(out)?;
    Ok(v.data()
        .iter()
        .zip(seed.data())
        .map(|(&a, &w)| f64::from(a) * f64::from(w))
        .sum())
}

/// Compares the vector-Jacobian product `seedᵀ·∂out/∂leaf` against central
/// differences for every coordinate of every leaf.
pub fn check_node(
    trace: &mut Trace,
    leaves: &[NodeId],
    out: NodeId,
    seed: &Tensor,
) -> Result<Check> {
    let grads = trace.backward_with(out, seed.clone())?;
    let base_kinks = trace.kink_signature();
    let mut check = Check::default();
    for &leaf in leaves {
        let analytic = grads.wrt(trace, leaf)?;
        let original = trace.value(leaf)?.clone();
        for i in 0..original.len() {
            let mut plus = original.clone();
            let mut minus = original.clone();
            plus.data_mut()[i] += STEP;
            minus.data_mut()[i] -= STEP;
            let width = f64::from(plus.data()[i]) - f64::from(minus.data()[i]);
            trace.set_leaf(leaf, plus)?;
            let f_plus = readout(trace, out, seed)?;
            let kink_plus = trace.kink_signature() != base_kinks;
            trace.set_leaf(leaf, minus)?;
            let f_minus = readout(trace, out, seed)?;
            let kink_minus = trace.kink_signature() != base_kinks;
            if kink_plus || kink_minus {
                check.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / width;
            let err = coordinate_error(f64::from(analytic.data()[i]), numeric);
            check.worst = check.worst.max(err);
            check.checked += 1;
        }
        trace.set_leaf(leaf, original)?;
    }
    Ok(check)
}

fn uniform(rng: &mut rng::Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn labels(rng: &mut rng::Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Builds the graph of one primitive on fresh random inputs and checks it.
pub fn check_primitive(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<Check> {
    let mut rng = rng::stream(seed, Stream::Eval, &[kind as u64]);
    let mut t = fault.map_or_else(Trace::new, Trace::with_fault);
    let r = &mut rng;
    let (leaves, out) = match kind {
        OpKind::MatMul => {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0))?;
            let b = t.leaf(uniform(r, &[4, 2], -1.0, 1.0))?;
            (vec![a, b], t.matmul(a, b)?)
        }
        OpKind::AddBias => {
            let x = t.leaf(uniform(r, &[2, 3, 2, 2], -1.0, 1.0))?;
            let b = t.leaf(uniform(r, &[3], -1.0, 1.0))?;
            (vec![x, b], t.add_bias(x, b)?)
        }
        OpKind::Add => {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0))?;
            let b = t.leaf(uniform(r, &[3, 4], -1.0, 1.0))?;
            (vec![a, b], t.add(a, b)?)
        }
        OpKind::Scale => {
            let x = t.leaf(uniform(r, &[3, 4], -1.0, 1.0))?;
            (vec![x], t.scale(x, 1.7)?)
        }
        OpKind::Conv2d => {
            let x = t.leaf(uniform(r, &[2, 2, 4, 4], -1.0, 1.0))?;
            let w = t.leaf(uniform(r, &[3, 2, 3, 3], -0.5, 0.5))?;
            let padding = (seed % 2) as usize;
            (vec![x, w], t.conv2d(x, w, padding)?)
        }
        OpKind::Relu => {
            let x = t.leaf(uniform(r, &[3, 5], -1.0, 1.0))?;
            (vec![x], t.relu(x)?)
        }
        OpKind::Flatten => {
            let x = t.leaf(uniform(r, &[2, 3, 2, 2], -1.0, 1.0))?;
            (vec![x], t.flatten(x)?)
        }
        OpKind::Softmax => {
            let x = t.leaf(uniform(r, &[3, 4], -2.0, 2.0))?;
            (vec![x], t.softmax(x)?)
        }
        OpKind::CrossEntropy => {
            let z = t.leaf(uniform(r, &[4, 3], -2.0, 2.0))?;
            let y = labels(r, 4, 3);
            (vec![z], t.softmax_cross_entropy(z, &y, Reduction::Mean)?)
        }
        OpKind::KlDivergence => {
            let lp = t.leaf(uniform(r, &[3, 4], -2.0, 2.0))?;
            let lq = t.leaf(uniform(r, &[3, 4], -2.0, 2.0))?;
            let p = t.softmax(lp)?;
            let q = t.softmax(lq)?;
            (vec![lp, lq], t.kl_divergence(p, q, Reduction::Mean)?)
        }
        OpKind::L1Distance => {
            let a = t.leaf(uniform(r, &[3, 5], -1.0, 1.0))?;
            let b = t.leaf(uniform(r, &[3, 5], -1.0, 1.0))?;
            (vec![a, b], t.l1_distance(a, b, Reduction::Sum)?)
        }
        OpKind::CwMargin => {
            let z = t.leaf(uniform(r, &[4, 3], -2.0, 2.0))?;
            let y = labels(r, 4, 3);
            (vec![z], t.cw_margin(z, &y, Reduction::Mean)?)
        }
    };
    let shape = t.value(out)?.shape().to_vec();
    let seed_vec = uniform(r, &shape, -1.0, 1.0);
    check_node(&mut t, &leaves, out, &seed_vec)
}

/// Composite objectives checked against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Composite {
    /// Cross-entropy on adversaries, parameter gradients.
    Sat,
    Trades,
    /// Inverse loss with the triplet term, input gradients.
    InverseLoss,
    /// Cross-entropy plus KL to a stored target.
    Uiat,
    /// Same form with a natural-prediction target.
    OneOff,
    /// Cross-entropy plus KL to a detached live prediction.
    SingleStepUiat,
    /// The live-target variant with gradients through both sides.
    SingleStepFlow,
    /// Cross-entropy through the small convolutional network.
    CnnCrossEntropy,
}

impl Composite {
    pub const ALL: [Composite; 8] = [
        Composite::Sat,
        Composite::Trades,
        Composite::InverseLoss,
        Composite::Uiat,
        Composite::OneOff,
        Composite::SingleStepUiat,
        Composite::SingleStepFlow,
        Composite::CnnCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Composite::Sat => "sat_loss",
            Composite::Trades => "trades_loss",
            Composite::InverseLoss => "inverse_loss",
            Composite::Uiat => "uiat_loss",
            Composite::OneOff => "oneoff_uiat_loss",
            Composite::SingleStepUiat => "singlestep_uiat_loss",
            Composite::SingleStepFlow => "singlestep_uiat_flow",
            Composite::CnnCrossEntropy => "cnn_cross_entropy",
        }
    }
}

pub fn check_composite(which: Composite, seed: u64, fault: Option<OpKind>) -> Result<Check> {
    let mut rng = rng::stream(seed, Stream::Eval, &[100 + which as u64]);
    let r = &mut rng;
    let spec = if which == Composite::CnnCrossEntropy {
        NetworkSpec {
            arch: Architecture::SmallCnn {
                channels: [2, 2],
                dense: 4,
            },
            input_shape: vec![1, 4, 4],
            classes: 3,
        }
    } else {
        NetworkSpec::mlp(3, &[5, 4], 3)
    };
    let model = NetworkState::init(spec.clone(), seed)?;
    let mut input_shape = vec![4];
    input_shape.extend(&spec.input_shape);
    let x = uniform(r, &input_shape, -1.0, 1.0);
    let x_hat = x.zip_map(&uniform(r, &input_shape, -0.1, 0.1), |a, b| a + b)?;
    let x_check = x.zip_map(&uniform(r, &input_shape, -0.05, 0.05), |a, b| a + b)?;
    let y = labels(r, 4, 3);
    let mut t = fault.map_or_else(Trace::new, Trace::with_fault);

    let (leaves, root) = if which == Composite::InverseLoss {
        let anchors = Anchors::compute(&model, &x, &x_hat)?;
        let params = model.bind(&mut t, false)?;
        let xc = t.leaf(x_check)?;
        let out = model.forward_on(&mut t, &params, xc)?;
        let ce = t.softmax_cross_entropy(out.logits, &y, Reduction::Mean)?;
        let nat = t.constant(anchors.natural)?;
        let adv = t.constant(anchors.adversarial)?;
        let pull = t.l1_distance(out.features, nat, Reduction::Mean)?;
        let push = t.l1_distance(out.features, adv, Reduction::Mean)?;
        let root = t.add_scaled(ce, pull, 1.0)?;
        (vec![xc], t.add_scaled(root, push, -1.0)?)
    } else {
        let params = model.bind(&mut t, true)?;
        let xn = t.constant(x.clone())?;
        let xh = t.constant(x_hat)?;
        let xc = t.constant(x_check)?;
        let root = match which {
            Composite::Sat | Composite::CnnCrossEntropy => {
                build_cross_entropy(&mut t, &model, &params, xh, &y)?
            }
            Composite::Trades => build_trades(&mut t, &model, &params, xn, xh, &y, 6.0)?,
            Composite::Uiat => {
                let target = softmax_rows(&uniform(r, &[4, 3], -2.0, 2.0));
                build_targeted(&mut t, &model, &params, xh, &y, &target, 3.5)?
            }
            Composite::OneOff => {
                let target = softmax_rows(&model.forward(&x, false)?.logits);
                build_targeted(&mut t, &model, &params, xh, &y, &target, 3.5)?
            }
            Composite::SingleStepUiat => {
                build_inverse_live(&mut t, &model, &params, xh, xc, &y, 3.5, false)?
            }
            Composite::SingleStepFlow => {
                build_inverse_live(&mut t, &model, &params, xh, xc, &y, 3.5, true)?
            }
            Composite::InverseLoss => unreachable!(),
        };
        (params, root)
    };
    check_node(&mut t, &leaves, root, &Tensor::scalar(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    /// Aggregated result per primitive or objective name, in report order.
    pub entries: Vec<(String, Check)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, c)| c.passed())
    }

    pub fn failing(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, c)| !c.passed())
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, c) in &self.entries {
            writeln!(
                f,
                "{:<24} worst_rel_err={:.3e} checked={} skipped={} {}",
                name,
                c.worst,
                c.checked,
                c.skipped,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Every primitive and composite over the given seeds. `fault` perturbs the
/// backward rule of one primitive, to confirm the suite notices.
pub fn run_suite(seeds: &[u64], fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut prims: BTreeMap<OpKind, Check> = BTreeMap::new();
    let mut comps: BTreeMap<Composite, Check> = BTreeMap::new();
    for &seed in seeds {
        for kind in OpKind::ALL {
            prims
                .entry(kind)
                .or_default()
                .merge(check_primitive(kind, seed, fault)?);
        }
        for which in Composite::ALL {
            comps
                .entry(which)
                .or_default()
                .merge(check_composite(which, seed, fault)?);
        }
    }
    let entries = prims
        .into_iter()
        .map(|(k, c)| (k.name().to_string(), c))
        .chain(comps.into_iter().map(|(k, c)| (k.name().to_string(), c)))
        .collect();
    Ok(SuiteReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for kind in OpKind::ALL {
            let c = check_primitive(kind, 1, None).unwrap();
            assert!(c.passed(), "{}: {c:?}", kind.name());
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let c = check_primitive(OpKind::Relu, 1, Some(OpKind::Relu)).unwrap();
        assert!(!c.passed());
    }

    #[test]
    fn error_metric() {
        assert_eq!(coordinate_error(2.0, 2.0), 0.0);
        assert!((coordinate_error(10.0, 10.01) - 0.001 / 1.001).abs() < 1e-9);
        assert!((coordinate_error(1e-6, 0.0) - 1e-6).abs() < 1e-12);
    }
}
