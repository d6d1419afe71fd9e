//! Robustness measurement: robust accuracy, accuracy-vs-ε curves (negative
//! ε meaning inverse perturbations), loss-ranked group splits and curve
//! differences.

use std::io::Write;

use rayon::prelude::*;

use crate::attack::{pgd_attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inverse::{instance_inverse, InverseConfig};
use crate::kernels::cross_entropy_row;
use crate::model::Classifier;
use crate::rng::{derive_seed, Stream};
use crate::tensor::Tensor;

/// Examples per evaluation chunk. Each chunk draws its own attack seed, so
/// results do not depend on how chunks are scheduled across threads.
pub const CHUNK: usize = 256;

fn chunks(n: usize) -> Vec<(usize, Vec<usize>)> {
    (0..n)
        .step_by(CHUNK)
        .enumerate()
        .map(|(c, start)| (c, (start..(start + CHUNK).min(n)).collect()))
        .collect()
}

/// Per-example correctness after transforming each chunk with `perturb`.
fn correctness<M, F>(model: &M, data: &Dataset, perturb: F) -> Result<Vec<bool>>
where
    M: Classifier + ?Sized,
    F: Fn(&Tensor, &[usize], u64) -> Result<Tensor> + Sync,
{
    let parts = chunks(data.len())
        .into_par_iter()
        .map(|(c, idx)| {
            let (x, y) = data.batch(&idx);
            let moved = perturb(&x, &y, c as u64)?;
            let pred = model.forward(&moved, false)?.predictions();
            Ok(pred.iter().zip(&y).map(|(p, l)| p == l).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

fn fraction(flags: &[bool]) -> f32 {
    if flags.is_empty() {
        return 0.0;
    }
    (flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64) as f32
}

pub fn natural_correct<M: Classifier + ?Sized>(model: &M, data: &Dataset) -> Result<Vec<bool>> {
    correctness(model, data, |x, _, _| Ok(x.clone()))
}

pub fn natural_accuracy<M: Classifier + ?Sized>(model: &M, data: &Dataset) -> Result<f32> {
    Ok(fraction(&natural_correct(model, data)?))
}

/// Correctness of every example under a PGD attack.
pub fn robust_correct<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    correctness(model, data, |x, y, c| {
        pgd_attack(model, x, y, cfg, derive_seed(seed, Stream::Eval, &[c]))
    })
}

/// Fraction of examples still classified correctly after a PGD attack.
pub fn robust_accuracy<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f32> {
    Ok(fraction(&robust_correct(model, data, cfg, seed)?))
}

/// Natural cross-entropy of every example.
pub fn per_example_loss<M: Classifier + ?Sized>(model: &M, data: &Dataset) -> Result<Vec<f32>> {
    let parts = chunks(data.len())
        .into_par_iter()
        .map(|(_, idx)| {
            let (x, y) = data.batch(&idx);
            let logits = model.forward(&x, false)?.logits;
            Ok(y.iter()
                .enumerate()
                .map(|(r, &l)| cross_entropy_row(logits.row(r), l))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Ranks examples by natural loss (ties by index). The first ⌈N/2⌉ are the
/// low-loss "top" half.
pub fn group_split<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if data.len() < 2 {
        return Err(Error::Config(
            "group split needs at least two examples".into(),
        ));
    }
    let losses = per_example_loss(model, data)?;
    Ok(split_by_loss(&losses))
}

pub fn split_by_loss(losses: &[f32]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let bottom = order.split_off(losses.len().div_ceil(2));
    (order, bottom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSpec {
    /// Radii, ascending. Negative entries run inverse perturbations.
    pub grid: Vec<f32>,
    /// Attack settings at a reference radius; the step size is rescaled
    /// in proportion for every grid point.
    pub template: AttackConfig,
    /// Steps for both attack and inverse descent.
    pub steps: usize,
    pub groups: bool,
    pub seed: u64,
}

impl CurveSpec {
    pub fn new(grid: Vec<f32>, template: AttackConfig, seed: u64) -> Self {
        Self {
            grid,
            steps: template.steps,
            template,
            groups: false,
            seed,
        }
    }

    pub fn with_groups(mut self, groups: bool) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("empty ε grid".into()));
        }
        if self.grid.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("non-finite ε in grid".into()));
        }
        if self.grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("ε grid must be ascending".into()));
        }
        if self.template.epsilon.is_nan() || self.template.epsilon <= 0.0 {
            return Err(Error::Config(
                "curve template needs a positive reference ε".into(),
            ));
        }
        self.template.validate()
    }

    fn ratio(&self) -> f32 {
        self.template.step_size / self.template.epsilon
    }

    pub fn attack_at(&self, epsilon: f32, clamp: Option<(f32, f32)>) -> AttackConfig {
        AttackConfig {
            epsilon,
            step_size: self.ratio() * epsilon,
            steps: self.steps,
            clamp,
            ..self.template
        }
    }

    /// Cross-entropy-only inverse descent at radius `radius`.
    pub fn inverse_at(&self, radius: f32, clamp: Option<(f32, f32)>) -> InverseConfig {
        InverseConfig {
            epsilon: radius,
            step_size: self.ratio() * radius,
            universal_step_size: radius,
            steps: self.steps,
            beta: 0.0,
            clamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epsilon: f32,
    pub accuracy: f32,
    /// Accuracy of the low-loss and high-loss halves when requested.
    pub groups: Option<(f32, f32)>,
}

/// Per-example correctness at one grid point.
pub fn correct_at<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &CurveSpec,
    epsilon: f32,
) -> Result<Vec<bool>> {
    let clamp = data.domain.clamp();
    let seed = spec.seed;
    if epsilon > 0.0 {
        let cfg = spec.attack_at(epsilon, clamp);
        robust_correct(model, data, &cfg, seed)
    } else if epsilon < 0.0 {
        let cfg = spec.inverse_at(-epsilon, clamp);
        correctness(model, data, |x, y, c| {
            instance_inverse(
                model,
                x,
                y,
                None,
                &cfg,
                derive_seed(seed, Stream::Eval, &[c]),
            )
        })
    } else {
        natural_correct(model, data)
    }
}

pub fn accuracy_curve<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &CurveSpec,
) -> Result<Vec<CurvePoint>> {
    spec.validate()?;
    let split = if spec.groups {
        Some(group_split(model, data)?)
    } else {
        None
    };
    spec.grid
        .iter()
        .map(|&epsilon| {
            let flags = correct_at(model, data, spec, epsilon)?;
            let groups = split.as_ref().map(|(top, bottom)| {
                let pick =
                    |idx: &[usize]| fraction(&idx.iter().map(|&i| flags[i]).collect::<Vec<_>>());
                (pick(top), pick(bottom))
            });
            Ok(CurvePoint {
                epsilon,
                accuracy: fraction(&flags),
                groups,
            })
        })
        .collect()
}

/// Pointwise `a − b` over identical grids.
pub fn curve_difference(a: &[CurvePoint], b: &[CurvePoint]) -> Result<Vec<(f32, f32)>> {
    for i in 0..a.len().max(b.len()) {
        match (a.get(i), b.get(i)) {
            (Some(p), Some(q)) if p.epsilon.to_bits() == q.epsilon.to_bits() => {}
            _ => return Err(Error::GridMismatch { position: i }),
        }
    }
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| (p.epsilon, p.accuracy - q.accuracy))
        .collect())
}

/// `epsilon,accuracy` rows, or `epsilon,accuracy,group` with one row per
/// group (`all`, `top`, `bottom`) when group accuracies are present.
pub fn write_curve_csv<W: Write>(mut out: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    let grouped = curve.iter().any(|p| p.groups.is_some());
    if grouped {
        writeln!(out, "epsilon,accuracy,group")?;
    } else {
        writeln!(out, "epsilon,accuracy")?;
    }
    for p in curve {
        match p.groups {
            Some((top, bottom)) if grouped => {
                writeln!(out, "{},{},all", p.epsilon, p.accuracy)?;
                writeln!(out, "{},{top},top", p.epsilon)?;
                writeln!(out, "{},{bottom},bottom", p.epsilon)?;
            }
            _ => writeln!(out, "{},{}", p.epsilon, p.accuracy)?,
        }
    }
    Ok(())
}

pub fn write_difference_csv<W: Write>(mut out: W, diff: &[(f32, f32)]) -> std::io::Result<()> {
    writeln!(out, "epsilon,delta")?;
    for (e, d) in diff {
        writeln!(out, "{e},{d}")?;
    }
    Ok(())
}

/// Parses `start:stop:step`. Both endpoints are included when `step`
/// divides the range to within 1e-9.
pub fn parse_grid(text: &str) -> Result<Vec<f32>> {
    let bad = || Error::Config(format!("ε grid must be start:stop:step, got {text:?}"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts.as_slice() else {
        return Err(bad());
    };
    if !(step.is_finite() && *step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start
    {
        return Err(bad());
    }
    let span = (stop - start) / step;
    let mut count = span.floor();
    if (span - span.round()).abs() < 1e-9 {
        count = span.round();
    }
    if count > 1e6 {
        return Err(Error::Config(format!(
            "ε grid {text:?} has too many points"
        )));
    }
    Ok((0..=count as usize)
        .map(|i| {
            let v = start + i as f64 * step;
            // Snap accumulated rounding so 0 and the endpoints print cleanly.
            let snapped = (v / step).round() * step;
            if (v - snapped).abs() < 1e-9 {
                snapped as f32
            } else {
                v as f32
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("-0.1:0.1:0.05").unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[0], -0.1);
        assert_eq!(g[4], 0.1);
        assert_eq!(parse_grid("0:1:0.3").unwrap().len(), 4);
        assert_eq!(parse_grid("0:0:1").unwrap(), vec![0.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn split_rule() {
        let (top, bottom) = split_by_loss(&[0.5, 0.5, 0.5]);
        assert_eq!(top, vec![0, 1]);
        assert_eq!(bottom, vec![2]);
        let (top, bottom) = split_by_loss(&[3.0, 1.0, 2.0, 0.0]);
        assert_eq!(top, vec![3, 1]);
        assert_eq!(bottom, vec![2, 0]);
    }

    fn point(e: f32, a: f32) -> CurvePoint {
        CurvePoint {
            epsilon: e,
            accuracy: a,
            groups: None,
        }
    }

    #[test]
    fn differences() {
        let a = vec![point(0.0, 0.9), point(0.1, 0.5)];
        let b = vec![point(0.0, 0.8), point(0.1, 0.6)];
        assert!(curve_difference(&a, &a)
            .unwrap()
            .iter()
            .all(|&(_, d)| d == 0.0));
        let ab = curve_difference(&a, &b).unwrap();
        let ba = curve_difference(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(x.1, -y.1);
        }
        let c = vec![point(0.0, 0.8), point(0.2, 0.6)];
        assert!(matches!(
            curve_difference(&a, &c),
            Err(Error::GridMismatch { position: 1 })
        ));
        assert!(matches!(
            curve_difference(&a, &a[..1]),
            Err(Error::GridMismatch { position: 1 })
        ));
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[point(0.0, 1.0)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epsilon,accuracy\n0,1\n");
        let mut buf = Vec::new();
        write_difference_csv(&mut buf, &[(-0.1, 0.25)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epsilon,delta\n-0.1,0.25\n"
        );
    }
}
