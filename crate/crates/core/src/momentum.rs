//! Per-example probability targets keyed by dataset index.
//!
//! Epochs are numbered from 1.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::ROW_SUM_TOLERANCE;

/// Epoch at which momentum starts: 75 of 100, scaled to the budget.
pub fn momentum_start_epoch(epochs: usize) -> usize {
    scaled_epoch(epochs, 0.75)
}

/// Epoch at which one-off targets are generated: 80 of 100, scaled.
pub fn oneoff_epoch(epochs: usize) -> usize {
    scaled_epoch(epochs, 0.8)
}

fn scaled_epoch(epochs: usize, fraction: f64) -> usize {
    ((epochs as f64 * fraction).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StoreMode {
    /// Exponential moving average `γ·p_stored + (1−γ)·current` from `start`.
    Momentum { gamma: f32, start: usize },
    /// Natural predictions before `epoch`, frozen inverse predictions after.
    OneOff { epoch: usize },
}

#[derive(Debug, Clone)]
struct Entry {
    probs: Vec<f32>,
    epoch: usize,
}

#[derive(Debug, Clone)]
pub struct ProbStore {
    mode: StoreMode,
    classes: usize,
    entries: Vec<Option<Entry>>,
}

fn check_row(p: &[f32], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(Error::shape(
            "prob_store",
            format!("vector of length {} for {classes} classes", p.len()),
        ));
    }
    let sum: f32 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || p.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::NotAProbability {
            what: "prob_store",
            row: 0,
            sum,
        });
    }
    Ok(())
}

impl ProbStore {
    pub fn new(len: usize, classes: usize, mode: StoreMode) -> Result<Self> {
        if let StoreMode::Momentum { gamma, .. } = mode {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::Config(format!(
                    "gamma must lie in [0, 1], got {gamma}"
                )));
            }
        }
        Ok(Self {
            mode,
            classes,
            entries: vec![None; len],
        })
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[f32]> {
        self.entries
            .get(index)?
            .as_ref()
            .map(|e| e.probs.as_slice())
    }

    fn slot(&mut self, index: usize) -> Result<&mut Option<Entry>> {
        let len = self.entries.len();
        self.entries
            .get_mut(index)
            .ok_or_else(|| Error::Config(format!("example index {index} outside store of {len}")))
    }

    /// Target for one example this epoch; the result is also stored.
    pub fn momentum_target(
        &mut self,
        index: usize,
        current: &[f32],
        epoch: usize,
    ) -> Result<Vec<f32>> {
        let StoreMode::Momentum { gamma, start } = self.mode else {
            return Err(Error::Config("momentum_target on a one-off store".into()));
        };
        check_row(current, self.classes)?;
        let slot = self.slot(index)?;
        let out = match slot {
            Some(prev) if epoch >= start => prev
                .probs
                .iter()
                .zip(current)
                .map(|(&p, &c)| gamma * p + (1.0 - gamma) * c)
                .collect(),
            None if epoch >= start && epoch > 1 => {
                return Err(Error::MissingTarget { index, epoch });
            }
            _ => current.to_vec(),
        };
        *slot = Some(Entry {
            probs: out.clone(),
            epoch,
        });
        Ok(out)
    }

    /// Target for one example in one-off mode. `inverse` is called only at
    /// the generation epoch, and at most once per example.
    pub fn oneoff_target(
        &mut self,
        index: usize,
        epoch: usize,
        natural: &[f32],
        inverse: impl FnOnce() -> Result<Vec<f32>>,
    ) -> Result<Vec<f32>> {
        let StoreMode::OneOff { epoch: at } = self.mode else {
            return Err(Error::Config("oneoff_target on a momentum store".into()));
        };
        let classes = self.classes;
        let slot = self.slot(index)?;
        if epoch < at {
            check_row(natural, classes)?;
            return Ok(natural.to_vec());
        }
        if let Some(e) = slot {
            return Ok(e.probs.clone());
        }
        if epoch > at {
            return Err(Error::MissingTarget { index, epoch });
        }
        let probs = inverse()?;
        check_row(&probs, classes)?;
        *slot = Some(Entry {
            probs: probs.clone(),
            epoch,
        });
        Ok(probs)
    }

    /// [`ProbStore::momentum_target`] for a batch; row `j` of `current`
    /// belongs to `indices[j]`.
    pub fn momentum_targets(
        &mut self,
        indices: &[usize],
        current: &Tensor,
        epoch: usize,
    ) -> Result<Tensor> {
        let rows = indices
            .iter()
            .enumerate()
            .map(|(j, &i)| self.momentum_target(i, current.row(j), epoch))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(current.shape().to_vec(), rows.concat())
    }

    /// Batched one-off targets. `inverse` yields predictions for the whole
    /// batch and is called only if some example still needs its target.
    pub fn oneoff_targets(
        &mut self,
        indices: &[usize],
        epoch: usize,
        natural: &Tensor,
        inverse: impl FnOnce() -> Result<Tensor>,
    ) -> Result<Tensor> {
        let StoreMode::OneOff { epoch: at } = self.mode else {
            return Err(Error::Config("oneoff_targets on a momentum store".into()));
        };
        let needs = epoch == at && indices.iter().any(|&i| self.get(i).is_none());
        let generated = if needs { Some(inverse()?) } else { None };
        let mut rows = Vec::with_capacity(natural.len());
        for (j, &i) in indices.iter().enumerate() {
            let row = self.oneoff_target(i, epoch, natural.row(j), || {
                Ok(generated
                    .as_ref()
                    .expect("generated when a target is missing")
                    .row(j)
                    .to_vec())
            })?;
            rows.extend(row);
        }
        Tensor::new(natural.shape().to_vec(), rows)
    }

    /// Writes `index,epoch,p0,…` for every stored example.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.classes).map(|c| format!("p{c}")).collect();
        writeln!(out, "index,epoch,{}", header.join(","))?;
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(e) = e {
                let probs: Vec<String> = e.probs.iter().map(|p| p.to_string()).collect();
                writeln!(out, "{i},{},{}", e.epoch, probs.join(","))?;
            }
        }
        Ok(())
    }
}
