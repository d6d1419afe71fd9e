//! Training loops for every objective: natural, SAT, TRADES, IAT, UIAT
//! (momentum and one-off) and single-step AT with or without the universal
//! inverse term.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attack::{pgd_attack, single_step_attack, AttackConfig, LossKind};
use crate::checkpoint;
use crate::counters::{self, PassCount};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::inverse::{instance_inverse, Anchors, InverseConfig, UniversalBank};
use crate::model::{softmax_rows, Classifier, NetworkSpec, NetworkState};
use crate::momentum::{momentum_start_epoch, oneoff_epoch, ProbStore, StoreMode};
use crate::objective::{
    build_cross_entropy, build_inverse_live, build_targeted, build_trades, ObjectiveKind,
    ObjectiveTag,
};
use crate::optim::{cyclic_lr, sgd_nesterov_step, SgdConfig};
use crate::rng::{self, derive_seed, Stream};
use crate::tensor::Tensor;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Triangular one-cycle schedule peaking halfway through training.
    Cyclic,
    Constant,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Cyclic => "cyclic",
            Schedule::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cyclic" => Some(Schedule::Cyclic),
            "constant" => Some(Schedule::Constant),
            _ => None,
        }
    }

    /// Rate for update `k` of `total`. Cyclic rates are sampled at the middle
    /// of each update's interval, so no update runs at exactly zero.
    pub fn rate(self, k: usize, total: usize, peak: f32) -> f32 {
        match self {
            Schedule::Cyclic => cyclic_lr(k as f64 + 0.5, total as f64, peak),
            Schedule::Constant => peak,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    /// Attack used to craft training adversaries; also reports per-epoch
    /// robust accuracy.
    pub attack: AttackConfig,
    pub inverse: InverseConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub sgd: SgdConfig,
    pub schedule: Schedule,
    /// Momentum factor γ of the probability store.
    pub gamma: f32,
    /// First momentum epoch; defaults to 75% of the budget.
    pub momentum_start: Option<usize>,
    /// One-off generation epoch; defaults to 80% of the budget.
    pub oneoff_epoch: Option<usize>,
    /// Use `f(x + z_y)` after the bank step as the target rather than before.
    pub post_update_target: bool,
    /// Let gradients reach the model through the live inverse target.
    pub flow_through: bool,
    /// Examples used for the per-epoch accuracies (0 = all).
    pub report_examples: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale defaults at radius ε: PGD-10 with α = ε/4, ε′ = ε/2, λ = 3.5,
    /// β = 1, γ = 0.9, peak rate 0.1, weight decay 5e-4, batch 128.
    pub fn new(tag: ObjectiveTag, epsilon: f32, epochs: usize) -> Self {
        let attack = if tag.single_step() {
            AttackConfig::rs_fgsm(epsilon)
        } else {
            AttackConfig::pgd_scaled(epsilon, 10)
        };
        let attack = if tag == ObjectiveTag::Trades {
            AttackConfig {
                init_radius_factor: 0.001 / epsilon.max(f32::MIN_POSITIVE),
                ..attack.with_loss(LossKind::Kl)
            }
        } else {
            attack
        };
        Self {
            objective: ObjectiveKind::new(tag),
            attack,
            inverse: InverseConfig::scaled(epsilon / 2.0),
            epochs,
            batch_size: 128,
            peak_lr: 0.1,
            sgd: SgdConfig::default(),
            schedule: Schedule::Cyclic,
            gamma: 0.9,
            momentum_start: None,
            oneoff_epoch: None,
            post_update_target: false,
            flow_through: false,
            report_examples: 0,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn momentum_start(&self) -> usize {
        self.momentum_start
            .unwrap_or_else(|| momentum_start_epoch(self.epochs))
    }

    pub fn oneoff_epoch(&self) -> usize {
        self.oneoff_epoch
            .unwrap_or_else(|| oneoff_epoch(self.epochs))
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.attack.validate()?;
        self.inverse.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("momentum", self.sgd.momentum),
            ("weight_decay", self.sgd.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Config(
                "checkpoint_every needs a checkpoint directory".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate of the epoch's last update.
    pub lr: f32,
    pub train_nat_acc: f32,
    pub train_rob_acc: f32,
    /// Mean training objective over the epoch's batches.
    pub loss: f32,
    pub seconds: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Forward and backward passes spent inside training steps.
    pub passes: PassCount,
    pub batches: usize,
}

impl TrainReport {
    /// `epoch,lr,train_nat_acc,train_rob_acc,loss,seconds`. Wall time is the
    /// only column that varies between identical runs; `timing = false`
    /// writes it as 0.
    pub fn write_csv<W: Write>(&self, mut out: W, timing: bool) -> std::io::Result<()> {
        writeln!(out, "epoch,lr,train_nat_acc,train_rob_acc,loss,seconds")?;
        for r in &self.epochs {
            let secs = if timing { r.seconds } else { 0.0 };
            writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.lr, r.train_nat_acc, r.train_rob_acc, r.loss, secs
            )?;
        }
        Ok(())
    }

    /// Mean (forward, backward) passes per training batch.
    pub fn passes_per_batch(&self) -> (f64, f64) {
        let b = self.batches.max(1) as f64;
        (
            self.passes.forward as f64 / b,
            self.passes.backward as f64 / b,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: NetworkState,
    pub report: TrainReport,
    pub bank: Option<UniversalBank>,
    pub store: Option<ProbStore>,
}

/// What an observer sees after every update.
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// 0-based global update index.
    pub iteration: usize,
    pub rate: f32,
    pub loss: f32,
    pub indices: &'a [usize],
    pub state: &'a NetworkState,
    pub bank: Option<&'a UniversalBank>,
    pub passes: PassCount,
}

/// Seeded Fisher–Yates order of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, &[epoch as u64]));
    order
}

pub fn train(data: &Dataset, spec: NetworkSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let state = NetworkState::init(spec, derive_seed(cfg.seed, Stream::Init, &[]))?;
    train_from(data, state, cfg, |_| {})
}

struct Loop<'a> {
    data: &'a Dataset,
    cfg: TrainConfig,
    state: NetworkState,
    velocity: Vec<Tensor>,
    bank: Option<UniversalBank>,
    store: Option<ProbStore>,
}

/// Trains from an existing state, calling `observe` after every update.
pub fn train_from(
    data: &Dataset,
    state: NetworkState,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&BatchEvent<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if state.input_shape() != data.input_shape() || state.num_classes() != data.classes {
        return Err(Error::Config(format!(
            "model expects {:?} with {} classes, data has {:?} with {}",
            state.input_shape(),
            state.num_classes(),
            data.input_shape(),
            data.classes
        )));
    }
    let clamp = data.domain.clamp();
    let mut cfg = cfg.clone();
    cfg.attack.clamp = clamp;
    cfg.inverse.clamp = clamp;
    let tag = cfg.objective.tag;

    let bank = if tag.uses_bank() {
        Some(UniversalBank::init(
            data.classes,
            data.input_shape(),
            cfg.inverse.epsilon,
            derive_seed(cfg.seed, Stream::Bank, &[]),
        )?)
    } else {
        None
    };
    let store = match tag {
        ObjectiveTag::Uiat => Some(ProbStore::new(
            data.len(),
            data.classes,
            StoreMode::Momentum {
                gamma: cfg.gamma,
                start: cfg.momentum_start(),
            },
        )?),
        ObjectiveTag::UiatOneOff => Some(ProbStore::new(
            data.len(),
            data.classes,
            StoreMode::OneOff {
                epoch: cfg.oneoff_epoch(),
            },
        )?),
        _ => None,
    };
    let velocity = state
        .params
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let mut lp = Loop {
        data,
        cfg,
        state,
        velocity,
        bank,
        store,
    };

    let n = data.len();
    let per_epoch = n.div_ceil(lp.cfg.batch_size);
    let total = per_epoch * lp.cfg.epochs;
    let mut report = TrainReport::default();
    let mut iteration = 0;
    for epoch in 1..=lp.cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(n, lp.cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut rate = 0.0;
        for (batch, indices) in order.chunks(lp.cfg.batch_size).enumerate() {
            rate = lp.cfg.schedule.rate(iteration, total, lp.cfg.peak_lr);
            let before = counters::snapshot();
            let loss = lp
                .step(indices, epoch, batch, rate)
                .map_err(|e| diverged(e, epoch, batch))?;
            let passes = counters::snapshot() - before;
            report.passes += passes;
            report.batches += 1;
            loss_sum += f64::from(loss);
            observe(&BatchEvent {
                epoch,
                batch,
                iteration,
                rate,
                loss,
                indices,
                state: &lp.state,
                bank: lp.bank.as_ref(),
                passes,
            });
            iteration += 1;
        }
        let (nat, rob) = lp.epoch_accuracies(epoch)?;
        report.epochs.push(EpochRecord {
            epoch,
            lr: rate,
            train_nat_acc: nat,
            train_rob_acc: rob,
            loss: (loss_sum / per_epoch as f64) as f32,
            seconds: started.elapsed().as_secs_f64(),
            iterations: per_epoch,
        });
        if lp.cfg.checkpoint_every > 0 && epoch % lp.cfg.checkpoint_every == 0 {
            let dir = lp.cfg.checkpoint_dir.as_ref().expect("validated");
            checkpoint::save(
                &lp.state,
                lp.bank.as_ref(),
                &dir.join(format!("epoch-{epoch:04}.ckpt")),
            )?;
        }
    }
    Ok(TrainOutcome {
        state: lp.state,
        report,
        bank: lp.bank,
        store: lp.store,
    })
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Diverged { .. } => Error::TrainingDiverged {
            epoch,
            batch,
            reason: err.to_string(),
        },
        other => other,
    }
}

impl Loop<'_> {
    fn step(&mut self, indices: &[usize], epoch: usize, batch: usize, rate: f32) -> Result<f32> {
        let (x, y) = self.data.batch(indices);
        let coords = [epoch as u64, batch as u64];
        let attack_seed = derive_seed(self.cfg.seed, Stream::Attack, &coords);
        let inverse_seed = derive_seed(self.cfg.seed, Stream::Inverse, &coords);
        let cfg = &self.cfg;
        let obj = cfg.objective;
        let model = &self.state;

        let x_hat = match obj.tag {
            ObjectiveTag::Natural => None,
            t if t.single_step() => {
                Some(single_step_attack(model, &x, &y, &cfg.attack, attack_seed)?)
            }
            _ => Some(pgd_attack(model, &x, &y, &cfg.attack, attack_seed)?),
        };

        // Everything the loss needs that does not depend on θ.
        enum Plan {
            Natural,
            Adversarial,
            Trades,
            Targeted(Tensor),
            Live(Tensor),
        }
        let plan = match obj.tag {
            ObjectiveTag::Natural => Plan::Natural,
            ObjectiveTag::Sat | ObjectiveTag::SingleStep => Plan::Adversarial,
            ObjectiveTag::Trades => Plan::Trades,
            ObjectiveTag::Iat => {
                let x_check =
                    instance_inverse(model, &x, &y, x_hat.as_ref(), &cfg.inverse, inverse_seed)?;
                Plan::Live(x_check)
            }
            ObjectiveTag::Uiat => {
                let bank = self.bank.as_mut().expect("bank for uiat");
                let anchors = Anchors::when_needed(model, &x, x_hat.as_ref(), cfg.inverse.beta)?;
                let upd = bank.update(model, &x, &y, anchors.as_ref(), &cfg.inverse)?;
                let current = if cfg.post_update_target {
                    let moved = bank.apply(&x, &y, cfg.inverse.clamp)?;
                    softmax_rows(&model.forward(&moved, false)?.logits)
                } else {
                    upd.probabilities
                };
                let store = self.store.as_mut().expect("store for uiat");
                Plan::Targeted(store.momentum_targets(indices, &current, epoch)?)
            }
            ObjectiveTag::UiatOneOff => {
                let natural = softmax_rows(&model.forward(&x, false)?.logits);
                let store = self.store.as_mut().expect("store for one-off");
                let bank = self.bank.as_mut().expect("bank for one-off");
                let inverse = &cfg.inverse;
                let targets = store.oneoff_targets(indices, epoch, &natural, || {
                    let anchors = Anchors::when_needed(model, &x, x_hat.as_ref(), inverse.beta)?;
                    Ok(bank
                        .update(model, &x, &y, anchors.as_ref(), inverse)?
                        .probabilities)
                })?;
                Plan::Targeted(targets)
            }
            ObjectiveTag::SingleStepUiat => {
                let bank = self.bank.as_mut().expect("bank for single-step uiat");
                let inverse = InverseConfig {
                    beta: 0.0,
                    ..cfg.inverse
                };
                let upd = bank.update(model, &x, &y, None, &inverse)?;
                if cfg.flow_through {
                    Plan::Live(upd.x_check)
                } else {
                    Plan::Targeted(upd.probabilities)
                }
            }
        };

        let mut trace = Trace::new();
        let params = model.bind(&mut trace, true)?;
        let root = match plan {
            Plan::Natural => {
                let xn = trace.constant(x.clone())?;
                build_cross_entropy(&mut trace, model, &params, xn, &y)?
            }
            Plan::Adversarial => {
                let xh = trace.constant(x_hat.expect("adversary"))?;
                build_cross_entropy(&mut trace, model, &params, xh, &y)?
            }
            Plan::Trades => {
                let xn = trace.constant(x.clone())?;
                let xh = trace.constant(x_hat.expect("adversary"))?;
                build_trades(&mut trace, model, &params, xn, xh, &y, obj.omega)?
            }
            Plan::Targeted(target) => {
                let xh = trace.constant(x_hat.expect("adversary"))?;
                build_targeted(&mut trace, model, &params, xh, &y, &target, obj.lambda)?
            }
            Plan::Live(x_check) => {
                let xh = trace.constant(x_hat.expect("adversary"))?;
                let xc = trace.constant(x_check)?;
                build_inverse_live(
                    &mut trace,
                    model,
                    &params,
                    xh,
                    xc,
                    &y,
                    obj.lambda,
                    cfg.flow_through,
                )?
            }
        };
        let loss = trace.value(root)?.item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "training loss",
                iteration: batch,
            });
        }
        let grads = trace.backward(root)?;
        let grads = params
            .iter()
            .map(|&p| grads.wrt(&trace, p))
            .collect::<Result<Vec<_>>>()?;
        let (params, velocity) =
            sgd_nesterov_step(&self.state.params, &grads, &self.velocity, rate, cfg.sgd)?;
        self.state = self.state.with_params(params);
        self.velocity = velocity;
        Ok(loss)
    }

    fn epoch_accuracies(&self, epoch: usize) -> Result<(f32, f32)> {
        let subset;
        let data = if self.cfg.report_examples > 0 && self.cfg.report_examples < self.data.len() {
            subset = self
                .data
                .subset(&(0..self.cfg.report_examples).collect::<Vec<_>>());
            &subset
        } else {
            self.data
        };
        let nat = eval::natural_accuracy(&self.state, data)?;
        // Robustness is always reported under multi-step cross-entropy PGD.
        let attack = if self.cfg.objective.tag.single_step() {
            AttackConfig::pgd_scaled(self.cfg.attack.epsilon, 10).with_clamp(self.cfg.attack.clamp)
        } else {
            self.cfg.attack.with_loss(LossKind::CrossEntropy)
        };
        let seed = derive_seed(self.cfg.seed, Stream::Eval, &[epoch as u64]);
        let rob = eval::robust_accuracy(&self.state, data, &attack, seed)?;
        Ok((nat, rob))
    }
}
