//! Flat `section.key = value` run configuration.
//!
//! Every key is declared in [`SCHEMA`] with a default; unknown keys and
//! values of the wrong type are rejected. Values written as `auto` are
//! derived from other keys when the configuration is resolved.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::attack::{AttackConfig, LossKind};
use crate::data::{gaussian_blobs, load_idx, two_moons, Dataset};
use crate::error::{Error, Result};
use crate::inverse::InverseConfig;
use crate::model::NetworkSpec;
use crate::objective::{ObjectiveKind, ObjectiveTag};
use crate::optim::SgdConfig;
use crate::trainer::{Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Float,
    Int,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    /// Comma-separated positive integers.
    List,
    /// Float, or `auto`.
    AutoFloat,
    /// Integer, or `auto`.
    AutoInt,
}

#[derive(Debug, Clone, Copy)]
pub struct KeyDef {
    pub key: &'static str,
    pub kind: ValueKind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn def(
    key: &'static str,
    kind: ValueKind,
    default: &'static str,
    help: &'static str,
) -> KeyDef {
    KeyDef {
        key,
        kind,
        default,
        help,
    }
}

use ValueKind::*;

pub const OBJECTIVES: &[&str] = &[
    "natural",
    "sat",
    "trades",
    "iat",
    "uiat",
    "uiat-oneoff",
    "singlestep",
    "singlestep-uiat",
];

pub const SCHEMA: &[KeyDef] = &[
    def("run.seed", Int, "0", "master seed; IAT_SEED overrides"),
    def(
        "data.kind",
        Choice(&["two-moons", "blobs", "idx"]),
        "two-moons",
        "dataset source",
    ),
    def(
        "data.train_size",
        Int,
        "2000",
        "synthetic training examples",
    ),
    def("data.test_size", Int, "1000", "synthetic test examples"),
    def("data.noise", Float, "0.1", "two-moons noise sd / blob sd"),
    def(
        "data.seed",
        Int,
        "1",
        "training data seed; test data uses seed + 1000",
    ),
    def(
        "data.blobs",
        Int,
        "3",
        "number of blob centers, evenly spaced on a circle of radius 3",
    ),
    def("data.train_images", Text, "", "IDX training images"),
    def("data.train_labels", Text, "", "IDX training labels"),
    def("data.test_images", Text, "", "IDX test images"),
    def("data.test_labels", Text, "", "IDX test labels"),
    def(
        "model.arch",
        Choice(&["mlp", "small-cnn"]),
        "mlp",
        "architecture",
    ),
    def("model.hidden", List, "64,64", "MLP hidden widths"),
    def(
        "objective.kind",
        Choice(OBJECTIVES),
        "uiat",
        "training objective",
    ),
    def(
        "objective.lambda",
        Float,
        "3.5",
        "weight of the inverse KL term",
    ),
    def("objective.omega", Float, "6", "TRADES weight"),
    def(
        "attack.preset",
        Choice(&["pgd", "fgsm", "rs-fgsm", "n-fgsm"]),
        "pgd",
        "training attack family",
    ),
    def("attack.epsilon", Float, "0.1", "training attack radius"),
    def(
        "attack.step_size",
        AutoFloat,
        "auto",
        "PGD: ε/4; single-step: preset",
    ),
    def("attack.steps", Int, "10", "PGD steps"),
    def(
        "attack.loss",
        Choice(&["ce", "cw", "kl"]),
        "ce",
        "ascent objective (trades forces kl)",
    ),
    def(
        "inverse.epsilon",
        AutoFloat,
        "auto",
        "inverse radius ε′, default ε/2",
    ),
    def(
        "inverse.step_size",
        AutoFloat,
        "auto",
        "instance step, default ε′/2",
    ),
    def(
        "inverse.universal_step_size",
        AutoFloat,
        "auto",
        "bank step, default ε′",
    ),
    def("inverse.steps", Int, "5", "instance descent steps"),
    def("inverse.beta", Float, "1", "triplet weight β"),
    def("train.epochs", Int, "40", "epochs"),
    def("train.batch_size", Int, "128", "batch size"),
    def("train.lr", Float, "0.1", "peak learning rate"),
    def("train.momentum", Float, "0.9", "Nesterov momentum"),
    def("train.weight_decay", Float, "0.0005", "weight decay"),
    def(
        "train.schedule",
        Choice(&["cyclic", "constant"]),
        "cyclic",
        "learning-rate schedule",
    ),
    def(
        "train.gamma",
        Float,
        "0.9",
        "momentum factor of the probability store",
    ),
    def(
        "train.momentum_start",
        AutoInt,
        "auto",
        "first momentum epoch, default round(0.75·epochs)",
    ),
    def(
        "train.oneoff_epoch",
        AutoInt,
        "auto",
        "one-off epoch, default round(0.8·epochs)",
    ),
    def(
        "train.post_update_target",
        Bool,
        "false",
        "use the bank after its step for targets",
    ),
    def(
        "train.flow_through",
        Bool,
        "false",
        "back-propagate through live inverse targets",
    ),
    def(
        "train.report_examples",
        Int,
        "0",
        "examples for per-epoch accuracies (0 = all)",
    ),
    def(
        "train.checkpoint_every",
        Int,
        "0",
        "checkpoint cadence in epochs (0 = final only)",
    ),
    def(
        "eval.epsilon",
        AutoFloat,
        "auto",
        "evaluation radius, default attack.epsilon",
    ),
    def(
        "eval.step_size",
        AutoFloat,
        "auto",
        "evaluation step, default ε/4",
    ),
    def("eval.steps", Int, "20", "evaluation PGD steps"),
    def(
        "eval.loss",
        Choice(&["ce", "cw"]),
        "ce",
        "evaluation ascent objective",
    ),
    def(
        "output.timing",
        Bool,
        "true",
        "write wall time into the epoch report",
    ),
    def(
        "output.dump_momentum",
        Bool,
        "false",
        "write the probability store as CSV",
    ),
];

fn lookup(key: &str) -> Option<&'static KeyDef> {
    SCHEMA.iter().find(|d| d.key == key)
}

fn check_value(d: &KeyDef, value: &str) -> Result<()> {
    let bad = |what: &str| {
        Err(Error::Config(format!(
            "{} expects {what}, got {value:?}",
            d.key
        )))
    };
    let ok = match d.kind {
        Float => value.parse::<f32>().is_ok_and(f32::is_finite),
        Int => value.parse::<u64>().is_ok(),
        Bool => matches!(value, "true" | "false"),
        Text => true,
        Choice(options) => {
            if options.contains(&value) {
                true
            } else {
                return bad(&format!("one of {}", options.join("|")));
            }
        }
        List => {
            !value.is_empty()
                && value
                    .split(',')
                    .all(|p| p.trim().parse::<usize>().is_ok_and(|v| v > 0))
        }
        AutoFloat => value == "auto" || value.parse::<f32>().is_ok_and(f32::is_finite),
        AutoInt => value == "auto" || value.parse::<u64>().is_ok(),
    };
    if ok {
        Ok(())
    } else {
        bad(match d.kind {
            Float | AutoFloat => "a finite number",
            Int | AutoInt => "a non-negative integer",
            Bool => "true or false",
            List => "comma-separated positive integers",
            _ => "a value",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA
                .iter()
                .map(|d| (d.key, d.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `section.key = value`", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = lookup(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        check_value(d, value)?;
        self.values.insert(d.key, value.to_string());
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not in the schema"))
    }

    fn float(&self, key: &str) -> f32 {
        self.get(key).parse().expect("validated float")
    }

    fn int(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated integer")
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    fn set_auto(&mut self, key: &'static str, value: impl fmt::Display) {
        if self.values[key] == "auto" {
            self.values.insert(key, value.to_string());
        }
    }

    /// Replaces every `auto` with its derived value.
    pub fn resolve(&mut self) -> Result<()> {
        let eps = self.float("attack.epsilon");
        let preset = self.get("attack.preset").to_string();
        let step = match preset.as_str() {
            "pgd" => eps / 4.0,
            "fgsm" | "n-fgsm" => eps,
            _ => 1.25 * eps,
        };
        self.set_auto("attack.step_size", step);
        self.set_auto("inverse.epsilon", eps / 2.0);
        let inv = self.float("inverse.epsilon");
        self.set_auto("inverse.step_size", inv / 2.0);
        self.set_auto("inverse.universal_step_size", inv);
        let epochs = self.int("train.epochs");
        self.set_auto(
            "train.momentum_start",
            crate::momentum::momentum_start_epoch(epochs),
        );
        self.set_auto("train.oneoff_epoch", crate::momentum::oneoff_epoch(epochs));
        self.set_auto("eval.epsilon", eps);
        let eval_eps = self.float("eval.epsilon");
        self.set_auto("eval.step_size", eval_eps / 4.0);
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.get("run.seed").parse().expect("validated integer")
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let seed: u64 = self.get("data.seed").parse().expect("validated integer");
        let noise = self.float("data.noise");
        match self.get("data.kind") {
            "two-moons" => Ok((
                two_moons(self.int("data.train_size"), noise, seed)?,
                two_moons(self.int("data.test_size"), noise, seed + 1000)?,
            )),
            "blobs" => {
                let k = self.int("data.blobs");
                let centers: Vec<Vec<f32>> = (0..k)
                    .map(|c| {
                        let a = 2.0 * std::f32::consts::PI * c as f32 / k as f32;
                        vec![3.0 * a.cos(), 3.0 * a.sin()]
                    })
                    .collect();
                Ok((
                    gaussian_blobs(self.int("data.train_size"), &centers, noise, seed)?,
                    gaussian_blobs(self.int("data.test_size"), &centers, noise, seed + 1000)?,
                ))
            }
            _ => {
                let path = |key: &str| -> Result<PathBuf> {
                    let p = self.get(key);
                    if p.is_empty() {
                        return Err(Error::Config(format!("{key} is required for idx data")));
                    }
                    Ok(PathBuf::from(p))
                };
                let train = load_idx(&path("data.train_images")?, &path("data.train_labels")?)?;
                let test = load_idx(&path("data.test_images")?, &path("data.test_labels")?)?;
                let classes = train.classes.max(test.classes);
                let widen = |d: Dataset| Dataset::new(d.inputs, d.labels, classes, d.domain);
                Ok((widen(train)?, widen(test)?))
            }
        }
    }

    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let shape = data.input_shape().to_vec();
        let spec = match self.get("model.arch") {
            "mlp" => {
                let input: usize = shape.iter().product();
                if shape.len() != 1 {
                    return Err(Error::Config(format!(
                        "mlp needs flat inputs, data has shape {shape:?}"
                    )));
                }
                let hidden: Vec<usize> = self
                    .get("model.hidden")
                    .split(',')
                    .map(|s| s.trim().parse().expect("validated list"))
                    .collect();
                NetworkSpec::mlp(input, &hidden, data.classes)
            }
            _ => {
                let [c, h, w] = shape.as_slice() else {
                    return Err(Error::Config(format!(
                        "small-cnn needs [C, H, W] inputs, data has shape {shape:?}"
                    )));
                };
                NetworkSpec::small_cnn([*c, *h, *w], data.classes)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `checkpoint_dir` receives periodic checkpoints when
    /// `train.checkpoint_every` is non-zero.
    pub fn train_config(&self, checkpoint_dir: Option<&Path>) -> Result<TrainConfig> {
        let tag = ObjectiveTag::parse(self.get("objective.kind")).expect("validated choice");
        let eps = self.float("attack.epsilon");
        let mut attack = match self.get("attack.preset") {
            "pgd" => AttackConfig::pgd(
                eps,
                self.float("attack.step_size"),
                self.int("attack.steps"),
            ),
            "fgsm" => AttackConfig::fgsm(eps),
            "rs-fgsm" => AttackConfig::rs_fgsm(eps),
            _ => AttackConfig::n_fgsm(eps),
        };
        attack.step_size = self.float("attack.step_size");
        attack.loss = LossKind::parse(self.get("attack.loss")).expect("validated choice");
        if tag == ObjectiveTag::Trades {
            attack.loss = LossKind::Kl;
            attack.init_radius_factor = 0.001 / eps.max(f32::MIN_POSITIVE);
        }
        let inverse = InverseConfig {
            epsilon: self.float("inverse.epsilon"),
            step_size: self.float("inverse.step_size"),
            universal_step_size: self.float("inverse.universal_step_size"),
            steps: self.int("inverse.steps"),
            beta: self.float("inverse.beta"),
            clamp: None,
        };
        let cfg = TrainConfig {
            objective: ObjectiveKind {
                tag,
                lambda: self.float("objective.lambda"),
                omega: self.float("objective.omega"),
            },
            attack,
            inverse,
            epochs: self.int("train.epochs"),
            batch_size: self.int("train.batch_size"),
            peak_lr: self.float("train.lr"),
            sgd: SgdConfig {
                momentum: self.float("train.momentum"),
                weight_decay: self.float("train.weight_decay"),
            },
            schedule: Schedule::parse(self.get("train.schedule")).expect("validated choice"),
            gamma: self.float("train.gamma"),
            momentum_start: Some(self.int("train.momentum_start")),
            oneoff_epoch: Some(self.int("train.oneoff_epoch")),
            post_update_target: self.flag("train.post_update_target"),
            flow_through: self.flag("train.flow_through"),
            report_examples: self.int("train.report_examples"),
            seed: self.seed(),
            checkpoint_every: self.int("train.checkpoint_every"),
            checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_attack(&self, clamp: Option<(f32, f32)>) -> Result<AttackConfig> {
        let mut cfg = AttackConfig::pgd(
            self.float("eval.epsilon"),
            self.float("eval.step_size"),
            self.int("eval.steps"),
        )
        .with_clamp(clamp);
        cfg.loss = LossKind::parse(self.get("eval.loss")).expect("validated choice");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn timing(&self) -> bool {
        self.flag("output.timing")
    }

    pub fn dump_momentum(&self) -> bool {
        self.flag("output.dump_momentum")
    }
}

/// `key = value` lines in schema order.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in SCHEMA {
            writeln!(f, "{} = {}", d.key, self.values[d.key])?;
        }
        Ok(())
    }
}
