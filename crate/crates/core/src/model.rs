//! Small classifiers exposing both logits and penultimate features.

use std::fmt;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::trace::{NodeId, Trace};

/// Padding used by both convolutions of the small CNN (shape-preserving 3×3).
pub const CNN_PADDING: usize = 1;
pub const CNN_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected ReLU network with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// conv(3×3)-relu-conv(3×3)-relu-flatten-dense-relu-dense.
    SmallCnn { channels: [usize; 2], dense: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub arch: Architecture,
    /// Shape of one example: `[D]` for the MLP, `[C, H, W]` for the CNN.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl NetworkSpec {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: vec![input],
            classes,
        }
    }

    pub fn small_cnn(input_shape: [usize; 3], classes: usize) -> Self {
        Self {
            arch: Architecture::SmallCnn {
                channels: [16, 32],
                dense: 128,
            },
            input_shape: input_shape.to_vec(),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "degenerate input shape {:?}",
                self.input_shape
            )));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.is_empty() {
                    return Err(Error::Config("mlp needs at least one hidden layer".into()));
                }
                if hidden.contains(&0) {
                    return Err(Error::Config(format!(
                        "zero-width hidden layer in {hidden:?}"
                    )));
                }
                if self.input_shape.len() != 1 {
                    return Err(Error::Config(format!(
                        "mlp takes flat inputs, got {:?}",
                        self.input_shape
                    )));
                }
            }
            Architecture::SmallCnn { channels, dense } => {
                if channels.contains(&0) || *dense == 0 {
                    return Err(Error::Config("zero-width small-cnn layer".into()));
                }
                if self.input_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "small-cnn takes C×H×W inputs, got {:?}",
                        self.input_shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// Width of the penultimate layer.
    pub fn feature_dim(&self) -> usize {
        match &self.arch {
            Architecture::Mlp { hidden } => *hidden.last().expect("validated"),
            Architecture::SmallCnn { dense, .. } => *dense,
        }
    }

    /// Parameter shapes in storage order (weight, bias per layer).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut fan_in = self.input_shape[0];
                for &w in hidden.iter().chain(std::iter::once(&self.classes)) {
                    shapes.push(vec![fan_in, w]);
                    shapes.push(vec![w]);
                    fan_in = w;
                }
            }
            Architecture::SmallCnn { channels, dense } => {
                let [c_in, h, w] = [
                    self.input_shape[0],
                    self.input_shape[1],
                    self.input_shape[2],
                ];
                let k = CNN_KERNEL;
                shapes.push(vec![channels[0], c_in, k, k]);
                shapes.push(vec![channels[0]]);
                shapes.push(vec![channels[1], channels[0], k, k]);
                shapes.push(vec![channels[1]]);
                let conv_out = |n: usize| (n + 2 * CNN_PADDING + 1).saturating_sub(k);
                let flat = channels[1] * conv_out(conv_out(h)) * conv_out(conv_out(w));
                shapes.push(vec![flat, *dense]);
                shapes.push(vec![*dense]);
                shapes.push(vec![*dense, self.classes]);
                shapes.push(vec![self.classes]);
            }
        }
        shapes
    }

    /// Single-line descriptor stored in checkpoints.
    pub fn descriptor(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        match &self.arch {
            Architecture::Mlp { hidden } => format!(
                "arch=mlp;input={};hidden={};classes={}",
                join(&self.input_shape),
                join(hidden),
                self.classes
            ),
            Architecture::SmallCnn { channels, dense } => format!(
                "arch=small-cnn;input={};channels={};dense={};classes={}",
                join(&self.input_shape),
                join(channels),
                dense,
                self.classes
            ),
        }
    }

    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Descriptor(format!("{m} in {text:?}"));
        let mut fields = std::collections::BTreeMap::new();
        for part in text.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("missing '='"))?;
            fields.insert(k.trim(), v.trim());
        }
        let list = |key: &str| -> Result<Vec<usize>> {
            let raw = fields
                .get(key)
                .ok_or_else(|| bad(&format!("missing {key}")))?;
            raw.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| bad(&format!("bad {key}")))
                })
                .collect()
        };
        let single = |key: &str| -> Result<usize> {
            let v = list(key)?;
            match v.as_slice() {
                [x] => Ok(*x),
                _ => Err(bad(&format!("{key} must be one number"))),
            }
        };
        let arch = match fields.get("arch").copied() {
            Some("mlp") => Architecture::Mlp {
                hidden: list("hidden")?,
            },
            Some("small-cnn") => {
                let ch = list("channels")?;
                let channels: [usize; 2] = ch
                    .try_into()
                    .map_err(|_| bad("channels must have two entries"))?;
                Architecture::SmallCnn {
                    channels,
                    dense: single("dense")?,
                }
            }
            _ => return Err(bad("unknown arch")),
        };
        let spec = Self {
            arch,
            input_shape: list("input")?,
            classes: single("classes")?,
        };
        spec.validate()
            .map_err(|e| Error::Descriptor(e.to_string()))?;
        Ok(spec)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

/// Node handles for one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub features: NodeId,
    pub logits: NodeId,
}

/// A recorded forward pass, ready for [`Trace::backward`].
#[derive(Debug)]
pub struct Recording {
    pub trace: Trace,
    pub input: NodeId,
    pub params: Vec<NodeId>,
    pub nodes: ForwardNodes,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Penultimate activations, `[B×D]`.
    pub features: Tensor,
    /// `[B×C]`.
    pub logits: Tensor,
    pub recording: Option<Recording>,
}

impl ForwardOutput {
    pub fn probabilities(&self) -> Tensor {
        softmax_rows(&self.logits)
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.argmax_rows()
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut data = vec![0.0f32; logits.len()];
    for r in 0..logits.batch() {
        crate::kernels::softmax_row(logits.row(r), &mut data[r * c..(r + 1) * c]);
    }
    Tensor::new(logits.shape().to_vec(), data).expect("same shape as logits")
}

/// Anything that can be attacked, inverted and trained through a trace.
pub trait Classifier: Sync {
    /// Shape of one example.
    fn input_shape(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    /// Places the parameters on `trace`, as leaves when `trainable`.
    fn bind(&self, trace: &mut Trace, trainable: bool) -> Result<Vec<NodeId>>;

    /// Records the forward pass of a batch node against bound parameters.
    fn forward_bound(
        &self,
        trace: &mut Trace,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<ForwardNodes>;

    /// [`Classifier::forward_bound`], counted as one forward pass.
    fn forward_on(&self, trace: &mut Trace, params: &[NodeId], x: NodeId) -> Result<ForwardNodes> {
        crate::counters::record_forward();
        self.forward_bound(trace, params, x)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape().len() + 1 || &x.shape()[1..] != self.input_shape() {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {:?} does not match [B, {:?}]",
                    x.shape(),
                    self.input_shape()
                ),
            ));
        }
        Ok(())
    }

    /// One forward pass; with `record` the trace is kept with the input and
    /// parameters as differentiable leaves.
    fn forward(&self, x: &Tensor, record: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut trace = Trace::new();
        let params = self.bind(&mut trace, record)?;
        let input = if record {
            trace.leaf(x.clone())?
        } else {
            trace.constant(x.clone())?
        };
        let nodes = self.forward_on(&mut trace, &params, input)?;
        let features = trace.value(nodes.features)?.clone();
        let logits = trace.value(nodes.logits)?.clone();
        Ok(ForwardOutput {
            features,
            logits,
            recording: record.then_some(Recording {
                trace,
                input,
                params,
                nodes,
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
    pub seed: u64,
}

impl NetworkState {
    /// He-scaled Gaussian weights, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite sd");
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Tensor::new(shape, data).expect("shape from spec")
            })
            .collect();
        Ok(Self { spec, params, seed })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "spec needs {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (index, (shape, p)) in expected.iter().zip(&params).enumerate() {
            if p.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    index,
                    expected: shape.clone(),
                    found: p.shape().to_vec(),
                });
            }
            p.check_finite("parameters")?;
        }
        Ok(Self { spec, params, seed })
    }

    pub fn with_params(&self, params: Vec<Tensor>) -> Self {
        Self {
            spec: self.spec.clone(),
            params,
            seed: self.seed,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

impl Classifier for NetworkState {
    fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    fn num_classes(&self) -> usize {
        self.spec.classes
    }

    fn bind(&self, trace: &mut Trace, trainable: bool) -> Result<Vec<NodeId>> {
        self.params
            .iter()
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
        match &self.spec.arch {
            Architecture::Mlp { hidden } => {
                let mut h = x;
                for layer in 0..hidden.len() {
                    let z = trace.matmul(h, params[2 * layer])?;
                    let z = trace.add_bias(z, params[2 * layer + 1])?;
                    h = trace.relu(z)?;
                }
                let out = hidden.len();
                let z = trace.matmul(h, params[2 * out])?;
                let logits = trace.add_bias(z, params[2 * out + 1])?;
                Ok(ForwardNodes {
                    features: h,
                    logits,
                })
            }
            Architecture::SmallCnn { .. } => {
                let mut h = x;
                for layer in 0..2 {
                    let z = trace.conv2d(h, params[2 * layer], CNN_PADDING)?;
                    let z = trace.add_bias(z, params[2 * layer + 1])?;
                    h = trace.relu(z)?;
                }
                let flat = trace.flatten(h)?;
                let z = trace.matmul(flat, params[4])?;
                let z = trace.add_bias(z, params[5])?;
                let features = trace.relu(z)?;
                let z = trace.matmul(features, params[6])?;
                let logits = trace.add_bias(z, params[7])?;
                Ok(ForwardNodes { features, logits })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons_spec() -> NetworkSpec {
        NetworkSpec::mlp(2, &[64, 64], 2)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = NetworkState::init(moons_spec(), 3).unwrap();
        let b = NetworkState::init(moons_spec(), 3).unwrap();
        assert!(a.params.iter().zip(&b.params).all(|(x, y)| x.bit_eq(y)));
        for bias in a.params.iter().filter(|p| p.rank() == 1) {
            assert!(bias.data().iter().all(|&v| v == 0.0));
        }
        let c = NetworkState::init(moons_spec(), 4).unwrap();
        assert!(!a.params[0].bit_eq(&c.params[0]));
    }

    #[test]
    fn he_variance_on_large_layer() {
        // 100 × 100 = 10k weights; expected variance 2 / 100.
        let spec = NetworkSpec::mlp(100, &[100], 2);
        let state = NetworkState::init(spec, 11).unwrap();
        let w = state.params[0].data();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / 100.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var}");
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(NetworkState::init(NetworkSpec::mlp(2, &[0], 2), 0).is_err());
        assert!(NetworkState::init(NetworkSpec::mlp(2, &[], 2), 0).is_err());
        assert!(NetworkState::init(NetworkSpec::mlp(2, &[4], 1), 0).is_err());
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let mut state = NetworkState::init(NetworkSpec::mlp(2, &[8], 3), 1).unwrap();
        let last = state.params.len() - 2;
        state.params[last] = Tensor::zeros(state.params[last].shape());
        let x = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let probs = state.forward(&x, false).unwrap().probabilities();
        for &p in probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_independence() {
        let state = NetworkState::init(moons_spec(), 5).unwrap();
        let rows: Vec<Vec<f32>> = (0..32)
            .map(|i| vec![(i as f32 * 0.37).sin(), (i as f32 * 0.11).cos()])
            .collect();
        let batch = Tensor::from_rows(&rows).unwrap();
        let all = state.forward(&batch, false).unwrap();
        for i in [0, 7, 31] {
            let one = state
                .forward(&Tensor::from_rows(&[rows[i].clone()]).unwrap(), false)
                .unwrap();
            for (a, b) in one.logits.row(0).iter().zip(all.logits.row(i)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
        let dup = Tensor::from_rows(&[rows[3].clone(), rows[3].clone()]).unwrap();
        let out = state.forward(&dup, false).unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(1));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let state = NetworkState::init(moons_spec(), 5).unwrap();
        assert!(state.forward(&Tensor::zeros(&[4, 3]), false).is_err());
    }

    #[test]
    fn hidden_unit_permutation_preserves_logits() {
        let state = NetworkState::init(NetworkSpec::mlp(2, &[6, 5], 3), 9).unwrap();
        // Give biases nonzero values so their permutation matters.
        let mut params = state.params.clone();
        for p in params.iter_mut().filter(|p| p.rank() == 1) {
            let n = p.len();
            *p = Tensor::new(vec![n], (0..n).map(|i| 0.1 * i as f32 - 0.2).collect()).unwrap();
        }
        let base = state.with_params(params.clone());
        let perm = [3usize, 0, 5, 1, 4, 2];
        // Layer 0 columns, bias 0, and layer 1 rows are permuted together.
        let w0 = &params[0];
        let (fan_in, width) = (w0.shape()[0], w0.shape()[1]);
        let mut w0p = vec![0.0; w0.len()];
        for r in 0..fan_in {
            for (new, &old) in perm.iter().enumerate() {
                w0p[r * width + new] = w0.data()[r * width + old];
            }
        }
        let b0p: Vec<f32> = perm.iter().map(|&o| params[1].data()[o]).collect();
        let w1 = &params[2];
        let out = w1.shape()[1];
        let mut w1p = vec![0.0; w1.len()];
        for (new, &old) in perm.iter().enumerate() {
            w1p[new * out..(new + 1) * out].copy_from_slice(&w1.data()[old * out..(old + 1) * out]);
        }
        let mut permuted = params.clone();
        permuted[0] = Tensor::new(w0.shape().to_vec(), w0p).unwrap();
        permuted[1] = Tensor::new(vec![width], b0p).unwrap();
        permuted[2] = Tensor::new(w1.shape().to_vec(), w1p).unwrap();
        let other = state.with_params(permuted);
        let x = Tensor::from_rows(&[vec![0.5, -0.25], vec![-1.5, 2.0]]).unwrap();
        let a = base.forward(&x, false).unwrap().logits;
        let b = other.forward(&x, false).unwrap().logits;
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
    }

    #[test]
    fn small_cnn_shapes() {
        let spec = NetworkSpec::small_cnn([1, 6, 6], 4);
        let state = NetworkState::init(spec.clone(), 2).unwrap();
        let out = state
            .forward(&Tensor::filled(&[2, 1, 6, 6], 0.5), false)
            .unwrap();
        assert_eq!(out.features.shape(), &[2, 128]);
        assert_eq!(out.logits.shape(), &[2, 4]);
        assert_eq!(spec.param_shapes()[4], vec![32 * 36, 128]);
    }

    #[test]
    fn descriptor_roundtrip() {
        for spec in [moons_spec(), NetworkSpec::small_cnn([1, 28, 28], 10)] {
            assert_eq!(
                NetworkSpec::parse_descriptor(&spec.descriptor()).unwrap(),
                spec
            );
        }
        assert!(NetworkSpec::parse_descriptor("arch=rnn;input=2;classes=2").is_err());
    }
}
