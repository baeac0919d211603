//! Feature encoders: the four-block convolutional network used for image
//! tasks and a small MLP for vector inputs.
//!
//! Each convolutional block is a stride-1 "same" 3x3 convolution with bias,
//! batch normalization, 2x2 max-pooling and ReLU, in that order. The final
//! activation is flattened, so a 28x28x1 input yields 64 features and a
//! 32x32x3 input yields 2*2*64 = 256.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchNormMode, BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BATCH_NORM_EPSILON: f64 = 1e-5;
/// Default MLP output width, the size of the Conv-4 embedding on 28x28 inputs.
pub const DEFAULT_MLP_FEATURES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// `blocks` convolutional blocks of `filters` channels each.
    Conv { blocks: usize, filters: usize },
    /// Fully connected layers with ReLU between them; the last layer is linear.
    Mlp { hidden: Vec<usize> },
}

impl Architecture {
    /// The four 64-filter blocks used on image data.
    pub fn conv4() -> Self {
        Architecture::Conv {
            blocks: 4,
            filters: 64,
        }
    }

    /// Two hidden layers of 64 units; pair with [`DEFAULT_MLP_FEATURES`] outputs.
    pub fn mlp() -> Self {
        Architecture::Mlp {
            hidden: vec![64, 64],
        }
    }

    pub fn tag(&self) -> ArchitectureTag {
        match self {
            Architecture::Conv { .. } => ArchitectureTag::Conv4,
            Architecture::Mlp { .. } => ArchitectureTag::Mlp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureTag {
    Conv4,
    Mlp,
}

impl std::fmt::Display for ArchitectureTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchitectureTag::Conv4 => "conv4",
            ArchitectureTag::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for ArchitectureTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv4" => Ok(ArchitectureTag::Conv4),
            "mlp" => Ok(ArchitectureTag::Mlp),
            other => Err(Error::config(format!(
                "unknown architecture '{other}' (expected conv4 or mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_variance: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_variance: vec![1.0; channels],
            momentum: BATCH_NORM_MOMENTUM,
            epsilon: BATCH_NORM_EPSILON,
        }
    }

    /// Exponential moving average update from one train-mode batch. The
    /// variance estimate is the unbiased one.
    pub fn update(&mut self, stats: &BatchStats<f64>) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count as f64 - 1.0)
        } else {
            1.0
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            let v = (1.0 - m) * self.running_variance[c] + m * stats.variance[c] * correction;
            self.running_variance[c] = v.max(self.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f64>,
}

/// Parameters of the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub architecture: Architecture,
    /// `(h, w, c)` for convolutional encoders, `(dim)` for MLPs.
    pub input_shape: Vec<usize>,
    pub feature_dim: usize,
    pub tensors: Vec<NamedTensor>,
    pub batch_norm: Vec<BatchNormState>,
}

fn he_normal(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> Tensor<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn named(name: String, value: Tensor<f64>) -> NamedTensor {
    NamedTensor { name, value }
}

/// Initializes encoder weights from `N(0, 2 / fan_in)`; biases and batch-norm
/// shifts start at zero, batch-norm scales at one. `feature_dim` is only
/// used by the MLP; convolutional encoders derive it from the input shape.
pub fn init_encoder(
    architecture: &Architecture,
    input_shape: &[usize],
    feature_dim: usize,
    seed: u64,
) -> Result<EncoderParams> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    match architecture {
        Architecture::Conv { blocks, filters } => {
            let &[h, w, c] = input_shape else {
                return Err(Error::config(format!(
                    "convolutional encoder needs an (h, w, c) input shape, got {input_shape:?}"
                )));
            };
            let min_extent = 1usize << blocks;
            if h < min_extent || w < min_extent || c == 0 || *blocks == 0 || *filters == 0 {
                return Err(Error::config(format!(
                    "input {h}x{w}x{c} is too small for {blocks} pooling blocks (need spatial extents >= {min_extent})"
                )));
            }
            let mut tensors = Vec::new();
            let mut batch_norm = Vec::new();
            let mut in_ch = c;
            for b in 0..*blocks {
                tensors.push(named(
                    format!("block{b}.kernel"),
                    he_normal(&mut rng, &[3, 3, in_ch, *filters], 9 * in_ch),
                ));
                tensors.push(named(format!("block{b}.bias"), Tensor::zeros(&[*filters])));
                tensors.push(named(
                    format!("block{b}.bn.scale"),
                    Tensor::full(&[*filters], 1.0),
                ));
                tensors.push(named(
                    format!("block{b}.bn.shift"),
                    Tensor::zeros(&[*filters]),
                ));
                batch_norm.push(BatchNormState::new(*filters));
                in_ch = *filters;
            }
            let (fh, fw) = (h >> blocks, w >> blocks);
            Ok(EncoderParams {
                architecture: architecture.clone(),
                input_shape: input_shape.to_vec(),
                feature_dim: fh * fw * filters,
                tensors,
                batch_norm,
            })
        }
        Architecture::Mlp { hidden } => {
            let &[dim] = input_shape else {
                return Err(Error::config(format!(
                    "MLP encoder needs a flat input shape, got {input_shape:?}"
                )));
            };
            if dim == 0 || feature_dim == 0 || hidden.contains(&0) {
                return Err(Error::config("MLP layer sizes must be positive"));
            }
            let mut tensors = Vec::new();
            let mut fan_in = dim;
            for (i, &out) in hidden
                .iter()
                .chain(std::iter::once(&feature_dim))
                .enumerate()
            {
                tensors.push(named(
                    format!("layer{i}.weight"),
                    he_normal(&mut rng, &[fan_in, out], fan_in),
                ));
                tensors.push(named(format!("layer{i}.bias"), Tensor::zeros(&[out])));
                fan_in = out;
            }
            Ok(EncoderParams {
                architecture: architecture.clone(),
                input_shape: input_shape.to_vec(),
                feature_dim,
                tensors,
                batch_norm: Vec::new(),
            })
        }
    }
}

/// Graph nodes produced by one forward pass.
pub struct Encoded {
    pub features: Var,
    /// Leaf nodes of the parameters, in `EncoderParams::tensors` order.
    pub params: Vec<Var>,
    /// Batch statistics of each batch-norm layer (train mode only).
    pub batch_stats: Vec<BatchStats<f64>>,
}

impl EncoderParams {
    /// Builds an MLP from explicit `(weight (in, out), bias (out))` layers.
    pub fn mlp_from_layers(layers: Vec<(Tensor<f64>, Tensor<f64>)>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::config("MLP needs at least one layer"))?;
        let input_dim = first.0.shape()[0];
        let mut prev = input_dim;
        let mut tensors = Vec::new();
        let mut hidden = Vec::new();
        for (i, (w, b)) in layers.into_iter().enumerate() {
            if w.ndim() != 2 || w.shape()[0] != prev || b.shape() != [w.shape()[1]] {
                return Err(Error::config(format!(
                    "layer {i}: weight {:?} / bias {:?} do not chain from width {prev}",
                    w.shape(),
                    b.shape()
                )));
            }
            prev = w.shape()[1];
            hidden.push(prev);
            tensors.push(named(format!("layer{i}.weight"), w));
            tensors.push(named(format!("layer{i}.bias"), b));
        }
        hidden.pop();
        Ok(EncoderParams {
            architecture: Architecture::Mlp { hidden },
            input_shape: vec![input_dim],
            feature_dim: prev,
            tensors,
            batch_norm: Vec::new(),
        })
    }

    /// Checks that tensor names, shapes and batch-norm layers match what the
    /// architecture expects, e.g. after loading from disk.
    pub fn check_consistency(&self) -> Result<()> {
        let expected = init_encoder(&self.architecture, &self.input_shape, self.feature_dim, 0)?;
        let describe = |p: &EncoderParams| -> Vec<(String, Vec<usize>)> {
            p.tensors
                .iter()
                .map(|t| (t.name.clone(), t.value.shape().to_vec()))
                .collect()
        };
        if describe(&expected) != describe(self) || expected.feature_dim != self.feature_dim {
            return Err(Error::config(format!(
                "parameter tensors do not match a {} encoder on input {:?}",
                self.architecture.tag(),
                self.input_shape
            )));
        }
        let bn_ok = expected.batch_norm.len() == self.batch_norm.len()
            && expected
                .batch_norm
                .iter()
                .zip(&self.batch_norm)
                .all(|(e, s)| {
                    s.running_mean.len() == e.running_mean.len()
                        && s.running_variance.len() == e.running_variance.len()
                });
        if !bn_ok {
            return Err(Error::config(
                "batch-norm statistics do not match the architecture",
            ));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.numel()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.value)
    }

    /// Registers every parameter tensor as a trainable leaf of `graph`.
    pub fn register(&self, graph: &mut Graph<f64>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| graph.param(t.value.clone()))
            .collect()
    }

    fn check_batch(&self, batch: &Tensor<f64>, mode: Mode) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::contract(format!(
                "batch shape {shape:?} does not match encoder input (n, {:?})",
                self.input_shape
            )));
        }
        let n = shape[0];
        if mode == Mode::Train && n < 2 && !self.batch_norm.is_empty() {
            return Err(Error::contract(
                "train-mode encoding needs at least two examples for batch statistics",
            ));
        }
        Ok(n)
    }

    /// Records the forward pass of `input` on `graph` using already
    /// registered parameter nodes.
    pub fn forward_with(
        &self,
        graph: &mut Graph<f64>,
        params: &[Var],
        input: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats<f64>>)> {
        let n = self.check_batch(graph.value(input), mode)?;
        let mut stats = Vec::new();
        let mut x = input;
        match &self.architecture {
            Architecture::Conv { blocks, .. } => {
                for b in 0..*blocks {
                    let p = &params[4 * b..4 * b + 4];
                    let conv = graph.conv2d_same(x, p[0], p[1])?;
                    let bn_state = &self.batch_norm[b];
                    let bn_mode = match mode {
                        Mode::Train => BatchNormMode::Train,
                        Mode::Eval => BatchNormMode::Eval {
                            mean: &bn_state.running_mean,
                            variance: &bn_state.running_variance,
                        },
                    };
                    let (normed, s) =
                        graph.batch_norm(conv, p[2], p[3], bn_mode, bn_state.epsilon)?;
                    stats.extend(s);
                    let pooled = graph.max_pool2(normed)?;
                    x = graph.relu(pooled)?;
                }
                x = graph.reshape(x, vec![n, self.feature_dim])?;
            }
            Architecture::Mlp { .. } => {
                let layers = params.len() / 2;
                for l in 0..layers {
                    let h = graph.matmul(x, params[2 * l])?;
                    x = graph.add(h, params[2 * l + 1])?;
                    if l + 1 < layers {
                        x = graph.relu(x)?;
                    }
                }
            }
        }
        Ok((x, stats))
    }

    /// Registers parameters and records the forward pass.
    pub fn forward(&self, graph: &mut Graph<f64>, input: Var, mode: Mode) -> Result<Encoded> {
        let params = self.register(graph);
        let (features, batch_stats) = self.forward_with(graph, &params, input, mode)?;
        Ok(Encoded {
            features,
            params,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<f64>]) {
        for (state, s) in self.batch_norm.iter_mut().zip(stats) {
            state.update(s);
        }
    }
}

/// Encodes a batch without keeping the graph. Train mode also folds the
/// batch statistics into `params`' running averages.
pub fn encode(params: &mut EncoderParams, batch: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let input = g.constant(batch.clone());
    let out = params.forward(&mut g, input, mode)?;
    if mode == Mode::Train {
        params.update_running_stats(&out.batch_stats);
    }
    Ok(g.value(out.features).clone())
}

/// Eval-mode encoding; a pure function of `(params, batch)`.
pub fn encode_eval(params: &EncoderParams, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let input = g.constant(batch.clone());
    let out = params.forward(&mut g, input, Mode::Eval)?;
    Ok(g.value(out.features).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv4_on_omniglot_shape() {
        let p = init_encoder(&Architecture::conv4(), &[28, 28, 1], 0, 7).unwrap();
        assert_eq!(p.batch_norm.len(), 4);
        assert_eq!(p.tensor("block0.kernel").unwrap().shape(), &[3, 3, 1, 64]);
        assert_eq!(p.feature_dim, 64);
    }

    #[test]
    fn conv4_on_cifar_shape() {
        let p = init_encoder(&Architecture::conv4(), &[32, 32, 3], 0, 7).unwrap();
        assert_eq!(p.feature_dim, 256);
    }

    #[test]
    fn too_small_input_is_a_configuration_error() {
        let err = init_encoder(&Architecture::conv4(), &[15, 28, 1], 0, 7).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_encoder(&Architecture::conv4(), &[28, 28, 1], 0, 7).unwrap();
        let b = init_encoder(&Architecture::conv4(), &[28, 28, 1], 0, 7).unwrap();
        assert_eq!(a, b);
        let c = init_encoder(&Architecture::conv4(), &[28, 28, 1], 0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn he_initialization_variance() {
        let p = init_encoder(&Architecture::Mlp { hidden: vec![400] }, &[50], 4, 1).unwrap();
        let w = p.tensor("layer0.weight").unwrap().data();
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        // 2 / fan_in = 0.04, 20000 draws
        assert!((var - 0.04).abs() < 0.002, "{var}");
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut p = init_encoder(
            &Architecture::Conv {
                blocks: 2,
                filters: 4,
            },
            &[8, 8, 1],
            0,
            3,
        )
        .unwrap();
        let out = encode(&mut p, &Tensor::zeros(&[3, 8, 8, 1]), Mode::Train).unwrap();
        assert_eq!(out.shape(), &[3, 16]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_mlp_passes_inputs_through() {
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let p = EncoderParams::mlp_from_layers(vec![(eye, Tensor::zeros(&[3]))]).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, -0.25]]).unwrap();
        assert_eq!(encode_eval(&p, &x).unwrap(), x);
    }

    #[test]
    fn empty_and_singleton_batches_are_rejected() {
        let mut p = init_encoder(
            &Architecture::Conv {
                blocks: 1,
                filters: 2,
            },
            &[4, 4, 1],
            0,
            3,
        )
        .unwrap();
        let one = Tensor::zeros(&[1, 4, 4, 1]);
        assert!(matches!(
            encode(&mut p, &one, Mode::Train),
            Err(Error::Contract(_))
        ));
        assert!(encode(&mut p, &one, Mode::Eval).is_ok());
        let wrong = Tensor::zeros(&[2, 4, 4, 2]);
        assert!(matches!(
            encode(&mut p, &wrong, Mode::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn running_variance_stays_above_epsilon() {
        let mut state = BatchNormState::new(2);
        for _ in 0..200 {
            state.update(&BatchStats {
                mean: vec![1.0, -1.0],
                variance: vec![0.0, 0.0],
                count: 10,
            });
        }
        assert!(state.running_variance.iter().all(|&v| v >= state.epsilon));
        assert!((state.running_mean[0] - 1.0).abs() < 1e-6);
    }
}
