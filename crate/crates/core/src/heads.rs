//! One-class heads: Meta SVDD and the one-class prototypical network.
//!
//! Both heads compute the center as a weighted average of the support
//! features. Meta SVDD takes the weights from the SVDD dual; the
//! prototypical head uses uniform weights. A query's target probability is
//! `1 - tanh(|f(x) - c|^2)`.

use crate::autodiff::{BatchStats, Graph, Var};
use crate::encoder::{EncoderParams, Mode};
use crate::episodes::{ClassIndexedDataset, Episode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::svdd::{self, DEFAULT_LAMBDA, DEFAULT_TOLERANCE};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities inside the loss.
pub const PROBABILITY_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    MetaSvdd,
    OcProtonet,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::MetaSvdd => "meta_svdd",
            HeadKind::OcProtonet => "oc_protonet",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta_svdd" => Ok(HeadKind::MetaSvdd),
            "oc_protonet" => Ok(HeadKind::OcProtonet),
            other => Err(Error::config(format!(
                "unknown head '{other}' (expected meta_svdd or oc_protonet)"
            ))),
        }
    }
}

/// A head together with the SVDD kernel ridge `lambda` (unused by the
/// prototypical head).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub lambda: f64,
}

impl Head {
    pub fn new(kind: HeadKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(Head { kind, lambda })
    }
}

impl From<HeadKind> for Head {
    fn from(kind: HeadKind) -> Self {
        Head {
            kind,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.kind.fmt(f)
    }
}

/// Result of running a head on one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutput {
    pub center: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub distances_sq: Vec<f64>,
    pub loss: f64,
}

/// Records the center of the `(n, d)` support features on `graph`; returns
/// a `(d)` node.
pub fn center_node<T: Scalar>(
    graph: &mut Graph<T>,
    head: impl Into<Head>,
    support: Var,
) -> Result<Var> {
    let head = head.into();
    let shape = graph.value(support).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(format!(
            "support features must be (n, d) with n >= 1, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let weights = match head.kind {
        HeadKind::MetaSvdd => {
            svdd::svdd_weights(
                graph,
                support,
                T::lit(head.lambda),
                T::lit(DEFAULT_TOLERANCE),
            )?
            .0
        }
        HeadKind::OcProtonet => graph.constant(Tensor::full(&[n], T::one() / T::from_count(n))),
    };
    let row = graph.reshape(weights, vec![1, n])?;
    let center = graph.matmul(row, support)?;
    graph.reshape(center, vec![d])
}

/// Center of `(n, d)` support features.
pub fn compute_center<T: Scalar>(
    head: impl Into<Head>,
    support_features: &Tensor<T>,
) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let z = g.constant(support_features.clone());
    let c = center_node(&mut g, head, z)?;
    Ok(g.value(c).data().to_vec())
}

/// Graph nodes of one recorded episode.
pub struct EpisodeNodes {
    pub center: Var,
    pub distances_sq: Var,
    pub probabilities: Var,
    pub loss: Var,
}

/// Records the head and the loss given `(n + m, d)` features whose first
/// `n` rows are the support set.
pub fn head_loss_node(
    graph: &mut Graph<f64>,
    head: impl Into<Head>,
    features: Var,
    support_count: usize,
    labels: &[f64],
) -> Result<EpisodeNodes> {
    head_loss_node_inner(graph, head.into(), features, support_count, labels)
}

fn head_loss_node_inner(
    graph: &mut Graph<f64>,
    head: Head,
    features: Var,
    support_count: usize,
    labels: &[f64],
) -> Result<EpisodeNodes> {
    let total = graph.value(features).rows();
    if support_count == 0 || support_count + labels.len() != total || labels.is_empty() {
        return Err(Error::contract(format!(
            "{total} feature rows do not split into {support_count} support and {} queries",
            labels.len()
        )));
    }
    let support_idx: Vec<usize> = (0..support_count).collect();
    let query_idx: Vec<usize> = (support_count..total).collect();
    let support = graph.select_rows(features, &support_idx)?;
    let queries = graph.select_rows(features, &query_idx)?;
    let center = center_node(graph, head, support)?;
    let distances_sq = graph.squared_distance(queries, center)?;
    let t = graph.tanh(distances_sq)?;
    let neg_t = graph.scale(t, -1.0)?;
    let probabilities = graph.add_const(neg_t, 1.0)?;

    let p = graph.clamp(probabilities, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)?;
    let log_p = graph.log(p)?;
    let neg_p = graph.scale(p, -1.0)?;
    let one_minus_p = graph.add_const(neg_p, 1.0)?;
    let log_q = graph.log(one_minus_p)?;
    let y = graph.constant(Tensor::vector(labels.to_vec()));
    let not_y = graph.constant(Tensor::vector(labels.iter().map(|l| 1.0 - l).collect()));
    let pos = graph.mul(y, log_p)?;
    let neg = graph.mul(not_y, log_q)?;
    let ll = graph.add(pos, neg)?;
    let mean_ll = graph.mean(ll)?;
    let loss = graph.scale(mean_ll, -1.0)?;
    Ok(EpisodeNodes {
        center,
        distances_sq,
        probabilities,
        loss,
    })
}

fn read_output(graph: &Graph<f64>, nodes: &EpisodeNodes) -> EpisodeOutput {
    EpisodeOutput {
        center: graph.value(nodes.center).data().to_vec(),
        probabilities: graph.value(nodes.probabilities).data().to_vec(),
        distances_sq: graph.value(nodes.distances_sq).data().to_vec(),
        loss: graph.value(nodes.loss).item(),
    }
}

fn episode_batch(dataset: &ClassIndexedDataset, episode: &Episode) -> Result<Tensor<f64>> {
    let refs: Vec<_> = episode
        .support
        .iter()
        .chain(&episode.queries)
        .copied()
        .collect();
    dataset.gather(&refs)
}

/// Episode forward pass plus parameter gradients.
pub struct EpisodeGradients {
    pub output: EpisodeOutput,
    /// One gradient per entry of `EncoderParams::tensors`.
    pub grads: Vec<Tensor<f64>>,
    pub batch_stats: Vec<BatchStats<f64>>,
}

/// Encodes support and queries in one batch, applies the head and computes
/// the loss.
pub fn episode_forward(
    head: impl Into<Head>,
    params: &EncoderParams,
    dataset: &ClassIndexedDataset,
    episode: &Episode,
    mode: Mode,
) -> Result<EpisodeOutput> {
    episode_forward_inner(head.into(), params, dataset, episode, mode)
}

fn episode_forward_inner(
    head: Head,
    params: &EncoderParams,
    dataset: &ClassIndexedDataset,
    episode: &Episode,
    mode: Mode,
) -> Result<EpisodeOutput> {
    let batch = episode_batch(dataset, episode)?;
    let mut g = Graph::new();
    let input = g.constant(batch);
    let enc = params.forward(&mut g, input, mode)?;
    let nodes = head_loss_node(
        &mut g,
        head,
        enc.features,
        episode.support.len(),
        &episode.labels,
    )?;
    Ok(read_output(&g, &nodes))
}

/// Like [`episode_forward`] but also backpropagates the loss to the encoder.
pub fn episode_gradients(
    head: impl Into<Head>,
    params: &EncoderParams,
    dataset: &ClassIndexedDataset,
    episode: &Episode,
    mode: Mode,
) -> Result<EpisodeGradients> {
    episode_gradients_inner(head.into(), params, dataset, episode, mode)
}

fn episode_gradients_inner(
    head: Head,
    params: &EncoderParams,
    dataset: &ClassIndexedDataset,
    episode: &Episode,
    mode: Mode,
) -> Result<EpisodeGradients> {
    let batch = episode_batch(dataset, episode)?;
    let mut g = Graph::new();
    let input = g.constant(batch);
    let enc = params.forward(&mut g, input, mode)?;
    let nodes = head_loss_node(
        &mut g,
        head,
        enc.features,
        episode.support.len(),
        &episode.labels,
    )?;
    let grads = g.backward(nodes.loss)?;
    Ok(EpisodeGradients {
        output: read_output(&g, &nodes),
        grads: enc.params.iter().map(|&v| grads.get(v)).collect(),
        batch_stats: enc.batch_stats,
    })
}

/// Target probabilities of `queries` given raw `support` examples, using
/// eval-mode encoding. Both arguments are `(count, example_shape...)`.
pub fn score_queries(
    head: impl Into<Head>,
    params: &EncoderParams,
    support: &Tensor<f64>,
    queries: &Tensor<f64>,
) -> Result<Vec<f64>> {
    score_queries_inner(head.into(), params, support, queries)
}

fn score_queries_inner(
    head: Head,
    params: &EncoderParams,
    support: &Tensor<f64>,
    queries: &Tensor<f64>,
) -> Result<Vec<f64>> {
    if support.ndim() == 0 || support.shape()[0] == 0 {
        return Err(Error::contract("support set is empty"));
    }
    if queries.shape()[1..] != support.shape()[1..] {
        return Err(Error::contract(format!(
            "support {:?} and queries {:?} have different example shapes",
            support.shape(),
            queries.shape()
        )));
    }
    let n = support.shape()[0];
    let m = queries.shape()[0];
    let mut shape = support.shape().to_vec();
    shape[0] = n + m;
    let mut data = support.data().to_vec();
    data.extend_from_slice(queries.data());
    let batch = Tensor::new(shape, data)?;

    let mut g = Graph::new();
    let input = g.constant(batch);
    let enc = params.forward(&mut g, input, Mode::Eval)?;
    let support_f = g.select_rows(enc.features, &(0..n).collect::<Vec<_>>())?;
    let query_f = g.select_rows(enc.features, &(n..n + m).collect::<Vec<_>>())?;
    let c = center_node(&mut g, head, support_f)?;
    let d = g.squared_distance(query_f, c)?;
    Ok(g.value(d).data().iter().map(|&x| 1.0 - x.tanh()).collect())
}

/// Target probability of a single raw `query` example.
pub fn classify(
    head: impl Into<Head>,
    params: &EncoderParams,
    support: &Tensor<f64>,
    query: &Tensor<f64>,
) -> Result<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(query.shape());
    let q = query.reshape(shape)?;
    Ok(score_queries(head, params, support, &q)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn centers_of_three_points() {
        let z = col(&[0.0, 1.0, 2.0]);
        assert!((compute_center(HeadKind::OcProtonet, &z).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((compute_center(HeadKind::MetaSvdd, &z).unwrap()[0] - 1.0).abs() < 1e-6);
        let z = col(&[0.0, 0.0, 3.0]);
        assert!((compute_center(HeadKind::OcProtonet, &z).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((compute_center(HeadKind::MetaSvdd, &z).unwrap()[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn single_support_heads_coincide() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 4.0]]).unwrap();
        let a = compute_center(HeadKind::OcProtonet, &z).unwrap();
        let b = compute_center(HeadKind::MetaSvdd, &z).unwrap();
        assert_eq!(a, z.data());
        assert_eq!(a, b);
    }

    fn run_loss(features: Tensor<f64>, support: usize, labels: &[f64]) -> (Vec<f64>, f64) {
        let mut g = Graph::new();
        let f = g.constant(features);
        let nodes = head_loss_node(&mut g, HeadKind::OcProtonet, f, support, labels).unwrap();
        (
            g.value(nodes.probabilities).data().to_vec(),
            g.value(nodes.loss).item(),
        )
    }

    #[test]
    fn query_at_center_is_clamped() {
        let (p, loss) = run_loss(col(&[2.0, 2.0]), 1, &[1.0]);
        assert_eq!(p, vec![1.0]);
        assert!((loss - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn half_probability_at_atanh_half() {
        let r = 0.5f64.atanh().sqrt();
        let (p, loss) = run_loss(col(&[0.0, r, -r]), 1, &[1.0, 0.0]);
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn far_negative_has_tiny_loss() {
        let (p, loss) = run_loss(col(&[0.0, 10f64.sqrt()]), 1, &[0.0]);
        assert!(p[0] <= 1e-4);
        assert!(loss <= 1e-4);
    }

    #[test]
    fn mismatched_split_is_rejected() {
        let mut g = Graph::new();
        let f = g.constant(col(&[0.0, 1.0, 2.0]));
        assert!(head_loss_node(&mut g, HeadKind::OcProtonet, f, 1, &[1.0]).is_err());
    }

    #[test]
    fn head_names_round_trip() {
        for h in [HeadKind::MetaSvdd, HeadKind::OcProtonet] {
            assert_eq!(h.to_string().parse::<HeadKind>().unwrap(), h);
        }
        assert!("svdd".parse::<HeadKind>().is_err());
    }
}
