//! Finite-difference checks of every differentiable path, from single
//! primitives up to the full episode loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, BatchNormMode, Graph, Var};
use crate::encoder::{init_encoder, Architecture, EncoderParams, Mode};
use crate::episodes::stream_rng;
use crate::error::Result;
use crate::heads::{head_loss_node, HeadKind};
use crate::svdd::svdd_weights;
use crate::tensor::Tensor;

const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Splits a flat `(P, 1)` node into nodes shaped like `params`' tensors.
fn unflatten(graph: &mut Graph<f64>, flat: Var, params: &EncoderParams) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(params.tensors.len());
    let mut offset = 0;
    for t in &params.tensors {
        let n = t.value.numel();
        let idx: Vec<usize> = (offset..offset + n).collect();
        let rows = graph.select_rows(flat, &idx)?;
        out.push(graph.reshape(rows, t.value.shape().to_vec())?);
        offset += n;
    }
    Ok(out)
}

fn flatten(params: &EncoderParams) -> Tensor<f64> {
    let data: Vec<f64> = params
        .tensors
        .iter()
        .flat_map(|t| t.value.data().iter().copied())
        .collect();
    let n = data.len();
    Tensor::new(vec![n, 1], data).expect("flat shape")
}

/// Relative error of the episode-loss gradient with respect to every
/// encoder parameter. `batch` holds the support rows first.
pub fn encoder_loss_check(
    head: HeadKind,
    params: &EncoderParams,
    batch: &Tensor<f64>,
    support: usize,
    labels: &[f64],
    mode: Mode,
) -> Result<f64> {
    grad_check(
        |g, flat| {
            let vars = unflatten(g, flat, params)?;
            let input = g.constant(batch.clone());
            let (features, _) = params.forward_with(g, &vars, input, mode)?;
            Ok(head_loss_node(g, head, features, support, labels)?.loss)
        },
        &flatten(params),
        STEP,
    )
}

/// Episode-loss check for a small MLP (4 support, 4 queries).
pub fn mlp_episode_check(
    head: HeadKind,
    hidden: &[usize],
    input_dim: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<f64> {
    let params = init_encoder(
        &Architecture::Mlp {
            hidden: hidden.to_vec(),
        },
        &[input_dim],
        feature_dim,
        seed,
    )?;
    let mut rng = stream_rng(seed, 1);
    let mut batch = normal(&mut rng, &[8, input_dim]);
    // queries farther out so the tanh is not saturated at the clamp
    for v in batch.data_mut() {
        *v *= 0.5;
    }
    encoder_loss_check(head, &params, &batch, 4, &[1.0, 1.0, 0.0, 0.0], Mode::Train)
}

/// Check of `sum_i w_i alpha_i(Z)` for random `(n, d)` features, which
/// exercises the implicit QP gradient and nothing else.
pub fn qp_weights_check(n: usize, d: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 2);
    let z = normal(&mut rng, &[n, d]);
    let w = normal(&mut rng, &[n]);
    grad_check(
        |g, x| {
            let (alpha, _) = svdd_weights(g, x, 1e-6, 1e-12)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(alpha, wv)?;
            g.sum(prod)
        },
        &z,
        STEP,
    )
}

fn primitive_checks(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = stream_rng(seed, 3);
    let mut out = Vec::new();
    let a = normal(&mut rng, &[3, 4]);
    let b = normal(&mut rng, &[4, 2]);
    let bias = normal(&mut rng, &[2]);
    out.push((
        "matmul + row bias + tanh".to_string(),
        grad_check(
            |g, x| {
                let bv = g.constant(b.clone());
                let m = g.matmul(x, bv)?;
                let c = g.constant(bias.clone());
                let s = g.add(m, c)?;
                let t = g.tanh(s)?;
                g.sum(t)
            },
            &a,
            STEP,
        )?,
    ));
    let pos = a.map(|v| v.abs() + 0.5);
    out.push((
        "log + mul + mean".to_string(),
        grad_check(
            |g, x| {
                let l = g.log(x)?;
                let m = g.mul(l, x)?;
                g.mean(m)
            },
            &pos,
            STEP,
        )?,
    ));
    let center = normal(&mut rng, &[4]);
    out.push((
        "squared distance to center".to_string(),
        grad_check(
            |g, x| {
                let c = g.constant(center.clone());
                let d = g.squared_distance(x, c)?;
                let s = g.scale(d, 0.3)?;
                g.sum(s)
            },
            &a,
            STEP,
        )?,
    ));
    let img = normal(&mut rng, &[2, 4, 4, 2]);
    let kernel = normal(&mut rng, &[3, 3, 2, 3]);
    let kbias = normal(&mut rng, &[3]);
    out.push((
        "conv2d + max-pool + relu".to_string(),
        grad_check(
            |g, x| {
                let k = g.constant(kernel.clone());
                let kb = g.constant(kbias.clone());
                let c = g.conv2d_same(x, k, kb)?;
                let p = g.max_pool2(c)?;
                let r = g.relu(p)?;
                g.sum(r)
            },
            &img,
            STEP,
        )?,
    ));
    let gamma = normal(&mut rng, &[2]);
    let beta = normal(&mut rng, &[2]);
    let weights = normal(&mut rng, &[3, 4, 4, 2]);
    let bn_input = normal(&mut rng, &[3, 4, 4, 2]);
    out.push((
        "batch norm (train)".to_string(),
        grad_check(
            |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let (y, _) = g.batch_norm(x, ga, be, BatchNormMode::Train, 1e-5)?;
                let w = g.constant(weights.clone());
                let m = g.mul(y, w)?;
                g.sum(m)
            },
            &bn_input,
            STEP,
        )?,
    ));
    Ok(out)
}

/// Every check with its tolerance.
pub fn full_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out: Vec<CheckOutcome> = primitive_checks(seed)?
        .into_iter()
        .map(|(name, error)| CheckOutcome {
            name: format!("primitive: {name}"),
            error,
            tolerance: 1e-5,
        })
        .collect();
    for n in 2..=6 {
        out.push(CheckOutcome {
            name: format!("svdd weights n={n}"),
            error: qp_weights_check(n, 3, seed + n as u64)?,
            tolerance: 1e-5,
        });
    }
    for head in [HeadKind::OcProtonet, HeadKind::MetaSvdd] {
        out.push(CheckOutcome {
            name: format!("mlp episode loss ({head})"),
            error: mlp_episode_check(head, &[8], 4, 6, seed)?,
            tolerance: 1e-3,
        });
        let conv = init_encoder(
            &Architecture::Conv {
                blocks: 2,
                filters: 3,
            },
            &[6, 6, 1],
            0,
            seed,
        )?;
        let mut rng = stream_rng(seed, 4);
        let batch = normal(&mut rng, &[5, 6, 6, 1]);
        out.push(CheckOutcome {
            name: format!("conv episode loss ({head})"),
            error: encoder_loss_check(head, &conv, &batch, 3, &[1.0, 0.0], Mode::Train)?,
            tolerance: 1e-3,
        });
    }
    Ok(out)
}
