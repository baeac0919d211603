use proptest::prelude::*;

use metasvdd::autodiff::{grad_check, Graph};
use metasvdd::baseline::{ocsvm_fit, pca_fit_transform};
use metasvdd::episodes::{sample_episode, synthetic_tasks, EpisodeConfig};
use metasvdd::heads::{head_loss_node, HeadKind};
use metasvdd::metrics::auc;
use metasvdd::svdd::{build_kernel, meb_oracle, solve_dual, ACTIVE_THRESHOLD};
use metasvdd::Tensor;

fn matrix(
    max_rows: usize,
    cols: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Tensor<f64>> {
    sized_matrix(1..=max_rows, cols)
}

fn sized_matrix(
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(|(n, d)| {
        prop::collection::vec(-2.0..2.0f64, n * d)
            .prop_map(move |data| Tensor::new(vec![n, d], data).unwrap())
    })
}

fn objective(alpha: &[f64], z: &Tensor<f64>) -> f64 {
    // a^T diag(K) - a^T K a with K = Z Z^T
    let n = z.rows();
    let dot = |i: usize, j: usize| {
        z.row(i)
            .iter()
            .zip(z.row(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let mut lin = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        lin += alpha[i] * dot(i, i);
        for j in 0..n {
            quad += alpha[i] * alpha[j] * dot(i, j);
        }
    }
    lin - quad
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unary_primitives_match_finite_differences(x in matrix(4, 1..=4)) {
        let pos = x.map(|v| v.abs() + 0.5);
        let checks: [(&str, &Tensor<f64>, fn(&mut Graph<f64>, metasvdd::autodiff::Var) -> metasvdd::Result<metasvdd::autodiff::Var>); 4] = [
            ("tanh", &x, |g, v| g.tanh(v)),
            ("log", &pos, |g, v| g.log(v)),
            ("scale", &x, |g, v| g.scale(v, -1.7)),
            ("add_const", &x, |g, v| g.add_const(v, 0.3)),
        ];
        for (name, point, op) in checks {
            let err = grad_check(
                |g, v| {
                    let y = op(g, v)?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                },
                point,
                1e-6,
            )
            .unwrap();
            prop_assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn backward_is_linear(x in matrix(4, 2..=3), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let build = |g: &mut Graph<f64>, wa: f64, wb: f64| {
            let p = g.param(x.clone());
            let t = g.tanh(p).unwrap();
            let l1 = g.sum(t).unwrap();
            let sq = g.mul(p, p).unwrap();
            let l2 = g.mean(sq).unwrap();
            let s1 = g.scale(l1, wa).unwrap();
            let s2 = g.scale(l2, wb).unwrap();
            let loss = g.add(s1, s2).unwrap();
            (p, loss)
        };
        let grad = |wa, wb| {
            let mut g = Graph::new();
            let (p, loss) = build(&mut g, wa, wb);
            g.backward(loss).unwrap().get(p)
        };
        let combined = grad(a, b);
        let g1 = grad(1.0, 0.0);
        let g2 = grad(0.0, 1.0);
        for ((c, u), v) in combined.data().iter().zip(g1.data()).zip(g2.data()) {
            prop_assert!((c - (a * u + b * v)).abs() <= 1e-12);
        }
    }

    #[test]
    fn svdd_matches_oracle_and_satisfies_slackness(z in matrix(8, 1..=4)) {
        let sol = solve_dual(&build_kernel(&z, 1e-9).unwrap(), 1e-10).unwrap();
        let (center, radius) = meb_oracle(&z).unwrap();
        for (a, b) in sol.center.iter().zip(&center) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
        prop_assert!((sol.radius - radius).abs() <= 1e-6);
        for i in 0..z.rows() {
            if sol.alpha[i] > ACTIVE_THRESHOLD {
                let d: f64 = z.row(i).iter().zip(&sol.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                prop_assert!((d - sol.radius).abs() <= 1e-5, "row {i}: {d} vs {}", sol.radius);
            }
        }
        let uniform = vec![1.0 / z.rows() as f64; z.rows()];
        prop_assert!(objective(&sol.alpha, &z) >= objective(&uniform, &z) - 1e-9);
    }

    #[test]
    fn svdd_is_translation_invariant(z in matrix(8, 2..=2), shift in prop::array::uniform2(-5.0..5.0f64)) {
        let moved = Tensor::new(
            z.shape().to_vec(),
            z.data().chunks(2).flat_map(|r| [r[0] + shift[0], r[1] + shift[1]]).collect(),
        )
        .unwrap();
        let a = solve_dual(&build_kernel(&z, 0.0).unwrap(), 1e-12).unwrap();
        let b = solve_dual(&build_kernel(&moved, 0.0).unwrap(), 1e-12).unwrap();
        for (x, y) in a.alpha.iter().zip(&b.alpha) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
        prop_assert!((a.radius - b.radius).abs() <= 1e-8);
        for k in 0..2 {
            prop_assert!((a.center[k] + shift[k] - b.center[k]).abs() <= 1e-8);
        }
    }

    #[test]
    fn target_probability_decreases_with_distance(d in prop::collection::btree_set(0u32..2000, 2..10), head in prop::sample::select(vec![HeadKind::MetaSvdd, HeadKind::OcProtonet])) {
        // one support point at the origin; query i at squared distance d_i
        let dist: Vec<f64> = d.iter().map(|&v| f64::from(v) / 1000.0).collect();
        let mut rows = vec![0.0];
        rows.extend(dist.iter().map(|v| v.sqrt()));
        let features = Tensor::new(vec![rows.len(), 1], rows).unwrap();
        let mut g = Graph::new();
        let f = g.constant(features);
        let labels = vec![1.0; dist.len()];
        let nodes = head_loss_node(&mut g, head, f, 1, &labels).unwrap();
        let p = g.value(nodes.probabilities).data().to_vec();
        prop_assert!(p.windows(2).all(|w| w[0] > w[1]), "{:?}", p);
    }

    #[test]
    fn auc_is_complementary_without_ties(scores in prop::collection::hash_set(-1000i32..1000, 2..40), cut in 0.0..1.0f64) {
        let all: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let split = 1 + ((all.len() - 1) as f64 * cut) as usize;
        let split = split.min(all.len() - 1);
        let (a, b) = all.split_at(split);
        let sum = auc(a, b).unwrap() + auc(b, a).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn episodes_never_reuse_an_example(seed in any::<u64>(), shot in 1usize..8, queries in 1usize..8) {
        let data = synthetic_tasks(5, 16, 3, 0.5, 1).unwrap();
        let config = EpisodeConfig { shot, query_per_side: queries, meta_batch: 1 };
        let ep = sample_episode(&data, &config, seed).unwrap();
        let mut ids: Vec<usize> = ep.support.iter().chain(&ep.queries).map(|&r| data.example_id(r)).collect();
        let total = ids.len();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), total);
        prop_assert_ne!(ep.target_class, ep.negative_class);
        prop_assert!(ep.support.iter().all(|r| r.class == ep.target_class));
        let again = sample_episode(&data, &config, seed).unwrap();
        prop_assert_eq!(ep, again);
    }

    #[test]
    fn ocsvm_decisions_are_rotation_invariant(x in matrix(6, 2..=2), angle in 0.0..std::f64::consts::TAU, q in prop::array::uniform2(-2.0..2.0f64)) {
        let (s, c) = angle.sin_cos();
        let rot = |p: &[f64]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let turned = Tensor::new(x.shape().to_vec(), x.data().chunks(2).flat_map(rot).collect()).unwrap();
        let a = ocsvm_fit(&x, 0.5, 0.1).unwrap();
        let b = ocsvm_fit(&turned, 0.5, 0.1).unwrap();
        prop_assert!((a.decision(&q) - b.decision(&rot(&q))).abs() <= 1e-6);
    }

    #[test]
    fn pca_preserves_ocsvm_scores(x in sized_matrix(2..=6, 6..=8), w in prop::collection::vec(0.1..2.0f64, 6)) {
        let (n, d) = (x.rows(), x.shape()[1]);
        let Ok((pca, projected)) = pca_fit_transform(&x, 1.0) else {
            return Ok(());
        };
        prop_assert_eq!(projected.shape()[1], n - 1);
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
        let centered = Tensor::new(
            x.shape().to_vec(),
            (0..n).flat_map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>()).collect(),
        )
        .unwrap();
        // convex combination of the support, so it lies in the fitted subspace
        let total: f64 = w[..n].iter().sum();
        let q: Vec<f64> = (0..d).map(|j| (0..n).map(|i| w[i] * x.row(i)[j]).sum::<f64>() / total).collect();
        let qc: Vec<f64> = q.iter().zip(&mean).map(|(v, m)| v - m).collect();
        let qp = pca.transform(&Tensor::new(vec![1, d], q).unwrap()).unwrap();
        let raw = ocsvm_fit(&centered, 0.1, 0.1).unwrap();
        let reduced = ocsvm_fit(&projected, 0.1, 0.1).unwrap();
        prop_assert!((reduced.decision(qp.data()) - raw.decision(&qc)).abs() <= 1e-6);
    }
}

#[test]
fn loss_at_chance_is_ln2() {
    // every query sits at squared distance atanh(0.5) from a one-point support
    let d = 0.5f64.atanh().sqrt();
    let features = Tensor::new(vec![3, 1], vec![0.0, d, -d]).unwrap();
    for head in [HeadKind::MetaSvdd, HeadKind::OcProtonet] {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let nodes = head_loss_node(&mut g, head, f, 1, &[1.0, 0.0]).unwrap();
        assert!((g.value(nodes.loss).item() - std::f64::consts::LN_2).abs() <= 1e-9);
    }
}

#[test]
fn ocsvm_degenerate_gamma_is_constant() {
    let x = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 0.5, -0.7, 0.2, 0.3, -1.0]).unwrap();
    let model = ocsvm_fit(&x, 2f64.powi(-20), 0.1).unwrap();
    let a = model.decision(&[0.0, 0.0]);
    let b = model.decision(&[1.5, -1.5]);
    assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
}
