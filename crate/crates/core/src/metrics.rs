//! AUC, accuracy and the two few-shot evaluation protocols.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;

use crate::encoder::EncoderParams;
use crate::episodes::{stream_rng, ClassIndexedDataset, EpisodeConfig, ExampleRef};
use crate::error::{Error, Result};
use crate::heads::{score_queries, Head};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{validation_episode, ValidationReport};

/// Scores queries against a support set; higher means "more target-like".
pub trait Scorer: Sync {
    fn scores(&self, support: &Tensor<f64>, queries: &Tensor<f64>) -> Result<Vec<f64>>;

    /// Scores at or above this value are classified as target.
    fn threshold(&self) -> f64;
}

/// A meta-trained encoder plus head.
pub struct HeadScorer<'a> {
    pub head: Head,
    pub params: &'a EncoderParams,
}

impl Scorer for HeadScorer<'_> {
    fn scores(&self, support: &Tensor<f64>, queries: &Tensor<f64>) -> Result<Vec<f64>> {
        score_queries(self.head, self.params, support, queries)
    }

    fn threshold(&self) -> f64 {
        0.5
    }
}

/// Fraction of (target, negative) pairs ranked correctly, ties counting
/// one half. Computed from integer counts, so it is exact up to the final
/// division.
pub fn auc<T: Scalar>(target_scores: &[T], negative_scores: &[T]) -> Result<f64> {
    if target_scores.is_empty() || negative_scores.is_empty() {
        return Err(Error::contract(
            "auc needs at least one target and one negative score",
        ));
    }
    if target_scores
        .iter()
        .chain(negative_scores)
        .any(|s| s.is_nan())
    {
        return Err(Error::numeric("auc", "scores contain NaN"));
    }
    let mut neg = negative_scores.to_vec();
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    // twice the pair count: 2 per correctly ordered pair, 1 per tie
    let mut doubled: u128 = 0;
    for &t in target_scores {
        let below = neg.partition_point(|&x| x < t);
        let not_above = neg.partition_point(|&x| x <= t);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    let total = 2 * target_scores.len() as u128 * negative_scores.len() as u128;
    Ok(doubled as f64 / total as f64)
}

/// Fraction of decisions `score >= threshold` that agree with `labels`.
pub fn accuracy(scores: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &y)| (s >= threshold) == (y >= 0.5))
        .count();
    correct as f64 / labels.len() as f64
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAuc {
    pub target_class: usize,
    pub negative_class: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAuc {
    pub class: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucProtocolReport {
    pub repetitions: usize,
    pub pairs: Vec<PairAuc>,
    pub per_class: Vec<ClassAuc>,
    pub min: ClassAuc,
    /// Lower median for an even class count.
    pub median: ClassAuc,
    pub max: ClassAuc,
}

impl AucProtocolReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("target_class,negative_class,mean_auc,std_auc\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                p.target_class, p.negative_class, p.mean, p.std
            );
        }
        s.push_str("\nsummary,target_class,mean_auc,std_auc\n");
        for (name, c) in [
            ("min", &self.min),
            ("median", &self.median),
            ("max", &self.max),
        ] {
            let _ = writeln!(s, "{name},{},{},{}", c.class, c.mean, c.std);
        }
        s
    }
}

/// Runs `body` over `0..count` in parallel and returns results in order.
fn ordered_map<R: Send>(
    count: usize,
    body: impl Fn(usize) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    (0..count).into_par_iter().map(body).collect()
}

/// Ordered-pair AUC protocol. For each target/negative pair and each
/// repetition a fresh `shot`-sized support and `2 * shot` queries per side
/// are drawn; the AUC of the scores is averaged over repetitions per pair
/// and over negatives per target class.
pub fn auc_protocol(
    scorer: &dyn Scorer,
    dataset: &ClassIndexedDataset,
    shot: usize,
    repetitions: usize,
    seed: u64,
) -> Result<AucProtocolReport> {
    let k = dataset.class_count();
    if k < 2 || shot == 0 || repetitions == 0 {
        return Err(Error::config(
            "auc protocol needs >= 2 classes and positive shot and repetitions",
        ));
    }
    dataset.require_class_size(3 * shot)?;
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|t| (0..k).filter(move |&n| n != t).map(move |n| (t, n)))
        .collect();
    let aucs = ordered_map(pairs.len() * repetitions, |task| {
        let (t, n) = pairs[task / repetitions];
        let mut rng = stream_rng(seed, task as u64);
        let picks = index::sample(&mut rng, dataset.class_size(t), 3 * shot);
        let support: Vec<ExampleRef> = picks
            .iter()
            .take(shot)
            .map(|index| ExampleRef { class: t, index })
            .collect();
        let mut queries: Vec<ExampleRef> = picks
            .iter()
            .skip(shot)
            .map(|index| ExampleRef { class: t, index })
            .collect();
        let neg = index::sample(&mut rng, dataset.class_size(n), 2 * shot);
        queries.extend(neg.iter().map(|index| ExampleRef { class: n, index }));
        let scores = scorer.scores(&dataset.gather(&support)?, &dataset.gather(&queries)?)?;
        auc(&scores[..2 * shot], &scores[2 * shot..])
    })?;

    let pair_reports: Vec<PairAuc> = pairs
        .iter()
        .enumerate()
        .map(|(p, &(t, n))| {
            let (mean, std) = mean_std(&aucs[p * repetitions..(p + 1) * repetitions]);
            PairAuc {
                target_class: t,
                negative_class: n,
                mean,
                std,
            }
        })
        .collect();

    // per target class: average over its negatives within each repetition,
    // then mean and std over repetitions
    let per_class: Vec<ClassAuc> = (0..k)
        .map(|t| {
            let base = t * (k - 1);
            let per_rep: Vec<f64> = (0..repetitions)
                .map(|r| {
                    (0..k - 1)
                        .map(|j| aucs[(base + j) * repetitions + r])
                        .sum::<f64>()
                        / (k - 1) as f64
                })
                .collect();
            let (mean, std) = mean_std(&per_rep);
            ClassAuc {
                class: t,
                mean,
                std,
            }
        })
        .collect();
    let mut sorted = per_class.clone();
    sorted.sort_by(|a, b| {
        a.mean
            .partial_cmp(&b.mean)
            .unwrap_or(Ordering::Equal)
            .then(a.class.cmp(&b.class))
    });
    Ok(AucProtocolReport {
        repetitions,
        pairs: pair_reports,
        min: sorted[0],
        median: sorted[(sorted.len() - 1) / 2],
        max: sorted[sorted.len() - 1],
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyProtocolReport {
    pub mean: f64,
    pub ci_half_width: f64,
    pub episodes: usize,
}

impl AccuracyProtocolReport {
    pub fn ci_low(&self) -> f64 {
        self.mean - self.ci_half_width
    }

    pub fn ci_high(&self) -> f64 {
        self.mean + self.ci_half_width
    }

    pub fn to_csv(&self) -> String {
        format!(
            "mean,ci_low,ci_high,episodes\n{},{},{},{}\n",
            self.mean,
            self.ci_low(),
            self.ci_high(),
            self.episodes
        )
    }

    /// `mean ± half-width` in percent with two decimals.
    pub fn display_percent(&self) -> String {
        format!(
            "{:.2} ± {:.2}%",
            100.0 * self.mean,
            100.0 * self.ci_half_width
        )
    }
}

/// Queries per side in the accuracy protocol.
pub const ACCURACY_QUERIES_PER_SIDE: usize = 10;

/// Mean per-episode accuracy over `episodes` sampled tasks with a 95%
/// interval.
pub fn accuracy_protocol(
    scorer: &dyn Scorer,
    dataset: &ClassIndexedDataset,
    shot: usize,
    episodes: usize,
    seed: u64,
) -> Result<AccuracyProtocolReport> {
    if episodes == 0 {
        return Err(Error::config(
            "accuracy protocol needs at least one episode",
        ));
    }
    let config = EpisodeConfig {
        shot,
        query_per_side: ACCURACY_QUERIES_PER_SIDE,
        meta_batch: 1,
    };
    let acc = ordered_map(episodes, |t| {
        let ep = validation_episode(dataset, &config, seed, t as u64)?;
        let scores = scorer.scores(&dataset.gather(&ep.support)?, &dataset.gather(&ep.queries)?)?;
        Ok(accuracy(&scores, &ep.labels, scorer.threshold()))
    })?;
    let r = ValidationReport::from_accuracies(&acc)?;
    Ok(AccuracyProtocolReport {
        mean: r.mean,
        ci_half_width: r.ci_high - r.mean,
        episodes,
    })
}
