//! Class-indexed datasets and episodic one-class task sampling.
//!
//! All randomness comes from ChaCha20 streams: `stream_rng(seed, stream)`
//! seeds the generator from `seed` and selects the 64-bit stream id, so
//! every task of a protocol gets an independent, reproducible stream
//! regardless of evaluation order or thread count.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes `index` into `seed` (SplitMix64 finalizer) so that consecutive
/// indices give unrelated seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" | "val" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// Position of one example: class index and index within the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleRef {
    pub class: usize,
    pub index: usize,
}

/// Examples grouped by class. Each class stores its examples back to back
/// as `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndexedDataset {
    pub split: SplitTag,
    example_shape: Vec<usize>,
    classes: Vec<Vec<f32>>,
}

impl ClassIndexedDataset {
    pub fn new(example_shape: Vec<usize>, classes: Vec<Vec<f32>>, split: SplitTag) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::config("dataset has no classes"));
        }
        if example_shape.is_empty() || example_shape.contains(&0) {
            return Err(Error::config(format!(
                "invalid example shape {example_shape:?}"
            )));
        }
        let len: usize = example_shape.iter().product();
        for (i, c) in classes.iter().enumerate() {
            if c.is_empty() || c.len() % len != 0 {
                return Err(Error::config(format!(
                    "class {i} holds {} values, not a positive multiple of the example size {len}",
                    c.len()
                )));
            }
        }
        Ok(ClassIndexedDataset {
            split,
            example_shape,
            classes,
        })
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn example_len(&self) -> usize {
        self.example_shape.iter().product()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_size(&self, class: usize) -> usize {
        self.classes[class].len() / self.example_len()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.class_count())
            .map(|c| self.class_size(c))
            .collect()
    }

    pub fn total_examples(&self) -> usize {
        self.class_sizes().iter().sum()
    }

    pub fn min_class_size(&self) -> usize {
        self.class_sizes().into_iter().min().unwrap_or(0)
    }

    pub fn class_data(&self, class: usize) -> &[f32] {
        &self.classes[class]
    }

    pub fn example(&self, r: ExampleRef) -> &[f32] {
        let len = self.example_len();
        &self.classes[r.class][r.index * len..(r.index + 1) * len]
    }

    /// Dataset-wide identifier of an example.
    pub fn example_id(&self, r: ExampleRef) -> usize {
        (0..r.class).map(|c| self.class_size(c)).sum::<usize>() + r.index
    }

    /// Stacks examples into an `(n, example_shape...)` tensor.
    pub fn gather(&self, refs: &[ExampleRef]) -> Result<Tensor<f64>> {
        if refs.is_empty() {
            return Err(Error::contract("gather needs at least one example"));
        }
        let mut data = Vec::with_capacity(refs.len() * self.example_len());
        for &r in refs {
            if r.class >= self.class_count() || r.index >= self.class_size(r.class) {
                return Err(Error::contract(format!("example {r:?} does not exist")));
            }
            data.extend(self.example(r).iter().map(|&v| f64::from(v)));
        }
        let mut shape = vec![refs.len()];
        shape.extend_from_slice(&self.example_shape);
        Tensor::new(shape, data)
    }

    /// New dataset made of the listed classes, in that order.
    pub fn select_classes(&self, ids: &[usize], split: SplitTag) -> Result<Self> {
        let mut classes = Vec::with_capacity(ids.len());
        for &id in ids {
            let c = self.classes.get(id).ok_or_else(|| {
                Error::config(format!(
                    "class id {id} out of range (dataset has {})",
                    self.class_count()
                ))
            })?;
            classes.push(c.clone());
        }
        Self::new(self.example_shape.clone(), classes, split)
    }

    /// Checks that every class can supply `needed` distinct examples.
    pub fn require_class_size(&self, needed: usize) -> Result<()> {
        for c in 0..self.class_count() {
            if self.class_size(c) < needed {
                return Err(Error::config(format!(
                    "class {c} has {} examples but {needed} are needed",
                    self.class_size(c)
                )));
            }
        }
        Ok(())
    }
}

/// Groups labeled examples by label. Labels are remapped to `0..k` in
/// increasing order; order within a class is preserved.
pub fn split_by_class(
    examples: impl IntoIterator<Item = (Vec<f32>, i64)>,
    example_shape: Vec<usize>,
    min_per_class: usize,
) -> Result<ClassIndexedDataset> {
    let mut by_label: std::collections::BTreeMap<i64, Vec<f32>> = std::collections::BTreeMap::new();
    let len: usize = example_shape.iter().product();
    for (i, (x, label)) in examples.into_iter().enumerate() {
        if x.len() != len {
            return Err(Error::config(format!(
                "example {i} has {} values, expected {len}",
                x.len()
            )));
        }
        by_label.entry(label).or_default().extend(x);
    }
    if by_label.is_empty() {
        return Err(Error::config("no labeled examples"));
    }
    for (label, data) in &by_label {
        let count = data.len() / len.max(1);
        if count < min_per_class {
            return Err(Error::config(format!(
                "class with label {label} has {count} examples, fewer than the required {min_per_class}"
            )));
        }
    }
    ClassIndexedDataset::new(
        example_shape,
        by_label.into_values().collect(),
        SplitTag::Train,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub shot: usize,
    pub query_per_side: usize,
    pub meta_batch: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            shot: 5,
            query_per_side: 10,
            meta_batch: 16,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shot == 0 || self.query_per_side == 0 || self.meta_batch == 0 {
            return Err(Error::config(format!(
                "episode sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One sampled one-class task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub target_class: usize,
    pub negative_class: usize,
    pub support: Vec<ExampleRef>,
    /// Target-class queries first, then negative-class queries.
    pub queries: Vec<ExampleRef>,
    /// 1.0 for target-class queries, 0.0 otherwise.
    pub labels: Vec<f64>,
    pub seed: u64,
}

/// Samples an episode using the generator for `(seed, 0)`.
pub fn sample_episode(
    dataset: &ClassIndexedDataset,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Episode> {
    sample_episode_with(
        dataset,
        config.shot,
        config.query_per_side,
        &mut stream_rng(seed, 0),
        seed,
    )
}

/// Samples target and negative classes uniformly without replacement, then
/// `shot + query_per_side` distinct target examples and `query_per_side`
/// negative examples.
pub fn sample_episode_with<R: Rng>(
    dataset: &ClassIndexedDataset,
    shot: usize,
    query_per_side: usize,
    rng: &mut R,
    seed: u64,
) -> Result<Episode> {
    if shot == 0 || query_per_side == 0 {
        return Err(Error::config("shot and query_per_side must be positive"));
    }
    if dataset.class_count() < 2 {
        return Err(Error::config("episodes need at least two classes"));
    }
    let classes = index::sample(rng, dataset.class_count(), 2);
    let (target, negative) = (classes.index(0), classes.index(1));
    let needed = shot + query_per_side;
    if dataset.class_size(target) < needed {
        return Err(Error::config(format!(
            "class {target} has {} examples, fewer than shot + query_per_side = {needed}",
            dataset.class_size(target)
        )));
    }
    if dataset.class_size(negative) < query_per_side {
        return Err(Error::config(format!(
            "class {negative} has {} examples, fewer than query_per_side = {query_per_side}",
            dataset.class_size(negative)
        )));
    }
    let picks = index::sample(rng, dataset.class_size(target), needed);
    let support = picks
        .iter()
        .take(shot)
        .map(|index| ExampleRef {
            class: target,
            index,
        })
        .collect();
    let mut queries: Vec<ExampleRef> = picks
        .iter()
        .skip(shot)
        .map(|index| ExampleRef {
            class: target,
            index,
        })
        .collect();
    let neg = index::sample(rng, dataset.class_size(negative), query_per_side);
    queries.extend(neg.iter().map(|index| ExampleRef {
        class: negative,
        index,
    }));
    let mut labels = vec![1.0; query_per_side];
    labels.extend(std::iter::repeat(0.0).take(query_per_side));
    Ok(Episode {
        target_class: target,
        negative_class: negative,
        support,
        queries,
        labels,
        seed,
    })
}

/// `meta_batch` independent episodes; episode `k` uses seed `seed * 16 + k`.
pub fn sample_meta_batch(
    dataset: &ClassIndexedDataset,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Vec<Episode>> {
    config.validate()?;
    (0..config.meta_batch as u64)
        .map(|k| sample_episode(dataset, config, seed.wrapping_mul(16).wrapping_add(k)))
        .collect()
}

/// Gaussian clusters: class `i` is `mu_i + spread * N(0, I)` with `mu_i`
/// uniform in `[-1, 1]^input_dim`.
pub fn synthetic_tasks(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<ClassIndexedDataset> {
    if num_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(Error::config("synthetic task sizes must be positive"));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(Error::config(format!(
            "cluster spread must be finite and non-negative, got {cluster_spread}"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let mut classes = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mean: Vec<f64> = (0..input_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut data = Vec::with_capacity(per_class * input_dim);
        for _ in 0..per_class {
            for &m in &mean {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((m + cluster_spread * noise) as f32);
            }
        }
        classes.push(data);
    }
    ClassIndexedDataset::new(vec![input_dim], classes, SplitTag::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_three_labels() {
        let ex = vec![
            (vec![1.0], 7),
            (vec![2.0], 3),
            (vec![3.0], 7),
            (vec![4.0], 5),
            (vec![5.0], 3),
            (vec![6.0], 5),
        ];
        let d = split_by_class(ex, vec![1], 1).unwrap();
        assert_eq!(d.class_sizes(), vec![2, 2, 2]);
        assert_eq!(d.class_data(0), &[2.0, 5.0]);
        assert_eq!(d.class_data(2), &[1.0, 3.0]);
        assert_eq!(d.total_examples(), 6);
    }

    #[test]
    fn split_empty_input_fails() {
        assert!(matches!(
            split_by_class(Vec::new(), vec![1], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_small_class_fails_with_label() {
        let ex = vec![(vec![1.0], 0), (vec![2.0], 0), (vec![3.0], 9)];
        let err = split_by_class(ex, vec![1], 2).unwrap_err().to_string();
        assert!(err.contains("label 9"), "{err}");
    }

    #[test]
    fn episode_shape_and_determinism() {
        let d = synthetic_tasks(6, 20, 3, 0.1, 1).unwrap();
        let cfg = EpisodeConfig::default();
        let e = sample_episode(&d, &cfg, 42).unwrap();
        assert_eq!(e.support.len(), 5);
        assert_eq!(e.queries.len(), 20);
        assert_eq!(e.labels.iter().filter(|&&l| l == 1.0).count(), 10);
        assert_ne!(e.target_class, e.negative_class);
        let ids: HashSet<_> = e.support.iter().map(|&r| d.example_id(r)).collect();
        assert!(e.queries.iter().all(|&r| !ids.contains(&d.example_id(r))));
        assert_eq!(e, sample_episode(&d, &cfg, 42).unwrap());
    }

    #[test]
    fn small_class_is_a_configuration_error() {
        let d = synthetic_tasks(3, 8, 2, 0.1, 1).unwrap();
        assert!(matches!(
            sample_episode(&d, &EpisodeConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn meta_batch_uses_derived_seeds() {
        let d = synthetic_tasks(5, 30, 2, 0.1, 1).unwrap();
        let cfg = EpisodeConfig::default();
        let batch = sample_meta_batch(&d, &cfg, 3).unwrap();
        assert_eq!(batch.len(), 16);
        let single = EpisodeConfig {
            meta_batch: 1,
            ..cfg
        };
        assert_eq!(
            sample_meta_batch(&d, &single, 3).unwrap()[0],
            sample_episode(&d, &cfg, 48).unwrap()
        );
    }

    #[test]
    fn synthetic_spread_zero_collapses_classes() {
        let d = synthetic_tasks(3, 4, 5, 0.0, 9).unwrap();
        for c in 0..3 {
            let first = d.example(ExampleRef { class: c, index: 0 }).to_vec();
            for i in 1..4 {
                assert_eq!(d.example(ExampleRef { class: c, index: i }), &first[..]);
            }
        }
        assert_ne!(
            d.example(ExampleRef { class: 0, index: 0 }),
            d.example(ExampleRef { class: 1, index: 0 })
        );
    }

    #[test]
    fn gather_stacks_examples() {
        let d = synthetic_tasks(2, 3, 4, 0.5, 2).unwrap();
        let t = d
            .gather(&[
                ExampleRef { class: 1, index: 2 },
                ExampleRef { class: 0, index: 0 },
            ])
            .unwrap();
        assert_eq!(t.shape(), &[2, 4]);
        assert_eq!(
            t.row(0)[0],
            f64::from(d.example(ExampleRef { class: 1, index: 2 })[0])
        );
    }
}
