//! Flat `key = value` run configuration.

use std::path::PathBuf;
use std::str::FromStr;

use metasvdd::encoder::{Architecture, ArchitectureTag};
use metasvdd::heads::HeadKind;

/// Every run setting, with the defaults used for the few-shot experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub train_split: String,
    pub validation_split: String,
    pub test_split: String,
    pub head: HeadKind,
    pub architecture: ArchitectureTag,
    pub conv_blocks: usize,
    pub conv_filters: usize,
    pub mlp_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub shot: usize,
    pub query_per_side: usize,
    pub meta_batch: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
    pub val_tasks: usize,
    /// 0 means no limit.
    pub max_steps: usize,
    pub episodes: usize,
    pub repetitions: usize,
    pub variance_keep: f64,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            manifest: None,
            train_split: "train".into(),
            validation_split: "validation".into(),
            test_split: "test".into(),
            head: HeadKind::MetaSvdd,
            architecture: ArchitectureTag::Conv4,
            conv_blocks: 4,
            conv_filters: 64,
            mlp_hidden: vec![64, 64],
            feature_dim: metasvdd::encoder::DEFAULT_MLP_FEATURES,
            shot: 5,
            query_per_side: 10,
            meta_batch: 16,
            learning_rate: 5e-4,
            lambda: metasvdd::svdd::DEFAULT_LAMBDA,
            seed: 0,
            eval_every: 100,
            patience: 10,
            val_tasks: 500,
            max_steps: 0,
            episodes: 10_000,
            repetitions: 10,
            variance_keep: metasvdd::baseline::DEFAULT_VARIANCE_KEEP,
            output_dir: PathBuf::from("."),
            checkpoint: None,
            jobs: 1,
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "dataset",
    "manifest",
    "train_split",
    "validation_split",
    "test_split",
    "head",
    "architecture",
    "conv_blocks",
    "conv_filters",
    "mlp_hidden",
    "feature_dim",
    "shot",
    "query_per_side",
    "meta_batch",
    "learning_rate",
    "lambda",
    "seed",
    "eval_every",
    "patience",
    "val_tasks",
    "max_steps",
    "episodes",
    "repetitions",
    "variance_keep",
    "output_dir",
    "checkpoint",
    "jobs",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value '{value}' for {key}: {e}"))
}

fn positive(key: &str, value: &str) -> Result<usize, String> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(format!("{key} must be positive"));
    }
    Ok(v)
}

pub fn parse_hidden(value: &str) -> Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| positive("mlp_hidden", s.trim()))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "dataset" => self.dataset = Some(value.into()),
            "manifest" => self.manifest = Some(value.into()),
            "train_split" => self.train_split = value.into(),
            "validation_split" => self.validation_split = value.into(),
            "test_split" => self.test_split = value.into(),
            "head" => self.head = parse(key, value)?,
            "architecture" => self.architecture = parse(key, value)?,
            "conv_blocks" => self.conv_blocks = positive(key, value)?,
            "conv_filters" => self.conv_filters = positive(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_hidden(value)?,
            "feature_dim" => self.feature_dim = positive(key, value)?,
            "shot" => self.shot = positive(key, value)?,
            "query_per_side" => self.query_per_side = positive(key, value)?,
            "meta_batch" => self.meta_batch = positive(key, value)?,
            "learning_rate" => {
                self.learning_rate = parse(key, value)?;
                if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
                    return Err("learning_rate must be positive".into());
                }
            }
            "lambda" => {
                self.lambda = parse(key, value)?;
                if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
                    return Err("lambda must be non-negative".into());
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = positive(key, value)?,
            "patience" => self.patience = positive(key, value)?,
            "val_tasks" => self.val_tasks = positive(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "episodes" => self.episodes = positive(key, value)?,
            "repetitions" => self.repetitions = positive(key, value)?,
            "variance_keep" => {
                self.variance_keep = parse(key, value)?;
                if !(self.variance_keep > 0.0 && self.variance_keep <= 1.0) {
                    return Err("variance_keep must lie in (0, 1]".into());
                }
            }
            "output_dir" => self.output_dir = value.into(),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "jobs" => self.jobs = positive(key, value)?,
            other => {
                return Err(format!(
                    "unknown configuration key '{other}'; accepted keys: {}",
                    KEYS.join(", ")
                ))
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", i + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match self.architecture {
            ArchitectureTag::Conv4 => Architecture::Conv {
                blocks: self.conv_blocks,
                filters: self.conv_filters,
            },
            ArchitectureTag::Mlp => Architecture::Mlp {
                hidden: self.mlp_hidden.clone(),
            },
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.occk"))
    }

    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let hidden: Vec<String> = self.mlp_hidden.iter().map(|h| h.to_string()).collect();
        let values = [
            opt(&self.dataset),
            opt(&self.manifest),
            self.train_split.clone(),
            self.validation_split.clone(),
            self.test_split.clone(),
            self.head.to_string(),
            self.architecture.to_string(),
            self.conv_blocks.to_string(),
            self.conv_filters.to_string(),
            hidden.join(","),
            self.feature_dim.to_string(),
            self.shot.to_string(),
            self.query_per_side.to_string(),
            self.meta_batch.to_string(),
            self.learning_rate.to_string(),
            self.lambda.to_string(),
            self.seed.to_string(),
            self.eval_every.to_string(),
            self.patience.to_string(),
            self.val_tasks.to_string(),
            self.max_steps.to_string(),
            self.episodes.to_string(),
            self.repetitions.to_string(),
            self.variance_keep.to_string(),
            self.output_dir.display().to_string(),
            opt(&self.checkpoint),
            self.jobs.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "shot = 10\nhead = oc_protonet # comment\n\nmlp_hidden = 8, 4\ndataset = d.occb\n",
        )
        .unwrap();
        assert_eq!(c.shot, 10);
        assert_eq!(c.head, HeadKind::OcProtonet);
        assert_eq!(c.mlp_hidden, vec![8, 4]);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c
            .apply_text("shots = 5")
            .unwrap_err()
            .contains("unknown configuration key"));
        assert!(c.apply_text("shot = 0").is_err());
        assert!(c.apply_text("learning_rate = -1").is_err());
        assert!(c.apply_text("just words").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        for key in KEYS {
            let mut probe = c.clone();
            let value = c
                .to_text()
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
                .unwrap_or_else(|| "x".into());
            probe
                .set(key, &value)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
