use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::adversary::AdversaryConfig;
use crate::advtrain::TrainConfig;
use crate::baselines::{BaselineConfig, Method};
use crate::dataio::Attribute;
use crate::error::{RapError, Result};

/// Full experiment configuration: data paths, the grid to run, and the
/// component hyperparameters. Built from a flat key = value file with
/// CLI flags layered on top.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub ratings_path: PathBuf,
    pub users_path: PathBuf,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub l_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Recommendation list depth for the ranking metrics.
    pub k: usize,
    pub attack_frac: f64,
    pub alphas: Vec<f64>,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub adversary: AdversaryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            ratings_path: PathBuf::from("data/ml-100k/u.data"),
            users_path: PathBuf::from("data/ml-100k/u.user"),
            out_dir: PathBuf::from("runs"),
            methods: Method::ALL.to_vec(),
            l_values: vec![35, 40, 45],
            seeds: vec![1, 2, 3],
            k: 35,
            attack_frac: 0.8,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            adversary: AdversaryConfig::default(),
        }
    }
}

/// Parse a flat `key = value` file. Blank lines and lines starting with
/// `#` are ignored.
pub fn parse_kv(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(RapError::Parse {
                line: ln + 1,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| RapError::validation(format!("bad value {s:?} for {key}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| RapError::validation(format!("bad value {v:?} for {key}")))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let kv = parse_kv(&text)?;
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &HashMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in kv {
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    /// Apply one key; unknown keys are errors so typos fail loudly.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "ratings_path" => self.ratings_path = PathBuf::from(value),
            "users_path" => self.users_path = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|s| Method::from_key(s.trim()))
                    .collect::<Result<_>>()?
            }
            "l_values" => self.l_values = parse_list(value, key)?,
            "seeds" => self.seeds = parse_list(value, key)?,
            "k" => self.k = parse_one(value, key)?,
            "attack_frac" => self.attack_frac = parse_one(value, key)?,
            "alphas" => self.alphas = parse_list(value, key)?,
            "alpha" => self.train.alpha = parse_one(value, key)?,
            "lambda" => self.train.lambda = parse_one(value, key)?,
            "lr" => self.train.lr = parse_one(value, key)?,
            "batch_size" => self.train.batch_size = parse_one(value, key)?,
            "epochs" => self.train.epochs = parse_one(value, key)?,
            "k_train" => self.train.k_train = parse_one(value, key)?,
            "embed_dim" => self.train.embed_dim = parse_one(value, key)?,
            "rec_hidden" => self.train.rec_hidden = parse_one(value, key)?,
            "att_hidden" => self.train.att_hidden = parse_one(value, key)?,
            "negatives_per_positive" => {
                self.train.negatives_per_positive = parse_one(value, key)?
            }
            "max_unroll" => self.train.max_unroll = parse_one(value, key)?,
            "attribute_mask" => {
                self.train.attribute_mask = value
                    .split(',')
                    .map(|s| Attribute::from_key(s.trim()))
                    .collect::<Result<_>>()?
            }
            "blurme_k_add" => self.baseline.blurme_k_add = Some(parse_one(value, key)?),
            "ldp_epsilon" => self.baseline.ldp_epsilon = parse_one(value, key)?,
            "adversary_hidden" => self.adversary.hidden_dim = parse_one(value, key)?,
            "adversary_epochs" => self.adversary.epochs = parse_one(value, key)?,
            "adversary_lr" => self.adversary.lr = parse_one(value, key)?,
            "adversary_batch_size" => self.adversary.batch_size = parse_one(value, key)?,
            "adversary_weight_decay" => self.adversary.weight_decay = parse_one(value, key)?,
            other => {
                return Err(RapError::validation(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_kv_with_comments() {
        let text = "# comment\nl_values = 35, 45\nseeds=7\nalpha = 0.5\n\nmethods = rap, original\n";
        let kv = parse_kv(text).unwrap();
        let cfg = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.l_values, vec![35, 45]);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.methods, vec![Method::Rap, Method::Original]);
    }

    #[test]
    fn unknown_keys_and_bad_values_error() {
        let kv = parse_kv("no_such_key = 1\n").unwrap();
        assert!(ExperimentConfig::from_kv(&kv).is_err());
        let kv = parse_kv("epochs = many\n").unwrap();
        assert!(ExperimentConfig::from_kv(&kv).is_err());
        assert!(parse_kv("just a line\n").is_err());
    }

    #[test]
    fn flags_layer_on_top() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("alpha", "0.25").unwrap();
        cfg.apply("attribute_mask", "age").unwrap();
        assert_eq!(cfg.train.alpha, 0.25);
        assert_eq!(cfg.train.attribute_mask, vec![Attribute::Age]);
    }
}
