//! Line-oriented `key = value` configuration with `#` comments.

use dcf_core::error::{DcfError, Result};
use dcf_core::tensor::Padding;
use dcf_core::train::{RegressorConfig, TrainConfig};

/// Parses `key = value` lines; blank lines and text after `#` are ignored.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DcfError::Format(format!("config line {} has no `=`: {raw}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Everything `train` can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub regressor: RegressorConfig,
    pub padding: Padding,
    pub train_count: usize,
    pub validation_count: usize,
    /// Synthetic scenes used to fit the regressor.
    pub regressor_scenes: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig { epochs: 10, target: None, ..TrainConfig::reference() },
            regressor: RegressorConfig::default(),
            padding: Padding::Same,
            train_count: 5000,
            validation_count: 1000,
            regressor_scenes: 40,
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| DcfError::ConfigValue { key: key.to_string(), value: v.to_string() })
}

impl TrainSettings {
    /// Applies parsed pairs; unknown keys are rejected by name.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            let key = k.as_str();
            if let Some((layer, field)) = key.split_once('.') {
                let idx = match layer {
                    "conv1" => Some(0),
                    "conv2" => Some(1),
                    "fc" => Some(2),
                    _ => None,
                };
                if let Some(i) = idx {
                    let r = &mut self.train.rates[i];
                    match field {
                        "eps_w" => r.eps_w = value(key, v)?,
                        "eps_b" => r.eps_b = value(key, v)?,
                        "mom_w" => r.mom_w = value(key, v)?,
                        "mom_b" => r.mom_b = value(key, v)?,
                        "wc" => r.wc = value(key, v)?,
                        _ => return Err(DcfError::UnknownConfigKey(k.clone())),
                    }
                    continue;
                }
                match key {
                    "regressor.epochs" => self.regressor.epochs = value(key, v)?,
                    "regressor.learning_rate" => self.regressor.learning_rate = value(key, v)?,
                    "regressor.scenes" => self.regressor_scenes = value(key, v)?,
                    _ => return Err(DcfError::UnknownConfigKey(k.clone())),
                }
                continue;
            }
            match key {
                "epochs" => self.train.epochs = value(key, v)?,
                "batch_size" => self.train.batch_size = value(key, v)?,
                "seed" => self.train.seed = value(key, v)?,
                "target" => self.train.target = Some(value(key, v)?),
                "conv_bias_init" => self.train.conv_bias_init = value(key, v)?,
                "train_count" => self.train_count = value(key, v)?,
                "validation_count" => self.validation_count = value(key, v)?,
                "padding" => {
                    self.padding = match v.as_str() {
                        "same" => Padding::Same,
                        "valid" => Padding::Valid,
                        _ => return Err(DcfError::ConfigValue { key: k.clone(), value: v.clone() }),
                    }
                }
                _ => return Err(DcfError::UnknownConfigKey(k.clone())),
            }
        }
        self.train.validate()
    }
}
