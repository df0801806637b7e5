//! Flat `key = value` run configuration.
//!
//! One namespace covers data, model, training and experiment keys; every
//! key has a documented default, unknown keys are rejected with the full
//! valid list and a nearest-match suggestion, and the resolved
//! configuration echoes back out as a provenance file (which doubles as
//! the checkpoint header), so a run is reproducible from that file alone.

use crate::decompose::DecompositionConfig;
use crate::embedding::EmbedMode;
use crate::eval::Variant;
use crate::framework::ModelMode;
use crate::optim::TrainConfig;
use crate::pyramid::PyramidConfig;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown key '{key}'{hint}; valid keys: {valid}")]
    UnknownKey {
        key: String,
        hint: String,
        valid: String,
    },
    #[error("bad value '{value}' for key '{key}': expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config line {line} is not 'key = value': {text:?}")]
    BadLine { line: usize, text: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// (key, default, description) for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_path", "", "CSV dataset path (timestamp column first)"),
    ("split_train", "0.7", "train ratio of the chronological split"),
    ("split_val", "0.1", "validation ratio"),
    ("split_test", "0.2", "test ratio"),
    ("train_stride", "1", "stride between training windows"),
    ("eval_stride", "1", "stride between validation/test windows"),
    ("lookback_I", "96", "look-back window length I"),
    ("horizon_H", "96", "forecast horizon H"),
    ("decoder_history_L", "0", "decoder history L (0 = I/2)"),
    ("patch_sizes", "4,24", "strictly increasing patch sizes p_1..p_K"),
    ("channels_c", "8", "embedding channels c"),
    ("heads", "4", "attention heads"),
    ("enc_layers", "2", "encoder layers per level"),
    ("dec_layers", "1", "decoder layers per level"),
    ("ffn_factor", "4", "feed-forward width multiple of d_model"),
    ("dropout", "0.1", "dropout rate (0 disables)"),
    ("embed_mode", "di", "embedding: di | spatial | temporal"),
    (
        "model_mode",
        "decomposed",
        "decomposed | trend_as_mtpnet | no_decomposition",
    ),
    ("decomp_kernel_sizes", "25", "odd moving-average kernels"),
    ("no_inter_scale", "false", "drop inter-scale fusions"),
    ("no_all_scale", "false", "feed levels only from the neighbor level"),
    ("bottom_up_decoder", "false", "reverse the decoder flow"),
    (
        "single_scale_index",
        "-1",
        "restrict to one patch-size index (-1 = all)",
    ),
    ("variant", "full", "ablation tag applied on top of the switches"),
    ("batch_size", "32", "mini-batch size"),
    ("lr_max", "0.0001", "initial learning rate"),
    ("lr_min", "0.000001", "final learning rate of the cosine schedule"),
    ("epochs", "10", "training epochs"),
    ("seed", "1", "RNG seed"),
    ("patience", "5", "early-stop patience in epochs"),
    ("grad_clip", "0", "global-norm gradient clip (0 = off)"),
    ("denormalized_metrics", "false", "report metrics on the original scale"),
    ("checkpoint", "", "checkpoint path for eval (default <out>/model.ckpt)"),
    ("variants", "full", "ablate: comma-separated variant tags"),
    ("seeds", "1", "ablate: comma-separated seeds"),
    ("lookbacks", "96,192,336,720", "sweep: look-back lengths"),
    ("horizons", "96", "sweep: horizons"),
    ("synth_T", "2048", "synth: series length"),
    ("synth_D", "3", "synth: variable count"),
    ("periods", "24,96", "synth: seasonal periods"),
    ("amplitudes", "", "synth: per-period amplitudes (empty = all 1)"),
    ("trend_slope", "0", "synth: linear trend slope"),
    ("noise_std", "0.1", "synth: gaussian noise level"),
];

/// Resolved configuration (defaults + file + overrides).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j + 1] + 1).min(curr[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

impl RunConfig {
    /// Set one key, rejecting unknown names with a nearest-match hint.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.values.contains_key(key) {
            let nearest = KEYS
                .iter()
                .map(|(k, _, _)| (*k, levenshtein(key, k)))
                .min_by_key(|(_, d)| *d)
                .filter(|(_, d)| *d <= 3)
                .map(|(k, _)| k);
            let hint = nearest
                .map(|k| format!("; did you mean '{k}'?"))
                .unwrap_or_default();
            let valid = KEYS
                .iter()
                .map(|(k, _, _)| *k)
                .collect::<Vec<_>>()
                .join(", ");
            return Err(ConfigError::UnknownKey {
                key: key.to_string(),
                hint,
                valid,
            });
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Apply a flat `key = value` text (comments with '#').
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &std::path::Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// The resolved config as flat text; parsing it back reproduces the
    /// run exactly.
    pub fn to_provenance(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.get(key).parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: self.get(key).into(),
            expected: "a non-negative integer",
        })
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.get(key).parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: self.get(key).into(),
            expected: "a non-negative integer",
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key).parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: self.get(key).into(),
            expected: "a number",
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(ConfigError::BadValue {
                key: key.into(),
                value: other.into(),
                expected: "true or false",
            }),
        }
    }

    pub fn get_isize(&self, key: &str) -> Result<isize, ConfigError> {
        self.get(key).parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: self.get(key).into(),
            expected: "an integer",
        })
    }

    pub fn get_list_usize(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        split_list(self.get(key))
            .map(|s| s.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: self.get(key).into(),
                expected: "comma-separated integers",
            })
    }

    pub fn get_list_u64(&self, key: &str) -> Result<Vec<u64>, ConfigError> {
        split_list(self.get(key))
            .map(|s| s.parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: self.get(key).into(),
                expected: "comma-separated integers",
            })
    }

    pub fn get_list_f64(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        split_list(self.get(key))
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: self.get(key).into(),
                expected: "comma-separated numbers",
            })
    }

    pub fn embed_mode(&self) -> Result<EmbedMode, ConfigError> {
        match self.get("embed_mode") {
            "di" | "DI" => Ok(EmbedMode::Di),
            "spatial" => Ok(EmbedMode::Spatial),
            "temporal" => Ok(EmbedMode::Temporal),
            other => Err(ConfigError::BadValue {
                key: "embed_mode".into(),
                value: other.into(),
                expected: "di, spatial or temporal",
            }),
        }
    }

    pub fn model_mode(&self) -> Result<ModelMode, ConfigError> {
        match self.get("model_mode") {
            "decomposed" => Ok(ModelMode::Decomposed),
            "trend_as_mtpnet" => Ok(ModelMode::TrendAsMtpnet),
            "no_decomposition" => Ok(ModelMode::NoDecomposition),
            other => Err(ConfigError::BadValue {
                key: "model_mode".into(),
                value: other.into(),
                expected: "decomposed, trend_as_mtpnet or no_decomposition",
            }),
        }
    }

    pub fn variant(&self) -> Result<Variant, ConfigError> {
        Variant::parse(self.get("variant")).ok_or_else(|| ConfigError::BadValue {
            key: "variant".into(),
            value: self.get("variant").into(),
            expected: "full, wo_inter_scale, wo_all_scale, bottom_up, fine, coarse, spatial or temporal",
        })
    }

    pub fn variants(&self) -> Result<Vec<Variant>, ConfigError> {
        split_list(self.get("variants"))
            .map(|s| {
                Variant::parse(s).ok_or_else(|| ConfigError::BadValue {
                    key: "variants".into(),
                    value: s.into(),
                    expected: "comma-separated variant tags",
                })
            })
            .collect()
    }

    pub fn split_ratios(&self) -> Result<[f64; 3], ConfigError> {
        Ok([
            self.get_f64("split_train")?,
            self.get_f64("split_val")?,
            self.get_f64("split_test")?,
        ])
    }

    /// Assemble the pyramid configuration; `dims` comes from the data.
    pub fn pyramid_config(&self, dims: usize) -> Result<PyramidConfig, ConfigError> {
        let lookback = self.get_usize("lookback_I")?;
        let horizon = self.get_usize("horizon_H")?;
        let mut cfg = PyramidConfig::new(
            self.get_list_usize("patch_sizes")?,
            self.get_usize("channels_c")?,
            lookback,
            horizon,
            dims,
        );
        let history = self.get_usize("decoder_history_L")?;
        cfg.history = if history == 0 {
            (lookback / 2).max(1)
        } else {
            history
        };
        cfg.heads = self.get_usize("heads")?;
        cfg.enc_layers = self.get_usize("enc_layers")?;
        cfg.dec_layers = self.get_usize("dec_layers")?;
        cfg.ffn_factor = self.get_usize("ffn_factor")?;
        cfg.dropout = self.get_f64("dropout")?;
        cfg.embed_mode = self.embed_mode()?;
        cfg.no_inter_scale = self.get_bool("no_inter_scale")?;
        cfg.no_all_scale = self.get_bool("no_all_scale")?;
        cfg.bottom_up_decoder = self.get_bool("bottom_up_decoder")?;
        let idx = self.get_isize("single_scale_index")?;
        cfg.single_scale_index = (idx >= 0).then_some(idx as usize);
        self.variant()?.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn decomposition(&self) -> Result<DecompositionConfig, ConfigError> {
        Ok(DecompositionConfig::new(
            self.get_list_usize("decomp_kernel_sizes")?,
        ))
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let clip = self.get_f64("grad_clip")?;
        Ok(TrainConfig {
            batch_size: self.get_usize("batch_size")?,
            lr_max: self.get_f64("lr_max")?,
            lr_min: self.get_f64("lr_min")?,
            epochs: self.get_usize("epochs")?,
            seed: self.get_u64("seed")?,
            patience: self.get_usize("patience")?,
            grad_clip: (clip > 0.0).then_some(clip),
        })
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty())
}
