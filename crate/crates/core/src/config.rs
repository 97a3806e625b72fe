//! Model and run configuration, presets, and the digest stored in checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::nn::Activation;

/// Loss weights `(λ_rec, λ_css, λ_dis)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub census: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            census: 1.0,
            distill: 0.01,
        }
    }
}

/// Census loss constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusConfig {
    pub patch: usize,
    /// `d / sqrt(soft_eps + d²)` soft binarization.
    pub soft_eps: f64,
    /// `d² / (rho_eps + d²)` per-bit distance.
    pub rho_eps: f64,
    /// Generalized Charbonnier `(x² + ε²)^α − ε^{2α}`.
    pub charbonnier_alpha: f64,
    pub charbonnier_eps: f64,
}

impl Default for CensusConfig {
    fn default() -> Self {
        CensusConfig {
            patch: 7,
            soft_eps: 1e-4,
            rho_eps: 0.1,
            charbonnier_alpha: 0.45,
            charbonnier_eps: 1e-3,
        }
    }
}

/// Every architectural and optimization hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub window_size: usize,
    pub width: usize,
    /// Transformer layers in each of the four blocks.
    pub tfls: [usize; 4],
    pub encoder_widths: [usize; 4],
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
    pub mlp_activation: Activation,
    pub conv_activation: Activation,
    pub loss: LossWeights,
    pub census: CensusConfig,
    pub lr: f64,
    pub weight_decay: f64,
    /// Batch size while only the flow estimator trains.
    pub batch_flow: usize,
    /// Batch size for end-to-end training.
    pub batch: usize,
    pub crop: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            preset: "paper".into(),
            window_size: 8,
            width: 180,
            tfls: [2, 6, 6, 6],
            encoder_widths: [24, 48, 96, 192],
            heads: 6,
            mlp_ratio: 2,
            attention: AttentionKind::CrossScale,
            mlp_activation: Activation::Gelu,
            conv_activation: Activation::LeakyRelu,
            loss: LossWeights::default(),
            census: CensusConfig::default(),
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_flow: 48,
            batch: 24,
            crop: 192,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            preset: "toy".into(),
            window_size: 4,
            width: 32,
            tfls: [1, 2, 2, 2],
            encoder_widths: [8, 16, 24, 32],
            heads: 2,
            lr: 1e-3,
            batch_flow: 4,
            batch: 4,
            crop: 48,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.window_size == 0 {
            return bad("window_size must be positive".into());
        }
        if self.attention == AttentionKind::CrossScale && !self.window_size.is_multiple_of(4) {
            return bad(format!(
                "cross-scale attention needs window_size divisible by 4, got {}",
                self.window_size
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.encoder_widths.contains(&0) || self.width == 0 || self.mlp_ratio == 0 {
            return bad("widths and mlp_ratio must be positive".into());
        }
        if self.conv_activation != Activation::LeakyRelu {
            return bad("convolution stacks only support leaky_relu".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(16) {
            return bad(format!("crop {} must be a positive multiple of 16", self.crop));
        }
        if self.batch == 0 || self.batch_flow == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.census.patch.is_multiple_of(2) {
            return bad(format!("census patch {} must be odd", self.census.patch));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// A full run: model configuration plus paths, seed and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to resume from, if any.
    pub checkpoint: Option<PathBuf>,
    /// Steps training the flow estimator alone.
    pub steps_flow: u64,
    /// End-to-end steps.
    pub steps_joint: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        RunConfig {
            model,
            seed: 0,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            steps_flow: 500,
            steps_joint: 1500,
            eval_every: 500,
            checkpoint_every: 500,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path.display(), e))
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_flow + self.steps_joint
    }

    /// The part of the run that must match on resume.
    pub fn identity(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.model, "seed": self.seed })
    }

    pub fn digest(&self) -> String {
        digest_of(&self.identity())
    }
}

/// Hex SHA-256 of a JSON value's canonical (sorted-key) serialization.
pub fn digest_of(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("json serializes");
    let hash = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(64);
    for b in hash {
        write!(out, "{b:02x}").expect("write to string");
    }
    out
}

/// Leaf-level differences between two JSON documents as `path: old -> new`.
pub fn json_diff(old: &serde_json::Value, new: &serde_json::Value) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    let null = serde_json::Value::Null;
                    walk(&p, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", old, new, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn paper_preset_constants() {
        let p = ModelConfig::paper();
        assert_eq!(p.window_size, 8);
        assert_eq!(p.width, 180);
        assert_eq!(p.tfls, [2, 6, 6, 6]);
        assert_eq!(p.encoder_widths, [24, 48, 96, 192]);
        assert_eq!(p.loss, LossWeights { rec: 1.0, census: 1.0, distill: 0.01 });
        assert_eq!(p.lr, 1e-4);
        assert_eq!(p.crop, 192);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::new(ModelConfig::toy())).unwrap();
        v["model"]["dropout"] = serde_json::json!(0.1);
        let err = serde_json::from_value::<RunConfig>(v).unwrap_err();
        assert!(err.to_string().contains("dropout"));
    }

    #[test]
    fn digest_tracks_model_and_seed_only() {
        let a = RunConfig::new(ModelConfig::toy());
        let mut b = a.clone();
        b.steps_joint += 10;
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.model.lr = 5e-4;
        assert_ne!(a.digest(), b.digest());
        let diff = json_diff(&a.identity(), &b.identity());
        assert_eq!(diff, vec!["model.lr: 0.001 -> 0.0005".to_string()]);
    }

    #[test]
    fn rejects_window_not_divisible_by_four() {
        let mut c = ModelConfig::toy();
        c.window_size = 6;
        assert_eq!(c.validate().unwrap_err().category(), "config");
        c.attention = AttentionKind::Window;
        c.validate().unwrap();
    }
}
