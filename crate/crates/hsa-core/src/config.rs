//! Run configuration: a TOML document mirroring every hyperparameter, with
//! defaults for all fields, rejection of unknown keys, aggregated
//! constraint validation, and dotted-path command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::ViewParams;
use crate::dataio::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EntropyBase;
use crate::loss::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the CIFAR-10 binary batch files.
    pub cifar_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Generation seed, separate from the run seed so ablation variants
    /// share one dataset while training stochasticity varies.
    pub synthetic_seed: u64,
    /// Validation samples per class generated alongside a synthetic train set.
    pub synthetic_val_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            cifar_dir: None,
            synthetic: SyntheticSpec::default(),
            synthetic_seed: 12345,
            synthetic_val_per_class: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    Cutmix,
    Mixup,
}

/// Ablation switches. `baseline_moco` forces the other additions off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub baseline_moco: bool,
    /// Add the mined positive query (q_p).
    pub add_positive: bool,
    /// Add the mixed query (q_hat).
    pub add_mix: bool,
    /// Enable the companion-stage losses.
    pub stages_on: bool,
    pub mix_kind: MixKind,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            baseline_moco: false,
            add_positive: true,
            add_mix: true,
            stages_on: true,
            mix_kind: MixKind::Cutmix,
        }
    }
}

impl VariantConfig {
    pub fn baseline() -> Self {
        VariantConfig {
            baseline_moco: true,
            add_positive: false,
            add_mix: false,
            stages_on: false,
            mix_kind: MixKind::Cutmix,
        }
    }

    /// Does this run need mined positives at all?
    pub fn uses_positive(&self) -> bool {
        !self.baseline_moco && (self.add_positive || self.add_mix)
    }
}

/// Evaluation-protocol knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbor counts reported by the kNN classifier.
    pub knn_neighbors: Vec<usize>,
    pub knn_tau: f64,
    pub probe_epochs: u64,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub finetune_epochs: u64,
    pub finetune_batch: usize,
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub entropy_threshold: f64,
    pub entropy_base: EntropyBase,
    /// Pseudo-label retraining schedule: epochs and stepwise decay cadence.
    pub mine_epochs: u64,
    pub mine_decay_every: u64,
    pub mine_backbone_lr: f64,
    pub mine_head_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            knn_neighbors: vec![20, 200],
            knn_tau: 0.07,
            probe_epochs: 100,
            probe_lr: 1.0,
            probe_batch: 256,
            finetune_epochs: 60,
            finetune_batch: 64,
            backbone_lr: 1e-4,
            head_lr: 10.0,
            entropy_threshold: 1.0,
            entropy_base: EntropyBase::Nat,
            mine_epochs: 30,
            mine_decay_every: 10,
            mine_backbone_lr: 1e-4,
            mine_head_lr: 1e-2,
        }
    }
}

/// Every hyperparameter of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub run_name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub augment: ViewParams,
    pub variant: VariantConfig,
    pub loss_weights: LossWeights,
    pub eval: EvalConfig,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Key-encoder EMA momentum.
    pub momentum: f64,
    pub queue_capacity: usize,
    /// Mined neighbors per anchor (0 reduces the positive to the anchor).
    pub knn_k: usize,
    /// Bank refresh period in epochs.
    pub refresh_period: u64,
    /// Beta(alpha, alpha) parameter for the mixing ratio.
    pub mix_alpha: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Error out instead of using a partially filled queue.
    pub strict_queue_warmup: bool,
    /// Checkpoint every n epochs (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run_name: "run".into(),
            seed: 0,
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            augment: ViewParams::default(),
            variant: VariantConfig::default(),
            loss_weights: LossWeights::default(),
            eval: EvalConfig::default(),
            tau: 0.2,
            momentum: 0.999,
            queue_capacity: 4096,
            knn_k: 10,
            refresh_period: 5,
            mix_alpha: 1.0,
            batch_size: 128,
            epochs: 60,
            base_lr: 0.06,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            strict_queue_warmup: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Enforce flag implications (the baseline variant disables every
    /// addition). Idempotent, so round-trips stay exact.
    pub fn normalize(&mut self) {
        if self.variant.baseline_moco {
            self.variant.add_positive = false;
            self.variant.add_mix = false;
            self.variant.stages_on = false;
        }
    }

    /// Collect every constraint violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut absorb = |r: Result<()>| {
            if let Err(Error::Config(mut v)) = r {
                problems.append(&mut v);
            }
        };
        absorb(self.encoder.validate());
        absorb(self.augment.validate());
        absorb(self.dataset.synthetic.validate());

        if self.dataset.kind == DatasetKind::Cifar10 && self.dataset.cifar_dir.is_none() {
            problems.push("dataset.cifar_dir is required for the cifar10 dataset".into());
        }
        if self.tau <= 0.0 {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            problems.push(format!("momentum must lie in [0,1], got {}", self.momentum));
        }
        if self.queue_capacity == 0 {
            problems.push("queue_capacity must be positive".into());
        }
        if self.refresh_period == 0 {
            problems.push("refresh_period must be positive".into());
        }
        if self.mix_alpha <= 0.0 {
            problems.push(format!("mix_alpha must be positive, got {}", self.mix_alpha));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if self.base_lr < 0.0 {
            problems.push(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            problems.push(format!(
                "sgd_momentum must lie in [0,1), got {}",
                self.sgd_momentum
            ));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.eval.knn_tau <= 0.0 {
            problems.push(format!("eval.knn_tau must be positive, got {}", self.eval.knn_tau));
        }
        if self.eval.knn_neighbors.is_empty() {
            problems.push("eval.knn_neighbors must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Canonical serialized form.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical form; checkpoints refuse to resume across
    /// config changes.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hasher.finalize().into()
    }
}

/// Parse one `key.path=value` override against a TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(vec![format!("override `{spec}` must look like key.path=value")])
    })?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(vec![format!("override `{spec}` has an empty path segment")]));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("`{p}` is not a table in `{path}`")]))?
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let leaf: toml::Value = raw
        .trim()
        .parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(raw.trim().to_string()));
    node.as_table_mut()
        .ok_or_else(|| Error::Config(vec![format!("`{path}` does not address a table entry")]))?
        .insert(parts[parts.len() - 1].to_string(), leaf);
    Ok(())
}

/// Parse, override, normalize, and validate a config document. An empty
/// document yields the full default config.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(vec![format!("TOML parse error: {e}")]))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: TrainConfig = value
        .try_into()
        .map_err(|e| Error::Config(vec![format!("{e}")]))?;
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

/// [`parse_config_str`] over a file path.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_str(&text, overrides)
}
