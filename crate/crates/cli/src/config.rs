//! TOML run configuration. Every block is optional; missing keys take the
//! library defaults. Unknown keys are rejected with their full path.

use std::path::{Path, PathBuf};

use osda::data::{SynthConfig, TransformPolicy, UnknownPlacement};
use osda::experiment::ExperimentConfig;
use osda::pseudolabel::{ConfidenceMeasure, Thresholds};
use osda::trainer::{AdaptConfig, OptimConfig, SourceTrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub jobs: usize,
    pub data: DataBlock,
    pub model: ModelBlock,
    pub source: SourceBlock,
    pub adapt: AdaptBlock,
    pub eval: EvalBlock,
    pub sweep: SweepBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            jobs: 1,
            data: DataBlock::default(),
            model: ModelBlock::default(),
            source: SourceBlock::default(),
            adapt: AdaptBlock::default(),
            eval: EvalBlock::default(),
            sweep: SweepBlock::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Trailing,
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataBlock {
    pub dim: usize,
    pub num_known: usize,
    pub num_unknown: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub radius: f64,
    pub blob_std: f64,
    pub shift_rotation_deg: f64,
    pub shift_translation: Vec<f64>,
    pub placement: Placement,
    /// Use CSV files instead of synthetic data.
    pub csv: Option<CsvBlock>,
}

impl Default for DataBlock {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            dim: s.dim,
            num_known: s.num_known,
            num_unknown: s.num_unknown,
            source_per_class: s.source_per_class,
            target_per_class: s.target_per_class,
            radius: s.radius,
            blob_std: s.blob_std,
            shift_rotation_deg: s.shift_rotation.to_degrees(),
            shift_translation: s.shift_translation,
            placement: Placement::Trailing,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvBlock {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub hidden_labels: Option<PathBuf>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelBlock {
    pub hidden: Vec<usize>,
    pub precision: Precision,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            hidden: SourceTrainConfig::default().hidden,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SourceBlock {
    fn default() -> Self {
        let s = SourceTrainConfig::default();
        Self {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.optim.learning_rate,
            momentum: s.optim.momentum,
            weight_decay: s.optim.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    #[default]
    Entropy,
    MaxProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptBlock {
    pub alpha_p: f64,
    pub alpha_c: f64,
    pub beta: f64,
    pub extra_outputs: usize,
    pub pseudo_batch: usize,
    pub consistency_batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Both or neither; defaults derive from the source class count.
    pub delta_k: Option<f64>,
    pub delta_u: Option<f64>,
    pub confidence: Confidence,
    pub transform: TransformBlock,
}

impl Default for AdaptBlock {
    fn default() -> Self {
        let a = AdaptConfig::default();
        Self {
            alpha_p: a.alpha_p,
            alpha_c: a.alpha_c,
            beta: a.beta,
            extra_outputs: a.extra_outputs,
            pseudo_batch: a.pseudo_batch,
            consistency_batch: a.consistency_batch,
            steps: a.steps,
            learning_rate: a.optim.learning_rate,
            momentum: a.optim.momentum,
            weight_decay: a.optim.weight_decay,
            delta_k: None,
            delta_u: None,
            confidence: Confidence::Entropy,
            transform: TransformBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformBlock {
    pub noise_std: f64,
    pub rotation_max_deg: f64,
    pub scale_range: [f64; 2],
}

impl Default for TransformBlock {
    fn default() -> Self {
        let t = TransformPolicy::default();
        Self {
            noise_std: t.noise_std,
            rotation_max_deg: t.rotation_max.to_degrees(),
            scale_range: [t.scale_range.0, t.scale_range.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalBlock {
    /// Seed repeats for ablations and sweeps: `seed, seed + 1, ...`.
    pub repeats: usize,
    pub histogram_bins: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            repeats: 5,
            histogram_bins: 20,
        }
    }
}

/// Parameter grids; each nonempty list is swept on its own.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepBlock {
    pub beta: Vec<f64>,
    pub extra_outputs: Vec<usize>,
    pub delta_k: Vec<f64>,
    pub delta_u: Vec<f64>,
    pub num_unknown: Vec<usize>,
}

impl SweepBlock {
    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
            && self.extra_outputs.is_empty()
            && self.delta_k.is_empty()
            && self.delta_u.is_empty()
            && self.num_unknown.is_empty()
    }
}

impl RunConfig {
    /// Parses TOML, failing on the first unknown key.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(key) = unknown.first() {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form of the resolved config, ignoring
    /// the output directory.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            dim: d.dim,
            num_known: d.num_known,
            num_unknown: d.num_unknown,
            source_per_class: d.source_per_class,
            target_per_class: d.target_per_class,
            radius: d.radius,
            blob_std: d.blob_std,
            shift_rotation: d.shift_rotation_deg.to_radians(),
            shift_translation: d.shift_translation.clone(),
            placement: match d.placement {
                Placement::Trailing => UnknownPlacement::Trailing,
                Placement::Interleaved => UnknownPlacement::Interleaved,
            },
        }
    }

    pub fn source_train(&self) -> SourceTrainConfig {
        let s = &self.source;
        SourceTrainConfig {
            hidden: self.model.hidden.clone(),
            epochs: s.epochs,
            batch_size: s.batch_size,
            optim: OptimConfig {
                learning_rate: s.learning_rate,
                momentum: s.momentum,
                weight_decay: s.weight_decay,
            },
            seed: 0,
        }
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig, CliError> {
        let a = &self.adapt;
        let thresholds = match (a.delta_k, a.delta_u) {
            (Some(delta_k), Some(delta_u)) => Some(Thresholds { delta_k, delta_u }),
            (None, None) => None,
            _ => return Err(CliError::Config("adapt.delta_k and adapt.delta_u must be set together".into())),
        };
        Ok(AdaptConfig {
            alpha_p: a.alpha_p,
            alpha_c: a.alpha_c,
            beta: a.beta,
            extra_outputs: a.extra_outputs,
            pseudo_batch: a.pseudo_batch,
            consistency_batch: a.consistency_batch,
            steps: a.steps,
            seed: 0,
            thresholds,
            confidence: match a.confidence {
                Confidence::Entropy => ConfidenceMeasure::Entropy,
                Confidence::MaxProb => ConfidenceMeasure::max_prob_default(),
            },
            transform: TransformPolicy {
                noise_std: a.transform.noise_std,
                rotation_max: a.transform.rotation_max_deg.to_radians(),
                scale_range: (a.transform.scale_range[0], a.transform.scale_range[1]),
            },
            optim: OptimConfig {
                learning_rate: a.learning_rate,
                momentum: a.momentum,
                weight_decay: a.weight_decay,
            },
        })
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig {
            data: self.synth(),
            source: self.source_train(),
            adapt: self.adapt_config()?,
        })
    }

    /// Checks every block before any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: osda::Error| CliError::Config(e.to_string());
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        if self.data.csv.is_none() {
            self.synth().validate().map_err(bad)?;
        } else if self.data.num_known < 2 {
            return Err(CliError::Config("data.num_known must be at least 2".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(CliError::Config("model.hidden widths must be positive".into()));
        }
        if self.source.batch_size == 0 {
            return Err(CliError::Config("source.batch_size must be positive".into()));
        }
        self.source_train().optim.validate().map_err(bad)?;
        let adapt = self.adapt_config()?;
        adapt.validate().map_err(bad)?;
        if let Some(t) = adapt.thresholds {
            t.validate(self.data.num_known).map_err(bad)?;
        }
        if self.eval.repeats == 0 {
            return Err(CliError::Config("eval.repeats must be at least 1".into()));
        }
        Ok(())
    }
}
