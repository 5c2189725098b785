//! End-to-end trials on synthetic data: generate, pretrain, adapt, evaluate.

use crate::data::{generate_synthetic, DomainPair, SynthConfig};
use crate::error::Result;
use crate::metrics::{evaluate, EvalReport};
use crate::model::ExpandedClassifier;
use crate::pseudolabel::{pseudo_label_report, ReliabilityReport};
use crate::scalar::Scalar;
use crate::trainer::{adapt, predict_open_set, train_source, AdaptConfig, SourceTrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub source: SourceTrainConfig,
    pub adapt: AdaptConfig,
}

/// Independent per-stage seeds derived from one trial seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub data: u64,
    pub source: u64,
    pub adapt: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64) -> Self {
        let mix = |salt: u64| {
            let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Self {
            data: mix(1),
            source: mix(2),
            adapt: mix(3),
        }
    }
}

/// Source model and data shared by every variant of one trial.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub data: DomainPair<T>,
    pub source_model: ExpandedClassifier<T>,
    pub source_accuracy: f64,
    pub seeds: StageSeeds,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub baseline: EvalReport,
    pub adapted: EvalReport,
    pub pseudo_labels: ReliabilityReport,
    pub source_accuracy: f64,
}

pub fn prepare<T: Scalar>(config: &ExperimentConfig, seed: u64) -> Result<Prepared<T>> {
    let seeds = StageSeeds::derive(seed);
    let data = generate_synthetic::<T>(&config.data, seeds.data)?;
    let source_cfg = SourceTrainConfig {
        seed: seeds.source,
        ..config.source.clone()
    };
    let trained = train_source(&data.source, data.num_known, &source_cfg)?;
    Ok(Prepared {
        source_accuracy: trained.final_accuracy(),
        source_model: trained.model,
        data,
        seeds,
    })
}

impl<T: Scalar> Prepared<T> {
    fn adapt_config(&self, base: &AdaptConfig) -> AdaptConfig {
        AdaptConfig {
            seed: self.seeds.adapt,
            ..base.clone()
        }
    }

    /// Open-set evaluation of the unadapted model with a freshly expanded head.
    pub fn baseline(&self, config: &AdaptConfig) -> Result<EvalReport> {
        let cfg = self.adapt_config(config);
        let expanded = self.source_model.expand_head(cfg.extra_outputs, cfg.seed)?;
        let preds = predict_open_set(&expanded, &self.data.target_features)?;
        evaluate(&preds, self.data.target_labels_hidden.as_slice(), self.data.num_known)
    }

    pub fn run(&self, config: &AdaptConfig) -> Result<(EvalReport, ReliabilityReport)> {
        let cfg = self.adapt_config(config);
        let out = adapt(&self.source_model, &self.data.target_features, &cfg)?;
        let preds = predict_open_set(&out.model, &self.data.target_features)?;
        let report = evaluate(&preds, self.data.target_labels_hidden.as_slice(), self.data.num_known)?;
        let pl = pseudo_label_report(&out.pseudo_labels, self.data.target_labels_hidden.as_slice(), 20)?;
        Ok((report, pl))
    }

    pub fn run_variant(&self, config: &AdaptConfig, variant: Variant) -> Result<EvalReport> {
        self.run(&config.for_variant(variant)).map(|r| r.0)
    }
}

/// Full method and source-only baseline for one seed.
pub fn run_trial<T: Scalar>(config: &ExperimentConfig, seed: u64) -> Result<TrialOutcome> {
    let prepared = prepare::<T>(config, seed)?;
    let baseline = prepared.baseline(&config.adapt)?;
    let (adapted, pseudo_labels) = prepared.run(&config.adapt)?;
    Ok(TrialOutcome {
        baseline,
        adapted,
        pseudo_labels,
        source_accuracy: prepared.source_accuracy,
    })
}
