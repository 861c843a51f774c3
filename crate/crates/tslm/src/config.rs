//! Declarative run configuration: one file with model, train, data, and
//! eval sections. Field defaults reproduce the reference training recipe
//! (Adam 2e-5, 10 epochs, 5% warmup + cosine decay, 6/1 batching,
//! DoRA rank 8 / alpha 32).

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub d_enc: usize,
    pub num_prototypes: usize,
    pub enc_heads: usize,
    pub max_patch_log2: u32,
    pub head_lengths: Vec<usize>,
    pub t_cap: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_llm: m.d_llm,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_positions: m.max_positions,
            d_enc: m.d_enc,
            num_prototypes: m.num_prototypes,
            enc_heads: m.enc_heads,
            max_patch_log2: m.max_patch_log2,
            head_lengths: m.head_lengths,
            t_cap: m.t_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub batch_understand: usize,
    pub batch_generate: usize,
    pub lambda_text: f64,
    pub lambda_series: f64,
    pub clip_norm: f64,
    pub dora: bool,
    pub dora_rank: usize,
    pub dora_alpha: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            epochs: t.epochs,
            warmup_frac: t.warmup_frac,
            batch_understand: t.batch_understand,
            batch_generate: t.batch_generate,
            lambda_text: t.lambda_text,
            lambda_series: t.lambda_series,
            clip_norm: t.clip_norm,
            dora: true,
            dora_rank: 8,
            dora_alpha: 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Path to the training dataset (JSONL).
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Name this model reports under in evaluation output.
    pub model_name: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { model_name: "tslm".into() }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_llm: self.model.d_llm,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_positions: self.model.max_positions,
            d_enc: self.model.d_enc,
            num_prototypes: self.model.num_prototypes,
            enc_heads: self.model.enc_heads,
            max_patch_log2: self.model.max_patch_log2,
            head_lengths: self.model.head_lengths.clone(),
            t_cap: self.model.t_cap,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            warmup_frac: self.train.warmup_frac,
            batch_understand: self.train.batch_understand,
            batch_generate: self.train.batch_generate,
            seed: self.seed,
            lambda_text: self.train.lambda_text,
            lambda_series: self.train.lambda_series,
            clip_norm: self.train.clip_norm,
        }
    }

    /// A configuration sized for the synthetic toy suite: small widths,
    /// a short expert ladder, and a learning rate suited to training from
    /// scratch rather than finetuning.
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            model: ModelSection {
                d_llm: 32,
                n_layers: 2,
                n_heads: 4,
                max_positions: 384,
                d_enc: 16,
                num_prototypes: 32,
                enc_heads: 2,
                max_patch_log2: 6,
                head_lengths: vec![8, 16, 32, 64, 96],
                t_cap: 200,
            },
            train: TrainSection { lr: 1e-2, ..Default::default() },
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}
