//! The assembled model: encoder + backbone + heads over one parameter set,
//! with DoRA-aware weight resolution, loss graphs for training, and the
//! prediction paths used at evaluation time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    assemble, backbone_linear_names, forward, AssembledInput, AssemblyMode, BackboneConfig,
    BackboneError, TokenId, Tokenizer, WeightResolver, EOS, VOCAB_SIZE,
};
use crate::dataset::{flatten_input, NormStats, Target, TaskInstance, TimeSeries};
use crate::encoder::{
    encode_flat_graph, EncodedSignal, EncoderError, ExpertFamily, ReprogrammingParams,
};
use crate::heads::{select_head, HeadBank, HeadsError, TextHead};
use crate::metrics::{FailureReason, Outcome, PredictionRecord};
use crate::numerics::{Binder, Checkpoint, NodeId, ParamSet, Tape, Tensor};
use crate::training::AdapterMap;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("instance `{0}` has no input series")]
    MissingInput(String),
    #[error("expected a {expected} target for instance `{id}`")]
    WrongTarget { id: String, expected: &'static str },
    #[error("cannot map {target} target channels onto {input} input channels")]
    UnsupportedChannels { input: usize, target: usize },
    #[error("non-finite prediction")]
    NonFinitePrediction,
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

/// Model hyperparameters; everything needed to rebuild the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
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

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_llm: 32,
            n_layers: 2,
            n_heads: 4,
            max_positions: 512,
            d_enc: 16,
            num_prototypes: 32,
            enc_heads: 2,
            max_patch_log2: crate::encoder::DEFAULT_MAX_PATCH_LOG2,
            head_lengths: crate::heads::DEFAULT_HEAD_LENGTHS.to_vec(),
            t_cap: crate::encoder::MAX_TOKENS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) {
        assert!(self.d_llm % self.n_heads == 0, "n_heads must divide d_llm");
        assert!(self.d_llm % self.enc_heads == 0, "enc_heads must divide d_llm");
        assert!(!self.head_lengths.is_empty());
        assert!(self.head_lengths.windows(2).all(|w| w[0] < w[1]));
        assert!(self.t_cap >= crate::encoder::MAX_TOKENS, "t_cap must cover the router band");
    }
}

/// Maximum new tokens for greedy text decoding at evaluation time.
pub const DECODE_MAX_NEW: usize = 16;

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub adapters: AdapterMap,
    pub family: ExpertFamily,
    pub reprog: ReprogrammingParams,
    pub bank: HeadBank,
    pub text_head: TextHead,
    pub tokenizer: Tokenizer,
}

impl WeightResolver for Model {
    fn weight(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        name: &str,
    ) -> crate::numerics::Result<NodeId> {
        self.adapters.resolve(tape, binder, name)
    }
}

impl Model {
    /// Builds a model with deterministically seeded parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = cfg.d_llm;

        let uniform = |shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng| {
            let numel: usize = shape.iter().product();
            Tensor::new(shape, (0..numel).map(|_| rng.random_range(-bound..bound)).collect())
                .expect("consistent shape")
        };

        // Token embeddings double as the prototype source for patch
        // reprogramming; they need O(1)-norm prototypes after projection,
        // so the embedding scale is larger than the usual text-only 0.02.
        params.insert("embed.token", uniform(vec![VOCAB_SIZE, d], 0.3, &mut rng), true);
        params.insert("embed.pos", uniform(vec![cfg.max_positions, d], 0.05, &mut rng), true);

        for i in 0..cfg.n_layers {
            let p = format!("backbone.l{i}");
            let b = 1.0 / (d as f64).sqrt();
            params.insert(format!("{p}.ln1.gain"), Tensor::new(vec![d], vec![1.0; d]).unwrap(), true);
            params.insert(format!("{p}.ln1.bias"), Tensor::zeros(vec![d]), true);
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("{p}.attn.{w}"), uniform(vec![d, d], b, &mut rng), true);
            }
            for bias in ["bq", "bv", "bo"] {
                params.insert(format!("{p}.attn.{bias}"), Tensor::zeros(vec![d]), true);
            }
            params.insert(format!("{p}.ln2.gain"), Tensor::new(vec![d], vec![1.0; d]).unwrap(), true);
            params.insert(format!("{p}.ln2.bias"), Tensor::zeros(vec![d]), true);
            params.insert(format!("{p}.mlp.w1"), uniform(vec![d, 4 * d], b, &mut rng), true);
            params.insert(format!("{p}.mlp.b1"), Tensor::zeros(vec![4 * d]), true);
            params.insert(
                format!("{p}.mlp.w2"),
                uniform(vec![4 * d, d], 1.0 / (4.0 * d as f64).sqrt(), &mut rng),
                true,
            );
            params.insert(format!("{p}.mlp.b2"), Tensor::zeros(vec![d]), true);
        }
        params.insert("backbone.lnf.gain", Tensor::new(vec![d], vec![1.0; d]).unwrap(), true);
        params.insert("backbone.lnf.bias", Tensor::zeros(vec![d]), true);

        let family = ExpertFamily::new(cfg.max_patch_log2);
        for expert in family.experts() {
            let p = expert.patch_size;
            params.insert(
                expert.weights_name.clone(),
                uniform(vec![cfg.d_enc, p], 1.0 / (p as f64).sqrt(), &mut rng),
                true,
            );
            params.insert(expert.bias_name.clone(), Tensor::zeros(vec![cfg.d_enc]), true);
        }

        let reprog = ReprogrammingParams::standard(cfg.num_prototypes);
        // Scaled so prototype rows come out near unit variance given the
        // embedding scale above; uniform attention at init would otherwise
        // make the encoder output insensitive to its input patches.
        params.insert(
            reprog.vocab_proj.clone(),
            uniform(vec![cfg.num_prototypes, VOCAB_SIZE], 0.6, &mut rng),
            true,
        );
        params.insert(
            reprog.wq.clone(),
            uniform(vec![cfg.d_enc, d], 1.0 / (cfg.d_enc as f64).sqrt(), &mut rng),
            true,
        );
        params.insert(reprog.bq.clone(), Tensor::zeros(vec![d]), true);
        let bd = 1.0 / (d as f64).sqrt();
        params.insert(reprog.wk.clone(), uniform(vec![d, d], bd, &mut rng), true);
        params.insert(reprog.wv.clone(), uniform(vec![d, d], bd, &mut rng), true);
        params.insert(reprog.bv.clone(), Tensor::zeros(vec![d]), true);
        params.insert(reprog.wo.clone(), uniform(vec![d, d], bd, &mut rng), true);
        params.insert(reprog.bo.clone(), Tensor::zeros(vec![d]), true);
        params.insert(reprog.final_proj.clone(), uniform(vec![d, d], bd, &mut rng), true);

        let bank = HeadBank::new(&cfg.head_lengths);
        let text_head = TextHead::default();
        params.insert(text_head.unembed_name.clone(), uniform(vec![d, VOCAB_SIZE], bd, &mut rng), true);
        for head in bank.heads() {
            let k = cfg.t_cap * d;
            params.insert(
                head.weights_name.clone(),
                uniform(vec![head.out_length, k], 1.0 / (k as f64).sqrt(), &mut rng),
                true,
            );
            params.insert(head.bias_name.clone(), Tensor::zeros(vec![head.out_length]), true);
        }

        Self {
            cfg,
            params,
            adapters: AdapterMap::default(),
            family,
            reprog,
            bank,
            text_head,
            tokenizer: Tokenizer,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            d_llm: self.cfg.d_llm,
            n_layers: self.cfg.n_layers,
            n_heads: self.cfg.n_heads,
            max_positions: self.cfg.max_positions,
        }
    }

    /// Names of the weights DoRA wraps by default: backbone attention/MLP
    /// linears plus every head weight, with their storage orientation
    /// (`true` when stored rows are output units).
    pub fn dora_targets(&self) -> Vec<(String, bool)> {
        let mut targets: Vec<(String, bool)> = backbone_linear_names(self.cfg.n_layers)
            .into_iter()
            .map(|n| (n, false))
            .collect();
        targets.push((self.text_head.unembed_name.clone(), false));
        for head in self.bank.heads() {
            targets.push((head.weights_name.clone(), true));
        }
        targets
    }

    /// Wraps the default target set with DoRA adapters.
    pub fn apply_dora(&mut self, rank: usize, alpha: f64, seed: u64) -> ModelResult<()> {
        let targets = self.dora_targets();
        crate::training::dora_wrap(&mut self.params, &mut self.adapters, &targets, rank, alpha, seed)?;
        Ok(())
    }

    fn encode_on(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        flat: &[f64],
    ) -> ModelResult<EncodedSignal> {
        let vocab = binder.bind(tape, "embed.token")?;
        Ok(encode_flat_graph(tape, binder, flat, &self.family, vocab, &self.reprog, self.cfg.enc_heads)?)
    }

    fn assemble_on(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        x_enc: Option<NodeId>,
        ids: &[TokenId],
        mode: AssemblyMode,
    ) -> ModelResult<AssembledInput> {
        let table = binder.bind(tape, "embed.token")?;
        Ok(assemble(tape, x_enc, ids, mode, table)?)
    }

    fn label_string(target: &Target, id: &str) -> ModelResult<String> {
        match target {
            Target::TextLabel(s) => Ok(s.clone()),
            Target::McqChoice(c) => Ok(c.as_str().to_string()),
            _ => Err(ModelError::WrongTarget { id: id.into(), expected: "textual" }),
        }
    }

    /// Cross-entropy over the label continuation of an understanding
    /// instance: the sequence is `[series ; prompt ; label]` and the loss
    /// covers the label tokens plus the closing EOS.
    pub fn understanding_loss_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        inst: &TaskInstance,
    ) -> ModelResult<NodeId> {
        let input = inst.input.as_ref().ok_or_else(|| ModelError::MissingInput(inst.id.clone()))?;
        let enc = self.encode_on(tape, binder, &flatten_input(input))?;
        let prompt_ids = self.tokenizer.tokenize(&inst.prompt);
        let label = Self::label_string(&inst.target, &inst.id)?;
        let mut label_ids: Vec<TokenId> = label.bytes().map(usize::from).collect();
        label_ids.push(EOS);

        let mut ids = prompt_ids.clone();
        ids.extend_from_slice(&label_ids);
        let assembled =
            self.assemble_on(tape, binder, Some(enc.x_enc), &ids, AssemblyMode::Understanding)?;
        let h = forward(tape, binder, self, &assembled, &self.backbone_config())?;

        // Position t predicts token t+1: rows from the last prompt token up
        // to the penultimate label token predict the label ids.
        let start = enc.t_enc + prompt_ids.len() - 1;
        let rows = tape.slice_rows(h, start, start + label_ids.len())?;
        let unembed = self.weight(tape, binder, &self.text_head.unembed_name)?;
        let logits = tape.matmul(rows, unembed)?;
        let mask = vec![true; label_ids.len()];
        Ok(crate::training::cross_entropy_loss(tape, logits, &label_ids, &mask).map_err(|e| {
            match e {
                crate::training::TrainError::Numerics(n) => ModelError::Numerics(n),
                other => ModelError::WrongTarget { id: inst.id.clone(), expected: Box::leak(other.to_string().into_boxed_str()) },
            }
        })?)
    }

    /// One generation pass on the tape: encode (or TS_EMPTY), assemble in
    /// prompt-as-prefix order, forward, select the head, read out
    /// `required` values on the normalised scale.
    fn generation_pass(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        flat: Option<&[f64]>,
        stats_override: Option<NormStats>,
        prompt: &str,
        required: usize,
    ) -> ModelResult<(NodeId, NormStats)> {
        let (x_enc, span_stats) = match flat {
            Some(flat) => {
                let enc = self.encode_on(tape, binder, flat)?;
                (Some(enc.x_enc), enc.norm_stats)
            }
            None => (None, stats_override.unwrap_or_else(NormStats::identity)),
        };
        let prompt_ids = self.tokenizer.tokenize(prompt);
        let assembled = self.assemble_on(tape, binder, x_enc, &prompt_ids, AssemblyMode::Generation)?;
        let h = forward(tape, binder, self, &assembled, &self.backbone_config())?;
        let head = select_head(&self.bank, required)?;
        let pred = crate::heads::predict_series_graph(
            tape,
            binder,
            self,
            h,
            assembled.series_span,
            head,
            required,
            self.cfg.t_cap,
        )?;
        Ok((pred, span_stats))
    }

    /// Mean squared error of a generation instance on the normalised
    /// scale; multichannel targets average the per-channel losses.
    pub fn generation_loss_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        inst: &TaskInstance,
    ) -> ModelResult<NodeId> {
        let mse = |tape: &mut Tape, pred: NodeId, target: &[f64]| -> ModelResult<NodeId> {
            crate::training::mse_loss_graph(tape, pred, target).map_err(|e| match e {
                crate::training::TrainError::Numerics(n) => ModelError::Numerics(n),
                crate::training::TrainError::LengthMismatch { pred, target } => {
                    ModelError::WrongTarget {
                        id: inst.id.clone(),
                        expected: Box::leak(
                            format!("series of length {pred}, got {target}").into_boxed_str(),
                        ),
                    }
                }
                other => ModelError::WrongTarget {
                    id: inst.id.clone(),
                    expected: Box::leak(other.to_string().into_boxed_str()),
                },
            })
        };

        match (&inst.target, &inst.input) {
            (Target::Indices(idx), Some(input)) => {
                let flat = flatten_input(input);
                let (pred, stats) =
                    self.generation_pass(tape, binder, Some(&flat), None, &inst.prompt, idx.len())?;
                let target: Vec<f64> =
                    idx.iter().map(|&i| (i as f64 - stats.mean) / stats.std).collect();
                mse(tape, pred, &target)
            }
            (Target::Series(out), Some(input)) => {
                let (n_in, n_out) = (input.channels(), out.channels());
                if n_out == n_in && n_in > 1 {
                    // Per-channel prediction with shared weights.
                    let mut total: Option<NodeId> = None;
                    for c in 0..n_in {
                        let (pred, stats) = self.generation_pass(
                            tape,
                            binder,
                            Some(input.channel(c)),
                            None,
                            &inst.prompt,
                            out.length(),
                        )?;
                        let target: Vec<f64> =
                            out.channel(c).iter().map(|v| (v - stats.mean) / stats.std).collect();
                        let loss = mse(tape, pred, &target)?;
                        total = Some(match total {
                            Some(t) => tape.add(t, loss)?,
                            None => loss,
                        });
                    }
                    Ok(tape.scale(total.expect("at least one channel"), 1.0 / n_in as f64))
                } else if n_out == 1 {
                    let flat = flatten_input(input);
                    let (pred, stats) = self.generation_pass(
                        tape,
                        binder,
                        Some(&flat),
                        None,
                        &inst.prompt,
                        out.length(),
                    )?;
                    let target: Vec<f64> =
                        out.channel(0).iter().map(|v| (v - stats.mean) / stats.std).collect();
                    mse(tape, pred, &target)
                } else {
                    Err(ModelError::UnsupportedChannels { input: n_in, target: n_out })
                }
            }
            (Target::Series(out), None) => {
                // Synthesis: the prompt states the scale; stats come from
                // the instance (identity by default).
                let stats = inst.norm_stats.unwrap_or_else(NormStats::identity);
                let flat_target = flatten_input(out);
                let (pred, stats) = self.generation_pass(
                    tape,
                    binder,
                    None,
                    Some(stats),
                    &inst.prompt,
                    flat_target.len(),
                )?;
                let target: Vec<f64> =
                    flat_target.iter().map(|v| (v - stats.mean) / stats.std).collect();
                mse(tape, pred, &target)
            }
            (Target::Indices(_), None) => Err(ModelError::MissingInput(inst.id.clone())),
            _ => Err(ModelError::WrongTarget { id: inst.id.clone(), expected: "series or indices" }),
        }
    }

    /// One denormalised regression readout outside any training graph.
    fn predict_once(
        &self,
        flat: Option<&[f64]>,
        stats_override: Option<NormStats>,
        prompt: &str,
        required: usize,
    ) -> ModelResult<Vec<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let (pred, stats) =
            self.generation_pass(&mut tape, &mut binder, flat, stats_override, prompt, required)?;
        let values = crate::dataset::denormalize(tape.value(pred).data(), stats);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinitePrediction);
        }
        Ok(values)
    }

    /// Next-token distribution for an understanding instance given the
    /// tokens generated so far: one full forward through encoder,
    /// backbone, and the softmax text head.
    pub fn next_token_distribution(
        &self,
        inst: &TaskInstance,
        generated: &[TokenId],
    ) -> ModelResult<Vec<f64>> {
        let input = inst.input.as_ref().ok_or_else(|| ModelError::MissingInput(inst.id.clone()))?;
        let flat = flatten_input(input);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let enc = self.encode_on(&mut tape, &mut binder, &flat)?;
        let mut ids = self.tokenizer.tokenize(&inst.prompt);
        ids.extend_from_slice(generated);
        let assembled =
            self.assemble_on(&mut tape, &mut binder, Some(enc.x_enc), &ids, AssemblyMode::Understanding)?;
        let h = forward(&mut tape, &mut binder, self, &assembled, &self.backbone_config())?;
        let last = tape.slice_rows(h, assembled.len - 1, assembled.len)?;
        let unembed = self.weight(&mut tape, &mut binder, &self.text_head.unembed_name)?;
        let logits = tape.matmul(last, unembed)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Greedy text prediction for an understanding instance.
    pub fn predict_understanding(&self, inst: &TaskInstance, max_new: usize) -> ModelResult<String> {
        crate::heads::decode_text(|generated| self.next_token_distribution(inst, generated), max_new)
    }

    /// Full prediction for any instance, dispatching on task type.
    pub fn predict_instance(&self, inst: &TaskInstance) -> ModelResult<Target> {
        if inst.task_type.is_understanding() {
            let text = self.predict_understanding(inst, DECODE_MAX_NEW)?;
            return Ok(Target::TextLabel(text));
        }
        match &inst.target {
            Target::Indices(idx) => {
                let input =
                    inst.input.as_ref().ok_or_else(|| ModelError::MissingInput(inst.id.clone()))?;
                let flat = flatten_input(input);
                let values = self.predict_once(Some(&flat), None, &inst.prompt, idx.len())?;
                let max_index = input.length().saturating_sub(1) as f64;
                let rounded =
                    values.iter().map(|v| v.round().clamp(0.0, max_index) as usize).collect();
                Ok(Target::Indices(rounded))
            }
            Target::Series(_) => {
                Ok(Target::Series(predict_series_target(self, inst)?))
            }
            _ => Err(ModelError::WrongTarget { id: inst.id.clone(), expected: "series or indices" }),
        }
    }

    /// Saves parameters plus optimizer extras and a config echo.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        extras: std::collections::BTreeMap<String, Tensor>,
        config_echo: Option<Vec<u8>>,
    ) -> ModelResult<()> {
        let ckpt = Checkpoint { params: self.params.clone(), extras, config_echo };
        crate::numerics::save_checkpoint(path, &ckpt)?;
        Ok(())
    }

    /// Replaces the parameter tensors from a checkpoint. The checkpoint
    /// must carry exactly the names this model was built with (including
    /// adapter parameters when DoRA was applied before saving and before
    /// loading).
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> ModelResult<()> {
        let expected: Vec<&String> = self.params.names().collect();
        let found: Vec<&String> = ckpt.params.names().collect();
        if expected != found {
            let missing: Vec<_> =
                expected.iter().filter(|n| !ckpt.params.contains(n)).take(3).collect();
            let extra: Vec<_> =
                found.iter().filter(|n| !self.params.contains(n)).take(3).collect();
            return Err(ModelError::CheckpointMismatch(format!(
                "parameter names differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (name, entry) in ckpt.params.iter() {
            let slot = self.params.get_mut(name)?;
            if slot.tensor.shape() != entry.tensor.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    entry.tensor.shape(),
                    slot.tensor.shape()
                )));
            }
            slot.tensor = entry.tensor.clone();
            slot.trainable = entry.trainable;
        }
        Ok(())
    }
}

/// Series prediction with per-channel routing: a multivariate input whose
/// target has the same channel count is predicted channel by channel with
/// shared weights; a single-channel target runs one pass over the
/// flattened input; synthesis (no input) regresses the flattened target
/// shape directly.
pub fn predict_series_target(model: &Model, inst: &TaskInstance) -> ModelResult<TimeSeries> {
    let Target::Series(out) = &inst.target else {
        return Err(ModelError::WrongTarget { id: inst.id.clone(), expected: "series" });
    };
    match &inst.input {
        Some(input) => {
            let (n_in, n_out) = (input.channels(), out.channels());
            if n_out == n_in && n_in > 1 {
                let mut channels = Vec::with_capacity(n_in);
                for c in 0..n_in {
                    channels.push(model.predict_once(
                        Some(input.channel(c)),
                        None,
                        &inst.prompt,
                        out.length(),
                    )?);
                }
                Ok(TimeSeries::new(channels).expect("finite prediction rows"))
            } else if n_out == 1 {
                let flat = flatten_input(input);
                let values = model.predict_once(Some(&flat), None, &inst.prompt, out.length())?;
                Ok(TimeSeries::univariate(values).expect("finite prediction"))
            } else {
                Err(ModelError::UnsupportedChannels { input: n_in, target: n_out })
            }
        }
        None => {
            let stats = inst.norm_stats.unwrap_or_else(NormStats::identity);
            let total = out.channels() * out.length();
            let values = model.predict_once(None, Some(stats), &inst.prompt, total)?;
            Ok(crate::dataset::unflatten(&values, out.channels())
                .expect("prediction length matches target shape"))
        }
    }
}

/// Maps a model error to the benchmark failure taxonomy.
pub fn classify_failure(err: &ModelError) -> FailureReason {
    match err {
        ModelError::Encoder(EncoderError::SignalTooLong { .. }) => FailureReason::Tls,
        ModelError::Backbone(BackboneError::ContextOverflow { .. }) => FailureReason::Tls,
        ModelError::Heads(HeadsError::LengthUnsupported { .. }) => FailureReason::Tls,
        ModelError::UnsupportedChannels { .. } => FailureReason::Tmc,
        _ => FailureReason::Other,
    }
}

/// Runs the model over every instance, never aborting: errors become
/// failure records, an empty decoded answer counts as
/// instruction-not-followed.
pub fn evaluate_dataset(model: &Model, dataset: &crate::dataset::Dataset) -> Vec<PredictionRecord> {
    dataset
        .instances()
        .iter()
        .map(|inst| {
            let outcome = match model.predict_instance(inst) {
                Ok(Target::TextLabel(s)) if inst.task_type.is_understanding() && s.trim().is_empty() => {
                    Outcome::Failure(FailureReason::Inf)
                }
                Ok(target) => Outcome::Success(target),
                Err(e) => Outcome::Failure(classify_failure(&e)),
            };
            PredictionRecord { instance_id: inst.id.clone(), task_id: inst.task_id.clone(), outcome }
        })
        .collect()
}
