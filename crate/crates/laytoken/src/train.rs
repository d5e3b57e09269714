//! Deterministic training: Adam, epoch loop with fixed-order gradient
//! reduction, and the corpus-to-sequence pipeline shared with evaluation.

use crate::doc::{Corpus, Document, QaPair};
use crate::error::{Error, Result};
use crate::formats::SerializationFormat;
use crate::layout::PositionScheme;
use crate::nn::{Model, ModelConfig};
use crate::ntlp::{
    build_rendered_sequence, build_sequence, ntlp_loss_train, truncate_to_budget,
    InterleavedSequence, SequenceMode, StreamRecipe,
};
use crate::tokenizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Training-run configuration. The triple
/// (`use_layout_tokenizer`, `scheme`, `use_ntlp`) spans the ablation grid:
/// `(false, extra-ids, false)` is the uncompressed string-layout baseline,
/// `(true, extra-ids, false)` adds the layout tokenizer,
/// `(true, shared-first, false)` adds id sharing, and
/// `(true, shared-first, true)` adds the interleaved pretraining objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "tdefaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "tdefaults::batch_size")]
    pub batch_size: usize,
    /// Fine-tuning epochs.
    #[serde(default = "tdefaults::epochs")]
    pub epochs: usize,
    /// Pretraining epochs, used only when `use_ntlp` is set.
    #[serde(default = "tdefaults::epochs")]
    pub pretrain_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "tdefaults::mse_weight")]
    pub mse_weight: f64,
    #[serde(default = "tdefaults::scheme")]
    pub scheme: PositionScheme,
    #[serde(default = "tdefaults::yes")]
    pub use_layout_tokenizer: bool,
    #[serde(default = "tdefaults::yes")]
    pub use_ntlp: bool,
    /// String format for layout when the tokenizer is disabled.
    #[serde(default = "tdefaults::layout_format")]
    pub layout_format: SerializationFormat,
    /// Position-id budget per sequence; documents are truncated to fit, so
    /// recipes that spend ids on layout fit less text.
    #[serde(default = "tdefaults::position_budget")]
    pub position_budget: usize,
}

mod tdefaults {
    use super::*;
    pub fn learning_rate() -> f64 {
        3e-4
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn epochs() -> usize {
        3
    }
    pub fn mse_weight() -> f64 {
        1.0
    }
    pub fn scheme() -> PositionScheme {
        PositionScheme::SharedFirst
    }
    pub fn yes() -> bool {
        true
    }
    pub fn layout_format() -> SerializationFormat {
        SerializationFormat::CoordSuffix
    }
    pub fn position_budget() -> usize {
        512
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.mse_weight < 0.0 {
            return Err(Error::Config("mse_weight must be >= 0".into()));
        }
        if !self.use_layout_tokenizer && self.scheme == PositionScheme::SharedFirst {
            return Err(Error::Config(
                "shared-first ids describe layout tokens; enable the layout tokenizer \
                 or pick extra-ids/text-only"
                    .into(),
            ));
        }
        if self.layout_format == SerializationFormat::LayToken {
            return Err(Error::Config(
                "layout_format must be a string format; lay-token is the tokenizer path".into(),
            ));
        }
        if self.position_budget < 8 {
            return Err(Error::Config("position_budget is too small".into()));
        }
        Ok(())
    }

    /// How documents reach the token stream under this configuration.
    pub fn recipe(&self) -> StreamRecipe {
        if self.use_layout_tokenizer {
            StreamRecipe::Tokens(self.scheme)
        } else if self.scheme == PositionScheme::TextOnly {
            StreamRecipe::Tokens(PositionScheme::TextOnly)
        } else {
            StreamRecipe::Rendered(self.layout_format)
        }
    }
}

/// Ids and slots an SFT suffix needs: two separators, the question bytes,
/// and the answer (or decoding headroom).
fn sft_reserve(question: &str, answer_len: usize) -> usize {
    2 + tokenizer::token_count(question) + answer_len
}

/// Truncate a document to the configured budgets and build its sequence.
pub fn prepare_sequence(
    doc: &Document,
    mode: SequenceMode<'_>,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<InterleavedSequence> {
    let reserve = match mode {
        SequenceMode::Pretrain => 0,
        SequenceMode::Sft { question, answer } => {
            sft_reserve(question, answer.map_or(0, tokenizer::token_count))
        }
    };
    let id_budget = config.position_budget.saturating_sub(reserve);
    let slot_budget = model_config.max_context.saturating_sub(reserve);
    let recipe = config.recipe();
    let doc = truncate_to_budget(doc, recipe, id_budget, slot_budget);
    if doc.segment_count() == 0 {
        return Err(Error::ContextOverflow {
            required: reserve + 2,
            available: config.position_budget.min(model_config.max_context),
        });
    }
    match recipe {
        StreamRecipe::Tokens(scheme) => {
            build_sequence(&doc, scheme, mode, model_config.max_context)
        }
        StreamRecipe::Rendered(format) => {
            build_rendered_sequence(&doc, format, mode, model_config.max_context)
        }
    }
}

/// Prompt sequence for decoding: SFT mode without the answer, reserving
/// `max_new_tokens` ids of headroom.
pub fn prepare_prompt(
    doc: &Document,
    qa: &QaPair,
    max_new_tokens: usize,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<InterleavedSequence> {
    let reserve = sft_reserve(&qa.question, max_new_tokens);
    let id_budget = config.position_budget.saturating_sub(reserve);
    let slot_budget = model_config.max_context.saturating_sub(reserve);
    let recipe = config.recipe();
    let doc = truncate_to_budget(doc, recipe, id_budget, slot_budget);
    if doc.segment_count() == 0 {
        return Err(Error::ContextOverflow {
            required: reserve + 2,
            available: config.position_budget.min(model_config.max_context),
        });
    }
    let mode = SequenceMode::Sft {
        question: &qa.question,
        answer: None,
    };
    match recipe {
        StreamRecipe::Tokens(scheme) => {
            build_sequence(&doc, scheme, mode, model_config.max_context)
        }
        StreamRecipe::Rendered(format) => {
            build_rendered_sequence(&doc, format, mode, model_config.max_context)
        }
    }
}

/// One optimizer step's log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Training phase: "pretrain" or "sft".
    pub phase: String,
    pub total: f64,
    /// Mean cross-entropy per text target this step.
    pub ce: f64,
    /// Mean squared error per layout target this step.
    pub mse: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<StepLog>,
}

/// Adam with bias correction over the model's flat parameter order.
pub struct Adam {
    lr: f64,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Apply one step from the gradients currently stored in the model.
    pub fn step(&mut self, model: &mut Model) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut off = 0;
        for (_, p) in model.params_mut() {
            let n = p.numel();
            for i in 0..n {
                let g = p.grad.data[i];
                let m = &mut self.m[off + i];
                let v = &mut self.v[off + i];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                p.value.data[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            off += n;
        }
    }
}

/// Train a model on a corpus: an optional interleaved-objective pretraining
/// phase over the document streams, then fine-tuning on the QA pairs with
/// answer-only supervision.
///
/// Deterministic given the seed: initialization, shuffling, and the
/// gradient reduction order are all fixed.
pub fn train(
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    model_config.validate()?;
    if corpus.documents.is_empty() {
        return Err(Error::Argument("corpus has no documents".into()));
    }

    let mut model = Model::new(model_config.clone(), config.seed)?;
    let mut adam = Adam::new(model.param_count(), config.learning_rate);
    let mut history = Vec::new();
    let mut step = 0usize;

    if config.use_ntlp {
        let sequences: Vec<InterleavedSequence> = corpus
            .documents
            .iter()
            .map(|doc| prepare_sequence(doc, SequenceMode::Pretrain, model_config, config))
            .collect::<Result<_>>()?;
        run_phase(
            &mut model,
            &mut adam,
            &sequences,
            config,
            config.pretrain_epochs,
            "pretrain",
            &mut step,
            &mut history,
        )?;
    }

    let sequences: Vec<InterleavedSequence> = corpus
        .qa_with_docs()
        .map(|(doc, qa)| {
            let mode = SequenceMode::Sft {
                question: &qa.question,
                answer: Some(&qa.answers[0]),
            };
            prepare_sequence(doc, mode, model_config, config)
        })
        .collect::<Result<_>>()?;
    if sequences.is_empty() && !config.use_ntlp {
        return Err(Error::Argument("corpus has no QA pairs to fine-tune on".into()));
    }
    run_phase(
        &mut model,
        &mut adam,
        &sequences,
        config,
        config.epochs,
        "sft",
        &mut step,
        &mut history,
    )?;

    Ok(TrainOutput { model, history })
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut Model,
    adam: &mut Adam,
    sequences: &[InterleavedSequence],
    config: &TrainConfig,
    epochs: usize,
    phase: &str,
    step: &mut usize,
    history: &mut Vec<StepLog>,
) -> Result<()> {
    if sequences.is_empty() {
        return Ok(());
    }
    let phase_tag = phase.bytes().map(u64::from).sum::<u64>();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(
            config
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(phase_tag)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);

        for batch in order.chunks(config.batch_size) {
            let breakdowns = accumulate_batch(model, sequences, batch, config.mse_weight)?;
            let mut total = 0.0;
            let mut ce_sum = 0.0;
            let mut ce_count = 0usize;
            let mut mse_sum = 0.0;
            let mut mse_count = 0usize;
            for b in &breakdowns {
                total += b.total;
                ce_sum += b.ce_sum;
                ce_count += b.ce_count;
                mse_sum += b.mse_sum;
                mse_count += b.mse_count;
            }
            total /= breakdowns.len() as f64;
            if !total.is_finite() {
                return Err(Error::Diverged { step: *step, loss: total });
            }
            adam.step(model);
            *step += 1;
            history.push(StepLog {
                step: *step,
                phase: phase.to_string(),
                total,
                ce: if ce_count == 0 { 0.0 } else { ce_sum / ce_count as f64 },
                mse: if mse_count == 0 { 0.0 } else { mse_sum / mse_count as f64 },
                lr: config.learning_rate,
            });
        }
    }
    Ok(())
}

/// Forward/backward the batch and leave the averaged gradients in the
/// model. Sequences are split into contiguous chunks processed in parallel
/// against read-only parameters; chunk gradients are summed in chunk order,
/// so the reduction is bitwise reproducible.
fn accumulate_batch(
    model: &mut Model,
    sequences: &[InterleavedSequence],
    batch: &[usize],
    mse_weight: f64,
) -> Result<Vec<crate::ntlp::LossBreakdown>> {
    model.zero_grad();
    let n_chunks = rayon::current_num_threads().clamp(1, batch.len().max(1));
    let chunk_size = batch.len().div_ceil(n_chunks);
    let chunks: Vec<&[usize]> = batch.chunks(chunk_size).collect();

    let results: Vec<Result<(Vec<crate::ntlp::LossBreakdown>, Vec<f64>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut local = model.clone();
            local.zero_grad();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in *chunk {
                losses.push(ntlp_loss_train(&mut local, &sequences[i], mse_weight)?);
            }
            Ok((losses, local.grads_to_vec()))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut breakdowns = Vec::with_capacity(batch.len());
    for result in results {
        let (losses, mut grads) = result?;
        breakdowns.extend(losses);
        for g in &mut grads {
            *g *= scale;
        }
        model.add_grads_from_vec(&grads);
    }
    Ok(breakdowns)
}
