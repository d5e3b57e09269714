//! Interleaved text/layout sequences and the next-token objective over them.
//!
//! A sequence mixes byte-level text tokens with embedded layout tokens. The
//! hidden state at slot `i-1` predicts slot `i`: cross-entropy when the
//! target is text, coordinate mean-squared error through the layout head
//! when the target is a layout token. Both kinds average together into one
//! loss, so a model is trained to predict text from layout and layout from
//! text in the same stream.

use crate::doc::{BBox, Document, Page};
use crate::error::{Error, Result};
use crate::formats::{self, SerializationFormat};
use crate::layout::{assign_positions, PositionScheme};
use crate::nn::model::{Model, TokenInput};
use crate::tokenizer::{self, BOS, SEP};
use serde::Serialize;

/// What a sequence slot carries.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Text(u32),
    /// A layout token, storing the ground-truth box it was built from.
    Layout(BBox),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedToken {
    pub kind: TokenKind,
    pub position_id: usize,
    /// Whether this token, as a prediction target, contributes to the loss.
    pub supervise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    pub tokens: Vec<TypedToken>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.position_id).collect()
    }

    pub fn text_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t.kind, TokenKind::Text(_)))
            .count()
    }

    pub fn layout_count(&self) -> usize {
        self.len() - self.text_count()
    }

    /// Largest position id in the sequence.
    pub fn max_position_id(&self) -> usize {
        self.tokens.iter().map(|t| t.position_id).max().unwrap_or(0)
    }

    pub(crate) fn model_inputs(&self) -> Vec<TokenInput> {
        self.tokens
            .iter()
            .map(|t| match &t.kind {
                TokenKind::Text(id) => TokenInput::Text(*id),
                TokenKind::Layout(b) => TokenInput::Layout(*b),
            })
            .collect()
    }
}

/// How a document's layout reaches the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRecipe {
    /// One embedded layout token per segment, positioned per the scheme.
    /// `TextOnly` drops layout entirely.
    Tokens(PositionScheme),
    /// Layout rendered into the text itself (the uncompressed baseline);
    /// every token is a text token with its own id.
    Rendered(SerializationFormat),
}

impl StreamRecipe {
    /// Position ids one segment consumes under this recipe.
    pub fn segment_id_cost(&self, text: &str) -> usize {
        let t = tokenizer::token_count(text);
        match self {
            StreamRecipe::Tokens(PositionScheme::ExtraIds) => t + 1,
            StreamRecipe::Tokens(_) => t,
            StreamRecipe::Rendered(_) => t, // adjusted by render below
        }
    }

    /// Stream slots one segment occupies.
    fn segment_slots(&self, text: &str) -> usize {
        let t = tokenizer::token_count(text);
        match self {
            StreamRecipe::Tokens(PositionScheme::TextOnly) => t,
            StreamRecipe::Tokens(_) => t + 1,
            StreamRecipe::Rendered(_) => t,
        }
    }
}

/// Sequence construction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceMode<'a> {
    /// The whole interleaved stream is supervised.
    Pretrain,
    /// Document as context, then question, then (optionally) the answer;
    /// only answer text tokens are supervised.
    Sft {
        question: &'a str,
        answer: Option<&'a str>,
    },
}

/// Build the model-facing sequence for a document.
///
/// The stream is `BOS` then, per segment, its text bytes followed by its
/// layout token. `BOS` takes position id 0 and segment text ids start at 1.
/// In SFT mode the document is followed by `SEP question SEP answer`, with
/// text ids continuing consecutively through prompt and answer.
pub fn build_sequence(
    doc: &Document,
    scheme: PositionScheme,
    mode: SequenceMode<'_>,
    max_context: usize,
) -> Result<InterleavedSequence> {
    let mut texts = Vec::new();
    let mut boxes = Vec::new();
    for (seg, w, h) in doc.segments() {
        texts.push(seg.text.as_str());
        boxes.push(seg.normalized(w, h)?);
    }
    if texts.is_empty() {
        return Err(Error::Argument("document has no segments".into()));
    }
    let counts: Vec<usize> = texts.iter().map(|t| tokenizer::token_count(t)).collect();
    let ids = assign_positions(&counts, scheme)?;

    let supervise_doc = matches!(mode, SequenceMode::Pretrain);
    let mut tokens = Vec::new();
    tokens.push(TypedToken {
        kind: TokenKind::Text(BOS),
        position_id: 0,
        supervise: supervise_doc,
    });
    let mut slot = 0usize;
    for (i, text) in texts.iter().enumerate() {
        for byte_id in tokenizer::tokenize(text) {
            tokens.push(TypedToken {
                kind: TokenKind::Text(byte_id),
                position_id: 1 + ids[slot],
                supervise: supervise_doc,
            });
            slot += 1;
        }
        if scheme != PositionScheme::TextOnly {
            tokens.push(TypedToken {
                kind: TokenKind::Layout(boxes[i]),
                position_id: 1 + ids[slot],
                supervise: supervise_doc,
            });
            slot += 1;
        }
    }

    // Prompt and answer ids continue after every id the document consumed.
    let mut next_id = tokens.iter().map(|t| t.position_id).max().unwrap() + 1;
    if let SequenceMode::Sft { question, answer } = mode {
        let push_text = |tokens: &mut Vec<TypedToken>, id: u32, supervise: bool, next: &mut usize| {
            tokens.push(TypedToken {
                kind: TokenKind::Text(id),
                position_id: *next,
                supervise,
            });
            *next += 1;
        };
        push_text(&mut tokens, SEP, false, &mut next_id);
        for b in tokenizer::tokenize(question) {
            push_text(&mut tokens, b, false, &mut next_id);
        }
        push_text(&mut tokens, SEP, false, &mut next_id);
        if let Some(answer) = answer {
            for b in tokenizer::tokenize(answer) {
                push_text(&mut tokens, b, true, &mut next_id);
            }
        }
    }

    if tokens.len() > max_context {
        return Err(Error::ContextOverflow {
            required: tokens.len(),
            available: max_context,
        });
    }
    Ok(InterleavedSequence { tokens })
}

/// Build the uncompressed baseline sequence: layout rendered as text markup,
/// every token a text token with consecutive ids.
pub fn build_rendered_sequence(
    doc: &Document,
    format: SerializationFormat,
    mode: SequenceMode<'_>,
    max_context: usize,
) -> Result<InterleavedSequence> {
    if format == SerializationFormat::LayToken {
        return Err(Error::Argument(
            "lay-token streams are built by build_sequence, not as renderings".into(),
        ));
    }
    let mut tokens = Vec::new();
    let mut next_id = 0usize;
    let supervise_doc = matches!(mode, SequenceMode::Pretrain);
    let push = |tokens: &mut Vec<TypedToken>, id: u32, supervise: bool, next: &mut usize| {
        tokens.push(TypedToken {
            kind: TokenKind::Text(id),
            position_id: *next,
            supervise,
        });
        *next += 1;
    };
    push(&mut tokens, BOS, supervise_doc, &mut next_id);
    for (seg, _, _) in doc.segments() {
        let rendered = formats::render(&seg.text, seg.bbox, format)?;
        for b in tokenizer::tokenize(&rendered) {
            push(&mut tokens, b, supervise_doc, &mut next_id);
        }
    }
    if let SequenceMode::Sft { question, answer } = mode {
        push(&mut tokens, SEP, false, &mut next_id);
        for b in tokenizer::tokenize(question) {
            push(&mut tokens, b, false, &mut next_id);
        }
        push(&mut tokens, SEP, false, &mut next_id);
        if let Some(answer) = answer {
            for b in tokenizer::tokenize(answer) {
                push(&mut tokens, b, true, &mut next_id);
            }
        }
    }
    if tokens.len() > max_context {
        return Err(Error::ContextOverflow {
            required: tokens.len(),
            available: max_context,
        });
    }
    Ok(InterleavedSequence { tokens })
}

/// Drop trailing segments until the document fits both a position-id budget
/// and a stream-length budget, mirroring a fixed training window: recipes
/// that spend ids on layout fit less text.
pub fn truncate_to_budget(
    doc: &Document,
    recipe: StreamRecipe,
    id_budget: usize,
    slot_budget: usize,
) -> Document {
    let mut ids_used = 1usize; // BOS
    let mut slots_used = 1usize;
    let mut out = Document { pages: Vec::new() };
    'outer: for page in &doc.pages {
        let mut kept = Vec::new();
        for seg in &page.segments {
            let (id_cost, slot_cost) = match recipe {
                StreamRecipe::Rendered(format) => {
                    let rendered = formats::render(&seg.text, seg.bbox, format)
                        .map(|r| tokenizer::token_count(&r))
                        .unwrap_or(usize::MAX);
                    (rendered, rendered)
                }
                _ => (
                    recipe.segment_id_cost(&seg.text),
                    recipe.segment_slots(&seg.text),
                ),
            };
            if ids_used + id_cost > id_budget || slots_used + slot_cost > slot_budget {
                if !kept.is_empty() {
                    out.pages.push(Page {
                        width: page.width,
                        height: page.height,
                        segments: kept,
                    });
                }
                break 'outer;
            }
            ids_used += id_cost;
            slots_used += slot_cost;
            kept.push(seg.clone());
        }
        if !kept.is_empty() {
            out.pages.push(Page {
                width: page.width,
                height: page.height,
                segments: kept,
            });
        }
    }
    out
}

/// The loss over one sequence, split by target kind.
#[derive(Debug, Clone, Copy, Serialize, Default)]
pub struct LossBreakdown {
    /// `(ce_sum + mse_weight * mse_sum) / (ce_count + mse_count)`.
    pub total: f64,
    pub ce_sum: f64,
    pub ce_count: usize,
    /// Unweighted sum of per-coordinate-mean squared errors.
    pub mse_sum: f64,
    pub mse_count: usize,
}

impl LossBreakdown {
    fn finish(mut self, mse_weight: f64) -> Self {
        let count = self.ce_count + self.mse_count;
        self.total = if count == 0 {
            0.0
        } else {
            (self.ce_sum + mse_weight * self.mse_sum) / count as f64
        };
        self
    }

    pub fn target_count(&self) -> usize {
        self.ce_count + self.mse_count
    }
}

/// Stable log-softmax pieces: returns (log-sum-exp, probs in `probs`).
fn softmax_with_lse(logits: &[f64], probs: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

fn check_loss_preconditions(seq: &InterleavedSequence) -> Result<()> {
    if seq.len() < 2 {
        return Err(Error::Argument(format!(
            "sequence of length {} has nothing to predict",
            seq.len()
        )));
    }
    Ok(())
}

/// Evaluate the interleaved next-token loss without touching gradients.
pub fn ntlp_loss(model: &Model, seq: &InterleavedSequence, mse_weight: f64) -> Result<LossBreakdown> {
    check_loss_preconditions(seq)?;
    let (hidden, _) = model.forward(seq)?;
    let d = model.config.d_model;
    let mut out = LossBreakdown::default();
    let mut probs = vec![0.0; model.config.vocab_size];
    for i in 1..seq.len() {
        let target = &seq.tokens[i];
        if !target.supervise {
            continue;
        }
        let h = &hidden[(i - 1) * d..i * d];
        match &target.kind {
            TokenKind::Text(id) => {
                let logits = model.text_head.forward(h, 1);
                let lse = softmax_with_lse(&logits, &mut probs);
                out.ce_sum += lse - logits[*id as usize];
                out.ce_count += 1;
            }
            TokenKind::Layout(bbox) => {
                let pred = model.lay_head.forward(h);
                let target = bbox.coords();
                let mse: f64 = pred
                    .iter()
                    .zip(target)
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    / 4.0;
                out.mse_sum += mse;
                out.mse_count += 1;
            }
        }
    }
    let out = out.finish(mse_weight);
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {}", out.total)));
    }
    Ok(out)
}

/// Evaluate the loss and accumulate parameter gradients.
pub fn ntlp_loss_train(
    model: &mut Model,
    seq: &InterleavedSequence,
    mse_weight: f64,
) -> Result<LossBreakdown> {
    check_loss_preconditions(seq)?;
    let (hidden, cache) = model.forward(seq)?;
    let d = model.config.d_model;
    let vocab = model.config.vocab_size;

    // First pass: count targets so per-target grads can be scaled once.
    let mut out = LossBreakdown::default();
    for t in seq.tokens.iter().skip(1) {
        if t.supervise {
            match t.kind {
                TokenKind::Text(_) => out.ce_count += 1,
                TokenKind::Layout(_) => out.mse_count += 1,
            }
        }
    }
    let count = out.target_count();
    if count == 0 {
        return Ok(out.finish(mse_weight));
    }
    let inv_count = 1.0 / count as f64;

    let mut dhidden = vec![0.0; seq.len() * d];
    let mut probs = vec![0.0; vocab];
    for i in 1..seq.len() {
        let target = &seq.tokens[i];
        if !target.supervise {
            continue;
        }
        let h = &hidden[(i - 1) * d..i * d];
        match &target.kind {
            TokenKind::Text(id) => {
                let logits = model.text_head.forward(h, 1);
                let lse = softmax_with_lse(&logits, &mut probs);
                out.ce_sum += lse - logits[*id as usize];
                let mut dlogits = probs.clone();
                dlogits[*id as usize] -= 1.0;
                for v in &mut dlogits {
                    *v *= inv_count;
                }
                let dh = model.text_head.backward(h, &dlogits, 1);
                for (a, b) in dhidden[(i - 1) * d..i * d].iter_mut().zip(dh) {
                    *a += b;
                }
            }
            TokenKind::Layout(bbox) => {
                let pred = model.lay_head.forward(h);
                let tgt = bbox.coords();
                let mse: f64 = pred
                    .iter()
                    .zip(tgt)
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    / 4.0;
                out.mse_sum += mse;
                let mut dpred = [0.0; 4];
                for j in 0..4 {
                    dpred[j] = mse_weight * 2.0 * (pred[j] - tgt[j]) / 4.0 * inv_count;
                }
                let dh = model.lay_head.backward(h, &pred, &dpred);
                for (a, b) in dhidden[(i - 1) * d..i * d].iter_mut().zip(dh) {
                    *a += b;
                }
            }
        }
    }

    model.backward(seq, &cache, &dhidden)?;
    let out = out.finish(mse_weight);
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {}", out.total)));
    }
    Ok(out)
}
