//! Ablation sweep over the three mechanism switches: layout tokenizer,
//! shared-first position ids, and the interleaved pretraining objective.

use crate::doc::Corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::layout::PositionScheme;
use crate::nn::ModelConfig;
use crate::train::{train, TrainConfig, TrainOutput};
use serde::Serialize;

/// The four switch settings, in sweep order: the string-layout baseline,
/// then cumulatively adding the tokenizer, id sharing, and pretraining.
pub fn ablation_config(row: u8, base: &TrainConfig) -> Result<TrainConfig> {
    let mut config = base.clone();
    match row {
        0 => {
            config.use_layout_tokenizer = false;
            config.scheme = PositionScheme::ExtraIds;
            config.use_ntlp = false;
        }
        1 => {
            config.use_layout_tokenizer = true;
            config.scheme = PositionScheme::ExtraIds;
            config.use_ntlp = false;
        }
        2 => {
            config.use_layout_tokenizer = true;
            config.scheme = PositionScheme::SharedFirst;
            config.use_ntlp = false;
        }
        3 => {
            config.use_layout_tokenizer = true;
            config.scheme = PositionScheme::SharedFirst;
            config.use_ntlp = true;
        }
        other => {
            return Err(Error::Argument(format!(
                "ablation rows are 0..=3, got {other}"
            )))
        }
    }
    Ok(config)
}

/// A plain-text configuration (no layout at all) for baselining.
pub fn text_only_config(base: &TrainConfig) -> TrainConfig {
    let mut config = base.clone();
    config.use_layout_tokenizer = false;
    config.scheme = PositionScheme::TextOnly;
    config.use_ntlp = false;
    config
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub row: u8,
    pub layout_tokenizer: bool,
    pub lay_pos_id: bool,
    pub ntlp: bool,
    pub anls_mean: f64,
    pub exact_match: f64,
}

/// Train one configuration and evaluate it on a held-out corpus.
pub fn train_and_eval(
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    max_new_tokens: usize,
) -> Result<(EvalReport, TrainOutput)> {
    let out = train(train_corpus, model_config, config)?;
    let report = evaluate(&out.model, eval_corpus, config, max_new_tokens)?;
    Ok((report, out))
}

/// Run rows 0..=3 on one train/eval corpus pair.
pub fn run_ablation(
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    model_config: &ModelConfig,
    base: &TrainConfig,
    max_new_tokens: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for row in 0..4u8 {
        let config = ablation_config(row, base)?;
        let (report, _) =
            train_and_eval(train_corpus, eval_corpus, model_config, &config, max_new_tokens)?;
        log::info!(
            "ablation row {row}: anls {:.4}, exact {:.4}",
            report.anls_mean,
            report.exact_match
        );
        rows.push(AblationRow {
            row,
            layout_tokenizer: config.use_layout_tokenizer,
            lay_pos_id: config.scheme == PositionScheme::SharedFirst,
            ntlp: config.use_ntlp,
            anls_mean: report.anls_mean,
            exact_match: report.exact_match,
        });
    }
    Ok(rows)
}
