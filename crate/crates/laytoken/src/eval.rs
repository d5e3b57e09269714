//! Greedy QA evaluation with the average normalized Levenshtein similarity
//! metric (threshold 0.5, case-insensitive, whitespace-trimmed).

use crate::doc::Corpus;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::ntlp::{InterleavedSequence, TokenKind, TypedToken};
use crate::tokenizer::{detokenize, SEP};
use crate::train::{prepare_prompt, TrainConfig};
use serde::Serialize;

/// Classic edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Normalized Levenshtein similarity of two already-normalized strings.
fn nls(pred: &str, gold: &str) -> f64 {
    let max_len = pred.chars().count().max(gold.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, gold) as f64 / max_len as f64
}

pub const ANLS_THRESHOLD: f64 = 0.5;

/// Max-over-golds thresholded similarity score in [0, 1].
pub fn anls(prediction: &str, golds: &[String], threshold: f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Argument("anls needs at least one gold answer".into()));
    }
    let pred = normalize(prediction);
    let best = golds
        .iter()
        .map(|g| nls(&pred, &normalize(g)))
        .fold(0.0f64, f64::max);
    Ok(if best >= threshold { best } else { 0.0 })
}

/// Greedy decoding: append the argmax text token until `SEP` or the budget
/// runs out. Position ids continue consecutively after the prompt.
pub fn greedy_decode(
    model: &Model,
    prompt: &InterleavedSequence,
    max_new_tokens: usize,
) -> Result<String> {
    let d = model.config.d_model;
    let mut seq = prompt.clone();
    let mut next_id = seq.max_position_id() + 1;
    let mut out_ids = Vec::new();
    for _ in 0..max_new_tokens {
        let (hidden, _) = model.forward(&seq)?;
        let last = &hidden[(seq.len() - 1) * d..seq.len() * d];
        let logits = model.text_head.forward(last, 1);
        let tok = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i as u32)
            .expect("non-empty vocab");
        if tok == SEP {
            break;
        }
        out_ids.push(tok);
        seq.tokens.push(TypedToken {
            kind: TokenKind::Text(tok),
            position_id: next_id,
            supervise: false,
        });
        next_id += 1;
    }
    Ok(detokenize(&out_ids))
}

#[derive(Debug, Clone, Serialize)]
pub struct PerQuestion {
    pub question: String,
    pub golds: Vec<String>,
    pub prediction: String,
    pub anls: f64,
    /// Set when the prompt could not be built (e.g. context overflow); the
    /// question still counts as zero in the means.
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub anls_mean: f64,
    pub exact_match: f64,
    pub per_question: Vec<PerQuestion>,
}

/// Evaluate greedy QA over a corpus. The model is read-only; skipped
/// questions are reported, never silently dropped.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    config: &TrainConfig,
    max_new_tokens: usize,
) -> Result<EvalReport> {
    if corpus.qa.is_empty() {
        return Err(Error::Argument("evaluation set has no questions".into()));
    }
    let mut per_question = Vec::with_capacity(corpus.qa.len());
    for (doc, qa) in corpus.qa_with_docs() {
        match prepare_prompt(doc, qa, max_new_tokens, &model.config, config) {
            Ok(prompt) => {
                let prediction = greedy_decode(model, &prompt, max_new_tokens)?;
                let score = anls(&prediction, &qa.answers, ANLS_THRESHOLD)?;
                per_question.push(PerQuestion {
                    question: qa.question.clone(),
                    golds: qa.answers.clone(),
                    prediction,
                    anls: score,
                    skipped: false,
                });
            }
            Err(Error::ContextOverflow { .. }) => per_question.push(PerQuestion {
                question: qa.question.clone(),
                golds: qa.answers.clone(),
                prediction: String::new(),
                anls: 0.0,
                skipped: true,
            }),
            Err(e) => return Err(e),
        }
    }
    let n = per_question.len() as f64;
    let anls_mean = per_question.iter().map(|q| q.anls).sum::<f64>() / n;
    let exact = per_question
        .iter()
        .filter(|q| {
            !q.skipped && q.golds.iter().any(|g| normalize(g) == normalize(&q.prediction))
        })
        .count() as f64
        / n;
    Ok(EvalReport {
        anls_mean,
        exact_match: exact,
        per_question,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_scores_one() {
        assert_eq!(anls("hello", &golds(&["hello"]), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn one_edit_in_five_scores_point_eight() {
        let score = anls("hallo", &golds(&["hello"]), 0.5).unwrap();
        assert!((score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dissimilar_strings_clip_to_zero() {
        assert_eq!(anls("abc", &golds(&["xyz"]), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn below_threshold_similarity_clips_to_zero() {
        // Distance 2 over max length 4: NLS = 0.5 passes, 0.49 would not;
        // here distance 3 of 4 gives 0.25 -> 0.
        assert_eq!(anls("abcd", &golds(&["axyz"]), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn max_over_golds_takes_the_best() {
        let score = anls("hallo", &golds(&["xyzzy", "hello", "hallo!"]), 0.5).unwrap();
        // "hallo!" is distance 1 over length 6.
        let expect: f64 = 1.0 - 1.0 / 6.0;
        assert!((score - expect).abs() < 1e-12, "{score}");
    }

    #[test]
    fn normalization_trims_and_lowercases() {
        assert_eq!(anls("  HELLO ", &golds(&["hello"]), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        assert_eq!(anls("", &golds(&["hello"]), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn empty_golds_is_an_error() {
        assert!(matches!(anls("x", &[], 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn levenshtein_known_cases() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
    }

    proptest! {
        #[test]
        fn levenshtein_is_symmetric(a in "[a-z]{0,12}", b in "[a-z]{0,12}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }

        #[test]
        fn levenshtein_triangle_inequality(
            a in "[a-z]{0,8}", b in "[a-z]{0,8}", c in "[a-z]{0,8}"
        ) {
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }
}
