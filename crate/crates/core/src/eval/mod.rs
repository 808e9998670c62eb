//! Decoding and measurement: beam search, WER, EER, the speaker probe and
//! the input-pipeline throughput bench.

mod bench;
mod decode;
mod metrics;
mod probe;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bench::{throughput_bench, BenchItem, BenchReport};
pub use decode::{beam_search, greedy, normalize, rank, Hypothesis, ModelScorer, StepScorer};
pub use metrics::{cosine, edit_distance, eer, wer, words, WerTally};
pub use probe::{speaker_probe, ProbeConfig, ProbeInput, ProbeReport};

use crate::curriculum::Example;
use crate::error::Result;
use crate::model::Model;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub length_penalty: f64,
    /// Maximum generated tokens.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            length_penalty: 0.0,
            max_len: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub reference: String,
    pub hypothesis: String,
    pub language: String,
    pub errors: usize,
    pub words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub wer: f64,
    pub per_language: BTreeMap<String, f64>,
    pub utterances: usize,
    pub beam: usize,
    pub length_penalty: f64,
    pub transcripts: Vec<Transcript>,
}

/// Decodes every example with the audio stream fully masked and scores the
/// result against `references`.
pub fn evaluate_wer(
    model: &Model,
    examples: &[Example],
    references: &[String],
    languages: &[String],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<WerReport> {
    if examples.len() != references.len() {
        return Err(crate::Error::input("one reference per example"));
    }
    let transcripts: Vec<Transcript> = examples
        .par_iter()
        .zip(references.par_iter())
        .map(|(ex, reference)| {
            let scorer = ModelScorer::new(model, &ex.visual_input())?;
            let hyp = if cfg.beam == 1 {
                greedy(&scorer, cfg.max_len)?
            } else {
                beam_search(&scorer, cfg.beam, cfg.length_penalty, cfg.max_len)?
            };
            let hypothesis = vocab.decode(hyp.content())?;
            let mut t = WerTally::default();
            t.add(reference, &hypothesis);
            Ok(Transcript {
                reference: reference.clone(),
                hypothesis,
                language: languages
                    .get(ex.language)
                    .cloned()
                    .unwrap_or_else(|| ex.language.to_string()),
                errors: t.errors,
                words: t.words,
            })
        })
        .collect::<Result<_>>()?;
    let mut total = WerTally::default();
    let mut by_lang: BTreeMap<String, WerTally> = BTreeMap::new();
    for t in &transcripts {
        let tally = WerTally {
            errors: t.errors,
            words: t.words,
        };
        total.merge(tally);
        by_lang.entry(t.language.clone()).or_default().merge(tally);
    }
    Ok(WerReport {
        wer: total.rate(),
        per_language: by_lang.into_iter().map(|(k, v)| (k, v.rate())).collect(),
        utterances: transcripts.len(),
        beam: cfg.beam,
        length_penalty: cfg.length_penalty,
        transcripts,
    })
}
