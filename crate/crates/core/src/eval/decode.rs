use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{EncoderInput, Model};
use crate::numerics::Tensor;
use crate::tokenizer::{BOS, EOS};

/// Next-token log-probabilities for a batch of prefixes (each starting
/// with BOS).
pub trait StepScorer {
    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Tensor>;
}

/// Scores prefixes against one encoded input.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: Tensor,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, input: &EncoderInput<'_>) -> Result<Self> {
        Ok(ModelScorer {
            model,
            memory: model.encode_memory(input)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Tensor> {
        self.model.next_token_logprobs(&self.memory, prefixes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after BOS; ends with EOS unless cut at `max_len`.
    pub tokens: Vec<u32>,
    pub score: f64,
    pub normalized_score: f64,
}

impl Hypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

pub fn normalize(score: f64, len: usize, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 {
        score
    } else {
        score / (len.max(1) as f64).powf(length_penalty)
    }
}

/// Higher normalized score first; equal scores fall back to lexicographic
/// token order.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized_score
        .total_cmp(&a.normalized_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Open {
    prefix: Vec<u32>,
    score: f64,
}

/// Beam search. Finished hypotheses take beam slots alongside open ones;
/// the result is the best of everything finished plus whatever is still
/// open at `max_len`.
pub fn beam_search(
    scorer: &dyn StepScorer,
    beam_width: usize,
    length_penalty: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let mut open = vec![Open {
        prefix: vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=max_len {
        if open.is_empty() {
            break;
        }
        let prefixes: Vec<&[u32]> = open.iter().map(|o| o.prefix.as_slice()).collect();
        let lp = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<Hypothesis> = Vec::with_capacity(open.len() * lp.cols());
        for (o, row) in open.iter().zip(0..) {
            for (t, &l) in lp.row(row).iter().enumerate() {
                let mut tokens = o.prefix[1..].to_vec();
                tokens.push(t as u32);
                let score = o.score + f64::from(l);
                cands.push(Hypothesis {
                    normalized_score: normalize(score, tokens.len(), length_penalty),
                    tokens,
                    score,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam_width);
        open.clear();
        for c in cands {
            if c.finished() || step == max_len {
                finished.push(c);
            } else {
                let mut prefix = Vec::with_capacity(c.tokens.len() + 1);
                prefix.push(BOS);
                prefix.extend_from_slice(&c.tokens);
                open.push(Open { prefix, score: c.score });
            }
        }
        // with no length penalty an open hypothesis can only lose score
        if length_penalty == 0.0 {
            if let Some(best) = finished.iter().map(|h| h.score).reduce(f64::max) {
                if open.iter().all(|o| o.score < best) {
                    break;
                }
            }
        }
    }
    finished.sort_by(rank);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::input("beam search produced no hypothesis"))
}

/// Argmax decoding, one token at a time.
pub fn greedy(scorer: &dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(&[&prefix])?;
        let row = lp.row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        score += f64::from(row[best]);
        prefix.push(best as u32);
        if best as u32 == EOS {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    Ok(Hypothesis {
        normalized_score: score,
        tokens,
        score,
    })
}
