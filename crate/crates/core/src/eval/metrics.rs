use crate::error::{Error, Result};

/// Levenshtein distance (unit-cost substitutions, deletions, insertions).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::input("WER needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Word error accumulated over many utterances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WerTally {
    pub errors: usize,
    pub words: usize,
}

impl WerTally {
    pub fn add(&mut self, reference: &str, hypothesis: &str) {
        let r = words(reference);
        self.errors += edit_distance(&r, &words(hypothesis));
        self.words += r.len();
    }

    pub fn merge(&mut self, other: WerTally) {
        self.errors += other.errors;
        self.words += other.words;
    }

    pub fn rate(&self) -> f64 {
        if self.words == 0 {
            0.0
        } else {
            self.errors as f64 / self.words as f64
        }
    }
}

/// Equal error rate of scored trials (`true` = same speaker).
///
/// Every cut between distinct score values gives a point (false-accept,
/// false-reject); the EER is where the polyline through those points
/// crosses the diagonal.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::input("one label per score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::input("trial scores must be finite"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::input("EER needs both positive and negative trials"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // cut 0 accepts everything
    let mut points = vec![(1.0f64, 0.0f64)];
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        points.push((
            (n_neg - neg_below) as f64 / n_neg as f64,
            pos_below as f64 / n_pos as f64,
        ));
    }
    for w in points.windows(2) {
        let (x1, y1) = w[0];
        let (x2, y2) = w[1];
        let (d1, d2) = (x1 - y1, x2 - y2);
        if d1 == 0.0 {
            return Ok(x1);
        }
        if d1 > 0.0 && d2 < 0.0 {
            return Ok(((x1 + y1) * -d2 + (x2 + y2) * d1) / (2.0 * (d1 - d2)));
        }
    }
    unreachable!("the polyline runs from (1, 0) to (0, 1)")
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}
