//! Greedy CTC decoding, Levenshtein distance and character error rate.

use crate::ctc::{LabelSequence, BLANK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Best-path decoding: per-frame argmax (lowest index wins ties), collapse
/// repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    LabelSequence::from_raw(out)
}

/// Levenshtein distance with unit costs, two-row dynamic program.
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

/// Micro-averaged character error rate in percent:
/// `100 * sum(edit distances) / sum(reference lengths)`.
pub fn cer<S: AsRef<[usize]>>(references: &[S], hypotheses: &[S]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::LengthMismatch(references.len(), hypotheses.len()));
    }
    let total: usize = references.iter().map(|r| r.as_ref().len()).sum();
    if total == 0 {
        return Err(Error::EmptyReference);
    }
    let errors: usize = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| edit_distance(r.as_ref(), h.as_ref()))
        .sum();
    Ok(100.0 * errors as f64 / total as f64)
}

impl AsRef<[usize]> for LabelSequence {
    fn as_ref(&self) -> &[usize] {
        self.symbols()
    }
}
