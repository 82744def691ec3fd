//! Connectionist Temporal Classification loss.
//!
//! The forward-backward recursion runs over the blank-augmented target
//! `[blank, l1, blank, l2, ..., lL, blank]` entirely in log space. Blank is
//! label 0.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Target symbols, blank excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    /// Checks every label lies in `[1, vocab_size - 1]`.
    pub fn new(symbols: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = symbols.iter().find(|&&s| s == BLANK || s >= vocab_size) {
            return Err(Error::InvalidLabel {
                label: bad,
                max: vocab_size.saturating_sub(1),
            });
        }
        Ok(Self(symbols))
    }

    /// Wraps symbols without range validation.
    pub fn from_raw(symbols: Vec<usize>) -> Self {
        Self(symbols)
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Frames needed for any alignment: one per symbol plus a separating
    /// blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

impl From<LabelSequence> for Vec<usize> {
    fn from(l: LabelSequence) -> Self {
        l.0
    }
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// (`T x V`, rows log-softmax normalized) and its gradient with respect to
/// those log-probabilities.
pub fn ctc_loss(log_probs: &Tensor, target: &LabelSequence) -> Result<(f64, Tensor)> {
    if log_probs.rank() != 2 {
        return Err(Error::Shape(format!(
            "ctc expects T x V log-probs, got {:?}",
            log_probs.shape()
        )));
    }
    let (t, v) = (log_probs.rows(), log_probs.cols());
    let lp: Vec<f64> = log_probs.data().iter().map(|&x| x as f64).collect();
    let (loss, grad) = ctc_loss_f64(&lp, t, v, target.symbols())?;
    let grad = Tensor::new(vec![t, v], grad.into_iter().map(|g| g as f32).collect())?;
    Ok((loss, grad))
}

/// Same as [`ctc_loss`] on a raw `T x V` row-major slice.
pub fn ctc_loss_f64(
    log_probs: &[f64],
    t: usize,
    v: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if t == 0 || log_probs.len() != t * v {
        return Err(Error::Shape(format!(
            "ctc log-probs {} for {t}x{v}",
            log_probs.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&s| s == BLANK || s >= v) {
        return Err(Error::InvalidLabel {
            label: bad,
            max: v - 1,
        });
    }
    let required = LabelSequence::from_raw(target.to_vec()).min_frames();
    if t < required {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required,
            frames: t,
        });
    }

    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| if s.is_multiple_of(2) { BLANK } else { target[s / 2] };
    // Skip transition s-2 -> s is allowed onto a label differing from the
    // label two positions back.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && ext(s) != ext(s - 2);
    let y = |ti: usize, k: usize| log_probs[ti * v + k];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t * s_len];
    alpha[0] = y(0, ext(0));
    if s_len > 1 {
        alpha[1] = y(0, ext(1));
    }
    for ti in 1..t {
        for s in 0..s_len {
            let prev = &alpha[(ti - 1) * s_len..ti * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[ti * s_len + s] = acc + y(ti, ext(s));
        }
    }

    let mut beta = vec![neg; t * s_len];
    let last = (t - 1) * s_len;
    beta[last + s_len - 1] = y(t - 1, ext(s_len - 1));
    if s_len > 1 {
        beta[last + s_len - 2] = y(t - 1, ext(s_len - 2));
    }
    for ti in (0..t - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(ti + 1) * s_len..(ti + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[ti * s_len + s] = acc + y(ti, ext(s));
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc likelihood".into()));
    }

    // d(-log P)/d log y_tk = -(1/P) * sum_{s: ext(s)=k} alpha_t(s) beta_t(s) / y_tk
    let mut grad = vec![0.0; t * v];
    let mut occupancy = vec![neg; v];
    for ti in 0..t {
        occupancy.iter_mut().for_each(|o| *o = neg);
        for s in 0..s_len {
            let k = ext(s);
            occupancy[k] = log_add(occupancy[k], alpha[ti * s_len + s] + beta[ti * s_len + s]);
        }
        for k in 0..v {
            if occupancy[k] > neg {
                grad[ti * v + k] = -(occupancy[k] - y(ti, k) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
