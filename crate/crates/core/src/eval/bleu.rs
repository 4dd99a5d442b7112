use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// add one to numerator and denominator for orders 2 and up
    AddOne,
}

/// Clipped n-gram matches and totals for orders 1 to 4, plus lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    pub fn of(hyp: &[usize], reference: &[usize]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Eval("BLEU reference is empty".into()));
        }
        let mut s = Self {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let r = ngram_counts(reference, n);
            let h = ngram_counts(hyp, n);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        Ok(s)
    }

    pub fn add(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of the precisions times the brevity penalty.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let (m, t) = match smoothing {
                Smoothing::AddOne if n > 0 => (self.matches[n] + 1, self.totals[n] + 1),
                _ => (self.matches[n], self.totals[n]),
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Sentence-level BLEU in `[0, 1]`.
pub fn bleu(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    Ok(BleuStats::of(hyp, reference)?.score(Smoothing::None))
}

/// Corpus-level BLEU: n-gram statistics are summed over all pairs before the
/// precisions are combined.
pub fn corpus_bleu<'a>(
    pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>,
    smoothing: Smoothing,
) -> Result<f64> {
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        total.add(&BleuStats::of(h, r)?);
    }
    Ok(total.score(smoothing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(bleu(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]).unwrap(), 1.0);
        let b = bleu(&[1, 2, 3, 4], &[1, 2, 3, 4, 5]).unwrap();
        assert!((b - (-0.25f64).exp()).abs() < 1e-12);
        assert!((b - 0.7788).abs() < 1e-4);
        assert_eq!(bleu(&[7, 8, 9, 7], &[1, 2, 3, 4]).unwrap(), 0.0);
        assert!(bleu(&[1], &[]).is_err());
        assert_eq!(bleu(&[], &[1]).unwrap(), 0.0);
    }

    #[test]
    fn clipping_and_smoothing() {
        // "the the the the" style repetition is clipped to the reference count
        let s = BleuStats::of(&[1, 1, 1, 1], &[1, 2, 3, 4]).unwrap();
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.score(Smoothing::None), 0.0);
        let s = BleuStats::of(&[1, 2, 9, 4, 5], &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(s.score(Smoothing::None), 0.0);
        assert!(s.score(Smoothing::AddOne) > 0.0);
    }

    #[test]
    fn corpus_level_aggregates() {
        let a: (&[usize], &[usize]) = (&[1, 2, 3, 4], &[1, 2, 3, 4]);
        let b: (&[usize], &[usize]) = (&[5, 6, 7, 8], &[5, 6, 7, 8]);
        assert_eq!(corpus_bleu([a, b], Smoothing::None).unwrap(), 1.0);
        let c: (&[usize], &[usize]) = (&[5, 6, 7, 9], &[5, 6, 7, 8]);
        assert!(corpus_bleu([a, c], Smoothing::None).unwrap() < 1.0);
    }
}
