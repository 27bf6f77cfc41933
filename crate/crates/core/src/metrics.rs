//! Corpus-level BLEU.
//!
//! Clipped n-gram precisions with a geometric mean over orders 1..n and the
//! standard brevity penalty. Smoothing rule (documented, fixed for
//! comparability): orders >= 2 with a zero clipped count score
//! `1 / (total + 1)`; order 1 is never smoothed, so corpora sharing no
//! unigrams score exactly 0.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{CareError, Result};

/// Corpus-level BLEU-n over token sequences (one reference per hypothesis).
pub fn bleu_n<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    n: usize,
) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(CareError::Validation(format!("bleu order {n} outside 1..=4")));
    }
    if hypotheses.is_empty() {
        return Err(CareError::Validation("bleu over an empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(CareError::Validation(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut clipped = vec![0u64; n];
    let mut totals = vec![0u64; n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for order in 1..=n {
            let hyp_counts = ngram_counts(hyp, order);
            let ref_counts = ngram_counts(reference, order);
            for (gram, count) in &hyp_counts {
                let allowed = ref_counts.get(gram).copied().unwrap_or(0);
                clipped[order - 1] += (*count).min(allowed);
            }
            totals[order - 1] += hyp.len().saturating_sub(order - 1) as u64;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (c, t) = (clipped[order - 1], totals[order - 1]);
        let p = if order == 1 {
            if t == 0 || c == 0 {
                return Ok(0.0);
            }
            c as f64 / t as f64
        } else if c == 0 {
            1.0 / (t + 1) as f64
        } else {
            c as f64 / t as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], order: usize) -> HashMap<Vec<T>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= order {
        for w in tokens.windows(order) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}
