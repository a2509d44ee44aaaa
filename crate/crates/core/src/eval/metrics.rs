use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub fn exact_match<T: PartialEq>(pred: &[T], gold: &[T]) -> bool {
    pred == gold
}

/// Character-level Levenshtein distance with unit costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
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

/// `1 - Lev(pred, gold) / (|pred| + |gold|)` over characters.
pub fn edit_similarity(pred: &str, gold: &str) -> Result<f64, EvalError> {
    let total = pred.chars().count() + gold.chars().count();
    if total == 0 {
        return Err(EvalError::BothEmpty);
    }
    Ok(1.0 - levenshtein(pred, gold) as f64 / total as f64)
}

fn ngram_counts<T: Eq + Hash>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 in `[0, 100]`: clipped precisions, add-one smoothing on
/// orders 2 to 4, standard brevity penalty.
pub fn bleu<T: Eq + Hash>(pred: &[T], gold: &[T]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let p = ngram_counts(pred, n);
        let g = ngram_counts(gold, n);
        let matched: usize = p.iter().map(|(k, &c)| c.min(g.get(k).copied().unwrap_or(0))).sum();
        let total = (pred.len() + 1).saturating_sub(n);
        let precision = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += precision.ln() / 4.0;
    }
    let (c, r) = (pred.len() as f64, gold.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * log_sum.exp()
}

/// Mean of sentence scores.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(p, g)| bleu(p, g)).sum::<f64>() / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepeatDef {
    /// Token equals its immediate predecessor.
    #[default]
    Consecutive,
    /// Token already occurred earlier in the same line.
    Any,
}

/// Pooled fraction of repeated tokens; 0 for an empty set.
pub fn repetition_ratio<T: Eq + Hash>(predictions: &[Vec<T>], def: RepeatDef) -> f64 {
    let total: usize = predictions.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let repeated: usize = predictions
        .iter()
        .map(|p| match def {
            RepeatDef::Consecutive => p.windows(2).filter(|w| w[0] == w[1]).count(),
            RepeatDef::Any => {
                let mut seen = std::collections::HashSet::new();
                p.iter().filter(|t| !seen.insert(*t)).count()
            }
        })
        .sum();
    repeated as f64 / total as f64
}
