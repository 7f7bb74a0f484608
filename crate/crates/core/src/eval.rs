//! Corpus BLEU, exact match, and the mode-consistency diagnostic for synthetic data.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::ModeMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub exact_match: f64,
    /// Only defined for synthetic corpora with a known mode map.
    pub mode_consistency: Option<f64>,
    pub n_sentences: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU (×100) with clipped n-gram precisions up to `max_n` and brevity
/// penalty `exp(min(0, 1 − r/h))`. Any zero precision gives 0.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::LineCountMismatch {
            src: hyps.len(),
            tgt: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0);
    Ok(100.0 * (log_p + bp).exp())
}

/// Percentage of hypotheses identical to their reference.
pub fn exact_match<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::LineCountMismatch {
            src: hyps.len(),
            tgt: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let same = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(100.0 * same as f64 / hyps.len() as f64)
}

/// Splits `tokens` into realizations of the map; `None` if any token is not part of
/// a complete realization. Returns the mode of each segment.
fn segment_modes<S: AsRef<str>>(
    tokens: &[S],
    map: &ModeMap,
    index: &HashMap<&str, (usize, usize, usize)>,
) -> Option<Vec<usize>> {
    let mut modes = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let &(sym, mode, piece) = index.get(tokens[i].as_ref())?;
        if piece != 0 {
            return None;
        }
        let real = &map.realizations[sym][mode];
        if tokens.len() < i + real.len()
            || !real.iter().zip(&tokens[i..]).all(|(a, b)| a == b.as_ref())
        {
            return None;
        }
        modes.push(mode);
        i += real.len();
    }
    Some(modes)
}

/// Fraction of hypotheses whose every realization comes from a single mode.
/// Empty hypotheses and unrecognizable tokens count as inconsistent.
pub fn mode_consistency<S: AsRef<str>>(hyps: &[Vec<S>], map: &ModeMap) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypotheses"));
    }
    let index = map.token_index();
    let good = hyps
        .iter()
        .filter(|h| match segment_modes(h, map, &index) {
            Some(m) => !m.is_empty() && m.iter().all(|&k| k == m[0]),
            None => false,
        })
        .count();
    Ok(good as f64 / hyps.len() as f64)
}

/// BLEU, BLEU-1/2, exact match and (when a map is given) mode consistency.
pub fn evaluate(hyps: &[Vec<String>], refs: &[Vec<String>], map: Option<&ModeMap>) -> Result<EvalReport> {
    Ok(EvalReport {
        bleu: bleu(hyps, refs, 4)?,
        bleu_1: bleu(hyps, refs, 1)?,
        bleu_2: bleu(hyps, refs, 2)?,
        exact_match: exact_match(hyps, refs)?,
        mode_consistency: map.map(|m| mode_consistency(hyps, m)).transpose()?,
        n_sentences: hyps.len(),
    })
}

impl EvalReport {
    /// Fixed-width two-column table.
    pub fn table(&self) -> String {
        let mc = self
            .mode_consistency
            .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:<18}{:>10.2}\n{:<18}{:>10.2}\n{:<18}{:>10.2}\n{:<18}{:>10.2}\n{:<18}{:>10}\n{:<18}{:>10}\n",
            "BLEU", self.bleu, "BLEU-1", self.bleu_1, "BLEU-2", self.bleu_2, "exact match", self.exact_match,
            "mode consistency", mc, "sentences", self.n_sentences
        )
    }
}
