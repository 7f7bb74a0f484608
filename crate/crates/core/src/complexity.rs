//! Alignment-based corpus complexity: an EM word aligner with a diagonal prior,
//! token-level conditional entropy (`C_TOK`) and sentence-level aligned
//! cross-entropy (`C_SEN`), plus discretization of targets into latent codes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{ParallelCorpus, Vocab};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::quantizer::assign;
use crate::tensor::Mat;

pub const DEFAULT_TENSION: f64 = 4.0;
pub const DEFAULT_ITERS: usize = 5;

/// Lexical table `t(y | x)` with a fixed diagonal alignment prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel {
    /// `t[x][y]`, each row summing to one over the targets seen with `x`.
    pub t: HashMap<u32, HashMap<u32, f64>>,
    pub tension: f64,
    pub iterations: usize,
    /// Corpus log-likelihood before the first update and after each one.
    pub log_likelihood: Vec<f64>,
}

/// `p(a_t = s)` for 1-based `s ∈ 1..=n` at target position `t` of `m`.
pub fn alignment_prior(n: usize, m: usize, t: usize, tension: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n)
        .map(|s| (-tension * (s as f64 / n as f64 - t as f64 / m as f64).abs()).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

impl AlignmentModel {
    pub fn prob(&self, x: u32, y: u32) -> f64 {
        self.t.get(&x).and_then(|r| r.get(&y)).copied().unwrap_or(0.0)
    }
}

fn check_corpus(corpus: &ParallelCorpus) -> Result<()> {
    if corpus.pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if corpus.pairs.iter().any(|(x, y)| x.is_empty() || y.is_empty()) {
        return Err(Error::Empty("sentence in corpus"));
    }
    Ok(())
}

/// EM over the lexical table. The first E-step uses a uniform table, so its
/// posteriors follow the prior alone.
pub fn train_aligner(corpus: &ParallelCorpus, iters: usize, tension: f64) -> Result<AlignmentModel> {
    check_corpus(corpus)?;
    if iters == 0 {
        return Err(Error::Config("aligner needs at least one iteration".into()));
    }
    if !(tension >= 0.0 && tension.is_finite()) {
        return Err(Error::Config(format!("tension {tension} must be finite and ≥ 0")));
    }
    let vy = corpus.pairs.iter().flat_map(|p| p.1.iter()).max().map_or(1, |&m| m as usize + 1);
    let uniform = 1.0 / vy as f64;
    let mut model = AlignmentModel {
        t: HashMap::new(),
        tension,
        iterations: 0,
        log_likelihood: Vec::new(),
    };
    let lex = |m: &AlignmentModel, x: u32, y: u32| {
        if m.iterations == 0 {
            uniform
        } else {
            m.prob(x, y)
        }
    };
    for _ in 0..=iters {
        let mut counts: HashMap<u32, HashMap<u32, f64>> = HashMap::new();
        let mut ll = 0.0;
        for (x, y) in &corpus.pairs {
            let (n, m) = (x.len(), y.len());
            for (t, &yt) in y.iter().enumerate() {
                let prior = alignment_prior(n, m, t + 1, tension);
                let joint: Vec<f64> = x.iter().zip(&prior).map(|(&xs, &p)| p * lex(&model, xs, yt)).collect();
                let z: f64 = joint.iter().sum();
                ll += z.ln();
                if z > 0.0 {
                    for (&xs, &j) in x.iter().zip(&joint) {
                        *counts.entry(xs).or_default().entry(yt).or_default() += j / z;
                    }
                }
            }
        }
        model.log_likelihood.push(ll);
        if model.iterations == iters {
            break;
        }
        model.t = counts
            .into_iter()
            .map(|(x, row)| {
                let total: f64 = row.values().sum();
                (x, row.into_iter().map(|(y, c)| (y, c / total)).collect())
            })
            .collect();
        model.iterations += 1;
    }
    Ok(model)
}

/// Hard alignment: for each target position the source position maximizing
/// `prior · t(y | x)`, ties to the leftmost.
pub fn align(x: &[u32], y: &[u32], model: &AlignmentModel) -> Vec<usize> {
    let (n, m) = (x.len(), y.len());
    (0..m)
        .map(|t| {
            let prior = alignment_prior(n, m, t + 1, model.tension);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (s, (&xs, &p)) in x.iter().zip(&prior).enumerate() {
                let v = p * model.prob(xs, y[t]);
                if v > best_v {
                    best_v = v;
                    best = s;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub corpus: String,
    pub c_tok: f64,
    pub c_sen: f64,
    pub iterations: usize,
    pub tension: f64,
    pub pairs: usize,
}

/// `C_TOK` and `C_SEN` (nats) from hard alignments of `corpus` under `model`.
///
/// Aligned pairs seen in the counts use their relative frequency; an unseen pair is
/// scored with add-one smoothing over the candidate set of its source token.
pub fn complexity(corpus: &ParallelCorpus, model: &AlignmentModel) -> Result<ComplexityReport> {
    check_corpus(corpus)?;
    let alignments: Vec<Vec<usize>> = corpus.pairs.iter().map(|(x, y)| align(x, y, model)).collect();
    let mut counts: HashMap<u32, HashMap<u32, f64>> = HashMap::new();
    for ((x, y), a) in corpus.pairs.iter().zip(&alignments) {
        for (t, &s) in a.iter().enumerate() {
            *counts.entry(x[s]).or_default().entry(y[t]).or_default() += 1.0;
        }
    }
    let totals: HashMap<u32, f64> = counts.iter().map(|(&x, r)| (x, r.values().sum())).collect();
    let grand: f64 = totals.values().sum();

    let mut c_tok = 0.0;
    for (x, row) in &counts {
        let cx = totals[x];
        let h: f64 = row
            .values()
            .map(|&c| {
                let p = c / cx;
                -p * p.ln()
            })
            .sum();
        c_tok += cx / grand * h;
    }

    let p_hat = |x: u32, y: u32| -> f64 {
        match counts.get(&x) {
            Some(row) => match row.get(&y) {
                Some(&c) => c / totals[&x],
                None => 1.0 / (totals[&x] + row.len() as f64 + 1.0),
            },
            None => 1.0 / 2.0,
        }
    };
    let mut c_sen = 0.0;
    for ((x, y), a) in corpus.pairs.iter().zip(&alignments) {
        let s: f64 = a.iter().enumerate().map(|(t, &s)| -p_hat(x[s], y[t]).ln()).sum();
        c_sen += s / y.len() as f64;
    }
    c_sen /= corpus.pairs.len() as f64;

    Ok(ComplexityReport {
        corpus: corpus.name.clone(),
        c_tok: c_tok.max(0.0),
        c_sen: c_sen.max(0.0),
        iterations: model.iterations,
        tension: model.tension,
        pairs: corpus.pairs.len(),
    })
}

/// Trains an aligner on `corpus` and measures it.
pub fn analyze(corpus: &ParallelCorpus, iters: usize, tension: f64) -> Result<ComplexityReport> {
    let model = train_aligner(corpus, iters, tension)?;
    complexity(corpus, &model)
}

/// Replaces each target with its code sequence, rendered as `z<k>` tokens.
pub fn discretize_corpus(corpus: &ParallelCorpus, model: &Model<f32>) -> Result<ParallelCorpus> {
    if model.config.mode != Mode::LatentGlat {
        return Err(Error::Unsupported(format!(
            "discretization needs a latent-glat model, not {}",
            model.config.mode
        )));
    }
    let book = model.codebook.as_ref().expect("latent mode has a codebook");
    let emb = model.tgt_embedding();
    let mut rendered = Vec::with_capacity(corpus.len());
    for (_, y) in &corpus.pairs {
        let mut reprs = Mat::zeros(y.len(), emb.cols);
        for (r, &t) in y.iter().enumerate() {
            if t as usize >= emb.rows {
                return Err(Error::OutOfRange {
                    what: "target vocabulary",
                    index: t as usize,
                    size: emb.rows,
                });
            }
            reprs.row_mut(r).copy_from_slice(emb.row(t as usize));
        }
        rendered.push(assign(&reprs, book)?.render().join(" "));
    }
    let vocab = Vocab::build(rendered.iter().map(String::as_str));
    let pairs = corpus
        .pairs
        .iter()
        .zip(&rendered)
        .map(|((x, _), z)| (x.clone(), vocab.encode(z)))
        .collect();
    Ok(ParallelCorpus {
        name: format!("{}↔z", corpus.name),
        pairs,
        src_vocab: corpus.src_vocab.clone(),
        tgt_vocab: vocab,
    })
}

/// Table of reports: corpus, `C_TOK`, `C_SEN`.
pub fn complexity_table(reports: &[ComplexityReport]) -> String {
    let w = reports.iter().map(|r| r.corpus.chars().count()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>8}  {:>8}\n", "corpus", "C_TOK", "C_SEN");
    for r in reports {
        s.push_str(&format!("{:<w$}  {:>8.4}  {:>8.4}\n", r.corpus, r.c_tok, r.c_sen));
    }
    s
}
