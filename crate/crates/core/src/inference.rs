//! Parallel decoding with length candidates and self-reranking, greedy AT decoding,
//! and the batch-1 latency benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout};
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{length_from_offset_class, Dropout, Encoded, Mode, Model, Slot};
use crate::quantizer::LatentSeq;
use crate::tensor::{argmax, log_sum_exp, Mat, Scalar};

pub const DEFAULT_GAMMA: f64 = 1.1;
pub const DEFAULT_LENBEAM: usize = 6;

/// Length candidates around `m_hat`: offsets `-(span/2) ..` for `span` entries, keeping those ≥ 1.
/// The default span of 6 gives `[m−3, …, m+2]`.
pub fn length_candidates(m_hat: usize, span: usize) -> Vec<usize> {
    let lo = m_hat as i64 - (span / 2) as i64;
    (lo..lo + span as i64).filter(|&m| m >= 1).map(|m| m as usize).collect()
}

/// Score of a candidate: `logprob + m·ln γ`.
pub fn rerank_score(logprob: f64, m: usize, gamma: f64) -> f64 {
    logprob + m as f64 * gamma.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub m: usize,
    pub z_hat: Option<LatentSeq>,
    pub y_hat: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
}

/// Index of the best candidate: highest score, then shorter length, then earlier position.
pub fn select_best(cands: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cands.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) => {
                let cb = &cands[b];
                if c.score > cb.score || (c.score == cb.score && c.m < cb.m) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Forward passes spent on one sentence, counted per candidate sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub latent: usize,
    pub decoder: usize,
}

impl PassCounts {
    pub fn total(&self) -> usize {
        self.latent + self.decoder
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub m_hat: usize,
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
    pub passes: PassCounts,
}

impl Decoded {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.chosen]
    }
}

/// Token ids never emitted by parallel decoders.
fn is_reserved(id: usize) -> bool {
    id == PAD as usize || id == BOS as usize || id == EOS as usize
}

fn argmax_allowed<F: Scalar>(row: &[F]) -> usize {
    let mut best = None;
    for (i, &v) in row.iter().enumerate() {
        if is_reserved(i) {
            continue;
        }
        if best.is_none_or(|b: usize| v > row[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

/// Decodes each source sentence in parallel mode with `lenbeam` length candidates.
///
/// Sentences are processed together; each candidate is a separate sequence in the
/// batch, so the counted passes equal the per-sentence numbers of a batch-1 run.
pub fn decode_parallel<F: Scalar>(
    model: &Model<F>,
    srcs: &[&[u32]],
    gamma: f64,
    lenbeam: usize,
) -> Result<Vec<Decoded>> {
    let mode = model.config.mode;
    if !mode.is_parallel() {
        return Err(Error::Unsupported("parallel decoding needs a non-autoregressive model".into()));
    }
    if lenbeam == 0 || gamma <= 0.0 {
        return Err(Error::Config("lenbeam ≥ 1 and gamma > 0 required".into()));
    }
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(&model.params);
    let mut off = Dropout::off();
    let enc = model.encode_graph(&mut g, &mut off, srcs)?;
    let len_logits = model.length_logits_graph(&mut g, &enc)?;

    // Candidate lengths per sentence and the replicated encoder rows they attend to.
    let mut owners = Vec::new();
    let mut lens = Vec::new();
    let mut m_hats = Vec::new();
    for (i, src) in srcs.iter().enumerate() {
        let class = argmax(g.value(len_logits).row(i));
        let m_hat = length_from_offset_class(src.len(), class).min(model.config.max_len);
        m_hats.push(m_hat);
        for m in length_candidates(m_hat, lenbeam) {
            if m <= model.config.max_len {
                owners.push(i);
                lens.push(m);
            }
        }
    }
    let mut rows = Vec::new();
    let mut enc_lens = Vec::new();
    for &i in &owners {
        rows.extend(enc.layout.range(i));
        enc_lens.push(enc.layout.lens[i]);
    }
    let rep = Encoded {
        node: g.gather(enc.node, &rows),
        layout: SeqLayout::from_lens(&enc_lens),
    };
    let h = model.softcopy_graph(&mut g, &rep, &lens);
    let tgt = SeqLayout::from_lens(&lens);

    let mut z_hats: Vec<Option<LatentSeq>> = vec![None; lens.len()];
    let inputs = if mode == Mode::LatentGlat {
        let logits = model.latent_logits_graph(&mut g, &mut off, h, &tgt, &rep)?;
        let lv = g.value(logits);
        let mut slots = Vec::with_capacity(tgt.total());
        for (c, z) in z_hats.iter_mut().enumerate() {
            let seq: Vec<usize> = tgt.range(c).map(|r| lv.argmax_row(r)).collect();
            slots.extend(seq.iter().map(|&k| Slot::Latent(k)));
            *z = Some(LatentSeq(seq));
        }
        model.inputs_graph(&mut g, h, &slots)?
    } else {
        h
    };
    let logits = model.token_logits_graph(&mut g, &mut off, inputs, &tgt, &rep, false);
    let lv = g.value(logits);

    let mut out: Vec<Decoded> = m_hats
        .iter()
        .map(|&m_hat| Decoded {
            m_hat,
            candidates: Vec::new(),
            chosen: 0,
            passes: PassCounts::default(),
        })
        .collect();
    for (c, z_hat) in z_hats.into_iter().enumerate() {
        let mut y_hat = Vec::with_capacity(lens[c]);
        let mut logprob = 0.0;
        for r in tgt.range(c) {
            let row = lv.row(r);
            let y = argmax_allowed(row);
            logprob += row[y].f64() - log_sum_exp(row).f64();
            y_hat.push(y as u32);
        }
        let d = &mut out[owners[c]];
        d.passes.decoder += 1;
        if z_hat.is_some() {
            d.passes.latent += 1;
        }
        d.candidates.push(Candidate {
            m: lens[c],
            z_hat,
            y_hat,
            logprob,
            score: rerank_score(logprob, lens[c], gamma),
        });
    }
    for d in &mut out {
        d.chosen = select_best(&d.candidates).ok_or(Error::Empty("length candidates"))?;
    }
    Ok(out)
}

/// Greedy autoregressive decoding of one sentence. Returns the tokens (without `EOS`)
/// and the number of decoder passes, one per generated token including `EOS`.
pub fn decode_at<F: Scalar>(model: &Model<F>, src: &[u32]) -> Result<(Vec<u32>, usize)> {
    if model.config.mode != Mode::At {
        return Err(Error::Unsupported("greedy decoding needs an autoregressive model".into()));
    }
    let enc = model.encode(&[src])?;
    let mut prefix = vec![BOS];
    let mut passes = 0;
    while prefix.len() < model.config.max_len {
        let logits = model.ar_step(&prefix, &enc)?;
        passes += 1;
        let mut best = None;
        for (i, &v) in logits.iter().enumerate() {
            if i == PAD as usize || i == BOS as usize {
                continue;
            }
            if best.is_none_or(|b: usize| v > logits[b]) {
                best = Some(i);
            }
        }
        let next = best.unwrap_or(EOS as usize) as u32;
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    Ok((prefix[1..].to_vec(), passes))
}

/// Best hypothesis per source sentence for any mode.
pub fn translate<F: Scalar>(
    model: &Model<F>,
    srcs: &[&[u32]],
    gamma: f64,
    lenbeam: usize,
) -> Result<Vec<Vec<u32>>> {
    if model.config.mode == Mode::At {
        srcs.iter().map(|s| decode_at(model, s).map(|r| r.0)).collect()
    } else {
        Ok(decode_parallel(model, srcs, gamma, lenbeam)?
            .into_iter()
            .map(|d| d.best().y_hat.clone())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub name: String,
    pub mode: Mode,
    pub median_ms: f64,
    pub speedup: f64,
    pub passes_per_sentence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub sentences: usize,
    pub reps: usize,
    pub rows: Vec<LatencyRow>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Sentence-by-sentence wall-clock latency, median over `reps` sweeps, with speedups
/// relative to the first autoregressive model in `models`.
pub fn benchmark_latency(
    models: &[(String, &Model<f32>)],
    srcs: &[&[u32]],
    reps: usize,
    gamma: f64,
    lenbeam: usize,
) -> Result<LatencyReport> {
    if models.len() < 2 {
        return Err(Error::Config("benchmark needs at least two models".into()));
    }
    let at_index = models
        .iter()
        .position(|(_, m)| m.config.mode == Mode::At)
        .ok_or_else(|| Error::Config("benchmark needs an autoregressive baseline".into()))?;
    if srcs.is_empty() || reps == 0 {
        return Err(Error::Empty("benchmark sentences"));
    }
    let mut rows = Vec::new();
    for (name, model) in models {
        let mut per_rep = Vec::with_capacity(reps);
        let mut passes = 0usize;
        for rep in 0..reps {
            let t0 = Instant::now();
            for src in srcs {
                let n = if model.config.mode == Mode::At {
                    decode_at(model, src)?.1
                } else {
                    decode_parallel(model, &[*src], gamma, lenbeam)?[0].passes.total()
                };
                if rep == 0 {
                    passes += n;
                }
            }
            per_rep.push(t0.elapsed().as_secs_f64() * 1e3 / srcs.len() as f64);
        }
        rows.push(LatencyRow {
            name: name.clone(),
            mode: model.config.mode,
            median_ms: median(per_rep),
            speedup: 0.0,
            passes_per_sentence: passes as f64 / srcs.len() as f64,
        });
    }
    let base = rows[at_index].median_ms;
    for r in &mut rows {
        r.speedup = base / r.median_ms;
    }
    Ok(LatencyReport {
        sentences: srcs.len(),
        reps,
        rows,
    })
}

/// Convenience for tests and tools: the `m × |V|` token logits of one sentence at a fixed length.
pub fn token_logits_at_length<F: Scalar>(model: &Model<F>, src: &[u32], m: usize) -> Result<Mat<F>> {
    let enc = model.encode(&[src])?;
    let h = crate::model::softcopy(&enc.sentence(0), m);
    let inputs = if model.config.mode == Mode::LatentGlat {
        let z = model.latent_logits(std::slice::from_ref(&h), &enc)?;
        let mut g = Graph::new(&model.params);
        let hn = g.input(h);
        let slots: Vec<Slot> = (0..m).map(|r| Slot::Latent(z[0].argmax_row(r))).collect();
        let node = model.inputs_graph(&mut g, hn, &slots)?;
        g.value(node).clone()
    } else {
        h
    };
    Ok(model.decode_tokens(&[inputs], &enc)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::keyed_rng;

    fn cand(m: usize, logprob: f64, gamma: f64) -> Candidate {
        Candidate {
            m,
            z_hat: None,
            y_hat: vec![4; m],
            logprob,
            score: rerank_score(logprob, m, gamma),
        }
    }

    #[test]
    fn candidate_windows() {
        assert_eq!(length_candidates(10, 6), vec![7, 8, 9, 10, 11, 12]);
        assert_eq!(length_candidates(2, 6), vec![1, 2, 3, 4]);
        assert_eq!(length_candidates(1, 6), vec![1, 2, 3]);
        assert_eq!(length_candidates(5, 1), vec![5]);
    }

    #[test]
    fn rerank_hand_example() {
        let a = cand(4, -2.0, 1.1);
        let b = cand(5, -2.2, 1.1);
        assert!((a.score - -1.6188).abs() < 5e-5);
        assert!((b.score - -1.7234).abs() < 5e-4);
        assert_eq!(select_best(&[a.clone(), b.clone()]), Some(0));
        assert_eq!(select_best(&[b, a]), Some(1));
    }

    #[test]
    fn ties_prefer_shorter_then_earlier() {
        let c = vec![cand(5, -1.0, 1.0), cand(4, -1.0, 1.0), cand(4, -1.0, 1.0)];
        assert_eq!(select_best(&c), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    fn tiny(mode: Mode) -> Model<f32> {
        let cfg = ModelConfig {
            d_model: 16,
            d_hidden: 16,
            n_head: 2,
            enc_layers: 1,
            lp_layers: 1,
            dec_layers: 1,
            k: 8,
            max_len: 20,
            mode,
            src_vocab: 10,
            tgt_vocab: 12,
            ..ModelConfig::default()
        };
        Model::new(cfg, &mut keyed_rng(2, 2)).unwrap()
    }

    #[test]
    fn parallel_decode_contracts() {
        let model = tiny(Mode::LatentGlat);
        let srcs: Vec<&[u32]> = vec![&[4, 5, 6, 7], &[8, 9]];
        let out = decode_parallel(&model, &srcs, 1.1, 6).unwrap();
        assert_eq!(out.len(), 2);
        for d in &out {
            assert!(d.candidates.len() <= 6);
            assert_eq!(d.passes.decoder, d.candidates.len());
            assert_eq!(d.passes.latent, d.candidates.len());
            assert!(d.passes.total() <= 12);
            for c in &d.candidates {
                assert_eq!(c.y_hat.len(), c.m);
                assert_eq!(c.z_hat.as_ref().unwrap().len(), c.m);
                assert!(c.y_hat.iter().all(|&y| !is_reserved(y as usize)));
                assert!((c.score - rerank_score(c.logprob, c.m, 1.1)).abs() < 1e-12);
            }
        }
        // Batched decoding equals one-at-a-time decoding.
        let single = decode_parallel(&model, &srcs[1..], 1.1, 6).unwrap();
        assert_eq!(single[0].best().y_hat, out[1].best().y_hat);
        assert!((single[0].best().logprob - out[1].best().logprob).abs() < 1e-4);
        let one = decode_parallel(&model, &srcs[..1], 1.1, 1).unwrap();
        assert_eq!(one[0].candidates.len(), 1);
        assert_eq!(decode_parallel(&model, &srcs, 1.1, 6).unwrap(), out);
    }

    #[test]
    fn gamma_one_picks_max_logprob() {
        let model = tiny(Mode::Nat);
        let d = &decode_parallel(&model, &[&[4, 5, 6]], 1.0, 6).unwrap()[0];
        let max = d.candidates.iter().map(|c| c.logprob).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(d.best().logprob, max);
        assert_eq!(d.passes.latent, 0);
    }

    #[test]
    fn at_counts_one_pass_per_token() {
        let model = tiny(Mode::At);
        let (y, passes) = decode_at(&model, &[4, 5]).unwrap();
        assert!(passes == y.len() + 1 || y.len() + 1 == model.config.max_len);
        assert!(decode_parallel(&model, &[&[4]], 1.1, 6).is_err());
    }

    #[test]
    fn benchmark_requires_at_baseline() {
        let at = tiny(Mode::At);
        let nat = tiny(Mode::Nat);
        let srcs: Vec<&[u32]> = vec![&[4, 5, 6]];
        let models = vec![("nat".to_string(), &nat), ("nat2".to_string(), &nat)];
        assert!(benchmark_latency(&models, &srcs, 1, 1.1, 6).is_err());
        let models = vec![("at".to_string(), &at), ("at2".to_string(), &at)];
        let r = benchmark_latency(&models, &srcs, 1, 1.1, 6).unwrap();
        assert_eq!(r.rows[0].speedup, 1.0);
    }
}
