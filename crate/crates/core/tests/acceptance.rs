//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are always printed.
//! `ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria; everything else
//! is reported as skipped.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use latent_glat::autograd::Graph;
use latent_glat::checkpoint::{from_bytes, to_bytes};
use latent_glat::complexity::{analyze, discretize_corpus};
use latent_glat::data::{gen_synthetic_multimodal, Batch, ParallelCorpus, SyntheticCorpus, SyntheticSpec, Vocab};
use latent_glat::eval::{bleu, evaluate};
use latent_glat::glancing::{sample_observed, GlanceOutcome};
use latent_glat::inference::{decode_at, decode_parallel, length_candidates, rerank_score, select_best, translate, Candidate};
use latent_glat::model::{Dropout, Mode, Model, ModelConfig};
use latent_glat::quantizer::{assign, ema_update, Codebook, LatentSeq};
use latent_glat::rng::keyed_rng;
use latent_glat::tensor::Mat;
use latent_glat::training::{loss_graph, prepare, GlancePlan, MetricsLog, TrainConfig, Trainer};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1. Quantizer oracle

fn brute_force_nearest(row: &[f32], book: &Mat<f32>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..book.rows {
        let d: f64 = row
            .iter()
            .zip(book.row(j))
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut rng = keyed_rng(101, 1);
    let (mut mismatches, mut ties) = (0, 0);
    let cases = 10_000;
    for case in 0..cases {
        let k = rng.random_range(2..=24);
        let d = rng.random_range(1..=8);
        // Every other case uses a small integer grid, which makes equidistant codes common.
        let grid = case % 2 == 0;
        let draw = |rng: &mut latent_glat::rng::Rng| -> f32 {
            if grid {
                rng.random_range(-2i32..=2) as f32
            } else {
                rng.random_range(-3.0f32..3.0)
            }
        };
        let vectors = Mat::from_vec(k, d, (0..k * d).map(|_| draw(&mut rng)).collect());
        let reprs = Mat::from_vec(1, d, (0..d).map(|_| draw(&mut rng)).collect());
        let book = Codebook::from_parts(vectors, vec![1.0; k], 0.999).unwrap();
        let got = assign(&reprs, &book).unwrap().0[0];
        let want = brute_force_nearest(reprs.row(0), &book.vectors);
        let dists: Vec<f64> = (0..k)
            .map(|j| {
                reprs.row(0).iter().zip(book.vectors.row(j)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
            })
            .collect();
        if dists.iter().filter(|&&x| x == dists[want]).count() > 1 {
            ties += 1;
        }
        if got != want {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 10.0,
        format!("{cases} cases ({ties} with tied nearest codes), {mismatches} mismatches, {secs:.2} s (limit 10 s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. EMA oracle

/// Straight-line codebook EMA: counts first, then vectors over the updated counts.
fn ema_reference(vectors: &[Vec<f64>], counts: &[f64], lambda: f64, reprs: &[Vec<f64>], z: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = counts.len();
    let d = vectors.first().map_or(0, Vec::len);
    let mut new_counts = vec![0.0; k];
    let mut new_vectors = vec![vec![0.0; d]; k];
    for j in 0..k {
        let mut n = 0.0;
        let mut sum = vec![0.0; d];
        for (r, &zi) in reprs.iter().zip(z) {
            if zi == j {
                n += 1.0;
                for c in 0..d {
                    sum[c] += r[c];
                }
            }
        }
        new_counts[j] = lambda * counts[j] + (1.0 - lambda) * n;
        for c in 0..d {
            new_vectors[j][c] = lambda * vectors[j][c] + (1.0 - lambda) * sum[c] / new_counts[j].max(1e-6);
        }
    }
    (new_vectors, new_counts)
}

fn criterion_2() -> Verdict {
    let mut rng = keyed_rng(102, 1);
    let mut worst = 0.0f64;
    for batch in 0..1000 {
        let k = rng.random_range(2..=12);
        let d = rng.random_range(1..=6);
        let n = if batch % 50 == 0 { 0 } else { rng.random_range(1..=20) };
        let lambda = [0.999f32, 0.99, 0.9, 0.5][batch % 4];
        let vectors: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let counts: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..3.0)).collect();
        let reprs: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

        let mut book = Codebook::from_parts(Mat::from_vec(k, d, vectors.clone()), counts.clone(), lambda).unwrap();
        ema_update(&mut book, &Mat::from_vec(n, d, reprs.clone()), &LatentSeq(z.clone())).unwrap();

        let rows = |v: &[f32], r: usize| -> Vec<Vec<f64>> {
            (0..r).map(|i| v[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect()).collect()
        };
        let c64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let (want_v, want_c) = ema_reference(&rows(&vectors, k), &c64, lambda as f64, &rows(&reprs, n), &z);
        for j in 0..k {
            worst = worst.max((book.counts[j] as f64 - want_c[j]).abs());
            for c in 0..d {
                worst = worst.max((book.vectors.get(j, c) as f64 - want_v[j][c]).abs());
            }
        }
    }

    // Hand cases: one assignment into a unit-count zero code, and an empty batch.
    let mut one = Codebook::from_parts(Mat::from_vec(2, 2, vec![0.0, 0.0, 5.0, 5.0]), vec![1.0, 1.0], 0.999).unwrap();
    ema_update(&mut one, &Mat::from_vec(1, 2, vec![1.0, 1.0]), &LatentSeq(vec![0])).unwrap();
    let single_ok = (one.counts[0] - 1.0).abs() < 1e-6
        && (one.vectors.get(0, 0) - 0.001).abs() < 1e-6
        && (one.vectors.get(0, 1) - 0.001).abs() < 1e-6;
    let mut empty = Codebook::from_parts(Mat::from_vec(2, 1, vec![2.0, -4.0]), vec![3.0, 0.5], 0.999).unwrap();
    ema_update(&mut empty, &Mat::zeros(0, 1), &LatentSeq(vec![])).unwrap();
    let empty_ok = (empty.counts[0] - 0.999 * 3.0).abs() < 1e-6
        && (empty.counts[1] - 0.999 * 0.5).abs() < 1e-6
        && (empty.vectors.get(0, 0) - 0.999 * 2.0).abs() < 1e-6
        && (empty.vectors.get(1, 0) + 0.999 * 4.0).abs() < 1e-6;

    verdict(
        worst < 1e-6 && single_ok && empty_ok,
        format!(
            "1000 random batches, max abs deviation {worst:.2e} (limit 1e-6); single-assignment case {}, empty batch {}",
            if single_ok { "ok" } else { "WRONG" },
            if empty_ok { "ok" } else { "WRONG" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Gradient check

fn tiny_corpus(seed: u64, size: usize) -> SyntheticCorpus {
    gen_synthetic_multimodal(&SyntheticSpec {
        num_symbols: 6,
        sentence_len: (2, 5),
        size,
        test_size: 10,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn mask_of(bits: &[bool]) -> GlanceOutcome {
    GlanceOutcome {
        mask: bits.to_vec(),
        n: bits.iter().filter(|&&b| b).count(),
        tau: 0.5,
    }
}

fn criterion_3() -> Verdict {
    let corpus = tiny_corpus(31, 20);
    let config = ModelConfig {
        d_model: 16,
        d_hidden: 24,
        n_head: 2,
        enc_layers: 2,
        lp_layers: 2,
        dec_layers: 2,
        dropout: 0.0,
        k: 6,
        mode: Mode::LatentGlat,
        src_vocab: corpus.train.src_vocab.len(),
        tgt_vocab: corpus.train.tgt_vocab.len(),
        ..ModelConfig::default()
    };
    let mut model: Model<f64> = Model::<f32>::new(config, &mut keyed_rng(3, 3)).unwrap().cast();
    let pairs: Vec<(&[u32], &[u32])> = corpus.train.pairs[..3]
        .iter()
        .map(|(x, y)| (x.as_slice(), y.as_slice()))
        .collect();
    let batch = Batch::from_pairs(vec![0, 1, 2], &pairs);

    // A fixed plan that exercises every input path: code vectors in the latent predictor,
    // gated fusion and glanced tokens in the decoder, and positions where both overlap.
    let mut rng = keyed_rng(3, 4);
    let mut plan = GlancePlan::default();
    for (_, y) in &pairs {
        let m = y.len();
        plan.latents.push(LatentSeq((0..m).map(|_| rng.random_range(0..6)).collect()));
        let lat: Vec<bool> = (0..m).map(|t| t % 2 == 0).collect();
        let tok: Vec<bool> = (0..m).map(|t| t % 3 == 0).collect();
        plan.latent_masks.push(mask_of(&lat));
        plan.token_masks.push(mask_of(&tok));
    }
    let alpha = 0.1;
    let loss = |model: &Model<f64>| -> f64 {
        let mut g = Graph::new(&model.params);
        let mut off = Dropout::off();
        let prep = prepare(model, &mut g, &mut off, &batch).unwrap();
        let nodes = loss_graph(model, &mut g, &mut off, &batch, &prep, &plan, alpha).unwrap();
        g.scalar(nodes.total)
    };
    let grads = {
        let mut g = Graph::new(&model.params);
        let mut off = Dropout::off();
        let prep = prepare(&model, &mut g, &mut off, &batch).unwrap();
        let nodes = loss_graph(&model, &mut g, &mut off, &batch, &prep, &plan, alpha).unwrap();
        g.backward(nodes.total)
    };

    let eps = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut missing = Vec::new();
    for p in 0..model.params.len() {
        let name = model.params.name(p).to_string();
        let Some(analytic) = grads.get(p).cloned() else {
            missing.push(name);
            continue;
        };
        let size = analytic.data.len();
        // The largest-magnitude entries plus a few random ones.
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| analytic.data[b].abs().total_cmp(&analytic.data[a].abs()));
        let mut picks: Vec<usize> = order.into_iter().take(3).collect();
        for _ in 0..5 {
            picks.push(rng.random_range(0..size));
        }
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let orig = model.params.get(p).data[i];
            model.params.get_mut(p).data[i] = orig + eps;
            let plus = loss(&model);
            model.params.get_mut(p).data[i] = orig - eps;
            let minus = loss(&model);
            model.params.get_mut(p).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data[i];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let scale = norm_a.sqrt().max(norm_n.sqrt());
        // Central differences carry ~1e-10 of rounding noise; tensors whose true gradient
        // is zero (key biases under softmax shift invariance) are compared on that floor.
        let rel = diff.sqrt() / scale.max(1e-6);
        if rel > worst.0 {
            worst = (rel, name);
        }
        checked += 1;
    }
    let covered = ["fuse.w", "fuse.b", "lp.out_w", "len.w", "tgt_emb", "dec.out_w"]
        .iter()
        .all(|n| grads.get(model.params.id(n).unwrap()).is_some_and(|g| g.data.iter().any(|&v| v != 0.0)));
    verdict(
        worst.0 < 1e-3 && missing.is_empty() && covered,
        format!(
            "{checked} parameter tensors (f64, d_model 16, 2 layers), worst relative error {:.2e} in {} (limit 1e-3); \
             tensors without gradient: {}; fusion/latent/length/token paths reached: {covered}",
            worst.0,
            if worst.1.is_empty() { "-" } else { &worst.1 },
            if missing.is_empty() { "none".to_string() } else { missing.join(", ") }
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Glancing contracts

fn criterion_4() -> Verdict {
    // τ as an exact fraction so the oracle is integer arithmetic: round_half_up(p/q · h).
    let taus: [(f64, u64, u64); 4] = [(0.0, 0, 1), (0.3, 3, 10), (0.5, 1, 2), (1.0, 1, 1)];
    let mut rng = keyed_rng(104, 1);
    let mut grid_errors = Vec::new();
    for &(tau, p, q) in &taus {
        for h in 0..=10usize {
            let reference: Vec<u32> = (0..10).collect();
            let prediction: Vec<u32> = (0..10).map(|i| if (i as usize) < h { 99 } else { i }).collect();
            let want = ((2 * p * h as u64 + q) / (2 * q)) as usize;
            let got = sample_observed(&reference, &prediction, tau, &mut rng).unwrap();
            if got.n != want || got.mask.iter().filter(|&&b| b).count() != want {
                grid_errors.push(format!("τ={tau} h={h}: {} vs {want}", got.n));
            }
        }
    }

    let draws = 100_000;
    let m = 10;
    let reference: Vec<u32> = (0..m as u32).collect();
    let prediction: Vec<u32> = (0..m as u32).map(|i| if i % 3 == 0 { 99 } else { i }).collect();
    let mut hits = vec![0u64; m];
    let mut observed = 0u64;
    for _ in 0..draws {
        let g = sample_observed(&reference, &prediction, 0.5, &mut rng).unwrap();
        for (t, &b) in g.mask.iter().enumerate() {
            if b {
                hits[t] += 1;
                observed += 1;
            }
        }
    }
    let expected = observed as f64 / m as f64;
    let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new((m - 1) as f64).unwrap().cdf(chi2);

    let cfg = TrainConfig::default();
    let start = cfg.tau(0);
    let end = cfg.tau(cfg.total_steps);
    let schedule_ok = start == 0.5 && end == 0.3;
    verdict(
        grid_errors.is_empty() && p_value > 0.01 && schedule_ok,
        format!(
            "N grid 4×11 {}; mask uniformity χ²={chi2:.2} (9 dof) p={p_value:.3} over {draws} draws (limit p>0.01); \
             ratio schedule {start} → {end}",
            if grid_errors.is_empty() { "exact".to_string() } else { grid_errors.join("; ") }
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Inference contracts

fn tiny_model(corpus: &SyntheticCorpus, mode: Mode, seed: u64) -> Model<f32> {
    let config = ModelConfig {
        d_model: 16,
        d_hidden: 32,
        n_head: 2,
        enc_layers: 1,
        lp_layers: 1,
        dec_layers: 1,
        k: 8,
        mode,
        src_vocab: corpus.train.src_vocab.len(),
        tgt_vocab: corpus.train.tgt_vocab.len(),
        ..ModelConfig::default()
    };
    Model::new(config, &mut keyed_rng(seed, 5)).unwrap()
}

fn criterion_5() -> Verdict {
    let mut problems = Vec::new();
    for m in 1..=30usize {
        let want: Vec<usize> = (m as i64 - 3..=m as i64 + 2).filter(|&l| l >= 1).map(|l| l as usize).collect();
        if length_candidates(m, 6) != want {
            problems.push(format!("candidates({m})"));
        }
    }
    if length_candidates(1, 6) != vec![1, 2, 3] {
        problems.push("candidates(1)".into());
    }

    let cand = |m: usize, logprob: f64| Candidate {
        m,
        z_hat: None,
        y_hat: vec![4; m],
        logprob,
        score: rerank_score(logprob, m, 1.1),
    };
    let pair = [cand(4, -2.0), cand(5, -2.2)];
    let (s4, s5) = (pair[0].score, pair[1].score);
    let rerank_ok = (s4 + 1.6188).abs() <= 1e-4 && (s5 + 1.7235).abs() <= 1e-4 && select_best(&pair) == Some(0);
    if !rerank_ok {
        problems.push(format!("rerank {s4} / {s5}"));
    }

    let corpus = tiny_corpus(55, 30);
    let lglat = tiny_model(&corpus, Mode::LatentGlat, 1);
    let at = tiny_model(&corpus, Mode::At, 1);
    let srcs: Vec<&[u32]> = corpus.test.pairs.iter().map(|p| p.0.as_slice()).collect();
    let decoded = decode_parallel(&lglat, &srcs, 1.1, 6).unwrap();
    let max_parallel = decoded.iter().map(|d| d.passes.total()).max().unwrap();
    let one_pass = decoded
        .iter()
        .all(|d| d.passes.decoder == d.candidates.len() && d.passes.latent == d.candidates.len());
    let mut at_passes = Vec::new();
    for s in &srcs {
        let (y, passes) = decode_at(&at, s).unwrap();
        let ended = y.len() + 1 < at.config.max_len;
        if passes != y.len() + usize::from(ended) {
            problems.push(format!("AT passes {passes} for {} tokens", y.len()));
        }
        at_passes.push(passes);
    }
    let mean_at = at_passes.iter().sum::<usize>() as f64 / at_passes.len() as f64;
    if max_parallel > 12 || !one_pass {
        problems.push(format!("parallel passes up to {max_parallel}"));
    }
    verdict(
        problems.is_empty(),
        format!(
            "candidates [m−3..m+2] clipped for m=1..30; rerank −2.0/4 → {s4:.5} (want −1.6188), −2.2/5 → {s5:.5} (want −1.7235), picks m={}; \
             latent-GLAT ≤ {max_parallel} passes/sentence (1 latent + 1 decoder per candidate) vs AT {mean_at:.1} \
             (one per emitted token){}",
            pair[select_best(&pair).unwrap()].m,
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 6 and 10. Behavioral experiment on the two-mode synthetic corpus

/// Hyperparameters shared by every model of the experiment; only mode and seed vary.
struct ExperimentConfig {
    d_model: usize,
    layers: usize,
    n_head: usize,
    dropout: f64,
    k: usize,
    batch_tokens: usize,
    steps: u64,
    lr_start: f64,
}

const EXPERIMENT: ExperimentConfig = ExperimentConfig {
    d_model: 64,
    layers: 3,
    n_head: 2,
    dropout: 0.1,
    k: 8,
    batch_tokens: 512,
    steps: 8000,
    lr_start: 1e-3,
};
const SEEDS: [u64; 3] = [1, 2, 3];

struct RunResult {
    bleu: f64,
    mode_consistency: f64,
    secs: f64,
    model: Model<f32>,
}

fn experiment_corpus() -> SyntheticCorpus {
    gen_synthetic_multimodal(&SyntheticSpec {
        num_symbols: 40,
        modes: 2,
        sentence_len: (4, 12),
        size: 10_000,
        test_size: 1_000,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn train_and_score(corpus: &SyntheticCorpus, mode: Mode, seed: u64, tau_end: f64) -> RunResult {
    let t0 = Instant::now();
    let e = &EXPERIMENT;
    let mc = ModelConfig {
        d_model: e.d_model,
        d_hidden: 2 * e.d_model,
        n_head: e.n_head,
        enc_layers: e.layers,
        lp_layers: e.layers,
        dec_layers: e.layers,
        dropout: e.dropout,
        k: e.k,
        mode,
        src_vocab: corpus.train.src_vocab.len(),
        tgt_vocab: corpus.train.tgt_vocab.len(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        mode,
        total_steps: e.steps,
        batch_tokens: e.batch_tokens,
        lr_start: e.lr_start,
        tau_end,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(mc, tc).unwrap();
    trainer.run(&corpus.train, |_, _| Ok(())).unwrap();
    let srcs: Vec<&[u32]> = corpus.test.pairs.iter().map(|p| p.0.as_slice()).collect();
    let hyps = translate(&trainer.model, &srcs, 1.1, 6).unwrap();
    let v = &corpus.test.tgt_vocab;
    let words = |ids: &[u32]| ids.iter().map(|&t| v.token(t).to_string()).collect::<Vec<_>>();
    let hyps: Vec<Vec<String>> = hyps.iter().map(|h| words(h)).collect();
    let refs: Vec<Vec<String>> = corpus.test.pairs.iter().map(|p| words(&p.1)).collect();
    let report = evaluate(&hyps, &refs, Some(&corpus.map)).unwrap();
    RunResult {
        bleu: report.bleu,
        mode_consistency: report.mode_consistency.unwrap(),
        secs: t0.elapsed().as_secs_f64(),
        model: trainer.model,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Default)]
struct Shared {
    corpus: Option<SyntheticCorpus>,
    nat: Vec<RunResult>,
    glat: Vec<RunResult>,
    lglat: Vec<RunResult>,
}

impl Shared {
    fn corpus(&mut self) -> &SyntheticCorpus {
        self.corpus.get_or_insert_with(experiment_corpus)
    }

    fn runs(&mut self, mode: Mode) -> &Vec<RunResult> {
        let done = match mode {
            Mode::Nat => !self.nat.is_empty(),
            Mode::Glat => !self.glat.is_empty(),
            _ => !self.lglat.is_empty(),
        };
        if !done {
            let corpus = self.corpus().clone();
            let runs: Vec<RunResult> = SEEDS
                .iter()
                .map(|&s| {
                    let r = train_and_score(&corpus, mode, s, 0.3);
                    println!(
                        "    {mode:<12} seed {s}: BLEU {:6.2}  mode consistency {:.3}  ({:.0} s)",
                        r.bleu, r.mode_consistency, r.secs
                    );
                    r
                })
                .collect();
            match mode {
                Mode::Nat => self.nat = runs,
                Mode::Glat => self.glat = runs,
                _ => self.lglat = runs,
            }
        }
        match mode {
            Mode::Nat => &self.nat,
            Mode::Glat => &self.glat,
            _ => &self.lglat,
        }
    }
}

fn criterion_6(shared: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let nat: Vec<(f64, f64)> = shared.runs(Mode::Nat).iter().map(|r| (r.mode_consistency, r.bleu)).collect();
    let glat: Vec<(f64, f64)> = shared.runs(Mode::Glat).iter().map(|r| (r.mode_consistency, r.bleu)).collect();
    let lglat: Vec<(f64, f64)> = shared.runs(Mode::LatentGlat).iter().map(|r| (r.mode_consistency, r.bleu)).collect();
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let mc = |v: &[(f64, f64)]| mean(v.iter().map(|r| r.0));
    let b = |v: &[(f64, f64)]| mean(v.iter().map(|r| r.1));
    let ordered = (0..SEEDS.len())
        .filter(|&i| nat[i].1 < glat[i].1 && glat[i].1 < lglat[i].1)
        .count();
    let margin = mc(&lglat) - mc(&nat);
    let pass = margin >= 0.15 && mc(&lglat) > mc(&glat) && ordered >= 2;
    verdict(
        pass,
        format!(
            "mean mode consistency NAT {:.3} / GLAT {:.3} / latent-GLAT {:.3} (latent-GLAT − NAT = {margin:+.3}, need ≥ 0.15; \
             need latent-GLAT > GLAT); mean BLEU {:.2} / {:.2} / {:.2}; BLEU order NAT<GLAT<latent-GLAT in {ordered}/3 seeds \
             (need ≥ 2); {minutes:.1} min",
            mc(&nat),
            mc(&glat),
            mc(&lglat),
            b(&nat),
            b(&glat),
            b(&lglat)
        ),
    )
}

fn criterion_10(shared: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let nat = mean(shared.runs(Mode::Nat).iter().map(|r| r.mode_consistency));
    let glat = mean(shared.runs(Mode::Glat).iter().map(|r| r.mode_consistency));
    let corpus = shared.corpus().clone();
    let to_zero: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let r = train_and_score(&corpus, Mode::Glat, s, 0.0);
            println!(
                "    glat τ→0     seed {s}: BLEU {:6.2}  mode consistency {:.3}  ({:.0} s)",
                r.bleu, r.mode_consistency, r.secs
            );
            r.mode_consistency
        })
        .collect();
    let annealed = mean(to_zero.into_iter());
    let gap = (annealed - nat).abs();
    let lead = glat - nat;
    verdict(
        gap <= 0.05 && lead >= 0.10,
        format!(
            "mean mode consistency: GLAT τ 0.5→0 {annealed:.3} vs NAT {nat:.3} (|Δ| = {gap:.3}, need ≤ 0.05); \
             GLAT τ 0.5→0.3 {glat:.3} (lead over NAT {lead:+.3}, need ≥ 0.10); {:.1} min",
            t0.elapsed().as_secs_f64() / 60.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Complexity metrics

fn criterion_7(shared: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let words: Vec<String> = (0..30).map(|i| format!("x{i}")).collect();
    let targets: Vec<String> = (0..30).map(|i| format!("y{i}")).collect();
    let mut rng = keyed_rng(107, 1);
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..2000)
        .map(|_| {
            let n = rng.random_range(3..=10);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..30) + 4).collect();
            (ids.clone(), ids)
        })
        .collect();
    let one_to_one = ParallelCorpus {
        name: "substitution".into(),
        pairs,
        src_vocab: Vocab::from_words(words),
        tgt_vocab: Vocab::from_words(targets),
    };
    let det = analyze(&one_to_one, 5, 4.0).unwrap();

    let two_mode = gen_synthetic_multimodal(&SyntheticSpec {
        realization_len: (1, 1),
        size: 10_000,
        test_size: 0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let eq = analyze(&two_mode.train, 5, 4.0).unwrap();
    let analysis_secs = t0.elapsed().as_secs_f64();

    // Latent codes of a latent-GLAT model trained in the behavioral experiment.
    let corpus = shared.corpus().train.clone();
    let model = &shared.runs(Mode::LatentGlat)[0].model;
    let t1 = Instant::now();
    let raw = analyze(&corpus, 5, 4.0).unwrap();
    let z = analyze(&discretize_corpus(&corpus, model).unwrap(), 5, 4.0).unwrap();
    let secs = analysis_secs + t1.elapsed().as_secs_f64();

    let ln2 = std::f64::consts::LN_2;
    let pass = det.c_tok.abs() <= 1e-3 && (eq.c_tok - ln2).abs() <= 0.02 && z.c_tok < raw.c_tok && secs < 300.0;
    verdict(
        pass,
        format!(
            "1:1 corpus C_TOK {:.2e} (C_SEN {:.2e}); two-mode corpus C_TOK {:.4} vs ln 2 = {ln2:.4} (±0.02); \
             trained model: Inputs↔z C_TOK {:.3} < Inputs↔raw C_TOK {:.3} ({}); analysis {secs:.1} s (limit 300 s)",
            det.c_tok,
            det.c_sen,
            eq.c_tok,
            z.c_tok,
            raw.c_tok,
            if z.c_tok < raw.c_tok { "holds" } else { "violated" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. BLEU golden values

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn criterion_8() -> Verdict {
    let h = vec![toks("a b c d")];
    let r = vec![toks("a b c d e")];
    let round2 = |x: f64| (x * 100.0).round() / 100.0;
    let golden = round2(bleu(&h, &r, 4).unwrap());
    let identity = round2(bleu(&r, &r, 4).unwrap());
    let bp = (1.0f64 - 5.0 / 4.0).exp();
    let b1 = bleu(&h, &r, 1).unwrap();
    let b2 = bleu(&h, &r, 2).unwrap();

    // A fixture with imperfect precisions: unigram 4/5, bigram 2/4, reference longer.
    let h2 = vec![toks("a b x d e")];
    let r2 = vec![toks("a b c d e f")];
    let bp2 = (1.0f64 - 6.0 / 5.0).exp();
    let want1 = 100.0 * bp2 * 0.8;
    let want2 = 100.0 * bp2 * (0.8f64 * 0.5).sqrt();
    let got1 = bleu(&h2, &r2, 1).unwrap();
    let got2 = bleu(&h2, &r2, 2).unwrap();
    let pass = golden == 77.88
        && identity == 100.0
        && (b1 - 100.0 * bp).abs() < 1e-9
        && (b2 - 100.0 * bp).abs() < 1e-9
        && (got1 - want1).abs() < 1e-9
        && (got2 - want2).abs() < 1e-9;
    verdict(
        pass,
        format!(
            "\"a b c d\" vs \"a b c d e\" → {golden:.2} (want 77.88); identity → {identity:.2}; BLEU-1 {b1:.2}, BLEU-2 {b2:.2} \
             (= BP·100); partial-match fixture BLEU-1 {got1:.4} (want {want1:.4}), BLEU-2 {got2:.4} (want {want2:.4})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

fn small_trainer(corpus: &SyntheticCorpus, mode: Mode, seed: u64) -> Trainer {
    let mc = ModelConfig {
        d_model: 16,
        d_hidden: 32,
        n_head: 2,
        enc_layers: 1,
        lp_layers: 1,
        dec_layers: 1,
        dropout: 0.1,
        k: 8,
        mode,
        src_vocab: corpus.train.src_vocab.len(),
        tgt_vocab: corpus.train.tgt_vocab.len(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        mode,
        total_steps: 60,
        batch_tokens: 96,
        reseed_every: 4,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(mc, tc).unwrap()
}

fn criterion_9() -> Verdict {
    let corpus = tiny_corpus(9, 200);
    let mut worst = 0.0f64;
    for mode in [Mode::LatentGlat, Mode::Glat, Mode::Nat, Mode::At] {
        let mut a = small_trainer(&corpus, mode, 4);
        for _ in 0..5 {
            let b = a.next_batch(&corpus.train).unwrap();
            a.train_step(&b).unwrap();
        }
        let vocabs = (&corpus.train.src_vocab, &corpus.train.tgt_vocab);
        let mut resumed = from_bytes(&to_bytes(&a, Some(vocabs)).unwrap()).unwrap().trainer;
        for _ in 0..10 {
            let la = {
                let b = a.next_batch(&corpus.train).unwrap();
                a.train_step(&b).unwrap()
            };
            let lb = {
                let b = resumed.next_batch(&corpus.train).unwrap();
                resumed.train_step(&b).unwrap()
            };
            worst = worst.max((la.loss_total - lb.loss_total).abs());
        }
    }

    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let spec = SyntheticSpec {
        size: 500,
        test_size: 50,
        seed: 11,
        ..SyntheticSpec::default()
    };
    for d in &dirs {
        gen_synthetic_multimodal(&spec).unwrap().write(d.path()).unwrap();
    }
    let synth_same = ["train.src", "train.tgt", "test.src", "test.tgt", "synth.json"].iter().all(|f| {
        std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap()
    });

    let log = || {
        let mut t = small_trainer(&corpus, Mode::LatentGlat, 21);
        let mut log = MetricsLog::new(Vec::new());
        t.run(&corpus.train, |_, l| log.record(l)).unwrap();
        log.into_inner()
    };
    let (l1, l2) = (log(), log());
    let logs_same = l1 == l2 && !l1.is_empty();
    verdict(
        worst <= 1e-6 && synth_same && logs_same,
        format!(
            "resume after 5 steps, max |Δloss| over next 10 steps {worst:.1e} (limit 1e-6, all four modes); \
             synth rerun byte-identical: {synth_same}; 60-step metrics log rerun byte-identical: {logs_same} ({} bytes)",
            l1.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let names = [
        "quantizer oracle",
        "EMA oracle",
        "gradient check",
        "glancing contracts",
        "inference contracts",
        "multi-modality experiment",
        "complexity metrics",
        "BLEU golden values",
        "reproducibility",
        "glancing ratio annealed to zero",
    ];
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    panic::set_hook(Box::new(|info| eprintln!("    panic: {info}")));
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n:2} [SKIP] {name}");
            continue;
        }
        let t0 = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut shared),
            7 => criterion_7(&mut shared),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(&mut shared),
        }));
        let v = result.unwrap_or_else(|_| verdict(false, "panicked"));
        println!(
            "criterion {n:2} [{}] {name}: {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
}
