//! Trains one mode on the synthetic two-mode corpus and reports BLEU and mode consistency.
//!
//! `cargo run --release --example modes -- <mode> <seed> <steps> [d_model] [layers] [batch_tokens] [K] [dropout]`

use std::time::Instant;

use latent_glat::data::{gen_synthetic_multimodal, SyntheticSpec};
use latent_glat::eval::evaluate;
use latent_glat::inference::translate;
use latent_glat::model::{Mode, ModelConfig};
use latent_glat::training::{TrainConfig, Trainer};

fn main() -> latent_glat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let mode: Mode = arg(0, "latent-glat").parse()?;
    let seed: u64 = arg(1, "1").parse().unwrap();
    let steps: u64 = arg(2, "1000").parse().unwrap();
    let d: usize = arg(3, "32").parse().unwrap();
    let layers: usize = arg(4, "2").parse().unwrap();
    let tokens: usize = arg(5, "256").parse().unwrap();
    let k: usize = arg(6, "64").parse().unwrap();
    let dropout: f64 = arg(7, "0").parse().unwrap();

    let corpus = gen_synthetic_multimodal(&SyntheticSpec::default())?;
    let mc = ModelConfig {
        d_model: d,
        d_hidden: 2 * d,
        n_head: 2,
        enc_layers: layers,
        lp_layers: layers,
        dec_layers: layers,
        dropout,
        k,
        mode,
        src_vocab: corpus.train.src_vocab.len(),
        tgt_vocab: corpus.train.tgt_vocab.len(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        mode,
        total_steps: steps,
        batch_tokens: tokens,
        seed,
        lr_start: 1e-3,
        decoder_latents: match std::env::var("DECODER_LATENTS").as_deref() {
            Ok("uniform") => latent_glat::training::DecoderLatents::Uniform,
            _ => latent_glat::training::DecoderLatents::Shared,
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(mc, tc)?;
    let t0 = Instant::now();
    trainer.run(&corpus.train, |t, l| {
        if t.step % 250 == 0 {
            eprintln!(
                "step {:5} total {:.3} wp {:.3} lp {:.3} len {:.3} ({:.1} ms/step)",
                t.step,
                l.loss_total,
                l.loss_wp,
                l.loss_lp,
                l.loss_len,
                t0.elapsed().as_secs_f64() * 1e3 / t.step as f64
            );
        }
        Ok(())
    })?;
    let train_s = t0.elapsed().as_secs_f64();
    if let Ok(path) = std::env::var("SAVE_CHECKPOINT") {
        latent_glat::checkpoint::save_checkpoint(std::path::Path::new(&path), &trainer, None)?;
    }
    let srcs: Vec<&[u32]> = corpus.test.pairs.iter().map(|p| p.0.as_slice()).collect();
    let t1 = Instant::now();
    let hyps = translate(&trainer.model, &srcs, 1.1, 6)?;
    let v = &corpus.test.tgt_vocab;
    let words = |ids: &[u32]| ids.iter().map(|&t| v.token(t).to_string()).collect::<Vec<_>>();
    let hyps: Vec<Vec<String>> = hyps.iter().map(|h| words(h)).collect();
    let refs: Vec<Vec<String>> = corpus.test.pairs.iter().map(|p| words(&p.1)).collect();
    let rep = evaluate(&hyps, &refs, Some(&corpus.map))?;
    println!(
        "{mode} seed={seed} steps={steps} bleu={:.2} mc={:.3} train={train_s:.0}s decode={:.1}s",
        rep.bleu,
        rep.mode_consistency.unwrap(),
        t1.elapsed().as_secs_f64()
    );
    if let Some(book) = &trainer.model.codebook {
        let live = book.counts.iter().filter(|&&c| c > 0.1).count();
        let mut counts = book.counts.clone();
        counts.sort_by(|a, b| b.total_cmp(a));
        println!("  live codes {live}/{}; top counts {:?}", book.k(), &counts[..counts.len().min(8)]);
        // How well codes separate the two modes, weighted by training-token frequency.
        let index = corpus.map.token_index();
        let emb = trainer.model.tgt_embedding();
        let z = latent_glat::quantizer::assign(emb, book)?;
        let mut hist = vec![[0usize; 2]; book.k()];
        for (_, y) in &corpus.train.pairs {
            for &t in y {
                if let Some(&(_, mode, _)) = index.get(v.token(t)) {
                    hist[z.0[t as usize]][mode] += 1;
                }
            }
        }
        let total: usize = hist.iter().map(|h| h[0] + h[1]).sum();
        let pure: usize = hist.iter().map(|h| h[0].max(h[1])).sum();
        println!("  code/mode purity {:.3}", pure as f64 / total as f64);
    }
    for h in hyps.iter().take(3) {
        println!("  {}", h.join(" "));
    }
    Ok(())
}
