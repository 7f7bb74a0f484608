//! Decoder diagnostics at the reference length: plain inputs vs. predicted vs. oracle latents.

use latent_glat::autograd::Graph;
use latent_glat::data::{gen_synthetic_multimodal, SyntheticSpec};
use latent_glat::model::{softcopy, Mode, ModelConfig, Slot};
use latent_glat::quantizer::assign;
use latent_glat::tensor::Mat;
use latent_glat::training::{TrainConfig, Trainer};

fn main() -> latent_glat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(2000, |s| s.parse().unwrap());
    let d: usize = args.get(1).map_or(64, |s| s.parse().unwrap());
    let corpus = gen_synthetic_multimodal(&SyntheticSpec::default())?;
    let mc = ModelConfig {
        d_model: d,
        d_hidden: 2 * d,
        n_head: 2,
        enc_layers: 3,
        lp_layers: 3,
        dec_layers: 3,
        dropout: 0.0,
        mode: Mode::LatentGlat,
        src_vocab: corpus.train.src_vocab.len(),
        tgt_vocab: corpus.train.tgt_vocab.len(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        total_steps: steps,
        batch_tokens: 512,
        lr_start: 1e-3,
        ..TrainConfig::default()
    };
    let t = match std::env::var("LOAD_CHECKPOINT") {
        Ok(path) => latent_glat::checkpoint::load_checkpoint(std::path::Path::new(&path))?.trainer,
        Err(_) => {
            let mut t = Trainer::new(mc, tc)?;
            t.run(&corpus.train, |_, _| Ok(()))?;
            t
        }
    };
    let m = &t.model;
    let book = m.codebook.as_ref().unwrap();
    let (mut acc_plain, mut acc_pred, mut acc_oracle, mut acc_z, mut n) = (0, 0, 0, 0, 0);
    let (mut sent_plain, mut sent_pred, mut sent_oracle) = (0, 0, 0);
    // Majority mode of each code over the target vocabulary.
    let index = corpus.map.token_index();
    let v = &corpus.train.tgt_vocab;
    let zv = assign(m.tgt_embedding(), book)?;
    let mut hist = vec![[0usize; 2]; book.k()];
    for t in 0..v.len() {
        if let Some(&(_, mode, _)) = index.get(v.token(t as u32)) {
            hist[zv.0[t]][mode] += 1;
        }
    }
    let code_mode: Vec<usize> = hist.iter().map(|h| (h[1] > h[0]) as usize).collect();
    let (mut lp_consistent, mut sents) = (0, 0);
    for (x, y) in corpus.test.pairs.iter().take(300) {
        let enc = m.encode(&[x])?;
        let h = softcopy(&enc.sentence(0), y.len());
        let emb = m.tgt_embedding();
        let reprs = Mat::from_rows(&y.iter().map(|&t| emb.row(t as usize).to_vec()).collect::<Vec<_>>());
        let z = assign(&reprs, book)?;
        let zl = m.latent_logits(std::slice::from_ref(&h), &enc)?;
        let zh: Vec<usize> = (0..y.len()).map(|r| zl[0].argmax_row(r)).collect();
        sents += 1;
        lp_consistent += zh.iter().all(|&k| code_mode[k] == code_mode[zh[0]]) as usize;
        let fused = |codes: &[usize]| {
            let mut g = Graph::new(&m.params);
            let hn = g.input(h.clone());
            let slots: Vec<Slot> = codes.iter().map(|&k| Slot::Latent(k)).collect();
            let node = m.inputs_graph(&mut g, hn, &slots).unwrap();
            g.value(node).clone()
        };
        let outs = m.decode_tokens(&[h.clone(), fused(&zh), fused(&z.0)], &m.encode(&[x, x, x])?)?;
        let acc = |o: &Mat<f32>| (0..y.len()).filter(|&r| o.argmax_row(r) == y[r] as usize).count();
        let (a, b, c) = (acc(&outs[0]), acc(&outs[1]), acc(&outs[2]));
        acc_plain += a;
        acc_pred += b;
        acc_oracle += c;
        sent_plain += (a == y.len()) as usize;
        sent_pred += (b == y.len()) as usize;
        sent_oracle += (c == y.len()) as usize;
        acc_z += zh.iter().zip(&z.0).filter(|(a, b)| a == b).count();
        n += y.len();
    }
    let f = |v: usize| v as f64 / n as f64;
    println!("predicted-latent mode consistency {:.3}", lp_consistent as f64 / sents as f64);
    println!(
        "token acc: plain {:.3} pred-z {:.3} oracle-z {:.3}; z acc {:.3}; exact sent plain {} pred {} oracle {}",
        f(acc_plain), f(acc_pred), f(acc_oracle), f(acc_z), sent_plain, sent_pred, sent_oracle
    );
    Ok(())
}
