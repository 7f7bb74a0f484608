//! Network components: encoder, softcopy, length head, non-autoregressive latent
//! predictor, gated fusion, mixture decoder, and the causal decoder of the AT baseline.
//!
//! Everything is built on an [`autograd::Graph`], so the same code serves
//! training (f32), evaluation and 64-bit gradient checks.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnLayout, Graph, MixBlock, NodeId, ParamId, ParamStore, SeqLayout};
use crate::data::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};
use crate::quantizer::{Codebook, DEFAULT_DECAY, DEFAULT_K};
use crate::rng::Rng as ChaRng;
use crate::tensor::{softmax_in_place, Mat, Scalar};

/// Length offsets `m − n` are clipped to `[-MAX_OFFSET, MAX_OFFSET]`.
pub const MAX_OFFSET: i64 = 20;
pub const NUM_OFFSETS: usize = (2 * MAX_OFFSET + 1) as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    At,
    Nat,
    Glat,
    LatentGlat,
}

impl Mode {
    pub fn is_parallel(self) -> bool {
        self != Mode::At
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::At => "at",
            Mode::Nat => "nat",
            Mode::Glat => "glat",
            Mode::LatentGlat => "latent-glat",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "at" => Ok(Mode::At),
            "nat" => Ok(Mode::Nat),
            "glat" => Ok(Mode::Glat),
            "latent-glat" | "lglat" => Ok(Mode::LatentGlat),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_head: usize,
    pub enc_layers: usize,
    pub lp_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub codebook_decay: f32,
    pub max_len: usize,
    pub mode: Mode,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_hidden: 128,
            n_head: 4,
            enc_layers: 2,
            lp_layers: 4,
            dec_layers: 4,
            dropout: 0.1,
            k: DEFAULT_K,
            codebook_decay: DEFAULT_DECAY,
            max_len: DEFAULT_MAX_LEN,
            mode: Mode::LatentGlat,
            src_vocab: 0,
            tgt_vocab: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_hidden == 0 || self.n_head == 0 {
            return bad("d_model, d_hidden and n_head must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return bad(format!("d_model {} not divisible by n_head {}", self.d_model, self.n_head));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("enc_layers and dec_layers must be positive".into());
        }
        if self.mode == Mode::LatentGlat && (self.lp_layers == 0 || self.k < 2) {
            return bad("latent-glat needs lp_layers ≥ 1 and K ≥ 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 2 || self.src_vocab == 0 || self.tgt_vocab == 0 {
            return bad("max_len ≥ 2 and nonzero vocabulary sizes required".into());
        }
        Ok(())
    }

    /// Number of trainable scalars; mirrors the tensors registered by [`Model::new`].
    pub fn num_parameters(&self) -> usize {
        let d = self.d_model;
        let attn = 2 * d + 4 * (d * d + d);
        let ffn = 2 * d + d * self.d_hidden + self.d_hidden + self.d_hidden * d + d;
        let final_ln = 2 * d;
        let mut n = (self.src_vocab + self.tgt_vocab) * d;
        n += self.enc_layers * (attn + ffn) + final_ln;
        n += self.dec_layers * (2 * attn + ffn) + final_ln + d * self.tgt_vocab + self.tgt_vocab;
        if self.mode.is_parallel() {
            n += d * NUM_OFFSETS + NUM_OFFSETS;
        }
        if self.mode == Mode::LatentGlat {
            n += self.lp_layers * (2 * attn + ffn) + final_ln + d * self.k + self.k;
            n += 2 * d * d + d;
        }
        n
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    ln_g: ParamId,
    ln_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    ln_g: ParamId,
    ln_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    self_attn: AttnIds,
    cross: Option<AttnIds>,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct StackIds {
    blocks: Vec<BlockIds>,
    ln_g: ParamId,
    ln_b: ParamId,
    head: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct Ids {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc: StackIds,
    dec: StackIds,
    lp: Option<StackIds>,
    len_head: Option<(ParamId, ParamId)>,
    fuse: Option<(ParamId, ParamId)>,
}

struct Init<'r, R: Rng + ?Sized> {
    store: ParamStore<f64>,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn gaussian(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(self.rng)).collect();
        self.store.add(name, Mat::from_vec(rows, cols, data))
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.gaussian(name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt())
    }

    fn constant(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Mat::from_vec(1, cols, vec![v; cols]))
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIds {
        AttnIds {
            ln_g: self.constant(format!("{p}.ln_g"), d, 1.0),
            ln_b: self.constant(format!("{p}.ln_b"), d, 0.0),
            wq: self.weight(format!("{p}.wq"), d, d),
            bq: self.constant(format!("{p}.bq"), d, 0.0),
            wk: self.weight(format!("{p}.wk"), d, d),
            bk: self.constant(format!("{p}.bk"), d, 0.0),
            wv: self.weight(format!("{p}.wv"), d, d),
            bv: self.constant(format!("{p}.bv"), d, 0.0),
            wo: self.weight(format!("{p}.wo"), d, d),
            bo: self.constant(format!("{p}.bo"), d, 0.0),
        }
    }

    fn ffn(&mut self, p: &str, d: usize, h: usize) -> FfnIds {
        FfnIds {
            ln_g: self.constant(format!("{p}.ln_g"), d, 1.0),
            ln_b: self.constant(format!("{p}.ln_b"), d, 0.0),
            w1: self.weight(format!("{p}.w1"), d, h),
            b1: self.constant(format!("{p}.b1"), h, 0.0),
            w2: self.weight(format!("{p}.w2"), h, d),
            b2: self.constant(format!("{p}.b2"), d, 0.0),
        }
    }

    fn stack(&mut self, p: &str, cfg: &ModelConfig, layers: usize, cross: bool, out: Option<usize>) -> StackIds {
        let d = cfg.d_model;
        let blocks = (0..layers)
            .map(|i| BlockIds {
                self_attn: self.attn(&format!("{p}.{i}.self"), d),
                cross: cross.then(|| self.attn(&format!("{p}.{i}.cross"), d)),
                ffn: self.ffn(&format!("{p}.{i}.ffn"), d, cfg.d_hidden),
            })
            .collect();
        let ln_g = self.constant(format!("{p}.ln_g"), d, 1.0);
        let ln_b = self.constant(format!("{p}.ln_b"), d, 0.0);
        let head = out.map(|o| {
            (
                self.weight(format!("{p}.out_w"), d, o),
                self.constant(format!("{p}.out_b"), o, 0.0),
            )
        });
        StackIds {
            blocks,
            ln_g,
            ln_b,
            head,
        }
    }
}

/// Per-call dropout settings; `Dropout::off()` for evaluation.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaRng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: &'r mut ChaRng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    fn apply<F: Scalar>(&mut self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, rng),
            _ => x,
        }
    }
}

/// How one decoder-side input position is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// The softcopied vector `h_t`.
    Plain,
    /// `h_t` gated with the vector of this latent code.
    Latent(usize),
    /// The vector of this latent code, replacing `h_t`.
    Code(usize),
    /// The embedding of this target token (replaces the position entirely).
    Token(u32),
}

/// Encoder states of a batch, packed by sentence.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub node: NodeId,
    pub layout: SeqLayout,
}

/// Evaluated encoder states: `states` rows are packed per `layout`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<F> {
    pub states: Mat<F>,
    pub layout: SeqLayout,
}

impl<F: Scalar> EncoderOutput<F> {
    pub fn sentence(&self, i: usize) -> Mat<F> {
        self.states.slice_rows(self.layout.offsets[i], self.layout.lens[i])
    }
}

/// Softcopy weights for source length `n` and target length `m`, as `m × n` row-major.
/// Target `t` weighs source `s` (both 1-based) by `softmax_s(−(s − t·n/m)²)`.
pub fn softcopy_weights(n: usize, m: usize) -> Vec<f64> {
    let mut w = vec![0.0; m * n];
    for t in 1..=m {
        let centre = t as f64 * n as f64 / m as f64;
        let row = &mut w[(t - 1) * n..t * n];
        for (s, v) in row.iter_mut().enumerate() {
            let diff = (s + 1) as f64 - centre;
            *v = -diff * diff;
        }
        softmax_in_place(row);
    }
    w
}

/// Softcopy of one sentence's encoder states to `m` positions.
pub fn softcopy<F: Scalar>(e: &Mat<F>, m: usize) -> Mat<F> {
    let w = softcopy_weights(e.rows, m);
    let mut out = Mat::zeros(m, e.cols);
    for t in 0..m {
        for s in 0..e.rows {
            let a = F::of(w[t * e.rows + s]);
            for (o, &v) in out.row_mut(t).iter_mut().zip(e.row(s)) {
                *o += a * v;
            }
        }
    }
    out
}

/// Predicted target length from a length distribution over offsets.
pub fn length_from_offset_class(n: usize, class: usize) -> usize {
    (n as i64 + class as i64 - MAX_OFFSET).max(1) as usize
}

/// Offset class of a true length, clipped to the boundary classes.
pub fn offset_class(n: usize, m: usize) -> usize {
    ((m as i64 - n as i64).clamp(-MAX_OFFSET, MAX_OFFSET) + MAX_OFFSET) as usize
}

pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub codebook: Option<Codebook>,
    ids: Ids,
    positions: Mat<F>,
}

impl<F: Scalar> Clone for Model<F> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            codebook: self.codebook.clone(),
            ids: self.ids.clone(),
            positions: self.positions.clone(),
        }
    }
}

fn sinusoid_table(max_len: usize, d: usize) -> Mat<f64> {
    let mut m = Mat::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            m.data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters: Gaussian fan-in scaling for weights; embeddings `N(0, 1/d)`,
    /// multiplied by `√d` wherever they enter the network.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.d_model;
        let mut init = Init {
            store: ParamStore::new(),
            rng,
        };
        let src_emb = init.gaussian("src_emb".into(), cfg.src_vocab, d, (d as f64).powf(-0.5));
        let tgt_emb = init.gaussian("tgt_emb".into(), cfg.tgt_vocab, d, (d as f64).powf(-0.5));
        let enc = init.stack("enc", cfg, cfg.enc_layers, false, None);
        let dec = init.stack("dec", cfg, cfg.dec_layers, true, Some(cfg.tgt_vocab));
        let len_head = cfg.mode.is_parallel().then(|| {
            (
                init.weight("len.w".into(), d, NUM_OFFSETS),
                init.constant("len.b".into(), NUM_OFFSETS, 0.0),
            )
        });
        let (lp, fuse) = if cfg.mode == Mode::LatentGlat {
            let lp = init.stack("lp", cfg, cfg.lp_layers, true, Some(cfg.k));
            let fuse = (
                init.weight("fuse.w".into(), 2 * d, d),
                init.constant("fuse.b".into(), d, 0.0),
            );
            (Some(lp), Some(fuse))
        } else {
            (None, None)
        };
        let codebook = if cfg.mode == Mode::LatentGlat {
            Some(Codebook::new(cfg.k, d, cfg.codebook_decay, init.rng)?)
        } else {
            None
        };
        let params = init.store.cast();
        Ok(Model {
            positions: sinusoid_table(cfg.max_len.max(1) + 1, d).cast(),
            config,
            params,
            codebook,
            ids: Ids {
                src_emb,
                tgt_emb,
                enc,
                dec,
                lp,
                len_head,
                fuse,
            },
        })
    }

    /// The same network in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            codebook: self.codebook.clone(),
            ids: self.ids.clone(),
            positions: self.positions.cast(),
        }
    }

    pub fn tgt_embedding(&self) -> &Mat<F> {
        self.params.get(self.ids.tgt_emb)
    }

    fn check_ids(&self, seqs: &[&[u32]], vocab: usize, limit: usize) -> Result<()> {
        for s in seqs {
            if s.len() > limit {
                return Err(Error::TooLong {
                    len: s.len(),
                    max_len: limit,
                });
            }
            if s.is_empty() {
                return Err(Error::Empty("sequence"));
            }
            if let Some(&bad) = s.iter().find(|&&i| i as usize >= vocab) {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: bad as usize,
                    size: vocab,
                });
            }
        }
        Ok(())
    }

    fn position_rows(&self, g: &mut Graph<'_, F>, layout: &SeqLayout) -> NodeId {
        let d = self.config.d_model;
        let mut m = Mat::zeros(layout.total(), d);
        for i in 0..layout.num_seqs() {
            for (p, r) in layout.range(i).enumerate() {
                m.row_mut(r).copy_from_slice(self.positions.row(p.min(self.positions.rows - 1)));
            }
        }
        g.input(m)
    }

    fn attn_sublayer(
        &self,
        g: &mut Graph<'_, F>,
        drop: &mut Dropout<'_>,
        p: &AttnIds,
        x: NodeId,
        memory: Option<NodeId>,
        layout: &Rc<AttnLayout>,
    ) -> NodeId {
        let (lg, lb) = (g.param(p.ln_g), g.param(p.ln_b));
        let h = g.layer_norm(x, lg, lb);
        let kv_src = memory.unwrap_or(h);
        let (wq, bq) = (g.param(p.wq), g.param(p.bq));
        let (wk, bk) = (g.param(p.wk), g.param(p.bk));
        let (wv, bv) = (g.param(p.wv), g.param(p.bv));
        let q = g.linear(h, wq, Some(bq));
        let k = g.linear(kv_src, wk, Some(bk));
        let v = g.linear(kv_src, wv, Some(bv));
        let a = g.attention(q, k, v, self.config.n_head, layout.clone());
        let (wo, bo) = (g.param(p.wo), g.param(p.bo));
        let o = g.linear(a, wo, Some(bo));
        let o = drop.apply(g, o);
        g.add(x, o)
    }

    fn ffn_sublayer(&self, g: &mut Graph<'_, F>, drop: &mut Dropout<'_>, p: &FfnIds, x: NodeId) -> NodeId {
        let (lg, lb) = (g.param(p.ln_g), g.param(p.ln_b));
        let h = g.layer_norm(x, lg, lb);
        let (w1, b1) = (g.param(p.w1), g.param(p.b1));
        let h = g.linear(h, w1, Some(b1));
        let h = g.relu(h);
        let (w2, b2) = (g.param(p.w2), g.param(p.b2));
        let o = g.linear(h, w2, Some(b2));
        let o = drop.apply(g, o);
        g.add(x, o)
    }

    fn run_stack(
        &self,
        g: &mut Graph<'_, F>,
        drop: &mut Dropout<'_>,
        stack: &StackIds,
        mut x: NodeId,
        self_layout: &Rc<AttnLayout>,
        cross: Option<(NodeId, &Rc<AttnLayout>)>,
    ) -> NodeId {
        for b in &stack.blocks {
            x = self.attn_sublayer(g, drop, &b.self_attn, x, None, self_layout);
            if let (Some(p), Some((mem, layout))) = (&b.cross, cross) {
                x = self.attn_sublayer(g, drop, p, x, Some(mem), layout);
            }
            x = self.ffn_sublayer(g, drop, &b.ffn, x);
        }
        let (lg, lb) = (g.param(stack.ln_g), g.param(stack.ln_b));
        let x = g.layer_norm(x, lg, lb);
        match stack.head {
            Some((w, b)) => {
                let (w, b) = (g.param(w), g.param(b));
                g.linear(x, w, Some(b))
            }
            None => x,
        }
    }

    /// Encoder states for a batch of source sentences.
    pub fn encode_graph(&self, g: &mut Graph<'_, F>, drop: &mut Dropout<'_>, src: &[&[u32]]) -> Result<Encoded> {
        self.check_ids(src, self.config.src_vocab, self.config.max_len)?;
        let lens: Vec<usize> = src.iter().map(|s| s.len()).collect();
        let layout = SeqLayout::from_lens(&lens);
        let ids: Vec<usize> = src.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
        let table = g.param(self.ids.src_emb);
        let emb = g.gather_scaled(table, &ids, self.embed_scale());
        let pos = self.position_rows(g, &layout);
        let x = g.add(emb, pos);
        let x = drop.apply(g, x);
        let attn = Rc::new(AttnLayout {
            queries: layout.clone(),
            keys: layout.clone(),
            causal: false,
        });
        let node = self.run_stack(g, drop, &self.ids.enc, x, &attn, None);
        Ok(Encoded { node, layout })
    }

    /// Softcopied decoder inputs `H` for the given target lengths.
    pub fn softcopy_graph(&self, g: &mut Graph<'_, F>, enc: &Encoded, tgt_lens: &[usize]) -> NodeId {
        assert_eq!(tgt_lens.len(), enc.layout.num_seqs());
        let out_layout = SeqLayout::from_lens(tgt_lens);
        let blocks = (0..tgt_lens.len())
            .map(|i| {
                let (n, m) = (enc.layout.lens[i], tgt_lens[i]);
                MixBlock {
                    out_offset: out_layout.offsets[i],
                    out_len: m,
                    in_offset: enc.layout.offsets[i],
                    in_len: n,
                    weights: softcopy_weights(n, m).into_iter().map(F::of).collect(),
                }
            })
            .collect();
        g.mix(enc.node, Rc::new(blocks), out_layout.total())
    }

    /// Length-offset logits (`batch × 41`) from mean-pooled encoder states.
    pub fn length_logits_graph(&self, g: &mut Graph<'_, F>, enc: &Encoded) -> Result<NodeId> {
        let (w, b) = self
            .ids
            .len_head
            .ok_or_else(|| Error::Unsupported("length head requires a parallel mode".into()))?;
        let blocks = (0..enc.layout.num_seqs())
            .map(|i| {
                let n = enc.layout.lens[i];
                MixBlock {
                    out_offset: i,
                    out_len: 1,
                    in_offset: enc.layout.offsets[i],
                    in_len: n,
                    weights: vec![F::one() / F::of(n as f64); n],
                }
            })
            .collect();
        let pooled = g.mix(enc.node, Rc::new(blocks), enc.layout.num_seqs());
        let (w, b) = (g.param(w), g.param(b));
        Ok(g.linear(pooled, w, Some(b)))
    }

    fn parallel_stack(
        &self,
        g: &mut Graph<'_, F>,
        drop: &mut Dropout<'_>,
        stack: &StackIds,
        inputs: NodeId,
        tgt: &SeqLayout,
        enc: &Encoded,
        causal: bool,
    ) -> NodeId {
        let pos = self.position_rows(g, tgt);
        let x = g.add(inputs, pos);
        let x = drop.apply(g, x);
        let self_layout = Rc::new(AttnLayout {
            queries: tgt.clone(),
            keys: tgt.clone(),
            causal,
        });
        let cross = Rc::new(AttnLayout {
            queries: tgt.clone(),
            keys: enc.layout.clone(),
            causal: false,
        });
        self.run_stack(g, drop, stack, x, &self_layout, Some((enc.node, &cross)))
    }

    /// Latent-code logits (`rows × K`) for packed decoder-side inputs.
    pub fn latent_logits_graph(
        &self,
        g: &mut Graph<'_, F>,
        drop: &mut Dropout<'_>,
        inputs: NodeId,
        tgt: &SeqLayout,
        enc: &Encoded,
    ) -> Result<NodeId> {
        let lp = self
            .ids
            .lp
            .as_ref()
            .ok_or_else(|| Error::Unsupported("latent predictor requires latent-glat mode".into()))?;
        Ok(self.parallel_stack(g, drop, lp, inputs, tgt, enc, false))
    }

    /// Token logits (`rows × |V|`) from packed decoder inputs; `causal` only for the AT baseline.
    pub fn token_logits_graph(
        &self,
        g: &mut Graph<'_, F>,
        drop: &mut Dropout<'_>,
        inputs: NodeId,
        tgt: &SeqLayout,
        enc: &Encoded,
        causal: bool,
    ) -> NodeId {
        self.parallel_stack(g, drop, &self.ids.dec, inputs, tgt, enc, causal)
    }

    /// Target-token embeddings for teacher-forced or glanced inputs.
    pub fn token_embeddings_graph(&self, g: &mut Graph<'_, F>, ids: &[u32]) -> NodeId {
        let table = g.param(self.ids.tgt_emb);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.gather_scaled(table, &ids, self.embed_scale())
    }

    /// Factor applied to embedding-space vectors (token embeddings, code vectors) on input.
    pub fn embed_scale(&self) -> F {
        F::of((self.config.d_model as f64).sqrt())
    }

    /// `g ⊙ h + (1 − g) ⊙ latent` with `g = σ(W[h; latent] + b)`, row-wise.
    pub fn gate_graph(&self, g: &mut Graph<'_, F>, h: NodeId, latent: NodeId) -> Result<NodeId> {
        let (w, b) = self
            .ids
            .fuse
            .ok_or_else(|| Error::Unsupported("gated fusion requires latent-glat mode".into()))?;
        let cat = g.concat_cols(h, latent);
        let (w, b) = (g.param(w), g.param(b));
        let gate = g.linear(cat, w, Some(b));
        let gate = g.sigmoid(gate);
        Ok(g.lerp(gate, h, latent))
    }

    /// Builds decoder-side inputs from `h` following each row's [`Slot`]:
    /// token embedding ≻ gated latent ≻ plain `h`; `Code` rows take the raw code vector.
    pub fn inputs_graph(&self, g: &mut Graph<'_, F>, h: NodeId, slots: &[Slot]) -> Result<NodeId> {
        assert_eq!(slots.len(), g.shape(h).0, "one slot per row");
        if slots.iter().all(|s| *s == Slot::Plain) {
            return Ok(h);
        }
        let d = self.config.d_model;
        let mut sources = vec![h];
        let (mut fused_src, mut code_src, mut token_src) = (None, None, None);
        if slots.iter().any(|s| matches!(s, Slot::Latent(_) | Slot::Code(_))) {
            let book = self
                .codebook
                .as_ref()
                .ok_or_else(|| Error::Unsupported("latent inputs need a codebook".into()))?;
            let mut m = Mat::<F>::zeros(slots.len(), d);
            let scale = self.embed_scale();
            for (r, s) in slots.iter().enumerate() {
                if let Slot::Latent(k) | Slot::Code(k) = *s {
                    if k >= book.k() {
                        return Err(Error::OutOfRange {
                            what: "codebook",
                            index: k,
                            size: book.k(),
                        });
                    }
                    for (o, &v) in m.row_mut(r).iter_mut().zip(book.vectors.row(k)) {
                        *o = F::of(v as f64) * scale;
                    }
                }
            }
            let codes = g.input(m);
            if slots.iter().any(|s| matches!(s, Slot::Code(_))) {
                code_src = Some(sources.len() as u8);
                sources.push(codes);
            }
            if slots.iter().any(|s| matches!(s, Slot::Latent(_))) {
                let fused = self.gate_graph(g, h, codes)?;
                fused_src = Some(sources.len() as u8);
                sources.push(fused);
            }
        }
        if slots.iter().any(|s| matches!(s, Slot::Token(_))) {
            let ids: Vec<u32> = slots
                .iter()
                .map(|s| if let Slot::Token(t) = *s { t } else { 0 })
                .collect();
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.tgt_vocab) {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: bad as usize,
                    size: self.config.tgt_vocab,
                });
            }
            let tok = self.token_embeddings_graph(g, &ids);
            token_src = Some(sources.len() as u8);
            sources.push(tok);
        }
        let pick: Vec<u8> = slots
            .iter()
            .map(|s| match s {
                Slot::Plain => 0,
                Slot::Latent(_) => fused_src.expect("fused source"),
                Slot::Code(_) => code_src.expect("code source"),
                Slot::Token(_) => token_src.expect("token source"),
            })
            .collect();
        Ok(g.select_rows(&sources, &pick))
    }

    // ---- evaluation helpers (no dropout, no gradients) ----

    /// Encoder states of a batch in evaluation mode.
    pub fn encode(&self, src: &[&[u32]]) -> Result<EncoderOutput<F>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode_graph(&mut g, &mut Dropout::off(), src)?;
        Ok(EncoderOutput {
            states: g.value(enc.node).clone(),
            layout: enc.layout,
        })
    }

    fn encoded_input(&self, g: &mut Graph<'_, F>, enc: &EncoderOutput<F>) -> Encoded {
        Encoded {
            node: g.input(enc.states.clone()),
            layout: enc.layout.clone(),
        }
    }

    /// Length distributions (over offsets −20..=20) per sentence.
    pub fn predict_length(&self, enc: &EncoderOutput<F>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.params);
        let e = self.encoded_input(&mut g, enc);
        let logits = self.length_logits_graph(&mut g, &e)?;
        let lv = g.value(logits);
        Ok((0..lv.rows)
            .map(|r| {
                let mut row: Vec<f64> = lv.row(r).iter().map(|v| v.f64()).collect();
                softmax_in_place(&mut row);
                row
            })
            .collect())
    }

    fn pack(rows: &[Mat<F>]) -> (Mat<F>, SeqLayout) {
        let lens: Vec<usize> = rows.iter().map(|m| m.rows).collect();
        let cols = rows.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        for m in rows {
            data.extend_from_slice(&m.data);
        }
        (Mat::from_vec(data.len() / cols.max(1), cols, data), SeqLayout::from_lens(&lens))
    }

    fn unpack(m: &Mat<F>, layout: &SeqLayout) -> Vec<Mat<F>> {
        (0..layout.num_seqs())
            .map(|i| m.slice_rows(layout.offsets[i], layout.lens[i]))
            .collect()
    }

    /// Latent logits per sentence for explicit input vectors.
    pub fn latent_logits(&self, inputs: &[Mat<F>], enc: &EncoderOutput<F>) -> Result<Vec<Mat<F>>> {
        self.check_width(inputs)?;
        let mut g = Graph::new(&self.params);
        let e = self.encoded_input(&mut g, enc);
        let (packed, layout) = Self::pack(inputs);
        let x = g.input(packed);
        let out = self.latent_logits_graph(&mut g, &mut Dropout::off(), x, &layout, &e)?;
        Ok(Self::unpack(g.value(out), &layout))
    }

    /// Token logits per sentence for explicit (already fused) input vectors.
    pub fn decode_tokens(&self, inputs: &[Mat<F>], enc: &EncoderOutput<F>) -> Result<Vec<Mat<F>>> {
        self.check_width(inputs)?;
        let mut g = Graph::new(&self.params);
        let e = self.encoded_input(&mut g, enc);
        let (packed, layout) = Self::pack(inputs);
        let x = g.input(packed);
        let out = self.token_logits_graph(&mut g, &mut Dropout::off(), x, &layout, &e, false);
        Ok(Self::unpack(g.value(out), &layout))
    }

    fn check_width(&self, inputs: &[Mat<F>]) -> Result<()> {
        match inputs.iter().find(|m| m.cols != self.config.d_model) {
            Some(m) => Err(Error::Shape(format!(
                "input width {} vs d_model {}",
                m.cols, self.config.d_model
            ))),
            None => Ok(()),
        }
    }

    /// One position of the gated fusion with the override priority
    /// token embedding ≻ latent vector ≻ `h`.
    pub fn fuse(&self, h: &[F], latent: Option<&[F]>, token_emb: Option<&[F]>) -> Result<Vec<F>> {
        let d = self.config.d_model;
        let widths = [Some(h), latent, token_emb];
        if widths.iter().flatten().any(|v| v.len() != d) {
            return Err(Error::Shape(format!("fuse expects vectors of width {d}")));
        }
        if let Some(t) = token_emb {
            return Ok(t.to_vec());
        }
        let Some(l) = latent else { return Ok(h.to_vec()) };
        let mut g = Graph::new(&self.params);
        let hn = g.input(Mat::from_vec(1, d, h.to_vec()));
        let ln = g.input(Mat::from_vec(1, d, l.to_vec()));
        let out = self.gate_graph(&mut g, hn, ln)?;
        Ok(g.value(out).data.clone())
    }

    /// Next-token logits of the causal decoder given a prefix starting with `BOS`.
    pub fn ar_step(&self, prefix: &[u32], enc: &EncoderOutput<F>) -> Result<Vec<F>> {
        if enc.layout.num_seqs() != 1 {
            return Err(Error::Shape("ar_step decodes one sentence at a time".into()));
        }
        if prefix.first() != Some(&crate::data::BOS) {
            return Err(Error::Config("prefix must begin with BOS".into()));
        }
        self.check_ids(&[prefix], self.config.tgt_vocab, self.config.max_len)?;
        let mut g = Graph::new(&self.params);
        let e = self.encoded_input(&mut g, enc);
        let x = self.token_embeddings_graph(&mut g, prefix);
        let layout = SeqLayout::from_lens(&[prefix.len()]);
        let out = self.token_logits_graph(&mut g, &mut Dropout::off(), x, &layout, &e, true);
        Ok(g.value(out).row(prefix.len() - 1).to_vec())
    }

    /// Writes `value` into the named parameter after checking its shape.
    pub fn set_param(&mut self, name: &str, value: Mat<F>) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        let cur = self.params.get_mut(id);
        if cur.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }
}
