//! Loss assembly, the glancing training step, baselines, and the optimizer loop.

use std::io::Write;

use log::debug;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, NodeId, ParamStore, SeqLayout};
use crate::data::{batch_iter, Batch, ParallelCorpus, BOS, EOS};
use crate::error::{Error, Result};
use crate::glancing::{glance_ratio, input_slots, sample_observed, sample_uniform, GlanceOutcome};
use crate::model::{offset_class, Dropout, Encoded, Mode, Model, ModelConfig, Slot};
use crate::quantizer::{
    assign, ema_update, reseed_dead_codes, LatentSeq, DEFAULT_DEAD_THRESHOLD, DEFAULT_RESEED_EVERY,
};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{log_sum_exp, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    /// Linear from `lr_start` at step 0 to `lr_end` at `total_steps`.
    Linear,
    /// Linear warmup to `lr_start`, then `lr_start·sqrt(warmup/step)`, floored at `lr_end`.
    InverseSqrt { warmup: u64 },
}

/// Which latent positions the decoder conditions on during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderLatents {
    /// The latent predictor's glancing mask of the same step.
    #[default]
    Shared,
    /// An independent draw: uniform count, uniform positions.
    Uniform,
}

impl std::str::FromStr for DecoderLatents {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" => Ok(DecoderLatents::Shared),
            "uniform" => Ok(DecoderLatents::Uniform),
            other => Err(Error::Config(format!("unknown decoder-latents choice {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_steps: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub batch_tokens: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub dead_threshold: f32,
    pub reseed_every: u64,
    pub decoder_latents: DecoderLatents,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::LatentGlat,
            total_steps: 8000,
            lr_start: 3e-4,
            lr_end: 1e-5,
            lr_schedule: LrSchedule::Linear,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.1,
            tau_start: 0.5,
            tau_end: 0.3,
            batch_tokens: 1024,
            seed: 1,
            clip_norm: 1.0,
            dead_threshold: DEFAULT_DEAD_THRESHOLD,
            reseed_every: DEFAULT_RESEED_EVERY,
            decoder_latents: DecoderLatents::Shared,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.batch_tokens == 0 {
            return bad("total_steps and batch_tokens must be positive".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return bad("learning rates must be positive".into());
        }
        for (name, v) in [("tau_start", self.tau_start), ("tau_end", self.tau_end)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.alpha < 0.0 || self.clip_norm <= 0.0 || self.adam_eps <= 0.0 {
            return bad("alpha ≥ 0, clip_norm > 0 and adam_eps > 0 required".into());
        }
        if let LrSchedule::InverseSqrt { warmup: 0 } = self.lr_schedule {
            return bad("inverse-sqrt warmup must be positive".into());
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Linear => glance_ratio(step, self.total_steps, self.lr_start, self.lr_end),
            LrSchedule::InverseSqrt { warmup } => {
                let s = (step + 1) as f64;
                let w = warmup as f64;
                if s < w {
                    self.lr_start * s / w
                } else {
                    (self.lr_start * (w / s).sqrt()).max(self.lr_end)
                }
            }
        }
    }

    pub fn tau(&self, step: u64) -> f64 {
        glance_ratio(step, self.total_steps, self.tau_start, self.tau_end)
    }
}

/// Mean NLL of `targets` over positions not observed by `mask`; 0 if all are observed.
pub fn masked_nll<F: Scalar>(logits: &Mat<F>, targets: &[usize], mask: &GlanceOutcome) -> Result<f64> {
    if logits.rows != targets.len() || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, (&y, &seen)) in targets.iter().zip(&mask.mask).enumerate() {
        if y >= logits.cols {
            return Err(Error::OutOfRange {
                what: "class",
                index: y,
                size: logits.cols,
            });
        }
        if !seen {
            sum += log_sum_exp(logits.row(r)).f64() - logits.get(r, y).f64();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Latent-predictor loss over unobserved positions.
pub fn lp_loss<F: Scalar>(logits: &Mat<F>, z: &LatentSeq, mask: &GlanceOutcome) -> Result<f64> {
    masked_nll(logits, &z.0, mask)
}

/// Token loss over positions not revealed by the token glance.
pub fn wp_loss<F: Scalar>(logits: &Mat<F>, y: &[u32], mask: &GlanceOutcome) -> Result<f64> {
    let t: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    masked_nll(logits, &t, mask)
}

/// Cross-entropy of the length distribution (probabilities over offsets) against
/// the clipped offset class of `true_m`.
pub fn length_loss(dist: &[f64], true_m: usize, n: usize) -> Result<f64> {
    if dist.len() != crate::model::NUM_OFFSETS {
        return Err(Error::Shape(format!("{} length classes", dist.len())));
    }
    Ok(-dist[offset_class(n, true_m)].ln())
}

/// Encoder output and softcopied inputs at the reference target lengths.
pub struct Prepared {
    pub enc: Encoded,
    pub h: NodeId,
    pub tgt: SeqLayout,
}

/// Latents and masks sampled before the differentiable pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlancePlan {
    pub latents: Vec<LatentSeq>,
    pub latent_masks: Vec<GlanceOutcome>,
    /// Decoder latent masks; empty means the decoder reuses `latent_masks`.
    pub decoder_latent_masks: Vec<GlanceOutcome>,
    pub token_masks: Vec<GlanceOutcome>,
}

impl GlancePlan {
    fn decoder_latent(&self, i: usize) -> Option<(&LatentSeq, &GlanceOutcome)> {
        let z = self.latents.get(i)?;
        Some((z, self.decoder_latent_masks.get(i).unwrap_or(&self.latent_masks[i])))
    }
}

pub struct LossNodes {
    pub total: NodeId,
    pub wp: NodeId,
    pub lp: Option<NodeId>,
    pub len: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub loss_total: f64,
    pub loss_wp: f64,
    pub loss_lp: f64,
    pub loss_len: f64,
    pub tau: f64,
    pub lr: f64,
}

fn pairs_of(batch: &Batch) -> (Vec<&[u32]>, Vec<&[u32]>) {
    (0..batch.len()).map(|i| (batch.src_seq(i), batch.tgt_seq(i))).unzip()
}

/// Encodes the batch and softcopies to the reference target lengths.
pub fn prepare<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    drop: &mut Dropout<'_>,
    batch: &Batch,
) -> Result<Prepared> {
    let (src, tgt) = pairs_of(batch);
    let enc = model.encode_graph(g, drop, &src)?;
    let lens: Vec<usize> = tgt.iter().map(|t| t.len()).collect();
    if lens.contains(&0) {
        return Err(Error::Empty("target sentence"));
    }
    let h = model.softcopy_graph(g, &enc, &lens);
    Ok(Prepared {
        enc,
        h,
        tgt: SeqLayout::from_lens(&lens),
    })
}

fn unobserved_weights<F: Scalar>(masks: &[GlanceOutcome], rows: usize) -> Vec<F> {
    if masks.is_empty() {
        return vec![F::one(); rows];
    }
    masks
        .iter()
        .flat_map(|m| m.loss_weights().map(F::of))
        .collect()
}

fn length_term<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    prep: &Prepared,
) -> Result<NodeId> {
    let logits = model.length_logits_graph(g, &prep.enc)?;
    let classes: Vec<usize> = (0..prep.tgt.num_seqs())
        .map(|i| offset_class(prep.enc.layout.lens[i], prep.tgt.lens[i]))
        .collect();
    let w = vec![F::one(); classes.len()];
    Ok(g.cross_entropy(logits, &classes, &w))
}

/// Differentiable loss for a parallel mode given a fixed glancing plan.
///
/// Latent-GLAT: `wp + lp + α·len`; GLAT/NAT: `wp + α·len` (NAT when the plan has no token masks).
pub fn loss_graph<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    drop: &mut Dropout<'_>,
    batch: &Batch,
    prep: &Prepared,
    plan: &GlancePlan,
    alpha: f64,
) -> Result<LossNodes> {
    let mode = model.config.mode;
    if mode == Mode::At {
        return Err(Error::Unsupported("use at_loss_graph for the autoregressive baseline".into()));
    }
    let (_, tgt) = pairs_of(batch);
    let rows = prep.tgt.total();
    let mut terms = Vec::new();
    let lp = if mode == Mode::LatentGlat {
        if plan.latents.len() != tgt.len() || plan.latent_masks.len() != tgt.len() {
            return Err(Error::Shape("latent plan does not match the batch".into()));
        }
        let mut slots = Vec::with_capacity(rows);
        for (z, m) in plan.latents.iter().zip(&plan.latent_masks) {
            slots.extend(
                input_slots(Some((z, m)), None, z.len())?
                    .into_iter()
                    .map(|s| match s {
                        Slot::Latent(k) => Slot::Code(k),
                        other => other,
                    }),
            );
        }
        let inputs = model.inputs_graph(g, prep.h, &slots)?;
        let logits = model.latent_logits_graph(g, drop, inputs, &prep.tgt, &prep.enc)?;
        let targets: Vec<usize> = plan.latents.iter().flat_map(|z| z.0.iter().copied()).collect();
        let w = unobserved_weights::<F>(&plan.latent_masks, rows);
        let node = g.cross_entropy(logits, &targets, &w);
        terms.push((node, F::one()));
        Some(node)
    } else {
        None
    };

    let mut slots = Vec::with_capacity(rows);
    for (i, y) in tgt.iter().enumerate() {
        let latent = if mode == Mode::LatentGlat {
            Some(plan.decoder_latent(i).ok_or_else(|| Error::Shape("latent plan does not match the batch".into()))?)
        } else {
            None
        };
        let tokens = plan.token_masks.get(i).map(|m| (*y, m));
        slots.extend(input_slots(latent, tokens, y.len())?);
    }
    let inputs = model.inputs_graph(g, prep.h, &slots)?;
    let logits = model.token_logits_graph(g, drop, inputs, &prep.tgt, &prep.enc, false);
    let targets: Vec<usize> = tgt.iter().flat_map(|y| y.iter().map(|&t| t as usize)).collect();
    let w = unobserved_weights::<F>(&plan.token_masks, rows);
    let wp = g.cross_entropy(logits, &targets, &w);
    terms.push((wp, F::one()));

    let len = length_term(model, g, prep)?;
    terms.push((len, F::of(alpha)));
    let total = g.weighted_sum(&terms);
    Ok(LossNodes {
        total,
        wp,
        lp,
        len: Some(len),
    })
}

/// Teacher-forced causal loss: inputs `BOS y`, targets `y EOS`.
pub fn at_loss_graph<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    drop: &mut Dropout<'_>,
    batch: &Batch,
) -> Result<LossNodes> {
    let (src, tgt) = pairs_of(batch);
    let enc = model.encode_graph(g, drop, &src)?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut lens = Vec::new();
    for y in &tgt {
        if y.len() + 1 > model.config.max_len {
            return Err(Error::TooLong {
                len: y.len() + 1,
                max_len: model.config.max_len,
            });
        }
        inputs.push(BOS);
        inputs.extend_from_slice(y);
        targets.extend(y.iter().map(|&t| t as usize));
        targets.push(EOS as usize);
        lens.push(y.len() + 1);
    }
    let layout = SeqLayout::from_lens(&lens);
    let x = model.token_embeddings_graph(g, &inputs);
    let logits = model.token_logits_graph(g, drop, x, &layout, &enc, true);
    let w = vec![F::one(); targets.len()];
    let wp = g.cross_entropy(logits, &targets, &w);
    Ok(LossNodes {
        total: wp,
        wp,
        lp: None,
        len: None,
    })
}

/// Per-position argmax of each sentence's rows.
fn argmax_rows<F: Scalar>(m: &Mat<F>, layout: &SeqLayout) -> Vec<Vec<usize>> {
    (0..layout.num_seqs())
        .map(|i| layout.range(i).map(|r| m.argmax_row(r)).collect())
        .collect()
}

/// Adam with bias correction; parameters without a gradient in a step are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat<f32>>,
    pub v: Vec<Mat<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Mat<f32>> = params.iter().map(|(_, p)| Mat::zeros(p.rows, p.cols)).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, (self.eps * bc2.sqrt()) as f32);
        for (id, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[id].data, &mut self.v[id].data);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Position in the data stream: epoch and batch index within it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub batch: usize,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub cursor: Cursor,
    pub(crate) glance_rng: Rng,
    pub(crate) reseed_rng: Rng,
    pub(crate) dropout_rng: Rng,
    pub(crate) data_seed: u64,
    epoch_cache: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model_config.mode != config.mode {
            return Err(Error::Config(format!(
                "model mode {} differs from training mode {}",
                model_config.mode, config.mode
            )));
        }
        let model = Model::new(model_config, &mut stream(config.seed, Stream::Init))?;
        Ok(Self::from_parts(model, config))
    }

    pub(crate) fn from_parts(model: Model<f32>, config: TrainConfig) -> Self {
        let adam = Adam::new(&model.params, config.adam_beta1, config.adam_beta2, config.adam_eps);
        Trainer {
            adam,
            step: 0,
            cursor: Cursor::default(),
            glance_rng: stream(config.seed, Stream::Glance),
            reseed_rng: stream(config.seed, Stream::Reseed),
            dropout_rng: stream(config.seed, Stream::Dropout),
            data_seed: stream(config.seed, Stream::Data).next_u64(),
            epoch_cache: None,
            model,
            config,
        }
    }

    /// Next batch of the deterministic shuffled stream; advances the cursor.
    pub fn next_batch(&mut self, corpus: &ParallelCorpus) -> Result<Batch> {
        loop {
            let epoch = self.cursor.epoch;
            if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
                let batches: Vec<Batch> =
                    batch_iter(corpus, self.config.batch_tokens, self.data_seed, epoch)?.collect();
                if batches.is_empty() {
                    return Err(Error::Empty("training corpus"));
                }
                self.epoch_cache = Some((epoch, batches));
            }
            let batches = &self.epoch_cache.as_ref().expect("cached epoch").1;
            if let Some(b) = batches.get(self.cursor.batch) {
                self.cursor.batch += 1;
                return Ok(b.clone());
            }
            self.cursor = Cursor {
                epoch: epoch + 1,
                batch: 0,
            };
        }
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let step = self.step;
        let lr = self.config.lr(step);
        let tau = self.config.tau(step);
        let mode = self.config.mode;
        let p = self.model.config.dropout;

        let mut reprs_for_reseed = None;
        if mode == Mode::LatentGlat {
            let (_, tgt) = pairs_of(batch);
            let ids: Vec<usize> = tgt.iter().flat_map(|y| y.iter().map(|&t| t as usize)).collect();
            let emb = self.model.tgt_embedding();
            let mut reprs = Mat::zeros(ids.len(), emb.cols);
            for (r, &id) in ids.iter().enumerate() {
                reprs.row_mut(r).copy_from_slice(emb.row(id));
            }
            let book = self.model.codebook.as_mut().expect("latent mode has a codebook");
            let z = assign(&reprs, book)?;
            ema_update(book, &reprs, &z)?;
            reprs_for_reseed = Some((reprs, z));
        }

        let model = &self.model;
        let mut g = Graph::new(&model.params);
        let mut drop = Dropout::new(p, &mut self.dropout_rng);
        let nodes = if mode == Mode::At {
            at_loss_graph(model, &mut g, &mut drop, batch)?
        } else {
            let prep = prepare(model, &mut g, &mut drop, batch)?;
            let (_, tgt) = pairs_of(batch);
            let mut plan = GlancePlan::default();
            if let Some((_, z)) = &reprs_for_reseed {
                let mut off = 0;
                for y in &tgt {
                    plan.latents.push(LatentSeq(z.0[off..off + y.len()].to_vec()));
                    off += y.len();
                }
                let logits = model.latent_logits_graph(&mut g, &mut Dropout::off(), prep.h, &prep.tgt, &prep.enc)?;
                let z_hat = argmax_rows(g.value(logits), &prep.tgt);
                for (z, zh) in plan.latents.iter().zip(&z_hat) {
                    plan.latent_masks.push(sample_observed(&z.0, zh, tau, &mut self.glance_rng)?);
                }
                if self.config.decoder_latents == DecoderLatents::Uniform {
                    for z in &plan.latents {
                        plan.decoder_latent_masks.push(sample_uniform(z.len(), &mut self.glance_rng));
                    }
                }
            }
            if mode != Mode::Nat {
                let mut slots = Vec::with_capacity(prep.tgt.total());
                for (i, y) in tgt.iter().enumerate() {
                    let latent = plan.decoder_latent(i);
                    slots.extend(input_slots(latent, None, y.len())?);
                }
                let inputs = model.inputs_graph(&mut g, prep.h, &slots)?;
                let logits =
                    model.token_logits_graph(&mut g, &mut Dropout::off(), inputs, &prep.tgt, &prep.enc, false);
                let y_hat = argmax_rows(g.value(logits), &prep.tgt);
                for (y, yh) in tgt.iter().zip(&y_hat) {
                    let y: Vec<usize> = y.iter().map(|&t| t as usize).collect();
                    plan.token_masks.push(sample_observed(&y, yh, tau, &mut self.glance_rng)?);
                }
            }
            loss_graph(model, &mut g, &mut drop, batch, &prep, &plan, self.config.alpha)?
        };

        let value = |n: Option<NodeId>| n.map_or(0.0, |n| g.scalar(n).f64());
        let losses = StepLosses {
            step,
            loss_total: g.scalar(nodes.total).f64(),
            loss_wp: value(Some(nodes.wp)),
            loss_lp: value(nodes.lp),
            loss_len: value(nodes.len),
            tau,
            lr,
        };
        if !losses.loss_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at step {step} (lr {lr:e}, tau {tau}); wp {} lp {} len {}",
                losses.loss_total, losses.loss_wp, losses.loss_lp, losses.loss_len
            )));
        }
        let mut grads = g.backward(nodes.total);
        std::mem::drop(g);
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm at step {step} (lr {lr:e}, tau {tau})"
            )));
        }
        if norm > self.config.clip_norm {
            grads.scale((self.config.clip_norm / norm) as f32);
        }
        self.adam.update(&mut self.model.params, &grads, lr);
        self.step += 1;

        if let (Some((reprs, _)), Some(book)) = (&reprs_for_reseed, self.model.codebook.as_mut()) {
            if self.config.reseed_every > 0 && self.step.is_multiple_of(self.config.reseed_every) {
                let n = reseed_dead_codes(book, reprs, self.config.dead_threshold, &mut self.reseed_rng);
                if n > 0 {
                    debug!("step {}: reseeded {n} dead codes", self.step);
                }
            }
        }
        Ok(losses)
    }

    /// Runs until `total_steps`, calling `on_step` after every update.
    pub fn run(
        &mut self,
        corpus: &ParallelCorpus,
        mut on_step: impl FnMut(&Trainer, &StepLosses) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.total_steps {
            let batch = self.next_batch(corpus)?;
            let losses = self.train_step(&batch)?;
            on_step(self, &losses)?;
        }
        Ok(())
    }
}

/// Appends one JSON line per step.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        MetricsLog { out }
    }

    pub fn record(&mut self, losses: &StepLosses) -> Result<()> {
        let line = serde_json::to_string(losses)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("metrics log", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
