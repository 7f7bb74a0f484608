//! Glancing sampling: ratio schedule, Hamming distance, observed-set sampling and
//! the construction of glanced inputs for the latent predictor and the decoder.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Model, Slot};
use crate::quantizer::{Codebook, LatentSeq};
use crate::tensor::{Mat, Scalar};

pub const DEFAULT_TAU_START: f64 = 0.5;
pub const DEFAULT_TAU_END: f64 = 0.3;

/// Observed positions from one glancing round.
#[derive(Clone, Debug, PartialEq)]
pub struct GlanceOutcome {
    pub mask: Vec<bool>,
    pub n: usize,
    pub tau: f64,
}

impl GlanceOutcome {
    pub fn empty(len: usize, tau: f64) -> Self {
        GlanceOutcome {
            mask: vec![false; len],
            n: 0,
            tau,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Loss weights: 1 for unobserved positions, 0 for observed ones.
    pub fn loss_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.mask.iter().map(|&o| if o { 0.0 } else { 1.0 })
    }
}

/// Linear interpolation from `start` at step 0 to `end` at `total_steps`.
pub fn glance_ratio(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if step >= total_steps {
        return end;
    }
    let frac = step as f64 / total_steps as f64;
    start + (end - start) * frac
}

pub fn hamming<T: PartialEq>(a: &[T], b: &[T]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("hamming over lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// `round_half_up(tau · distance)`; the small slack absorbs binary representation error
/// such as `0.3 · 5 = 1.4999…`.
pub fn observed_count(tau: f64, distance: usize) -> usize {
    (tau * distance as f64 + 0.5 + 1e-9).floor() as usize
}

/// Chooses `round_half_up(tau · hamming)` positions uniformly, without replacement,
/// from all positions.
pub fn sample_observed<T: PartialEq, R: Rng + ?Sized>(
    reference: &[T],
    prediction: &[T],
    tau: f64,
    rng: &mut R,
) -> Result<GlanceOutcome> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("glancing ratio {tau} outside [0, 1]")));
    }
    let m = reference.len();
    let n = observed_count(tau, hamming(reference, prediction)?).min(m);
    let mut mask = vec![false; m];
    if n > 0 {
        for i in sample(rng, m, n) {
            mask[i] = true;
        }
    }
    Ok(GlanceOutcome { mask, n, tau })
}

/// Observes a uniformly drawn number `n ∈ 0..=m` of uniformly chosen positions,
/// independent of any prediction; `tau` records `n / m`.
pub fn sample_uniform<R: Rng + ?Sized>(m: usize, rng: &mut R) -> GlanceOutcome {
    let n = rng.random_range(0..=m);
    let mut mask = vec![false; m];
    if n > 0 {
        for i in sample(rng, m, n) {
            mask[i] = true;
        }
    }
    let tau = if m == 0 { 0.0 } else { n as f64 / m as f64 };
    GlanceOutcome { mask, n, tau }
}

/// Input slots given an optional latent glance and an optional token glance;
/// token observations take precedence.
pub fn input_slots(
    latent: Option<(&LatentSeq, &GlanceOutcome)>,
    tokens: Option<(&[u32], &GlanceOutcome)>,
    len: usize,
) -> Result<Vec<Slot>> {
    let mut slots = vec![Slot::Plain; len];
    if let Some((z, mask)) = latent {
        if z.len() != len || mask.len() != len {
            return Err(Error::Shape("latent glance length mismatch".into()));
        }
        for (t, _) in mask.mask.iter().enumerate().filter(|(_, &o)| o) {
            slots[t] = Slot::Latent(z.0[t]);
        }
    }
    if let Some((y, mask)) = tokens {
        if y.len() != len || mask.len() != len {
            return Err(Error::Shape("token glance length mismatch".into()));
        }
        for (t, _) in mask.mask.iter().enumerate().filter(|(_, &o)| o) {
            slots[t] = Slot::Token(y[t]);
        }
    }
    Ok(slots)
}

/// Latent-predictor inputs: observed rows carry the (input-scaled) code vector, the rest keep `h`.
pub fn build_lp_inputs<F: Scalar>(
    model: &Model<F>,
    h: &Mat<F>,
    z: &LatentSeq,
    mask: &GlanceOutcome,
) -> Result<Mat<F>> {
    let book: &Codebook = model
        .codebook
        .as_ref()
        .ok_or_else(|| Error::Unsupported("latent inputs need a codebook".into()))?;
    let scale = model.embed_scale();
    if z.len() != h.rows || mask.len() != h.rows {
        return Err(Error::Shape("latent glance length mismatch".into()));
    }
    if h.cols != book.dim() {
        return Err(Error::Shape(format!("width {} vs codebook {}", h.cols, book.dim())));
    }
    let mut out = h.clone();
    for t in (0..h.rows).filter(|&t| mask.mask[t]) {
        let k = z.0[t];
        if k >= book.k() {
            return Err(Error::OutOfRange {
                what: "codebook",
                index: k,
                size: book.k(),
            });
        }
        for (o, &v) in out.row_mut(t).iter_mut().zip(book.vectors.row(k)) {
            *o = F::of(v as f64) * scale;
        }
    }
    Ok(out)
}

/// Decoder inputs: glanced token embedding ≻ gated latent fusion ≻ plain `h`.
pub fn build_dec_inputs<F: Scalar>(
    model: &Model<F>,
    h: &Mat<F>,
    latent: Option<(&LatentSeq, &GlanceOutcome)>,
    tokens: Option<(&[u32], &GlanceOutcome)>,
) -> Result<Mat<F>> {
    let slots = input_slots(latent, tokens, h.rows)?;
    let mut g = crate::autograd::Graph::new(&model.params);
    let hn = g.input(h.clone());
    let out = model.inputs_graph(&mut g, hn, &slots)?;
    Ok(g.value(out).clone())
}
