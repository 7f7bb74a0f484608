//! Discrete latent space: nearest-code assignment and EMA codebook maintenance.
//!
//! Codes are 0-based internally; symbolic renderings (`z<k>`) are 1-based.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// EMA decay used for the codebook.
pub const DEFAULT_DECAY: f32 = 0.999;
/// Number of codes.
pub const DEFAULT_K: usize = 64;
/// Codes whose EMA count falls below this are reseeded.
pub const DEFAULT_DEAD_THRESHOLD: f32 = 0.1;
/// Steps between dead-code checks.
pub const DEFAULT_RESEED_EVERY: u64 = 500;
const COUNT_FLOOR: f64 = 1e-6;

/// One latent code per target position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSeq(pub Vec<usize>);

impl LatentSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `z1 z5 ...` with 1-based code numbers.
    pub fn render(&self) -> Vec<String> {
        self.0.iter().map(|k| format!("z{}", k + 1)).collect()
    }
}

/// `K` code vectors with EMA assignment counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K × d_model`.
    pub vectors: Mat<f32>,
    pub counts: Vec<f32>,
    pub decay: f32,
}

/// Inspection summary of a codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookDump {
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f32,
    pub counts: Vec<f32>,
    pub vector_norms: Vec<f32>,
}

impl Codebook {
    /// Gaussian codes with variance `1/d`, unit counts.
    pub fn new<R: Rng + ?Sized>(k: usize, d: usize, decay: f32, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("codebook needs K ≥ 2, got {k}")));
        }
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let data = (0..k * d).map(|_| normal.sample(rng) as f32).collect();
        Ok(Codebook {
            vectors: Mat::from_vec(k, d, data),
            counts: vec![1.0; k],
            decay,
        })
    }

    pub fn from_parts(vectors: Mat<f32>, counts: Vec<f32>, decay: f32) -> Result<Self> {
        if vectors.rows < 2 || counts.len() != vectors.rows {
            return Err(Error::Shape(format!(
                "codebook with {} vectors and {} counts",
                vectors.rows,
                counts.len()
            )));
        }
        Ok(Codebook {
            vectors,
            counts,
            decay,
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn dump(&self) -> CodebookDump {
        CodebookDump {
            k: self.k(),
            lambda: self.decay,
            counts: self.counts.clone(),
            vector_norms: (0..self.k())
                .map(|j| self.vectors.row(j).iter().map(|v| v * v).sum::<f32>().sqrt())
                .collect(),
        }
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Nearest code (Euclidean) for every row of `reprs`; ties go to the lowest index.
pub fn assign(reprs: &Mat<f32>, book: &Codebook) -> Result<LatentSeq> {
    if reprs.rows > 0 && reprs.cols != book.dim() {
        return Err(Error::Shape(format!(
            "representation width {} vs codebook width {}",
            reprs.cols,
            book.dim()
        )));
    }
    if !reprs.is_finite() {
        return Err(Error::NonFinite("representation passed to assign".into()));
    }
    let codes = (0..reprs.rows)
        .map(|r| {
            let row = reprs.row(r);
            let mut best = 0;
            let mut best_d = sq_dist(row, book.vectors.row(0));
            for j in 1..book.k() {
                let d = sq_dist(row, book.vectors.row(j));
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    Ok(LatentSeq(codes))
}

/// One EMA step: counts first, then vectors divided by the updated counts.
pub fn ema_update(book: &mut Codebook, reprs: &Mat<f32>, z: &LatentSeq) -> Result<()> {
    if z.len() != reprs.rows {
        return Err(Error::Shape(format!(
            "{} assignments for {} representations",
            z.len(),
            reprs.rows
        )));
    }
    let (k, d) = (book.k(), book.dim());
    let lambda = book.decay as f64;
    let mut hits = vec![0usize; k];
    let mut sums = vec![0.0f64; k * d];
    for (r, &j) in z.0.iter().enumerate() {
        if j >= k {
            return Err(Error::OutOfRange {
                what: "codebook",
                index: j,
                size: k,
            });
        }
        hits[j] += 1;
        for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(reprs.row(r)) {
            *s += v as f64;
        }
    }
    for j in 0..k {
        let c = lambda * book.counts[j] as f64 + (1.0 - lambda) * hits[j] as f64;
        book.counts[j] = c as f32;
        let denom = c.max(COUNT_FLOOR);
        for (q, &s) in book.vectors.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
            *q = (lambda * *q as f64 + (1.0 - lambda) * s / denom) as f32;
        }
    }
    Ok(())
}

/// Code vectors for each position of `z`.
pub fn lookup(z: &LatentSeq, book: &Codebook) -> Result<Mat<f32>> {
    let mut out = Mat::zeros(z.len(), book.dim());
    for (r, &j) in z.0.iter().enumerate() {
        if j >= book.k() {
            return Err(Error::OutOfRange {
                what: "codebook",
                index: j,
                size: book.k(),
            });
        }
        out.row_mut(r).copy_from_slice(book.vectors.row(j));
    }
    Ok(out)
}

/// Replaces every code whose count is below `threshold` with a uniformly drawn
/// batch representation and resets its count to 1. Returns the number reseeded.
pub fn reseed_dead_codes<R: Rng + ?Sized>(
    book: &mut Codebook,
    reprs: &Mat<f32>,
    threshold: f32,
    rng: &mut R,
) -> usize {
    let dead: Vec<usize> = (0..book.k()).filter(|&j| book.counts[j] < threshold).collect();
    if dead.is_empty() {
        return 0;
    }
    if reprs.rows == 0 {
        warn!("{} dead codes but no representations to reseed from", dead.len());
        return 0;
    }
    for &j in &dead {
        let r = rng.random_range(0..reprs.rows);
        book.vectors.row_mut(j).copy_from_slice(reprs.row(r));
        book.counts[j] = 1.0;
    }
    dead.len()
}
