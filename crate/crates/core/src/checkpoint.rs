//! Binary checkpoints: `LGLAT1` magic, `u32` version, a JSON header, then named
//! little-endian `f32` tensors stored as `(name, rank, dims, data)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::quantizer::Codebook;
use crate::rng::RngState;
use crate::tensor::Mat;
use crate::training::{Cursor, TrainConfig, Trainer};

pub const MAGIC: &[u8; 6] = b"LGLAT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    adam_t: u64,
    cursor: Cursor,
    glance_rng: RngState,
    reseed_rng: RngState,
    dropout_rng: RngState,
    src_vocab: Option<Vocab>,
    tgt_vocab: Option<Vocab>,
}

/// A restored training state plus the vocabularies it was trained with.
pub struct Checkpoint {
    pub trainer: Trainer,
    pub src_vocab: Option<Vocab>,
    pub tgt_vocab: Option<Vocab>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full training state.
pub fn to_bytes(trainer: &Trainer, vocabs: Option<(&Vocab, &Vocab)>) -> Result<Vec<u8>> {
    let header = Header {
        model_config: trainer.model.config.clone(),
        train_config: trainer.config.clone(),
        step: trainer.step,
        adam_t: trainer.adam.t,
        cursor: trainer.cursor,
        glance_rng: RngState::capture(&trainer.glance_rng),
        reseed_rng: RngState::capture(&trainer.reseed_rng),
        dropout_rng: RngState::capture(&trainer.dropout_rng),
        src_vocab: vocabs.map(|v| v.0.clone()),
        tgt_vocab: vocabs.map(|v| v.1.clone()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(64 + json.len() + 12 * trainer.model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);

    let params = &trainer.model.params;
    let book = trainer.model.codebook.as_ref();
    let count = params.len() * 3 + if book.is_some() { 2 } else { 0 };
    put_u32(&mut out, count as u32);
    for (i, (name, p)) in params.iter().enumerate() {
        put_tensor(&mut out, &format!("param.{name}"), &[p.rows, p.cols], &p.data);
        let (m, v) = (&trainer.adam.m[i], &trainer.adam.v[i]);
        put_tensor(&mut out, &format!("adam.m.{name}"), &[m.rows, m.cols], &m.data);
        put_tensor(&mut out, &format!("adam.v.{name}"), &[v.rows, v.cols], &v.data);
    }
    if let Some(b) = book {
        put_tensor(&mut out, "codebook.vectors", &[b.vectors.rows, b.vectors.cols], &b.vectors.data);
        put_tensor(&mut out, "codebook.counts", &[b.counts.len()], &b.counts);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos,
                reason: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let at = self.pos;
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::Corrupt {
                offset: at,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u32("tensor rank")? as usize;
        if rank > 4 {
            return Err(Error::Corrupt {
                offset: at,
                reason: format!("{name}: implausible rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("tensor dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = self.take(n.saturating_mul(4), &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, dims, data))
    }
}

fn as_mat(name: &str, dims: &[usize], data: Vec<f32>) -> Result<Mat<f32>> {
    match *dims {
        [r, c] => Ok(Mat::from_vec(r, c, data)),
        _ => Err(Error::Shape(format!("{name}: expected a matrix, got dims {dims:?}"))),
    }
}

/// Restores a training state from bytes.
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        if magic.starts_with(b"LGLAT") {
            return Err(Error::Version {
                found: String::from_utf8_lossy(magic).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        return Err(Error::Corrupt {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let json_len = r.u32("header length")? as usize;
    let at = r.pos;
    let header: Header = serde_json::from_slice(r.take(json_len, "header")?).map_err(|e| Error::Corrupt {
        offset: at,
        reason: format!("header: {e}"),
    })?;

    let mut model: Model<f32> = Model::new(header.model_config.clone(), &mut crate::rng::keyed_rng(0, 0))?;
    header.train_config.validate()?;
    let count = r.u32("tensor count")? as usize;
    let mut moments = Vec::new();
    let mut vectors = None;
    let mut counts = None;
    let mut seen = 0usize;
    for _ in 0..count {
        let at = r.pos;
        let (name, dims, data) = r.tensor()?;
        let wrap = |e: Error| Error::Corrupt {
            offset: at,
            reason: e.to_string(),
        };
        if let Some(p) = name.strip_prefix("param.") {
            model.set_param(p, as_mat(&name, &dims, data)?).map_err(wrap)?;
            seen += 1;
        } else if let Some(p) = name.strip_prefix("adam.") {
            moments.push((p.to_string(), as_mat(&name, &dims, data)?));
        } else if name == "codebook.vectors" {
            vectors = Some(as_mat(&name, &dims, data)?);
        } else if name == "codebook.counts" {
            counts = Some(data);
        } else {
            return Err(Error::Corrupt {
                offset: at,
                reason: format!("unknown tensor {name}"),
            });
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    if seen != model.params.len() {
        return Err(Error::Corrupt {
            offset: r.pos,
            reason: format!("{seen} of {} parameters present", model.params.len()),
        });
    }
    match (vectors, counts, model.codebook.is_some()) {
        (Some(v), Some(c), true) => {
            model.codebook = Some(Codebook::from_parts(v, c, header.model_config.codebook_decay)?);
        }
        (None, None, false) => {}
        _ => {
            return Err(Error::Corrupt {
                offset: r.pos,
                reason: "codebook tensors do not match the model mode".into(),
            })
        }
    }

    let mut trainer = Trainer::from_parts(model, header.train_config);
    for (name, m) in moments {
        let (kind, pname) = name.split_once('.').unwrap_or(("", ""));
        let id = trainer.model.params.id(pname).ok_or_else(|| Error::Corrupt {
            offset: 0,
            reason: format!("moment for unknown parameter {pname}"),
        })?;
        let slot = match kind {
            "m" => &mut trainer.adam.m[id],
            "v" => &mut trainer.adam.v[id],
            _ => {
                return Err(Error::Corrupt {
                    offset: 0,
                    reason: format!("unknown optimizer tensor {name}"),
                })
            }
        };
        if slot.shape() != m.shape() {
            return Err(Error::Shape(format!("adam.{name}: {:?} vs {:?}", m.shape(), slot.shape())));
        }
        *slot = m;
    }
    trainer.adam.t = header.adam_t;
    trainer.step = header.step;
    trainer.cursor = header.cursor;
    trainer.glance_rng = header.glance_rng.restore();
    trainer.reseed_rng = header.reseed_rng.restore();
    trainer.dropout_rng = header.dropout_rng.restore();
    Ok(Checkpoint {
        trainer,
        src_vocab: header.src_vocab,
        tgt_vocab: header.tgt_vocab,
    })
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer, vocabs: Option<(&Vocab, &Vocab)>) -> Result<()> {
    let bytes = to_bytes(trainer, vocabs)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_multimodal, SyntheticSpec};
    use crate::model::Mode;

    fn setup(mode: Mode) -> (Trainer, crate::data::SyntheticCorpus) {
        let corpus = gen_synthetic_multimodal(&SyntheticSpec {
            num_symbols: 6,
            size: 60,
            test_size: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mc = ModelConfig {
            d_model: 8,
            d_hidden: 12,
            n_head: 2,
            enc_layers: 1,
            lp_layers: 1,
            dec_layers: 1,
            dropout: 0.1,
            k: 5,
            mode,
            src_vocab: corpus.train.src_vocab.len(),
            tgt_vocab: corpus.train.tgt_vocab.len(),
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            mode,
            total_steps: 40,
            batch_tokens: 64,
            reseed_every: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        (Trainer::new(mc, tc).unwrap(), corpus)
    }

    #[test]
    fn resave_is_byte_identical() {
        let (mut t, c) = setup(Mode::LatentGlat);
        for _ in 0..3 {
            let b = t.next_batch(&c.train).unwrap();
            t.train_step(&b).unwrap();
        }
        let vocabs = (&c.train.src_vocab, &c.train.tgt_vocab);
        let a = to_bytes(&t, Some(vocabs)).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(back.tgt_vocab.as_ref(), Some(&c.train.tgt_vocab));
        let b = to_bytes(&back.trainer, Some(vocabs)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        for mode in [Mode::LatentGlat, Mode::Glat, Mode::At] {
            let (mut a, c) = setup(mode);
            for _ in 0..5 {
                let b = a.next_batch(&c.train).unwrap();
                a.train_step(&b).unwrap();
            }
            let mut resumed = from_bytes(&to_bytes(&a, None).unwrap()).unwrap().trainer;
            for _ in 0..10 {
                let ba = a.next_batch(&c.train).unwrap();
                let bb = resumed.next_batch(&c.train).unwrap();
                assert_eq!(ba, bb);
                let la = a.train_step(&ba).unwrap();
                let lb = resumed.train_step(&bb).unwrap();
                assert!((la.loss_total - lb.loss_total).abs() < 1e-6, "{mode}: {la:?} vs {lb:?}");
            }
        }
    }

    #[test]
    fn bad_headers_are_reported() {
        let (t, _) = setup(Mode::Nat);
        let bytes = to_bytes(&t, None).unwrap();
        let mut old = bytes.clone();
        old[..6].copy_from_slice(b"LGLAT0");
        assert!(matches!(from_bytes(&old), Err(Error::Version { .. })));
        let mut v2 = bytes.clone();
        v2[6..10].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(from_bytes(&v2), Err(Error::Version { .. })));
        let mut junk = bytes.clone();
        junk[..6].copy_from_slice(b"XXXXXX");
        assert!(matches!(from_bytes(&junk), Err(Error::Corrupt { offset: 0, .. })));
        let cut = bytes.len() - 7;
        match from_bytes(&bytes[..cut]) {
            Err(Error::Corrupt { offset, reason }) => {
                assert!(offset <= cut && offset > 10, "{offset}: {reason}")
            }
            other => panic!("expected corruption error, got {:?}", other.err()),
        }
    }
}
