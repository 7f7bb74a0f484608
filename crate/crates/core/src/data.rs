//! Corpora, vocabularies, synthetic multi-modal tasks and token-budget batching.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Default maximum sequence length, counting the end-of-sentence position.
pub const DEFAULT_MAX_LEN: usize = 64;

/// Token inventory with IDs 0–3 reserved for pad/bos/eos/unk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved symbols followed by `words` in the given order (duplicates dropped).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Vocab::from(tokens)
    }

    /// Orders tokens by descending frequency, ties broken lexicographically.
    pub fn from_counts(counts: &HashMap<String, usize>) -> Self {
        let mut entries: Vec<(&String, &usize)> = counts.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(entries.into_iter().map(|(t, _)| t.clone()))
    }

    pub fn build<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts = HashMap::new();
        for s in sentences {
            for t in s.split_whitespace() {
                *counts.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        Self::from_counts(&counts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Source/target pairs of token IDs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub name: String,
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_tgt_len(&self) -> usize {
        self.pairs.iter().map(|p| p.1.len()).max().unwrap_or(0)
    }

    pub fn max_src_len(&self) -> usize {
        self.pairs.iter().map(|p| p.0.len()).max().unwrap_or(0)
    }

    /// Checks the type invariants: IDs in range, no empty side, lengths within `max_len`
    /// (targets leave one position for end-of-sentence).
    pub fn validate(&self, max_len: usize) -> Result<()> {
        for (x, y) in &self.pairs {
            if x.is_empty() || y.is_empty() {
                return Err(Error::Empty("sequence"));
            }
            if x.len() > max_len {
                return Err(Error::TooLong {
                    len: x.len(),
                    max_len,
                });
            }
            if y.len() + 1 > max_len {
                return Err(Error::TooLong {
                    len: y.len() + 1,
                    max_len,
                });
            }
            for (ids, v) in [(x, &self.src_vocab), (y, &self.tgt_vocab)] {
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v.len()) {
                    return Err(Error::OutOfRange {
                        what: "vocabulary",
                        index: bad as usize,
                        size: v.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes `<stem>.src` and `<stem>.tgt`, one detokenized sentence per line.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut src = String::new();
        let mut tgt = String::new();
        for (x, y) in &self.pairs {
            src.push_str(&self.src_vocab.decode(x));
            src.push('\n');
            tgt.push_str(&self.tgt_vocab.decode(y));
            tgt.push('\n');
        }
        let sp = dir.join(format!("{stem}.src"));
        fs::write(&sp, src).map_err(|e| Error::io(&sp, e))?;
        let tp = dir.join(format!("{stem}.tgt"));
        fs::write(&tp, tgt).map_err(|e| Error::io(&tp, e))?;
        Ok(())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    for (i, l) in lines.iter().enumerate() {
        if l.trim().is_empty() {
            return Err(Error::EmptyLine {
                path: path.to_path_buf(),
                line: i + 1,
            });
        }
    }
    Ok(lines)
}

/// Reads a whitespace-tokenized parallel corpus. Vocabularies are built from the data
/// unless supplied; unknown tokens map to `UNK`.
pub fn load_parallel_corpus(
    src_path: &Path,
    tgt_path: &Path,
    vocabs: Option<(Vocab, Vocab)>,
    max_len: usize,
) -> Result<ParallelCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            src: src.len(),
            tgt: tgt.len(),
        });
    }
    let (src_vocab, tgt_vocab) = vocabs.unwrap_or_else(|| {
        (
            Vocab::build(src.iter().map(String::as_str)),
            Vocab::build(tgt.iter().map(String::as_str)),
        )
    });
    let pairs = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect();
    let name = src_path
        .file_stem()
        .map_or_else(|| "corpus".to_string(), |s| s.to_string_lossy().into_owned());
    let corpus = ParallelCorpus {
        name,
        pairs,
        src_vocab,
        tgt_vocab,
    };
    corpus.validate(max_len)?;
    Ok(corpus)
}

/// Parameters of a synthetic one-to-many task: every source symbol has `modes`
/// distinct target realizations, and each sentence renders all its symbols in one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_symbols: usize,
    pub modes: usize,
    /// Inclusive token-length range of one realization.
    pub realization_len: (usize, usize),
    /// Inclusive range of source sentence lengths.
    pub sentence_len: (usize, usize),
    pub size: usize,
    /// Extra held-out pairs generated after the first `size` ones.
    #[serde(default)]
    pub test_size: usize,
    pub seed: u64,
    /// Upper bound on distinct target tokens.
    #[serde(default = "default_vocab_budget")]
    pub vocab_budget: usize,
}

fn default_vocab_budget() -> usize {
    4096
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_symbols: 40,
            modes: 2,
            realization_len: (1, 2),
            sentence_len: (4, 12),
            size: 10_000,
            test_size: 1_000,
            seed: 7,
            vocab_budget: default_vocab_budget(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.modes < 1 {
            return bad("modes must be ≥ 1");
        }
        if self.num_symbols < 1 {
            return bad("num_symbols must be ≥ 1");
        }
        let (rl, rh) = self.realization_len;
        if rl < 1 || rh < rl {
            return bad("realization_len must be a nonempty range starting at ≥ 1");
        }
        let (sl, sh) = self.sentence_len;
        if sl < 1 || sh < sl {
            return bad("sentence_len must be a nonempty range starting at ≥ 1");
        }
        if self.modes * self.num_symbols * rh > self.vocab_budget {
            return Err(Error::Config(format!(
                "{} modes × {} symbols × up to {} tokens exceeds the target vocabulary budget {}",
                self.modes, self.num_symbols, rh, self.vocab_budget
            )));
        }
        Ok(())
    }
}

/// The generator's (symbol, mode) → target-token map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeMap {
    /// Source symbol strings, indexed by symbol.
    pub symbols: Vec<String>,
    /// `realizations[symbol][mode]` is that symbol's target token sequence in that mode.
    pub realizations: Vec<Vec<Vec<String>>>,
}

impl ModeMap {
    pub fn modes(&self) -> usize {
        self.realizations.first().map_or(0, Vec::len)
    }

    /// Renders a source symbol sequence in one mode.
    pub fn render(&self, source: &[&str], mode: usize) -> Option<Vec<String>> {
        let mut out = Vec::new();
        for s in source {
            let i = self.symbols.iter().position(|x| x == s)?;
            out.extend(self.realizations[i].get(mode)?.iter().cloned());
        }
        Some(out)
    }

    /// Target token → (symbol, mode, piece index).
    pub fn token_index(&self) -> HashMap<&str, (usize, usize, usize)> {
        let mut m = HashMap::new();
        for (s, modes) in self.realizations.iter().enumerate() {
            for (k, toks) in modes.iter().enumerate() {
                for (j, t) in toks.iter().enumerate() {
                    m.insert(t.as_str(), (s, k, j));
                }
            }
        }
        m
    }
}

/// A generated corpus with its oracle map and per-sentence modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub map: ModeMap,
    pub train: ParallelCorpus,
    pub train_modes: Vec<usize>,
    pub test: ParallelCorpus,
    pub test_modes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: SyntheticSpec,
    map: ModeMap,
    train_modes: Vec<usize>,
    test_modes: Vec<usize>,
}

impl SyntheticCorpus {
    /// Writes `train.{src,tgt}`, `test.{src,tgt}` and the `synth.json` sidecar.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.train.write(dir, "train")?;
        self.test.write(dir, "test")?;
        let side = Sidecar {
            spec: self.spec.clone(),
            map: self.map.clone(),
            train_modes: self.train_modes.clone(),
            test_modes: self.test_modes.clone(),
        };
        let p = dir.join("synth.json");
        let text = serde_json::to_string_pretty(&side)?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Reads the spec and mode map back from a `synth.json` sidecar.
    pub fn read_sidecar(path: &Path) -> Result<(SyntheticSpec, ModeMap)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        Ok((side.spec, side.map))
    }
}

const MAP_STREAM: u64 = u64::MAX;

fn build_mode_map(spec: &SyntheticSpec) -> ModeMap {
    let mut rng = keyed_rng(spec.seed, MAP_STREAM);
    let symbols: Vec<String> = (0..spec.num_symbols).map(|i| format!("s{i}")).collect();
    let realizations = (0..spec.num_symbols)
        .map(|s| {
            (0..spec.modes)
                .map(|k| {
                    let len = rng.random_range(spec.realization_len.0..=spec.realization_len.1);
                    (0..len).map(|j| format!("w{s}_{k}_{j}")).collect()
                })
                .collect()
        })
        .collect();
    ModeMap {
        symbols,
        realizations,
    }
}

/// Sentence `index` as (source symbols, mode); a pure function of `(seed, index)`.
fn sample_sentence(spec: &SyntheticSpec, index: u64) -> (Vec<usize>, usize) {
    let mut rng = keyed_rng(spec.seed, index);
    let len = rng.random_range(spec.sentence_len.0..=spec.sentence_len.1);
    let symbols = (0..len)
        .map(|_| rng.random_range(0..spec.num_symbols))
        .collect();
    let mode = rng.random_range(0..spec.modes);
    (symbols, mode)
}

/// Generates a synthetic multi-modal corpus. Sentences `0..size` form the training
/// split and `size..size+test_size` the test split; both share vocabularies.
pub fn gen_synthetic_multimodal(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let map = build_mode_map(spec);
    let sentences: Vec<(Vec<usize>, usize)> = (0..(spec.size + spec.test_size) as u64)
        .map(|i| sample_sentence(spec, i))
        .collect();

    let mut src_counts: HashMap<String, usize> =
        map.symbols.iter().map(|s| (s.clone(), 0)).collect();
    let mut tgt_counts: HashMap<String, usize> = map
        .realizations
        .iter()
        .flatten()
        .flatten()
        .map(|t| (t.clone(), 0))
        .collect();
    for (syms, mode) in &sentences[..spec.size] {
        for &s in syms {
            *src_counts.get_mut(&map.symbols[s]).expect("symbol") += 1;
            for t in &map.realizations[s][*mode] {
                *tgt_counts.get_mut(t).expect("token") += 1;
            }
        }
    }
    let src_vocab = Vocab::from_counts(&src_counts);
    let tgt_vocab = Vocab::from_counts(&tgt_counts);

    let make = |range: std::ops::Range<usize>, name: String| {
        let mut pairs = Vec::with_capacity(range.len());
        let mut modes = Vec::with_capacity(range.len());
        for (syms, mode) in &sentences[range] {
            let x = syms.iter().map(|&s| src_vocab.id(&map.symbols[s])).collect();
            let y = syms
                .iter()
                .flat_map(|&s| map.realizations[s][*mode].iter())
                .map(|t| tgt_vocab.id(t))
                .collect();
            pairs.push((x, y));
            modes.push(*mode);
        }
        let corpus = ParallelCorpus {
            name,
            pairs,
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
        };
        (corpus, modes)
    };
    let tag = format!("synthetic-M{}-seed{}", spec.modes, spec.seed);
    let (train, train_modes) = make(0..spec.size, tag.clone());
    let (test, test_modes) = make(spec.size..spec.size + spec.test_size, format!("{tag}-test"));
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        map,
        train,
        train_modes,
        test,
        test_modes,
    })
}

/// A padded mini-batch. Masks are `true` on real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Corpus indices of the pairs in this batch.
    pub indices: Vec<usize>,
    pub src: Vec<u32>,
    pub src_mask: Vec<bool>,
    pub src_width: usize,
    pub tgt: Vec<u32>,
    pub tgt_mask: Vec<bool>,
    pub tgt_width: usize,
}

impl Batch {
    pub fn from_pairs(indices: Vec<usize>, pairs: &[(&[u32], &[u32])]) -> Self {
        let src_width = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_width = pairs.iter().map(|p| p.1.len()).max().unwrap_or(0);
        let mut b = Batch {
            indices,
            src: Vec::with_capacity(pairs.len() * src_width),
            src_mask: Vec::with_capacity(pairs.len() * src_width),
            src_width,
            tgt: Vec::with_capacity(pairs.len() * tgt_width),
            tgt_mask: Vec::with_capacity(pairs.len() * tgt_width),
            tgt_width,
        };
        for (x, y) in pairs {
            for (ids, out, mask, w) in [
                (x, &mut b.src, &mut b.src_mask, src_width),
                (y, &mut b.tgt, &mut b.tgt_mask, tgt_width),
            ] {
                out.extend_from_slice(ids);
                mask.extend(std::iter::repeat_n(true, ids.len()));
                out.extend(std::iter::repeat_n(PAD, w - ids.len()));
                mask.extend(std::iter::repeat_n(false, w - ids.len()));
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn unpadded<'a>(ids: &'a [u32], mask: &[bool], width: usize, i: usize) -> &'a [u32] {
        let row = &ids[i * width..(i + 1) * width];
        let n = mask[i * width..(i + 1) * width]
            .iter()
            .take_while(|&&m| m)
            .count();
        &row[..n]
    }

    pub fn src_seq(&self, i: usize) -> &[u32] {
        Self::unpadded(&self.src, &self.src_mask, self.src_width, i)
    }

    pub fn tgt_seq(&self, i: usize) -> &[u32] {
        Self::unpadded(&self.tgt, &self.tgt_mask, self.tgt_width, i)
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }
}

/// Shuffles the corpus with a generator keyed by `(seed, epoch)` and cuts it into
/// consecutive batches whose target token count stays within `max_tokens`.
pub fn batch_iter(
    corpus: &ParallelCorpus,
    max_tokens: usize,
    seed: u64,
    epoch: u64,
) -> Result<std::vec::IntoIter<Batch>> {
    let longest = corpus.max_tgt_len();
    if max_tokens < longest {
        return Err(Error::Config(format!(
            "max_tokens {max_tokens} is smaller than the longest target ({longest})"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut keyed_rng(seed, epoch));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut tokens = 0;
    let flush = |current: &mut Vec<usize>, batches: &mut Vec<Batch>| {
        if current.is_empty() {
            return;
        }
        let pairs: Vec<(&[u32], &[u32])> = current
            .iter()
            .map(|&i| (corpus.pairs[i].0.as_slice(), corpus.pairs[i].1.as_slice()))
            .collect();
        batches.push(Batch::from_pairs(std::mem::take(current), &pairs));
    };
    for i in order {
        let len = corpus.pairs[i].1.len();
        if tokens + len > max_tokens {
            flush(&mut current, &mut batches);
            tokens = 0;
        }
        current.push(i);
        tokens += len;
    }
    flush(&mut current, &mut batches);
    Ok(batches.into_iter())
}

/// Exact per-symbol conditional entropy (nats) of the emitted targets given the source
/// symbol, counted from the generator's own modes. Oracle for aligner-based estimates.
pub fn empirical_mode_entropy(corpus: &SyntheticCorpus) -> f64 {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let symbol_of: HashMap<u32, usize> = corpus
        .map
        .symbols
        .iter()
        .enumerate()
        .map(|(i, s)| (corpus.train.src_vocab.id(s), i))
        .collect();
    for ((x, _), &mode) in corpus.train.pairs.iter().zip(&corpus.train_modes) {
        for id in x {
            *counts
                .entry(symbol_of[id])
                .or_default()
                .entry(mode)
                .or_default() += 1;
        }
    }
    let total: usize = counts.values().flat_map(|m| m.values()).sum();
    counts
        .values()
        .map(|m| {
            let n: usize = m.values().sum();
            let h: f64 = m
                .values()
                .map(|&c| {
                    let p = c as f64 / n as f64;
                    -p * p.ln()
                })
                .sum();
            n as f64 / total as f64 * h
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_single_pair() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "a.src", "a b\n");
        let t = write(d.path(), "a.tgt", "x y z\n");
        let c = load_parallel_corpus(&s, &t, None, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pairs[0].0.len(), 2);
        assert_eq!(c.pairs[0].1.len(), 3);
    }

    #[test]
    fn same_file_gives_identity_pairs() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "a.txt", "a b\nc a\n");
        let c = load_parallel_corpus(&s, &s, None, DEFAULT_MAX_LEN).unwrap();
        assert!(c.pairs.iter().all(|(x, y)| x == y));
    }

    #[test]
    fn line_count_mismatch_names_both_counts() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "a.src", "a\nb\nc\n");
        let t = write(d.path(), "a.tgt", "x\ny\n");
        let err = load_parallel_corpus(&s, &t, None, DEFAULT_MAX_LEN).unwrap_err();
        assert_eq!(err.to_string(), "line count 3 ≠ 2");
    }

    #[test]
    fn empty_line_reports_line_number() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "a.src", "a\n\nc\n");
        let t = write(d.path(), "a.tgt", "x\ny\nz\n");
        match load_parallel_corpus(&s, &t, None, DEFAULT_MAX_LEN) {
            Err(Error::EmptyLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oov_tokens_map_to_unk() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "a.src", "a q\n");
        let t = write(d.path(), "a.tgt", "x\n");
        let vocabs = (Vocab::from_words(["a"]), Vocab::from_words(["x"]));
        let c = load_parallel_corpus(&s, &t, Some(vocabs), DEFAULT_MAX_LEN).unwrap();
        assert_eq!(c.pairs[0].0, vec![4, UNK]);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographically() {
        let v = Vocab::build(["b a c", "c b", "c"]);
        assert_eq!(&v.tokens()[NUM_RESERVED..], &["c", "b", "a"]);
        let v = Vocab::build(["z y", "y z"]);
        assert_eq!(&v.tokens()[NUM_RESERVED..], &["y", "z"]);
        assert_eq!(v.decode(&v.encode("z y z")), "z y z");
    }

    #[test]
    fn single_mode_is_a_substitution() {
        let spec = SyntheticSpec {
            modes: 1,
            realization_len: (1, 1),
            size: 300,
            test_size: 0,
            ..SyntheticSpec::default()
        };
        let c = gen_synthetic_multimodal(&spec).unwrap();
        let mut seen: HashMap<u32, u32> = HashMap::new();
        for (x, y) in &c.train.pairs {
            assert_eq!(x.len(), y.len());
            for (a, b) in x.iter().zip(y) {
                assert_eq!(*seen.entry(*a).or_insert(*b), *b);
            }
        }
    }

    #[test]
    fn mode_one_sentences_never_use_mode_two_tokens() {
        let spec = SyntheticSpec {
            size: 500,
            test_size: 0,
            ..SyntheticSpec::default()
        };
        let c = gen_synthetic_multimodal(&spec).unwrap();
        let index = c.map.token_index();
        for ((_, y), &mode) in c.train.pairs.iter().zip(&c.train_modes) {
            for &t in y {
                assert_eq!(index[c.train.tgt_vocab.token(t)].1, mode);
            }
        }
    }

    #[test]
    fn every_pair_is_reproduced_by_the_mode_map() {
        let c = gen_synthetic_multimodal(&SyntheticSpec {
            size: 200,
            test_size: 50,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for (corpus, modes) in [(&c.train, &c.train_modes), (&c.test, &c.test_modes)] {
            for ((x, y), &k) in corpus.pairs.iter().zip(modes) {
                let src: Vec<&str> = x.iter().map(|&i| corpus.src_vocab.token(i)).collect();
                let rendered = c.map.render(&src, k).unwrap();
                assert_eq!(rendered.join(" "), corpus.tgt_vocab.decode(y));
            }
        }
    }

    #[test]
    fn equiprobable_modes_give_ln2_entropy() {
        let c = gen_synthetic_multimodal(&SyntheticSpec {
            realization_len: (1, 1),
            size: 20_000,
            test_size: 0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let h = empirical_mode_entropy(&c);
        assert!((h - 2f64.ln()).abs() < 0.01, "entropy {h}");
    }

    #[test]
    fn vocab_budget_is_enforced() {
        let spec = SyntheticSpec {
            num_symbols: 100,
            modes: 3,
            vocab_budget: 250,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic_multimodal(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            size: 100,
            test_size: 10,
            ..SyntheticSpec::default()
        };
        assert_eq!(
            gen_synthetic_multimodal(&spec).unwrap(),
            gen_synthetic_multimodal(&spec).unwrap()
        );
    }

    fn toy(lens: &[usize]) -> ParallelCorpus {
        ParallelCorpus {
            name: "toy".into(),
            pairs: lens
                .iter()
                .map(|&l| (vec![4; l], vec![4; l]))
                .collect(),
            src_vocab: Vocab::from_words(["a"]),
            tgt_vocab: Vocab::from_words(["a"]),
        }
    }

    #[test]
    fn huge_budget_gives_one_batch() {
        let b: Vec<_> = batch_iter(&toy(&[2, 3, 4]), 1_000, 1, 0).unwrap().collect();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 3);
        assert_eq!(b[0].tgt_width, 4);
        assert_eq!(b[0].target_tokens(), 9);
    }

    #[test]
    fn budget_arithmetic_caps_batches() {
        let b: Vec<_> = batch_iter(&toy(&[5, 5, 5]), 10, 3, 0).unwrap().collect();
        assert!(b.iter().all(|b| b.len() <= 2));
        assert_eq!(b.iter().map(Batch::len).sum::<usize>(), 3);
    }

    #[test]
    fn batching_is_a_function_of_seed_and_epoch() {
        let c = toy(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let a: Vec<_> = batch_iter(&c, 9, 11, 2).unwrap().collect();
        let b: Vec<_> = batch_iter(&c, 9, 11, 2).unwrap().collect();
        assert_eq!(a, b);
        let other: Vec<Vec<usize>> = batch_iter(&c, 100, 11, 3).unwrap().map(|b| b.indices).collect();
        let first: Vec<Vec<usize>> = batch_iter(&c, 100, 11, 2).unwrap().map(|b| b.indices).collect();
        assert_ne!(other, first);
    }

    #[test]
    fn too_small_budget_is_rejected() {
        assert!(batch_iter(&toy(&[5]), 4, 0, 0).is_err());
    }

    #[test]
    fn padding_masks_recover_sequences() {
        let b = Batch::from_pairs(vec![0, 1], &[(&[5, 6], &[7]), (&[5], &[7, 8, 9])]);
        assert_eq!(b.src, vec![5, 6, 5, PAD]);
        assert_eq!(b.src_seq(1), &[5]);
        assert_eq!(b.tgt_seq(1), &[7, 8, 9]);
        assert_eq!(b.tgt_mask, vec![true, false, false, true, true, true]);
    }
}
