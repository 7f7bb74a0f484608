//! `lglat`: corpus synthesis, training, decoding, evaluation, complexity analysis,
//! latency benchmarking and codebook inspection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_glat::checkpoint::{load_checkpoint, save_checkpoint};
use latent_glat::complexity::{self, complexity_table, discretize_corpus};
use latent_glat::data::{gen_synthetic_multimodal, load_parallel_corpus, ModeMap, SyntheticCorpus, SyntheticSpec};
use latent_glat::eval::evaluate;
use latent_glat::inference::{benchmark_latency, decode_at, decode_parallel, DEFAULT_GAMMA, DEFAULT_LENBEAM};
use latent_glat::model::{Mode, ModelConfig};
use latent_glat::training::{DecoderLatents, MetricsLog, TrainConfig, Trainer};
use latent_glat::Error;
use log::info;
use serde::{Deserialize, Serialize};

type BoxError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "lglat", version, about = "Latent-variable glancing non-autoregressive translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal parallel corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a JSON-lines metrics log.
    Train(TrainArgs),
    /// Translate a source file with a trained checkpoint.
    Decode(DecodeArgs),
    /// Score hypotheses against references (BLEU, exact match, mode consistency).
    Eval(EvalArgs),
    /// Token- and sentence-level complexity of a corpus (optionally of its latent codes).
    Analyze(AnalyzeArgs),
    /// Batch-1 decoding latency of several checkpoints against an autoregressive one.
    Bench(BenchArgs),
    /// Dump codebook usage counts and vector norms as JSON.
    InspectCodebook(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for train/test files and the synth.json sidecar.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a partial synthetic spec; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target realizations per source symbol [default: 2]
    #[arg(long)]
    modes: Option<usize>,
    /// Source symbol inventory size [default: 40]
    #[arg(long)]
    num_symbols: Option<usize>,
    /// Training pairs [default: 10000]
    #[arg(long)]
    size: Option<usize>,
    /// Held-out test pairs [default: 1000]
    #[arg(long)]
    test_size: Option<usize>,
    /// Shortest source sentence [default: 4]
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest source sentence [default: 12]
    #[arg(long)]
    max_len: Option<usize>,
    /// Generator seed [default: 7]
    #[arg(long)]
    seed: Option<u64>,
}

/// Everything that determines a training run, after merging file and flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    train_src: Option<PathBuf>,
    train_tgt: Option<PathBuf>,
    gamma: Option<f64>,
    lenbeam: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory (checkpoint.bin, metrics.jsonl, config.json).
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration (`{"model": {...}, "train": {...}, ...}`); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.src and train.tgt (e.g. from `synth`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Source side of the training corpus.
    #[arg(long)]
    train_src: Option<PathBuf>,
    /// Target side of the training corpus.
    #[arg(long)]
    train_tgt: Option<PathBuf>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also save checkpoint-<step>.bin every this many steps.
    #[arg(long)]
    save_every: Option<u64>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Default)]
struct HyperArgs {
    /// at | nat | glat | latent-glat [default: latent-glat]
    #[arg(long)]
    mode: Option<Mode>,
    /// Codebook size [default: 64, the best setting in the ablation over K]
    #[arg(long = "K")]
    k: Option<usize>,
    /// Length penalty used by self-reranking [default: 1.1]
    #[arg(long)]
    gamma: Option<f64>,
    /// Initial glancing ratio [default: 0.5]
    #[arg(long)]
    tau_start: Option<f64>,
    /// Final glancing ratio [default: 0.3]
    #[arg(long)]
    tau_end: Option<f64>,
    /// Weight of the length loss [default: 0.1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Training steps [default: 8000]
    #[arg(long)]
    steps: Option<u64>,
    /// Initial learning rate [default: 3e-4]
    #[arg(long)]
    lr_start: Option<f64>,
    /// Final learning rate [default: 1e-5]
    #[arg(long)]
    lr_end: Option<f64>,
    /// Master seed for data order, glancing, init and codebook reseeding [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of length candidates at decoding time [default: 6]
    #[arg(long)]
    lenbeam: Option<usize>,
    /// Longest sequence the model accepts [default: 64]
    #[arg(long)]
    max_len: Option<usize>,
    /// Model width [default: 64]
    #[arg(long)]
    d_model: Option<usize>,
    /// Feed-forward width [default: 128]
    #[arg(long)]
    d_hidden: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    n_head: Option<usize>,
    /// Layers in each of encoder, latent predictor and decoder [defaults: 2/4/4]
    #[arg(long)]
    layers: Option<usize>,
    /// Dropout probability [default: 0.1]
    #[arg(long)]
    dropout: Option<f64>,
    /// Target tokens per batch [default: 1024]
    #[arg(long)]
    batch_tokens: Option<usize>,
    /// Decoder latent positions in training: shared (the latent predictor's glance) | uniform [default: shared]
    #[arg(long)]
    decoder_latents: Option<DecoderLatents>,
}

impl HyperArgs {
    fn apply(&self, rc: &mut RunConfig) {
        let (m, t) = (&mut rc.model, &mut rc.train);
        if let Some(v) = self.mode {
            m.mode = v;
            t.mode = v;
        }
        macro_rules! set {
            ($($flag:ident => $dst:expr),* $(,)?) => {$(if let Some(v) = self.$flag { $dst = v; })*};
        }
        set!(k => m.k, tau_start => t.tau_start, tau_end => t.tau_end, alpha => t.alpha,
            steps => t.total_steps, lr_start => t.lr_start, lr_end => t.lr_end, seed => t.seed,
            max_len => m.max_len, d_model => m.d_model, d_hidden => m.d_hidden, n_head => m.n_head,
            dropout => m.dropout, batch_tokens => t.batch_tokens, decoder_latents => t.decoder_latents);
        if let Some(l) = self.layers {
            m.enc_layers = l;
            m.lp_layers = l;
            m.dec_layers = l;
        }
        if self.gamma.is_some() {
            rc.gamma = self.gamma;
        }
        if self.lenbeam.is_some() {
            rc.lenbeam = self.lenbeam;
        }
        // The model mode is authoritative when only a config file set it.
        t.mode = m.mode;
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    src: PathBuf,
    /// Hypotheses file (one sentence per line).
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON-lines trace of length candidates per sentence.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Length penalty [default: 1.1]
    #[arg(long)]
    gamma: Option<f64>,
    /// Length candidates [default: 6]
    #[arg(long)]
    lenbeam: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// synth.json sidecar; enables mode consistency.
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Latent-GLAT checkpoint; adds an "Inputs ↔ z" row.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// EM iterations [default: 5]
    #[arg(long, default_value_t = complexity::DEFAULT_ITERS)]
    iters: usize,
    /// Diagonal preference of the alignment prior [default: 4]
    #[arg(long, default_value_t = complexity::DEFAULT_TENSION)]
    tension: f64,
    /// Also write the reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoints to compare; one must be autoregressive.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Use only the first N sentences.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_LENBEAM)]
    lenbeam: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BoxError> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BoxError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, BoxError> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn tokens(lines: &[String]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

/// Path of the resolved-config file written next to an output file.
fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

fn synth(a: SynthArgs) -> Result<(), BoxError> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.modes {
        spec.modes = v;
    }
    if let Some(v) = a.num_symbols {
        spec.num_symbols = v;
    }
    if let Some(v) = a.size {
        spec.size = v;
    }
    if let Some(v) = a.test_size {
        spec.test_size = v;
    }
    if let Some(v) = a.min_len {
        spec.sentence_len.0 = v;
    }
    if let Some(v) = a.max_len {
        spec.sentence_len.1 = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let corpus = gen_synthetic_multimodal(&spec)?;
    corpus.write(&a.out)?;
    write_json(&a.out.join("config.json"), &spec)?;
    info!("wrote {} train and {} test pairs to {}", corpus.train.len(), corpus.test.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), BoxError> {
    let mut rc: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        rc.train_src = Some(d.join("train.src"));
        rc.train_tgt = Some(d.join("train.tgt"));
    }
    if a.train_src.is_some() {
        rc.train_src = a.train_src.clone();
    }
    if a.train_tgt.is_some() {
        rc.train_tgt = a.train_tgt.clone();
    }
    a.hyper.apply(&mut rc);
    let (Some(src), Some(tgt)) = (rc.train_src.clone(), rc.train_tgt.clone()) else {
        return Err(Box::new(Error::Config("training data missing: pass --data or --train-src/--train-tgt".into())));
    };

    let (mut trainer, corpus) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let vocabs = ck.src_vocab.zip(ck.tgt_vocab);
            let corpus = load_parallel_corpus(&src, &tgt, vocabs, ck.trainer.model.config.max_len)?;
            rc.model = ck.trainer.model.config.clone();
            rc.train = ck.trainer.config.clone();
            (ck.trainer, corpus)
        }
        None => {
            let corpus = load_parallel_corpus(&src, &tgt, None, rc.model.max_len)?;
            rc.model.src_vocab = corpus.src_vocab.len();
            rc.model.tgt_vocab = corpus.tgt_vocab.len();
            (Trainer::new(rc.model.clone(), rc.train.clone())?, corpus)
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    write_json(&a.out.join("config.json"), &rc)?;

    let metrics_path = a.out.join("metrics.jsonl");
    let file = if a.resume.is_some() {
        File::options().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| format!("{}: {e}", metrics_path.display()))?;
    let mut log = MetricsLog::new(BufWriter::new(file));
    let vocabs = (corpus.src_vocab.clone(), corpus.tgt_vocab.clone());
    let total = trainer.config.total_steps;
    while trainer.step < total {
        let batch = trainer.next_batch(&corpus)?;
        let losses = trainer.train_step(&batch)?;
        log.record(&losses)?;
        if losses.step % 100 == 0 || losses.step == total {
            info!(
                "step {} loss {:.4} (wp {:.4} lp {:.4} len {:.4}) tau {:.3} lr {:.2e}",
                losses.step, losses.loss_total, losses.loss_wp, losses.loss_lp, losses.loss_len, losses.tau, losses.lr
            );
        }
        if let Some(every) = a.save_every {
            if every > 0 && trainer.step % every == 0 && trainer.step < total {
                let p = a.out.join(format!("checkpoint-{}.bin", trainer.step));
                save_checkpoint(&p, &trainer, Some((&vocabs.0, &vocabs.1)))?;
            }
        }
    }
    log.into_inner().flush()?;
    save_checkpoint(&a.out.join("checkpoint.bin"), &trainer, Some((&vocabs.0, &vocabs.1)))?;
    Ok(())
}

#[derive(Serialize)]
struct DecodeConfig<'a> {
    checkpoint: &'a Path,
    src: &'a Path,
    gamma: f64,
    lenbeam: usize,
    model: &'a ModelConfig,
}

#[derive(Serialize)]
struct TraceCandidate {
    m: usize,
    logprob: f64,
    score: f64,
}

#[derive(Serialize)]
struct TraceLine {
    m_hat: usize,
    candidates: Vec<TraceCandidate>,
    chosen: usize,
}

fn decode(a: DecodeArgs) -> Result<(), BoxError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = &ck.trainer.model;
    let (Some(sv), Some(tv)) = (&ck.src_vocab, &ck.tgt_vocab) else {
        return Err(Box::new(Error::Config("checkpoint carries no vocabularies".into())));
    };
    let gamma = a.gamma.unwrap_or(DEFAULT_GAMMA);
    let lenbeam = a.lenbeam.unwrap_or(DEFAULT_LENBEAM);
    let srcs: Vec<Vec<u32>> = read_lines(&a.src)?.iter().map(|l| sv.encode(l)).collect();
    if let Some(p) = srcs.iter().position(|s| s.is_empty() || s.len() > model.config.max_len) {
        return Err(format!("{}: line {} is empty or longer than max_len", a.src.display(), p + 1).into());
    }
    let mut out = String::new();
    let mut trace = String::new();
    for src in &srcs {
        let hyp = if model.config.mode == Mode::At {
            decode_at(model, src)?.0
        } else {
            let d = decode_parallel(model, &[src.as_slice()], gamma, lenbeam)?.remove(0);
            let line = TraceLine {
                m_hat: d.m_hat,
                candidates: d
                    .candidates
                    .iter()
                    .map(|c| TraceCandidate {
                        m: c.m,
                        logprob: c.logprob,
                        score: c.score,
                    })
                    .collect(),
                chosen: d.chosen,
            };
            trace.push_str(&serde_json::to_string(&line)?);
            trace.push('\n');
            d.best().y_hat.clone()
        };
        out.push_str(&tv.decode(&hyp));
        out.push('\n');
    }
    fs::write(&a.out, out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    if let Some(p) = &a.trace {
        fs::write(p, trace).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    write_json(
        &sidecar_path(&a.out),
        &DecodeConfig {
            checkpoint: &a.checkpoint,
            src: &a.src,
            gamma,
            lenbeam,
            model: &model.config,
        },
    )?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), BoxError> {
    let hyps = tokens(&read_lines(&a.hyps)?);
    let refs = tokens(&read_lines(&a.refs)?);
    let map: Option<ModeMap> = match &a.synth {
        Some(p) => Some(SyntheticCorpus::read_sidecar(p)?.1),
        None => None,
    };
    let report = evaluate(&hyps, &refs, map.as_ref())?;
    print!("{}", report.table());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<(), BoxError> {
    let corpus = load_parallel_corpus(&a.src, &a.tgt, None, usize::MAX)?;
    let mut reports = vec![complexity::analyze(&corpus, a.iters, a.tension)?];
    if let Some(p) = &a.checkpoint {
        let ck = load_checkpoint(p)?;
        let vocabs = ck.src_vocab.zip(ck.tgt_vocab);
        let aligned = load_parallel_corpus(&a.src, &a.tgt, vocabs, ck.trainer.model.config.max_len)?;
        let z = discretize_corpus(&aligned, &ck.trainer.model)?;
        reports.push(complexity::analyze(&z, a.iters, a.tension)?);
    }
    print!("{}", complexity_table(&reports));
    if let Some(p) = &a.out {
        write_json(p, &reports)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), BoxError> {
    let cks = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &cks[0];
    let sv = first
        .src_vocab
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint carries no vocabularies".into()))?;
    let mut lines = read_lines(&a.src)?;
    if let Some(n) = a.limit {
        lines.truncate(n);
    }
    let srcs: Vec<Vec<u32>> = lines.iter().map(|l| sv.encode(l)).collect();
    let refs: Vec<&[u32]> = srcs.iter().map(Vec::as_slice).collect();
    let models: Vec<(String, _)> = a
        .checkpoints
        .iter()
        .zip(&cks)
        .map(|(p, c)| (p.display().to_string(), &c.trainer.model))
        .collect();
    let report = benchmark_latency(&models, &refs, a.reps, a.gamma, a.lenbeam)?;
    println!("{:<40}{:>12}{:>10}{:>10}{:>10}", "model", "mode", "ms/sent", "speedup", "passes");
    for r in &report.rows {
        println!(
            "{:<40}{:>12}{:>10.3}{:>9.2}×{:>10.1}",
            r.name, r.mode, r.median_ms, r.speedup, r.passes_per_sentence
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), BoxError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let book = ck
        .trainer
        .model
        .codebook
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} has no codebook (mode {})", a.checkpoint.display(), ck.trainer.model.config.mode)))?;
    let text = serde_json::to_string_pretty(&book.dump())? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| format!("{}: {e}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Bench(a) => bench(a),
        Command::InspectCodebook(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
