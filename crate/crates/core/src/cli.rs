//! Command-line front end: `build-vocab`, `pretrain`, `align` and `eval`.
//!
//! Every command also accepts `--config FILE` with `key = value` lines whose
//! keys are the long flag names (dashes or underscores). Flags win over the
//! file; unknown keys are an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::align::{align_attention, align_ot, DocAlignment};
use crate::checkpoint;
use crate::corpus::{
    build_vocab, load_content, load_corpus, load_entity_pairs, read_lines, tokenize, Document,
    EntityPairSet, Vocab,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ot::{write_alignment_csv, IpotConfig};
use crate::phrase::PhrasePool;
use crate::train::{
    CeaVariant, MaskingPolicy, ReportRecord, ReportWriter, TrainConfig, TrainState,
};

#[derive(Debug, Parser)]
#[command(
    name = "ahmcea",
    version,
    about = "Phrase-aware masked LM pre-training and entity alignment",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a `token<TAB>id` vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model: adaptive masked LM, then masked LM plus alignment.
    Pretrain(Box<PretrainArgs>),
    /// Write alignment matrices for entity pairs as CSV.
    Align(AlignArgs),
    /// Reconstruction accuracy by masked span length.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Optional `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus, one document per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output vocabulary file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Drop words seen fewer times than this [default: 1].
    #[arg(long)]
    pub min_freq: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Optional `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary from `build-vocab`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Pre-training corpus, one document per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Phrase pool, `phrase<TAB>score` per line.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Entity pairs, `id_a<TAB>id_b`; required when stage 2 runs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Entity content, `id<TAB>text`; required when stage 2 runs.
    #[arg(long)]
    pub content: Option<PathBuf>,
    /// Held-out corpus for per-epoch reconstruction accuracy.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// Receives `model.ckpt` and `report.jsonl`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Pool entries scoring below this are ignored [default: 0.5].
    #[arg(long)]
    pub min_score: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the alignment loss in stage 2; 0 skips it.
    #[arg(long)]
    pub cea_weight: Option<f64>,
    /// `ot` or `attention`.
    #[arg(long)]
    pub cea_variant: Option<CeaVariant>,
    /// `adaptive`, `word` or `phrase`.
    #[arg(long)]
    pub masking: Option<MaskingPolicy>,
    #[arg(long)]
    pub warm_iters: Option<u64>,
    #[arg(long)]
    pub warm_alpha: Option<f64>,
    /// Pin alpha after warm-up.
    #[arg(long)]
    pub fixed_alpha: Option<f64>,
    /// Force an idle masking mode after this many iterations; 0 disables.
    #[arg(long)]
    pub max_idle: Option<u64>,
    #[arg(long)]
    pub ipot_iters: Option<usize>,
    #[arg(long)]
    pub ipot_beta: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub reset_scheduler: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub attention_scaled: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub attention_joint: Option<bool>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Progress line every this many iterations; 0 prints epochs only [default: 50].
    #[arg(long)]
    pub log_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Optional `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Entity content, `id<TAB>text`.
    #[arg(long)]
    pub content: Option<PathBuf>,
    /// Align every pair in this file.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Align one pair of entity ids; repeatable.
    #[arg(long, num_args = 2, value_names = ["ID_A", "ID_B"])]
    pub pair: Vec<String>,
    /// Align two literal texts; repeatable.
    #[arg(long, num_args = 2, value_names = ["TEXT_A", "TEXT_B"])]
    pub text: Vec<String>,
    /// `ot` for the transport plan, `attention` for attention weights [default: ot].
    #[arg(long)]
    pub variant: Option<CeaVariant>,
    #[arg(long)]
    pub ipot_iters: Option<usize>,
    #[arg(long)]
    pub ipot_beta: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Optional `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation corpus, one document per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output CSV [default: eval.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Longest span length scored [default: 4].
    #[arg(long)]
    pub max_span: Option<usize>,
}

/// `key = value` settings from a config file, consumed key by key.
struct Settings {
    path: PathBuf,
    values: BTreeMap<String, (usize, String)>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut s = Settings {
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            values: BTreeMap::new(),
        };
        let Some(path) = path else { return Ok(s) };
        for (i, line) in read_lines(path)?.iter().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            let key = k.trim().replace('-', "_");
            if s.values
                .insert(key.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
        }
        Ok(s)
    }

    /// The flag if given, else the file's value, else `None`.
    fn take<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        let Some((line, raw)) = from_file else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|e| Error::Parse {
            path: self.path.clone(),
            line,
            message: format!("bad value for `{key}`: {e}"),
        })
    }

    fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            Some((key, (line, _))) => Err(Error::Parse {
                path: self.path,
                line,
                message: format!("unknown key `{key}`"),
            }),
            None => Ok(()),
        }
    }
}

fn required(value: Option<PathBuf>, key: &str) -> Result<PathBuf> {
    value.ok_or_else(|| {
        Error::Config(format!(
            "missing {key} (pass --{} or set `{key}` in the config file)",
            key.replace('_', "-")
        ))
    })
}

/// Process exit status for an error: 3 for a numerical abort, otherwise 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Pretrain(a) => cmd_pretrain(*a),
        Command::Align(a) => cmd_align(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_build_vocab(args: BuildVocabArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let corpus = s.take("corpus", args.corpus)?;
    let out = s.take("out", args.out)?;
    let min_freq = s.take("min_freq", args.min_freq)?.unwrap_or(1);
    s.finish()?;
    let (corpus, out) = (required(corpus, "corpus")?, required(out, "out")?);

    let vocab = build_vocab(&corpus, min_freq)?;
    vocab.save(&out)?;
    let lines = read_lines(&corpus)?;
    println!(
        "vocab size {} coverage {:.4}",
        vocab.len(),
        vocab.coverage(lines.iter().map(String::as_str))
    );
    Ok(())
}

struct PretrainPlan {
    train: TrainConfig,
    encoder: EncoderConfig,
    vocab: PathBuf,
    corpus: PathBuf,
    pool: PathBuf,
    pairs: Option<(PathBuf, PathBuf)>,
    eval_corpus: Option<PathBuf>,
    out_dir: PathBuf,
    min_score: f64,
    log_every: u64,
}

fn resolve_pretrain(a: PretrainArgs) -> Result<PretrainPlan> {
    let mut s = Settings::load(a.config.as_deref())?;
    let mut t = TrainConfig::desk();
    let mut e = EncoderConfig::new(0, 0);
    macro_rules! set {
        ($target:expr, $key:literal, $flag:expr) => {
            if let Some(v) = s.take($key, $flag)? {
                $target = v;
            }
        };
    }
    set!(t.seed, "seed", a.seed);
    set!(t.stage1_epochs, "stage1_epochs", a.stage1_epochs);
    set!(t.stage2_epochs, "stage2_epochs", a.stage2_epochs);
    set!(t.batch_size, "batch_size", a.batch_size);
    set!(t.learning_rate, "learning_rate", a.learning_rate);
    set!(t.cea_weight, "cea_weight", a.cea_weight);
    set!(t.cea_variant, "cea_variant", a.cea_variant);
    set!(t.masking, "masking", a.masking);
    set!(t.warm_iters, "warm_iters", a.warm_iters);
    set!(t.warm_alpha, "warm_alpha", a.warm_alpha);
    t.fixed_alpha = s.take("fixed_alpha", a.fixed_alpha)?;
    set!(t.max_idle, "max_idle", a.max_idle);
    set!(t.ipot.outer_iters, "ipot_iters", a.ipot_iters);
    set!(t.ipot.beta, "ipot_beta", a.ipot_beta);
    set!(t.reset_scheduler, "reset_scheduler", a.reset_scheduler);
    set!(t.attention_scaled, "attention_scaled", a.attention_scaled);
    set!(t.attention_joint, "attention_joint", a.attention_joint);
    set!(e.layers, "layers", a.layers);
    set!(e.dim, "dim", a.dim);
    set!(e.heads, "heads", a.heads);
    set!(e.ffn_dim, "ffn_dim", a.ffn_dim);
    set!(e.max_seq_len, "max_seq_len", a.max_seq_len);
    let vocab = s.take("vocab", a.vocab)?;
    let corpus = s.take("corpus", a.corpus)?;
    let pool = s.take("pool", a.pool)?;
    let pairs = s.take("pairs", a.pairs)?;
    let content = s.take("content", a.content)?;
    let eval_corpus = s.take("eval_corpus", a.eval_corpus)?;
    let out_dir = s.take("out_dir", a.out_dir)?;
    let min_score = s.take("min_score", a.min_score)?.unwrap_or(0.5);
    let log_every = s.take("log_every", a.log_every)?.unwrap_or(50);
    s.finish()?;

    t.validate()?;
    // Vocabulary sizes are filled in from the files; only the shape is checked here.
    let mut probe = e.clone();
    probe.vocab_size = 1;
    probe.validate()?;
    let pairs = if t.stage2_epochs > 0 {
        Some((required(pairs, "pairs")?, required(content, "content")?))
    } else {
        None
    };
    Ok(PretrainPlan {
        train: t,
        encoder: e,
        vocab: required(vocab, "vocab")?,
        corpus: required(corpus, "corpus")?,
        pool: required(pool, "pool")?,
        pairs,
        eval_corpus,
        out_dir: required(out_dir, "out_dir")?,
        min_score,
        log_every,
    })
}

fn progress(record: &ReportRecord, log_every: u64) {
    match record {
        ReportRecord::Iter(r) => {
            if log_every == 0 || r.iter % log_every != 0 {
                return;
            }
            let mut line = format!("iter {} stage {}", r.iter, r.stage);
            if let Some(m) = r.mode {
                line.push_str(&format!(" mode {m}"));
            }
            for (name, v) in [
                ("l_w", r.l_w),
                ("l_p", r.l_p),
                ("l_cea", r.l_cea),
                ("l_triplet", r.l_triplet),
            ] {
                if let Some(v) = v {
                    line.push_str(&format!(" {name} {v:.4}"));
                }
            }
            eprintln!("{line} alpha {:.3}", r.alpha);
        }
        ReportRecord::Epoch(r) => {
            let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "epoch {} stage {} iter {} word_acc {} phrase_acc {} {:.1}s",
                r.epoch,
                r.stage,
                r.iter,
                fmt(r.word_acc),
                fmt(r.phrase_acc),
                r.wall_time_s
            );
        }
    }
}

pub fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let plan = resolve_pretrain(args)?;
    let vocab = Vocab::load(&plan.vocab)?;
    let (pool, stats) = PhrasePool::load(&plan.pool, &vocab, plan.min_score)?;
    eprintln!(
        "pool: {} phrases ({} below threshold, {} with unknown words, {} too short, {} duplicates)",
        pool.len(),
        stats.below_threshold,
        stats.with_unknown,
        stats.too_short,
        stats.duplicates
    );
    let max_len = plan.encoder.max_seq_len;
    let corpus = load_corpus(&plan.corpus, &vocab, max_len)?;
    let pairs = match &plan.pairs {
        Some((pairs, content)) => {
            let (set, st) = load_entity_pairs(pairs, content, &vocab, max_len)?;
            eprintln!(
                "pairs: {} kept ({} missing content, {} self, {} duplicates)",
                set.len(),
                st.dropped_missing,
                st.dropped_self,
                st.duplicates
            );
            set
        }
        None => EntityPairSet::default(),
    };
    let eval = match &plan.eval_corpus {
        Some(p) => Some(load_corpus(p, &vocab, max_len)?),
        None => None,
    };
    create_dir(&plan.out_dir)?;
    let report_path = plan.out_dir.join("report.jsonl");
    let file = File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let mut report = ReportWriter::new(BufWriter::new(file));

    let mut state = TrainState::new(plan.encoder, plan.train, vocab, pool)?;
    let log_every = plan.log_every;
    let mut sink = |r: &ReportRecord| {
        progress(r, log_every);
        report.write(r).map_err(|e| Error::io(&report_path, e))
    };
    state.run_stage1(&corpus, eval.as_deref(), None, &mut sink)?;
    state.run_stage2(&pairs, eval.as_deref(), None, &mut sink)?;
    report
        .into_inner()
        .flush()
        .map_err(|e| Error::io(&report_path, e))?;
    let ckpt = plan.out_dir.join("model.ckpt");
    checkpoint::save(&state, &ckpt)?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn labels(vocab: &Vocab, doc: &Document, positions: &[usize]) -> Vec<String> {
    positions
        .iter()
        .map(|&p| vocab.token(doc.tokens[p]).to_string())
        .collect()
}

pub fn cmd_align(args: AlignArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let checkpoint = s.take("checkpoint", args.checkpoint)?;
    let content = s.take("content", args.content)?;
    let pairs_path = s.take("pairs", args.pairs)?;
    let variant = s.take("variant", args.variant)?.unwrap_or(CeaVariant::Ot);
    let mut ipot = IpotConfig::default();
    if let Some(v) = s.take("ipot_iters", args.ipot_iters)? {
        ipot.outer_iters = v;
    }
    if let Some(v) = s.take("ipot_beta", args.ipot_beta)? {
        ipot.beta = v;
    }
    let out_dir = s.take("out_dir", args.out_dir)?;
    s.finish()?;
    if !(ipot.beta > 0.0) || ipot.outer_iters == 0 {
        return Err(Error::Config(
            "ipot needs beta > 0 and at least one iteration".into(),
        ));
    }
    let out_dir = required(out_dir, "out_dir")?;
    let state = checkpoint::load(&required(checkpoint, "checkpoint")?)?;
    let (vocab, max_len) = (&state.vocab, state.encoder.max_seq_len);

    let mut jobs: Vec<(String, Document, Document)> = Vec::new();
    if !args.pair.is_empty() || pairs_path.is_some() {
        let content_path = required(content, "content")?;
        let content = load_content(&content_path, vocab, max_len)?;
        let mut ids: Vec<(String, String)> = args
            .pair
            .chunks(2)
            .map(|c| (c[0].clone(), c[1].clone()))
            .collect();
        if let Some(p) = &pairs_path {
            let (set, stats) = load_entity_pairs(p, &content_path, vocab, max_len)?;
            if stats.dropped_missing > 0 {
                return Err(Error::Config(format!(
                    "{}: {} pairs name an entity with no content",
                    p.display(),
                    stats.dropped_missing
                )));
            }
            ids.extend(set.pairs);
        }
        for (a, b) in ids {
            let doc = |id: &str| {
                content
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown entity id `{id}`")))
            };
            jobs.push((format!("{a}__{b}"), doc(&a)?, doc(&b)?));
        }
    }
    for (k, t) in args.text.chunks(2).enumerate() {
        jobs.push((
            format!("text{k}"),
            tokenize(&t[0], vocab, max_len),
            tokenize(&t[1], vocab, max_len),
        ));
    }
    if jobs.is_empty() {
        return Err(Error::Config(
            "nothing to align: pass --pair, --pairs or --text".into(),
        ));
    }

    create_dir(&out_dir)?;
    let model = state.model();
    for (name, a, b) in &jobs {
        let al: Option<DocAlignment> = match variant {
            CeaVariant::Ot => align_ot(&model, a, b, &ipot)?,
            CeaVariant::Attention => align_attention(&model, a, b, state.config.attention_scaled)?,
        };
        let Some(al) = al else {
            eprintln!("{name}: skipped, a side has no tokens");
            continue;
        };
        let path = out_dir.join(format!("{name}.csv"));
        write_alignment_csv(
            &path,
            &labels(vocab, a, &al.rows),
            &labels(vocab, b, &al.cols),
            &al.matrix,
        )?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let checkpoint = s.take("checkpoint", args.checkpoint)?;
    let corpus = s.take("corpus", args.corpus)?;
    let out = s
        .take("out", args.out)?
        .unwrap_or_else(|| PathBuf::from("eval.csv"));
    let max_span = s.take("max_span", args.max_span)?.unwrap_or(4);
    s.finish()?;
    if max_span == 0 {
        return Err(Error::Config("max_span must be at least 1".into()));
    }
    let state = checkpoint::load(&required(checkpoint, "checkpoint")?)?;
    let docs = load_corpus(
        &required(corpus, "corpus")?,
        &state.vocab,
        state.encoder.max_seq_len,
    )?;
    let spans: Vec<usize> = (1..=max_span).collect();
    let table = state.evaluate(&docs, &spans)?;

    let io = |e: csv::Error| Error::io(&out, e.into());
    let mut w = csv::Writer::from_path(&out).map_err(io)?;
    w.write_record(["span_len", "n_examples", "accuracy"])
        .map_err(io)?;
    println!("span_len n_examples accuracy");
    for row in &table {
        let acc = row.accuracy.map_or("NA".to_string(), |a| format!("{a:.6}"));
        println!("{} {} {}", row.span_len, row.n_examples, acc);
        w.write_record([row.span_len.to_string(), row.n_examples.to_string(), acc])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&out, e))
}
