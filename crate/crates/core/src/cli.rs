//! Command-line front end. `cmd_dispatch` returns the process exit code:
//! 0 success, 1 usage error, 2 data/config/checkpoint error, 3 runtime failure.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, manifest_for, model_from_checkpoint, read_manifest_file, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    ingest_corpus, mask_corpus, pairs_text, parse_annotations, read_pairs, split_dataset, AnchorRules, EntityPick,
    MaskSpec, MaskStrategy, CLOSED_CLASS_WORDS,
};
use crate::error::{Error, Result};
use crate::infer::{evaluate, fill_all, DecodeMode, DecodeOptions};
use crate::model::{AnyModel, InfillModel, ModelKind};
use crate::position::{PositionConfig, PositionKind};
use crate::seq2seq::{Seq2Seq, Seq2SeqConfig};
use crate::synth::{gen_synth, Preset};
use crate::template::Template;
use crate::tensor::{DType, Scalar};
use crate::train::{metrics_csv, train, AdamConfig, ScheduleConfig, TrainOptions};
use crate::transformer::{InfillTransformer, ModelConfig};
use crate::vocab::Vocab;

#[derive(Parser, Debug)]
#[command(name = "textinfill", about = "Text infilling with a segment-aware transformer", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (corpus.txt).
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build a vocabulary (vocab.txt) from a corpus.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long)]
        min_freq: Option<usize>,
    },
    /// Mask a corpus into template/original pairs and splits.
    Mask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        blanks: Option<usize>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        word_list: Option<PathBuf>,
    },
    /// Train a model on train.tsv/valid.tsv of a data directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        precision: Option<String>,
    },
    /// Fill templates (one per line) with a trained model.
    Infill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also write per-token log-probabilities.
        #[arg(long)]
        logprobs: bool,
    },
    /// BLEU and perplexity of a model on a pair file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Data(_)
        | Error::Format(_)
        | Error::Checkpoint { .. }
        | Error::PositionOverflow { .. }
        | Error::Index(_) => 2,
        Error::NonFinite(_) | Error::Io(_) | Error::Shape(_) | Error::Contract(_) => 3,
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn cmd_dispatch<S: AsRef<str>>(argv: &[S]) -> i32 {
    let args: Vec<&str> = argv.iter().map(AsRef::as_ref).collect();
    if args.len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("{}", cmd.render_help());
        return 1;
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("INFILL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("INFILL_THREADS='{v}' is not a positive integer")))?;
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.resolved_text())?;
    Ok(())
}

fn s<T: ToString>(x: &Option<T>) -> Option<String> {
    x.as_ref().map(ToString::to_string)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { common, preset, n } => {
            let cfg = resolve(&common, &[("synth.preset", preset), ("synth.n", s(&n))])?;
            prepare_out(&common.out, &cfg)?;
            let text = gen_synth(Preset::parse(cfg.str("synth.preset"))?, cfg.usize("synth.n"), cfg.u64("seed"))?;
            let path = common.out.join("corpus.txt");
            std::fs::write(&path, text)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::BuildVocab { common, corpus, max_size, min_freq } => {
            let cfg = resolve(&common, &[("data.vocab_max_size", s(&max_size)), ("data.vocab_min_freq", s(&min_freq))])?;
            prepare_out(&common.out, &cfg)?;
            let sents = ingest(&corpus, &cfg)?;
            let vocab = Vocab::build(sents, cfg.usize("data.vocab_max_size"), cfg.usize("data.vocab_min_freq"))?;
            let path = common.out.join("vocab.txt");
            vocab.save(&path)?;
            eprintln!("wrote {} ({} tokens, sha256 {})", path.display(), vocab.len(), vocab.content_hash());
            Ok(())
        }
        Command::Mask { common, corpus, strategy, rate, blanks, annotations, word_list } => {
            let cfg = resolve(
                &common,
                &[
                    ("mask.strategy", strategy),
                    ("mask.rate", s(&rate)),
                    ("mask.blanks", s(&blanks)),
                    ("mask.annotations", annotations.map(|p| p.display().to_string())),
                    ("mask.word_list", word_list.map(|p| p.display().to_string())),
                ],
            )?;
            prepare_out(&common.out, &cfg)?;
            cmd_mask(&corpus, &common.out, &cfg)
        }
        Command::Train { common, data, vocab, init, epochs, max_steps, batch_size, precision } => {
            let cfg = resolve(
                &common,
                &[
                    ("train.epochs", s(&epochs)),
                    ("train.max_steps", s(&max_steps)),
                    ("train.batch_size", s(&batch_size)),
                    ("train.precision", precision),
                ],
            )?;
            prepare_out(&common.out, &cfg)?;
            let vocab = Vocab::load(&vocab)?;
            match DType::parse(cfg.str("train.precision"))? {
                DType::F32 => cmd_train::<f32>(&data, &vocab, init.as_deref(), &common.out, &cfg),
                DType::F64 => cmd_train::<f64>(&data, &vocab, init.as_deref(), &common.out, &cfg),
            }
        }
        Command::Infill { common, checkpoint, vocab, input, logprobs } => {
            let cfg = resolve(&common, &[])?;
            prepare_out(&common.out, &cfg)?;
            let vocab = Vocab::load(&vocab)?;
            match read_manifest_file(&checkpoint)?.dtype()? {
                DType::F32 => cmd_infill::<f32>(&checkpoint, &vocab, &input, logprobs, &common.out, &cfg),
                DType::F64 => cmd_infill::<f64>(&checkpoint, &vocab, &input, logprobs, &common.out, &cfg),
            }
        }
        Command::Evaluate { common, checkpoint, vocab, test } => {
            let cfg = resolve(&common, &[])?;
            prepare_out(&common.out, &cfg)?;
            let vocab = Vocab::load(&vocab)?;
            match read_manifest_file(&checkpoint)?.dtype()? {
                DType::F32 => cmd_evaluate::<f32>(&checkpoint, &vocab, &test, &common.out, &cfg),
                DType::F64 => cmd_evaluate::<f64>(&checkpoint, &vocab, &test, &common.out, &cfg),
            }
        }
    }
}

fn ingest(corpus: &Path, cfg: &RunConfig) -> Result<Vec<Vec<String>>> {
    ingest_corpus(corpus, cfg.usize("data.min_len"), cfg.usize("data.max_len"), cfg.bool("data.lowercase"))
}

fn cmd_mask(corpus: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let sents = ingest(corpus, cfg)?;
    let strategy = match cfg.str("mask.strategy") {
        "random" => MaskStrategy::Random { rate: cfg.f64("mask.rate"), blanks: cfg.usize("mask.blanks") },
        "anchor" => MaskStrategy::Anchor {
            rules: AnchorRules {
                keep_numbers: cfg.bool("mask.keep_numbers"),
                entity: EntityPick::parse(cfg.str("mask.keep_entity"))?,
            },
            annotations: match cfg.path("mask.annotations") {
                Some(p) => Some(parse_annotations(&std::fs::read_to_string(p)?)?),
                None => None,
            },
        },
        _ => {
            let words: HashSet<String> = match cfg.path("mask.word_list") {
                Some(p) => std::fs::read_to_string(p)?.split_whitespace().map(str::to_lowercase).collect(),
                None => CLOSED_CLASS_WORDS.iter().map(|w| w.to_string()).collect(),
            };
            MaskStrategy::ClosedClass { words, blanks: cfg.usize("mask.blanks") }
        }
    };
    let spec = MaskSpec { strategy, seed: cfg.u64("seed") };
    let (examples, stats) = mask_corpus(&sents, &spec)?;
    if stats.skipped > 0 {
        eprintln!("warning: {} of {} sentences could not be masked and were skipped", stats.skipped, stats.sentences);
    }
    let (tr, va, te) =
        split_dataset(&examples, cfg.f64("data.valid_fraction"), cfg.f64("data.test_fraction"), cfg.u64("seed"))?;
    std::fs::write(out.join("pairs.tsv"), pairs_text(&examples))?;
    std::fs::write(out.join("train.tsv"), pairs_text(&tr))?;
    std::fs::write(out.join("valid.tsv"), pairs_text(&va))?;
    std::fs::write(out.join("test.tsv"), pairs_text(&te))?;
    std::fs::write(out.join("stats.json"), stats.to_json())?;
    eprintln!(
        "masked {} sentences ({} train / {} valid / {} test), realized mask rate {:.4}",
        stats.examples,
        tr.len(),
        va.len(),
        te.len(),
        stats.realized_mask_rate
    );
    Ok(())
}

fn position_config(cfg: &RunConfig) -> Result<PositionConfig> {
    Ok(PositionConfig {
        base: cfg.usize("position.base"),
        kind: PositionKind::parse(cfg.str("position.kind"))?,
        max_segments: cfg.usize("position.max_segments"),
    })
}

/// Fresh model described by the `model.*` and `position.*` keys.
pub fn build_model<T: Scalar>(cfg: &RunConfig, vocab_size: usize) -> Result<AnyModel<T>> {
    let position = position_config(cfg)?;
    let seed = cfg.u64("seed");
    match ModelKind::parse(cfg.str("model.kind"))? {
        ModelKind::SelfAttn => {
            let mc = ModelConfig {
                d_model: cfg.usize("model.d_model"),
                num_blocks: cfg.usize("model.num_blocks"),
                num_heads: cfg.usize("model.num_heads"),
                ffn_dim: cfg.usize("model.ffn_dim"),
                dropout: cfg.f64("model.dropout"),
                vocab_size,
                position,
            };
            Ok(AnyModel::SelfAttn(InfillTransformer::new(mc, seed)?))
        }
        ModelKind::Seq2Seq => {
            let sc = Seq2SeqConfig {
                embedding_size: cfg.usize("model.d_model"),
                num_units: cfg.usize("model.num_units"),
                dropout: cfg.f64("model.dropout"),
                vocab_size,
                position,
            };
            Ok(AnyModel::Seq2Seq(Seq2Seq::new(sc, seed)?))
        }
    }
}

fn cmd_train<T: Scalar>(data: &Path, vocab: &Vocab, init: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<()> {
    let train_set = read_pairs(&data.join("train.tsv"))?;
    let valid_path = data.join("valid.tsv");
    let valid_set = if valid_path.exists() { read_pairs(&valid_path)? } else { Vec::new() };
    let hash = vocab.content_hash();
    let mut model: AnyModel<T> = match init {
        Some(p) => {
            let (manifest, params) = load_checkpoint::<T>(p)?;
            manifest.check_vocab_hash(&hash)?;
            model_from_checkpoint(&manifest, params, None)?
        }
        None => build_model(cfg, vocab.len())?,
    };
    let d_model = model
        .config_entries()
        .into_iter()
        .find(|(k, _)| k == "model.d_model")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or_else(|| cfg.usize("model.d_model"));
    let opts = TrainOptions {
        batch_size: cfg.usize("train.batch_size"),
        epochs: cfg.usize("train.epochs"),
        max_steps: cfg.u64("train.max_steps"),
        schedule: ScheduleConfig::new(cfg.f64("train.lr_const"), cfg.u64("train.warmup_steps"), d_model)?,
        adam: AdamConfig::default(),
        valid_every: cfg.u64("train.valid_every"),
        log_every: cfg.u64("train.log_every"),
        seed: cfg.u64("seed"),
    };
    let result = train(&mut model, &train_set, &valid_set, vocab, &opts)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&result.metrics))?;
    let last = manifest_for(&model, &hash, result.steps);
    save_checkpoint(&out.join("last.ckpt"), model.params(), &last)?;
    let best = manifest_for(&model, &hash, result.best_step);
    save_checkpoint(&out.join("model.ckpt"), &result.best_params, &best)?;
    match result.best_val_ppl {
        Some(p) => eprintln!("trained {} steps; best validation perplexity {p:.4} at step {}", result.steps, result.best_step),
        None => eprintln!("trained {} steps", result.steps),
    }
    Ok(())
}

fn decode_options(cfg: &RunConfig) -> Result<DecodeOptions> {
    let mode = match cfg.str("decode.mode") {
        "greedy" => DecodeMode::Greedy,
        _ => DecodeMode::Sample { temperature: cfg.f64("decode.temperature") },
    };
    let opts = DecodeOptions { mode, max_blank_len: cfg.usize("decode.max_blank_len"), seed: cfg.u64("seed") };
    opts.validate()?;
    Ok(opts)
}

fn load_for_inference<T: Scalar>(checkpoint: &Path, vocab: &Vocab) -> Result<AnyModel<T>> {
    let (manifest, params) = load_checkpoint::<T>(checkpoint)?;
    manifest.check_vocab_hash(&vocab.content_hash())?;
    model_from_checkpoint(&manifest, params, None)
}

fn cmd_infill<T: Scalar>(
    checkpoint: &Path,
    vocab: &Vocab,
    input: &Path,
    logprobs: bool,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let model = load_for_inference::<T>(checkpoint, vocab)?;
    let opts = decode_options(cfg)?;
    let text = std::fs::read_to_string(input)?;
    let templates = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Template::parse(l.split('\t').next().unwrap_or("")))
        .collect::<Result<Vec<_>>>()?;
    let fills = fill_all(&model, &templates, vocab, &opts);
    let (mut filled, mut meta, mut lp) = (String::new(), String::from("line\tseg_id\tlength\ttruncated\n"), String::new());
    lp.push_str("line\tseg_id\tindex\ttoken\tlogprob\n");
    for (i, f) in fills.into_iter().enumerate() {
        let f = f?;
        filled.push_str(&f.sentence()?.join(" "));
        filled.push('\n');
        for b in &f.blanks {
            meta.push_str(&format!("{i}\t{}\t{}\t{}\n", b.seg_id, b.tokens.len(), b.truncated));
            for (j, x) in b.logprobs.iter().enumerate() {
                let tok = b.tokens.get(j).map(String::as_str).unwrap_or("<eob>");
                lp.push_str(&format!("{i}\t{}\t{j}\t{tok}\t{x}\n", b.seg_id));
            }
        }
    }
    std::fs::write(out.join("filled.txt"), filled)?;
    std::fs::write(out.join("infill.meta.tsv"), meta)?;
    if logprobs {
        std::fs::write(out.join("logprobs.tsv"), lp)?;
    }
    eprintln!("filled {} templates", templates.len());
    Ok(())
}

fn cmd_evaluate<T: Scalar>(checkpoint: &Path, vocab: &Vocab, test: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let model = load_for_inference::<T>(checkpoint, vocab)?;
    let opts = decode_options(cfg)?;
    let examples = read_pairs(test)?;
    let ev = evaluate(&model, &examples, vocab, &opts)?;
    std::fs::write(out.join("report.txt"), ev.report.to_table())?;
    std::fs::write(out.join("report.kv"), ev.report.to_kv())?;
    std::fs::write(out.join("fills.txt"), ev.fills_text()?)?;
    std::fs::write(out.join("token_nll.tsv"), ev.logprob_dump())?;
    print!("{}", ev.report.to_table());
    Ok(())
}
