//! The `tablatex` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;
use tablatex_core::augment::{self, preprocess};
use tablatex_core::ensemble::{self, Candidate, CandidateSet};
use tablatex_core::metrics::{self, SampleFlags, SimilarityMode};
use tablatex_core::model::{greedy_decode, Model, TeacherForced};
use tablatex_core::stats::{compute_stats, Distribution};
use tablatex_core::synth;
use tablatex_core::train::{Example, Trainer};
use tablatex_core::{ImageTensor, TokenSequence, Vocabulary};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{parse_override, parse_pairs, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{self, LabelRecord, PredRecord};

const CONFIG_HELP: &str = "\
Configuration is a flat text file of `key = value` lines (`#` starts a comment).
Any key can also be given with `--set key=value`, which wins over the file.
Keys: seed, task (tsr|tcr), min_count, max_seq_len,
  model.{profile,d_model,n_heads,n_decoder_layers,ffn_dim,max_decode_len,input_h,input_w,
         in_channels,downsample_factor,feac_enabled},
  optim.{lr,beta1,beta2,eps,lookahead_k,lookahead_alpha,gc_enabled,weight_decay,step_decay},
  augment.enabled, augment.<transform>.{enabled,prob,lo,hi},
  preprocess.{mode,mean,std},
  train.{batch_size,max_steps,target_loss,check_every,checkpoint_every,log_every},
  synth.{rows,cols,width,height,content,fill_prob,vrule_prob,hline_prob,max_digits}.
Transforms: shear, rotate, translate, scale, perspective, contrast, brightness, saturation.
`optim.step_decay` is a list like `1000:0.1,2000:0.1`; `optim.lookahead_k = 0` disables LookAhead.";

#[derive(Debug, Parser)]
#[command(name = "tablatex", version, about = "Table image to LaTeX recognition toolkit", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic table images and labels.
    #[command(after_help = CONFIG_HELP)]
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sequence-length and token-frequency statistics of a labels file.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for stats.json, seq_len.csv and token_freq.csv.
        #[arg(long)]
        out: PathBuf,
        /// Plot counts as ln(1 + count).
        #[arg(long)]
        log_scale: bool,
    },
    /// Build a vocabulary file from a labels file.
    #[command(after_help = CONFIG_HELP)]
    Tokenize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score predictions against ground truth.
    #[command(after_help = CONFIG_HELP)]
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Vocabulary file; by default one is built from both files.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample CSV of metric flags.
        #[arg(long)]
        per_sample: Option<PathBuf>,
        /// Measure similarity over characters rather than tokens.
        #[arg(long)]
        char_similarity: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model; progress is logged as JSON lines.
    #[command(after_help = CONFIG_HELP)]
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, vocabulary and config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint, optimizer state included.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Start from a checkpoint's weights with a fresh optimizer.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Vocabulary file; by default one is built from the training labels.
        #[arg(long, conflicts_with_all = ["resume", "init"])]
        vocab: Option<PathBuf>,
        /// Worker threads; training itself is always serial.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        threads: u32,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Greedy-decode images with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL with `id` and `image` fields.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        threads: u32,
    },
    /// Vote over several prediction files.
    Ensemble {
        /// Prediction file (repeat once per model).
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented copies of an image for inspection.
    #[command(after_help = CONFIG_HELP)]
    AugmentPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("ERROR 1: missing subcommand\n{e}");
                return 1;
            }
            let text = e.render().to_string();
            let body = text.strip_prefix("error: ").unwrap_or(&text);
            eprint!("ERROR 1: {body}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("ERROR {code}: {e}");
            code
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, n, config } => synth_cmd(&out, n, &load_config(&config, RunConfig::default())?),
        Command::Stats { data, out, log_scale } => stats_cmd(&data, &out, log_scale),
        Command::Tokenize { data, out, config } => tokenize_cmd(&data, &out, &load_config(&config, RunConfig::default())?),
        Command::Evaluate { pred, gt, vocab, out, per_sample, char_similarity, config } => {
            let cfg = load_config(&config, RunConfig::default())?;
            let mode = if char_similarity { SimilarityMode::Char } else { SimilarityMode::Token };
            evaluate_cmd(&pred, &gt, vocab.as_deref(), out.as_deref(), per_sample.as_deref(), mode, &cfg)
        }
        Command::Train { data, out, resume, init, vocab, threads: _, config } => {
            train_cmd(&data, &out, resume.as_deref(), init.as_deref(), vocab.as_deref(), &config)
        }
        Command::Predict { checkpoint, data, out, threads } => predict_cmd(&checkpoint, &data, &out, threads as usize),
        Command::Ensemble { preds, out } => ensemble_cmd(&preds, &out),
        Command::AugmentPreview { image, out, count, config } => {
            augment_preview_cmd(&image, &out, count, &load_config(&config, RunConfig::default())?)
        }
    }
}

/// `base`, then the config file, then `--set` overrides; validated.
pub fn load_config(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        cfg.apply(&parse_pairs(&formats::read_text(path)?)?)?;
    }
    cfg.apply(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(v: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
}

fn synth_cmd(out: &Path, n: usize, cfg: &RunConfig) -> Result<()> {
    let sc = cfg.synth_config();
    sc.validate()?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth::generate_one(&sc, i as u64)?;
        let rel = format!("images/{}.png", s.id);
        formats::save_png(&out.join(&rel), &s.image)?;
        records.push(LabelRecord { id: s.id, image: rel, label: s.label });
    }
    formats::write_text(&out.join("labels.jsonl"), &formats::jsonl_string(&records))?;
    emit(json!({"event": "synth", "samples": n}));
    Ok(())
}

fn stats_cmd(data: &Path, out: &Path, log_scale: bool) -> Result<()> {
    let recs: Vec<PredRecord> = formats::read_jsonl(data)?;
    let s = compute_stats(recs.iter().map(|r| r.label.as_str()));
    let report = json!({
        "n_samples": s.n_samples,
        "mean_seq_len": if s.mean_valid { json!(s.mean_seq_len) } else { serde_json::Value::Null },
        "seq_len_histogram": s.seq_len_histogram,
        "token_freq": s.token_freq,
    });
    let pretty = serde_json::to_string_pretty(&report).expect("json value") + "\n";
    formats::write_text(&out.join("stats.json"), &pretty)?;
    formats::write_text(&out.join("seq_len.csv"), &formats::xy_csv(&s.plot_data(Distribution::SequenceLength, log_scale)))?;
    formats::write_text(&out.join("token_freq.csv"), &formats::xy_csv(&s.plot_data(Distribution::TokenFrequency, log_scale)))?;
    Ok(())
}

fn tokenize_cmd(data: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let recs: Vec<PredRecord> = formats::read_jsonl(data)?;
    let v = Vocabulary::build(recs.iter().map(|r| r.label.as_str()), cfg.task, cfg.min_count)?;
    formats::write_text(out, &formats::vocab_to_string(&v))?;
    emit(json!({"event": "tokenize", "tokens": v.len(), "replaced": v.replaced().len()}));
    Ok(())
}

/// The JSON report: sample count then each metric with six decimals.
pub fn report_json(report: &metrics::MetricReport) -> String {
    let mut s = format!("{{\n  \"n\": {}", report.n);
    for (name, v) in SampleFlags::NAMES.iter().zip(report.values()) {
        let _ = write!(s, ",\n  \"{name}\": {v:.6}");
    }
    s.push_str("\n}\n");
    s
}

fn evaluate_cmd(
    pred: &Path,
    gt: &Path,
    vocab: Option<&Path>,
    out: Option<&Path>,
    per_sample: Option<&Path>,
    mode: SimilarityMode,
    cfg: &RunConfig,
) -> Result<()> {
    let p: Vec<PredRecord> = formats::read_jsonl(pred)?;
    let g: Vec<PredRecord> = formats::read_jsonl(gt)?;
    let pairs = formats::join_by_id(&p, &g)?;
    let v = match vocab {
        Some(path) => formats::read_vocab(path, cfg.task, cfg.max_seq_len)?,
        None => Vocabulary::build(p.iter().chain(&g).map(|r| r.label.as_str()), cfg.task, 1)?,
    };
    let seqs: Vec<(TokenSequence, TokenSequence)> = pairs
        .iter()
        .map(|(a, b)| (TokenSequence::new(v.encode_body(&a.label)), TokenSequence::new(v.encode_body(&b.label))))
        .collect();
    let report = metrics::evaluate(seqs.iter().map(|(a, b)| (a, b)), &v, mode)?;
    let text = report_json(&report);
    match out {
        Some(path) => formats::write_text(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = per_sample {
        let mut csv = format!("id,{}\n", SampleFlags::NAMES.join(","));
        for ((_, g), flags) in pairs.iter().zip(&report.per_sample) {
            let cols: Vec<&str> = flags.as_array().iter().map(|&b| if b { "1" } else { "0" }).collect();
            let _ = writeln!(csv, "{},{}", formats::csv_field(&g.id), cols.join(","));
        }
        formats::write_text(path, &csv)?;
    }
    Ok(())
}

/// An input line for `train` and `predict`.
#[derive(Debug, Clone, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub label: Option<String>,
}

/// Loads and preprocesses the images a JSONL file refers to (paths relative
/// to the file's directory).
pub fn load_images(list: &Path, records: &[ImageRecord], cfg: &RunConfig) -> Result<Vec<ImageTensor>> {
    let base = list.parent().unwrap_or(Path::new(""));
    let m = &cfg.model;
    let pp = &cfg.preprocess;
    records
        .iter()
        .map(|r| {
            let img = formats::load_image(&base.join(&r.image), m.in_channels)?;
            Ok(preprocess(&img, m.input_w, m.input_h, pp.mode, &pp.mean, &pp.std)?)
        })
        .collect()
}

fn train_cmd(
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    init: Option<&Path>,
    vocab_path: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let ckpt: Option<Checkpoint> = resume.or(init).map(checkpoint::load).transpose()?;
    let base = match (&ckpt, resume) {
        (Some(c), Some(_)) => c.config.clone(),
        _ => RunConfig::default(),
    };
    let cfg = load_config(args, base)?;
    let records: Vec<ImageRecord> = formats::read_jsonl(data)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no training samples", data.display())));
    }
    let labels = records
        .iter()
        .map(|r| r.label.as_deref().ok_or_else(|| Error::Data(format!("sample {} has no label", r.id))))
        .collect::<Result<Vec<&str>>>()?;
    let vocab = match (&ckpt, vocab_path) {
        (Some(c), _) => c.vocab.clone(),
        (None, Some(p)) => formats::read_vocab(p, cfg.task, cfg.max_seq_len)?,
        (None, None) => Vocabulary::build(labels.iter().copied(), cfg.task, cfg.min_count)?,
    }
    .with_max_seq_len(cfg.max_seq_len);
    let images = load_images(data, &records, &cfg)?;
    let examples = records
        .iter()
        .zip(&labels)
        .zip(images)
        .map(|((r, label), image)| {
            let len = label.split_whitespace().count();
            if len > cfg.max_seq_len {
                return Err(Error::Data(format!("sample {}: {len} tokens exceeds max_seq_len {}", r.id, cfg.max_seq_len)));
            }
            Ok(Example { image, target: TeacherForced::from_sequence(&vocab.encode(label).ids)? })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trainer = match (ckpt, resume) {
        (Some(c), Some(_)) => {
            checkpoint::ensure_same_model(&c, &cfg)?;
            let mut t = c.trainer;
            t.optim_config = cfg.optim.clone();
            t
        }
        (Some(c), None) => {
            checkpoint::ensure_same_model(&c, &cfg)?;
            Trainer::new(c.trainer.model, cfg.optim.clone())?
        }
        (None, _) => Trainer::new(Model::new(cfg.model_config(vocab.len()), cfg.model_seed())?, cfg.optim.clone())?,
    };
    formats::write_text(&out.join("vocab.txt"), &formats::vocab_to_string(&vocab))?;
    formats::write_text(&out.join("config.txt"), &cfg.to_text())?;
    emit(json!({"event": "start", "step": trainer.step_count(), "samples": examples.len(), "vocab": vocab.len(), "params": trainer.model.n_params()}));

    let tc = cfg.train_config();
    let ts = &cfg.train;
    let mut failure: Option<Error> = None;
    let last = trainer.run(&examples, &tc, |t, r| {
        if !r.loss.is_finite() {
            failure = Some(Error::Numeric(format!("non-finite loss at step {}", r.step)));
            return false;
        }
        if r.step % ts.log_every == 0 || r.step == tc.max_steps {
            emit(json!({"event": "step", "step": r.step, "loss": r.loss, "lr": r.lr}));
        }
        if ts.checkpoint_every > 0 && r.step % ts.checkpoint_every == 0 {
            let path = out.join(format!("checkpoint-{:06}.ckpt", r.step));
            if let Err(e) = checkpoint::save(&path, &cfg, &vocab, t) {
                failure = Some(e);
                return false;
            }
        }
        true
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    checkpoint::save(&out.join("final.ckpt"), &cfg, &vocab, &trainer)?;
    let step = trainer.step_count();
    let reason = if step >= tc.max_steps { "max_steps" } else { "target_loss" };
    emit(json!({"event": "done", "step": step, "stopped": reason, "last_loss": last.map(|r| r.loss)}));
    Ok(())
}

/// Greedy predictions for every image, split across `threads` workers.
pub fn predict_images(model: &Model<f32>, vocab: &Vocabulary, images: &[ImageTensor], threads: usize) -> Result<Vec<(String, f64)>> {
    let one = |img: &ImageTensor| -> Result<(String, f64)> {
        let out = greedy_decode(model, img)?;
        Ok((vocab.decode_ids(&out.sequence.ids)?, out.mean_logprob))
    };
    if threads <= 1 || images.len() < 2 {
        return images.iter().map(one).collect();
    }
    let chunk = images.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut all = Vec::with_capacity(images.len());
        for h in handles {
            all.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(all)
    })
}

fn predict_cmd(ckpt_path: &Path, data: &Path, out: &Path, threads: usize) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let records: Vec<ImageRecord> = formats::read_jsonl(data)?;
    let images = load_images(data, &records, &ckpt.config)?;
    let preds = predict_images(&ckpt.trainer.model, &ckpt.vocab, &images, threads)?;
    let out_recs: Vec<PredRecord> = records
        .iter()
        .zip(preds)
        .map(|(r, (label, lp))| PredRecord { id: r.id.clone(), label, logprob: Some(lp) })
        .collect();
    formats::write_text(out, &formats::jsonl_string(&out_recs))
}

/// Votes per id across prediction sets; output follows the first set's order.
pub fn ensemble_records(sets: &[Vec<PredRecord>]) -> Result<Vec<PredRecord>> {
    let first = sets.first().ok_or_else(|| Error::Usage("ensemble needs at least one prediction file".into()))?;
    let mut by_id: Vec<BTreeMap<&str, &PredRecord>> = Vec::new();
    for set in sets {
        formats::join_by_id(set, first)?;
        by_id.push(set.iter().map(|r| (r.id.as_str(), r)).collect());
    }
    let mut intern: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(first.len());
    for rec in first {
        let members: Vec<&PredRecord> = by_id.iter().map(|m| m[rec.id.as_str()]).collect();
        let candidates = members
            .iter()
            .enumerate()
            .map(|(tag, r)| {
                let ids = r
                    .label
                    .split_whitespace()
                    .map(|t| {
                        let next = intern.len();
                        *intern.entry(t).or_insert(next)
                    })
                    .collect();
                Candidate { ids, mean_logprob: r.logprob.unwrap_or(0.0), model_tag: tag }
            })
            .collect();
        let cs = CandidateSet { sample_id: rec.id.clone(), candidates };
        let winner = members[ensemble::vote_index(&cs)?];
        out.push(winner.clone());
    }
    Ok(out)
}

fn ensemble_cmd(preds: &[PathBuf], out: &Path) -> Result<()> {
    let sets = preds.iter().map(|p| formats::read_jsonl(p)).collect::<Result<Vec<Vec<PredRecord>>>>()?;
    formats::write_text(out, &formats::jsonl_string(&ensemble_records(&sets)?))
}

fn augment_preview_cmd(image: &Path, out: &Path, count: usize, cfg: &RunConfig) -> Result<()> {
    cfg.augment.validate()?;
    let img = formats::load_image(image, 1)?;
    let policy = cfg.augment_policy();
    formats::save_png(&out.join("original.png"), &img)?;
    for i in 0..count {
        let o = augment::apply(&policy, &img, i as u64);
        formats::save_png(&out.join(format!("augmented-{i:03}.png")), &o.image)?;
        emit(json!({
            "event": "augment",
            "index": i,
            "geometric_skipped": o.geometric_skipped,
            "clamped": o.clamped,
            "params": format!("{:?}", o.params),
        }));
    }
    Ok(())
}
