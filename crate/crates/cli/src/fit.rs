//! `classify` and `train`: topic classifier and curriculum training.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ctxseq::corpus::{load_dialogue, load_qa, LabelSet, Vocabulary};
use ctxseq::seq2seq::{DecoderKind, ModelConfig};
use ctxseq::topic_cnn::{accuracy, cnn_train, CnnConfig, CnnParams, CnnTrainConfig, LabeledText};
use ctxseq::trainer::{
    checkpoint_load, dialogue_pairs, encoder_load, encoder_save, parse_history, qa_pairs,
    StageConfig, StageData, StageKind, TrainConfig, Trainer,
};
use ctxseq::write_atomic;

use crate::common::{
    existing_vocab, labels_text, log_config, resolve_labels, Failure, LABELS_FILE, VOCAB_FILE,
};
use crate::config::{record, ConfigFile};

/// File name of the topic encoder written next to trained checkpoints.
pub const ENCODER_FILE: &str = "topic.enc";

// ── classify ─────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Labeled question-answer corpus (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Settings file with `[cnn]` and `[cnn_train]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cross-validation folds (at least 2).
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out labeled corpus scored by the final classifier.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Vocabulary file; defaults to `vocab.txt` next to the data.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Where to save the classifier trained on all of `--data`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn corpus_vocab(flag: Option<&Path>, anchor: &Path, texts: &[String]) -> Result<Vocabulary> {
    match existing_vocab(flag, anchor)? {
        Some(v) => Ok(v),
        None => Ok(Vocabulary::build(texts, 1)?),
    }
}

fn resolve_cnn(file: &ConfigFile, vocab: &Vocabulary, labels: &LabelSet) -> Result<CnnConfig> {
    let mut config = file.apply("cnn", CnnConfig::default())?;
    config.vocab_size = vocab.len();
    config.k_topics = labels.len();
    config.validate()?;
    Ok(config)
}

pub fn classify(args: ClassifyArgs) -> Result<()> {
    let mut file = ConfigFile::load_optional(args.config.as_deref())?;
    file.only_sections(&["cnn", "cnn_train"])?;
    for (key, value) in [
        ("folds", args.folds.map(|v| v as u64)),
        ("epochs", args.epochs.map(|v| v as u64)),
        ("seed", args.seed),
    ] {
        if let Some(v) = value {
            file.set("cnn_train", key, v)?;
        }
    }
    let train_config = file.apply("cnn_train", CnnTrainConfig::default())?;
    if train_config.folds < 2 {
        return Err(Failure::Usage(format!(
            "--folds must be at least 2, got {}",
            train_config.folds
        ))
        .into());
    }
    let labels = resolve_labels(&args.data)?;
    let examples = load_qa(&args.data, &labels)?;
    let texts: Vec<String> = examples
        .iter()
        .flat_map(|e| [e.question.clone(), e.answer.clone()])
        .collect();
    let vocab = corpus_vocab(args.vocab.as_deref(), &args.data, &texts)?;
    let cnn_config = resolve_cnn(&file, &vocab, &labels)?;
    log_config(
        "classify",
        &[
            ("cnn", record(&cnn_config)),
            ("cnn_train", record(&train_config)),
        ],
    );

    let data = LabeledText::from_qa(&examples, &vocab);
    let (cnn, report) = cnn_train(&data, cnn_config, &train_config)?;
    print!("{}", report.to_text());
    if let Some(test) = &args.test {
        let held = LabeledText::from_qa(&load_qa(test, &labels)?, &vocab);
        println!("test: {:.4}", accuracy(&cnn, &held)?);
    }
    if let Some(out) = &args.out {
        encoder_save(out, &cnn, &vocab.hash())?;
        let dir = out.parent().unwrap_or(Path::new("."));
        write_atomic(&dir.join(VOCAB_FILE), vocab.to_file_string().as_bytes())?;
        write_atomic(&dir.join(LABELS_FILE), labels_text(&labels).as_bytes())?;
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Decoder kind, or `all` for every kind under identical seeds.
    #[arg(long)]
    pub model: Option<String>,
    /// Question-answer corpus for the first stage.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Dialogue corpus for the second stage.
    #[arg(long)]
    pub stage2: Option<PathBuf>,
    /// Settings file with `[train]`, `[stage1]`, `[stage2]`, `[model]`,
    /// `[cnn]` and `[cnn_train]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue the run saved in this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Pre-trained topic encoder (from `classify --out`).
    #[arg(long)]
    pub cnn: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Stop each model after this many epochs; `--resume` continues it.
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

struct Stage {
    config: StageConfig,
    path: PathBuf,
}

fn resolve_stages(file: &ConfigFile, args: &TrainArgs) -> Result<Vec<Stage>> {
    let mut stages = Vec::new();
    for (section, kind, flag, epochs) in [
        ("stage1", StageKind::Qa, &args.stage1, args.stage1_epochs),
        (
            "stage2",
            StageKind::Dialogue,
            &args.stage2,
            args.stage2_epochs,
        ),
    ] {
        let mut config = file.apply(section, StageConfig::new(kind, 1))?;
        if let Some(p) = flag {
            config.path = Some(p.clone());
        }
        if let Some(e) = epochs {
            config.epochs = e;
        }
        if let Some(path) = config.path.clone() {
            stages.push(Stage { config, path });
        }
    }
    if stages.is_empty() {
        return Err(Failure::Usage("give at least one of --stage1 and --stage2".into()).into());
    }
    Ok(stages)
}

fn parse_kinds(model: Option<&str>) -> Result<Vec<DecoderKind>> {
    match model.unwrap_or("all") {
        "all" => Ok(DecoderKind::ALL.to_vec()),
        name => Ok(vec![name
            .parse()
            .map_err(|e: ctxseq::Error| Failure::Usage(e.to_string()))?]),
    }
}

/// Topic encoder from `--cnn`, or trained on the first QA stage.
fn topic_encoder(
    args: &TrainArgs,
    file: &ConfigFile,
    stages: &[Stage],
    vocab: &Vocabulary,
    labels: Option<&LabelSet>,
    seed: u64,
) -> Result<(CnnParams, Option<CnnTrainConfig>)> {
    if let Some(path) = &args.cnn {
        let (cnn, hash) = encoder_load(path)
            .with_context(|| format!("loading topic encoder {}", path.display()))?;
        if hash != vocab.hash() {
            return Err(Failure::Compatibility(format!(
                "topic encoder {} was trained on another vocabulary",
                path.display()
            ))
            .into());
        }
        return Ok((cnn, None));
    }
    let (Some(stage), Some(labels)) = (
        stages.iter().find(|s| s.config.kind == StageKind::Qa),
        labels,
    ) else {
        return Err(Failure::Usage(
            "context decoders need --cnn or a labeled question-answer stage".into(),
        )
        .into());
    };
    let train_config = file.apply(
        "cnn_train",
        CnnTrainConfig {
            folds: 0,
            seed,
            ..CnnTrainConfig::default()
        },
    )?;
    let cnn_config = resolve_cnn(file, vocab, labels)?;
    let data = LabeledText::from_qa(&load_qa(&stage.path, labels)?, vocab);
    let (cnn, report) = cnn_train(&data, cnn_config, &train_config)?;
    eprintln!("topic encoder train accuracy {:.4}", report.train_accuracy);
    Ok((cnn, Some(train_config)))
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut file = ConfigFile::load_optional(args.config.as_deref())?;
    file.only_sections(&["train", "stage1", "stage2", "model", "cnn", "cnn_train"])?;
    if let Some(seed) = args.seed {
        file.set("train", "seed", seed)?;
    }
    let stages = resolve_stages(&file, &args)?;
    let mut config = file.apply("train", TrainConfig::default())?;
    config.stages = stages.iter().map(|s| s.config.clone()).collect();

    let resumed = args
        .resume
        .as_ref()
        .map(|p| checkpoint_load(p).map(|ck| (p, ck)))
        .transpose()?;
    let out = match (&args.out, &resumed) {
        (Some(o), _) => o.clone(),
        (None, Some((p, _))) => p.parent().unwrap_or(Path::new(".")).to_path_buf(),
        (None, None) => return Err(Failure::Usage("--out is required".into()).into()),
    };
    config.checkpoint_dir = Some(out.clone());
    config.validate()?;

    let anchor = &stages[0].path;
    let labels = match stages.iter().find(|s| s.config.kind == StageKind::Qa) {
        Some(s) => Some(resolve_labels(&s.path)?),
        None => None,
    };
    let mut qa = Vec::new();
    let mut dialogues = Vec::new();
    for s in &stages {
        match s.config.kind {
            StageKind::Qa => {
                let labels = labels.as_ref().expect("resolved for QA stages");
                qa.push(load_qa(&s.path, labels)?);
            }
            StageKind::Dialogue => dialogues.push(load_dialogue(&s.path)?),
        }
    }
    let texts: Vec<String> = qa
        .iter()
        .flatten()
        .flat_map(|e| [e.question.clone(), e.answer.clone()])
        .chain(dialogues.iter().flatten().flat_map(|d| d.turns.clone()))
        .collect();
    let vocab = corpus_vocab(args.vocab.as_deref(), anchor, &texts)?;
    let mut qa_iter = qa.iter();
    let mut dialogue_iter = dialogues.iter();
    let mut data = Vec::new();
    for s in &stages {
        let pairs = match s.config.kind {
            StageKind::Qa => qa_pairs(
                qa_iter.next().expect("one per stage"),
                &vocab,
                config.max_context_len,
            ),
            StageKind::Dialogue => dialogue_pairs(
                dialogue_iter.next().expect("one per stage"),
                &vocab,
                s.config.window,
                config.max_context_len,
            )?,
        };
        data.push(StageData::split(
            pairs,
            config.held_out_fraction,
            config.seed,
        ));
    }

    write_atomic(&out.join(VOCAB_FILE), vocab.to_file_string().as_bytes())?;
    if let Some(l) = &labels {
        write_atomic(&out.join(LABELS_FILE), labels_text(l).as_bytes())?;
    }

    let mut trainers = Vec::new();
    let mut logged: Vec<(&str, serde_json::Value)> = vec![("train", record(&config))];
    if let Some((path, ck)) = resumed {
        if ck.vocab_hash != vocab.hash() {
            return Err(Failure::Compatibility(
                "checkpoint was trained on another vocabulary".into(),
            )
            .into());
        }
        if let Some(name) = &args.model {
            if parse_kinds(Some(name))? != vec![ck.model.kind()] {
                return Err(Failure::Usage(format!(
                    "--model {name} conflicts with the {} checkpoint",
                    ck.model.kind()
                ))
                .into());
            }
        }
        let history_path = path.with_extension("history.csv");
        let history = match std::fs::read_to_string(&history_path) {
            Ok(text) => parse_history(&text)?,
            Err(_) => Vec::new(),
        };
        logged.push(("model", record(&ck.model.config)));
        log_config("train", &logged);
        eprintln!(
            "resuming {} at stage {} epoch {}",
            ck.model.kind(),
            ck.progress.stage,
            ck.progress.epoch
        );
        trainers.push(Trainer::resume(ck, history)?);
    } else {
        let kinds = parse_kinds(args.model.as_deref())?;
        let k_topics = labels
            .as_ref()
            .map_or(CnnConfig::default().k_topics, LabelSet::len);
        let base = file.apply(
            "model",
            ModelConfig {
                k_topics,
                ..ModelConfig::new(kinds[0], vocab.len())
            },
        )?;
        let cnn = if kinds.iter().any(|k| k.uses_context()) {
            let (cnn, cnn_train) =
                topic_encoder(&args, &file, &stages, &vocab, labels.as_ref(), config.seed)?;
            encoder_save(&out.join(ENCODER_FILE), &cnn, &vocab.hash())?;
            Some((cnn, cnn_train))
        } else {
            None
        };
        logged.push(("model", record(&base)));
        if let Some((cnn, cnn_train)) = &cnn {
            logged.push(("cnn", record(&cnn.config)));
            if let Some(t) = cnn_train {
                logged.push(("cnn_train", record(t)));
            }
        }
        log_config("train", &logged);
        for kind in kinds {
            let model_config = ModelConfig {
                kind,
                vocab_size: vocab.len(),
                ..base.clone()
            };
            trainers.push(Trainer::new(
                model_config,
                cnn.as_ref().map(|c| c.0.clone()),
                &config,
                &vocab.hash(),
            )?);
        }
    }
    if trainers
        .iter()
        .any(|t| t.model.config.vocab_size != vocab.len())
    {
        bail!("model vocabulary size differs from the corpus vocabulary");
    }
    for mut trainer in trainers {
        trainer.run_for(&config, &data, args.max_epochs)?;
        trainer.save_to(&out, config.precision)?;
        let last = trainer.history.last();
        let fmt = |p: Option<f64>| p.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{}: {} epochs, {} steps, train loss {}, held-out ppl short {} long {}",
            trainer.model.kind(),
            trainer.history.len(),
            trainer.progress.step,
            last.map_or("-".to_string(), |r| format!("{:.4}", r.train_loss)),
            fmt(last.and_then(|r| r.ppl_short)),
            fmt(last.and_then(|r| r.ppl_long)),
        );
    }
    Ok(())
}
