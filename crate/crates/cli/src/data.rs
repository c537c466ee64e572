//! `gen-data`: synthetic corpus generation.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use ctxseq::corpus::{dialogue_to_jsonl, qa_to_jsonl, synth_generate, SyntheticSpec, Vocabulary};
use ctxseq::write_atomic;
use serde_json::json;

use crate::common::{labels_text, log_config, LABELS_FILE, VOCAB_FILE};
use crate::config::{record, render, ConfigFile};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator settings as `key = value` lines (optionally under `[spec]`).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub const QA_TRAIN: &str = "qa_train.jsonl";
pub const QA_TEST: &str = "qa_test.jsonl";
pub const DIALOGUE_TRAIN: &str = "dialogue_train.jsonl";
pub const DIALOGUE_TEST: &str = "dialogue_test.jsonl";

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut file = ConfigFile::load_optional(args.spec.as_deref())?;
    file.only_sections(&["", "spec"])?;
    if let Some(seed) = args.seed {
        file.set("spec", "seed", seed)?;
    }
    let spec = file.apply("spec", file.apply("", SyntheticSpec::default())?)?;
    log_config("gen-data", &[("spec", record(&spec))]);
    spec.validate()?;
    let (world, corpus) = synth_generate(&spec)?;
    let labels = world.labels();
    let vocab = Vocabulary::from_tokens(world.alphabet().chars().collect());

    let files = [
        (
            QA_TRAIN,
            qa_to_jsonl(&corpus.qa_train, &labels),
            corpus.qa_train.len(),
        ),
        (
            QA_TEST,
            qa_to_jsonl(&corpus.qa_test, &labels),
            corpus.qa_test.len(),
        ),
        (
            DIALOGUE_TRAIN,
            dialogue_to_jsonl(&corpus.dialogue_train),
            corpus.dialogue_train.len(),
        ),
        (
            DIALOGUE_TEST,
            dialogue_to_jsonl(&corpus.dialogue_test),
            corpus.dialogue_test.len(),
        ),
    ];
    let mut counts = serde_json::Map::new();
    for (name, text, n) in &files {
        write_atomic(&args.out.join(name), text.as_bytes())?;
        counts.insert(name.trim_end_matches(".jsonl").to_string(), json!(n));
    }
    write_atomic(
        &args.out.join(VOCAB_FILE),
        vocab.to_file_string().as_bytes(),
    )?;
    write_atomic(&args.out.join(LABELS_FILE), labels_text(&labels).as_bytes())?;
    write_atomic(
        &args.out.join("spec.conf"),
        render(&[("spec", record(&spec))]).as_bytes(),
    )?;
    let manifest = json!({ "spec_hash": spec.hash(), "counts": counts, "seed": spec.seed });
    write_atomic(
        &args.out.join("manifest.json"),
        format!("{manifest:#}\n").as_bytes(),
    )?;
    println!("{manifest}");
    Ok(())
}
