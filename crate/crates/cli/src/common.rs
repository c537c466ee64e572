//! Helpers shared by the commands: failure classes, vocabulary and label
//! resolution, checkpoint loading.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ctxseq::corpus::{LabelSet, QaLine, Vocabulary};
use ctxseq::trainer::{checkpoint_load, Checkpoint};
use serde_json::Value;

use crate::config::render;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LABELS_FILE: &str = "labels.txt";

/// Failures that map to a specific exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Compatibility(String),
    Capability(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Compatibility(_) => 4,
            Failure::Capability(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Compatibility(m) => write!(f, "incompatible: {m}"),
            Failure::Capability(m) => write!(f, "unsupported: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

/// Prints the fully resolved settings of a run to stderr.
pub fn log_config(command: &str, sections: &[(&str, Value)]) {
    eprintln!("# ctxseq {command}: resolved configuration");
    eprint!("{}", render(sections));
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

/// `flag` if given, else `vocab.txt` next to `anchor` when present.
pub fn existing_vocab(flag: Option<&Path>, anchor: &Path) -> Result<Option<Vocabulary>> {
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None => sibling(anchor, VOCAB_FILE),
    };
    if flag.is_none() && !path.exists() {
        return Ok(None);
    }
    let vocab = Vocabulary::load(&path)
        .with_context(|| format!("loading vocabulary {}", path.display()))?;
    Ok(Some(vocab))
}

/// Sort key that orders `topic2` before `topic10`.
fn natural_key(name: &str) -> (String, u64, String) {
    let stem = name.trim_end_matches(|c: char| c.is_ascii_digit());
    let number = name[stem.len()..].parse().unwrap_or(0);
    (stem.to_string(), number, name.to_string())
}

/// Labels from `labels.txt` next to `data` when present, else every label
/// name occurring in the QA file in natural order.
pub fn resolve_labels(data: &Path) -> Result<LabelSet> {
    let listed = sibling(data, LABELS_FILE);
    if listed.exists() {
        let text = std::fs::read_to_string(&listed)?;
        return Ok(LabelSet::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )?);
    }
    let text =
        std::fs::read_to_string(data).with_context(|| format!("reading {}", data.display()))?;
    let mut names = BTreeSet::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let parsed: QaLine =
            serde_json::from_str(line).with_context(|| format!("{}:{}", data.display(), i + 1))?;
        names.insert(parsed.label);
    }
    let mut names: Vec<String> = names.into_iter().collect();
    names.sort_by_key(|n| natural_key(n));
    Ok(LabelSet::new(names)?)
}

pub fn labels_text(labels: &LabelSet) -> String {
    (0..labels.len())
        .map(|i| format!("{}\n", labels.name(i)))
        .collect()
}

/// A checkpoint with the vocabulary it was trained on.
pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub vocab: Vocabulary,
    pub labels: Option<LabelSet>,
}

/// Loads `ckpt` and its vocabulary (`--vocab` or `vocab.txt` alongside);
/// a vocabulary whose hash differs from the checkpoint's is a compatibility
/// failure.
pub fn load_model(ckpt: &Path, vocab_flag: Option<&Path>) -> Result<LoadedModel> {
    let checkpoint =
        checkpoint_load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let vocab = existing_vocab(vocab_flag, ckpt)?.ok_or_else(|| {
        Failure::Usage(format!(
            "no {VOCAB_FILE} next to {}; pass --vocab",
            ckpt.display()
        ))
    })?;
    if vocab.hash() != checkpoint.vocab_hash {
        return Err(Failure::Compatibility(format!(
            "vocabulary hash {} does not match the checkpoint's {}",
            vocab.hash(),
            checkpoint.vocab_hash
        ))
        .into());
    }
    let listed = sibling(ckpt, LABELS_FILE);
    let labels = if listed.exists() {
        let text = std::fs::read_to_string(&listed)?;
        LabelSet::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
        .ok()
    } else {
        None
    };
    Ok(LoadedModel {
        checkpoint,
        vocab,
        labels,
    })
}
