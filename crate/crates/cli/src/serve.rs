//! Commands that use a trained checkpoint: `eval`, `chat`, `viz`, `probe`.

use std::io::{BufRead, IsTerminal, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use ctxseq::corpus::{
    concat_context, load_dialogue, load_qa, DEFAULT_MAX_CONTEXT_LEN, DEFAULT_WINDOW,
};
use ctxseq::inference::{
    attention_trace, perplexity, robustness_probe, topic_vectors, ChatSession, DecodeSettings,
    NoiseSpec, ProbeReport, Responder,
};
use ctxseq::trainer::{dialogue_pairs, qa_pairs};
use ctxseq::write_atomic;
use serde_json::json;

use crate::common::{load_model, log_config, resolve_labels, Failure, LoadedModel};
use crate::config::{record, ConfigFile};

/// Decoding flags shared by `chat` and `probe`.
#[derive(Debug, Args)]
pub struct DecodeFlags {
    /// Settings file with a `[decode]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Length-normalization exponent.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl DecodeFlags {
    fn resolve(&self, extra_sections: &[&str]) -> Result<(ConfigFile, DecodeSettings)> {
        let mut file = ConfigFile::load_optional(self.config.as_deref())?;
        let mut allowed = vec!["decode"];
        allowed.extend_from_slice(extra_sections);
        file.only_sections(&allowed)?;
        if let Some(b) = self.beam {
            file.set("decode", "beam", b)?;
        }
        if let Some(g) = self.gamma {
            file.set("decode", "gamma", g)?;
        }
        if let Some(m) = self.max_len {
            file.set("decode", "max_len", m)?;
        }
        let settings = file.apply("decode", DecodeSettings::default())?;
        if settings.beam == 0 {
            return Err(Failure::Usage("--beam must be at least 1".into()).into());
        }
        Ok((file, settings))
    }
}

fn format_ppl(p: Option<f64>) -> String {
    p.map_or("n/a".to_string(), |v| format!("{v:.4}"))
}

// ── eval ─────────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Test corpus: dialogue or question-answer JSONL.
    #[arg(long)]
    pub test: PathBuf,
    /// Vocabulary file; defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// History window for dialogue contexts.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_CONTEXT_LEN)]
    pub max_context_len: usize,
}

fn is_dialogue_file(path: &std::path::Path) -> Result<bool> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("{}");
    let value: serde_json::Value =
        serde_json::from_str(first).with_context(|| format!("{}: first record", path.display()))?;
    Ok(value.get("turns").is_some())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let LoadedModel {
        checkpoint, vocab, ..
    } = load_model(&args.ckpt, args.vocab.as_deref())?;
    log_config(
        "eval",
        &[
            ("model", record(&checkpoint.model.config)),
            (
                "eval",
                json!({ "window": args.window, "max_context_len": args.max_context_len, "test": args.test }),
            ),
        ],
    );
    let pairs = if is_dialogue_file(&args.test)? {
        dialogue_pairs(
            &load_dialogue(&args.test)?,
            &vocab,
            args.window,
            args.max_context_len,
        )?
    } else {
        let labels = resolve_labels(&args.test)?;
        qa_pairs(&load_qa(&args.test, &labels)?, &vocab, args.max_context_len)
    };
    let contexts = match (checkpoint.model.kind().uses_context(), &checkpoint.cnn) {
        (false, _) => None,
        (true, Some(cnn)) => Some(topic_vectors(cnn, &pairs)?),
        (true, None) => {
            return Err(Failure::Compatibility(
                "context checkpoint carries no topic encoder".into(),
            )
            .into())
        }
    };
    let report = perplexity(&checkpoint.model, &pairs, contexts.as_deref())?;
    if let Some(out) = &args.out {
        write_atomic(out, format!("{}\n", report.to_json()).as_bytes())?;
    }
    if args.json {
        println!("{}", report.to_json());
    } else {
        println!("model: {}", checkpoint.model.kind());
        println!(
            "short (n={}): {}",
            report.short.n,
            format_ppl(report.short.ppl)
        );
        println!(
            "long (n={}): {}",
            report.long.n,
            format_ppl(report.long.ppl)
        );
        println!("excluded: {}", report.excluded_n);
        println!("overall: {}", format_ppl(report.overall));
    }
    Ok(())
}

// ── chat ─────────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Utterances kept in the history.
    #[arg(long)]
    pub window: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

pub fn chat(args: ChatArgs) -> Result<()> {
    let loaded = load_model(&args.ckpt, args.vocab.as_deref())?;
    let (file, settings) = args.decode.resolve(&["chat"])?;
    let window = match args.window {
        Some(w) => w,
        None => match file.get("chat", "window") {
            Some(v) => serde_json::from_value(v.clone()).context("[chat] window")?,
            None => DEFAULT_WINDOW,
        },
    };
    log_config(
        "chat",
        &[
            ("decode", record(&settings)),
            ("chat", json!({ "window": window })),
        ],
    );
    let ck = &loaded.checkpoint;
    let mut session = ChatSession::new(&ck.model, ck.cnn.as_ref(), &loaded.vocab)?
        .with_window(window)?
        .with_settings(settings);
    let interactive = std::io::stdin().is_terminal();
    let mut stdout = std::io::stdout().lock();
    let prompt = |out: &mut std::io::StdoutLock<'_>| -> Result<()> {
        if interactive {
            write!(out, "> ")?;
            out.flush()?;
        }
        Ok(())
    };
    prompt(&mut stdout)?;
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        let text = line.trim();
        match text {
            "" => {}
            "/quit" => break,
            "/reset" => {
                session.reset();
                writeln!(stdout, "(history cleared)")?;
            }
            "/topic" => match session.topic()? {
                None => writeln!(stdout, "(no topic: empty history or no topic encoder)")?,
                Some(p) => {
                    let best = p
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map_or(0, |(i, _)| i);
                    let name = loaded
                        .labels
                        .as_ref()
                        .map_or(format!("{best}"), |l| l.name(best).to_string());
                    let probs: Vec<String> = p.iter().map(|x| format!("{x:.3}")).collect();
                    writeln!(
                        stdout,
                        "topic {name} (index {best}) probabilities [{}]",
                        probs.join(", ")
                    )?;
                }
            },
            utterance => match session.turn(utterance) {
                Ok(reply) => writeln!(stdout, "{reply}")?,
                Err(e) => writeln!(stdout, "sorry, I could not answer that ({e})")?,
            },
        }
        prompt(&mut stdout)?;
    }
    Ok(())
}

// ── viz ──────────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: String,
    /// Earlier conversation fed to the topic encoder with the input.
    #[arg(long)]
    pub context: Option<String>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Print a monospace heat grid instead of JSON.
    #[arg(long)]
    pub ascii: bool,
    /// Write the trace JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

pub fn viz(args: VizArgs) -> Result<()> {
    let LoadedModel {
        checkpoint, vocab, ..
    } = load_model(&args.ckpt, args.vocab.as_deref())?;
    let kind = checkpoint.model.kind();
    if !kind.uses_attention() {
        return Err(Failure::Capability(format!(
            "{kind} checkpoints have no attention to visualize"
        ))
        .into());
    }
    log_config(
        "viz",
        &[(
            "viz",
            json!({ "input": args.input, "context": args.context, "max_len": args.max_len }),
        )],
    );
    let source = vocab.encode(&args.input);
    if source.is_empty() {
        return Err(Failure::Usage("--input is empty".into()).into());
    }
    let context = match (&checkpoint.cnn, kind.uses_context()) {
        (Some(cnn), true) => {
            let earlier = args
                .context
                .as_deref()
                .map(|c| vocab.encode(c))
                .unwrap_or_default();
            let mut recent: Vec<&[usize]> = vec![&source];
            if !earlier.is_empty() {
                recent.push(&earlier);
            }
            Some(cnn.predict(&concat_context(&recent, DEFAULT_MAX_CONTEXT_LEN)?)?)
        }
        _ => None,
    };
    let trace = attention_trace(
        &checkpoint.model,
        &vocab,
        &source,
        context.as_deref(),
        args.max_len,
    )?;
    if let Some(out) = &args.out {
        write_atomic(out, format!("{}\n", trace.to_json()).as_bytes())?;
    }
    if args.ascii {
        print!("{}", trace.ascii());
    } else {
        println!("{}", trace.to_json());
    }
    Ok(())
}

// ── probe ────────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// One or more checkpoints; several produce a comparison table.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub input: String,
    /// Earlier turns, oldest first (repeatable).
    #[arg(long)]
    pub history: Vec<String>,
    /// `none` or `op[+op..];tokens=<chars>[;positions=..][;trials=N][;seed=N]`.
    #[arg(long, default_value = "none")]
    pub noise: String,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Print the reports as JSON lines.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

pub fn probe(args: ProbeArgs) -> Result<()> {
    let noise: NoiseSpec = args
        .noise
        .parse()
        .map_err(|e: ctxseq::Error| Failure::Usage(e.to_string()))?;
    let (_, settings) = args.decode.resolve(&[])?;
    log_config(
        "probe",
        &[
            ("decode", record(&settings)),
            (
                "probe",
                json!({ "input": args.input, "history": args.history, "noise": args.noise }),
            ),
        ],
    );
    let mut rows: Vec<(String, String, ProbeReport)> = Vec::new();
    for ckpt in &args.ckpt {
        let loaded = load_model(ckpt, args.vocab.as_deref())?;
        let ck = &loaded.checkpoint;
        let responder = Responder {
            model: &ck.model,
            cnn: ck.cnn.as_ref(),
            vocab: &loaded.vocab,
            settings,
        };
        let report = robustness_probe(&responder, &args.history, &args.input, &noise, None)?;
        if args.json {
            println!(
                "{}",
                json!({ "ckpt": ckpt, "kind": ck.model.kind(), "report": report })
            );
        } else {
            println!("== {} ({})", ckpt.display(), ck.model.kind());
            println!("clean: {:?} -> {:?}", report.input, report.response);
            println!(
                "exact_match: {:.4} over {} variants",
                report.exact_match,
                report.variants.len()
            );
            for v in &report.variants {
                println!(
                    "  {:?} -> {:?} [{}]",
                    v.input,
                    v.response,
                    if v.exact { "same" } else { "changed" }
                );
            }
        }
        rows.push((
            ckpt.display().to_string(),
            ck.model.kind().to_string(),
            report,
        ));
    }
    if rows.len() > 1 && !args.json {
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(10).max(10);
        println!("{:width$}  {:14}  exact_match", "checkpoint", "kind");
        for (path, kind, report) in &rows {
            println!("{path:width$}  {kind:14}  {:.4}", report.exact_match);
        }
    }
    Ok(())
}
