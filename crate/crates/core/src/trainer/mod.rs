//! Supervised training: minibatch Adam over teacher-forced losses, the
//! two-stage curriculum (question-answer pairs, then dialogue), checkpoints
//! and per-epoch history.

mod checkpoint;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    batch, dialogue_context, pair_from_qa, pairs_from_dialogue, DialogueExample, QaExample,
    TrainingPair, Vocabulary, DEFAULT_MAX_CONTEXT_LEN, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::inference::{perplexity, topic_vectors, PerplexityReport};
use crate::seq2seq::{batch_logprob, ModelConfig, Seq2Seq};
use crate::tensor::{adam_step, AdamState, Graph, ParamSet, SeededRng};
use crate::topic_cnn::{cnn_forward, CnnParams};
use crate::util::write_atomic;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, config_entries, encoder_from_bytes, encoder_load,
    encoder_save, encoder_to_bytes, Checkpoint, OptimizerState, Precision, Progress, MAGIC,
    VERSION,
};

pub const HISTORY_HEADER: &str = "stage,epoch,step,train_loss,ppl_short,ppl_long";

// ── Configuration ─────────────────────────────────────────────────────

/// Which corpus a stage trains on, which also fixes how its topic contexts
/// are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    /// Question-answer pairs; the context is the question itself.
    Qa,
    /// Adjacent dialogue turns; the context joins the current turn with the
    /// previous ones inside the history window.
    Dialogue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    /// Corpus file (JSONL); resolved by the caller.
    pub path: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// History window (utterances) for dialogue contexts.
    pub window: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            name: "qa".into(),
            kind: StageKind::Qa,
            path: None,
            epochs: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            window: DEFAULT_WINDOW,
        }
    }
}

impl StageConfig {
    pub fn new(kind: StageKind, epochs: usize) -> Self {
        let name = match kind {
            StageKind::Qa => "qa",
            StageKind::Dialogue => "dialogue",
        };
        Self {
            name: name.into(),
            kind,
            epochs,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    pub seed: u64,
    /// Overrides the model's dropout rate when set.
    pub dropout: Option<f64>,
    /// Global gradient-norm bound (`f64::INFINITY` disables clipping).
    pub clip: f64,
    /// Held-out evaluation every this many epochs (and after each stage's
    /// last epoch); 0 evaluates only after the last epoch.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Train the topic encoder jointly instead of keeping it frozen.
    pub fine_tune_cnn: bool,
    /// Fraction of each stage's pairs held out when no test file is given.
    pub held_out_fraction: f64,
    pub max_context_len: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                StageConfig::new(StageKind::Qa, 1),
                StageConfig::new(StageKind::Dialogue, 1),
            ],
            seed: 1,
            dropout: None,
            clip: 5.0,
            eval_every: 1,
            checkpoint_dir: None,
            fine_tune_cnn: false,
            held_out_fraction: 0.05,
            max_context_len: DEFAULT_MAX_CONTEXT_LEN,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return fail("at least one training stage is required".into());
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return fail(format!("clip norm must be positive, got {}", self.clip));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("dropout must lie in [0, 1), got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return fail(format!(
                "held-out fraction must lie in [0, 1), got {}",
                self.held_out_fraction
            ));
        }
        for s in &self.stages {
            if s.name.is_empty() || s.name.contains([',', '\n']) {
                return fail(format!("invalid stage name {:?}", s.name));
            }
            if s.batch_size == 0 {
                return fail(format!("stage {}: batch size must be positive", s.name));
            }
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return fail(format!("stage {}: learning rate must be positive", s.name));
            }
            if s.window == 0 {
                return fail(format!(
                    "stage {}: history window must be at least 1",
                    s.name
                ));
            }
        }
        Ok(())
    }
}

// ── Contexts and stage data ───────────────────────────────────────────

/// An example whose topic context is requested.
#[derive(Debug, Clone, Copy)]
pub enum ContextExample<'a> {
    Qa {
        question: &'a [usize],
    },
    Turn {
        turns: &'a [Vec<usize>],
        index: usize,
    },
}

/// Tokens fed to the topic encoder for `example` under the rule of `kind`:
/// the question itself for QA stages, the current turn joined with the
/// previous ones (most recent first, `window` utterances) for dialogue.
pub fn context_for(
    kind: StageKind,
    example: ContextExample<'_>,
    window: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    match (kind, example) {
        (StageKind::Qa, ContextExample::Qa { question }) => {
            let mut out = question.to_vec();
            out.truncate(max_len.max(1));
            Ok(out)
        }
        (StageKind::Dialogue, ContextExample::Turn { turns, index }) => {
            if index >= turns.len() {
                return Err(Error::Index(format!(
                    "turn {index} of a {}-turn dialogue",
                    turns.len()
                )));
            }
            dialogue_context(turns, index, window, max_len)
        }
        (kind, _) => Err(Error::Contract(format!(
            "example does not match a {kind:?} stage"
        ))),
    }
}

/// Training and held-out pairs of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageData {
    pub train: Vec<TrainingPair>,
    pub held_out: Vec<TrainingPair>,
}

impl StageData {
    /// Shuffles `pairs` with `seed` and holds out the last `fraction`.
    pub fn split(mut pairs: Vec<TrainingPair>, fraction: f64, seed: u64) -> Self {
        SeededRng::substream(seed, 30).shuffle(&mut pairs);
        let held = ((pairs.len() as f64) * fraction).round() as usize;
        let held = if fraction > 0.0 && pairs.len() >= 2 {
            held.max(1)
        } else {
            held
        };
        let held_out = pairs.split_off(pairs.len() - held.min(pairs.len()));
        Self {
            train: pairs,
            held_out,
        }
    }
}

pub fn qa_pairs(
    examples: &[QaExample],
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Vec<TrainingPair> {
    examples
        .iter()
        .map(|e| pair_from_qa(e, vocab, max_context_len))
        .collect()
}

pub fn dialogue_pairs(
    dialogues: &[DialogueExample],
    vocab: &Vocabulary,
    window: usize,
    max_context_len: usize,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for d in dialogues {
        out.extend(pairs_from_dialogue(d, vocab, window, max_context_len)?);
    }
    Ok(out)
}

// ── History ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub stage: String,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    /// Optimizer updates so far.
    pub step: u64,
    /// Mean per-token training loss over the epoch.
    pub train_loss: f64,
    pub ppl_short: Option<f64>,
    pub ppl_long: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.stage,
            r.epoch,
            r.step,
            r.train_loss,
            opt(r.ppl_short),
            opt(r.ppl_long)
        );
    }
    out
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Corpus(
            "history file lacks the expected header".into(),
        ));
    }
    let bad = |line: &str| Error::Corpus(format!("malformed history line {line:?}"));
    let opt = |s: &str| -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(HistoryRow {
                stage: f[0].to_string(),
                epoch: f[1].parse().map_err(|_| bad(line))?,
                step: f[2].parse().map_err(|_| bad(line))?,
                train_loss: f[3].parse().map_err(|_| bad(line))?,
                ppl_short: opt(f[4]).map_err(|_| bad(line))?,
                ppl_long: opt(f[5]).map_err(|_| bad(line))?,
            })
        })
        .collect()
}

// ── Trainer ───────────────────────────────────────────────────────────

/// Scales the gradients of every set so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(sets: &mut [&mut ParamSet], max_norm: f64) -> f64 {
    let norm = sets
        .iter()
        .map(|s| s.grad_norm().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        for s in sets.iter_mut() {
            s.scale_grads(max_norm / norm);
        }
    }
    norm
}

/// One model's training run: parameters, optimizer state, progress and
/// history. Runs are resumable from any epoch boundary.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Seq2Seq,
    pub cnn: Option<CnnParams>,
    pub optimizer: OptimizerState,
    pub progress: Progress,
    pub history: Vec<HistoryRow>,
    /// Model parameter hash at the start of each stage entered by this run.
    pub stage_start_hashes: Vec<(usize, String)>,
    pub vocab_hash: String,
    rng: SeededRng,
}

impl Trainer {
    /// Fresh run: parameters initialized from `config.seed`.
    pub fn new(
        mut model_config: ModelConfig,
        cnn: Option<CnnParams>,
        config: &TrainConfig,
        vocab_hash: &str,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(p) = config.dropout {
            model_config.dropout = p;
        }
        let cnn = if model_config.kind.uses_context() {
            cnn
        } else {
            None
        };
        if model_config.kind.uses_context() {
            let Some(c) = &cnn else {
                return Err(Error::Config(format!(
                    "{} training needs a topic encoder",
                    model_config.kind
                )));
            };
            if c.num_topics() != model_config.k_topics {
                return Err(Error::Incompatible(format!(
                    "topic encoder has {} topics, model expects {}",
                    c.num_topics(),
                    model_config.k_topics
                )));
            }
        }
        let model = Seq2Seq::new(model_config, &mut SeededRng::substream(config.seed, 20))?;
        let lr = config.stages[0].learning_rate;
        let cnn_adam = match (&cnn, config.fine_tune_cnn) {
            (Some(c), true) => Some(AdamState::new(&c.params, lr)?),
            _ => None,
        };
        Ok(Self {
            optimizer: OptimizerState {
                model: AdamState::new(&model.params, lr)?,
                cnn: cnn_adam,
            },
            model,
            cnn,
            progress: Progress::default(),
            history: Vec::new(),
            stage_start_hashes: Vec::new(),
            vocab_hash: vocab_hash.to_string(),
            rng: SeededRng::substream(config.seed, 21),
        })
    }

    /// Continues the run saved in `checkpoint`.
    pub fn resume(checkpoint: Checkpoint, history: Vec<HistoryRow>) -> Result<Self> {
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| Error::Incompatible("checkpoint carries no optimizer state".into()))?;
        Ok(Self {
            model: checkpoint.model,
            cnn: checkpoint.cnn,
            optimizer,
            progress: checkpoint.progress,
            history,
            stage_start_hashes: Vec::new(),
            vocab_hash: checkpoint.vocab_hash,
            rng: SeededRng::from_state_string(&checkpoint.rng_state)?,
        })
    }

    pub fn checkpoint(&self, precision: Precision) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            cnn: self.cnn.clone(),
            precision,
            optimizer: Some(self.optimizer.clone()),
            progress: self.progress,
            vocab_hash: self.vocab_hash.clone(),
            rng_state: self.rng.state_string(),
        }
    }

    /// File stem used for this model's checkpoint and history files.
    pub fn file_stem(&self) -> &'static str {
        self.model.kind().name()
    }

    fn topic_vectors(&self, pairs: &[TrainingPair]) -> Result<Option<Vec<Vec<f64>>>> {
        match (&self.cnn, self.model.kind().uses_context()) {
            (Some(cnn), true) => Ok(Some(topic_vectors(cnn, pairs)?)),
            _ => Ok(None),
        }
    }

    /// Held-out perplexity with the current parameters.
    pub fn evaluate(&self, pairs: &[TrainingPair]) -> Result<PerplexityReport> {
        let contexts = self.topic_vectors(pairs)?;
        perplexity(&self.model, pairs, contexts.as_deref())
    }

    /// Runs every remaining epoch of every stage. `data` holds one entry per
    /// configured stage.
    pub fn run(&mut self, config: &TrainConfig, data: &[StageData]) -> Result<()> {
        self.run_for(config, data, None)
    }

    /// Like [`Trainer::run`] but stops after `budget` epochs when given; the
    /// saved checkpoint then resumes where this call stopped.
    pub fn run_for(
        &mut self,
        config: &TrainConfig,
        data: &[StageData],
        budget: Option<usize>,
    ) -> Result<()> {
        let mut remaining = budget;
        config.validate()?;
        if data.len() != config.stages.len() {
            return Err(Error::Config(format!(
                "{} stage datasets for {} configured stages",
                data.len(),
                config.stages.len()
            )));
        }
        if remaining == Some(0) {
            return Ok(());
        }
        while self.progress.stage < config.stages.len() {
            let s = self.progress.stage;
            let stage = &config.stages[s];
            let stage_data = &data[s];
            if self.progress.epoch == 0 {
                self.stage_start_hashes
                    .push((s, self.model.params.content_hash()));
            }
            self.optimizer.model.alpha = stage.learning_rate;
            if let Some(a) = self.optimizer.cnn.as_mut() {
                a.alpha = stage.learning_rate;
            }
            let frozen_contexts = if config.fine_tune_cnn {
                None
            } else {
                self.topic_vectors(&stage_data.train)?
            };
            while self.progress.epoch < stage.epochs {
                let loss =
                    self.train_epoch(config, stage, &stage_data.train, frozen_contexts.as_deref())?;
                self.progress.epoch += 1;
                let epoch = self.progress.epoch;
                let due = epoch == stage.epochs
                    || (config.eval_every > 0 && epoch.is_multiple_of(config.eval_every));
                let (ppl_short, ppl_long) = if due && !stage_data.held_out.is_empty() {
                    let r = self.evaluate(&stage_data.held_out)?;
                    (r.short.ppl, r.long.ppl)
                } else {
                    (None, None)
                };
                self.history.push(HistoryRow {
                    stage: stage.name.clone(),
                    epoch,
                    step: self.progress.step,
                    train_loss: loss,
                    ppl_short,
                    ppl_long,
                });
                if epoch == stage.epochs {
                    self.progress.stage += 1;
                    self.progress.epoch = 0;
                }
                if let Some(dir) = &config.checkpoint_dir {
                    self.save_to(dir, config.precision)?;
                }
                if let Some(r) = remaining.as_mut() {
                    *r -= 1;
                    if *r == 0 {
                        return Ok(());
                    }
                }
                if self.progress.stage != s {
                    break;
                }
            }
            if self.progress.stage == s {
                self.progress.stage += 1;
                self.progress.epoch = 0;
            }
        }
        Ok(())
    }

    /// Writes `<dir>/<kind>.ckpt` and `<dir>/<kind>.history.csv`.
    pub fn save_to(&self, dir: &Path, precision: Precision) -> Result<()> {
        checkpoint_save(
            &dir.join(format!("{}.ckpt", self.file_stem())),
            &self.checkpoint(precision),
        )?;
        write_atomic(
            &dir.join(format!("{}.history.csv", self.file_stem())),
            history_csv(&self.history).as_bytes(),
        )
    }

    /// One pass over `pairs`; returns the mean per-token loss.
    fn train_epoch(
        &mut self,
        config: &TrainConfig,
        stage: &StageConfig,
        pairs: &[TrainingPair],
        contexts: Option<&[Vec<f64>]>,
    ) -> Result<f64> {
        let batches = batch(pairs, stage.batch_size, Some(&mut self.rng));
        let uses_context = self.model.kind().uses_context();
        let fine_tune = config.fine_tune_cnn && uses_context;
        let (mut total_nll, mut total_tokens) = (0.0, 0usize);
        for (b, group) in batches.iter().enumerate() {
            let (grads, nll) = {
                let mut g = Graph::new();
                let vars = self.model.bind(&mut g, true);
                let members: Vec<&TrainingPair> =
                    group.indices.iter().map(|&i| &pairs[i]).collect();
                let c = if !uses_context {
                    None
                } else if fine_tune {
                    let cnn = self.cnn.as_ref().expect("checked at construction");
                    let mut rows = Vec::with_capacity(members.len());
                    for p in &members {
                        rows.push(
                            cnn_forward(&mut g, cnn, &p.context, true, true, &mut self.rng)?.0,
                        );
                    }
                    Some(g.stack_rows(&rows)?)
                } else {
                    let all = contexts.expect("frozen contexts are precomputed");
                    let rows: Vec<f64> = group
                        .indices
                        .iter()
                        .flat_map(|&i| all[i].iter().copied())
                        .collect();
                    let k = self.model.config.k_topics;
                    Some(g.constant_vec(members.len(), k, rows)?)
                };
                let sources: Vec<&[usize]> = members.iter().map(|p| p.source.as_slice()).collect();
                let targets: Vec<&[usize]> = members.iter().map(|p| p.target.as_slice()).collect();
                let score =
                    batch_logprob(&mut g, &vars, &sources, &targets, c, &mut self.rng, true)?;
                let tokens = score.total_tokens();
                total_tokens += tokens;
                let nll = g.scalar(score.loss);
                let loss = g.scale(score.loss, 1.0 / tokens as f64);
                (g.backward(loss)?, nll)
            };
            total_nll += nll;
            self.model.params.zero_grad();
            self.model.params.accumulate(&grads);
            let norm = match (fine_tune, self.cnn.as_mut()) {
                (true, Some(cnn)) => {
                    cnn.params.zero_grad();
                    cnn.params.accumulate(&grads);
                    clip_global_norm(&mut [&mut self.model.params, &mut cnn.params], config.clip)
                }
                _ => clip_global_norm(&mut [&mut self.model.params], config.clip),
            };
            if !nll.is_finite() || !norm.is_finite() {
                let mut param = self
                    .model
                    .params
                    .max_grad_param()
                    .unwrap_or("?")
                    .to_string();
                if let (true, Some(cnn)) = (fine_tune, self.cnn.as_ref()) {
                    if self.model.params.grad_norm().is_finite() {
                        param = format!("cnn.{}", cnn.params.max_grad_param().unwrap_or("?"));
                    }
                }
                return Err(Error::NumericAbort { batch: b, param });
            }
            adam_step(&mut self.model.params, &mut self.optimizer.model)?;
            if let (true, Some(cnn), Some(adam)) =
                (fine_tune, self.cnn.as_mut(), self.optimizer.cnn.as_mut())
            {
                adam_step(&mut cnn.params, adam)?;
            }
            self.progress.step += 1;
        }
        self.model.params.zero_grad();
        Ok(if total_tokens == 0 {
            0.0
        } else {
            total_nll / total_tokens as f64
        })
    }
}

/// Trains one model per configuration under identical seeds.
pub fn train(
    models: &[ModelConfig],
    cnn: Option<&CnnParams>,
    config: &TrainConfig,
    data: &[StageData],
    vocab_hash: &str,
) -> Result<Vec<Trainer>> {
    models
        .iter()
        .map(|m| {
            let mut t = Trainer::new(m.clone(), cnn.cloned(), config, vocab_hash)?;
            t.run(config, data)?;
            Ok(t)
        })
        .collect()
}
