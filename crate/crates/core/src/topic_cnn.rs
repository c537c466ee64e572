//! Convolutional topic encoder.
//!
//! Character embeddings feed four parallel filter banks (heights 1 to 4,
//! filters spanning the full embedding width), each followed by tanh and
//! dynamic k-max pooling. The pooled maps are concatenated, passed through a
//! same-padded second convolution with tanh and a fixed `k_top`-max pool,
//! flattened, and projected to `K` topic logits. The softmax of the logits is
//! the topic vector used to condition the contextual decoders.

use serde::{Deserialize, Serialize};

use crate::corpus::{concat_context, QaExample, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::tensor::{
    adam_step, conv_same, conv_text, linear, AdamState, FilterBank, Graph, Init, ParamId, ParamSet,
    SeededRng, Tensor, Var,
};

/// Largest first-layer filter height; shorter inputs are padded up to it.
pub const MAX_HEIGHT: usize = 4;
const N_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Filters per first-layer height.
    pub filters: usize,
    /// Filters in the second layer.
    pub filters2: usize,
    /// Height of the same-padded second-layer convolution (odd).
    pub height2: usize,
    pub k_top: usize,
    pub k_topics: usize,
    pub dropout: f64,
    pub init_scale: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 32,
            filters: 16,
            filters2: 16,
            height2: 3,
            k_top: 4,
            k_topics: 8,
            dropout: 0.2,
            init_scale: 0.08,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("filters", self.filters),
            ("filters2", self.filters2),
            ("k_top", self.k_top),
            ("k_topics", self.k_topics),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("cnn {name} must be positive")));
            }
        }
        if self.height2.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cnn height2 must be odd, got {}",
                self.height2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "cnn dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// `max(k_top, ceil((n_layers - level) / n_layers * len))`.
pub fn dynamic_k(level: usize, len: usize, k_top: usize, n_layers: usize) -> usize {
    debug_assert!(level >= 1 && level <= n_layers);
    let scaled = ((n_layers - level) * len).div_ceil(n_layers);
    k_top.max(scaled)
}

#[derive(Debug, Clone, Copy)]
struct CnnIds {
    emb: ParamId,
    l1: [(ParamId, ParamId); MAX_HEIGHT],
    l2: (ParamId, ParamId),
    fc: (ParamId, ParamId),
}

/// Topic-encoder parameters (all names start with `cnn.`).
#[derive(Debug, Clone)]
pub struct CnnParams {
    pub config: CnnConfig,
    pub params: ParamSet,
    ids: CnnIds,
}

impl CnnParams {
    /// Uniform(-s, s) weights, zero biases, zero PAD embedding row.
    pub fn new(config: CnnConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let s = config.init_scale;
        let u = Init::Uniform { lo: -s, hi: s };
        let (d, f) = (config.embed_dim, config.filters);
        let mut p = ParamSet::new();
        let mut emb = Tensor::new(&[config.vocab_size, d], u, rng)?;
        emb.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
        let emb = p.add("cnn.emb", emb)?;
        let mut l1 = Vec::with_capacity(MAX_HEIGHT);
        for h in 1..=MAX_HEIGHT {
            let w = p.add(format!("cnn.l1.h{h}.w"), Tensor::new(&[h * d, f], u, rng)?)?;
            let b = p.add(format!("cnn.l1.h{h}.b"), Tensor::zeros(&[f])?)?;
            l1.push((w, b));
        }
        let in2 = MAX_HEIGHT * f;
        let l2w = p.add(
            "cnn.l2.w",
            Tensor::new(&[config.height2 * in2, config.filters2], u, rng)?,
        )?;
        let l2b = p.add("cnn.l2.b", Tensor::zeros(&[config.filters2])?)?;
        let fcw = p.add(
            "cnn.fc.w",
            Tensor::new(&[config.k_top * config.filters2, config.k_topics], u, rng)?,
        )?;
        let fcb = p.add("cnn.fc.b", Tensor::zeros(&[config.k_topics])?)?;
        let ids = CnnIds {
            emb,
            l1: l1.try_into().expect("four heights"),
            l2: (l2w, l2b),
            fc: (fcw, fcb),
        };
        Ok(Self {
            config,
            params: p,
            ids,
        })
    }

    /// Rebuilds from a parameter set (e.g. a checkpoint), checking every shape.
    pub fn from_params(config: CnnConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, &mut SeededRng::new(0))?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let got = params
                .by_name(&name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            if got.shape() != model.params.get(id).shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) =
                Tensor::from_vec(got.shape(), got.data().to_vec())?.with_grad();
        }
        if let Some((extra, _)) = params.iter().find(|(n, _)| model.params.id(n).is_none()) {
            return Err(Error::Incompatible(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn num_topics(&self) -> usize {
        self.config.k_topics
    }

    /// Topic distribution in eval mode.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut rng = SeededRng::new(0);
        let (probs, _) = cnn_forward(&mut g, self, tokens, false, false, &mut rng)?;
        Ok(g.value(probs).to_vec())
    }

    /// Most likely topic in eval mode.
    pub fn classify(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(&self.predict(tokens)?))
    }

    /// [`cnn_forward`] reading the weights from `params`, which must share
    /// this encoder's layout (for example a copy under a gradient check).
    pub fn forward_params<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        tokens: &[usize],
        trainable: bool,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<(Var, Var)> {
        forward_impl(
            g,
            params,
            &self.config,
            self.ids,
            tokens,
            trainable,
            training,
            rng,
        )
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Builds the encoder on `g` and returns `(softmax, logits)`, both `1 x K`.
///
/// Trailing PAD tokens are ignored, so the result does not depend on how
/// much padding follows the input. With `trainable` false the parameters
/// enter the graph as constants (frozen encoder).
pub fn cnn_forward<'a>(
    g: &mut Graph<'a>,
    cnn: &'a CnnParams,
    tokens: &[usize],
    trainable: bool,
    training: bool,
    rng: &mut SeededRng,
) -> Result<(Var, Var)> {
    forward_impl(
        g,
        &cnn.params,
        &cnn.config,
        cnn.ids,
        tokens,
        trainable,
        training,
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn forward_impl<'a>(
    g: &mut Graph<'a>,
    p: &'a ParamSet,
    cfg: &CnnConfig,
    ids: CnnIds,
    tokens: &[usize],
    trainable: bool,
    training: bool,
    rng: &mut SeededRng,
) -> Result<(Var, Var)> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    let len = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    if len == 0 {
        return Err(Error::Contract("topic encoder input is empty".into()));
    }
    let k1 = dynamic_k(1, len, cfg.k_top, N_LAYERS);
    let padded = len.max(MAX_HEIGHT).max(k1 + MAX_HEIGHT - 1);

    let take = |g: &mut Graph<'a>, id: ParamId| {
        if trainable {
            g.param(p, id)
        } else {
            g.frozen(p, id)
        }
    };
    let rows = (0..padded)
        .map(|i| {
            let tok = if i < len { tokens[i] } else { PAD };
            g.gather(p, ids.emb, tok, trainable && tok != PAD)
        })
        .collect::<Result<Vec<_>>>()?;
    let embedded = g.stack_rows(&rows)?;

    let banks: Vec<FilterBank> = (0..MAX_HEIGHT)
        .map(|i| FilterBank {
            height: i + 1,
            weight: take(g, ids.l1[i].0),
            bias: take(g, ids.l1[i].1),
        })
        .collect();
    let maps = conv_text(g, embedded, &banks)?;
    let mut pooled = Vec::with_capacity(MAX_HEIGHT);
    for (bank, map) in banks.iter().zip(maps) {
        let rows = padded - bank.height + 1;
        let act = g.tanh(map);
        pooled.push(g.k_max_pool(act, k1, len.min(rows))?);
    }
    let features = g.concat(&pooled)?;

    let w2 = take(g, ids.l2.0);
    let b2 = take(g, ids.l2.1);
    let conv2 = conv_same(g, features, cfg.height2, w2, b2)?;
    let act2 = g.tanh(conv2);
    let top = g.k_max_pool(act2, cfg.k_top, k1)?;
    let flat = g.reshape(top, 1, cfg.k_top * cfg.filters2)?;
    let flat = g.dropout(flat, cfg.dropout, rng, training)?;

    let wf = take(g, ids.fc.0);
    let bf = take(g, ids.fc.1);
    let logits = linear(g, flat, wf, bf)?;
    let probs = g.softmax(logits);
    Ok((probs, logits))
}

/// Topic vector of a history given most-recent-first, in eval mode.
pub fn infer_context(
    history: &[&[usize]],
    cnn: &CnnParams,
    max_context_len: usize,
) -> Result<Vec<f64>> {
    cnn.predict(&concat_context(history, max_context_len)?)
}

// ── Training ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip: f64,
    /// Cross-validation folds; below 2 disables cross-validation.
    pub folds: usize,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            clip: 5.0,
            folds: 5,
            seed: 1,
        }
    }
}

/// Encoded classifier example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledText {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl LabeledText {
    pub fn from_qa(examples: &[QaExample], vocab: &Vocabulary) -> Vec<Self> {
        examples
            .iter()
            .map(|e| Self {
                tokens: vocab.encode(&e.question),
                label: e.label,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnReport {
    pub fold_accuracy: Vec<f64>,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

impl CnnReport {
    pub fn mean_fold_accuracy(&self) -> Option<f64> {
        if self.fold_accuracy.is_empty() {
            None
        } else {
            Some(self.fold_accuracy.iter().sum::<f64>() / self.fold_accuracy.len() as f64)
        }
    }

    /// `fold <i>: <acc>` lines followed by the mean and training accuracy.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, acc) in self.fold_accuracy.iter().enumerate() {
            s.push_str(&format!("fold {}: {acc:.4}\n", i + 1));
        }
        if let Some(m) = self.mean_fold_accuracy() {
            s.push_str(&format!("mean: {m:.4}\n"));
        }
        s.push_str(&format!("train: {:.4}\n", self.train_accuracy));
        s
    }
}

pub fn accuracy(cnn: &CnnParams, data: &[LabeledText]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in data {
        if cnn.classify(&ex.tokens)? == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn check_labels(data: &[LabeledText], k: usize) -> Result<()> {
    for (i, ex) in data.iter().enumerate() {
        if ex.label >= k {
            return Err(Error::Validation {
                path: "<classifier data>".into(),
                line: i + 1,
                msg: format!("label {} outside [0, {k})", ex.label),
            });
        }
    }
    Ok(())
}

/// Minibatch Adam on mean cross-entropy; returns the last epoch's mean loss.
pub fn fit(
    cnn: &mut CnnParams,
    data: &[LabeledText],
    config: &CnnTrainConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    check_labels(data, cnn.config.k_topics)?;
    let mut adam = AdamState::new(&cnn.params, config.learning_rate)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            cnn.params.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let grads = {
                    let mut g = Graph::new();
                    let (_, logits) = cnn_forward(&mut g, cnn, &data[i].tokens, true, true, rng)?;
                    let ce = g.cross_entropy(logits, data[i].label)?;
                    total += g.scalar(ce);
                    let loss = g.scale(ce, scale);
                    g.backward(loss)?
                };
                cnn.params.accumulate(&grads);
            }
            let norm = cnn.params.clip_grad_norm(config.clip);
            if !norm.is_finite() {
                return Err(Error::NumericAbort {
                    batch: b,
                    param: cnn.params.max_grad_param().unwrap_or("?").to_string(),
                });
            }
            adam_step(&mut cnn.params, &mut adam)?;
        }
        last = total / data.len().max(1) as f64;
    }
    cnn.params.zero_grad();
    Ok(last)
}

/// K-fold cross-validation followed by a final fit on all of `data`.
pub fn cnn_train(
    data: &[LabeledText],
    config: CnnConfig,
    train: &CnnTrainConfig,
) -> Result<(CnnParams, CnnReport)> {
    check_labels(data, config.k_topics)?;
    if data.is_empty() {
        return Err(Error::Corpus("no classifier training examples".into()));
    }
    let mut rng = SeededRng::substream(train.seed, 10);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut fold_accuracy = Vec::new();
    if train.folds >= 2 && data.len() >= train.folds {
        for fold in 0..train.folds {
            let (mut fit_set, mut held) = (Vec::new(), Vec::new());
            for (pos, &i) in order.iter().enumerate() {
                if pos % train.folds == fold {
                    held.push(data[i].clone());
                } else {
                    fit_set.push(data[i].clone());
                }
            }
            let mut model = CnnParams::new(
                config.clone(),
                &mut SeededRng::substream(train.seed, 100 + fold as u64),
            )?;
            fit(
                &mut model,
                &fit_set,
                train,
                &mut SeededRng::substream(train.seed, 200 + fold as u64),
            )?;
            fold_accuracy.push(accuracy(&model, &held)?);
        }
    }
    let mut model = CnnParams::new(config, &mut SeededRng::substream(train.seed, 11))?;
    let final_loss = fit(
        &mut model,
        data,
        train,
        &mut SeededRng::substream(train.seed, 12),
    )?;
    let train_accuracy = accuracy(&model, data)?;
    Ok((
        model,
        CnnReport {
            fold_accuracy,
            train_accuracy,
            final_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny(vocab: usize) -> CnnConfig {
        CnnConfig {
            vocab_size: vocab,
            embed_dim: 8,
            filters: 4,
            filters2: 4,
            k_topics: 4,
            ..CnnConfig::default()
        }
    }

    #[test]
    fn dynamic_k_schedule() {
        assert_eq!(dynamic_k(2, 50, 4, 2), 4);
        assert_eq!(dynamic_k(1, 10, 4, 2), 5);
        assert_eq!(dynamic_k(1, 3, 4, 2), 4);
        assert_eq!(dynamic_k(1, 11, 4, 2), 6);
    }

    #[test]
    fn output_is_distribution() {
        let cnn = CnnParams::new(tiny(12), &mut SeededRng::new(1)).unwrap();
        for tokens in [vec![5], vec![5, 6, 7], (5..12).cycle().take(40).collect()] {
            let p = cnn.predict(&tokens).unwrap();
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn trailing_padding_is_ignored() {
        let cnn = CnnParams::new(tiny(12), &mut SeededRng::new(2)).unwrap();
        for tokens in [vec![7], vec![5, 9, 6, 11, 8, 5, 10]] {
            let base = cnn.predict(&tokens).unwrap();
            let mut padded = tokens.clone();
            padded.extend([PAD; 9]);
            let other = cnn.predict(&padded).unwrap();
            for (a, b) in base.iter().zip(&other) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_topics() {
        let mut cnn = CnnParams::new(tiny(12), &mut SeededRng::new(3)).unwrap();
        cnn.params
            .by_name_mut("cnn.fc.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let p = cnn.predict(&[5, 6, 7, 8]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let cnn = CnnParams::new(tiny(12), &mut SeededRng::new(4)).unwrap();
        assert!(matches!(cnn.predict(&[5, 12]), Err(Error::Index(_))));
    }

    #[test]
    fn single_utterance_history_matches_forward() {
        let cnn = CnnParams::new(tiny(12), &mut SeededRng::new(5)).unwrap();
        let u = [6, 7, 8, 9, 10];
        let a = infer_context(&[&u], &cnn, 96).unwrap();
        let b = cnn.predict(&u).unwrap();
        assert_eq!(a, b);
        assert_eq!(infer_context(&[&u], &cnn, 96).unwrap(), a);
    }

    #[test]
    fn full_model_gradient_check() {
        let mut cnn = CnnParams::new(tiny(10), &mut SeededRng::new(6)).unwrap();
        let (config, ids) = (cnn.config.clone(), cnn.ids);
        let tokens = [5, 7, 6, 9, 8, 5, 9, 7, 6];
        let report = grad_check(&mut cnn.params, 1e-5, None, |g, p| {
            let (_, logits) = forward_impl(
                g,
                p,
                &config,
                ids,
                &tokens,
                true,
                false,
                &mut SeededRng::new(0),
            )?;
            g.cross_entropy(logits, 2)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let data = vec![LabeledText {
            tokens: vec![5, 6],
            label: 9,
        }];
        let err = cnn_train(&data, tiny(10), &CnnTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 1, .. }));
    }
}
