//! Length-bucketed corpus perplexity.

use serde::{Deserialize, Serialize};

use crate::corpus::TrainingPair;
use crate::error::{Error, Result};
use crate::seq2seq::{batch_logprob, Seq2Seq};
use crate::tensor::{Graph, SeededRng};
use crate::topic_cnn::CnnParams;

/// Targets with fewer content characters than this fall in the short bucket.
pub const SHORT_BELOW: usize = 20;
/// Targets with more content characters than this fall in the long bucket.
pub const LONG_ABOVE: usize = 30;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub n: usize,
    /// Absent when the bucket is empty.
    pub ppl: Option<f64>,
}

/// Perplexity `exp(sum NLL / sum tokens)` overall and per target-length
/// bucket. Token counts include EOS; lengths are target content characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub short: Bucket,
    pub long: Bucket,
    pub excluded_n: usize,
    pub overall: Option<f64>,
}

impl PerplexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn total(&self) -> usize {
        self.short.n + self.long.n + self.excluded_n
    }
}

#[derive(Default)]
struct Accum {
    n: usize,
    nll: f64,
    tokens: usize,
}

impl Accum {
    fn add(&mut self, nll: f64, tokens: usize) {
        self.n += 1;
        self.nll += nll;
        self.tokens += tokens;
    }

    fn bucket(&self) -> Bucket {
        Bucket {
            n: self.n,
            ppl: self.ppl(),
        }
    }

    fn ppl(&self) -> Option<f64> {
        (self.tokens > 0).then(|| (self.nll / self.tokens as f64).exp())
    }
}

/// Eval-mode topic vectors of every pair's context.
pub fn topic_vectors(cnn: &CnnParams, pairs: &[TrainingPair]) -> Result<Vec<Vec<f64>>> {
    pairs.iter().map(|p| cnn.predict(&p.context)).collect()
}

/// Per-pair `(negative log-likelihood, predicted tokens)` under teacher
/// forcing in eval mode. `contexts` holds one topic vector per pair and must
/// be given exactly when the model's kind uses context.
pub fn pair_nll(
    model: &Seq2Seq,
    pairs: &[TrainingPair],
    contexts: Option<&[Vec<f64>]>,
) -> Result<Vec<(f64, usize)>> {
    if let Some(c) = contexts {
        if c.len() != pairs.len() {
            return Err(Error::Contract(format!(
                "{} topic vectors for {} pairs",
                c.len(),
                pairs.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(pairs.len());
    let mut rng = SeededRng::new(0);
    for (chunk_index, chunk) in pairs.chunks(EVAL_BATCH).enumerate() {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let c = match contexts {
            None => None,
            Some(all) => {
                let rows = &all[chunk_index * EVAL_BATCH..chunk_index * EVAL_BATCH + chunk.len()];
                let k = rows.first().map_or(0, Vec::len);
                Some(g.constant_vec(rows.len(), k, rows.concat())?)
            }
        };
        let sources: Vec<&[usize]> = chunk.iter().map(|p| p.source.as_slice()).collect();
        let targets: Vec<&[usize]> = chunk.iter().map(|p| p.target.as_slice()).collect();
        let score = batch_logprob(&mut g, &vars, &sources, &targets, c, &mut rng, false)?;
        out.extend(score.nll.into_iter().zip(score.tokens));
    }
    Ok(out)
}

/// Corpus perplexity of `pairs`, bucketed by target length.
pub fn perplexity(
    model: &Seq2Seq,
    pairs: &[TrainingPair],
    contexts: Option<&[Vec<f64>]>,
) -> Result<PerplexityReport> {
    let scores = pair_nll(model, pairs, contexts)?;
    let (mut short, mut long, mut all) = (Accum::default(), Accum::default(), Accum::default());
    let mut excluded_n = 0;
    for (pair, &(nll, tokens)) in pairs.iter().zip(&scores) {
        all.add(nll, tokens);
        match pair.content_len() {
            l if l < SHORT_BELOW => short.add(nll, tokens),
            l if l > LONG_ABOVE => long.add(nll, tokens),
            _ => excluded_n += 1,
        }
    }
    Ok(PerplexityReport {
        short: short.bucket(),
        long: long.bucket(),
        excluded_n,
        overall: all.ppl(),
    })
}
