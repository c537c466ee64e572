//! Padded mini-batches.

use crate::corpus::pairs::TrainingPair;
use crate::corpus::vocab::PAD;
use crate::tensor::SeededRng;

/// A PAD-padded view over a group of pairs. Masks hold 1.0 on real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of the member pairs in the input slice.
    pub indices: Vec<usize>,
    pub sources: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<f64>>,
    pub targets: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<usize>>,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of predicted target tokens (everything after BOS, EOS included).
    pub fn target_tokens(&self) -> usize {
        self.target_mask
            .iter()
            .map(|m| m.iter().skip(1).filter(|&&x| x > 0.0).count())
            .sum()
    }

    /// The unpadded source/target of member `i`.
    pub fn unpadded(&self, i: usize) -> (&[usize], &[usize]) {
        let n = self.source_mask[i].iter().filter(|&&x| x > 0.0).count();
        let m = self.target_mask[i].iter().filter(|&&x| x > 0.0).count();
        (&self.sources[i][..n], &self.targets[i][..m])
    }
}

fn pad(seqs: Vec<&[usize]>) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    seqs.into_iter()
        .map(|s| {
            let mut padded = s.to_vec();
            padded.resize(width, PAD);
            let mut mask = vec![1.0; s.len()];
            mask.resize(width, 0.0);
            (padded, mask)
        })
        .unzip()
}

fn assemble(pairs: &[TrainingPair], indices: Vec<usize>) -> Batch {
    let (sources, source_mask) = pad(indices
        .iter()
        .map(|&i| pairs[i].source.as_slice())
        .collect());
    let (targets, target_mask) = pad(indices
        .iter()
        .map(|&i| pairs[i].target.as_slice())
        .collect());
    let (contexts, _) = pad(indices
        .iter()
        .map(|&i| pairs[i].context.as_slice())
        .collect());
    let labels = indices.iter().map(|&i| pairs[i].label).collect();
    Batch {
        indices,
        sources,
        source_mask,
        targets,
        target_mask,
        contexts,
        labels,
    }
}

/// Pools this many batches' worth of pairs before sorting by length.
const BUCKET_SPAN: usize = 20;

/// Splits `pairs` into batches of at most `batch_size` (0 is treated as 1).
///
/// Without an rng the input order is kept. With one, pairs are shuffled,
/// sorted by target length inside pools of `BUCKET_SPAN` batches so that
/// batch members have similar lengths, and the batch order is shuffled.
pub fn batch(
    pairs: &[TrainingPair],
    batch_size: usize,
    bucketing: Option<&mut SeededRng>,
) -> Vec<Batch> {
    let size = batch_size.max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let groups: Vec<Vec<usize>> = match bucketing {
        None => order.chunks(size).map(<[usize]>::to_vec).collect(),
        Some(rng) => {
            rng.shuffle(&mut order);
            let mut groups = Vec::new();
            for pool in order.chunks_mut(size * BUCKET_SPAN) {
                pool.sort_by_key(|&i| pairs[i].target.len());
                groups.extend(pool.chunks(size).map(<[usize]>::to_vec));
            }
            rng.shuffle(&mut groups);
            groups
        }
    };
    groups.into_iter().map(|g| assemble(pairs, g)).collect()
}
