use super::*;
use crate::corpus::{frame_target, TrainingPair, Vocabulary, EOS};
use crate::error::Error;
use crate::seq2seq::{sequence_logprob, DecoderKind, ModelConfig, Seq2Seq};
use crate::tensor::{Graph, SeededRng};
use crate::topic_cnn::{CnnConfig, CnnParams};

fn tiny(kind: DecoderKind, vocab_size: usize, init_scale: f64, seed: u64) -> Seq2Seq {
    let config = ModelConfig {
        kind,
        n_layers: 1,
        hidden: 8,
        embed: 8,
        vocab_size,
        k_topics: 4,
        attn_dim: 8,
        dropout: 0.0,
        init_scale,
        ..ModelConfig::default()
    };
    Seq2Seq::new(config, &mut SeededRng::new(seed)).unwrap()
}

const C: [f64; 4] = [0.1, 0.6, 0.2, 0.1];

fn context_for(kind: DecoderKind) -> Option<&'static [f64]> {
    kind.uses_context().then_some(&C[..])
}

fn pair(source_len: usize, content_len: usize) -> TrainingPair {
    TrainingPair {
        source: (0..source_len).map(|i| 5 + i % 7).collect(),
        target: frame_target(&(0..content_len).map(|i| 6 + i % 9).collect::<Vec<_>>()),
        context: vec![5, 6],
        label: None,
    }
}

// ── Perplexity ───────────────────────────────────────────────────────────

#[test]
fn constant_logits_give_vocabulary_sized_perplexity() {
    let mut m = tiny(DecoderKind::Vanilla, 50, 0.1, 3);
    m.params
        .by_name_mut("dec.out.w")
        .unwrap()
        .data_mut()
        .fill(0.0);
    m.params
        .by_name_mut("dec.out.b")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let pairs = [pair(4, 3), pair(7, 25), pair(5, 40)];
    let report = perplexity(&m, &pairs, None).unwrap();
    assert!((report.overall.unwrap() - 50.0).abs() < 1e-6, "{report:?}");
}

#[test]
fn buckets_partition_by_target_content_length() {
    let m = tiny(DecoderKind::Vanilla, 20, 0.1, 3);
    let pairs: Vec<_> = [1, 19, 20, 30, 31, 45]
        .iter()
        .map(|&n| pair(3, n))
        .collect();
    let report = perplexity(&m, &pairs, None).unwrap();
    assert_eq!(
        (report.short.n, report.long.n, report.excluded_n),
        (2, 2, 2)
    );
    assert_eq!(report.total(), pairs.len());
}

#[test]
fn perplexity_matches_summed_sequence_scores() {
    let m = tiny(DecoderKind::SoftAttention, 20, 0.3, 4);
    let pairs = [pair(4, 3), pair(6, 22), pair(2, 35), pair(5, 12)];
    let (mut nll, mut tokens) = (0.0, 0);
    for p in &pairs {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let s = sequence_logprob(
            &mut g,
            &vars,
            &p.source,
            &p.target,
            None,
            &mut SeededRng::new(0),
            false,
        )
        .unwrap();
        nll -= s.logprob;
        tokens += s.tokens;
    }
    let report = perplexity(&m, &pairs, None).unwrap();
    assert!((report.overall.unwrap() - (nll / tokens as f64).exp()).abs() < 1e-9);
}

#[test]
fn empty_bucket_has_no_perplexity() {
    let m = tiny(DecoderKind::Vanilla, 20, 0.1, 3);
    let report = perplexity(&m, &[pair(3, 5)], None).unwrap();
    assert_eq!(report.long, Bucket { n: 0, ppl: None });
}

// ── Decoding ─────────────────────────────────────────────────────────────

#[test]
fn beam_of_one_is_greedy() {
    for kind in DecoderKind::ALL {
        for seed in 0..5 {
            let m = tiny(kind, 12, 0.8, seed);
            let source = [5, 7, 9, 6];
            let settings = DecodeSettings {
                beam: 1,
                gamma: 0.6,
                max_len: 12,
            };
            let beam = beam_search(&m, &source, context_for(kind), &settings).unwrap();
            let greedy = greedy_decode(&m, &source, context_for(kind), 12).unwrap();
            assert_eq!(beam[0].tokens, greedy, "{kind} seed {seed}");
        }
    }
}

/// Log-probability of every sequence of at most `max_len` tokens ending in
/// EOS, computed by teacher forcing.
fn exhaustive_best(
    m: &Seq2Seq,
    source: &[usize],
    context: Option<&[f64]>,
    max_len: usize,
) -> (Vec<usize>, f64) {
    let v = m.config.vocab_size;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack: Vec<Vec<usize>> = vec![vec![]];
    while let Some(prefix) = stack.pop() {
        if prefix.len() + 1 > max_len {
            continue;
        }
        for t in (0..v).filter(|&t| t != EOS) {
            let mut p = prefix.clone();
            p.push(t);
            stack.push(p);
        }
        let mut seq = prefix;
        seq.push(EOS);
        let mut target = vec![crate::corpus::BOS];
        target.extend(&seq);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let c = context.map(|c| g.row_vector(c).unwrap());
        let lp = sequence_logprob(
            &mut g,
            &vars,
            source,
            &target,
            c,
            &mut SeededRng::new(0),
            false,
        )
        .unwrap()
        .logprob;
        let better = match &best {
            None => true,
            Some((b, blp)) => lp > *blp || (lp == *blp && seq < *b),
        };
        if better {
            best = Some((seq, lp));
        }
    }
    best.unwrap()
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    let settings = DecodeSettings {
        beam: 625,
        gamma: 0.0,
        max_len: 4,
    };
    for (i, kind) in DecoderKind::ALL.iter().cycle().take(20).enumerate() {
        let m = tiny(*kind, 5, 1.5, 100 + i as u64);
        let source = [3, 4, 1];
        let (seq, lp) = exhaustive_best(&m, &source, context_for(*kind), 4);
        let top = &beam_search(&m, &source, context_for(*kind), &settings).unwrap()[0];
        assert_eq!(top.tokens, seq, "{kind} draw {i}");
        assert!((top.logprob - lp).abs() < 1e-9);
    }
}

#[test]
fn beam_results_are_ranked_and_finished() {
    let m = tiny(DecoderKind::ContextAttn, 10, 1.0, 9);
    let settings = DecodeSettings {
        beam: 4,
        gamma: 0.6,
        max_len: 10,
    };
    let hyps = beam_search(&m, &[5, 6, 7], Some(&C), &settings).unwrap();
    for w in hyps.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for h in &hyps {
        let expected = h.logprob / (h.tokens.len() as f64).powf(0.6);
        assert!((h.score - expected).abs() < 1e-12);
        if h.finished {
            assert_eq!(h.tokens.last(), Some(&EOS));
        }
    }
}

#[test]
fn unfinished_beam_returns_one_flagged_hypothesis() {
    let mut m = tiny(DecoderKind::Vanilla, 10, 0.1, 2);
    m.params.by_name_mut("dec.out.b").unwrap().data_mut()[EOS] = -1e3;
    let settings = DecodeSettings {
        beam: 3,
        gamma: 0.6,
        max_len: 5,
    };
    let hyps = beam_search(&m, &[5, 6], None, &settings).unwrap();
    assert_eq!(hyps.len(), 1);
    assert!(!hyps[0].finished);
    assert_eq!(hyps[0].tokens.len(), 5);
}

#[test]
fn zero_beam_is_rejected() {
    let m = tiny(DecoderKind::Vanilla, 10, 0.1, 2);
    let settings = DecodeSettings {
        beam: 0,
        ..DecodeSettings::default()
    };
    assert!(matches!(
        beam_search(&m, &[5], None, &settings),
        Err(Error::Config(_))
    ));
}

// ── Attention traces ─────────────────────────────────────────────────────

fn small_vocab() -> Vocabulary {
    Vocabulary::from_tokens("abcdefg".chars().collect())
}

#[test]
fn trace_rows_are_distributions_over_the_source() {
    let vocab = small_vocab();
    for kind in [DecoderKind::SoftAttention, DecoderKind::ContextAttn] {
        let m = tiny(kind, vocab.len(), 0.5, 5);
        let source = vocab.encode("abcde");
        let trace = attention_trace(&m, &vocab, &source, context_for(kind), 8).unwrap();
        assert_eq!(trace.alpha.len(), trace.target.len());
        for row in &trace.alpha {
            assert_eq!(row.len(), source.len());
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(trace.gates.is_some(), kind == DecoderKind::ContextAttn);
        assert_eq!(trace.ascii().lines().count(), trace.target.len() + 1);
        let back: AttentionTrace = serde_json::from_str(&trace.to_json()).unwrap();
        assert_eq!(back, trace);
    }
}

#[test]
fn trace_refuses_decoders_without_attention() {
    let vocab = small_vocab();
    for kind in [
        DecoderKind::Vanilla,
        DecoderKind::ContextIn,
        DecoderKind::ContextIo,
    ] {
        let m = tiny(kind, vocab.len(), 0.5, 5);
        let err = attention_trace(&m, &vocab, &vocab.encode("abc"), context_for(kind), 8);
        assert!(matches!(err, Err(Error::Contract(_))), "{kind}");
    }
}

// ── Chat sessions ────────────────────────────────────────────────────────

fn cnn_for(vocab: &Vocabulary) -> CnnParams {
    let config = CnnConfig {
        vocab_size: vocab.len(),
        k_topics: 4,
        ..CnnConfig::default()
    };
    CnnParams::new(config, &mut SeededRng::new(8)).unwrap()
}

#[test]
fn chat_is_deterministic_and_bounded_by_the_window() {
    let vocab = small_vocab();
    let m = tiny(DecoderKind::ContextAttn, vocab.len(), 0.8, 6);
    let cnn = cnn_for(&vocab);
    let run = || {
        let mut chat = ChatSession::new(&m, Some(&cnn), &vocab)
            .unwrap()
            .with_window(3)
            .unwrap();
        let replies: Vec<String> = ["abc", "dd", "gfe", "a"]
            .iter()
            .map(|u| chat.turn(u).unwrap())
            .collect();
        assert!(chat.history().len() <= 3);
        replies
    };
    assert_eq!(run(), run());
}

#[test]
fn reset_forgets_the_history() {
    let vocab = small_vocab();
    let m = tiny(DecoderKind::ContextIn, vocab.len(), 0.8, 6);
    let cnn = cnn_for(&vocab);
    let mut fresh = ChatSession::new(&m, Some(&cnn), &vocab).unwrap();
    let first = fresh.turn("bad").unwrap();
    let mut chat = ChatSession::new(&m, Some(&cnn), &vocab).unwrap();
    chat.turn("gggfff").unwrap();
    chat.reset();
    assert!(chat.history().is_empty());
    assert!(chat.topic().unwrap().is_none());
    assert_eq!(chat.turn("bad").unwrap(), first);
}

#[test]
fn context_chat_needs_a_topic_encoder() {
    let vocab = small_vocab();
    let m = tiny(DecoderKind::ContextAttn, vocab.len(), 0.8, 6);
    assert!(matches!(
        ChatSession::new(&m, None, &vocab),
        Err(Error::Config(_))
    ));
    assert!(ChatSession::new(&m, Some(&cnn_for(&vocab)), &vocab)
        .unwrap()
        .with_window(0)
        .is_err());
}

// ── Robustness probes ────────────────────────────────────────────────────

#[test]
fn noise_specs_parse() {
    assert_eq!("none".parse::<NoiseSpec>().unwrap(), NoiseSpec::none());
    let spec: NoiseSpec = "insert+append;tokens=xy;positions=0,2;trials=3;seed=9"
        .parse()
        .unwrap();
    assert_eq!(spec.ops, vec![NoiseOp::Insert, NoiseOp::Append]);
    assert_eq!(spec.tokens, vec!['x', 'y']);
    assert_eq!(spec.positions, Positions::List(vec![0, 2]));
    assert_eq!((spec.trials, spec.seed), (3, 9));
    for bad in [
        "shuffle;tokens=a",
        "insert",
        "insert;tokens=a;trials=x",
        "insert;colour=red",
    ] {
        assert!(bad.parse::<NoiseSpec>().is_err(), "{bad}");
    }
}

#[test]
fn variants_enumerate_every_edit() {
    let spec: NoiseSpec = "insert;tokens=xy".parse().unwrap();
    let v = spec.variants("abc").unwrap();
    assert_eq!(v.len(), 8);
    assert!(v.contains(&"xabc".to_string()) && v.contains(&"abcy".to_string()));
    let spec: NoiseSpec = "substitute;tokens=b".parse().unwrap();
    assert_eq!(spec.variants("abc").unwrap(), vec!["bbc", "abb"]);
    let spec: NoiseSpec = "prepend+append;tokens=z".parse().unwrap();
    assert_eq!(spec.variants("ab").unwrap(), vec!["zab", "abz"]);
    let spec: NoiseSpec = "insert;tokens=xyz;trials=4;seed=3".parse().unwrap();
    let sampled = spec.variants("abcd").unwrap();
    assert_eq!(sampled.len(), 4);
    assert_eq!(sampled, spec.variants("abcd").unwrap());
}

#[test]
fn zero_noise_is_perfectly_stable() {
    let vocab = small_vocab();
    let m = tiny(DecoderKind::ContextAttn, vocab.len(), 0.8, 6);
    let cnn = cnn_for(&vocab);
    let responder = Responder {
        model: &m,
        cnn: Some(&cnn),
        vocab: &vocab,
        settings: DecodeSettings::default(),
    };
    let report =
        robustness_probe(&responder, &["ggg".into()], "abc", &NoiseSpec::none(), None).unwrap();
    assert_eq!(report.variants.len(), 1);
    assert_eq!(report.exact_match, 1.0);
    assert!(report.topic_stability.is_none());
    let noisy =
        robustness_probe(&responder, &[], "abc", &NoiseSpec::insertion(&['d']), None).unwrap();
    assert_eq!(noisy.variants.len(), 4);
    let exact = noisy.variants.iter().filter(|v| v.exact).count() as f64 / 4.0;
    assert_eq!(noisy.exact_match, exact);
}
