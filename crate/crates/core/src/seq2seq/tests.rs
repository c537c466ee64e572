use super::*;
use crate::error::Error;
use crate::tensor::{grad_check, Graph, SeededRng};

fn tiny(kind: DecoderKind) -> ModelConfig {
    ModelConfig {
        kind,
        n_layers: 2,
        hidden: 8,
        embed: 8,
        vocab_size: 20,
        k_topics: 4,
        attn_dim: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn model(config: ModelConfig, seed: u64) -> Seq2Seq {
    Seq2Seq::new(config, &mut SeededRng::new(seed)).unwrap()
}

/// Copies every parameter `dst` shares by name with `src`.
fn copy_shared(src: &Seq2Seq, dst: &mut Seq2Seq) {
    for (name, t) in src.params.iter() {
        if let Some(d) = dst.params.by_name_mut(name) {
            d.data_mut().copy_from_slice(t.data());
        }
    }
}

fn logits_of(m: &Seq2Seq, source: &[usize], target: &[usize], c: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let mut rng = SeededRng::new(0);
    let c = c.map(|c| g.row_vector(c).unwrap());
    let enc = encode(&mut g, &vars, source, &mut rng, false).unwrap();
    let setup = prepare(&mut g, &vars, &enc, c).unwrap();
    let mut state = enc.v.clone();
    let mut out = Vec::new();
    for &y in target {
        let step = decoder_step(&mut g, &vars, &setup, &[y], &state, &mut rng, false).unwrap();
        out.push(g.value(step.logits).to_vec());
        state = step.state;
    }
    out
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

const SRC: [usize; 5] = [5, 9, 7, 12, 6];
const TGT: [usize; 6] = [1, 8, 11, 5, 14, 2];
const C: [f64; 4] = [0.1, 0.6, 0.2, 0.1];

// ── Cells ─────────────────────────────────────────────────────────────

#[test]
fn zero_weights_give_zero_hidden() {
    let mut m = model(tiny(DecoderKind::Vanilla), 1);
    for id in m.params.ids().collect::<Vec<_>>() {
        m.params.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let x = g.row_vector(&[0.3; 8]).unwrap();
    let state = LstmState::zeros(&mut g, 1, 2, 8).unwrap();
    let (h, next) = lstm_step(
        &mut g,
        x,
        &state,
        &vars.enc,
        0.0,
        &mut SeededRng::new(0),
        false,
    )
    .unwrap();
    assert!(g.value(h).iter().all(|&v| v == 0.0));
    assert!(g.value(next.layers[0].c).iter().all(|&v| v == 0.0));
}

#[test]
fn clstm_with_zero_context_is_lstm() {
    let m = model(tiny(DecoderKind::ContextIn), 2);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let x = g
        .row_vector(&[0.1, -0.2, 0.3, 0.05, 0.0, 0.7, -0.4, 0.2])
        .unwrap();
    let state = LstmState::zeros(&mut g, 1, 2, 8).unwrap();
    let zero = g.row_vector(&[0.0; 4]).unwrap();
    let mut rng = SeededRng::new(0);
    let (h_plain, s_plain) = lstm_step(&mut g, x, &state, &vars.dec, 0.0, &mut rng, false).unwrap();
    let (h_ctx, s_ctx) =
        clstm_step(&mut g, x, &state, zero, &vars.dec, 0.0, &mut rng, false).unwrap();
    assert_eq!(g.value(h_plain), g.value(h_ctx));
    assert_eq!(g.value(s_plain.layers[0].c), g.value(s_ctx.layers[0].c));
}

#[test]
fn large_context_saturates_gates() {
    let mut m = model(tiny(DecoderKind::ContextIn), 3);
    m.params
        .by_name_mut("dec.l0.wc")
        .unwrap()
        .data_mut()
        .fill(100.0);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let x = g.row_vector(&[0.2; 8]).unwrap();
    let state = LstmState::zeros(&mut g, 1, 2, 8).unwrap();
    let c = g.row_vector(&[1.0, 0.0, 0.0, 0.0]).unwrap();
    let (_, next) = clstm_step(
        &mut g,
        x,
        &state,
        c,
        &vars.dec,
        0.0,
        &mut SeededRng::new(0),
        false,
    )
    .unwrap();
    // i = f = o = 1 and candidate = 1, so C = 1 and h = tanh(1).
    for &v in g.value(next.layers[0].c) {
        assert!((v - 1.0).abs() < 1e-12);
    }
    for &v in g.value(next.layers[0].h) {
        assert!((v - 1f64.tanh()).abs() < 1e-12);
    }
}

#[test]
fn single_step_gradient_checks() {
    for kind in [DecoderKind::Vanilla, DecoderKind::ContextIn] {
        let cfg = ModelConfig {
            n_layers: 1,
            ..tiny(kind)
        };
        let mut m = model(cfg, 4);
        let meta = m.clone();
        let report = grad_check(&mut m.params, 1e-5, None, |g, p| {
            let vars = meta.bind_params(g, p, true);
            let x = g.row_vector(&[0.5, -0.3, 0.2, 0.1, -0.6, 0.4, 0.05, -0.2])?;
            let state = LstmState {
                layers: vec![CellState {
                    h: g.row_vector(&[0.1, -0.1, 0.2, 0.0, 0.3, -0.2, 0.1, 0.05])?,
                    c: g.row_vector(&[0.2, 0.1, -0.3, 0.4, 0.0, 0.1, -0.1, 0.2])?,
                }],
            };
            let mut rng = SeededRng::new(0);
            let (h, next) = if kind == DecoderKind::ContextIn {
                let c = g.row_vector(&C)?;
                clstm_step(g, x, &state, c, &vars.dec, 0.0, &mut rng, false)?
            } else {
                lstm_step(g, x, &state, &vars.enc, 0.0, &mut rng, false)?
            };
            let hc = g.mul(h, next.layers[0].c)?;
            let s1 = g.sum(hc);
            let s2 = g.sum(h);
            g.add(s1, s2)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{kind}: {report:?}");
    }
}

// ── Encoder ───────────────────────────────────────────────────────────

#[test]
fn encoder_shapes_and_reversal() {
    let mut cfg = tiny(DecoderKind::Vanilla);
    let fwd_cfg = ModelConfig {
        reverse_source: Some(false),
        ..cfg.clone()
    };
    cfg.reverse_source = Some(true);
    let rev = model(cfg, 5);
    let mut fwd = model(fwd_cfg, 5);
    copy_shared(&rev, &mut fwd);

    let run = |m: &Seq2Seq, src: &[usize]| {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let enc = encode(&mut g, &vars, src, &mut SeededRng::new(0), false).unwrap();
        let rows: Vec<Vec<f64>> = g
            .value(enc.outputs)
            .chunks(8)
            .map(<[f64]>::to_vec)
            .collect();
        let v = g.value(enc.v.top().h).to_vec();
        (rows, v)
    };

    let (h1, v1) = run(&fwd, &[7]);
    assert_eq!(h1.len(), 1);
    assert_eq!(h1[0], v1);

    let palindrome = [5, 8, 6, 8, 5];
    let (hf, _) = run(&fwd, &palindrome);
    let (hr, _) = run(&rev, &palindrome);
    let mut a = hf.clone();
    let mut b = hr.clone();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    assert_eq!(a, b);

    let (_, vf) = run(&fwd, &SRC);
    let (_, vr) = run(&rev, &SRC);
    assert_ne!(vf, vr);
    assert_eq!(run(&rev, &SRC), run(&rev, &SRC));
}

#[test]
fn empty_source_is_rejected() {
    let m = model(tiny(DecoderKind::Vanilla), 6);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    assert!(matches!(
        encode(&mut g, &vars, &[], &mut SeededRng::new(0), false),
        Err(Error::Contract(_))
    ));
}

// ── Attention ─────────────────────────────────────────────────────────

#[test]
fn soft_attention_contracts() {
    let m = model(tiny(DecoderKind::SoftAttention), 7);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let attn = vars.attn.unwrap();
    let s = g
        .row_vector(&[0.3, -0.1, 0.2, 0.5, -0.4, 0.0, 0.1, 0.2])
        .unwrap();

    let h1 = g
        .row_vector(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
        .unwrap();
    let (a, alpha) = attention_soft(&mut g, h1, s, &attn).unwrap();
    assert_eq!(g.value(alpha), &[1.0]);
    assert_eq!(g.value(a), g.value(h1));

    let same = g.stack_rows(&[h1, h1, h1]).unwrap();
    let (a, alpha) = attention_soft(&mut g, same, s, &attn).unwrap();
    for &w in g.value(alpha) {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
    for (x, y) in g.value(a).iter().zip(g.value(h1)) {
        assert!((x - y).abs() < 1e-12);
    }

    let mut rng = SeededRng::new(8);
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let h = g.constant_vec(6, 8, rows.concat()).unwrap();
    let (_, alpha) = attention_soft(&mut g, h, s, &attn).unwrap();
    assert!((g.value(alpha).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(g.value(alpha).iter().all(|&w| w > 0.0));
}

#[test]
fn gate_limits() {
    let mut m = model(tiny(DecoderKind::ContextAttn), 9);
    let mut rng = SeededRng::new(10);
    let rows: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();

    for name in ["gate.wc", "gate.wh", "gate.b"] {
        m.params.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let h = g.constant_vec(3, 8, rows.clone()).unwrap();
        let c = g.row_vector(&C).unwrap();
        let (gated, gates) = gated_context_attention(&mut g, h, 3, c, &vars.gate.unwrap()).unwrap();
        assert!(g.value(gates).iter().all(|&x| x == 0.5));
        for (x, y) in g.value(gated).iter().zip(&rows) {
            assert_eq!(*x, y / 2.0);
        }
    }

    m.params
        .by_name_mut("gate.b")
        .unwrap()
        .data_mut()
        .fill(60.0);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let h = g.constant_vec(3, 8, rows.clone()).unwrap();
    let c = g.row_vector(&C).unwrap();
    let (gated, _) = gated_context_attention(&mut g, h, 3, c, &vars.gate.unwrap()).unwrap();
    for (x, y) in g.value(gated).iter().zip(&rows) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

#[test]
fn cnn_attention_contracts() {
    let mut m = model(tiny(DecoderKind::ContextAttn), 11);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let (gate, attn) = (vars.gate.unwrap(), vars.attn.unwrap());
    let s = g.row_vector(&[0.2; 8]).unwrap();
    let h1 = g
        .row_vector(&[0.5, -0.5, 0.1, 0.2, 0.3, 0.0, -0.1, 0.4])
        .unwrap();
    let (a, alpha) = attention_vector_cnn(&mut g, h1, s, &gate, &attn, 3).unwrap();
    assert_eq!(g.value(alpha), &[1.0]);
    assert_eq!(g.value(a), g.value(h1));
    drop(g);

    for name in ["attn.conv.w", "attn.conv.b"] {
        m.params.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let (gate, attn) = (vars.gate.unwrap(), vars.attn.unwrap());
    let s = g.row_vector(&[0.2; 8]).unwrap();
    let mut rng = SeededRng::new(12);
    let h = g
        .constant_vec(5, 8, (0..40).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .unwrap();
    let (_, alpha) = attention_vector_cnn(&mut g, h, s, &gate, &attn, 3).unwrap();
    assert!(g.value(alpha).iter().all(|&w| (w - 0.2).abs() < 1e-12));
}

// ── Decoder wiring ────────────────────────────────────────────────────

fn same_encoder(kind: DecoderKind) -> ModelConfig {
    ModelConfig {
        reverse_source: Some(true),
        ..tiny(kind)
    }
}

#[test]
fn context_in_with_zero_context_is_vanilla() {
    let vanilla = model(same_encoder(DecoderKind::Vanilla), 13);
    let mut ctx = model(same_encoder(DecoderKind::ContextIn), 14);
    copy_shared(&vanilla, &mut ctx);
    let a = logits_of(&vanilla, &SRC, &TGT, None);
    let b = logits_of(&ctx, &SRC, &TGT, Some(&[0.0; 4]));
    assert!(max_abs_diff(&a, &b) <= 1e-12);
    let c = logits_of(&ctx, &SRC, &TGT, Some(&C));
    assert!(max_abs_diff(&a, &c) > 1e-6);
}

#[test]
fn context_io_with_zero_weights_is_vanilla() {
    for mode in [ContextIoMode::Additive, ContextIoMode::Modulate] {
        let vanilla = model(same_encoder(DecoderKind::Vanilla), 15);
        let cfg = ModelConfig {
            context_io_mode: mode,
            ..same_encoder(DecoderKind::ContextIo)
        };
        let mut io = model(cfg, 16);
        copy_shared(&vanilla, &mut io);
        let c_shift = logits_of(&io, &SRC, &TGT, Some(&C));
        assert!(max_abs_diff(&logits_of(&vanilla, &SRC, &TGT, None), &c_shift) > 1e-6);
        for name in ["dec.io.win", "dec.io.wout"] {
            io.params.by_name_mut(name).unwrap().data_mut().fill(0.0);
        }
        let a = logits_of(&vanilla, &SRC, &TGT, None);
        let b = logits_of(&io, &SRC, &TGT, Some(&C));
        assert!(max_abs_diff(&a, &b) <= 1e-12, "{mode:?}");
    }
}

#[test]
fn context_attn_weights_are_distributions() {
    let m = model(tiny(DecoderKind::ContextAttn), 17);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let mut rng = SeededRng::new(0);
    let enc = encode(&mut g, &vars, &[6, 7, 8], &mut rng, false).unwrap();
    let c = g.row_vector(&C).unwrap();
    let setup = prepare(&mut g, &vars, &enc, Some(c)).unwrap();
    let step = decoder_step(&mut g, &vars, &setup, &[1], &enc.v, &mut rng, false).unwrap();
    let alpha = g.value(step.alpha.unwrap());
    assert_eq!(alpha.len(), 3);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn context_changes_logits_of_contextual_kinds() {
    for kind in [
        DecoderKind::ContextIn,
        DecoderKind::ContextIo,
        DecoderKind::ContextAttn,
    ] {
        let m = model(tiny(kind), 18);
        let a = logits_of(&m, &SRC, &TGT, Some(&C));
        let b = logits_of(&m, &SRC, &TGT, Some(&[0.7, 0.1, 0.1, 0.1]));
        assert!(max_abs_diff(&a, &b) > 1e-9, "{kind}");
    }
}

#[test]
fn kind_context_mismatch_is_a_contract_error() {
    for kind in DecoderKind::ALL {
        let m = model(tiny(kind), 19);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let mut rng = SeededRng::new(0);
        let enc = encode(&mut g, &vars, &SRC, &mut rng, false).unwrap();
        let wrong = if kind.uses_context() {
            None
        } else {
            Some(g.row_vector(&C).unwrap())
        };
        assert!(
            matches!(prepare(&mut g, &vars, &enc, wrong), Err(Error::Contract(_))),
            "{kind}"
        );
    }
}

// ── Sequence scoring ──────────────────────────────────────────────────

fn score(m: &Seq2Seq, source: &[usize], target: &[usize], c: Option<&[f64]>) -> SequenceScore {
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let c = c.map(|c| g.row_vector(c).unwrap());
    sequence_logprob(
        &mut g,
        &vars,
        source,
        target,
        c,
        &mut SeededRng::new(0),
        false,
    )
    .unwrap()
}

#[test]
fn zero_output_weights_give_uniform_tokens() {
    for kind in [
        DecoderKind::Vanilla,
        DecoderKind::SoftAttention,
        DecoderKind::ContextIn,
    ] {
        let mut m = model(tiny(kind), 20);
        m.params
            .by_name_mut("dec.out.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let c = kind.uses_context().then_some(&C[..]);
        let s = score(&m, &SRC, &TGT, c);
        assert_eq!(s.tokens, 5);
        assert!((s.logprob / 5.0 + 20f64.ln()).abs() < 1e-12);
        let total: f64 = s.step_losses.iter().sum();
        assert!((s.logprob + total).abs() < 1e-9);
    }
}

#[test]
fn probabilities_over_fixed_length_targets_sum_to_one() {
    for kind in DecoderKind::ALL {
        let cfg = ModelConfig {
            vocab_size: 3,
            init_scale: 0.8,
            ..tiny(kind)
        };
        let m = model(cfg, 21);
        let c = kind.uses_context().then_some(&C[..]);
        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                total += score(&m, &[2, 0, 1], &[1, a, b], c).logprob.exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{kind}: {total}");
    }
}

#[test]
fn every_kind_passes_an_end_to_end_gradient_check() {
    for kind in DecoderKind::ALL {
        let mut m = model(tiny(kind), 22);
        let meta = m.clone();
        let report = grad_check(&mut m.params, 1e-5, None, |g, p| {
            let vars = meta.bind_params(g, p, true);
            let c = if kind.uses_context() {
                Some(g.row_vector(&C)?)
            } else {
                None
            };
            let s = sequence_logprob(g, &vars, &SRC, &TGT, c, &mut SeededRng::new(0), false)?;
            Ok(s.loss)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{kind}: {report:?}");
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let m = model(tiny(DecoderKind::ContextAttn), 23);
    let a = score(&m, &SRC, &TGT, Some(&C));
    let b = score(&m, &SRC, &TGT, Some(&C));
    assert_eq!(a.logprob.to_bits(), b.logprob.to_bits());
}

#[test]
fn checkpoint_layout_is_enforced() {
    let vanilla = model(tiny(DecoderKind::Vanilla), 24);
    let err = Seq2Seq::from_params(tiny(DecoderKind::ContextAttn), &vanilla.params).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)));
    let again = Seq2Seq::from_params(tiny(DecoderKind::Vanilla), &vanilla.params).unwrap();
    assert_eq!(again.params.content_hash(), vanilla.params.content_hash());
}

const CONTEXTS: [[f64; 4]; 3] = [
    [0.7, 0.1, 0.1, 0.1],
    [0.05, 0.05, 0.2, 0.7],
    [0.25, 0.25, 0.25, 0.25],
];

fn batch_fixture() -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let sources = vec![vec![5, 6, 7, 8, 9], vec![10, 11], vec![12, 6, 14]];
    let targets = vec![vec![1, 7, 8, 2], vec![1, 9, 10, 11, 12, 13, 2], vec![1, 2]];
    (sources, targets)
}

#[test]
fn masked_batch_loss_equals_sum_of_single_losses() {
    let (sources, targets) = batch_fixture();
    for kind in DecoderKind::ALL {
        let m = model(tiny(kind), 21);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true);
        let c = kind
            .uses_context()
            .then(|| g.constant_vec(3, 4, CONTEXTS.concat()).unwrap());
        let src: Vec<&[usize]> = sources.iter().map(|s| s.as_slice()).collect();
        let tgt: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();
        let batch =
            batch_logprob(&mut g, &vars, &src, &tgt, c, &mut SeededRng::new(0), false).unwrap();
        let batch_grads = g.backward(batch.loss).unwrap();
        let batch_loss = g.scalar(batch.loss);

        let mut total = 0.0;
        let mut single_grads: Option<crate::tensor::Gradients> = None;
        for b in 0..3 {
            let mut g = Graph::new();
            let vars = m.bind(&mut g, true);
            let c = kind
                .uses_context()
                .then(|| g.row_vector(&CONTEXTS[b]).unwrap());
            let s = sequence_logprob(
                &mut g,
                &vars,
                src[b],
                tgt[b],
                c,
                &mut SeededRng::new(0),
                false,
            )
            .unwrap();
            assert!((batch.nll[b] + s.logprob).abs() < 1e-9, "{kind} row {b}");
            assert_eq!(batch.tokens[b], s.tokens);
            total += g.scalar(s.loss);
            let grads = g.backward(s.loss).unwrap();
            match single_grads.as_mut() {
                Some(acc) => acc.merge(grads),
                None => single_grads = Some(grads),
            }
        }
        assert!(
            (batch_loss - total).abs() < 1e-9,
            "{kind}: {batch_loss} vs {total}"
        );
        let single_grads = single_grads.unwrap();
        for id in m.params.ids() {
            let zeros = vec![0.0; m.params.get(id).len()];
            let a = batch_grads.get(id).unwrap_or(&zeros);
            let b = single_grads.get(id).unwrap_or(&zeros);
            let diff = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "{kind} {}: {diff}", m.params.name(id));
        }
    }
}

#[test]
fn expanded_setup_matches_the_source_row() {
    let (sources, _) = batch_fixture();
    for kind in [
        DecoderKind::SoftAttention,
        DecoderKind::ContextAttn,
        DecoderKind::ContextIo,
    ] {
        let m = model(tiny(kind), 4);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let mut rng = SeededRng::new(0);
        let c = kind
            .uses_context()
            .then(|| g.constant_vec(3, 4, CONTEXTS.concat()).unwrap());
        let src: Vec<&[usize]> = sources.iter().map(|s| s.as_slice()).collect();
        let enc = encode_batch(&mut g, &vars, &src, &mut rng, false).unwrap();
        let setup = prepare(&mut g, &vars, &enc, c).unwrap();
        let wide = setup.expand(&mut g, &[1, 1, 0]).unwrap();
        let pick = [Some(1), Some(1), Some(0)];
        let state = LstmState {
            layers: enc
                .v
                .layers
                .iter()
                .map(|l| CellState {
                    h: g.select_rows(l.h, &pick).unwrap(),
                    c: g.select_rows(l.c, &pick).unwrap(),
                })
                .collect(),
        };
        let step = decoder_step(&mut g, &vars, &wide, &[1, 1, 1], &state, &mut rng, false).unwrap();
        let logits = g.value(step.logits).to_vec();
        let v = 20;
        assert_eq!(&logits[..v], &logits[v..2 * v]);
        let c1 = kind.uses_context().then(|| CONTEXTS[1].to_vec());
        let single = logits_of(&m, src[1], &[1], c1.as_deref());
        let diff = single[0]
            .iter()
            .zip(&logits[..v])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{kind}: {diff}");
    }
}
