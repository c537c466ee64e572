//! Parameter layout of a model and its binding onto a graph.

use crate::error::{Error, Result};
use crate::seq2seq::config::{ContextIoMode, DecoderKind, ModelConfig};
use crate::tensor::{Graph, Init, ParamId, ParamSet, SeededRng, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIds {
    pub w: ParamId,
    pub b: ParamId,
    /// Context-In projection of this layer.
    pub wc: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub wk: ParamId,
    pub ws: ParamId,
    pub v: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GateIds {
    pub wc: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelIds {
    pub enc_emb: ParamId,
    pub enc: Vec<LayerIds>,
    pub dec_emb: ParamId,
    pub dec: Vec<LayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub io: Option<(ParamId, ParamId)>,
    pub attn: Option<AttnIds>,
    pub gate: Option<GateIds>,
}

/// A model: configuration plus its named parameters.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub(crate) ids: ModelIds,
}

struct Builder<'r> {
    set: ParamSet,
    rng: &'r mut SeededRng,
    scale: f64,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let s = self.scale;
        let t = Tensor::new(shape, Init::Uniform { lo: -s, hi: s }, self.rng)?;
        self.set.add(name, t)
    }

    fn bias(&mut self, name: String, n: usize) -> Result<ParamId> {
        self.set.add(name, Tensor::zeros(&[n])?)
    }
}

impl Seq2Seq {
    /// Uniform(-s, s) weights, zero biases, forget-gate biases at `forget_bias`.
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (h, e, v, k) = (c.hidden, c.embed, c.vocab_size, c.k_topics);
        let mut b = Builder {
            set: ParamSet::new(),
            rng,
            scale: c.init_scale,
        };
        let enc_emb = b.weight("enc.emb".into(), &[v, e])?;
        let mut enc = Vec::new();
        for l in 0..c.n_layers {
            let input = if l == 0 { e } else { h };
            enc.push(LayerIds {
                w: b.weight(format!("enc.l{l}.w"), &[input + h, 4 * h])?,
                b: b.bias(format!("enc.l{l}.b"), 4 * h)?,
                wc: None,
            });
        }
        let dec_emb = b.weight("dec.emb".into(), &[v, e])?;
        let mut dec = Vec::new();
        for l in 0..c.n_layers {
            let mut input = if l == 0 { e } else { h };
            if l == 0 && c.kind.uses_attention() {
                input += h;
            }
            let w = b.weight(format!("dec.l{l}.w"), &[input + h, 4 * h])?;
            let bias = b.bias(format!("dec.l{l}.b"), 4 * h)?;
            let wc = if c.kind == DecoderKind::ContextIn {
                let cols = if c.per_gate_context { 4 * h } else { h };
                Some(b.weight(format!("dec.l{l}.wc"), &[k, cols])?)
            } else {
                None
            };
            dec.push(LayerIds { w, b: bias, wc });
        }
        let out_w = b.weight("dec.out.w".into(), &[h, v])?;
        let out_b = b.bias("dec.out.b".into(), v)?;
        let io = if c.kind == DecoderKind::ContextIo {
            let cols = match c.context_io_mode {
                ContextIoMode::Additive => e,
                ContextIoMode::Modulate => h,
            };
            Some((
                b.weight("dec.io.win".into(), &[k, cols])?,
                b.weight("dec.io.wout".into(), &[k, v])?,
            ))
        } else {
            None
        };
        let attn = if c.kind.uses_attention() {
            Some(AttnIds {
                wk: b.weight("attn.wk".into(), &[h, c.attn_dim])?,
                ws: b.weight("attn.ws".into(), &[h, c.attn_dim])?,
                v: b.weight("attn.v".into(), &[c.attn_dim, 1])?,
            })
        } else {
            None
        };
        let gate = if c.kind == DecoderKind::ContextAttn {
            Some(GateIds {
                wc: b.weight("gate.wc".into(), &[k, h])?,
                wh: b.weight("gate.wh".into(), &[h, h])?,
                b: b.bias("gate.b".into(), h)?,
                conv_w: b.weight("attn.conv.w".into(), &[c.attn_width * h, h])?,
                conv_b: b.bias("attn.conv.b".into(), h)?,
            })
        } else {
            None
        };
        let mut params = b.set;
        for layer in enc.iter().chain(&dec) {
            params.get_mut(layer.b).data_mut()[h..2 * h].fill(c.forget_bias);
        }
        Ok(Self {
            config,
            params,
            ids: ModelIds {
                enc_emb,
                enc,
                dec_emb,
                dec,
                out_w,
                out_b,
                io,
                attn,
                gate,
            },
        })
    }

    /// Rebuilds a model from loaded tensors. Every expected parameter must be
    /// present with the expected shape and no extra ones may remain.
    pub fn from_params(config: ModelConfig, loaded: &ParamSet) -> Result<Self> {
        let mut model = Self::new(config, &mut SeededRng::new(0))?;
        let mut expected = 0;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t = loaded
                .by_name(&name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = Tensor::from_vec(t.shape(), t.data().to_vec())?.with_grad();
            expected += 1;
        }
        if let Some((extra, _)) = loaded.iter().find(|(n, _)| model.params.id(n).is_none()) {
            return Err(Error::Incompatible(format!(
                "parameter {extra} does not belong to a {} model",
                model.config.kind
            )));
        }
        debug_assert_eq!(expected, model.params.len());
        Ok(model)
    }

    pub fn kind(&self) -> DecoderKind {
        self.config.kind
    }

    /// Places every parameter on `g` once. With `trainable` false the
    /// parameters are constants and no gradients flow to them.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> ModelVars<'a> {
        self.bind_params(g, &self.params, trainable)
    }

    /// Like [`Seq2Seq::bind`] but reading values from `params`, which must
    /// have this model's layout (e.g. a clone of `self.params`).
    pub fn bind_params<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        trainable: bool,
    ) -> ModelVars<'a> {
        let mut take = |id: ParamId| {
            if trainable {
                g.param(params, id)
            } else {
                g.frozen(params, id)
            }
        };
        let layer = |take: &mut dyn FnMut(ParamId) -> Var, l: &LayerIds| LayerVars {
            w: take(l.w),
            b: take(l.b),
            wc: l.wc.map(&mut *take),
        };
        let enc = self.ids.enc.iter().map(|l| layer(&mut take, l)).collect();
        let dec = self.ids.dec.iter().map(|l| layer(&mut take, l)).collect();
        let out_w = take(self.ids.out_w);
        let out_b = take(self.ids.out_b);
        let io = self.ids.io.map(|(a, b)| (take(a), take(b)));
        let attn = self.ids.attn.map(|a| AttnVars {
            wk: take(a.wk),
            ws: take(a.ws),
            v: take(a.v),
        });
        let gate = self.ids.gate.map(|q| GateVars {
            wc: take(q.wc),
            wh: take(q.wh),
            b: take(q.b),
            conv_w: take(q.conv_w),
            conv_b: take(q.conv_b),
        });
        ModelVars {
            config: self.config.clone(),
            params,
            emb: (self.ids.enc_emb, self.ids.dec_emb),
            trainable,
            enc,
            dec,
            out_w,
            out_b,
            io,
            attn,
            gate,
        }
    }
}

/// One LSTM layer on a graph: `w` is `(input + hidden) x 4 hidden` with gate
/// blocks ordered input, forget, output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
    pub wc: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wk: Var,
    pub ws: Var,
    pub v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub wc: Var,
    pub wh: Var,
    pub b: Var,
    pub conv_w: Var,
    pub conv_b: Var,
}

/// A model's parameters placed on one graph.
pub struct ModelVars<'a> {
    pub config: ModelConfig,
    params: &'a ParamSet,
    emb: (ParamId, ParamId),
    pub trainable: bool,
    pub enc: Vec<LayerVars>,
    pub dec: Vec<LayerVars>,
    pub out_w: Var,
    pub out_b: Var,
    pub io: Option<(Var, Var)>,
    pub attn: Option<AttnVars>,
    pub gate: Option<GateVars>,
}

impl<'a> ModelVars<'a> {
    pub fn kind(&self) -> DecoderKind {
        self.config.kind
    }

    /// Embeddings of `tokens` as a `tokens.len() x embed` matrix.
    pub(crate) fn embed_rows(
        &self,
        g: &mut Graph<'a>,
        encoder: bool,
        tokens: &[usize],
    ) -> Result<Var> {
        let id = if encoder { self.emb.0 } else { self.emb.1 };
        g.gather_rows(self.params, id, tokens, self.trainable)
    }
}
