//! Transformer encoder-decoder with a convolutional subsampling front end
//! and an auxiliary CTC projection on the encoder output.

mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, ResolvedDims, StackConfig, Task};

use crate::error::{Error, Result};
use crate::objectives::{ctc_loss, joint_loss, xent_loss};
use crate::tensor::{Checkpoint, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenize::{BOS_ID, EOS_ID, PAD_ID};

/// Fill value for masked attention logits. Finite so rows stay NaN-free.
const MASK_FILL: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
enum Frontend {
    Conv(Vec<Linear>),
    Linear(Linear),
    Embed(ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    frontend: Frontend,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    tgt_embed: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    output: Linear,
    ctc: Option<Linear>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier<R: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<R> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| R::of(rng.gen_range(-a..a)))
    }

    fn normal<R: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<R> {
        let d = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| R::of(d.sample(rng)))
    }

    fn linear<R: Real>(&mut self, store: &mut ParamStore<R>, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: store.add(format!("{name}.weight"), self.xavier(&[din, dout], din, dout)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    fn norm<R: Real>(&mut self, store: &mut ParamStore<R>, name: &str, d: usize) -> Norm {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], R::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn attention<R: Real>(&mut self, store: &mut ParamStore<R>, name: &str, dq: usize, dkv: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(store, &format!("{name}.q"), dq, dq),
            k: self.linear(store, &format!("{name}.k"), dkv, dq),
            v: self.linear(store, &format!("{name}.v"), dkv, dq),
            o: self.linear(store, &format!("{name}.o"), dq, dq),
            heads,
        }
    }

    fn ffn<R: Real>(&mut self, store: &mut ParamStore<R>, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            l1: self.linear(store, &format!("{name}.1"), d, hidden),
            l2: self.linear(store, &format!("{name}.2"), hidden, d),
        }
    }
}

/// Model input: filterbank features or source token ids, padded to a common length.
#[derive(Clone, Debug)]
pub enum Source<R: Real = f32> {
    /// `[B, T, d]` features.
    Features(Tensor<R>),
    /// Row-major `[B, S]` token ids padded with [`PAD_ID`].
    Tokens { ids: Vec<usize>, batch: usize, len: usize },
}

impl<R: Real> Source<R> {
    pub fn batch_size(&self) -> usize {
        match self {
            Source::Features(t) => t.shape()[0],
            Source::Tokens { batch, .. } => *batch,
        }
    }

    pub fn padded_len(&self) -> usize {
        match self {
            Source::Features(t) => t.shape()[1],
            Source::Tokens { len, .. } => *len,
        }
    }
}

/// Encoder output with per-utterance valid lengths.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, T', D]`.
    pub states: Var,
    pub lengths: Vec<usize>,
}

/// Decoder output.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[B, U, V]` unnormalized scores.
    pub logits: Var,
    /// Per decoder layer, `[B·H, U, T']` attention weights over encoder states.
    pub cross_attention: Vec<Var>,
}

/// Scalars of one teacher-forced loss evaluation.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub xent: f64,
    pub ctc: Option<f64>,
    pub ctc_skipped: Vec<usize>,
    pub token_count: usize,
    pub frame_count: usize,
}

/// Per-call training switches.
pub struct Mode<'a> {
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl Mode<'_> {
    pub fn eval() -> Mode<'static> {
        Mode { dropout_rng: None }
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn positional_encoding<R: Real>(len: usize, dim: usize) -> Tensor<R> {
    Tensor::from_fn(&[len, dim], |i| {
        let (t, j) = (i / dim, i % dim);
        let freq = (10000f64).powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = t as f64 / freq;
        R::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Clone, Debug)]
pub struct S2TModel<R: Real = f32> {
    config: ModelConfig,
    store: ParamStore<R>,
    layout: Layout,
}

impl<R: Real> S2TModel<R> {
    /// Builds a freshly initialized model; initialization is seeded by `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let (de, dd) = (config.encoder.dim, config.decoder.dim);
        let frontend = match config.task {
            Task::MT => Frontend::Embed(
                store.add("frontend.embed.weight", init.normal(&[config.src_vocab_size, de], (de as f64).powf(-0.5))),
            ),
            Task::S2T if config.num_conv_layers == 0 => {
                Frontend::Linear(init.linear(&mut store, "frontend.linear", config.feature_dim, de))
            }
            Task::S2T => {
                let mut convs = Vec::new();
                let mut cin = config.feature_dim;
                let k = config.conv_kernel;
                for i in 0..config.num_conv_layers {
                    let cout = if i + 1 == config.num_conv_layers { de } else { config.conv_channels };
                    convs.push(Linear {
                        w: store.add(format!("frontend.conv{i}.weight"), init.xavier(&[cout, cin, k], cin * k, cout * k)),
                        b: store.add(format!("frontend.conv{i}.bias"), Tensor::zeros(&[cout])),
                    });
                    cin = cout;
                }
                Frontend::Conv(convs)
            }
        };
        let encoder = (0..config.encoder.layers)
            .map(|i| {
                let n = format!("encoder.layers.{i}");
                EncoderLayer {
                    norm1: init.norm(&mut store, &format!("{n}.norm1"), de),
                    attn: init.attention(&mut store, &format!("{n}.self_attn"), de, de, config.encoder.heads),
                    norm2: init.norm(&mut store, &format!("{n}.norm2"), de),
                    ffn: init.ffn(&mut store, &format!("{n}.ffn"), de, config.encoder.ffn_dim),
                }
            })
            .collect();
        let enc_norm = init.norm(&mut store, "encoder.norm", de);
        let tgt_embed = store.add(
            "decoder.embed.weight",
            init.normal(&[config.vocab_size, dd], (dd as f64).powf(-0.5)),
        );
        let decoder = (0..config.decoder.layers)
            .map(|i| {
                let n = format!("decoder.layers.{i}");
                DecoderLayer {
                    norm1: init.norm(&mut store, &format!("{n}.norm1"), dd),
                    self_attn: init.attention(&mut store, &format!("{n}.self_attn"), dd, dd, config.decoder.heads),
                    norm2: init.norm(&mut store, &format!("{n}.norm2"), dd),
                    cross_attn: init.attention(&mut store, &format!("{n}.cross_attn"), dd, de, config.decoder.heads),
                    norm3: init.norm(&mut store, &format!("{n}.norm3"), dd),
                    ffn: init.ffn(&mut store, &format!("{n}.ffn"), dd, config.decoder.ffn_dim),
                }
            })
            .collect();
        let dec_norm = init.norm(&mut store, "decoder.norm", dd);
        let output = init.linear(&mut store, "decoder.output", dd, config.vocab_size);
        let ctc = config
            .has_ctc()
            .then(|| init.linear(&mut store, "ctc.projection", de, config.vocab_size));
        Ok(S2TModel {
            config,
            store,
            layout: Layout {
                frontend,
                encoder,
                enc_norm,
                tgt_embed,
                decoder,
                dec_norm,
                output,
                ctc,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.store
    }

    /// Same model in another precision.
    pub fn cast<S: Real>(&self) -> S2TModel<S> {
        S2TModel {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, Some(self.config.to_yaml()))
    }

    /// Rebuilds a model from a checkpoint's embedded config and parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let text = ckpt
            .config
            .as_deref()
            .ok_or_else(|| Error::Data("checkpoint has no embedded model config".into()))?;
        let mut model = Self::new(ModelConfig::from_yaml(text)?)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    fn p(&self, g: &mut Graph<R>, id: ParamId) -> Var {
        g.param(&self.store, id)
    }

    fn linear(&self, g: &mut Graph<R>, x: Var, l: Linear) -> Result<Var> {
        let w = self.p(g, l.w);
        let b = self.p(g, l.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn norm(&self, g: &mut Graph<R>, x: Var, n: Norm) -> Result<Var> {
        let gamma = self.p(g, n.gamma);
        let beta = self.p(g, n.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn dropout(&self, g: &mut Graph<R>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode.dropout_rng.as_deref_mut() {
            Some(rng) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, rng),
            _ => Ok(x),
        }
    }

    fn split_heads(g: &mut Graph<R>, x: Var, b: usize, t: usize, h: usize, dh: usize) -> Result<Var> {
        let x = g.reshape(x, &[b, t, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * h, t, dh])
    }

    /// Multi-head attention. `mask[b, i, j]` (row-major, shared by heads)
    /// marks key `j` as hidden from query `i`.
    fn attention(&self, g: &mut Graph<R>, a: &Attention, xq: Var, xkv: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let (b, tq, d) = {
            let s = g.shape(xq);
            (s[0], s[1], s[2])
        };
        let tk = g.shape(xkv)[1];
        let h = a.heads;
        let dh = d / h;
        let q = self.linear(g, xq, a.q)?;
        let k = self.linear(g, xkv, a.k)?;
        let v = self.linear(g, xkv, a.v)?;
        let q = Self::split_heads(g, q, b, tq, h, dh)?;
        let k = Self::split_heads(g, k, b, tk, h, dh)?;
        let v = Self::split_heads(g, v, b, tk, h, dh)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, R::of(1.0 / (dh as f64).sqrt()))?;
        let per_batch = tq * tk;
        let full_mask: Vec<bool> = (0..b * h * per_batch)
            .map(|i| mask[(i / (h * per_batch)) * per_batch + i % per_batch])
            .collect();
        let scores = g.masked_fill(scores, &full_mask, R::of(MASK_FILL))?;
        let probs = g.softmax(scores)?;
        let ctx = g.bmm(probs, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, d])?;
        Ok((self.linear(g, ctx, a.o)?, probs))
    }

    fn feed_forward(&self, g: &mut Graph<R>, f: &FeedForward, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.linear(g, x, f.l1)?;
        let h = g.relu(h)?;
        let h = self.dropout(g, h, mode)?;
        self.linear(g, h, f.l2)
    }

    fn add_positions(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let pe = g.constant(positional_encoding(s[1], s[2]));
        g.add(x, pe)
    }

    /// Front end only: conv subsampling (or linear projection / source embedding).
    /// Positions past each utterance's output length are zeroed.
    pub fn subsample(&self, g: &mut Graph<R>, src: &Source<R>, lengths: &[usize]) -> Result<(Var, Vec<usize>)> {
        let bsz = src.batch_size();
        if lengths.len() != bsz {
            return Err(Error::shape("subsample", format!("{} lengths for batch of {bsz}", lengths.len())));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > src.padded_len()) {
            return Err(Error::Contract(format!("length {l} exceeds padded length {}", src.padded_len())));
        }
        let out_lengths: Vec<usize> = lengths.iter().map(|&l| self.config.subsampled_len(l)).collect();
        if let Some(i) = out_lengths.iter().position(|&l| l == 0) {
            return Err(Error::TooShort(format!(
                "utterance #{i} with {} input frames has no frames left after subsampling",
                lengths[i]
            )));
        }
        let x = match (&self.layout.frontend, src) {
            (Frontend::Embed(table), Source::Tokens { ids, batch, len }) => {
                let t = self.p(g, *table);
                let e = g.embedding(t, ids, &[*batch, *len])?;
                g.scale(e, R::of((self.config.encoder.dim as f64).sqrt()))?
            }
            (Frontend::Linear(l), Source::Features(f)) => {
                let x = g.constant(f.clone());
                self.linear(g, x, *l)?
            }
            (Frontend::Conv(convs), Source::Features(f)) => {
                let mut x = g.constant(f.clone());
                for (i, c) in convs.iter().enumerate() {
                    let w = self.p(g, c.w);
                    let b = self.p(g, c.b);
                    x = g.conv1d(x, w, b, 2)?;
                    if i + 1 < convs.len() {
                        x = g.relu(x)?;
                    }
                }
                x
            }
            _ => return Err(Error::Contract("source modality does not match the model task".into())),
        };
        let s = g.shape(x).to_vec();
        let (t, d) = (s[1], s[2]);
        let mask: Vec<bool> = (0..bsz * t * d).map(|i| (i / d) % t >= out_lengths[i / (t * d)]).collect();
        let x = if mask.iter().any(|&m| m) { g.masked_fill(x, &mask, R::zero())? } else { x };
        Ok((x, out_lengths))
    }

    pub fn encode(&self, g: &mut Graph<R>, src: &Source<R>, lengths: &[usize], mode: &mut Mode<'_>) -> Result<Encoded> {
        let (x, lengths) = self.subsample(g, src, lengths)?;
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let mut x = self.add_positions(g, x)?;
        x = self.dropout(g, x, mode)?;
        let mask: Vec<bool> = (0..b * t * t).map(|i| i % t >= lengths[i / (t * t)]).collect();
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, layer.norm1)?;
            let (h, _) = self.attention(g, &layer.attn, h, h, &mask)?;
            let h = self.dropout(g, h, mode)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.norm2)?;
            let h = self.feed_forward(g, &layer.ffn, h, mode)?;
            let h = self.dropout(g, h, mode)?;
            x = g.add(x, h)?;
        }
        let states = self.norm(g, x, self.layout.enc_norm)?;
        Ok(Encoded { states, lengths })
    }

    /// Teacher-forced decoder pass over `[B, U]` bos-prefixed target ids.
    pub fn decode(
        &self,
        g: &mut Graph<R>,
        targets: &[usize],
        u: usize,
        enc: &Encoded,
        mode: &mut Mode<'_>,
    ) -> Result<Decoded> {
        let b = enc.lengths.len();
        if u == 0 || targets.len() != b * u {
            return Err(Error::shape("decode", format!("{} target ids for batch {b} × {u}", targets.len())));
        }
        if u > self.config.max_positions {
            return Err(Error::Contract(format!(
                "target length {u} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let t = g.shape(enc.states)[1];
        let table = self.p(g, self.layout.tgt_embed);
        let e = g.embedding(table, targets, &[b, u])?;
        let e = g.scale(e, R::of((self.config.decoder.dim as f64).sqrt()))?;
        let mut x = self.add_positions(g, e)?;
        x = self.dropout(g, x, mode)?;
        let causal: Vec<bool> = (0..b * u * u).map(|i| (i % u) > (i / u) % u).collect();
        let cross_mask: Vec<bool> = (0..b * u * t).map(|i| i % t >= enc.lengths[i / (u * t)]).collect();
        let mut cross_attention = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let h = self.norm(g, x, layer.norm1)?;
            let (h, _) = self.attention(g, &layer.self_attn, h, h, &causal)?;
            let h = self.dropout(g, h, mode)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.norm2)?;
            let (h, probs) = self.attention(g, &layer.cross_attn, h, enc.states, &cross_mask)?;
            cross_attention.push(probs);
            let h = self.dropout(g, h, mode)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.norm3)?;
            let h = self.feed_forward(g, &layer.ffn, h, mode)?;
            let h = self.dropout(g, h, mode)?;
            x = g.add(x, h)?;
        }
        let x = self.norm(g, x, self.layout.dec_norm)?;
        let logits = self.linear(g, x, self.layout.output)?;
        Ok(Decoded { logits, cross_attention })
    }

    /// `[B, T', V]` CTC log-probabilities; blank is class 0.
    pub fn ctc_logits(&self, g: &mut Graph<R>, enc: &Encoded) -> Result<Var> {
        let l = self
            .layout
            .ctc
            .ok_or_else(|| Error::Contract("this model has no CTC projection".into()))?;
        let z = self.linear(g, enc.states, l)?;
        g.log_softmax(z)
    }

    /// Joint teacher-forced loss for a batch of unpadded target id sequences
    /// (no bos/eos). Every parameter is registered so unused ones receive zero
    /// gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph<R>,
        src: &Source<R>,
        lengths: &[usize],
        targets: &[Vec<usize>],
        ctc_weight: f64,
        label_smoothing: f64,
        mode: &mut Mode<'_>,
    ) -> Result<LossOutput> {
        g.register_params(&self.store);
        let enc = self.encode(g, src, lengths, mode)?;
        let (dec_in, dec_out, u) = teacher_forcing(targets);
        let dec = self.decode(g, &dec_in, u, &enc, mode)?;
        let xent = xent_loss(g, dec.logits, &dec_out, label_smoothing)?;
        let xent_value = g.value(xent).item().as_f64();
        let (ctc, skipped) = if self.layout.ctc.is_some() && ctc_weight > 0.0 {
            let lp = self.ctc_logits(g, &enc)?;
            let out = ctc_loss(g, lp, targets, &enc.lengths, true)?;
            (out.loss, out.skipped)
        } else {
            (None, Vec::new())
        };
        let ctc_value = ctc.map(|c| g.value(c).item().as_f64());
        let weight = if self.layout.ctc.is_some() { ctc_weight } else { 0.0 };
        let loss = joint_loss(g, xent, ctc, weight)?;
        Ok(LossOutput {
            loss,
            xent: xent_value,
            ctc: ctc_value,
            ctc_skipped: skipped,
            token_count: dec_out.iter().filter(|&&t| t != PAD_ID).count(),
            frame_count: lengths.iter().sum(),
        })
    }
}

/// Builds `(decoder input, decoder output, U)` from unpadded targets:
/// inputs are `bos y`, outputs `y eos`, both padded with [`PAD_ID`].
pub fn teacher_forcing(targets: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>, usize) {
    let u = targets.iter().map(|t| t.len() + 1).max().unwrap_or(1);
    let mut dec_in = vec![PAD_ID; targets.len() * u];
    let mut dec_out = vec![PAD_ID; targets.len() * u];
    for (i, y) in targets.iter().enumerate() {
        dec_in[i * u] = BOS_ID;
        dec_in[i * u + 1..i * u + 1 + y.len()].copy_from_slice(y);
        dec_out[i * u..i * u + y.len()].copy_from_slice(y);
        dec_out[i * u + y.len()] = EOS_ID;
    }
    (dec_in, dec_out, u)
}
