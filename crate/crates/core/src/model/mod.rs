//! A small pre-norm transformer encoder-decoder.
//!
//! Training runs through the [`autograd`](crate::autograd) tape
//! ([`Seq2Seq::forward_teacher_forced`]); search uses the cached
//! [`IncrementalDecoder`], which reproduces the teacher-forced rows.

mod checkpoint;
mod config;
mod source;

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{
    gelu, layer_norm_rows, softmax_rows_inplace, Graph, Matrix, NodeId, ParamId, ParamStore,
};
use crate::corpus::{TokenId, BOS};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use config::{ModelConfig, Pooling};
pub use source::{build_source, decoder_input, decoder_target, SourceInput};

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: ParamId,
    src_pos: ParamId,
    tgt_pos: ParamId,
    in_proj: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_proj: Linear,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let m = Matrix::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.store.add(name, m)
    }

    fn constant(&mut self, name: String, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Matrix::from_elem((1, cols), value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        Linear {
            w: self.normal(
                format!("{name}.w"),
                fan_in,
                fan_out,
                gain / (fan_in as f64).sqrt(),
            ),
            b: self.constant(format!("{name}.b"), fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), dim, 1.0),
            beta: self.constant(format!("{name}.beta"), dim, 0.0),
        }
    }

    fn attention(&mut self, name: &str, h: usize, out_gain: f64) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), h, h, 1.0),
            k: self.linear(&format!("{name}.k"), h, h, 1.0),
            v: self.linear(&format!("{name}.v"), h, h, 1.0),
            o: self.linear(&format!("{name}.o"), h, h, out_gain),
        }
    }

    fn ffn(&mut self, name: &str, h: usize, f: usize, out_gain: f64) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), h, f, 1.0),
            down: self.linear(&format!("{name}.down"), f, h, out_gain),
        }
    }
}

fn build(config: &ModelConfig) -> (Layout, ParamStore) {
    let mut b = Builder {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let (v, e, h, f) = (
        config.vocab_size,
        config.embedding_dim,
        config.hidden_dim,
        config.ffn_dim(),
    );
    let depth = (config.encoder_layers + config.decoder_layers).max(1) as f64;
    let res_gain = 1.0 / (2.0 * depth).sqrt();
    let tok_emb = b.normal("tok_emb".into(), v, e, 1.0);
    let src_pos = b.normal("src_pos".into(), config.max_source_len, e, 1.0);
    let tgt_pos = b.normal("tgt_pos".into(), config.max_target_len, e, 1.0);
    let in_proj = b.linear("in_proj", e, h, 1.0);
    let encoder = (0..config.encoder_layers)
        .map(|i| EncoderLayer {
            ln_attn: b.norm(&format!("enc{i}.ln_attn"), h),
            attn: b.attention(&format!("enc{i}.attn"), h, res_gain),
            ln_ffn: b.norm(&format!("enc{i}.ln_ffn"), h),
            ffn: b.ffn(&format!("enc{i}.ffn"), h, f, res_gain),
        })
        .collect();
    let enc_norm = b.norm("enc_norm", h);
    let decoder = (0..config.decoder_layers)
        .map(|i| DecoderLayer {
            ln_self: b.norm(&format!("dec{i}.ln_self"), h),
            self_attn: b.attention(&format!("dec{i}.self_attn"), h, res_gain),
            ln_cross: b.norm(&format!("dec{i}.ln_cross"), h),
            cross_attn: b.attention(&format!("dec{i}.cross_attn"), h, res_gain),
            ln_ffn: b.norm(&format!("dec{i}.ln_ffn"), h),
            ffn: b.ffn(&format!("dec{i}.ffn"), h, f, res_gain),
        })
        .collect();
    let dec_norm = b.norm("dec_norm", h);
    let out_proj = b.linear("out_proj", h, v, 1.0);
    let layout = Layout {
        tok_emb,
        src_pos,
        tgt_pos,
        in_proj,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        out_proj,
    };
    (layout, b.store)
}

/// Graph nodes produced by a teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct TeacherForced {
    /// `T × V` next-token logits.
    pub logits: NodeId,
    /// `T × H` final decoder states.
    pub decoder_states: NodeId,
    /// `S × H` final encoder states.
    pub encoder_states: NodeId,
    pub source_pooled: NodeId,
    pub target_pooled: NodeId,
}

/// Value-only view of a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistributions {
    /// `T × V`, each row a next-token distribution.
    pub probs: Matrix,
    pub source_pooled: Vec<f64>,
    pub target_pooled: Vec<f64>,
    /// Whether the pass was recorded for backpropagation.
    pub differentiable: bool,
}

/// Encoder output for one source, with per-layer cross-attention keys and
/// values precomputed for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEncoding {
    pub ids: Vec<TokenId>,
    pub knowledge_token_mask: Vec<bool>,
    pub states: Matrix,
    cross_kv: Vec<(Matrix, Matrix)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build(&config);
        Ok(Seq2Seq {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_ids(&self, ids: &[TokenId], max: usize) -> Result<()> {
        if ids.len() > max {
            return Err(Error::Length {
                len: ids.len(),
                max,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, x: NodeId, l: &Linear) -> NodeId {
        let (w, b) = (g.param(l.w), g.param(l.b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, n: &Norm) -> NodeId {
        let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
        g.layer_norm(x, gamma, beta)
    }

    fn attention(
        &self,
        g: &mut Graph,
        xq: NodeId,
        xkv: NodeId,
        a: &Attention,
        causal: bool,
    ) -> NodeId {
        let q = self.linear(g, xq, &a.q);
        let k = self.linear(g, xkv, &a.k);
        let v = self.linear(g, xkv, &a.v);
        let d = self.config.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let (tq, tk) = (g.value(xq).nrows(), g.value(xkv).nrows());
        let mask = causal.then(|| {
            Matrix::from_shape_fn(
                (tq, tk),
                |(i, j)| if j > i { f64::NEG_INFINITY } else { 0.0 },
            )
        });
        let heads: Vec<NodeId> = (0..self.config.attention_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * d, d);
                let kh = g.slice_cols(k, h * d, d);
                let vh = g.slice_cols(v, h * d, d);
                let scores = g.matmul_t(qh, kh);
                let mut scores = g.scale(scores, scale);
                if let Some(m) = &mask {
                    scores = g.add_const(scores, m);
                }
                let p = g.softmax(scores);
                g.matmul(p, vh)
            })
            .collect();
        let cat = g.concat_cols(&heads);
        self.linear(g, cat, &a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: NodeId, f: &FeedForward) -> NodeId {
        let u = self.linear(g, x, &f.up);
        let a = g.gelu(u);
        self.linear(g, a, &f.down)
    }

    fn embed(&self, g: &mut Graph, ids: &[TokenId], pos: ParamId) -> NodeId {
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let (tok, pos) = (g.param(self.layout.tok_emb), g.param(pos));
        let te = g.embed(tok, &idx);
        let pe = g.embed(pos, &positions);
        let x = g.add(te, pe);
        self.linear(g, x, &self.layout.in_proj)
    }

    /// Encoder states (`S × H`) for a source sequence.
    pub fn encode(&self, g: &mut Graph, source: &[TokenId]) -> Result<NodeId> {
        if source.is_empty() {
            return Err(Error::Length {
                len: 0,
                max: self.config.max_source_len,
            });
        }
        self.check_ids(source, self.config.max_source_len)?;
        let mut x = self.embed(g, source, self.layout.src_pos);
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, &layer.ln_attn);
            let a = self.attention(g, h, h, &layer.attn, false);
            x = g.add(x, a);
            let h = self.norm(g, x, &layer.ln_ffn);
            let f = self.feed_forward(g, h, &layer.ffn);
            x = g.add(x, f);
        }
        Ok(self.norm(g, x, &self.layout.enc_norm))
    }

    /// Final decoder states (`T × H`) for a decoder input starting with BOS.
    pub fn decode_states(
        &self,
        g: &mut Graph,
        encoder_states: NodeId,
        input: &[TokenId],
    ) -> Result<NodeId> {
        if input.is_empty() {
            return Err(Error::Length {
                len: 0,
                max: self.config.max_target_len,
            });
        }
        self.check_ids(input, self.config.max_target_len)?;
        let mut y = self.embed(g, input, self.layout.tgt_pos);
        for layer in &self.layout.decoder {
            let h = self.norm(g, y, &layer.ln_self);
            let a = self.attention(g, h, h, &layer.self_attn, true);
            y = g.add(y, a);
            let h = self.norm(g, y, &layer.ln_cross);
            let c = self.attention(g, h, encoder_states, &layer.cross_attn, false);
            y = g.add(y, c);
            let h = self.norm(g, y, &layer.ln_ffn);
            let f = self.feed_forward(g, h, &layer.ffn);
            y = g.add(y, f);
        }
        Ok(self.norm(g, y, &self.layout.dec_norm))
    }

    pub fn logits(&self, g: &mut Graph, decoder_states: NodeId) -> NodeId {
        self.linear(g, decoder_states, &self.layout.out_proj)
    }

    /// Reduces `n × H` states to a `1 × H` representation.
    pub fn pool(&self, g: &mut Graph, states: NodeId) -> NodeId {
        match self.config.pooling {
            Pooling::Mean => g.mean_rows(states),
            Pooling::Max => g.max_rows(states),
            Pooling::First => g.first_row(states),
        }
    }

    /// Teacher-forced pass: row `t` of the logits conditions on the source
    /// and `target[..t]`. `target` is the response followed by EOS.
    pub fn forward_teacher_forced(
        &self,
        g: &mut Graph,
        source: &[TokenId],
        target: &[TokenId],
    ) -> Result<TeacherForced> {
        let encoder_states = self.encode(g, source)?;
        let decoder_states = self.decode_states(g, encoder_states, &decoder_input(target))?;
        let logits = self.logits(g, decoder_states);
        let source_pooled = self.pool(g, encoder_states);
        let target_pooled = self.pool(g, decoder_states);
        Ok(TeacherForced {
            logits,
            decoder_states,
            encoder_states,
            source_pooled,
            target_pooled,
        })
    }

    /// Value-only teacher-forced pass.
    pub fn step_distributions(
        &self,
        source: &[TokenId],
        target: &[TokenId],
    ) -> Result<StepDistributions> {
        let mut g = Graph::new(&self.params);
        let tf = self.forward_teacher_forced(&mut g, source, target)?;
        let mut probs = g.value(tf.logits).clone();
        softmax_rows_inplace(&mut probs);
        Ok(StepDistributions {
            probs,
            source_pooled: g.value(tf.source_pooled).row(0).to_vec(),
            target_pooled: g.value(tf.target_pooled).row(0).to_vec(),
            differentiable: false,
        })
    }

    pub fn encode_source(&self, source: &SourceInput) -> Result<SourceEncoding> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, &source.ids)?;
        let states = g.value(enc).clone();
        let p = &self.params;
        let cross_kv = self
            .layout
            .decoder
            .iter()
            .map(|l| {
                let a = &l.cross_attn;
                (
                    states.dot(p.get(a.k.w)) + p.get(a.k.b).row(0),
                    states.dot(p.get(a.v.w)) + p.get(a.v.b).row(0),
                )
            })
            .collect();
        Ok(SourceEncoding {
            ids: source.ids.clone(),
            knowledge_token_mask: source.knowledge_token_mask.clone(),
            states,
            cross_kv,
        })
    }

    pub fn start_decoder<'a>(&'a self, encoding: &'a SourceEncoding) -> IncrementalDecoder<'a> {
        let h = self.config.hidden_dim;
        IncrementalDecoder {
            model: self,
            encoding,
            cache: vec![(Matrix::zeros((0, h)), Matrix::zeros((0, h))); self.config.decoder_layers],
            len: 0,
        }
    }

    /// Next-token distribution after `prefix`, which must begin with BOS.
    pub fn decode_step(&self, encoding: &SourceEncoding, prefix: &[TokenId]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Parameter(
                "decoder prefix must begin with BOS".into(),
            ));
        }
        self.check_ids(prefix, self.config.max_target_len)?;
        let mut dec = self.start_decoder(encoding);
        let mut logits = Vec::new();
        for &t in prefix {
            logits = dec.push(t)?;
        }
        Ok(softmax(&logits))
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Decoder with cached self-attention keys and values; cloning forks a
/// hypothesis.
#[derive(Clone)]
pub struct IncrementalDecoder<'a> {
    model: &'a Seq2Seq,
    encoding: &'a SourceEncoding,
    cache: Vec<(Matrix, Matrix)>,
    len: usize,
}

impl IncrementalDecoder<'_> {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one token and returns the next-token logits.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let m = self.model;
        let cfg = &m.config;
        if self.len >= cfg.max_target_len {
            return Err(Error::Length {
                len: self.len + 1,
                max: cfg.max_target_len,
            });
        }
        m.check_ids(&[token], usize::MAX)?;
        let p = &m.params;
        let lay = &m.layout;
        let lin = |x: &Matrix, l: &Linear| x.dot(p.get(l.w)) + p.get(l.b).row(0);
        let norm = |x: &Matrix, n: &Norm| {
            layer_norm_rows(x.view(), p.get(n.gamma).view(), p.get(n.beta).view()).0
        };
        let d = cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let attend = |q: &Matrix, k: &Matrix, v: &Matrix, o: &Linear| {
            let heads: Vec<Matrix> = (0..cfg.attention_heads)
                .map(|h| {
                    let cols = s![.., h * d..(h + 1) * d];
                    let qh = q.slice(cols).to_owned();
                    let kh = k.slice(cols).to_owned();
                    let vh = v.slice(cols).to_owned();
                    let mut scores = qh.dot(&kh.t()) * scale;
                    softmax_rows_inplace(&mut scores);
                    scores.dot(&vh)
                })
                .collect();
            let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
            lin(
                &ndarray::concatenate(Axis(1), &views).expect("head widths agree"),
                o,
            )
        };

        let emb =
            p.get(lay.tok_emb).row(token as usize).to_owned() + p.get(lay.tgt_pos).row(self.len);
        let mut y = lin(&emb.insert_axis(Axis(0)), &lay.in_proj);
        for (layer, ((kc, vc), (ck, cv))) in lay
            .decoder
            .iter()
            .zip(self.cache.iter_mut().zip(&self.encoding.cross_kv))
        {
            let h = norm(&y, &layer.ln_self);
            let q = lin(&h, &layer.self_attn.q);
            kc.push_row(lin(&h, &layer.self_attn.k).row(0))
                .expect("width");
            vc.push_row(lin(&h, &layer.self_attn.v).row(0))
                .expect("width");
            y = y + attend(&q, kc, vc, &layer.self_attn.o);
            let h = norm(&y, &layer.ln_cross);
            let q = lin(&h, &layer.cross_attn.q);
            y = y + attend(&q, ck, cv, &layer.cross_attn.o);
            let h = norm(&y, &layer.ln_ffn);
            let u = lin(&h, &layer.ffn.up).mapv(gelu);
            y = y + lin(&u, &layer.ffn.down);
        }
        let h = norm(&y, &lay.dec_norm);
        self.len += 1;
        Ok(lin(&h, &lay.out_proj).row(0).to_vec())
    }
}
