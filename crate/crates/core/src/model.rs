//! Sequence autoencoder around the discrete bottleneck.
//!
//! Token + learned position embeddings feed one pre-norm transformer block
//! (or a two-layer MLP), a linear projection produces `z_e`, the bottleneck
//! produces `z_q`, and a per-position linear decoder predicts the input
//! tokens back. Only non-pad positions reach the bottleneck and the losses.
//!
//! Backward passes are written out by hand in reverse order of the forward.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    gumbel_noise_like, gumbel_softmax_backward, gumbel_softmax_with_noise, semhash_backward, semhash_decoder_input,
    semhash_encode, GumbelConfig, GumbelSample, SemHashCode, SemHashState,
};
use crate::entropy::{gate_dropconnect, EntropyReport, GateMask};
use crate::error::{Error, Result};
use crate::ops::attention::{self_attention, self_attention_backward, AttentionCache, AttentionWeights};
use crate::ops::dropconnect::{dropconnect_apply, DropMask};
use crate::ops::linalg::{gelu, gelu_backward, linear, linear_backward, matmul_nt, matmul_tn};
use crate::ops::loss::{argmax_rows, softmax_cross_entropy};
use crate::ops::norm::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::quantizer::{
    codebook_grad, commitment_grad, init_codebook, quantize, straight_through_backward, DecomposedCodebook, Metric,
    QuantizationResult, VqLossConfig,
};
use crate::rng::RngState;
use crate::tensor::{Parameter, Real, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    /// Decomposed VQ with entropy-gated DropConnect.
    Dvq,
    /// Plain single-codebook VQ, L2 lookup, unscaled straight-through.
    Vq,
    Gumbel,
    Semhash,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookMode {
    /// Codebook trained by the optimizer through the VQ loss term.
    Regular,
    /// Codebook trained by moving averages; VQ loss term dropped.
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Latent dim `D` fed to the bottleneck.
    pub d_model: usize,
    pub kind: EncoderKind,
    pub heads: usize,
    pub n_sub_encoders: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size < 3 {
            errs.push(format!("vocab_size must be >= 3, got {}", self.vocab_size));
        }
        if self.max_len == 0 {
            errs.push("max_len must be positive".into());
        }
        if self.n_sub_encoders == 0 || !self.d_model.is_multiple_of(self.n_sub_encoders) {
            errs.push(format!(
                "d_model {} not divisible by n_sub_encoders {}",
                self.d_model, self.n_sub_encoders
            ));
        }
        if self.kind == EncoderKind::Transformer && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            errs.push(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckKind,
    /// Nominal codebook size `K` (category count for Gumbel).
    pub codebook_size: usize,
    pub vq: VqLossConfig,
    pub codebook_mode: CodebookMode,
    pub ema_decay: f64,
    pub laplace_eps: f64,
    pub gumbel_tau: f64,
    pub gumbel_hard: bool,
}

impl ModelConfig {
    /// Effective loss config; plain VQ always uses L2 and `alpha = 0`.
    pub fn effective_vq(&self) -> VqLossConfig {
        match self.bottleneck {
            BottleneckKind::Vq => VqLossConfig {
                alpha: 0.0,
                metric: Metric::L2,
                ..self.vq
            },
            _ => self.vq,
        }
    }

    /// Number of sub-encoders the bottleneck actually uses.
    pub fn effective_n(&self) -> usize {
        match self.bottleneck {
            BottleneckKind::Dvq => self.encoder.n_sub_encoders,
            BottleneckKind::Vq | BottleneckKind::Gumbel => 1,
            BottleneckKind::Semhash => self.encoder.d_model,
        }
    }
}

/// A mini-batch padded to `seq_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    /// Truncates to `max_len` and pads with [`PAD_ID`].
    pub fn from_sequences(seqs: &[&[usize]], max_len: usize, labels: Option<Vec<usize>>) -> Result<Self> {
        if seqs.is_empty() || max_len == 0 {
            return Err(Error::Empty("batch".into()));
        }
        if let Some(l) = &labels {
            if l.len() != seqs.len() {
                return Err(Error::shape("batch labels", seqs.len(), l.len()));
            }
        }
        let mut token_ids = Vec::with_capacity(seqs.len() * max_len);
        let mut mask = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            for t in 0..max_len {
                match s.get(t) {
                    Some(&id) => {
                        token_ids.push(id);
                        mask.push(true);
                    }
                    None => {
                        token_ids.push(PAD_ID);
                        mask.push(false);
                    }
                }
            }
        }
        Ok(Self {
            token_ids,
            mask,
            batch_size: seqs.len(),
            seq_len: max_len,
            labels,
        })
    }

    /// Flat indices of non-pad positions.
    pub fn valid_positions(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.valid_positions().iter().map(|&p| self.token_ids[p]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub ln1_g: Parameter<T>,
    pub ln1_b: Parameter<T>,
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub wo: Parameter<T>,
    pub ln2_g: Parameter<T>,
    pub ln2_b: Parameter<T>,
    pub ff1_w: Parameter<T>,
    pub ff1_b: Parameter<T>,
    pub ff2_w: Parameter<T>,
    pub ff2_b: Parameter<T>,
    pub lnf_g: Parameter<T>,
    pub lnf_b: Parameter<T>,
}

#[derive(Clone, Debug)]
pub struct MlpBlock<T> {
    pub w1: Parameter<T>,
    pub b1: Parameter<T>,
    pub w2: Parameter<T>,
    pub b2: Parameter<T>,
}

#[derive(Clone, Debug)]
pub enum EncoderBlock<T> {
    Transformer(TransformerBlock<T>),
    Mlp(MlpBlock<T>),
}

#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(d_model: usize, num_classes: usize, rng: &mut RngState) -> Self {
        Self {
            w: Parameter::new(Tensor::uniform(
                &[d_model, num_classes],
                1.0 / (d_model as f64).sqrt(),
                rng,
            )),
            b: Parameter::new(Tensor::zeros(&[num_classes])),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.b.value.len()
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub tok_emb: Parameter<T>,
    pub pos_emb: Parameter<T>,
    pub block: EncoderBlock<T>,
    /// `[D × D]`; output columns partition into the sub-encoder slices.
    pub proj_w: Parameter<T>,
    pub proj_b: Parameter<T>,
    pub dec_w: Parameter<T>,
    pub dec_b: Parameter<T>,
    pub classifier: Option<ClassifierHead<T>>,
}

#[derive(Clone, Debug)]
pub struct GumbelBottleneck<T> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
    pub embed: Parameter<T>,
    pub cfg: GumbelConfig,
}

#[derive(Clone, Debug)]
pub enum Bottleneck<T> {
    Quantizer(DecomposedCodebook<T>),
    Gumbel(GumbelBottleneck<T>),
    SemHash(SemHashState<T>),
}

impl<T: Real> Bottleneck<T> {
    pub fn codebook(&self) -> Option<&DecomposedCodebook<T>> {
        match self {
            Bottleneck::Quantizer(cb) => Some(cb),
            _ => None,
        }
    }

    pub fn codebook_mut(&mut self) -> Option<&mut DecomposedCodebook<T>> {
        match self {
            Bottleneck::Quantizer(cb) => Some(cb),
            _ => None,
        }
    }
}

fn linear_param<T: Real>(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Parameter<T> {
    Parameter::new(Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng))
}

fn zeros_param<T: Real>(n: usize) -> Parameter<T> {
    Parameter::new(Tensor::zeros(&[n]))
}

fn ones_param<T: Real>(n: usize) -> Parameter<T> {
    Parameter::new(Tensor::ones(&[n]))
}

/// Training-time context: randomness and regularization for one step.
pub struct TrainContext<'a> {
    pub rng: &'a mut RngState,
    /// DropConnect rate on the token-embedding table and gated slices.
    pub dropconnect_rate: f64,
    /// Gate decided from the previous step's assignments.
    pub gate: Option<&'a EntropyReport>,
}

pub enum Mode<'a> {
    Eval,
    Train(TrainContext<'a>),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

enum BlockCache<T> {
    Transformer {
        ln1: LayerNormCache<T>,
        attn: Vec<AttentionCache<T>>,
        ln2: LayerNormCache<T>,
        f: Tensor<T>,
        u: Tensor<T>,
        g: Tensor<T>,
        lnf: LayerNormCache<T>,
    },
    Mlp {
        h0: Tensor<T>,
        u1: Tensor<T>,
        a1: Tensor<T>,
        u2: Tensor<T>,
    },
}

pub struct EncodeCache<T> {
    ids: Vec<usize>,
    batch_size: usize,
    seq_len: usize,
    emb_mask: Option<DropMask<T>>,
    block: BlockCache<T>,
    block_out: Tensor<T>,
    proj_used: Tensor<T>,
    gate: Option<GateMask<T>>,
}

pub enum BottleneckCache<T> {
    Quantizer(QuantizationResult<T>),
    Gumbel(GumbelSample<T>),
    SemHash(SemHashCode<T>),
}

pub struct BottleneckOutput<T> {
    pub z_q: Tensor<T>,
    pub cache: BottleneckCache<T>,
    /// Per sub-encoder codeword usage counts.
    pub counts: Vec<Vec<u64>>,
}

impl<T: Real> BottleneckOutput<T> {
    pub fn quantization(&self) -> Option<&QuantizationResult<T>> {
        match &self.cache {
            BottleneckCache::Quantizer(q) => Some(q),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub vq: f64,
    pub commitment: f64,
    /// Correct token predictions among `tokens`.
    pub correct: usize,
    pub tokens: usize,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardState<T> {
    pub loss: LossBreakdown,
    pub z_e_valid: Tensor<T>,
    pub bottleneck: BottleneckOutput<T>,
    pub logits: Tensor<T>,
    valid: Vec<usize>,
    positions: usize,
    encode: EncodeCache<T>,
    grad_logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub bottleneck: Bottleneck<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.encoder.validate()?;
        config.effective_vq().validate()?;
        let e = &config.encoder;
        let d = e.d_model;
        let block = match e.kind {
            EncoderKind::Transformer => EncoderBlock::Transformer(TransformerBlock {
                ln1_g: ones_param(d),
                ln1_b: zeros_param(d),
                wq: linear_param(d, d, rng),
                wk: linear_param(d, d, rng),
                wv: linear_param(d, d, rng),
                wo: linear_param(d, d, rng),
                ln2_g: ones_param(d),
                ln2_b: zeros_param(d),
                ff1_w: linear_param(d, 4 * d, rng),
                ff1_b: zeros_param(4 * d),
                ff2_w: linear_param(4 * d, d, rng),
                ff2_b: zeros_param(d),
                lnf_g: ones_param(d),
                lnf_b: zeros_param(d),
            }),
            EncoderKind::Mlp => EncoderBlock::Mlp(MlpBlock {
                w1: linear_param(d, 4 * d, rng),
                b1: zeros_param(4 * d),
                w2: linear_param(4 * d, d, rng),
                b2: zeros_param(d),
            }),
        };
        let params = ModelParams {
            tok_emb: Parameter::new(Tensor::normal(&[e.vocab_size, d], 1.0, rng)),
            pos_emb: Parameter::new(Tensor::normal(&[e.max_len, d], 0.1, rng)),
            block,
            proj_w: linear_param(d, d, rng),
            proj_b: zeros_param(d),
            dec_w: linear_param(d, e.vocab_size, rng),
            dec_b: zeros_param(e.vocab_size),
            classifier: None,
        };
        let bottleneck = match config.bottleneck {
            BottleneckKind::Dvq | BottleneckKind::Vq => Bottleneck::Quantizer(
                init_codebook(config.codebook_size, config.effective_n(), d, rng)?
                    .with_ema(config.ema_decay, config.laplace_eps),
            ),
            BottleneckKind::Gumbel => {
                let cfg = GumbelConfig {
                    tau: config.gumbel_tau,
                    k: config.codebook_size,
                    hard: config.gumbel_hard,
                };
                cfg.validate()?;
                Bottleneck::Gumbel(GumbelBottleneck {
                    w: linear_param(d, cfg.k, rng),
                    b: zeros_param(cfg.k),
                    embed: Parameter::new(Tensor::normal(&[cfg.k, d], 1.0, rng)),
                    cfg,
                })
            }
            BottleneckKind::Semhash => Bottleneck::SemHash(SemHashState::new(d, d, rng)),
        };
        let mut model = Self {
            config,
            params,
            bottleneck,
        };
        if model.config.codebook_mode == CodebookMode::Ema {
            if let Some(cb) = model.bottleneck.codebook_mut() {
                cb.set_frozen(true);
            }
        }
        Ok(model)
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    fn uses_ema(&self) -> bool {
        self.config.codebook_mode == CodebookMode::Ema && self.bottleneck.codebook().is_some()
    }

    /// All trainable tensors with stable dotted names.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out: Vec<(String, &mut Parameter<T>)> = Vec::new();
        let p = &mut self.params;
        out.push(("encoder.tok_emb".into(), &mut p.tok_emb));
        out.push(("encoder.pos_emb".into(), &mut p.pos_emb));
        match &mut p.block {
            EncoderBlock::Transformer(b) => {
                for (n, q) in [
                    ("ln1_g", &mut b.ln1_g),
                    ("ln1_b", &mut b.ln1_b),
                    ("wq", &mut b.wq),
                    ("wk", &mut b.wk),
                    ("wv", &mut b.wv),
                    ("wo", &mut b.wo),
                    ("ln2_g", &mut b.ln2_g),
                    ("ln2_b", &mut b.ln2_b),
                    ("ff1_w", &mut b.ff1_w),
                    ("ff1_b", &mut b.ff1_b),
                    ("ff2_w", &mut b.ff2_w),
                    ("ff2_b", &mut b.ff2_b),
                    ("lnf_g", &mut b.lnf_g),
                    ("lnf_b", &mut b.lnf_b),
                ] {
                    out.push((format!("encoder.block.{n}"), q));
                }
            }
            EncoderBlock::Mlp(b) => {
                for (n, q) in [
                    ("w1", &mut b.w1),
                    ("b1", &mut b.b1),
                    ("w2", &mut b.w2),
                    ("b2", &mut b.b2),
                ] {
                    out.push((format!("encoder.block.{n}"), q));
                }
            }
        }
        out.push(("encoder.proj_w".into(), &mut p.proj_w));
        out.push(("encoder.proj_b".into(), &mut p.proj_b));
        match &mut self.bottleneck {
            Bottleneck::Quantizer(cb) => {
                for (i, s) in cb.sub.iter_mut().enumerate() {
                    out.push((format!("quantizer.codebook.{i}"), s));
                }
            }
            Bottleneck::Gumbel(g) => {
                out.push(("quantizer.gumbel.w".into(), &mut g.w));
                out.push(("quantizer.gumbel.b".into(), &mut g.b));
                out.push(("quantizer.gumbel.embed".into(), &mut g.embed));
            }
            Bottleneck::SemHash(s) => {
                out.push(("quantizer.semhash.e1".into(), &mut s.e1));
                out.push(("quantizer.semhash.e2".into(), &mut s.e2));
            }
        }
        out.push(("decoder.w".into(), &mut p.dec_w));
        out.push(("decoder.b".into(), &mut p.dec_b));
        if let Some(c) = &mut p.classifier {
            out.push(("classifier.w".into(), &mut c.w));
            out.push(("classifier.b".into(), &mut c.b));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Freezes every parameter of the encoder and bottleneck groups.
    pub fn freeze_encoder(&mut self) {
        for (name, p) in self.parameters_mut() {
            if name.starts_with("encoder.") || name.starts_with("quantizer.") {
                p.frozen = true;
            }
        }
    }

    /// Maps token ids to `z_e`, returned as `[b·T × D]` rows in batch order.
    pub fn encode(&self, batch: &Batch, mode: &mut Mode<'_>) -> Result<(Tensor<T>, EncodeCache<T>)> {
        let e = &self.config.encoder;
        let d = e.d_model;
        if batch.seq_len > e.max_len {
            return Err(Error::shape(
                "encode",
                format!("seq_len <= {}", e.max_len),
                batch.seq_len,
            ));
        }
        if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= e.vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: e.vocab_size,
            });
        }
        let p = &self.params;
        let (emb_used, emb_mask) = match mode {
            Mode::Train(ctx) => {
                let (w, m) = dropconnect_apply(&p.tok_emb.value, ctx.dropconnect_rate, ctx.rng, true)?;
                (Some(w), Some(m))
            }
            Mode::Eval => (None, None),
        };
        let emb = emb_used.as_ref().unwrap_or(&p.tok_emb.value);
        let n_pos = batch.batch_size * batch.seq_len;
        let mut h0 = Tensor::zeros(&[n_pos, d]);
        for (pos, &id) in batch.token_ids.iter().enumerate() {
            let t = pos % batch.seq_len;
            let (er, pr) = (emb.row(id), p.pos_emb.value.row(t));
            for ((o, &a), &b) in h0.row_mut(pos).iter_mut().zip(er).zip(pr) {
                *o = a + b;
            }
        }

        let (block_out, block) = match &p.block {
            EncoderBlock::Transformer(b) => {
                let (a, ln1) = layer_norm(&h0, &b.ln1_g.value, &b.ln1_b.value)?;
                let w = AttentionWeights {
                    wq: &b.wq.value,
                    wk: &b.wk.value,
                    wv: &b.wv.value,
                    wo: &b.wo.value,
                };
                let mut h1 = h0;
                let mut attn = Vec::with_capacity(batch.batch_size);
                for s in 0..batch.batch_size {
                    let start = s * batch.seq_len;
                    let xs = a.slice_rows(start, batch.seq_len);
                    let km = &batch.mask[start..start + batch.seq_len];
                    let (ys, cache) = self_attention(&xs, w, e.heads, Some(km))?;
                    for r in 0..batch.seq_len {
                        for (o, &v) in h1.row_mut(start + r).iter_mut().zip(ys.row(r)) {
                            *o += v;
                        }
                    }
                    attn.push(cache);
                }
                let (f, ln2) = layer_norm(&h1, &b.ln2_g.value, &b.ln2_b.value)?;
                let u = linear(&f, &b.ff1_w.value, Some(&b.ff1_b.value))?;
                let g = gelu(&u);
                let ff = linear(&g, &b.ff2_w.value, Some(&b.ff2_b.value))?;
                let mut h2 = h1;
                h2.add_assign(&ff)?;
                let (out, lnf) = layer_norm(&h2, &b.lnf_g.value, &b.lnf_b.value)?;
                (
                    out,
                    BlockCache::Transformer {
                        ln1,
                        attn,
                        ln2,
                        f,
                        u,
                        g,
                        lnf,
                    },
                )
            }
            EncoderBlock::Mlp(b) => {
                let u1 = linear(&h0, &b.w1.value, Some(&b.b1.value))?;
                let a1 = gelu(&u1);
                let u2 = linear(&a1, &b.w2.value, Some(&b.b2.value))?;
                let out = gelu(&u2);
                (out, BlockCache::Mlp { h0, u1, a1, u2 })
            }
        };

        let (proj_used, gate) = match (mode, self.config.bottleneck) {
            (Mode::Train(ctx), BottleneckKind::Dvq) if ctx.gate.is_some() => {
                let report = ctx.gate.unwrap();
                let (w, g) = gate_dropconnect(report, ctx.dropconnect_rate, ctx.rng, &p.proj_w.value, true)?;
                (w, Some(g))
            }
            _ => (p.proj_w.value.clone(), None),
        };
        let z_e = linear(&block_out, &proj_used, Some(&p.proj_b.value))?.ensure_finite("encode")?;
        Ok((
            z_e,
            EncodeCache {
                ids: batch.token_ids.clone(),
                batch_size: batch.batch_size,
                seq_len: batch.seq_len,
                emb_mask,
                block,
                block_out,
                proj_used,
                gate,
            },
        ))
    }

    /// Accumulates encoder gradients given `dL/dz_e` over all `b·T` rows.
    pub fn encode_backward(&mut self, cache: &EncodeCache<T>, grad_ze: &Tensor<T>) -> Result<()> {
        let d = self.d_model();
        let p = &mut self.params;
        let lg = linear_backward(&cache.block_out, &cache.proj_used, grad_ze)?;
        let gw = match &cache.gate {
            Some(g) => g.backward(&lg.w)?,
            None => lg.w,
        };
        p.proj_w.accumulate(&gw)?;
        p.proj_b.accumulate(&lg.b)?;
        let g_out = lg.x;

        let g_h0 = match (&mut p.block, &cache.block) {
            (
                EncoderBlock::Transformer(b),
                BlockCache::Transformer {
                    ln1,
                    attn,
                    ln2,
                    f,
                    u,
                    g,
                    lnf,
                },
            ) => {
                let (g_h2, gg, gb) = layer_norm_backward(lnf, &b.lnf_g.value, &g_out)?;
                b.lnf_g.accumulate(&gg)?;
                b.lnf_b.accumulate(&gb)?;
                let l2 = linear_backward(g, &b.ff2_w.value, &g_h2)?;
                b.ff2_w.accumulate(&l2.w)?;
                b.ff2_b.accumulate(&l2.b)?;
                let g_u = gelu_backward(u, &l2.x)?;
                let l1 = linear_backward(f, &b.ff1_w.value, &g_u)?;
                b.ff1_w.accumulate(&l1.w)?;
                b.ff1_b.accumulate(&l1.b)?;
                let (g_h1_ln, gg, gb) = layer_norm_backward(ln2, &b.ln2_g.value, &l1.x)?;
                b.ln2_g.accumulate(&gg)?;
                b.ln2_b.accumulate(&gb)?;
                let mut g_h1 = g_h2;
                g_h1.add_assign(&g_h1_ln)?;

                let w = AttentionWeights {
                    wq: &b.wq.value,
                    wk: &b.wk.value,
                    wv: &b.wv.value,
                    wo: &b.wo.value,
                };
                let mut g_a = Tensor::zeros(&[cache.batch_size * cache.seq_len, d]);
                let mut gw = [
                    Tensor::zeros(&[d, d]),
                    Tensor::zeros(&[d, d]),
                    Tensor::zeros(&[d, d]),
                    Tensor::zeros(&[d, d]),
                ];
                for (s, ac) in attn.iter().enumerate() {
                    let start = s * cache.seq_len;
                    let gy = g_h1.slice_rows(start, cache.seq_len);
                    let ag = self_attention_backward(ac, w, &gy)?;
                    for r in 0..cache.seq_len {
                        g_a.row_mut(start + r).copy_from_slice(ag.x.row(r));
                    }
                    for (acc, gi) in gw.iter_mut().zip([&ag.wq, &ag.wk, &ag.wv, &ag.wo]) {
                        acc.add_assign(gi)?;
                    }
                }
                let [gq, gk, gv, go] = gw;
                b.wq.accumulate(&gq)?;
                b.wk.accumulate(&gk)?;
                b.wv.accumulate(&gv)?;
                b.wo.accumulate(&go)?;
                let (g_h0_ln, gg, gb) = layer_norm_backward(ln1, &b.ln1_g.value, &g_a)?;
                b.ln1_g.accumulate(&gg)?;
                b.ln1_b.accumulate(&gb)?;
                let mut g_h0 = g_h1;
                g_h0.add_assign(&g_h0_ln)?;
                g_h0
            }
            (EncoderBlock::Mlp(b), BlockCache::Mlp { h0, u1, a1, u2 }) => {
                let g_u2 = gelu_backward(u2, &g_out)?;
                let l2 = linear_backward(a1, &b.w2.value, &g_u2)?;
                b.w2.accumulate(&l2.w)?;
                b.b2.accumulate(&l2.b)?;
                let g_u1 = gelu_backward(u1, &l2.x)?;
                let l1 = linear_backward(h0, &b.w1.value, &g_u1)?;
                b.w1.accumulate(&l1.w)?;
                b.b1.accumulate(&l1.b)?;
                l1.x
            }
            _ => return Err(Error::invalid("encode cache does not match encoder kind")),
        };

        if !(p.tok_emb.frozen && p.pos_emb.frozen) {
            let mut g_emb = Tensor::zeros(p.tok_emb.shape());
            let mut g_pos = Tensor::zeros(p.pos_emb.shape());
            for (pos, &id) in cache.ids.iter().enumerate() {
                let t = pos % cache.seq_len;
                let gr = g_h0.row(pos);
                for (o, &v) in g_emb.row_mut(id).iter_mut().zip(gr) {
                    *o += v;
                }
                for (o, &v) in g_pos.row_mut(t).iter_mut().zip(gr) {
                    *o += v;
                }
            }
            if let Some(m) = &cache.emb_mask {
                g_emb = m.backward(&g_emb)?;
            }
            p.tok_emb.accumulate(&g_emb)?;
            p.pos_emb.accumulate(&g_pos)?;
        }
        Ok(())
    }

    /// Discretizes `z_e` rows.
    pub fn bottleneck_forward(&self, z_e: &Tensor<T>, mode: &mut Mode<'_>) -> Result<BottleneckOutput<T>> {
        match &self.bottleneck {
            Bottleneck::Quantizer(cb) => {
                let q = quantize(z_e, cb, &self.config.effective_vq())?;
                Ok(BottleneckOutput {
                    z_q: q.z_q.clone(),
                    counts: q.counts(),
                    cache: BottleneckCache::Quantizer(q),
                })
            }
            Bottleneck::Gumbel(g) => {
                let logits = linear(z_e, &g.w.value, Some(&g.b.value))?;
                let sample = match mode {
                    Mode::Train(ctx) => {
                        let noise = gumbel_noise_like(logits.shape(), ctx.rng);
                        gumbel_softmax_with_noise(&logits, &noise, &g.cfg)?
                    }
                    Mode::Eval => {
                        let zero = Tensor::zeros(logits.shape());
                        gumbel_softmax_with_noise(&logits, &zero, &GumbelConfig { hard: true, ..g.cfg })?
                    }
                };
                let z_q = crate::ops::linalg::matmul(&sample.output, &g.embed.value)?;
                let mut counts = vec![vec![0u64; g.cfg.k]];
                for &i in &sample.indices {
                    counts[0][i] += 1;
                }
                Ok(BottleneckOutput {
                    z_q,
                    counts,
                    cache: BottleneckCache::Gumbel(sample),
                })
            }
            Bottleneck::SemHash(s) => {
                let (rng, training) = match mode {
                    Mode::Train(ctx) => (Some(&mut *ctx.rng), true),
                    Mode::Eval => (None, false),
                };
                let mut dummy = RngState::new(0);
                let code = semhash_encode(z_e, rng.unwrap_or(&mut dummy), training, s)?;
                let z_q = semhash_decoder_input(&code.h, s)?;
                let mut counts = vec![vec![0u64; 2]; s.bits];
                for r in 0..code.g.rows() {
                    for (b, &v) in code.g.row(r).iter().enumerate() {
                        counts[b][usize::from(v > T::zero())] += 1;
                    }
                }
                Ok(BottleneckOutput {
                    z_q,
                    counts,
                    cache: BottleneckCache::SemHash(code),
                })
            }
        }
    }

    /// Gradient w.r.t. `z_e` from `dL/dz_q` plus the bottleneck's own loss
    /// terms. Bottleneck parameter gradients are accumulated.
    pub fn bottleneck_backward(
        &mut self,
        z_e: &Tensor<T>,
        out: &BottleneckOutput<T>,
        grad_zq: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let vq = self.config.effective_vq();
        let regular = self.config.codebook_mode == CodebookMode::Regular;
        match (&mut self.bottleneck, &out.cache) {
            (Bottleneck::Quantizer(cb), BottleneckCache::Quantizer(q)) => {
                let mut g = straight_through_backward(grad_zq, q.vq_loss, vq.alpha);
                g.add_assign(&commitment_grad(z_e, q, vq.beta)?)?;
                if regular {
                    let grads = codebook_grad(z_e, q, cb);
                    for (p, gr) in cb.sub.iter_mut().zip(&grads) {
                        p.accumulate(gr)?;
                    }
                }
                Ok(g)
            }
            (Bottleneck::Gumbel(gb), BottleneckCache::Gumbel(sample)) => {
                gb.embed.accumulate(&matmul_tn(&sample.output, grad_zq)?)?;
                let g_out = matmul_nt(grad_zq, &gb.embed.value)?;
                let g_logits = gumbel_softmax_backward(sample, &g_out, gb.cfg.tau)?;
                let l = linear_backward(z_e, &gb.w.value, &g_logits)?;
                gb.w.accumulate(&l.w)?;
                gb.b.accumulate(&l.b)?;
                Ok(l.x)
            }
            (Bottleneck::SemHash(s), BottleneckCache::SemHash(code)) => semhash_backward(code, grad_zq, s),
            _ => Err(Error::invalid("bottleneck cache does not match bottleneck kind")),
        }
    }

    /// Per-position vocabulary logits; any leading shape, last axis `D`.
    pub fn decode(&self, z_q: &Tensor<T>) -> Result<Tensor<T>> {
        linear(z_q, &self.params.dec_w.value, Some(&self.params.dec_b.value))
    }

    /// Reconstruction loss of `targets` from `z_q`; accumulates decoder
    /// gradients and returns `(loss, logits, dL/dz_q)`.
    pub fn decoder_loss_backward(&mut self, z_q: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>, Tensor<T>)> {
        let logits = self.decode(z_q)?;
        let (loss, g_logits) = softmax_cross_entropy(&logits, targets)?;
        let l = linear_backward(z_q, &self.params.dec_w.value, &g_logits)?;
        self.params.dec_w.accumulate(&l.w)?;
        self.params.dec_b.accumulate(&l.b)?;
        Ok((loss, logits, l.x))
    }

    /// Full forward pass with the pretraining objective.
    pub fn forward(&self, batch: &Batch, mode: &mut Mode<'_>) -> Result<ForwardState<T>> {
        let (z_e, encode) = self.encode(batch, mode)?;
        let valid = batch.valid_positions();
        let targets = batch.targets();
        let z_e_valid = z_e.gather_rows(&valid)?;
        let bottleneck = self.bottleneck_forward(&z_e_valid, mode)?;
        let logits = self.decode(&bottleneck.z_q)?;
        let (recon, grad_logits) = softmax_cross_entropy(&logits, &targets)?;
        let preds = argmax_rows(&logits);
        let correct = preds.iter().zip(&targets).filter(|(a, b)| a == b).count();
        let (vq, commit) = match bottleneck.quantization() {
            Some(q) => (q.vq_loss.as_f64(), q.commitment_loss.as_f64()),
            None => (0.0, 0.0),
        };
        let beta = self.config.effective_vq().beta;
        let vq_term = if self.bottleneck.codebook().is_some() && !self.uses_ema() {
            vq
        } else {
            0.0
        };
        let recon = recon.as_f64();
        Ok(ForwardState {
            loss: LossBreakdown {
                total: recon + vq_term + beta * commit,
                reconstruction: recon,
                vq,
                commitment: commit,
                correct,
                tokens: targets.len(),
            },
            z_e_valid,
            bottleneck,
            logits,
            valid,
            positions: batch.batch_size * batch.seq_len,
            encode,
            grad_logits,
        })
    }

    /// Backward pass for [`Model::forward`]; accumulates into parameter grads.
    pub fn backward(&mut self, state: &ForwardState<T>) -> Result<()> {
        let l = linear_backward(&state.bottleneck.z_q, &self.params.dec_w.value, &state.grad_logits)?;
        self.params.dec_w.accumulate(&l.w)?;
        self.params.dec_b.accumulate(&l.b)?;
        let g_valid = self.bottleneck_backward(&state.z_e_valid, &state.bottleneck, &l.x)?;
        let d = self.d_model();
        let mut g_ze = Tensor::zeros(&[state.positions, d]);
        for (r, &p) in state.valid.iter().enumerate() {
            g_ze.row_mut(p).copy_from_slice(g_valid.row(r));
        }
        self.encode_backward(&state.encode, &g_ze)
    }

    /// Mean of the eval-mode `z_q` over each sequence's non-pad positions,
    /// `[b × D]`. Sequences without tokens pool to zeros.
    pub fn pooled_features(&self, batch: &Batch) -> Result<Tensor<T>> {
        let (z_e, _) = self.encode(batch, &mut Mode::Eval)?;
        let valid = batch.valid_positions();
        let d = self.d_model();
        let mut pooled = Tensor::zeros(&[batch.batch_size, d]);
        if valid.is_empty() {
            return Ok(pooled);
        }
        let out = self.bottleneck_forward(&z_e.gather_rows(&valid)?, &mut Mode::Eval)?;
        let mut counts = vec![0usize; batch.batch_size];
        for (r, &p) in valid.iter().enumerate() {
            let s = p / batch.seq_len;
            counts[s] += 1;
            for (o, &v) in pooled.row_mut(s).iter_mut().zip(out.z_q.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = T::one() / T::lit(c as f64);
                pooled.row_mut(s).iter_mut().for_each(|v| *v *= inv);
            }
        }
        Ok(pooled)
    }

    pub fn attach_classifier(&mut self, num_classes: usize, rng: &mut RngState) {
        self.params.classifier = Some(ClassifierHead::new(self.d_model(), num_classes, rng));
    }

    fn head(&self) -> Result<&ClassifierHead<T>> {
        self.params
            .classifier
            .as_ref()
            .ok_or_else(|| Error::invalid("classifier head not attached"))
    }

    /// Class logits from pooled features.
    pub fn classify_features(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.head()?;
        linear(pooled, &h.w.value, Some(&h.b.value))
    }

    /// Class logits `[b × C]` for a batch.
    pub fn classify(&self, batch: &Batch) -> Result<Tensor<T>> {
        self.classify_features(&self.pooled_features(batch)?)
    }

    /// Cross-entropy of `labels` from pooled features; gradients go to the
    /// classifier head only.
    pub fn classifier_loss_backward(&mut self, pooled: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.classify_features(pooled)?;
        let (loss, g) = softmax_cross_entropy(&logits, labels)?;
        let head = self.params.classifier.as_mut().expect("checked by classify_features");
        let l = linear_backward(pooled, &head.w.value, &g)?;
        head.w.accumulate(&l.w)?;
        head.b.accumulate(&l.b)?;
        Ok(loss)
    }

    /// Every tensor that defines the model, including EMA state.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut m = self.clone();
        let mut out: Vec<(String, Tensor<T>)> = m
            .parameters_mut()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect();
        if let Bottleneck::Quantizer(cb) = &self.bottleneck {
            for (i, (c, s)) in cb.ema_counts.iter().zip(&cb.ema_sums).enumerate() {
                out.push((format!("quantizer.ema_counts.{i}"), c.clone()));
                out.push((format!("quantizer.ema_sums.{i}"), s.clone()));
            }
        }
        out
    }

    /// Overwrites tensors by name; shapes must match.
    pub fn load_named_tensors(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut map: std::collections::BTreeMap<String, Tensor<T>> = tensors.into_iter().collect();
        if let (Some(w), Some(b)) = (map.get("classifier.w"), map.get("classifier.b")) {
            if w.dims2()?.1 != b.len() {
                return Err(Error::Checkpoint("classifier w/b disagree on class count".into()));
            }
            let mut rng = RngState::new(0);
            self.attach_classifier(b.len(), &mut rng);
        }
        let mut take = |name: &str, target: &mut Tensor<T>| -> Result<()> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != target.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: shape {:?}, model expects {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t;
            Ok(())
        };
        for (name, p) in self.parameters_mut() {
            take(&name, &mut p.value)?;
        }
        if let Bottleneck::Quantizer(cb) = &mut self.bottleneck {
            for i in 0..cb.ema_counts.len() {
                take(&format!("quantizer.ema_counts.{i}"), &mut cb.ema_counts[i])?;
                take(&format!("quantizer.ema_sums.{i}"), &mut cb.ema_sums[i])?;
            }
        }
        if let Some(name) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        Ok(())
    }

    /// Parameter values concatenated in [`Model::parameters_mut`] order.
    pub fn flat_values(&mut self) -> Vec<f64> {
        self.parameters_mut()
            .into_iter()
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .collect()
    }

    pub fn flat_grads(&mut self) -> Vec<f64> {
        self.parameters_mut()
            .into_iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, p) in self.parameters_mut() {
            for v in p.value.data_mut() {
                *v = T::lit(flat[off]);
                off += 1;
            }
        }
    }
}
