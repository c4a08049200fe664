//! Small transformer encoder built around the knowledge attention layer.
//!
//! Each block computes `H ← LN(H + KAttn(H, K))` followed by
//! `H ← LN(H + FFN(H))` with a tanh feed-forward. One prior matrix per
//! example is derived from the embedding output and shared by every block
//! and head. Classification reads the `[CLS]` row.

mod checkpoint;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kattn::{self, FusionTrace, HeadDims, HeadParams, HeadView, LayerForward};
use crate::lexkb::LexicalKB;
use crate::numcore::ops::{self, LayerNormCache};
use crate::numcore::{dropout_mask, glorot_init, Gradients, Matrix, ParamId, ParamStore, Rng};
use crate::prior::{self, CoAttention, PriorMatrix, PriorMode};
use crate::scalar::Scalar;
use crate::textio::{TokenizedPair, Vocab};

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub max_a: usize,
    pub max_b: usize,
    pub gamma: f64,
    pub prior_mode: PriorMode,
    pub kappa: f64,
    pub dropout_rate: f64,
    /// Half-width of the uniform token and position embedding init.
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_h: 32,
            d_k: 16,
            d_v: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            n_classes: 2,
            max_a: 24,
            max_b: 24,
            gamma: 1.0,
            prior_mode: PriorMode::Boost,
            kappa: 1.0,
            dropout_rate: 0.1,
            embed_scale: EMBED_HALF_WIDTH,
            seed: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_h", self.d_h),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_a", self.max_a),
            ("max_b", self.max_b),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_v != self.d_h {
            return Err(Error::Config(format!(
                "n_heads·d_v = {} must equal d_h = {}",
                self.n_heads * self.d_v,
                self.d_h
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be finite and non-negative".into()));
        }
        if !(self.embed_scale > 0.0 && self.embed_scale.is_finite()) {
            return Err(Error::Config("embed_scale must be finite and positive".into()));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config("kappa must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Longest encodable sequence: `[CLS] A [SEP] B [SEP]`.
    pub fn max_len(&self) -> usize {
        self.max_a + self.max_b + 3
    }

    pub fn head_dims(&self) -> HeadDims {
        HeadDims {
            d_model: self.d_h,
            d_k: self.d_k,
            d_v: self.d_v,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    heads: Vec<HeadParams<ParamId>>,
    w_proj: ParamId,
    b_proj: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    token: ParamId,
    position: ParamId,
    blocks: Vec<BlockIds>,
    cls_w: ParamId,
    cls_b: ParamId,
}

fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
}

impl ModelIds {
    fn lookup<T: Scalar>(store: &ParamStore<T>, cfg: &EncoderConfig) -> Result<Self> {
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| lookup(store, &format!("layer{l}.{s}"));
                Ok(BlockIds {
                    heads: (0..cfg.n_heads)
                        .map(|h| HeadParams::lookup(store, &format!("layer{l}.head{h}")))
                        .collect::<Result<_>>()?,
                    w_proj: p("attn.w_proj")?,
                    b_proj: p("attn.b_proj")?,
                    ln1_gain: p("ln1.gain")?,
                    ln1_bias: p("ln1.bias")?,
                    ffn_w1: p("ffn.w1")?,
                    ffn_b1: p("ffn.b1")?,
                    ffn_w2: p("ffn.w2")?,
                    ffn_b2: p("ffn.b2")?,
                    ln2_gain: p("ln2.gain")?,
                    ln2_bias: p("ln2.bias")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelIds {
            token: lookup(store, "embed.token")?,
            position: lookup(store, "embed.position")?,
            blocks,
            cls_w: lookup(store, "cls.w")?,
            cls_b: lookup(store, "cls.b")?,
        })
    }
}

impl ModelIds {
    /// Stage of every parameter, indexed by `ParamId::index`.
    fn stages(&self, n_params: usize) -> Vec<Stage> {
        let mut out = vec![Stage::Embed; n_params];
        for (l, b) in self.blocks.iter().enumerate() {
            for (h, ids) in b.heads.iter().enumerate() {
                for (_, id) in ids.clone().into_named() {
                    out[id.index()] = Stage::Head { layer: l, head: h };
                }
            }
            for id in [b.w_proj, b.b_proj, b.ln1_gain, b.ln1_bias] {
                out[id.index()] = Stage::Proj(l);
            }
            for id in [b.ffn_w1, b.ffn_b1, b.ffn_w2, b.ffn_b2, b.ln2_gain, b.ln2_bias] {
                out[id.index()] = Stage::Ffn(l);
            }
        }
        out[self.cls_w.index()] = Stage::Cls;
        out[self.cls_b.index()] = Stage::Cls;
        out
    }
}

/// Parameter names and shapes in registration order.
pub fn param_shapes(cfg: &EncoderConfig, vocab_len: usize) -> Vec<(String, (usize, usize))> {
    let mut out = vec![
        ("embed.token".to_string(), (vocab_len, cfg.d_h)),
        ("embed.position".to_string(), (cfg.max_len(), cfg.d_h)),
    ];
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            for (name, shape) in cfg.head_dims().shapes().into_named() {
                out.push((format!("layer{l}.head{h}.{name}"), shape));
            }
        }
        let d = cfg.d_h;
        out.extend([
            (format!("layer{l}.attn.w_proj"), (d, cfg.n_heads * cfg.d_v)),
            (format!("layer{l}.attn.b_proj"), (1, d)),
            (format!("layer{l}.ln1.gain"), (1, d)),
            (format!("layer{l}.ln1.bias"), (1, d)),
            (format!("layer{l}.ffn.w1"), (cfg.d_ff, d)),
            (format!("layer{l}.ffn.b1"), (1, cfg.d_ff)),
            (format!("layer{l}.ffn.w2"), (d, cfg.d_ff)),
            (format!("layer{l}.ffn.b2"), (1, d)),
            (format!("layer{l}.ln2.gain"), (1, d)),
            (format!("layer{l}.ln2.bias"), (1, d)),
        ]);
    }
    out.push(("cls.w".to_string(), (cfg.n_classes, cfg.d_h)));
    out.push(("cls.b".to_string(), (1, cfg.n_classes)));
    out
}

/// Dropout behaviour of a forward pass. With `On`, example `i` of a batch
/// draws its masks from sub-stream `i` of `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    On { seed: u64 },
}

#[derive(Debug, Clone)]
struct BlockMasks<T> {
    attn_in: Matrix<T>,
    proj: Matrix<T>,
    ffn1: Matrix<T>,
    ffn2: Matrix<T>,
}

#[derive(Debug, Clone)]
struct Masks<T> {
    embed: Matrix<T>,
    blocks: Vec<BlockMasks<T>>,
    cls: Matrix<T>,
}

impl<T: Scalar> Masks<T> {
    fn draw(cfg: &EncoderConfig, len: usize, rng: &mut Rng) -> Self {
        let rate = cfg.dropout_rate;
        let embed = dropout_mask(len, cfg.d_h, rate, rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockMasks {
                attn_in: dropout_mask(len, cfg.d_h, rate, rng),
                proj: dropout_mask(len, cfg.n_heads * cfg.d_v, rate, rng),
                ffn1: dropout_mask(len, cfg.d_h, rate, rng),
                ffn2: dropout_mask(len, cfg.d_ff, rate, rng),
            })
            .collect();
        let cls = dropout_mask(1, cfg.d_h, rate, rng);
        Masks { embed, blocks, cls }
    }
}

fn apply<T: Scalar>(x: &Matrix<T>, mask: Option<&Matrix<T>>) -> Result<Matrix<T>> {
    match mask {
        Some(m) => x.hadamard(m),
        None => Ok(x.clone()),
    }
}

/// Cached activations of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockForward<T> {
    pub input: Matrix<T>,
    attn_in: Matrix<T>,
    pub attn: LayerForward<T>,
    ln1: LayerNormCache<T>,
    pub mid: Matrix<T>,
    ffn_in: Matrix<T>,
    ffn_act: Matrix<T>,
    ffn_hidden: Matrix<T>,
    ln2: LayerNormCache<T>,
    pub out: Matrix<T>,
}

struct FfnForward<T> {
    ffn_in: Matrix<T>,
    ffn_act: Matrix<T>,
    ffn_hidden: Matrix<T>,
    ln2: LayerNormCache<T>,
    out: Matrix<T>,
}

/// Earliest computation a parameter tensor feeds into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Embed,
    Head { layer: usize, head: usize },
    /// Output projection and first LayerNorm.
    Proj(usize),
    /// Feed-forward and second LayerNorm.
    Ffn(usize),
    Cls,
}

/// Everything the backward pass of one example needs.
#[derive(Debug, Clone)]
pub struct ExampleForward<T> {
    pub h0: Matrix<T>,
    pub coattention: CoAttention<T>,
    pub prior: PriorMatrix<T>,
    pub blocks: Vec<BlockForward<T>>,
    cls_in: Matrix<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    masks: Option<Masks<T>>,
}

impl<T: Scalar> ExampleForward<T> {
    pub fn hidden(&self) -> &Matrix<T> {
        self.blocks.last().map_or(&self.h0, |b| &b.out)
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }

    /// Gate traces indexed by `[layer][head][position]`.
    pub fn traces(&self) -> Vec<Vec<Vec<FusionTrace>>> {
        self.blocks
            .iter()
            .map(|b| b.attn.heads.iter().map(|h| h.trace()).collect())
            .collect()
    }

    /// Mean filtration gate over every layer, head and position.
    pub fn mean_g_filter(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in &self.blocks {
            for h in &b.attn.heads {
                sum += h.filter.gate.data().iter().map(|v| v.as_f64()).sum::<f64>();
                n += h.filter.gate.len();
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub(crate) fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Configuration, vocabulary and trainable parameters of one model.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh model drawn from `config.seed`: uniform token and position
    /// embeddings of half-width `embed_scale` (by default their sum has
    /// variance 1), Glorot weights, zero biases, unit LayerNorm gains.
    pub fn new(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut params = ParamStore::new();
        for (name, (r, c)) in param_shapes(&config, vocab.len()) {
            let field = name.rsplit('.').next().unwrap_or_default();
            let value = if name.starts_with("embed.") {
                uniform_init(r, c, config.embed_scale, &mut rng)
            } else if field.ends_with("gain") {
                Matrix::ones(r, c)
            } else if field.starts_with('b') || field == "bias" {
                Matrix::zeros(r, c)
            } else {
                glorot_init(r, c, &mut rng)
            };
            params.add(name, value)?;
        }
        Self::from_params(config, vocab, params)
    }

    /// Wraps an existing store, checking every name and shape.
    pub fn from_params(config: EncoderConfig, vocab: Vocab, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config, vocab.len());
        if expected.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let id = lookup(&params, name)?;
            if params.value(id).shape() != *shape {
                return Err(Error::shape(
                    "model parameters",
                    format!("{name} is {:?}, expected {shape:?}", params.value(id).shape()),
                ));
            }
        }
        let ids = ModelIds::lookup(&params, &config)?;
        Ok(ModelState {
            config,
            vocab,
            params,
            ids,
        })
    }

    fn net<'a>(&'a self, params: &'a ParamStore<T>) -> Net<'a, T> {
        Net {
            cfg: &self.config,
            ids: &self.ids,
            p: params,
        }
    }

    /// Token plus position embedding, without dropout.
    pub fn embed(&self, pair: &TokenizedPair) -> Result<Matrix<T>> {
        self.net(&self.params).embed(pair)
    }

    /// Knowledge prior of `pair` computed from the embedding output `h0`.
    pub fn build_prior(
        &self,
        h0: &Matrix<T>,
        pair: &TokenizedPair,
        kb: &LexicalKB,
    ) -> Result<(CoAttention<T>, PriorMatrix<T>)> {
        self.net(&self.params).prior(h0, pair, kb)
    }

    /// Runs all blocks in evaluation mode.
    pub fn encode(&self, h0: &Matrix<T>, prior: &PriorMatrix<T>) -> Result<Matrix<T>> {
        let blocks = self.net(&self.params).encode(h0, prior, None)?;
        Ok(blocks.last().map_or_else(|| h0.clone(), |b| b.out.clone()))
    }

    /// Logits and class probabilities read from the `[CLS]` row of `h`.
    pub fn classify(&self, h: &Matrix<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (_, logits, probs) = self.net(&self.params).classify(h, None)?;
        Ok((logits, probs))
    }

    /// Full forward pass of one example.
    pub fn forward(&self, pair: &TokenizedPair, kb: &LexicalKB, dropout: Dropout) -> Result<ExampleForward<T>> {
        self.net(&self.params).forward(pair, kb, rng_for(dropout, 0).as_mut())
    }

    /// Mean cross-entropy of a labelled batch under `params`.
    pub fn batch_loss_with(
        &self,
        params: &ParamStore<T>,
        batch: &[TokenizedPair],
        kb: &LexicalKB,
        dropout: Dropout,
    ) -> Result<T> {
        let net = self.net(params);
        check_batch(batch)?;
        let losses = batch
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let fwd = net.forward(pair, kb, rng_for(dropout, i).as_mut())?;
                example_loss(&fwd.logits, pair, i)
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(mean(&losses))
    }

    pub fn batch_loss(&self, batch: &[TokenizedPair], kb: &LexicalKB, dropout: Dropout) -> Result<T> {
        self.batch_loss_with(&self.params, batch, kb, dropout)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &[TokenizedPair],
        kb: &LexicalKB,
        dropout: Dropout,
    ) -> Result<(T, Gradients<T>)> {
        check_batch(batch)?;
        let net = self.net(&self.params);
        let weight = T::one() / T::lit(batch.len() as f64);
        let per_example = batch
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let fwd = net.forward(pair, kb, rng_for(dropout, i).as_mut())?;
                let loss = example_loss(&fwd.logits, pair, i)?;
                let mut grads = self.params.zeros_like();
                net.backward(pair, &fwd, weight, &mut grads)?;
                Ok((loss, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = self.params.zeros_like();
        let mut losses = Vec::with_capacity(batch.len());
        for (loss, g) in &per_example {
            losses.push(*loss);
            total.add_assign(g)?;
        }
        Ok((mean(&losses), total))
    }
}

/// Activations of one unperturbed batch pass, used to evaluate the loss
/// after a single tensor changes without recomputing what it cannot reach.
pub struct PerturbationCache<'a, T> {
    model: &'a ModelState<T>,
    batch: &'a [TokenizedPair],
    kb: &'a LexicalKB,
    dropout: Dropout,
    examples: Vec<ExampleForward<T>>,
    stages: Vec<Stage>,
}

impl<T: Scalar> ModelState<T> {
    pub fn perturbation_cache<'a>(
        &'a self,
        batch: &'a [TokenizedPair],
        kb: &'a LexicalKB,
        dropout: Dropout,
    ) -> Result<PerturbationCache<'a, T>> {
        check_batch(batch)?;
        let net = self.net(&self.params);
        let examples = batch
            .iter()
            .enumerate()
            .map(|(i, pair)| net.forward(pair, kb, rng_for(dropout, i).as_mut()))
            .collect::<Result<_>>()?;
        Ok(PerturbationCache {
            model: self,
            batch,
            kb,
            dropout,
            examples,
            stages: self.ids.stages(self.params.len()),
        })
    }
}

impl<T: Scalar> PerturbationCache<'_, T> {
    /// Mean batch loss under `params`, which must equal the cached model's
    /// parameters everywhere except in tensor `changed`.
    pub fn loss(&self, params: &ParamStore<T>, changed: ParamId) -> Result<T> {
        let net = self.model.net(params);
        let stage = self.stages[changed.index()];
        let losses = self
            .batch
            .iter()
            .zip(&self.examples)
            .enumerate()
            .map(|(i, (pair, cached))| {
                if stage == Stage::Embed {
                    let fwd = net.forward(pair, self.kb, rng_for(self.dropout, i).as_mut())?;
                    return example_loss(&fwd.logits, pair, i);
                }
                let hidden = net.resume(cached, stage)?;
                let (_, logits, _) = net.classify(&hidden, cached.masks.as_ref().map(|m| &m.cls))?;
                example_loss(&logits, pair, i)
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(mean(&losses))
    }
}

/// `U(−a, a)` with `a = √1.5` has variance 1/2.
pub const EMBED_HALF_WIDTH: f64 = 1.224_744_871_391_589;

fn uniform_init<T: Scalar>(rows: usize, cols: usize, a: f64, rng: &mut Rng) -> Matrix<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.uniform(-a, a))).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches by construction")
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::lit(xs.len() as f64)
}

fn check_batch(batch: &[TokenizedPair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(())
}

fn rng_for(dropout: Dropout, index: usize) -> Option<Rng> {
    match dropout {
        Dropout::Off => None,
        Dropout::On { seed } => Some(Rng::stream(seed, index as u64)),
    }
}

fn example_loss<T: Scalar>(logits: &[T], pair: &TokenizedPair, index: usize) -> Result<T> {
    let label = pair
        .label
        .ok_or_else(|| Error::Data(format!("batch example {index} has no label")))?;
    if label >= logits.len() {
        return Err(Error::Data(format!("batch example {index}: label {label} out of range")));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    let loss = lse - logits[label];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss of batch example {index}")));
    }
    Ok(loss)
}

/// Borrowed view of a configuration, its parameter ids and one store.
struct Net<'a, T> {
    cfg: &'a EncoderConfig,
    ids: &'a ModelIds,
    p: &'a ParamStore<T>,
}

impl<T: Scalar> Net<'_, T> {
    fn v(&self, id: ParamId) -> &Matrix<T> {
        self.p.value(id)
    }

    fn heads(&self, b: &BlockIds) -> Vec<HeadView<'_, T>> {
        b.heads.iter().map(|h| h.view(self.p)).collect()
    }

    fn embed(&self, pair: &TokenizedPair) -> Result<Matrix<T>> {
        let len = pair.len();
        if len > self.cfg.max_len() {
            return Err(Error::Data(format!("sequence length {len} exceeds {}", self.cfg.max_len())));
        }
        let token = self.v(self.ids.token);
        let position = self.v(self.ids.position);
        let mut h = Matrix::zeros(len, self.cfg.d_h);
        for (pos, &id) in pair.ids.iter().enumerate() {
            if id >= token.rows() {
                return Err(Error::Data(format!("token id {id} outside vocabulary of {}", token.rows())));
            }
            for ((o, &t), &p) in h.row_mut(pos).iter_mut().zip(token.row(id)).zip(position.row(pos)) {
                *o = t + p;
            }
        }
        Ok(h)
    }

    fn prior(&self, h0: &Matrix<T>, pair: &TokenizedPair, kb: &LexicalKB) -> Result<(CoAttention<T>, PriorMatrix<T>)> {
        let layout = pair.layout;
        let a = layout.a_span();
        let b = layout.b_span();
        let ha = h0.slice_rows(a.start, a.end);
        let hb = h0.slice_rows(b.start, b.end);
        let co = prior::coattention(&ha, &hb, kb, &pair.lemmas_a, &pair.lemmas_b, T::lit(self.cfg.gamma))?;
        let k = prior::build_prior_matrix(&co, layout, self.cfg.prior_mode, T::lit(self.cfg.kappa))?;
        Ok((co, k))
    }

    fn encode(&self, h0: &Matrix<T>, prior: &PriorMatrix<T>, masks: Option<&Masks<T>>) -> Result<Vec<BlockForward<T>>> {
        let mut out: Vec<BlockForward<T>> = Vec::with_capacity(self.ids.blocks.len());
        for l in 0..self.ids.blocks.len() {
            let input = out.last().map_or_else(|| h0.clone(), |f| f.out.clone());
            out.push(self.block(l, input, prior, masks)?);
        }
        Ok(out)
    }

    /// Output of blocks `from..` applied to `h`.
    fn encode_from(&self, from: usize, mut h: Matrix<T>, prior: &PriorMatrix<T>, masks: Option<&Masks<T>>) -> Result<Matrix<T>> {
        for l in from..self.ids.blocks.len() {
            h = self.block(l, h, prior, masks)?.out;
        }
        Ok(h)
    }

    fn block(&self, l: usize, input: Matrix<T>, prior: &PriorMatrix<T>, masks: Option<&Masks<T>>) -> Result<BlockForward<T>> {
        let b = &self.ids.blocks[l];
        let m = masks.map(|m| &m.blocks[l]);
        let attn_in = apply(&input, m.map(|m| &m.attn_in))?;
        let attn = kattn::knowledge_attention_layer(
            &attn_in,
            prior,
            &self.heads(b),
            self.v(b.w_proj),
            self.v(b.b_proj),
            m.map(|m| &m.proj),
        )?;
        let (mid, ln1) = self.norm1(b, &input, &attn.out)?;
        let ffn = self.ffn(b, &mid, m)?;
        Ok(BlockForward {
            input,
            attn_in,
            attn,
            ln1,
            mid,
            ffn_in: ffn.ffn_in,
            ffn_act: ffn.ffn_act,
            ffn_hidden: ffn.ffn_hidden,
            ln2: ffn.ln2,
            out: ffn.out,
        })
    }

    fn norm1(&self, b: &BlockIds, input: &Matrix<T>, attn_out: &Matrix<T>) -> Result<(Matrix<T>, LayerNormCache<T>)> {
        ops::layer_norm(&input.add(attn_out)?, self.v(b.ln1_gain), self.v(b.ln1_bias))
    }

    fn ffn(&self, b: &BlockIds, mid: &Matrix<T>, m: Option<&BlockMasks<T>>) -> Result<FfnForward<T>> {
        let ffn_in = apply(mid, m.map(|m| &m.ffn1))?;
        let ffn_act = ops::tanh(&ops::linear(&ffn_in, self.v(b.ffn_w1), Some(self.v(b.ffn_b1)))?);
        let ffn_hidden = apply(&ffn_act, m.map(|m| &m.ffn2))?;
        let ffn_out = ops::linear(&ffn_hidden, self.v(b.ffn_w2), Some(self.v(b.ffn_b2)))?;
        let (out, ln2) = ops::layer_norm(&mid.add(&ffn_out)?, self.v(b.ln2_gain), self.v(b.ln2_bias))?;
        Ok(FfnForward {
            ffn_in,
            ffn_act,
            ffn_hidden,
            ln2,
            out,
        })
    }

    /// Hidden states after the last block when only tensors of `stage`
    /// differ from the parameters that produced `fwd`.
    fn resume(&self, fwd: &ExampleForward<T>, stage: Stage) -> Result<Matrix<T>> {
        let masks = fwd.masks.as_ref();
        let (l, out) = match stage {
            Stage::Embed => unreachable!("embedding changes need a full pass"),
            Stage::Cls => return Ok(fwd.hidden().clone()),
            Stage::Head { layer, head } => {
                let (b, f) = (&self.ids.blocks[layer], &fwd.blocks[layer]);
                let fresh = kattn::head_forward(&f.attn_in, &fwd.prior, &b.heads[head].view(self.p))?;
                let ys: Vec<&Matrix<T>> = f
                    .attn
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(k, h)| if k == head { fresh.y() } else { h.y() })
                    .collect();
                let proj_mask = masks.map(|m| &m.blocks[layer].proj);
                let (_, attn_out) = kattn::project_heads(&ys, self.v(b.w_proj), self.v(b.b_proj), proj_mask)?;
                let (mid, _) = self.norm1(b, &f.input, &attn_out)?;
                (layer, self.ffn(b, &mid, masks.map(|m| &m.blocks[layer]))?.out)
            }
            Stage::Proj(layer) => {
                let (b, f) = (&self.ids.blocks[layer], &fwd.blocks[layer]);
                let attn_out = ops::linear(&f.attn.proj_input, self.v(b.w_proj), Some(self.v(b.b_proj)))?;
                let (mid, _) = self.norm1(b, &f.input, &attn_out)?;
                (layer, self.ffn(b, &mid, masks.map(|m| &m.blocks[layer]))?.out)
            }
            Stage::Ffn(layer) => {
                let (b, f) = (&self.ids.blocks[layer], &fwd.blocks[layer]);
                (layer, self.ffn(b, &f.mid, masks.map(|m| &m.blocks[layer]))?.out)
            }
        };
        self.encode_from(l + 1, out, &fwd.prior, masks)
    }

    fn classify(&self, h: &Matrix<T>, mask: Option<&Matrix<T>>) -> Result<(Matrix<T>, Vec<T>, Vec<T>)> {
        if h.rows() == 0 {
            return Err(Error::shape("classify", "empty sequence"));
        }
        let cls_in = apply(&h.slice_rows(0, 1), mask)?;
        let logits = ops::linear(&cls_in, self.v(self.ids.cls_w), Some(self.v(self.ids.cls_b)))?.into_data();
        let mut probs = vec![T::zero(); logits.len()];
        ops::softmax_slice(&logits, &mut probs);
        Ok((cls_in, logits, probs))
    }

    fn forward(&self, pair: &TokenizedPair, kb: &LexicalKB, rng: Option<&mut Rng>) -> Result<ExampleForward<T>> {
        let masks = match rng {
            Some(rng) if self.cfg.dropout_rate > 0.0 => Some(Masks::draw(self.cfg, pair.len(), rng)),
            _ => None,
        };
        let h0 = apply(&self.embed(pair)?, masks.as_ref().map(|m| &m.embed))?;
        let (coattention, prior) = self.prior(&h0, pair, kb)?;
        let blocks = self.encode(&h0, &prior, masks.as_ref())?;
        let last = blocks.last().map_or(&h0, |b| &b.out);
        let (cls_in, logits, probs) = self.classify(last, masks.as_ref().map(|m| &m.cls))?;
        Ok(ExampleForward {
            h0,
            coattention,
            prior,
            blocks,
            cls_in,
            logits,
            probs,
            masks,
        })
    }

    /// Accumulates `weight · ∂(−log p_label)/∂θ` into `grads`.
    fn backward(&self, pair: &TokenizedPair, fwd: &ExampleForward<T>, weight: T, grads: &mut Gradients<T>) -> Result<()> {
        let label = pair.label.ok_or_else(|| Error::Data("unlabelled example".into()))?;
        let masks = fwd.masks.as_ref();
        let ids = self.ids;

        let mut d_logits = Matrix::row_vector(fwd.probs.iter().map(|&p| p * weight).collect());
        d_logits.data_mut()[label] -= weight;
        let mut d_cls_in = ops::linear_backward(
            &fwd.cls_in,
            self.v(ids.cls_w),
            &d_logits,
            grads.get_mut(ids.cls_w),
            None,
        )?;
        grads.accumulate(ids.cls_b, &d_logits)?;
        if let Some(m) = masks {
            d_cls_in = d_cls_in.hadamard(&m.cls)?;
        }
        let len = fwd.h0.rows();
        let mut d_h = Matrix::zeros(len, self.cfg.d_h);
        d_h.row_mut(0).copy_from_slice(d_cls_in.row(0));

        let mut d_prior = Matrix::zeros(len, len);
        for (l, (b, f)) in ids.blocks.iter().zip(&fwd.blocks).enumerate().rev() {
            let m = masks.map(|m| &m.blocks[l]);
            d_h = self.block_backward(b, f, &fwd.prior, m, &d_h, &mut d_prior, grads)?;
        }

        let layout = pair.layout;
        let (d_wa, d_wb) = prior::prior_backward(&d_prior, layout, self.cfg.prior_mode, T::lit(self.cfg.kappa));
        let (a, bs) = (layout.a_span(), layout.b_span());
        let ha = fwd.h0.slice_rows(a.start, a.end);
        let hb = fwd.h0.slice_rows(bs.start, bs.end);
        let (d_ha, d_hb) = prior::coattention_backward(&fwd.coattention, &ha, &hb, &d_wa, &d_wb)?;
        for (i, r) in a.enumerate() {
            add_into(d_h.row_mut(r), d_ha.row(i));
        }
        for (j, r) in bs.enumerate() {
            add_into(d_h.row_mut(r), d_hb.row(j));
        }

        if let Some(m) = masks {
            d_h = d_h.hadamard(&m.embed)?;
        }
        let d_token = grads.get_mut(ids.token);
        for (pos, &id) in pair.ids.iter().enumerate() {
            add_into(d_token.row_mut(id), d_h.row(pos));
        }
        let d_position = grads.get_mut(ids.position);
        for pos in 0..len {
            add_into(d_position.row_mut(pos), d_h.row(pos));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &BlockIds,
        f: &BlockForward<T>,
        prior: &PriorMatrix<T>,
        m: Option<&BlockMasks<T>>,
        d_out: &Matrix<T>,
        d_prior: &mut Matrix<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Matrix<T>> {
        let d = self.cfg.d_h;
        let mut d_gain = Matrix::zeros(1, d);
        let mut d_bias = Matrix::zeros(1, d);
        let d_pre2 = ops::layer_norm_backward(&f.ln2, self.v(b.ln2_gain), d_out, &mut d_gain, &mut d_bias)?;
        grads.accumulate(b.ln2_gain, &d_gain)?;
        grads.accumulate(b.ln2_bias, &d_bias)?;

        let mut d_b2 = Matrix::zeros(1, d);
        let mut d_hidden = ops::linear_backward(&f.ffn_hidden, self.v(b.ffn_w2), &d_pre2, grads.get_mut(b.ffn_w2), Some(&mut d_b2))?;
        grads.accumulate(b.ffn_b2, &d_b2)?;
        if let Some(m) = m {
            d_hidden = d_hidden.hadamard(&m.ffn2)?;
        }
        let d_act = ops::tanh_backward(&f.ffn_act, &d_hidden)?;
        let mut d_b1 = Matrix::zeros(1, self.cfg.d_ff);
        let mut d_ffn_in = ops::linear_backward(&f.ffn_in, self.v(b.ffn_w1), &d_act, grads.get_mut(b.ffn_w1), Some(&mut d_b1))?;
        grads.accumulate(b.ffn_b1, &d_b1)?;
        if let Some(m) = m {
            d_ffn_in = d_ffn_in.hadamard(&m.ffn1)?;
        }
        let mut d_mid = d_pre2;
        d_mid.add_assign(&d_ffn_in)?;

        let mut d_gain = Matrix::zeros(1, d);
        let mut d_bias = Matrix::zeros(1, d);
        let d_pre1 = ops::layer_norm_backward(&f.ln1, self.v(b.ln1_gain), &d_mid, &mut d_gain, &mut d_bias)?;
        grads.accumulate(b.ln1_gain, &d_gain)?;
        grads.accumulate(b.ln1_bias, &d_bias)?;

        let views = self.heads(b);
        let mut head_grads: Vec<_> = views.iter().map(|v| v.as_ref().map(|_, m| Matrix::zeros(m.rows(), m.cols()))).collect();
        let mut d_w_proj = Matrix::zeros(d, self.cfg.n_heads * self.cfg.d_v);
        let mut d_b_proj = Matrix::zeros(1, d);
        let (mut d_attn_in, d_k) = kattn::knowledge_attention_layer_backward(
            &f.attn_in,
            prior,
            &views,
            self.v(b.w_proj),
            m.map(|m| &m.proj),
            &f.attn,
            &d_pre1,
            &mut head_grads,
            &mut d_w_proj,
            &mut d_b_proj,
        )?;
        for (ids, g) in b.heads.iter().zip(&head_grads) {
            ids.accumulate(grads, g)?;
        }
        grads.accumulate(b.w_proj, &d_w_proj)?;
        grads.accumulate(b.b_proj, &d_b_proj)?;
        d_prior.add_assign(&d_k)?;
        if let Some(m) = m {
            d_attn_in = d_attn_in.hadamard(&m.attn_in)?;
        }
        let mut d_input = d_pre1;
        d_input.add_assign(&d_attn_in)?;
        Ok(d_input)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
