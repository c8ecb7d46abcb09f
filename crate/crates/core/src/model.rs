//! Encoder-decoder translation model.
//!
//! Encoder layers use phrase attention followed by post-norm residuals:
//!
//! ```text
//! h_mh  = PhraseMHA(x)
//! h_no  = LayerNorm(h_mh + x)
//! h_out = LayerNorm(FFN(h_no) + h_no),   FFN(h) = max(0, h W1 + b1) W2 + b2
//! ```
//!
//! The decoder is a plain Transformer decoder (masked self-attention,
//! cross-attention, FFN, post-norm). Embeddings are scaled by `sqrt(d_model)`
//! and summed with sinusoidal positions. Source, target and output
//! embeddings are not tied.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_mask, head_dim, multi_head_attention, AttentionParams};
use crate::autodiff::{Graph, Mask, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::{normal, xavier_uniform};
use crate::phrase::{phrase_multi_head_attention, GramConfig, GramSpec, LstmBank};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    #[serde(with = "gram_spec_string")]
    pub gram: GramSpec,
    pub share_lstm_across_heads: bool,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub max_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 4,
            encoder_layers: 6,
            decoder_layers: 6,
            ffn_dim: 2048,
            dropout: 0.1,
            label_smoothing: 0.1,
            gram: GramSpec::CrossH(vec![2, 3]),
            share_lstm_across_heads: false,
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            max_len: 256,
            layer_norm_eps: 1e-5,
        }
    }
}

mod gram_spec_string {
    use super::GramSpec;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &GramSpec, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&g.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GramSpec, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> Result<usize> {
        head_dim(self.d_model, self.heads)
    }

    pub fn grams(&self) -> Result<GramConfig> {
        self.gram.resolve(self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.head_dim()?;
        self.grams()?;
        let positive = [
            ("ffn_dim", self.ffn_dim),
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even for sinusoidal positions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must lie in [0, 1)".into()));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Closed-form parameter count of a model built from `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    let d = cfg.d_model;
    let f = cfg.ffn_dim;
    let dh = cfg.head_dim()?;
    let grams = cfg.grams()?;
    let ffn = d * f + f + f * d + d;
    let layer_norm = 2 * d;
    let embeddings = (cfg.src_vocab_size + cfg.tgt_vocab_size) * d;
    let encoder = AttentionParams::num_params(d)
        + ffn
        + 2 * layer_norm
        + LstmBank::num_params(&grams, dh, cfg.share_lstm_across_heads);
    let decoder = 2 * AttentionParams::num_params(d) + ffn + 3 * layer_norm;
    let output = d * cfg.tgt_vocab_size + cfg.tgt_vocab_size;
    Ok(embeddings + cfg.encoder_layers * encoder + cfg.decoder_layers * decoder + output)
}

/// `(pos, 2i) = sin(pos / 10000^(2i/d))`, `(pos, 2i+1) = cos(..)`, positions from 0.
pub fn sinusoidal_positions(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width {d} must be even")));
    }
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len.max(1), d], if len == 0 { vec![0.0; d] } else { data })
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    fn register(store: &mut ParamStore, prefix: &str, d: usize, f: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FfnParams {
            w1: store.insert(format!("{prefix}.w1"), xavier_uniform(rng, d, f))?,
            b1: store.insert(format!("{prefix}.b1"), Tensor::zeros(&[f]))?,
            w2: store.insert(format!("{prefix}.w2"), xavier_uniform(rng, f, d))?,
            b2: store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
        })
    }

    /// `max(0, x W1 + b1) W2 + b2`
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) =
            (g.param(store, self.w1), g.param(store, self.b1), g.param(store, self.w2), g.param(store, self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        g.add_bias(h, b2)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub phrase: LstmBank,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    pub norm3: LayerNormParams,
}

/// Right-padded batch of token sequences, `[batch, width]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("token batch needs non-empty sequences".into()));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, width - s.len()));
        }
        Ok(TokenBatch { ids, lens: seqs.iter().map(Vec::len).collect(), width })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    /// `batch_size * width`, the padded token count.
    pub fn padded_tokens(&self) -> usize {
        self.ids.len()
    }
}

/// Source sequence, decoder input and decoder targets for teacher forcing.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub src: TokenBatch,
    pub tgt_in: TokenBatch,
    /// Per decoder position: the reference token, `None` for padding.
    pub targets: Vec<Option<usize>>,
}

impl TrainingBatch {
    /// `src` gets `</s>` appended; the decoder reads `<s> y` and predicts `y </s>`.
    pub fn from_pairs(pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        let src: Vec<Vec<usize>> = pairs.iter().map(|(s, _)| s.iter().copied().chain([EOS]).collect()).collect();
        let tgt_in: Vec<Vec<usize>> =
            pairs.iter().map(|(_, t)| [BOS].into_iter().chain(t.iter().copied()).collect()).collect();
        let tgt_out: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t.iter().copied().chain([EOS]).collect()).collect();
        let tgt_in = TokenBatch::new(&tgt_in)?;
        let mut targets = Vec::with_capacity(tgt_in.padded_tokens());
        for out in &tgt_out {
            targets.extend(out.iter().map(|&t| Some(t)));
            targets.extend(std::iter::repeat_n(None, tgt_in.width - out.len()));
        }
        Ok(TrainingBatch { src: TokenBatch::new(&src)?, tgt_in, targets })
    }

    pub fn target_tokens(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Smoothed negative log-likelihood of `refs` under `logits[T, V]`, ignoring `pad_id` positions.
pub fn nll_loss(g: &mut Graph, logits: Var, refs: &[usize], pad_id: usize, smoothing: f64) -> Result<Var> {
    let targets: Vec<Option<usize>> = refs.iter().map(|&r| (r != pad_id).then_some(r)).collect();
    let v = g.value(logits).last_dim();
    let flat = if g.shape(logits).len() == 2 {
        logits
    } else {
        let rows = g.value(logits).rows();
        g.reshape(logits, &[rows, v])?
    };
    g.cross_entropy(flat, &targets, smoothing)
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    grams: GramConfig,
    params: ParamStore,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayerParams>,
    decoder: Vec<DecoderLayerParams>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Model {
    /// Fresh model: Xavier-uniform matrices, zero biases, unit LayerNorm gains,
    /// `N(0, d_model^-1/2)` embeddings.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grams = config.grams()?;
        let d = config.d_model;
        let dh = config.head_dim()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let std = (d as f64).powf(-0.5);
        let src_embed = p.insert("src_embed", normal(&mut rng, &[config.src_vocab_size, d], std))?;
        let tgt_embed = p.insert("tgt_embed", normal(&mut rng, &[config.tgt_vocab_size, d], std))?;
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let pre = format!("enc.{l}");
            encoder.push(EncoderLayerParams {
                attn: AttentionParams::register(&mut p, &format!("{pre}.attn"), d, config.heads, &mut rng)?,
                phrase: LstmBank::register(
                    &mut p,
                    &format!("{pre}.phrase"),
                    &grams,
                    dh,
                    config.share_lstm_across_heads,
                    &mut rng,
                )?,
                norm1: LayerNormParams::register(&mut p, &format!("{pre}.norm1"), d)?,
                ffn: FfnParams::register(&mut p, &format!("{pre}.ffn"), d, config.ffn_dim, &mut rng)?,
                norm2: LayerNormParams::register(&mut p, &format!("{pre}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let pre = format!("dec.{l}");
            decoder.push(DecoderLayerParams {
                self_attn: AttentionParams::register(&mut p, &format!("{pre}.self_attn"), d, config.heads, &mut rng)?,
                norm1: LayerNormParams::register(&mut p, &format!("{pre}.norm1"), d)?,
                cross_attn: AttentionParams::register(&mut p, &format!("{pre}.cross_attn"), d, config.heads, &mut rng)?,
                norm2: LayerNormParams::register(&mut p, &format!("{pre}.norm2"), d)?,
                ffn: FfnParams::register(&mut p, &format!("{pre}.ffn"), d, config.ffn_dim, &mut rng)?,
                norm3: LayerNormParams::register(&mut p, &format!("{pre}.norm3"), d)?,
            });
        }
        let out_w = p.insert("out.w", xavier_uniform(&mut rng, d, config.tgt_vocab_size))?;
        let out_b = p.insert("out.b", Tensor::zeros(&[config.tgt_vocab_size]))?;
        Ok(Model { config, grams, params: p, src_embed, tgt_embed, encoder, decoder, out_w, out_b })
    }

    /// Model with the given parameter values; names and shapes must match `config` exactly.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::CheckpointMismatch {
                name: "<all>".into(),
                reason: format!("{} tensors supplied, model has {}", tensors.len(), model.params.len()),
            });
        }
        for (name, t) in tensors {
            let id = model.params.id(&name).ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                reason: "not a parameter of this configuration".into(),
            })?;
            let p = model.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::CheckpointMismatch {
                    name,
                    reason: format!("shape {:?} vs expected {:?}", t.shape(), p.value.shape()),
                });
            }
            p.value = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grams(&self) -> &GramConfig {
        &self.grams
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_layers(&self) -> &[EncoderLayerParams] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayerParams] {
        &self.decoder
    }

    pub fn src_embedding(&self) -> ParamId {
        self.src_embed
    }

    pub fn tgt_embedding(&self) -> ParamId {
        self.tgt_embed
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Parameter values in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    fn embed(&self, g: &mut Graph, table: ParamId, batch: &TokenBatch) -> Result<Var> {
        let (b, s, d) = (batch.batch_size(), batch.width, self.config.d_model);
        if s > self.config.max_len {
            return Err(Error::Invalid(format!("sequence length {s} exceeds max_len {}", self.config.max_len)));
        }
        let t = g.param(&self.params, table);
        let e = g.embedding(t, &batch.ids)?;
        let e = g.reshape(e, &[b, s, d])?;
        let e = g.scale(e, (d as f64).sqrt());
        let pos = sinusoidal_positions(s, d)?;
        let mut tiled = Vec::with_capacity(b * s * d);
        for _ in 0..b {
            tiled.extend_from_slice(pos.data());
        }
        let pos = g.input(Tensor::new(vec![b, s, d], tiled)?);
        let x = g.add(e, pos)?;
        g.dropout(x, self.config.dropout)
    }

    /// One encoder layer over `x[B, S, d]`.
    pub fn encoder_layer(&self, g: &mut Graph, layer: &EncoderLayerParams, x: Var, mask: &Mask) -> Result<Var> {
        let eps = self.config.layer_norm_eps;
        let h = phrase_multi_head_attention(g, &self.params, x, &layer.attn, &layer.phrase, &self.grams, mask)?;
        let h = g.dropout(h, self.config.dropout)?;
        let h = g.add(h, x)?;
        let h_no = layer.norm1.apply(g, &self.params, h, eps)?;
        let f = layer.ffn.apply(g, &self.params, h_no)?;
        let f = g.dropout(f, self.config.dropout)?;
        let f = g.add(f, h_no)?;
        layer.norm2.apply(g, &self.params, f, eps)
    }

    /// Encoder memory `[B, S, d]` for a padded source batch.
    pub fn encode(&self, g: &mut Graph, src: &TokenBatch) -> Result<Var> {
        let mut x = self.embed(g, self.src_embed, src)?;
        let mask = attention_mask(&src.lens, src.width, src.width, false);
        for layer in &self.encoder {
            x = self.encoder_layer(g, layer, x, &mask)?;
        }
        Ok(x)
    }

    /// Output logits `[B, T, V]` for decoder inputs `tgt_in` attending to `memory`.
    pub fn decode(&self, g: &mut Graph, tgt_in: &TokenBatch, memory: Var, src_lens: &[usize]) -> Result<Var> {
        let eps = self.config.layer_norm_eps;
        let t = tgt_in.width;
        let s = g.shape(memory)[1];
        if src_lens.len() != tgt_in.batch_size() {
            return Err(Error::shape(
                "decode",
                "src_lens",
                src_lens.len().to_string(),
                tgt_in.batch_size().to_string(),
            ));
        }
        let self_mask = attention_mask(&tgt_in.lens, t, t, true);
        let cross_mask = attention_mask(src_lens, t, s, false);
        let mut x = self.embed(g, self.tgt_embed, tgt_in)?;
        for layer in &self.decoder {
            let a = multi_head_attention(g, &self.params, &layer.self_attn, x, x, &self_mask)?;
            let a = g.dropout(a, self.config.dropout)?;
            let a = g.add(a, x)?;
            let x1 = layer.norm1.apply(g, &self.params, a, eps)?;
            let c = multi_head_attention(g, &self.params, &layer.cross_attn, x1, memory, &cross_mask)?;
            let c = g.dropout(c, self.config.dropout)?;
            let c = g.add(c, x1)?;
            let x2 = layer.norm2.apply(g, &self.params, c, eps)?;
            let f = layer.ffn.apply(g, &self.params, x2)?;
            let f = g.dropout(f, self.config.dropout)?;
            let f = g.add(f, x2)?;
            x = layer.norm3.apply(g, &self.params, f, eps)?;
        }
        let w = g.param(&self.params, self.out_w);
        let b = g.param(&self.params, self.out_b);
        let logits = g.matmul(x, w)?;
        g.add_bias(logits, b)
    }

    /// Mean smoothed NLL over the non-pad target tokens of `batch`.
    pub fn loss(&self, g: &mut Graph, batch: &TrainingBatch, smoothing: f64) -> Result<Var> {
        let memory = self.encode(g, &batch.src)?;
        let logits = self.decode(g, &batch.tgt_in, memory, &batch.src.lens)?;
        let rows = batch.tgt_in.padded_tokens();
        let flat = g.reshape(logits, &[rows, self.config.tgt_vocab_size])?;
        g.cross_entropy(flat, &batch.targets, smoothing)
    }

    /// Per-sentence mean NLL (no graph kept), aligned with the batch order.
    pub fn sentence_losses(&self, batch: &TrainingBatch, smoothing: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let memory = self.encode(&mut g, &batch.src)?;
        let logits = self.decode(&mut g, &batch.tgt_in, memory, &batch.src.lens)?;
        let t = batch.tgt_in.width;
        let v = self.config.tgt_vocab_size;
        let values = g.value(logits).clone();
        let mut out = Vec::with_capacity(batch.src.batch_size());
        for b in 0..batch.src.batch_size() {
            let mut lg = Graph::new();
            let rows = lg.input(Tensor::new(vec![t, v], values.data()[b * t * v..(b + 1) * t * v].to_vec())?);
            let loss = lg.cross_entropy(rows, &batch.targets[b * t..(b + 1) * t], smoothing)?;
            out.push(lg.value(loss).data()[0]);
        }
        Ok(out)
    }

    /// Teacher-forced next-token accuracy: `(correct, total)` over non-pad targets.
    pub fn token_accuracy(&self, batch: &TrainingBatch) -> Result<(usize, usize)> {
        let mut g = Graph::new();
        let memory = self.encode(&mut g, &batch.src)?;
        let logits = self.decode(&mut g, &batch.tgt_in, memory, &batch.src.lens)?;
        let lv = g.value(logits);
        let mut correct = 0;
        let mut total = 0;
        for (r, tgt) in batch.targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            total += 1;
            if argmax(lv.row(r)) == tgt {
                correct += 1;
            }
        }
        Ok((correct, total))
    }

    /// Encoder output `[S, d]` for one source sentence (ids used as given).
    pub fn encode_sentence(&self, src_ids: &[usize]) -> Result<Tensor> {
        let batch = TokenBatch::new(&[src_ids.to_vec()])?;
        let mut g = Graph::new();
        let m = self.encode(&mut g, &batch)?;
        g.value(m).clone().reshaped(vec![src_ids.len(), self.config.d_model])
    }

    /// Logits `[T, V]` for a target prefix (starting with `<s>`) given encoder output `[S, d]`.
    pub fn decode_sentence(&self, prefix: &[usize], memory: &Tensor) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(Error::Invalid("decode needs a non-empty prefix".into()));
        }
        let s = memory.shape()[0];
        let batch = TokenBatch::new(&[prefix.to_vec()])?;
        let mut g = Graph::new();
        let mem = g.input(memory.clone().reshaped(vec![1, s, self.config.d_model])?);
        let logits = self.decode(&mut g, &batch, mem, &[s])?;
        g.value(logits).clone().reshaped(vec![prefix.len(), self.config.tgt_vocab_size])
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
