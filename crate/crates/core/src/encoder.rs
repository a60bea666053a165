//! BERT-style post-LN transformer encoder with a masked-language-model head or
//! a first-position linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterMode, AdapterSet, InjectionSlot};
use crate::error::{invalid, Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::vocab::NUM_SPECIAL_TOKENS;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    /// Two-layer model used for desk-scale runs; `vocab_size` comes from the corpus.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            d_ff: 64,
            n_heads: 2,
            vocab_size,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(invalid(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < NUM_SPECIAL_TOKENS {
            return Err(invalid(format!(
                "vocab_size {} is smaller than the {NUM_SPECIAL_TOKENS} special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Scalars in one transformer layer.
    pub fn per_layer_parameters(&self) -> u64 {
        let d = self.d_model as u64;
        let f = self.d_ff as u64;
        let attention = 4 * (d * d + d);
        let ffn = (f * d + f) + (d * f + d);
        let norms = 2 * 2 * d;
        attention + ffn + norms
    }

    pub fn embedding_parameters(&self) -> u64 {
        (self.vocab_size as u64 + self.max_len as u64) * self.d_model as u64
    }
}

/// Output head attached to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Transform + layer-norm + vocabulary projection. With `tied`, the
    /// projection reuses the token-embedding matrix (its bias is kept).
    Mlm { tied: bool },
    /// Linear map from the first-position hidden state to class logits.
    Classifier { n_classes: usize },
}

impl HeadKind {
    pub fn parameters(&self, config: &EncoderConfig) -> u64 {
        let d = config.d_model as u64;
        let v = config.vocab_size as u64;
        match *self {
            HeadKind::Mlm { tied } => {
                let transform = d * d + d + 2 * d;
                let projection = if tied { 0 } else { v * d };
                transform + projection + v
            }
            HeadKind::Classifier { n_classes } => (n_classes as u64) * d + n_classes as u64,
        }
    }
}

/// Exact number of scalar parameters for `config` with the given head.
pub fn count_parameters(config: &EncoderConfig, head: HeadKind) -> u64 {
    config.embedding_parameters()
        + config.n_layers as u64 * config.per_layer_parameters()
        + head.parameters(config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    Cino,
    Tibert,
    TibetanBert,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CatalogEntry {
    pub key: &'static str,
    pub display_name: &'static str,
    pub family: ModelFamily,
    pub config: EncoderConfig,
    /// Hidden and feed-forward widths are not published; they are the
    /// standard values consistent with the published adapter counts.
    pub dims_inferred: bool,
}

/// The five published architectures. Layer counts and vocabulary sizes are
/// the published ones; hidden sizes are inferred.
pub fn model_catalog() -> Vec<CatalogEntry> {
    let base = |n_layers, d_model, vocab_size| EncoderConfig {
        n_layers,
        d_model,
        d_ff: 4 * d_model,
        n_heads: d_model / 64,
        vocab_size,
        max_len: 512,
    };
    vec![
        CatalogEntry {
            key: "cino-small",
            display_name: "CINO-small-v2",
            family: ModelFamily::Cino,
            config: base(6, 768, 135_359),
            dims_inferred: true,
        },
        CatalogEntry {
            key: "cino-base",
            display_name: "CINO-base-v2",
            family: ModelFamily::Cino,
            config: base(12, 768, 135_359),
            dims_inferred: true,
        },
        CatalogEntry {
            key: "cino-large",
            display_name: "CINO-large-v2",
            family: ModelFamily::Cino,
            config: base(24, 1024, 135_359),
            dims_inferred: true,
        },
        CatalogEntry {
            key: "tibert",
            display_name: "Tibert",
            family: ModelFamily::Tibert,
            config: base(12, 768, 30_005),
            dims_inferred: true,
        },
        CatalogEntry {
            key: "tibetan-bert",
            display_name: "Tibetan-bert",
            family: ModelFamily::TibetanBert,
            config: base(12, 768, 32_267),
            dims_inferred: true,
        },
    ]
}

pub fn catalog_entry(key: &str) -> Option<CatalogEntry> {
    let key = key.to_ascii_lowercase();
    model_catalog().into_iter().find(|e| e.key == key)
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attention_output: Linear,
    pub attention_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_output: Linear,
    pub ffn_norm: Norm,
}

#[derive(Clone, Debug)]
pub(crate) enum HeadParams {
    Mlm {
        transform: Linear,
        norm: Norm,
        /// `None` when tied to the token embeddings.
        decoder: Option<ParamId>,
        decoder_bias: ParamId,
    },
    Classifier(Linear),
}

/// Encoder weights plus any injected adapters.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    head_kind: HeadKind,
    params: ParamStore<f32>,
    token_embeddings: ParamId,
    position_embeddings: ParamId,
    layers: Vec<LayerParams>,
    head: HeadParams,
    adapters: Option<AdapterSet>,
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub(crate) fn normal(&mut self, shape: Vec<usize>) -> Tensor<f32> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng) as f32).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    pub(crate) fn normal_values(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal.sample(&mut self.rng) as f32).collect()
    }
}

fn trainable(t: Tensor<f32>) -> Tensor<f32> {
    t.with_requires_grad(true)
}

impl EncoderModel {
    /// Builds a freshly initialised model; every parameter starts trainable.
    pub fn new(config: EncoderConfig, head_kind: HeadKind, seed: u64) -> Result<Self> {
        config.validate()?;
        if let HeadKind::Classifier { n_classes } = head_kind {
            if n_classes < 2 {
                return Err(invalid("classifier head needs at least two classes"));
            }
        }
        let d = config.d_model;
        let f = config.d_ff;
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();

        let linear = |params: &mut ParamStore<f32>, init: &mut Init, name: &str, out: usize, inp: usize| -> Result<Linear> {
            let weight = params.insert(format!("{name}.weight"), trainable(init.normal(vec![out, inp])))?;
            let bias = params.insert(format!("{name}.bias"), trainable(Tensor::zeros(vec![out])?))?;
            Ok(Linear { weight, bias })
        };
        let norm = |params: &mut ParamStore<f32>, name: &str| -> Result<Norm> {
            let gain = params.insert(format!("{name}.gain"), trainable(Tensor::new(vec![d], vec![1.0; d])?))?;
            let bias = params.insert(format!("{name}.bias"), trainable(Tensor::zeros(vec![d])?))?;
            Ok(Norm { gain, bias })
        };

        let token_embeddings = params.insert(
            "embeddings.token",
            trainable(init.normal(vec![config.vocab_size, d])),
        )?;
        let position_embeddings = params.insert(
            "embeddings.position",
            trainable(init.normal(vec![config.max_len, d])),
        )?;

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            layers.push(LayerParams {
                query: linear(&mut params, &mut init, &format!("{p}.attention.query"), d, d)?,
                key: linear(&mut params, &mut init, &format!("{p}.attention.key"), d, d)?,
                value: linear(&mut params, &mut init, &format!("{p}.attention.value"), d, d)?,
                attention_output: linear(&mut params, &mut init, &format!("{p}.attention.output"), d, d)?,
                attention_norm: norm(&mut params, &format!("{p}.attention.norm"))?,
                ffn_in: linear(&mut params, &mut init, &format!("{p}.ffn.input"), f, d)?,
                ffn_output: linear(&mut params, &mut init, &format!("{p}.ffn.output"), d, f)?,
                ffn_norm: norm(&mut params, &format!("{p}.ffn.norm"))?,
            });
        }

        let head = match head_kind {
            HeadKind::Mlm { tied } => {
                let transform = linear(&mut params, &mut init, "head.transform", d, d)?;
                let norm = norm(&mut params, "head.norm")?;
                let decoder = if tied {
                    None
                } else {
                    Some(params.insert(
                        "head.decoder.weight",
                        trainable(init.normal(vec![config.vocab_size, d])),
                    )?)
                };
                let decoder_bias = params.insert(
                    "head.decoder.bias",
                    trainable(Tensor::zeros(vec![config.vocab_size])?),
                )?;
                HeadParams::Mlm {
                    transform,
                    norm,
                    decoder,
                    decoder_bias,
                }
            }
            HeadKind::Classifier { n_classes } => {
                HeadParams::Classifier(linear(&mut params, &mut init, "classifier", n_classes, d)?)
            }
        };

        Ok(Self {
            config,
            head_kind,
            params,
            token_embeddings,
            position_embeddings,
            layers,
            head,
            adapters: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    pub(crate) fn set_adapters(&mut self, adapters: AdapterSet) {
        self.adapters = Some(adapters);
    }

    pub fn token_embeddings(&self) -> &Tensor<f32> {
        self.params.get(self.token_embeddings)
    }

    /// Untied MLM output projection, if any.
    pub fn decoder_weights(&self) -> Option<&Tensor<f32>> {
        match &self.head {
            HeadParams::Mlm { decoder: Some(id), .. } => Some(self.params.get(*id)),
            _ => None,
        }
    }

    /// Ids of every parameter that is not part of an adapter.
    pub fn base_parameter_ids(&self) -> Vec<ParamId> {
        let adapter_ids = self
            .adapters
            .as_ref()
            .map(AdapterSet::param_ids)
            .unwrap_or_default();
        self.params.ids().filter(|id| !adapter_ids.contains(id)).collect()
    }

    /// Sets `requires_grad` on all non-adapter parameters.
    pub fn set_base_trainable(&mut self, trainable: bool) {
        for id in self.base_parameter_ids() {
            self.params.get_mut(id).set_requires_grad(trainable);
        }
    }

    fn check_input(&self, ids: &[u32], pad_mask: &[bool]) -> Result<()> {
        if ids.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if ids.len() != pad_mask.len() {
            return Err(Error::Shape {
                op: "pad_mask",
                lhs: vec![ids.len()],
                rhs: vec![pad_mask.len()],
            });
        }
        if ids.len() > self.config.max_len {
            return Err(invalid(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: bad as usize,
                size: self.config.vocab_size,
            });
        }
        if pad_mask.iter().all(|&p| p) {
            return Err(invalid("sequence has no non-padding positions"));
        }
        Ok(())
    }

    /// Final hidden states `[seq_len × d_model]`. `pad_mask[i]` marks position
    /// `i` as padding; no position attends to padding.
    pub fn forward_hidden<'s, T: Scalar>(&self, tape: &mut Tape<'s, T>, ids: &[u32], pad_mask: &[bool]) -> Result<Var> {
        self.check_input(ids, pad_mask)?;
        let n = ids.len();
        let token_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok_table = tape.param(self.token_embeddings);
        let pos_table = tape.param(self.position_embeddings);
        let tok = tape.embedding(tok_table, &token_ids)?;
        let pos = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let neg_inf = T::neg_infinity();
        let mut bias = Vec::with_capacity(n * n);
        for _ in 0..n {
            bias.extend(pad_mask.iter().map(|&p| if p { neg_inf } else { T::zero() }));
        }
        let attn_bias = tape.constant(bias, n, n)?;
        let eps = T::from_f64(LAYER_NORM_EPS);

        for (li, layer) in self.layers.iter().enumerate() {
            let q = self.linear(tape, x, &layer.query)?;
            let k = self.linear(tape, x, &layer.key)?;
            let v = self.linear(tape, x, &layer.value)?;
            let dh = self.config.head_dim();
            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let scores = tape.add(scores, attn_bias)?;
                let probs = tape.softmax_rows(scores);
                heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let attn = self.adapted_linear(tape, ctx, &layer.attention_output, li, InjectionSlot::AttentionOutput)?;
            let res = tape.add(x, attn)?;
            x = self.norm(tape, res, &layer.attention_norm, eps)?;

            let hidden = self.linear(tape, x, &layer.ffn_in)?;
            let hidden = tape.gelu(hidden);
            let ffn = self.adapted_linear(tape, hidden, &layer.ffn_output, li, InjectionSlot::FfnOutput)?;
            let res = tape.add(x, ffn)?;
            x = self.norm(tape, res, &layer.ffn_norm, eps)?;
        }
        Ok(x)
    }

    /// Vocabulary logits `[rows.len() × vocab_size]` for selected hidden rows.
    pub fn mlm_logits<'s, T: Scalar>(&self, tape: &mut Tape<'s, T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let HeadParams::Mlm {
            transform,
            norm,
            decoder,
            decoder_bias,
        } = &self.head
        else {
            return Err(invalid("model has a classifier head, not an MLM head"));
        };
        let sel = tape.select_rows(hidden, rows)?;
        let t = self.linear(tape, sel, transform)?;
        let t = tape.gelu(t);
        let t = self.norm(tape, t, norm, T::from_f64(LAYER_NORM_EPS))?;
        let w = tape.param(decoder.unwrap_or(self.token_embeddings));
        let logits = tape.matmul_nt(t, w)?;
        let b = tape.param(*decoder_bias);
        tape.add_row(logits, b)
    }

    /// Class logits `[1 × n_classes]` from the first position.
    pub fn classifier_logits<'s, T: Scalar>(&self, tape: &mut Tape<'s, T>, hidden: Var) -> Result<Var> {
        let HeadParams::Classifier(lin) = &self.head else {
            return Err(invalid("model has an MLM head, not a classifier head"));
        };
        let first = tape.select_rows(hidden, &[0])?;
        self.linear(tape, first, lin)
    }

    /// Per-position vocabulary logits `[seq_len × vocab_size]`, no gradient recording.
    pub fn forward_mlm(&self, ids: &[u32], pad_mask: &[bool]) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference(&self.params);
        let hidden = self.forward_hidden(&mut tape, ids, pad_mask)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        let logits = self.mlm_logits(&mut tape, hidden, &rows)?;
        Ok(tape.to_tensor(logits))
    }

    fn linear<'s, T: Scalar>(&self, tape: &mut Tape<'s, T>, x: Var, lin: &Linear) -> Result<Var> {
        let w = tape.param(lin.weight);
        let b = tape.param(lin.bias);
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }

    fn norm<'s, T: Scalar>(&self, tape: &mut Tape<'s, T>, x: Var, norm: &Norm, eps: T) -> Result<Var> {
        let g = tape.param(norm.gain);
        let b = tape.param(norm.bias);
        tape.layer_norm(x, g, b, eps)
    }

    fn adapted_linear<'s, T: Scalar>(
        &self,
        tape: &mut Tape<'s, T>,
        x: Var,
        lin: &Linear,
        layer: usize,
        slot: InjectionSlot,
    ) -> Result<Var> {
        let Some(set) = &self.adapters else {
            return self.linear(tape, x, lin);
        };
        let Some(pair) = set.pair_at(layer, slot) else {
            return self.linear(tape, x, lin);
        };
        let w0 = tape.param(lin.weight);
        let b0 = tape.param(lin.bias);
        let a = tape.param(pair.a);
        let b = tape.param(pair.b);
        match set.mode() {
            AdapterMode::ParallelLora => {
                let h = adapter::lora_forward(tape, x, w0, a, b)?;
                tape.add_row(h, b0)
            }
            AdapterMode::Sequential => {
                let y = tape.matmul_nt(x, w0)?;
                let y = tape.add_row(y, b0)?;
                let down = tape.matmul_nt(y, a)?;
                tape.matmul_nt(down, b)
            }
        }
    }

    /// Grows the vocabulary dimension: token embeddings and (if untied) the
    /// MLM decoder rows, drawn from normal(0, 0.02); the decoder bias gets
    /// zeros. Existing rows are preserved bitwise.
    pub fn resize_embeddings(&mut self, new_vocab_size: usize, seed: u64) -> Result<()> {
        let old = self.config.vocab_size;
        if new_vocab_size < old {
            return Err(invalid(format!(
                "cannot shrink vocabulary from {old} to {new_vocab_size}"
            )));
        }
        if new_vocab_size == old {
            return Ok(());
        }
        let extra = new_vocab_size - old;
        let d = self.config.d_model;
        let mut init = Init::new(seed);
        let grow = |t: &Tensor<f32>, rows: Vec<f32>, cols: usize| -> Result<Tensor<f32>> {
            let mut data = t.data().to_vec();
            data.extend(rows);
            let shape = if cols == 1 {
                vec![new_vocab_size]
            } else {
                vec![new_vocab_size, cols]
            };
            Ok(Tensor::new(shape, data)?.with_requires_grad(t.requires_grad()))
        };

        let tok = self.params.get(self.token_embeddings);
        let grown = grow(tok, init.normal_values(extra * d), d)?;
        *self.params.get_mut(self.token_embeddings) = grown;

        if let HeadParams::Mlm {
            decoder, decoder_bias, ..
        } = &self.head
        {
            if let Some(dec) = decoder {
                let grown = grow(self.params.get(*dec), init.normal_values(extra * d), d)?;
                *self.params.get_mut(*dec) = grown;
            }
            let grown = grow(self.params.get(*decoder_bias), vec![0.0; extra], 1)?;
            *self.params.get_mut(*decoder_bias) = grown;
        }
        self.config.vocab_size = new_vocab_size;
        Ok(())
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_layers: usize, head: HeadKind) -> EncoderModel {
        let cfg = EncoderConfig {
            n_layers,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 20,
            max_len: 12,
        };
        EncoderModel::new(cfg, head, 7).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::desk(50, 16);
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig::desk(4, 16);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn count_matches_allocation() {
        for head in [
            HeadKind::Mlm { tied: false },
            HeadKind::Mlm { tied: true },
            HeadKind::Classifier { n_classes: 5 },
        ] {
            for layers in 0..3 {
                let m = tiny(layers, head);
                assert_eq!(m.params().num_scalars() as u64, count_parameters(m.config(), head));
            }
        }
    }

    #[test]
    fn doubling_depth_adds_per_layer_count() {
        let mut cfg = EncoderConfig::desk(40, 16);
        cfg.n_layers = 3;
        let head = HeadKind::Classifier { n_classes: 4 };
        let a = count_parameters(&cfg, head);
        cfg.n_layers = 6;
        let b = count_parameters(&cfg, head);
        assert_eq!(b - a, 3 * cfg.per_layer_parameters());
    }

    #[test]
    fn catalog_values() {
        let cat = model_catalog();
        assert_eq!(cat.len(), 5);
        assert_eq!(catalog_entry("cino-large").unwrap().config.n_layers, 24);
        assert_eq!(catalog_entry("tibert").unwrap().config.vocab_size, 30_005);
        assert_eq!(catalog_entry("cino-small").unwrap().config.d_model, 768);
        assert_eq!(catalog_entry("tibetan-bert").unwrap().config.vocab_size, 32_267);
        assert!(catalog_entry("gpt").is_none());
        for e in cat {
            e.config.validate().unwrap();
        }
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = tiny(2, HeadKind::Mlm { tied: false });
        let out = m.forward_mlm(&[3, 5, 7], &[false, false, false]).unwrap();
        assert_eq!(out.shape(), &[3, 20]);
        assert!(m.forward_mlm(&[25], &[false]).is_err());
        assert!(m.forward_mlm(&[1; 13], &[false; 13]).is_err());
        assert!(m.forward_mlm(&[1, 2], &[true, true]).is_err());
    }

    #[test]
    fn zero_layers_applies_head_to_embeddings() {
        let m = tiny(0, HeadKind::Mlm { tied: false });
        let ids = [4u32, 9];
        let out = m.forward_mlm(&ids, &[false, false]).unwrap();

        // Manual: head(token + position) computed on an f64 tape.
        let store = m.params().cast::<f64>();
        let mut t = Tape::inference(&store);
        let tok = t.param(store.id("embeddings.token").unwrap());
        let pos = t.param(store.id("embeddings.position").unwrap());
        let e = t.embedding(tok, &[4, 9]).unwrap();
        let p = t.embedding(pos, &[0, 1]).unwrap();
        let x = t.add(e, p).unwrap();
        let w = t.param(store.id("head.transform.weight").unwrap());
        let b = t.param(store.id("head.transform.bias").unwrap());
        let h = t.matmul_nt(x, w).unwrap();
        let h = t.add_row(h, b).unwrap();
        let h = t.gelu(h);
        let g = t.param(store.id("head.norm.gain").unwrap());
        let nb = t.param(store.id("head.norm.bias").unwrap());
        let h = t.layer_norm(h, g, nb, LAYER_NORM_EPS).unwrap();
        let dw = t.param(store.id("head.decoder.weight").unwrap());
        let db = t.param(store.id("head.decoder.bias").unwrap());
        let l = t.matmul_nt(h, dw).unwrap();
        let l = t.add_row(l, db).unwrap();
        for (a, b) in out.data().iter().zip(t.value(l)) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pad_token_ids_do_not_affect_real_positions() {
        let m = tiny(2, HeadKind::Mlm { tied: false });
        let mask = [false, false, true, false, true];
        let a = m.forward_mlm(&[3, 4, 0, 6, 0], &mask).unwrap();
        let b = m.forward_mlm(&[3, 4, 11, 6, 17], &mask).unwrap();
        let v = 20;
        for pos in [0, 1, 3] {
            assert_eq!(&a.data()[pos * v..(pos + 1) * v], &b.data()[pos * v..(pos + 1) * v]);
        }
    }

    #[test]
    fn resize_preserves_rows() {
        let mut m = tiny(1, HeadKind::Mlm { tied: false });
        let before = m.forward_mlm(&[3, 4, 5], &[false; 3]).unwrap();
        let emb = m.token_embeddings().clone();
        let dec = m.decoder_weights().unwrap().clone();
        m.resize_embeddings(20, 1).unwrap();
        assert_eq!(m.token_embeddings(), &emb);
        m.resize_embeddings(32, 1).unwrap();
        assert_eq!(m.token_embeddings().shape(), &[32, 8]);
        assert_eq!(&m.token_embeddings().data()[..20 * 8], emb.data());
        assert_eq!(&m.decoder_weights().unwrap().data()[..20 * 8], dec.data());
        assert!(m.resize_embeddings(10, 1).is_err());
        let after = m.forward_mlm(&[3, 4, 5], &[false; 3]).unwrap();
        for row in 0..3 {
            assert_eq!(&after.data()[row * 32..row * 32 + 20], &before.data()[row * 20..(row + 1) * 20]);
        }
    }
}
