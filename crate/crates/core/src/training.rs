//! The four fine-tuning modes as one training loop.
//!
//! Preparation follows a fixed order: preprocess the corpus, build the
//! tokenizer and model, add missing label-word tokens and grow the embedding
//! matrices to match, resolve the template and verbalizer, build the loader,
//! and inject adapters when the mode asks for them. Each epoch then runs
//! forward, cross-entropy over class scores, backward and an Adam step on the
//! trainable tensors, followed by validation.
//!
//! Prompt modes score classes by projecting the `[MASK]`-position vocabulary
//! logits through the verbalizer; the other modes use a linear classifier on
//! the first position.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::accounting::format_ratio;
use crate::adapter::{inject_adapters, trainable_parameters, AdapterMode};
use crate::data::{encode_examples, CorpusSplits, Loader};
use crate::encoder::{catalog_entry, EncoderConfig, EncoderModel, HeadKind, ModelFamily};
use crate::error::{invalid, Error, Result};
use crate::metrics::{accuracy, macro_f1};
use crate::prompt::{classify, ResolvedVerbalizer, Template, Verbalizer, WrappedInput};
use crate::scenario::{default_batch_size, default_lr, Mode, ScenarioName, DEFAULT_EPOCHS, DEFAULT_MAX_LEN, DEFAULT_RANK};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::vocab::{preprocess_symbols, Tokenizer, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub rank: usize,
    pub seed: u64,
}

/// Encoder dimensions to train with. The vocabulary size always comes from
/// the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelShape {
    /// L=2, d=32, d_ff=64, 2 heads.
    Desk,
    Catalog(String),
    Custom {
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub family: ModelFamily,
    pub shape: ModelShape,
    pub mode: Mode,
    pub hyper: Hyperparams,
}

impl Scenario {
    /// Scenario with the published defaults for its abbreviation.
    pub fn from_name(name: &ScenarioName) -> Self {
        Self {
            name: name.abbreviation.clone(),
            family: name.family,
            shape: if name.desk {
                ModelShape::Desk
            } else {
                ModelShape::Catalog(name.model_key.clone())
            },
            mode: name.mode,
            hyper: Hyperparams {
                lr: name.default_lr(),
                batch_size: name.default_batch_size(),
                epochs: DEFAULT_EPOCHS,
                max_len: DEFAULT_MAX_LEN,
                rank: DEFAULT_RANK,
                seed: 0,
            },
        }
    }

    /// Desk-scale scenario for `family` and `mode` with published defaults.
    pub fn desk(family: ModelFamily, mode: Mode) -> Self {
        let key = match family {
            ModelFamily::Cino => "cino-base",
            ModelFamily::Tibert => "tibert",
            ModelFamily::TibetanBert => "tibetan-bert",
        };
        let mut s = Self::from_name(&ScenarioName::new(key, mode, true).expect("catalog key"));
        s.hyper.batch_size = default_batch_size(key, mode);
        s.hyper.lr = default_lr(family, mode);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        if !(h.lr > 0.0) || !h.lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {}", h.lr)));
        }
        if h.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if h.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.mode.uses_adapters() && h.rank == 0 {
            return Err(invalid("adapter modes need rank >= 1"));
        }
        if let ModelShape::Catalog(key) = &self.shape {
            if catalog_entry(key).is_none() {
                return Err(invalid(format!("unknown model `{key}`")));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let max_len = self.hyper.max_len;
        let cfg = match &self.shape {
            ModelShape::Desk => EncoderConfig::desk(vocab_size, max_len),
            ModelShape::Catalog(key) => {
                let mut cfg = catalog_entry(key)
                    .ok_or_else(|| invalid(format!("unknown model `{key}`")))?
                    .config;
                cfg.vocab_size = vocab_size;
                cfg.max_len = max_len;
                cfg
            }
            ModelShape::Custom {
                n_layers,
                d_model,
                d_ff,
                n_heads,
            } => EncoderConfig {
                n_layers: *n_layers,
                d_model: *d_model,
                d_ff: *d_ff,
                n_heads: *n_heads,
                vocab_size,
                max_len,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Template and verbalizer for prompt modes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    pub template: Template,
    pub verbalizer: Verbalizer,
}

pub const DEFAULT_TEMPLATE: &str = "News Classification: {mask} {text}";

impl PromptSpec {
    /// [`DEFAULT_TEMPLATE`] with each label's lower-cased name as its label
    /// word.
    pub fn default_for(label_names: &[String]) -> Result<Self> {
        Self::with_template(DEFAULT_TEMPLATE, label_names)
    }

    pub fn with_template(template: &str, label_names: &[String]) -> Result<Self> {
        let entries = label_names
            .iter()
            .map(|l| (l.clone(), vec![l.to_lowercase()]))
            .collect();
        Ok(Self {
            template: Template::parse(template)?,
            verbalizer: Verbalizer::new(entries)?,
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-tensor first and second moments, allocated on first update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f32], &[f32])> {
        self.moments
            .get(id.index())
            .and_then(Option::as_ref)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every `requires_grad` tensor from its
/// accumulated gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.get(id).requires_grad() && store.get(id).grad().is_some())
        .collect();
    for &id in &ids {
        if store.get(id).grad().unwrap().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in ids {
        let tensor = store.get_mut(id);
        let n = tensor.len();
        let (m, v) = state.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::Shape {
                op: "adam moments",
                lhs: vec![m.len()],
                rhs: vec![n],
            });
        }
        let grad = tensor.grad().unwrap().to_vec();
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Class scores `[1 × n_classes]` for one input. Padding is trimmed first;
/// since padded keys are masked out this does not change any kept position.
pub fn class_scores<T: Scalar>(
    model: &EncoderModel,
    tape: &mut Tape<'_, T>,
    input: &WrappedInput,
    verbalizer: Option<&ResolvedVerbalizer>,
) -> Result<Var> {
    let n = input.content_len();
    let hidden = model.forward_hidden(tape, &input.ids[..n], &input.pad_mask[..n])?;
    match (verbalizer, input.mask_pos) {
        (Some(verb), Some(pos)) => {
            let logits = model.mlm_logits(tape, hidden, &[pos])?;
            verb.project_on_tape(tape, logits)
        }
        (None, _) => model.classifier_logits(tape, hidden),
        (Some(_), None) => Err(invalid("prompt scoring needs an input with a [MASK] position")),
    }
}

/// Mean cross-entropy over a batch.
pub fn batch_loss<T: Scalar>(
    model: &EncoderModel,
    tape: &mut Tape<'_, T>,
    inputs: &[&WrappedInput],
    verbalizer: Option<&ResolvedVerbalizer>,
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(invalid("empty batch"));
    }
    let rows = inputs
        .iter()
        .map(|inp| class_scores(model, tape, inp, verbalizer))
        .collect::<Result<Vec<_>>>()?;
    let scores = tape.concat_rows(&rows)?;
    let labels: Vec<usize> = inputs.iter().map(|i| i.label).collect();
    tape.cross_entropy(scores, &labels)
}

/// Forward, backward and one Adam update on `inputs`; returns the batch loss.
pub fn train_step(
    model: &mut EncoderModel,
    adam: &mut AdamState,
    inputs: &[&WrappedInput],
    verbalizer: Option<&ResolvedVerbalizer>,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new(model.params());
        let loss = batch_loss(model, &mut tape, inputs, verbalizer)?;
        (tape.value(loss)[0] as f64, tape.backward(loss)?)
    };
    let store = model.params_mut();
    store.zero_grads();
    store.accumulate(&grads)?;
    adam_step(store, adam, lr)?;
    store.zero_grads();
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub predictions: Vec<usize>,
}

/// Number of worker threads: `PEFTT_THREADS` if set, else the machine's.
pub fn worker_threads() -> usize {
    std::env::var("PEFTT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Classifies every input without recording gradients.
pub fn predict(model: &EncoderModel, inputs: &[WrappedInput], verbalizer: Option<&ResolvedVerbalizer>) -> Result<Vec<usize>> {
    let one = |inp: &WrappedInput| -> Result<usize> {
        let mut tape = Tape::inference(model.params());
        let s = class_scores(model, &mut tape, inp, verbalizer)?;
        Ok(classify(tape.value(s)))
    };
    let threads = worker_threads().min(inputs.len().div_ceil(32)).max(1);
    if threads == 1 {
        return inputs.iter().map(one).collect();
    }
    let chunk = inputs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(inputs.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate(
    model: &EncoderModel,
    inputs: &[WrappedInput],
    verbalizer: Option<&ResolvedVerbalizer>,
    n_classes: usize,
) -> Result<Evaluation> {
    if inputs.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let predictions = predict(model, inputs, verbalizer)?;
    let golds: Vec<usize> = inputs.iter().map(|i| i.label).collect();
    Ok(Evaluation {
        accuracy: accuracy(&predictions, &golds)?,
        macro_f1: macro_f1(&predictions, &golds, n_classes)?,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scenario: String,
    pub mode: Mode,
    pub hyper: Hyperparams,
    pub config: EncoderConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    pub test_acc: f64,
    pub test_macro_f1: f64,
    pub trainable_parameters: u64,
    /// Scalars of the model without adapters.
    pub base_parameters: u64,
    pub trainable_ratio: f64,
    pub ratio_display: String,
    pub vocab_size_before: usize,
    pub added_tokens: Vec<String>,
    pub added_token_ids: Vec<u32>,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "Situation",
    "Training Parameters",
    "dev acc",
    "dev macro-F1",
    "test acc",
    "test macro-F1",
    "Training Parameters Ratio",
];

impl TrainReport {
    pub fn table_row(&self) -> [String; 7] {
        [
            self.scenario.clone(),
            self.trainable_parameters.to_string(),
            format!("{:.5}", self.val_acc),
            format!("{:.5}", self.val_macro_f1),
            format!("{:.5}", self.test_acc),
            format!("{:.5}", self.test_macro_f1),
            self.ratio_display.clone(),
        ]
    }

    /// Summary row in the published column layout, then per-epoch lines.
    pub fn to_table(&self) -> String {
        let mut out = render_rows(&[self.table_row()]);
        out.push('\n');
        writeln!(out, "epoch  loss      val acc   val macro-F1").unwrap();
        for e in &self.epochs {
            let best = if e.epoch == self.best_epoch { "  *" } else { "" };
            writeln!(
                out,
                "{:<5}  {:<8.5}  {:<8.5}  {:.5}{best}",
                e.epoch, e.loss, e.val_acc, e.val_macro_f1
            )
            .unwrap();
        }
        out
    }
}

/// Aligned table with [`REPORT_COLUMNS`] headers.
pub fn render_rows(rows: &[[String; 7]]) -> String {
    let mut widths = REPORT_COLUMNS.map(str::len);
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let s: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(s.join("  ").trim_end());
        out.push('\n');
    };
    line(REPORT_COLUMNS.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

/// Copies of the trainable tensors.
type Snapshot = Vec<(ParamId, Vec<f32>)>;

/// A prepared run: model, tokenizer and encoded splits.
#[derive(Clone, Debug)]
pub struct Trainer {
    scenario: Scenario,
    model: EncoderModel,
    tokenizer: Tokenizer,
    prompt: Option<PromptSpec>,
    verbalizer: Option<ResolvedVerbalizer>,
    label_names: Vec<String>,
    vocab_size_before: usize,
    added_tokens: Vec<String>,
    added_token_ids: Vec<u32>,
    loader: Loader,
    validation: Vec<WrappedInput>,
    test: Vec<WrappedInput>,
    adam: AdamState,
}

fn clean(splits: &CorpusSplits) -> CorpusSplits {
    let fix = |v: &[crate::data::Example]| {
        v.iter()
            .map(|e| crate::data::Example {
                text: preprocess_symbols(&e.text),
                label: e.label,
            })
            .filter(|e| !e.text.is_empty())
            .collect()
    };
    CorpusSplits {
        train: fix(&splits.train),
        validation: fix(&splits.validation),
        test: fix(&splits.test),
        label_names: splits.label_names.clone(),
    }
}

impl Trainer {
    /// Everything up to the epoch loop.
    pub fn prepare(scenario: &Scenario, corpus: &CorpusSplits, prompt: Option<&PromptSpec>) -> Result<Self> {
        scenario.validate()?;
        let corpus = clean(corpus);
        if corpus.train.is_empty() {
            return Err(invalid("training split is empty"));
        }
        if corpus.validation.is_empty() {
            return Err(invalid("validation split is empty"));
        }
        let n_classes = corpus.n_classes();
        if n_classes < 2 {
            return Err(invalid("at least two classes are required"));
        }
        let prompt = match (scenario.mode.uses_prompt(), prompt) {
            (true, None) => return Err(invalid(format!("{} mode needs a template and verbalizer", scenario.mode))),
            (true, Some(p)) => Some(p.clone()),
            (false, _) => None,
        };

        let mut texts: Vec<&str> = corpus.train.iter().map(|e| e.text.as_str()).collect();
        let literal = prompt.as_ref().map(|p| p.template.literal_text());
        if let Some(l) = &literal {
            texts.push(l);
        }
        let mut vocab = Vocabulary::from_texts(texts);
        let vocab_size_before = vocab.len();

        let hyper = &scenario.hyper;
        let head = if prompt.is_some() {
            HeadKind::Mlm { tied: false }
        } else {
            HeadKind::Classifier { n_classes }
        };
        let mut model = EncoderModel::new(scenario.encoder_config(vocab_size_before)?, head, hyper.seed)?;

        let (added_tokens, added_token_ids) = match &prompt {
            Some(p) => {
                let missing = p.verbalizer.missing_tokens(&vocab);
                let ids = vocab.add_tokens(&missing)?;
                (missing, ids)
            }
            None => (Vec::new(), Vec::new()),
        };
        model.resize_embeddings(vocab.len(), hyper.seed.wrapping_add(1))?;
        let tokenizer = Tokenizer::new(vocab);

        let verbalizer = match &prompt {
            Some(p) => Some(p.verbalizer.resolve(&tokenizer, &corpus.label_names)?),
            None => None,
        };
        let template = prompt.as_ref().map(|p| &p.template);
        let train = encode_examples(&corpus.train, template, &tokenizer, hyper.max_len)?;
        let loader = Loader::new(train, hyper.batch_size, hyper.seed.wrapping_add(3))?;
        let validation = encode_examples(&corpus.validation, template, &tokenizer, hyper.max_len)?;
        let test = encode_examples(&corpus.test, template, &tokenizer, hyper.max_len)?;

        if scenario.mode.uses_adapters() {
            inject_adapters(&mut model, hyper.rank, AdapterMode::ParallelLora, hyper.seed.wrapping_add(2))?;
        }

        Ok(Self {
            scenario: scenario.clone(),
            model,
            tokenizer,
            prompt,
            verbalizer,
            label_names: corpus.label_names.clone(),
            vocab_size_before,
            added_tokens,
            added_token_ids,
            loader,
            validation,
            test,
            adam: AdamState::new(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut EncoderModel {
        &mut self.model
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn prompt(&self) -> Option<&PromptSpec> {
        self.prompt.as_ref()
    }

    pub fn verbalizer(&self) -> Option<&ResolvedVerbalizer> {
        self.verbalizer.as_ref()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn added_tokens(&self) -> &[String] {
        &self.added_tokens
    }

    pub fn added_token_ids(&self) -> &[u32] {
        &self.added_token_ids
    }

    pub fn vocab_size_before(&self) -> usize {
        self.vocab_size_before
    }

    pub fn loader(&self) -> &Loader {
        &self.loader
    }

    pub fn validation(&self) -> &[WrappedInput] {
        &self.validation
    }

    pub fn test(&self) -> &[WrappedInput] {
        &self.test
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// One optimizer step on batch `index` of `epoch`.
    pub fn step(&mut self, epoch: usize, index: usize) -> Result<f64> {
        let batches = self.loader.epoch(epoch);
        let batch = batches
            .get(index % batches.len())
            .ok_or_else(|| invalid("empty loader"))?;
        train_step(&mut self.model, &mut self.adam, &batch.inputs, self.verbalizer.as_ref(), self.scenario.hyper.lr)
    }

    /// One pass over the training split; returns the mean batch loss.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let lr = self.scenario.hyper.lr;
        let batches = self.loader.epoch(epoch);
        let mut total = 0.0;
        for batch in &batches {
            total += train_step(&mut self.model, &mut self.adam, &batch.inputs, self.verbalizer.as_ref(), lr)?;
        }
        Ok(total / batches.len() as f64)
    }

    pub fn evaluate(&self, inputs: &[WrappedInput]) -> Result<Evaluation> {
        evaluate(&self.model, inputs, self.verbalizer.as_ref(), self.label_names.len())
    }

    fn trainable_snapshot(&self) -> Snapshot {
        let (ids, _) = trainable_parameters(&self.model);
        ids.into_iter()
            .map(|id| (id, self.model.params().get(id).data().to_vec()))
            .collect()
    }

    /// Trains for the configured number of epochs, keeps the weights of the
    /// epoch with the best validation macro-F1 (earliest on ties) and reports
    /// test metrics for them.
    pub fn fit(&mut self) -> Result<TrainReport> {
        self.fit_observed(|_| {})
    }

    pub fn fit_observed(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainReport> {
        let mut records = Vec::with_capacity(self.scenario.hyper.epochs);
        let mut best: Option<(usize, f64, f64, Snapshot)> = None;
        for epoch in 0..self.scenario.hyper.epochs {
            let loss = self.train_epoch(epoch)?;
            let val = self.evaluate(&self.validation)?;
            let record = EpochRecord {
                epoch: epoch + 1,
                loss,
                val_acc: val.accuracy,
                val_macro_f1: val.macro_f1,
            };
            on_epoch(&record);
            if best.as_ref().is_none_or(|b| val.macro_f1 > b.2) {
                best = Some((epoch + 1, val.accuracy, val.macro_f1, self.trainable_snapshot()));
            }
            records.push(record);
        }
        let (best_epoch, val_acc, val_macro_f1, snapshot) = best.expect("at least one epoch");
        for (id, data) in snapshot {
            self.model.params_mut().get_mut(id).data_mut().copy_from_slice(&data);
        }
        let test = if self.test.is_empty() {
            None
        } else {
            Some(self.evaluate(&self.test)?)
        };
        let (_, trainable) = trainable_parameters(&self.model);
        let base = self.base_parameters();
        let ratio = trainable as f64 / base as f64;
        Ok(TrainReport {
            scenario: self.scenario.name.clone(),
            mode: self.scenario.mode,
            hyper: self.scenario.hyper.clone(),
            config: *self.model.config(),
            epochs: records,
            best_epoch,
            val_acc,
            val_macro_f1,
            test_acc: test.as_ref().map_or(0.0, |t| t.accuracy),
            test_macro_f1: test.as_ref().map_or(0.0, |t| t.macro_f1),
            trainable_parameters: trainable,
            base_parameters: base,
            trainable_ratio: ratio,
            ratio_display: format_ratio(ratio),
            vocab_size_before: self.vocab_size_before,
            added_tokens: self.added_tokens.clone(),
            added_token_ids: self.added_token_ids.clone(),
        })
    }

    pub fn base_parameters(&self) -> u64 {
        self.model
            .base_parameter_ids()
            .iter()
            .map(|&id| self.model.params().get(id).len() as u64)
            .sum()
    }
}

/// Prepares and trains one scenario.
pub fn run_training(scenario: &Scenario, corpus: &CorpusSplits, prompt: Option<&PromptSpec>) -> Result<TrainReport> {
    Trainer::prepare(scenario, corpus, prompt)?.fit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_splits, SyntheticSpec};
    use crate::tensor::Tensor;

    fn corpus(n: usize) -> CorpusSplits {
        synthetic_splits(4, n, &SyntheticSpec::default(), 5).unwrap()
    }

    fn desk(mode: Mode, epochs: usize, lr: f64) -> Scenario {
        let mut s = Scenario::desk(ModelFamily::TibetanBert, mode);
        s.hyper.epochs = epochs;
        s.hyper.lr = lr;
        s.hyper.seed = 3;
        s
    }

    #[test]
    fn adam_closed_form_first_steps() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap().with_requires_grad(true)).unwrap();
        let mut state = AdamState::new();
        for k in 1..=3 {
            store.get_mut(id).accumulate_grad(&[1.0]).unwrap();
            adam_step(&mut store, &mut state, 0.1).unwrap();
            store.zero_grads();
            // with a constant gradient the bias-corrected ratio is 1 / (1 + eps)
            let expected = -0.1 * k as f64 / (1.0 + 1e-8);
            assert!((store.get(id).data()[0] as f64 - expected).abs() < 1e-6);
        }
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn adam_zero_gradient_and_frozen_tensors() {
        let mut store = ParamStore::<f32>::new();
        let a = store.insert("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_requires_grad(true)).unwrap();
        let b = store.insert("b", Tensor::new(vec![1], vec![5.0]).unwrap()).unwrap();
        store.get_mut(a).accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut state = AdamState::new();
        adam_step(&mut store, &mut state, 0.5).unwrap();
        assert_eq!(store.get(a).data(), &[1.0, -2.0]);
        assert_eq!(store.get(b).data(), &[5.0]);
        assert_eq!(state.moments(a).unwrap().0.len(), 2);
        assert!(state.moments(b).is_none());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut store = ParamStore::<f32>::new();
        let a = store.insert("layers.0.bias", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true)).unwrap();
        store.get_mut(a).accumulate_grad(&[f32::NAN, 0.0]).unwrap();
        let err = adam_step(&mut store, &mut AdamState::new(), 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "layers.0.bias"));
        assert_eq!(store.get(a).data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let a = store.insert("a", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap().with_requires_grad(true)).unwrap();
            let mut state = AdamState::new();
            for g in [[0.5, -1.0, 2.0], [0.1, 0.1, -0.3]] {
                store.get_mut(a).accumulate_grad(&g).unwrap();
                adam_step(&mut store, &mut state, 0.01).unwrap();
                store.zero_grads();
            }
            (store.get(a).data().to_vec(), state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_examples() {
        let c = corpus(10);
        let s = desk(Mode::Full, 1, 1e-3);
        let t = Trainer::prepare(&s, &c, None).unwrap();
        let a = t.evaluate(t.validation()).unwrap();
        let b = t.evaluate(t.validation()).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.accuracy));

        let golds = [0usize, 0, 1, 1];
        let preds = [0usize; 4];
        assert_eq!(accuracy(&preds, &golds).unwrap(), 0.5);
        assert!((macro_f1(&preds, &golds, 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(evaluate(t.model(), &[], None, 4).is_err());
    }

    #[test]
    fn configuration_errors() {
        let c = corpus(10);
        assert!(Trainer::prepare(&desk(Mode::Prompt, 1, 1e-3), &c, None).is_err());
        assert!(Trainer::prepare(&desk(Mode::Full, 0, 1e-3), &c, None).is_err());
        assert!(Trainer::prepare(&desk(Mode::Full, 1, 0.0), &c, None).is_err());
        let mut s = desk(Mode::Adapter, 1, 1e-3);
        s.hyper.rank = 0;
        assert!(Trainer::prepare(&s, &c, None).is_err());
        let empty = CorpusSplits {
            train: vec![],
            ..c.clone()
        };
        assert!(Trainer::prepare(&desk(Mode::Full, 1, 1e-3), &empty, None).is_err());
    }

    #[test]
    fn one_epoch_gives_one_record_and_freezes_base() {
        let c = corpus(10);
        let mut t = Trainer::prepare(&desk(Mode::Adapter, 1, 1e-2), &c, None).unwrap();
        let base: Vec<(ParamId, Vec<f32>)> = t
            .model()
            .base_parameter_ids()
            .into_iter()
            .map(|id| (id, t.model().params().get(id).data().to_vec()))
            .collect();
        let report = t.fit().unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.best_epoch, 1);
        for (id, data) in base {
            assert_eq!(t.model().params().get(id).data(), data.as_slice());
        }
        assert_eq!(report.trainable_parameters, crate::accounting::adapter_count(&report.config, 8));
    }

    #[test]
    fn full_mode_counts_every_parameter() {
        let c = corpus(10);
        let mut t = Trainer::prepare(&desk(Mode::Full, 1, 1e-3), &c, None).unwrap();
        let report = t.fit().unwrap();
        let expected = crate::encoder::count_parameters(&report.config, HeadKind::Classifier { n_classes: 4 });
        assert_eq!(report.trainable_parameters, expected);
        assert_eq!(report.ratio_display, "1");
    }

    #[test]
    fn adapter_prompt_matches_prompt_at_init() {
        let c = corpus(10);
        let p = PromptSpec::default_for(&c.label_names).unwrap();
        let plain = Trainer::prepare(&desk(Mode::Prompt, 1, 1e-3), &c, Some(&p)).unwrap();
        let adapted = Trainer::prepare(&desk(Mode::AdapterPrompt, 1, 1e-3), &c, Some(&p)).unwrap();
        for inp in plain.validation() {
            let score = |t: &Trainer| {
                let mut tape = Tape::inference(t.model().params());
                let v = class_scores(t.model(), &mut tape, inp, t.verbalizer()).unwrap();
                tape.value(v).to_vec()
            };
            assert_eq!(score(&plain), score(&adapted));
        }
    }

    #[test]
    fn loss_decreases_in_every_mode() {
        let c = corpus(20);
        let p = PromptSpec::default_for(&c.label_names).unwrap();
        for (mode, lr) in [(Mode::Full, 1e-3), (Mode::Prompt, 1e-3), (Mode::Adapter, 5e-3), (Mode::AdapterPrompt, 5e-3)] {
            let mut s = desk(mode, 5, lr);
            s.hyper.batch_size = 8;
            let report = run_training(&s, &c, Some(&p)).unwrap();
            let first = report.epochs[0].loss;
            let fifth = report.epochs[4].loss;
            assert!(fifth < first, "{mode}: {first} -> {fifth}");
        }
    }

    #[test]
    fn prompt_mode_adds_label_words() {
        let c = corpus(10);
        let p = PromptSpec::default_for(&c.label_names).unwrap();
        let t = Trainer::prepare(&desk(Mode::Prompt, 1, 1e-3), &c, Some(&p)).unwrap();
        let before = t.vocab_size_before() as u32;
        assert_eq!(t.added_token_ids(), &[before, before + 1, before + 2, before + 3]);
        assert_eq!(t.model().config().vocab_size, before as usize + 4);
        assert_eq!(t.tokenizer().vocab().len(), before as usize + 4);
    }
}
