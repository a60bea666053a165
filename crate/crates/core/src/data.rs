//! Corpus loading, splitting, batching and a synthetic separable corpus.
//!
//! Records are `label_name<TAB>title`, one per line. Labels are indexed in
//! order of first appearance unless a label map (one name per line) fixes the
//! order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::prompt::{encode_plain, wrap, Template, WrappedInput};
use crate::vocab::{preprocess_symbols, Tokenizer, TSEK};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
    /// Lines whose title was empty after preprocessing.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub label_names: Vec<String>,
}

impl CorpusSplits {
    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parses TSV text. With `label_names` given, the order is fixed and unknown
/// labels are an error.
pub fn parse_tncc(source: &str, delimiter: &str, label_names: Option<&[String]>) -> Result<LoadedCorpus> {
    if delimiter.is_empty() {
        return Err(invalid("delimiter must not be empty"));
    }
    let fixed = label_names.is_some();
    let mut names: Vec<String> = label_names.map(<[String]>::to_vec).unwrap_or_default();
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, title) = line.split_once(delimiter).ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("no delimiter {delimiter:?} between label and title"),
        })?;
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty label".into(),
            });
        }
        let text = preprocess_symbols(title);
        if text.is_empty() {
            skipped += 1;
            continue;
        }
        let idx = match names.iter().position(|n| n == label) {
            Some(idx) => idx,
            None if fixed => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("label `{label}` is not in the label map"),
                })
            }
            None => {
                names.push(label.to_string());
                names.len() - 1
            }
        };
        examples.push(Example { text, label: idx });
    }
    Ok(LoadedCorpus {
        examples,
        label_names: names,
        skipped,
    })
}

pub fn load_tncc(path: &Path, delimiter: &str, label_names: Option<&[String]>) -> Result<LoadedCorpus> {
    parse_tncc(&fs::read_to_string(path)?, delimiter, label_names)
}

/// One label name per line.
pub fn load_label_map(path: &Path) -> Result<Vec<String>> {
    let names: Vec<String> = fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let unique: HashSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(invalid(format!("duplicate label in {}", path.display())));
    }
    Ok(names)
}

pub fn save_label_map(path: &Path, label_names: &[String]) -> Result<()> {
    let mut body = label_names.join("\n");
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

/// Seeded shuffle, then sizes `⌊n·r0/Σ⌋`, `⌊n·r1/Σ⌋` and the remainder.
pub fn split(examples: &[Example], ratios: [u32; 3], seed: u64, label_names: Vec<String>) -> Result<CorpusSplits> {
    if ratios.contains(&0) {
        return Err(invalid("split ratios must be positive"));
    }
    let n = examples.len();
    if n < 10 {
        return Err(invalid(format!("need at least 10 examples to split, got {n}")));
    }
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let n_train = (n as u64 * ratios[0] as u64 / total) as usize;
    let n_val = (n as u64 * ratios[1] as u64 / total) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| -> Vec<Example> {
        order[range].iter().map(|&i| examples[i].clone()).collect()
    };
    Ok(CorpusSplits {
        train: pick(0..n_train),
        validation: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..n),
        label_names,
    })
}

/// Tokenises examples with a template, or as `[CLS] text` without one.
pub fn encode_examples(
    examples: &[Example],
    template: Option<&Template>,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<Vec<WrappedInput>> {
    examples
        .iter()
        .map(|ex| match template {
            Some(t) => wrap(t, &ex.text, tokenizer, max_len, ex.label),
            None => encode_plain(&ex.text, tokenizer, max_len, ex.label),
        })
        .collect()
}

/// Mini-batch source over encoded inputs. Each epoch is a fresh permutation
/// derived from `seed + epoch`; the last partial batch is kept.
#[derive(Clone, Debug)]
pub struct Loader {
    inputs: Vec<WrappedInput>,
    batch_size: usize,
    seed: u64,
}

/// One mini-batch: borrowed inputs and their labels.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a WrappedInput>,
    pub labels: Vec<usize>,
}

impl Loader {
    pub fn new(inputs: Vec<WrappedInput>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        Ok(Self {
            inputs,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn inputs(&self) -> &[WrappedInput] {
        &self.inputs
    }

    pub fn num_batches(&self) -> usize {
        self.inputs.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Batch<'_>> {
        let mut order: Vec<usize> = (0..self.inputs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch as u64)));
        order
            .chunks(self.batch_size)
            .map(|chunk| Batch {
                inputs: chunk.iter().map(|&i| &self.inputs[i]).collect(),
                labels: chunk.iter().map(|&i| self.inputs[i].label).collect(),
            })
            .collect()
    }
}

/// Encodes `examples` and wraps them in a [`Loader`].
pub fn make_batches(
    examples: &[Example],
    template: Option<&Template>,
    tokenizer: &Tokenizer,
    max_len: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Loader> {
    Loader::new(encode_examples(examples, template, tokenizer, max_len)?, batch_size, shuffle_seed)
}

const SYNTH_LABELS: [&str; 12] = [
    "Politics",
    "Economics",
    "Education",
    "Tourism",
    "Environment",
    "Language",
    "Literature",
    "Religion",
    "Arts",
    "Medicine",
    "Customs",
    "Instruments",
];

/// Label names for a synthetic corpus: the twelve news categories for 12
/// classes, `label0..` otherwise.
pub fn synthetic_label_names(n_classes: usize) -> Vec<String> {
    if n_classes == SYNTH_LABELS.len() {
        SYNTH_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_classes).map(|i| format!("label{i}")).collect()
    }
}

/// Shape of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Distinct signal syllables reserved for each class.
    pub signal_per_class: usize,
    /// Signal syllables planted in each example.
    pub signal_per_example: usize,
    /// Shared filler syllables.
    pub filler_vocab: usize,
    /// Inclusive range of filler syllables per example.
    pub filler_len: (usize, usize),
    /// Relative class frequencies; `None` for balanced.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            signal_per_class: 1,
            signal_per_example: 8,
            filler_vocab: 120,
            filler_len: (0, 4),
            class_weights: None,
        }
    }
}

const CONSONANTS: [char; 30] = [
    'ཀ', 'ཁ', 'ག', 'ང', 'ཅ', 'ཆ', 'ཇ', 'ཉ', 'ཏ', 'ཐ', 'ད', 'ན', 'པ', 'ཕ', 'བ', 'མ', 'ཙ', 'ཚ', 'ཛ', 'ཝ', 'ཞ', 'ཟ', 'འ',
    'ཡ', 'ར', 'ལ', 'ཤ', 'ས', 'ཧ', 'ཨ',
];
const VOWELS: [&str; 5] = ["", "ི", "ུ", "ེ", "ོ"];
const FINALS: [&str; 8] = ["", "ག", "ང", "ད", "ན", "བ", "མ", "ས"];

/// The `i`-th distinct syllable (with trailing tsek).
fn syllable(i: usize) -> String {
    let c = CONSONANTS[i % CONSONANTS.len()];
    let rest = i / CONSONANTS.len();
    let v = VOWELS[rest % VOWELS.len()];
    let f = FINALS[(rest / VOWELS.len()) % FINALS.len()];
    format!("{c}{v}{f}{TSEK}")
}

const MAX_SYLLABLES: usize = CONSONANTS.len() * VOWELS.len() * FINALS.len();

/// Signal syllables of class `c`. Disjoint across classes and from filler.
pub fn signal_tokens(spec: &SyntheticSpec, class: usize) -> Vec<String> {
    (0..spec.signal_per_class)
        .map(|j| syllable(spec.filler_vocab + class * spec.signal_per_class + j))
        .collect()
}

/// `n_per_class` examples per class (scaled by `class_weights` when set),
/// each a run of shared filler syllables with signal syllables of its own
/// class planted at random positions. Titles are written without spaces, as
/// Tibetan text is.
pub fn synthesize_corpus(n_classes: usize, n_per_class: usize, spec: &SyntheticSpec, seed: u64) -> Result<Vec<Example>> {
    if n_classes < 2 {
        return Err(invalid("synthetic corpus needs at least two classes"));
    }
    if spec.signal_per_class == 0 || spec.signal_per_example == 0 {
        return Err(invalid("every example needs at least one signal token"));
    }
    if spec.filler_vocab == 0 || spec.filler_len.0 > spec.filler_len.1 {
        return Err(invalid("invalid filler settings"));
    }
    if spec.filler_vocab + n_classes * spec.signal_per_class > MAX_SYLLABLES {
        return Err(invalid(format!("at most {MAX_SYLLABLES} distinct syllables are available")));
    }
    let counts: Vec<usize> = match &spec.class_weights {
        None => vec![n_per_class; n_classes],
        Some(w) => {
            if w.len() != n_classes || w.iter().any(|&x| !(x > 0.0)) {
                return Err(invalid("class weights must be positive, one per class"));
            }
            let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
            w.iter().map(|&x| (n_per_class as f64 * x / min).round() as usize).collect()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(counts.iter().sum());
    for (class, &count) in counts.iter().enumerate() {
        let signals = signal_tokens(spec, class);
        for _ in 0..count {
            let len = rng.random_range(spec.filler_len.0..=spec.filler_len.1);
            let mut toks: Vec<String> = (0..len).map(|_| syllable(rng.random_range(0..spec.filler_vocab))).collect();
            for _ in 0..spec.signal_per_example {
                let s = signals[rng.random_range(0..signals.len())].clone();
                let at = rng.random_range(0..=toks.len());
                toks.insert(at, s);
            }
            examples.push(Example {
                text: toks.concat(),
                label: class,
            });
        }
    }
    examples.shuffle(&mut rng);
    Ok(examples)
}

/// `synthetic:CxN` corpus: N train, N/5 validation and N/5 test examples per
/// class, generated independently from one seed.
pub fn synthetic_splits(n_classes: usize, n_per_class: usize, spec: &SyntheticSpec, seed: u64) -> Result<CorpusSplits> {
    let held_out = (n_per_class / 5).max(1);
    let all = synthesize_corpus(n_classes, n_per_class + 2 * held_out, spec, seed)?;
    let mut per_class: Vec<Vec<Example>> = vec![Vec::new(); n_classes];
    for ex in all {
        per_class[ex.label].push(ex);
    }
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut exs in per_class {
        let total = exs.len();
        let n_hold = (total * held_out) / (n_per_class + 2 * held_out);
        test.extend(exs.split_off(total - n_hold));
        validation.extend(exs.split_off(total - 2 * n_hold));
        train.extend(exs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(CorpusSplits {
        train,
        validation,
        test,
        label_names: synthetic_label_names(n_classes),
    })
}

/// Parses `synthetic:CxN` into `(C, N)`.
pub fn parse_synthetic(spec: &str) -> Option<(usize, usize)> {
    let rest = spec.strip_prefix("synthetic:")?;
    let (c, n) = rest.split_once(['x', 'X'])?;
    Some((c.trim().parse().ok()?, n.trim().parse().ok()?))
}

pub fn to_tsv(examples: &[Example], label_names: &[String]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let name = label_names.get(ex.label).ok_or(Error::OutOfRange {
            what: "label",
            index: ex.label,
            size: label_names.len(),
        })?;
        out.push_str(name);
        out.push('\t');
        out.push_str(&ex.text);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_tsv(path: &Path, examples: &[Example], label_names: &[String]) -> Result<()> {
    fs::write(path, to_tsv(examples, label_names)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{tokenize, Vocabulary};
    use proptest::prelude::*;

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                text: format!("t{i}"),
                label: i % 3,
            })
            .collect()
    }

    #[test]
    fn load_examples() {
        let c = parse_tncc("Politics\t  spaced   title \n", "\t", None).unwrap();
        assert_eq!(c.examples, vec![Example { text: "spaced title".into(), label: 0 }]);
        assert_eq!(c.label_names, vec!["Politics"]);

        let src: String = (0..24).map(|i| format!("L{}\tx{i}\n", i % 12)).collect();
        let c = parse_tncc(&src, "\t", None).unwrap();
        assert_eq!(c.label_names.len(), 12);
        assert_eq!(c.examples[13].label, 1);

        let err = parse_tncc("A\tx\nno tab here\n", "\t", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));

        let c = parse_tncc("A\tx\nB\t   \nB\ty\n", "\t", None).unwrap();
        assert_eq!(c.skipped, 1);
        assert_eq!(c.examples.len(), 2);
        assert_eq!(c.examples[1].label, 1);

        let c = parse_tncc("A x y\n", " ", None).unwrap();
        assert_eq!(c.examples[0].text, "x y");
    }

    #[test]
    fn label_map_fixes_order() {
        let names = vec!["B".to_string(), "A".to_string()];
        let c = parse_tncc("A\tx\nB\ty\n", "\t", Some(&names)).unwrap();
        assert_eq!(c.examples[0].label, 1);
        assert_eq!(c.label_names, names);
        assert!(parse_tncc("C\tz\n", "\t", Some(&names)).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        save_label_map(&p, &names).unwrap();
        assert_eq!(load_label_map(&p).unwrap(), names);
    }

    #[test]
    fn split_sizes() {
        let s = split(&examples(100), [8, 1, 1], 7, vec![]).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        let s = split(&examples(10), [8, 1, 1], 7, vec![]).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let s = split(&examples(37), [8, 1, 1], 7, vec![]).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (29, 3, 5));
        assert_eq!(split(&examples(50), [8, 1, 1], 3, vec![]).unwrap(), split(&examples(50), [8, 1, 1], 3, vec![]).unwrap());
        assert!(split(&examples(9), [8, 1, 1], 7, vec![]).is_err());
        assert!(split(&examples(20), [8, 0, 1], 7, vec![]).is_err());
    }

    fn tokenizer_for(exs: &[Example]) -> Tokenizer {
        Tokenizer::new(Vocabulary::from_texts(exs.iter().map(|e| e.text.as_str())))
    }

    #[test]
    fn batch_sizes_and_reshuffle() {
        let exs = examples(37);
        let tok = tokenizer_for(&exs);
        let loader = make_batches(&exs, None, &tok, 8, 16, 1).unwrap();
        let sizes: Vec<usize> = loader.epoch(0).iter().map(|b| b.inputs.len()).collect();
        assert_eq!(sizes, vec![16, 16, 5]);
        let loader4 = make_batches(&exs, None, &tok, 8, 4, 1).unwrap();
        assert_eq!(loader4.num_batches(), 10);
        assert!(loader4.epoch(0).iter().all(|b| b.inputs.len() <= 4));
        let first = |e| loader.epoch(e)[0].inputs.iter().map(|i| i.ids.clone()).collect::<Vec<_>>();
        assert_eq!(first(0), first(0));
        assert_ne!(first(0), first(1));
        assert!(Loader::new(vec![], 0, 0).is_err());
    }

    #[test]
    fn synthetic_corpus_properties() {
        let spec = SyntheticSpec::default();
        let exs = synthesize_corpus(12, 50, &spec, 3).unwrap();
        assert_eq!(exs.len(), 600);
        let mut per_class = [0usize; 12];
        for ex in &exs {
            per_class[ex.label] += 1;
            let toks = tokenize(&ex.text);
            let signals = signal_tokens(&spec, ex.label);
            assert!(toks.iter().any(|t| signals.contains(t)));
        }
        assert!(per_class.iter().all(|&c| c == 50));
        assert_eq!(exs, synthesize_corpus(12, 50, &spec, 3).unwrap());
        assert_ne!(exs, synthesize_corpus(12, 50, &spec, 4).unwrap());

        let mut weights = vec![1.0; 12];
        weights[0] = 5.0;
        let imb = SyntheticSpec {
            class_weights: Some(weights),
            ..SyntheticSpec::default()
        };
        let exs = synthesize_corpus(12, 20, &imb, 3).unwrap();
        assert_eq!(exs.iter().filter(|e| e.label == 0).count(), 100);
        assert_eq!(exs.iter().filter(|e| e.label == 1).count(), 20);
        assert!(synthesize_corpus(1, 5, &spec, 0).is_err());
    }

    #[test]
    fn signal_oracle_is_perfect() {
        let spec = SyntheticSpec::default();
        let exs = synthesize_corpus(12, 30, &spec, 9).unwrap();
        let signals: Vec<Vec<String>> = (0..12).map(|c| signal_tokens(&spec, c)).collect();
        for ex in &exs {
            let toks = tokenize(&ex.text);
            let votes: Vec<usize> = signals
                .iter()
                .map(|s| toks.iter().filter(|t| s.contains(t)).count())
                .collect();
            let pred = (0..12).max_by_key(|&c| (votes[c], std::cmp::Reverse(c))).unwrap();
            assert_eq!(pred, ex.label);
        }
    }

    #[test]
    fn synthetic_split_sizes_and_tsv_round_trip() {
        let s = synthetic_splits(12, 50, &SyntheticSpec::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (600, 120, 120));
        assert_eq!(parse_synthetic("synthetic:12x50"), Some((12, 50)));
        assert_eq!(parse_synthetic("data.tsv"), None);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        write_tsv(&p, &s.train, &s.label_names).unwrap();
        let back = load_tncc(&p, "\t", Some(&s.label_names)).unwrap();
        assert_eq!(back.examples, s.train);
    }

    proptest! {
        #[test]
        fn split_conserves_examples(n in 10usize..300, seed in any::<u64>()) {
            let exs = examples(n);
            let s = split(&exs, [8, 1, 1], seed, vec![]).unwrap();
            prop_assert_eq!(s.len(), n);
            prop_assert_eq!(s.train.len(), n * 8 / 10);
            prop_assert_eq!(s.validation.len(), n / 10);
            let mut all: Vec<String> = s.train.iter().chain(&s.validation).chain(&s.test).map(|e| e.text.clone()).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }

        #[test]
        fn loader_visits_each_example_once(n in 1usize..80, bs in 1usize..20, epoch in 0usize..5) {
            let exs = examples(n);
            let tok = tokenizer_for(&exs);
            let loader = make_batches(&exs, None, &tok, 4, bs, 11).unwrap();
            let mut seen: Vec<Vec<u32>> = loader.epoch(epoch).iter().flat_map(|b| b.inputs.iter().map(|i| i.ids.clone())).collect();
            let mut expected: Vec<Vec<u32>> = loader.inputs().iter().map(|i| i.ids.clone()).collect();
            seen.sort();
            expected.sort();
            prop_assert_eq!(seen, expected);
        }
    }
}
