//! Hard-template wrapping and verbalizer projection.
//!
//! A template is UTF-8 text with exactly one `{mask}` and one `{text}`
//! placeholder, e.g. `News Classification: {mask} {text}`. Wrapping produces
//! `tokens(before mask) ++ [MASK] ++ tokens(between) ++ tokens(text) ++
//! tokens(after text)`; only the input text is ever truncated.
//!
//! A verbalizer maps each label to one or more label words. A label's score is
//! the mean of the mask-position logits over its words, where a multi-token
//! word contributes the mean over its tokens.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tape, Var};
use crate::vocab::{Tokenizer, Vocabulary, MASK, MASK_ID, PAD_ID};

pub const MASK_PLACEHOLDER: &str = "{mask}";
pub const TEXT_PLACEHOLDER: &str = "{text}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    before_mask: String,
    between: String,
    after_text: String,
    mask_first: bool,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let masks = source.matches(MASK_PLACEHOLDER).count();
        let texts = source.matches(TEXT_PLACEHOLDER).count();
        if masks != 1 || texts != 1 {
            return Err(invalid(format!(
                "template needs exactly one {MASK_PLACEHOLDER} and one {TEXT_PLACEHOLDER} (found {masks} and {texts})"
            )));
        }
        let m = source.find(MASK_PLACEHOLDER).unwrap();
        let t = source.find(TEXT_PLACEHOLDER).unwrap();
        let (first, first_len, second, second_len) = if m < t {
            (m, MASK_PLACEHOLDER.len(), t, TEXT_PLACEHOLDER.len())
        } else {
            (t, TEXT_PLACEHOLDER.len(), m, MASK_PLACEHOLDER.len())
        };
        Ok(Self {
            before_mask: source[..first].to_string(),
            between: source[first + first_len..second].to_string(),
            after_text: source[second + second_len..].to_string(),
            mask_first: m < t,
        })
    }

    /// `prefix [MASK] text`.
    pub fn with_prefix(prefix: &str) -> Self {
        Self {
            before_mask: prefix.to_string(),
            between: String::new(),
            after_text: String::new(),
            mask_first: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = fs::read_to_string(path)?;
        Self::parse(source.trim_end_matches(['\n', '\r']))
    }

    /// Human-readable form with `[MASK]` in the mask slot.
    pub fn render(&self, text: &str) -> String {
        let parts: Vec<&str> = if self.mask_first {
            vec![&self.before_mask, MASK, &self.between, text, &self.after_text]
        } else {
            vec![&self.before_mask, text, &self.between, MASK, &self.after_text]
        };
        crate::vocab::preprocess_symbols(&parts.join(" "))
    }

    /// Template text with placeholders, as accepted by [`parse`](Self::parse).
    pub fn source(&self) -> String {
        let (first, second) = if self.mask_first {
            (MASK_PLACEHOLDER, TEXT_PLACEHOLDER)
        } else {
            (TEXT_PLACEHOLDER, MASK_PLACEHOLDER)
        };
        format!("{}{first}{}{second}{}", self.before_mask, self.between, self.after_text)
    }

    /// Literal template text, used when building a vocabulary.
    pub fn literal_text(&self) -> String {
        format!("{} {} {}", self.before_mask, self.between, self.after_text)
    }
}

/// Tokenised model input. `pad_mask[i]` is true for padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WrappedInput {
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
    /// Position of `[MASK]`; `None` for classifier inputs.
    pub mask_pos: Option<usize>,
    pub label: usize,
}

impl WrappedInput {
    /// Number of leading non-padding positions.
    pub fn content_len(&self) -> usize {
        self.pad_mask.iter().position(|&p| p).unwrap_or(self.ids.len())
    }
}

fn pad_to(mut ids: Vec<u32>, max_len: usize) -> (Vec<u32>, Vec<bool>) {
    let n = ids.len();
    ids.resize(max_len, PAD_ID);
    let pad_mask = (0..max_len).map(|i| i >= n).collect();
    (ids, pad_mask)
}

/// Wraps `text` with the template, truncating the text tail to fit `max_len`,
/// then pads to `max_len`.
pub fn wrap(template: &Template, text: &str, tokenizer: &Tokenizer, max_len: usize, label: usize) -> Result<WrappedInput> {
    let before = tokenizer.encode(&template.before_mask);
    let between = tokenizer.encode(&template.between);
    let after = tokenizer.encode(&template.after_text);
    let fixed = before.len() + 1 + between.len() + after.len();
    if fixed > max_len {
        return Err(invalid(format!(
            "template needs {fixed} positions but max_len is {max_len}"
        )));
    }
    let mut body = tokenizer.encode(text);
    body.truncate(max_len - fixed);

    let mut ids = Vec::with_capacity(max_len);
    ids.extend(&before);
    let mask_pos;
    if template.mask_first {
        mask_pos = ids.len();
        ids.push(MASK_ID);
        ids.extend(&between);
        ids.extend(&body);
    } else {
        ids.extend(&body);
        ids.extend(&between);
        mask_pos = ids.len();
        ids.push(MASK_ID);
    }
    ids.extend(&after);
    let (ids, pad_mask) = pad_to(ids, max_len);
    Ok(WrappedInput {
        ids,
        pad_mask,
        mask_pos: Some(mask_pos),
        label,
    })
}

/// `[CLS] ++ tokens(text)`, truncated and padded; used by classifier-head modes.
pub fn encode_plain(text: &str, tokenizer: &Tokenizer, max_len: usize, label: usize) -> Result<WrappedInput> {
    if max_len == 0 {
        return Err(invalid("max_len must be positive"));
    }
    let mut ids = vec![crate::vocab::CLS_ID];
    ids.extend(tokenizer.encode(text));
    ids.truncate(max_len);
    let (ids, pad_mask) = pad_to(ids, max_len);
    Ok(WrappedInput {
        ids,
        pad_mask,
        mask_pos: None,
        label,
    })
}

/// Label → label words, as read from `label<TAB>word1,word2,...` lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    entries: Vec<(String, Vec<String>)>,
}

impl Verbalizer {
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(invalid("verbalizer needs at least two labels"));
        }
        for (label, words) in &entries {
            if words.is_empty() || words.iter().any(|w| w.trim().is_empty()) {
                return Err(invalid(format!("label `{label}` has an empty label-word list")));
            }
        }
        for (i, (label, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(l, _)| l == label) {
                return Err(invalid(format!("label `{label}` appears twice in the verbalizer")));
            }
        }
        Ok(Self { entries })
    }

    pub fn parse(source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, words) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `label<TAB>word1,word2,...`".into(),
            })?;
            let words: Vec<String> = words
                .split(',')
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect();
            entries.push((label.trim().to_string(), words));
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        self.entries
            .iter()
            .map(|(l, w)| format!("{l}\t{}\n", w.join(",")))
            .collect()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }

    pub fn entries(&self) -> &[(String, Vec<String>)] {
        &self.entries
    }

    /// Distinct label-word tokens not yet in `vocab`, in first-seen order.
    pub fn missing_tokens(&self, vocab: &Vocabulary) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, words) in &self.entries {
            for w in words {
                for tok in crate::vocab::tokenize(w) {
                    if !vocab.contains(&tok) && !out.contains(&tok) {
                        out.push(tok);
                    }
                }
            }
        }
        out
    }

    /// Resolves label words to token ids, ordering classes as `label_names`.
    pub fn resolve(&self, tokenizer: &Tokenizer, label_names: &[String]) -> Result<ResolvedVerbalizer> {
        let mut classes = Vec::with_capacity(label_names.len());
        for name in label_names {
            let (_, words) = self
                .entries
                .iter()
                .find(|(l, _)| l == name)
                .ok_or_else(|| invalid(format!("verbalizer has no entry for label `{name}`")))?;
            let mut ids = Vec::with_capacity(words.len());
            for w in words {
                let toks = tokenizer.encode_strict(w)?;
                if toks.is_empty() {
                    return Err(invalid(format!("label word `{w}` has no tokens")));
                }
                ids.push(toks);
            }
            classes.push(ids);
        }
        if classes.len() < 2 {
            return Err(invalid("at least two classes are required"));
        }
        ResolvedVerbalizer::new(classes, tokenizer.vocab().len())
    }
}

/// Label words as token ids: `classes[label][word] = token ids`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedVerbalizer {
    classes: Vec<Vec<Vec<u32>>>,
}

impl ResolvedVerbalizer {
    pub fn new(classes: Vec<Vec<Vec<u32>>>, vocab_size: usize) -> Result<Self> {
        for words in &classes {
            if words.is_empty() || words.iter().any(Vec::is_empty) {
                return Err(invalid("every label needs at least one non-empty label word"));
            }
            for &id in words.iter().flatten() {
                if id as usize >= vocab_size {
                    return Err(Error::OutOfRange {
                        what: "vocabulary (label word)",
                        index: id as usize,
                        size: vocab_size,
                    });
                }
            }
        }
        Ok(Self { classes })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn token_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().flatten().flatten().copied()
    }

    /// Sparse averaging weights per class.
    pub fn weights<T: Scalar>(&self) -> Vec<Vec<(usize, T)>> {
        self.classes
            .iter()
            .map(|words| {
                let per_word = 1.0 / words.len() as f64;
                words
                    .iter()
                    .flat_map(|toks| {
                        let w = T::from_f64(per_word / toks.len() as f64);
                        toks.iter().map(move |&id| (id as usize, w))
                    })
                    .collect()
            })
            .collect()
    }

    /// Class scores from one row of vocabulary logits.
    pub fn project<T: Scalar>(&self, vocab_logits: &[T]) -> Result<Vec<T>> {
        self.weights::<T>()
            .iter()
            .map(|ws| {
                ws.iter().try_fold(T::zero(), |acc, &(col, w)| {
                    vocab_logits
                        .get(col)
                        .map(|&v| acc + w * v)
                        .ok_or(Error::OutOfRange {
                            what: "vocab logits",
                            index: col,
                            size: vocab_logits.len(),
                        })
                })
            })
            .collect()
    }

    /// Tape version of [`project`](Self::project): `[m × vocab] → [m × n_classes]`.
    pub fn project_on_tape<T: Scalar>(&self, tape: &mut Tape<'_, T>, vocab_logits: Var) -> Result<Var> {
        tape.project_cols(vocab_logits, self.weights())
    }
}

/// Argmax with ties going to the lowest index.
pub fn classify<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;
    use proptest::prelude::*;

    fn tokenizer_for(texts: &[&str]) -> Tokenizer {
        Tokenizer::new(Vocabulary::from_texts(texts.iter().copied()))
    }

    #[test]
    fn template_parse_rules() {
        assert!(Template::parse("{mask} {text}").is_ok());
        assert!(Template::parse("{text}").is_err());
        assert!(Template::parse("{mask} {mask} {text}").is_err());
        let t = Template::parse("{text} means {mask} .").unwrap();
        assert!(!t.mask_first);
    }

    #[test]
    fn wrap_renders_prefix_mask_text() {
        let a = "News Classification:";
        let b = "What is the responsibility of environmental law?";
        let tpl = Template::with_prefix(a);
        assert_eq!(
            tpl.render(b),
            "News Classification: [MASK] What is the responsibility of environmental law?"
        );
        let tok = tokenizer_for(&[a, b]);
        let w = wrap(&tpl, b, &tok, 108, 0).unwrap();
        assert_eq!(w.mask_pos, Some(2));
        assert_eq!(w.content_len(), 2 + 1 + 7);
        let rendered = tok.decode(&w.ids[..w.content_len()]).unwrap();
        assert_eq!(rendered, tpl.render(b));
        assert_eq!(w.ids.len(), 108);
    }

    #[test]
    fn wrap_with_empty_prefix() {
        let tok = tokenizer_for(&["x y z"]);
        let w = wrap(&Template::with_prefix(""), "x y z", &tok, 8, 1).unwrap();
        let mut expected = vec![MASK_ID];
        expected.extend(tok.encode("x y z"));
        assert_eq!(&w.ids[..4], expected.as_slice());
        assert_eq!(w.mask_pos, Some(0));
    }

    #[test]
    fn wrap_truncates_text_only() {
        let long: String = (0..50).map(|i| format!("w{i} ")).collect();
        let tok = tokenizer_for(&["lead in", &long]);
        let tpl = Template::parse("lead in {mask} {text}").unwrap();
        let w = wrap(&tpl, &long, &tok, 10, 0).unwrap();
        assert_eq!(w.content_len(), 10);
        assert_eq!(&w.ids[..3], &[tok.vocab().id("lead").unwrap(), tok.vocab().id("in").unwrap(), MASK_ID]);
        assert_eq!(w.ids[3], tok.vocab().id("w0").unwrap());
        assert!(wrap(&tpl, &long, &tok, 2, 0).is_err());
    }

    #[test]
    fn verbalizer_file_format() {
        let v = Verbalizer::parse("Politics\tpolitics,government\nEducation\tschool\n").unwrap();
        assert_eq!(v.labels().collect::<Vec<_>>(), vec!["Politics", "Education"]);
        assert_eq!(Verbalizer::parse(&v.to_file_string()).unwrap(), v);
        assert!(Verbalizer::parse("Politics politics\nB\tb").is_err());
        assert!(Verbalizer::parse("A\t\nB\tb").is_err());
    }

    #[test]
    fn resolve_orders_by_label_names_and_rejects_oov() {
        let v = Verbalizer::parse("A\ta1\nB\tb1,b2\n").unwrap();
        let tok = tokenizer_for(&["a1 b1 b2"]);
        let r = v.resolve(&tok, &["B".into(), "A".into()]).unwrap();
        assert_eq!(r.n_classes(), 2);
        let logits: Vec<f64> = (0..tok.vocab().len()).map(|i| i as f64).collect();
        let s = r.project(&logits).unwrap();
        let id = |t: &str| tok.vocab().id(t).unwrap() as f64;
        assert_eq!(s, vec![(id("b1") + id("b2")) / 2.0, id("a1")]);

        let missing = tokenizer_for(&["a1 b1"]);
        assert!(v.resolve(&missing, &["A".into(), "B".into()]).is_err());
        assert_eq!(v.missing_tokens(missing.vocab()), vec!["b2".to_string()]);
        assert!(v.resolve(&tok, &["A".into(), "C".into()]).is_err());
    }

    #[test]
    fn projection_examples() {
        // Two words for one label with logits 1 and 3 average to 2.
        let r = ResolvedVerbalizer::new(vec![vec![vec![0], vec![1]], vec![vec![2]]], 3).unwrap();
        assert_eq!(r.project(&[1.0f64, 3.0, 0.5]).unwrap(), vec![2.0, 0.5]);
        // Multi-token word: mean over its tokens.
        let r = ResolvedVerbalizer::new(vec![vec![vec![0, 1]], vec![vec![2]]], 3).unwrap();
        assert_eq!(r.project(&[1.0f64, 3.0, 0.5]).unwrap(), vec![2.0, 0.5]);
        assert!(ResolvedVerbalizer::new(vec![vec![vec![5]], vec![vec![0]]], 3).is_err());

        // Single-token words: pure gather, argmax matches argmax over those entries.
        let ids: Vec<u32> = (10..22).collect();
        let r = ResolvedVerbalizer::new(ids.iter().map(|&i| vec![vec![i]]).collect(), 30).unwrap();
        let logits: Vec<f64> = (0..30).map(|i| ((i * 7919) % 13) as f64).collect();
        let s = r.project(&logits).unwrap();
        let gathered: Vec<f64> = ids.iter().map(|&i| logits[i as usize]).collect();
        assert_eq!(s, gathered);
        assert_eq!(classify(&s), classify(&gathered));
    }

    #[test]
    fn tape_projection_matches_plain() {
        let r = ResolvedVerbalizer::new(vec![vec![vec![0, 2], vec![1]], vec![vec![3]]], 4).unwrap();
        let logits = vec![0.5f64, -1.0, 2.0, 4.0];
        let mut t = Tape::<f64>::detached();
        let x = t.leaf(logits.clone(), 1, 4, true).unwrap();
        let s = r.project_on_tape(&mut t, x).unwrap();
        assert_eq!(t.value(s), r.project(&logits).unwrap().as_slice());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(classify(&[0.4; 12]), 0);
        assert_eq!(classify(&[0.0, 2.0, 2.0]), 1);
    }

    proptest! {
        #[test]
        fn wrap_never_drops_template_or_mask(n in 0usize..(4 * 16), max_len in 4usize..16) {
            let text: String = (0..n).map(|i| format!("w{} ", i % 7)).collect();
            let tok = tokenizer_for(&["a b", "w0 w1 w2 w3 w4 w5 w6"]);
            let tpl = Template::parse("a b {mask} {text}").unwrap();
            let w = wrap(&tpl, &text, &tok, max_len, 0).unwrap();
            prop_assert_eq!(w.ids.len(), max_len);
            prop_assert_eq!(w.ids.iter().filter(|&&i| i == MASK_ID).count(), 1);
            prop_assert_eq!(w.ids[w.mask_pos.unwrap()], MASK_ID);
            prop_assert_eq!(&w.ids[..2], &[tok.vocab().id("a").unwrap(), tok.vocab().id("b").unwrap()]);
            prop_assert_eq!(w.content_len(), (3 + n).min(max_len));
            prop_assert_eq!(wrap(&tpl, &text, &tok, max_len, 0).unwrap(), w);
        }

        #[test]
        fn projection_is_shift_invariant(
            logits in prop::collection::vec(-5.0f64..5.0, 20),
            c in -100.0f64..100.0,
        ) {
            let r = ResolvedVerbalizer::new(
                vec![vec![vec![1], vec![4, 5]], vec![vec![7]], vec![vec![9], vec![11], vec![12]]],
                20,
            ).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let a = r.project(&logits).unwrap();
            let b = r.project(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y - x - c).abs() < 1e-9);
            }
            prop_assert_eq!(classify(&a), classify(&b));
        }
    }
}
