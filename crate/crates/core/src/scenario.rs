//! Fine-tuning scenarios: model × mode naming, default learning rates and
//! batch sizes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{catalog_entry, EncoderConfig, ModelFamily};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Prompt,
    Adapter,
    AdapterPrompt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::Prompt, Mode::Adapter, Mode::AdapterPrompt];

    pub fn uses_prompt(self) -> bool {
        matches!(self, Mode::Prompt | Mode::AdapterPrompt)
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Mode::Adapter | Mode::AdapterPrompt)
    }

    /// Abbreviation suffix: W, P, A, AP.
    pub fn suffix(self) -> &'static str {
        match self {
            Mode::Full => "W",
            Mode::Prompt => "P",
            Mode::Adapter => "A",
            Mode::AdapterPrompt => "AP",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Prompt => "prompt",
            Mode::Adapter => "adapter",
            Mode::AdapterPrompt => "adapter_prompt",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "wo" | "w" => Ok(Mode::Full),
            "prompt" | "p" => Ok(Mode::Prompt),
            "adapter" | "a" => Ok(Mode::Adapter),
            "adapter_prompt" | "ap" => Ok(Mode::AdapterPrompt),
            other => Err(invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Abbreviation prefix per catalog model.
const MODEL_PREFIXES: [(&str, &str); 5] = [
    ("CS", "cino-small"),
    ("CB", "cino-base"),
    ("CL", "cino-large"),
    ("TB", "tibetan-bert"),
    ("T", "tibert"),
];

pub fn model_prefix(model_key: &str) -> Option<&'static str> {
    MODEL_PREFIXES
        .iter()
        .find(|(_, k)| *k == model_key)
        .map(|(p, _)| *p)
}

/// A resolved scenario abbreviation such as `TBAP` or `CSW-desk`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioName {
    pub abbreviation: String,
    pub model_key: String,
    pub family: ModelFamily,
    pub mode: Mode,
    /// Desk-scale analog: small encoder, no pretrained weights.
    pub desk: bool,
}

impl ScenarioName {
    pub fn new(model_key: &str, mode: Mode, desk: bool) -> Result<Self> {
        let entry = catalog_entry(model_key).ok_or_else(|| invalid(format!("unknown model `{model_key}`")))?;
        let prefix = model_prefix(entry.key).expect("every catalog model has a prefix");
        let mut abbreviation = format!("{prefix}{}", mode.suffix());
        if desk {
            abbreviation.push_str("-desk");
        }
        Ok(Self {
            abbreviation,
            model_key: entry.key.to_string(),
            family: entry.family,
            mode,
            desk,
        })
    }

    /// Case-insensitive; an optional `-desk` suffix selects the desk-scale analog.
    pub fn parse(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let (core, desk) = match upper.strip_suffix("-DESK") {
            Some(c) => (c, true),
            None => (upper.as_str(), false),
        };
        for mode in [Mode::AdapterPrompt, Mode::Adapter, Mode::Prompt, Mode::Full] {
            if let Some(prefix) = core.strip_suffix(mode.suffix()) {
                if let Some((_, key)) = MODEL_PREFIXES.iter().find(|(p, _)| *p == prefix) {
                    return Self::new(key, mode, desk);
                }
            }
        }
        Err(invalid(format!("unknown scenario abbreviation `{s}`")))
    }

    /// All twenty published abbreviations, in table order.
    pub fn all() -> Vec<ScenarioName> {
        ["cino-small", "cino-base", "cino-large", "tibert", "tibetan-bert"]
            .iter()
            .flat_map(|k| Mode::ALL.iter().map(move |&m| Self::new(k, m, false).unwrap()))
            .collect()
    }

    pub fn default_lr(&self) -> f64 {
        default_lr(self.family, self.mode)
    }

    pub fn default_batch_size(&self) -> usize {
        default_batch_size(&self.model_key, self.mode)
    }

    /// Encoder shape for this scenario with a corpus-derived vocabulary.
    pub fn encoder_config(&self, vocab_size: usize, max_len: usize) -> EncoderConfig {
        if self.desk {
            EncoderConfig::desk(vocab_size, max_len)
        } else {
            let mut cfg = catalog_entry(&self.model_key).expect("validated key").config;
            cfg.vocab_size = vocab_size;
            cfg.max_len = max_len;
            cfg
        }
    }
}

/// Per-scenario learning rates.
pub fn default_lr(family: ModelFamily, mode: Mode) -> f64 {
    match (family, mode) {
        (_, Mode::Full) => 5e-6,
        (_, Mode::Prompt) => 6e-6,
        (ModelFamily::Cino, Mode::Adapter) => 1e-4,
        (ModelFamily::Cino, Mode::AdapterPrompt) => 1.5e-4,
        (_, Mode::Adapter) => 3e-4,
        (_, Mode::AdapterPrompt) => 5e-4,
    }
}

/// 4 for the large model's adapter scenarios, 16 otherwise.
pub fn default_batch_size(model_key: &str, mode: Mode) -> usize {
    if model_key == "cino-large" && mode.uses_adapters() {
        4
    } else {
        16
    }
}

pub const DEFAULT_MAX_LEN: usize = 108;
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_EPOCHS: usize = 30;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rates() {
        let lr = |s: &str| ScenarioName::parse(s).unwrap().default_lr();
        assert_eq!(lr("CSA"), 1e-4);
        assert_eq!(lr("CBA"), 1e-4);
        assert_eq!(lr("CLA"), 1e-4);
        assert_eq!(lr("TBAP"), 5e-4);
        assert_eq!(lr("TAP"), 5e-4);
        assert_eq!(lr("CSW"), 5e-6);
        assert_eq!(lr("TBW"), 5e-6);
        assert_eq!(lr("CBP"), 6e-6);
        assert_eq!(lr("CSAP"), 1.5e-4);
        assert_eq!(lr("CLAP"), 1.5e-4);
        assert_eq!(lr("TA"), 3e-4);
        assert_eq!(lr("TBA"), 3e-4);
    }

    #[test]
    fn abbreviations_resolve_uniquely() {
        let all = ScenarioName::all();
        assert_eq!(all.len(), 20);
        for s in &all {
            let back = ScenarioName::parse(&s.abbreviation).unwrap();
            assert_eq!(&back, s);
            let lower = ScenarioName::parse(&s.abbreviation.to_lowercase()).unwrap();
            assert_eq!(&lower, s);
        }
        let mut abbrevs: Vec<_> = all.iter().map(|s| s.abbreviation.clone()).collect();
        abbrevs.dedup();
        assert_eq!(abbrevs.len(), 20);

        let t = ScenarioName::parse("tbap-desk").unwrap();
        assert_eq!(t.model_key, "tibetan-bert");
        assert_eq!(t.mode, Mode::AdapterPrompt);
        assert!(t.desk);
        assert_eq!(t.abbreviation, "TBAP-desk");
        assert_eq!(ScenarioName::parse("TAP").unwrap().model_key, "tibert");
        assert_eq!(ScenarioName::parse("TBA").unwrap().mode, Mode::Adapter);
        assert_eq!(ScenarioName::parse("TP").unwrap().mode, Mode::Prompt);
        assert!(ScenarioName::parse("XYZ").is_err());
        assert!(ScenarioName::parse("CS").is_err());
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(ScenarioName::parse("CLA").unwrap().default_batch_size(), 4);
        assert_eq!(ScenarioName::parse("CLAP").unwrap().default_batch_size(), 4);
        assert_eq!(ScenarioName::parse("CBAP").unwrap().default_batch_size(), 16);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("adapter_prompt".parse::<Mode>().unwrap(), Mode::AdapterPrompt);
        assert_eq!("Adapter-Prompt".parse::<Mode>().unwrap(), Mode::AdapterPrompt);
        assert!("lora".parse::<Mode>().is_err());
    }
}
