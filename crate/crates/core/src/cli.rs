//! Command-line runner: `train`, `eval`, `account` and `synth`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::accounting::{published_table, ratio_report, render_table, AccountingTarget};
use crate::checkpoint::{apply_adapters, load_model, save_checkpoint, Checkpoint};
use crate::data::{
    load_label_map, load_tncc, parse_synthetic, save_label_map, split, synthetic_splits, write_tsv, CorpusSplits,
    SyntheticSpec,
};
use crate::encoder::{catalog_entry, model_catalog, EncoderConfig, EncoderModel, HeadKind};
use crate::error::{invalid, Result};
use crate::prompt::{Template, Verbalizer};
use crate::scenario::{Mode, ScenarioName, DEFAULT_MAX_LEN, DEFAULT_RANK};
use crate::training::{evaluate, worker_threads, Evaluation, PromptSpec, Scenario, TrainReport, Trainer};
use crate::vocab::{Tokenizer, Vocabulary};
use crate::data::encode_examples;

#[derive(Parser, Debug)]
#[command(name = "peftt", version, about = "Adapter and prompt fine-tuning for a small MLM encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train one scenario and write report, vocabulary and checkpoints.
    Train(TrainArgs),
    /// Re-score a trained run directory on one split.
    Eval(EvalArgs),
    /// Print trainable-parameter counts and ratios.
    Account(AccountArgs),
    /// Write a synthetic corpus as TSV.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Scenario abbreviation such as TBAP or TBAP-desk.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Catalog model key; a `-desk` suffix selects the small analog.
    #[arg(long)]
    pub model: Option<String>,
    /// full, prompt, adapter or adapter_prompt.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `synthetic:CxN`, one TSV file (split 8:1:1), or three comma-separated
    /// TSV files for train, validation and test.
    #[arg(long)]
    pub corpus: String,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    #[arg(long, default_value = "\t")]
    pub delimiter: String,
    /// File with one label name per line fixing the label order.
    #[arg(long)]
    pub label_map: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub out: PathBuf,
    /// train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Checkpoint to score instead of the run's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AccountArgs {
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    pub rank: usize,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// `synthetic:CxN`.
    #[arg(long, default_value = "synthetic:12x50")]
    pub corpus: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative class frequencies, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Fully resolved training configuration, stored as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub corpus: String,
    pub delimiter: String,
    pub label_map: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub verbalizer: Option<PathBuf>,
    pub out: PathBuf,
    pub repeats: usize,
}

fn resolve_scenario(args: &TrainArgs) -> Result<Scenario> {
    let name = match (&args.scenario, &args.model) {
        (Some(s), None) => {
            let name = ScenarioName::parse(s)?;
            if let Some(m) = &args.mode {
                if m.parse::<Mode>()? != name.mode {
                    return Err(invalid(format!("--mode {m} contradicts scenario {s}")));
                }
            }
            name
        }
        (None, Some(model)) => {
            let mode: Mode = args
                .mode
                .as_deref()
                .ok_or_else(|| invalid("--model needs --mode"))?
                .parse()?;
            let (key, desk) = match model.strip_suffix("-desk") {
                Some(k) => (k, true),
                None => (model.as_str(), false),
            };
            ScenarioName::new(key, mode, desk)?
        }
        (Some(_), Some(_)) => return Err(invalid("give either --scenario or --model, not both")),
        (None, None) => return Err(invalid("one of --scenario or --model is required")),
    };
    let mut s = Scenario::from_name(&name);
    let h = &mut s.hyper;
    if let Some(v) = args.lr {
        h.lr = v;
    }
    if let Some(v) = args.batch_size {
        h.batch_size = v;
    }
    if let Some(v) = args.epochs {
        h.epochs = v;
    }
    if let Some(v) = args.rank {
        h.rank = v;
    }
    h.max_len = args.max_len;
    h.seed = args.seed;
    s.validate()?;
    Ok(s)
}

impl RunConfig {
    pub fn from_args(args: &TrainArgs) -> Result<Self> {
        let scenario = resolve_scenario(args)?;
        let synthetic = parse_synthetic(&args.corpus).is_some();
        if args.corpus.starts_with("synthetic:") && !synthetic {
            return Err(invalid(format!("malformed synthetic corpus spec `{}`", args.corpus)));
        }
        if scenario.mode.uses_prompt() && !synthetic && (args.template.is_none() || args.verbalizer.is_none()) {
            return Err(invalid(format!(
                "{} mode needs --template and --verbalizer for a file corpus",
                scenario.mode
            )));
        }
        if args.template.is_some() != args.verbalizer.is_some() {
            return Err(invalid("--template and --verbalizer must be given together"));
        }
        if args.repeats == 0 {
            return Err(invalid("--repeats must be at least 1"));
        }
        Ok(Self {
            scenario,
            corpus: args.corpus.clone(),
            delimiter: unescape(&args.delimiter),
            label_map: args.label_map.clone(),
            template: args.template.clone(),
            verbalizer: args.verbalizer.clone(),
            out: args.out.clone(),
            repeats: args.repeats,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.scenario.hyper.seed = seed;
        c
    }

    /// Loads or generates the corpus splits.
    pub fn corpus(&self) -> Result<CorpusSplits> {
        let seed = self.scenario.hyper.seed;
        if let Some((c, n)) = parse_synthetic(&self.corpus) {
            return synthetic_splits(c, n, &SyntheticSpec::default(), seed);
        }
        let fixed = match &self.label_map {
            Some(p) => Some(load_label_map(p)?),
            None => None,
        };
        let paths: Vec<&str> = self.corpus.split(',').map(str::trim).collect();
        match paths.as_slice() {
            [one] => {
                let c = load_tncc(Path::new(one), &self.delimiter, fixed.as_deref())?;
                report_skipped(one, c.skipped);
                split(&c.examples, [8, 1, 1], seed, c.label_names)
            }
            [train, val, test] => {
                let tr = load_tncc(Path::new(train), &self.delimiter, fixed.as_deref())?;
                report_skipped(train, tr.skipped);
                let names = tr.label_names.clone();
                let va = load_tncc(Path::new(val), &self.delimiter, Some(&names))?;
                report_skipped(val, va.skipped);
                let te = load_tncc(Path::new(test), &self.delimiter, Some(&names))?;
                report_skipped(test, te.skipped);
                Ok(CorpusSplits {
                    train: tr.examples,
                    validation: va.examples,
                    test: te.examples,
                    label_names: names,
                })
            }
            _ => Err(invalid("--corpus takes one path, three comma-separated paths, or synthetic:CxN")),
        }
    }

    pub fn prompt(&self, label_names: &[String]) -> Result<Option<PromptSpec>> {
        if !self.scenario.mode.uses_prompt() {
            return Ok(None);
        }
        match (&self.template, &self.verbalizer) {
            (Some(t), Some(v)) => Ok(Some(PromptSpec {
                template: Template::load(t)?,
                verbalizer: Verbalizer::load(v)?,
            })),
            _ => Ok(Some(PromptSpec::default_for(label_names)?)),
        }
    }
}

fn report_skipped(path: &str, n: usize) {
    if n > 0 {
        eprintln!("warning: skipped {n} empty titles in {path}");
    }
}

/// Accepts `\t` and `tab` for a tab delimiter.
fn unescape(d: &str) -> String {
    match d {
        "\\t" | "tab" | "TAB" => "\t".into(),
        "space" => " ".into(),
        other => other.into(),
    }
}

const REPORT_JSON: &str = "report.json";
const REPORT_TXT: &str = "report.txt";
const RUN_JSON: &str = "run.json";
const VOCAB_TXT: &str = "vocab.txt";
const LABELS_TXT: &str = "labels.txt";
const TEMPLATE_TXT: &str = "template.txt";
const VERBALIZER_TSV: &str = "verbalizer.tsv";
const MODEL_CKPT: &str = "model.ckpt";
const ADAPTERS_CKPT: &str = "adapters.ckpt";

/// Trains one run and writes its directory.
pub fn train_run(config: &RunConfig, dir: &Path) -> Result<TrainReport> {
    let corpus = config.corpus()?;
    let prompt = config.prompt(&corpus.label_names)?;
    let mut trainer = Trainer::prepare(&config.scenario, &corpus, prompt.as_ref())?;
    let name = config.scenario.name.clone();
    let report = trainer.fit_observed(|e| {
        eprintln!(
            "[{name}] epoch {:>3}  loss {:.5}  val acc {:.5}  val macro-F1 {:.5}",
            e.epoch, e.loss, e.val_acc, e.val_macro_f1
        )
    })?;

    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&report)?)?;
    fs::write(dir.join(REPORT_TXT), report.to_table())?;
    let mut run = config.clone();
    run.out = dir.to_path_buf();
    fs::write(dir.join(RUN_JSON), serde_json::to_string_pretty(&run)?)?;
    trainer.tokenizer().vocab().save(&dir.join(VOCAB_TXT))?;
    save_label_map(&dir.join(LABELS_TXT), trainer.label_names())?;
    if let Some(p) = trainer.prompt() {
        fs::write(dir.join(TEMPLATE_TXT), p.template.source())?;
        fs::write(dir.join(VERBALIZER_TSV), p.verbalizer.to_file_string())?;
    }
    save_checkpoint(trainer.model(), &dir.join(MODEL_CKPT), false)?;
    if trainer.model().adapters().is_some() {
        save_checkpoint(trainer.model(), &dir.join(ADAPTERS_CKPT), true)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub val_acc: (f64, f64),
    pub val_macro_f1: (f64, f64),
    pub test_acc: (f64, f64),
    pub test_macro_f1: (f64, f64),
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs `repeats` seeds (seed, seed+1, ...) on up to `PEFTT_THREADS` worker
/// threads, each into `out/run-<i>`, and writes `summary.json`.
pub fn train_repeats(config: &RunConfig) -> Result<Vec<TrainReport>> {
    if config.repeats == 1 {
        return Ok(vec![train_run(config, &config.out)?]);
    }
    let base = config.scenario.hyper.seed;
    let jobs: Vec<(usize, RunConfig)> = (0..config.repeats)
        .map(|i| (i, config.with_seed(base + i as u64)))
        .collect();
    let threads = worker_threads().min(jobs.len()).max(1);
    let mut results: Vec<Option<Result<TrainReport>>> = (0..jobs.len()).map(|_| None).collect();
    for wave in jobs.chunks(threads) {
        let out = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|(i, cfg)| {
                    let dir = config.out.join(format!("run-{i}"));
                    scope.spawn(move || (*i, train_run(cfg, &dir)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, r) in out {
            results[i] = Some(r);
        }
    }
    let reports = results
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&TrainReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let summary = RepeatSummary {
        runs: reports.len(),
        seeds: (0..config.repeats as u64).map(|i| base + i).collect(),
        val_acc: col(|r| r.val_acc),
        val_macro_f1: col(|r| r.val_macro_f1),
        test_acc: col(|r| r.test_acc),
        test_macro_f1: col(|r| r.test_macro_f1),
    };
    fs::write(config.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(reports)
}

/// Scores a run directory's checkpoint on one split.
/// The frozen base of a run, regenerated from its seeds the way training
/// built it. Adapter-only checkpoints are applied on top of this.
fn rebuild_base(scenario: &Scenario, report: &TrainReport, n_classes: usize) -> Result<EncoderModel> {
    let head = if scenario.mode.uses_prompt() {
        HeadKind::Mlm { tied: false }
    } else {
        HeadKind::Classifier { n_classes }
    };
    let seed = scenario.hyper.seed;
    let config = EncoderConfig {
        vocab_size: report.vocab_size_before,
        ..report.config
    };
    let mut model = EncoderModel::new(config, head, seed)?;
    model.resize_embeddings(report.config.vocab_size, seed.wrapping_add(1))?;
    Ok(model)
}

pub fn eval_run(dir: &Path, split_name: &str, checkpoint: Option<&Path>) -> Result<Evaluation> {
    let config: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join(RUN_JSON))?)?;
    let corpus = config.corpus()?;
    let tokenizer = Tokenizer::new(Vocabulary::load(&dir.join(VOCAB_TXT))?);
    let label_names = load_label_map(&dir.join(LABELS_TXT))?;
    if label_names != corpus.label_names {
        return Err(invalid("corpus labels differ from the run's label map"));
    }
    let ckpt = Checkpoint::load(checkpoint.unwrap_or(&dir.join(MODEL_CKPT)))?;
    let model = if ckpt.get("embeddings.token").is_some() {
        load_model(&ckpt)?
    } else {
        let report: TrainReport = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_JSON))?)?;
        let mut base = rebuild_base(&config.scenario, &report, label_names.len())?;
        apply_adapters(&mut base, &ckpt)?;
        base
    };
    let examples = match split_name {
        "train" => &corpus.train,
        "validation" | "val" | "dev" => &corpus.validation,
        "test" => &corpus.test,
        other => return Err(invalid(format!("unknown split `{other}`"))),
    };
    let (template, verbalizer) = if config.scenario.mode.uses_prompt() {
        let t = Template::load(&dir.join(TEMPLATE_TXT))?;
        let v = Verbalizer::load(&dir.join(VERBALIZER_TSV))?.resolve(&tokenizer, &label_names)?;
        (Some(t), Some(v))
    } else {
        (None, None)
    };
    let inputs = encode_examples(examples, template.as_ref(), &tokenizer, config.scenario.hyper.max_len)?;
    evaluate(&model, &inputs, verbalizer.as_ref(), label_names.len())
}

fn account(args: &AccountArgs) -> Result<String> {
    let rows = match (&args.scenario, &args.model) {
        (Some(s), _) => {
            let name = ScenarioName::parse(s)?;
            vec![ratio_report(&AccountingTarget::Catalog(name.model_key), name.mode, args.rank)?]
        }
        (None, Some(model)) => {
            if catalog_entry(model).is_none() {
                let keys: Vec<&str> = model_catalog().iter().map(|e| e.key).collect();
                return Err(invalid(format!("unknown model `{model}` (known: {})", keys.join(", "))));
            }
            let modes = match &args.mode {
                Some(m) => vec![m.parse::<Mode>()?],
                None => Mode::ALL.to_vec(),
            };
            modes
                .into_iter()
                .map(|m| ratio_report(&AccountingTarget::Catalog(model.clone()), m, args.rank))
                .collect::<Result<Vec<_>>>()?
        }
        (None, None) => {
            let mut rows = published_table(args.rank);
            if let Some(m) = &args.mode {
                let m: Mode = m.parse()?;
                rows.retain(|r| r.mode == m);
            }
            rows
        }
    };
    if args.json {
        Ok(serde_json::to_string_pretty(&rows)? + "\n")
    } else {
        Ok(render_table(&rows))
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let (c, n) = parse_synthetic(&args.corpus)
        .ok_or_else(|| invalid(format!("expected synthetic:CxN, got `{}`", args.corpus)))?;
    let spec = SyntheticSpec {
        class_weights: args.weights.clone(),
        ..SyntheticSpec::default()
    };
    let s = synthetic_splits(c, n, &spec, args.seed)?;
    fs::create_dir_all(&args.out)?;
    write_tsv(&args.out.join("train.tsv"), &s.train, &s.label_names)?;
    write_tsv(&args.out.join("validation.tsv"), &s.validation, &s.label_names)?;
    write_tsv(&args.out.join("test.tsv"), &s.test, &s.label_names)?;
    save_label_map(&args.out.join(LABELS_TXT), &s.label_names)?;
    let p = PromptSpec::default_for(&s.label_names)?;
    fs::write(args.out.join(TEMPLATE_TXT), p.template.source())?;
    fs::write(args.out.join(VERBALIZER_TSV), p.verbalizer.to_file_string())?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = RunConfig::from_args(&args)?;
            let reports = train_repeats(&config)?;
            for r in &reports {
                print!("{}", r.to_table());
            }
        }
        Command::Eval(args) => {
            let e = eval_run(&args.out, &args.split, args.checkpoint.as_deref())?;
            println!(
                "{}",
                serde_json::json!({ "split": args.split, "accuracy": e.accuracy, "macro_f1": e.macro_f1 })
            );
        }
        Command::Account(args) => print!("{}", account(&args)?),
        Command::Synth(args) => synth(&args)?,
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code; failures print one line to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
