//! Command-line front end. Machine-readable output is JSON on standard
//! output; failures are one JSON line on standard error with exit status
//! 1 (usage), 2 (data) or 3 (numeric).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::encoder::{Checkpoint, Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::lexkb::LexicalKB;
use crate::numcore::{check_gradients_by, GradCheckReport, Rng};
use crate::prior::PriorMode;
use crate::robustness::{
    builtin_lexicon, gen_synthetic, gen_synthetic_splits, transform_dataset, SplitSpec, TemplateBank, TransformKind,
};
use crate::textio::{LabeledDataset, TokenizedPair, Vocab};
use crate::trainer::{evaluate, log_to_jsonl, train, TrainConfig};
use crate::Model;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "knowfuse", version, about = "Knowledge-infused attention for sentence pairs")]
pub struct Cli {
    /// Also print a human-readable summary line after the JSON output.
    #[arg(long, global = true)]
    pub human: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Knowledge-base utilities.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Emit the prior matrix of every pair as JSON lines.
    Prior {
        kb: PathBuf,
        pairs: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        kappa: Option<f64>,
        /// Embeddings come from this checkpoint; otherwise from a fresh model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train from a run configuration.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval { ckpt: PathBuf, data: PathBuf, kb: PathBuf },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Per-token gate traces for each pair.
    Inspect {
        ckpt: PathBuf,
        pairs: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Apply a lexical transform to the second text of every pair.
    Transform {
        #[arg(value_enum)]
        kind: TransformArg,
        data: PathBuf,
        kb: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.swaps.jsonl`.
        #[arg(long)]
        swaps: Option<PathBuf>,
    },
    /// Write lexically disjoint synthetic train/val/test splits.
    Synth {
        kb: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum KbAction {
    /// Validate a KB file and print relation counts.
    Check { kb: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Raw,
    Boost,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TransformArg {
    SwapAnt,
    SwapSyn,
}

/// Dataset locations of a run. Relative paths resolve against the
/// configuration file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub kb: Option<PathBuf>,
    #[serde(default = "one")]
    pub min_freq: usize,
}

fn one() -> usize {
    1
}

/// Contents of a `train`/`gradcheck` configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            fix(&mut d.train);
            fix(&mut d.val);
            d.test.as_mut().map(fix);
            d.kb.as_mut().map(fix);
        }
        cfg.output_dir.as_mut().map(fix);
        cfg.encoder.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_string_pretty(self)?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::Shape { .. } => "shape",
        Error::NonFinite(_) => "non_finite",
        Error::Data(_) => "data",
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

fn report_error(err: &mut dyn Write, kind: &str, message: &str, code: i32) -> i32 {
    let line = json!({ "error": kind, "message": message, "exit_code": code });
    let _ = writeln!(err, "{line}");
    code
}

/// Parses `args` and runs the command; returns the exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            return report_error(err, "usage", first.trim_start_matches("error: "), 1);
        }
    };
    match dispatch(&cli, out) {
        Ok(0) => 0,
        Ok(code) => code,
        Err(e) => report_error(err, error_kind(&e), &e.to_string(), e.exit_code()),
    }
}

fn emit(out: &mut dyn Write, value: &Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| Error::io("<stdout>", e))
}

fn human(cli: &Cli, out: &mut dyn Write, line: String) -> Result<()> {
    if cli.human {
        writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Kb {
            action: KbAction::Check { kb },
        } => {
            let counts = LexicalKB::load(kb)?.counts();
            emit(out, &serde_json::to_value(counts)?)?;
            human(
                cli,
                out,
                format!(
                    "{} lemmas: {} synonym, {} antonym, {} hypernym, {} hyponym",
                    counts.lemmas, counts.synonym, counts.antonym, counts.hypernym, counts.hyponym
                ),
            )?;
            Ok(0)
        }
        Command::Prior {
            kb,
            pairs,
            gamma,
            mode,
            kappa,
            ckpt,
            seed,
        } => {
            let kb = LexicalKB::load(kb)?;
            let data = load_pairs(pairs)?;
            let mut model = match ckpt {
                Some(p) => Model::from_checkpoint(&Checkpoint::load(p)?)?,
                None => {
                    let vocab = Vocab::build(&data, 1)?;
                    let cfg = EncoderConfig {
                        seed: *seed,
                        ..EncoderConfig::default()
                    };
                    Model::new(cfg, vocab)?
                }
            };
            if let Some(g) = gamma {
                model.config.gamma = *g;
            }
            if let Some(k) = kappa {
                model.config.kappa = *k;
            }
            if let Some(m) = mode {
                model.config.prior_mode = match m {
                    ModeArg::Raw => PriorMode::Raw,
                    ModeArg::Boost => PriorMode::Boost,
                };
            }
            model.config.validate()?;
            for pair in encode_all(&model, &data)? {
                let h0 = model.embed(&pair)?;
                let (_, prior) = model.build_prior(&h0, &pair, &kb)?;
                emit(out, &prior.to_json())?;
            }
            Ok(0)
        }
        Command::Train { config } => cmd_train(cli, config, out),
        Command::Eval { ckpt, data, kb } => {
            let model = Model::from_checkpoint(&Checkpoint::load(ckpt)?)?;
            let kb = LexicalKB::load(kb)?;
            let data = LabeledDataset::load(data, model.config.n_classes)?;
            let metrics = evaluate(&model, &encode_all(&model, &data)?, &kb)?;
            emit(out, &serde_json::to_value(&metrics)?)?;
            human(
                cli,
                out,
                format!("accuracy {:.4} loss {:.4} on {} examples", metrics.accuracy, metrics.loss, metrics.examples),
            )?;
            Ok(0)
        }
        Command::Gradcheck { config, eps, tol } => {
            let cfg = RunConfig::load(config)?;
            let report = gradcheck_run(&cfg, *eps, *tol)?;
            emit(out, &serde_json::to_value(&report)?)?;
            human(
                cli,
                out,
                format!(
                    "max relative error {:.3e} over {} tensors: {}",
                    report.max_rel_err,
                    report.tensors.len(),
                    if report.passed { "pass" } else { "FAIL" }
                ),
            )?;
            Ok(if report.passed { 0 } else { 3 })
        }
        Command::Inspect { ckpt, pairs, kb } => {
            let model = Model::from_checkpoint(&Checkpoint::load(ckpt)?)?;
            let kb = match kb {
                Some(p) => LexicalKB::load(p)?,
                None => LexicalKB::empty(),
            };
            let data = load_pairs(pairs)?;
            for (ex, pair) in data.examples().iter().zip(encode_all(&model, &data)?) {
                emit(out, &inspect_pair(&model, &pair, &kb, &ex.text_a, &ex.text_b)?)?;
            }
            Ok(0)
        }
        Command::Transform {
            kind,
            data,
            kb,
            seed,
            out: out_path,
            swaps,
        } => {
            let kb = LexicalKB::load(kb)?;
            let input = LabeledDataset::load(data, 2)?;
            let kind = match kind {
                TransformArg::SwapAnt => TransformKind::SwapAnt,
                TransformArg::SwapSyn => TransformKind::SwapSyn,
            };
            let result = transform_dataset(&input, &kb, kind, *seed)?;
            let swaps_path = swaps.clone().unwrap_or_else(|| sibling(out_path, "swaps.jsonl"));
            write_file(out_path, &result.dataset.to_tsv())?;
            write_file(&swaps_path, &result.swaps_jsonl()?)?;
            let summary = json!({
                "emitted": result.pairs.len(),
                "skipped": result.skipped,
                "out": out_path,
                "swaps": swaps_path,
            });
            emit(out, &summary)?;
            Ok(0)
        }
        Command::Synth {
            kb,
            n,
            seed,
            out_dir,
            templates,
        } => {
            let kb_data = LexicalKB::load(kb)?;
            let bank = match templates {
                Some(p) => TemplateBank::load(p)?,
                None => TemplateBank::builtin(),
            };
            let splits = gen_synthetic_splits(&kb_data, *n, &bank, SplitSpec::default(), *seed)?;
            let mut outputs = Vec::new();
            for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
                let p = out_dir.join(format!("{name}.tsv"));
                write_file(&p, &d.to_tsv())?;
                outputs.push(p);
            }
            let mut inputs = vec![kb.clone()];
            inputs.extend(templates.clone());
            let manifest = RunManifest {
                artifact_version: ARTIFACT_VERSION.into(),
                command: "synth".into(),
                seed: *seed,
                config: json!({ "n": n, "split": SplitSpec::default() }),
                inputs,
                outputs: outputs.clone(),
            };
            manifest.write(&out_dir.join("manifest.json"))?;
            let sizes = json!({
                "train": splits.train.len(),
                "val": splits.val.len(),
                "test": splits.test.len(),
                "outputs": outputs,
            });
            emit(out, &sizes)?;
            Ok(0)
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Reads pairs as `text_a<TAB>text_b` or `label<TAB>text_a<TAB>text_b`.
fn load_pairs(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let normalized: String = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            if l.split('\t').count() == 2 {
                format!("0\t{l}\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    let data = LabeledDataset::parse(&normalized, &path.display().to_string(), usize::MAX)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: no pairs", path.display())));
    }
    Ok(data)
}

fn encode_all(model: &Model, data: &LabeledDataset) -> Result<Vec<TokenizedPair>> {
    data.encode(&model.vocab, model.config.max_a, model.config.max_b)
}

/// Gate traces of one pair as JSON.
pub fn inspect_pair(model: &Model, pair: &TokenizedPair, kb: &LexicalKB, text_a: &str, text_b: &str) -> Result<Value> {
    let fwd = model.forward(pair, kb, Dropout::Off)?;
    let tokens: Vec<&str> = pair.ids.iter().map(|&id| model.vocab.token(id).unwrap_or("[UNK]")).collect();
    let surface: Vec<String> = std::iter::once("[CLS]".to_owned())
        .chain(pair.lemmas_a.iter().cloned())
        .chain(std::iter::once("[SEP]".to_owned()))
        .chain(pair.lemmas_b.iter().cloned())
        .chain(std::iter::once("[SEP]".to_owned()))
        .collect();
    let layers: Vec<Value> = fwd
        .traces()
        .into_iter()
        .enumerate()
        .map(|(l, heads)| {
            let heads: Vec<Value> = heads
                .into_iter()
                .enumerate()
                .map(|(h, trace)| {
                    let rows: Vec<Value> = trace
                        .iter()
                        .map(|t| {
                            json!({
                                "pos": t.pos,
                                "token": surface[t.pos],
                                "vocab_token": tokens[t.pos],
                                "g_fuse": t.g_fuse,
                                "g_filter": t.g_filter,
                            })
                        })
                        .collect();
                    json!({ "head": h, "tokens": rows })
                })
                .collect();
            json!({ "layer": l, "heads": heads })
        })
        .collect();
    let probs: Vec<f64> = fwd.probs.clone();
    Ok(json!({
        "text_a": text_a,
        "text_b": text_b,
        "predicted": fwd.predicted(),
        "probs": probs,
        "mean_g_filter": fwd.mean_g_filter(),
        "layers": layers,
    }))
}

/// The two pairs checked by `gradcheck`: the first two training examples
/// when the configuration names data, otherwise two synthetic pairs from
/// the bundled lexicon. The vocabulary covers exactly these pairs.
pub fn gradcheck_batch(cfg: &RunConfig) -> Result<(Model, Vec<TokenizedPair>, LexicalKB)> {
    let (data, kb) = match &cfg.data {
        Some(d) => {
            let data = LabeledDataset::load(&d.train, cfg.encoder.n_classes)?;
            let kb = match &d.kb {
                Some(p) => LexicalKB::load(p)?,
                None => LexicalKB::empty(),
            };
            (data, kb)
        }
        None => {
            let kb = builtin_lexicon();
            let data = gen_synthetic(&kb, 2, &TemplateBank::builtin(), &mut Rng::new(cfg.encoder.seed))?;
            (data, kb)
        }
    };
    if data.len() < 2 {
        return Err(Error::Data("gradcheck needs at least two training examples".into()));
    }
    let batch_data = LabeledDataset::new(data.n_classes(), data.examples()[..2].to_vec())?;
    let vocab = Vocab::build(&batch_data, 1)?;
    let model = Model::new(cfg.encoder.clone(), vocab)?;
    let batch = encode_all(&model, &batch_data)?;
    Ok((model, batch, kb))
}

/// Gradient check of every parameter on [`gradcheck_batch`], with dropout
/// masks drawn from the encoder seed and weight decay off.
pub fn gradcheck_run(cfg: &RunConfig, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let (mut model, batch, kb) = gradcheck_batch(cfg)?;
    let dropout = Dropout::On { seed: cfg.encoder.seed };
    let (_, grads) = model.loss_and_grads(&batch, &kb, dropout)?;
    model.params.set_grads(grads)?;
    let cache = model.perturbation_cache(&batch, &kb, dropout)?;
    check_gradients_by(|p, changed| cache.loss(p, changed), &model.params, eps, tol)
}

fn cmd_train(cli: &Cli, config_path: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(config_path)?;
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("train needs a data section".into()))?;
    let out_dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("train needs output_dir".into()))?;
    let n_classes = cfg.encoder.n_classes;
    let train_set = LabeledDataset::load(&data.train, n_classes)?;
    let val_set = LabeledDataset::load(&data.val, n_classes)?;
    let kb = match &data.kb {
        Some(p) => LexicalKB::load(p)?,
        None => LexicalKB::empty(),
    };
    let vocab = Vocab::build(&train_set, data.min_freq)?;
    let model = Model::new(cfg.encoder.clone(), vocab)?;
    let tr = encode_all(&model, &train_set)?;
    let va = encode_all(&model, &val_set)?;
    let outcome = train(model, &tr, &va, &kb, &cfg.train)?;

    let ckpt_path = out_dir.join("checkpoint.json");
    let log_path = out_dir.join("metrics.jsonl");
    outcome.best.to_checkpoint().save_creating(&ckpt_path)?;
    write_file(&log_path, &log_to_jsonl(&outcome.log)?)?;
    let mut summary = json!({
        "best_step": outcome.best_step,
        "best_val_acc": outcome.best_val_acc,
        "switched_to_sgd_at": outcome.switched_to_sgd_at,
        "checkpoint": ckpt_path,
        "metrics_log": log_path,
    });
    let mut inputs = vec![config_path.to_path_buf(), data.train.clone(), data.val.clone()];
    inputs.extend(data.kb.clone());
    if let Some(test_path) = &data.test {
        let test_set = LabeledDataset::load(test_path, n_classes)?;
        let metrics = evaluate(&outcome.best, &encode_all(&outcome.best, &test_set)?, &kb)?;
        summary["test"] = serde_json::to_value(&metrics)?;
        inputs.push(test_path.clone());
    }
    let manifest_path = out_dir.join("manifest.json");
    RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        command: "train".into(),
        seed: cfg.train.seed,
        config: serde_json::to_value(&cfg)?,
        inputs,
        outputs: vec![ckpt_path, log_path, manifest_path.clone()],
    }
    .write(&manifest_path)?;
    emit(out, &summary)?;
    human(
        cli,
        out,
        format!("best validation accuracy {:.4} at step {}", outcome.best_val_acc, outcome.best_step),
    )?;
    Ok(0)
}

impl Checkpoint {
    fn save_creating(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }
}
