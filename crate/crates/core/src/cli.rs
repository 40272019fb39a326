//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::attention::PoolingMode;
use crate::dataset::Dataset;
use crate::decoder::Variant;
use crate::decoding::{decode_all, BeamOptions, DecodeError, LengthNorm, DEFAULT_BEAM_WIDTH};
use crate::experiment::{ablate, evaluate_model, ExperimentError, ABLATION_VARIANTS};
use crate::gradcheck::{check_block, check_config, Block};
use crate::io::{self, IoError};
use crate::metrics::{evaluate_corpus, pair_up, read_json_lines, CandidateLine, EvalReport, MetricError, ReferenceLine};
use crate::planted::{calibrate_sigma, planted_signal_benchmark, PlantedConfig, PlantedError};
use crate::synth::{generate_dataset, SynthConfig, SynthError, SynthSplit};
use crate::training::{fit, TrainConfig, TrainError};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const CHECKPOINT_NAME: &str = "model.rtdc";
pub const TRAIN_LOG_NAME: &str = "train_log.csv";
pub const VOCAB_NAME: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Ratios(_) | SynthError::TooFew(_) | SynthError::Width { .. } | SynthError::Noise(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, TrainError::Config(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Width | DecodeError::MaxLen | DecodeError::LengthNorm(_) => CliError::Usage(e.to_string()),
            DecodeError::Model(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(e) => e.into(),
            ExperimentError::Decode(e) => e.into(),
            ExperimentError::Metric(e) => e.into(),
            ExperimentError::NoSeeds => CliError::Usage(e.to_string()),
        }
    }
}

impl From<PlantedError> for CliError {
    fn from(e: PlantedError) -> Self {
        match e {
            PlantedError::Train(e) => e.into(),
            PlantedError::Tensor(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "restd", version, about = "Region-feature image captioning with residual top-down attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train, validation and test fractions, comma separated.
        #[arg(long)]
        ratios: Option<String>,
        /// JSON generator config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a captioning model.
    Train {
        /// Dataset directory or training manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// JSON training config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, default_value_t = 19)]
        max_len: usize,
    },
    /// Score a model on a dataset split, or score caption files.
    Eval {
        /// Dataset directory or manifest.
        #[arg(long, requires = "ckpt")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
        beam: usize,
        #[arg(long, default_value_t = LengthNorm::Off)]
        length_norm: LengthNorm,
        #[arg(long, default_value = "test")]
        split: String,
        /// Candidate captions as JSON lines `{"image_id", "caption"}`.
        #[arg(long, conflicts_with_all = ["data", "ckpt"], requires = "refs")]
        candidates: Option<PathBuf>,
        /// References as JSON lines `{"image_id", "refs"}`.
        #[arg(long, requires = "candidates")]
        refs: Option<PathBuf>,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Caption feature files.
    Caption {
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
        beam: usize,
        #[arg(long, default_value_t = 19)]
        max_len: usize,
    },
    /// Compare BU_Only, BU+Td and BU+ResTd over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
        beam: usize,
        #[arg(long, default_value_t = 19)]
        max_len: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every decoder block.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Planted-signal pooling benchmark.
    BenchPooling {
        #[arg(long)]
        mode: PoolingMode,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        /// Noise level; calibrated for average pooling at 60% when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn log_resolved<T: Serialize>(what: &str, value: &T) {
    log::info!("{what} config: {}", serde_json::to_string(value).expect("serializable"));
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// A dataset directory resolves to `<dir>/<split>.jsonl` and `<dir>/vocab.txt`;
/// a manifest file to itself and a `vocab.txt` beside it.
fn resolve_data(path: &Path, split: &str) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(format!("{split}.jsonl")), path.join(VOCAB_NAME))
    } else {
        let dir = path.parent().unwrap_or(Path::new(""));
        (path.to_path_buf(), dir.join(VOCAB_NAME))
    }
}

fn load_split(path: &Path, split: &str, max_len: usize) -> Result<Dataset, CliError> {
    let (manifest, vocab) = resolve_data(path, split);
    Ok(io::load_dataset(&manifest, io::load_vocab(&vocab)?, max_len)?)
}

fn parse_ratios(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--ratios {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| CliError::Usage(format!("--ratios needs three values, got {s:?}")))
}

fn emit_report(report: &EvalReport, path: Option<&Path>, out: &mut String) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("serializable");
    match path {
        Some(p) => write_text(p, &(json + "\n"))?,
        None => {
            out.push_str(&json);
            out.push('\n');
        }
    }
    out.push_str(&report.to_string());
    Ok(())
}

/// Runs one command and returns what it prints on standard output.
pub fn execute(command: Command) -> Result<String, CliError> {
    let mut out = String::new();
    match command {
        Command::GenData {
            count,
            out: dir,
            seed,
            ratios,
            config,
        } => {
            let mut cfg: SynthConfig = load_json(config.as_deref())?;
            cfg.count = count;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = ratios {
                cfg.ratios = parse_ratios(&r)?;
            }
            log_resolved("gen-data", &cfg);
            let data = generate_dataset(&cfg)?;
            let records = |s: &SynthSplit| -> Vec<_> {
                s.dataset
                    .examples
                    .iter()
                    .zip(&s.texts)
                    .map(|(e, t)| (e.features.clone(), t.clone()))
                    .collect()
            };
            for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
                io::write_records(&records(split), &dir.join(format!("{name}.jsonl")))?;
            }
            io::save_vocab(data.vocab(), &dir.join(VOCAB_NAME))?;
            write_text(&dir.join("synth_config.json"), &serde_json::to_string_pretty(&cfg).expect("serializable"))?;
            out.push_str(&format!(
                "wrote {} train, {} val, {} test scenes, vocabulary {} to {}\n",
                data.train.dataset.len(),
                data.val.dataset.len(),
                data.test.dataset.len(),
                data.vocab().len(),
                dir.display()
            ));
        }
        Command::Train {
            data,
            variant,
            config,
            out: dir,
            epochs,
            seed,
            learning_rate,
            max_len,
        } => {
            let mut cfg: TrainConfig = load_json(config.as_deref())?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            log_resolved("train", &cfg);
            let train = load_split(&data, "train", max_len)?;
            let (params, log) = fit(&train, &cfg)?;
            let ckpt = dir.join(CHECKPOINT_NAME);
            io::save_model(&params, &train.vocab, &ckpt)?;
            write_text(&dir.join(TRAIN_LOG_NAME), &log.to_csv())?;
            write_text(&dir.join("train_config.json"), &serde_json::to_string_pretty(&cfg).expect("serializable"))?;
            out.push_str(&format!(
                "final loss {:.6}, checkpoint {}\n",
                log.final_loss().unwrap_or(f64::NAN),
                ckpt.display()
            ));
        }
        Command::Eval {
            data,
            ckpt,
            beam,
            length_norm,
            split,
            candidates,
            refs,
            report,
        } => {
            let r = match (data, ckpt, candidates, refs) {
                (Some(data), Some(ckpt), None, None) => {
                    let (params, vocab) = io::load_model(&ckpt)?;
                    let (manifest, _) = resolve_data(&data, &split);
                    let ds = io::load_dataset(&manifest, vocab, params.config.max_len)?;
                    let opts = BeamOptions {
                        width: beam,
                        max_len: params.config.max_len,
                        length_norm,
                    };
                    log_resolved("eval", &opts);
                    evaluate_model(&params, &ds, &opts)?
                }
                (None, None, Some(c), Some(r)) => {
                    let open = |p: &Path| {
                        fs::File::open(p)
                            .map(std::io::BufReader::new)
                            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
                    };
                    let cands: Vec<CandidateLine> = read_json_lines(open(&c)?)?;
                    let refs: Vec<ReferenceLine> = read_json_lines(open(&r)?)?;
                    evaluate_corpus(&pair_up(&cands, &refs)?)?
                }
                _ => {
                    return Err(CliError::Usage(
                        "eval needs either --data and --ckpt, or --candidates and --refs".into(),
                    ))
                }
            };
            emit_report(&r, report.as_deref(), &mut out)?;
        }
        Command::Caption {
            features,
            ckpt,
            beam,
            max_len,
        } => {
            let (params, vocab) = io::load_model(&ckpt)?;
            let records = features.iter().map(|p| io::read_rtdf(p)).collect::<Result<Vec<_>, _>>()?;
            let opts = BeamOptions::new(beam, max_len);
            log_resolved("caption", &opts);
            let refs: Vec<_> = records.iter().collect();
            for (rec, cap) in records.iter().zip(decode_all(&refs, &params, &opts)?) {
                out.push_str(&format!("{}\t{}\n", rec.image_id(), vocab.render(cap.content())));
            }
        }
        Command::Ablate {
            data,
            seeds,
            config,
            epochs,
            beam,
            max_len,
            report,
        } => {
            let mut cfg: TrainConfig = load_json(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            log_resolved("ablate", &cfg);
            let train = load_split(&data, "train", max_len)?;
            let test = load_split(&data, "test", max_len)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let a = ablate(&train, &test, &cfg, &ABLATION_VARIANTS, &seeds, &BeamOptions::new(beam, max_len))?;
            if let Some(p) = report {
                write_text(&p, &(serde_json::to_string_pretty(&a).expect("serializable") + "\n"))?;
            }
            out.push_str(&format!("median over {} seeds\n", seeds.len()));
            out.push_str(&a.table());
        }
        Command::Gradcheck { seeds } => {
            let config = check_config();
            let mut failed = Vec::new();
            for block in Block::ALL {
                let mut worst = 0.0f64;
                for seed in 0..seeds {
                    let e = check_block(&config, block, seed).map_err(|e| CliError::Numerical(e.to_string()))?;
                    worst = worst.max(e);
                }
                let ok = worst < GRADCHECK_TOLERANCE;
                if !ok {
                    failed.push(block.as_str());
                }
                out.push_str(&format!(
                    "{:<10} max relative error {:.3e}  {}\n",
                    block.as_str(),
                    worst,
                    if ok { "ok" } else { "FAIL" }
                ));
            }
            if !failed.is_empty() {
                return Err(CliError::Numerical(format!(
                    "{out}gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
        Command::BenchPooling {
            mode,
            trials,
            sigma,
            seed,
            config,
        } => {
            let mut cfg: PlantedConfig = load_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.noise_sigma = match sigma {
                Some(s) => s,
                None => {
                    let (s, acc) = calibrate_sigma(&cfg, trials, 0.6, 14)?;
                    log::info!("calibrated sigma {s:.6} (average pooling {:.1}%)", 100.0 * acc);
                    s
                }
            };
            log_resolved("bench-pooling", &cfg);
            let acc = planted_signal_benchmark(mode, trials, &cfg)?;
            out.push_str(&format!(
                "{mode} accuracy {:.2}% (sigma {:.6}, {trials} trials)\n",
                100.0 * acc,
                cfg.noise_sigma
            ));
        }
    }
    Ok(out)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
