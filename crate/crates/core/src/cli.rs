//! Command-line front end: `encode-vocab`, `detect`, `reparam-verify`,
//! `label`, `grad-check`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or validation
//! error. `OVW_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autolabel::{extract_nouns, run_pipeline, CaptionSample, FixtureSet, LabelConfig};
use crate::detect::{detect, random_image, DetectConfig, ModelParams};
use crate::error::{input_err, Error, Result};
use crate::grad::{grad_check, GradCheckRow, GradOp, DEFAULT_EPS, EPS_RANGE};
use crate::io::{read_json_lines, write_atomic};
use crate::pan::{check_dims, LayerId};
use crate::reparam::{verify_equivalence, VerifyOptions};
use crate::tensor::Tensor;
use crate::text::{load_embeddings, toy_encode, EmbeddingsFile, TextEmbeddings, DEFAULT_VOCAB_SIZE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const THREADS_ENV: &str = "OVW_THREADS";

/// Settings shared by all commands, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dim: usize,
    pub n_bins: usize,
    pub heads: usize,
    pub m: usize,
    pub image_size: usize,
    pub nms_thresh: f64,
    pub conf_thresh: f64,
    pub img_thresh: f64,
    pub score_thresh: f64,
    pub max_detections: usize,
    pub reparam_tol: f64,
    pub trials: usize,
    pub eps: f64,
    pub seed: u64,
    pub relabel: bool,
    pub box_accurate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_bins: crate::head::DEFAULT_BINS,
            heads: 4,
            m: DEFAULT_VOCAB_SIZE,
            image_size: crate::detect::DEFAULT_IMAGE_SIZE,
            nms_thresh: 0.5,
            conf_thresh: 0.3,
            img_thresh: 0.3,
            score_thresh: 0.5,
            max_detections: 100,
            reparam_tol: 1e-6,
            trials: 100,
            eps: DEFAULT_EPS,
            seed: 0,
            relabel: false,
            box_accurate: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| input_err(format!("config {key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| input_err(format!("config line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dim" => self.dim = parse_value(key, v)?,
            "n_bins" => self.n_bins = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "m" => self.m = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "nms_thresh" => self.nms_thresh = parse_value(key, v)?,
            "conf_thresh" => self.conf_thresh = parse_value(key, v)?,
            "img_thresh" => self.img_thresh = parse_value(key, v)?,
            "score_thresh" => self.score_thresh = parse_value(key, v)?,
            "max_detections" => self.max_detections = parse_value(key, v)?,
            "reparam_tol" => self.reparam_tol = parse_value(key, v)?,
            "trials" => self.trials = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "relabel" => self.relabel = parse_value(key, v)?,
            "box_accurate" => self.box_accurate = parse_value(key, v)?,
            _ => return Err(input_err(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.dim, self.heads)?;
        if self.n_bins < 2 {
            return Err(input_err("n_bins must be at least 2"));
        }
        if self.m == 0 {
            return Err(input_err("m must be positive"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) || self.image_size < 96 {
            return Err(input_err("image_size must be a multiple of 32 and at least 96"));
        }
        for (name, v) in [
            ("nms_thresh", self.nms_thresh),
            ("conf_thresh", self.conf_thresh),
            ("img_thresh", self.img_thresh),
            ("score_thresh", self.score_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(input_err(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.reparam_tol > 0.0) {
            return Err(input_err("reparam_tol must be positive"));
        }
        if !EPS_RANGE.contains(&self.eps) {
            return Err(input_err(format!("eps {} outside [{:e}, {:e}]", self.eps, EPS_RANGE.start(), EPS_RANGE.end())));
        }
        Ok(())
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            nms_thresh: self.nms_thresh,
            conf_thresh: self.conf_thresh,
            img_thresh: self.img_thresh,
            relabel: self.relabel,
            box_accurate: self.box_accurate,
        }
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig { score_thresh: self.score_thresh, nms_thresh: self.nms_thresh, max_detections: self.max_detections }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ovw", about = "Open-vocabulary detection toolkit", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode nouns (or nouns extracted from captions) into an embeddings file.
    EncodeVocab {
        /// JSON array of nouns, an embeddings file, or caption JSON lines with --captions.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        captions: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run offline-vocabulary detection on one image.
    Detect {
        #[arg(long)]
        vocab: PathBuf,
        /// Model parameters JSON; seeded from the config when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        /// `H×W×3` tensor JSON; a seeded random image when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check the folded deployment network against the plain one.
    ReparamVerify {
        #[arg(long)]
        params: Option<PathBuf>,
        /// Vocabulary embeddings; `m` toy nouns when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Perturb the folded kernels of one layer (fault injection).
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pseudo-label a caption dataset with scripted detector and scorer.
    Label {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        relabel: bool,
        /// Annotations JSON lines.
        #[arg(long)]
        out: PathBuf,
        /// Report path; defaults to the annotations path with `.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        /// Comma-separated ops; all when absent.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        /// Number of seeds per op, starting at --seed.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    Ok(c)
}

fn schema<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Schema(format!("{what}: {e}"))
}

pub fn encode_vocab(input: &Path, captions: bool, cfg: &RunConfig) -> Result<TextEmbeddings> {
    if captions {
        let samples: Vec<CaptionSample> = read_json_lines(input)?;
        let mut nouns: Vec<String> = Vec::new();
        for s in &samples {
            for n in extract_nouns(&s.caption)? {
                if !nouns.contains(&n) {
                    nouns.push(n);
                }
            }
        }
        return toy_encode(&nouns, cfg.dim, cfg.seed);
    }
    let text = std::fs::read_to_string(input)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(schema("noun file"))?;
    if value.is_array() {
        let nouns: Vec<String> = serde_json::from_value(value).map_err(schema("noun list"))?;
        toy_encode(&nouns, cfg.dim, cfg.seed)
    } else {
        let _: EmbeddingsFile = serde_json::from_value(value).map_err(schema("embeddings"))?;
        TextEmbeddings::from_json(&text)
    }
}

fn model_params(path: Option<&Path>, cfg: &RunConfig) -> Result<ModelParams> {
    match path {
        Some(p) => ModelParams::load(p),
        None => ModelParams::seeded(cfg.dim, cfg.heads, cfg.n_bins, cfg.seed),
    }
}

fn default_report_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "annotations".into());
    out.with_file_name(format!("{stem}.report.json"))
}

#[derive(Debug, Serialize)]
struct GradReport<'a> {
    eps: f64,
    tol: f64,
    passed: bool,
    rows: &'a [GradCheckRow],
}

fn json_pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Runs one parsed command; returns the exit code for non-error outcomes.
pub fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::EncodeVocab { input, captions, out, common } => {
            let cfg = load_config(common)?;
            let emb = encode_vocab(input, *captions, &cfg)?;
            write_atomic(out, emb.to_json()?.as_bytes())?;
            log::info!("wrote {} nouns to {}", emb.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Detect { vocab, params, image, out, common } => {
            let cfg = load_config(common)?;
            let emb = load_embeddings(vocab)?;
            let p = model_params(params.as_deref(), &cfg)?;
            let (image_id, img) = match image {
                Some(path) => {
                    let t: Tensor = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(schema("image"))?;
                    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (id, t)
                }
                None => (format!("seed-{}", cfg.seed), random_image(cfg.image_size, cfg.seed)),
            };
            let dets = detect(&image_id, &img, &emb, &p, &cfg.detect_config())?;
            write_atomic(out, dets.to_json()?.as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::ReparamVerify { params, vocab, trials, tol, corrupt, out, common } => {
            let cfg = load_config(common)?;
            let p = model_params(params.as_deref(), &cfg)?;
            let emb = match vocab {
                Some(v) => load_embeddings(v)?,
                None => {
                    let nouns: Vec<String> = (0..cfg.m).map(|i| format!("noun{i}")).collect();
                    toy_encode(&nouns, p.dim(), cfg.seed)?
                }
            };
            let corrupt = match corrupt {
                Some(name) => Some(LayerId::parse(name).ok_or_else(|| input_err(format!("unknown layer {name:?}")))?),
                None => None,
            };
            let opts = VerifyOptions {
                trials: trials.unwrap_or(cfg.trials),
                tol: tol.unwrap_or(cfg.reparam_tol),
                seed: cfg.seed,
                corrupt,
            };
            let report = verify_equivalence(&p.fusion, &emb, opts)?;
            let json = json_pretty(&report)?;
            print!("{json}");
            if let Some(o) = out {
                write_atomic(o, json.as_bytes())?;
            }
            Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Label { dataset, fixtures, relabel, out, report, common } => {
            let mut cfg = load_config(common)?;
            cfg.relabel |= *relabel;
            let samples: Vec<CaptionSample> = read_json_lines(dataset).map_err(schema("dataset"))?;
            let fx = FixtureSet::load(fixtures)?;
            let result = run_pipeline(&samples, &fx, &fx, &cfg.label_config())?;
            write_atomic(out, result.annotations_jsonl()?.as_bytes())?;
            let report_path = report.clone().unwrap_or_else(|| default_report_path(out));
            write_atomic(&report_path, result.report_json()?.as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::GradCheck { ops, trials, eps, tol, out, common } => {
            let cfg = load_config(common)?;
            let ops: Vec<GradOp> = if ops.is_empty() {
                GradOp::ALL.to_vec()
            } else {
                ops.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let eps = eps.unwrap_or(cfg.eps);
            let tol = tol.unwrap_or(1e-4);
            let n = trials.unwrap_or(cfg.trials);
            if n == 0 {
                return Err(input_err("trials must be at least 1"));
            }
            let jobs: Vec<(GradOp, u64)> =
                ops.iter().flat_map(|&op| (0..n as u64).map(move |i| (op, cfg.seed + i))).collect();
            use rayon::prelude::*;
            let rows: Vec<GradCheckRow> = jobs.par_iter().map(|&(op, s)| grad_check(op, s, eps)).collect::<Result<_>>()?;
            let passed = rows.iter().all(|r| r.max_rel_error < tol);
            let json = json_pretty(&GradReport { eps, tol, passed, rows: &rows })?;
            match out {
                Some(o) => write_atomic(o, json.as_bytes())?,
                None => print!("{json}"),
            }
            Ok(if passed { EXIT_OK } else { EXIT_VERIFY })
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| input_err(format!("{THREADS_ENV}={v:?} is not a number")))?;
        if n == 0 {
            return Err(input_err(format!("{THREADS_ENV} must be at least 1")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Pipeline(format!("thread pool: {e}")))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = thread_pool().and_then(|pool| pool.install(|| execute(&cli.command)));
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
