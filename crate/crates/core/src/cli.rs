//! The `mupax` command line.
//!
//! Settings resolve as flags, then `--config` JSON, then defaults. Every
//! run writes `manifest.json` holding the resolved settings; passing it back
//! through `--config` repeats the run.
//!
//! Exit codes: 0 ok, 1 other failure, 2 usage or I/O, 3 budget exhausted
//! (partial outputs are still written), 4 configuration mismatch,
//! 5 bridge protocol failure. Failures print one JSON line on stderr.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;

use crate::attribution::{threshold_mask, SaliencyMap};
use crate::bridge::server::{echo_handler, predictor_handler, BridgeServer, ServerOptions};
use crate::bridge::{conformance_check, timeout_from_env, BridgeClient, BridgeError, BridgePredictor};
use crate::chunking::{build_grid, ChunkGrid};
use crate::distribution::sample_rng;
use crate::eval::{
    deletion_faithfulness, mass_share, run_two_class_eval, DeletionOrder, TwoClassEvalConfig,
    TwoClassTask,
};
use crate::models::{PlantedModel, PlantedModelSpec, PlantedSpecFile, Predictor, SumLoss};
use crate::oracle::{self, crosscheck, OracleError};
use crate::pipeline::{explain, ExplainConfig};
use crate::sampler::{calibrate_threshold, Engine, SamplerConfig, SamplerError};
use crate::tensor::{load_tensor, save_tensor, InputTensor, TensorError};
use crate::attribution::AttributionError;
use crate::Error;

#[derive(Parser, Debug)]
#[command(name = "mupax", version, about = "Perturbation-based attribution for N-dimensional inputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Attribute one input and write the saliency map
    Attribute {
        #[command(flatten)]
        run: RunArgs,
        /// Also write a binary chunk mask at this percentile
        #[arg(long)]
        mask_percentile: Option<f64>,
        /// Comma-separated deletion fractions; writes deletion.csv
        #[arg(long, value_delimiter = ',')]
        deletion: Vec<f64>,
    },
    /// Exact map by enumerating every admissible mask (at most 20 chunks)
    Oracle {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare a sampled map against an exact one
    Crosscheck {
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        mc: PathBuf,
        /// Coverage band in standard errors
        #[arg(long, default_value_t = 3.0)]
        k: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full versus masked classification on the synthetic two-class task
    Eval {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 256)]
        calibration: usize,
        #[arg(long, default_value_t = 20.0)]
        percentile_w: f64,
        #[arg(long, default_value_t = 50.0)]
        mask_percentile: f64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun attribution over chunk shapes × sample targets × percentiles
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Semicolon-separated chunk shapes, e.g. `4,4;2,2`; defaults to --chunk
        #[arg(long)]
        chunks: Option<String>,
        /// Comma-separated sample targets; defaults to --samples
        #[arg(long, value_delimiter = ',')]
        targets: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 20.0, 50.0])]
        percentiles: Vec<f64>,
    },
    /// Check a model bridge endpoint against the golden frames
    BridgeCheck {
        #[arg(long, default_value = "127.0.0.1:7341")]
        endpoint: String,
        /// Expect the echo loss (sum of the input)
        #[arg(long)]
        echo: bool,
    },
    /// Serve a built-in model over the bridge protocol
    BridgeServe {
        #[arg(long, default_value = "127.0.0.1:7341")]
        bind: String,
        /// `echo` or `planted:<file.json>`
        #[arg(long, default_value = "echo")]
        predictor: String,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_batch: u32,
    },
    /// Write a random input and a planted model over it
    Plant {
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        chunk: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        relevant: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        noise: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// `sum`, `planted:<file.json>` or `bridge:<host:port>`
    #[arg(long)]
    pub predictor: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub chunk: Option<Vec<usize>>,
    /// Accepted samples to collect
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub calibration: Option<usize>,
    #[arg(long)]
    pub percentile_w: Option<f64>,
    /// Explicit threshold; skips calibration (`inf` accepts everything)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Cap on rejection-phase evaluations
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved settings; also the manifest and config-file format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub input: Option<PathBuf>,
    pub predictor: Option<String>,
    pub chunk: Option<Vec<usize>>,
    pub samples: Option<usize>,
    pub calibration: Option<usize>,
    pub percentile_w: Option<f64>,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: Option<f64>,
    pub cap: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub mask_percentile: Option<f64>,
}

fn ser_threshold<S: Serializer>(w: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match w {
        Some(v) if v.is_infinite() => s.serialize_str("inf"),
        Some(v) => s.serialize_f64(*v),
        None => s.serialize_none(),
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(v)) => Ok(Some(v)),
        Some(Raw::Text(t)) => t.parse().map(Some).map_err(serde::de::Error::custom),
    }
}

impl RunSettings {
    fn from_args(args: &RunArgs, mask_percentile: Option<f64>) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str::<RunSettings>(&text)
                    .map_err(|e| CliError::usage("BadConfig", format!("{}: {e}", path.display())))?
            }
            None => RunSettings::default(),
        };
        let defaults = SamplerConfig::default();
        Ok(Self {
            input: args.input.clone().or(file.input),
            predictor: args.predictor.clone().or(file.predictor),
            chunk: args.chunk.clone().or(file.chunk),
            samples: args.samples.or(file.samples).or(Some(defaults.n_target)),
            calibration: args.calibration.or(file.calibration).or(Some(defaults.n_calibration)),
            percentile_w: args.percentile_w.or(file.percentile_w).or(Some(defaults.percentile_w)),
            threshold: args.threshold.or(file.threshold),
            cap: args.cap.or(file.cap),
            batch_size: args.batch_size.or(file.batch_size).or(Some(defaults.batch_size)),
            seed: args.seed.or(file.seed).or(Some(defaults.seed)),
            workers: args.workers.or(file.workers).or(Some(1)),
            mask_percentile: mask_percentile.or(file.mask_percentile),
        })
    }

    fn explain_config(&self) -> ExplainConfig {
        let defaults = SamplerConfig::default();
        let sampler = SamplerConfig {
            n_target: self.samples.unwrap_or(defaults.n_target),
            n_calibration: self.calibration.unwrap_or(defaults.n_calibration),
            percentile_w: self.percentile_w.unwrap_or(defaults.percentile_w),
            n_total_cap: self.cap,
            seed: self.seed.unwrap_or(defaults.seed),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
        };
        ExplainConfig {
            sampler,
            threshold: self.threshold,
            workers: self.workers.unwrap_or(1),
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl CliError {
    fn usage(kind: &str, message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: kind.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self::usage(&format!("{:?}", e.kind()), format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        json!({"error": self.kind, "message": self.message, "exit_code": self.code}).to_string()
    }
}

fn bridge_kind(e: &BridgeError) -> &'static str {
    match e {
        BridgeError::Protocol(_) => "Protocol",
        BridgeError::ConnectionLost(_) => "ConnectionLost",
        BridgeError::ServerError(_) => "ServerError",
        BridgeError::Timeout(_) => "Timeout",
        _ => "Bridge",
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (code, kind): (u8, String) = match &e {
            Error::Tensor(TensorError::Io(io))
            | Error::Attribution(AttributionError::Tensor(TensorError::Io(io))) => {
                (2, format!("{:?}", io.kind()))
            }
            Error::Tensor(_) | Error::Attribution(AttributionError::Tensor(_)) => {
                (2, "InvalidTensor".into())
            }
            Error::Attribution(AttributionError::BadFile(_)) => (2, "InvalidSaliencyFile".into()),
            Error::Chunk(_) => (2, "InvalidChunking".into()),
            Error::Sampler(SamplerError::BudgetExhausted(_)) => (3, "BudgetExhausted".into()),
            Error::Sampler(SamplerError::InvalidConfig(_) | SamplerError::InvalidThreshold(_)) => {
                (2, "InvalidConfig".into())
            }
            Error::Oracle(OracleError::ConfigMismatch(_)) => (4, "ConfigMismatch".into()),
            Error::Oracle(OracleError::TooManyChunks(_)) => (2, "TooManyChunks".into()),
            Error::Bridge(b) | Error::Model(crate::models::ModelError::Bridge(b)) => {
                (5, bridge_kind(b).into())
            }
            Error::Sampler(SamplerError::Model(crate::models::ModelError::Bridge(b))) => {
                (5, bridge_kind(b).into())
            }
            _ => (1, "Failed".into()),
        };
        Self {
            code,
            kind,
            message,
        }
    }
}

macro_rules! impl_from_via_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
impl_from_via_error!(
    TensorError,
    crate::chunking::ChunkError,
    crate::models::ModelError,
    BridgeError,
    SamplerError,
    AttributionError,
    OracleError,
    crate::eval::EvalError
);

type CliResult<T = ExitCode> = Result<T, CliError>;

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn out_dir(out: &Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = out
        .clone()
        .ok_or_else(|| CliError::usage("MissingArgument", "--out is required"))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write_manifest(dir: &Path, command: &str, settings: &RunSettings) -> CliResult<()> {
    let mut value = serde_json::to_value(settings).expect("serializable");
    value["command"] = json!(command);
    value["version"] = json!(env!("CARGO_PKG_VERSION"));
    write_json(&dir.join("manifest.json"), &value)
}

/// A predictor plus the flat offsets it treats as relevant, if known.
/// `grid` is the explanation grid; a planted model keeps its own.
pub struct LoadedPredictor {
    pub predictor: Box<dyn Predictor>,
    pub relevant_offsets: Option<Vec<usize>>,
    pub grid: ChunkGrid,
}

/// Resolves a predictor spec against an input tensor.
pub fn load_predictor(
    spec: &str,
    x: &InputTensor,
    chunk: Option<&[usize]>,
) -> CliResult<LoadedPredictor> {
    let grid_for = |chunk: Option<&[usize]>| -> CliResult<ChunkGrid> {
        let chunk = chunk.ok_or_else(|| CliError::usage("MissingArgument", "--chunk is required"))?;
        Ok(build_grid(x.shape(), chunk)?)
    };
    if spec == "sum" || spec == "echo" {
        return Ok(LoadedPredictor {
            predictor: Box::new(SumLoss::new(x.shape().to_vec())),
            relevant_offsets: None,
            grid: grid_for(chunk)?,
        });
    }
    if let Some(path) = spec.strip_prefix("planted:") {
        let path = Path::new(path);
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: PlantedSpecFile = serde_json::from_str(&text)
            .map_err(|e| CliError::usage("BadConfig", format!("{}: {e}", path.display())))?;
        let reference = match &file.reference {
            Some(r) => {
                let r = if r.is_relative() {
                    path.parent().unwrap_or(Path::new(".")).join(r)
                } else {
                    r.clone()
                };
                load_tensor(&r, true)?
            }
            None => x.clone(),
        };
        let model_grid = build_grid(reference.shape(), &file.chunk_shape)?;
        let grid = grid_for(Some(chunk.unwrap_or(&file.chunk_shape)))?;
        let spec = PlantedModelSpec::new(
            model_grid,
            reference,
            file.relevant_chunks.iter().copied(),
            file.noise_chunks.iter().copied(),
            file.epsilon,
        )?;
        let relevant_offsets = Some(spec.relevant_offsets().to_vec());
        return Ok(LoadedPredictor {
            predictor: Box::new(PlantedModel::new(spec)),
            relevant_offsets,
            grid,
        });
    }
    if let Some(endpoint) = spec.strip_prefix("bridge:") {
        let client = BridgeClient::connect(endpoint, timeout_from_env())?;
        return Ok(LoadedPredictor {
            predictor: Box::new(BridgePredictor::new(client, x.shape().to_vec())),
            relevant_offsets: None,
            grid: grid_for(chunk)?,
        });
    }
    Err(CliError::usage(
        "BadPredictor",
        format!("unknown predictor {spec:?}; expected sum, planted:<file> or bridge:<host:port>"),
    ))
}

struct Prepared {
    settings: RunSettings,
    x: Arc<InputTensor>,
    loaded: LoadedPredictor,
    dir: PathBuf,
}

fn prepare(run: &RunArgs, mask_percentile: Option<f64>) -> CliResult<Prepared> {
    let settings = RunSettings::from_args(run, mask_percentile)?;
    let input = settings
        .input
        .clone()
        .ok_or_else(|| CliError::usage("MissingArgument", "--input is required"))?;
    let spec = settings
        .predictor
        .clone()
        .ok_or_else(|| CliError::usage("MissingArgument", "--predictor is required"))?;
    let x = load_tensor(&input, true)?;
    let loaded = load_predictor(&spec, &x, settings.chunk.as_deref())?;
    let mut settings = settings;
    settings.chunk = Some(loaded.grid.chunk_shape().to_vec());
    let dir = out_dir(&run.out)?;
    Ok(Prepared {
        settings,
        x: Arc::new(x),
        loaded,
        dir,
    })
}

fn selection_json(s: &crate::chunking::SelectionVector) -> serde_json::Value {
    json!({
        "bits": s.to_string(),
        "retained": s.retained().collect::<Vec<_>>(),
    })
}

fn cmd_attribute(run: &RunArgs, mask_percentile: Option<f64>, deletion: &[f64]) -> CliResult {
    let Prepared {
        settings,
        x,
        loaded,
        dir,
    } = prepare(run, mask_percentile)?;
    let grid = Arc::new(loaded.grid.clone());
    let config = settings.explain_config();
    write_manifest(&dir, "attribute", &settings)?;

    let e = explain(loaded.predictor.as_ref(), x.clone(), grid.clone(), &config)?;
    e.map.save(&dir.join("saliency.mpxs"))?;
    write_json(&dir.join("decomposition.json"), &e.decomposition)?;
    let mut stats = serde_json::to_value(e.stats()).expect("serializable");
    stats["w"] = if e.threshold.w.is_finite() {
        json!(e.threshold.w)
    } else {
        json!("inf")
    };
    if let Some(offsets) = &loaded.relevant_offsets {
        stats["relevant_share"] = json!(mass_share(&e.map, offsets));
    }
    write_json(&dir.join("stats.json"), &stats)?;

    if let Some(p) = settings.mask_percentile {
        let mask = threshold_mask(&e.map, &grid, p);
        write_json(
            &dir.join("mask.json"),
            &json!({"percentile": p, "selection": selection_json(&mask)}),
        )?;
    }
    if !deletion.is_empty() {
        let p = loaded.predictor.as_ref();
        let top = deletion_faithfulness(&e.map, &grid, &x, p, deletion, DeletionOrder::MostSalientFirst)?;
        let bottom =
            deletion_faithfulness(&e.map, &grid, &x, p, deletion, DeletionOrder::LeastSalientFirst)?;
        let mut csv = String::from("fraction,chunks_deleted,mu_most_salient_first,mu_least_salient_first\n");
        for (t, b) in top.iter().zip(&bottom) {
            csv.push_str(&format!("{},{},{},{}\n", t.fraction, t.chunks_deleted, t.mu, b.mu));
        }
        let path = dir.join("deletion.csv");
        fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    }
    println!("{}", stats);
    Ok(if e.partial { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn cmd_oracle(run: &RunArgs) -> CliResult {
    let Prepared {
        settings,
        x,
        loaded,
        dir,
    } = prepare(run, None)?;
    write_manifest(&dir, "oracle", &settings)?;
    let config = settings.explain_config();
    let predictor = loaded.predictor.as_ref();
    let engine = Engine::new(config.workers, predictor)?;
    let w = match config.threshold {
        Some(w) => w,
        None => {
            calibrate_threshold(&engine, predictor, &x, &loaded.grid, &config.sampler)?
                .threshold
                .w
        }
    };
    let result = oracle::enumerate(&x, &loaded.grid, predictor, w, &engine)?;
    result.to_saliency().save(&dir.join("oracle.mpxs"))?;
    let masks: Vec<_> = result
        .masks
        .iter()
        .map(|e| {
            json!({
                "mask": e.mask,
                "bits": e.bits.to_string(),
                "probability": e.probability,
                "mu": e.mu,
                "accepted": e.accepted,
            })
        })
        .collect();
    write_json(
        &dir.join("masks.json"),
        &json!({
            "w": if w.is_finite() { json!(w) } else { json!("inf") },
            "p_w": result.p_w,
            "retention": result.retention,
            "goodness": result.goodness,
            "max_identity_error": result.max_identity_error,
            "masks": masks,
        }),
    )?;
    println!(
        "{}",
        json!({"m": loaded.grid.m(), "p_w": result.p_w, "max_identity_error": result.max_identity_error})
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_crosscheck(oracle_path: &Path, mc_path: &Path, k: f64, out: &Option<PathBuf>) -> CliResult {
    let exact = SaliencyMap::load(oracle_path)?;
    let mc = SaliencyMap::load(mc_path)?;
    let report = crosscheck(&exact, &mc, k)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    instances: usize,
    samples: usize,
    calibration: usize,
    percentile_w: f64,
    mask_percentile: f64,
    repeats: usize,
    seed: u64,
    workers: usize,
    out: &Path,
) -> CliResult {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut sampler = SamplerConfig::new(samples, seed);
    sampler.n_calibration = calibration;
    sampler.percentile_w = percentile_w;
    let config = TwoClassEvalConfig {
        instances,
        dataset_seed: seed,
        explain: ExplainConfig::new(sampler).with_workers(workers),
        mask_percentile,
        repeats,
    };
    let report = run_two_class_eval(&Arc::new(TwoClassTask::standard()), &config)?;
    write_json(&out.join("eval_report.json"), &report)?;
    write_json(
        &out.join("manifest.json"),
        &json!({"command": "eval", "version": env!("CARGO_PKG_VERSION"), "config": config}),
    )?;
    println!(
        "{}",
        json!({
            "full_macro_f1": report.full.metrics.macro_f1,
            "masked_macro_f1": report.masked.metrics.macro_f1,
            "masked_runtime_mean_s": report.masked.runtime_mean_s,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_chunk_list(text: &str) -> CliResult<Vec<Vec<usize>>> {
    text.split(';')
        .map(|shape| {
            shape
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::usage("Usage", format!("bad chunk shape {shape:?}: {e}")))
        })
        .collect()
}

fn cmd_sweep(run: &RunArgs, chunks: &Option<String>, targets: &[usize], percentiles: &[f64]) -> CliResult {
    let Prepared {
        settings,
        x,
        loaded,
        dir,
    } = prepare(run, None)?;
    write_manifest(&dir, "sweep", &settings)?;
    let chunk_shapes = match chunks {
        Some(text) => parse_chunk_list(text)?,
        None => vec![loaded.grid.chunk_shape().to_vec()],
    };
    let base = settings.explain_config();
    let targets = if targets.is_empty() {
        vec![base.sampler.n_target]
    } else {
        targets.to_vec()
    };
    let mut rows = Vec::new();
    for chunk in &chunk_shapes {
        let grid = Arc::new(build_grid(x.shape(), chunk)?);
        for &n in &targets {
            for &p in percentiles {
                let mut config = base.clone();
                config.sampler.n_target = n;
                config.sampler.percentile_w = p;
                config.threshold = None;
                let e = explain(loaded.predictor.as_ref(), x.clone(), grid.clone(), &config)?;
                let tag = chunk.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("x");
                e.map.save(&dir.join(format!("saliency_c{tag}_n{n}_p{p}.mpxs")))?;
                rows.push(json!({
                    "chunk": chunk,
                    "n_target": n,
                    "percentile_w": p,
                    "w": e.threshold.w,
                    "p_hat": e.acceptance.p_hat(),
                    "attempted": e.acceptance.attempted,
                    "partial": e.partial,
                    "relevant_share": loaded.relevant_offsets.as_ref().map(|o| mass_share(&e.map, o)),
                }));
            }
        }
    }
    write_json(&dir.join("sweep.json"), &rows)?;
    println!("{}", serde_json::Value::Array(rows));
    Ok(ExitCode::SUCCESS)
}

fn cmd_bridge_check(endpoint: &str, echo: bool) -> CliResult {
    let report = conformance_check(endpoint, timeout_from_env(), echo)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(if report.conformant {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(5)
    })
}

fn cmd_bridge_serve(bind: &str, spec: &str, input: &Option<PathBuf>, max_batch: u32) -> CliResult {
    let options = ServerOptions {
        max_batch,
        ..ServerOptions::default()
    };
    let handler = if spec == "echo" || spec == "sum" {
        echo_handler()
    } else {
        let input = input
            .as_ref()
            .ok_or_else(|| CliError::usage("MissingArgument", "--input is required for this predictor"))?;
        let x = load_tensor(input, true)?;
        let loaded = load_predictor(spec, &x, None)?;
        predictor_handler(loaded.predictor)
    };
    let server = BridgeServer::spawn(bind, options, handler).map_err(|e| CliError {
        code: 2,
        kind: format!("{:?}", e.kind()),
        message: format!("{bind}: {e}"),
    })?;
    eprintln!("{}", json!({"listening": server.endpoint()}));
    server.join();
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_plant(
    shape: &[usize],
    chunk: &[usize],
    relevant: &[usize],
    noise: &[usize],
    epsilon: f64,
    seed: u64,
    out: &Path,
) -> CliResult {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let grid = build_grid(shape, chunk)?;
    let mut rng = sample_rng(seed, u64::MAX);
    let values = (0..grid.volume()).map(|_| rng.random_range(0.1f32..1.0)).collect();
    let x = InputTensor::new(shape.to_vec(), values)?;
    // validates chunk indices and the reference
    PlantedModelSpec::new(grid, x.clone(), relevant.iter().copied(), noise.iter().copied(), epsilon)?;
    save_tensor(&out.join("input.mpxt"), &x)?;
    let file = PlantedSpecFile {
        chunk_shape: chunk.to_vec(),
        relevant_chunks: relevant.to_vec(),
        noise_chunks: noise.to_vec(),
        epsilon,
        reference: Some(PathBuf::from("input.mpxt")),
    };
    write_json(&out.join("planted.json"), &file)?;
    Ok(ExitCode::SUCCESS)
}

pub fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Attribute {
            run,
            mask_percentile,
            deletion,
        } => cmd_attribute(run, *mask_percentile, deletion),
        Command::Oracle { run } => cmd_oracle(run),
        Command::Crosscheck { oracle, mc, k, out } => cmd_crosscheck(oracle, mc, *k, out),
        Command::Eval {
            instances,
            samples,
            calibration,
            percentile_w,
            mask_percentile,
            repeats,
            seed,
            workers,
            out,
        } => cmd_eval(
            *instances,
            *samples,
            *calibration,
            *percentile_w,
            *mask_percentile,
            *repeats,
            *seed,
            *workers,
            out,
        ),
        Command::Sweep {
            run,
            chunks,
            targets,
            percentiles,
        } => cmd_sweep(run, chunks, targets, percentiles),
        Command::BridgeCheck { endpoint, echo } => cmd_bridge_check(endpoint, *echo),
        Command::BridgeServe {
            bind,
            predictor,
            input,
            max_batch,
        } => cmd_bridge_serve(bind, predictor, input, *max_batch),
        Command::Plant {
            shape,
            chunk,
            relevant,
            noise,
            epsilon,
            seed,
            out,
        } => cmd_plant(shape, chunk, relevant, noise, *epsilon, *seed, out),
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprintln!("{}", CliError::usage("Usage", e.to_string().trim()).to_json());
                return ExitCode::from(2);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
