//! The `ffp8` command-line tool.
//!
//! [`run`] takes the full argument vector and the two output streams and
//! returns the process exit code: 0 on success, 1 on a usage error, 2 on a
//! data error. Reports go to the output stream (or `--out`), diagnostics to
//! the error stream.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ffp8_core::refnet::{self, make_dataset, train_baseline, Mode, ToyDataset, TrainConfig};
use ffp8_core::search::AssignmentRecord;
use ffp8_core::{
    bias_star, coverage, default_bias, dequantize_tensor, enumerate_values, error_metrics_values, layerwise_optimize,
    quantize_tensor, range_window, read_bundle, select_format_values, to_fp32_bits, write_bundle, Assignment,
    Calibration, FormatSpec, ModelBundle, Objective, Payload, SearchConfig, Tensor, TensorStats,
};
use serde_json::{json, Value};
use thiserror::Error;

pub mod report;

use report::{emit_report, num, sha256_hex, ReportKind, SchemaViolation};

/// Metadata key under which `quantize` stores the assignment it applied.
pub const ASSIGNMENT_KEY: &str = "assignment";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Schema(#[from] SchemaViolation),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// `x,y,z,b` with `b` a number, `*` for bias-star, or omitted for the default bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FmtArg {
    pub x: u8,
    pub y: u8,
    pub z: u8,
    pub bias: BiasArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasArg {
    Default,
    Star,
    Fixed(i32),
}

impl FromStr for FmtArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected x,y,z[,b] with b an integer or '*', got {s:?}");
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 && parts.len() != 4 {
            return Err(bad());
        }
        let field = |i: usize| parts[i].parse::<u8>().map_err(|_| bad());
        let bias = match parts.get(3) {
            None => BiasArg::Default,
            Some(&"*") => BiasArg::Star,
            Some(b) => BiasArg::Fixed(b.parse().map_err(|_| bad())?),
        };
        Ok(FmtArg {
            x: field(0)?,
            y: field(1)?,
            z: field(2)?,
            bias,
        })
    }
}

impl FmtArg {
    fn resolve_with(self, width: u8, star: i32) -> Result<FormatSpec, CliError> {
        let b = match self.bias {
            BiasArg::Default => default_bias(self.y),
            BiasArg::Star => star,
            BiasArg::Fixed(b) => b,
        };
        FormatSpec::new(self.x, self.y, self.z, b, width).map_err(|e| CliError::Usage(format!("--fmt: {e}")))
    }

    /// The `width`-bit format, with a starred bias fitted to `max_mag`.
    fn resolve(self, width: u8, max_mag: Option<f32>) -> Result<FormatSpec, CliError> {
        let star = match (self.bias, max_mag) {
            (BiasArg::Star, Some(m)) if m > 0.0 => bias_star(self.y, self.z, f64::from(m)).map_err(data)?.bias,
            (BiasArg::Star, Some(_)) => default_bias(self.y),
            (BiasArg::Star, None) => {
                return Err(CliError::Usage("--fmt: bias '*' needs a tensor to fit".into()));
            }
            _ => 0,
        };
        self.resolve_with(width, star)
    }
}

/// Inclusive exponent-width range `A..B`, or a single width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct YRange(pub u8, pub u8);

impl FromStr for YRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected A..B with 1 <= A <= B, got {s:?}");
        let (a, b) = match s.split_once("..") {
            Some((a, b)) => (a, b.trim_start_matches('=')),
            None => (s, s),
        };
        let a: u8 = a.trim().parse().map_err(|_| bad())?;
        let b: u8 = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || a > b {
            return Err(bad());
        }
        Ok(YRange(a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Sqnr,
    Accuracy,
}

#[derive(Debug, Parser)]
#[command(name = "ffp8", version, about = "Flexible 8-bit floating-point formats: inspect, analyze, search, quantize")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Total bits per code
    #[arg(long, global = true, default_value_t = 8)]
    width: u8,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Dataset seed (defaults to the one recorded in the model)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Window and value table of one format
    Inspect {
        #[arg(long)]
        fmt: FmtArg,
        /// Also list every distinct value
        #[arg(long)]
        values: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistics and window coverage of the tensors in a bundle
    Analyze {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        fmt: Option<FmtArg>,
        /// Only this tensor
        #[arg(long)]
        tensor: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-fit formats: a per-layer assignment for models, per-tensor otherwise
    Search {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "sqnr")]
        objective: ObjectiveArg,
        #[arg(long, default_value = "1..6")]
        y_range: YRange,
        #[arg(long, default_value_t = 8)]
        bias_sweep: u32,
        /// Keep the sign bit even for nonnegative data
        #[arg(long)]
        signed_only: bool,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode FP32 tensors as FFP8 codes
    Quantize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, conflicts_with = "fmt", required_unless_present = "fmt")]
        assignment: Option<PathBuf>,
        #[arg(long)]
        fmt: Option<FmtArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand FFP8 code tensors back to FP32
    Dequantize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reference classifier on a generated dataset
    Train {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validation accuracy of a model, FP32 or under an assignment
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FFP8 code file to binary32 bit patterns
    Convert {
        #[arg(long)]
        fmt: FmtArg,
        /// Raw codes: one byte each up to 8 bits, else two bytes little-endian
        #[arg(long)]
        input: PathBuf,
        /// Little-endian u32 words; hex lines on the output stream when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Files read so far, with their digests, for the report header.
#[derive(Default)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.0.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn bundle(&mut self, path: &Path) -> Result<ModelBundle, CliError> {
        let bytes = self.read(path)?;
        read_bundle(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    fn assignment(&mut self, path: &Path) -> Result<Assignment, CliError> {
        let bytes = self.read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{}: not UTF-8", path.display())))?;
        parse_assignment(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Accepts a bare record array or a full `assignment` report.
pub fn parse_assignment(text: &str) -> Result<Assignment, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let rows = match v {
        Value::Object(mut o) if o.get("kind") == Some(&Value::String("assignment".into())) => {
            o.remove("body").unwrap_or(Value::Null)
        }
        other => other,
    };
    let records: Vec<AssignmentRecord> = serde_json::from_value(rows).map_err(|e| e.to_string())?;
    Assignment::from_records(&records).map_err(|e| e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Output<'a> {
    out: &'a mut dyn Write,
    inputs: Inputs,
    width: u8,
}

impl Output<'_> {
    fn report(&mut self, kind: ReportKind, body: Value, path: Option<&Path>) -> Result<(), CliError> {
        let bytes = emit_report(kind, body, &self.inputs.0)?;
        match path {
            Some(p) => write_file(p, &bytes),
            None => self.out.write_all(&bytes).map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            }),
        }
    }
}

fn format_json(f: FormatSpec) -> Value {
    json!({
        "x": f.sign_bits(),
        "y": f.exponent_bits(),
        "z": f.fraction_bits(),
        "b": f.bias(),
        "n": f.width(),
    })
}

fn stats_json(s: &TensorStats) -> Value {
    json!({
        "max_mag": num(f64::from(s.max_mag)),
        "min_nonzero_mag": s.min_nonzero_mag.map_or(Value::Null, |m| num(f64::from(m))),
        "zero_count": s.zero_count,
        "negative_count": s.negative_count,
        "total_count": s.total_count,
        "log2_hist": s.log2_hist.iter().map(|(k, c)| (k.to_string(), json!(c))).collect::<serde_json::Map<_, _>>(),
    })
}

fn cmd_inspect(o: &mut Output, fmt: FmtArg, values: bool, out: Option<&Path>) -> Result<(), CliError> {
    let f = fmt.resolve(o.width, None)?;
    let w = range_window(f);
    let table = enumerate_values(f);
    let mut body = json!({
        "format": format_json(f),
        "window": {
            "min_subnormal": num(w.min_subnormal),
            "min_normal": num(w.min_normal),
            "max": num(w.max),
        },
        "distinct_values": table.len(),
        "code_count": f.code_count(),
        "fits_binary32": f.fits_binary32(),
    });
    if values {
        body["values"] = Value::Array(table.values().iter().map(|&v| num(v)).collect());
    }
    o.report(ReportKind::FormatTable, body, out)
}

fn cmd_analyze(
    o: &mut Output,
    bundle: &Path,
    fmt: Option<FmtArg>,
    only: Option<&str>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let m = o.inputs.bundle(bundle)?;
    if let Some(name) = only {
        if m.tensor(name).is_none() {
            return Err(CliError::Data(format!("no tensor named {name:?}")));
        }
    }
    let mut entries = Vec::new();
    for t in m.tensors.iter().filter(|t| only.is_none_or(|n| t.name == n)) {
        let values = t.to_fp32_values().map_err(data)?;
        let stats = TensorStats::from_values(&values).map_err(|e| CliError::Data(format!("{}: {e}", t.name)))?;
        let mut entry = json!({
            "name": t.name,
            "role": t.role.as_str(),
            "shape": t.shape,
            "stats": stats_json(&stats),
        });
        if let Some(stored) = t.format() {
            entry["stored_format"] = format_json(stored);
        }
        if let Some(fmt) = fmt {
            let f = fmt.resolve(o.width, Some(stats.max_mag))?;
            let c = coverage(&stats, f);
            let err = error_metrics_values(&values, f).map_err(|e| CliError::Data(format!("{}: {e}", t.name)))?;
            entry["format"] = format_json(f);
            entry["coverage"] = json!({
                "below_window_frac": num(c.below_window_frac()),
                "in_denorm_frac": num(c.in_denorm_frac()),
                "in_norm_frac": num(c.in_norm_frac()),
                "above_window_frac": num(c.above_window_frac()),
                "below_window": c.below_window,
                "in_denorm": c.in_denorm,
                "in_norm": c.in_norm,
                "above_window": c.above_window,
                "zero_count": c.zero_count,
            });
            entry["error"] = json!({
                "mse": num(err.mse),
                "max_abs_err": num(err.max_abs_err),
                "sqnr_db": num(err.sqnr_db),
                "below_window_count": err.below_window_count,
                "above_window_count": err.above_window_count,
            });
        }
        entries.push(entry);
    }
    o.report(ReportKind::Coverage, json!({ "tensors": entries }), out)
}

#[derive(Debug, Clone, Copy)]
struct DatasetSpec {
    seed: u64,
    samples: usize,
    features: usize,
    classes: usize,
}

fn meta<T: FromStr>(m: &ModelBundle, key: &str) -> Result<Option<T>, CliError> {
    m.metadata_value(key)
        .map(|v| v.parse().map_err(|_| CliError::Data(format!("bad metadata {key}={v:?}"))))
        .transpose()
}

impl DatasetArgs {
    /// Flags first, then the values recorded when the model was trained, then defaults.
    fn resolve(&self, m: &ModelBundle) -> Result<DatasetSpec, CliError> {
        Ok(DatasetSpec {
            seed: self.seed.or(meta(m, "dataset_seed")?).unwrap_or(7),
            samples: self.samples.or(meta(m, "dataset_samples")?).unwrap_or(1000),
            features: self.features.or(meta(m, "dataset_features")?).unwrap_or(16),
            classes: self.classes.or(meta(m, "dataset_classes")?).unwrap_or(3),
        })
    }
}

impl DatasetSpec {
    fn build(self) -> Result<ToyDataset, CliError> {
        make_dataset(self.seed, self.samples, self.features, self.classes).map_err(data)
    }

    fn json(self) -> Value {
        json!({
            "seed": self.seed,
            "samples": self.samples,
            "features": self.features,
            "classes": self.classes,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    o: &mut Output,
    bundle: &Path,
    objective: ObjectiveArg,
    y_range: YRange,
    bias_sweep: u32,
    signed_only: bool,
    dataset: &DatasetArgs,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let width = o.width;
    if !(4..=16).contains(&width) {
        return Err(CliError::Usage(format!("--width must lie in 4..16, got {width}")));
    }
    let cfg = SearchConfig {
        y_range: y_range.0..=y_range.1,
        bias_sweep,
        allow_unsigned: !signed_only,
        width,
        objective: match objective {
            ObjectiveArg::Sqnr => Objective::Sqnr,
            ObjectiveArg::Accuracy => Objective::Accuracy,
        },
    };
    let m = o.inputs.bundle(bundle)?;
    if m.dense_layers().next().is_some() {
        let ds = dataset.resolve(&m)?.build()?;
        let (inputs, labels) = ds.train();
        let calib = Calibration {
            inputs,
            labels: labels.to_vec(),
        };
        let a = layerwise_optimize(&m, &calib, &cfg).map_err(data)?;
        let rows = serde_json::to_value(a.to_records()).map_err(data)?;
        return o.report(ReportKind::Assignment, rows, out);
    }
    if cfg.objective == Objective::Accuracy {
        return Err(CliError::Usage(
            "--objective accuracy needs a model bundle with dense layers".into(),
        ));
    }
    let mut entries = Vec::new();
    for t in &m.tensors {
        let values = t.to_fp32_values().map_err(data)?;
        let (f, r) = select_format_values(&values, &cfg).map_err(|e| CliError::Data(format!("{}: {e}", t.name)))?;
        entries.push(json!({
            "name": t.name,
            "role": t.role.as_str(),
            "format": format_json(f),
            "sqnr_db": num(r.sqnr_db),
            "mse": num(r.mse),
            "max_abs_err": num(r.max_abs_err),
            "below_window_count": r.below_window_count,
            "above_window_count": r.above_window_count,
        }));
    }
    o.report(ReportKind::SearchResult, json!({ "tensors": entries }), out)
}

fn quantize_in_place(t: &mut Tensor, f: FormatSpec) -> Result<(), CliError> {
    let (q, _) = quantize_tensor(t, f).map_err(|e| CliError::Data(format!("{}: {e}", t.name)))?;
    *t = q;
    Ok(())
}

fn set_metadata(m: &mut ModelBundle, key: &str, value: String) {
    m.metadata.retain(|(k, _)| k != key);
    m.metadata.push((key.to_string(), value));
}

fn cmd_quantize(
    o: &mut Output,
    bundle: &Path,
    assignment: Option<&Path>,
    fmt: Option<FmtArg>,
    out: &Path,
) -> Result<(), CliError> {
    let mut m = o.inputs.bundle(bundle)?;
    if let Some(path) = assignment {
        let a = o.inputs.assignment(path)?;
        let dense: Vec<(String, String)> = m
            .dense_layers()
            .map(|l| (l.name.clone(), l.tensors.first().cloned().unwrap_or_default()))
            .collect();
        for (layer, weight) in dense {
            let f = a
                .format_for(&layer, ffp8_core::Role::Weight)
                .ok_or_else(|| CliError::Data(format!("assignment has no entry for layer {layer:?}")))?;
            let t = m
                .tensor_mut(&weight)
                .ok_or_else(|| CliError::Data(format!("layer {layer:?} has no weight tensor")))?;
            if matches!(t.payload, Payload::Fp32(_)) {
                quantize_in_place(t, f)?;
            }
        }
        let compact = serde_json::to_string(&a.to_records()).map_err(data)?;
        set_metadata(&mut m, ASSIGNMENT_KEY, compact);
    } else if let Some(fmt) = fmt {
        for t in &mut m.tensors {
            if let Payload::Fp32(v) = &t.payload {
                let stats = TensorStats::from_values(v).map_err(|e| CliError::Data(format!("{}: {e}", t.name)))?;
                let f = fmt.resolve(o.width, Some(stats.max_mag))?;
                quantize_in_place(t, f)?;
            }
        }
    }
    write_file(out, &write_bundle(&m).map_err(data)?)
}

fn cmd_dequantize(o: &mut Output, bundle: &Path, out: &Path) -> Result<(), CliError> {
    let mut m = o.inputs.bundle(bundle)?;
    for t in &mut m.tensors {
        if t.format().is_some() {
            *t = dequantize_tensor(t).map_err(|e| CliError::Data(format!("{}: {e}", t.name)))?;
        }
    }
    write_file(out, &write_bundle(&m).map_err(data)?)
}

fn cmd_train(o: &mut Output, spec: DatasetSpec, epochs: Option<usize>, out: &Path) -> Result<(), CliError> {
    let ds = spec.build()?;
    let mut cfg = TrainConfig::default();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let model = train_baseline(&ds, &cfg).map_err(data)?;
    write_file(out, &write_bundle(&model).map_err(data)?)?;
    let acc = refnet::evaluate(&model, None, &ds).map_err(data)?;
    let body = json!({
        "accuracy": num(acc),
        "mode": "fp32",
        "validation_samples": ds.validation().1.len(),
        "dataset": spec.json(),
    });
    o.report(ReportKind::Eval, body, None)
}

fn cmd_eval(
    o: &mut Output,
    bundle: &Path,
    assignment: Option<&Path>,
    dataset: &DatasetArgs,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let m = o.inputs.bundle(bundle)?;
    let a = match assignment {
        Some(p) => Some(o.inputs.assignment(p)?),
        None => m
            .metadata_value(ASSIGNMENT_KEY)
            .map(parse_assignment)
            .transpose()
            .map_err(|e| CliError::Data(format!("stored assignment: {e}")))?,
    };
    let spec = dataset.resolve(&m)?;
    let ds = spec.build()?;
    let (inputs, labels) = ds.validation();
    let mode = a.as_ref().map_or(Mode::Fp32, Mode::Quantized);
    let acc = refnet::accuracy(&m, mode, &inputs, labels).map_err(data)?;
    let body = json!({
        "accuracy": num(acc),
        "mode": if a.is_some() { "quantized" } else { "fp32" },
        "validation_samples": labels.len(),
        "dataset": spec.json(),
    });
    o.report(ReportKind::Eval, body, out)
}

fn cmd_convert(o: &mut Output, fmt: FmtArg, input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let f = fmt.resolve(o.width, None)?;
    let bytes = o.inputs.read(input)?;
    let codes: Vec<u16> = if f.width() <= 8 {
        bytes.iter().map(|&b| u16::from(b)).collect()
    } else {
        if bytes.len() % 2 != 0 {
            return Err(CliError::Data(format!(
                "{}: odd byte count {} for 2-byte codes",
                input.display(),
                bytes.len()
            )));
        }
        bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
    };
    let words = codes
        .iter()
        .map(|&c| to_fp32_bits(f, c))
        .collect::<Result<Vec<u32>, _>>()
        .map_err(data)?;
    match out {
        Some(p) => write_file(p, &words.iter().flat_map(|w| w.to_le_bytes()).collect::<Vec<u8>>()),
        None => {
            let text: String = words.iter().map(|w| format!("0x{w:08X}\n")).collect();
            o.out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })
        }
    }
}

fn dispatch(cli: Cli, o: &mut Output) -> Result<(), CliError> {
    match cli.command {
        Command::Inspect { fmt, values, out } => cmd_inspect(o, fmt, values, out.as_deref()),
        Command::Analyze {
            bundle,
            fmt,
            tensor,
            out,
        } => cmd_analyze(o, &bundle, fmt, tensor.as_deref(), out.as_deref()),
        Command::Search {
            bundle,
            objective,
            y_range,
            bias_sweep,
            signed_only,
            dataset,
            out,
        } => cmd_search(
            o,
            &bundle,
            objective,
            y_range,
            bias_sweep,
            signed_only,
            &dataset,
            out.as_deref(),
        ),
        Command::Quantize {
            bundle,
            assignment,
            fmt,
            out,
        } => cmd_quantize(o, &bundle, assignment.as_deref(), fmt, &out),
        Command::Dequantize { bundle, out } => cmd_dequantize(o, &bundle, &out),
        Command::Train {
            seed,
            samples,
            features,
            classes,
            epochs,
            out,
        } => cmd_train(
            o,
            DatasetSpec {
                seed,
                samples,
                features,
                classes,
            },
            epochs,
            &out,
        ),
        Command::Eval {
            bundle,
            assignment,
            dataset,
            out,
        } => cmd_eval(o, &bundle, assignment.as_deref(), &dataset, out.as_deref()),
        Command::Convert { fmt, input, out } => cmd_convert(o, fmt, &input, out.as_deref()),
    }
}

fn color_enabled(err_is_terminal: bool) -> bool {
    err_is_terminal && std::env::var_os("FFP8_NO_COLOR").is_none()
}

/// Runs the tool on `args` (including the program name).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_color(args, out, err, color_enabled(std::io::stderr().is_terminal()))
}

fn run_with_color<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write, color: bool) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = if color { e.render().ansi().to_string() } else { e.render().to_string() };
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let mut o = Output {
        out,
        inputs: Inputs::default(),
        width: cli.width,
    };
    match dispatch(cli, &mut o) {
        Ok(()) => 0,
        Err(e) => {
            let label = if color { "\x1b[1;31merror\x1b[0m" } else { "error" };
            let _ = writeln!(err, "ffp8: {label}: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_arg_forms() {
        let f: FmtArg = "1,4,3,7".parse().unwrap();
        assert_eq!(f.bias, BiasArg::Fixed(7));
        assert_eq!("1,4,3,*".parse::<FmtArg>().unwrap().bias, BiasArg::Star);
        assert_eq!("0,4,4".parse::<FmtArg>().unwrap().bias, BiasArg::Default);
        assert!(matches!(
            "1,4,4,7".parse::<FmtArg>().unwrap().resolve(8, None),
            Err(CliError::Usage(_))
        ));
        assert!("1,4,4,7".parse::<FmtArg>().unwrap().resolve(9, None).is_ok());
        assert!("1,4,3,200".parse::<FmtArg>().unwrap().resolve(8, None).is_err());
        assert!("1,4".parse::<FmtArg>().is_err());
        assert!("1,4,3,x".parse::<FmtArg>().is_err());
    }

    #[test]
    fn starred_bias_fits_the_max() {
        let f: FmtArg = "1,4,3,*".parse().unwrap();
        assert_eq!(f.resolve(8, Some(1.9)).unwrap().bias(), 14);
        assert!(matches!(f.resolve(8, None), Err(CliError::Usage(_))));
    }

    #[test]
    fn y_range_forms() {
        assert_eq!("1..6".parse::<YRange>().unwrap(), YRange(1, 6));
        assert_eq!("2..=4".parse::<YRange>().unwrap(), YRange(2, 4));
        assert_eq!("3".parse::<YRange>().unwrap(), YRange(3, 3));
        assert!("4..2".parse::<YRange>().is_err());
        assert!("0..2".parse::<YRange>().is_err());
    }

    #[test]
    fn assignment_accepts_report_wrapper() {
        let rows = r#"[{"layer":"fc1","role":"weight","x":1,"y":2,"z":5,"b":3},
                       {"layer":"fc1","role":"activation","x":1,"y":4,"z":3,"b":7}]"#;
        let bare = parse_assignment(rows).unwrap();
        let wrapped = format!(r#"{{"kind":"assignment","tool_version":"0","inputs":{{}},"body":{rows}}}"#);
        assert_eq!(parse_assignment(&wrapped).unwrap(), bare);
        assert!(parse_assignment("{}").is_err());
    }

    #[test]
    fn color_only_on_terminals() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with_color(["ffp8", "inspect", "--fmt", "1,4,3,*"], &mut out, &mut err, true);
        assert_eq!(code, 1);
        assert!(String::from_utf8(err).unwrap().contains("\x1b["));
        let mut err = Vec::new();
        run_with_color(["ffp8", "inspect", "--fmt", "1,4,3,*"], &mut out, &mut err, false);
        assert!(!String::from_utf8(err).unwrap().contains('\x1b'));
    }
}
