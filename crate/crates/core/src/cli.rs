//! The `ptq` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
//! Output files are written to a temporary sibling and renamed on success.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cost::{self, AceOptions, BertConfig, ModelManifest};
use crate::error::PtqError;
use crate::harness::{self, SyntheticSpec};
use crate::pipeline::{self, QuantPolicy, QuantizedMetadata, Status};
use crate::quant::{Bits, Method};
use crate::store::{self, Archive};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ptq", version, about = "Post-training weight quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List tensors with dtype, shape and value statistics.
    Inspect { path: PathBuf },
    /// Quantize the eligible tensors of an archive.
    Quantize(QuantizeArgs),
    /// Reconstruct float tensors from a quantized archive.
    Dequantize { input: PathBuf, output: PathBuf },
    /// Per-tensor MSE and SQNR of B against reference A.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Arithmetic computation effort and model size of a layer manifest.
    Ace(AceArgs),
    /// Method and bit-width sweep over synthetic models.
    Sweep(SweepArgs),
    /// Write a synthetic model archive.
    Generate {
        output: PathBuf,
        /// JSON synthetic spec; defaults to the heavy-outlier spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long, value_parser = parse_bits)]
    pub bits: Bits,
    #[arg(long, default_value_t = crate::ocs::DEFAULT_RATIO)]
    pub ocs_ratio: f64,
    /// Glob of tensor names left in float; repeatable. Replaces the defaults.
    #[arg(long)]
    pub skip: Vec<String>,
    #[arg(long, default_value_t = pipeline::DEFAULT_MIN_ELEMENTS)]
    pub min_elements: usize,
    /// Report path; CSV when it ends in `.csv`, JSON otherwise.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AceArgs {
    /// BERT configuration: tiny, mini, small, medium, base or large.
    #[arg(long, value_parser = parse_config, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub config: Option<BertConfig>,
    /// JSON layer manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Weight bits of quantized layers (2..=8, or 32 for the float baseline); comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_weight_bits, default_value = "32")]
    pub weight_bits: Vec<u32>,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..=32))]
    pub act_bits: u32,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub seq_len: u64,
    #[arg(long, default_value_t = 0.0)]
    pub ocs_ratio: f64,
    /// Count activation-by-activation products in self-attention.
    #[arg(long)]
    pub attention: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// JSON synthetic spec; defaults to the heavy-outlier spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "lq,aciq,ocs_qa")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', value_parser = parse_weight_bits, default_value = "8,6,4,3,2")]
    pub bits: Vec<u32>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the trend verdict as JSON.
    #[arg(long)]
    pub trend: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: PtqError| e.to_string())
}

fn parse_bits(s: &str) -> Result<Bits, String> {
    let b: u32 = s.parse().map_err(|e| format!("{e}"))?;
    Bits::new(b).map_err(|e| e.to_string())
}

fn parse_weight_bits(s: &str) -> Result<u32, String> {
    let b: u32 = s.parse().map_err(|e| format!("{e}"))?;
    match b {
        2..=8 | 32 => Ok(b),
        _ => Err(format!("bit width {b} is not in 2..=8 or 32")),
    }
}

fn parse_config(s: &str) -> Result<BertConfig, String> {
    s.parse().map_err(|e: PtqError| e.to_string())
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(PtqError),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "error: {e}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<PtqError> for CliError {
    fn from(e: PtqError) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(PtqError::Io(e))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read(path: &Path) -> CliResult<Archive> {
    store::read_archive_file(path).map_err(|e| match e {
        PtqError::Io(io) => CliError::Data(PtqError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        ))),
        e => CliError::Data(e),
    })
}

fn write(path: &Path, archive: &Archive) -> CliResult {
    write_atomic(path, &store::write_archive(archive)?)?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(PtqError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn load_spec(path: Option<&Path>) -> CliResult<SyntheticSpec> {
    let Some(path) = path else {
        return Ok(SyntheticSpec::heavy_outlier());
    };
    let text = read_text(path)?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(PtqError::from)?;
    spec.validate()?;
    Ok(spec)
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("PTQ_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return Err(CliError::Usage(format!("PTQ_THREADS must be a positive integer, got {v:?}"))),
    };
    // A pool may already exist when run in-process more than once.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match configure_threads().and_then(|_| execute(cli.command, out, err)) {
        Ok(()) => EXIT_OK,
        Err(CliError::Data(PtqError::Io(io))) if io.kind() == std::io::ErrorKind::BrokenPipe => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match command {
        Command::Inspect { path } => inspect(&path, out),
        Command::Quantize(a) => quantize(a, out, err),
        Command::Dequantize { input, output } => {
            let d = pipeline::dequantize_archive(&read(&input)?)?;
            write(&output, &d)?;
            writeln!(out, "wrote {} tensors to {}", d.records.len(), output.display())?;
            Ok(())
        }
        Command::Compare { a, b, out: csv } => compare(&a, &b, csv.as_deref(), out),
        Command::Ace(a) => ace(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Generate { output, spec, seed } => {
            let mut s = load_spec(spec.as_deref())?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let m = harness::gen_synthetic_model(&s)?;
            write(&output, &m)?;
            writeln!(out, "wrote {} layers to {}", m.records.len(), output.display())?;
            Ok(())
        }
    }
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (min, max, var.sqrt())
}

fn inspect(path: &Path, out: &mut dyn Write) -> CliResult {
    let a = read(path)?;
    let qmeta = QuantizedMetadata::parse(&a.metadata).ok();
    writeln!(
        out,
        "{:<40} {:<8} {:<16} {:>12} {:>12} {:>12} {:<10} {:>4} {:>12}",
        "name", "dtype", "shape", "min", "max", "sigma", "method", "bits", "step"
    )?;
    for rec in &a.records {
        let (min, max, sigma) = stats(&rec.data.to_f64());
        let tm = qmeta
            .as_ref()
            .and_then(|m| m.tensors.iter().find(|t| t.codes.as_deref() == Some(rec.name.as_str())));
        let (method, bits, step) = match tm {
            Some(t) => (
                pipeline::fmt_opt(&t.method),
                pipeline::fmt_opt(&t.params.map(|p| p.bits)),
                pipeline::fmt_opt(&t.params.map(|p| p.step)),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(
            out,
            "{:<40} {:<8} {:<16} {:>12.6} {:>12.6} {:>12.6} {:<10} {:>4} {:>12}",
            rec.name,
            rec.dtype().name(),
            format!("{:?}", rec.shape),
            min,
            max,
            sigma,
            method,
            bits,
            step
        )?;
    }
    match &qmeta {
        Some(m) => writeln!(
            out,
            "metadata: quantized archive, method {}, {} bits, {} of {} tensors quantized",
            m.policy.method,
            m.policy.bits,
            m.tensors.iter().filter(|t| t.status == Status::Quantized).count(),
            m.tensors.len()
        )?,
        None => writeln!(out, "metadata: {} bytes", a.metadata.len())?,
    }
    Ok(())
}

fn quantize(a: QuantizeArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let mut policy = QuantPolicy::new(a.method, a.bits);
    policy.ocs_ratio = a.ocs_ratio;
    policy.min_elements = a.min_elements;
    if !a.skip.is_empty() {
        policy.skip_patterns = a.skip;
    }
    policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let input = read(&a.input)?;
    let (q, report) = pipeline::quantize_archive(&input, &policy)?;
    write(&a.output, &q)?;
    if let Some(path) = &a.report {
        let text = if path.extension().is_some_and(|e| e == "csv") {
            report.to_csv()
        } else {
            report.to_json()
        };
        write_atomic(path, text.as_bytes())?;
    }
    for w in &report.warnings {
        writeln!(err, "warning: {w}")?;
    }
    let count = |s: Status| report.entries.iter().filter(|e| e.status == s).count();
    writeln!(
        out,
        "quantized {} tensors ({} skipped, {} ineligible) with {} at {} bits",
        count(Status::Quantized),
        count(Status::Skipped),
        count(Status::Ineligible),
        policy.method,
        policy.bits
    )?;
    writeln!(out, "mean mse: {:.6e}", report.mean_mse)?;
    writeln!(out, "quantization ratio: {:.6}", report.quantization_ratio)?;
    writeln!(out, "size reduction: {:.4}x", report.reduction_factor)?;
    Ok(())
}

fn compare(a: &Path, b: &Path, csv: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let table = pipeline::compare_archives(&read(a)?, &read(b)?)?;
    writeln!(out, "{:<40} {:>14} {:>10}", "name", "mse", "sqnr_db")?;
    for r in &table.rows {
        writeln!(
            out,
            "{:<40} {:>14.6e} {:>10}",
            r.name,
            r.mse,
            r.sqnr_db.map(|v| format!("{v:.2}")).unwrap_or_default()
        )?;
    }
    writeln!(
        out,
        "mean mse: {:.6e}, mean sqnr: {}",
        table.mean_mse,
        table.mean_sqnr_db.map(|v| format!("{v:.2} dB")).unwrap_or_else(|| "inf".into())
    )?;
    if let Some(path) = csv {
        write_atomic(path, table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn ace(a: AceArgs, out: &mut dyn Write) -> CliResult {
    let manifest = match (&a.config, &a.manifest) {
        (Some(c), _) => cost::gen_bert_manifest(*c),
        (None, Some(p)) => ModelManifest::from_json(&read_text(p)?)?,
        (None, None) => return Err(CliError::Usage("one of --config or --manifest is required".into())),
    };
    if !(a.ocs_ratio >= 0.0 && a.ocs_ratio <= 1.0) {
        return Err(CliError::Usage(format!("--ocs-ratio must lie in [0, 1], got {}", a.ocs_ratio)));
    }
    let skip = BTreeSet::new();
    let opts = AceOptions {
        act_bits: a.act_bits,
        seq_len: a.seq_len,
        include_attention_products: a.attention,
    };
    let mut csv = format!("{}\n", cost::CostReport::CSV_HEADER);
    writeln!(
        out,
        "{:<16} {:>4} {:>4} {:>6} {:>24} {:>18} {:>16} {:>10} {:>8}",
        "config", "bits", "act", "seq", "ace", "macs", "size_bits", "reduction", "ratio"
    )?;
    for &bits in &a.weight_bits {
        let r = cost::cost_report(&manifest, bits, a.ocs_ratio, &skip, opts)?;
        writeln!(
            out,
            "{:<16} {:>4} {:>4} {:>6} {:>24} {:>18} {:>16.0} {:>10.4} {:>8.6}",
            r.config,
            r.bits,
            r.act_bits,
            r.seq_len,
            r.ace_total,
            r.mac_total,
            r.model_size_bits,
            r.size_reduction_factor,
            r.quantization_ratio
        )?;
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Some(path) = &a.out {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> CliResult {
    let spec = load_spec(a.spec.as_deref())?;
    let result = harness::method_sweep(&spec, &a.methods, &a.bits, a.seeds as usize)?;
    write_atomic(&a.out, result.to_csv().as_bytes())?;
    writeln!(out, "wrote {} rows to {}", result.rows.len(), a.out.display())?;
    let mse = result.cell_means(|r| r.weight_mse);
    let rel = result.cell_means(|r| r.output_rel_err);
    writeln!(out, "{:<10} {:>4} {:>14} {:>14}", "method", "bits", "weight_mse", "output_rel_err")?;
    for (&m, &b) in a.methods.iter().flat_map(|m| a.bits.iter().map(move |b| (m, b))) {
        writeln!(
            out,
            "{:<10} {:>4} {:>14.6e} {:>14.6e}",
            m,
            b,
            mse[&(m, b)].0,
            rel[&(m, b)].0
        )?;
    }
    match harness::trend_check(&result) {
        Ok(v) => {
            if v.vacuous {
                writeln!(out, "trend: vacuous (no rows at 4 bits or fewer)")?;
            } else {
                writeln!(
                    out,
                    "trend: ordering ocs <= aciq <= lq {} (margin {:.3e}); lq strictly worst {} (margin {:.3e}); {} seeds",
                    if v.ordering.holds { "holds" } else { "fails" },
                    v.ordering.margin,
                    if v.lq_worst.holds { "holds" } else { "fails" },
                    v.lq_worst.margin,
                    v.ordering.seeds
                )?;
            }
            if let Some(path) = &a.trend {
                write_atomic(path, v.to_json().as_bytes())?;
            }
        }
        Err(e) => writeln!(out, "trend: not checked ({e})")?,
    }
    Ok(())
}
