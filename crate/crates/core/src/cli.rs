//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code (0 ok, 1 validation/domain, 2 I/O).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::eval::{compare_methods, evaluate_pairs_batched, synth_sts, Method};
use crate::io::{
    read_matrix, read_pairs, section, write_matrix, write_pairs, write_report, MatrixFormat,
    ReportFile, ReportMeta,
};
use crate::matrix::{svd, EmbeddingMatrix};
use crate::metrics::{
    cone_bound_sweep, spectrum_stats, uniformity_report, DEFAULT_KNN, DEFAULT_RBF_T,
};
use crate::sim::{run_stack, SimConfig, Variant};
use crate::spectrum::{
    apply_soft_decay, exp_decay_prior, prior_deviation, whiten, DecayParams, ALPHA_GRID,
    DEFAULT_ALPHA, DEFAULT_WHITEN_EPS, PRIOR_C1, PRIOR_C2, PRIOR_GAMMA, PRIOR_WEIGHT,
};

pub const SEED_ENV: &str = "SPECTRAL_RESHAPE_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "spectral-reshape",
    version,
    about = "Singular-value diagnostics and SoftDecay reshaping for embedding matrices"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Spectrum statistics, uniformity metrics and cone-bound sweep of a matrix.
    Analyze(AnalyzeArgs),
    /// Apply SoftDecay (or whitening) to a matrix.
    Transform(TransformArgs),
    /// Run the random transformer stack and trace its spectrum per layer.
    Simulate(SimulateArgs),
    /// Spearman correlation of pair cosines against gold scores.
    Eval(EvalArgs),
    /// Identity vs whitening vs SoftDecay over an alpha grid.
    Compare(CompareArgs),
    /// Write a synthetic anisotropic pair dataset as JSONL.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Emb1,
}

impl From<FormatArg> for MatrixFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => MatrixFormat::Csv,
            FormatArg::Emb1 => MatrixFormat::Emb1,
        }
    }
}

#[derive(Debug, Args)]
pub struct MatrixInput {
    /// Input matrix (EMB1 or CSV).
    #[arg(long, short)]
    pub input: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<FormatArg>,
    /// Input stores one item per column (features x items); transpose on load.
    #[arg(long)]
    pub feature_major: bool,
}

impl MatrixInput {
    fn load(&self) -> Result<EmbeddingMatrix> {
        let fmt = self
            .format
            .map(MatrixFormat::from)
            .unwrap_or_else(|| MatrixFormat::from_path(&self.input));
        let x = read_matrix(&self.input, fmt)?;
        Ok(if self.feature_major { x.transpose() } else { x })
    }
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    /// RBF / LSDS temperature.
    #[arg(long, default_value_t = DEFAULT_RBF_T)]
    pub t: f64,
    /// LSDS neighbourhood size (capped at rows - 1).
    #[arg(long, default_value_t = DEFAULT_KNN)]
    pub knn: usize,
    /// Explained-variance cut-offs.
    #[arg(long = "ev-k", value_delimiter = ',', default_values_t = vec![1, 3, 10])]
    pub ev_ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: MatrixInput,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Report path (JSON).
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub input: MatrixInput,
    /// Transformed matrix path.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Output format; inferred from the extension when omitted.
    #[arg(long)]
    pub output_format: Option<FormatArg>,
    /// Optional JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// SoftDecay strength (negative).
    #[arg(long, default_value_t = DEFAULT_ALPHA, allow_hyphen_values = true)]
    pub alpha: f64,
    /// Floor applied to decayed singular values before rescaling.
    #[arg(long, default_value_t = 0.0)]
    pub clamp_floor: f64,
    /// Whiten instead of SoftDecay.
    #[arg(long)]
    pub whiten: bool,
    /// Whitening cut-off relative to the largest singular value.
    #[arg(long, default_value_t = DEFAULT_WHITEN_EPS)]
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Full,
    PureAttention,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    /// Overridden by SPECTRAL_RESHAPE_SEED when set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    /// Record only the input and the last layer.
    #[arg(long)]
    pub final_only: bool,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Identity,
    SoftDecay,
    Whiten,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Pair dataset (JSONL).
    #[arg(long, short)]
    pub pairs: PathBuf,
    #[arg(long, value_enum, default_value = "soft-decay")]
    pub method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_ALPHA, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_WHITEN_EPS)]
    pub eps: f64,
    /// Transform the stacked embeddings in chunks of this many pairs.
    #[arg(long)]
    pub per_batch: Option<usize>,
    /// Also evaluate the untransformed embeddings as a baseline row.
    #[arg(long)]
    pub with_baseline: bool,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, short)]
    pub pairs: PathBuf,
    /// SoftDecay alphas to compare.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = ALPHA_GRID.to_vec())]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: TableFormat,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_pairs: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Leading singular value of the embedding map; the rest are 1.
    #[arg(long, default_value_t = 100.0)]
    pub skew_top: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Overridden by SPECTRAL_RESHAPE_SEED when set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: PathBuf,
}

/// `SPECTRAL_RESHAPE_SEED` wins over the flag.
pub fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map_err(|_| {
            Error::InvalidParam(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))
        }),
        Err(_) => Ok(flag),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> u8
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
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Transform(a) => cmd_transform(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn spectrum_section(sigma: &[f64]) -> Result<Value> {
    let stats = spectrum_stats(sigma)?;
    let prior = exp_decay_prior(sigma.len(), PRIOR_C1, PRIOR_C2, PRIOR_GAMMA);
    let mut v = section(&stats);
    let obj = v.as_object_mut().expect("stats serialise to an object");
    obj.insert("sigma".into(), section(&sigma));
    obj.insert(
        "prior_deviation".into(),
        json!(prior_deviation(sigma, &prior, PRIOR_WEIGHT)?),
    );
    Ok(v)
}

fn effective_knn(requested: usize, rows: usize) -> Result<usize> {
    if rows < 2 {
        return Err(Error::InvalidShape(format!(
            "metrics need at least 2 rows, got {rows}"
        )));
    }
    Ok(requested.clamp(1, rows - 1))
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let x = a.input.load()?;
    let sigma = svd(&x)?.sigma.to_vec();
    let knn = effective_knn(a.metrics.knn, x.rows())?;
    let uni = uniformity_report(&x, &x, &a.metrics.ev_ks, a.metrics.t, knn)?;
    let cone = if sigma.len() >= 2 {
        cone_bound_sweep(&x)?
    } else {
        Vec::new()
    };

    let mut r = ReportFile::new(ReportMeta::new(
        "analyze",
        None,
        json!({
            "input": a.input.input.display().to_string(),
            "rows": x.rows(),
            "cols": x.cols(),
            "t": a.metrics.t,
            "knn": knn,
            "ev_k": a.metrics.ev_ks,
        }),
    ));
    r.spectrum = Some(spectrum_section(&sigma)?);
    r.uniformity = Some(section(&uni));
    r.cone_bound = Some(section(&cone));
    write_report(&r, &a.output)?;
    println!(
        "analyzed {}x{}: skewness {:.6}, EV_1 {:.6}, token_uni {:.6}",
        x.rows(),
        x.cols(),
        r.spectrum.as_ref().unwrap()["skewness"]
            .as_f64()
            .unwrap_or_default(),
        uni.ev_k.values().next().copied().unwrap_or_default(),
        uni.token_uni
    );
    Ok(())
}

pub fn cmd_transform(a: &TransformArgs) -> Result<()> {
    let x = a.input.load()?;
    let (y, transform) = if a.whiten {
        let y = whiten(&x, a.eps)?;
        (
            y,
            json!({ "method": "whiten", "eps": a.eps, "clamped_count": 0 }),
        )
    } else {
        let p = DecayParams::with_floor(a.alpha, a.clamp_floor)?;
        let (y, rep) = apply_soft_decay(&x, &p)?;
        let mut v = section(&rep);
        v.as_object_mut()
            .expect("object")
            .insert("method".into(), json!("soft_decay"));
        (y, v)
    };
    let out_fmt = a
        .output_format
        .map(MatrixFormat::from)
        .unwrap_or_else(|| MatrixFormat::from_path(&a.output));
    write_matrix(&y, &a.output, out_fmt)?;

    if let Some(path) = &a.report {
        let mut r = ReportFile::new(ReportMeta::new(
            "transform",
            None,
            json!({
                "input": a.input.input.display().to_string(),
                "output": a.output.display().to_string(),
                "alpha": a.alpha,
                "clamp_floor": a.clamp_floor,
                "whiten": a.whiten,
                "eps": a.eps,
            }),
        ));
        r.transform = Some(transform);
        r.spectrum = Some(spectrum_section(
            svd(&y)?.sigma.as_slice().expect("contiguous"),
        )?);
        write_report(&r, path)?;
    }
    println!(
        "wrote {}x{} matrix to {}",
        y.rows(),
        y.cols(),
        a.output.display()
    );
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let variant = match a.variant {
        VariantArg::Full => Variant::Full,
        VariantArg::PureAttention => Variant::PureAttention,
    };
    let mut cfg = SimConfig::new(a.layers, a.dim, a.tokens, seed, variant);
    cfg.record_every_layer = !a.final_only;
    let trace = run_stack(&cfg)?;

    let mut r = ReportFile::new(ReportMeta::new("simulate", Some(seed), section(&cfg)));
    let last = trace.layers.last().expect("input layer is always recorded");
    r.spectrum = Some(section(&last.spectrum));
    r.trace = Some(section(&trace));
    write_report(&r, &a.output)?;
    println!(
        "simulated {} layers: final skewness {:.6}, EV_1 {:.6}, token_uni {:.6}",
        a.layers, last.spectrum.skewness, last.ev_1, last.token_uniformity
    );
    Ok(())
}

fn method_from(a: &EvalArgs) -> Result<Method> {
    Ok(match a.method {
        MethodArg::Identity => Method::Identity,
        MethodArg::SoftDecay => Method::soft_decay(a.alpha)?,
        MethodArg::Whiten => Method::Whiten { eps: a.eps },
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let d = read_pairs(&a.pairs)?;
    let method = method_from(a)?;
    let mut results = Vec::new();
    if a.with_baseline && !matches!(method, Method::Identity) {
        results.push(evaluate_pairs_batched(&d, &Method::Identity, a.per_batch)?);
    }
    results.push(evaluate_pairs_batched(&d, &method, a.per_batch)?);

    let mut r = ReportFile::new(ReportMeta::new(
        "eval",
        None,
        json!({
            "pairs": a.pairs.display().to_string(),
            "dataset": d.name,
            "method": section(&method),
            "per_batch": a.per_batch.map_or(Value::from("all"), Value::from),
        }),
    ));
    r.eval = Some(section(&results));
    write_report(&r, &a.output)?;
    for res in &results {
        println!(
            "{}: spearman {:.6} over {} pairs",
            res.method, res.spearman_rho, res.n_pairs
        );
    }
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let d = read_pairs(&a.pairs)?;
    let knn = effective_knn(a.metrics.knn, 2 * d.len())?;
    let table = compare_methods(&d, &a.alphas, a.metrics.t, knn, &a.metrics.ev_ks)?;
    match a.format {
        TableFormat::Csv => write_text(&a.output, &table.to_csv()?)?,
        TableFormat::Json => {
            let mut r = ReportFile::new(ReportMeta::new(
                "compare",
                None,
                json!({
                    "pairs": a.pairs.display().to_string(),
                    "alphas": a.alphas,
                    "t": a.metrics.t,
                    "knn": knn,
                    "ev_k": a.metrics.ev_ks,
                }),
            ));
            r.eval = Some(section(&table));
            write_report(&r, &a.output)?;
        }
    }
    for row in &table.rows {
        println!(
            "{:<18} rho {:.6}  token_uni {:.6}  lsds {:.6}",
            row.method, row.spearman_rho, row.token_uni, row.lsds_mean
        );
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let mut skew = vec![1.0; a.dim];
    if let Some(first) = skew.first_mut() {
        *first = a.skew_top;
    }
    let d = synth_sts(a.n_pairs, a.dim, &skew, a.noise, seed)?;
    write_pairs(&d, &a.output)?;
    println!(
        "wrote {} pairs (dim {}) to {}",
        d.len(),
        a.dim,
        a.output.display()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
