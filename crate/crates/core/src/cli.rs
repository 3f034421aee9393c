//! The `lsband` command-line tool.
//!
//! Every command is a pure function of its input files, flags and `--seed`. Each
//! output file gets a sibling `<out>.manifest.json` recording the command, the
//! configuration and timings; JSON outputs name their manifest in a `manifest` field.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::io::{load_model, parse_bandwidth_json, read_sample_file};
use crate::kde::{Bandwidth, BandwidthClass, DataSet};
use crate::montecarlo::{compare_methods, model_grid, risk_curve, SimConfig};
use crate::selector::{hdr_estimate, novelty_classify, select_bandwidth, SelectionResult, SelectorConfig, Target};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "LSBAND_THREADS";

#[derive(Parser, Debug)]
#[command(name = "lsband", version, about = "Bandwidth selection for kernel level-set and HDR estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Select a bandwidth matrix for a level set or HDR target.
    Select(SelectArgs),
    /// Estimate an HDR and export its boundary.
    Hdr(HdrArgs),
    /// Simulated and approximate risk over a grid of scalar bandwidths.
    Riskcurve(RiskCurveArgs),
    /// Paired comparison of the HDR selector with LSCV.
    Compare(CompareArgs),
    /// Flag test points outside the estimated HDR of a training sample.
    Novelty(NoveltyArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Select(_) => "select",
            Command::Hdr(_) => "hdr",
            Command::Riskcurve(_) => "riskcurve",
            Command::Compare(_) => "compare",
            Command::Novelty(_) => "novelty",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Command::Select(a) => a.seed,
            Command::Hdr(a) => a.seed,
            Command::Riskcurve(a) => a.sim.seed,
            Command::Compare(a) => a.sim.seed,
            Command::Novelty(a) => a.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Hdr,
    Ls,
}

#[derive(Args, Debug, Serialize)]
pub struct TargetArgs {
    /// Estimation target.
    #[arg(long, value_enum, default_value = "hdr")]
    pub target: TargetKind,
    /// HDR tail probability; the region has content `1 - tau`.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Density level for level-set targets.
    #[arg(long)]
    pub level: Option<f64>,
}

impl TargetArgs {
    fn target(&self) -> Result<Target> {
        match self.target {
            TargetKind::Hdr => Ok(Target::Hdr { tau: self.tau }),
            TargetKind::Ls => self
                .level
                .map(|level| Target::Ls { level })
                .ok_or_else(|| Error::InvalidInput("--target ls requires --level".into())),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SelectArgs {
    /// Sample CSV with columns x,y.
    pub input: PathBuf,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Bandwidth class: scalar, diag or full.
    #[arg(long, default_value = "scalar")]
    pub class: BandwidthClass,
    /// Nodes per axis of the risk quadrature grid.
    #[arg(long, default_value_t = crate::selector::DEFAULT_GRID_COUNT)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct HdrArgs {
    /// Sample CSV with columns x,y.
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// `auto`, a scalar `h` giving `h^2 I`, or a JSON file holding a matrix.
    #[arg(long, default_value = "auto")]
    pub bandwidth: String,
    /// Bandwidth class searched by `--bandwidth auto`.
    #[arg(long, default_value = "full")]
    pub class: BandwidthClass,
    /// Contour CSV output (x,y,length,nx,ny,loop_id).
    #[arg(long)]
    pub contour_out: Option<PathBuf>,
    /// Nodes per axis of the evaluation grid.
    #[arg(long, default_value_t = crate::selector::DEFAULT_GRID_COUNT)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON summary path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SimArgs {
    /// Builtin model (`normal`, `sharp-mode`) or a mixture JSON file.
    #[arg(long, default_value = "normal")]
    pub model: String,
    /// Sample size per replication.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Monte Carlo replications.
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    /// Replication `r` uses seed `seed + r`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Nodes per axis of the simulation grid.
    #[arg(long, default_value_t = crate::montecarlo::DEFAULT_SIM_GRID)]
    pub grid: usize,
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig> {
        let model = load_model(&self.model)?;
        let grid = model_grid(&model, self.grid)?;
        Ok(SimConfig {
            model,
            n: self.n,
            target: self.target.target()?,
            reps: self.reps,
            seed: self.seed,
            grid,
        })
    }
}

#[derive(Args, Debug, Serialize)]
pub struct RiskCurveArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Scalar bandwidths `a:b:k`, `k` evenly spaced values from `a` to `b`.
    #[arg(long)]
    pub h_grid: String,
    /// CSV output (h,sim_risk,sim_se,approx_risk).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Bandwidth class for both selectors.
    #[arg(long, default_value = "full")]
    pub class: BandwidthClass,
    /// CSV output (rep,hdr_error,lscv_error).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct NoveltyArgs {
    /// Training CSV with columns x,y.
    pub train: PathBuf,
    /// Test CSV with columns x,y and an optional 0/1 label column.
    pub test: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// `auto`, a scalar `h`, or a JSON file holding a matrix.
    #[arg(long, default_value = "auto")]
    pub bandwidth: String,
    /// CSV output (x,y,density,reject[,label]).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct Timings {
    elapsed_seconds: f64,
}

/// Provenance written beside every output file.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    config: &'a Command,
    seed: u64,
    versions: Value,
    outputs: Vec<String>,
    timings: Timings,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn write_manifest(command: &Command, out: &Path, outputs: &[&Path], start: Instant) -> Result<()> {
    let manifest = RunManifest {
        command: command.name(),
        config: command,
        seed: command.seed(),
        versions: json!({ "lsband": env!("CARGO_PKG_VERSION") }),
        outputs: outputs.iter().map(|p| file_name(p)).collect(),
        timings: Timings {
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    };
    let mut w = BufWriter::new(File::create(manifest_path(out))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `value` as JSON to `out`, naming the manifest, or to stdout.
fn emit_json(value: Value, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut value = value;
            if let Value::Object(map) = &mut value {
                map.insert("manifest".into(), Value::String(file_name(&manifest_path(path))));
            }
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, &value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            serde_json::to_writer_pretty(&mut w, &value)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Parses `a:b:k` into `k` evenly spaced values.
pub fn parse_h_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidInput(format!("--h-grid expects a:b:k, got {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let k: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if k == 0 || !(a > 0.0) || !(b >= a) || !b.is_finite() {
        return Err(bad());
    }
    if k == 1 {
        return Ok(vec![a]);
    }
    Ok((0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect())
}

/// Resolves `--bandwidth`: a scalar `h`, a JSON matrix file, or `None` for `auto`.
fn parse_bandwidth_arg(arg: &str) -> Result<Option<Bandwidth>> {
    if arg.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    if let Ok(h) = arg.parse::<f64>() {
        return Bandwidth::scalar(h, 2).map(Some);
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| Error::InvalidInput(format!("--bandwidth {arg:?}: expected auto, a number or a file: {e}")))?;
    parse_bandwidth_json(&text).map(Some)
}

fn select_or_best(data: &DataSet, config: &SelectorConfig) -> Result<(SelectionResult, Option<Error>)> {
    match select_bandwidth(data, config) {
        Ok(r) => Ok((r, None)),
        Err(Error::NoConvergence(r)) => {
            let best = (*r).clone();
            Ok((best, Some(Error::NoConvergence(r))))
        }
        Err(e) => Err(e),
    }
}

fn run_select(args: &SelectArgs, command: &Command, start: Instant) -> Result<()> {
    let data = read_sample_file(&args.input)?.data;
    let config = SelectorConfig::new(args.target.target()?)
        .with_class(args.class)
        .with_grid_count(args.grid);
    let (result, failure) = select_or_best(&data, &config)?;
    emit_json(serde_json::to_value(&result)?, args.out.as_deref())?;
    if let Some(out) = &args.out {
        write_manifest(command, out, &[out], start)?;
    }
    failure.map_or(Ok(()), Err)
}

fn run_hdr(args: &HdrArgs, command: &Command, start: Instant) -> Result<()> {
    let data = read_sample_file(&args.input)?.data;
    let (bandwidth, selection) = match parse_bandwidth_arg(&args.bandwidth)? {
        Some(h) => (h, None),
        None => {
            let config = SelectorConfig::hdr(args.tau).with_class(args.class);
            let (r, _) = select_or_best(&data, &config)?;
            (r.bandwidth.clone(), Some(json!({ "risk": r.risk, "converged": r.converged })))
        }
    };
    let hdr = hdr_estimate(&data, &bandwidth, args.tau, args.grid)?;
    let summary = json!({
        "H": bandwidth.rows(),
        "tau": args.tau,
        "f_tau_hat": hdr.f_tau_hat,
        "n_loops": hdr.contour.n_loops(),
        "closed": hdr.contour.is_closed(),
        "length": hdr.contour.total_length(),
        "segments": hdr.contour.segments.len(),
        "selection": selection,
    });
    if let Some(path) = &args.contour_out {
        let mut w = create(path)?;
        hdr.contour.write_csv(&mut w)?;
        w.flush()?;
    }
    emit_json(summary, args.out.as_deref())?;
    let outputs: Vec<&Path> = args.out.iter().chain(&args.contour_out).map(PathBuf::as_path).collect();
    for out in &outputs {
        write_manifest(command, out, &outputs, start)?;
    }
    Ok(())
}

fn run_riskcurve(args: &RiskCurveArgs, command: &Command, start: Instant) -> Result<()> {
    let hs = parse_h_grid(&args.h_grid)?;
    let config = args.sim.config()?;
    let curve = risk_curve(&config, &hs)?;
    let mut w = create(&args.out)?;
    curve.write_csv(&mut w)?;
    w.flush()?;
    write_manifest(command, &args.out, &[&args.out], start)?;
    emit_json(
        json!({ "sim_argmin": curve.sim_argmin(), "approx_argmin": curve.approx_argmin(), "rows": curve.rows.len() }),
        None,
    )
}

fn run_compare(args: &CompareArgs, command: &Command, start: Instant) -> Result<()> {
    let config = args.sim.config()?;
    let comparison = compare_methods(&config, args.class)?;
    let mut w = create(&args.out)?;
    comparison.write_csv(&mut w)?;
    w.flush()?;
    write_manifest(command, &args.out, &[&args.out], start)?;
    emit_json(
        json!({
            "median_hdr_error": comparison.median_hdr_error,
            "median_lscv_error": comparison.median_lscv_error,
            "wilcoxon": comparison.wilcoxon,
            "non_converged": comparison.non_converged,
        }),
        None,
    )
}

#[derive(Serialize)]
struct NoveltyRow {
    x: f64,
    y: f64,
    density: f64,
    reject: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

fn run_novelty(args: &NoveltyArgs, command: &Command, start: Instant) -> Result<()> {
    let train = read_sample_file(&args.train)?.data;
    let test = read_sample_file(&args.test)?;
    let bandwidth = parse_bandwidth_arg(&args.bandwidth)?;
    let result = novelty_classify(&train, args.tau, &test.data, bandwidth.as_ref(), test.labels.as_deref())?;
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    for i in 0..test.data.n() {
        let [x, y] = test.data.point2(i);
        w.serialize(NoveltyRow {
            x,
            y,
            density: result.density[i],
            reject: result.reject[i] as u8,
            label: test.labels.as_ref().map(|l| l[i]),
        })
        .map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    write_manifest(command, &args.out, &[&args.out], start)?;
    let rejected = result.reject.iter().filter(|&&r| r).count();
    let mut summary = json!({
        "H": result.bandwidth.rows(),
        "f_tau_hat": result.f_tau_hat,
        "n_test": test.data.n(),
        "n_rejected": rejected,
        "accept_rate": 1.0 - rejected as f64 / test.data.n() as f64,
    });
    if let Some(s) = &result.summary {
        summary["summary"] = serde_json::to_value(s)?;
    }
    emit_json(summary, None)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // a pool may already exist when embedded; the cap is then advisory
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs a parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let start = Instant::now();
    let command = &cli.command;
    match command {
        Command::Select(a) => run_select(a, command, start),
        Command::Hdr(a) => run_hdr(a, command, start),
        Command::Riskcurve(a) => run_riskcurve(a, command, start),
        Command::Compare(a) => run_compare(a, command, start),
        Command::Novelty(a) => run_novelty(a, command, start),
    }
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 success, 1 input error, 2 non-convergence, 3 degenerate geometry.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
