//! Command-line driver: synthesize tensors, quantize weights, evaluate
//! containers, search hyperparameters, run the self-test suite, and print
//! the analytic cost model.
//!
//! Exit codes: 0 success, 1 failed checks, 2 bad flags or flag contracts,
//! 3 file/format errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ttq_core::awq::{awp_pgd, default_stepsize, grid_search_hyperparams};
use ttq_core::calibration::{
    activation_loss, diag_scale, shrunk_correlation, weighted_loss, AwqHyperparams, DiagScale,
};
use ttq_core::harness::{run_all_checks, CheckResult, DEFAULT_SEED};
use ttq_core::io::{
    read_container, read_tensor, write_container, write_tensor, ContainerPayload, Dtype,
    QuantContainer, QuantMethod,
};
use ttq_core::lowrank::{
    asvd_init, pca_init, quantize_factor_a, quantize_residual, LowRankFactors,
};
use ttq_core::quantizer::{dequantize_groups, QuantConfig, QuantFormat};
use ttq_core::tensor::{matmul, synth_activations, DenseMatrix, RandomSpec};
use ttq_core::ttq::{codes_checksum, lowrank_overhead, overhead_fraction, TtqReport};
use ttq_core::TtqError;

#[derive(Parser)]
#[command(name = "ttq", about = "Groupwise weight quantization engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic channel-scaled Gaussian tensor file.
    Synth(SynthArgs),
    /// Quantize a weight tensor into a container file.
    Quantize(QuantizeArgs),
    /// Evaluate a container against the original weights.
    Eval(EvalArgs),
    /// Grid-search quantization hyperparameters and emit a CSV table.
    Gridsearch(GridSearchArgs),
    /// Run the seeded oracle and acceptance checks.
    Selftest(SelftestArgs),
    /// Print the online-quantization cost model.
    Cost(CostArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Lognormal std of per-row channel scales.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Storage precision: f64 or f32.
    #[arg(long, default_value = "f64")]
    dtype: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    weights: PathBuf,
    /// rtn | awq | ttq | awp
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 32)]
    group: usize,
    /// asymmetric | symmetric | alt
    #[arg(long, default_value = "asymmetric")]
    format: String,
    /// Expansion factor for the asymmetric range.
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    /// Low-rank correction rank (0 disables it).
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Also quantize the A factor (B stays full-precision).
    #[arg(long)]
    quantize_factors: bool,
    /// Calibration activations (required for awq/awp, forbidden for ttq).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.4)]
    lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Projected-gradient iterations (awp only).
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    container: PathBuf,
    /// Evaluation activations; without them only weight metrics print.
    #[arg(long)]
    acts: Option<PathBuf>,
    /// Emit one JSON line instead of text (requires --acts).
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GridSearchArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    acts: PathBuf,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 32)]
    group: usize,
    #[arg(long, default_value = "asymmetric")]
    format: String,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    /// Grids as "alpha=0,0.5;lambda=0.1,0.4;p=1,2"; omitted axes use the
    /// built-in defaults.
    #[arg(long)]
    grid_spec: Option<String>,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Append a deliberately failing check (harness contract test).
    #[arg(long)]
    inject_failure: bool,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    d: u64,
    #[arg(long)]
    dprime: u64,
    #[arg(long = "T")]
    t: u64,
    #[arg(long, default_value_t = 0)]
    rank: u64,
}

/// Error carrying its process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn contract(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn data(context: &str, err: TtqError) -> Self {
        Self {
            code: 3,
            message: format!("{context}: {err}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gridsearch(args) => cmd_gridsearch(args),
        Command::Selftest(args) => cmd_selftest(args),
        Command::Cost(args) => cmd_cost(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn parse_format(name: &str) -> CliResult<QuantFormat> {
    match name {
        "asymmetric" => Ok(QuantFormat::Asymmetric),
        "symmetric" => Ok(QuantFormat::Symmetric),
        "alt" | "alt_integer_zero" => Ok(QuantFormat::AltIntegerZero),
        other => Err(CliError::contract(format!(
            "unknown format '{other}' (expected asymmetric|symmetric|alt)"
        ))),
    }
}

fn load_tensor(path: &Path, what: &str) -> CliResult<DenseMatrix> {
    read_tensor(path).map_err(|e| CliError::data(&format!("{what} {}", path.display()), e))
}

fn cmd_synth(args: SynthArgs) -> CliResult<ExitCode> {
    let dtype = match args.dtype.as_str() {
        "f64" => Dtype::F64,
        "f32" => Dtype::F32,
        other => {
            return Err(CliError::contract(format!(
                "unknown dtype '{other}' (expected f64|f32)"
            )))
        }
    };
    if args.rows == 0 || args.cols == 0 {
        return Err(CliError::contract("rows and cols must be positive"));
    }
    let m = synth_activations(&RandomSpec {
        seed: args.seed,
        channel_scale_sigma: args.sigma,
        rows: args.rows,
        cols: args.cols,
    });
    write_tensor(&args.out, &m, dtype).map_err(|e| CliError::data("writing", e))?;
    println!(
        "wrote {}x{} tensor (seed {}, sigma {}) to {}",
        args.rows,
        args.cols,
        args.seed,
        args.sigma,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_quantize(args: QuantizeArgs) -> CliResult<ExitCode> {
    let method: QuantMethod = args
        .method
        .parse()
        .map_err(|e: TtqError| CliError::contract(e.to_string()))?;
    match method {
        QuantMethod::Ttq if args.calib.is_some() => {
            return Err(CliError::contract("ttq takes no calibration data"));
        }
        QuantMethod::Awq | QuantMethod::Awp if args.calib.is_none() => {
            return Err(CliError::contract(format!(
                "method {} requires --calib",
                method.name()
            )));
        }
        QuantMethod::Awp if args.rank > 0 => {
            return Err(CliError::contract("awp does not support --rank"));
        }
        _ => {}
    }

    let config = QuantConfig::new(args.bits, args.group, parse_format(&args.format)?)
        .and_then(|c| c.with_nu(args.nu))
        .map_err(|e| CliError::contract(e.to_string()))?;
    let hp = AwqHyperparams::new(args.alpha, args.lambda, args.p)
        .map_err(|e| CliError::contract(e.to_string()))?;

    let w = load_tensor(&args.weights, "weights")?;
    if args.rank > w.rows().min(w.cols()) {
        return Err(CliError::contract(format!(
            "rank {} exceeds min dimension of a {}x{} matrix",
            args.rank,
            w.rows(),
            w.cols()
        )));
    }
    let calib = match &args.calib {
        Some(path) => {
            let x = load_tensor(path, "calibration activations")?;
            if x.rows() != w.cols() {
                return Err(CliError::data(
                    "calibration activations",
                    TtqError::DimensionMismatch(format!(
                        "{} channels for {} weight columns",
                        x.rows(),
                        w.cols()
                    )),
                ));
            }
            Some(x)
        }
        None => None,
    };

    let quantize_err = |e: TtqError| CliError::data("quantizing", e);
    // What used for reporting; for ttq it is the flat-activation snapshot
    // (uniform scale), since the real quantization happens at eval time.
    let (container, what) = match method {
        QuantMethod::Rtn | QuantMethod::Ttq => {
            let mut factors = if args.rank > 0 {
                pca_init(&w, args.rank).map_err(quantize_err)?
            } else {
                LowRankFactors::empty()
            };
            if args.quantize_factors {
                factors = quantize_factor_a(&factors, &config).map_err(quantize_err)?;
            }
            let s = DiagScale::uniform(w.cols());
            let (qt, what_q) = quantize_residual(&w, &factors, &s, &config).map_err(quantize_err)?;
            let what = match factors.product().map_err(quantize_err)? {
                Some(ba) => what_q.add(&ba).map_err(quantize_err)?,
                None => what_q,
            };
            let payload = if method == QuantMethod::Ttq {
                ContainerPayload::FullPrecision(w.clone())
            } else {
                ContainerPayload::Quantized(qt)
            };
            let container = QuantContainer {
                method,
                config,
                hp,
                rows: w.rows(),
                cols: w.cols(),
                payload,
                diag_scale: None,
                factors,
            };
            (container, what)
        }
        QuantMethod::Awq => {
            let x = calib.as_ref().expect("checked above");
            let s = diag_scale(x, &hp).map_err(quantize_err)?;
            let mut factors = if args.rank > 0 {
                asvd_init(&w, &s, args.rank).map_err(quantize_err)?
            } else {
                LowRankFactors::empty()
            };
            if args.quantize_factors {
                factors = quantize_factor_a(&factors, &config).map_err(quantize_err)?;
            }
            let (qt, what_q) = quantize_residual(&w, &factors, &s, &config).map_err(quantize_err)?;
            let what = match factors.product().map_err(quantize_err)? {
                Some(ba) => what_q.add(&ba).map_err(quantize_err)?,
                None => what_q,
            };
            let container = QuantContainer {
                method,
                config,
                hp,
                rows: w.rows(),
                cols: w.cols(),
                payload: ContainerPayload::Quantized(qt),
                diag_scale: Some(s),
                factors,
            };
            (container, what)
        }
        QuantMethod::Awp => {
            let x = calib.as_ref().expect("checked above");
            let corr = shrunk_correlation(x, hp.lambda.min(1.0)).map_err(quantize_err)?;
            let mu = default_stepsize(&corr).map_err(quantize_err)?;
            let result = awp_pgd(&w, &corr, mu, args.iters, &config).map_err(quantize_err)?;
            let container = QuantContainer {
                method,
                config,
                hp,
                rows: w.rows(),
                cols: w.cols(),
                payload: ContainerPayload::Quantized(result.best_quantized),
                diag_scale: None,
                factors: LowRankFactors::empty(),
            };
            (container, result.best)
        }
    };

    write_container(&args.out, &container).map_err(|e| CliError::data("writing container", e))?;

    let err = w
        .sub(&what)
        .map_err(quantize_err)?
        .frobenius_norm();
    let wnorm = w.frobenius_norm();
    println!("weight_error={err}");
    println!("relative_weight_error={}", err / wnorm);
    if let Some(x) = &calib {
        let loss = weighted_loss(&w, &what, x, hp.lambda.min(1.0)).map_err(quantize_err)?;
        println!("weighted_loss={loss}");
    }
    println!("container={}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Reconstructs the dense approximation a container represents, together
/// with the packed-code checksum of the path that produced it. A test-time
/// container is self-contained: the online path quantizes its stored
/// full-precision weights against the evaluation activations.
fn reconstruct(
    container: &QuantContainer,
    acts: Option<&DenseMatrix>,
) -> CliResult<(DenseMatrix, u64)> {
    let err = |e: TtqError| CliError::data("reconstructing", e);
    match &container.payload {
        ContainerPayload::Quantized(qt) => {
            let deq = dequantize_groups(qt).map_err(err)?;
            let unscaled = match &container.diag_scale {
                Some(s) => deq.scale_columns(&s.reciprocal()).map_err(err)?,
                None => deq,
            };
            let what = match container.factors.product().map_err(err)? {
                Some(ba) => unscaled.add(&ba).map_err(err)?,
                None => unscaled,
            };
            Ok((what, codes_checksum(&qt.codes)))
        }
        ContainerPayload::FullPrecision(stored) => {
            // Online path: quantize against the evaluation activations, or a
            // uniform scale when none were given.
            let s = match acts {
                Some(x) => diag_scale(x, &container.hp).map_err(err)?,
                None => DiagScale::uniform(stored.cols()),
            };
            let (qt, what_q) =
                quantize_residual(stored, &container.factors, &s, &container.config)
                    .map_err(err)?;
            let what = match container.factors.product().map_err(err)? {
                Some(ba) => what_q.add(&ba).map_err(err)?,
                None => what_q,
            };
            Ok((what, codes_checksum(&qt.codes)))
        }
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult<ExitCode> {
    if args.json && args.acts.is_none() {
        return Err(CliError::contract("--json requires --acts"));
    }
    let w = load_tensor(&args.weights, "weights")?;
    let container = read_container(&args.container)
        .map_err(|e| CliError::data(&format!("container {}", args.container.display()), e))?;
    if container.rows != w.rows() || container.cols != w.cols() {
        return Err(CliError::data(
            "container",
            TtqError::DimensionMismatch(format!(
                "container is {}x{} but weights are {}x{}",
                container.rows,
                container.cols,
                w.rows(),
                w.cols()
            )),
        ));
    }
    let acts = match &args.acts {
        Some(path) => {
            let x = load_tensor(path, "activations")?;
            if x.rows() != w.cols() {
                return Err(CliError::data(
                    "activations",
                    TtqError::DimensionMismatch(format!(
                        "{} channels for {} weight columns",
                        x.rows(),
                        w.cols()
                    )),
                ));
            }
            Some(x)
        }
        None => None,
    };

    let (what, checksum) = reconstruct(&container, acts.as_ref())?;
    let err = |e: TtqError| CliError::data("evaluating", e);

    let diff = w.sub(&what).map_err(err)?;
    let weight_error = diff.frobenius_norm();
    let g = container.config.groupsize;
    let per_group_max = diff
        .as_slice()
        .chunks(g)
        .map(|chunk| chunk.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0f64, f64::max);

    if let Some(x) = &acts {
        let act_loss = activation_loss(&w, &what, x).map_err(err)?;
        let weighted = weighted_loss(&w, &what, x, container.hp.lambda.min(1.0)).map_err(err)?;
        let reference = matmul(&w, x).map_err(err)?.frobenius_norm_sq();
        let rho = overhead_fraction(w.cols() as u64, w.rows() as u64, x.cols() as u64);
        if args.json {
            let report = TtqReport {
                tokens: x.cols(),
                scale: container
                    .diag_scale
                    .clone()
                    .unwrap_or_else(|| DiagScale::uniform(w.cols())),
                loss: weighted,
                rho,
                codes_checksum: checksum,
            };
            let layer = args
                .container
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "layer".into());
            println!("{}", report.to_json_line(&layer));
        } else {
            println!("method={}", container.method.name());
            println!("weight_error={weight_error}");
            println!("per_group_max_error={per_group_max}");
            println!("activation_loss={act_loss}");
            println!(
                "relative_activation_loss={}",
                act_loss / reference.max(f64::MIN_POSITIVE)
            );
            println!("weighted_loss={weighted}");
            println!("rho={rho}");
            if !container.factors.is_empty() {
                println!(
                    "lowrank_overhead={}",
                    lowrank_overhead(
                        w.cols() as u64,
                        w.rows() as u64,
                        container.factors.rank() as u64
                    )
                );
            }
        }
    } else {
        println!("method={}", container.method.name());
        println!("weight_error={weight_error}");
        println!("per_group_max_error={per_group_max}");
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_grid_spec(spec: &str) -> CliResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut alphas: Vec<f64> = ttq_core::awq::DEFAULT_ALPHA_GRID.to_vec();
    let mut lambdas: Vec<f64> = ttq_core::awq::DEFAULT_LAMBDA_GRID.to_vec();
    let mut ps: Vec<f64> = ttq_core::awq::DEFAULT_P_GRID.to_vec();
    for part in spec.split(';').filter(|p| !p.is_empty()) {
        let (axis, values) = part.split_once('=').ok_or_else(|| {
            CliError::contract(format!("bad grid spec segment '{part}' (expected axis=v1,v2)"))
        })?;
        let parsed: Vec<f64> = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::contract(format!("bad grid value '{v}'")))
            })
            .collect::<CliResult<_>>()?;
        if parsed.is_empty() {
            return Err(CliError::contract(format!("empty grid for axis '{axis}'")));
        }
        match axis.trim() {
            "alpha" => alphas = parsed,
            "lambda" => lambdas = parsed,
            "p" => ps = parsed,
            other => {
                return Err(CliError::contract(format!(
                    "unknown grid axis '{other}' (expected alpha|lambda|p)"
                )))
            }
        }
    }
    Ok((alphas, lambdas, ps))
}

fn cmd_gridsearch(args: GridSearchArgs) -> CliResult<ExitCode> {
    let config = QuantConfig::new(args.bits, args.group, parse_format(&args.format)?)
        .and_then(|c| c.with_nu(args.nu))
        .map_err(|e| CliError::contract(e.to_string()))?;
    let (alphas, lambdas, ps) = match &args.grid_spec {
        Some(spec) => parse_grid_spec(spec)?,
        None => (
            ttq_core::awq::DEFAULT_ALPHA_GRID.to_vec(),
            ttq_core::awq::DEFAULT_LAMBDA_GRID.to_vec(),
            ttq_core::awq::DEFAULT_P_GRID.to_vec(),
        ),
    };
    let w = load_tensor(&args.weights, "weights")?;
    let x = load_tensor(&args.acts, "activations")?;
    let result = grid_search_hyperparams(&w, &x, &config, &alphas, &lambdas, &ps)
        .map_err(|e| CliError::data("grid search", e))?;

    let mut csv = String::from("alpha,lambda,p,loss\n");
    for point in &result.table {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            point.hp.alpha, point.hp.lambda, point.hp.p, point.loss
        ));
    }
    std::fs::write(&args.csv, csv).map_err(|e| CliError::data("writing csv", e.into()))?;

    println!("grid_points={}", result.table.len());
    for (i, point) in result.top(5).iter().enumerate() {
        println!(
            "top{}: alpha={} lambda={} p={} loss={}",
            i + 1,
            point.hp.alpha,
            point.hp.lambda,
            point.hp.p,
            point.loss
        );
    }
    println!(
        "best: alpha={} lambda={} p={} loss={}",
        result.best.hp.alpha, result.best.hp.lambda, result.best.hp.p, result.best.loss
    );
    println!("csv={}", args.csv.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(args: SelftestArgs) -> CliResult<ExitCode> {
    let mut results = run_all_checks(args.seed).map_err(|e| CliError::data("selftest", e))?;
    if args.inject_failure {
        results.push(CheckResult {
            name: "injected_failure",
            passed: false,
            detail: "deliberate failure requested via --inject-failure".into(),
        });
    }
    let mut all_passed = true;
    println!("{:<6} {:<26} detail", "status", "check");
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag:<6} {:<26} {}", r.name, r.detail);
        all_passed &= r.passed;
    }
    if all_passed {
        println!("all {} checks passed (seed {})", results.len(), args.seed);
        Ok(ExitCode::SUCCESS)
    } else {
        let failing: Vec<&str> = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        eprintln!("failing checks: {}", failing.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_cost(args: CostArgs) -> CliResult<ExitCode> {
    if args.d == 0 || args.dprime == 0 || args.t == 0 {
        return Err(CliError::contract("d, dprime, and T must be positive"));
    }
    if args.rank > args.d.min(args.dprime) {
        return Err(CliError::contract("rank exceeds min(d, dprime)"));
    }
    let rho = overhead_fraction(args.d, args.dprime, args.t);
    println!("rho={rho}");
    if args.rank > 0 {
        println!("lowrank={}", lowrank_overhead(args.d, args.dprime, args.rank));
    }
    Ok(ExitCode::SUCCESS)
}
