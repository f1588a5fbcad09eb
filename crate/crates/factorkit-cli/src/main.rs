//! factorkit command line: validate, analyze, compare, run, gradcheck,
//! bench and export models from the zoo or from plain-text spec files.
//!
//! Exit codes: 0 success, 2 usage/validation error, 3 runtime numeric error.

use clap::{Args, Parser, Subcommand};
use factorkit::cost::{analyze, compare, CostError};
use factorkit::gradcheck::grad_check;
use factorkit::graph::{validate, GraphSpec, Shape};
use factorkit::ops::EngineError;
use factorkit::parallel::{bench, BenchResult};
use factorkit::params::{init_params, save_tensor, Parameters};
use factorkit::ppm::load_ppm;
use factorkit::textfmt;
use factorkit::zoo::{build, Multiplier, ZooConfig, ZooModel};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "factorkit", version, about = "Factorized CNN toolkit", max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Zoo model (googlenet4e, factornet_v1, factornet_v2) or path to a
    /// model-spec file
    model: String,
    /// Input shape, e.g. 3x1080x1920 (interpreted per --order)
    #[arg(long)]
    input: Option<String>,
    /// Width multiplier p/q in (0,1], zoo models only
    #[arg(long, default_value = "1")]
    mult: String,
    /// Dimension order of --input: chw (CxHxW) or whc (WxHxC)
    #[arg(long, default_value = "chw")]
    order: DimOrder,
}

#[derive(clap::ValueEnum, Clone, Copy, PartialEq, Eq)]
enum DimOrder {
    Chw,
    Whc,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model's structural invariants
    Validate(ModelArgs),
    /// Per-layer shapes, weight and MAC counts; CSV with --out
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Write the per-layer CSV report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost ratios of several models against a baseline
    Compare {
        /// Zoo models or spec files (two or more)
        models: Vec<String>,
        /// Baseline model name (defaults to the first model)
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value = "1")]
        mult: String,
        #[arg(long, default_value = "chw")]
        order: DimOrder,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward pass over a PPM image; writes one tensor file per output
    Run {
        #[command(flatten)]
        model: ModelArgs,
        /// Binary PPM (P6) image; its size defines the input shape
        #[arg(long)]
        image: PathBuf,
        /// FKT1 parameter file (random-initialized from --seed if absent)
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for tensor files
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare analytic gradients against central differences
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median wall time of sequential vs parallel factor execution
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Worker lanes for the parallel executor (capped by
        /// FACTORKIT_THREADS)
        #[arg(long, default_value_t = 4)]
        lanes: usize,
        #[arg(long, default_value_t = 7)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a model in the plain-text spec format
    Export {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    fn usage(msg: impl Into<String>) -> Self {
        Fail { code: USAGE_ERROR, msg: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Fail { code: RUNTIME_ERROR, msg: msg.into() }
    }
}

// Validation and input problems exit 2; numeric failures inside a
// well-formed computation exit 3.
impl From<CostError> for Fail {
    fn from(e: CostError) -> Self {
        match &e {
            CostError::Graph(_) | CostError::InputShapeMismatch { .. } | CostError::UnknownBaseline(_) => {
                Fail::usage(e.to_string())
            }
            _ => Fail::runtime(e.to_string()),
        }
    }
}

impl From<EngineError> for Fail {
    fn from(e: EngineError) -> Self {
        match &e {
            EngineError::Graph(_) | EngineError::InvalidArg(_) => Fail::usage(e.to_string()),
            _ => Fail::runtime(e.to_string()),
        }
    }
}

impl From<factorkit::params::ParamError> for Fail {
    fn from(e: factorkit::params::ParamError) -> Self {
        match &e {
            factorkit::params::ParamError::Cost(c) => {
                Fail { code: Fail::from_cost_code(c), msg: e.to_string() }
            }
            _ => Fail::usage(e.to_string()),
        }
    }
}

impl Fail {
    fn from_cost_code(e: &CostError) -> u8 {
        match e {
            CostError::Graph(_) | CostError::InputShapeMismatch { .. } | CostError::UnknownBaseline(_) => USAGE_ERROR,
            _ => RUNTIME_ERROR,
        }
    }
}

impl From<factorkit::ppm::PpmError> for Fail {
    fn from(e: factorkit::ppm::PpmError) -> Self {
        Fail::usage(e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Fail> {
    match cli.command {
        Command::Validate(model) => cmd_validate(&model),
        Command::Analyze { model, out } => cmd_analyze(&model, out.as_deref()),
        Command::Compare { models, baseline, input, mult, order, out } => {
            cmd_compare(&models, baseline.as_deref(), input.as_deref(), &mult, order, out.as_deref())
        }
        Command::Run { model, image, params, seed, out } => {
            cmd_run(&model, &image, params.as_deref(), seed, &out)
        }
        Command::Gradcheck { model, seed, epsilon, threshold, out } => {
            cmd_gradcheck(&model, seed, epsilon, threshold, out.as_deref())
        }
        Command::Bench { model, lanes, repeats, seed, out } => {
            cmd_bench(&model, lanes, repeats, seed, out.as_deref())
        }
        Command::Export { model, out } => cmd_export(&model, out.as_deref()),
    }
}

fn parse_shape(s: &str, order: DimOrder) -> Result<Shape, Fail> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Fail::usage(format!("expected three 'x'-separated dims, got '{}'", s)));
    }
    let mut dims = [0usize; 3];
    for (slot, p) in dims.iter_mut().zip(&parts) {
        *slot = p
            .parse::<usize>()
            .map_err(|_| Fail::usage(format!("invalid dimension '{}' in '{}'", p, s)))?;
        if *slot == 0 {
            return Err(Fail::usage(format!("zero dimension in '{}'", s)));
        }
    }
    Ok(match order {
        DimOrder::Chw => Shape::new(dims[0], dims[1], dims[2]),
        DimOrder::Whc => Shape::new(dims[2], dims[1], dims[0]),
    })
}

/// Builds a zoo model or parses a spec file. `input` overrides the spec
/// file's declared shape; zoo models default to FHD.
fn resolve_model(args: &ModelArgs) -> Result<GraphSpec, Fail> {
    let mult = Multiplier::parse(&args.mult).map_err(|e| Fail::usage(e.to_string()))?;
    let input = args.input.as_deref().map(|s| parse_shape(s, args.order)).transpose()?;
    match ZooModel::from_name(&args.model) {
        Ok(model) => {
            let shape = input.unwrap_or(Shape { channels: 3, height: 1080, width: 1920 });
            Ok(build(&ZooConfig::new(model, mult, shape)))
        }
        Err(_) => {
            let path = Path::new(&args.model);
            if !path.exists() {
                return Err(Fail::usage(format!(
                    "'{}' is neither a zoo model (googlenet4e, factornet_v1, factornet_v2) nor an existing spec file",
                    args.model
                )));
            }
            if !mult.is_one() {
                return Err(Fail::usage("--mult applies to zoo models only".to_string()));
            }
            let text = std::fs::read_to_string(path)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".to_string());
            let mut graph =
                textfmt::parse(&text, name).map_err(|e| Fail::usage(e.to_string()))?;
            if let Some(shape) = input {
                graph.input_shape = shape;
            }
            Ok(graph)
        }
    }
}

fn check_valid(graph: &GraphSpec) -> Result<(), Fail> {
    let violations = validate(graph);
    if violations.is_empty() {
        return Ok(());
    }
    let mut msg = format!("model '{}' is not well-formed:", graph.name);
    for v in &violations {
        msg.push_str(&format!("\n  - {}", v));
    }
    Err(Fail::usage(msg))
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), Fail> {
    match out {
        Some(path) => std::fs::write(path, content)?,
        None => print!("{}", content),
    }
    Ok(())
}

fn cmd_validate(args: &ModelArgs) -> Result<(), Fail> {
    let graph = resolve_model(args)?;
    check_valid(&graph)?;
    println!("ok: '{}' is well-formed ({} layers)", graph.name, graph.layer_count());
    Ok(())
}

fn cmd_analyze(args: &ModelArgs, out: Option<&Path>) -> Result<(), Fail> {
    let graph = resolve_model(args)?;
    check_valid(&graph)?;
    let report = analyze(&graph)?;
    println!("model {}", report.model);
    println!("input {}", report.input_shape);
    for (name, shape) in &report.outputs {
        println!("output {} {}", name, shape);
    }
    println!(
        "totals weights={} macs={} output_channels={} features={}",
        report.total_weights, report.total_macs, report.total_output_channels, report.total_features
    );
    if let Some(path) = out {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn cmd_compare(
    models: &[String],
    baseline: Option<&str>,
    input: Option<&str>,
    mult: &str,
    order: DimOrder,
    out: Option<&Path>,
) -> Result<(), Fail> {
    if models.len() < 2 {
        return Err(Fail::usage("compare needs at least two models"));
    }
    let graphs: Vec<GraphSpec> = models
        .iter()
        .map(|m| {
            let args = ModelArgs {
                model: m.clone(),
                input: input.map(|s| s.to_string()),
                mult: mult.to_string(),
                order,
            };
            let g = resolve_model(&args)?;
            check_valid(&g)?;
            Ok(g)
        })
        .collect::<Result<_, Fail>>()?;
    let refs: Vec<&GraphSpec> = graphs.iter().collect();
    let baseline = baseline.unwrap_or(&graphs[0].name);
    let report = compare(&refs, baseline)?;

    println!("baseline {} at input {}", report.baseline, report.input_shape);
    println!(
        "{:<14} {:>12} {:>16} {:>12} {:>9} {:>9} {:>9}",
        "model", "weights", "macs", "features", "w_ratio", "mac_ratio", "f_ratio"
    );
    for r in &report.rows {
        println!(
            "{:<14} {:>12} {:>16} {:>12} {:>9.2} {:>9.2} {:>9.2}",
            r.model, r.total_weights, r.total_macs, r.total_features, r.weight_ratio, r.mac_ratio, r.feature_ratio
        );
    }
    if let Some(path) = out {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn cmd_run(
    args: &ModelArgs,
    image: &Path,
    params_file: Option<&Path>,
    seed: u64,
    out_dir: &Path,
) -> Result<(), Fail> {
    let tensor = load_ppm(image)?;
    let image_shape = tensor.shape();
    let mut effective = args.clone();
    // The image defines the input extent.
    effective.input = None;
    let mut graph = resolve_model(&effective)?;
    graph.input_shape = image_shape;
    check_valid(&graph)?;

    let params = match params_file {
        Some(p) => Parameters::load(p)?,
        None => init_params(&graph, seed)?,
    };
    let cache = factorkit::exec::forward_cached(&graph, &params, &tensor)?;
    std::fs::create_dir_all(out_dir)?;
    for (name, t) in cache.output_names().iter().zip(cache.outputs()) {
        let file = out_dir.join(format!("{}_{}.fkt", graph.name, name));
        save_tensor(t, name, &file)?;
        println!("output {} shape={} file={}", name, t.shape(), file.display());
    }
    Ok(())
}

fn cmd_gradcheck(
    args: &ModelArgs,
    seed: u64,
    epsilon: f64,
    threshold: f64,
    out: Option<&Path>,
) -> Result<(), Fail> {
    let mut effective = args.clone();
    if effective.input.is_none() {
        // Full-frame inputs blow the finite-difference budget.
        effective.input = Some("3x32x32".to_string());
    }
    let graph = resolve_model(&effective)?;
    check_valid(&graph)?;
    let params = init_params(&graph, seed)?;
    let input = random_input(&graph, seed ^ 0x9e3779b97f4a7c15);
    let report = grad_check(&graph, &params, &input, epsilon, threshold)?;
    for row in &report.per_layer {
        println!(
            "layer {} checked={} excluded={} max_rel_err={:.3e}",
            row.layer, row.checked, row.excluded, row.max_rel_err
        );
    }
    println!(
        "gradcheck {} checked={} excluded={} max_rel_err={:.3e} threshold={:.1e}",
        if report.passed { "PASS" } else { "FAIL" },
        report.checked_total,
        report.excluded_total,
        report.max_rel_err,
        report.threshold
    );
    if let Some(path) = out {
        std::fs::write(path, report.to_csv())?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Fail::runtime(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.threshold
        )))
    }
}

fn cmd_bench(
    args: &ModelArgs,
    lanes: usize,
    repeats: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Fail> {
    let mut effective = args.clone();
    if effective.input.is_none() {
        effective.input = Some("3x270x480".to_string());
    }
    let graph = resolve_model(&effective)?;
    check_valid(&graph)?;
    let lanes = cap_lanes(lanes)?;
    let params = init_params(&graph, seed)?;
    let input = random_input(&graph, seed ^ 0x5851f42d4c957f2d);
    let result = bench(&graph, &params, &input, lanes, repeats)?;
    println!(
        "model={} lanes={} seq_ms={:.3} par_ms={:.3} speedup={:.4}",
        result.model, result.lanes, result.seq_ms, result.par_ms, result.speedup
    );
    let csv = format!("{}{}", BenchResult::csv_header(), result.to_csv_row());
    if let Some(path) = out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}

fn cmd_export(args: &ModelArgs, out: Option<&Path>) -> Result<(), Fail> {
    let graph = resolve_model(args)?;
    check_valid(&graph)?;
    write_or_print(out, &textfmt::export(&graph))
}

/// FACTORKIT_THREADS caps the lane count when set.
fn cap_lanes(requested: usize) -> Result<usize, Fail> {
    match std::env::var("FACTORKIT_THREADS") {
        Ok(v) => {
            let cap: usize = v.parse().map_err(|_| {
                Fail::usage(format!("FACTORKIT_THREADS must be a positive integer, got '{}'", v))
            })?;
            if cap == 0 {
                return Err(Fail::usage("FACTORKIT_THREADS must be >= 1"));
            }
            Ok(requested.min(cap))
        }
        Err(_) => Ok(requested),
    }
}

/// Deterministic pseudo-random input in [0, 1), matching the range a
/// loaded image would carry.
fn random_input(graph: &GraphSpec, seed: u64) -> factorkit::Tensor {
    let s = graph.input_shape;
    factorkit::tensor::random_uniform([1, s.channels, s.height, s.width], 0.0, 1.0, seed)
}
