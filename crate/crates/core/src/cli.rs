//! Command-line front end. Exit codes: 0 success, 1 I/O or file-format
//! failure, 2 any other failure (invalid arguments, non-convergence, bound
//! violations).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::budget::{
    convert_model, flops_map, make_schedule, BudgetSchedule, ScheduleSpec, DEPTH_GRADED_FIRST, DEPTH_GRADED_LAST,
};
use crate::cost::{self, CostReport, DEFAULT_C_RATIO, DEFAULT_X};
use crate::error::{Error, Result};
use crate::residual::{downgrade, quantize_scales_8bit, LevelBudget, Termination, DEFAULT_MAX_LEVELS};
use crate::sim::{
    batch_trace, depth_sensitivity, forward_quantized, infer_batch, lemmas, margin_check, top_gap, LemmaReport, Margin,
    TraceEntry,
};
use crate::store::{load_quantized, load_tensor, save_quantized, save_tensor, Network, Tensor};
use crate::toy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ternres", version, about = "Ternary residual quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a network's fc/conv weights into ternary residual form.
    Quantize(QuantizeArgs),
    /// Storage and throughput figures for a container or for raw parameters.
    Stats(StatsArgs),
    /// Drop the least important residual levels of a container.
    Downgrade(DowngradeArgs),
    /// Run a container on input tensors and write the logits.
    Infer(InferArgs),
    /// Measure per-layer perturbations of a container against its reference network.
    Trace(TraceArgs),
    /// Check the per-layer perturbation bounds on measured and random data.
    LemmaCheck(LemmaArgs),
    /// Write the seeded toy network and an input batch.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("budget").required(true).args(["eps", "eps_sq", "schedule", "depth_graded", "compute_aware"]))]
pub struct QuantizeArgs {
    /// Network manifest (JSON).
    #[arg(short = 'm', long)]
    pub manifest: PathBuf,
    /// Block size.
    #[arg(short = 'N', long = "N", default_value_t = 64)]
    pub block_size: usize,
    /// Uniform relative tolerance (un-squared): every layer must reach delta <= eps^2.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Uniform squared tolerance.
    #[arg(long)]
    pub eps_sq: Option<f64>,
    /// Schedule file: JSON list of {"pattern", "epsilon_sq"}.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Squared tolerance growing linearly with depth from FIRST to LAST.
    #[arg(long, num_args = 0..=2, value_names = ["FIRST", "LAST"])]
    pub depth_graded: Option<Vec<f64>>,
    /// Squared tolerance ranked by layer FLOPs from MIN (lightest) to CAP (heaviest).
    #[arg(long, num_args = 2, value_names = ["MIN", "CAP"])]
    pub compute_aware: Option<Vec<f64>>,
    /// Maximum levels per block, base included.
    #[arg(long, default_value_t = DEFAULT_MAX_LEVELS)]
    pub r_max: usize,
    /// Round scales to 8-bit dynamic fixed point after conversion.
    #[arg(long)]
    pub quantize_scales: bool,
    /// Output container.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    /// JSON report path (default: OUTPUT.report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV log of every greedy iteration.
    #[arg(long)]
    pub trace_log: Option<PathBuf>,
    /// Power-performance gain of plain 8-2 over 8-8 at the chosen block size.
    #[arg(long, default_value_t = DEFAULT_X)]
    pub x: f64,
    /// Cost of an 8-8 operation relative to an 8-2 one.
    #[arg(long, default_value_t = DEFAULT_C_RATIO)]
    pub c_ratio: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Quantized container to analyse.
    pub container: Option<PathBuf>,
    /// Vector length for the parametric table.
    #[arg(long, requires = "k")]
    pub n: Option<usize>,
    /// Number of blocks.
    #[arg(long, requires = "n")]
    pub k: Option<usize>,
    /// Residual levels per block: one value for all blocks or one per block.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub r: Vec<usize>,
    /// Print compute-bound and bandwidth-bound throughput gains.
    #[arg(long)]
    pub pi: bool,
    /// Cost ratio of an 8-8 over an 8-2 operation (with --pi).
    #[arg(long, default_value_t = DEFAULT_C_RATIO)]
    pub c: f64,
    /// Block size (with --pi).
    #[arg(long = "N", default_value_t = 64.0)]
    pub block_size: f64,
    /// Levels per block (with --pi).
    #[arg(long, default_value_t = 1.0)]
    pub levels: f64,
    /// Power-performance gain of plain 8-2 over 8-8 at the chosen block size.
    #[arg(long, default_value_t = DEFAULT_X)]
    pub x: f64,
    /// Cost of an 8-8 operation relative to an 8-2 one.
    #[arg(long, default_value_t = DEFAULT_C_RATIO)]
    pub c_ratio: f64,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("keep").required(true).args(["keep_levels", "target_compute", "keep_fraction"]))]
pub struct DowngradeArgs {
    /// Container to shrink.
    pub container: PathBuf,
    /// Total levels to keep.
    #[arg(long)]
    pub keep_levels: Option<usize>,
    /// Maximum blocks factor (levels over base blocks).
    #[arg(long)]
    pub target_compute: Option<f64>,
    /// Fraction of the current levels to keep.
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    /// Output container.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Quantized container.
    pub container: PathBuf,
    /// Input tensor shaped like the network input, or a batch with a leading axis.
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    /// Quantize every layer input to 8-bit dynamic fixed point.
    #[arg(long)]
    pub act_quant: bool,
    /// Logits as .npy, one row per input.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Reference network manifest.
    #[arg(short = 'm', long)]
    pub manifest: PathBuf,
    /// Quantized container.
    pub container: PathBuf,
    /// Input tensor or batch (.npy).
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    /// Quantize every layer input to 8-bit dynamic fixed point.
    #[arg(long)]
    pub act_quant: bool,
    /// Write the per-layer table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the full trace as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also inject relative weight noise EPS into the first and the last
    /// fc/conv layer and compare the output perturbations.
    #[arg(long, value_name = "EPS")]
    pub compare_depth: Option<f64>,
    /// Seed of the injected noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LemmaArgs {
    /// Reference network manifest.
    #[arg(short = 'm', long)]
    pub manifest: PathBuf,
    /// Quantized container.
    pub container: PathBuf,
    /// Input tensor or batch (.npy).
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    /// Quantize every layer input to 8-bit dynamic fixed point.
    #[arg(long)]
    pub act_quant: bool,
    /// Random perturbation trials per lemma.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Seed of the random trials.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write every check as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Output directory.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    /// Seed of the weights and inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inputs in the generated batch.
    #[arg(long, default_value_t = 8)]
    pub inputs: usize,
    /// Replace fc/conv weights with exactly ternary blocks of this size.
    #[arg(long)]
    pub exact_ternary: Option<usize>,
}

/// Parses `std::env::args` and runs the command, returning the exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_FAILURE;
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_FAILURE
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("TERNRES_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::invalid(format!("TERNRES_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Error::invalid("TERNRES_THREADS must be at least 1"));
    }
    // a second call in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Quantize(a) => quantize(a),
        Command::Stats(a) => stats(a),
        Command::Downgrade(a) => downgrade_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Trace(a) => trace(a),
        Command::LemmaCheck(a) => lemma_check(a),
        Command::Toy(a) => toy_cmd(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct LayerSummary {
    name: String,
    epsilon_sq: f64,
    delta: f64,
    levels: usize,
    levels_added: usize,
    termination: Termination,
}

#[derive(Serialize)]
struct QuantizeReport {
    schedule: BudgetSchedule,
    layers: Vec<LayerSummary>,
    scales_8bit: bool,
    cost: CostReport,
}

fn schedule_from(a: &QuantizeArgs, net: &Network) -> Result<BudgetSchedule> {
    if let Some(eps) = a.eps {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::invalid(format!("--eps must lie in (0, 1], got {eps}")));
        }
        return make_schedule(net, ScheduleSpec::Uniform { epsilon_sq: eps * eps });
    }
    if let Some(eps_sq) = a.eps_sq {
        return make_schedule(net, ScheduleSpec::Uniform { epsilon_sq: eps_sq });
    }
    if let Some(path) = &a.schedule {
        return BudgetSchedule::load(path);
    }
    if let Some(v) = &a.depth_graded {
        let (first, last) = match v.as_slice() {
            [] => (DEPTH_GRADED_FIRST, DEPTH_GRADED_LAST),
            [f, l] => (*f, *l),
            _ => return Err(Error::invalid("--depth-graded takes zero or two values")),
        };
        return make_schedule(net, ScheduleSpec::DepthGraded { first, last });
    }
    let v = a.compute_aware.as_deref().unwrap_or_default();
    match v {
        [min, cap] => make_schedule(net, ScheduleSpec::ComputeAware { min: *min, cap: *cap }),
        _ => Err(Error::invalid("--compute-aware takes two values")),
    }
}

fn check_block_size(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::invalid("block size N must be positive"))
    } else {
        Ok(())
    }
}

fn quantize(a: QuantizeArgs) -> Result<i32> {
    check_block_size(a.block_size)?;
    if a.r_max == 0 {
        return Err(Error::invalid("--r-max must be at least 1"));
    }
    if let Some(eps_sq) = a.eps_sq {
        if !(eps_sq > 0.0 && eps_sq <= 1.0) {
            return Err(Error::invalid(format!("--eps-sq must lie in (0, 1], got {eps_sq}")));
        }
    }
    let net = Network::load(&a.manifest)?;
    let schedule = schedule_from(&a, &net)?;
    let budgets = schedule.resolve(net.manifest())?;
    let conversion = convert_model(&net, a.block_size, &schedule, a.r_max)?;
    let model = if a.quantize_scales {
        quantize_scales_8bit(&conversion.model, &net)?
    } else {
        conversion.model.clone()
    };
    let cost = CostReport::from_model(&model, &flops_map(&net), a.x, a.c_ratio);
    let layers = conversion
        .layers
        .iter()
        .zip(&model.layers)
        .zip(&budgets)
        .map(|((c, q), (_, eps_sq))| LayerSummary {
            name: q.name.clone(),
            epsilon_sq: *eps_sq,
            delta: q.delta,
            levels: q.total_levels(),
            levels_added: c.levels_added,
            termination: c.termination,
        })
        .collect::<Vec<_>>();
    for l in layers.iter().filter(|l| l.termination == Termination::Exhausted) {
        eprintln!(
            "warning: layer {:?} stopped at delta {:.6e} above epsilon^2 {:.6e}: no block can be refined further",
            l.name, l.delta, l.epsilon_sq
        );
    }

    save_quantized(&model, &a.output)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", a.output.display())));
    if let Some(path) = &a.trace_log {
        conversion.write_trace_csv(create(path)?)?;
    }

    println!("{:<16} {:>12} {:>12} {:>8}", "layer", "epsilon^2", "delta", "levels");
    for l in &layers {
        println!(
            "{:<16} {:>12.6} {:>12.6} {:>8}",
            l.name, l.epsilon_sq, l.delta, l.levels
        );
    }
    println!();
    println!("{cost}");
    write_json(
        &report_path,
        &QuantizeReport {
            schedule,
            layers,
            scales_8bit: model.provenance.scales_8bit,
            cost,
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ParamStats {
    n: usize,
    k: usize,
    residuals: Vec<usize>,
    size_bits: f64,
    capacity: String,
    num_scaling_factors: usize,
}

#[derive(Serialize)]
struct PiStats {
    c: f64,
    block_size: f64,
    levels: f64,
    pi_c: f64,
    pi_m: f64,
}

fn stats(a: StatsArgs) -> Result<i32> {
    let modes = usize::from(a.container.is_some()) + usize::from(a.n.is_some()) + usize::from(a.pi);
    if modes != 1 {
        return Err(Error::invalid("give exactly one of: a container, --n/--k/--r, or --pi"));
    }
    if a.pi {
        if !(a.c > 0.0 && a.block_size > 0.0 && a.levels >= 1.0) {
            return Err(Error::invalid("--pi needs c > 0, N > 0 and levels >= 1"));
        }
        let (pi_c, pi_m) = cost::throughput_gains(a.c, a.block_size, a.levels);
        let s = PiStats {
            c: a.c,
            block_size: a.block_size,
            levels: a.levels,
            pi_c,
            pi_m,
        };
        if a.json {
            println!("{}", serde_json::to_string_pretty(&s)?);
        } else {
            println!("c = {}, N = {}, levels = {}", s.c, s.block_size, s.levels);
            println!("pi_c (compute bound)   {:.3}", s.pi_c);
            println!("pi_m (bandwidth bound) {:.3}", s.pi_m);
        }
        return Ok(EXIT_OK);
    }
    if let Some(n) = a.n {
        let k = a.k.expect("clap enforces --k with --n");
        if k == 0 || n == 0 || n % k != 0 {
            return Err(Error::invalid(format!(
                "--n {n} must be a positive multiple of --k {k}"
            )));
        }
        let residuals = match a.r.len() {
            1 => vec![a.r[0]; k],
            len if len == k => a.r.clone(),
            len => return Err(Error::invalid(format!("--r has {len} values for {k} blocks"))),
        };
        let t = cost::block_stats(n, &residuals)?;
        let s = ParamStats {
            n,
            k,
            residuals,
            size_bits: t.size_bits,
            capacity: t.capacity.to_string(),
            num_scaling_factors: t.num_scaling_factors,
        };
        if a.json {
            println!("{}", serde_json::to_string_pretty(&s)?);
        } else {
            println!("n = {}, k = {}, r = {:?}", s.n, s.k, s.residuals);
            println!("Model Size      {} bits", s.size_bits);
            println!("Model Capacity  {}", s.capacity);
            println!("# Scaling       {}", s.num_scaling_factors);
        }
        return Ok(EXIT_OK);
    }
    let path = a.container.expect("one mode is set");
    let model = load_quantized(&path)?;
    let net = model.reconstruct_network()?;
    let report = CostReport::from_model(&model, &flops_map(&net), a.x, a.c_ratio);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    Ok(EXIT_OK)
}

fn downgrade_cmd(a: DowngradeArgs) -> Result<i32> {
    let budget = match (a.keep_levels, a.target_compute, a.keep_fraction) {
        (Some(n), None, None) => LevelBudget::Total(n),
        (None, Some(f), None) => LevelBudget::BlocksFactor(f),
        (None, None, Some(p)) => LevelBudget::Fraction(p),
        _ => {
            return Err(Error::invalid(
                "give exactly one of --keep-levels, --target-compute, --keep-fraction",
            ))
        }
    };
    let model = load_quantized(&a.container)?;
    let out = downgrade(&model, budget)?;
    save_quantized(&out, &a.output)?;
    println!(
        "levels {} -> {} (base {}), blocks factor {:.3} -> {:.3}",
        model.total_levels(),
        out.total_levels(),
        out.base_blocks(),
        model.blocks_factor(),
        out.blocks_factor()
    );
    for (before, after) in model.layers.iter().zip(&out.layers) {
        println!(
            "{:<16} levels {:>6} -> {:>6}  delta {:.6} -> {:.6}",
            after.name,
            before.total_levels(),
            after.total_levels(),
            before.delta,
            after.delta
        );
    }
    Ok(EXIT_OK)
}

/// Splits an input file into samples: either one tensor shaped like the
/// network input or a batch with one extra leading axis.
pub fn split_inputs(t: &Tensor, input_shape: &[usize]) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    let per: usize = input_shape.iter().product();
    if shape == input_shape {
        return Ok(vec![Tensor::new("input0", input_shape.to_vec(), t.data().to_vec())?]);
    }
    if shape.len() == input_shape.len() + 1 && &shape[1..] == input_shape {
        return t
            .data()
            .chunks(per)
            .enumerate()
            .map(|(i, c)| Tensor::new(format!("input{i}"), input_shape.to_vec(), c.to_vec()))
            .collect();
    }
    Err(Error::ShapeMismatch(format!(
        "input shape {shape:?} is neither {input_shape:?} nor a batch of it"
    )))
}

fn infer(a: InferArgs) -> Result<i32> {
    let model = load_quantized(&a.container)?;
    let raw = load_tensor(&a.input)?;
    let batched = raw.shape().len() == model.manifest.input_shape.len() + 1;
    let inputs = split_inputs(&raw, &model.manifest.input_shape)?;
    let logits = infer_batch(&model, &inputs, a.act_quant)?;
    let classes = logits[0].len();
    let shape = if batched {
        vec![logits.len(), classes]
    } else {
        vec![classes]
    };
    let out = Tensor::new("logits", shape, logits.concat())?;
    save_tensor(&out, &a.output)?;
    for (i, y) in logits.iter().enumerate() {
        let top = top_gap(y).map(|(c, _)| c.to_string()).unwrap_or_else(|_| "-".into());
        println!("sample {i}: argmax {top}");
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct SampleSummary {
    y: Vec<f32>,
    y_hat: Vec<f32>,
    l2_change: f64,
    argmax_kept: bool,
    margin: Option<Margin>,
}

#[derive(Serialize)]
struct TraceReport {
    act_quant: bool,
    entries: Vec<TraceEntry>,
    samples: Vec<SampleSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_sensitivity: Option<crate::sim::DepthSensitivity>,
}

fn load_pair(manifest: &Path, container: &Path, input: &Path) -> Result<(Network, crate::QuantizedModel, Vec<Tensor>)> {
    let net = Network::load(manifest)?;
    let model = load_quantized(container)?;
    let raw = load_tensor(input)?;
    let inputs = split_inputs(&raw, net.input_shape())?;
    Ok((net, model, inputs))
}

fn trace(a: TraceArgs) -> Result<i32> {
    if let Some(eps) = a.compare_depth {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("--compare-depth must be positive, got {eps}")));
        }
    }
    let (net, model, inputs) = load_pair(&a.manifest, &a.container, &a.input)?;
    let entries = batch_trace(&net, &model, &inputs, a.act_quant)?;
    let mut samples = Vec::with_capacity(inputs.len());
    for x in &inputs {
        let pass = forward_quantized(&net, &model, x, a.act_quant)?;
        let (y, y_hat) = (pass.trace.y, pass.trace.y_hat);
        let l2_change = y
            .iter()
            .zip(&y_hat)
            .map(|(&u, &v)| (f64::from(u) - f64::from(v)).powi(2))
            .sum::<f64>()
            .sqrt();
        let argmax_kept = match (top_gap(&y), top_gap(&y_hat)) {
            (Ok((i, _)), Ok((j, _))) => i == j,
            _ => true,
        };
        let margin = margin_check(&y, l2_change).ok();
        samples.push(SampleSummary {
            y,
            y_hat,
            l2_change,
            argmax_kept,
            margin,
        });
    }
    let depth = a
        .compare_depth
        .map(|eps| depth_sensitivity(&net, &inputs, eps, a.seed))
        .transpose()?;

    println!("{:<16} {:>14} {:>14} {:>14}", "layer", "delta", "gamma", "epsilon");
    for e in &entries {
        println!(
            "{:<16} {:>14.6e} {:>14.6e} {:>14.6e}",
            e.layer, e.delta, e.gamma, e.epsilon
        );
    }
    let kept = samples.iter().filter(|s| s.argmax_kept).count();
    let safe = samples.iter().filter(|s| s.margin == Some(Margin::Safe)).count();
    println!();
    println!(
        "argmax kept {kept}/{}; provably safe margin {safe}/{}",
        samples.len(),
        samples.len()
    );
    if let Some(d) = &depth {
        println!(
            "noise {:.3e} at {}: final delta {:.6e}; at {}: final delta {:.6e}",
            d.epsilon, d.first_layer, d.delta_first, d.last_layer, d.delta_last
        );
    }

    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_writer(create(path)?);
        for e in &entries {
            w.serialize(e).map_err(|e| Error::format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &a.json {
        write_json(
            path,
            &TraceReport {
                act_quant: a.act_quant,
                entries,
                samples,
                depth_sensitivity: depth,
            },
        )?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct LemmaSummary {
    measured_checks: usize,
    measured_violations: usize,
    random_trials: usize,
    random_checks: usize,
    random_violations: usize,
    per_lemma: BTreeMap<String, (usize, usize)>,
}

fn lemma_check(a: LemmaArgs) -> Result<i32> {
    let (net, model, inputs) = load_pair(&a.manifest, &a.container, &a.input)?;
    let qnet = model.reconstruct_network()?;
    let mut measured = LemmaReport::default();
    for x in &inputs {
        let pass = forward_quantized(&net, &model, x, a.act_quant)?;
        measured.checks.extend(lemmas::check_pass(&net, &qnet, &pass)?.checks);
    }
    let random = lemmas::random_trials(a.trials, a.seed)?;

    let mut per_lemma = BTreeMap::new();
    for c in measured.checks.iter().chain(&random.checks) {
        let key = serde_json::to_value(c.lemma)?.as_str().unwrap_or("?").to_string();
        let e: &mut (usize, usize) = per_lemma.entry(key).or_default();
        e.0 += 1;
        e.1 += usize::from(!c.holds);
    }
    let summary = LemmaSummary {
        measured_checks: measured.checks.len(),
        measured_violations: measured.violation_count(),
        random_trials: a.trials,
        random_checks: random.checks.len(),
        random_violations: random.violation_count(),
        per_lemma,
    };
    println!("{:<10} {:>10} {:>11}", "lemma", "checks", "violations");
    for (k, (n, v)) in &summary.per_lemma {
        println!("{k:<10} {n:>10} {v:>11}");
    }
    for c in measured.violations().chain(random.violations()) {
        println!("violation: {:?} at {}: {:.6e} > {:.6e}", c.lemma, c.layer, c.lhs, c.rhs);
    }
    if let Some(path) = &a.json {
        write_json(path, &summary)?;
    }
    let total = summary.measured_violations + summary.random_violations;
    println!("{} violations", total);
    Ok(if total == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn toy_cmd(a: ToyArgs) -> Result<i32> {
    if a.inputs == 0 {
        return Err(Error::invalid("--inputs must be at least 1"));
    }
    let net = match a.exact_ternary {
        Some(0) => return Err(Error::invalid("--exact-ternary block size must be positive")),
        Some(n) => toy::exact_ternary_network(a.seed, n),
        None => toy::toy_network(a.seed),
    };
    let manifest = net.save(&a.output, "manifest.json")?;
    let inputs = toy::random_inputs(&net, a.inputs, a.seed.wrapping_add(1));
    let mut shape = vec![inputs.len()];
    shape.extend_from_slice(net.input_shape());
    let data: Vec<f32> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let batch = Tensor::new("inputs", shape, data)?;
    let inputs_path = a.output.join("inputs.npy");
    save_tensor(&batch, &inputs_path)?;
    println!("{}", manifest.display());
    println!("{}", inputs_path.display());
    Ok(EXIT_OK)
}
