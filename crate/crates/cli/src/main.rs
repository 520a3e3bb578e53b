use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sparseflow::clustering::{ClusterParams, ClusterSelection};
use sparseflow::eval::logs::{
    check_frames, read_json, read_jsonl, write_json, write_jsonl, FlowRecord, FrameRecord, TruthRecord,
};
use sparseflow::eval::metrics::{
    aggregate_trial, build_report, merge_reports, report_csv, report_table, MetricsReport,
};
use sparseflow::eval::sweep::{summarize, sweep_csv, sweep_n, TrialInput};
use sparseflow::eval::{configure_threads, delta_t_from, estimate_log, simulate, EstimateConfig};
use sparseflow::flow::FlowParams;
use sparseflow::icp::IcpParams;
use sparseflow::sim::noise::NoiseModel;
use sparseflow::sim::presets::{preset_by_name, preset_scenarios};
use sparseflow::sim::Scenario;
use std::path::{Path, PathBuf};

/// Scene flow from distributed multizone ToF sensors.
#[derive(Parser)]
#[command(name = "sparseflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-cast a scenario into frame and ground-truth logs.
    Simulate(SimulateArgs),
    /// Estimate scene flow for every frame pair of a frame log.
    Estimate(EstimateArgs),
    /// Score flow logs against ground truth.
    Evaluate(EvaluateArgs),
    /// Normalized velocity error versus frame gap over a set of trials.
    #[command(name = "sweep-n")]
    SweepN(SweepArgs),
    /// Render metrics files as a table and CSV.
    Report(ReportArgs),
    /// List built-in scenarios, or write them as JSON files.
    Presets(PresetsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    GaussianRelative,
    UniformRelative,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON file, or a built-in name such as `approach-y@0.15`.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Override the scenario's relative noise level.
    #[arg(long)]
    noise_rel: Option<f64>,
    #[arg(long, value_enum)]
    noise_model: Option<NoiseArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Eom,
    Leaf,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0.7)]
    gamma: f64,
    #[arg(long, default_value_t = 0.04)]
    delta: f64,
    #[arg(long, default_value_t = 60)]
    nmin: usize,
    #[arg(long, default_value_t = 5)]
    max_retry: usize,
    /// Seconds per step; defaults to the spacing of the log timestamps.
    #[arg(long)]
    delta_t: Option<f64>,
    /// ICP correspondence threshold, meters.
    #[arg(long, default_value_t = 0.10)]
    tau: f64,
    #[arg(long, default_value_t = 50)]
    icp_iterations: usize,
    #[arg(long, default_value_t = 20)]
    min_cluster_size: usize,
    #[arg(long, default_value_t = 5)]
    min_samples: usize,
    #[arg(long, value_enum, default_value_t = SelectionArg::Eom)]
    cluster_selection: SelectionArg,
    /// Scenario (file or built-in name) whose robot model drives self-filtering.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    frames: PathBuf,
    /// Frame gap.
    #[arg(long, default_value_t = 8)]
    n: u32,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Disable the size, fitness and displacement gates.
    #[arg(long)]
    baseline: bool,
    /// Record wall-clock time per pair in `elapsed_s`.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Flow log; repeat together with --truth to score several trials.
    #[arg(long, required = true)]
    flow: Vec<PathBuf>,
    #[arg(long, required = true)]
    truth: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Glob over frame logs; each pairs with the truth log whose file name
    /// replaces `frames` by `truth`.
    #[arg(long)]
    frames_glob: String,
    #[arg(long = "n", value_delimiter = ',', default_value = "2,4,6,8,10")]
    ns: Vec<u32>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PresetsArgs {
    /// Write `<name>.json` for every preset here instead of listing names.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn load_scenario(source: &str) -> Result<Scenario> {
    let path = Path::new(source);
    if path.exists() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let sc: Scenario = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(sc);
    }
    match preset_by_name(source) {
        Some(sc) => Ok(sc),
        None => bail!("{source}: no such file and not a built-in scenario (see `sparseflow presets`)"),
    }
}

fn pipeline_config(p: &PipelineArgs, n: u32, frames: &[FrameRecord]) -> Result<EstimateConfig> {
    let delta_t = p.delta_t.or_else(|| delta_t_from(frames)).unwrap_or(1.0 / 15.0);
    let cfg = EstimateConfig {
        flow: FlowParams {
            n,
            delta_t,
            n_min: p.nmin,
            gamma: p.gamma,
            delta: p.delta,
            max_retry: p.max_retry,
            baseline: false,
        },
        cluster: ClusterParams {
            min_cluster_size: p.min_cluster_size,
            min_samples: p.min_samples,
            selection: match p.cluster_selection {
                SelectionArg::Eom => ClusterSelection::ExcessOfMass,
                SelectionArg::Leaf => ClusterSelection::Leaf,
            },
            ..ClusterParams::default()
        },
        icp: IcpParams {
            max_iterations: p.icp_iterations,
            correspondence_threshold: p.tau,
            ..IcpParams::default()
        },
        robot: p.scenario.as_deref().map(load_scenario).transpose()?,
        ..EstimateConfig::default()
    };
    cfg.flow.validate()?;
    cfg.cluster.validate()?;
    cfg.icp.validate()?;
    Ok(cfg)
}

fn read_frames(path: &Path) -> Result<Vec<FrameRecord>> {
    let frames: Vec<FrameRecord> = read_jsonl(path)?;
    check_frames(path, &frames)?;
    Ok(frames)
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let mut sc = load_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        sc.seed = seed;
    }
    if let Some(r) = a.noise_rel {
        sc.noise_rel = r;
    }
    if let Some(m) = a.noise_model {
        sc.noise_model = match m {
            NoiseArg::GaussianRelative => NoiseModel::GaussianRelative,
            NoiseArg::UniformRelative => NoiseModel::UniformRelative,
        };
    }
    let (frames, truth) = simulate(&sc)?;
    write_jsonl(&a.out, &frames)?;
    write_jsonl(&a.truth, &truth)?;
    eprintln!("{}: {} steps, {} frame records", sc.name, truth.len(), frames.len());
    Ok(())
}

fn run_estimate(a: EstimateArgs) -> Result<()> {
    let frames = read_frames(&a.frames)?;
    let mut cfg = pipeline_config(&a.pipeline, a.n, &frames)?;
    cfg.flow.baseline = a.baseline;
    cfg.timing = a.timing;
    let flow = estimate_log(&frames, &cfg)?;
    write_jsonl(&a.out, &flow)?;
    eprintln!("{} frame pairs at n = {}", flow.len(), cfg.flow.n);
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    if a.flow.len() != a.truth.len() {
        bail!(
            "got {} --flow and {} --truth files; they pair up in order",
            a.flow.len(),
            a.truth.len()
        );
    }
    let mut trials = Vec::new();
    for (fp, tp) in a.flow.iter().zip(&a.truth) {
        let flow: Vec<FlowRecord> = read_jsonl(fp)?;
        let truth: Vec<TruthRecord> = read_jsonl(tp)?;
        let name = fp
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let m = aggregate_trial(&name, &flow, &truth).with_context(|| format!("scoring {}", fp.display()))?;
        if m.is_missing() {
            eprintln!("{}: no Moving points in scored pairs", fp.display());
        }
        trials.push(m);
    }
    write_json(&a.out, &build_report(trials))?;
    Ok(())
}

fn truth_path_for(frames: &Path) -> Result<PathBuf> {
    let name = frames
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let Some(pos) = name.rfind("frames") else {
        bail!(
            "{}: file name has no `frames` part to map to a truth log",
            frames.display()
        );
    };
    let truth = format!("{}truth{}", &name[..pos], &name[pos + "frames".len()..]);
    Ok(frames.with_file_name(truth))
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut trials = Vec::new();
    let paths = glob::glob(&a.frames_glob).with_context(|| format!("bad glob {}", a.frames_glob))?;
    for entry in paths {
        let fp = entry?;
        let tp = truth_path_for(&fp)?;
        let name = fp
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        trials.push(TrialInput {
            name,
            frames: read_frames(&fp)?,
            truth: read_jsonl(&tp)?,
        });
    }
    if trials.is_empty() {
        bail!("{}: matched no frame logs", a.frames_glob);
    }
    if a.ns.iter().any(|n| *n < 1) {
        bail!("--n values must be ≥ 1");
    }
    let cfg = pipeline_config(&a.pipeline, a.ns[0], &trials[0].frames)?;
    let entries = sweep_n(&trials, &a.ns, &cfg)?;
    std::fs::write(&a.out, sweep_csv(&entries)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{:>3} {:>6} {:>10} {:>8}", "n", "speed", "error %", "missing");
    for c in summarize(&entries) {
        let pct = c
            .normalized_error_pct
            .map(|p| format!("{p:.2}"))
            .unwrap_or_else(|| "MISSING".into());
        println!("{:>3} {:>6.2} {:>10} {:>5}/{}", c.n, c.speed, pct, c.missing, c.trials);
    }
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let reports = a
        .metrics
        .iter()
        .map(|p| read_json::<MetricsReport>(p))
        .collect::<Result<Vec<_>, _>>()?;
    let merged = merge_reports(reports);
    print!("{}", report_table(&merged));
    if let Some(out) = a.out {
        std::fs::write(&out, report_csv(&merged)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_presets(a: PresetsArgs) -> Result<()> {
    let all = preset_scenarios();
    match a.out_dir {
        None => {
            for name in all.keys() {
                println!("{name}");
            }
        }
        Some(dir) => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, sc) in &all {
                write_json(&dir.join(format!("{name}.json")), sc)?;
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    configure_threads()?;
    match Cli::parse().command {
        Command::Simulate(a) => run_simulate(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::SweepN(a) => run_sweep(a),
        Command::Report(a) => run_report(a),
        Command::Presets(a) => run_presets(a),
    }
}
