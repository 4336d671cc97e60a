//! Command-line driver: dataset generation, mode comparison, gridding
//! analysis, gradient checking and benchmarking.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand};
use smoothconv::autodiff::check_gradients;
use smoothconv::bench::bench_variants;
use smoothconv::gridding::{export_dependency_art, gridding_score, trace_dependencies, LayerStack};
use smoothconv::segmentation::compare::{compare_modes, Comparison};
use smoothconv::segmentation::data::{class_histogram, generate_dataset, save_dataset};
use smoothconv::segmentation::model::{ModelLoss, ToyModel};
use smoothconv::{AlphaTrajectory, Error, Rng, Tensor};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CELL_FAILURE: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;
pub const EXIT_INTERRUPTED: i32 = 130;

/// Name of the marker file left next to partial outputs.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const GRIDDING_CSV_HEADER: &str = "layer_count,r,K,smoothing,gridding_score";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    CellFailure(String),
    Gradcheck(String),
    Interrupted(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::Io(m)
            | CliError::CellFailure(m)
            | CliError::Gradcheck(m)
            | CliError::Interrupted(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::CellFailure(_) => EXIT_CELL_FAILURE,
            CliError::Gradcheck(_) => EXIT_GRADCHECK,
            CliError::Interrupted(_) => EXIT_INTERRUPTED,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Format(_) => CliError::Io(e.to_string()),
            Error::Interrupted => CliError::Interrupted(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "smoothconv",
    version,
    about = "Smoothed dilated convolution experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set training.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic segmentation dataset.
    Generate(Common),
    /// Train every (mode, seed) cell and tabulate test mIoU.
    Compare(Common),
    /// Gridding scores and dependency art for layer stacks.
    Analyze(Common),
    /// Compare analytic gradients with finite differences.
    Gradcheck(Common),
    /// Time training steps per smoothing variant.
    Bench(Common),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::Compare(c)
            | Command::Analyze(c)
            | Command::Gradcheck(c)
            | Command::Bench(c) => c,
        }
    }
}

/// Loads the config and creates the output directory. The parent must
/// already exist.
pub fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let dir = &cfg.output_dir;
    if !dir.is_dir() {
        fs::create_dir(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn clear_marker(dir: &Path) -> Result<(), CliError> {
    let marker = dir.join(INCOMPLETE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| io_err(&marker, e))?;
    }
    Ok(())
}

pub fn run(cli: &Cli, cancel: &AtomicBool, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve(cli.command.common())?;
    match &cli.command {
        Command::Generate(_) => cmd_generate(&cfg, out),
        Command::Compare(_) => cmd_compare(&cfg, cancel, out),
        Command::Analyze(_) => cmd_analyze(&cfg, out),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg, out),
        Command::Bench(_) => cmd_bench(&cfg, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}

pub fn cmd_generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let d = &cfg.dataset;
    let data = generate_dataset(
        d.samples,
        (d.height, d.width),
        d.classes,
        d.noise_level,
        &mut Rng::new(d.seed),
    )?;
    let dir = cfg.output_dir.join("dataset");
    if !dir.is_dir() {
        fs::create_dir(&dir).map_err(|e| io_err(&dir, e))?;
    }
    save_dataset(&data, &dir)?;
    let hist = class_histogram(&data, d.classes);
    let mut msg = format!(
        "wrote {} samples to {}\nclass histogram:",
        data.len(),
        dir.display()
    );
    for (c, n) in hist.iter().enumerate() {
        let _ = write!(msg, " {c}:{n}");
    }
    msg.push('\n');
    say(out, &msg)
}

/// Describes how the mean "none" coefficient moved over training.
pub fn alpha_trend(traj: &AlphaTrajectory) -> String {
    let samples = traj.samples();
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return "no samples".to_string();
    };
    let [a0, g0, l0, n0] = first.1;
    let [a1, g1, l1, n1] = last.1;
    let direction = if n1 < n0 {
        "decreased"
    } else if n1 > n0 {
        "increased"
    } else {
        "unchanged"
    };
    format!(
        "step {}: ave {a0:.4} gauss {g0:.4} learned {l0:.4} none {n0:.4} -> step {}: ave {a1:.4} gauss {g1:.4} learned {l1:.4} none {n1:.4}; none coefficient {direction}",
        first.0, last.0
    )
}

fn write_comparison(cfg: &RunConfig, cmp: &Comparison) -> Result<String, CliError> {
    let dir = &cfg.output_dir;
    write_file(&dir.join("comparison.csv"), &cmp.to_csv(true))?;
    let mut summary = cmp.summary_table();
    let blocks = cfg.model.dilations.len();
    for cell in &cmp.cells {
        if let Ok(run) = &cell.outcome {
            for (i, traj) in run.alphas.iter().enumerate() {
                let path = dir.join(format!("alpha_seed{}_layer{i}.csv", cell.seed));
                write_file(&path, &traj.to_csv())?;
            }
        }
    }
    for i in 0..blocks {
        if let Some(mean) = cmp.mean_alpha_trajectory(i)? {
            write_file(&dir.join(format!("alpha_layer{i}.csv")), &mean.to_csv())?;
            let _ = writeln!(
                summary,
                "alpha trend layer {i} (mean over seeds): {}",
                alpha_trend(&mean)
            );
        }
    }
    for cell in cmp.failed_cells() {
        if let Err(e) = &cell.outcome {
            let _ = writeln!(summary, "FAILED {} seed {}: {e}", cell.mode, cell.seed);
        }
    }
    if cmp.interrupted {
        summary.push_str("run interrupted; results are incomplete\n");
    }
    write_file(&dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

pub fn cmd_compare(
    cfg: &RunConfig,
    cancel: &AtomicBool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let exp = cfg.experiment_config();
    exp.validate()?;
    clear_marker(&cfg.output_dir)?;
    let cmp = compare_modes(&exp, Some(cancel))?;
    let summary = write_comparison(cfg, &cmp)?;
    say(out, &summary)?;
    if cmp.interrupted {
        write_file(&cfg.output_dir.join(INCOMPLETE_MARKER), "interrupted\n")?;
        return Err(CliError::Interrupted(
            "interrupted; partial results written".into(),
        ));
    }
    let failed: Vec<String> = cmp
        .failed_cells()
        .map(|c| format!("{} seed {}", c.mode, c.seed))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::CellFailure(format!(
            "failed cells: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

pub fn cmd_analyze(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let a = &cfg.analysis;
    let stacks: Vec<LayerStack> = a
        .stacks
        .iter()
        .map(|s| LayerStack::uniform(s.layers, s.kernel_size, s.dilation, s.smoothing))
        .collect::<smoothconv::Result<_>>()?;
    if stacks.is_empty() {
        return Err(CliError::Config("analysis.stacks is empty".into()));
    }
    let mut csv = String::from(GRIDDING_CSV_HEADER);
    csv.push('\n');
    let mut report = String::new();
    for (i, (desc, stack)) in a.stacks.iter().zip(&stacks).enumerate() {
        let extent = if a.extent == 0 {
            2 * stack.span() + 1
        } else {
            a.extent
        };
        let map = trace_dependencies(stack, (extent, extent))?;
        let score = gridding_score(&map);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            desc.layers, desc.dilation, desc.kernel_size, desc.smoothing, score
        );
        let _ = writeln!(
            report,
            "{:<28} gridding_score {score}",
            smoothconv::gridding::describe_stack(stack)
        );
        if a.art {
            let art = export_dependency_art(&map, (extent / 2, extent / 2))?;
            write_file(&cfg.output_dir.join(format!("art_{i}.txt")), &art)?;
        }
    }
    write_file(&cfg.output_dir.join("gridding.csv"), &csv)?;
    say(out, &report)
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    if g.extent == 0 {
        return Err(CliError::Config("gradcheck.extent must be positive".into()));
    }
    let mut report = String::new();
    let mut failing = Vec::new();
    for &mode in &g.modes {
        let mut model = ToyModel::new(cfg.model.clone().with_smoothing(mode), &Rng::new(g.seed))?;
        let mut rng = Rng::new(g.seed).fork(7);
        // Zero biases put rectifier inputs exactly on the kink wherever a
        // receptive field is all zero; check at a generic point instead.
        let names = model.parameter_names();
        for (name, p) in names.iter().zip(model.parameters_mut()) {
            if name.ends_with(".bias") {
                p.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.uniform(-0.1, 0.1));
            }
        }
        let shape = [1, cfg.model.in_channels, g.extent, g.extent];
        let input = Tensor::random_uniform(shape, -1.0, 1.0, &mut rng)?;
        let labels = (0..g.extent * g.extent)
            .map(|_| rng.below(0, cfg.model.classes))
            .collect();
        let check = ModelLoss {
            model,
            input,
            labels,
            corrupt: g.inject_fault,
        };
        let result = check_gradients(&check, g.tolerance)?;
        for p in &result.params {
            let _ = writeln!(
                report,
                "{:<11} {:<14} {:.3e} checked {:>4} kinks {:>4} unresolved {:>4} {}{}",
                mode.name(),
                p.name,
                p.max_rel_error,
                p.checked,
                p.kinks,
                p.unresolved,
                if p.passed { "ok" } else { "FAIL" },
                match p.worst {
                    Some((i, a, f)) if !p.passed =>
                        format!(" (index {i}: analytic {a:.6e}, numeric {f:.6e})"),
                    _ => String::new(),
                }
            );
            if !p.passed {
                failing.push(format!("{mode}:{}", p.name));
            }
        }
    }
    let _ = writeln!(report, "tolerance {:e}", g.tolerance);
    say(out, &report)?;
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(format!(
            "gradient check failed for: {}",
            failing.join(", ")
        )))
    }
}

pub fn cmd_bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let report = bench_variants(&cfg.bench_config())?;
    write_file(&cfg.output_dir.join("bench.csv"), &report.to_csv())?;
    let summary = report.summary_table();
    write_file(&cfg.output_dir.join("bench_summary.txt"), &summary)?;
    say(out, &summary)
}
