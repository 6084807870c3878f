use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layerseg::appearance::AppearanceSet;
use layerseg::config::RunConfig;
use layerseg::eval::{aggregate, cross_validate, unsigned_error, ErrorReport};
use layerseg::inference::Diagnostics;
use layerseg::pipeline::{segment_file, train_appearance, train_shape, TrainedModels};
use layerseg::scan::ScanFile;
use layerseg::shape::{BoundaryField, ShapePrior};
use layerseg::synth::{generate_dataset, load_dataset, ShapeSource, SynthConfig, SYNTH_CONFIG};
use layerseg::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "layerseg", version, about = "Layered boundary segmentation with a low-rank Gaussian shape prior")]
struct Cli {
    /// Run configuration overlaid on the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Writes segmentation diagnostics as JSON, without wall times.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fits the shape prior to the ground truth of a dataset.
    TrainShape {
        /// Dataset directories or scan files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Fits the appearance models to a labeled dataset.
    TrainAppearance {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Writes a synthetic dataset with ground truth.
    Synth {
        /// Synthetic data configuration (default: the built-in one).
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Samples boundaries from this shape model instead of the parametric model.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Segments one scan.
    Segment {
        scan: PathBuf,
        #[arg(long)]
        shape: Option<PathBuf>,
        #[arg(long)]
        appearance: Option<PathBuf>,
    },
    /// Scores segmentations against the ground truth of their scans.
    Eval {
        #[arg(required = true)]
        segmentations: Vec<PathBuf>,
    },
    /// Cross-validates training and segmentation on a dataset.
    Xval {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Prints the effective configuration.
    DumpConfig,
}

/// Segmentation output: boundary rows and posterior standard deviations,
/// both `boundaries × columns`.
#[derive(Serialize, Deserialize)]
struct SegmentationRecord {
    scan: PathBuf,
    bscans: usize,
    boundaries: Vec<Vec<f64>>,
    std: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_inputs(inputs: &[PathBuf]) -> Result<Vec<ScanFile>> {
    let mut files = Vec::new();
    for path in inputs {
        if path.is_dir() {
            files.extend(load_dataset(path)?);
        } else {
            files.push(ScanFile::load(path)?);
        }
    }
    Ok(files)
}

fn model_path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} model given (--{what} or paths.{what}_model)")))
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn iteration_log(d: &Diagnostics) -> String {
    let mut s = format!("{:>4} {:>4} {:>20} {:>12} {:>10}\n", "iter", "step", "J", "dJ", "wall_s");
    for t in &d.trace {
        let step = serde_json::to_string(&t.step).expect("step serializes");
        let delta = if t.delta.is_finite() { format!("{:.4e}", t.delta) } else { "-".into() };
        let _ = writeln!(
            s,
            "{:>4} {:>4} {:>20.10e} {:>12} {:>10.4}",
            t.iteration,
            step.trim_matches('"'),
            t.objective,
            delta,
            t.wall_seconds
        );
    }
    let _ = writeln!(s, "converged {} after {} iterations", d.converged, d.iterations);
    s
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    let config = load_config(cli)?;
    match &cli.command {
        Command::TrainShape { inputs } => {
            let fit = train_shape(&load_inputs(inputs)?, &config)?;
            for w in &fit.warnings {
                eprintln!("warning: {w}");
            }
            fit.prior.save(&out_or(cli, "shape.lsm"))
        }
        Command::TrainAppearance { inputs } => train_appearance(&load_inputs(inputs)?, &config)?.save(&out_or(cli, "appearance.lsm")),
        Command::Synth {
            synth_config,
            count,
            prior,
        } => {
            let mut sc = match synth_config {
                Some(p) => SynthConfig::load(p)?,
                None => SynthConfig::from_toml_str(SYNTH_CONFIG)?,
            };
            if let Some(seed) = cli.seed {
                sc.seed = seed;
            }
            let loaded = prior.as_deref().map(ShapePrior::load).transpose()?;
            let source = loaded.as_ref().map_or(ShapeSource::Parametric, ShapeSource::Prior);
            let dir = out_or(cli, "dataset");
            let manifest = generate_dataset(&sc, source, *count, &dir)?;
            println!("{} scans in {}", manifest.n_scans, dir.display());
            Ok(())
        }
        Command::Segment { scan, shape, appearance } => {
            let models = TrainedModels {
                prior: ShapePrior::load(&model_path(shape, &config.paths.shape_model, "shape")?)?,
                appearance: AppearanceSet::load(&model_path(appearance, &config.paths.appearance_model, "appearance")?)?,
                warnings: Vec::new(),
            };
            let file = ScanFile::load(scan)?;
            let seg = segment_file(&models, &file, &config)?;
            let record = SegmentationRecord {
                scan: std::fs::canonicalize(scan).map_err(|e| io_err(scan, e))?,
                bscans: file.scan.bscans(),
                boundaries: rows_of(seg.estimate.values()),
                std: rows_of(&seg.std),
                iterations: seg.diagnostics.iterations,
                converged: seg.diagnostics.converged,
            };
            let out = out_or(cli, "segmentation.json");
            write_text(&out, &to_json(&record))?;
            write_text(&out.with_extension("log"), &iteration_log(&seg.diagnostics))?;
            if let Some(trace) = &cli.trace {
                write_text(trace, &to_json(&seg.diagnostics))?;
            }
            Ok(())
        }
        Command::Eval { segmentations } => {
            let mut reports = Vec::with_capacity(segmentations.len());
            for path in segmentations {
                let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                let rec: SegmentationRecord =
                    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                let file = ScanFile::load(&rec.scan)?;
                let truth = file
                    .truth
                    .as_ref()
                    .ok_or_else(|| Error::InvalidData(format!("{} has no ground truth", rec.scan.display())))?;
                let estimate = field_of(&rec, path)?;
                reports.push(unsigned_error(&estimate, truth, file.scan.pixel_pitch_um(), config.eval.regions)?);
            }
            report(cli, &aggregate(&reports)?, "report.json", &reports)
        }
        Command::Xval { inputs } => {
            let xv = cross_validate(&load_inputs(inputs)?, &config)?;
            let out = out_or(cli, "xval.json");
            write_text(&out, &to_json(&xv))?;
            print!("{}", xv.report.to_table());
            Ok(())
        }
        Command::DumpConfig => {
            let text = config.to_toml();
            match &cli.out {
                Some(path) => write_text(path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn field_of(rec: &SegmentationRecord, path: &Path) -> Result<BoundaryField> {
    let nb = rec.boundaries.len();
    let m = rec.boundaries.first().map_or(0, Vec::len);
    if nb == 0 || rec.boundaries.iter().any(|r| r.len() != m) {
        return Err(Error::Format(format!("{}: boundaries are not a rectangular array", path.display())));
    }
    BoundaryField::new(DMatrix::from_fn(nb, m, |k, j| rec.boundaries[k][j]), rec.bscans)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    report: &'a ErrorReport,
    scans: &'a [ErrorReport],
}

fn report(cli: &Cli, total: &ErrorReport, default: &str, scans: &[ErrorReport]) -> Result<()> {
    write_text(&out_or(cli, default), &to_json(&EvalOutput { report: total, scans }))?;
    print!("{}", total.to_table());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
