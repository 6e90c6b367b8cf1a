mod report;

use clap::{Parser, Subcommand};
use paaa::ablation::{median_for, run_plan, AblationPlan};
use paaa::config::{Mode, RunConfig};
use paaa::dataio::load_dataset;
use paaa::metrics::MetricReport;
use paaa::raster::save_overlay;
use paaa::synthdata::{generate_dataset, Domain, DomainSpec, MANIFEST_FILE};
use paaa::trainer::{
    evaluate_checkpoint, load_segmenter, predict_masks, train, Checkpoint, TrainData, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};
use paaa::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser)]
#[command(name = "paaa", version, about = "Domain-adaptive band segmentation: synthesis, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a domain spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report of the oracle run, to add GAP values.
        #[arg(long)]
        oracle_report: Option<PathBuf>,
        /// Directory for one boundary overlay image per sample.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs in one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run directory to measure GAP against.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Add GAP columns against the run trained in oracle mode.
        #[arg(long)]
        gap: bool,
    },
    /// Write default domain specs, a run config and an ablation plan.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every mode over several seeds and print median results.
    Ablation {
        /// Plan file; defaults to the desk-scale plan.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Where generated data, runs and cached results live.
        #[arg(long)]
        cache: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io { path: path.into(), source })
}

fn load_spec(path: &Path) -> Result<DomainSpec> {
    let spec: DomainSpec =
        toml::from_str(&read(path)?).map_err(|e| Error::Spec(format!("{}: {}", path.display(), e.message())))?;
    spec.validate()?;
    Ok(spec)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, count, out } => {
            let spec = load_spec(&spec)?;
            generate_dataset(&spec, count, &out)?;
            println!("{}", out.join(MANIFEST_FILE).display());
            Ok(())
        }
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval { checkpoint, data, oracle_report, overlay, out } => {
            cmd_eval(&checkpoint, &data, oracle_report.as_deref(), overlay.as_deref(), out.as_deref())
        }
        Command::Report { runs, oracle, gap } => {
            print!("{}", report::render(&runs, oracle.as_deref(), gap)?);
            Ok(())
        }
        Command::Init { out } => {
            mkdir(&out)?;
            let spec_toml = |s: &DomainSpec| toml::to_string(s).expect("spec serializes");
            write(&out.join("source.toml"), &spec_toml(&DomainSpec::default_source()))?;
            write(&out.join("target.toml"), &spec_toml(&DomainSpec::default_target()))?;
            write(&out.join("run.toml"), &RunConfig::default().to_toml())?;
            write(&out.join("ablation.toml"), &toml::to_string(&AblationPlan::desk_scale()).expect("plan serializes"))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Ablation { plan, cache } => {
            let plan = match plan {
                Some(p) => toml::from_str(&read(&p)?)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?,
                None => AblationPlan::desk_scale(),
            };
            let results = run_plan(&plan, &cache, |m| log::info!("{m}"))?;
            println!("{:<18} {:>10} {:>9}", "mode", "AUSDE", "IOU(%)");
            for mode in Mode::ALL {
                if let Some((iou, ausde)) = median_for(&results, mode) {
                    println!("{:<18} {:>10.2} {:>9.2}", mode.name(), ausde, 100.0 * iou);
                }
            }
            Ok(())
        }
    }
}

fn unix_time() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let ck = resume.map(Checkpoint::load).transpose()?;
    let data = TrainData::load(&cfg)?;
    let run_dir = match (resume, &ck) {
        (Some(p), Some(_)) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
        _ => cfg.train.output_dir.join(format!("{}-{}-{}", cfg.train.mode, cfg.hash(), unix_time())),
    };
    mkdir(&run_dir)?;
    write(&run_dir.join(CONFIG_ECHO), &cfg.to_toml())?;
    log::info!("run directory {}", run_dir.display());
    let outcome = train(&cfg, &data, &run_dir, ck.as_ref())?;
    let chosen = if run_dir.join(BEST_CHECKPOINT).exists() { BEST_CHECKPOINT } else { LAST_CHECKPOINT };
    if let Some(val) = &data.val {
        let report = evaluate_checkpoint(&Checkpoint::load(&run_dir.join(chosen))?, val)?;
        report.save(&run_dir.join(REPORT_FILE))?;
        log::info!("{chosen} on validation split: iou {:.4} ausde {:.3}", report.iou, report.ausde);
    }
    log::info!("{} steps recorded", outcome.history.len());
    println!("{}", run_dir.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    oracle: Option<&Path>,
    overlay: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(data, Domain::Target, true)?;
    let mut report = evaluate_checkpoint(&ck, &ds)?;
    if let Some(o) = oracle {
        report = report.with_oracle(&MetricReport::load(o)?);
    }
    if let Some(dir) = overlay {
        mkdir(dir)?;
        let seg = load_segmenter(&ck)?;
        let masks = predict_masks(&seg, ck.meta.config.model.input_size, &ds)?;
        for (i, m) in masks.iter().enumerate() {
            save_overlay(&dir.join(format!("{}.png", ds.id(i))), ds.image(i), Some(ds.mask(i)?), m)?;
        }
    }
    if let Some(p) = out {
        report.save(p)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
