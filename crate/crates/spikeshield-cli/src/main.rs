//! Command-line front end: each verb runs one pipeline stage against the
//! artifact directory, so a full experiment is either the `run` verb or the
//! stage verbs in order.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spikeshield::config::ExperimentConfig;
use spikeshield::experiment::{
    load_data, run_experiment, stage_calibrate, stage_evaluate, stage_histogram, stage_sweep,
    stage_train_classifier, stage_train_purifier, ArtifactPaths,
};
use spikeshield::models::{ClassifierSNN, NeSNN, RecSNN};
use spikeshield::pipeline::DetectionConfig;
use spikeshield::report::read_threshold;
use spikeshield::Result;

#[derive(Parser)]
#[command(
    name = "spikeshield",
    version,
    about = "Spiking-network image purification defense workbench",
    after_help = "SPIKESHIELD_THREADS caps the worker thread count."
)]
struct Cli {
    /// Baseline configuration the overrides apply to.
    #[arg(long, value_enum, global = true, default_value_t = Preset::Desk)]
    preset: Preset,

    /// key=value override file applied on top of the preset.
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding preset and file.
    #[arg(long, value_name = "N", global = true)]
    seed: Option<u64>,

    /// Artifact directory stages read from and write to.
    #[arg(long, value_name = "DIR", global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Small synthetic run sized for a workstation.
    Desk,
    /// Full-scale training recipe.
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Train the spiking classifier.
    TrainClassifier,
    /// Train the purifier pair against the stored classifier.
    TrainPurifier,
    /// Calibrate the detection threshold on clean training data.
    Calibrate,
    /// Evaluate the defense under every configured attack.
    Evaluate,
    /// Accuracy grid over PGD steps and strengths.
    Sweep,
    /// Detector-score histograms for clean and attacked test sets.
    Histogram,
    /// Every stage in order.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match cli.preset {
        Preset::Desk => ExperimentConfig::desk(),
        Preset::Paper => ExperimentConfig::paper(),
    };
    let mut cfg = match &cli.config {
        Some(path) => base.with_overrides(&std::fs::read_to_string(path)?)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_frozen_classifier(paths: &ArtifactPaths) -> Result<ClassifierSNN> {
    let mut model = ClassifierSNN::load(&paths.classifier())?;
    model.freeze();
    Ok(model)
}

fn load_frozen_purifier(paths: &ArtifactPaths) -> Result<(NeSNN, RecSNN)> {
    let mut ne = NeSNN::load(&paths.nesnn())?;
    let mut rec = RecSNN::load(&paths.recsnn())?;
    ne.freeze();
    rec.freeze();
    Ok((ne, rec))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let paths = ArtifactPaths::new(&cli.out);
    match cli.command {
        Command::TrainClassifier => {
            let (train, _) = load_data(&cfg).map_err(|e| e.in_stage("load-data"))?;
            stage_train_classifier(&cfg, &train, &paths)
                .map_err(|e| e.in_stage("train-classifier"))?;
            println!("classifier checkpoint: {}", paths.classifier().display());
        }
        Command::TrainPurifier => {
            let (train, _) = load_data(&cfg).map_err(|e| e.in_stage("load-data"))?;
            let stage = |e: spikeshield::Error| e.in_stage("train-purifier");
            let classifier = load_frozen_classifier(&paths).map_err(stage)?;
            stage_train_purifier(&cfg, &classifier, &train, &paths).map_err(stage)?;
            println!(
                "purifier checkpoints: {} {}",
                paths.nesnn().display(),
                paths.recsnn().display()
            );
        }
        Command::Calibrate => {
            let (train, _) = load_data(&cfg).map_err(|e| e.in_stage("load-data"))?;
            let stage = |e: spikeshield::Error| e.in_stage("calibrate");
            let (ne, rec) = load_frozen_purifier(&paths).map_err(stage)?;
            let det = stage_calibrate(&cfg, &ne, &rec, &train, &paths).map_err(stage)?;
            println!(
                "threshold {} (quantile {})",
                det.threshold, cfg.detect_quantile
            );
        }
        Command::Evaluate => {
            let (_, test) = load_data(&cfg).map_err(|e| e.in_stage("load-data"))?;
            let stage = |e: spikeshield::Error| e.in_stage("evaluate");
            let classifier = load_frozen_classifier(&paths).map_err(stage)?;
            let (ne, rec) = load_frozen_purifier(&paths).map_err(stage)?;
            let det = read_threshold(&paths.threshold())
                .and_then(DetectionConfig::new)
                .map_err(stage)?;
            let report =
                stage_evaluate(&cfg, &classifier, &ne, &rec, &test, &det, &paths).map_err(stage)?;
            for row in &report.rows {
                println!(
                    "{}: undefended {:.3}  always-purify {:.3}  detect-and-route {:.3}  detection {:.3}",
                    row.attack, row.undefended, row.always_purify, row.detect_and_route,
                    row.detection_rate
                );
            }
        }
        Command::Sweep => {
            let (_, test) = load_data(&cfg).map_err(|e| e.in_stage("load-data"))?;
            let stage = |e: spikeshield::Error| e.in_stage("sweep");
            let classifier = load_frozen_classifier(&paths).map_err(stage)?;
            let (ne, rec) = load_frozen_purifier(&paths).map_err(stage)?;
            let rows = stage_sweep(&cfg, &classifier, &ne, &rec, &test, &paths).map_err(stage)?;
            println!("{} sweep rows: {}", rows.len(), paths.sweep().display());
        }
        Command::Histogram => {
            let (_, test) = load_data(&cfg).map_err(|e| e.in_stage("load-data"))?;
            let stage = |e: spikeshield::Error| e.in_stage("histogram");
            let classifier = load_frozen_classifier(&paths).map_err(stage)?;
            let (ne, rec) = load_frozen_purifier(&paths).map_err(stage)?;
            stage_histogram(&cfg, &classifier, &ne, &rec, &test, &paths).map_err(stage)?;
            println!(
                "histograms: {} + {} attack series",
                paths.histogram_clean().display(),
                cfg.eval_attacks.len()
            );
        }
        Command::Run => {
            let report = run_experiment(&cfg, &cli.out)?;
            for row in &report.rows {
                println!(
                    "{}: undefended {:.3}  always-purify {:.3}  detect-and-route {:.3}  detection {:.3}",
                    row.attack, row.undefended, row.always_purify, row.detect_and_route,
                    row.detection_rate
                );
            }
        }
    }
    Ok(())
}
