//! End-to-end orchestration: load data, train the classifier, train the
//! purifier against it, calibrate the detector, evaluate every configured
//! attack, and sweep PGD strength. Stages run in that order and each one
//! persists its artifacts before the next starts, so a failed run leaves
//! everything produced so far on disk and the error names the stage.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::attack::{run_attack, AttackSpec};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{load_dataset, seeded_rng, synthetic_gratings, Dataset};
use crate::error::{Error, Result};
use crate::models::{classify, predictions, purify, ClassifierSNN, NeSNN, RecSNN};
use crate::pipeline::{
    bin_scores, linf_per_image, nearest_rank_quantile, train_classifier, train_purifier,
    DetectionConfig,
};
use crate::report::{
    detection_csv, histogram_csv, loss_curve_csv, report_csv, sweep_csv, threshold_csv,
    verdicts_jsonl, write_text, RobustnessReport, RobustnessRow, RoutedTo, RunMeta, SweepRow,
    VerdictRecord,
};

/// Images per evaluation batch; bounds transient memory, invisible in the
/// outputs.
const EVAL_CHUNK: usize = 50;

/// PGD step size used by the sweep.
pub const SWEEP_STEP_SIZE: f32 = 2.0 / 255.0;

/// Well-known file names inside an output directory.
#[derive(Clone, Debug)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>) -> ArtifactPaths {
        ArtifactPaths { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }

    pub fn classifier(&self) -> PathBuf {
        self.dir.join("classifier.ckpt")
    }

    pub fn classifier_loss(&self) -> PathBuf {
        self.dir.join("classifier_loss.csv")
    }

    pub fn nesnn(&self) -> PathBuf {
        self.dir.join("nesnn.ckpt")
    }

    pub fn recsnn(&self) -> PathBuf {
        self.dir.join("recsnn.ckpt")
    }

    pub fn purifier_loss(&self) -> PathBuf {
        self.dir.join("purifier_loss.csv")
    }

    pub fn threshold(&self) -> PathBuf {
        self.dir.join("threshold.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }

    pub fn detection(&self) -> PathBuf {
        self.dir.join("detection.csv")
    }

    pub fn histogram_clean(&self) -> PathBuf {
        self.dir.join("histogram_clean.csv")
    }

    pub fn histogram_attack(&self, index: usize) -> PathBuf {
        self.dir.join(format!("histogram_attack{index}.csv"))
    }

    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }

    pub fn verdicts(&self) -> PathBuf {
        self.dir.join("verdicts.jsonl")
    }
}

fn run_meta(cfg: &ExperimentConfig) -> RunMeta {
    RunMeta::new(cfg.hash_hex(), cfg.seed)
}

/// Train and test sets per the config's dataset source. Synthetic data is
/// cut from one generated corpus so the two sides never overlap.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { train, test } => {
            let all = synthetic_gratings(train + test, cfg.height, cfg.width, cfg.seed)?;
            all.split(*train)
        }
        DatasetConfig::Files {
            format,
            images,
            labels,
            test_images,
            test_labels,
        } => {
            let train = load_dataset(images, labels, *format)?;
            let test = load_dataset(test_images, test_labels, *format)?;
            for (name, set) in [("train", &train), ("test", &test)] {
                if (set.c, set.h, set.w) != (cfg.channels, cfg.height, cfg.width) {
                    return Err(Error::Integrity(format!(
                        "{name} set is {}x{}x{}, config says {}x{}x{}",
                        set.c, set.h, set.w, cfg.channels, cfg.height, cfg.width
                    )));
                }
                if set.classes() > cfg.classes {
                    return Err(Error::Integrity(format!(
                        "{name} set has labels up to {}, config allows {} classes",
                        set.classes() - 1,
                        cfg.classes
                    )));
                }
            }
            Ok((train, test))
        }
    }
}

/// Builds a fresh classifier, trains it, and persists the checkpoint plus
/// its loss curve.
pub fn stage_train_classifier(
    cfg: &ExperimentConfig,
    train: &Dataset,
    paths: &ArtifactPaths,
) -> Result<ClassifierSNN> {
    let mut rng = seeded_rng(cfg.seed, "init-classifier", 0);
    let mut model = ClassifierSNN::new(
        cfg.channels,
        cfg.height,
        cfg.width,
        cfg.classes,
        cfg.mlf()?,
        cfg.t_steps,
        &mut rng,
    )?;
    let curve = train_classifier(&mut model, train, &cfg.classifier_train()?, cfg.seed)?;
    model.save(&paths.classifier())?;
    write_text(
        &paths.classifier_loss(),
        &loss_curve_csv(&run_meta(cfg), &curve)?,
    )?;
    Ok(model)
}

/// Trains the two purifier networks against a frozen copy of the classifier
/// and persists both checkpoints plus the joint loss curve.
pub fn stage_train_purifier(
    cfg: &ExperimentConfig,
    classifier: &ClassifierSNN,
    train: &Dataset,
    paths: &ArtifactPaths,
) -> Result<(NeSNN, RecSNN)> {
    let mut frozen = classifier.clone();
    frozen.freeze();
    let mlf = cfg.mlf()?;
    let mut ne = NeSNN::new(
        cfg.channels,
        cfg.ne_hidden,
        mlf.clone(),
        cfg.t_steps,
        &mut seeded_rng(cfg.seed, "init-nesnn", 0),
    )?;
    let mut rec = RecSNN::new(
        cfg.channels,
        mlf,
        cfg.t_steps,
        &mut seeded_rng(cfg.seed, "init-recsnn", 0),
    )?;
    let curve = train_purifier(
        &mut ne,
        &mut rec,
        &frozen,
        train,
        &cfg.purifier_train()?,
        &cfg.purifier_attack,
        &cfg.loss_weights()?,
        cfg.seed,
    )?;
    ne.save(&paths.nesnn())?;
    rec.save(&paths.recsnn())?;
    write_text(
        &paths.purifier_loss(),
        &loss_curve_csv(&run_meta(cfg), &curve)?,
    )?;
    Ok((ne, rec))
}

/// Calibrates the detection threshold as a quantile of clean purification
/// distances over the training set and persists it.
pub fn stage_calibrate(
    cfg: &ExperimentConfig,
    ne: &NeSNN,
    rec: &RecSNN,
    train: &Dataset,
    paths: &ArtifactPaths,
) -> Result<DetectionConfig> {
    let mut scores = Vec::with_capacity(train.len());
    for idx in chunk_indices(train.len()) {
        let (x, _) = train.batch(&idx)?;
        let out = purify(ne, rec, &x)?;
        scores.extend(linf_per_image(&x, &out.x_hat)?);
    }
    let det = DetectionConfig::new(nearest_rank_quantile(&scores, cfg.detect_quantile)?)?;
    write_text(
        &paths.threshold(),
        &threshold_csv(&run_meta(cfg), cfg.detect_quantile as f64, det.threshold)?,
    )?;
    Ok(det)
}

fn chunk_indices(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|start| (start..(start + EVAL_CHUNK).min(n)).collect())
        .collect()
}

/// Everything measured about one evaluated input set.
#[derive(Clone, Debug)]
pub struct SetEval {
    pub n: usize,
    pub undefended: f32,
    pub always_purify: f32,
    pub detect_and_route: f32,
    pub detection_rate: f32,
    pub scores: Vec<f32>,
    pub records: Vec<VerdictRecord>,
}

/// Runs the full defense over one set, optionally attacked first. The same
/// purification pass feeds the detector, the always-purify predictions, and
/// the routed predictions; verdict records reflect detect-and-route.
pub fn evaluate_set(
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    test: &Dataset,
    det: &DetectionConfig,
    attack: Option<&AttackSpec>,
    rng: &mut ChaCha8Rng,
    first_id: usize,
) -> Result<SetEval> {
    if test.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let mut hits = [0usize; 3];
    let mut flagged_total = 0usize;
    let mut scores = Vec::with_capacity(test.len());
    let mut records = Vec::with_capacity(test.len());
    for idx in chunk_indices(test.len()) {
        let (clean, labels) = test.batch(&idx)?;
        let x = match attack {
            Some(spec) => run_attack(spec, classifier, &clean, &labels, rng)?.x_adv,
            None => clean,
        };
        let out = purify(ne, rec, &x)?;
        let chunk_scores = linf_per_image(&x, &out.x_hat)?;
        let plain = predictions(&classify(classifier, &x, classifier.t_steps)?)?;
        let pure = predictions(&classify(classifier, &out.x_hat, classifier.t_steps)?)?;
        for (i, &label) in labels.iter().enumerate() {
            let flagged = det.flags(chunk_scores[i]);
            let routed_pred = if flagged { pure[i] } else { plain[i] };
            hits[0] += (plain[i] == label) as usize;
            hits[1] += (pure[i] == label) as usize;
            hits[2] += (routed_pred == label) as usize;
            flagged_total += flagged as usize;
            records.push(VerdictRecord {
                id: first_id + scores.len() + i,
                m: chunk_scores[i],
                flagged,
                routed: if flagged {
                    RoutedTo::Purified
                } else {
                    RoutedTo::Original
                },
                predicted: routed_pred,
                label,
            });
        }
        scores.extend(chunk_scores);
    }
    let n = test.len();
    Ok(SetEval {
        n,
        undefended: hits[0] as f32 / n as f32,
        always_purify: hits[1] as f32 / n as f32,
        detect_and_route: hits[2] as f32 / n as f32,
        detection_rate: flagged_total as f32 / n as f32,
        scores,
        records,
    })
}

/// Evaluates the clean set and every configured attack, then persists the
/// accuracy table, the detection table, per-set score histograms, and the
/// verdict log.
pub fn stage_evaluate(
    cfg: &ExperimentConfig,
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    test: &Dataset,
    det: &DetectionConfig,
    paths: &ArtifactPaths,
) -> Result<RobustnessReport> {
    let meta = run_meta(cfg);
    let mut rows = Vec::with_capacity(1 + cfg.eval_attacks.len());
    let mut records = Vec::new();
    let mut histograms = Vec::new();

    let mut rng = seeded_rng(cfg.seed, "eval-attack", 0);
    let clean = evaluate_set(classifier, ne, rec, test, det, None, &mut rng, 0)?;
    rows.push(set_row("clean", &clean));
    histograms.push((paths.histogram_clean(), None, bin_scores(&clean.scores, cfg.eval_bins)));
    records.extend(clean.records);

    for (i, attack) in cfg.eval_attacks.iter().enumerate() {
        let mut rng = seeded_rng(cfg.seed, "eval-attack", i as u64 + 1);
        let eval = evaluate_set(
            classifier,
            ne,
            rec,
            test,
            det,
            Some(attack),
            &mut rng,
            records.len(),
        )?;
        rows.push(set_row(&attack.to_string(), &eval));
        histograms.push((
            paths.histogram_attack(i),
            Some(attack.to_string()),
            bin_scores(&eval.scores, cfg.eval_bins),
        ));
        records.extend(eval.records);
    }

    let report = RobustnessReport {
        meta: meta.clone(),
        threshold: det.threshold,
        rows,
    };
    report.validate()?;
    write_text(&paths.report(), &report_csv(&meta, &report)?)?;
    write_text(&paths.detection(), &detection_csv(&meta, &report)?)?;
    for (path, set, bins) in &histograms {
        write_text(path, &histogram_csv(&meta, set.as_deref(), bins)?)?;
    }
    write_text(&paths.verdicts(), &verdicts_jsonl(&meta, &records)?)?;
    Ok(report)
}

fn set_row(name: &str, eval: &SetEval) -> RobustnessRow {
    RobustnessRow {
        attack: name.to_string(),
        undefended: eval.undefended,
        always_purify: eval.always_purify,
        detect_and_route: eval.detect_and_route,
        detection_rate: eval.detection_rate,
    }
}

fn set_scores(
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    test: &Dataset,
    attack: Option<&AttackSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let mut scores = Vec::with_capacity(test.len());
    for idx in chunk_indices(test.len()) {
        let (clean, labels) = test.batch(&idx)?;
        let x = match attack {
            Some(spec) => run_attack(spec, classifier, &clean, &labels, rng)?.x_adv,
            None => clean,
        };
        let out = purify(ne, rec, &x)?;
        scores.extend(linf_per_image(&x, &out.x_hat)?);
    }
    Ok(scores)
}

/// Detector-score histograms for the clean test set and each configured
/// attack, one file per series. Attack randomness uses the same streams as
/// the evaluate stage, so both paths emit identical histogram files.
pub fn stage_histogram(
    cfg: &ExperimentConfig,
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    test: &Dataset,
    paths: &ArtifactPaths,
) -> Result<()> {
    let meta = run_meta(cfg);
    let mut rng = seeded_rng(cfg.seed, "eval-attack", 0);
    let clean = set_scores(classifier, ne, rec, test, None, &mut rng)?;
    write_text(
        &paths.histogram_clean(),
        &histogram_csv(&meta, None, &bin_scores(&clean, cfg.eval_bins))?,
    )?;
    for (i, attack) in cfg.eval_attacks.iter().enumerate() {
        let mut rng = seeded_rng(cfg.seed, "eval-attack", i as u64 + 1);
        let scores = set_scores(classifier, ne, rec, test, Some(attack), &mut rng)?;
        write_text(
            &paths.histogram_attack(i),
            &histogram_csv(
                &meta,
                Some(&attack.to_string()),
                &bin_scores(&scores, cfg.eval_bins),
            )?,
        )?;
    }
    Ok(())
}

/// PGD accuracy grid over the configured steps and strengths, for the bare
/// classifier and the always-purify defense.
pub fn sweep_pgd(
    cfg: &ExperimentConfig,
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    test: &Dataset,
) -> Result<Vec<SweepRow>> {
    if test.is_empty() {
        return Err(Error::Usage("cannot sweep an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(cfg.sweep_steps.len() * cfg.sweep_eps.len() * 2);
    for (si, &steps) in cfg.sweep_steps.iter().enumerate() {
        for (ei, &eps) in cfg.sweep_eps.iter().enumerate() {
            let spec = AttackSpec::pgd(eps, steps, SWEEP_STEP_SIZE, false)?;
            let combo = (si * cfg.sweep_eps.len() + ei) as u64;
            let mut rng = seeded_rng(cfg.seed, "sweep", combo);
            let mut undefended = 0usize;
            let mut defended = 0usize;
            for idx in chunk_indices(test.len()) {
                let (clean, labels) = test.batch(&idx)?;
                let adv = run_attack(&spec, classifier, &clean, &labels, &mut rng)?;
                let plain = predictions(&classify(classifier, &adv.x_adv, classifier.t_steps)?)?;
                let out = purify(ne, rec, &adv.x_adv)?;
                let pure = predictions(&classify(classifier, &out.x_hat, classifier.t_steps)?)?;
                for (i, &label) in labels.iter().enumerate() {
                    undefended += (plain[i] == label) as usize;
                    defended += (pure[i] == label) as usize;
                }
            }
            let n = test.len() as f32;
            rows.push(SweepRow {
                steps,
                eps,
                variant: "undefended".into(),
                accuracy: undefended as f32 / n,
            });
            rows.push(SweepRow {
                steps,
                eps,
                variant: "defended".into(),
                accuracy: defended as f32 / n,
            });
        }
    }
    Ok(rows)
}

pub fn stage_sweep(
    cfg: &ExperimentConfig,
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    test: &Dataset,
    paths: &ArtifactPaths,
) -> Result<Vec<SweepRow>> {
    let rows = sweep_pgd(cfg, classifier, ne, rec, test)?;
    write_text(&paths.sweep(), &sweep_csv(&run_meta(cfg), &rows)?)?;
    Ok(rows)
}

/// The whole pipeline in order. Any failure is tagged with its stage name;
/// artifacts written by earlier stages stay on disk.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RobustnessReport> {
    let paths = ArtifactPaths::new(out_dir);
    cfg.validate()
        .and_then(|()| {
            write_text(
                &paths.config(),
                &format!("{}{}", comment_header(cfg), cfg.canonical_dump()),
            )
        })
        .map_err(|e| e.in_stage("configure"))?;
    let (train, test) = load_data(cfg).map_err(|e| e.in_stage("load-data"))?;
    let mut classifier = stage_train_classifier(cfg, &train, &paths)
        .map_err(|e| e.in_stage("train-classifier"))?;
    classifier.freeze();
    let (mut ne, mut rec) = stage_train_purifier(cfg, &classifier, &train, &paths)
        .map_err(|e| e.in_stage("train-purifier"))?;
    ne.freeze();
    rec.freeze();
    let det = stage_calibrate(cfg, &ne, &rec, &train, &paths)
        .map_err(|e| e.in_stage("calibrate"))?;
    let report = stage_evaluate(cfg, &classifier, &ne, &rec, &test, &det, &paths)
        .map_err(|e| e.in_stage("evaluate"))?;
    stage_sweep(cfg, &classifier, &ne, &rec, &test, &paths)
        .map_err(|e| e.in_stage("sweep"))?;
    Ok(report)
}

fn comment_header(cfg: &ExperimentConfig) -> String {
    format!("# config={} seed={}\n", cfg.hash_hex(), cfg.seed)
}
