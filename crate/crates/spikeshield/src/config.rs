//! Experiment configuration: a flat `key=value` text format with two
//! built-in presets, a canonical dump whose FNV-1a hash stamps every
//! artifact, and builders for the typed sub-configurations.

use crate::attack::{parse_ratio, AttackSpec};
use crate::data::{fnv1a64, DatasetFormat};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::pipeline::TrainConfig;
use crate::snn::{LIFConfig, MLFConfig};
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetConfig {
    /// Generated shape corpus with the given train/test sizes.
    Synthetic { train: usize, test: usize },
    /// Image/label file pairs for train and test.
    Files {
        format: DatasetFormat,
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub levels: usize,
    pub theta: f32,
    pub lambda_mem: f32,
    pub surrogate_width: f32,
    pub t_steps: usize,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f32,
    pub classifier_milestones: Vec<usize>,
    pub purifier_epochs: usize,
    pub purifier_batch: usize,
    pub purifier_lr: f32,
    pub purifier_milestones: Vec<usize>,
    pub purifier_attack: AttackSpec,
    pub ne_hidden: usize,
    pub lambda_asymm: f32,
    pub lambda_tv: f32,
    pub gamma: f32,
    pub eps_char: f32,
    pub detect_quantile: f32,
    pub eval_attacks: Vec<AttackSpec>,
    pub eval_bins: usize,
    pub sweep_steps: Vec<usize>,
    pub sweep_eps: Vec<f32>,
}

impl ExperimentConfig {
    /// Small synthetic-data preset sized for a workstation run.
    pub fn desk() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                train: 2000,
                test: 500,
            },
            channels: 1,
            height: 16,
            width: 16,
            classes: 10,
            seed: 42,
            levels: 2,
            theta: 1.0,
            lambda_mem: 0.5,
            surrogate_width: 0.5,
            t_steps: 4,
            classifier_epochs: 15,
            classifier_batch: 32,
            classifier_lr: 1e-3,
            classifier_milestones: vec![10, 13],
            purifier_epochs: 8,
            purifier_batch: 32,
            purifier_lr: 1e-4,
            purifier_milestones: vec![5, 7],
            purifier_attack: AttackSpec::fgsm(16.0 / 255.0).expect("preset attack"),
            ne_hidden: 32,
            lambda_asymm: 0.5,
            lambda_tv: 0.05,
            gamma: 0.3,
            eps_char: 1e-3,
            detect_quantile: 0.95,
            eval_attacks: default_eval_attacks(),
            eval_bins: 20,
            sweep_steps: vec![1, 5],
            sweep_eps: vec![4.0 / 255.0, 8.0 / 255.0, 12.0 / 255.0],
        }
    }

    /// Full-scale preset mirroring the published training recipe.
    pub fn paper() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                train: 50000,
                test: 10000,
            },
            channels: 1,
            height: 32,
            width: 32,
            classes: 10,
            seed: 42,
            levels: 2,
            theta: 1.0,
            lambda_mem: 0.5,
            surrogate_width: 0.5,
            t_steps: 4,
            classifier_epochs: 75,
            classifier_batch: 256,
            classifier_lr: 1e-3,
            classifier_milestones: vec![30, 60],
            purifier_epochs: 75,
            purifier_batch: 256,
            purifier_lr: 1e-4,
            purifier_milestones: vec![30, 60],
            purifier_attack: AttackSpec::fgsm(16.0 / 255.0).expect("preset attack"),
            ne_hidden: 32,
            lambda_asymm: 0.5,
            lambda_tv: 0.05,
            gamma: 0.3,
            eps_char: 1e-3,
            detect_quantile: 0.95,
            eval_attacks: default_eval_attacks(),
            eval_bins: 50,
            sweep_steps: vec![1, 2, 5, 10],
            sweep_eps: vec![2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0],
        }
    }

    /// Apply `key=value` lines over this configuration. Blank lines and
    /// `#` comments are skipped; later lines win; validation happens once
    /// at the end so override order never matters.
    pub fn with_overrides(&self, text: &str) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: {line:?} is not key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("config line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.source" => {
                self.dataset = match value {
                    "synthetic" => DatasetConfig::Synthetic { train: 2000, test: 500 },
                    "idx" | "raw" => DatasetConfig::Files {
                        format: if value == "idx" {
                            DatasetFormat::Idx
                        } else {
                            DatasetFormat::Raw
                        },
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                        test_images: PathBuf::new(),
                        test_labels: PathBuf::new(),
                    },
                    other => return Err(Error::Config(format!("unknown dataset source {other:?}"))),
                };
            }
            "dataset.train" => match &mut self.dataset {
                DatasetConfig::Synthetic { train, .. } => *train = parse_usize(value)?,
                _ => return Err(Error::Config("dataset.train applies to the synthetic source".into())),
            },
            "dataset.test" => match &mut self.dataset {
                DatasetConfig::Synthetic { test, .. } => *test = parse_usize(value)?,
                _ => return Err(Error::Config("dataset.test applies to the synthetic source".into())),
            },
            "dataset.images" => set_path(&mut self.dataset, value, 0)?,
            "dataset.labels" => set_path(&mut self.dataset, value, 1)?,
            "dataset.test_images" => set_path(&mut self.dataset, value, 2)?,
            "dataset.test_labels" => set_path(&mut self.dataset, value, 3)?,
            "image.channels" => self.channels = parse_usize(value)?,
            "image.height" => self.height = parse_usize(value)?,
            "image.width" => self.width = parse_usize(value)?,
            "classes" => self.classes = parse_usize(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {value:?}")))?
            }
            "snn.levels" => self.levels = parse_usize(value)?,
            "snn.theta" => self.theta = parse_ratio(value)?,
            "snn.lambda_mem" => self.lambda_mem = parse_ratio(value)?,
            "snn.surrogate_width" => self.surrogate_width = parse_ratio(value)?,
            "snn.t_steps" => self.t_steps = parse_usize(value)?,
            "classifier.epochs" => self.classifier_epochs = parse_usize(value)?,
            "classifier.batch" => self.classifier_batch = parse_usize(value)?,
            "classifier.lr" => self.classifier_lr = parse_ratio(value)?,
            "classifier.milestones" => self.classifier_milestones = parse_usize_list(value)?,
            "purifier.epochs" => self.purifier_epochs = parse_usize(value)?,
            "purifier.batch" => self.purifier_batch = parse_usize(value)?,
            "purifier.lr" => self.purifier_lr = parse_ratio(value)?,
            "purifier.milestones" => self.purifier_milestones = parse_usize_list(value)?,
            "purifier.attack" => self.purifier_attack = AttackSpec::parse(value)?,
            "purifier.hidden" => self.ne_hidden = parse_usize(value)?,
            "loss.lambda_asymm" => self.lambda_asymm = parse_ratio(value)?,
            "loss.lambda_tv" => self.lambda_tv = parse_ratio(value)?,
            "loss.gamma" => self.gamma = parse_ratio(value)?,
            "loss.eps_char" => self.eps_char = parse_ratio(value)?,
            "detect.quantile" => self.detect_quantile = parse_ratio(value)?,
            "eval.attacks" => {
                self.eval_attacks = value
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(AttackSpec::parse)
                    .collect::<Result<Vec<_>>>()?
            }
            "eval.bins" => self.eval_bins = parse_usize(value)?,
            "sweep.steps" => self.sweep_steps = parse_usize_list(value)?,
            "sweep.eps" => {
                self.sweep_eps = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse_ratio)
                    .collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn mlf(&self) -> Result<MLFConfig> {
        MLFConfig::new(
            self.levels,
            LIFConfig::new(self.lambda_mem, self.theta, self.surrogate_width)?,
        )
    }

    pub fn classifier_train(&self) -> Result<TrainConfig> {
        TrainConfig::new(
            self.classifier_epochs,
            self.classifier_batch,
            self.classifier_lr,
            self.classifier_milestones.clone(),
        )
    }

    pub fn purifier_train(&self) -> Result<TrainConfig> {
        TrainConfig::new(
            self.purifier_epochs,
            self.purifier_batch,
            self.purifier_lr,
            self.purifier_milestones.clone(),
        )
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_asymm, self.lambda_tv, self.gamma, self.eps_char)
    }

    pub fn validate(&self) -> Result<()> {
        self.mlf()?;
        self.classifier_train()?;
        self.purifier_train()?;
        self.loss_weights()?;
        if self.channels == 0 {
            return Err(Error::Config("image.channels must be >= 1".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image dims must be >= 8 and divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("snn.t_steps must be >= 1".into()));
        }
        if self.ne_hidden == 0 {
            return Err(Error::Config("purifier.hidden must be >= 1".into()));
        }
        if !(self.detect_quantile > 0.0 && self.detect_quantile <= 1.0) {
            return Err(Error::Config("detect.quantile must lie in (0,1]".into()));
        }
        if self.eval_bins < 2 {
            return Err(Error::Config("eval.bins must be >= 2".into()));
        }
        if self.eval_attacks.is_empty() {
            return Err(Error::Config("eval.attacks must not be empty".into()));
        }
        if self.sweep_steps.is_empty() || self.sweep_steps.contains(&0) {
            return Err(Error::Config("sweep.steps needs positive entries".into()));
        }
        if self.sweep_eps.is_empty() || self.sweep_eps.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::Config("sweep.eps needs entries in (0,1]".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { train, test } => {
                if *train == 0 || *test == 0 {
                    return Err(Error::Config("synthetic dataset sizes must be >= 1".into()));
                }
                if self.channels != 1 {
                    return Err(Error::Config("the synthetic source is single-channel".into()));
                }
            }
            DatasetConfig::Files {
                images,
                labels,
                test_images,
                test_labels,
                ..
            } => {
                for (name, p) in [
                    ("dataset.images", images),
                    ("dataset.labels", labels),
                    ("dataset.test_images", test_images),
                    ("dataset.test_labels", test_labels),
                ] {
                    if p.as_os_str().is_empty() {
                        return Err(Error::Config(format!("{name} must be set for a file dataset")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Fixed-order dump of every setting; parsing it back reproduces the
    /// configuration, and its hash stamps all written artifacts.
    pub fn canonical_dump(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DatasetConfig::Synthetic { train, test } => {
                s.push_str("dataset.source=synthetic\n");
                s.push_str(&format!("dataset.train={train}\n"));
                s.push_str(&format!("dataset.test={test}\n"));
            }
            DatasetConfig::Files {
                format,
                images,
                labels,
                test_images,
                test_labels,
            } => {
                let f = match format {
                    DatasetFormat::Idx => "idx",
                    DatasetFormat::Raw => "raw",
                };
                s.push_str(&format!("dataset.source={f}\n"));
                s.push_str(&format!("dataset.images={}\n", images.display()));
                s.push_str(&format!("dataset.labels={}\n", labels.display()));
                s.push_str(&format!("dataset.test_images={}\n", test_images.display()));
                s.push_str(&format!("dataset.test_labels={}\n", test_labels.display()));
            }
        }
        s.push_str(&format!("image.channels={}\n", self.channels));
        s.push_str(&format!("image.height={}\n", self.height));
        s.push_str(&format!("image.width={}\n", self.width));
        s.push_str(&format!("classes={}\n", self.classes));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("snn.levels={}\n", self.levels));
        s.push_str(&format!("snn.theta={}\n", self.theta));
        s.push_str(&format!("snn.lambda_mem={}\n", self.lambda_mem));
        s.push_str(&format!("snn.surrogate_width={}\n", self.surrogate_width));
        s.push_str(&format!("snn.t_steps={}\n", self.t_steps));
        s.push_str(&format!("classifier.epochs={}\n", self.classifier_epochs));
        s.push_str(&format!("classifier.batch={}\n", self.classifier_batch));
        s.push_str(&format!("classifier.lr={}\n", self.classifier_lr));
        s.push_str(&format!(
            "classifier.milestones={}\n",
            join_usize(&self.classifier_milestones)
        ));
        s.push_str(&format!("purifier.epochs={}\n", self.purifier_epochs));
        s.push_str(&format!("purifier.batch={}\n", self.purifier_batch));
        s.push_str(&format!("purifier.lr={}\n", self.purifier_lr));
        s.push_str(&format!(
            "purifier.milestones={}\n",
            join_usize(&self.purifier_milestones)
        ));
        s.push_str(&format!("purifier.attack={}\n", self.purifier_attack));
        s.push_str(&format!("purifier.hidden={}\n", self.ne_hidden));
        s.push_str(&format!("loss.lambda_asymm={}\n", self.lambda_asymm));
        s.push_str(&format!("loss.lambda_tv={}\n", self.lambda_tv));
        s.push_str(&format!("loss.gamma={}\n", self.gamma));
        s.push_str(&format!("loss.eps_char={}\n", self.eps_char));
        s.push_str(&format!("detect.quantile={}\n", self.detect_quantile));
        let attacks: Vec<String> = self.eval_attacks.iter().map(|a| a.to_string()).collect();
        s.push_str(&format!("eval.attacks={}\n", attacks.join(";")));
        s.push_str(&format!("eval.bins={}\n", self.eval_bins));
        s.push_str(&format!("sweep.steps={}\n", join_usize(&self.sweep_steps)));
        let eps: Vec<String> = self.sweep_eps.iter().map(|e| e.to_string()).collect();
        s.push_str(&format!("sweep.eps={}\n", eps.join(",")));
        s
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_dump().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}

fn default_eval_attacks() -> Vec<AttackSpec> {
    vec![
        AttackSpec::gaussian(8.0 / 255.0).expect("preset"),
        AttackSpec::fgsm(8.0 / 255.0).expect("preset"),
        AttackSpec::ifgsm(8.0 / 255.0, 10, 2.0 / 255.0).expect("preset"),
        AttackSpec::mifgsm(8.0 / 255.0, 10, 2.0 / 255.0, 1.0).expect("preset"),
        AttackSpec::pgd(8.0 / 255.0, 10, 2.0 / 255.0, false).expect("preset"),
    ]
}

fn parse_usize(value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("expected a non-negative integer, got {value:?}")))
}

fn parse_usize_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_usize)
        .collect()
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|u| u.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn set_path(dataset: &mut DatasetConfig, value: &str, which: usize) -> Result<()> {
    match dataset {
        DatasetConfig::Files {
            images,
            labels,
            test_images,
            test_labels,
            ..
        } => {
            let slot = match which {
                0 => images,
                1 => labels,
                2 => test_images,
                _ => test_labels,
            };
            *slot = PathBuf::from(value);
            Ok(())
        }
        _ => Err(Error::Config(
            "dataset paths apply to idx or raw sources; set dataset.source first".into(),
        )),
    }
}
