//! Artifact emission: CSV tables and JSON-lines verdicts.
//!
//! Every file begins with a `# config=<hash> seed=<n>` line so any artifact
//! can be traced back to the run that produced it; the tables themselves are
//! plain RFC-4180 CSV. Emitters render to strings, which keeps byte-level
//! determinism testable without touching the filesystem.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{DefendedPrediction, HistogramBin};

/// Identifies the run an artifact came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl RunMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> RunMeta {
        RunMeta {
            config_hash: config_hash.into(),
            seed,
        }
    }

    fn comment(&self) -> String {
        format!("# config={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Accuracy under one attack for each defense variant, plus how often the
/// detector fired. For the `clean` row the detection rate is the false
/// positive rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub attack: String,
    pub undefended: f32,
    pub always_purify: f32,
    pub detect_and_route: f32,
    pub detection_rate: f32,
}

#[derive(Clone, Debug)]
pub struct RobustnessReport {
    pub meta: RunMeta,
    pub threshold: f32,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// Every accuracy and detection rate must be a proportion.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            let cells = [
                ("undefended accuracy", row.undefended),
                ("always-purify accuracy", row.always_purify),
                ("detect-and-route accuracy", row.detect_and_route),
                ("detection rate", row.detection_rate),
            ];
            for (what, v) in cells {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Integrity(format!(
                        "{what} for '{}' is {v}, outside [0,1]",
                        row.attack
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, attack: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.attack == attack)
    }

    /// Detector firing rate on unattacked inputs.
    pub fn clean_false_positive(&self) -> Option<f32> {
        self.row("clean").map(|r| r.detection_rate)
    }
}

fn csv_table<R, I>(meta: &RunMeta, header: &[&str], rows: I) -> Result<String>
where
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
    I: IntoIterator<Item = R>,
{
    let mut buf = meta.comment().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    String::from_utf8(buf).map_err(|e| Error::Integrity(format!("non-utf8 csv: {e}")))
}

/// Mean training loss per epoch; epoch numbering matches the zero-based
/// milestone indices in the config.
pub fn loss_curve_csv(meta: &RunMeta, losses: &[f32]) -> Result<String> {
    csv_table(
        meta,
        &["epoch", "loss"],
        losses
            .iter()
            .enumerate()
            .map(|(epoch, loss)| vec![epoch.to_string(), loss.to_string()]),
    )
}

pub fn threshold_csv(meta: &RunMeta, quantile: f64, threshold: f32) -> Result<String> {
    csv_table(
        meta,
        &["quantile", "threshold"],
        [vec![quantile.to_string(), threshold.to_string()]],
    )
}

/// Reads the threshold back from the text produced by [`threshold_csv`].
pub fn parse_threshold(text: &str) -> Result<f32> {
    let mut offset = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if !(trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("quantile")) {
            let cell = trimmed.split(',').nth(1).ok_or(Error::Parse {
                offset,
                msg: "threshold row needs two columns".into(),
            })?;
            return cell.parse().map_err(|e| Error::Parse {
                offset,
                msg: format!("bad threshold value '{cell}': {e}"),
            });
        }
        offset += line.len() + 1;
    }
    Err(Error::Parse {
        offset,
        msg: "no threshold row found".into(),
    })
}

pub fn read_threshold(path: &Path) -> Result<f32> {
    parse_threshold(&std::fs::read_to_string(path)?)
}

/// Table-2-style accuracy table, one row per evaluated input set.
pub fn report_csv(meta: &RunMeta, report: &RobustnessReport) -> Result<String> {
    csv_table(
        meta,
        &[
            "attack",
            "undefended_accuracy",
            "always_purify_accuracy",
            "detect_and_route_accuracy",
        ],
        report.rows.iter().map(|r| {
            vec![
                r.attack.clone(),
                r.undefended.to_string(),
                r.always_purify.to_string(),
                r.detect_and_route.to_string(),
            ]
        }),
    )
}

/// Table-1-style detection rates; the `clean` row reads as the false
/// positive rate.
pub fn detection_csv(meta: &RunMeta, report: &RobustnessReport) -> Result<String> {
    csv_table(
        meta,
        &["attack", "detection_rate"],
        report
            .rows
            .iter()
            .map(|r| vec![r.attack.clone(), r.detection_rate.to_string()]),
    )
}

/// `set` names the series (e.g. "clean" or an attack spec) in a second
/// comment line, keeping the table columns fixed.
pub fn histogram_csv(meta: &RunMeta, set: Option<&str>, bins: &[HistogramBin]) -> Result<String> {
    let table = csv_table(
        meta,
        &["bin_low", "bin_high", "count"],
        bins.iter()
            .map(|b| vec![b.low.to_string(), b.high.to_string(), b.count.to_string()]),
    )?;
    Ok(match set {
        Some(label) => {
            let (comment, rest) = table.split_once('\n').expect("comment line");
            format!("{comment}\n# set={label}\n{rest}")
        }
        None => table,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub steps: usize,
    pub eps: f32,
    pub variant: String,
    pub accuracy: f32,
}

pub fn sweep_csv(meta: &RunMeta, rows: &[SweepRow]) -> Result<String> {
    csv_table(
        meta,
        &["steps", "eps", "variant", "accuracy"],
        rows.iter().map(|r| {
            vec![
                r.steps.to_string(),
                r.eps.to_string(),
                r.variant.clone(),
                r.accuracy.to_string(),
            ]
        }),
    )
}

/// Which image the final prediction came from.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutedTo {
    Original,
    Purified,
}

/// One JSON line per classified image.
#[derive(Clone, Debug, Serialize)]
pub struct VerdictRecord {
    pub id: usize,
    pub m: f32,
    pub flagged: bool,
    pub routed: RoutedTo,
    pub predicted: usize,
    pub label: usize,
}

impl VerdictRecord {
    pub fn from_prediction(id: usize, pred: &DefendedPrediction, label: usize) -> VerdictRecord {
        VerdictRecord {
            id,
            m: pred.verdict.score,
            flagged: pred.verdict.flagged,
            routed: if pred.routed {
                RoutedTo::Purified
            } else {
                RoutedTo::Original
            },
            predicted: pred.predicted,
            label,
        }
    }
}

pub fn verdicts_jsonl(meta: &RunMeta, records: &[VerdictRecord]) -> Result<String> {
    let mut out = format!(
        "{{\"config\":\"{}\",\"seed\":{}}}\n",
        meta.config_hash, meta.seed
    );
    for record in records {
        out.push_str(&serde_json::to_string(record).map_err(|e| {
            Error::Integrity(format!("verdict record failed to serialize: {e}"))
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
