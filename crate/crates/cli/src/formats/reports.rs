//! Report writers: metrics, agreement tables, split files, training logs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use softseg_core::agreement::{KappaReport, KappaValue};
use softseg_core::metrics::{ClassMass, MeanStd, MetricsReport};
use softseg_core::splitter::{Split, SplitAssignment};

use super::FormatError;

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsReportFile {
    pub eval_level: String,
    pub trained_level: String,
    pub classes: usize,
    pub runs: usize,
    pub macro_soft_dice: MeanStdRow,
    pub l1: MeanStdRow,
    pub l1_printed_form: MeanStdRow,
    pub dice: MeanStdRow,
    pub macro_dice: MeanStdRow,
    /// Row-normalized percentages, row-major C×C.
    pub confusion_percent: Vec<f64>,
    pub class_mass: Vec<ClassMassRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeanStdRow {
    pub mean: f64,
    pub std: f64,
}

impl From<MeanStd> for MeanStdRow {
    fn from(ms: MeanStd) -> Self {
        MeanStdRow {
            mean: ms.mean,
            std: ms.std,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassMassRow {
    pub class_id: u32,
    pub predicted_mass_share: f64,
    pub target_mass_share: f64,
    pub argmax_share: f64,
    pub majority_share: f64,
}

impl From<&ClassMass> for ClassMassRow {
    fn from(c: &ClassMass) -> Self {
        ClassMassRow {
            class_id: c.class_id,
            predicted_mass_share: c.predicted_mass_share,
            target_mass_share: c.target_mass_share,
            argmax_share: c.argmax_share,
            majority_share: c.majority_share,
        }
    }
}

pub fn metrics_to_file(report: &MetricsReport) -> MetricsReportFile {
    MetricsReportFile {
        eval_level: report.eval_level.name().to_string(),
        trained_level: report.trained_level.name().to_string(),
        classes: report.classes,
        runs: report.runs,
        macro_soft_dice: report.macro_soft_dice.into(),
        l1: report.l1.into(),
        l1_printed_form: report.l1_printed_form.into(),
        dice: report.dice.into(),
        macro_dice: report.macro_dice.into(),
        confusion_percent: report.confusion.clone(),
        class_mass: report.class_mass.iter().map(ClassMassRow::from).collect(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| FormatError::parse(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| FormatError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FormatError::parse(path, e.to_string()))
}

/// Confusion matrix as CSV with class labels on both axes.
pub fn write_confusion_csv(
    path: &Path,
    confusion: &[f64],
    class_names: &[String],
) -> Result<(), FormatError> {
    let classes = class_names.len();
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        FormatError::parse(path, e.to_string())
    })?;
    let mut header = vec!["majority \\ prediction".to_string()];
    header.extend(class_names.iter().cloned());
    writer.write_record(&header).map_err(|e| FormatError::parse(path, e.to_string()))?;
    for row in 0..classes {
        let mut record = vec![class_names[row].clone()];
        for col in 0..classes {
            record.push(format!("{:.4}", confusion[row * classes + col]));
        }
        writer.write_record(&record).map_err(|e| FormatError::parse(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| FormatError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KappaRow {
    pub label: Option<u32>,
    pub label_name: Option<String>,
    pub scope: String,
    pub kappa: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub resamples_used: usize,
    pub band: Option<String>,
}

pub fn kappa_row(report: &KappaReport, label_name: Option<String>) -> KappaRow {
    KappaRow {
        label: report.label,
        label_name,
        scope: report.scope.to_string(),
        kappa: match report.kappa {
            KappaValue::Defined(v) => Some(v),
            KappaValue::Undefined => None,
        },
        ci_low: report.ci_low,
        ci_high: report.ci_high,
        resamples_used: report.resamples_used,
        band: report.landis_koch.map(|b| b.to_string()),
    }
}

/// Flat kappa table: label, group, κ, CI, resamples, band. Undefined
/// kappas render as NA.
pub fn write_kappa_csv(path: &Path, rows: &[KappaRow]) -> Result<(), FormatError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| FormatError::parse(path, e.to_string()))?;
    writer
        .write_record(["label", "scope", "kappa", "ci_low", "ci_high", "resamples_used", "band"])
        .map_err(|e| FormatError::parse(path, e.to_string()))?;
    let na = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".to_string());
    for row in rows {
        writer
            .write_record([
                row.label_name.clone().unwrap_or_else(|| "all".to_string()),
                row.scope.clone(),
                na(row.kappa),
                na(row.ci_low),
                na(row.ci_high),
                row.resamples_used.to_string(),
                row.band.clone().unwrap_or_else(|| "NA".to_string()),
            ])
            .map_err(|e| FormatError::parse(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| FormatError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub objective: f64,
    /// image id -> split name
    pub assignment: Vec<SplitRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitRow {
    pub image_id: String,
    pub split: String,
}

pub fn split_to_file(image_ids: &[String], result: &SplitAssignment) -> SplitFile {
    SplitFile {
        seed: result.seed,
        objective: result.objective,
        assignment: image_ids
            .iter()
            .zip(result.assignment.iter())
            .map(|(id, split)| SplitRow {
                image_id: id.clone(),
                split: split.name().to_string(),
            })
            .collect(),
    }
}

pub fn split_of(file: &SplitFile, image_id: &str) -> Option<Split> {
    file.assignment
        .iter()
        .find(|row| row.image_id == image_id)
        .and_then(|row| match row.split.as_str() {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        })
}

/// Training log: one JSON object per line (epoch, losses, lr).
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn append_log_line(path: &Path, line: &TrainLogLine) -> Result<(), FormatError> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FormatError::io(path, e))?;
    let text =
        serde_json::to_string(line).map_err(|e| FormatError::parse(path, e.to_string()))?;
    writeln!(file, "{text}").map_err(|e| FormatError::io(path, e))
}
