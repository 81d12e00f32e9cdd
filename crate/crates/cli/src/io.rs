//! Prediction CSV files and JSON output.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use labelshift_core::{LabeledSample, ProbVector};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Rows whose probabilities sum to within this of one are renormalized;
/// anything further off is rejected. Covers single-precision exports.
pub const RENORMALIZE_TOL: f64 = 1e-6;

pub const LABEL_COLUMN: &str = "label";

/// Predictor outputs, one row per example, with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub classes: Vec<String>,
    pub outputs: Vec<ProbVector>,
    pub labels: Option<Vec<usize>>,
}

impl PredictionFile {
    pub fn read(path: &Path) -> CliResult<Self> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::from_reader(file).map_err(|e| e.context(path.display()))
    }

    pub fn from_reader(reader: impl Read) -> CliResult<Self> {
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = csv.headers().map_err(|e| CliError::input(format!("header: {e}")))?.clone();
        let label_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| *h == LABEL_COLUMN).map(|(i, _)| i).collect();
        if label_cols.len() > 1 {
            return Err(CliError::input("more than one label column"));
        }
        let label_col = label_cols.first().copied();
        let classes: Vec<String> =
            header.iter().enumerate().filter(|(i, _)| Some(*i) != label_col).map(|(_, h)| h.to_string()).collect();
        if classes.len() < 2 {
            return Err(CliError::input(format!("need at least two class columns, found {}", classes.len())));
        }

        let mut outputs = Vec::new();
        let mut labels = label_col.map(|_| Vec::new());
        for (row, record) in csv.records().enumerate() {
            // Line 1 is the header.
            let line = row + 2;
            let record = record.map_err(|e| CliError::input(format!("line {line}: {e}")))?;
            let mut probs = Vec::with_capacity(classes.len());
            for (i, field) in record.iter().enumerate() {
                if Some(i) == label_col {
                    let label: usize =
                        field.parse().map_err(|_| CliError::input(format!("line {line}: label {field:?} is not a class index")))?;
                    if label >= classes.len() {
                        return Err(CliError::input(format!(
                            "line {line}: label {label} out of range for {} classes",
                            classes.len()
                        )));
                    }
                    labels.as_mut().expect("label column present").push(label);
                } else {
                    probs.push(field.parse::<f64>().map_err(|_| CliError::input(format!("line {line}: {field:?} is not a number")))?);
                }
            }
            let output = ProbVector::renormalized_within(probs, RENORMALIZE_TOL)
                .map_err(|e| CliError::input(format!("line {line}: {e}")))?;
            outputs.push(output);
        }
        if outputs.is_empty() {
            return Err(CliError::input("no data rows"));
        }
        Ok(Self { classes, outputs, labels })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.to_writer(&mut out).map_err(|e| CliError::io(path, e))?;
        out.flush().map_err(|e| CliError::io(path, e))
    }

    /// Writes shortest round-trip decimal representations, so reading the
    /// file back reproduces every value bit for bit.
    pub fn to_writer(&self, writer: impl Write) -> io::Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = self.classes.clone();
        if self.labels.is_some() {
            header.push(LABEL_COLUMN.into());
        }
        csv.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for (i, output) in self.outputs.iter().enumerate() {
            record.clear();
            record.extend(output.as_slice().iter().map(|p| format!("{p:?}")));
            if let Some(labels) = &self.labels {
                record.push(labels[i].to_string());
            }
            csv.write_record(&record)?;
        }
        csv.flush()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Pairs outputs with labels; fails for unlabeled files.
    pub fn labeled_samples(&self) -> CliResult<Vec<LabeledSample>> {
        let labels = self.labels.as_ref().ok_or_else(|| CliError::input("source file needs a \"label\" column"))?;
        self.outputs
            .iter()
            .zip(labels)
            .map(|(o, &y)| LabeledSample::new(o.clone(), y).map_err(CliError::from))
            .collect()
    }

    /// Empirical label frequencies.
    pub fn label_marginal(&self) -> CliResult<ProbVector> {
        let labels = self.labels.as_ref().ok_or_else(|| CliError::input("source file needs a \"label\" column"))?;
        let mut counts = vec![0.0; self.num_classes()];
        labels.iter().for_each(|&y| counts[y] += 1.0);
        Ok(ProbVector::normalized(counts)?)
    }
}

/// Ensures two files describe the same classes in the same order.
pub fn check_same_classes(source: &PredictionFile, target: &PredictionFile) -> CliResult<()> {
    if source.classes != target.classes {
        return Err(CliError::input(format!(
            "class columns differ: source {:?}, target {:?}",
            source.classes, target.classes
        )));
    }
    Ok(())
}

/// Pretty JSON to `path`, or to stdout when `path` is `None`.
pub fn write_json(value: &impl Serialize, path: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::input(format!("serializing output: {e}")))?;
    write_text(&(text + "\n"), path)
}

pub fn write_text(text: &str, path: Option<&Path>) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}
