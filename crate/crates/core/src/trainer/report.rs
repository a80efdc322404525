use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::search::{Combo, ComboResult};
use super::{Result, TrainError, Variant};
use crate::fusion::InputKind;
use crate::metrics::{PrPoint, RocPoint};
use crate::models::Family;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Test-split result of one (family, input, variant) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub family: Family,
    pub input: InputKind,
    pub upsampled: bool,
    pub augmented: bool,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub test_size: usize,
    pub training_size: usize,
    pub selected: Combo,
    pub validation: Vec<ComboResult>,
    pub final_epoch_losses: Vec<f64>,
    pub roc_curve: Vec<RocPoint>,
    pub pr_curve: Vec<PrPoint>,
}

impl ReportRow {
    fn key(&self) -> (Family, bool, bool, InputKind) {
        (self.family, self.upsampled, self.augmented, self.input)
    }
}

/// Wall-clock measurements, kept apart from the reproducible report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub family: Family,
    pub input: InputKind,
    pub variant: Variant,
    pub inference_ms: f64,
    pub final_train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnsupportedCell {
    pub family: Family,
    pub input: InputKind,
    pub upsampled: bool,
    pub augmented: bool,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
    pub unsupported: Vec<UnsupportedCell>,
}

impl EvalReport {
    /// Sorts rows into table order and marks the input types a family cannot take.
    pub fn from_rows(mut rows: Vec<ReportRow>) -> Self {
        rows.sort_by_key(ReportRow::key);
        let mut unsupported = Vec::new();
        let mut seen = Vec::new();
        for row in &rows {
            let variant = (row.family, row.upsampled, row.augmented);
            if seen.contains(&variant) {
                continue;
            }
            seen.push(variant);
            for input in InputKind::ALL {
                if !row.family.supports_channels(input.channels()) {
                    unsupported.push(UnsupportedCell {
                        family: row.family,
                        input,
                        upsampled: row.upsampled,
                        augmented: row.augmented,
                        reason: format!("{} takes 3-channel input only", row.family.display_name()),
                    });
                }
            }
        }
        Self { schema_version: REPORT_SCHEMA_VERSION, rows, unsupported }
    }

    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> Self {
        Self::from_rows(reports.into_iter().flat_map(|r| r.rows).collect())
    }

    pub fn find(&self, family: Family, input: InputKind, variant: Variant) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key() == (family, variant.upsampled(), variant.augmented(), input))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| TrainError::Config(format!("report is not valid JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == REPORT_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(TrainError::Config(format!("unsupported report schema version {v}"))),
            None => return Err(TrainError::Config("report has no schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| TrainError::Config(format!("malformed report: {e}")))
    }

    /// Plain-text table with one line per row and per unsupported cell.
    pub fn to_text(&self) -> String {
        let yes_no = |b: bool| if b { "yes" } else { "no" };
        let mut lines: Vec<((Family, bool, bool, InputKind), String)> = self
            .rows
            .iter()
            .map(|r| {
                let line = format!(
                    "{:<8}{:<10}{:<11}{:<11}{:>8.3}{:>8.3}",
                    r.family.display_name(),
                    title(r.input),
                    yes_no(r.upsampled),
                    yes_no(r.augmented),
                    r.roc_auc,
                    r.pr_auc
                );
                (r.key(), line)
            })
            .collect();
        for cell in &self.unsupported {
            let line = format!(
                "{:<8}{:<10}{:<11}{:<11}  unsupported ({})",
                cell.family.display_name(),
                title(cell.input),
                yes_no(cell.upsampled),
                yes_no(cell.augmented),
                cell.reason
            );
            lines.push(((cell.family, cell.upsampled, cell.augmented, cell.input), line));
        }
        lines.sort_by_key(|(k, _)| *k);
        let mut out = String::new();
        writeln!(out, "{:<8}{:<10}{:<11}{:<11}{:>8}{:>8}", "Model", "Type", "Upsampled", "Augmented", "ROC-AUC", "PR-AUC")
            .expect("write to string");
        for (_, line) in lines {
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

fn title(input: InputKind) -> &'static str {
    match input {
        InputKind::Optical => "Optical",
        InputKind::Infrared => "Infrared",
        InputKind::Fusion => "Fusion",
    }
}
