use serde::{Deserialize, Serialize};

use super::eval::{EvalReport, PROTOCOL};
use super::grid::{CellKey, ExperimentGrid, GridCell};
use crate::error::Result;
use crate::model::{EncoderKind, HeadKind};

pub const REFERENCE_LABEL: &str = "reference (not reproducible: licensed data)";

/// A published accuracy (percent) for a cell with the same key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub dataset: String,
    pub accuracy: f64,
    pub label: String,
}

const SETTINGS: [(usize, usize); 4] = [(5, 5), (5, 10), (10, 5), (10, 10)];

// (head, lolos, cnn row, transformer row), columns in SETTINGS order
const ACE: [(HeadKind, bool, [f64; 4], [f64; 4]); 8] = [
    (HeadKind::Matching, false, [45.81, 49.01, 30.41, 35.66], [71.83, 76.51, 61.2, 66.79]),
    (HeadKind::Matching, true, [51.78, 52.64, 32.48, 39.15], [78.13, 83.42, 68.91, 75.30]),
    (HeadKind::Proto, false, [70.92, 74.40, 57.59, 62.67], [78.07, 82.64, 68.77, 74.99]),
    (HeadKind::Proto, true, [76.98, 82.19, 66.92, 73.63], [81.27, 86.20, 73.07, 79.63]),
    (HeadKind::ProtoAtt, false, [72.26, 74.22, 57.28, 64.36], [80.77, 83.96, 72.78, 77.97]),
    (HeadKind::ProtoAtt, true, [76.93, 75.59, 67.54, 66.70], [83.38, 87.20, 76.03, 81.79]),
    (HeadKind::Relation, false, [36.33, 33.75, 24.21, 18.04], [51.22, 55.47, 36.98, 39.89]),
    (HeadKind::Relation, true, [37.86, 38.52, 25.99, 23.47], [54.74, 56.60, 39.74, 41.69]),
];

// Transformer encoder; 5-way 5-shot and 10-way 10-shot
const TAC: [(HeadKind, bool, [f64; 2]); 8] = [
    (HeadKind::Matching, false, [72.78, 65.55]),
    (HeadKind::Matching, true, [75.58, 68.53]),
    (HeadKind::Proto, false, [78.08, 73.23]),
    (HeadKind::Proto, true, [78.88, 74.82]),
    (HeadKind::ProtoAtt, false, [75.35, 71.28]),
    (HeadKind::ProtoAtt, true, [79.93, 76.37]),
    (HeadKind::Relation, false, [50.97, 34.91]),
    (HeadKind::Relation, true, [51.65, 35.13]),
];

// Proto+Att with the Transformer encoder under training label noise
const NOISE: [(f64, bool, [f64; 2]); 6] = [
    (0.2, false, [70.08, 59.55]),
    (0.2, true, [74.61, 64.66]),
    (0.3, false, [67.38, 57.08]),
    (0.3, true, [72.45, 62.65]),
    (0.5, false, [60.50, 50.67]),
    (0.5, true, [65.29, 55.21]),
];

fn reference(dataset: &str, accuracy: f64) -> Reference {
    Reference {
        dataset: dataset.to_string(),
        accuracy,
        label: REFERENCE_LABEL.to_string(),
    }
}

/// Published numbers whose setting matches `key`.
pub fn references_for(key: &CellKey) -> Vec<Reference> {
    let mut out = Vec::new();
    let setting = (key.n_way, key.k_shot);
    let square = match setting {
        (5, 5) => Some(0),
        (10, 10) => Some(1),
        _ => None,
    };
    if key.noise_rate == 0.0 {
        if let Some(col) = SETTINGS.iter().position(|s| *s == setting) {
            for (head, lolos, cnn, tf) in ACE {
                if head == key.head && lolos == key.lolos {
                    let row = match key.encoder {
                        EncoderKind::Cnn => cnn,
                        EncoderKind::Transformer => tf,
                    };
                    out.push(reference("ACE 2005", row[col]));
                }
            }
        }
        if let (Some(col), EncoderKind::Transformer) = (square, key.encoder) {
            for (head, lolos, row) in TAC {
                if head == key.head && lolos == key.lolos {
                    out.push(reference("TAC KBP 2015", row[col]));
                }
            }
        }
    } else if let (Some(col), EncoderKind::Transformer, HeadKind::ProtoAtt) = (square, key.encoder, key.head) {
        for (rate, lolos, row) in NOISE {
            if rate == key.noise_rate && lolos == key.lolos {
                out.push(reference("ACE 2005", row[col]));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportRow {
    key: CellKey,
    report: Option<EvalReport>,
    best_dev_accuracy: Option<f64>,
    error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    references: Vec<Reference>,
}

impl ReportRow {
    fn cell(&self) -> GridCell {
        GridCell {
            key: self.key,
            report: self.report.clone(),
            best_dev_accuracy: self.best_dev_accuracy,
            error: self.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportDocument {
    protocol: String,
    cells: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub text: String,
    pub json: String,
}

/// Plain-text table and JSON for `grid`. With `include_references` every
/// cell whose key matches a published setting carries those numbers.
pub fn render_report(grid: &ExperimentGrid, include_references: bool) -> Result<RenderedReport> {
    let rows: Vec<ReportRow> = grid
        .cells
        .iter()
        .map(|cell| ReportRow {
            key: cell.key,
            report: cell.report.clone(),
            best_dev_accuracy: cell.best_dev_accuracy,
            error: cell.error.clone(),
            references: if include_references {
                references_for(&cell.key)
            } else {
                Vec::new()
            },
        })
        .collect();

    let header = ["model", "encoder", "setting", "noise", "accuracy (%)", "dev (%)", "reference"];
    let mut table: Vec<[String; 7]> = vec![header.map(String::from)];
    for row in &rows {
        let k = &row.key;
        let accuracy = match (&row.report, &row.error) {
            (Some(r), _) => format!("{:.2} ± {:.2}", 100.0 * r.mean_accuracy, 100.0 * r.ci95),
            (None, Some(e)) => format!("failed: {e}"),
            (None, None) => "-".to_string(),
        };
        let dev = row
            .best_dev_accuracy
            .map_or("-".to_string(), |d| format!("{:.2}", 100.0 * d));
        let refs = row
            .references
            .iter()
            .map(|r| format!("{} {:.2}", r.dataset, r.accuracy))
            .collect::<Vec<_>>()
            .join("; ");
        table.push([
            k.model_name(),
            k.encoder.to_string(),
            format!("{}-way {}-shot", k.n_way, k.k_shot),
            format!("{:.0}%", 100.0 * k.noise_rate),
            accuracy,
            dev,
            if refs.is_empty() { "-".to_string() } else { refs },
        ]);
    }
    let widths: Vec<usize> = (0..7)
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, r) in table.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        text.push_str(line.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            text.push('\n');
        }
    }
    text.push_str(&format!("\naccuracy: {PROTOCOL}; ± is the 95% half-width\n"));
    if rows.iter().any(|r| !r.references.is_empty()) {
        text.push_str(&format!("reference column: {REFERENCE_LABEL}\n"));
    }

    let json = serde_json::to_string_pretty(&ReportDocument {
        protocol: PROTOCOL.to_string(),
        cells: rows,
    })?;
    Ok(RenderedReport { text, json })
}

/// The grid a rendered JSON report was produced from.
pub fn parse_report(json: &str) -> Result<ExperimentGrid> {
    let doc: ReportDocument = serde_json::from_str(json)?;
    Ok(ExperimentGrid {
        cells: doc.cells.iter().map(ReportRow::cell).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(head: HeadKind, encoder: EncoderKind, n: usize, k: usize, lolos: bool, noise: f64) -> CellKey {
        CellKey {
            head,
            encoder,
            n_way: n,
            k_shot: k,
            lolos,
            noise_rate: noise,
        }
    }

    #[test]
    fn known_reference_cells() {
        let r = references_for(&key(HeadKind::Proto, EncoderKind::Transformer, 5, 5, true, 0.0));
        assert_eq!(r[0].dataset, "ACE 2005");
        assert_eq!(r[0].accuracy, 81.27);
        assert_eq!(r[0].label, REFERENCE_LABEL);
        let r = references_for(&key(HeadKind::Matching, EncoderKind::Cnn, 10, 5, false, 0.0));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].accuracy, 30.41);
        let r = references_for(&key(HeadKind::ProtoAtt, EncoderKind::Transformer, 5, 5, true, 0.2));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].accuracy, 74.61);
        assert!(references_for(&key(HeadKind::Proto, EncoderKind::Cnn, 3, 2, false, 0.0)).is_empty());
        assert!(references_for(&key(HeadKind::Proto, EncoderKind::Cnn, 5, 5, false, 0.2)).is_empty());
    }

    #[test]
    fn empty_grid_renders_header_only() {
        let r = render_report(&ExperimentGrid::default(), true).unwrap();
        assert_eq!(parse_report(&r.json).unwrap().cells, vec![]);
        assert!(!r.text.contains("reference column"));
    }
}
