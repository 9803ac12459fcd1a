use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// Metrics of one class. `None` marks a metric with neither ground truth
/// nor detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAP {
    pub class: usize,
    pub name: String,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
    pub small_ap50: Option<f64>,
    pub medium_ap50: Option<f64>,
    pub large_ap50: Option<f64>,
}

/// Means over the classes where each metric is defined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanAP {
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
    pub small_ap50: Option<f64>,
    pub medium_ap50: Option<f64>,
    pub large_ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub classes: Vec<ClassAP>,
    pub mean: MeanAP,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl APReport {
    pub fn from_classes(classes: Vec<ClassAP>) -> Self {
        let mean = MeanAP {
            ap50: mean(classes.iter().map(|c| c.ap50)),
            ap: mean(classes.iter().map(|c| c.ap)),
            small_ap50: mean(classes.iter().map(|c| c.small_ap50)),
            medium_ap50: mean(classes.iter().map(|c| c.medium_ap50)),
            large_ap50: mean(classes.iter().map(|c| c.large_ap50)),
        };
        Self { classes, mean }
    }

    /// Mean AP50, 0 when undefined.
    pub fn mean_ap50(&self) -> f64 {
        self.mean.ap50.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub report: APReport,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Plain-text comparison table, values ×100.
pub fn render_table(rows: &[MethodReport]) -> String {
    let names: Vec<String> = rows
        .first()
        .map(|r| r.report.classes.iter().map(|c| format!("{} AP50", c.name)).collect())
        .unwrap_or_default();
    let mut header = vec!["Method".to_string()];
    header.extend(names);
    header.extend(["mAP50", "mAP", "S", "M", "L"].map(String::from));
    let mut table: Vec<Vec<String>> = vec![header];
    for r in rows {
        let m = &r.report.mean;
        let mut line = vec![r.method.clone()];
        line.extend(r.report.classes.iter().map(|c| cell(c.ap50)));
        line.extend([m.ap50, m.ap, m.small_ap50, m.medium_ap50, m.large_ap50].map(cell));
        table.push(line);
    }
    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().map(|r| r.get(c).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("-|-"));
        }
    }
    out
}
