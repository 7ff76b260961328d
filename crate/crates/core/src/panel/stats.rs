use serde::{Deserialize, Serialize};

use super::{PanelDataset, Variable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub variable: Variable,
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 when `count == 1`.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Set when the standard deviation is undefined (a single cell).
    pub degenerate: bool,
}

/// Per-variable statistics over all panel cells.
pub fn descriptive_stats(panel: &PanelDataset) -> Vec<DescriptiveRow> {
    panel
        .variables()
        .into_iter()
        .map(|var| {
            let values: Vec<f64> = (0..panel.n_units()).flat_map(|u| panel.series(var, u)).collect();
            let count = values.len();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // constant columns report exact mean and zero spread
            let mean = if min == max {
                min
            } else {
                values.iter().sum::<f64>() / count as f64
            };
            let std = if count > 1 && min != max {
                let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
                (ss / (count - 1) as f64).sqrt()
            } else {
                0.0
            };
            DescriptiveRow {
                variable: var,
                count,
                mean,
                std,
                min,
                max,
                degenerate: count < 2,
            }
        })
        .collect()
}
