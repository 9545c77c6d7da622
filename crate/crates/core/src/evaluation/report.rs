use std::fmt::Write as _;

use super::metrics::defined_mean;

/// Per-class AP and CorLoc, both in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub ap: Vec<Option<f64>>,
    pub corloc: Vec<Option<f64>>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn mean_ap(&self) -> Option<f64> {
        defined_mean(&self.ap)
    }

    pub fn mean_corloc(&self) -> Option<f64> {
        defined_mean(&self.corloc)
    }

    /// Plain-text table with fixed four-decimal percentages.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10} {:>10}", "class", "AP", "CorLoc");
        for (i, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<12} {:>10} {:>10}",
                name,
                cell(self.ap.get(i).copied().flatten()),
                cell(self.corloc.get(i).copied().flatten())
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10}",
            "mean",
            cell(self.mean_ap()),
            cell(self.mean_corloc())
        );
        s
    }
}
