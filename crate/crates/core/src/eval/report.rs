use serde::{Deserialize, Serialize};

use crate::eval::metrics::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Flat,
}

impl Direction {
    fn marker(self) -> &'static str {
        match self {
            Direction::Up => "↑",
            Direction::Down => "↓",
            Direction::Flat => "=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub calling_rate_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub before: Cell,
    pub after: Cell,
    /// After minus before, on the one-decimal values shown in the table.
    pub improvement: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub row: ReportRow,
}

impl Report {
    pub fn json(&self) -> String {
        serde_json::to_string_pretty(&self.row).expect("report rows serialize") + "\n"
    }
}

/// Round to one decimal, half away from zero, with -0.0 folded to 0.0.
pub fn round1(x: f64) -> f64 {
    let r = (x * 10.0).round() / 10.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn signed(x: f64) -> String {
    if x < 0.0 {
        format!("-{:.1}", -x)
    } else {
        format!("+{x:.1}")
    }
}

/// Before/after row. The improvement is computed on the rounded means so the
/// printed row is arithmetically consistent.
pub fn emit_report(before: &Metrics, after: &Metrics, label: &str) -> Report {
    let b = round1(before.accuracy_pct);
    let a = round1(after.accuracy_pct);
    let improvement = round1(a - b);
    let direction = if improvement > 0.0 {
        Direction::Up
    } else if improvement < 0.0 {
        Direction::Down
    } else {
        Direction::Flat
    };
    let row = ReportRow {
        label: label.to_string(),
        before: Cell { mean: b, std: round1(before.accuracy_std), calling_rate_pct: round1(before.calling_rate_pct) },
        after: Cell { mean: a, std: round1(after.accuracy_std), calling_rate_pct: round1(after.calling_rate_pct) },
        improvement,
        direction,
    };
    let cells = [
        row.label.clone(),
        format!("{:.1}±{:.1}", row.before.mean, row.before.std),
        format!("{:.1}±{:.1}", row.after.mean, row.after.std),
        format!("{} {}", signed(improvement), direction.marker()),
    ];
    let header = ["Model", "Before", "After", "Improvement"];
    let widths: Vec<usize> = header
        .iter()
        .zip(&cells)
        .map(|(h, c)| h.chars().count().max(c.chars().count()))
        .collect();
    let line = |cols: &[String]| {
        cols.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    let rule = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-");
    let text = format!("{}\n{}\n{}\n", line(&header), rule, line(&cells));
    Report { text, row }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(acc: f64, std: f64) -> Metrics {
        Metrics { accuracy_pct: acc, accuracy_std: std, calling_rate_pct: 0.0, n_episodes: 1, per_task: vec![] }
    }

    #[test]
    fn improvement_sign_law() {
        let r = emit_report(&m(34.3, 3.2), &m(82.7, 0.6), "GPT-3.5-turbo");
        assert_eq!(r.row.improvement, 48.4);
        assert!(r.text.contains("GPT-3.5-turbo | 34.3±3.2 | 82.7±0.6 | +48.4 ↑"), "{}", r.text);
        let flat = emit_report(&m(50.0, 0.0), &m(50.0, 0.0), "x");
        assert_eq!(flat.row.improvement, 0.0);
        assert!(flat.text.contains("+0.0 ="));
        let down = emit_report(&m(60.0, 0.0), &m(55.0, 0.0), "x");
        assert_eq!(down.row.improvement, -5.0);
        assert!(down.text.contains("-5.0 ↓"));
        assert_eq!(down.row.direction, Direction::Down);
    }

    #[test]
    fn rounding() {
        assert_eq!(round1(-0.04), 0.0);
        assert!(round1(-0.04).is_sign_positive());
        assert_eq!(round1(48.44999), 48.4);
        assert_eq!(round1(59.3 - 49.3), 10.0);
    }

    #[test]
    fn json_sibling_parses() {
        let r = emit_report(&m(49.3, 1.0), &m(59.3, 2.0), "x");
        let v: serde_json::Value = serde_json::from_str(&r.json()).unwrap();
        assert_eq!(v["improvement"], 10.0);
        assert_eq!(v["direction"], "up");
    }
}
