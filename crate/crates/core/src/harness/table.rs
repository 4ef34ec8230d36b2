//! Monte Carlo result tables and their CSV form.

use std::fmt::Write as _;

/// Time coordinate of a row: a grid time or the supremum over the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeKey {
    At(f64),
    Sup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentRow {
    pub epsilon: f64,
    pub statistic: String,
    pub time: TimeKey,
    pub estimate: f64,
    /// Sample standard deviation over `√replicas`.
    pub stderr: f64,
    /// Replicas entering the estimate; aborted ones are excluded.
    pub replicas: usize,
    pub aborted: usize,
}

pub const MOMENT_HEADER: &str = "epsilon,statistic,time,estimate,stderr,replicas,aborted";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
}

impl MomentTable {
    pub fn push(&mut self, row: MomentRow) {
        self.rows.push(row);
    }

    pub fn sup(&self, epsilon: f64, statistic: &str) -> Option<&MomentRow> {
        self.rows.iter().find(|r| r.epsilon == epsilon && r.statistic == statistic && r.time == TimeKey::Sup)
    }

    pub fn series(&self, epsilon: f64, statistic: &str) -> Vec<&MomentRow> {
        self.rows
            .iter()
            .filter(|r| r.epsilon == epsilon && r.statistic == statistic && matches!(r.time, TimeKey::At(_)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(MOMENT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let time = match r.time {
                TimeKey::At(t) => format!("{t}"),
                TimeKey::Sup => "sup".to_string(),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epsilon, r.statistic, time, r.estimate, r.stderr, r.replicas, r.aborted
            )
            .unwrap();
        }
        out
    }
}

/// One point of an `ε`-versus-statistic curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub statistic: String,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub estimate: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const CURVE_HEADER: &str = "statistic,epsilon,delta,estimate,stderr,ci_low,ci_high";

pub fn curves_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let delta = r.delta.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.statistic, r.epsilon, delta, r.estimate, r.stderr, r.ci_low, r.ci_high
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(MomentTable::default().to_csv(), format!("{MOMENT_HEADER}\n"));
        assert_eq!(curves_to_csv(&[]), format!("{CURVE_HEADER}\n"));
    }

    #[test]
    fn floats_round_trip_through_csv() {
        let mut t = MomentTable::default();
        let x = 0.1 + 0.2;
        t.push(MomentRow {
            epsilon: 0.02,
            statistic: "u_gap".into(),
            time: TimeKey::Sup,
            estimate: x,
            stderr: 1.0 / 3.0,
            replicas: 99,
            aborted: 1,
        });
        let csv = t.to_csv();
        let line = csv.lines().nth(1).unwrap();
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], "sup");
        assert_eq!(cols[3].parse::<f64>().unwrap(), x);
        assert_eq!(cols[4].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert!(!csv.contains('\r'));
    }
}
