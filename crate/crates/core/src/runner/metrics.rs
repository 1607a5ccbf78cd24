//! Evaluation rows and their CSV form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::reward::ENSEMBLE_SIZE;

pub const CSV_HEADER: &str = "step,success_rate,mean_return,clean_ratio_sel_1,clean_ratio_sel_2,clean_ratio_sel_3,clean_ratio_dataset,reward_loss_1,reward_loss_2,reward_loss_3,feedback_used,alpha_demo";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub success_rate: f64,
    /// Mean true return of the evaluation episodes.
    pub mean_return: f64,
    pub clean_ratio_sel: [f64; ENSEMBLE_SIZE],
    pub clean_ratio_dataset: f64,
    pub reward_loss: [f64; ENSEMBLE_SIZE],
    pub feedback_used: usize,
    pub alpha_demo: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let mut s = String::with_capacity(160);
        let _ = write!(s, "{},{:.6},{:.6}", self.step, self.success_rate, self.mean_return);
        for v in self.clean_ratio_sel {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = write!(s, ",{:.6}", self.clean_ratio_dataset);
        for v in self.reward_loss {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = write!(s, ",{},{:.6}", self.feedback_used, self.alpha_demo);
        s
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Parse {
                source_name: "metrics".into(),
                line: 0,
                message: format!("expected 12 fields, got {}", f.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Parse {
                source_name: "metrics".into(),
                line: 0,
                message: format!("bad number `{}`", f[i]),
            })
        };
        Ok(Self {
            step: num(0)? as u64,
            success_rate: num(1)?,
            mean_return: num(2)?,
            clean_ratio_sel: [num(3)?, num(4)?, num(5)?],
            clean_ratio_dataset: num(6)?,
            reward_loss: [num(7)?, num(8)?, num(9)?],
            feedback_used: num(10)? as usize,
            alpha_demo: num(11)?,
        })
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Parse {
            source_name: "metrics".into(),
            line: 1,
            message: "unexpected header".into(),
        });
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse_csv_line).collect()
}

/// Per-step mean and population standard deviation of success rate and
/// return across runs that share an evaluation schedule.
pub fn summarize(runs: &[Vec<MetricsRow>]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::Config("nothing to summarize".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Config("runs have different evaluation schedules".into()));
    }
    let mut s = String::from("step,runs,success_mean,success_std,return_mean,return_std\n");
    for (i, row) in first.iter().enumerate() {
        let succ: Vec<f64> = runs.iter().map(|r| r[i].success_rate).collect();
        let ret: Vec<f64> = runs.iter().map(|r| r[i].mean_return).collect();
        let (sm, ss) = mean_std(&succ);
        let (rm, rs) = mean_std(&ret);
        let _ = writeln!(s, "{},{},{sm:.6},{ss:.6},{rm:.6},{rs:.6}", row.step, runs.len());
    }
    Ok(s)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lists_every_field() {
        let fields: Vec<&str> = CSV_HEADER.split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[0], "step");
        assert_eq!(fields[11], "alpha_demo");
    }

    #[test]
    fn rows_round_trip_at_fixed_precision() {
        let row = MetricsRow {
            step: 5000,
            success_rate: 0.85,
            mean_return: -12.345678,
            clean_ratio_sel: [0.8, 0.75, 0.7],
            clean_ratio_dataset: 0.6,
            reward_loss: [0.5, 0.25, 0.125],
            feedback_used: 100,
            alpha_demo: 0.4,
        };
        let line = row.to_csv_line();
        assert_eq!(
            line,
            "5000,0.850000,-12.345678,0.800000,0.750000,0.700000,0.600000,0.500000,0.250000,0.125000,100,0.400000"
        );
        let text = render_csv(&[row.clone()]);
        assert_eq!(parse_csv(&text).unwrap(), vec![row]);
    }

    #[test]
    fn summary_of_identical_runs_has_zero_spread() {
        let row = MetricsRow {
            step: 10,
            success_rate: 0.5,
            ..MetricsRow::default()
        };
        let s = summarize(&[vec![row.clone()], vec![row]]).unwrap();
        assert!(s.lines().nth(1).unwrap().starts_with("10,2,0.500000,0.000000"));
    }
}
