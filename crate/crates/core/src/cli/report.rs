use std::fmt::Write as _;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::error::Result;
use crate::simulate::SamplingRun;

/// A number that serializes non-finite values as `"inf"`, `"-inf"` or `"nan"`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Num(pub f64);

impl Num {
    pub const NAN: Num = Num(f64::NAN);
}

impl From<f64> for Num {
    fn from(v: f64) -> Self {
        Num(v)
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Margins {
    pub min: Num,
    pub mean: Num,
}

/// Summary written by every subcommand. Quantities a command does not
/// compute are `"nan"`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    /// Every check the command performed passed.
    pub stable: bool,
    pub r: Num,
    #[serde(rename = "R")]
    pub big_r: Num,
    pub delta: Num,
    #[serde(rename = "bar_T_r")]
    pub bar_t_r: Num,
    #[serde(rename = "cost_at_bar_T")]
    pub cost_at_bar_t: Num,
    #[serde(rename = "bound_W_over_p0")]
    pub bound_w_over_p0: Num,
    #[serde(rename = "time_bound_BtU")]
    pub time_bound: Num,
    pub kl_violation_max: Num,
    pub margins: Margins,
    pub skipped_nonsmooth: usize,
    pub accepted_euler: bool,
    pub notes: Vec<String>,
}

impl Default for Report {
    fn default() -> Self {
        Report {
            stable: true,
            r: Num::NAN,
            big_r: Num::NAN,
            delta: Num::NAN,
            bar_t_r: Num::NAN,
            cost_at_bar_t: Num::NAN,
            bound_w_over_p0: Num::NAN,
            time_bound: Num::NAN,
            kl_violation_max: Num::NAN,
            margins: Margins { min: Num::NAN, mean: Num::NAN },
            skipped_nonsmooth: 0,
            accepted_euler: false,
            notes: Vec::new(),
        }
    }
}

impl Report {
    /// Records a check outcome; a failure clears `stable` and adds a note.
    pub fn check(&mut self, pass: bool, what: impl FnOnce() -> String) {
        if !pass {
            self.stable = false;
            self.notes.push(what());
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn emit_report_json(report: &Report, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json())?;
    Ok(())
}

/// CSV text with header `t,x0..,u0..,cost,dist,W` and one row per sample.
pub fn trajectory_csv(run: &SamplingRun) -> String {
    let first = &run.samples[0];
    let (n, m) = (first.state.len(), first.control.len());
    let mut out = String::from("t");
    for i in 0..n {
        let _ = write!(out, ",x{i}");
    }
    for i in 0..m {
        let _ = write!(out, ",u{i}");
    }
    out.push_str(",cost,dist,W\n");
    for s in &run.samples {
        let _ = write!(out, "{}", s.t);
        for v in s.state.iter().chain(&s.control) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{},{}", s.cost, s.dist, s.w);
    }
    out
}

pub fn emit_trajectory_csv(run: &SamplingRun, path: &Path) -> Result<()> {
    std::fs::write(path, trajectory_csv(run))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_numbers_become_strings() {
        let v = serde_json::to_string(&[Num(1.5), Num(f64::INFINITY), Num(f64::NAN), Num(f64::NEG_INFINITY)]).unwrap();
        assert_eq!(v, r#"[1.5,"inf","nan","-inf"]"#);
    }

    #[test]
    fn report_keys_in_order() {
        let text = Report::default().to_json();
        let keys = [
            "stable",
            "r",
            "R",
            "delta",
            "bar_T_r",
            "cost_at_bar_T",
            "bound_W_over_p0",
            "time_bound_BtU",
            "kl_violation_max",
            "margins",
            "skipped_nonsmooth",
            "accepted_euler",
            "notes",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(&format!("\n  \"{k}\":")).expect(k)).collect();
        assert!(pos.windows(2).all(|p| p[0] < p[1]));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v.as_object().unwrap().len(), keys.len());
    }
}
