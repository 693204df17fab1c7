//! Per-step and per-epoch metric records and their CSV encodings.

use crate::error::Result;
use std::fmt::Write as _;
use std::path::Path;

/// One optimizer step. In phase 2 the cycle column holds the cycle count
/// (one past the last phase-1 cycle) and expected equals actual.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub cycle: usize,
    pub tau: f32,
    pub r_w_target: f64,
    pub r_a_target: f64,
    pub expected_wcr: f64,
    pub actual_wcr: f64,
    pub j_task: f64,
    pub j_w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// 0 = pretrain, 1 = phase 1, 2 = phase 2.
    pub phase: u8,
    pub cycle: usize,
    pub mean_task_loss: f64,
    pub test_accuracy: f64,
}

/// Final scheme of one tensor (content of the scheme table).
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeRow {
    pub tensor: String,
    pub kind: &'static str,
    pub threshold: f32,
    pub bits: u8,
    pub delta: f32,
    pub signed: bool,
    pub numel: usize,
}

pub const STEP_HEADER: &str = "step,cycle,tau,r_w_target,r_a_target,expected_wcr,actual_wcr,j_task,j_w";
pub const EPOCH_HEADER: &str = "epoch,phase,cycle,mean_task_loss,test_accuracy";
pub const SCHEME_HEADER: &str = "tensor,kind,threshold,bits,delta,signed,numel";

pub fn steps_to_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::with_capacity(rows.len() * 64 + 64);
    out.push_str(STEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.cycle, r.tau, r.r_w_target, r.r_a_target, r.expected_wcr, r.actual_wcr, r.j_task, r.j_w
        );
    }
    out
}

pub fn epochs_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::new();
    out.push_str(EPOCH_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.phase, r.cycle, r.mean_task_loss, r.test_accuracy
        );
    }
    out
}

pub fn schemes_to_csv(rows: &[SchemeRow]) -> String {
    let mut out = String::new();
    out.push_str(SCHEME_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.tensor, r.kind, r.threshold, r.bits, r.delta, r.signed, r.numel
        );
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

/// Parse a metrics CSV produced by `steps_to_csv` (report command input).
pub fn parse_steps_csv(text: &str) -> Result<Vec<StepMetrics>> {
    let mut rows = Vec::new();
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != STEP_HEADER {
        return Err(crate::error::Error::invalid(format!(
            "unexpected metrics header: {header}"
        )));
    }
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(crate::error::Error::invalid(format!(
                "metrics row {} has {} fields",
                i + 2,
                f.len()
            )));
        }
        let parse_err = |what: &str| crate::error::Error::invalid(format!("metrics row {}: bad {what}", i + 2));
        rows.push(StepMetrics {
            step: f[0].parse().map_err(|_| parse_err("step"))?,
            cycle: f[1].parse().map_err(|_| parse_err("cycle"))?,
            tau: f[2].parse().map_err(|_| parse_err("tau"))?,
            r_w_target: f[3].parse().map_err(|_| parse_err("r_w_target"))?,
            r_a_target: f[4].parse().map_err(|_| parse_err("r_a_target"))?,
            expected_wcr: f[5].parse().map_err(|_| parse_err("expected_wcr"))?,
            actual_wcr: f[6].parse().map_err(|_| parse_err("actual_wcr"))?,
            j_task: f[7].parse().map_err(|_| parse_err("j_task"))?,
            j_w: f[8].parse().map_err(|_| parse_err("j_w"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_csv_roundtrip() {
        let rows = vec![
            StepMetrics {
                step: 1,
                cycle: 0,
                tau: 1.0,
                r_w_target: 4.0,
                r_a_target: 4.0,
                expected_wcr: 4.25,
                actual_wcr: 4.0,
                j_task: 2.5,
                j_w: 0.0,
            },
            StepMetrics {
                step: 2,
                cycle: 0,
                tau: 0.875,
                r_w_target: 5.0,
                r_a_target: 4.0,
                expected_wcr: 4.5,
                actual_wcr: 4.0,
                j_task: 2.25,
                j_w: 0.1,
            },
        ];
        let csv = steps_to_csv(&rows);
        let parsed = parse_steps_csv(&csv).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_steps_csv("nope\n1,2\n").is_err());
    }
}
