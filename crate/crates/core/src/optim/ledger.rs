//! Per-iteration run records and their CSV form.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::reduced::Metrics;

/// Header of the ledger CSV.
pub const LEDGER_HEADER: &str =
    "iter,level,work_units,train_loss,train_acc,val_loss,val_acc,delta,step_norm,inner_iters,inner_grad_norm";

/// One ledger row. Fields beyond the CSV columns are kept for auditing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LedgerRow {
    pub iter: usize,
    pub level: usize,
    /// Cumulative sample passes.
    pub passes: u64,
    pub metrics: Metrics,
    /// Objective value including regularizers.
    pub objective: f64,
    /// Trust-region radius after the iteration.
    pub delta: Option<f64>,
    pub step_norm: Option<f64>,
    /// Radius the accepted step was computed for.
    pub radius: Option<f64>,
    /// Objective decrease of the accepted step.
    pub actual_reduction: Option<f64>,
    /// Largest relative radius error of any constrained λ search, outer or inner.
    pub lambda_error: Option<f64>,
    /// Krylov rank of the curvature build.
    pub rank: Option<usize>,
    /// Rejected trial points in this iteration.
    pub rejected: usize,
    /// Objective evaluations performed by a line search.
    pub evaluations: usize,
}

/// Append-only record of a run; work units are `passes / n_train`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub n_train: usize,
    pub rows: Vec<LedgerRow>,
}

impl RunLedger {
    pub fn new(n_train: usize) -> Self {
        Self { n_train, rows: Vec::new() }
    }

    pub fn work_units(&self, passes: u64) -> f64 {
        passes as f64 / self.n_train as f64
    }

    pub fn push(&mut self, row: LedgerRow) {
        if let Some(last) = self.rows.last() {
            debug_assert!(row.passes >= last.passes, "work units must not decrease");
        }
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&LedgerRow> {
        self.rows.last()
    }

    pub fn total_passes(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.passes)
    }

    pub fn total_work_units(&self) -> f64 {
        self.work_units(self.total_passes())
    }

    /// Row indices where a new level begins.
    pub fn level_boundaries(&self) -> Vec<usize> {
        self.rows.windows(2).enumerate().filter(|(_, w)| w[0].level != w[1].level).map(|(i, _)| i + 1).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LEDGER_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{},{},{},{},{},{},{:e}",
                r.iter,
                r.level,
                self.work_units(r.passes),
                m.train_loss,
                opt(m.train_acc),
                opt(m.val_loss),
                opt(m.val_acc),
                opt(r.delta),
                opt(r.step_norm),
                m.inner_iters,
                m.inner_grad_norm
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut l = RunLedger::new(4);
        l.push(LedgerRow { iter: 0, passes: 8, ..Default::default() });
        l.push(LedgerRow {
            iter: 1,
            level: 1,
            passes: 10,
            delta: Some(0.5),
            metrics: Metrics { train_acc: Some(1.0), ..Default::default() },
            ..Default::default()
        });
        let csv = l.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LEDGER_HEADER);
        assert_eq!(lines[1], "0,0,2e0,0e0,,,,,,0,0e0");
        assert_eq!(lines[2], "1,1,2.5e0,0e0,1e0,,,5e-1,,0,0e0");
        assert_eq!(l.level_boundaries(), vec![1]);
        assert_eq!(l.total_work_units(), 2.5);
    }
}
