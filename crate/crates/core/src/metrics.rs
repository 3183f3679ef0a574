//! Continual-detection metrics over a lower-triangular AP matrix.

use crate::error::{LabError, Result};
use serde::{Deserialize, Serialize};

/// `ap[i][j]` is the AP (percent) on task `j` after training task `i`,
/// for `j <= i`. Entries may be missing while a run is in progress or for
/// methods that only produce the final row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl ApMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            rows: (0..n).map(|i| vec![None; i + 1]).collect(),
        }
    }

    /// Builds a complete matrix from row slices; row `i` must hold `i + 1`
    /// values.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(LabError::Config(format!(
                    "row {i} needs {} entries, has {}",
                    i + 1,
                    r.len()
                )));
            }
            for (j, &x) in r.iter().enumerate() {
                m.set(i, j, x)?;
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, i: usize, j: usize, ap: f64) -> Result<()> {
        if j > i || i >= self.n() {
            return Err(LabError::Config(format!(
                "({i}, {j}) is outside the lower triangle"
            )));
        }
        if !(0.0..=100.0).contains(&ap) {
            return Err(LabError::Config(format!("AP {ap} outside [0, 100]")));
        }
        self.rows[i][j] = Some(ap);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i)?.get(j).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    fn row_mean(&self, i: usize) -> Result<f64> {
        let r = &self.rows[i];
        let mut s = 0.0;
        for (j, x) in r.iter().enumerate() {
            s += x.ok_or_else(|| LabError::UndefinedMetric(format!("AP[{i}][{j}] missing")))?;
        }
        Ok(s / r.len() as f64)
    }
}

fn require_nonempty(m: &ApMatrix) -> Result<()> {
    if m.n() == 0 {
        Err(LabError::UndefinedMetric("empty AP matrix".into()))
    } else {
        Ok(())
    }
}

/// Final average AP: mean of the last row.
pub fn fap(m: &ApMatrix) -> Result<f64> {
    require_nonempty(m)?;
    m.row_mean(m.n() - 1)
}

/// Cumulative average AP: mean over `i` of the mean of row `i`.
pub fn cap(m: &ApMatrix) -> Result<f64> {
    require_nonempty(m)?;
    let mut s = 0.0;
    for i in 0..m.n() {
        s += m.row_mean(i)?;
    }
    Ok(s / m.n() as f64)
}

/// Final forgetting percentage points: mean over `i < N` of
/// `AP[i][i] - AP[N][i]`.
pub fn ffp(m: &ApMatrix) -> Result<f64> {
    let n = m.n();
    if n < 2 {
        return Err(LabError::UndefinedMetric(
            "FFP needs at least two tasks".into(),
        ));
    }
    let mut s = 0.0;
    for i in 0..n - 1 {
        let diag = m
            .get(i, i)
            .ok_or_else(|| LabError::UndefinedMetric(format!("AP[{i}][{i}] missing")))?;
        let last = m
            .get(n - 1, i)
            .ok_or_else(|| LabError::UndefinedMetric(format!("AP[{}][{i}] missing", n - 1)))?;
        s += diag - last;
    }
    Ok(s / (n - 1) as f64)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
