//! Correlation and RMSE scoring, raw and after a least-squares third-order
//! polynomial mapping fitted per dataset.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

fn check_pairs(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite value in evaluation pairs".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!("correlation needs at least 3 pairs, got {}", pred.len())));
    }
    let (mp, mt) = (mean(pred), mean(truth));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp) * (p - mp);
        syy += (t - mt) * (t - mt);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::Empty("no evaluation pairs".into()));
    }
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// Plain RMSE in physical units.
pub fn acoustic_rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    rmse(pred, truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingKind {
    Cubic,
    /// Fewer than four distinct prediction values.
    Linear,
}

/// `y ≈ b0 + b1·u + b2·u² + b3·u³` with `u = (x − center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicMapping {
    pub kind: MappingKind,
    center: f64,
    scale: f64,
    b: [f64; 4],
    x_range: (f64, f64),
}

/// Solves the symmetric positive definite system `a·x = rhs` by Cholesky.
fn cholesky_solve<const N: usize>(a: [[f64; N]; N], rhs: [f64; N]) -> Option<[f64; N]> {
    let mut l = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; N];
    for i in 0..N {
        y[i] = (rhs[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        x[i] = (y[i] - (i + 1..N).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Least squares on the monomials `u^0..u^(N-1)` with unit-norm column scaling.
fn poly_lstsq<const N: usize>(u: &[f64], y: &[f64]) -> Option<[f64; N]> {
    let cols: Vec<[f64; N]> = u
        .iter()
        .map(|&ui| {
            let mut row = [1.0; N];
            for k in 1..N {
                row[k] = row[k - 1] * ui;
            }
            row
        })
        .collect();
    let mut norm = [0.0; N];
    for row in &cols {
        for k in 0..N {
            norm[k] += row[k] * row[k];
        }
    }
    let norm = norm.map(|n: f64| if n > 0.0 { n.sqrt() } else { 1.0 });
    let mut ata = [[0.0; N]; N];
    let mut aty = [0.0; N];
    for (row, &yi) in cols.iter().zip(y) {
        for i in 0..N {
            let ri = row[i] / norm[i];
            aty[i] += ri * yi;
            for j in 0..N {
                ata[i][j] += ri * row[j] / norm[j];
            }
        }
    }
    let z = cholesky_solve(ata, aty)?;
    let mut out = [0.0; N];
    for k in 0..N {
        out[k] = z[k] / norm[k];
    }
    Some(out)
}

fn distinct_count(x: &[f64]) -> usize {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v.len()
}

impl CubicMapping {
    /// Least-squares fit of `truth` on a cubic of `pred`.
    ///
    /// With fewer than four distinct predictions a linear fit is used; with a
    /// single distinct prediction the slope is zero and the intercept is the
    /// label mean.
    pub fn fit(pred: &[f64], truth: &[f64]) -> Result<Self> {
        check_pairs(pred, truth)?;
        if pred.is_empty() {
            return Err(Error::Empty("no evaluation pairs".into()));
        }
        let lo = pred.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let center = mean(pred);
        let spread = (pred.iter().map(|x| (x - center).powi(2)).sum::<f64>() / pred.len() as f64).sqrt();
        let scale = if spread > 0.0 { spread } else { 1.0 };
        let u: Vec<f64> = pred.iter().map(|x| (x - center) / scale).collect();
        let distinct = distinct_count(pred);
        let (kind, b) = if distinct >= 4 {
            let b = poly_lstsq::<4>(&u, truth)
                .ok_or_else(|| Error::Degenerate("singular cubic normal equations".into()))?;
            (MappingKind::Cubic, b)
        } else if distinct >= 2 {
            let b = poly_lstsq::<2>(&u, truth)
                .ok_or_else(|| Error::Degenerate("singular linear normal equations".into()))?;
            (MappingKind::Linear, [b[0], b[1], 0.0, 0.0])
        } else {
            (MappingKind::Linear, [mean(truth), 0.0, 0.0, 0.0])
        };
        Ok(Self {
            kind,
            center,
            scale,
            b,
            x_range: (lo, hi),
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.scale;
        self.b[0] + u * (self.b[1] + u * (self.b[2] + u * self.b[3]))
    }

    /// Coefficients `a0..a3` of the mapping as a polynomial in `x`.
    pub fn coefficients(&self) -> [f64; 4] {
        let (m, s) = (self.center, self.scale);
        const BINOM: [[f64; 4]; 4] = [
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 2.0, 1.0, 0.0],
            [1.0, 3.0, 3.0, 1.0],
        ];
        let mut a = [0.0; 4];
        for k in 0..4 {
            let bk = self.b[k] / s.powi(k as i32);
            for j in 0..=k {
                a[j] += bk * BINOM[k][j] * (-m).powi((k - j) as i32);
            }
        }
        a
    }

    /// Whether the mapping is monotone over the range of fitted predictions.
    pub fn is_monotone(&self) -> bool {
        let to_u = |x: f64| (x - self.center) / self.scale;
        let (ulo, uhi) = (to_u(self.x_range.0), to_u(self.x_range.1));
        let deriv = |u: f64| self.b[1] + 2.0 * self.b[2] * u + 3.0 * self.b[3] * u * u;
        let mut points = vec![deriv(ulo), deriv(uhi)];
        if self.b[3] != 0.0 {
            let uc = -self.b[2] / (3.0 * self.b[3]);
            if uc > ulo && uc < uhi {
                points.push(deriv(uc));
            }
        }
        let tol = 1e-12 * points.iter().map(|d| d.abs()).fold(0.0, f64::max);
        points.iter().all(|&d| d >= -tol) || points.iter().all(|&d| d <= tol)
    }
}

pub fn fit_cubic_mapping(pred: &[f64], truth: &[f64]) -> Result<CubicMapping> {
    CubicMapping::fit(pred, truth)
}

pub fn rmse_after_mapping(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let map = CubicMapping::fit(pred, truth)?;
    let mapped: Vec<f64> = pred.iter().map(|&x| map.apply(x)).collect();
    rmse(&mapped, truth)
}

/// Scores of one task on one dataset. Correlations are `None` when undefined
/// (fewer than three pairs or zero variance).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScores {
    pub dataset: String,
    pub task: String,
    pub n: usize,
    pub pcc_raw: Option<f64>,
    pub pcc_mapped: Option<f64>,
    pub rmse_raw: f64,
    pub rmse_mapped: f64,
    pub mapping_monotone: bool,
}

impl TaskScores {
    pub fn compute(dataset: &str, task: &str, pred: &[f64], truth: &[f64]) -> Result<Self> {
        let map = CubicMapping::fit(pred, truth)?;
        let mapped: Vec<f64> = pred.iter().map(|&x| map.apply(x)).collect();
        Ok(Self {
            dataset: dataset.to_string(),
            task: task.to_string(),
            n: pred.len(),
            pcc_raw: pearson(pred, truth).ok(),
            pcc_mapped: pearson(&mapped, truth).ok(),
            rmse_raw: rmse(pred, truth)?,
            rmse_mapped: rmse(&mapped, truth)?,
            mapping_monotone: map.is_monotone(),
        })
    }
}

pub const REPORT_HEADER: [&str; 8] = [
    "dataset",
    "task",
    "n",
    "pcc_raw",
    "pcc_mapped",
    "rmse_raw",
    "rmse_mapped",
    "mapping_monotone",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub rows: Vec<TaskScores>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EvalReport {
    pub fn get(&self, dataset: &str, task: &str) -> Option<&TaskScores> {
        self.rows.iter().find(|r| r.dataset == dataset && r.task == task)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.task.clone(),
                r.n.to_string(),
                opt(r.pcc_raw),
                opt(r.pcc_mapped),
                format!("{:.6}", r.rmse_raw),
                format!("{:.6}", r.rmse_mapped),
                r.mapping_monotone.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:<5} {:>6} {:>9} {:>10} {:>9} {:>11} {:>9}\n",
            "dataset", "task", "n", "pcc_raw", "pcc_mapped", "rmse_raw", "rmse_mapped", "monotone"
        );
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:<5} {:>6} {:>9} {:>10} {:>9.4} {:>11.4} {:>9}",
                r.dataset,
                r.task,
                r.n,
                cell(r.pcc_raw),
                cell(r.pcc_mapped),
                r.rmse_raw,
                r.rmse_mapped,
                if r.mapping_monotone { "yes" } else { "no" }
            );
        }
        s
    }
}
