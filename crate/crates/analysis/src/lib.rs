//! Statistics over scan archives: pooled and per-position ranging
//! statistics, fixed-φ sweeps, θ×φ mean grids and run-to-run comparison.

pub mod cli;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use positioner_core::scan::{centi_to_degrees, degrees_to_centi};
use positioner_core::session::{load_archive, MeasurementRecord, SessionConfig, StoreError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("archive contains no samples")]
    Empty,
    #[error("{0}")]
    Range(String),
    #[error("scan grids differ: {0}")]
    Shape(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A loaded archive.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: SessionConfig,
    pub records: Vec<MeasurementRecord>,
}

impl Run {
    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let (config, records) = load_archive(path)?;
        Ok(Self { config, records })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionStats {
    pub index: usize,
    pub theta: f64,
    pub phi: f64,
    pub mean_cm: f64,
    pub std_cm: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub overall_mean_cm: f64,
    pub overall_std_cm: f64,
    pub total_samples: usize,
    /// Plan order.
    pub per_position: Vec<PositionStats>,
}

impl RunStats {
    pub fn position(&self, theta: f64, phi: f64) -> Option<&PositionStats> {
        let key = (degrees_to_centi(theta), degrees_to_centi(phi));
        self.per_position
            .iter()
            .find(|p| (degrees_to_centi(p.theta), degrees_to_centi(p.phi)) == key)
    }
}

/// Mean and sample (n−1) standard deviation. A single value has std 0.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64, usize)> {
    let (sum, n) = values
        .clone()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let std = if n > 1 {
        let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some((mean, std, n))
}

pub fn stats(records: &[MeasurementRecord]) -> Result<RunStats, AnalysisError> {
    let pooled = records
        .iter()
        .flat_map(|r| r.samples.iter().map(|s| s.value));
    let (overall_mean_cm, overall_std_cm, total_samples) =
        mean_std(pooled).ok_or(AnalysisError::Empty)?;
    let per_position = records
        .iter()
        .filter_map(|r| {
            let (mean_cm, std_cm, n) = mean_std(r.samples.iter().map(|s| s.value))?;
            Some(PositionStats {
                index: r.position.index,
                theta: r.position.theta,
                phi: r.position.phi,
                mean_cm,
                std_cm,
                n,
            })
        })
        .collect();
    Ok(RunStats {
        overall_mean_cm,
        overall_std_cm,
        total_samples,
        per_position,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub mean_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSeries {
    pub fixed_phi: f64,
    /// Strictly increasing θ.
    pub points: Vec<SweepPoint>,
}

/// Per-θ mean range with the arm held at `fixed_phi`.
pub fn sweep(run: &Run, fixed_phi: f64) -> Result<SweepSeries, AnalysisError> {
    let grid = run
        .config
        .scan
        .grid()
        .map_err(|e| AnalysisError::Range(e.to_string()))?;
    let phi_cd = degrees_to_centi(fixed_phi);
    let on_grid = (fixed_phi * 100.0 - phi_cd as f64).abs() < 1e-6
        && (0..=grid.phi_extent).contains(&phi_cd)
        && phi_cd % grid.phi_step == 0;
    if !on_grid {
        return Err(AnalysisError::Range(format!(
            "φ = {fixed_phi}° is not on the {}° scan grid",
            centi_to_degrees(grid.phi_step)
        )));
    }
    let mut by_theta: BTreeMap<i64, f64> = BTreeMap::new();
    for r in &run.records {
        if r.position.phi_centi() == phi_cd {
            if let Some((mean, _, _)) = mean_std(r.samples.iter().map(|s| s.value)) {
                by_theta.insert(r.position.theta_centi(), mean);
            }
        }
    }
    Ok(SweepSeries {
        fixed_phi: centi_to_degrees(phi_cd),
        points: by_theta
            .into_iter()
            .map(|(t, mean_cm)| SweepPoint {
                theta: centi_to_degrees(t),
                mean_cm,
            })
            .collect(),
    })
}

/// Mean range on the full θ × φ grid. Cells without data are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanGrid {
    pub run_id: String,
    pub theta_deg: Vec<f64>,
    pub phi_deg: Vec<f64>,
    /// `mean_cm[i][j]` is the mean at (`theta_deg[i]`, `phi_deg[j]`).
    pub mean_cm: Vec<Vec<Option<f64>>>,
}

impl MeanGrid {
    pub fn filled(&self) -> usize {
        self.mean_cm
            .iter()
            .flatten()
            .filter(|c| c.is_some())
            .count()
    }

    /// One row per θ: `theta_deg,phi_<φ0>,phi_<φ1>,…`; empty cells for
    /// missing data.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_deg");
        for phi in &self.phi_deg {
            let _ = write!(out, ",phi_{phi}");
        }
        out.push('\n');
        for (theta, row) in self.theta_deg.iter().zip(&self.mean_cm) {
            let _ = write!(out, "{theta}");
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn grid(run: &Run) -> Result<MeanGrid, AnalysisError> {
    let g = run
        .config
        .scan
        .grid()
        .map_err(|e| AnalysisError::Range(e.to_string()))?;
    let thetas: Vec<i64> = (0..g.columns() as i64).map(|i| i * g.theta_step).collect();
    let phis: Vec<i64> = (0..g.rows() as i64).map(|j| j * g.phi_step).collect();
    let mut mean_cm = vec![vec![None; phis.len()]; thetas.len()];
    for r in &run.records {
        let i = (r.position.theta_centi() / g.theta_step) as usize;
        let j = (r.position.phi_centi() / g.phi_step) as usize;
        if let Some((mean, _, _)) = mean_std(r.samples.iter().map(|s| s.value)) {
            if let Some(cell) = mean_cm.get_mut(i).and_then(|row| row.get_mut(j)) {
                *cell = Some(mean);
            }
        }
    }
    Ok(MeanGrid {
        run_id: run.config.run_id.clone(),
        theta_deg: thetas.into_iter().map(centi_to_degrees).collect(),
        phi_deg: phis.into_iter().map(centi_to_degrees).collect(),
        mean_cm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionDelta {
    pub index: usize,
    pub theta: f64,
    pub phi: f64,
    /// mean(a) − mean(b)
    pub delta_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub max_abs_mean_diff_cm: f64,
    /// overall mean(a) − overall mean(b)
    pub overall_mean_diff_cm: f64,
    pub per_position_deltas: Vec<PositionDelta>,
}

/// Per-position mean differences between two runs on the same grid.
/// Positions present in only one archive are skipped.
pub fn compare(a: &Run, b: &Run) -> Result<Comparison, AnalysisError> {
    let (sa, sb) = (&a.config.scan, &b.config.scan);
    let shape = |s: &positioner_core::ScanConfig| {
        [s.theta_step, s.phi_step, s.theta_extent, s.phi_extent].map(degrees_to_centi)
    };
    if shape(sa) != shape(sb) {
        return Err(AnalysisError::Shape(format!(
            "{}°×{}° vs {}°×{}°",
            sa.theta_step, sa.phi_step, sb.theta_step, sb.phi_step
        )));
    }
    let stats_a = stats(&a.records)?;
    let stats_b = stats(&b.records)?;
    let b_by_index: BTreeMap<usize, &PositionStats> =
        stats_b.per_position.iter().map(|p| (p.index, p)).collect();
    let per_position_deltas: Vec<PositionDelta> = stats_a
        .per_position
        .iter()
        .filter_map(|pa| {
            let pb = b_by_index.get(&pa.index)?;
            Some(PositionDelta {
                index: pa.index,
                theta: pa.theta,
                phi: pa.phi,
                delta_cm: pa.mean_cm - pb.mean_cm,
            })
        })
        .collect();
    let max_abs_mean_diff_cm = per_position_deltas
        .iter()
        .map(|d| d.delta_cm.abs())
        .fold(0.0, f64::max);
    Ok(Comparison {
        max_abs_mean_diff_cm,
        overall_mean_diff_cm: stats_a.overall_mean_cm - stats_b.overall_mean_cm,
        per_position_deltas,
    })
}
