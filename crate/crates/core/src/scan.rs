//! Spherical scan planning.
//!
//! The scan is a boustrophedon over (θ, φ): starting at (0, 0) with the arm
//! moving up, each position is gathered, φ advances by one step, and when a
//! column extreme has been gathered θ advances and the arm direction flips.
//! The run ends once θ reaches the θ extent.
//!
//! Angles are handled internally as integer centidegrees, which is exactly
//! the positioner's resolution, so the equality tests at column extremes are
//! exact.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid scan configuration: {0}")]
    Config(String),
    #[error("checkpoint is not a plan prefix: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub theta_step: f64,
    pub phi_step: f64,
    #[serde(default = "default_theta_extent")]
    pub theta_extent: f64,
    #[serde(default = "default_phi_extent")]
    pub phi_extent: f64,
    pub samples_per_position: u32,
}

fn default_theta_extent() -> f64 {
    360.0
}

fn default_phi_extent() -> f64 {
    180.0
}

impl ScanConfig {
    pub fn new(theta_step: f64, phi_step: f64, samples_per_position: u32) -> Self {
        Self {
            theta_step,
            phi_step,
            theta_extent: default_theta_extent(),
            phi_extent: default_phi_extent(),
            samples_per_position,
        }
    }

    pub fn grid(&self) -> Result<ScanGrid, PlanError> {
        let theta_step = centidegrees(self.theta_step, "theta_step")?;
        let phi_step = centidegrees(self.phi_step, "phi_step")?;
        let theta_extent = centidegrees(self.theta_extent, "theta_extent")?;
        let phi_extent = centidegrees(self.phi_extent, "phi_extent")?;
        if theta_step <= 0 || phi_step <= 0 {
            return Err(PlanError::Config("step sizes must be positive".into()));
        }
        if theta_extent <= 0 || theta_extent > 36000 {
            return Err(PlanError::Config("theta_extent must be in (0, 360]".into()));
        }
        if phi_extent <= 0 || phi_extent > 36000 {
            return Err(PlanError::Config("phi_extent must be in (0, 360]".into()));
        }
        if theta_extent % theta_step != 0 {
            return Err(PlanError::Config(format!(
                "theta_step {} does not divide theta_extent {}",
                self.theta_step, self.theta_extent
            )));
        }
        if phi_extent % phi_step != 0 {
            return Err(PlanError::Config(format!(
                "phi_step {} does not divide phi_extent {}",
                self.phi_step, self.phi_extent
            )));
        }
        if self.samples_per_position == 0 {
            return Err(PlanError::Config(
                "samples_per_position must be at least 1".into(),
            ));
        }
        Ok(ScanGrid {
            theta_step,
            phi_step,
            theta_extent,
            phi_extent,
        })
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        self.grid().map(|_| ())
    }
}

/// Converts degrees to integer centidegrees, rejecting values that are not
/// on the 0.01° lattice.
fn centidegrees(deg: f64, field: &str) -> Result<i64, PlanError> {
    if !deg.is_finite() {
        return Err(PlanError::Config(format!("{field} must be finite")));
    }
    let cd = (deg * 100.0).round();
    if (deg * 100.0 - cd).abs() > 1e-6 {
        return Err(PlanError::Config(format!(
            "{field} = {deg} is not a multiple of 0.01°"
        )));
    }
    Ok(cd as i64)
}

pub fn centi_to_degrees(cd: i64) -> f64 {
    cd as f64 / 100.0
}

pub fn degrees_to_centi(deg: f64) -> i64 {
    (deg * 100.0).round() as i64
}

/// A validated scan grid in centidegrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanGrid {
    pub theta_step: i64,
    pub phi_step: i64,
    pub theta_extent: i64,
    pub phi_extent: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPosition {
    pub index: usize,
    pub theta: f64,
    pub phi: f64,
}

impl ScanPosition {
    pub fn theta_centi(&self) -> i64 {
        degrees_to_centi(self.theta)
    }

    pub fn phi_centi(&self) -> i64 {
        degrees_to_centi(self.phi)
    }
}

/// Mutable state of the scan loop: the pose to gather next and the arm
/// direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanCursor {
    pub theta_cd: i64,
    pub phi_cd: i64,
    pub arm_up: bool,
    pub next_index: usize,
}

impl PlanCursor {
    pub fn initial() -> Self {
        Self {
            theta_cd: 0,
            phi_cd: 0,
            arm_up: true,
            next_index: 0,
        }
    }

    pub fn at(theta: f64, phi: f64, arm_up: bool, next_index: usize) -> Self {
        Self {
            theta_cd: degrees_to_centi(theta),
            phi_cd: degrees_to_centi(phi),
            arm_up,
            next_index,
        }
    }

    pub fn theta(&self) -> f64 {
        centi_to_degrees(self.theta_cd)
    }

    pub fn phi(&self) -> f64 {
        centi_to_degrees(self.phi_cd)
    }
}

impl Default for PlanCursor {
    fn default() -> Self {
        Self::initial()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanStep {
    Position(ScanPosition),
    Done,
}

impl ScanGrid {
    pub fn columns(&self) -> usize {
        (self.theta_extent / self.theta_step) as usize
    }

    pub fn rows(&self) -> usize {
        (self.phi_extent / self.phi_step) as usize + 1
    }

    pub fn len(&self) -> usize {
        self.columns() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_done(&self, cursor: &PlanCursor) -> bool {
        cursor.theta_cd >= self.theta_extent
    }

    /// Emits the position under the cursor and advances it.
    pub fn next_position(&self, cursor: &PlanCursor) -> (PlanStep, PlanCursor) {
        if self.is_done(cursor) {
            return (PlanStep::Done, *cursor);
        }
        let position = ScanPosition {
            index: cursor.next_index,
            theta: centi_to_degrees(cursor.theta_cd),
            phi: centi_to_degrees(cursor.phi_cd),
        };
        let mut next = *cursor;
        next.next_index += 1;
        let at_extreme = (cursor.arm_up && cursor.phi_cd == self.phi_extent)
            || (!cursor.arm_up && cursor.phi_cd == 0);
        if at_extreme {
            next.theta_cd += self.theta_step;
            next.arm_up = !cursor.arm_up;
        } else if cursor.arm_up {
            next.phi_cd += self.phi_step;
        } else {
            next.phi_cd -= self.phi_step;
        }
        (PlanStep::Position(position), next)
    }

    pub fn iter(&self) -> PlanIter {
        PlanIter {
            grid: *self,
            cursor: PlanCursor::initial(),
        }
    }

    /// Cursor whose next emission is plan position `completed`.
    pub fn resume_at(&self, completed: usize) -> Result<PlanCursor, PlanError> {
        if completed > self.len() {
            return Err(PlanError::Checkpoint(format!(
                "{completed} completed positions exceeds plan length {}",
                self.len()
            )));
        }
        let mut cursor = PlanCursor::initial();
        for _ in 0..completed {
            cursor = self.next_position(&cursor).1;
        }
        Ok(cursor)
    }
}

pub struct PlanIter {
    grid: ScanGrid,
    cursor: PlanCursor,
}

impl PlanIter {
    pub fn cursor(&self) -> PlanCursor {
        self.cursor
    }
}

impl Iterator for PlanIter {
    type Item = ScanPosition;

    fn next(&mut self) -> Option<ScanPosition> {
        match self.grid.next_position(&self.cursor) {
            (PlanStep::Position(p), next) => {
                self.cursor = next;
                Some(p)
            }
            (PlanStep::Done, _) => None,
        }
    }
}

pub fn generate_plan(cfg: &ScanConfig) -> Result<Vec<ScanPosition>, PlanError> {
    Ok(cfg.grid()?.iter().collect())
}

pub fn next_position(
    cursor: &PlanCursor,
    cfg: &ScanConfig,
) -> Result<(PlanStep, PlanCursor), PlanError> {
    Ok(cfg.grid()?.next_position(cursor))
}

/// Rebuilds the cursor after the positions in `completed`, which must be a
/// prefix `{0, …, k−1}` of the plan.
pub fn resume_cursor(
    completed: &BTreeSet<usize>,
    cfg: &ScanConfig,
) -> Result<PlanCursor, PlanError> {
    let k = completed.len();
    if let Some(&last) = completed.iter().next_back() {
        if last != k - 1 {
            let missing = (0..k).find(|i| !completed.contains(i)).unwrap_or(k);
            return Err(PlanError::Checkpoint(format!(
                "position {missing} missing before completed position {last}"
            )));
        }
    }
    cfg.grid()?.resume_at(k)
}
