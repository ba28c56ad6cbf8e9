//! Angle/step and distance/step conversion for the positioner axes, plus
//! trapezoidal step-timing profiles for moves.
//!
//! All conversions round ties half-away-from-zero. Step timings are whole
//! microseconds.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("{value} is outside the allowed range [{min}, {max}]")]
    Range { value: f64, min: f64, max: f64 },
    #[error("invalid axis configuration: {0}")]
    Config(String),
}

/// The two rotation axes. Theta is the base, Phi is the arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisId {
    Theta,
    Phi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Increasing step count.
    Cw,
    /// Decreasing step count.
    Ccw,
}

impl Direction {
    pub fn sign(self) -> i64 {
        match self {
            Direction::Cw => 1,
            Direction::Ccw => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisConfig {
    pub axis_id: AxisId,
    pub degrees_per_step: f64,
    pub min_angle: f64,
    pub max_angle: f64,
    /// degrees / second
    pub max_velocity: f64,
    /// degrees / second²
    pub acceleration: f64,
    /// Full-circle axes accept any finite angle; commanded poses are
    /// normalized into [0, 360).
    pub full_circle: bool,
}

impl AxisConfig {
    pub fn default_for(axis_id: AxisId) -> Self {
        Self {
            axis_id,
            degrees_per_step: 0.01,
            min_angle: 0.0,
            max_angle: 360.0,
            max_velocity: 30.0,
            acceleration: 60.0,
            full_circle: true,
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.degrees_per_step > 0.0 && self.degrees_per_step.is_finite()) {
            return Err(KinematicsError::Config(
                "degrees_per_step must be positive".into(),
            ));
        }
        if self.min_angle.partial_cmp(&self.max_angle) != Some(Ordering::Less) {
            return Err(KinematicsError::Config(
                "min_angle must be below max_angle".into(),
            ));
        }
        if !(self.max_velocity > 0.0 && self.acceleration > 0.0) {
            return Err(KinematicsError::Config(
                "max_velocity and acceleration must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of steps in one full revolution, when 360° is a whole number
    /// of steps.
    pub fn steps_per_revolution(&self) -> Option<i64> {
        exact_ratio(360.0, self.degrees_per_step)
    }

    /// Maps an angle to the canonical [0, 360) representative.
    pub fn normalize(&self, angle: f64) -> f64 {
        let a = angle.rem_euclid(360.0);
        // rem_euclid can return 360.0 for tiny negative inputs
        if a >= 360.0 {
            0.0
        } else {
            a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RailConfig {
    pub mm_per_step: f64,
    pub travel_min: f64,
    pub travel_max: f64,
    /// mm / second
    pub max_velocity: f64,
    /// mm / second²
    pub acceleration: f64,
}

impl Default for RailConfig {
    fn default() -> Self {
        Self {
            mm_per_step: 0.04,
            travel_min: 0.0,
            travel_max: 1000.0,
            max_velocity: 20.0,
            acceleration: 50.0,
        }
    }
}

impl RailConfig {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.mm_per_step > 0.0 && self.mm_per_step.is_finite()) {
            return Err(KinematicsError::Config(
                "mm_per_step must be positive".into(),
            ));
        }
        if self.travel_min.partial_cmp(&self.travel_max) != Some(Ordering::Less) {
            return Err(KinematicsError::Config(
                "travel_min must be below travel_max".into(),
            ));
        }
        if !(self.max_velocity > 0.0 && self.acceleration > 0.0) {
            return Err(KinematicsError::Config(
                "max_velocity and acceleration must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Live pose of one rotation axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisState {
    pub angle: f64,
    pub step_position: i64,
}

impl AxisState {
    pub fn from_steps(step_position: i64, cfg: &AxisConfig) -> Self {
        let steps = match cfg.steps_per_revolution() {
            Some(rev) if cfg.full_circle => step_position.rem_euclid(rev),
            _ => step_position,
        };
        Self {
            angle: steps_to_angle(steps, cfg),
            step_position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionPlan {
    pub direction: Direction,
    /// Inter-step delays in microseconds, one per step.
    pub step_intervals: Vec<u32>,
}

impl MotionPlan {
    pub fn empty() -> Self {
        Self {
            direction: Direction::Cw,
            step_intervals: Vec::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_intervals.is_empty()
    }

    /// Signed step delta this plan realizes.
    pub fn signed_steps(&self) -> i64 {
        self.direction.sign() * self.step_intervals.len() as i64
    }

    pub fn duration_us(&self) -> u64 {
        self.step_intervals.iter().map(|&d| u64::from(d)).sum()
    }
}

/// `numerator / denominator` as an integer when it is one (within float
/// noise).
fn exact_ratio(numerator: f64, denominator: f64) -> Option<i64> {
    let q = numerator / denominator;
    let r = q.round();
    ((q - r).abs() < 1e-9 * r.abs().max(1.0)).then_some(r as i64)
}

/// Rounds `value / resolution` to the nearest integer, ties away from zero.
///
/// Quotients within 1e-9 of a half-integer are treated as exact ties, so
/// decimal inputs like 0.02 / 0.04 are not at the mercy of binary
/// representation.
fn quantize(value: f64, resolution: f64) -> i64 {
    let q = value / resolution;
    let snapped = (q * 2.0).round() / 2.0;
    let q = if (q - snapped).abs() < 1e-9 {
        snapped
    } else {
        q
    };
    q.round() as i64
}

/// `steps * resolution`, computed as a division when the resolution is the
/// reciprocal of an integer so that decimal angles come out correctly
/// rounded.
fn dequantize(steps: i64, resolution: f64) -> f64 {
    match exact_ratio(1.0, resolution) {
        Some(per_unit) => steps as f64 / per_unit as f64,
        None => steps as f64 * resolution,
    }
}

pub fn angle_to_steps(angle: f64, cfg: &AxisConfig) -> Result<i64, KinematicsError> {
    let in_range = if cfg.full_circle {
        angle.is_finite()
    } else {
        angle >= cfg.min_angle && angle <= cfg.max_angle
    };
    if !in_range {
        return Err(KinematicsError::Range {
            value: angle,
            min: cfg.min_angle,
            max: cfg.max_angle,
        });
    }
    Ok(quantize(angle, cfg.degrees_per_step))
}

pub fn steps_to_angle(steps: i64, cfg: &AxisConfig) -> f64 {
    dequantize(steps, cfg.degrees_per_step)
}

pub fn mm_to_steps(distance: f64, cfg: &RailConfig) -> Result<i64, KinematicsError> {
    if !(distance >= cfg.travel_min && distance <= cfg.travel_max) {
        return Err(KinematicsError::Range {
            value: distance,
            min: cfg.travel_min,
            max: cfg.travel_max,
        });
    }
    Ok(quantize(distance, cfg.mm_per_step))
}

pub fn steps_to_mm(steps: i64, cfg: &RailConfig) -> f64 {
    dequantize(steps, cfg.mm_per_step)
}

/// Plans a rotation from `from` to `to` along the signed delta.
pub fn plan_move(from: f64, to: f64, cfg: &AxisConfig) -> Result<MotionPlan, KinematicsError> {
    let delta = angle_to_steps(to, cfg)? - angle_to_steps(from, cfg)?;
    Ok(plan_steps(
        delta,
        cfg.degrees_per_step,
        cfg.max_velocity,
        cfg.acceleration,
    ))
}

pub fn plan_rail_move(from: f64, to: f64, cfg: &RailConfig) -> Result<MotionPlan, KinematicsError> {
    let delta = mm_to_steps(to, cfg)? - mm_to_steps(from, cfg)?;
    Ok(plan_steps(
        delta,
        cfg.mm_per_step,
        cfg.max_velocity,
        cfg.acceleration,
    ))
}

/// Builds the step timing for a move of `delta` steps.
///
/// Step `i` of `n` sits `k = min(i, n - 1 - i)` steps from the nearer end of
/// the move. Its delay is the constant-acceleration interval
/// `sqrt(2(k+1)/a) - sqrt(2k/a)`, floored at the cruise delay `1/v`. This
/// gives a symmetric trapezoid that collapses to a triangle when the move is
/// too short to reach cruise speed.
pub fn plan_steps(delta: i64, step_size: f64, max_velocity: f64, acceleration: f64) -> MotionPlan {
    let direction = if delta < 0 {
        Direction::Ccw
    } else {
        Direction::Cw
    };
    let n = delta.unsigned_abs() as usize;
    if n == 0 {
        return MotionPlan::empty();
    }

    let accel_steps = acceleration / step_size;
    let cruise_us = (1e6 * step_size / max_velocity).round().max(1.0);
    let ramp_us = |k: usize| -> f64 {
        let k = k as f64;
        1e6 * ((2.0 * (k + 1.0) / accel_steps).sqrt() - (2.0 * k / accel_steps).sqrt())
    };

    let half = n.div_ceil(2);
    let ramp: Vec<u32> = (0..half)
        .map(|k| {
            let d = ramp_us(k).round().max(cruise_us);
            d.min(u32::MAX as f64) as u32
        })
        .collect();

    let step_intervals = (0..n).map(|i| ramp[i.min(n - 1 - i)]).collect();
    MotionPlan {
        direction,
        step_intervals,
    }
}
