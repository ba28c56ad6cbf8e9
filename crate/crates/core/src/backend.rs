//! Motor execution.
//!
//! [`Backend`] consumes timing-annotated step sequences, which is what a
//! pulse generator driving real stepper drivers needs. [`SimBackend`] is a
//! deterministic stand-in that keeps exact step bookkeeping.

use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{steps_to_mm, AxisConfig, AxisId, AxisState, MotionPlan, RailConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error(
        "hardware fault on {axis:?} after {steps_completed} of {steps_planned} steps: {message}"
    )]
    HardwareFault {
        axis: Axis,
        steps_completed: usize,
        steps_planned: usize,
        message: String,
    },
}

/// Every motor the positioner drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Theta,
    Phi,
    Rail,
}

impl From<AxisId> for Axis {
    fn from(id: AxisId) -> Self {
        match id {
            AxisId::Theta => Axis::Theta,
            AxisId::Phi => Axis::Phi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendPose {
    pub theta: f64,
    pub phi: f64,
    pub rail_mm: f64,
    pub moving: bool,
}

impl BackendPose {
    pub const HOME: BackendPose = BackendPose {
        theta: 0.0,
        phi: 0.0,
        rail_mm: 0.0,
        moving: false,
    };
}

/// Geometry of all three motors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxesConfig {
    pub theta: AxisConfig,
    pub phi: AxisConfig,
    pub rail: RailConfig,
}

impl Default for AxesConfig {
    fn default() -> Self {
        Self {
            theta: AxisConfig::default_for(AxisId::Theta),
            phi: AxisConfig::default_for(AxisId::Phi),
            rail: RailConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    #[default]
    Instant,
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub fail_after_n_moves: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimBackendConfig {
    pub time_mode: TimeMode,
    pub fault_injection: Option<FaultInjection>,
}

/// One executed (or partially executed) move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveCommand {
    pub axis: Axis,
    pub steps: i64,
}

pub trait Backend: Send + Sync {
    /// Runs `plan` on `axis`. Callers serialize calls to `execute`.
    fn execute(&self, plan: &MotionPlan, axis: Axis) -> Result<BackendPose, BackendError>;

    fn home(&self) -> BackendPose;

    /// Snapshot of the current pose; safe to call while a move is in
    /// flight.
    fn pose(&self) -> BackendPose;

    fn axes(&self) -> &AxesConfig;
}

#[derive(Debug, Default)]
struct SimState {
    theta_steps: i64,
    phi_steps: i64,
    rail_steps: i64,
    moving: bool,
    moves: u64,
    log: Vec<MoveCommand>,
}

#[derive(Debug)]
pub struct SimBackend {
    config: SimBackendConfig,
    axes: AxesConfig,
    state: Mutex<SimState>,
}

impl SimBackend {
    pub fn new(config: SimBackendConfig, axes: AxesConfig) -> Self {
        Self {
            config,
            axes,
            state: Mutex::new(SimState::default()),
        }
    }

    pub fn instant() -> Self {
        Self::new(SimBackendConfig::default(), AxesConfig::default())
    }

    /// Every move executed since construction, in order.
    pub fn command_log(&self) -> Vec<MoveCommand> {
        self.lock().log.clone()
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn snapshot(&self, s: &SimState) -> BackendPose {
        BackendPose {
            theta: AxisState::from_steps(s.theta_steps, &self.axes.theta).angle,
            phi: AxisState::from_steps(s.phi_steps, &self.axes.phi).angle,
            rail_mm: steps_to_mm(s.rail_steps, &self.axes.rail),
            moving: s.moving,
        }
    }

    fn apply(s: &mut SimState, axis: Axis, steps: i64) {
        match axis {
            Axis::Theta => s.theta_steps += steps,
            Axis::Phi => s.phi_steps += steps,
            Axis::Rail => s.rail_steps += steps,
        }
        if steps != 0 {
            s.log.push(MoveCommand { axis, steps });
        }
    }
}

impl Backend for SimBackend {
    fn execute(&self, plan: &MotionPlan, axis: Axis) -> Result<BackendPose, BackendError> {
        let faulted = {
            let mut s = self.lock();
            s.moves += 1;
            let faulted = self
                .config
                .fault_injection
                .is_some_and(|f| s.moves > f.fail_after_n_moves);
            if !faulted {
                s.moving = !plan.is_empty();
            }
            faulted
        };

        if faulted {
            // The driver stalls halfway through the move.
            let done = plan.step_count() / 2;
            let mut s = self.lock();
            Self::apply(&mut s, axis, plan.direction.sign() * done as i64);
            return Err(BackendError::HardwareFault {
                axis,
                steps_completed: done,
                steps_planned: plan.step_count(),
                message: "injected fault".into(),
            });
        }

        if self.config.time_mode == TimeMode::Realtime && !plan.is_empty() {
            std::thread::sleep(Duration::from_micros(plan.duration_us()));
        }

        let mut s = self.lock();
        Self::apply(&mut s, axis, plan.signed_steps());
        s.moving = false;
        Ok(self.snapshot(&s))
    }

    fn home(&self) -> BackendPose {
        let mut s = self.lock();
        s.theta_steps = 0;
        s.phi_steps = 0;
        s.rail_steps = 0;
        s.moving = false;
        self.snapshot(&s)
    }

    fn pose(&self) -> BackendPose {
        let s = self.lock();
        self.snapshot(&s)
    }

    fn axes(&self) -> &AxesConfig {
        &self.axes
    }
}
