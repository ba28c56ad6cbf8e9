//! Core library for a two-axis wireless test positioner.
//!
//! * [`kinematics`] converts angles and rail distances to motor steps and
//!   plans trapezoidal step timings.
//! * [`scan`] produces the boustrophedon (θ, φ) measurement sequence as a
//!   resumable state machine.
//! * [`backend`] executes motion plans; [`backend::SimBackend`] simulates
//!   the motors.
//! * [`sources`] acquires samples at each position, including a simulated
//!   UWB ranging link.
//! * [`session`] checkpoints records and packages runs as ZIP archives.

pub mod backend;
pub mod kinematics;
pub mod scan;
pub mod session;
pub mod sources;

pub use backend::{
    AxesConfig, Axis, Backend, BackendError, BackendPose, SimBackend, SimBackendConfig, TimeMode,
};
pub use kinematics::{AxisConfig, AxisId, Direction, KinematicsError, MotionPlan, RailConfig};
pub use scan::{
    generate_plan, PlanCursor, PlanError, PlanStep, ScanConfig, ScanGrid, ScanPosition,
};
pub use session::{
    load_archive, MeasurementRecord, SessionConfig, SessionHandle, SessionMetadata, SessionStore,
    StoreError,
};
pub use sources::{
    Sample, Source, SourceConfig, SourceDescriptor, SourceError, SourceRegistry, UwbSourceConfig,
};
