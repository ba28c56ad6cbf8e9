//! Measurement sources.
//!
//! A source acquires samples from the device under test at each scan
//! position. Sources are registered by name together with a flat config
//! schema; the registry validates configs before constructing a source.
//!
//! Two sources are built in: `sim-uwb`, a simulated two-way-ranging link
//! whose path can be occluded by the positioner's tower, and `constant`,
//! which returns a fixed value.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::scan::ScanPosition;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("invalid source config: {0}")]
    Config(String),
    #[error("acquisition failed: {0}")]
    Acquisition(String),
}

/// Flat key-value source configuration.
pub type SourceConfig = Map<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Monotonic microseconds.
    pub timestamp_us: u64,
    /// Distance in cm.
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Float,
    Integer,
    Bool,
    String,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FieldKind::Float => "float",
            FieldKind::Integer => "integer",
            FieldKind::Bool => "bool",
            FieldKind::String => "string",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// `None` marks a required field.
    pub default: Option<Value>,
}

impl FieldSpec {
    pub fn required(name: &str, kind: FieldKind) -> Self {
        Self {
            name: name.into(),
            kind,
            default: None,
        }
    }

    pub fn optional(name: &str, kind: FieldKind, default: impl Into<Value>) -> Self {
        Self {
            name: name.into(),
            kind,
            default: Some(default.into()),
        }
    }

    fn accepts(&self, v: &Value) -> bool {
        match self.kind {
            FieldKind::Float => v.is_number(),
            FieldKind::Integer => v.is_u64() || v.is_i64(),
            FieldKind::Bool => v.is_boolean(),
            FieldKind::String => v.is_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub name: String,
    pub config_schema: Vec<FieldSpec>,
}

impl SourceDescriptor {
    /// Checks `config` against the schema and fills in defaults.
    pub fn validate(&self, config: &SourceConfig) -> Result<SourceConfig, SourceError> {
        for key in config.keys() {
            if !self.config_schema.iter().any(|f| &f.name == key) {
                return Err(SourceError::Config(format!(
                    "unknown field '{key}' for source '{}'",
                    self.name
                )));
            }
        }
        let mut out = Map::new();
        for field in &self.config_schema {
            let value = match (config.get(&field.name), &field.default) {
                (Some(v), _) => v.clone(),
                (None, Some(d)) => d.clone(),
                (None, None) => {
                    return Err(SourceError::Config(format!(
                        "missing required field '{}'",
                        field.name
                    )))
                }
            };
            if !field.accepts(&value) {
                return Err(SourceError::Config(format!(
                    "field '{}' must be {}, got {value}",
                    field.name, field.kind
                )));
            }
            out.insert(field.name.clone(), value);
        }
        Ok(out)
    }
}

pub trait Source: Send {
    fn name(&self) -> &str;

    fn acquire(&mut self, n: usize, position: &ScanPosition) -> Result<Vec<Sample>, SourceError>;
}

pub type SourceFactory =
    Box<dyn Fn(&SourceConfig) -> Result<Box<dyn Source>, SourceError> + Send + Sync>;

struct RegistryEntry {
    descriptor: SourceDescriptor,
    factory: SourceFactory,
}

#[derive(Default)]
pub struct SourceRegistry {
    entries: BTreeMap<String, RegistryEntry>,
}

impl fmt::Debug for SourceRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl SourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        registry
            .register(UwbSourceConfig::descriptor(), |cfg| {
                Ok(Box::new(SimUwbSource::new(UwbSourceConfig::from_config(
                    cfg,
                )?)?))
            })
            .expect("fresh registry");
        registry
            .register(ConstantSource::descriptor(), |cfg| {
                Ok(Box::new(ConstantSource::from_config(cfg)?))
            })
            .expect("fresh registry");
        registry
    }

    pub fn register<F>(
        &mut self,
        descriptor: SourceDescriptor,
        factory: F,
    ) -> Result<(), SourceError>
    where
        F: Fn(&SourceConfig) -> Result<Box<dyn Source>, SourceError> + Send + Sync + 'static,
    {
        if self.entries.contains_key(&descriptor.name) {
            return Err(SourceError::Registry(format!(
                "source '{}' is already registered",
                descriptor.name
            )));
        }
        self.entries.insert(
            descriptor.name.clone(),
            RegistryEntry {
                descriptor,
                factory: Box::new(factory),
            },
        );
        Ok(())
    }

    pub fn list(&self) -> Vec<&SourceDescriptor> {
        self.entries.values().map(|e| &e.descriptor).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn descriptor(&self, name: &str) -> Option<&SourceDescriptor> {
        self.entries.get(name).map(|e| &e.descriptor)
    }

    pub fn validate(&self, name: &str, config: &SourceConfig) -> Result<SourceConfig, SourceError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| SourceError::Config(format!("unknown source '{name}'")))?;
        entry.descriptor.validate(config)
    }

    pub fn create(
        &self,
        name: &str,
        config: &SourceConfig,
    ) -> Result<Box<dyn Source>, SourceError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| SourceError::Config(format!("unknown source '{name}'")))?;
        let validated = entry.descriptor.validate(config)?;
        (entry.factory)(&validated)
    }
}

fn from_validated<T: for<'de> Deserialize<'de>>(cfg: &SourceConfig) -> Result<T, SourceError> {
    serde_json::from_value(Value::Object(cfg.clone()))
        .map_err(|e| SourceError::Config(e.to_string()))
}

/// Extra apparent path length a time-of-flight ranger measures when the
/// signal crosses `thickness_cm` of dielectric: the wave slows to
/// `c / sqrt(eps_r)` inside the material.
pub fn dielectric_excess_path(eps_r: f64, thickness_cm: f64) -> Result<f64, SourceError> {
    if eps_r.is_nan() || eps_r < 1.0 {
        return Err(SourceError::Domain(format!(
            "relative permittivity must be >= 1, got {eps_r}"
        )));
    }
    if thickness_cm.is_nan() || thickness_cm < 0.0 {
        return Err(SourceError::Domain(format!(
            "thickness must be >= 0, got {thickness_cm}"
        )));
    }
    Ok((eps_r.sqrt() - 1.0) * thickness_cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UwbSourceConfig {
    pub true_distance_cm: f64,
    pub bias_cm: f64,
    pub noise_sigma_los_cm: f64,
    pub noise_sigma_nlos_cm: f64,
    pub occlusion_center_theta: f64,
    pub occlusion_half_width: f64,
    pub pla_thickness_cm: f64,
    pub relative_permittivity: f64,
    pub metal_extra_delay_cm: f64,
    pub seed: u64,
    /// Spacing of the simulated ranging clock.
    pub sample_interval_us: u64,
}

/// Mean range increase observed with the tower blocking line of sight.
pub const TOWER_MEAN_SHIFT_CM: f64 = 1.684;
/// Relative permittivity of PLA.
pub const PLA_PERMITTIVITY: f64 = 2.52;

impl UwbSourceConfig {
    pub fn descriptor() -> SourceDescriptor {
        use FieldKind::*;
        SourceDescriptor {
            name: "sim-uwb".into(),
            config_schema: vec![
                FieldSpec::required("true_distance_cm", Float),
                FieldSpec::optional("bias_cm", Float, 0.0),
                FieldSpec::optional("noise_sigma_los_cm", Float, 1.345),
                FieldSpec::optional("noise_sigma_nlos_cm", Float, 1.735),
                FieldSpec::optional("occlusion_center_theta", Float, 180.0),
                FieldSpec::optional("occlusion_half_width", Float, 15.0),
                FieldSpec::optional("pla_thickness_cm", Float, 1.0),
                FieldSpec::optional("relative_permittivity", Float, PLA_PERMITTIVITY),
                FieldSpec::optional("metal_extra_delay_cm", Float, 0.0),
                FieldSpec::optional("seed", Integer, 0u64),
                FieldSpec::optional("sample_interval_us", Integer, 10_000u64),
            ],
        }
    }

    /// Builds a config from a schema-validated document.
    pub fn from_config(cfg: &SourceConfig) -> Result<Self, SourceError> {
        let parsed: Self = from_validated(cfg)?;
        parsed.validate()?;
        Ok(parsed)
    }

    pub fn to_config(&self) -> SourceConfig {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("struct serializes to an object"),
        }
    }

    /// The tower-interference setup: devices 34.66 cm apart, tower between
    /// them at θ = 180°, with a 1 cm PLA path and the remainder of the
    /// observed shift attributed to the motor and bearings.
    pub fn tower_interference(seed: u64) -> Self {
        let thickness = 1.0;
        let dielectric = (PLA_PERMITTIVITY.sqrt() - 1.0) * thickness;
        Self {
            true_distance_cm: 34.660,
            bias_cm: 0.0,
            noise_sigma_los_cm: 1.345,
            noise_sigma_nlos_cm: 1.735,
            occlusion_center_theta: 180.0,
            occlusion_half_width: 15.0,
            pla_thickness_cm: thickness,
            relative_permittivity: PLA_PERMITTIVITY,
            metal_extra_delay_cm: TOWER_MEAN_SHIFT_CM - dielectric,
            seed,
            sample_interval_us: 10_000,
        }
    }

    /// Devices 50 cm apart with a wide, orientation-independent spread
    /// (σ = 11 cm) and a mean reading of 48.867 cm. The tower adds no
    /// shift here.
    pub fn reproducibility_setup(seed: u64) -> Self {
        Self {
            true_distance_cm: 50.0,
            bias_cm: 48.867 - 50.0,
            noise_sigma_los_cm: 11.0,
            noise_sigma_nlos_cm: 11.0,
            occlusion_center_theta: 180.0,
            occlusion_half_width: 15.0,
            pla_thickness_cm: 0.0,
            relative_permittivity: PLA_PERMITTIVITY,
            metal_extra_delay_cm: 0.0,
            seed,
            sample_interval_us: 10_000,
        }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(SourceError::Config(msg.into()))
            }
        };
        check(
            self.true_distance_cm > 0.0 && self.true_distance_cm.is_finite(),
            "true_distance_cm must be positive",
        )?;
        check(
            self.noise_sigma_los_cm >= 0.0 && self.noise_sigma_nlos_cm >= 0.0,
            "noise sigmas must be non-negative",
        )?;
        check(
            self.noise_sigma_los_cm.is_finite() && self.noise_sigma_nlos_cm.is_finite(),
            "noise sigmas must be finite",
        )?;
        check(
            self.relative_permittivity >= 1.0,
            "relative_permittivity must be >= 1",
        )?;
        check(
            self.pla_thickness_cm >= 0.0,
            "pla_thickness_cm must be >= 0",
        )?;
        check(
            (0.0..=180.0).contains(&self.occlusion_half_width),
            "occlusion_half_width must be in [0, 180]",
        )?;
        check(
            self.bias_cm.is_finite()
                && self.metal_extra_delay_cm.is_finite()
                && self.occlusion_center_theta.is_finite(),
            "offsets must be finite",
        )?;
        Ok(())
    }

    /// Noise-free range at orientation `theta`.
    pub fn expected_value(&self, theta: f64) -> f64 {
        let mut value = self.true_distance_cm + self.bias_cm;
        if is_occluded(theta, self) {
            // validated config: eps_r >= 1 and thickness >= 0
            let dielectric =
                dielectric_excess_path(self.relative_permittivity, self.pla_thickness_cm)
                    .unwrap_or(0.0);
            value = value + dielectric + self.metal_extra_delay_cm;
        }
        value
    }
}

/// Smallest angle between two bearings, in [0, 180].
fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn is_occluded(theta: f64, cfg: &UwbSourceConfig) -> bool {
    circular_distance(theta, cfg.occlusion_center_theta) <= cfg.occlusion_half_width
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the random stream at one scan position. Depends only on the
/// run seed and the position index, so positions can be acquired in any
/// order (or after a restart) with identical results.
pub fn position_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Simulated two-way-ranging acquisition of `n` samples at `position`.
pub fn acquire(n: usize, position: &ScanPosition, cfg: &UwbSourceConfig) -> Vec<Sample> {
    let occluded = is_occluded(position.theta, cfg);
    let mean = cfg.expected_value(position.theta);
    let sigma = if occluded {
        cfg.noise_sigma_nlos_cm
    } else {
        cfg.noise_sigma_los_cm
    };
    let mut rng = ChaCha8Rng::seed_from_u64(position_seed(cfg.seed, position.index));
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("validated sigma"));
    let base = position.index as u64 * n as u64 * cfg.sample_interval_us;
    let flag = if occluded { "1" } else { "0" };

    (0..n)
        .map(|i| {
            let value = match &noise {
                Some(dist) => mean + dist.sample(&mut rng),
                None => mean,
            };
            Sample {
                timestamp_us: base + i as u64 * cfg.sample_interval_us,
                value,
                extras: BTreeMap::from([("occluded".to_string(), flag.to_string())]),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SimUwbSource {
    config: UwbSourceConfig,
}

impl SimUwbSource {
    pub fn new(config: UwbSourceConfig) -> Result<Self, SourceError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &UwbSourceConfig {
        &self.config
    }
}

impl Source for SimUwbSource {
    fn name(&self) -> &str {
        "sim-uwb"
    }

    fn acquire(&mut self, n: usize, position: &ScanPosition) -> Result<Vec<Sample>, SourceError> {
        Ok(acquire(n, position, &self.config))
    }
}

/// Returns a fixed value for every sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantSource {
    pub value_cm: f64,
    pub sample_interval_us: u64,
}

impl ConstantSource {
    pub fn descriptor() -> SourceDescriptor {
        SourceDescriptor {
            name: "constant".into(),
            config_schema: vec![
                FieldSpec::optional("value_cm", FieldKind::Float, 50.0),
                FieldSpec::optional("sample_interval_us", FieldKind::Integer, 10_000u64),
            ],
        }
    }

    pub fn from_config(cfg: &SourceConfig) -> Result<Self, SourceError> {
        let parsed: Self = from_validated(cfg)?;
        if !parsed.value_cm.is_finite() {
            return Err(SourceError::Config("value_cm must be finite".into()));
        }
        Ok(parsed)
    }
}

impl Source for ConstantSource {
    fn name(&self) -> &str {
        "constant"
    }

    fn acquire(&mut self, n: usize, position: &ScanPosition) -> Result<Vec<Sample>, SourceError> {
        let base = position.index as u64 * n as u64 * self.sample_interval_us;
        Ok((0..n)
            .map(|i| Sample {
                timestamp_us: base + i as u64 * self.sample_interval_us,
                value: self.value_cm,
                extras: BTreeMap::new(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn at(index: usize, theta: f64) -> ScanPosition {
        ScanPosition {
            index,
            theta,
            phi: 90.0,
        }
    }

    fn quiet(true_distance_cm: f64) -> UwbSourceConfig {
        UwbSourceConfig {
            true_distance_cm,
            noise_sigma_los_cm: 0.0,
            noise_sigma_nlos_cm: 0.0,
            ..UwbSourceConfig::tower_interference(1)
        }
    }

    #[test]
    fn dielectric_examples() {
        assert_eq!(dielectric_excess_path(1.0, 5.0).unwrap(), 0.0);
        let one = dielectric_excess_path(2.52, 1.0).unwrap();
        assert!((one - 0.5875).abs() < 1e-4, "{one}");
        let two = dielectric_excess_path(2.52, 2.0).unwrap();
        assert!((two - 1.1750).abs() < 1e-4, "{two}");
        assert!(matches!(
            dielectric_excess_path(0.5, 1.0),
            Err(SourceError::Domain(_))
        ));
    }

    #[test]
    fn occlusion_examples() {
        let cfg = UwbSourceConfig {
            occlusion_center_theta: 180.0,
            occlusion_half_width: 15.0,
            ..quiet(50.0)
        };
        assert!(is_occluded(180.0, &cfg));
        assert!(!is_occluded(0.0, &cfg));
        assert!(is_occluded(195.0, &cfg));
        assert!(!is_occluded(195.5, &cfg));

        let wrap = UwbSourceConfig {
            occlusion_center_theta: 0.0,
            ..cfg
        };
        assert!(is_occluded(350.0, &wrap));
        assert!(is_occluded(10.0, &wrap));
    }

    #[test]
    fn noiseless_line_of_sight() {
        let cfg = quiet(50.0);
        let samples = acquire(5, &at(0, 0.0), &cfg);
        assert_eq!(samples.len(), 5);
        assert!(samples.iter().all(|s| s.value == 50.0));
        assert!(samples
            .windows(2)
            .all(|w| w[0].timestamp_us < w[1].timestamp_us));
    }

    #[test]
    fn noiseless_occluded_adds_tower_shift() {
        let cfg = quiet(50.0);
        let samples = acquire(3, &at(4, 180.0), &cfg);
        for s in &samples {
            assert!((s.value - (50.0 + TOWER_MEAN_SHIFT_CM)).abs() < 1e-12);
            assert_eq!(s.extras["occluded"], "1");
        }
    }

    #[test]
    fn same_position_same_samples() {
        let cfg = UwbSourceConfig::tower_interference(42);
        let a = acquire(50, &at(7, 30.0), &cfg);
        let b = acquire(50, &at(7, 30.0), &cfg);
        assert_eq!(a, b);
        let c = acquire(50, &at(8, 30.0), &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn registry_builtins() {
        let reg = SourceRegistry::with_builtins();
        assert!(reg.names().contains(&"sim-uwb"));
        assert!(reg.names().contains(&"constant"));
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut reg = SourceRegistry::with_builtins();
        let err = reg
            .register(UwbSourceConfig::descriptor(), |_| unreachable!())
            .unwrap_err();
        assert!(matches!(err, SourceError::Registry(_)));
    }

    #[test]
    fn register_custom_source() {
        let mut reg = SourceRegistry::new();
        reg.register(ConstantSource::descriptor(), |cfg| {
            Ok(Box::new(ConstantSource::from_config(cfg)?))
        })
        .unwrap();
        let cfg = json!({"value_cm": 12.5}).as_object().unwrap().clone();
        let mut src = reg.create("constant", &cfg).unwrap();
        let samples = src.acquire(2, &at(0, 0.0)).unwrap();
        assert_eq!(samples[1].value, 12.5);
    }

    #[test]
    fn missing_required_field() {
        let reg = SourceRegistry::with_builtins();
        let cfg = json!({"bias_cm": 1.0}).as_object().unwrap().clone();
        assert!(matches!(
            reg.create("sim-uwb", &cfg),
            Err(SourceError::Config(_))
        ));
    }

    #[test]
    fn schema_rejects_bad_documents() {
        let reg = SourceRegistry::with_builtins();
        for doc in [
            json!({"true_distance_cm": "far"}),
            json!({"true_distance_cm": 50.0, "colour": "red"}),
            json!({"true_distance_cm": 50.0, "seed": 1.5}),
            json!({"true_distance_cm": -1.0}),
            json!({"true_distance_cm": 50.0, "relative_permittivity": 0.5}),
            json!({"true_distance_cm": 50.0, "occlusion_half_width": 200.0}),
        ] {
            let cfg = doc.as_object().unwrap().clone();
            assert!(
                matches!(reg.create("sim-uwb", &cfg), Err(SourceError::Config(_))),
                "{doc}"
            );
        }
        assert!(reg.create("xyz", &Map::new()).is_err());
    }

    #[test]
    fn defaults_are_filled() {
        let reg = SourceRegistry::with_builtins();
        let cfg = json!({"true_distance_cm": 50.0})
            .as_object()
            .unwrap()
            .clone();
        let full = reg.validate("sim-uwb", &cfg).unwrap();
        let parsed = UwbSourceConfig::from_config(&full).unwrap();
        assert_eq!(parsed.relative_permittivity, 2.52);
        assert_eq!(parsed.metal_extra_delay_cm, 0.0);
        assert_eq!(parsed.bias_cm, 0.0);
    }

    #[test]
    fn config_document_round_trip() {
        let cfg = UwbSourceConfig::tower_interference(9);
        let doc = cfg.to_config();
        let validated = UwbSourceConfig::descriptor().validate(&doc).unwrap();
        assert_eq!(UwbSourceConfig::from_config(&validated).unwrap(), cfg);
    }
}
