//! Shared domain types: wrenches, observations, and episode outcomes.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Dimension of the sensor observation fed to the policy.
pub const OBS_DIM: usize = 18;
/// Dimension of the policy's action: a feed-forward wrench.
pub const ACTION_DIM: usize = 6;
/// Conditioning vector: current observation concatenated with the previous one.
pub const COND_DIM: usize = 2 * OBS_DIM;

/// A 6-D wrench: force in newtons, torque in newton-meters.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: Vector3::new(v[0], v[1], v[2]),
            torque: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.force[0],
            self.force[1],
            self.force[2],
            self.torque[0],
            self.torque[1],
            self.torque[2],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }

    /// Clamp force and torque norms to the given limits, preserving direction.
    pub fn clamped(&self, max_force: f64, max_torque: f64) -> Self {
        let mut out = *self;
        let fn_ = out.force.norm();
        if fn_ > max_force {
            out.force *= max_force / fn_;
        }
        let tn = out.torque.norm();
        if tn > max_torque {
            out.torque *= max_torque / tn;
        }
        out
    }
}

/// One control tick's sensor reading: external wrench from contact, internal
/// wrench reconstructed from motor torques, and the end-effector twist.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Observation {
    pub f_ext: Wrench,
    pub f_in: Wrench,
    pub ee_twist: Vector6<f64>,
}

impl Observation {
    /// Flatten to the 18 scalars in declared order: external wrench,
    /// internal wrench, EE twist.
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        let mut out = [0.0; OBS_DIM];
        out[..6].copy_from_slice(self.f_ext.as_vector().as_slice());
        out[6..12].copy_from_slice(self.f_in.as_vector().as_slice());
        out[12..].copy_from_slice(self.ee_twist.as_slice());
        out
    }

    pub fn from_array(a: &[f64; OBS_DIM]) -> Self {
        Self {
            f_ext: Wrench::from_vector(&Vector6::from_row_slice(&a[..6])),
            f_in: Wrench::from_vector(&Vector6::from_row_slice(&a[6..12])),
            ee_twist: Vector6::from_row_slice(&a[12..]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Why an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Inserted,
    Timeout,
    SafetyAbort,
}

/// Final verdict of one insertion episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    /// Simulated duration in seconds.
    pub duration: f64,
    pub termination: Termination,
}
