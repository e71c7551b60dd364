//! Torque-level plant and Cartesian impedance control with feed-forward
//! wrench.
//!
//! Dynamics: `M(q) qdd + C(q, qd) qd + g(q) = tau_m + tau_ext`.
//!
//! Control law: `tau_m = J^T [F_ff + K e + D ed + M xdd_d] + C qd + g` with
//! `e = x_d - x`.
//!
//! Internal wrench: `F_in = (J_body^+)^T (tau_m - C qd - g)`.
//!
//! All models here are 6-DoF with Cartesian-coordinate state; the desk plant
//! uses an identity Jacobian so `q == x` and every equation stays exactly as
//! written. Synthetic constant-matrix models exercise the same algebra with
//! non-trivial `M`, `C`, `g`, `J` in tests.

use nalgebra::{Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::types::Wrench;

/// Degrees of freedom of every plant in this crate.
pub const DOF: usize = 6;

/// Control tick length in seconds (1 kHz loop).
pub const TICK_DT: f64 = 1e-3;

/// Robot model: mass, Coriolis, gravity and Jacobians, plus forward
/// kinematics mapping generalized coordinates to the EE pose.
pub trait RobotModel {
    fn mass_matrix(&self, q: &Vector6<f64>) -> Matrix6<f64>;
    fn coriolis(&self, q: &Vector6<f64>, q_dot: &Vector6<f64>) -> Matrix6<f64>;
    fn gravity(&self, q: &Vector6<f64>) -> Vector6<f64>;
    fn jacobian(&self, q: &Vector6<f64>) -> Matrix6<f64>;
    fn body_jacobian(&self, q: &Vector6<f64>) -> Matrix6<f64>;
    fn ee_pose(&self, q: &Vector6<f64>) -> Vector6<f64>;

    fn ee_twist(&self, q: &Vector6<f64>, q_dot: &Vector6<f64>) -> Vector6<f64> {
        self.jacobian(q) * q_dot
    }
}

/// Desk plant: Cartesian coordinates, identity Jacobians, diagonal mass,
/// gravity-compensated (`C = 0`, `g = 0`).
#[derive(Clone, Debug)]
pub struct DeskModel {
    pub mass: Vector6<f64>,
}

impl Default for DeskModel {
    fn default() -> Self {
        // 3 kg translational, 0.05 kg m^2 rotational
        Self { mass: Vector6::new(3.0, 3.0, 3.0, 0.05, 0.05, 0.05) }
    }
}

impl RobotModel for DeskModel {
    fn mass_matrix(&self, _q: &Vector6<f64>) -> Matrix6<f64> {
        Matrix6::from_diagonal(&self.mass)
    }

    fn coriolis(&self, _q: &Vector6<f64>, _qd: &Vector6<f64>) -> Matrix6<f64> {
        Matrix6::zeros()
    }

    fn gravity(&self, _q: &Vector6<f64>) -> Vector6<f64> {
        Vector6::zeros()
    }

    fn jacobian(&self, _q: &Vector6<f64>) -> Matrix6<f64> {
        Matrix6::identity()
    }

    fn body_jacobian(&self, _q: &Vector6<f64>) -> Matrix6<f64> {
        Matrix6::identity()
    }

    fn ee_pose(&self, q: &Vector6<f64>) -> Vector6<f64> {
        *q
    }
}

/// Constant-matrix model with linear kinematics `x = J q`; used to exercise
/// the control and wrench algebra with non-identity matrices.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub m: Matrix6<f64>,
    pub c: Matrix6<f64>,
    pub g: Vector6<f64>,
    pub j: Matrix6<f64>,
    pub j_body: Matrix6<f64>,
}

impl RobotModel for LinearModel {
    fn mass_matrix(&self, _q: &Vector6<f64>) -> Matrix6<f64> {
        self.m
    }

    fn coriolis(&self, _q: &Vector6<f64>, _qd: &Vector6<f64>) -> Matrix6<f64> {
        self.c
    }

    fn gravity(&self, _q: &Vector6<f64>) -> Vector6<f64> {
        self.g
    }

    fn jacobian(&self, _q: &Vector6<f64>) -> Matrix6<f64> {
        self.j
    }

    fn body_jacobian(&self, _q: &Vector6<f64>) -> Matrix6<f64> {
        self.j_body
    }

    fn ee_pose(&self, q: &Vector6<f64>) -> Vector6<f64> {
        self.j * q
    }
}

/// Generalized coordinates plus the EE pose/twist they induce.
///
/// The pose is `[x, y, z, rx, ry, rz]` with positions in meters and the
/// orientation as small-angle fixed-axis coordinates (valid within about
/// +-0.3 rad for the insertion tasks, which stay near upright).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub q: Vector6<f64>,
    pub q_dot: Vector6<f64>,
    pub x: Vector6<f64>,
    pub x_dot: Vector6<f64>,
}

impl RobotState {
    pub fn at_rest(q: Vector6<f64>, model: &impl RobotModel) -> Self {
        Self {
            q,
            q_dot: Vector6::zeros(),
            x: model.ee_pose(&q),
            x_dot: Vector6::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter()
            .chain(self.q_dot.iter())
            .chain(self.x.iter())
            .chain(self.x_dot.iter())
            .all(|v| v.is_finite())
    }
}

/// Impedance gains and the desired trajectory point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerGains {
    /// Diagonal of the Cartesian stiffness matrix (N/m, N m/rad).
    pub stiffness: Vector6<f64>,
    /// Diagonal of the Cartesian damping matrix.
    pub damping: Vector6<f64>,
    pub x_d: Vector6<f64>,
    pub x_d_dot: Vector6<f64>,
    pub x_d_ddot: Vector6<f64>,
}

impl ControllerGains {
    /// Default gains: 500 N/m translational, 20 N m/rad rotational, with
    /// damping set for a ~0.7 damping ratio against the desk masses.
    pub fn defaults(x_d: Vector6<f64>) -> Self {
        let stiffness = Vector6::new(500.0, 500.0, 500.0, 20.0, 20.0, 20.0);
        let mass = DeskModel::default().mass;
        let damping = stiffness.zip_map(&mass, |k, m| 2.0 * 0.7 * (k * m).sqrt());
        Self {
            stiffness,
            damping,
            x_d,
            x_d_dot: Vector6::zeros(),
            x_d_ddot: Vector6::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stiffness.iter().chain(self.damping.iter()).any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// The impedance control law with feed-forward wrench.
pub fn impedance_torque(
    state: &RobotState,
    gains: &ControllerGains,
    f_ff: &Wrench,
    model: &impl RobotModel,
) -> Result<Vector6<f64>> {
    if !state.is_finite() || !f_ff.is_finite() {
        return Err(Error::NonFinite("impedance controller input".into()));
    }
    let e = gains.x_d - state.x;
    let e_dot = gains.x_d_dot - state.x_dot;
    let task = f_ff.as_vector()
        + gains.stiffness.component_mul(&e)
        + gains.damping.component_mul(&e_dot)
        + model.mass_matrix(&state.q) * gains.x_d_ddot;
    Ok(model.jacobian(&state.q).transpose() * task
        + model.coriolis(&state.q, &state.q_dot) * state.q_dot
        + model.gravity(&state.q))
}

/// Transpose of the Moore-Penrose pseudo-inverse of the body Jacobian,
/// rejecting rank-deficient configurations outright.
fn pinv_transpose(j_body: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let svd = j_body.svd(true, true);
    let max_sv = svd.singular_values.max();
    if !(max_sv > 0.0) || svd.singular_values.min() < 1e-10 * max_sv {
        return Err(Error::SingularJacobian);
    }
    let pinv = svd.pseudo_inverse(1e-12 * max_sv).map_err(|_| Error::SingularJacobian)?;
    Ok(pinv.transpose())
}

/// Wrench the robot applies on grasped objects, reconstructed from motor
/// torques with gravity and Coriolis terms removed.
pub fn internal_wrench(
    tau_m: &Vector6<f64>,
    state: &RobotState,
    model: &impl RobotModel,
) -> Result<Wrench> {
    let net = tau_m
        - model.coriolis(&state.q, &state.q_dot) * state.q_dot
        - model.gravity(&state.q);
    let f_in = pinv_transpose(&model.body_jacobian(&state.q))? * net;
    Ok(Wrench::from_vector(&f_in))
}

/// Advance the rigid-body dynamics one step of length `dt` with
/// semi-implicit Euler: the acceleration solved from the dynamics updates
/// the velocity first, then the position.
pub fn dynamics_step(
    state: &RobotState,
    tau_m: &Vector6<f64>,
    tau_ext: &Vector6<f64>,
    model: &impl RobotModel,
    dt: f64,
) -> Result<RobotState> {
    let q = state.q;
    let rhs = tau_m + tau_ext
        - model.coriolis(&q, &state.q_dot) * state.q_dot
        - model.gravity(&q);
    let m = model.mass_matrix(&q);
    let q_ddot = m
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("mass matrix not positive definite".into()))?
        .solve(&rhs);
    if !q_ddot.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("joint acceleration".into()));
    }
    let q_dot = state.q_dot + q_ddot * dt;
    let q = state.q + q_dot * dt;
    let next = RobotState {
        q,
        q_dot,
        x: model.ee_pose(&q),
        x_dot: model.ee_twist(&q, &q_dot),
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("plant state after integration".into()));
    }
    Ok(next)
}
