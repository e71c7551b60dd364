//! Simulated tight-clearance peg-in-hole task.
//!
//! Contact lives in the x-z insertion plane with tilt about y; the y, roll
//! and yaw coordinates have dynamics but never see contact forces, so the
//! 6-D data format is preserved while the contact phenomenology (corner
//! landing, rim jamming, wall guidance) stays faithful to sub-millimeter
//! insertion.
//!
//! Frames: the surface top is the plane `z = surface_height` with the hole
//! centered at `x = 0`. The plant pose `x` tracks the peg tip center;
//! `x[4]` is the tilt. A peg-frame point `(u, v)` (lateral, along-axis)
//! maps to the world as
//!
//! ```text
//!   X = x + u cos(th) + v sin(th)
//!   Z = z - u sin(th) + v cos(th)
//! ```

use nalgebra::{Vector2, Vector3, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{
    dynamics_step, impedance_torque, internal_wrench, ControllerGains, DeskModel, RobotModel,
    RobotState, TICK_DT,
};
use crate::types::{EpisodeOutcome, Observation, Termination, Wrench};

/// How far below the insertion target the physical hole floor sits.
const FLOOR_MARGIN: f64 = 0.003;

/// Velocity scale for regularized Coulomb friction (m/s).
const FRICTION_V_REG: f64 = 1e-3;

/// Geometry and contact parameters of one insertion task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGeometry {
    pub peg_half_width: f64,
    pub hole_half_width: f64,
    /// `hole_half_width - peg_half_width`.
    pub clearance: f64,
    /// Insertion depth at which the task counts as done.
    pub hole_depth_target: f64,
    pub surface_height: f64,
    pub peg_length: f64,
    pub friction_coeff: f64,
    /// Penalty spring stiffness (N/m).
    pub contact_stiffness: f64,
    /// Penalty damper (N s/m).
    pub contact_damping: f64,
}

impl TaskGeometry {
    pub fn custom(
        peg_half_width: f64,
        clearance: f64,
        hole_depth_target: f64,
        peg_length: f64,
    ) -> Result<Self> {
        let geom = Self {
            peg_half_width,
            hole_half_width: peg_half_width + clearance,
            clearance,
            hole_depth_target,
            surface_height: 0.0,
            peg_length,
            friction_coeff: 0.3,
            contact_stiffness: 5e5,
            contact_damping: 200.0,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clearance > 0.0) {
            return Err(Error::InvalidArgument("clearance must be positive".into()));
        }
        if self.clearance >= self.peg_half_width {
            return Err(Error::InvalidArgument(
                "clearance must be small against the peg half-width".into(),
            ));
        }
        if !(self.contact_stiffness > 0.0) {
            return Err(Error::InvalidArgument("contact stiffness must be positive".into()));
        }
        if !((self.hole_half_width - self.peg_half_width - self.clearance).abs() < 1e-12) {
            return Err(Error::InvalidArgument(
                "hole half-width must equal peg half-width plus clearance".into(),
            ));
        }
        if !(self.hole_depth_target > 0.0 && self.peg_length > self.hole_depth_target) {
            return Err(Error::InvalidArgument(
                "peg must be longer than the insertion depth target".into(),
            ));
        }
        Ok(())
    }

    fn floor_z(&self) -> f64 {
        self.surface_height - self.hole_depth_target - FLOOR_MARGIN
    }
}

/// Named task presets. `Cuboid` is the training task; the rest probe
/// zero-shot transfer at tighter or looser clearances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Cuboid,
    Key,
    CylS,
    CylL,
    Prism,
}

impl TaskName {
    pub const ALL: [TaskName; 5] =
        [TaskName::Cuboid, TaskName::Key, TaskName::CylS, TaskName::CylL, TaskName::Prism];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::Cuboid => "cuboid",
            TaskName::Key => "key",
            TaskName::CylS => "cyl_s",
            TaskName::CylL => "cyl_l",
            TaskName::Prism => "prism",
        }
    }
}

impl std::str::FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cuboid" => Ok(TaskName::Cuboid),
            "key" => Ok(TaskName::Key),
            "cyl_s" | "cyl-s" => Ok(TaskName::CylS),
            "cyl_l" | "cyl-l" => Ok(TaskName::CylL),
            "prism" => Ok(TaskName::Prism),
            other => Err(Error::InvalidArgument(format!("unknown task '{other}'"))),
        }
    }
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Geometry preset for a named task. Widths map the physical objects onto
/// the planar model; clearances are the sub-millimeter figures of the real
/// task board (0.1 mm cuboid, 0.02 mm small cylinder, 0.025 mm large
/// cylinder, 0.05 mm prism).
pub fn make_task(name: TaskName) -> TaskGeometry {
    let (half_width, clearance, length) = match name {
        TaskName::Cuboid => (0.0175, 1e-4, 0.060),
        TaskName::Key => (0.004, 5e-5, 0.037),
        TaskName::CylS => (0.010, 2e-5, 0.050),
        TaskName::CylL => (0.015, 2.5e-5, 0.050),
        TaskName::Prism => (0.0133, 5e-5, 0.050),
    };
    TaskGeometry {
        peg_half_width: half_width,
        hole_half_width: half_width + clearance,
        clearance,
        hole_depth_target: 0.015,
        surface_height: 0.0,
        peg_length: length,
        friction_coeff: 0.3,
        contact_stiffness: 5e5,
        contact_damping: 200.0,
    }
}

/// Which geometric feature produced a contact force.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContactKind {
    /// Peg bottom corner on the top surface.
    CornerSurface { right: bool },
    /// Peg bottom corner against a hole wall.
    CornerWall { right: bool },
    /// Peg bottom corner on the hole floor.
    CornerFloor { right: bool },
    /// Hole rim corner against the peg flank or bottom face.
    Rim { right: bool },
}

/// One resolved contact: where it acts, the unit normal (direction of the
/// force on the peg), and the force split into normal and friction parts.
#[derive(Clone, Copy, Debug)]
pub struct Contact {
    pub kind: ContactKind,
    pub point: Vector2<f64>,
    pub normal: Vector2<f64>,
    pub normal_force: f64,
    pub friction_force: f64,
}

/// Active-contact summary exported in episode traces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ContactFlags {
    pub corner_left: bool,
    pub corner_right: bool,
    pub rim_left: bool,
    pub rim_right: bool,
}

impl ContactFlags {
    pub fn bits(&self) -> u8 {
        (self.corner_left as u8)
            | (self.corner_right as u8) << 1
            | (self.rim_left as u8) << 2
            | (self.rim_right as u8) << 3
    }

    fn absorb(&mut self, kind: ContactKind) {
        match kind {
            ContactKind::CornerSurface { right }
            | ContactKind::CornerWall { right }
            | ContactKind::CornerFloor { right } => {
                if right {
                    self.corner_right = true;
                } else {
                    self.corner_left = true;
                }
            }
            ContactKind::Rim { right } => {
                if right {
                    self.rim_right = true;
                } else {
                    self.rim_left = true;
                }
            }
        }
    }
}

fn peg_to_world(x: f64, z: f64, th: f64, u: f64, v: f64) -> Vector2<f64> {
    let (s, c) = th.sin_cos();
    Vector2::new(x + u * c + v * s, z - u * s + v * c)
}

fn world_to_peg(x: f64, z: f64, th: f64, pt: &Vector2<f64>) -> (f64, f64) {
    let (s, c) = th.sin_cos();
    let dx = pt[0] - x;
    let dz = pt[1] - z;
    (dx * c - dz * s, dx * s + dz * c)
}

/// Velocity of the peg material point at world position `pt`.
fn point_velocity(state: &RobotState, pt: &Vector2<f64>) -> Vector2<f64> {
    let rx = pt[0] - state.x[0];
    let rz = pt[1] - state.x[2];
    let th_dot = state.x_dot[4];
    Vector2::new(state.x_dot[0] + th_dot * rz, state.x_dot[2] - th_dot * rx)
}

fn penalty_force(
    geom: &TaskGeometry,
    state: &RobotState,
    kind: ContactKind,
    point: Vector2<f64>,
    normal: Vector2<f64>,
    penetration: f64,
) -> Option<Contact> {
    if penetration <= 0.0 {
        return None;
    }
    let vel = point_velocity(state, &point);
    let pen_rate = -vel.dot(&normal);
    let normal_force =
        (geom.contact_stiffness * penetration + geom.contact_damping * pen_rate).max(0.0);
    if normal_force <= 0.0 {
        return None;
    }
    let tangent = Vector2::new(-normal[1], normal[0]);
    let v_t = vel.dot(&tangent);
    let sat = (v_t / FRICTION_V_REG).clamp(-1.0, 1.0);
    let friction_force = -geom.friction_coeff * normal_force * sat;
    Some(Contact { kind, point, normal, normal_force, friction_force })
}

/// Resolve all penalty contacts for the current pose and sum them into the
/// external wrench on the EE. Out-of-plane components stay zero.
pub fn contact_wrench(state: &RobotState, geom: &TaskGeometry) -> (Wrench, Vec<Contact>) {
    let x = state.x[0];
    let z = state.x[2];
    let th = state.x[4];
    let surf = geom.surface_height;
    let mut contacts = Vec::new();

    // Peg bottom corners against surface, walls, floor.
    for right in [false, true] {
        let u = if right { geom.peg_half_width } else { -geom.peg_half_width };
        let corner = peg_to_world(x, z, th, u, 0.0);
        let kind_sign = right;
        if corner[0].abs() >= geom.hole_half_width {
            // over surface material: minimal push-out between the top plane
            // and (when below the rim line) the nearer wall
            let pen_up = surf - corner[1];
            let wall_x = if corner[0] > 0.0 { geom.hole_half_width } else { -geom.hole_half_width };
            let pen_wall = corner[0].abs() - geom.hole_half_width;
            if pen_up > 0.0 && (pen_up <= pen_wall || corner[1] >= surf - 1e-9) {
                if let Some(c) = penalty_force(
                    geom,
                    state,
                    ContactKind::CornerSurface { right: kind_sign },
                    corner,
                    Vector2::new(0.0, 1.0),
                    pen_up,
                ) {
                    contacts.push(c);
                }
            } else if pen_up > 0.0 {
                let n = Vector2::new(-wall_x.signum(), 0.0);
                if let Some(c) = penalty_force(
                    geom,
                    state,
                    ContactKind::CornerWall { right: kind_sign },
                    corner,
                    n,
                    pen_wall,
                ) {
                    contacts.push(c);
                }
            }
        } else {
            // over the hole: floor contact
            let pen_floor = geom.floor_z() - corner[1];
            if pen_floor > 0.0 {
                if let Some(c) = penalty_force(
                    geom,
                    state,
                    ContactKind::CornerFloor { right: kind_sign },
                    corner,
                    Vector2::new(0.0, 1.0),
                    pen_floor,
                ) {
                    contacts.push(c);
                }
            }
        }
    }

    // Hole rim corners against the peg body.
    let (s, c) = th.sin_cos();
    for right in [false, true] {
        let rim = Vector2::new(
            if right { geom.hole_half_width } else { -geom.hole_half_width },
            surf,
        );
        let (u, v) = world_to_peg(x, z, th, &rim);
        if u.abs() < geom.peg_half_width && v > 0.0 && v < geom.peg_length {
            let pen_right = geom.peg_half_width - u;
            let pen_left = geom.peg_half_width + u;
            let pen_bottom = v;
            let (pen, normal, _face) = if pen_bottom <= pen_right && pen_bottom <= pen_left {
                // exits through the bottom face: peg pushed up its axis
                (pen_bottom, Vector2::new(s, c), 0)
            } else if pen_right <= pen_left {
                // exits through the right flank: peg pushed toward -u
                (pen_right, Vector2::new(-c, s), 1)
            } else {
                (pen_left, Vector2::new(c, -s), 2)
            };
            if let Some(ct) =
                penalty_force(geom, state, ContactKind::Rim { right }, rim, normal, pen)
            {
                contacts.push(ct);
            }
        }
    }

    let mut force = Vector2::zeros();
    let mut torque = 0.0;
    for ct in &contacts {
        let tangent = Vector2::new(-ct.normal[1], ct.normal[0]);
        let f = ct.normal * ct.normal_force + tangent * ct.friction_force;
        force += f;
        let rx = ct.point[0] - x;
        let rz = ct.point[1] - z;
        torque += f[0] * rz - f[1] * rx;
    }

    let wrench = Wrench::new(
        Vector3::new(force[0], 0.0, force[1]),
        Vector3::new(0.0, torque, 0.0),
    );
    (wrench, contacts)
}

/// Safety clamp applied to the feed-forward wrench before the control law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyLimits {
    pub max_force: f64,
    pub max_torque: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self { max_force: 40.0, max_torque: 5.0 }
    }
}

/// Initial-pose randomization ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPoseConfig {
    /// Uniform lateral offset range (+-, meters).
    pub lateral_range: f64,
    /// Uniform tilt range (+-, radians).
    pub tilt_range: f64,
    /// Tip height above the surface at episode start.
    pub start_height: f64,
    /// Uniform range (+-, meters) of the lateral error between the
    /// impedance setpoint and the true hole center, modeling imprecise
    /// object localization. Position control alone cannot close a
    /// millimeter-scale setpoint error onto a sub-millimeter clearance;
    /// the wrench policy has to.
    pub goal_offset_range: f64,
}

impl Default for InitPoseConfig {
    fn default() -> Self {
        Self {
            lateral_range: 2e-3,
            tilt_range: 0.03,
            start_height: 5e-4,
            goal_offset_range: 1.5e-3,
        }
    }
}

/// A fully specified initial condition, normally drawn by
/// [`Environment::reset`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialPose {
    pub lateral: f64,
    pub tilt: f64,
    pub goal_offset: f64,
}

/// Environment configuration beyond task geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub limits: SafetyLimits,
    pub init_pose: InitPoseConfig,
    /// Optional i.i.d. Gaussian noise std added to every observation channel.
    pub sensor_noise_std: f64,
    /// Episode timeout in seconds.
    pub timeout: f64,
    /// How far below the insertion target the impedance setpoint sits, so
    /// the controller keeps pressing at depth.
    pub setpoint_overshoot: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            limits: SafetyLimits::default(),
            init_pose: InitPoseConfig::default(),
            sensor_noise_std: 0.0,
            timeout: 10.0,
            setpoint_overshoot: 2e-3,
        }
    }
}

/// Result of one environment tick.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub obs: Observation,
    pub flags: ContactFlags,
    /// The feed-forward wrench actually applied, after the safety clamp.
    pub executed: Wrench,
}

/// The stepped insertion environment: desk plant + contact + controller.
pub struct Environment {
    pub geom: TaskGeometry,
    pub config: EnvConfig,
    pub gains: ControllerGains,
    model: DeskModel,
    state: RobotState,
    tick: u64,
    noise_rng: Option<ChaCha8Rng>,
}

impl Environment {
    pub fn new(geom: TaskGeometry, config: EnvConfig) -> Result<Self> {
        geom.validate()?;
        let x_d = Vector6::new(
            0.0,
            0.0,
            geom.surface_height - geom.hole_depth_target - config.setpoint_overshoot,
            0.0,
            0.0,
            0.0,
        );
        let gains = ControllerGains::defaults(x_d);
        let model = DeskModel::default();
        let start = Vector6::new(
            0.0,
            0.0,
            geom.surface_height + config.init_pose.start_height,
            0.0,
            0.0,
            0.0,
        );
        Ok(Self {
            geom,
            config,
            gains,
            state: RobotState::at_rest(start, &DeskModel::default()),
            model,
            tick: 0,
            noise_rng: None,
        })
    }

    /// Reset to a randomized initial pose drawn from `rng`. The same rng
    /// also seeds the sensor-noise stream when noise is enabled.
    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> InitialPose {
        let p = &self.config.init_pose;
        let pose = InitialPose {
            lateral: rng.gen_range(-p.lateral_range..=p.lateral_range),
            tilt: rng.gen_range(-p.tilt_range..=p.tilt_range),
            goal_offset: rng.gen_range(-p.goal_offset_range..=p.goal_offset_range),
        };
        self.reset_to(pose);
        if self.config.sensor_noise_std > 0.0 {
            self.noise_rng = Some(ChaCha8Rng::from_rng_seed(rng));
        }
        pose
    }

    /// Reset to an explicit initial condition.
    pub fn reset_to(&mut self, pose: InitialPose) {
        let start = Vector6::new(
            pose.lateral,
            0.0,
            self.geom.surface_height + self.config.init_pose.start_height,
            0.0,
            pose.tilt,
            0.0,
        );
        self.state = RobotState::at_rest(start, &self.model);
        self.gains.x_d[0] = pose.goal_offset;
        self.tick = 0;
        self.noise_rng = None;
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn elapsed(&self) -> f64 {
        self.tick as f64 * TICK_DT
    }

    pub fn insertion_depth(&self) -> f64 {
        self.geom.surface_height - self.state.x[2]
    }

    /// Advance one control tick with the commanded feed-forward wrench.
    pub fn step(&mut self, f_ff: &Wrench) -> Result<StepOutput> {
        if !f_ff.is_finite() {
            return Err(Error::NonFinite(format!("feed-forward wrench at tick {}", self.tick)));
        }
        let f_ff = f_ff.clamped(self.config.limits.max_force, self.config.limits.max_torque);
        let (f_ext, contacts) = contact_wrench(&self.state, &self.geom);
        let mut flags = ContactFlags::default();
        for c in &contacts {
            flags.absorb(c.kind);
        }
        let tau_ext = self.model.jacobian(&self.state.q).transpose() * f_ext.as_vector();
        let tau_m = impedance_torque(&self.state, &self.gains, &f_ff, &self.model)?;
        self.state = dynamics_step(&self.state, &tau_m, &tau_ext, &self.model, TICK_DT)?;
        let f_in = internal_wrench(&tau_m, &self.state, &self.model)?;
        self.tick += 1;

        let mut obs = Observation { f_ext, f_in, ee_twist: self.state.x_dot };
        if let Some(rng) = self.noise_rng.as_mut() {
            let std = self.config.sensor_noise_std;
            let mut arr = obs.to_array();
            for v in arr.iter_mut() {
                *v += std * rng.sample::<f64, _>(StandardNormal);
            }
            obs = Observation::from_array(&arr);
        }
        Ok(StepOutput { obs, flags, executed: f_ff })
    }

    /// Success, timeout, or still in progress.
    pub fn check_outcome(&self) -> Option<EpisodeOutcome> {
        let inserted = self.insertion_depth() >= self.geom.hole_depth_target
            && self.state.x[0].abs() < self.geom.clearance
            && self.state.x[4].abs() < 0.05;
        if inserted {
            return Some(EpisodeOutcome {
                success: true,
                duration: self.elapsed(),
                termination: Termination::Inserted,
            });
        }
        if self.elapsed() >= self.config.timeout {
            return Some(EpisodeOutcome {
                success: false,
                duration: self.elapsed(),
                termination: Termination::Timeout,
            });
        }
        None
    }
}

// ChaCha8Rng::from_rng is fallible through the Rng trait; tiny shim.
trait FromRngSeed {
    fn from_rng_seed(rng: &mut ChaCha8Rng) -> ChaCha8Rng;
}

impl FromRngSeed for ChaCha8Rng {
    fn from_rng_seed(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(rng.gen())
    }
}
