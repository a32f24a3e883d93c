//! Toy continuous-control environments standing in for "simulation" and
//! "real" MDPs that differ only in one physical constant.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BASE_GRAVITY: f64 = 9.81;
pub const BASE_LENGTH: f64 = 1.0;
pub const BASE_MASS: f64 = 1.0;
pub const BASE_DRAG: f64 = 0.1;
pub const DT: f64 = 0.05;
pub const DEFAULT_HORIZON: usize = 200;

/// Perturbation magnitudes shared by every grid.
pub const GRID_SCALES: [f64; 5] = [1.0, 1.05, 1.1, 1.5, 2.0];

const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
const POINTMASS_MAX_FORCE: f64 = 1.0;
const POINTMASS_BOX: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unsupported perturbation {perturbation} for family {family}")]
    Unsupported {
        family: Family,
        perturbation: Perturbation,
    },
    #[error("invalid field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("action is not finite")]
    NonFiniteAction,
    #[error("action has {got} components, expected {expected}")]
    ActionDim { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Pointmass,
    Pendulum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    Gravity,
    Length,
    Mass,
    Drag,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sim,
    Real,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident => $s:literal),+ $(,)?) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($s => Ok(Self::$v),)+
                    other => Err(format!("unknown value {other:?}")),
                }
            }
        }
    };
}

text_enum!(Family, Pointmass => "pointmass", Pendulum => "pendulum");
text_enum!(Perturbation, Gravity => "gravity", Length => "length", Mass => "mass", Drag => "drag", None => "none");
text_enum!(Role, Sim => "sim", Real => "real");

impl Family {
    /// Perturbation axes supported by this family.
    pub fn axes(self) -> &'static [Perturbation] {
        match self {
            Family::Pointmass => &[Perturbation::Gravity, Perturbation::Mass, Perturbation::Drag],
            Family::Pendulum => &[
                Perturbation::Gravity,
                Perturbation::Length,
                Perturbation::Mass,
            ],
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Family::Pointmass => 4,
            Family::Pendulum => 3,
        }
    }

    pub fn act_dim(self) -> usize {
        match self {
            Family::Pointmass => 2,
            Family::Pendulum => 1,
        }
    }

    pub fn action_bound(self) -> f64 {
        match self {
            Family::Pointmass => POINTMASS_MAX_FORCE,
            Family::Pendulum => PENDULUM_MAX_TORQUE,
        }
    }
}

/// One MDP instance: a family, a perturbed constant and its scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: Family,
    pub perturbation: Perturbation,
    pub scale: f64,
    pub role: Role,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

impl EnvSpec {
    pub fn new(family: Family, perturbation: Perturbation, scale: f64, role: Role) -> Self {
        Self {
            family,
            perturbation,
            scale,
            role,
            horizon: DEFAULT_HORIZON,
            seed: 0,
        }
    }

    /// The unperturbed environment of a family.
    pub fn base(family: Family, role: Role) -> Self {
        Self::new(family, Perturbation::None, 1.0, role)
    }

    pub fn with_role(&self, role: Role) -> Self {
        Self {
            role,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(EnvError::Invalid {
                field: "scale",
                reason: format!("must be positive, got {}", self.scale),
            });
        }
        if self.horizon == 0 {
            return Err(EnvError::Invalid {
                field: "horizon",
                reason: "must be at least 1".into(),
            });
        }
        if self.perturbation == Perturbation::None {
            if self.scale != 1.0 {
                return Err(EnvError::Invalid {
                    field: "scale",
                    reason: "perturbation none requires scale 1".into(),
                });
            }
        } else if !self.family.axes().contains(&self.perturbation) {
            return Err(EnvError::Unsupported {
                family: self.family,
                perturbation: self.perturbation,
            });
        }
        Ok(())
    }

    /// Flat `key=value` form, fields separated by `;`.
    pub fn to_kv(&self) -> String {
        format!(
            "family={};perturbation={};scale={};role={};horizon={};seed={}",
            self.family, self.perturbation, self.scale, self.role, self.horizon, self.seed
        )
    }

    /// Parses the `key=value` form. Missing keys take base defaults; fields may
    /// be separated by `;` or newlines.
    pub fn from_kv(text: &str) -> Result<Self, EnvError> {
        let mut spec = EnvSpec::base(Family::Pendulum, Role::Sim);
        let bad = |field: &'static str, reason: String| EnvError::Invalid { field, reason };
        for item in text.split([';', '\n']).map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| bad("spec", format!("expected key=value, got {item:?}")))?;
            let v = v.trim();
            match k.trim() {
                "family" => spec.family = v.parse().map_err(|e| bad("family", e))?,
                "perturbation" => {
                    spec.perturbation = v.parse().map_err(|e| bad("perturbation", e))?
                }
                "scale" => {
                    spec.scale = v
                        .parse()
                        .map_err(|e: std::num::ParseFloatError| bad("scale", e.to_string()))?
                }
                "role" => spec.role = v.parse().map_err(|e| bad("role", e))?,
                "horizon" => {
                    spec.horizon = v
                        .parse()
                        .map_err(|e: std::num::ParseIntError| bad("horizon", e.to_string()))?
                }
                "seed" => {
                    spec.seed = v
                        .parse()
                        .map_err(|e: std::num::ParseIntError| bad("seed", e.to_string()))?
                }
                other => return Err(bad("spec", format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}

impl FromStr for EnvSpec {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_kv(s)
    }
}

/// Physical constants after applying the perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Physics {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub drag: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    /// pointmass: `[x, y, vx, vy]`; pendulum: `[cos θ, sin θ, θ̇]`.
    pub observation: Vec<f64>,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// An immutable environment instance; stepping is a pure function.
#[derive(Clone, Debug)]
pub struct Environment {
    spec: EnvSpec,
    physics: Physics,
}

pub fn make_env(spec: &EnvSpec) -> Result<Environment, EnvError> {
    spec.validate()?;
    let mut physics = Physics {
        gravity: BASE_GRAVITY,
        length: BASE_LENGTH,
        mass: BASE_MASS,
        drag: BASE_DRAG,
        dt: DT,
    };
    match spec.perturbation {
        Perturbation::Gravity => physics.gravity *= spec.scale,
        Perturbation::Length => physics.length *= spec.scale,
        Perturbation::Mass => physics.mass *= spec.scale,
        Perturbation::Drag => physics.drag *= spec.scale,
        Perturbation::None => {}
    }
    Ok(Environment {
        spec: spec.clone(),
        physics,
    })
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn physics(&self) -> &Physics {
        &self.physics
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.family.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.spec.family.act_dim()
    }

    pub fn action_bound(&self) -> f64 {
        self.spec.family.action_bound()
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        use std::f64::consts::PI;
        let observation = match self.spec.family {
            Family::Pendulum => {
                let theta: f64 = rng.random_range(-PI..PI);
                let omega: f64 = rng.random_range(-1.0..1.0);
                vec![theta.cos(), theta.sin(), omega]
            }
            Family::Pointmass => {
                let x = rng.random_range(-1.0..1.0);
                let y = rng.random_range(-1.0..1.0);
                vec![x, y, 0.0, 0.0]
            }
        };
        EnvState {
            observation,
            step_index: 0,
        }
    }

    /// A pendulum state at angle `theta` (0 is upright) with angular speed `omega`.
    pub fn pendulum_state(theta: f64, omega: f64) -> EnvState {
        EnvState {
            observation: vec![theta.cos(), theta.sin(), omega],
            step_index: 0,
        }
    }

    /// Pendulum torque that keeps the rod static at `theta`.
    pub fn holding_torque(&self, theta: f64) -> f64 {
        let p = &self.physics;
        -(3.0 * p.gravity / (2.0 * p.length)) * theta.sin() * p.mass * p.length * p.length / 3.0
    }

    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != self.act_dim() {
            return Err(EnvError::ActionDim {
                expected: self.act_dim(),
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let bound = self.action_bound();
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-bound, bound)).collect();
        let p = &self.physics;
        let (observation, reward) = match self.spec.family {
            Family::Pendulum => {
                let o = &state.observation;
                let theta = o[1].atan2(o[0]);
                let omega = o[2];
                let u = a[0];
                let reward = -(wrap_angle(theta).powi(2) + 0.1 * omega * omega + 0.001 * u * u);
                let accel = 3.0 * p.gravity / (2.0 * p.length) * theta.sin()
                    + 3.0 * u / (p.mass * p.length * p.length);
                let omega = (omega + accel * p.dt).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                let theta = theta + omega * p.dt;
                (vec![theta.cos(), theta.sin(), omega], reward)
            }
            Family::Pointmass => {
                let o = &state.observation;
                let tilt = 0.3 * p.gravity / BASE_GRAVITY;
                let vx = o[2] + p.dt * (a[0] / p.mass - p.drag * o[2]);
                let vy = o[3] + p.dt * (a[1] / p.mass - tilt - p.drag * o[3]);
                let x = (o[0] + p.dt * vx).clamp(-POINTMASS_BOX, POINTMASS_BOX);
                let y = (o[1] + p.dt * vy).clamp(-POINTMASS_BOX, POINTMASS_BOX);
                let reward = vx - 0.1 * (a[0] * a[0] + a[1] * a[1]);
                (vec![x, y, vx, vy], reward)
            }
        };
        let step_index = state.step_index + 1;
        Ok(StepResult {
            next_state: EnvState {
                observation,
                step_index,
            },
            reward,
            done: step_index >= self.spec.horizon,
        })
    }
}

/// Full cross product of a family's axes with [`GRID_SCALES`].
pub fn perturbation_grid(family: Family, role: Role) -> Vec<EnvSpec> {
    family
        .axes()
        .iter()
        .flat_map(|&axis| {
            GRID_SCALES
                .iter()
                .map(move |&scale| EnvSpec::new(family, axis, scale, role))
        })
        .collect()
}

/// Anything that maps an observation to an action.
pub trait Policy {
    fn act(&self, observation: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, observation: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (**self).act(observation, rng)
    }
}

/// Always returns zeros.
pub struct ZeroPolicy(pub usize);

impl Policy for ZeroPolicy {
    fn act(&self, _: &[f64], _: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

/// Uniform random actions within `±bound`.
pub struct UniformPolicy {
    pub dim: usize,
    pub bound: f64,
}

impl Policy for UniformPolicy {
    fn act(&self, _: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.dim)
            .map(|_| rng.random_range(-self.bound..=self.bound))
            .collect()
    }
}

/// Hand-written controller used as the expert reference for dataset quality.
///
/// Pointmass: full forward thrust. Pendulum: energy pumping far from the top,
/// a PD stabilizer near it.
pub struct ScriptedExpert {
    family: Family,
    physics: Physics,
}

impl ScriptedExpert {
    pub fn new(env: &Environment) -> Self {
        Self {
            family: env.spec.family,
            physics: env.physics,
        }
    }
}

impl Policy for ScriptedExpert {
    fn act(&self, o: &[f64], _: &mut dyn RngCore) -> Vec<f64> {
        match self.family {
            Family::Pointmass => vec![POINTMASS_MAX_FORCE, 0.0],
            Family::Pendulum => {
                let p = &self.physics;
                let theta = o[1].atan2(o[0]);
                let omega = o[2];
                let w0 = 3.0 * p.gravity / (2.0 * p.length);
                let gain = 3.0 / (p.mass * p.length * p.length);
                let energy = 0.5 * omega * omega + w0 * theta.cos();
                let u = if theta.cos() > 0.85 {
                    -(w0 * theta.sin() + 6.0 * theta + 2.5 * omega) / gain
                } else {
                    let deficit = w0 - energy;
                    if omega.abs() < 1e-6 {
                        PENDULUM_MAX_TORQUE
                    } else {
                        omega.signum() * (deficit * 0.5).clamp(-1.0, 1.0) * PENDULUM_MAX_TORQUE
                    }
                };
                vec![u.clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)]
            }
        }
    }
}

/// Undiscounted return of one episode.
pub fn run_episode<P: Policy + ?Sized, R: RngCore>(
    env: &Environment,
    policy: &P,
    rng: &mut R,
) -> Result<f64, EnvError> {
    let mut state = env.reset(rng);
    let mut total = 0.0;
    loop {
        let a = policy.act(&state.observation, rng);
        let step = env.step(&state, &a)?;
        total += step.reward;
        state = step.next_state;
        if step.done {
            return Ok(total);
        }
    }
}
