//! Classic control environments with sub-stepped dynamics.
//!
//! Pendulum, CartPole and MountainCar follow the standard open-source Gym
//! dynamics and reward schemes. Each base step can be divided into `N`
//! substeps: the per-step update is scaled by `1/N`, the action is held
//! constant, and rewards are exposed as densities (reward per base step)
//! whose rectangle-rule integral over one base step recovers the discrete
//! reward.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown env id: {0}")]
    UnknownEnv(String),
    #[error("action {action} out of range (action count {count})")]
    ActionOutOfRange { action: usize, count: usize },
}

/// The three supported environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Pendulum,
    CartPole,
    MountainCar,
}

impl EnvKind {
    pub fn parse(id: &str) -> Result<Self, EnvError> {
        match id {
            "pendulum" => Ok(EnvKind::Pendulum),
            "cartpole" => Ok(EnvKind::CartPole),
            "mountaincar" => Ok(EnvKind::MountainCar),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::CartPole => "cartpole",
            EnvKind::MountainCar => "mountaincar",
        }
    }

    /// Number of discrete actions.
    pub fn action_count(&self) -> usize {
        match self {
            EnvKind::Pendulum => PENDULUM_TORQUES.len(),
            EnvKind::CartPole => 2,
            EnvKind::MountainCar => 3,
        }
    }

    /// Default episode length in base steps before truncation.
    pub fn default_max_episode_steps(&self) -> u32 {
        match self {
            EnvKind::Pendulum => 200,
            EnvKind::CartPole => 500,
            EnvKind::MountainCar => 200,
        }
    }

    /// Wall-clock duration of one base step, in seconds. Used for event
    /// timestamps; reward and discount arithmetic is in base-step units.
    pub fn base_step_seconds(&self) -> f64 {
        match self {
            EnvKind::Pendulum => PENDULUM_DT,
            EnvKind::CartPole => CARTPOLE_TAU,
            EnvKind::MountainCar => 1.0,
        }
    }

    /// Length of the ground-truth physics vector.
    pub fn physics_dim(&self) -> usize {
        match self {
            EnvKind::Pendulum => 3,
            EnvKind::CartPole => 4,
            EnvKind::MountainCar => 2,
        }
    }
}

/// Ground-truth state of one environment instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhysicsState {
    Pendulum { theta: f64, theta_dot: f64 },
    CartPole { x: f64, x_dot: f64, theta: f64, theta_dot: f64 },
    MountainCar { x: f64, x_dot: f64 },
}

impl PhysicsState {
    pub fn kind(&self) -> EnvKind {
        match self {
            PhysicsState::Pendulum { .. } => EnvKind::Pendulum,
            PhysicsState::CartPole { .. } => EnvKind::CartPole,
            PhysicsState::MountainCar { .. } => EnvKind::MountainCar,
        }
    }
}

/// Outcome of one substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstepResult {
    pub next_state: PhysicsState,
    /// Reward per base step, sampled at the substep's entry state.
    pub reward_density: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Per-instance environment configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Substeps per base step (N >= 1).
    pub substeps_per_step: u32,
    /// Episode truncation limit in base steps.
    pub max_episode_steps: u32,
    pub action_count: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(kind: EnvKind, substeps_per_step: u32, seed: u64) -> Self {
        assert!(substeps_per_step >= 1);
        EnvConfig {
            kind,
            substeps_per_step,
            max_episode_steps: kind.default_max_episode_steps(),
            action_count: kind.action_count(),
            seed,
        }
    }
}

// CartPole constants (reference implementation values).
const CARTPOLE_GRAVITY: f64 = 9.8;
const CARTPOLE_MASS_CART: f64 = 1.0;
const CARTPOLE_MASS_POLE: f64 = 0.1;
const CARTPOLE_TOTAL_MASS: f64 = CARTPOLE_MASS_CART + CARTPOLE_MASS_POLE;
const CARTPOLE_HALF_POLE: f64 = 0.5;
const CARTPOLE_POLEMASS_LENGTH: f64 = CARTPOLE_MASS_POLE * CARTPOLE_HALF_POLE;
const CARTPOLE_FORCE_MAG: f64 = 10.0;
const CARTPOLE_TAU: f64 = 0.02;
pub const CARTPOLE_X_LIMIT: f64 = 2.4;
pub const CARTPOLE_THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;

// Pendulum constants.
const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_DT: f64 = 0.05;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_M: f64 = 1.0;
const PENDULUM_L: f64 = 1.0;
/// Discretized torque menu; the actor picks one of these.
pub const PENDULUM_TORQUES: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

// MountainCar constants.
const MC_MIN_POSITION: f64 = -1.2;
const MC_MAX_POSITION: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL_POSITION: f64 = 0.5;
const MC_GOAL_VELOCITY: f64 = 0.0;
const MC_FORCE: f64 = 0.001;
const MC_GRAVITY: f64 = 0.0025;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Pendulum per-step reward: -(theta^2 + 0.1 theta_dot^2 + 0.001 torque^2).
pub fn pendulum_reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
    -(theta * theta + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
}

/// Reward density (reward per base step) at the given state under `action`.
pub fn reward_density(state: &PhysicsState, action: usize) -> f64 {
    match state {
        PhysicsState::CartPole { .. } => 1.0,
        PhysicsState::MountainCar { .. } => -1.0,
        PhysicsState::Pendulum { theta, theta_dot } => {
            let torque = PENDULUM_TORQUES[action.min(PENDULUM_TORQUES.len() - 1)];
            pendulum_reward(wrap_angle(*theta), *theta_dot, torque)
        }
    }
}

/// Ground-truth physics vector mu for the projection head.
pub fn physics_vector(state: &PhysicsState) -> Vec<f64> {
    match state {
        PhysicsState::Pendulum { theta, theta_dot } => {
            vec![theta.cos(), theta.sin(), *theta_dot]
        }
        PhysicsState::CartPole {
            x,
            x_dot,
            theta,
            theta_dot,
        } => vec![*x, *x_dot, *theta, *theta_dot],
        PhysicsState::MountainCar { x, x_dot } => vec![*x, *x_dot],
    }
}

/// Draw an initial state from the environment's standard reset distribution.
fn sample_initial_state(kind: EnvKind, rng: &mut ChaCha8Rng) -> PhysicsState {
    match kind {
        EnvKind::CartPole => PhysicsState::CartPole {
            x: rng.gen_range(-0.05..0.05),
            x_dot: rng.gen_range(-0.05..0.05),
            theta: rng.gen_range(-0.05..0.05),
            theta_dot: rng.gen_range(-0.05..0.05),
        },
        EnvKind::Pendulum => PhysicsState::Pendulum {
            theta: rng.gen_range(-PI..PI),
            theta_dot: rng.gen_range(-1.0..1.0),
        },
        EnvKind::MountainCar => PhysicsState::MountainCar {
            x: rng.gen_range(-0.6..-0.4),
            x_dot: 0.0,
        },
    }
}

/// Initial state for `(config, seed)`; identical inputs give identical states.
pub fn env_reset(config: &EnvConfig, seed: u64) -> PhysicsState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_initial_state(config.kind, &mut rng)
}

/// Integrate the environment's standard update scaled to one substep of
/// `1/substeps` base steps, holding `action` fixed. The reward density is
/// sampled at the entry state.
pub fn env_substep(
    state: &PhysicsState,
    action: usize,
    substeps: u32,
) -> Result<SubstepResult, EnvError> {
    let kind = state.kind();
    if action >= kind.action_count() {
        return Err(EnvError::ActionOutOfRange {
            action,
            count: kind.action_count(),
        });
    }
    let density = reward_density(state, action);
    let frac = 1.0 / substeps as f64;
    let (next_state, terminated) = match *state {
        PhysicsState::CartPole {
            x,
            x_dot,
            theta,
            theta_dot,
        } => {
            let force = if action == 1 {
                CARTPOLE_FORCE_MAG
            } else {
                -CARTPOLE_FORCE_MAG
            };
            let tau = CARTPOLE_TAU * frac;
            let cos_t = theta.cos();
            let sin_t = theta.sin();
            let temp = (force + CARTPOLE_POLEMASS_LENGTH * theta_dot * theta_dot * sin_t)
                / CARTPOLE_TOTAL_MASS;
            let theta_acc = (CARTPOLE_GRAVITY * sin_t - cos_t * temp)
                / (CARTPOLE_HALF_POLE
                    * (4.0 / 3.0 - CARTPOLE_MASS_POLE * cos_t * cos_t / CARTPOLE_TOTAL_MASS));
            let x_acc = temp - CARTPOLE_POLEMASS_LENGTH * theta_acc * cos_t / CARTPOLE_TOTAL_MASS;
            // Explicit Euler, reference ordering: positions advance with the
            // pre-update velocities.
            let nx = x + tau * x_dot;
            let nx_dot = x_dot + tau * x_acc;
            let ntheta = theta + tau * theta_dot;
            let ntheta_dot = theta_dot + tau * theta_acc;
            let terminated = nx.abs() > CARTPOLE_X_LIMIT || ntheta.abs() > CARTPOLE_THETA_LIMIT;
            (
                PhysicsState::CartPole {
                    x: nx,
                    x_dot: nx_dot,
                    theta: ntheta,
                    theta_dot: ntheta_dot,
                },
                terminated,
            )
        }
        PhysicsState::Pendulum { theta, theta_dot } => {
            let torque = PENDULUM_TORQUES[action];
            let dt = PENDULUM_DT * frac;
            let acc = 3.0 * PENDULUM_G / (2.0 * PENDULUM_L) * theta.sin()
                + 3.0 / (PENDULUM_M * PENDULUM_L * PENDULUM_L) * torque;
            let mut ntheta_dot = theta_dot + acc * dt;
            ntheta_dot = ntheta_dot.clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
            let ntheta = wrap_angle(theta + ntheta_dot * dt);
            (
                PhysicsState::Pendulum {
                    theta: ntheta,
                    theta_dot: ntheta_dot,
                },
                false,
            )
        }
        PhysicsState::MountainCar { x, x_dot } => {
            let push = (action as f64 - 1.0) * MC_FORCE;
            let mut nx_dot = x_dot + frac * (push + (3.0 * x).cos() * (-MC_GRAVITY));
            nx_dot = nx_dot.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
            let mut nx = x + frac * nx_dot;
            nx = nx.clamp(MC_MIN_POSITION, MC_MAX_POSITION);
            if nx == MC_MIN_POSITION && nx_dot < 0.0 {
                nx_dot = 0.0;
            }
            let terminated = nx >= MC_GOAL_POSITION && nx_dot >= MC_GOAL_VELOCITY;
            (
                PhysicsState::MountainCar {
                    x: nx,
                    x_dot: nx_dot,
                },
                terminated,
            )
        }
    };
    Ok(SubstepResult {
        next_state,
        reward_density: density,
        terminated,
        truncated: false,
    })
}

/// A stateful environment instance: owns the current state, the episode
/// substep counter and the reset stream. Value object; safe to run many
/// instances in parallel workers.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    state: PhysicsState,
    substeps_taken: u32,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(config: EnvConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let state = sample_initial_state(config.kind, &mut rng);
        Env {
            config,
            state,
            substeps_taken: 0,
            rng,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn kind(&self) -> EnvKind {
        self.config.kind
    }

    pub fn state(&self) -> &PhysicsState {
        &self.state
    }

    /// Substeps taken in the current episode.
    pub fn substeps_taken(&self) -> u32 {
        self.substeps_taken
    }

    /// Begin a new episode, drawing the next initial state from the reset
    /// stream seeded at construction.
    pub fn reset(&mut self) -> PhysicsState {
        self.state = sample_initial_state(self.config.kind, &mut self.rng);
        self.substeps_taken = 0;
        self.state
    }

    /// Advance one substep with the held action. Truncation triggers when
    /// the episode reaches `max_episode_steps` base steps.
    pub fn substep(&mut self, action: usize) -> Result<SubstepResult, EnvError> {
        let mut result = env_substep(&self.state, action, self.config.substeps_per_step)?;
        self.state = result.next_state;
        self.substeps_taken += 1;
        let limit = self.config.max_episode_steps * self.config.substeps_per_step;
        if !result.terminated && self.substeps_taken >= limit {
            result.truncated = true;
        }
        Ok(result)
    }
}
