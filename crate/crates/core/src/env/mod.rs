//! Deterministic toy continuous-control environments.

mod controller;

pub use controller::{scripted_action, ControllerKind};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Trajectory, Transition};
use crate::error::{Error, Result};
use crate::rng::{rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    PointMass,
    Pendulum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum RewardSpec {
    /// `r = v'·d − penalty·‖a‖²`; for the pendulum only `d[0]` is used and
    /// the velocity is the angular rate.
    Directional { direction: Vec<f64> },
    /// `r = −‖pos' − goal‖`; for the pendulum the distance is the wrapped
    /// angle to `goal[0]`.
    Goal { goal: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub dt: f64,
    /// Per-step velocity damping `c ∈ [0, 1)`.
    pub friction: f64,
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default = "one")]
    pub length: f64,
    pub reward: RewardSpec,
    #[serde(default = "default_action_penalty")]
    pub action_penalty: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    /// Half-width of the uniform initial position (or angle) box.
    #[serde(default)]
    pub init_half_width: f64,
}

fn one() -> f64 {
    1.0
}

fn default_gravity() -> f64 {
    9.81
}

fn default_action_penalty() -> f64 {
    0.01
}

impl EnvSpec {
    /// Point mass on a plane with the forward-running reward.
    pub fn point_mass(friction: f64, direction: [f64; 2]) -> Self {
        EnvSpec {
            kind: EnvKind::PointMass,
            dt: 0.05,
            friction,
            mass: 1.0,
            gravity: 0.0,
            length: 1.0,
            reward: RewardSpec::Directional {
                direction: direction.to_vec(),
            },
            action_penalty: 0.01,
            action_low: vec![-1.0, -1.0],
            action_high: vec![1.0, 1.0],
            horizon: 100,
            init_half_width: 0.1,
        }
    }

    /// Torque-driven pendulum that must swing up to the inverted position.
    pub fn pendulum() -> Self {
        EnvSpec {
            kind: EnvKind::Pendulum,
            dt: 0.05,
            friction: 0.01,
            mass: 1.0,
            gravity: 9.81,
            length: 1.0,
            reward: RewardSpec::Goal {
                goal: vec![std::f64::consts::PI],
            },
            action_penalty: 0.01,
            action_low: vec![-3.0],
            action_high: vec![3.0],
            horizon: 150,
            init_half_width: 0.1,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointMass => 4,
            EnvKind::Pendulum => 2,
        }
    }

    pub fn act_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env spec: {m}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(0.0..1.0).contains(&self.friction) {
            return bad("friction must lie in [0, 1)");
        }
        if self.mass <= 0.0 || self.length <= 0.0 {
            return bad("mass and length must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.init_half_width < 0.0 {
            return bad("init_half_width must be non-negative");
        }
        let want = match self.kind {
            EnvKind::PointMass => 2,
            EnvKind::Pendulum => 1,
        };
        if self.action_low.len() != want || self.action_high.len() != want {
            return bad("action box has the wrong dimension");
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(l, h)| !(l < h))
        {
            return bad("action box must satisfy low < high");
        }
        match &self.reward {
            RewardSpec::Directional { direction } => {
                if direction.len() != want {
                    return bad("direction has the wrong dimension");
                }
                let n = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return bad("direction must be a unit vector");
                }
            }
            RewardSpec::Goal { goal } => {
                if goal.len() != want {
                    return bad("goal has the wrong dimension");
                }
            }
        }
        Ok(())
    }

    /// Clips an action into the box.
    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&x, (&l, &h))| x.clamp(l, h))
            .collect()
    }

    /// Reward of an arbitrary transition under this spec's reward function.
    ///
    /// Used both by the simulator and to relabel datasets for a different task.
    pub fn reward(&self, next_obs: &[f64], action: &[f64]) -> f64 {
        let a = self.clip_action(action);
        let penalty = self.action_penalty * a.iter().map(|x| x * x).sum::<f64>();
        match (&self.reward, self.kind) {
            (RewardSpec::Directional { direction }, EnvKind::PointMass) => {
                next_obs[2] * direction[0] + next_obs[3] * direction[1] - penalty
            }
            (RewardSpec::Directional { direction }, EnvKind::Pendulum) => {
                next_obs[1] * direction[0] - penalty
            }
            (RewardSpec::Goal { goal }, EnvKind::PointMass) => {
                -((next_obs[0] - goal[0]).powi(2) + (next_obs[1] - goal[1]).powi(2)).sqrt()
            }
            (RewardSpec::Goal { goal }, EnvKind::Pendulum) => {
                -wrap_angle(next_obs[0] - goal[0]).abs()
            }
        }
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Point mass: `(x, y, vx, vy)`. Pendulum: `(θ, θ̇)` with `θ = 0` hanging.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub values: Vec<f64>,
    pub step: usize,
}

impl EnvState {
    pub fn obs(&self) -> &[f64] {
        &self.values
    }
}

pub fn env_reset(spec: &EnvSpec, seed: u64) -> EnvState {
    let mut r = rng(seed);
    let w = spec.init_half_width;
    let draw = |r: &mut Rng| if w > 0.0 { r.gen_range(-w..=w) } else { 0.0 };
    let values = match spec.kind {
        EnvKind::PointMass => vec![draw(&mut r), draw(&mut r), 0.0, 0.0],
        EnvKind::Pendulum => vec![draw(&mut r), 0.0],
    };
    EnvState { values, step: 0 }
}

pub struct StepResult {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub fn env_step(spec: &EnvSpec, s: &EnvState, action: &[f64]) -> Result<StepResult> {
    if action.len() != spec.act_dim() {
        return Err(Error::Dimension {
            what: "action",
            expected: spec.act_dim(),
            got: action.len(),
        });
    }
    if let Some(i) = action.iter().position(|a| !a.is_finite()) {
        return Err(Error::Input(format!("non-finite action component {i}")));
    }
    let a = spec.clip_action(action);
    let keep = 1.0 - spec.friction;
    let dt = spec.dt;
    let v = &s.values;
    let values = match spec.kind {
        EnvKind::PointMass => {
            let vx = keep * v[2] + a[0] * dt / spec.mass;
            let vy = keep * v[3] + a[1] * dt / spec.mass;
            vec![v[0] + vx * dt, v[1] + vy * dt, vx, vy]
        }
        EnvKind::Pendulum => {
            let (th, om) = (v[0], v[1]);
            let inertia = spec.mass * spec.length * spec.length;
            let acc = -(spec.gravity / spec.length) * th.sin() + a[0] / inertia;
            let om2 = keep * om + acc * dt;
            vec![wrap_angle(th + om2 * dt), om2]
        }
    };
    let reward = spec.reward(&values, &a);
    let step = s.step + 1;
    Ok(StepResult {
        done: step >= spec.horizon,
        state: EnvState { values, step },
        reward,
    })
}

/// Runs one episode of at most `horizon` steps (capped by the spec horizon).
///
/// The policy sees the observation and an RNG stream derived from `seed`;
/// the initial state uses the same seed.
pub fn rollout_episode<P>(
    spec: &EnvSpec,
    mut policy: P,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory>
where
    P: FnMut(&[f64], &mut Rng) -> Vec<f64>,
{
    let mut state = env_reset(spec, seed);
    let mut r = rng(crate::rng::derive_seed(seed, 0xac7));
    let limit = horizon.min(spec.horizon).max(1);
    let mut transitions = Vec::with_capacity(limit);
    for t in 0..limit {
        let raw = policy(state.obs(), &mut r);
        let step = env_step(spec, &state, &raw)?;
        let last = step.done || t + 1 == limit;
        transitions.push(Transition {
            obs: state.values.clone(),
            action: spec.clip_action(&raw),
            reward: step.reward,
            next_obs: step.state.values.clone(),
            done: last,
            traj_end: last,
        });
        state = step.state;
        if last {
            break;
        }
    }
    Ok(Trajectory { transitions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at_rest(spec: &EnvSpec) -> EnvState {
        EnvState {
            values: vec![0.0; spec.obs_dim()],
            step: 0,
        }
    }

    #[test]
    fn rest_with_zero_action_is_fixed_point() {
        let spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        let s = at_rest(&spec);
        let out = env_step(&spec, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(out.state.values, s.values);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn hand_evaluated_point_mass_step() {
        let spec = EnvSpec::point_mass(0.0, [1.0, 0.0]);
        let out = env_step(&spec, &at_rest(&spec), &[1.0, 0.0]).unwrap();
        assert!((out.state.values[2] - 0.05).abs() < 1e-15);
        assert!((out.state.values[0] - 0.0025).abs() < 1e-15);
        assert!((out.reward - 0.04).abs() < 1e-15);
    }

    #[test]
    fn near_unit_friction_kills_velocity() {
        let eps = 1e-3;
        let spec = EnvSpec::point_mass(1.0 - eps, [1.0, 0.0]);
        let s = EnvState {
            values: vec![0.0, 0.0, 3.0, -4.0],
            step: 0,
        };
        let out = env_step(&spec, &s, &[0.0, 0.0]).unwrap();
        let speed = out.state.values[2].hypot(out.state.values[3]);
        assert!((speed - eps * 5.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_action_rejected() {
        let spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        assert!(matches!(
            env_step(&spec, &at_rest(&spec), &[f64::NAN, 0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn actions_are_clipped() {
        let spec = EnvSpec::point_mass(0.0, [1.0, 0.0]);
        let a = env_step(&spec, &at_rest(&spec), &[5.0, 0.0]).unwrap();
        let b = env_step(&spec, &at_rest(&spec), &[1.0, 0.0]).unwrap();
        assert_eq!(a.state.values, b.state.values);
        assert_eq!(a.reward, b.reward);
    }

    #[test]
    fn mirror_symmetry_of_directional_reward() {
        let fwd = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        let bwd = EnvSpec::point_mass(0.05, [-1.0, 0.0]);
        let s = EnvState {
            values: vec![0.3, -0.2, 0.4, 0.1],
            step: 0,
        };
        let m = EnvState {
            values: vec![-0.3, -0.2, -0.4, 0.1],
            step: 0,
        };
        let a = env_step(&fwd, &s, &[0.6, -0.2]).unwrap();
        let b = env_step(&bwd, &m, &[-0.6, -0.2]).unwrap();
        assert_eq!(a.reward, b.reward);
    }

    #[test]
    fn zero_width_reset_is_origin() {
        let mut spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        spec.init_half_width = 0.0;
        assert_eq!(env_reset(&spec, 17).values, vec![0.0; 4]);
        let mut p = EnvSpec::pendulum();
        p.init_half_width = 0.0;
        assert_eq!(env_reset(&p, 17).values, vec![0.0; 2]);
    }

    #[test]
    fn reset_is_seed_deterministic() {
        let spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        assert_eq!(env_reset(&spec, 4), env_reset(&spec, 4));
        assert_ne!(env_reset(&spec, 4), env_reset(&spec, 5));
    }

    #[test]
    fn reset_mean_within_three_standard_errors() {
        let spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        let n = 10_000;
        let w = spec.init_half_width;
        let mean: f64 = (0..n).map(|i| env_reset(&spec, i).values[0]).sum::<f64>() / n as f64;
        // Uniform(−w, w): standard deviation w/√3.
        let se = w / 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn pendulum_hangs_at_rest() {
        let spec = EnvSpec::pendulum();
        let out = env_step(&spec, &at_rest(&spec), &[0.0]).unwrap();
        assert_eq!(out.state.values, vec![0.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        let mut s = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        assert!(s.validate().is_ok());
        s.friction = 1.0;
        assert!(s.validate().is_err());
        let mut s = EnvSpec::point_mass(0.05, [0.6, 0.6]);
        assert!(s.validate().is_err());
        s.reward = RewardSpec::Directional {
            direction: vec![0.6, 0.8],
        };
        assert!(s.validate().is_ok());
        s.horizon = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn single_step_rollout_is_terminal() {
        let spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        let t = rollout_episode(&spec, |_, _| vec![0.5, 0.0], 1, 3).unwrap();
        assert_eq!(t.transitions.len(), 1);
        assert!(t.transitions[0].done && t.transitions[0].traj_end);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        for &x in &[0.0, PI, -PI, 3.0 * PI, -7.5, 100.0] {
            let w = wrap_angle(x);
            assert!(w > -PI && w <= PI);
            assert!(
                ((x - w) / (2.0 * PI)).fract().abs() < 1e-9
                    || ((x - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9
            );
        }
    }
}
