//! Scripted data-collection controllers of graded quality.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{wrap_angle, EnvKind, EnvSpec, RewardSpec};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Expert,
    Medium,
    Random,
}

impl ControllerKind {
    /// Gaussian action-noise scale used when collecting data.
    pub fn default_noise(self) -> f64 {
        match self {
            ControllerKind::Expert => 0.1,
            ControllerKind::Medium => 0.3,
            ControllerKind::Random => 0.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ControllerKind::Expert => "expert",
            ControllerKind::Medium => "medium",
            ControllerKind::Random => "random",
        }
    }
}

struct Gains {
    /// Velocity target (directional) or position stiffness (goal).
    primary: f64,
    damping: f64,
    /// Energy-pumping gain for the pendulum.
    pump: f64,
}

fn gains(kind: ControllerKind) -> Gains {
    match kind {
        ControllerKind::Expert => Gains {
            primary: 1.0,
            damping: 1.0,
            pump: 1.0,
        },
        ControllerKind::Medium | ControllerKind::Random => Gains {
            primary: 0.35,
            damping: 0.35,
            pump: 0.25,
        },
    }
}

/// Action of a scripted controller, clipped to the action box.
///
/// `Random` draws uniformly in the box and ignores `noise_scale`; the other
/// kinds add `noise_scale`-scaled Gaussian noise to a proportional law.
pub fn scripted_action(
    kind: ControllerKind,
    spec: &EnvSpec,
    obs: &[f64],
    noise_scale: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    if kind == ControllerKind::Random {
        return spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(&l, &h)| rng.gen_range(l..h))
            .collect();
    }
    let g = gains(kind);
    let mut a = match (spec.kind, &spec.reward) {
        (EnvKind::PointMass, RewardSpec::Directional { direction }) => {
            // Track a velocity of `primary` along d, cancel lateral drift.
            let (vx, vy) = (obs[2], obs[3]);
            let target = 2.0 * g.primary;
            let k = 20.0 * g.primary;
            vec![
                k * (target * direction[0] - vx),
                k * (target * direction[1] - vy),
            ]
        }
        (EnvKind::PointMass, RewardSpec::Goal { goal }) => {
            let kp = 4.0 * g.primary;
            let kd = 4.0 * g.damping;
            vec![
                kp * (goal[0] - obs[0]) - kd * obs[2],
                kp * (goal[1] - obs[1]) - kd * obs[3],
            ]
        }
        (EnvKind::Pendulum, reward) => vec![pendulum_torque(spec, reward, obs, &g)],
    };
    if noise_scale > 0.0 {
        for x in &mut a {
            let e: f64 = rng.sample(StandardNormal);
            *x += noise_scale * e;
        }
    }
    spec.clip_action(&a)
}

fn pendulum_torque(spec: &EnvSpec, reward: &RewardSpec, obs: &[f64], g: &Gains) -> f64 {
    let (th, om) = (obs[0], obs[1]);
    let umax = spec.action_high[0];
    let w2 = spec.gravity / spec.length;
    // Specific energy, zero at the hanging rest state.
    let energy = 0.5 * om * om + w2 * (1.0 - th.cos());
    let top = 2.0 * w2;
    let spin = if om >= 0.0 { 1.0 } else { -1.0 };
    match reward {
        RewardSpec::Goal { goal } => {
            let err = wrap_angle(th - goal[0]);
            if err.abs() < 0.5 {
                -(25.0 * g.damping) * err - (6.0 * g.damping) * om
            } else {
                g.pump * umax * spin * (top - energy).signum().max(0.0) * 2.0
            }
        }
        RewardSpec::Directional { direction } => {
            let d = direction[0];
            if energy < 1.2 * top {
                g.pump * umax * spin * 2.0
            } else {
                g.primary * umax * d * 2.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::rollout_episode;
    use crate::rng::rng;

    fn mean_return(spec: &EnvSpec, kind: ControllerKind, episodes: u64) -> f64 {
        let noise = kind.default_noise();
        (0..episodes)
            .map(|ep| {
                rollout_episode(
                    spec,
                    |o, r| scripted_action(kind, spec, o, noise, r),
                    spec.horizon,
                    1000 + ep,
                )
                .unwrap()
                .undiscounted_return()
            })
            .sum::<f64>()
            / episodes as f64
    }

    #[test]
    fn random_draws_fill_the_box_uniformly() {
        let spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        let mut r = rng(9);
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| scripted_action(ControllerKind::Random, &spec, &[0.0; 4], 0.0, &mut r)[0])
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov–Smirnov against U(−1, 1); 1.63/√n is the 1% critical value.
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + 1.0) / 2.0;
                (cdf - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / (n as f64).sqrt(), "KS statistic {d}");
        assert!(xs.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn noiseless_expert_is_deterministic() {
        let spec = EnvSpec::point_mass(0.05, [1.0, 0.0]);
        let obs = [0.1, 0.2, 0.3, -0.1];
        let a = scripted_action(ControllerKind::Expert, &spec, &obs, 0.0, &mut rng(1));
        let b = scripted_action(ControllerKind::Expert, &spec, &obs, 0.0, &mut rng(2));
        assert_eq!(a, b);
    }

    #[test]
    fn controller_quality_is_graded_on_both_environments() {
        let specs = [
            EnvSpec::point_mass(0.05, [1.0, 0.0]),
            EnvSpec::point_mass(0.45, [-1.0, 0.0]),
            EnvSpec::pendulum(),
        ];
        for spec in &specs {
            let e = mean_return(spec, ControllerKind::Expert, 100);
            let m = mean_return(spec, ControllerKind::Medium, 100);
            let r = mean_return(spec, ControllerKind::Random, 100);
            assert!(
                e > m && m > r,
                "{:?}: expert {e} medium {m} random {r}",
                spec.kind
            );
        }
    }
}
