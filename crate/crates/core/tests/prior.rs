use mabe::dataset::{Dataset, Trajectory, Transition};
use mabe::prior::{
    fit_q_dataset, mean_log_likelihood, return_weights, train_prior, weights_from_q, PriorConfig,
    QFitConfig, QNorm,
};
use mabe::rng::rng;
use ndarray::array;
use rand::Rng;

fn t(
    obs: Vec<f64>,
    action: Vec<f64>,
    reward: f64,
    next_obs: Vec<f64>,
    done: bool,
    end: bool,
) -> Transition {
    Transition {
        obs,
        action,
        reward,
        next_obs,
        done,
        traj_end: end,
    }
}

fn chain() -> Dataset {
    let mut ts = Vec::new();
    for _ in 0..20 {
        ts.push(t(vec![0.0], vec![0.0], 1.0, vec![1.0], false, false));
        ts.push(t(vec![1.0], vec![1.0], 0.0, vec![2.0], true, true));
    }
    Dataset::new(1, 1, ts).unwrap()
}

#[test]
fn two_state_chain_value() {
    let q = fit_q_dataset(&chain(), 0.9, &QFitConfig::default(), 0).unwrap();
    let v = q
        .values(&array![[0.0], [1.0]], &array![[0.0], [1.0]])
        .unwrap();
    assert!((v[0] - 1.0).abs() < 0.05, "Q(s0) = {}", v[0]);
    assert!(v[1].abs() < 0.05, "Q(s1) = {}", v[1]);
}

#[test]
fn zero_discount_regresses_reward() {
    let mut r = rng(1);
    let ts: Vec<Transition> = (0..100)
        .map(|i| {
            let s: f64 = r.gen_range(-1.0..1.0);
            let a: f64 = r.gen_range(-1.0..1.0);
            t(
                vec![s],
                vec![a],
                s * a + 0.5 * s,
                vec![s],
                false,
                i % 10 == 9,
            )
        })
        .collect();
    let d = Dataset::new(1, 1, ts).unwrap();
    let q = fit_q_dataset(&d, 0.0, &QFitConfig::default(), 3).unwrap();
    let v = q.dataset_values(&d).unwrap();
    let worst = d
        .transitions()
        .iter()
        .zip(&v)
        .map(|(t, q)| (t.reward - q).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "max error {worst}");
}

#[test]
fn constant_reward_geometric_value() {
    let mut r = rng(2);
    let ts: Vec<Transition> = (0..200)
        .map(|i| {
            let s: f64 = r.gen_range(-1.0..1.0);
            t(
                vec![s],
                vec![0.0],
                1.0,
                vec![r.gen_range(-1.0..1.0)],
                false,
                i == 199,
            )
        })
        .collect();
    let d = Dataset::new(1, 1, ts).unwrap();
    let q = fit_q_dataset(&d, 0.9, &QFitConfig::default(), 4).unwrap();
    let v = q.dataset_values(&d).unwrap();
    let mean = v.mean().unwrap();
    assert!((mean - 10.0).abs() < 0.5, "mean Q {mean}");
}

#[test]
fn invalid_discount_rejected() {
    assert!(fit_q_dataset(&chain(), 1.0, &QFitConfig::default(), 0).is_err());
    assert!(fit_q_dataset(&chain(), -0.1, &QFitConfig::default(), 0).is_err());
}

#[test]
fn weight_formula_cases() {
    let (gamma, r_max, eta) = (0.99, 2.0, 0.5);
    let q_top = r_max / (1.0 - gamma);
    let w = weights_from_q(&[q_top, 0.0], gamma, r_max, eta, QNorm::RMax, 0.0).unwrap();
    assert!((w[0] - (1.0f64 / eta).exp()).abs() < 1e-12);
    assert_eq!(w[1], 1.0);
    let w = weights_from_q(&[q_top, -q_top, 0.3], gamma, r_max, 1e9, QNorm::RMax, 0.0).unwrap();
    assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-6));
    assert!(weights_from_q(&[1.0], gamma, r_max, 0.0, QNorm::RMax, 0.0).is_err());
    let w = weights_from_q(&[3.0, 2.0, 1.0], gamma, r_max, 1.0, QNorm::RMax, 0.0).unwrap();
    assert!(w[0] > w[1] && w[1] > w[2]);
    let w = weights_from_q(&[5.0, 0.0], gamma, -1.0, 1.0, QNorm::RMax, 0.5).unwrap();
    assert!((w[0] - (5.0 * (1.0 - gamma) / 0.5f64).exp()).abs() < 1e-12);
    let w = weights_from_q(&[4.0, 2.0], gamma, r_max, 1.0, QNorm::MaxQ, 0.0).unwrap();
    assert!((w[0] - 1f64.exp()).abs() < 1e-12 && (w[1] - 0.5f64.exp()).abs() < 1e-12);
}

#[test]
fn return_weight_cases() {
    let traj = |r: f64, n: usize| Trajectory {
        transitions: (0..n)
            .map(|i| t(vec![0.0], vec![0.0], r, vec![0.0], false, i + 1 == n))
            .collect(),
    };
    let d = Dataset::from_trajectories(1, 1, vec![traj(0.0, 3), traj(1.0, 4)]).unwrap();
    let w = return_weights(&d, 0.5).unwrap();
    assert_eq!(&w[..3], &[1.0; 3]);
    assert!(w[3..].iter().all(|&v| (v - 2f64.exp()).abs() < 1e-12));
    let d = Dataset::from_trajectories(1, 1, vec![traj(0.5, 2), traj(0.5, 2)]).unwrap();
    let w = return_weights(&d, 1.0).unwrap();
    assert!(w.iter().all(|&v| v == w[0]));
    let single = Dataset::from_trajectories(1, 1, vec![traj(-2.0, 5)]).unwrap();
    let w = return_weights(&single, 1.0).unwrap();
    assert!(w.iter().all(|&v| v == w[0]));
}

fn prior_cfg() -> PriorConfig {
    PriorConfig {
        hidden: vec![32, 32],
        lr: 3e-3,
        batch_size: 128,
        max_epochs: 150,
        patience: 15,
        ..Default::default()
    }
}

#[test]
fn delta_actions_fit() {
    let mut r = rng(5);
    let ts: Vec<Transition> = (0..1000)
        .map(|i| {
            let s = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            t(s.clone(), vec![0.3, -0.3], 0.0, s, false, i % 100 == 99)
        })
        .collect();
    let d = Dataset::new(2, 2, ts).unwrap();
    let cfg = prior_cfg();
    let p = train_prior(&d, &vec![1.0; d.len()], &cfg, 0).unwrap();
    let g = p.dist(&[0.2, -0.4]).unwrap();
    assert!(
        (g.mean()[0] - 0.3).abs() < 0.02 && (g.mean()[1] + 0.3).abs() < 0.02,
        "{:?}",
        g.mean()
    );
    assert!(
        g.log_std().iter().all(|&v| v < cfg.log_std_min + 0.1),
        "{:?}",
        g.log_std()
    );
    assert!(p.val_nll < p.init_val_nll);
}

fn bimodal(n: usize, seed: u64) -> (Dataset, Vec<f64>) {
    let mut r = rng(seed);
    let mut ts = Vec::new();
    let mut w = Vec::new();
    for i in 0..n {
        let s = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let good = r.gen_bool(0.5);
        let a = if good {
            vec![0.6, 0.4]
        } else {
            vec![-0.6, -0.4]
        };
        ts.push(t(
            s.clone(),
            a,
            if good { 1.0 } else { 0.0 },
            s,
            false,
            i % 50 == 49,
        ));
        w.push(if good { 1.0 } else { 1e-6 });
    }
    (Dataset::new(2, 2, ts).unwrap(), w)
}

#[test]
fn weighted_prior_picks_high_advantage_mode() {
    let (d, w) = bimodal(2000, 6);
    let a_star = (0.6f64 * 0.6 + 0.4 * 0.4).sqrt();
    let weighted = train_prior(&d, &w, &prior_cfg(), 1).unwrap();
    let uniform = train_prior(&d, &vec![1.0; d.len()], &prior_cfg(), 1).unwrap();
    // States carry no information about the mode, so compare the prior mean
    // averaged over the state distribution.
    let avg_mean = |p: &mabe::prior::PriorParams| {
        let (m, _) = p.dist_rows(&d.obs_matrix()).unwrap();
        m.mean_axis(ndarray::Axis(0)).unwrap()
    };
    let m = avg_mean(&weighted);
    let err = ((m[0] - 0.6).powi(2) + (m[1] - 0.4).powi(2)).sqrt();
    assert!(err < 0.1 * a_star, "weighted mean {m:?}");
    let m = avg_mean(&uniform);
    assert!(m.dot(&m).sqrt() < 0.1 * a_star, "uniform mean {m:?}");
    // The adaptive prior explains the high-return behavior better.
    let good: Vec<usize> = (0..d.len())
        .filter(|&i| d.transitions()[i].reward > 0.5)
        .collect();
    assert!(
        mean_log_likelihood(&weighted, &d, &good).unwrap()
            >= mean_log_likelihood(&uniform, &d, &good).unwrap()
    );
}

#[test]
fn weight_scale_invariance() {
    let (d, w) = bimodal(400, 7);
    let cfg = PriorConfig {
        max_epochs: 5,
        ..prior_cfg()
    };
    let a = train_prior(&d, &w, &cfg, 2).unwrap();
    let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let b = train_prior(&d, &doubled, &cfg, 2).unwrap();
    assert_eq!(a.policy, b.policy);
    assert!(train_prior(&d, &w[1..], &cfg, 2).is_err());
}
