use mabe::agent::{
    critic_input, critic_loss_and_grads, policy_objective, train_mabe, update_beta, AgentConfig,
    AgentState, Critics, TrainOptions,
};
use mabe::dataset::{generate_dataset, AugmentedBuffer, Normalizer, Recipe};
use mabe::dynamics::{train_dynamics, DynamicsConfig};
use mabe::env::EnvSpec;
use mabe::numeric::{flatten, kl_rows, Head, Mlp, Params};
use mabe::policy::GaussianPolicy;
use mabe::prior::{PriorParams, Weighting};
use mabe::rng::rng;
use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` over every parameter of `p`.
fn numeric_grad<P: Params<f64> + Clone>(p: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let n = p.num_params();
    (0..n)
        .map(|k| {
            let bump = |delta: f64| {
                let mut q = p.clone();
                let mut seen = 0;
                for s in q.slices_mut() {
                    if k < seen + s.len() {
                        s[k - seen] += delta;
                        break;
                    }
                    seen += s.len();
                }
                f(&q)
            };
            (bump(h) - bump(-h)) / (2.0 * h)
        })
        .collect()
}

fn gaussian_policy(sizes: &[usize], seed: u64) -> GaussianPolicy {
    let mut r = rng(seed);
    let mut net = Mlp::new(sizes, Head::GaussianTwoHead, &mut r)
        .unwrap()
        .with_log_std_bounds(-5.0, 2.0);
    // Spread the last layer so log-stds are away from the clamp and outputs are O(1).
    for v in net.layers.last_mut().unwrap().weight.iter_mut() {
        *v *= 10.0;
    }
    GaussianPolicy {
        net,
        obs_norm: Normalizer::identity(sizes[0]),
    }
}

fn critics(obs_dim: usize, act_dim: usize, n: usize, seed: u64) -> Critics {
    let mut r = rng(seed);
    Critics {
        nets: (0..n)
            .map(|_| Mlp::new(&[obs_dim + act_dim, 6, 1], Head::Linear, &mut r).unwrap())
            .collect(),
        obs_norm: Normalizer::identity(obs_dim),
        q_scale: 3.0,
        clip: None,
    }
}

#[test]
fn critic_gradient_matches_finite_differences() {
    let c = critics(2, 2, 1, 1);
    let x = array![[0.3, -0.2, 0.5, 0.1]];
    let y = array![1.7];
    let (_, g) = critic_loss_and_grads(&c.nets[0], c.q_scale, &x, &y).unwrap();
    let num = numeric_grad(&c.nets[0], |n| {
        critic_loss_and_grads(n, c.q_scale, &x, &y).unwrap().0
    });
    for (a, b) in flatten(&g).iter().zip(&num) {
        assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let pol = gaussian_policy(&[2, 5, 2], 2);
    let cr = critics(2, 2, 2, 3);
    let obs = array![[0.4, -0.3], [-0.1, 0.8], [0.9, 0.2]];
    let mut r = rng(4);
    let noise = Array2::from_shape_simple_fn((3, 2), || r.sample::<f64, _>(StandardNormal));
    let prior = gaussian_policy(&[2, 5, 2], 5);
    let (pm, pls) = prior.dist_rows(&obs).unwrap();
    let obj = |net: &Mlp<f64>| {
        let p = GaussianPolicy {
            net: net.clone(),
            obs_norm: pol.obs_norm.clone(),
        };
        policy_objective(&p, &cr, Some((&pm, &pls)), 0.7, 0.1, &obs, &noise)
            .unwrap()
            .objective
    };
    let po = policy_objective(&pol, &cr, Some((&pm, &pls)), 0.7, 0.1, &obs, &noise).unwrap();
    let num = numeric_grad(&pol.net, obj);
    for (a, b) in flatten(&po.grads).iter().zip(&num) {
        // The returned gradient is of the negated objective.
        assert!(rel_err(-a, *b) < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn critic_at_target_has_zero_gradient() {
    let c = critics(1, 1, 1, 6);
    let (x, _) = critic_input(
        &c.obs_norm,
        &array![[0.2], [0.5]],
        &array![[0.1], [-0.4]],
        None,
    );
    let y = c
        .values(&array![[0.2], [0.5]], &array![[0.1], [-0.4]])
        .unwrap()
        .row(0)
        .to_owned();
    let (loss, g) = critic_loss_and_grads(&c.nets[0], c.q_scale, &x, &y).unwrap();
    assert_eq!(loss, 0.0);
    assert!(flatten(&g).iter().all(|&v| v == 0.0));
}

fn toy_prior(policy: GaussianPolicy) -> PriorParams {
    PriorParams {
        policy,
        weighting: Weighting::Uniform,
        eta: 1.0,
        val_nll: 0.0,
        init_val_nll: 0.0,
    }
}

fn toy_batch(n: usize, seed: u64) -> mabe::dataset::Batch {
    let mut r = rng(seed);
    let mut m = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0));
    mabe::dataset::Batch {
        obs: m(n, 2),
        actions: m(n, 2),
        rewards: Array1::from_iter((0..n).map(|i| i as f64 * 0.1)),
        next_obs: m(n, 2),
        dones: Array1::zeros(n),
        is_real: vec![true; n],
    }
}

fn state(cfg: &AgentConfig, prior: &PriorParams) -> AgentState {
    AgentState::new(prior, cfg, Normalizer::identity(2), 2.0, None, &mut rng(9)).unwrap()
}

#[test]
fn critic_target_cases() {
    let prior = toy_prior(gaussian_policy(&[2, 4, 2], 7));
    let batch = toy_batch(8, 1);
    let cfg = AgentConfig {
        gamma: 0.0,
        hidden: vec![4],
        ..Default::default()
    };
    let s = state(&cfg, &prior);
    assert_eq!(
        s.critic_target(&batch, &prior, &mut rng(0)).unwrap(),
        batch.rewards
    );

    // Constant target critics and β = 0.
    let cfg = AgentConfig {
        gamma: 0.9,
        hidden: vec![4],
        ..Default::default()
    };
    let mut s = state(&cfg, &prior);
    s.beta = 0.0;
    for t in &mut s.targets {
        t.layers.last_mut().unwrap().weight.fill(0.0);
        t.layers.last_mut().unwrap().bias.fill(1.5);
    }
    let y = s.critic_target(&batch, &prior, &mut rng(0)).unwrap();
    let c = 1.5 * s.critics.q_scale;
    for (y, r) in y.iter().zip(&batch.rewards) {
        assert!((y - (r + 0.9 * c)).abs() < 1e-12);
    }

    // A policy identical to the prior contributes no KL, whatever β is.
    s.policy = prior.policy.clone();
    s.beta = 5.0;
    let y2 = s.critic_target(&batch, &prior, &mut rng(0)).unwrap();
    assert_eq!(y, y2);
}

#[test]
fn critic_step_reduces_loss() {
    let prior = toy_prior(gaussian_policy(&[2, 4, 2], 7));
    let cfg = AgentConfig {
        hidden: vec![8],
        lr_critic: 1e-3,
        ..Default::default()
    };
    let mut s = state(&cfg, &prior);
    let batch = toy_batch(32, 2);
    let y = Array1::from_elem(32, 3.0);
    let before = s.update_critic(&batch, &y).unwrap();
    let after = s.update_critic(&batch, &y).unwrap();
    assert!(after < before);
}

#[test]
fn large_beta_pulls_policy_toward_prior() {
    let prior = toy_prior(gaussian_policy(&[2, 4, 2], 7));
    let cfg = AgentConfig {
        hidden: vec![4],
        lr_policy: 1e-3,
        init_from_prior: false,
        ..Default::default()
    };
    let mut s = state(&cfg, &prior);
    s.beta = 1e6;
    let obs = toy_batch(64, 3).obs;
    let measure = |p: &GaussianPolicy| {
        let (m, ls) = p.dist_rows(&obs).unwrap();
        let (pm, pls) = prior.dist_rows(&obs).unwrap();
        kl_rows(m.view(), ls.view(), pm.view(), pls.view())
            .0
            .mean()
            .unwrap()
    };
    let before = measure(&s.policy);
    s.update_policy(&obs, &prior, &mut rng(1)).unwrap();
    assert!(measure(&s.policy) < before);
}

#[test]
fn dual_rule_examples() {
    assert_eq!(update_beta(1.0, 0.5, 0.5, 1e-2), 1.0);
    assert!((update_beta(1.0, 1.5, 0.5, 0.1) - 1.1).abs() < 1e-15);
    assert_eq!(update_beta(0.0, 0.1, 0.5, 0.1), 0.0);
}

struct Setup {
    data: mabe::dataset::Dataset,
    model: mabe::dynamics::DynamicsEnsemble,
    prior: PriorParams,
}

fn setup() -> Setup {
    let env = EnvSpec::point_mass(0.05, [1.0, 0.0]);
    let data = generate_dataset(&env, Recipe::Mixed, 400, 1).unwrap();
    let dcfg = DynamicsConfig {
        members: 3,
        elites: 2,
        hidden: vec![16],
        max_epochs: 3,
        ..Default::default()
    };
    let (model, _) = train_dynamics(&data, &dcfg, 2).unwrap();
    let mut policy = gaussian_policy(&[4, 8, 2], 3);
    policy.obs_norm = data.stats().unwrap().obs_normalizer();
    Setup {
        data,
        model,
        prior: toy_prior(policy),
    }
}

fn tiny() -> AgentConfig {
    AgentConfig {
        epochs: 1,
        branches: 1,
        horizon: 1,
        grad_steps: 1,
        batch_size: 16,
        hidden: vec![8],
        ..Default::default()
    }
}

#[test]
fn smoke_run_logs_one_epoch() {
    let s = setup();
    let (_, m) = train_mabe(
        &s.data,
        &s.model,
        &s.prior,
        &tiny(),
        0,
        &TrainOptions::default(),
        |_, _| Ok(Some(1.0)),
    )
    .unwrap();
    assert_eq!(m.epochs(), 1);
    assert_eq!(m.eval_return, vec![1.0]);
    assert_eq!(m.buffer_size, vec![1]);
}

#[test]
fn training_is_deterministic_and_leaves_prior_untouched() {
    let s = setup();
    let cfg = AgentConfig {
        epochs: 3,
        branches: 10,
        horizon: 3,
        grad_steps: 5,
        ..tiny()
    };
    let frozen = s.prior.clone();
    let run = || {
        train_mabe(
            &s.data,
            &s.model,
            &s.prior,
            &cfg,
            11,
            &TrainOptions::default(),
            |_, _| Ok(None),
        )
        .unwrap()
    };
    let (p1, m1) = run();
    let (p2, m2) = run();
    assert_eq!(p1, p2);
    assert_eq!(m1.critic_loss, m2.critic_loss);
    assert_eq!(m1.beta_steps, m2.beta_steps);
    assert!(m1.beta_steps.iter().all(|&b| b >= 0.0));
    assert!(m1.mean_kl.iter().all(|&k| k >= 0.0));
    assert_eq!(s.prior, frozen);
}

#[test]
fn ablation_flags() {
    let s = setup();
    let no_rl = AgentConfig {
        no_rl: true,
        ..tiny()
    };
    let (p, m) = train_mabe(
        &s.data,
        &s.model,
        &s.prior,
        &no_rl,
        0,
        &TrainOptions::default(),
        |_, _| Ok(None),
    )
    .unwrap();
    assert_eq!(p, s.prior.policy);
    assert_eq!(m.epochs(), 0);

    let no_prior = AgentConfig {
        no_prior: true,
        grad_steps: 4,
        ..tiny()
    };
    let (_, m) = train_mabe(
        &s.data,
        &s.model,
        &s.prior,
        &no_prior,
        0,
        &TrainOptions::default(),
        |_, _| Ok(None),
    )
    .unwrap();
    assert!(m.beta_steps.iter().all(|&b| b == 0.0));
}

#[test]
fn no_prior_objective_ignores_kl() {
    let pol = gaussian_policy(&[2, 5, 2], 2);
    let cr = critics(2, 2, 2, 3);
    let obs = array![[0.4, -0.3], [-0.1, 0.8]];
    let noise = array![[0.1, -0.2], [0.3, 0.0]];
    let prior = gaussian_policy(&[2, 5, 2], 5);
    let (pm, pls) = prior.dist_rows(&obs).unwrap();
    let with = policy_objective(&pol, &cr, Some((&pm, &pls)), 0.0, 0.0, &obs, &noise).unwrap();
    let without = policy_objective(&pol, &cr, None, 0.0, 0.0, &obs, &noise).unwrap();
    assert_eq!(with.objective, without.objective);
    assert_eq!(flatten(&with.grads), flatten(&without.grads));
}

#[test]
fn buffer_capacity_option() {
    let s = setup();
    let b = AugmentedBuffer::new(&s.data, 7);
    assert_eq!(b.capacity(), 7);
}
