//! Oracle checks shared by the oracle tests and the acceptance target.
//! Each returns a description of the first violation.

use pushrl::algo::{self, argmax, QNetwork};
use pushrl::envs::gridworld::{move_from, one_hot, reward, CELLS, GOAL, N_ACTIONS};
use pushrl::types::{Layout, ParamSet, Transition};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GAMMA: f64 = 0.99;

fn one_hot_net() -> QNetwork {
    QNetwork::zeros(Layout::new(vec![CELLS, N_ACTIONS], false))
}

fn grid_transition(s: usize, a: usize) -> Transition {
    let next = move_from(s, a as u32);
    Transition {
        state: one_hot(s),
        action: a as u32,
        reward: reward(next),
        next_state: one_hot(next),
        done: next == GOAL,
    }
}

/// Sweeps every non-goal state-action pair in shuffled order until the
/// table stops moving.
pub fn train_td0(seed: u64) -> QNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = one_hot_net();
    let mut pairs: Vec<(usize, usize)> = (0..CELLS)
        .filter(|&s| s != GOAL)
        .flat_map(|s| (0..N_ACTIONS).map(move |a| (s, a)))
        .collect();
    for _ in 0..2_000 {
        pairs.shuffle(&mut rng);
        let mut biggest = 0.0f64;
        for &(s, a) in &pairs {
            let r = algo::td0_update(&net, &grid_transition(s, a), GAMMA, 0.5).unwrap();
            biggest = biggest.max(r.delta.abs());
            net = QNetwork::from_params(r.updated);
        }
        if biggest < 1e-6 {
            break;
        }
    }
    net
}

/// Tabular TD(0) against value iteration: max-norm error and greedy
/// agreement on every non-goal cell. Returns the max-norm error.
pub fn td0_matches_value_iteration(seed: u64) -> Result<f64, String> {
    let oracle = super::grid_q_star(GAMMA);
    let net = train_td0(seed);
    let mut max_err = 0.0f64;
    for s in (0..CELLS).filter(|&s| s != GOAL) {
        let q = net.forward(&one_hot(s)).unwrap();
        for a in 0..N_ACTIONS {
            max_err = max_err.max((q[a] - oracle[s][a]).abs());
        }
        let greedy = argmax(&q);
        if !super::optimal_actions(&oracle, s, 1e-9).contains(&greedy) {
            return Err(format!("cell {s}: greedy {greedy} not optimal"));
        }
    }
    if max_err > 0.05 {
        return Err(format!("max-norm error {max_err}"));
    }
    Ok(max_err)
}

fn random_net(rng: &mut ChaCha8Rng) -> QNetwork {
    let inputs = rng.gen_range(1..=5);
    let hidden: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(1..=6)).collect();
    let outputs = rng.gen_range(1..=4);
    let layout = Layout::mlp(inputs, &hidden, outputs);
    let theta = (0..layout.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    QNetwork::from_params(ParamSet::new(theta, 0, layout).unwrap())
}

fn random_batch(rng: &mut ChaCha8Rng, net: &QNetwork) -> Vec<Transition> {
    let d = net.layout().inputs();
    let n_actions = net.n_actions() as u32;
    (0..rng.gen_range(1..=6))
        .map(|_| Transition {
            state: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            action: rng.gen_range(0..n_actions),
            reward: rng.gen_range(-1.0..1.0),
            next_state: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            done: rng.gen_bool(0.3),
        })
        .collect()
}

fn loss_at(net: &QNetwork, theta: &[f64], batch: &[Transition], targets: &[f64]) -> f64 {
    let p = ParamSet::new(theta.to_vec(), 0, net.layout().clone()).unwrap();
    algo::dqn_loss_and_grad(&QNetwork::from_params(p), batch, targets).unwrap().0
}

/// Analytic DQN gradients against central differences on `count` random
/// small networks and batches. Returns the worst relative error.
pub fn gradients_match_finite_differences(count: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let h = 1e-5;
    let mut instances = 0;
    while instances < count {
        let net = random_net(&mut rng);
        let target = random_net_like(&mut rng, &net);
        let batch = random_batch(&mut rng, &net);
        let targets = algo::dqn_targets(&target, &batch, 0.9).unwrap();
        let (_, grad) = algo::dqn_loss_and_grad(&net, &batch, &targets).unwrap();
        let theta = net.params().theta().to_vec();
        let mut fd = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            fd[i] = (loss_at(&net, &plus, &batch, &targets) - loss_at(&net, &minus, &batch, &targets)) / (2.0 * h);
        }
        // a ReLU kink inside the stencil makes the difference meaningless
        if near_kink(&net, &batch, 2.0 * h) {
            continue;
        }
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(fd.iter().map(|g| g * g).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        if rel > 1e-4 {
            return Err(format!("instance {instances}: relative error {rel}"));
        }
        worst = worst.max(rel);
        instances += 1;
    }
    Ok(worst)
}

fn random_net_like(rng: &mut ChaCha8Rng, net: &QNetwork) -> QNetwork {
    let layout = net.layout().clone();
    let theta = (0..layout.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    QNetwork::from_params(ParamSet::new(theta, 0, layout).unwrap())
}

/// Whether any hidden pre-activation lies within `eps` of zero, measured
/// with a perturbation bound on every parameter.
fn near_kink(net: &QNetwork, batch: &[Transition], eps: f64) -> bool {
    let sizes = net.layout().sizes.clone();
    if sizes.len() <= 2 {
        return false;
    }
    let theta = net.params().theta();
    let bias = net.layout().bias;
    batch.iter().any(|t| {
        let mut x: Vec<f64> = t.state.iter().map(|&v| f64::from(v)).collect();
        let mut off = 0;
        for l in 0..sizes.len() - 2 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &theta[off..off + n_in * n_out];
            off += n_in * n_out;
            let b = if bias {
                let b = &theta[off..off + n_out];
                off += n_out;
                Some(b)
            } else {
                None
            };
            let l1: f64 = x.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
            let mut y = vec![0.0; n_out];
            for (j, yj) in y.iter_mut().enumerate() {
                let mut z: f64 = (0..n_in).map(|i| w[j * n_in + i] * x[i]).sum();
                if let Some(b) = b {
                    z += b[j];
                }
                if z.abs() < eps * l1 * 10.0 {
                    return true;
                }
                *yj = z.max(0.0);
            }
            x = y;
        }
        false
    })
}
