#![allow(dead_code)]

use pushrl::envs::gridworld::{move_from, reward, CELLS, GOAL, N_ACTIONS};

/// Optimal action values on the grid by value iteration, indexed
/// `[cell][action]`. The goal row stays zero.
pub fn grid_q_star(gamma: f64) -> Vec<[f64; N_ACTIONS]> {
    let mut q = vec![[0.0; N_ACTIONS]; CELLS];
    loop {
        let v: Vec<f64> = q.iter().map(|row| row.iter().cloned().fold(f64::MIN, f64::max)).collect();
        let mut delta = 0.0f64;
        for (s, row) in q.iter_mut().enumerate() {
            if s == GOAL {
                continue;
            }
            for (a, qa) in row.iter_mut().enumerate() {
                let next = move_from(s, a as u32);
                let boot = if next == GOAL { 0.0 } else { v[next] };
                let new = f64::from(reward(next)) + gamma * boot;
                delta = delta.max((new - *qa).abs());
                *qa = new;
            }
        }
        if delta < 1e-13 {
            return q;
        }
    }
}

/// Actions whose optimal value is within `tol` of the best in `cell`.
pub fn optimal_actions(q: &[[f64; N_ACTIONS]], cell: usize, tol: f64) -> Vec<usize> {
    let best = q[cell].iter().cloned().fold(f64::MIN, f64::max);
    (0..N_ACTIONS).filter(|&a| q[cell][a] >= best - tol).collect()
}

/// Length of the shortest path from `cell` to the goal.
pub fn grid_distance(cell: usize) -> usize {
    let side = pushrl::envs::gridworld::SIDE;
    let (r, c) = (cell / side, cell % side);
    (side - 1 - r) + (side - 1 - c)
}

pub mod oracle;
pub mod props;
