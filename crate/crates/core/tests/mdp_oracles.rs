mod common;

use std::collections::{BTreeMap, VecDeque};

use common::*;
use obsattack::envs::{build_fig3_gridworld, build_fig4_variant, build_random_gridworld, Action, Cell, Fig4Case, GridWorld};
use obsattack::mdp::{evaluate_policy, flip_rewards, min_return, sample_trajectories, solve_optimal, MdpSpec};

#[test]
fn exact_evaluation_matches_fixed_point_iteration() {
    for seed in 0..60 {
        let mdp = random_mdp(seed, 2 + (seed as usize % 5), 2 + (seed as usize % 3), 0.9, seed % 2 == 0);
        let pi = random_policy(seed + 1000, mdp.num_states(), mdp.num_actions(), 2.0);
        let report = evaluate_policy(&mdp, &pi).unwrap();
        let v = iterate_values(&mdp, &pi);
        for (a, b) in report.state_values.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
        }
        assert!((report.return_value - start_return(&mdp, &v)).abs() < 1e-9);
    }
}

#[test]
fn q_values_and_advantages_are_consistent() {
    for seed in 0..30 {
        let mdp = random_mdp(seed, 4, 3, 0.8, true);
        let pi = random_policy(seed + 7, 4, 3, 1.5);
        let r = evaluate_policy(&mdp, &pi).unwrap();
        for s in 0..4 {
            let mut mean_adv = 0.0;
            for a in 0..3 {
                let cont: f64 = mdp.transition(s, a).iter().zip(&r.state_values).map(|(p, v)| p * v).sum();
                let q = mdp.reward(s, a) + mdp.gamma() * cont;
                assert!((q - r.q_values[s][a]).abs() < 1e-10);
                assert!((r.advantages[s][a] - (q - r.state_values[s])).abs() < 1e-10);
                mean_adv += pi[s][a] * r.advantages[s][a];
            }
            assert!(mean_adv.abs() < 1e-10);
        }
    }
}

/// `(1-γ) Σ_t γ^t P(s_t = s)` by propagating the state distribution.
fn occupancy_by_propagation(mdp: &MdpSpec, pi: &[Vec<f64>]) -> Vec<f64> {
    let ns = mdp.num_states();
    let mut p = mdp.initial_dist().to_vec();
    let mut d = vec![0.0; ns];
    let mut weight = 1.0 - mdp.gamma();
    for _ in 0..2000 {
        for s in 0..ns {
            d[s] += weight * p[s];
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..mdp.num_actions() {
                for (t, q) in mdp.transition(s, a).iter().enumerate() {
                    next[t] += p[s] * pi[s][a] * q;
                }
            }
        }
        p = next;
        weight *= mdp.gamma();
    }
    d
}

#[test]
fn discounted_occupancy_matches_propagation() {
    for seed in 0..20 {
        let mdp = random_mdp(seed, 5, 2, 0.9, seed % 3 == 0);
        let pi = random_policy(seed + 99, 5, 2, 1.0);
        let r = evaluate_policy(&mdp, &pi).unwrap();
        let d = occupancy_by_propagation(&mdp, &pi);
        assert!((r.discounted_occupancy.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for (a, b) in r.discounted_occupancy.iter().zip(&d) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn optimum_and_minimum_match_brute_force() {
    for seed in 0..25 {
        let (ns, na) = (2 + seed as usize % 4, 2 + seed as usize % 2);
        let mdp = random_mdp(seed + 500, ns, na, 0.85, seed % 2 == 1);
        let returns: Vec<f64> = all_deterministic(ns, na)
            .iter()
            .map(|acts| start_return(&mdp, &iterate_values(&mdp, &one_hot(acts, na))))
            .collect();
        let best = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let worst = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((solve_optimal(&mdp).unwrap().return_value - best).abs() < 1e-9, "seed {seed}");
        assert!((min_return(&mdp).unwrap() - worst).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn greedy_ties_go_to_lowest_action() {
    // two identical actions everywhere
    let t = vec![vec![vec![0.0, 1.0], vec![0.0, 1.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]];
    let r = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
    let mdp = MdpSpec::new(t, r, 0.9, vec![1.0, 0.0], vec![false, true]).unwrap();
    assert_eq!(solve_optimal(&mdp).unwrap().greedy[0], 0);
}

#[test]
fn flipping_rewards_twice_is_identity() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 4, 3, 0.9, true);
        assert_eq!(flip_rewards(&flip_rewards(&mdp)), mdp);
    }
}

#[test]
fn monte_carlo_mean_approaches_exact_return() {
    let mdp = random_mdp(3, 4, 2, 0.5, true);
    let pi = random_policy(4, 4, 2, 1.0);
    let exact = evaluate_policy(&mdp, &pi).unwrap().return_value;
    let batch = sample_trajectories(&mdp, &pi, 20_000, 200, 11).unwrap();
    let returns = batch.discounted_returns(mdp.gamma());
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let sd = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / returns.len() as f64).sqrt();
    assert!((mean - exact).abs() < 5.0 * sd / (returns.len() as f64).sqrt() + 1e-3);
    let again = sample_trajectories(&mdp, &pi, 20_000, 200, 11).unwrap();
    assert_eq!(again.discounted_returns(mdp.gamma()), returns);
}

/// Shortest move count from start into the +1 cell, never passing through
/// another terminal.
fn bfs_to_goal(world: &GridWorld) -> Option<usize> {
    let l = &world.layout;
    let goal = l.reward_cells.iter().find(|r| r.reward > 0.0)?.cell;
    let blocked = |c: Cell| l.obstacles.contains(&c);
    let mut dist: BTreeMap<Cell, usize> = BTreeMap::new();
    let mut queue = VecDeque::from([l.start_cell]);
    dist.insert(l.start_cell, 0);
    while let Some(c) = queue.pop_front() {
        if c == goal {
            return Some(dist[&c]);
        }
        if l.terminal_cells.contains(&c) {
            continue;
        }
        for a in Action::ALL {
            if let Some(m) = l.movement_restrictions.iter().find(|m| m.cell == c) {
                if !m.allowed.contains(&a) {
                    continue;
                }
            }
            let (dr, dc): (i64, i64) = match a {
                Action::Up => (-1, 0),
                Action::Right => (0, 1),
                Action::Down => (1, 0),
                Action::Left => (0, -1),
            };
            let (r, col) = (c.row as i64 + dr, c.col as i64 + dc);
            if r < 0 || col < 0 || r >= l.height as i64 || col >= l.width as i64 {
                continue;
            }
            let next = obsattack::envs::cell(r as usize, col as usize);
            if blocked(next) || dist.contains_key(&next) {
                continue;
            }
            dist.insert(next, dist[&c] + 1);
            queue.push_back(next);
        }
    }
    None
}

#[test]
fn gridworld_optimum_matches_shortest_path() {
    let mut worlds = vec![build_fig3_gridworld().unwrap()];
    worlds.extend(Fig4Case::ALL.iter().map(|c| build_fig4_variant(*c).unwrap()));
    worlds.extend((0..20).map(|s| build_random_gridworld(5, 5, 0.2, s).unwrap()));
    let mut checked = 0;
    for w in &worlds {
        if let Some(d) = bfs_to_goal(w) {
            let gamma = w.mdp.gamma();
            let r = solve_optimal(&w.mdp).unwrap().return_value;
            assert!((r - gamma.powi(d as i32 - 1)).abs() < 1e-9, "{r} vs gamma^{}", d - 1);
            checked += 1;
        }
    }
    assert!(checked >= 10);
}
