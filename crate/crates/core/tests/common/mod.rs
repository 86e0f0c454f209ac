#![allow(dead_code)]

use obsattack::mdp::{ActionProbs, MdpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random point of the simplex; larger `concentration` means spikier.
pub fn random_dist<R: Rng>(r: &mut R, n: usize, concentration: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| r.gen::<f64>().powf(concentration) + 1e-3).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Dense random MDP; the last state is terminal when `with_terminal`.
pub fn random_mdp(seed: u64, ns: usize, na: usize, gamma: f64, with_terminal: bool) -> MdpSpec {
    let mut r = rng(seed);
    let terminal: Vec<bool> = (0..ns).map(|s| with_terminal && s == ns - 1).collect();
    let mut transition = Vec::new();
    let mut reward = Vec::new();
    for s in 0..ns {
        let mut t_row = Vec::new();
        let mut r_row = Vec::new();
        for _ in 0..na {
            if terminal[s] {
                let mut p = vec![0.0; ns];
                p[s] = 1.0;
                t_row.push(p);
                r_row.push(0.0);
            } else {
                t_row.push(random_dist(&mut r, ns, 3.0));
                r_row.push(r.gen_range(-1.0..1.0));
            }
        }
        transition.push(t_row);
        reward.push(r_row);
    }
    let initial = random_dist(&mut r, ns, 1.0);
    MdpSpec::new(transition, reward, gamma, initial, terminal).expect("valid random MDP")
}

pub fn random_policy(seed: u64, ns: usize, na: usize, concentration: f64) -> ActionProbs {
    let mut r = rng(seed);
    (0..ns).map(|_| random_dist(&mut r, na, concentration)).collect()
}

/// Policy evaluation by plain fixed-point iteration, independent of the
/// library's linear solve.
pub fn iterate_values(mdp: &MdpSpec, pi: &[Vec<f64>]) -> Vec<f64> {
    let ns = mdp.num_states();
    let mut v = vec![0.0; ns];
    loop {
        let mut delta: f64 = 0.0;
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                let x: f64 = (0..mdp.num_actions())
                    .map(|a| {
                        let cont: f64 = mdp.transition(s, a).iter().zip(&v).map(|(p, w)| p * w).sum();
                        pi[s][a] * (mdp.reward(s, a) + mdp.gamma() * cont)
                    })
                    .sum();
                delta = delta.max((x - v[s]).abs());
                x
            })
            .collect();
        v = next;
        if delta < 1e-14 {
            return v;
        }
    }
}

pub fn start_return(mdp: &MdpSpec, v: &[f64]) -> f64 {
    mdp.initial_dist().iter().zip(v).map(|(m, x)| m * x).sum()
}

/// Every deterministic policy, as action indices.
pub fn all_deterministic(ns: usize, na: usize) -> Vec<Vec<usize>> {
    let total = na.pow(ns as u32);
    (0..total)
        .map(|mut k| {
            (0..ns)
                .map(|_| {
                    let a = k % na;
                    k /= na;
                    a
                })
                .collect()
        })
        .collect()
}

pub fn one_hot(actions: &[usize], na: usize) -> ActionProbs {
    actions
        .iter()
        .map(|&a| {
            let mut row = vec![0.0; na];
            row[a] = 1.0;
            row
        })
        .collect()
}
