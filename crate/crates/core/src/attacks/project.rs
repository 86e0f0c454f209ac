//! Ball projections and the uniform-in-ball sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::envs::Norm;

/// Nearest point of `{x : ‖x − center‖ ≤ radius}`.
pub fn project_to_ball(x: &[f64], center: &[f64], radius: f64, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::LInf => x
            .iter()
            .zip(center)
            .map(|(xi, ci)| xi.clamp(ci - radius, ci + radius))
            .collect(),
        Norm::L2 => {
            let d = norm.distance(x, center);
            if d <= radius {
                return x.to_vec();
            }
            let scale = radius / d;
            x.iter().zip(center).map(|(xi, ci)| ci + (xi - ci) * scale).collect()
        }
    }
}

pub fn clip_unit_box(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Uniform sample from the `ε`-ball about `obs` (box for l∞; direction
/// times `radius^{1/d}` for l2).
pub fn random_attack_step(observation: &[f64], epsilon: f64, norm: Norm, seed: u64) -> Vec<f64> {
    if epsilon == 0.0 {
        return observation.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match norm {
        Norm::LInf => observation
            .iter()
            .map(|o| o + epsilon * (2.0 * rng.gen::<f64>() - 1.0))
            .collect(),
        Norm::L2 => {
            let d = observation.len();
            let mut dir: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let len = Norm::L2.length(&dir);
            if len == 0.0 {
                return observation.to_vec();
            }
            let r = epsilon * rng.gen::<f64>().powf(1.0 / d as f64);
            dir.iter_mut().for_each(|v| *v *= r / len);
            observation.iter().zip(&dir).map(|(o, v)| o + v).collect()
        }
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the logarithm finite
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Stable 64-bit mix of a seed and an observation, used to derive per-call
/// seeds for stochastic attackers.
pub(crate) fn observation_seed(seed: u64, observation: &[f64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in observation {
        h ^= v.to_bits();
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_projection_normalizes() {
        let p = project_to_ball(&[3.0, 4.0], &[0.0, 0.0], 1.0, Norm::L2);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn projection_of_feasible_point_is_identity() {
        for norm in [Norm::L2, Norm::LInf] {
            let x = [0.3, 0.45];
            assert_eq!(project_to_ball(&x, &[0.25, 0.5], 0.1, norm), x.to_vec());
        }
    }

    #[test]
    fn random_step_is_reproducible_and_bounded() {
        let obs = [0.5, 0.5, 0.5];
        for norm in [Norm::L2, Norm::LInf] {
            let a = random_attack_step(&obs, 0.2, norm, 42);
            assert_eq!(a, random_attack_step(&obs, 0.2, norm, 42));
            assert!(norm.distance(&a, &obs) <= 0.2 + 1e-12);
        }
        assert_eq!(random_attack_step(&obs, 0.0, Norm::L2, 1), obs.to_vec());
    }
}
