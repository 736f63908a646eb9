//! Brute-force shield distributions for random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Instance {
    pub rho: Vec<f64>,
    pub q_plus: Vec<f64>,
    pub budget: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct Expected {
    pub b_v: f64,
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
    pub fallback: bool,
    pub ties: Vec<usize>,
}

/// Random instances with up to 16 candidates. Some have quantized costs
/// (ties), some a budget below every cost (empty safe set).
pub fn instances(n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=16);
            let rho: Vec<f64> = if rng.random_bool(0.5) {
                vec![1.0; k]
            } else {
                let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.001..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            };
            let quantized = rng.random_bool(0.4);
            let q_plus: Vec<f64> = (0..k)
                .map(|_| {
                    if quantized {
                        rng.random_range(0..9) as f64 * 0.5
                    } else {
                        rng.random_range(0.0..5.0)
                    }
                })
                .collect();
            let qmin = q_plus.iter().copied().fold(f64::INFINITY, f64::min);
            let budget = if rng.random_bool(0.3) {
                qmin - rng.random_range(0.01..2.0)
            } else {
                rng.random_range(-1.0..6.0)
            };
            Instance {
                rho,
                q_plus,
                budget,
                beta: rng.random_range(0.2..3.0),
            }
        })
        .collect()
}

/// Direct evaluation: soft weights `rho * exp(-beta * max(0, Q+ - B))`,
/// hard weights `rho` restricted to `Q+ <= B`, else uniform on the argmin.
pub fn oracle(inst: &Instance) -> Expected {
    let k = inst.rho.len();
    let qmin = inst.q_plus.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = (0..k)
        .map(|i| inst.rho[i] * (-inst.beta * (inst.q_plus[i] - inst.budget).max(0.0)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    let soft = raw.iter().map(|w| w / z).collect();

    let safe: Vec<usize> = (0..k).filter(|&i| inst.q_plus[i] <= inst.budget).collect();
    let ties: Vec<usize> = (0..k).filter(|&i| inst.q_plus[i] <= qmin + 1e-9).collect();
    let mut hard = vec![0.0; k];
    let fallback = safe.is_empty();
    if fallback {
        for &i in &ties {
            hard[i] = 1.0 / ties.len() as f64;
        }
    } else {
        let mass: f64 = safe.iter().map(|&i| inst.rho[i]).sum();
        for &i in &safe {
            hard[i] = inst.rho[i] / mass;
        }
    }
    Expected {
        b_v: inst.budget - qmin,
        soft,
        hard,
        fallback,
        ties,
    }
}
