use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::task::{Cell, EnvKind, TaskLayout, TaskSpec};
use crate::error::{Error, Result};

/// Per-cell spawn probabilities `p(x) ∝ exp(alpha * d(x, c))` on an
/// `n x n` grid, with `d` the Euclidean distance to the grid center.
///
/// Negative `alpha` concentrates mass at the center, positive `alpha` at
/// the edges, zero is uniform.
#[derive(Debug, Clone)]
pub struct SpawnLaw {
    size: usize,
    alpha: f64,
    probs: Vec<f64>,
}

impl SpawnLaw {
    pub fn new(size: usize, alpha: f64) -> Result<Self> {
        if size < 3 {
            return Err(Error::Sampling(format!("grid size {size} < 3")));
        }
        if !alpha.is_finite() {
            return Err(Error::Sampling(format!("non-finite spawn exponent {alpha}")));
        }
        let c = (size as f64 - 1.0) / 2.0;
        let weights: Vec<f64> = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                (alpha * ((x - c).powi(2) + (y - c).powi(2)).sqrt()).exp()
            })
            .collect();
        let z: f64 = weights.iter().sum();
        Ok(SpawnLaw {
            size,
            alpha,
            probs: weights.into_iter().map(|w| w / z).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Probabilities indexed row-major by `y * size + x`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, cell: Cell) -> f64 {
        self.probs[cell.y * self.size + cell.x]
    }

    pub fn cell(&self, index: usize) -> Cell {
        Cell {
            x: index % self.size,
            y: index / self.size,
        }
    }

    pub fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.probs).expect("spawn weights are positive")
    }

    /// One draw from the law.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Cell {
        self.cell(self.sampler().sample(rng))
    }

    /// Total-variation distance between the empirical histogram of
    /// `counts` and the law.
    pub fn tv_distance(&self, counts: &[u64]) -> f64 {
        let n: u64 = counts.iter().sum();
        0.5 * counts
            .iter()
            .zip(&self.probs)
            .map(|(c, p)| (*c as f64 / n as f64 - p).abs())
            .sum::<f64>()
    }
}

const MAX_RETRIES: usize = 10_000;

/// Samples one task.
///
/// Gridworld: the goal is one draw from the spawn law and obstacles are
/// further draws, redrawn on collision (sampling without replacement). The
/// agent starts at the free cell closest to the grid center.
///
/// Velocity: the hidden target is `0.75 * m` with `m ~ U[0.5, 2.0]`; the
/// speed limit is 1.
pub fn sample_task(kind: EnvKind, alpha: f64, grid_size: usize, n_obstacles: usize, seed: u64) -> Result<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = match kind {
        EnvKind::Gridworld => {
            let law = SpawnLaw::new(grid_size, alpha)?;
            let cells = grid_size * grid_size;
            if n_obstacles + 2 >= cells {
                return Err(Error::Sampling(format!(
                    "{n_obstacles} obstacles do not fit a {grid_size}x{grid_size} grid"
                )));
            }
            let sampler = law.sampler();
            let goal = law.cell(sampler.sample(&mut rng));
            let mut obstacles = Vec::with_capacity(n_obstacles);
            let mut retries = 0;
            while obstacles.len() < n_obstacles {
                let c = law.cell(sampler.sample(&mut rng));
                if c != goal && !obstacles.contains(&c) {
                    obstacles.push(c);
                } else {
                    retries += 1;
                    if retries > MAX_RETRIES {
                        return Err(Error::Sampling("no feasible obstacle layout after max retries".into()));
                    }
                }
            }
            obstacles.sort();
            let center = (grid_size as f64 - 1.0) / 2.0;
            let start = (0..cells)
                .map(|i| law.cell(i))
                .filter(|c| *c != goal && !obstacles.contains(c))
                .min_by(|a, b| {
                    let da = (a.x as f64 - center).powi(2) + (a.y as f64 - center).powi(2);
                    let db = (b.x as f64 - center).powi(2) + (b.y as f64 - center).powi(2);
                    da.total_cmp(&db)
                })
                .ok_or_else(|| Error::Sampling("no free start cell".into()))?;
            TaskLayout::Grid {
                size: grid_size,
                start,
                goal,
                obstacles,
            }
        }
        EnvKind::Velocity => TaskLayout::Velocity {
            target: 0.75 * rng.random_range(0.5..=2.0),
            limit: 1.0,
        },
    };
    Ok(TaskSpec { alpha, seed, layout })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_is_uniform() {
        let law = SpawnLaw::new(5, 0.0).unwrap();
        for p in law.probs() {
            assert!((p - 1.0 / 25.0).abs() < 1e-15);
        }
    }

    #[test]
    fn center_to_corner_ratio() {
        // Brute-force normalizer over all 25 cells, independent of SpawnLaw.
        let alpha = -0.5;
        let mut z = 0.0;
        for y in 0..5 {
            for x in 0..5 {
                let d = (((x as f64) - 2.0).powi(2) + ((y as f64) - 2.0).powi(2)).sqrt();
                z += (alpha * d).exp();
            }
        }
        let p_center = 1.0 / z;
        let p_corner = (alpha * 8f64.sqrt()).exp() / z;
        let law = SpawnLaw::new(5, alpha).unwrap();
        assert!((law.prob(Cell { x: 2, y: 2 }) - p_center).abs() < 1e-15);
        assert!((law.prob(Cell { x: 0, y: 4 }) - p_corner).abs() < 1e-15);
        let ratio = law.prob(Cell { x: 2, y: 2 }) / law.prob(Cell { x: 4, y: 0 });
        assert!((ratio - (0.5 * 2.0 * 2f64.sqrt()).exp()).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_matches_law_on_small_grid() {
        let law = SpawnLaw::new(5, -0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampler = law.sampler();
        let mut counts = vec![0u64; 25];
        for _ in 0..100_000 {
            counts[sampler.sample(&mut rng)] += 1;
        }
        assert!(law.tv_distance(&counts) <= 0.01);
    }

    #[test]
    fn task_invariants_hold() {
        for seed in 0..200 {
            let t = sample_task(EnvKind::Gridworld, 0.5, 5, 4, seed).unwrap();
            let TaskLayout::Grid { start, goal, obstacles, .. } = &t.layout else { unreachable!() };
            assert!(!obstacles.contains(goal));
            assert!(!obstacles.contains(start));
            assert_ne!(start, goal);
            assert_eq!(obstacles.len(), 4);
        }
    }

    #[test]
    fn infeasible_layouts_are_rejected() {
        assert!(matches!(sample_task(EnvKind::Gridworld, 0.0, 3, 7, 0), Err(Error::Sampling(_))));
        assert!(matches!(sample_task(EnvKind::Gridworld, 0.0, 2, 0, 0), Err(Error::Sampling(_))));
    }
}
