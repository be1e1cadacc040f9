//! Observation-novelty bonuses.
//!
//! Each cooperative agent keeps an episode-scoped buffer of its own local
//! observations. A step's bonus is computed against what the buffer held
//! *before* that step's observation is stored:
//!
//! - count-based: `1 / (n + 1)` where `n` is how often the quantized cell was
//!   seen before — repeated visits to one cell accumulate the harmonic series;
//! - k-nearest-neighbor: `ln(D_k + 1)` where `D_k` is the Euclidean distance
//!   to the k-th nearest stored observation (when fewer than `k` are stored,
//!   the farthest stored one; an empty buffer gives 0).
//!
//! Shaping only ever touches the reward stream fed to advantage estimation;
//! constraint cost streams are never shaped, and the bonus is computed after
//! the episode's actions have been sampled, so it cannot influence the
//! collection-time action distribution.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Which novelty estimator a buffer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Count visits of quantized observation cells. Level 1 splits every
    /// component in two at the midpoint of its range; level `q` uses `2^q`
    /// uniform bins. Doubling keeps the grids nested, so coarsening a level
    /// can only merge cells — never split them.
    Count { quantization: u8 },
    /// Distance to the k-th nearest stored observation.
    Knn { k: usize },
}

/// How the per-step bonus enters the training reward stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mixing {
    /// The shaped reward is the bonus alone (the task reward is still logged).
    Pure,
    /// The shaped reward is `extrinsic + psi * bonus`.
    Mixed { psi: f64 },
}

/// Combine an extrinsic step reward with the (already β-weighted, summed over
/// agents) bonus for that step.
///
/// A vanished bonus term is an exact no-op: adding a literal `0.0` would
/// still flip `-0.0` rewards to `+0.0`, which breaks the bit-level
/// equivalence between a zero-weight mixed run and an unshaped one.
pub fn shape_step<R: Real>(extrinsic: R, bonus: R, mixing: Mixing) -> R {
    match mixing {
        Mixing::Pure => bonus,
        Mixing::Mixed { psi } => {
            let scaled = real::<R>(psi) * bonus;
            if scaled == R::zero() {
                extrinsic
            } else {
                extrinsic + scaled
            }
        }
    }
}

/// Per-agent, episode-scoped observation store.
#[derive(Debug, Clone)]
pub struct ObservationBuffer<R> {
    estimator: Estimator,
    /// Per-component `(low, high)` range, used by quantization.
    bounds: Vec<(R, R)>,
    stored: Vec<Vec<R>>,
    cell_counts: HashMap<Vec<u8>, u32>,
}

impl<R: Real> ObservationBuffer<R> {
    pub fn new(estimator: Estimator, bounds: Vec<(R, R)>) -> Result<Self> {
        match estimator {
            Estimator::Count { quantization } => {
                if !(1..=8).contains(&quantization) {
                    return Err(Error::config("count estimator needs quantization level in 1..=8"));
                }
            }
            Estimator::Knn { k } => {
                if k == 0 {
                    return Err(Error::config("knn estimator needs k >= 1"));
                }
            }
        }
        if bounds.iter().any(|(lo, hi)| !(*hi > *lo)) {
            return Err(Error::config("observation bounds must satisfy low < high"));
        }
        Ok(Self { estimator, bounds, stored: Vec::new(), cell_counts: HashMap::new() })
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    /// Forget everything (called at episode boundaries).
    pub fn clear(&mut self) {
        self.stored.clear();
        self.cell_counts.clear();
    }

    /// Bonus for `obs` against the current contents, without storing it.
    pub fn peek(&self, obs: &[R]) -> R {
        assert_eq!(obs.len(), self.bounds.len(), "observation length must match bounds");
        match self.estimator {
            Estimator::Count { quantization } => {
                let key = self.quantize(obs, quantization);
                let n = self.cell_counts.get(&key).copied().unwrap_or(0);
                R::one() / real::<R>(f64::from(n) + 1.0)
            }
            Estimator::Knn { k } => {
                if self.stored.is_empty() {
                    return R::zero();
                }
                let mut dists: Vec<R> = self.stored.iter().map(|s| euclidean(s, obs)).collect();
                dists.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
                let idx = k.min(dists.len()) - 1;
                (dists[idx] + R::one()).ln()
            }
        }
    }

    /// Bonus for `obs`, then store it.
    pub fn observe(&mut self, obs: &[R]) -> R {
        let bonus = self.peek(obs);
        if let Estimator::Count { quantization } = self.estimator {
            let key = self.quantize(obs, quantization);
            *self.cell_counts.entry(key).or_insert(0) += 1;
        }
        self.stored.push(obs.to_vec());
        bonus
    }

    /// Map an observation to its cell: `2^q` uniform bins per component over
    /// the declared range, out-of-range values clamped to the edge bins.
    fn quantize(&self, obs: &[R], quantization: u8) -> Vec<u8> {
        let bins = 1u16 << quantization;
        obs.iter()
            .zip(self.bounds.iter())
            .map(|(x, (lo, hi))| {
                let norm = ((*x - *lo) / (*hi - *lo)).max(R::zero()).min(R::one());
                let bin = (norm.to_f64c() * f64::from(bins)).floor() as u16;
                bin.min(bins - 1) as u8
            })
            .collect()
    }
}

fn euclidean<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = R::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_bounds(dim: usize) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); dim]
    }

    fn count_buffer(q: u8, dim: usize) -> ObservationBuffer<f64> {
        ObservationBuffer::new(Estimator::Count { quantization: q }, unit_bounds(dim)).unwrap()
    }

    #[test]
    fn first_visit_pays_one() {
        let mut buf = count_buffer(1, 3);
        assert_eq!(buf.observe(&[0.1, 0.9, 0.4]), 1.0);
    }

    #[test]
    fn third_identical_visit_pays_one_third() {
        let mut buf = count_buffer(1, 2);
        let obs = [0.2, 0.7];
        assert_eq!(buf.observe(&obs), 1.0);
        assert_eq!(buf.observe(&obs), 0.5);
        assert_eq!(buf.observe(&obs), 1.0 / 3.0);
    }

    #[test]
    fn distinct_cells_each_pay_one_first() {
        let mut buf = count_buffer(1, 1);
        // Level 1 = two bins split at the midpoint 0.5.
        assert_eq!(buf.observe(&[0.2]), 1.0);
        assert_eq!(buf.observe(&[0.8]), 1.0);
        // 0.4 lands in the same (low) bin as 0.2.
        assert_eq!(buf.observe(&[0.4]), 0.5);
    }

    #[test]
    fn repeated_cell_totals_are_exactly_harmonic() {
        // n visits of one cell accumulate 1 + 1/2 + ... + 1/n, in that order,
        // so the float sums agree term for term.
        let mut buf = count_buffer(1, 2);
        let obs = [0.6, 0.6];
        let n = 7;
        let mut total = 0.0;
        for _ in 0..n {
            total += buf.observe(&obs);
        }
        let mut oracle = 0.0;
        for i in 1..=n {
            oracle += 1.0 / f64::from(i);
        }
        assert_eq!(total, oracle);
    }

    #[test]
    fn knn_on_empty_buffer_is_zero() {
        let buf: ObservationBuffer<f64> =
            ObservationBuffer::new(Estimator::Knn { k: 5 }, unit_bounds(2)).unwrap();
        assert_eq!(buf.peek(&[0.5, 0.5]), 0.0);
    }

    #[test]
    fn knn_with_k_copies_of_the_query_is_zero() {
        let mut buf: ObservationBuffer<f64> =
            ObservationBuffer::new(Estimator::Knn { k: 3 }, unit_bounds(2)).unwrap();
        for _ in 0..3 {
            buf.observe(&[0.4, 0.4]);
        }
        assert_eq!(buf.peek(&[0.4, 0.4]), 0.0);
    }

    #[test]
    fn knn_distance_e_minus_one_pays_one() {
        let mut buf: ObservationBuffer<f64> =
            ObservationBuffer::new(Estimator::Knn { k: 1 }, vec![(0.0, 4.0); 1]).unwrap();
        buf.observe(&[0.0]);
        let d = std::f64::consts::E - 1.0;
        assert!((buf.peek(&[d]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn underpopulated_buffer_uses_the_farthest_entry() {
        let mut buf: ObservationBuffer<f64> =
            ObservationBuffer::new(Estimator::Knn { k: 5 }, unit_bounds(1)).unwrap();
        buf.observe(&[0.1]);
        buf.observe(&[0.3]);
        // Two entries, k = 5: distance to the farther one (0.1 from 0.4... the
        // farthest of {0.3, 0.1} from query 0.4 is 0.1, at distance 0.3).
        let expect = (0.3f64 + 1.0).ln();
        assert!((buf.peek(&[0.4]) - expect).abs() < 1e-12);
    }

    #[test]
    fn knn_matches_brute_force_sort_bit_for_bit() {
        let mut rng = crate::rng::stream(99, "knn-oracle", 0, 0);
        for case in 0..20 {
            let dim = 1 + (case % 8);
            let n = 5 + (case * 37) % 200;
            let k = if case % 2 == 0 { 5 } else { 10 };
            let mut buf: ObservationBuffer<f64> =
                ObservationBuffer::new(Estimator::Knn { k }, unit_bounds(dim)).unwrap();
            let mut stored = Vec::new();
            for _ in 0..n {
                let obs: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
                buf.observe(&obs);
                stored.push(obs);
            }
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
            // Oracle: all pairwise distances, full ascending sort, k-th pick.
            let mut dists: Vec<f64> = stored
                .iter()
                .map(|s| {
                    let mut acc = 0.0;
                    for (a, b) in s.iter().zip(query.iter()) {
                        acc += (a - b) * (a - b);
                    }
                    acc.sqrt()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = (dists[k.min(n) - 1] + 1.0).ln();
            assert_eq!(buf.peek(&query).to_bits(), oracle.to_bits(), "case {case}");
        }
    }

    #[test]
    fn shaping_arithmetic() {
        assert_eq!(shape_step(2.0, 1.0, Mixing::Mixed { psi: 0.3 }), 2.3);
        assert_eq!(shape_step(2.0, 1.0, Mixing::Pure), 1.0);
        assert_eq!(shape_step(-1.5, 0.0, Mixing::Mixed { psi: 0.3 }), -1.5);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        assert!(ObservationBuffer::<f64>::new(Estimator::Count { quantization: 0 }, unit_bounds(1)).is_err());
        assert!(ObservationBuffer::<f64>::new(Estimator::Count { quantization: 9 }, unit_bounds(1)).is_err());
        assert!(ObservationBuffer::<f64>::new(Estimator::Knn { k: 0 }, unit_bounds(1)).is_err());
        assert!(ObservationBuffer::<f64>::new(Estimator::Knn { k: 1 }, vec![(1.0, 1.0)]).is_err());
    }

    #[test]
    fn out_of_range_observations_clamp_to_edge_cells() {
        let mut buf = count_buffer(1, 1);
        assert_eq!(buf.observe(&[-3.0]), 1.0);
        // -3.0 and 0.1 land in the same low cell.
        assert_eq!(buf.observe(&[0.1]), 0.5);
        assert_eq!(buf.observe(&[7.0]), 1.0);
    }

    #[test]
    fn clear_resets_novelty() {
        let mut buf = count_buffer(1, 1);
        assert_eq!(buf.observe(&[0.2]), 1.0);
        buf.clear();
        assert_eq!(buf.len(), 0);
        assert_eq!(buf.observe(&[0.2]), 1.0);
    }

    #[test]
    fn spread_trajectories_earn_more_than_clustered_ones() {
        let mut rng = crate::rng::stream(5, "discrimination", 0, 0);
        let total = |points: &[Vec<f64>], est: Estimator| -> f64 {
            let mut buf: ObservationBuffer<f64> = ObservationBuffer::new(est, unit_bounds(2)).unwrap();
            points.iter().map(|p| buf.observe(p)).sum()
        };
        let spread: Vec<Vec<f64>> =
            (0..60).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let clustered: Vec<Vec<f64>> =
            (0..60).map(|_| vec![0.5 + rng.gen_range(-0.01..0.01), 0.5 + rng.gen_range(-0.01..0.01)]).collect();
        for est in [Estimator::Count { quantization: 3 }, Estimator::Knn { k: 5 }] {
            assert!(
                total(&spread, est) > total(&clustered, est),
                "{est:?} must pay more for coverage"
            );
        }
    }

    proptest! {
        /// Coarser quantization merges cells, so per-trajectory count totals
        /// can only go down.
        #[test]
        fn coarser_quantization_never_pays_more(
            seed in 0u64..500,
            len in 1usize..60,
            q_lo in 1u8..4,
            q_gap in 1u8..4,
        ) {
            let q_hi = q_lo + q_gap;
            let mut rng = crate::rng::stream(seed, "quant-mono", 0, 0);
            let traj: Vec<Vec<f64>> =
                (0..len).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
            let total = |q: u8| -> f64 {
                let mut buf = count_buffer(q, 2);
                traj.iter().map(|p| buf.observe(p)).sum()
            };
            prop_assert!(total(q_lo) <= total(q_hi) + 1e-12);
        }
    }
}
