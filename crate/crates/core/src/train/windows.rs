use crate::datastore::Dataset;
use crate::diffcore::Tensor;
use crate::rng::{permutation, Rng};

/// Trajectory indices used for fitting and for held-out losses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Split {
    /// Held-out trajectories, or the training ones when nothing is held out.
    pub fn eval(&self) -> &[usize] {
        if self.holdout.is_empty() {
            &self.train
        } else {
            &self.holdout
        }
    }
}

/// The last `round(fraction · count)` trajectories are held out (at least one
/// when `count ≥ 2` and `fraction > 0`).
pub fn split_trajectories(count: usize, fraction: f64) -> Split {
    let mut h = (fraction * count as f64).round() as usize;
    if fraction > 0.0 && count >= 2 {
        h = h.max(1);
    }
    h = h.min(count.saturating_sub(1));
    Split {
        train: (0..count - h).collect(),
        holdout: (count - h..count).collect(),
    }
}

/// Valid window start indices: each window reads samples `i..=i+τ`.
pub fn window_starts(steps: usize, tau: usize) -> std::ops::Range<usize> {
    0..(steps.saturating_sub(tau))
}

pub(crate) type Window = (usize, usize);

/// `count` windows from a fresh shuffle of every stride-1 window in `trajs`,
/// cycling when the pool is smaller.
pub(crate) fn sample_windows(rng: &mut Rng, trajs: &[usize], steps: usize, tau: usize, count: usize) -> Vec<Window> {
    let per = window_starts(steps, tau).len();
    let pool = trajs.len() * per;
    let order = permutation(rng, pool);
    (0..count)
        .map(|k| {
            let w = order[k % pool];
            (trajs[w / per], w % per)
        })
        .collect()
}

/// Up to `cap` windows evenly spaced over the pool, deterministic.
pub(crate) fn spread_windows(trajs: &[usize], steps: usize, tau: usize, cap: usize) -> Vec<Window> {
    let per = window_starts(steps, tau).len();
    let pool = trajs.len() * per;
    let take = pool.min(cap);
    (0..take)
        .map(|k| {
            let w = k * pool / take;
            (trajs[w / per], w % per)
        })
        .collect()
}

/// Window samples stacked along the batch axis.
pub(crate) struct WindowBatch {
    /// `τ + 1` tensors `[B, n]`.
    pub states: Vec<Tensor>,
    /// `τ` tensors `[B, m]`.
    pub actions: Vec<Tensor>,
}

impl WindowBatch {
    pub fn gather(data: &Dataset, wins: &[Window], tau: usize) -> Self {
        let (n, m, b) = (data.n(), data.m(), wins.len());
        let states = (0..=tau)
            .map(|k| {
                let rows = wins.iter().flat_map(|&(t, i)| data.state(t, i + k).iter().copied()).collect();
                Tensor::from_rows(b, n, rows)
            })
            .collect();
        let actions = (0..tau)
            .map(|k| {
                let rows = wins.iter().flat_map(|&(t, i)| data.action(t, i + k).iter().copied()).collect();
                Tensor::from_rows(b, m, rows)
            })
            .collect();
        Self { states, actions }
    }

    pub fn rows(&self) -> usize {
        self.states[0].rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn split_holds_out_the_tail() {
        let s = split_trajectories(50, 0.1);
        assert_eq!(s.train, (0..45).collect::<Vec<_>>());
        assert_eq!(s.holdout, (45..50).collect::<Vec<_>>());
        let s = split_trajectories(3, 0.1);
        assert_eq!(s.holdout, vec![2]);
        let s = split_trajectories(1, 0.1);
        assert!(s.holdout.is_empty());
        assert_eq!(s.eval(), &[0]);
        assert!(split_trajectories(5, 0.0).holdout.is_empty());
    }

    #[test]
    fn windows_stay_inside_trajectories() {
        let mut rng = seeded(1);
        let w = sample_windows(&mut rng, &[2, 5], 20, 16, 50);
        assert_eq!(w.len(), 50);
        for (t, i) in w {
            assert!(t == 2 || t == 5);
            assert!(i + 16 < 20);
        }
        assert_eq!(window_starts(20, 16), 0..4);
        let s = spread_windows(&[0, 1], 20, 16, 3);
        assert_eq!(s.len(), 3);
        assert_eq!(spread_windows(&[0], 20, 16, 100).len(), 4);
    }
}
