//! Per-epoch mini-batch order across tasks.

use rand::seq::SliceRandom;

use crate::rng;

/// Stream id of the task-interleaving shuffle; dataset shuffles use their
/// task index.
const INTERLEAVE_STREAM: u64 = u64::MAX;

/// Single-task batches of example indices, in training order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochSchedule {
    pub seed: u64,
    pub batches: Vec<(usize, Vec<usize>)>,
}

impl EpochSchedule {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Number of batches one epoch over a dataset of `n` examples produces.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Shuffled example order of dataset `task` in the epoch seeded by `seed`.
pub fn shuffled_indices(n: usize, task: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[task as u64]));
    order
}

/// Shuffles each dataset, cuts it into batches of `batch_size` (the last may
/// be short), and interleaves the batches of all datasets in a random order.
/// Each dataset's own batches keep their relative order.
pub fn build_epoch_schedule(sizes: &[usize], batch_size: usize, seed: u64) -> Result<EpochSchedule, String> {
    if batch_size == 0 {
        return Err("batch size must be positive".into());
    }
    if sizes.is_empty() {
        return Err("no datasets to schedule".into());
    }
    if let Some(t) = sizes.iter().position(|&n| n == 0) {
        return Err(format!("dataset {t} is empty"));
    }
    let mut per_task: Vec<std::vec::IntoIter<Vec<usize>>> = sizes
        .iter()
        .enumerate()
        .map(|(t, &n)| {
            shuffled_indices(n, t, seed)
                .chunks(batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
                .into_iter()
        })
        .collect();
    let mut order: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| std::iter::repeat_n(t, batches_per_epoch(n, batch_size)))
        .collect();
    order.shuffle(&mut rng::stream(seed, &[INTERLEAVE_STREAM]));
    let batches = order
        .into_iter()
        .map(|t| (t, per_task[t].next().expect("one batch per slot")))
        .collect();
    Ok(EpochSchedule { seed, batches })
}
