use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, WaferRun};
use crate::error::{Error, Result};

/// Disjoint partitions used by the few-shot protocol.
#[derive(Clone, Debug)]
pub struct Partitions {
    pub pretrain: Vec<WaferRun>,
    pub shot_pool: Vec<WaferRun>,
    pub test: Vec<WaferRun>,
}

impl Partitions {
    /// Pretrain and shot pool together: every labeled run outside the test set.
    pub fn train(&self) -> Vec<WaferRun> {
        self.pretrain.iter().chain(&self.shot_pool).cloned().collect()
    }
}

fn floor_count(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Distributes `total` over groups proportionally to `sizes` (largest remainder).
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes.iter().map(|&s| total as f64 * s as f64 / n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(counts.iter().sum::<usize>());
    for i in order {
        if left == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Mode-stratified, seeded split.
///
/// `floor(train_frac·n)` runs are for training (the rest is test), and
/// `floor(pretrain_frac·n_train)` of those are for pretraining; the remainder
/// becomes the shot pool.
pub fn split(runs: Vec<WaferRun>, train_frac: f64, pretrain_frac: f64, seed: u64) -> Result<Partitions> {
    for (name, f) in [("train_frac", train_frac), ("pretrain_frac", pretrain_frac)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidArgument(format!("{name} must be in (0, 1), got {f}")));
        }
    }
    let n = runs.len();
    let n_train = floor_count(train_frac, n);
    let n_pretrain = floor_count(pretrain_frac, n_train);

    let mut by_mode: Vec<Vec<WaferRun>> = vec![Vec::new(); Mode::ALL.len()];
    for run in runs {
        let m = Mode::ALL.iter().position(|&m| m == run.mode).unwrap();
        by_mode[m].push(run);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in &mut by_mode {
        group.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        group.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = by_mode.iter().map(Vec::len).collect();
    let test_counts = apportion(n - n_train, &sizes);
    let train_sizes: Vec<usize> = sizes.iter().zip(&test_counts).map(|(s, t)| s - t).collect();
    let pretrain_counts = apportion(n_pretrain, &train_sizes);

    let mut parts = Partitions { pretrain: Vec::new(), shot_pool: Vec::new(), test: Vec::new() };
    for ((group, &nt), &np) in by_mode.into_iter().zip(&test_counts).zip(&pretrain_counts) {
        let mut it = group.into_iter();
        parts.test.extend(it.by_ref().take(nt));
        parts.pretrain.extend(it.by_ref().take(np));
        parts.shot_pool.extend(it);
    }
    for (name, p) in [("pretrain", &parts.pretrain), ("shot_pool", &parts.shot_pool), ("test", &parts.test)] {
        if p.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{name} partition would be empty ({n} runs, train_frac {train_frac}, pretrain_frac {pretrain_frac})"
            )));
        }
    }
    Ok(parts)
}
