//! Stratified hold-out splits and k-fold partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sample indices grouped by class, each group shuffled with `seed`.
fn shuffled_by_class(labels: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    groups
}

/// Splits sample indices into `(train, test)` keeping class proportions.
///
/// The test set holds `round(N·f)` samples. Each class first contributes
/// `floor(N_c·f)`; the remaining slots go one per class in order of largest
/// fractional remainder (ties by class index), so every class is within one
/// sample of its exact share. Both lists are sorted.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let groups = shuffled_by_class(labels, seed);
    for (c, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::Config(format!(
                "class {c} has {} samples; at least 2 are needed",
                g.len()
            )));
        }
    }
    let total = (labels.len() as f64 * test_fraction).round() as usize;
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * test_fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(take.iter().sum());
    for &c in &order {
        if remaining == 0 {
            break;
        }
        // keep at least one sample of every class for training
        if take[c] + 1 < groups[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }
    let mut train = Vec::with_capacity(labels.len());
    let mut test = Vec::with_capacity(total);
    for (g, &k) in groups.iter().zip(&take) {
        test.extend_from_slice(&g[..k]);
        train.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Partitions sample indices into `k` stratified folds.
///
/// Classes are dealt round-robin into folds with a counter that carries over
/// between classes, so both the fold sizes and every class's per-fold count
/// differ by at most one. Each fold is sorted.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} available samples",
            labels.len()
        )));
    }
    let groups = shuffled_by_class(labels, seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for g in &groups {
        for &i in g {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
