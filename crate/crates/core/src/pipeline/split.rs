//! Seeded, label-stratified partition of patients into an extractor set, a
//! train/test split of the rest, and cross-validation folds over train.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub extractor_ids: Vec<String>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Partition of `train_ids`.
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    /// Train ids outside fold `k`.
    pub fn fold_train(&self, k: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    /// Ids that go through VOI extraction: everything but the extractor set.
    pub fn pool_ids(&self) -> Vec<String> {
        self.train_ids.iter().chain(&self.test_ids).cloned().collect()
    }

    /// Checks disjointness and coverage against the full id list.
    pub fn verify(&self, all_ids: &[String]) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("split plan: {m}")));
        let mut seen = HashSet::new();
        for id in self.extractor_ids.iter().chain(&self.train_ids).chain(&self.test_ids) {
            if !seen.insert(id.as_str()) {
                return fail(format!("{id} appears in two partitions"));
            }
        }
        let all: HashSet<&str> = all_ids.iter().map(String::as_str).collect();
        if seen != all {
            return fail("partitions do not cover the id list".into());
        }
        let mut in_folds = HashSet::new();
        for id in self.folds.iter().flatten() {
            if !in_folds.insert(id.as_str()) {
                return fail(format!("{id} appears in two folds"));
            }
        }
        let train: HashSet<&str> = self.train_ids.iter().map(String::as_str).collect();
        if in_folds != train {
            return fail("folds do not partition the train set".into());
        }
        Ok(())
    }
}

/// `extractor_n` ids go to the extractor set, `round(test_frac * rest)` of the
/// remainder to test and the rest to train, dealt into `folds` folds. Each
/// partition keeps the label ratio as closely as whole counts allow, and ids
/// keep their input order inside a partition.
pub fn make_split(
    ids: &[String],
    labels: &[u8],
    seed: u64,
    extractor_n: usize,
    test_frac: f64,
    folds: usize,
) -> Result<SplitPlan> {
    let sizing = |m: String| Err(Error::Sizing(m));
    if ids.len() != labels.len() {
        return sizing(format!("{} ids for {} labels", ids.len(), labels.len()));
    }
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return sizing(format!("test fraction {test_frac} must lie in (0, 1)"));
    }
    if folds < 2 {
        return sizing(format!("{folds} folds; need at least 2"));
    }
    let n = ids.len();
    if extractor_n >= n {
        return sizing(format!("extractor set of {extractor_n} leaves nothing from {n} ids"));
    }
    let rest = n - extractor_n;
    let n_test = (rest as f64 * test_frac).round() as usize;
    let n_train = rest - n_test;
    if n_test == 0 || n_train < folds {
        return sizing(format!(
            "{rest} ids after extraction give test {n_test} and train {n_train} for {folds} folds"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(Error::Validation(format!("label {l} for {}", ids[i])));
        }
        by_class[l as usize].push(i);
    }
    by_class.iter_mut().for_each(|c| c.shuffle(&mut rng));

    let take = |count: usize, pool: &mut [Vec<usize>; 2]| -> Vec<usize> {
        let total: usize = pool[0].len() + pool[1].len();
        let pos = if total == 0 {
            0
        } else {
            ((count * pool[1].len()) as f64 / total as f64).round() as usize
        };
        let pos = pos.clamp(count.saturating_sub(pool[0].len()), count.min(pool[1].len()));
        let mut out: Vec<usize> = pool[1].drain(..pos).collect();
        out.extend(pool[0].drain(..count - pos));
        out
    };
    let mut pool = by_class;
    let extractor = take(extractor_n, &mut pool);
    let test = take(n_test, &mut pool);
    // Deal positives then negatives round-robin so every fold is stratified.
    let train_order: Vec<usize> = pool[1].iter().chain(&pool[0]).copied().collect();
    let mut fold_idx = vec![Vec::new(); folds];
    for (j, &i) in train_order.iter().enumerate() {
        fold_idx[j % folds].push(i);
    }

    let named = |mut v: Vec<usize>| -> Vec<String> {
        v.sort_unstable();
        v.into_iter().map(|i| ids[i].clone()).collect()
    };
    let plan = SplitPlan {
        seed,
        extractor_ids: named(extractor),
        train_ids: named(train_order),
        test_ids: named(test),
        folds: fold_idx.into_iter().map(named).collect(),
    };
    plan.verify(ids)?;
    Ok(plan)
}
