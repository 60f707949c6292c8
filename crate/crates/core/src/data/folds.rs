use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream;

/// A `k`-way partition of dataset indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test_indices(&self, fold: usize) -> Result<&[usize]> {
        self.folds
            .get(fold)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Usage(format!("fold {fold} out of range (k = {})", self.k())))
    }

    /// Every index outside `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Result<Vec<usize>> {
        self.test_indices(fold)?;
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        out.sort_unstable();
        Ok(out)
    }
}

/// Shuffles each class with a seeded stream and deals it round-robin into
/// `k` folds. The dealing position carries over from one class to the next,
/// which keeps fold sizes within one of each other.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Validation(format!("k-fold needs k >= 2, got {k}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("label {bad} is not binary")));
    }
    if labels.len() < k {
        return Err(Error::Validation(format!("{} samples cannot fill {k} folds", labels.len())));
    }
    let mut rng = stream(seed, 0);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [1u8, 0] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::Validation(format!("class {class} has no samples")));
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { seed, folds })
}
