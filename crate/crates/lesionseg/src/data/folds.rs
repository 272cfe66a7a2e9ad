//! Deterministic k-fold splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Assignment of every sample id to one of `k` folds. Fold `i`'s validation
/// set is fold `i`; its training set is everything else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

/// Shuffle the (sorted) ids with the seed, then deal them round-robin, so
/// fold sizes differ by at most one.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Contract(format!("k-fold split needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Contract(format!(
            "cannot split {} ids into {k} folds",
            ids.len()
        )));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Contract("duplicate ids in fold split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let assignment = sorted.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldSplit { k, assignment, seed })
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn validation_ids(&self, fold: usize) -> Vec<String> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.clone()).collect()
    }

    pub fn training_ids(&self, fold: usize) -> Vec<String> {
        self.assignment.iter().filter(|(_, &f)| f != fold).map(|(id, _)| id.clone()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,fold\n");
        for (id, fold) in &self.assignment {
            writeln!(out, "{id},{fold}").expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, k: usize, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut assignment = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "id,fold" {
                    return Err(Error::Data(format!(
                        "{}: expected header 'id,fold', got '{line}'",
                        path.display()
                    )));
                }
                continue;
            }
            let Some((id, fold)) = line.split_once(',') else {
                return Err(Error::Data(format!("{}: malformed line '{line}'", path.display())));
            };
            let fold: usize = fold
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad fold index '{fold}'", path.display())))?;
            if fold >= k {
                return Err(Error::Data(format!(
                    "{}: fold {fold} out of range for k={k}",
                    path.display()
                )));
            }
            assignment.insert(id.to_string(), fold);
        }
        Ok(FoldSplit { k, assignment, seed })
    }
}
