use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block-wise split settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub n_blocks: usize,
    pub train_fraction: f64,
    /// Total training slices to keep, sampled evenly across blocks.
    pub slice_limit: Option<usize>,
    /// Explicit test slices, removed before splitting.
    pub test_slices: Vec<usize>,
    /// Evenly spaced test slices used when `test_slices` is empty.
    pub test_count: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_blocks: 10,
            train_fraction: 0.7,
            slice_limit: None,
            test_slices: Vec::new(),
            test_count: 40,
        }
    }
}

/// Disjoint slice sets covering `0..num_slices`. `unused` holds training
/// candidates dropped by a slice limit.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub unused: Vec<usize>,
}

/// `count` indices spread evenly over `0..num_slices`, each at the centre
/// of its stratum.
pub fn evenly_spaced(num_slices: usize, count: usize) -> Result<Vec<usize>> {
    if count > num_slices {
        return Err(Error::config(format!(
            "cannot pick {count} test slices out of {num_slices}"
        )));
    }
    Ok((0..count).map(|i| (2 * i + 1) * num_slices / (2 * count)).collect())
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("split.n_blocks must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "split.train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// The test slice indices this config selects.
    pub fn resolve_test(&self, num_slices: usize) -> Result<Vec<usize>> {
        if self.test_slices.is_empty() {
            return evenly_spaced(num_slices, self.test_count);
        }
        let mut t = self.test_slices.clone();
        t.sort_unstable();
        t.dedup();
        if let Some(&bad) = t.iter().find(|&&i| i >= num_slices) {
            return Err(Error::config(format!(
                "split.test_slices contains {bad}, volume has {num_slices} slices"
            )));
        }
        Ok(t)
    }
}

/// Removes test slices, cuts the rest into contiguous blocks (remainder to
/// the earliest blocks) and sends the first `floor(fraction * size)` slices
/// of each block to training, the rest to validation.
pub fn split_blocks(num_slices: usize, cfg: &SplitConfig, seed: u64) -> Result<Split> {
    cfg.validate()?;
    let test = cfg.resolve_test(num_slices)?;
    let rest: Vec<usize> = (0..num_slices).filter(|i| test.binary_search(i).is_err()).collect();
    let n = cfg.n_blocks;
    if rest.len() < n {
        return Err(Error::config(format!(
            "{} non-test slices cannot fill {n} blocks",
            rest.len()
        )));
    }
    if let Some(x) = cfg.slice_limit {
        if x > rest.len() {
            return Err(Error::config(format!(
                "split.slice_limit {x} exceeds the {} non-test slices",
                rest.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, extra) = (rest.len() / n, rest.len() % n);
    let mut split = Split {
        test,
        ..Default::default()
    };
    let mut start = 0;
    for b in 0..n {
        let size = base + usize::from(b < extra);
        let block = &rest[start..start + size];
        start += size;
        let cut = (cfg.train_fraction * size as f64 + 1e-9).floor() as usize;
        let (candidates, val) = block.split_at(cut);
        split.val.extend_from_slice(val);
        match cfg.slice_limit {
            None => split.train.extend_from_slice(candidates),
            Some(x) => {
                let per = x / n;
                if per > candidates.len() {
                    return Err(Error::config(format!(
                        "split.slice_limit {x} asks for {per} training slices in block {b}, which has {}",
                        candidates.len()
                    )));
                }
                let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), per).into_vec();
                picked.sort_unstable();
                for (i, &s) in candidates.iter().enumerate() {
                    if picked.binary_search(&i).is_ok() {
                        split.train.push(s);
                    } else {
                        split.unused.push(s);
                    }
                }
            }
        }
    }
    Ok(split)
}
