//! Noisy schema sampling: `k ~ U{0..⌊β·|S|⌋}` non-GT columns drawn without
//! replacement, weighted by the model's own first-epoch `ŷ`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SamplerError {
    #[error("no cached weights for example {0}")]
    MissingCacheEntry(u64),
    #[error("weights for example {0} were already recorded")]
    DuplicateCacheEntry(u64),
}

/// How noisy columns are chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// No noisy columns (`k = 0`).
    None,
    /// Uniform draws from the non-GT pool.
    Random,
    /// Draws weighted by cached `ŷ`.
    ConfusionAware,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NoiseDraw {
    /// Column indices in draw order.
    pub chosen: Vec<usize>,
    pub k: usize,
}

/// Deterministic generator for one (example, epoch) pair.
pub fn example_rng(seed: u64, example_id: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&example_id.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    key[24..].copy_from_slice(b"noisyNSS");
    ChaCha8Rng::from_seed(key)
}

/// `k` uniform on `{0, 1, …, ⌊β·num_columns⌋}`.
pub fn draw_noise_count<R: Rng + ?Sized>(num_columns: usize, beta: f64, rng: &mut R) -> usize {
    let bound = noise_bound(num_columns, beta);
    rng.random_range(0..=bound)
}

pub fn noise_bound(num_columns: usize, beta: f64) -> usize {
    // small epsilon so that e.g. 0.2 * 10 lands on 2, not 1.9999…
    num_traits::Float::floor(beta * num_columns as f64 + 1e-9).max(0.0) as usize
}

/// Sequential weighted draws without replacement: each draw picks an item
/// with probability `w / Σ remaining w`, then removes it. `k` is clamped to
/// the pool size; an all-zero remainder falls back to uniform.
pub fn sample_noisy<R: Rng + ?Sized>(pool: &[usize], weights: &[f64], k: usize, rng: &mut R) -> NoiseDraw {
    assert_eq!(pool.len(), weights.len(), "one weight per pool entry");
    let k = k.min(pool.len());
    let mut items: Vec<(usize, f64)> = pool.iter().copied().zip(weights.iter().map(|w| w.max(0.0))).collect();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = items.iter().map(|x| x.1).sum();
        let pick = if total > 0.0 && total.is_finite() {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, it) in items.iter().enumerate() {
                acc += it.1;
                if u < acc && it.1 > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave u ≥ acc; take the last positive item
            pick.unwrap_or_else(|| items.iter().rposition(|it| it.1 > 0.0).unwrap_or(items.len() - 1))
        } else {
            rng.random_range(0..items.len())
        };
        chosen.push(items.remove(pick).0);
    }
    NoiseDraw { chosen, k }
}

/// Per-example sampling weights captured in the first epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightCache {
    entries: BTreeMap<u64, Vec<f64>>,
}

impl WeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, example_id: u64, weights: Vec<f64>) -> Result<(), SamplerError> {
        if self.entries.contains_key(&example_id) {
            return Err(SamplerError::DuplicateCacheEntry(example_id));
        }
        self.entries.insert(example_id, weights);
        Ok(())
    }

    pub fn lookup(&self, example_id: u64) -> Result<&[f64], SamplerError> {
        self.entries.get(&example_id).map(Vec::as_slice).ok_or(SamplerError::MissingCacheEntry(example_id))
    }

    pub fn contains(&self, example_id: u64) -> bool {
        self.entries.contains_key(&example_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.entries.iter().map(|(&k, v)| (k, v.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_bounds() {
        let mut rng = example_rng(0, 0, 0);
        for _ in 0..200 {
            assert_eq!(draw_noise_count(5, 0.1, &mut rng), 0);
            assert_eq!(draw_noise_count(4, 0.2, &mut rng), 0);
            assert!(draw_noise_count(10, 0.2, &mut rng) <= 2);
        }
        assert_eq!(noise_bound(10, 0.2), 2);
    }

    #[test]
    fn draw_edges() {
        let mut rng = example_rng(1, 2, 3);
        assert!(sample_noisy(&[], &[], 3, &mut rng).chosen.is_empty());
        let mut all = sample_noisy(&[4, 7, 9], &[0.2, 0.5, 0.1], 5, &mut rng).chosen;
        all.sort();
        assert_eq!(all, [4, 7, 9]);
        let d = sample_noisy(&[4, 7], &[0.0, 0.0], 1, &mut rng);
        assert_eq!(d.chosen.len(), 1);
    }

    #[test]
    fn cache_contract() {
        let mut c = WeightCache::new();
        assert_eq!(c.lookup(3), Err(SamplerError::MissingCacheEntry(3)));
        c.record(3, alloc::vec![0.25, 0.5]).unwrap();
        assert_eq!(c.lookup(3).unwrap(), &[0.25, 0.5]);
        assert!(c.record(3, alloc::vec![]).is_err());
    }

    #[test]
    fn streams_differ() {
        let a: u64 = example_rng(1, 2, 1).random();
        let b: u64 = example_rng(1, 2, 2).random();
        let c: u64 = example_rng(1, 2, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
