use rand::seq::SliceRandom;

use super::{Dataset, SegSample};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Fraction of a dataset held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Seeded 8:2 partition of dataset indices into a training pool and a test
/// set. The test set depends only on the dataset size and the seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub test: Vec<usize>,
    pub pool: Vec<usize>,
}

impl Partition {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        let test_len = (len as f64 * TEST_FRACTION).round() as usize;
        if test_len == 0 || test_len >= len {
            return Err(Error::Data(format!("dataset of {len} samples is too small to split")));
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut seed::rng(&[seed, stream::SPLIT]));
        let pool = order.split_off(test_len);
        Ok(Self { test: order, pool })
    }

    /// First `shots` entries of a seeded shuffle of the pool. Smaller shot
    /// counts are prefixes of larger ones under the same seed.
    pub fn draw(&self, shots: usize, seed: u64) -> Result<Vec<usize>> {
        if shots == 0 || shots > self.pool.len() {
            return Err(Error::Config(format!(
                "shots must be in 1..={}, got {shots}",
                self.pool.len()
            )));
        }
        let mut order = self.pool.clone();
        order.shuffle(&mut seed::rng(&[seed, stream::SHOTS]));
        order.truncate(shots);
        Ok(order)
    }
}

#[derive(Clone, Debug)]
pub struct FewShotSplit {
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

fn pick(ds: &Dataset, idx: &[usize]) -> Vec<SegSample> {
    idx.iter().map(|&i| ds.samples[i].clone()).collect()
}

/// `shots` training samples plus the shared 20% test partition.
pub fn few_shot_split(dataset: &Dataset, shots: usize, seed: u64) -> Result<FewShotSplit> {
    let part = Partition::new(dataset.len(), seed)?;
    let train = part.draw(shots, seed)?;
    Ok(FewShotSplit {
        train: pick(dataset, &train),
        test: pick(dataset, &part.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, DomainSpec};

    #[test]
    fn test_set_shared_across_shot_counts() {
        let ds = generate_domain(&DomainSpec::far_domain(32), 120, 1).unwrap();
        let a = few_shot_split(&ds, 3, 4).unwrap();
        let b = few_shot_split(&ds, 10, 4).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.test.len(), 24);
        assert_eq!(a.train[..], b.train[..3]);
        let c = few_shot_split(&ds, 5, 4).unwrap();
        let d = few_shot_split(&ds, 5, 4).unwrap();
        assert_eq!(c.train, d.train);
    }

    #[test]
    fn train_and_test_disjoint() {
        let p = Partition::new(120, 9).unwrap();
        assert_eq!(p.pool.len(), 96);
        let train = p.draw(96, 1).unwrap();
        assert!(train.iter().all(|i| !p.test.contains(i)));
    }

    #[test]
    fn too_many_shots_rejected() {
        let p = Partition::new(10, 0).unwrap();
        assert!(p.draw(9, 0).is_err());
        assert!(p.draw(8, 0).is_ok());
        assert!(p.draw(0, 0).is_err());
    }
}
