use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::numerics::rng::{child, Rng64};
use crate::numerics::Tensor;

pub const IMAGE_SIDE: usize = 8;
pub const NUM_CLASSES: usize = 2;

/// Images `[N, 1, 8, 8]` with labels in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed examples into a fresh batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut data = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![idx.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)?, labels))
    }

    /// Consecutive batches of at most `size` examples.
    pub fn chunks(&self, size: usize) -> Vec<Vec<usize>> {
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Blob-position task: a Gaussian blob sits in the left half (class 0) or
/// the right half (class 1) of the image, on top of pixel noise. Position is
/// only recoverable through padding effects, so deeper and wider receptive
/// fields classify better.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train: Split,
    pub val: Split,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobTask {
    pub blob_sigma: f64,
    pub pixel_noise: f64,
}

impl Default for BlobTask {
    fn default() -> Self {
        Self {
            blob_sigma: 1.0,
            pixel_noise: 0.4,
        }
    }
}

impl ToyDataset {
    pub fn generate(seed: u64, n_train: usize, n_val: usize) -> Result<Self> {
        Self::generate_with(seed, n_train, n_val, BlobTask::default())
    }

    pub fn generate_with(seed: u64, n_train: usize, n_val: usize, task: BlobTask) -> Result<Self> {
        Ok(Self {
            train: make_split(&mut child(seed, "dataset/train"), n_train, task)?,
            val: make_split(&mut child(seed, "dataset/val"), n_val, task)?,
        })
    }
}

fn make_split(rng: &mut Rng64, n: usize, task: BlobTask) -> Result<Split> {
    // alternating labels, then shuffled: class counts differ by at most one
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    labels.shuffle(rng);
    let side = IMAGE_SIDE as f64;
    let half = side / 2.0;
    let mut data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    for &label in &labels {
        let x0 = if label == 0 { 0.0 } else { half };
        let cx = x0 + 0.5 + rng.random::<f64>() * (half - 1.0);
        let cy = 0.5 + rng.random::<f64>() * (side - 1.0);
        let amp = 1.0 + 0.25 * (2.0 * rng.random::<f64>() - 1.0);
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let blob = amp * (-d2 / (2.0 * task.blob_sigma.powi(2))).exp();
                let noise: f64 = StandardNormal.sample(rng);
                data.push(blob + task.pixel_noise * noise);
            }
        }
    }
    Ok(Split {
        images: Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = ToyDataset::generate(1, 1024, 256).unwrap();
        let b = ToyDataset::generate(1, 1024, 256).unwrap();
        assert_eq!(a, b);
        for split in [&a.train, &a.val] {
            let ones = split.labels.iter().filter(|&&l| l == 1).count();
            assert!(ones.abs_diff(split.len() - ones) <= 1);
        }
        assert_eq!(a.train.images.shape(), [1024, 1, 8, 8]);
        assert_ne!(a.train, ToyDataset::generate(2, 1024, 256).unwrap().train);
    }

    #[test]
    fn blob_mass_is_on_the_labelled_side() {
        let clean = BlobTask {
            pixel_noise: 0.0,
            ..BlobTask::default()
        };
        let d = ToyDataset::generate_with(3, 200, 10, clean).unwrap();
        let mut correct = 0;
        for i in 0..d.train.len() {
            let img = &d.train.images.data()[i * 64..(i + 1) * 64];
            let (mut left, mut right) = (0.0, 0.0);
            for y in 0..8 {
                for x in 0..8 {
                    if x < 4 {
                        left += img[y * 8 + x];
                    } else {
                        right += img[y * 8 + x];
                    }
                }
            }
            correct += usize::from((right > left) == (d.train.labels[i] == 1));
        }
        assert_eq!(correct, 200);
    }
}
