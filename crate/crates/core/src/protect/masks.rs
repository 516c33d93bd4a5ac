use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A random partition of the spatial positions of a `(c, h, w)` image into
/// `I` balanced groups. Mask `j` is 0 where group `j` gets replaced and 1
/// elsewhere, broadcast over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSchedule {
    shape: [usize; 3],
    groups: Vec<Vec<usize>>,
    cursor: usize,
}

pub fn gen_mask_schedule(shape: &[usize], n_masks: usize, seed: u64) -> Result<MaskSchedule> {
    let shape: [usize; 3] = shape
        .try_into()
        .map_err(|_| Error::shape("gen_mask_schedule", format!("expected (c, h, w), got {shape:?}")))?;
    let pixels = shape[1] * shape[2];
    if n_masks == 0 || n_masks > pixels {
        return Err(Error::invalid(format!(
            "mask count must be in 1..={pixels}, got {n_masks}"
        )));
    }
    let mut order: Vec<usize> = (0..pixels).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::with_capacity(pixels / n_masks + 1); n_masks];
    for (k, p) in order.into_iter().enumerate() {
        groups[k % n_masks].push(p);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(MaskSchedule {
        shape,
        groups,
        cursor: 0,
    })
}

impl MaskSchedule {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Spatial indices (`row * w + col`) replaced by mask `j`.
    pub fn replaced(&self, j: usize) -> &[usize] {
        &self.groups[j]
    }

    pub fn mask(&self, j: usize) -> Tensor {
        let [c, h, w] = self.shape;
        let mut m = vec![1.0; c * h * w];
        for &p in &self.groups[j] {
            for ch in 0..c {
                m[ch * h * w + p] = 0.0;
            }
        }
        Tensor::from_parts_unchecked(self.shape.to_vec(), m)
    }

    pub fn masks(&self) -> Vec<Tensor> {
        (0..self.len()).map(|j| self.mask(j)).collect()
    }

    /// Cyclic increment `j ← (j + 1) mod I`.
    pub fn advance(&mut self) {
        self.cursor = (self.cursor + 1) % self.groups.len();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_mask_replaces_everything() {
        let s = gen_mask_schedule(&[3, 4, 2], 1, 0).unwrap();
        assert_eq!(s.mask(0), Tensor::zeros(vec![3, 4, 2]));
    }

    #[test]
    fn balanced_counts_on_512_pixels() {
        let s = gen_mask_schedule(&[3, 32, 16], 5, 9).unwrap();
        let mut counts: Vec<usize> = (0..5).map(|j| s.replaced(j).len()).collect();
        counts.sort_unstable();
        assert_eq!(counts, vec![102, 102, 102, 103, 103]);
    }

    #[test]
    fn out_of_range_counts() {
        assert!(gen_mask_schedule(&[3, 2, 2], 0, 0).is_err());
        assert!(gen_mask_schedule(&[3, 2, 2], 5, 0).is_err());
        assert!(gen_mask_schedule(&[2, 2], 1, 0).is_err());
    }

    #[test]
    fn cursor_cycles() {
        let mut s = gen_mask_schedule(&[1, 3, 3], 3, 0).unwrap();
        let seen: Vec<usize> = (0..7)
            .map(|_| {
                let j = s.cursor();
                s.advance();
                j
            })
            .collect();
        assert_eq!(seen, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    proptest! {
        #[test]
        fn masks_partition_the_image(h in 1usize..10, w in 1usize..10, k in 1usize..8, seed in 0u64..100) {
            prop_assume!(k <= h * w);
            let s = gen_mask_schedule(&[3, h, w], k, seed).unwrap();
            let masks = s.masks();
            let mut total = Tensor::zeros(vec![3, h, w]);
            for (a, ma) in masks.iter().enumerate() {
                total = total.zip_map(ma, |t, m| t + (1.0 - m)).unwrap();
                for mb in &masks[a + 1..] {
                    let overlap = ma.zip_map(mb, |x, y| (1.0 - x) * (1.0 - y)).unwrap().sum();
                    prop_assert_eq!(overlap, 0.0);
                }
                let n = s.replaced(a).len();
                prop_assert!(n == (h * w) / k || n == (h * w).div_ceil(k));
            }
            prop_assert_eq!(total, Tensor::ones(vec![3, h, w]));
        }
    }
}
