//! Random patch extraction.

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volcore::{pad_to_at_least, LabelVolume, Volume, BACKGROUND};

/// A training case padded to at least the patch size, with its foreground
/// voxels indexed for foreground-forced sampling.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    image: Array3<f32>,
    label: Array3<u8>,
    foreground: Vec<[usize; 3]>,
    patch: [usize; 3],
}

impl PatchSampler {
    /// Pads with the image minimum and background label where the case is
    /// smaller than `patch`.
    pub fn new(image: &Volume, label: &LabelVolume, patch: [usize; 3]) -> Result<Self> {
        if image.shape() != label.shape() {
            return Err(Error::ShapeMismatch {
                what: "image/label",
                expected: image.shape().to_vec(),
                found: label.shape().to_vec(),
            });
        }
        let (image, _) = pad_to_at_least(image, patch, image.min_value());
        let (label, _) = pad_to_at_least(label, patch, BACKGROUND);
        let foreground = label
            .data
            .indexed_iter()
            .filter(|(_, &v)| v != BACKGROUND)
            .map(|((x, y, z), _)| [x, y, z])
            .collect();
        Ok(PatchSampler {
            image: image.data,
            label: label.data,
            foreground,
            patch,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.image.dim();
        [x, y, z]
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground.is_empty()
    }

    /// Draws a patch origin. With `force_foreground` (and foreground present)
    /// a foreground voxel is chosen uniformly and the origin uniformly among
    /// those whose patch contains it; otherwise uniformly over all origins.
    pub fn sample_origin(&self, force_foreground: bool, rng: &mut impl Rng) -> [usize; 3] {
        let shape = self.shape();
        let p = self.patch;
        if force_foreground && self.has_foreground() {
            let v = self.foreground[rng.random_range(0..self.foreground.len())];
            [0, 1, 2].map(|a| {
                let lo = (v[a] + 1).saturating_sub(p[a]);
                let hi = v[a].min(shape[a] - p[a]);
                rng.random_range(lo..=hi)
            })
        } else {
            [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - p[a]))
        }
    }

    pub fn extract(&self, origin: [usize; 3]) -> (Array3<f32>, Array3<u8>) {
        let [x, y, z] = origin;
        let [px, py, pz] = self.patch;
        let sl = s![x..x + px, y..y + py, z..z + pz];
        (self.image.slice(sl).to_owned(), self.label.slice(sl).to_owned())
    }

    pub fn sample(&self, force_foreground: bool, seed: u64) -> (Array3<f32>, Array3<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.extract(self.sample_origin(force_foreground, &mut rng))
    }
}

/// One random patch of `patch_size` from a case; see [`PatchSampler`].
pub fn sample_patch(
    image: &Volume,
    label: &LabelVolume,
    patch_size: [usize; 3],
    force_foreground: bool,
    seed: u64,
) -> Result<(Array3<f32>, Array3<u8>)> {
    Ok(PatchSampler::new(image, label, patch_size)?.sample(force_foreground, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::Spacing;

    fn case(shape: [usize; 3]) -> (Volume, LabelVolume) {
        let n: usize = shape.iter().product();
        let img = Array3::from_shape_vec(shape, (0..n).map(|i| i as f32).collect()).unwrap();
        (
            Volume::new(img, Spacing::default()),
            Volume::new(Array3::zeros(shape), Spacing::default()),
        )
    }

    #[test]
    fn volume_equal_to_patch_returns_whole_volume() {
        let (img, lab) = case([4, 6, 2]);
        for seed in 0..5 {
            let (a, b) = sample_patch(&img, &lab, [4, 6, 2], seed % 2 == 0, seed).unwrap();
            assert_eq!(a, img.data);
            assert_eq!(b, lab.data);
        }
    }

    #[test]
    fn small_volume_is_padded_with_minimum() {
        let (img, lab) = case([2, 2, 2]);
        let (a, b) = sample_patch(&img, &lab, [3, 2, 4], false, 0).unwrap();
        assert_eq!(a.dim(), (3, 2, 4));
        assert_eq!(a[[2, 1, 3]], 0.0);
        assert_eq!(a[[1, 1, 1]], 7.0);
        assert!(b.iter().all(|&v| v == 0));
    }

    #[test]
    fn forced_foreground_contains_the_single_voxel() {
        let (img, mut lab) = case([20, 17, 9]);
        lab.data[[19, 0, 4]] = 2;
        let sampler = PatchSampler::new(&img, &lab, [8, 8, 4]).unwrap();
        for seed in 0..100 {
            let (_, b) = sampler.sample(true, seed);
            assert_eq!(b.iter().filter(|&&v| v == 2).count(), 1, "seed {seed}");
        }
    }

    #[test]
    fn uniform_origins_cover_every_legal_position() {
        // 2x-patch volume: 5 legal origins per axis on [8, 4, 2] vs [4, 2, 1].
        let (img, lab) = case([8, 4, 2]);
        let sampler = PatchSampler::new(&img, &lab, [4, 2, 1]).unwrap();
        let legal: Vec<[usize; 3]> = (0..=4)
            .flat_map(|x| (0..=2).flat_map(move |y| (0..=1).map(move |z| [x, y, z])))
            .collect();
        let mut counts = vec![0usize; legal.len()];
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..draws {
            let o = sampler.sample_origin(false, &mut rng);
            let i = legal.iter().position(|&l| l == o).expect("origin is legal");
            counts[i] += 1;
        }
        let expected = draws as f64 / legal.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(counts.iter().all(|&c| c > 0));
        // 29 degrees of freedom; the 0.999 quantile is about 58.3.
        assert!(chi2 < 58.3, "chi-square {chi2}");
    }
}
