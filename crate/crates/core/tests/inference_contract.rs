//! Sliding-window coverage, blending weights and mirror equivariance.

use kitseg::inference::{make_grid, predict_volume, sliding_window, SegmentationModel};
use kitseg::msunet::{MsUNet, NetworkSpec};
use kitseg::volcore::{Spacing, Volume};
use kitseg::Result;
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_grids_cover_every_voxel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..60));
        let window: [usize; 3] = std::array::from_fn(|a| rng.random_range(1..=shape[a]));
        let overlap = rng.random_range(0.0..0.95);
        let grid = make_grid(shape, window, overlap).unwrap();
        assert!(grid.coverage(shape).iter().all(|&c| c >= 1), "{shape:?} {window:?} {overlap}");
        for o in &grid.origins {
            assert!((0..3).all(|a| o[a] + window[a] <= shape[a]));
        }
        for a in 0..3 {
            assert!(grid.origins.iter().any(|o| o[a] + window[a] == shape[a]), "last window is flush");
        }
    }
}

/// Returns fixed logits whose softmax is exactly representable.
struct Constant([f32; 3]);

impl SegmentationModel for Constant {
    fn predict_logits(&self, patch: &Array3<f32>) -> Result<Array4<f32>> {
        let (x, y, z) = patch.dim();
        Ok(Array4::from_shape_fn((3, x, y, z), |(c, ..)| self.0[c]))
    }
}

#[test]
fn blending_weights_sum_to_one() {
    // softmax(0, 0, -inf) = (1/2, 1/2, 0) exactly, so any deviation of the
    // per-voxel weights from summing to one shows up bit-for-bit.
    let model = Constant([0.0, 0.0, f32::NEG_INFINITY]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(5..30));
        let window: [usize; 3] = std::array::from_fn(|a| rng.random_range(1..=shape[a]));
        let image = Array3::from_shape_fn(shape, |_| rng.random::<f32>());
        let p = sliding_window(&model, &image, window, rng.random_range(0.0..0.9)).unwrap();
        for lane in p.lanes(Axis(0)) {
            assert_eq!(lane.to_vec(), vec![0.5, 0.5, 0.0]);
        }
    }
}

#[test]
fn mirror_averaging_is_flip_equivariant() {
    let net = MsUNet::<f32>::build(&NetworkSpec::toy(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = Array3::from_shape_fn((20, 18, 12), |_| rng.random_range(-2.0f32..2.0));
    let volume = Volume::new(data, Spacing::default());
    let window = [16, 16, 8];
    let base = predict_volume(&net, &volume, window, 0.5, [true; 3]).unwrap();
    for axis in 0..3 {
        let flipped = predict_volume(&net, &volume.flipped(axis), window, 0.5, [true; 3]).unwrap();
        let mut back = flipped.data.clone();
        back.invert_axis(Axis(axis + 1));
        let err = back.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1e-6, "axis {axis}: {err}");
    }
}
