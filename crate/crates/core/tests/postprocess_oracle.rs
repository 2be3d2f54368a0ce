//! Connected components against a breadth-first flood fill, and the
//! cleanup rules' structural guarantees.

use std::collections::VecDeque;

use kitseg::postprocess::{apply_rules, connected_components, Connectivity};
use kitseg::volcore::{LabelVolume, Spacing, Volume, BACKGROUND};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn neighbours(c: Connectivity) -> Vec<[isize; 3]> {
    let mut v = Vec::new();
    for dx in -1isize..=1 {
        for dy in -1isize..=1 {
            for dz in -1isize..=1 {
                let m = dx.abs() + dy.abs() + dz.abs();
                if m > 0 && (c == Connectivity::TwentySix || m == 1) {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

/// Labels components by flood fill, starting each one at the first
/// unlabelled voxel in C order.
fn flood_fill(mask: &Array3<bool>, c: Connectivity) -> (Array3<u32>, Vec<usize>) {
    let dims = mask.dim();
    let mut ids = Array3::<u32>::zeros(dims);
    let mut sizes = Vec::new();
    let offs = neighbours(c);
    for (start, &m) in mask.indexed_iter() {
        if !m || ids[start] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len() as u32;
        let mut queue = VecDeque::from([start]);
        ids[start] = id;
        while let Some((x, y, z)) = queue.pop_front() {
            sizes[id as usize - 1] += 1;
            for o in &offs {
                let q = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                if q.0 < 0 || q.1 < 0 || q.2 < 0 {
                    continue;
                }
                let q = (q.0 as usize, q.1 as usize, q.2 as usize);
                if q.0 >= dims.0 || q.1 >= dims.1 || q.2 >= dims.2 {
                    continue;
                }
                if mask[q] && ids[q] == 0 {
                    ids[q] = id;
                    queue.push_back(q);
                }
            }
        }
    }
    (ids, sizes)
}

fn check(mask: &Array3<bool>) {
    for c in [Connectivity::Six, Connectivity::TwentySix] {
        let got = connected_components(mask, c);
        let (ids, sizes) = flood_fill(mask, c);
        assert_eq!(got.ids, ids, "{c:?}");
        assert_eq!(got.sizes, sizes, "{c:?}");
    }
}

#[test]
fn every_3x3_slab_matches_flood_fill() {
    for bits in 0u32..512 {
        let mask = Array3::from_shape_fn((3, 3, 1), |(x, y, _)| bits >> (x * 3 + y) & 1 == 1);
        check(&mask);
    }
}

#[test]
fn random_16_cubed_masks_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(2019);
    for i in 0..100 {
        // Sweep densities so both fragmented and percolating masks occur.
        let density = 0.05 + 0.5 * (i as f64 / 99.0);
        let mask = Array3::from_shape_fn((16, 16, 16), |_| rng.random_bool(density));
        check(&mask);
    }
}

fn random_seg(seed: u64, dims: (usize, usize, usize), density: f64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_fn(dims, |_| {
        if rng.random_bool(density) {
            rng.random_range(1..=2u8)
        } else {
            BACKGROUND
        }
    });
    Volume::new(data, Spacing::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rules_are_idempotent_and_never_add(seed in any::<u64>(), density in 0.0f64..0.6, nx in 1usize..12, ny in 1usize..12, nz in 1usize..12) {
        let seg = random_seg(seed, (nx, ny, nz), density);
        let once = apply_rules(&seg);
        prop_assert_eq!(&apply_rules(&once), &once);
        for (&after, &before) in once.data.iter().zip(&seg.data) {
            prop_assert!(after == BACKGROUND || after == before);
        }
    }
}
