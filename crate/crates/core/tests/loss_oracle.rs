//! Loss values and gradients checked against independent re-evaluation.

use kitseg::loss::{self, LossConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line evaluation of Dice + CE for a single sample, written without
/// reference to the library code paths.
fn oracle_total(logits: &Array3<f64>, labels: &[u8], cfg: &LossConfig) -> f64 {
    // logits: (class, voxel, 1)
    let n = labels.len();
    let mut p = vec![[0.0f64; 3]; n];
    for v in 0..n {
        let e: Vec<f64> = (0..3).map(|c| logits[[c, v, 0]].exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..3 {
            p[v][c] = e[c] / s;
        }
    }
    let dice = |c: usize| {
        let inter: f64 = (0..n).filter(|&v| labels[v] as usize == c).map(|v| p[v][c]).sum();
        let psum: f64 = (0..n).map(|v| p[v][c]).sum();
        let ysum = labels.iter().filter(|&&l| l as usize == c).count() as f64;
        (2.0 * inter + cfg.dice_smooth) / (psum + ysum + cfg.dice_smooth)
    };
    let gamma = cfg.dice_exponent;
    let dice_term = 0.4 * (-dice(1).ln()).max(cfg.log_floor).powf(gamma)
        + 0.6 * (-dice(2).ln()).max(cfg.log_floor).powf(gamma);
    let ce_c = |c: usize| {
        let vox: Vec<usize> = (0..n).filter(|&v| labels[v] as usize == c).collect();
        if vox.is_empty() {
            return 0.0;
        }
        vox.iter().map(|&v| -p[v][c].max(cfg.log_floor).ln()).sum::<f64>() / vox.len() as f64
    };
    let ce = 0.28 * ce_c(0) + 0.28 * ce_c(1) + 0.44 * ce_c(2);
    dice_term + ce
}

#[test]
fn total_loss_matches_scripted_evaluation() {
    let cfg = LossConfig::default();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 64;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let logits = Array3::from_shape_fn([3, n, 1], |_| rng.random_range(-3.0..3.0));
        let flat: Vec<f64> = logits.iter().copied().collect();
        let t = loss::total_loss(&[&flat], &[&labels], &cfg).unwrap();
        let o = oracle_total(&logits, &labels, &cfg);
        assert!((t.total - o).abs() < 1e-12, "seed {seed}: {} vs {o}", t.total);
    }
}

#[test]
fn two_level_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = LossConfig {
        level_weights: vec![2.0 / 3.0, 1.0 / 3.0],
        ..LossConfig::default()
    };
    let lab = Array3::from_shape_fn([4, 4, 4], |_| rng.random_range(0..3u8));
    let z0: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z1: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let m = loss::multiscale_loss(&[vec![&z0], vec![&z1]], &[lab.view()], &cfg).unwrap();
    let l0: Vec<u8> = lab.iter().copied().collect();
    let l1: Vec<u8> = (0..2)
        .flat_map(|x| (0..2).flat_map(move |y| (0..2).map(move |z| (x, y, z))))
        .map(|(x, y, z)| lab[[2 * x, 2 * y, 2 * z]])
        .collect();
    let t0 = loss::total_loss(&[&z0], &[&l0], &cfg).unwrap().total;
    let t1 = loss::total_loss(&[&z1], &[&l1], &cfg).unwrap().total;
    assert!((m - (2.0 / 3.0 * t0 + 1.0 / 3.0 * t1)).abs() < 1e-12);
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let cfg = LossConfig::default();
    let h = 1e-3;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let batch = 2;
        let labels: Vec<Array3<u8>> = (0..batch)
            .map(|_| Array3::from_shape_fn([4, 4, 4], |_| rng.random_range(0..3u8)))
            .collect();
        let mut heads: Vec<Vec<Vec<f64>>> = [64usize, 8]
            .iter()
            .map(|&n| (0..batch).map(|_| (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
            .collect();
        let views: Vec<_> = labels.iter().map(|l| l.view()).collect();
        let eval = |heads: &Vec<Vec<Vec<f64>>>| {
            let refs: Vec<Vec<&[f64]>> = heads.iter().map(|h| h.iter().map(Vec::as_slice).collect()).collect();
            loss::multiscale_loss(&refs, &views, &cfg).unwrap()
        };
        let refs: Vec<Vec<&[f64]>> = heads.iter().map(|h| h.iter().map(Vec::as_slice).collect()).collect();
        let analytic = loss::multiscale_loss_with_grad(&refs, &views, &cfg).unwrap();
        assert!((analytic.value - eval(&heads)).abs() < 1e-14);
        let mut worst = 0.0f64;
        for l in 0..heads.len() {
            for s in 0..batch {
                for i in 0..heads[l][s].len() {
                    let orig = heads[l][s][i];
                    heads[l][s][i] = orig + h;
                    let up = eval(&heads);
                    heads[l][s][i] = orig - h;
                    let down = eval(&heads);
                    heads[l][s][i] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic.grads[l][s][i];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst <= 1e-3, "seed {seed}: worst relative error {worst}");
    }
}
