//! Training-time patch augmentation.
//!
//! Spatial transforms (rotation, scaling, elastic deformation) are combined
//! into one backward warp so each patch is resampled once. The image uses
//! trilinear interpolation with the patch minimum as fill; labels use nearest
//! neighbour with background fill, so the label value set can only shrink.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::flip_axis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum absolute rotation per axis, degrees.
    pub rotation_degrees: [f64; 3],
    /// Isotropic scale factor range.
    pub scale_range: [f64; 2],
    /// Smoothing sigma of the displacement noise, voxels.
    pub elastic_sigma: f64,
    /// Largest displacement after smoothing, voxels.
    pub elastic_magnitude: f64,
    pub gamma_range: [f64; 2],
    pub mirror_axes: [bool; 3],
    pub p_rotation: f64,
    pub p_scale: f64,
    pub p_elastic: f64,
    pub p_gamma: f64,
    pub p_mirror: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: [15.0; 3],
            scale_range: [0.85, 1.15],
            elastic_sigma: 8.0,
            elastic_magnitude: 4.0,
            gamma_range: [0.7, 1.5],
            mirror_axes: [true; 3],
            p_rotation: 0.3,
            p_scale: 0.3,
            p_elastic: 0.3,
            p_gamma: 0.3,
            p_mirror: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_rotation: 0.0,
            p_scale: 0.0,
            p_elastic: 0.0,
            p_gamma: 0.0,
            p_mirror: 0.0,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !range_ok(self.scale_range) {
            v.push(format!("augment.scale_range must satisfy 0 < lo <= hi, got {:?}", self.scale_range));
        }
        if !range_ok(self.gamma_range) {
            v.push(format!("augment.gamma_range must satisfy 0 < lo <= hi, got {:?}", self.gamma_range));
        }
        if self.rotation_degrees.iter().any(|d| !d.is_finite() || *d < 0.0) {
            v.push("augment.rotation_degrees must be finite and non-negative".into());
        }
        if !(self.elastic_sigma > 0.0) || !(self.elastic_magnitude >= 0.0) {
            v.push("augment.elastic_sigma must be > 0 and elastic_magnitude >= 0".into());
        }
        for (name, p) in [
            ("p_rotation", self.p_rotation),
            ("p_scale", self.p_scale),
            ("p_elastic", self.p_elastic),
            ("p_gamma", self.p_gamma),
            ("p_mirror", self.p_mirror),
        ] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("augment.{name} must be in [0, 1], got {p}"));
            }
        }
        v
    }
}

/// A concrete spatial transform. Output voxel `o` samples the source at
/// `Rᵀ (o − c) / s + c + d(o)` where `c` is the patch centre.
#[derive(Debug, Clone, Default)]
pub struct Warp {
    /// Rotation angles about x, y, z in radians, applied x first.
    pub angles: [f64; 3],
    pub scale: f64,
    /// Per-voxel displacement, `[component][x][y][z]`.
    pub displacement: Option<[Array3<f32>; 3]>,
}

/// `R = Rz · Ry · Rx`.
pub fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Resamples an image/label pair through `warp`.
pub fn apply_warp(image: &Array3<f32>, label: &Array3<u8>, warp: &Warp) -> (Array3<f32>, Array3<u8>) {
    let (nx, ny, nz) = image.dim();
    let fill = image.iter().copied().fold(f32::INFINITY, f32::min);
    let r = rotation_matrix(warp.angles);
    let inv_s = 1.0 / warp.scale;
    let c = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];
    let mut out_img = Array3::<f32>::zeros((nx, ny, nz));
    let mut out_lab = Array3::<u8>::zeros((nx, ny, nz));
    let dims = [nx, ny, nz];
    for ((x, y, z), v) in out_img.indexed_iter_mut() {
        let o = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        let mut src = [0.0; 3];
        for (i, s) in src.iter_mut().enumerate() {
            // Rᵀ row i = column i of R.
            *s = (r[0][i] * o[0] + r[1][i] * o[1] + r[2][i] * o[2]) * inv_s + c[i];
            if let Some(d) = &warp.displacement {
                *s += d[i][[x, y, z]] as f64;
            }
        }
        *v = trilinear_or(image, src, dims, fill);
        out_lab[[x, y, z]] = nearest_or(label, src, dims, 0);
    }
    (out_img, out_lab)
}

fn inside(p: [f64; 3], dims: [usize; 3]) -> bool {
    // A small tolerance keeps exact rotations from falling off the edge.
    p.iter().zip(dims).all(|(&v, n)| v >= -1e-9 && v <= n as f64 - 1.0 + 1e-9)
}

fn trilinear_or(img: &Array3<f32>, p: [f64; 3], dims: [usize; 3], fill: f32) -> f32 {
    if !inside(p, dims) {
        return fill;
    }
    let mut lo = [0usize; 3];
    let mut w = [0.0f64; 3];
    for i in 0..3 {
        let v = p[i].clamp(0.0, dims[i] as f64 - 1.0);
        lo[i] = (v.floor() as usize).min(dims[i].saturating_sub(2));
        w[i] = v - lo[i] as f64;
    }
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut wt = 1.0;
        for i in 0..3 {
            let hi = corner >> i & 1 == 1;
            idx[i] = (lo[i] + hi as usize).min(dims[i] - 1);
            wt *= if hi { w[i] } else { 1.0 - w[i] };
        }
        if wt != 0.0 {
            acc += wt * img[idx] as f64;
        }
    }
    acc as f32
}

fn nearest_or(lab: &Array3<u8>, p: [f64; 3], dims: [usize; 3], fill: u8) -> u8 {
    if !inside(p, dims) {
        return fill;
    }
    let idx = [0, 1, 2].map(|i| (p[i].round().max(0.0) as usize).min(dims[i] - 1));
    lab[idx]
}

/// Uniform noise in [-1, 1] per component, Gaussian-smoothed, then scaled
/// so the largest displacement component equals `magnitude`.
pub fn elastic_field(dims: [usize; 3], sigma: f64, magnitude: f64, rng: &mut ChaCha8Rng) -> [Array3<f32>; 3] {
    let mut make = || {
        let mut f = Array3::from_shape_simple_fn(dims, || rng.random_range(-1.0f32..=1.0));
        for axis in 0..3 {
            gaussian_along(&mut f, axis, sigma);
        }
        let peak = f.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let k = (magnitude / peak as f64) as f32;
            f.mapv_inplace(|v| v * k);
        }
        f
    };
    [make(), make(), make()]
}

fn gaussian_along(f: &mut Array3<f32>, axis: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    for mut lane in f.lanes_mut(Axis(axis)) {
        let src: Vec<f32> = lane.to_vec();
        let n = src.len() as isize;
        for (i, out) in lane.iter_mut().enumerate() {
            let (mut acc, mut norm) = (0.0f64, 0.0f64);
            for (k, w) in kernel.iter().enumerate() {
                let j = i as isize + k as isize - radius;
                if (0..n).contains(&j) {
                    acc += w * src[j as usize] as f64;
                    norm += w;
                }
            }
            *out = (acc / norm) as f32;
        }
    }
}

/// `x -> lo + (hi - lo) · ((x - lo) / (hi - lo))^γ`, using the patch range.
pub fn apply_gamma(image: &mut Array3<f32>, gamma: f64) {
    let lo = image.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let range = hi - lo;
    if !(range > 0.0) {
        return;
    }
    image.mapv_inplace(|v| (lo + range * ((v as f64 - lo) / range).powf(gamma)) as f32);
}

/// Randomly augments one patch pair. Identical seeds give identical output.
pub fn augment_pair(
    image: &Array3<f32>,
    label: &Array3<u8>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Array3<f32>, Array3<u8>)> {
    if image.dim() != label.dim() {
        let d = |a: (usize, usize, usize)| vec![a.0, a.1, a.2];
        return Err(Error::ShapeMismatch {
            what: "augment image/label",
            expected: d(image.dim()),
            found: d(label.dim()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw every decision up front, in a fixed order.
    let rotate = rng.random_bool(cfg.p_rotation);
    let angles = cfg.rotation_degrees.map(|d| rng.random_range(-d..=d).to_radians());
    let scale_on = rng.random_bool(cfg.p_scale);
    let scale = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let elastic = rng.random_bool(cfg.p_elastic);
    let gamma_on = rng.random_bool(cfg.p_gamma);
    let gamma = rng.random_range(cfg.gamma_range[0]..=cfg.gamma_range[1]);
    let flips = [0, 1, 2].map(|a| cfg.mirror_axes[a] && rng.random_bool(cfg.p_mirror));

    let (mut img, mut lab) = if rotate || scale_on || elastic {
        let (nx, ny, nz) = image.dim();
        let warp = Warp {
            angles: if rotate { angles } else { [0.0; 3] },
            scale: if scale_on { scale } else { 1.0 },
            displacement: elastic.then(|| elastic_field([nx, ny, nz], cfg.elastic_sigma, cfg.elastic_magnitude, &mut rng)),
        };
        apply_warp(image, label, &warp)
    } else {
        (image.clone(), label.clone())
    };
    if gamma_on {
        apply_gamma(&mut img, gamma);
    }
    for (axis, _) in flips.iter().enumerate().filter(|(_, &f)| f) {
        img = flip_axis(img.view(), axis);
        lab = flip_axis(lab.view(), axis);
    }
    Ok((img, lab))
}
