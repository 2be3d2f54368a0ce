//! Intensity clipping, global foreground normalization and resampling to a
//! common voxel spacing.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{LabelVolume, Spacing, Volume};

/// Lower and upper clipping percentiles of pooled foreground intensities.
pub const CLIP_PERCENTILES: (f64, f64) = (0.5, 99.5);
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub fg_mean: f64,
    pub fg_std: f64,
    pub target_spacing: Spacing,
}

impl DatasetStats {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.clip_lo, self.clip_hi, self.fg_mean, self.fg_std]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.clip_lo > self.clip_hi || self.fg_std < 0.0 {
            return Err(Error::InvalidInput(format!("invalid dataset stats {self:?}")));
        }
        Ok(())
    }
}

/// Interpolation used by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Percentile `q` in `[0, 100]` with linear interpolation between closest ranks.
///
/// Reorders `values`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    let pos = q.clamp(0.0, 100.0) / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, right) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || right.is_empty() {
        return lo_val;
    }
    let hi_val = right.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pools foreground intensities (label > 0) over all cases.
pub fn compute_dataset_stats<'a, I>(cases: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = (&'a Volume, &'a LabelVolume)>,
{
    let mut pooled = Vec::new();
    let mut spacings = Vec::new();
    for (image, label) in cases {
        if image.shape() != label.shape() {
            return Err(Error::ShapeMismatch {
                what: "image and label",
                expected: image.shape().to_vec(),
                found: label.shape().to_vec(),
            });
        }
        spacings.push(image.spacing.as_array());
        Zip::from(&image.data).and(&label.data).for_each(|&v, &l| {
            if l > 0 {
                pooled.push(v as f64);
            }
        });
    }
    if pooled.is_empty() {
        return Err(Error::NoForeground);
    }
    let clip_lo = percentile(&mut pooled, CLIP_PERCENTILES.0);
    let clip_hi = percentile(&mut pooled, CLIP_PERCENTILES.1);

    let n = pooled.len() as f64;
    let clipped = pooled.iter().map(|v| v.clamp(clip_lo, clip_hi));
    let mean = clipped.clone().sum::<f64>() / n;
    let var = clipped.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;

    let target = [0, 1, 2].map(|a| median(spacings.iter().map(|s| s[a]).collect()));
    Ok(DatasetStats {
        clip_lo,
        clip_hi,
        fg_mean: mean,
        fg_std: var.sqrt(),
        target_spacing: Spacing::try_from(target)?,
    })
}

pub fn clip_and_normalize(vol: &Volume, stats: &DatasetStats) -> Volume {
    let std = stats.fg_std.max(STD_FLOOR);
    let data = vol
        .data
        .mapv(|v| (((v as f64).clamp(stats.clip_lo, stats.clip_hi) - stats.fg_mean) / std) as f32);
    Volume::new(data, vol.spacing)
}

/// Output shape when resampling `shape` from `from` spacing to `to` spacing.
pub fn resampled_shape(shape: [usize; 3], from: Spacing, to: Spacing) -> [usize; 3] {
    let (f, t) = (from.as_array(), to.as_array());
    [0, 1, 2].map(|a| ((shape[a] as f64 * f[a] / t[a]).round() as usize).max(1))
}

/// Resamples to `target` spacing. Labels must use [`Interpolation::Nearest`].
pub fn resample(vol: &Volume, target: Spacing, mode: Interpolation) -> Volume {
    let shape = resampled_shape(vol.shape(), vol.spacing, target);
    resample_to_shape(vol, shape, target, mode)
}

pub fn resample_labels(vol: &LabelVolume, target: Spacing) -> LabelVolume {
    let shape = resampled_shape(vol.shape(), vol.spacing, target);
    let ratio = ratio(vol.spacing, target);
    Volume::new(nearest(vol.data.view(), shape, ratio), target)
}

/// Resamples onto an explicit output grid of `out_spacing`.
///
/// Output voxel `i` reads source coordinate `i * out_spacing / src_spacing`,
/// clamped to the source extent.
pub fn resample_to_shape(
    vol: &Volume,
    shape: [usize; 3],
    out_spacing: Spacing,
    mode: Interpolation,
) -> Volume {
    let r = ratio(vol.spacing, out_spacing);
    let data = match mode {
        Interpolation::Linear => trilinear(vol.data.view(), shape, r),
        Interpolation::Nearest => nearest(vol.data.view(), shape, r),
    };
    Volume::new(data, out_spacing)
}

pub(crate) fn ratio(src: Spacing, out: Spacing) -> [f64; 3] {
    let (s, o) = (src.as_array(), out.as_array());
    [0, 1, 2].map(|a| o[a] / s[a])
}

fn source_coord(i: usize, ratio: f64, n: usize) -> f64 {
    (i as f64 * ratio).clamp(0.0, (n - 1) as f64)
}

pub(crate) fn nearest<T: Copy>(src: ArrayView3<'_, T>, shape: [usize; 3], ratio: [f64; 3]) -> Array3<T> {
    let (nx, ny, nz) = src.dim();
    let index = |n: usize, out: usize, r: f64| -> Vec<usize> {
        (0..out)
            .map(|i| ((source_coord(i, r, n) + 0.5).floor() as usize).min(n - 1))
            .collect()
    };
    let (ix, iy, iz) = (
        index(nx, shape[0], ratio[0]),
        index(ny, shape[1], ratio[1]),
        index(nz, shape[2], ratio[2]),
    );
    Array3::from_shape_fn(shape, |(x, y, z)| src[[ix[x], iy[y], iz[z]]])
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f32,
}

fn taps(n: usize, out: usize, r: f64) -> Vec<Tap> {
    (0..out)
        .map(|i| {
            let c = source_coord(i, r, n);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            Tap {
                lo,
                hi,
                w: (c - lo as f64) as f32,
            }
        })
        .collect()
}

/// `a + w (b - a)`, kept inside `[min(a, b), max(a, b)]`.
fn lerp(a: f32, b: f32, w: f32) -> f32 {
    if w == 0.0 || a == b {
        return a;
    }
    let v = a + w * (b - a);
    v.clamp(a.min(b), a.max(b))
}

pub(crate) fn trilinear(src: ArrayView3<'_, f32>, shape: [usize; 3], ratio: [f64; 3]) -> Array3<f32> {
    let (nx, ny, nz) = src.dim();
    let tx = taps(nx, shape[0], ratio[0]);
    let ty = taps(ny, shape[1], ratio[1]);
    let tz = taps(nz, shape[2], ratio[2]);
    Array3::from_shape_fn(shape, |(x, y, z)| {
        let (a, b, c) = (tx[x], ty[y], tz[z]);
        let along_z = |xi: usize, yi: usize| lerp(src[[xi, yi, c.lo]], src[[xi, yi, c.hi]], c.w);
        let along_y = |xi: usize| lerp(along_z(xi, b.lo), along_z(xi, b.hi), b.w);
        lerp(along_y(a.lo), along_y(a.hi), a.w)
    })
}

/// Geometry needed to map a prediction back onto the original grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseGeometry {
    pub original_shape: [usize; 3],
    pub original_spacing: Spacing,
    pub resampled_shape: [usize; 3],
    pub target_spacing: Spacing,
}

/// A case after normalization and resampling into the dataset voxel space.
#[derive(Debug, Clone)]
pub struct PreprocessedCase {
    pub image: Volume,
    pub label: Option<LabelVolume>,
    pub geometry: CaseGeometry,
}

pub fn preprocess_case(
    image: &Volume,
    label: Option<&LabelVolume>,
    stats: &DatasetStats,
) -> PreprocessedCase {
    let normalized = clip_and_normalize(image, stats);
    let target = stats.target_spacing;
    let resampled = resample(&normalized, target, Interpolation::Linear);
    let label = label.map(|l| resample_labels(l, target));
    PreprocessedCase {
        geometry: CaseGeometry {
            original_shape: image.shape(),
            original_spacing: image.spacing,
            resampled_shape: resampled.shape(),
            target_spacing: target,
        },
        image: resampled,
        label,
    }
}
