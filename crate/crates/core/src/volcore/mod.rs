//! Volumetric data types shared by every stage of the pipeline.
//!
//! All grids use `(x, y, z)` axis order with `z` the through-plane axis and
//! C-order storage (z varies fastest).

mod nifti;
mod raw;

use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nifti::{read_nifti, write_nifti};
pub use raw::{read_raw, sidecar_path, write_raw, RawScalar, Sidecar};

pub const BACKGROUND: u8 = 0;
pub const KIDNEY: u8 = 1;
pub const TUMOR: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Physical voxel size in millimeters along `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Spacing([f64; 3]);

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        Self::try_from([dx, dy, dz])
    }

    pub fn isotropic(d: f64) -> Result<Self> {
        Self::new(d, d, d)
    }

    pub fn dx(&self) -> f64 {
        self.0[0]
    }

    pub fn dy(&self) -> f64 {
        self.0[1]
    }

    pub fn dz(&self) -> f64 {
        self.0[2]
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0; 3])
    }
}

impl TryFrom<[f64; 3]> for Spacing {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        if v.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(Spacing(v))
        } else {
            Err(Error::InvalidSpacing(v))
        }
    }
}

impl From<Spacing> for [f64; 3] {
    fn from(s: Spacing) -> Self {
        s.0
    }
}

/// A dense 3D grid with physical spacing.
///
/// `Volume<f32>` holds CT intensities; [`LabelVolume`] holds class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f32> {
    pub data: Array3<T>,
    pub spacing: Spacing,
}

/// Integer-class grid aligned to a [`Volume`]: 0 background, 1 kidney, 2 tumor.
pub type LabelVolume = Volume<u8>;

impl<T> Volume<T> {
    pub fn new(data: Array3<T>, spacing: Spacing) -> Self {
        Volume { data, spacing }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.data.dim();
        [x, y, z]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl<T: Clone> Volume<T> {
    pub fn filled(shape: [usize; 3], value: T, spacing: Spacing) -> Self {
        Volume::new(Array3::from_elem(shape, value), spacing)
    }

    /// Reverses the volume along `axis` (0 = x, 1 = y, 2 = z).
    pub fn flipped(&self, axis: usize) -> Self {
        Volume::new(flip_axis(self.data.view(), axis), self.spacing)
    }
}

pub(crate) fn flip_axis<T: Clone>(view: ArrayView3<'_, T>, axis: usize) -> Array3<T> {
    let mut v = view;
    v.invert_axis(Axis(axis));
    v.to_owned()
}

impl Volume<f32> {
    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidInput(format!(
                "non-finite intensity at voxel {i}"
            ))),
        }
    }
}

impl LabelVolume {
    pub fn validate_labels(&self) -> Result<()> {
        match self.data.iter().position(|&v| v > TUMOR) {
            None => Ok(()),
            Some(index) => Err(Error::InvalidLabel {
                value: self.data.iter().nth(index).copied().unwrap_or_default(),
                index,
            }),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != BACKGROUND).count()
    }
}

/// Per-class soft predictions, class-major: `(class, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub data: Array4<f32>,
    pub spacing: Spacing,
}

impl ProbabilityVolume {
    pub fn shape(&self) -> [usize; 3] {
        let (_, x, y, z) = self.data.dim();
        [x, y, z]
    }

    /// Largest deviation of a per-voxel class sum from one.
    pub fn normalization_error(&self) -> f32 {
        let sums = self.data.sum_axis(Axis(0));
        sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f32::max)
    }

    /// Per-voxel argmax; ties go to the lower class index.
    pub fn argmax(&self) -> LabelVolume {
        let shape = self.shape();
        let mut out = Array3::<u8>::zeros(shape);
        Zip::indexed(&mut out).for_each(|(x, y, z), o| {
            let mut best = 0u8;
            let mut best_p = self.data[[0, x, y, z]];
            for c in 1..self.data.dim().0 {
                let p = self.data[[c, x, y, z]];
                if p > best_p {
                    best = c as u8;
                    best_p = p;
                }
            }
            *o = best;
        });
        Volume::new(out, self.spacing)
    }
}

/// Remembers the shape before padding so the padding can be undone exactly.
///
/// Padding is always appended at the high end of each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub original_shape: [usize; 3],
    pub padded_shape: [usize; 3],
}

impl CropRecord {
    pub fn is_identity(&self) -> bool {
        self.original_shape == self.padded_shape
    }

    pub fn crop<T: Clone>(&self, vol: &Volume<T>) -> Result<Volume<T>> {
        if vol.shape() != self.padded_shape {
            return Err(Error::ShapeMismatch {
                what: "crop record",
                expected: self.padded_shape.to_vec(),
                found: vol.shape().to_vec(),
            });
        }
        let [x, y, z] = self.original_shape;
        Ok(Volume::new(
            vol.data.slice(s![..x, ..y, ..z]).to_owned(),
            vol.spacing,
        ))
    }
}

/// Pads each axis up to the next multiple of `multiple` with `fill`.
pub fn pad_to_multiple<T: Clone>(
    vol: &Volume<T>,
    multiple: usize,
    fill: T,
) -> (Volume<T>, CropRecord) {
    let m = multiple.max(1);
    let target = vol.shape().map(|n| n.div_ceil(m) * m);
    pad_to_shape(vol, target, fill)
}

/// Pads each axis up to at least `min_shape[axis]` with `fill`.
pub fn pad_to_at_least<T: Clone>(
    vol: &Volume<T>,
    min_shape: [usize; 3],
    fill: T,
) -> (Volume<T>, CropRecord) {
    let shape = vol.shape();
    let target = [0, 1, 2].map(|a| shape[a].max(min_shape[a]));
    pad_to_shape(vol, target, fill)
}

fn pad_to_shape<T: Clone>(
    vol: &Volume<T>,
    target: [usize; 3],
    fill: T,
) -> (Volume<T>, CropRecord) {
    let shape = vol.shape();
    let record = CropRecord {
        original_shape: shape,
        padded_shape: target,
    };
    if target == shape {
        return (vol.clone(), record);
    }
    let mut data = Array3::from_elem(target, fill);
    data.slice_mut(s![..shape[0], ..shape[1], ..shape[2]])
        .assign(&vol.data);
    (Volume::new(data, vol.spacing), record)
}

/// Loads an image and optional label, validating alignment and label values.
///
/// Files ending in `.nii` or `.nii.gz` are read as NIfTI-1; anything else is
/// treated as a raw array with a JSON sidecar next to it.
pub fn load_case(
    image_path: &Path,
    label_path: Option<&Path>,
) -> Result<(Volume, Option<LabelVolume>)> {
    let image = read_image(image_path)?;
    image.check_finite()?;
    let label = match label_path {
        None => None,
        Some(p) => {
            let label = read_label(p)?;
            if label.shape() != image.shape() {
                return Err(Error::ShapeMismatch {
                    what: "image and label",
                    expected: image.shape().to_vec(),
                    found: label.shape().to_vec(),
                });
            }
            Some(label)
        }
    };
    Ok((image, label))
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

pub fn read_image(path: &Path) -> Result<Volume> {
    if is_nifti(path) {
        read_nifti(path)
    } else {
        read_raw::<f32>(path)
    }
}

pub fn read_label(path: &Path) -> Result<LabelVolume> {
    let label = if is_nifti(path) {
        let vol = read_nifti(path)?;
        let mut out = Array3::<u8>::zeros(vol.data.raw_dim());
        for (i, (o, &v)) in out.iter_mut().zip(vol.data.iter()).enumerate() {
            if v.fract() != 0.0 || !(0.0..=2.0).contains(&v) {
                return Err(Error::InvalidLabel {
                    value: v.clamp(0.0, 255.0) as u8,
                    index: i,
                });
            }
            *o = v as u8;
        }
        Volume::new(out, vol.spacing)
    } else {
        read_raw::<u8>(path)?
    };
    label.validate_labels()?;
    Ok(label)
}
