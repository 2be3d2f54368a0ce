//! Full-volume prediction.
//!
//! Windows tile the (padded) volume with a fixed stride; each window's
//! full-resolution softmax is added to a per-voxel sum and divided by the
//! number of windows covering the voxel. Mirror averaging flips the whole
//! volume, predicts, flips back and averages all flip combinations with
//! equal weight, which makes the result equivariant to those flips.

use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msunet::{Features, MsUNet};
use crate::preprocess::{ratio, trilinear, CaseGeometry};
use crate::volcore::{flip_axis, pad_to_at_least, LabelVolume, ProbabilityVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Sliding-window size; `None` uses the training patch size.
    pub window: Option<[usize; 3]>,
    pub overlap: f64,
    pub mirror_axes: [bool; 3],
    /// Also write the probability maps next to the labels.
    pub save_probabilities: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            window: None,
            overlap: 0.5,
            mirror_axes: [true; 3],
            save_probabilities: false,
        }
    }
}

impl InferenceConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..1.0).contains(&self.overlap) {
            v.push(format!("inference.overlap must be in [0, 1), got {}", self.overlap));
        }
        if let Some(w) = self.window {
            if w.contains(&0) {
                v.push(format!("inference.window must be positive, got {w:?}"));
            }
        }
        v
    }
}

/// Window origins over a volume, sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowGrid {
    pub origins: Vec<[usize; 3]>,
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

fn axis_origins(n: usize, w: usize, stride: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..).map(|k| k * stride).take_while(|&v| v + w < n).collect();
    // The last window sits flush against the far boundary.
    o.push(n - w);
    o.dedup();
    o
}

/// Stride `ceil(window · (1 − overlap))` per axis, last window clamped flush.
pub fn make_grid(shape: [usize; 3], window: [usize; 3], overlap: f64) -> Result<WindowGrid> {
    if (0..3).any(|a| window[a] == 0 || window[a] > shape[a]) {
        return Err(Error::InvalidInput(format!(
            "window {window:?} does not fit in volume {shape:?}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidInput(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = window.map(|w| ((w as f64 * (1.0 - overlap)).ceil() as usize).max(1));
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(shape[a], window[a], stride[a])).collect();
    let mut origins = Vec::new();
    for &x in &per_axis[0] {
        for &y in &per_axis[1] {
            for &z in &per_axis[2] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(WindowGrid {
        origins,
        window,
        stride,
    })
}

impl WindowGrid {
    /// Number of windows covering each voxel.
    pub fn coverage(&self, shape: [usize; 3]) -> Array3<u32> {
        let mut c = Array3::<u32>::zeros(shape);
        let [wx, wy, wz] = self.window;
        for &[x, y, z] in &self.origins {
            c.slice_mut(s![x..x + wx, y..y + wy, z..z + wz]).mapv_inplace(|v| v + 1);
        }
        c
    }
}

/// Anything that maps an image patch to full-resolution class logits,
/// shaped `(class, x, y, z)`.
pub trait SegmentationModel {
    fn predict_logits(&self, patch: &Array3<f32>) -> Result<Array4<f32>>;
}

impl SegmentationModel for MsUNet<f32> {
    fn predict_logits(&self, patch: &Array3<f32>) -> Result<Array4<f32>> {
        let (x, y, z) = patch.dim();
        let input = Features::from_vec(1, [x, y, z], patch.iter().copied().collect());
        let out = self.forward_full_res(&input)?;
        Ok(Array4::from_shape_vec((out.channels, x, y, z), out.data).expect("head shape"))
    }
}

/// Softmax over axis 0, computed per voxel in f64.
fn softmax_classes(logits: &Array4<f32>) -> Array4<f64> {
    let mut p = logits.mapv(|v| v as f64);
    for mut lane in p.lanes_mut(Axis(0)) {
        let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    p
}

/// Sliding-window class probabilities for one orientation, `(class, x, y, z)`.
pub fn sliding_window<M: SegmentationModel + ?Sized>(
    model: &M,
    image: &Array3<f32>,
    window: [usize; 3],
    overlap: f64,
) -> Result<Array4<f64>> {
    let (nx, ny, nz) = image.dim();
    let shape = [nx, ny, nz];
    let fill = image.iter().copied().fold(f32::INFINITY, f32::min);
    let padded = pad_to_at_least(&Volume::new(image.clone(), Default::default()), window, fill).0.data;
    let (px, py, pz) = padded.dim();
    let grid = make_grid([px, py, pz], window, overlap)?;
    let [wx, wy, wz] = window;
    let mut sum: Option<Array4<f64>> = None;
    for &[x, y, z] in &grid.origins {
        let patch = padded.slice(s![x..x + wx, y..y + wy, z..z + wz]).to_owned();
        let logits = model.predict_logits(&patch)?;
        if logits.dim().1 != wx || logits.dim().2 != wy || logits.dim().3 != wz {
            let (c, a, b, d) = logits.dim();
            return Err(Error::ShapeMismatch {
                what: "model output",
                expected: window.to_vec(),
                found: vec![c, a, b, d],
            });
        }
        let probs = softmax_classes(&logits);
        let acc = sum.get_or_insert_with(|| Array4::zeros((probs.dim().0, px, py, pz)));
        let mut region = acc.slice_mut(s![.., x..x + wx, y..y + wy, z..z + wz]);
        region += &probs;
    }
    let mut sum = sum.expect("grid has at least one window");
    let count = grid.coverage([px, py, pz]);
    for mut per_class in sum.outer_iter_mut() {
        per_class.zip_mut_with(&count, |v, &c| *v /= c as f64);
    }
    Ok(sum.slice(s![.., ..shape[0], ..shape[1], ..shape[2]]).to_owned())
}

fn flip4(a: &Array4<f64>, axis: usize) -> Array4<f64> {
    let mut out = a.clone();
    out.invert_axis(Axis(axis + 1));
    out.as_standard_layout().into_owned()
}

/// Mirror-averaged sliding-window prediction of a preprocessed volume.
pub fn predict_volume<M: SegmentationModel + ?Sized>(
    model: &M,
    volume: &Volume,
    window: [usize; 3],
    overlap: f64,
    mirror_axes: [bool; 3],
) -> Result<ProbabilityVolume> {
    let axes: Vec<usize> = (0..3).filter(|&a| mirror_axes[a]).collect();
    let combos = 1usize << axes.len();
    let mut total: Option<Array4<f64>> = None;
    for mask in 0..combos {
        let flips: Vec<usize> = axes.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &a)| a).collect();
        let mut img = volume.data.clone();
        for &a in &flips {
            img = flip_axis(img.view(), a);
        }
        let mut p = sliding_window(model, &img, window, overlap)?;
        for &a in &flips {
            p = flip4(&p, a);
        }
        match total.as_mut() {
            None => total = Some(p),
            Some(t) => *t += &p,
        }
    }
    let mut total = total.expect("at least one orientation");
    for mut lane in total.lanes_mut(Axis(0)) {
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    Ok(ProbabilityVolume {
        data: total.mapv(|v| v as f32),
        spacing: volume.spacing,
    })
}

/// Maps probabilities back onto the original grid (trilinear) and takes the
/// per-voxel argmax, ties going to the lower class.
pub fn finalize(prob: &ProbabilityVolume, geometry: &CaseGeometry) -> Result<LabelVolume> {
    if prob.shape() != geometry.resampled_shape {
        return Err(Error::ShapeMismatch {
            what: "probabilities vs recorded resampled shape",
            expected: geometry.resampled_shape.to_vec(),
            found: prob.shape().to_vec(),
        });
    }
    if geometry.original_shape == geometry.resampled_shape && geometry.original_spacing == geometry.target_spacing {
        let mut out = prob.argmax();
        out.spacing = geometry.original_spacing;
        return Ok(out);
    }
    let r = ratio(geometry.target_spacing, geometry.original_spacing);
    let [ox, oy, oz] = geometry.original_shape;
    let classes = prob.data.dim().0;
    let mut data = Array4::<f32>::zeros((classes, ox, oy, oz));
    for c in 0..classes {
        let resampled = trilinear(prob.data.index_axis(Axis(0), c), geometry.original_shape, r);
        data.index_axis_mut(Axis(0), c).assign(&resampled);
    }
    Ok(ProbabilityVolume {
        data,
        spacing: geometry.original_spacing,
    }
    .argmax())
}
