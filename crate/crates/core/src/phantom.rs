//! Synthetic CT-like cases with analytically known kidneys and tumors.
//!
//! Kidneys are ellipsoids and tumors are spheres, both given in voxel
//! coordinates (voxel centres sit on integer indices). A voxel belongs to a
//! structure iff its centre satisfies the structure's membership inequality;
//! tumor overrides kidney. Intensities are per-tissue means plus seeded
//! Gaussian noise.
//!
//! [`make_dataset`] writes one directory per case:
//!
//! ```text
//! <out>/manifest.json
//! <out>/case_00000/imaging.raw  + imaging.json
//! <out>/case_00000/segmentation.raw + segmentation.json
//! ```

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{connected_components, Connectivity};
use crate::seeds;
use crate::volcore::{write_raw, LabelVolume, Spacing, Volume, BACKGROUND, KIDNEY, TUMOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tumor {
    pub center: [f64; 3],
    pub radius: f64,
    /// Must touch or overlap a kidney.
    pub attached: bool,
}

impl Tumor {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>() <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intensities {
    pub background: f32,
    pub kidney: f32,
    pub tumor: f32,
    pub noise_sigma: f32,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: -50.0,
            kidney: 120.0,
            tumor: 60.0,
            noise_sigma: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: Spacing,
    pub kidneys: Vec<Ellipsoid>,
    pub tumors: Vec<Tumor>,
    pub intensities: Intensities,
    pub seed: u64,
}

impl PhantomSpec {
    /// Structural problems that can be checked without rasterizing.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.shape.contains(&0) {
            v.push(format!("shape {:?} has an empty axis", self.shape));
        }
        if self.kidneys.len() > 2 {
            v.push(format!("at most 2 kidneys, got {}", self.kidneys.len()));
        }
        if self.tumors.len() > 3 {
            v.push(format!("at most 3 tumors, got {}", self.tumors.len()));
        }
        if !(self.intensities.noise_sigma >= 0.0) {
            v.push("noise_sigma must be non-negative".into());
        }
        let inside = |c: [f64; 3], r: [f64; 3]| {
            (0..3).all(|a| r[a] > 0.0 && c[a] - r[a] >= 0.0 && c[a] + r[a] <= (self.shape[a] as f64 - 1.0))
        };
        for (i, k) in self.kidneys.iter().enumerate() {
            if !inside(k.center, k.radii) {
                v.push(format!("kidney {i} (center {:?}, radii {:?}) is out of bounds", k.center, k.radii));
            }
        }
        for (i, t) in self.tumors.iter().enumerate() {
            if !inside(t.center, [t.radius; 3]) {
                v.push(format!("tumor {i} (center {:?}, radius {}) is out of bounds", t.center, t.radius));
            }
        }
        v
    }
}

/// Rasterizes the structures and synthesizes the image.
///
/// Fails if the spec is out of bounds or an attached tumor does not end up
/// in the same 26-connected foreground component as some kidney voxel.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut label = Array3::<u8>::zeros(spec.shape);
    // Index of the tumor owning each voxel, for the attachment check.
    let mut owner = Array3::<u8>::zeros(spec.shape);
    for ((x, y, z), v) in label.indexed_iter_mut() {
        let p = [x as f64, y as f64, z as f64];
        if let Some(t) = spec.tumors.iter().position(|t| t.contains(p)) {
            *v = TUMOR;
            owner[[x, y, z]] = t as u8 + 1;
        } else if spec.kidneys.iter().any(|k| k.contains(p)) {
            *v = KIDNEY;
        }
    }
    let comps = connected_components(&label.mapv(|v| v != BACKGROUND), Connectivity::TwentySix);
    let mut comp_has_kidney = vec![false; comps.count() + 1];
    for (&id, &v) in comps.ids.iter().zip(&label) {
        comp_has_kidney[id as usize] |= v == KIDNEY;
    }
    for (i, t) in spec.tumors.iter().enumerate().filter(|(_, t)| t.attached) {
        let attached = comps
            .ids
            .iter()
            .zip(&owner)
            .any(|(&id, &o)| o as usize == i + 1 && comp_has_kidney[id as usize]);
        if !attached {
            return Err(Error::InvalidInput(format!(
                "tumor {i} (center {:?}, radius {}) is marked attached but touches no kidney",
                t.center, t.radius
            )));
        }
    }
    let it = &spec.intensities;
    let noise = Normal::new(0.0f32, it.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image = label.mapv(|v| {
        let mean = match v {
            KIDNEY => it.kidney,
            TUMOR => it.tumor,
            _ => it.background,
        };
        mean + noise.sample(&mut rng)
    });
    Ok((Volume::new(image, spec.spacing), Volume::new(label, spec.spacing)))
}

/// How [`make_dataset`] varies cases around a base layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub num_cases: usize,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Per-axis relative spacing jitter, uniform in `±spacing_jitter`.
    pub spacing_jitter: f64,
    /// Relative jitter of kidney radii.
    pub size_jitter: f64,
    /// Kidney centre jitter as a fraction of the volume extent.
    pub position_jitter: f64,
    pub kidneys: usize,
    /// Tumors per case, drawn uniformly from this inclusive range.
    pub tumors: [usize; 2],
    pub intensities: Intensities,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            num_cases: 12,
            shape: [80, 80, 40],
            spacing: [1.0, 1.0, 2.0],
            spacing_jitter: 0.1,
            size_jitter: 0.15,
            position_jitter: 0.04,
            kidneys: 2,
            tumors: [1, 2],
            intensities: Intensities::default(),
        }
    }
}

impl PhantomConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_cases == 0 {
            v.push("phantom.num_cases must be at least 1".into());
        }
        if self.shape.iter().any(|&s| s < 16) {
            v.push(format!("phantom.shape {:?} must be at least 16 on every axis", self.shape));
        }
        if Spacing::try_from(self.spacing).is_err() {
            v.push(format!("phantom.spacing {:?} must be finite and positive", self.spacing));
        }
        for (name, j) in [
            ("spacing_jitter", self.spacing_jitter),
            ("size_jitter", self.size_jitter),
            ("position_jitter", self.position_jitter),
        ] {
            if !(0.0..0.5).contains(&j) {
                v.push(format!("phantom.{name} = {j} must be in [0, 0.5)"));
            }
        }
        if !(1..=2).contains(&self.kidneys) {
            v.push(format!("phantom.kidneys = {} must be 1 or 2", self.kidneys));
        }
        if self.tumors[0] > self.tumors[1] || self.tumors[1] > 3 {
            v.push(format!("phantom.tumors = {:?} must be an increasing range within 0..=3", self.tumors));
        }
        if !(self.intensities.noise_sigma >= 0.0) {
            v.push("phantom.intensities.noise_sigma must be non-negative".into());
        }
        v
    }

    /// The spec of case `index`; a pure function of `(self, seed, index)`.
    pub fn case_spec(&self, seed: u64, index: usize) -> Result<PhantomSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[index as u64]));
        let jitter = |rng: &mut ChaCha8Rng, j: f64| if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let s = self.spacing;
        let spacing = Spacing::new(
            s[0] * (1.0 + jitter(&mut rng, self.spacing_jitter)),
            s[1] * (1.0 + jitter(&mut rng, self.spacing_jitter)),
            s[2] * (1.0 + jitter(&mut rng, self.spacing_jitter)),
        )?;
        let n = self.shape.map(|v| v as f64);
        let mut kidneys = Vec::new();
        for k in 0..self.kidneys {
            let side = if self.kidneys == 1 { 0.5 } else { [0.28, 0.72][k] };
            let base_center = [side * (n[0] - 1.0), 0.5 * (n[1] - 1.0), 0.5 * (n[2] - 1.0)];
            let base_radii = [0.13 * n[0], 0.2 * n[1], 0.3 * n[2]];
            let mut radii = [0.0; 3];
            let mut center = [0.0; 3];
            for a in 0..3 {
                radii[a] = base_radii[a] * (1.0 + jitter(&mut rng, self.size_jitter));
                center[a] = base_center[a] + n[a] * jitter(&mut rng, self.position_jitter);
                // Keep the ellipsoid inside with a one-voxel margin.
                let lo = radii[a] + 1.0;
                let hi = n[a] - 2.0 - radii[a];
                center[a] = center[a].clamp(lo, hi.max(lo));
            }
            kidneys.push(Ellipsoid { center, radii });
        }
        let count = rng.random_range(self.tumors[0]..=self.tumors[1]);
        let mut tumors = Vec::new();
        for t in 0..count {
            let k = &kidneys[t % kidneys.len()];
            let min_r = k.radii.iter().copied().fold(f64::INFINITY, f64::min);
            let radius = (min_r * rng.random_range(0.35..0.55)).max(3.0);
            // A point at 70% of the way to the kidney surface, so the
            // sphere straddles the boundary without swallowing the kidney.
            let mut dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
            dir.iter_mut().for_each(|d| *d /= norm);
            let mut center: [f64; 3] = std::array::from_fn(|a| k.center[a] + 0.7 * k.radii[a] * dir[a]);
            for a in 0..3 {
                center[a] = center[a].clamp(radius, n[a] - 1.0 - radius);
            }
            tumors.push(Tumor { center, radius, attached: true });
        }
        Ok(PhantomSpec {
            shape: self.shape,
            spacing,
            kidneys,
            tumors,
            intensities: self.intensities.clone(),
            seed: seeds::derive(seed, &[index as u64, 1]),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub image: PathBuf,
    pub label: PathBuf,
    pub shape: [usize; 3],
    pub spacing: Spacing,
    pub spec: PhantomSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub cases: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:05}")
}

/// Generates `cfg.num_cases` cases under `out_dir`, plus the manifest.
/// Same `(cfg, seed)` produces byte-identical files.
pub fn make_dataset(out_dir: &Path, cfg: &PhantomConfig, seed: u64) -> Result<Manifest> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut cases = Vec::with_capacity(cfg.num_cases);
    for i in 0..cfg.num_cases {
        let spec = cfg.case_spec(seed, i)?;
        let (image, label) = generate(&spec)?;
        let id = case_id(i);
        let image_rel = PathBuf::from(&id).join("imaging.raw");
        let label_rel = PathBuf::from(&id).join("segmentation.raw");
        write_raw(&out_dir.join(&image_rel), &image)?;
        write_raw(&out_dir.join(&label_rel), &label)?;
        cases.push(ManifestEntry {
            id,
            image: image_rel,
            label: label_rel,
            shape: image.shape(),
            spacing: image.spacing,
            spec,
        });
    }
    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        cases,
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
