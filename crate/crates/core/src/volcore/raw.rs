//! Raw little-endian arrays with a JSON sidecar describing shape and spacing.
//!
//! `image.raw` is paired with `image.json`:
//! `{"shape":[nx,ny,nz],"spacing":[dx,dy,dz],"dtype":"f32"}`.
//! Voxels are stored in C order over `(x, y, z)`, so `z` varies fastest.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Spacing, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing: Spacing,
    pub dtype: String,
}

/// Scalar types that can be stored in the raw format.
pub trait RawScalar: Copy + Default {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn decode(bytes: &[u8], out: &mut [Self]);
    fn encode(values: &[Self], out: &mut [u8]);
}

impl RawScalar for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;

    fn decode(bytes: &[u8], out: &mut [Self]) {
        LittleEndian::read_f32_into(bytes, out);
    }

    fn encode(values: &[Self], out: &mut [u8]) {
        LittleEndian::write_f32_into(values, out);
    }
}

impl RawScalar for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;

    fn decode(bytes: &[u8], out: &mut [Self]) {
        out.copy_from_slice(bytes);
    }

    fn encode(values: &[Self], out: &mut [u8]) {
        out.copy_from_slice(values);
    }
}

/// The sidecar lives next to the data file with a `.json` extension.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

fn data_path_of(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("raw")
    } else {
        path.to_path_buf()
    }
}

/// Reads a raw volume; `path` may name either the data file or its sidecar.
pub fn read_raw<T: RawScalar>(path: &Path) -> Result<Volume<T>> {
    let data_path = data_path_of(path);
    let side_path = sidecar_path(&data_path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::Sidecar {
        path: side_path.clone(),
        reason: e.to_string(),
    })?;
    if sidecar.dtype != T::DTYPE {
        return Err(Error::Sidecar {
            path: side_path,
            reason: format!("dtype {:?}, expected {:?}", sidecar.dtype, T::DTYPE),
        });
    }
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * T::SIZE {
        return Err(Error::Sidecar {
            path: side_path,
            reason: format!(
                "data file has {} bytes, shape {:?} needs {}",
                bytes.len(),
                sidecar.shape,
                n * T::SIZE
            ),
        });
    }
    let mut values = vec![T::default(); n];
    T::decode(&bytes, &mut values);
    let data = Array3::from_shape_vec(sidecar.shape, values).expect("length checked above");
    Ok(Volume::new(data, sidecar.spacing))
}

/// Writes `vol` to `path` (data) and the matching `.json` sidecar.
pub fn write_raw<T: RawScalar>(path: &Path, vol: &Volume<T>) -> Result<()> {
    let data_path = data_path_of(path);
    if let Some(dir) = data_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let values: Vec<T> = vol.data.iter().copied().collect();
    let mut bytes = vec![0u8; values.len() * T::SIZE];
    T::encode(&values, &mut bytes);
    fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    let sidecar = Sidecar {
        shape: vol.shape(),
        spacing: vol.spacing,
        dtype: T::DTYPE.to_string(),
    };
    let side_path = sidecar_path(&data_path);
    fs::write(&side_path, serde_json::to_string(&sidecar)?).map_err(|e| Error::io(&side_path, e))
}
