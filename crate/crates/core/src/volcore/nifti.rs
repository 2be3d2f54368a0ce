//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) support.
//!
//! Only what the pipeline needs: 3D scalar data, spacing from `pixdim`, and
//! intensity scaling. Orientation matrices are ignored.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use super::{Spacing, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if path.to_string_lossy().ends_with(".gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

/// Reads a 3D NIfTI-1 image as `f32`, applying `scl_slope`/`scl_inter`.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(bad(path, "file shorter than header"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(path, &bytes)
    } else {
        Err(bad(path, "sizeof_hdr is not 348"))
    }
}

fn parse<B: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if &bytes[344..347] != b"n+1" {
        return Err(bad(path, "not a single-file NIfTI-1 image (magic)"));
    }
    let mut dim = [0i16; 8];
    B::read_i16_into(&bytes[40..56], &mut dim);
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(bad(path, format!("dim[0] = {ndim}")));
    }
    let extent = |i: usize| if i as i16 <= ndim { dim[i].max(1) as usize } else { 1 };
    if (4..=ndim as usize).any(|i| extent(i) != 1) {
        return Err(bad(path, format!("expected a 3D volume, dims {:?}", &dim[1..])));
    }
    let shape = [extent(1), extent(2), extent(3)];
    let datatype = B::read_i16(&bytes[70..72]);
    let mut pixdim = [0f32; 8];
    B::read_f32_into(&bytes[76..108], &mut pixdim);
    let vox_offset = B::read_f32(&bytes[108..112]).max(HEADER_SIZE as f32) as usize;
    let slope = B::read_f32(&bytes[112..116]);
    let inter = B::read_f32(&bytes[116..120]);

    let spacing = Spacing::new(
        pixdim[1] as f64,
        pixdim[2] as f64,
        pixdim[3] as f64,
    )
    .map_err(|_| bad(path, format!("pixdim {:?}", &pixdim[1..4])))?;

    let n: usize = shape.iter().product();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(bad(path, format!("unsupported datatype {other}"))),
    };
    let payload = bytes
        .get(vox_offset..vox_offset + n * width)
        .ok_or_else(|| bad(path, "data section truncated"))?;
    let values: Vec<f32> = payload
        .chunks_exact(width)
        .map(|c| match datatype {
            DT_UINT8 => c[0] as f32,
            DT_INT8 => c[0] as i8 as f32,
            DT_INT16 => B::read_i16(c) as f32,
            DT_UINT16 => B::read_u16(c) as f32,
            DT_INT32 => B::read_i32(c) as f32,
            DT_UINT32 => B::read_u32(c) as f32,
            DT_FLOAT32 => B::read_f32(c),
            _ => B::read_f64(c) as f32,
        })
        .collect();
    let scale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let values = if scale {
        values.into_iter().map(|v| v * slope + inter).collect()
    } else {
        values
    };
    // NIfTI stores x fastest.
    let fortran = Array3::from_shape_vec(shape.f(), values).expect("length checked above");
    let mut data = Array3::zeros(shape);
    data.assign(&fortran);
    Ok(Volume::new(data, spacing))
}

/// Scalar types that can be written to NIfTI.
pub trait NiftiScalar: Copy {
    const DATATYPE: i16;
    const BITPIX: i16;
    fn put(self, out: &mut Vec<u8>);
}

impl NiftiScalar for f32 {
    const DATATYPE: i16 = DT_FLOAT32;
    const BITPIX: i16 = 32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl NiftiScalar for u8 {
    const DATATYPE: i16 = DT_UINT8;
    const BITPIX: i16 = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

/// Writes a little-endian single-file NIfTI-1 image; gzipped if the path ends in `.gz`.
pub fn write_nifti<T: NiftiScalar>(path: &Path, vol: &Volume<T>) -> Result<()> {
    let shape = vol.shape();
    let mut buf = vec![0u8; HEADER_SIZE + 4];
    LittleEndian::write_i32(&mut buf[0..4], HEADER_SIZE as i32);
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for (d, n) in dim[1..4].iter_mut().zip(shape) {
        *d = i16::try_from(n).map_err(|_| bad(path, "dimension exceeds i16"))?;
    }
    LittleEndian::write_i16_into(&dim, &mut buf[40..56]);
    LittleEndian::write_i16(&mut buf[70..72], T::DATATYPE);
    LittleEndian::write_i16(&mut buf[72..74], T::BITPIX);
    let s = vol.spacing.as_array();
    let pixdim = [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 1.0, 1.0, 1.0, 1.0];
    LittleEndian::write_f32_into(&pixdim, &mut buf[76..108]);
    LittleEndian::write_f32(&mut buf[108..112], (HEADER_SIZE + 4) as f32);
    LittleEndian::write_f32(&mut buf[112..116], 1.0);
    buf[123] = 10; // xyzt_units: mm, s
    buf[344..348].copy_from_slice(b"n+1\0");
    // Fortran order: reversed axes of the C-order view.
    for v in vol.data.t().iter() {
        v.put(&mut buf);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if path.to_string_lossy().ends_with(".gz") {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&buf).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(&buf)
    };
    res.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::{load_case, LabelVolume};

    fn ramp() -> Volume {
        let data = Array3::from_shape_fn([3, 4, 5], |(x, y, z)| (x * 100 + y * 10 + z) as f32);
        Volume::new(data, Spacing::new(0.8, 0.8, 2.5).unwrap())
    }

    #[test]
    fn round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let path = dir.path().join(name);
            write_nifti(&path, &ramp()).unwrap();
            let back = read_nifti(&path).unwrap();
            assert_eq!(back.data, ramp().data);
            assert!((back.spacing.dz() - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn label_through_load_case() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.nii.gz");
        let lab = dir.path().join("seg.nii.gz");
        write_nifti(&img, &ramp()).unwrap();
        let mut l: LabelVolume = Volume::filled([3, 4, 5], 0u8, ramp().spacing);
        l.data[[2, 3, 4]] = 2;
        write_nifti(&lab, &l).unwrap();
        let (_, back) = load_case(&img, Some(&lab)).unwrap();
        assert_eq!(back.unwrap().data, l.data);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.nii");
        std::fs::write(&path, vec![1u8; 400]).unwrap();
        assert!(matches!(read_nifti(&path), Err(Error::Nifti { .. })));
    }
}
