use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian as BE, ReadBytesExt, WriteBytesExt};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Element type byte of an IDX header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    pub fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// A decoded IDX array with values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Parses an IDX file: two zero bytes, the type byte, the dimension count,
/// big-endian `u32` dimensions, then big-endian elements.
pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    let mut cur = Cursor::new(bytes);
    let eof = |c: &Cursor<&[u8]>| format_err(c.position(), "unexpected end of file");
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| eof(&cur))?;
    if magic[..2] != [0, 0] {
        return Err(format_err(0, "IDX magic must start with two zero bytes"));
    }
    let dtype = IdxType::from_code(magic[2])
        .ok_or_else(|| format_err(2, format!("unknown IDX type byte {:#04x}", magic[2])))?;
    let ndim = magic[3] as usize;
    if ndim == 0 {
        return Err(format_err(3, "IDX array without dimensions"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(cur.read_u32::<BE>().map_err(|_| eof(&cur))? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    let start = cur.position();
    let payload = bytes.len() as u64 - start;
    if payload != (n * dtype.size()) as u64 {
        return Err(format_err(
            start,
            format!("payload has {payload} bytes, dimensions {dims:?} need {}", n * dtype.size()),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match dtype {
            IdxType::U8 => cur.read_u8().map(f64::from),
            IdxType::I8 => cur.read_i8().map(f64::from),
            IdxType::I16 => cur.read_i16::<BE>().map(f64::from),
            IdxType::I32 => cur.read_i32::<BE>().map(f64::from),
            IdxType::F32 => cur.read_f32::<BE>().map(f64::from),
            IdxType::F64 => cur.read_f64::<BE>(),
        };
        values.push(v.map_err(|_| eof(&cur))?);
    }
    Ok(IdxArray { dtype, dims, values })
}

/// Serializes `values` with the given type. Values are cast, so integer
/// types truncate toward zero and saturate.
pub fn write_idx(dtype: IdxType, dims: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    let n: usize = dims.iter().product();
    if n != values.len() {
        return Err(Error::LengthMismatch {
            left: n,
            right: values.len(),
        });
    }
    if dims.is_empty() || dims.len() > 255 {
        return Err(Error::config("IDX arrays need 1 to 255 dimensions"));
    }
    let mut out = vec![0, 0, dtype.code(), dims.len() as u8];
    for &d in dims {
        out.write_u32::<BE>(
            u32::try_from(d).map_err(|_| Error::config(format!("dimension {d} exceeds u32")))?,
        )?;
    }
    for &v in values {
        match dtype {
            IdxType::U8 => out.write_u8(v as u8)?,
            IdxType::I8 => out.write_i8(v as i8)?,
            IdxType::I16 => out.write_i16::<BE>(v as i16)?,
            IdxType::I32 => out.write_i32::<BE>(v as i32)?,
            IdxType::F32 => out.write_f32::<BE>(v as f32)?,
            IdxType::F64 => out.write_f64::<BE>(v)?,
        }
    }
    Ok(out)
}

/// Builds a dataset from an image array and a 1-D label array. `u8` images
/// are scaled by `1/255`; `(N, H, W)` gains a channel axis; `(N, F)` stays
/// flat. The class count is one past the largest label.
pub fn dataset_from_idx(images: IdxArray, labels: IdxArray) -> Result<Dataset> {
    if labels.dims.len() != 1 {
        return Err(format_err(3, format!("labels must be 1-D, got {:?}", labels.dims)));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.dims[0],
        });
    }
    let inputs = tensor_from_idx(images)?;
    let mut ls = Vec::with_capacity(n);
    for (i, &l) in labels.values.iter().enumerate() {
        if l < 0.0 || l.fract() != 0.0 {
            return Err(Error::Domain(format!("label {l} at index {i} is not a class index")));
        }
        ls.push(l as usize);
    }
    let classes = ls.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, ls, classes)
}

/// Sample tensor of an image array, with the scaling and axes of
/// [`dataset_from_idx`].
pub fn tensor_from_idx(images: IdxArray) -> Result<Tensor> {
    let mut shape = images.dims.clone();
    match shape.len() {
        2 | 4 => {}
        3 => shape.insert(1, 1),
        _ => return Err(Error::shape(format!("unsupported image dimensions {:?}", images.dims))),
    }
    let scale = if images.dtype == IdxType::U8 { 1.0 / 255.0 } else { 1.0 };
    let data = images.values.iter().map(|&v| (v * scale) as f32).collect();
    Tensor::new(shape, data)
}

/// Reads an image file and a label file.
pub fn load_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let im = read_idx(&std::fs::read(images)?)?;
    let lb = read_idx(&std::fs::read(labels)?)?;
    dataset_from_idx(im, lb)
}

/// Writes `f32` images with their natural dimensions and `u8` labels.
pub fn save_dataset(d: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if d.classes > 256 {
        return Err(Error::config("u8 labels hold at most 256 classes"));
    }
    let vals: Vec<f64> = d.inputs.data().iter().map(|&v| v as f64).collect();
    std::fs::write(images, write_idx(IdxType::F32, d.inputs.shape(), &vals)?)?;
    let ls: Vec<f64> = d.labels.iter().map(|&l| l as f64).collect();
    std::fs::write(labels, write_idx(IdxType::U8, &[d.len()], &ls)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_images_are_scaled() {
        let im = write_idx(IdxType::U8, &[2, 1, 2], &[0.0, 255.0, 51.0, 102.0]).unwrap();
        assert_eq!(&im[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
        let lb = write_idx(IdxType::U8, &[2], &[1.0, 0.0]).unwrap();
        let d = dataset_from_idx(read_idx(&im).unwrap(), read_idx(&lb).unwrap()).unwrap();
        assert_eq!(d.inputs.shape(), &[2, 1, 1, 2]);
        assert_eq!(d.inputs.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.classes, 2);
    }

    #[test]
    fn multi_byte_values_are_big_endian() {
        let b = write_idx(IdxType::I16, &[1], &[-2.0]).unwrap();
        assert_eq!(&b[8..], &[0xff, 0xfe]);
        let b = write_idx(IdxType::F32, &[1], &[1.0]).unwrap();
        assert_eq!(&b[8..], &[0x3f, 0x80, 0, 0]);
        assert_eq!(read_idx(&b).unwrap().values, vec![1.0]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let good = write_idx(IdxType::U8, &[3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(read_idx(&good[..good.len() - 1]), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[2] = 0x0A;
        assert!(matches!(read_idx(&bad), Err(Error::Format { offset: 2, .. })));
        let im = write_idx(IdxType::F32, &[2, 2], &[0.0; 4]).unwrap();
        assert!(dataset_from_idx(read_idx(&im).unwrap(), read_idx(&good).unwrap()).is_err());
    }
}
