//! Binary files for k-space data and parameter images. All integers and
//! floats are little-endian.
//!
//! K-space file (`.ksp`):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `QMRIKSP1` |
//! | 8 | 4 | `n1` (u32) |
//! | 12 | 4 | `n2` (u32) |
//! | 16 | 4 | `L` (u32) |
//! | 20 | 4 | `r` (u32) |
//! | 24 | 8 | mask seed (u64) |
//! | 32 | 4 | mask offset (u32) |
//! | 36 | 1 | line axis: 0 rows, 1 columns |
//! | 37 | 1 | precision: 4 (two f32 per entry) or 8 (two f64 per entry) |
//! | 38 | 2 | reserved, zero |
//! | 40 | `L·n1·n2·2·precision` | payload: real and imaginary part per entry, index order `(l, i, j)` with `j` fastest |
//! | … | `⌈L·n1·n2/8⌉` | mask bits in the same order, least significant bit first |
//!
//! Parameter image file (`.pim`):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `QMRIPIM1` |
//! | 8 | 4 | `n1` (u32) |
//! | 12 | 4 | `n2` (u32) |
//! | 16 | `3·n1·n2·8` | f64 values in order `(channel, i, j)`, channels ρ, T1, T2 |

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::{KSpaceData, LineAxis, ParameterImage, SamplingMaskSet};

pub const KSPACE_MAGIC: &[u8; 8] = b"QMRIKSP1";
pub const PIMAGE_MAGIC: &[u8; 8] = b"QMRIPIM1";

/// Storage precision of the complex payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// Two `f32` per entry; lossy.
    Single,
    /// Two `f64` per entry.
    #[default]
    Double,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            4 => Ok(Precision::Single),
            8 => Ok(Precision::Double),
            _ => Err(Error::Format(format!("unknown precision code {c}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" | "complex64" => Ok(Precision::Single),
            "double" | "complex128" => Ok(Precision::Double),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected single or double)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KSpaceHeader {
    pub n1: usize,
    pub n2: usize,
    pub len: usize,
    pub r: usize,
    pub mask_seed: u64,
    pub offset: usize,
    pub axis: LineAxis,
    pub precision: Precision,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit the header")))
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated file: {e}"))
}

pub fn write_kspace<W: Write>(w: W, data: &KSpaceData, mask_seed: u64, precision: Precision) -> Result<()> {
    let mut w = BufWriter::new(w);
    let (len, n1, n2) = data.data.dim();
    let masks = &data.masks;
    w.write_all(KSPACE_MAGIC)?;
    w.write_u32::<LE>(to_u32(n1, "n1")?)?;
    w.write_u32::<LE>(to_u32(n2, "n2")?)?;
    w.write_u32::<LE>(to_u32(len, "L")?)?;
    w.write_u32::<LE>(to_u32(masks.r(), "r")?)?;
    w.write_u64::<LE>(mask_seed)?;
    w.write_u32::<LE>(to_u32(masks.offset(), "offset")?)?;
    w.write_u8(match masks.axis() {
        LineAxis::Rows => 0,
        LineAxis::Columns => 1,
    })?;
    w.write_u8(precision.code())?;
    w.write_u16::<LE>(0)?;
    for z in data.data.iter() {
        match precision {
            Precision::Single => {
                w.write_f32::<LE>(z.re as f32)?;
                w.write_f32::<LE>(z.im as f32)?;
            }
            Precision::Double => {
                w.write_f64::<LE>(z.re)?;
                w.write_f64::<LE>(z.im)?;
            }
        }
    }
    let mut byte = 0u8;
    for (k, &b) in masks.masks().iter().enumerate() {
        if b {
            byte |= 1 << (k % 8);
        }
        if k % 8 == 7 {
            w.write_u8(byte)?;
            byte = 0;
        }
    }
    if (len * n1 * n2) % 8 != 0 {
        w.write_u8(byte)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kspace<R: Read>(r: R) -> Result<(KSpaceData, KSpaceHeader)> {
    let mut r = BufReader::new(r);
    read_magic(&mut r, KSPACE_MAGIC)?;
    let mut u32f = || r.read_u32::<LE>().map(|v| v as usize).map_err(truncated);
    let (n1, n2, len, rr) = (u32f()?, u32f()?, u32f()?, u32f()?);
    let mask_seed = r.read_u64::<LE>().map_err(truncated)?;
    let offset = r.read_u32::<LE>().map_err(truncated)? as usize;
    let axis = match r.read_u8().map_err(truncated)? {
        0 => LineAxis::Rows,
        1 => LineAxis::Columns,
        a => return Err(Error::Format(format!("unknown axis code {a}"))),
    };
    let precision = Precision::from_code(r.read_u8().map_err(truncated)?)?;
    if r.read_u16::<LE>().map_err(truncated)? != 0 {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    if n1 == 0 || n2 == 0 || len == 0 || rr == 0 {
        return Err(Error::Format(format!("invalid dimensions n1={n1} n2={n2} L={len} r={rr}")));
    }
    let total = n1
        .checked_mul(n2)
        .and_then(|v| v.checked_mul(len))
        .filter(|&v| v <= 1 << 34)
        .ok_or_else(|| Error::Format("dimensions too large".into()))?;
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        let z = match precision {
            Precision::Single => {
                let re = r.read_f32::<LE>().map_err(truncated)? as f64;
                let im = r.read_f32::<LE>().map_err(truncated)? as f64;
                Complex64::new(re, im)
            }
            Precision::Double => {
                let re = r.read_f64::<LE>().map_err(truncated)?;
                let im = r.read_f64::<LE>().map_err(truncated)?;
                Complex64::new(re, im)
            }
        };
        values.push(z);
    }
    let mut bytes = vec![0u8; total.div_ceil(8)];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after mask bits".into()));
    }
    let bits: Vec<bool> = (0..total).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect();
    let masks = Array3::from_shape_vec((len, n1, n2), bits).expect("length checked");
    let data = Array3::from_shape_vec((len, n1, n2), values).expect("length checked");
    if data.iter().zip(masks.iter()).any(|(z, &m)| !m && *z != Complex64::new(0.0, 0.0)) {
        return Err(Error::Format("non-zero data outside the sampling mask".into()));
    }
    let mask_set = SamplingMaskSet::from_parts(masks, rr, offset, axis)?;
    let header = KSpaceHeader { n1, n2, len, r: rr, mask_seed, offset, axis, precision };
    Ok((KSpaceData::new(data, mask_set)?, header))
}

pub fn write_parameter_image<W: Write>(w: W, u: &ParameterImage) -> Result<()> {
    let mut w = BufWriter::new(w);
    let (n1, n2) = u.dims();
    w.write_all(PIMAGE_MAGIC)?;
    w.write_u32::<LE>(to_u32(n1, "n1")?)?;
    w.write_u32::<LE>(to_u32(n2, "n2")?)?;
    for &v in u.as_slice() {
        w.write_f64::<LE>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_parameter_image<R: Read>(r: R) -> Result<ParameterImage> {
    let mut r = BufReader::new(r);
    read_magic(&mut r, PIMAGE_MAGIC)?;
    let n1 = r.read_u32::<LE>().map_err(truncated)? as usize;
    let n2 = r.read_u32::<LE>().map_err(truncated)? as usize;
    if n1 == 0 || n2 == 0 || n1 * n2 > 1 << 30 {
        return Err(Error::Format(format!("invalid image size {n1}×{n2}")));
    }
    let mut values = vec![0.0; 3 * n1 * n2];
    r.read_f64_into::<LE>(&mut values).map_err(truncated)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after image data".into()));
    }
    ParameterImage::from_array(Array3::from_shape_vec((3, n1, n2), values).expect("length checked"))
}

/// Opens `path` for reading, mapping a missing file to a configuration error.
pub(crate) fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::PulseSequence;
    use crate::data::{make_masks, make_phantom, synthesize, NoiseScale};

    fn sample() -> KSpaceData {
        let ph = make_phantom(12, 10, 3).unwrap();
        let seq = PulseSequence::default_mrf(3, 1).unwrap();
        let masks = make_masks(12, 10, 3, 4, 9, LineAxis::Columns).unwrap();
        synthesize(&ph.truth, &seq, &masks, 0.5, NoiseScale::Std, 2).unwrap()
    }

    #[test]
    fn kspace_round_trip_double_is_exact() {
        let data = sample();
        let mut buf = Vec::new();
        write_kspace(&mut buf, &data, 9, Precision::Double).unwrap();
        assert_eq!(&buf[..8], KSPACE_MAGIC);
        assert_eq!(buf.len(), 40 + 3 * 12 * 10 * 16 + (3 * 12 * 10usize).div_ceil(8));
        let (back, header) = read_kspace(&buf[..]).unwrap();
        assert_eq!(back, data);
        assert_eq!((header.n1, header.n2, header.len, header.r, header.mask_seed), (12, 10, 3, 4, 9));
        assert_eq!(header.axis, LineAxis::Columns);
    }

    #[test]
    fn kspace_single_precision_rounds() {
        let data = sample();
        let mut buf = Vec::new();
        write_kspace(&mut buf, &data, 0, Precision::Single).unwrap();
        let (back, header) = read_kspace(&buf[..]).unwrap();
        assert_eq!(header.precision, Precision::Single);
        assert_eq!(back.masks, data.masks);
        for (a, b) in back.data.iter().zip(data.data.iter()) {
            assert!((a - b).norm() <= 1e-6 * b.norm().max(1.0));
        }
    }

    #[test]
    fn corrupt_kspace_files_are_rejected() {
        let data = sample();
        let mut buf = Vec::new();
        write_kspace(&mut buf, &data, 0, Precision::Double).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_kspace(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_kspace(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut longer = buf.clone();
        longer.push(0);
        assert!(matches!(read_kspace(&longer[..]), Err(Error::Format(_))));
        // clear every mask bit: the sampled data now lies outside the mask
        let mut unmasked = buf.clone();
        let n = unmasked.len();
        for b in &mut unmasked[n - (3 * 12 * 10usize).div_ceil(8)..] {
            *b = 0;
        }
        assert!(matches!(read_kspace(&unmasked[..]), Err(Error::Format(_))));
    }

    #[test]
    fn parameter_image_round_trip() {
        let u = make_phantom(9, 11, 4).unwrap().truth;
        let mut buf = Vec::new();
        write_parameter_image(&mut buf, &u).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 9 * 11 * 8);
        assert_eq!(read_parameter_image(&buf[..]).unwrap(), u);
        assert!(read_parameter_image(&buf[..20]).is_err());
    }
}
