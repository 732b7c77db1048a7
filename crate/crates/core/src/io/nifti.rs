//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Header fields the volume model does not represent are kept in
//! [`NiftiMeta`] so they survive a read/write cycle.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::read_file;
use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume, Volume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// Header fields carried alongside a volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiftiMeta {
    pub big_endian: bool,
    pub datatype: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// Axes whose direction cosine is negative in the stored affine.
    /// Geometry keeps positive spacing; the flip is restored on write.
    pub axis_flip: [bool; 3],
    pub xyzt_units: u8,
    pub intent_code: i16,
    pub intent_name: String,
    pub descrip: String,
}

impl Default for NiftiMeta {
    fn default() -> Self {
        Self {
            big_endian: false,
            datatype: DT_FLOAT32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            qform_code: 1,
            sform_code: 1,
            axis_flip: [false; 3],
            xyzt_units: 2,
            intent_code: 0,
            intent_name: String::new(),
            descrip: String::new(),
        }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn text(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

struct Header<'a, B: ByteOrder> {
    raw: &'a [u8],
    _order: std::marker::PhantomData<B>,
}

impl<B: ByteOrder> Header<'_, B> {
    fn i16(&self, at: usize) -> i16 {
        B::read_i16(&self.raw[at..])
    }

    fn f32(&self, at: usize) -> f32 {
        B::read_f32(&self.raw[at..])
    }
}

#[derive(Debug)]
struct Parsed {
    geom: Geometry,
    values: Vec<f64>,
    meta: NiftiMeta,
}

/// Rotation-and-scale part of the active affine, or `None` when neither
/// sform nor qform is set.
fn affine_linear<B: ByteOrder>(h: &Header<'_, B>, pixdim: [f64; 3]) -> Option<[[f64; 3]; 3]> {
    if h.i16(254) > 0 {
        return Some(std::array::from_fn(|r| std::array::from_fn(|c| h.f32(280 + 16 * r + 4 * c) as f64)));
    }
    if h.i16(252) > 0 {
        let (b, c, d) = (h.f32(256) as f64, h.f32(260) as f64, h.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.f32(76) < 0.0 { -1.0 } else { 1.0 };
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
        return Some(std::array::from_fn(|r| std::array::from_fn(|col| rot[r][col] * scale[col])));
    }
    None
}

fn parse_header<B: ByteOrder>(bytes: &[u8], big_endian: bool) -> Result<Parsed> {
    let h = Header::<B> { raw: bytes, _order: std::marker::PhantomData };
    let ndim_raw = h.i16(40);
    if !(1..=7).contains(&ndim_raw) {
        return Err(Error::Format(format!("dim[0] = {ndim_raw} out of range")));
    }
    let mut ndim = ndim_raw as usize;
    let dim: Vec<i16> = (1..=ndim).map(|d| h.i16(40 + 2 * d)).collect();
    while ndim > 3 && dim[ndim - 1] == 1 {
        ndim -= 1;
    }
    if ndim != 3 {
        return Err(Error::Not3d(format!("dim = {:?}", dim)));
    }
    if dim[..3].iter().any(|&d| d < 1) {
        return Err(Error::Format(format!("non-positive dimension in {dim:?}")));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];

    let datatype = h.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDtype(other)),
    };
    let pixdim: [f64; 3] = std::array::from_fn(|a| h.f32(80 + 4 * a) as f64);
    let spacing = pixdim.map(f64::abs);

    let mut axis_flip = [false; 3];
    if let Some(m) = affine_linear(&h, pixdim) {
        let largest = m.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()));
        for r in 0..3 {
            for c in 0..3 {
                if r != c && m[r][c].abs() > 1e-6 * largest {
                    return Err(Error::ObliqueUnsupported(format!("affine rows {m:?}")));
                }
            }
            axis_flip[r] = m[r][r] < 0.0;
        }
    }
    let origin: [f64; 3] = if h.i16(254) > 0 {
        [h.f32(292), h.f32(308), h.f32(324)].map(|x| x as f64)
    } else if h.i16(252) > 0 {
        [h.f32(268), h.f32(272), h.f32(276)].map(|x| x as f64)
    } else {
        [0.0; 3]
    };
    let geom = Geometry::new(dims, spacing, origin)?;

    let vox_offset = h.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} inside the header")));
    }
    let start = vox_offset as usize;
    let count = geom.len();
    let body = bytes
        .get(start..start + count * width)
        .ok_or_else(|| Error::Format(format!("truncated data: need {} bytes after offset {start}", count * width)))?;
    let mut values: Vec<f64> = match datatype {
        DT_UINT8 => body.iter().map(|&b| b as f64).collect(),
        DT_INT16 => body.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DT_FLOAT32 => body.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        _ => body.chunks_exact(8).map(|c| B::read_f64(c)).collect(),
    };
    let (slope, inter) = (h.f32(112), h.f32(116));
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        let (s, b) = (slope as f64, inter as f64);
        values.iter_mut().for_each(|x| *x = *x * s + b);
    }

    let meta = NiftiMeta {
        big_endian,
        datatype,
        scl_slope: slope,
        scl_inter: inter,
        qform_code: h.i16(252),
        sform_code: h.i16(254),
        axis_flip,
        xyzt_units: bytes[123],
        intent_code: h.i16(68),
        intent_name: text(&bytes[328..344]),
        descrip: text(&bytes[148..228]),
    };
    Ok(Parsed { geom, values, meta })
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let bytes = if is_gzip(bytes) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        std::borrow::Cow::Owned(out)
    } else {
        std::borrow::Cow::Borrowed(bytes)
    };
    if bytes.len() < HEADER_SIZE {
        return Err(Error::NotNifti(format!("only {} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    let big_endian = match (LittleEndian::read_i32(&bytes[..4]), BigEndian::read_i32(&bytes[..4])) {
        (348, _) => false,
        (_, 348) => true,
        (n, _) => return Err(Error::NotNifti(format!("sizeof_hdr is {n}, expected 348"))),
    };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::NotNifti(
                "magic `ni1` marks the two-file .hdr/.img pair form, which is unsupported".into(),
            ))
        }
        other => return Err(Error::NotNifti(format!("bad magic {other:?}"))),
    }
    if big_endian {
        parse_header::<BigEndian>(&bytes, true)
    } else {
        parse_header::<LittleEndian>(&bytes, false)
    }
}

/// Reads a scalar volume; scaling from `scl_slope`/`scl_inter` is applied.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    read_nifti_with_meta(path).map(|(v, _)| v)
}

pub fn read_nifti_with_meta(path: &Path) -> Result<(Volume, NiftiMeta)> {
    let p = parse(&read_file(path)?)?;
    let v = Volume::new(p.geom, p.values.into_iter().map(|x| x as f32).collect())?;
    Ok((v, p.meta))
}

/// Reads a label map; every scaled voxel must be a non-negative integer.
pub fn read_nifti_labels(path: &Path) -> Result<LabelVolume> {
    let p = parse(&read_file(path)?)?;
    let data = p
        .values
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                Ok(x as u32)
            } else {
                Err(Error::Format(format!("label value {x} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::new(p.geom, data)
}

/// Serializes `v` as little-endian float32 with an axis-aligned sform.
pub fn encode_nifti(v: &Volume, meta: &NiftiMeta) -> Vec<u8> {
    let g = v.geometry();
    let mut h = vec![0u8; DATA_OFFSET];
    type E = LittleEndian;
    E::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for (d, x) in dim.iter().enumerate() {
        E::write_i16(&mut h[40 + 2 * d..], *x);
    }
    E::write_i16(&mut h[68..], meta.intent_code);
    E::write_i16(&mut h[70..], DT_FLOAT32);
    E::write_i16(&mut h[72..], 32);
    let sign = meta.axis_flip.map(|f| if f { -1.0 } else { 1.0 });
    let pixdim = [1.0, g.spacing[0] as f32, g.spacing[1] as f32, g.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (d, x) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[76 + 4 * d..], *x);
    }
    E::write_f32(&mut h[108..], DATA_OFFSET as f32);
    h[123] = meta.xyzt_units;
    let descrip = meta.descrip.as_bytes();
    h[148..148 + descrip.len().min(79)].copy_from_slice(&descrip[..descrip.len().min(79)]);
    let only_flips_z = !meta.axis_flip[0] && !meta.axis_flip[1];
    let qform_code = if only_flips_z { meta.qform_code.max(1) } else { 0 };
    E::write_i16(&mut h[252..], qform_code);
    E::write_i16(&mut h[254..], meta.sform_code.max(1));
    if meta.axis_flip[2] && only_flips_z {
        E::write_f32(&mut h[76..], -1.0);
    }
    for a in 0..3 {
        E::write_f32(&mut h[268 + 4 * a..], g.origin[a] as f32);
        E::write_f32(&mut h[280 + 16 * a + 4 * a..], (sign[a] * g.spacing[a]) as f32);
        E::write_f32(&mut h[280 + 16 * a + 12..], g.origin[a] as f32);
    }
    let name = meta.intent_name.as_bytes();
    h[328..328 + name.len().min(15)].copy_from_slice(&name[..name.len().min(15)]);
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(v.data().len() * 4);
    for &x in v.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    h
}

/// Writes float32 NIfTI; gzip-compressed when the path ends in `.gz`.
/// Spacing and origin are stored as f32, as the format requires.
pub fn write_nifti(v: &Volume, path: &Path) -> Result<()> {
    write_nifti_with_meta(v, &NiftiMeta::default(), path)
}

pub fn write_nifti_with_meta(v: &Volume, meta: &NiftiMeta, path: &Path) -> Result<()> {
    let bytes = encode_nifti(v, meta);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(std::fs::File::create(path)?, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}
