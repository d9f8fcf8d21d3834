//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Images are written as float32, label maps as int16 and displacement
//! fields as float32 with shape `(nx, ny, nz, 3)`, components `(ux, uy, uz)`
//! in voxel units. Reading accepts uint8, int16, int32, float32 and float64
//! in either byte order. Only spacing and the translation part of the
//! affine are used.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::field::DispField;
use crate::volume::{Grid, LabelMap, Volume3};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;
/// `xyzt_units`: millimetres, seconds.
const UNITS_MM_SEC: u8 = 2 | 8;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DataType {
    UInt8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl DataType {
    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Self::UInt8),
            4 => Some(Self::Int16),
            8 => Some(Self::Int32),
            16 => Some(Self::Float32),
            64 => Some(Self::Float64),
            _ => None,
        }
    }

    fn code(self) -> i16 {
        match self {
            Self::UInt8 => 2,
            Self::Int16 => 4,
            Self::Int32 => 8,
            Self::Float32 => 16,
            Self::Float64 => 64,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, Self::UInt8 | Self::Int16 | Self::Int32)
    }
}

struct Endian(bool);

impl Endian {
    fn i16(&self, b: &[u8], at: usize) -> i16 {
        let a = [b[at], b[at + 1]];
        if self.0 {
            i16::from_le_bytes(a)
        } else {
            i16::from_be_bytes(a)
        }
    }

    fn i32(&self, b: &[u8], at: usize) -> i32 {
        let a = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.0 {
            i32::from_le_bytes(a)
        } else {
            i32::from_be_bytes(a)
        }
    }

    fn f32(&self, b: &[u8], at: usize) -> f32 {
        f32::from_bits(self.i32(b, at) as u32)
    }

    fn f64(&self, b: &[u8], at: usize) -> f64 {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[at..at + 8]);
        if self.0 {
            f64::from_le_bytes(a)
        } else {
            f64::from_be_bytes(a)
        }
    }
}

/// Decoded header plus voxel values converted to f64.
struct RawNifti {
    dims: Vec<usize>,
    spacing: [f64; 3],
    origin: [f64; 3],
    datatype: DataType,
    scaled: bool,
    values: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::nifti(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse(path: &Path, bytes: &[u8]) -> Result<RawNifti> {
    use offsets::*;

    if bytes.len() < HEADER_SIZE {
        return Err(Error::nifti(path, "file shorter than the 348-byte header"));
    }
    let e = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian(true)
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian(false)
    } else {
        return Err(Error::nifti(path, "sizeof_hdr is not 348"));
    };
    debug_assert_eq!(e.i32(bytes, SIZEOF_HDR), HEADER_SIZE as i32);
    let magic = &bytes[MAGIC..MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::nifti(
            path,
            "not a single-file NIfTI-1 image (magic is not \"n+1\")",
        ));
    }

    let ndim = e.i16(bytes, DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::nifti(path, format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for k in 1..=ndim as usize {
        let d = e.i16(bytes, DIM + 2 * k);
        if d < 1 {
            return Err(Error::nifti(path, format!("dim[{k}] = {d}")));
        }
        dims.push(d as usize);
    }
    // Trailing singleton axes carry no data.
    while dims.len() > 3 && *dims.last().unwrap() == 1 {
        dims.pop();
    }
    while dims.len() < 3 {
        dims.push(1);
    }

    let code = e.i16(bytes, DATATYPE);
    let datatype = DataType::from_code(code)
        .ok_or_else(|| Error::nifti(path, format!("unsupported datatype code {code}")))?;
    let bitpix = e.i16(bytes, BITPIX);
    if bitpix as usize != 8 * datatype.size() {
        return Err(Error::nifti(
            path,
            format!("bitpix {bitpix} inconsistent with datatype {code}"),
        ));
    }

    let mut spacing = [1.0f64; 3];
    for (k, s) in spacing.iter_mut().enumerate() {
        let v = e.f32(bytes, PIXDIM + 4 * (k + 1)).abs() as f64;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::nifti(path, format!("pixdim[{}] = {v}", k + 1)));
        }
        *s = v;
    }

    let sform = e.i16(bytes, SFORM_CODE);
    let qform = e.i16(bytes, QFORM_CODE);
    let mut origin = [0.0f64; 3];
    if sform > 0 {
        let mut rows = [[0.0f64; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = e.f32(bytes, SROW_X + 16 * r + 4 * c) as f64;
            }
        }
        let off_diagonal = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .any(|(r, c)| r != c && rows[r][c].abs() > 1e-6 * rows[c][c].abs().max(1.0));
        if off_diagonal {
            log::warn!(
                "{}: sform has rotation/shear terms; only spacing and offset are used",
                path.display()
            );
        }
        origin = [rows[0][3], rows[1][3], rows[2][3]];
    } else if qform > 0 {
        for (k, o) in origin.iter_mut().enumerate() {
            *o = e.f32(bytes, QOFFSET_X + 4 * k) as f64;
        }
    }
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(Error::nifti(path, "non-finite origin"));
    }

    let offset = e.f32(bytes, VOX_OFFSET);
    if !(offset.is_finite() && offset >= HEADER_SIZE as f32) {
        return Err(Error::nifti(path, format!("vox_offset = {offset}")));
    }
    let offset = offset as usize;
    let count: usize = dims.iter().product();
    let need = offset + count * datatype.size();
    if bytes.len() < need {
        return Err(Error::nifti(
            path,
            format!("truncated: need {need} bytes, file has {}", bytes.len()),
        ));
    }
    let body = &bytes[offset..need];
    let values: Vec<f64> = match datatype {
        DataType::UInt8 => body.iter().map(|&b| b as f64).collect(),
        DataType::Int16 => (0..count).map(|i| e.i16(body, 2 * i) as f64).collect(),
        DataType::Int32 => (0..count).map(|i| e.i32(body, 4 * i) as f64).collect(),
        DataType::Float32 => (0..count).map(|i| e.f32(body, 4 * i) as f64).collect(),
        DataType::Float64 => (0..count).map(|i| e.f64(body, 8 * i)).collect(),
    };

    let slope = e.f32(bytes, SCL_SLOPE) as f64;
    let inter = e.f32(bytes, SCL_INTER) as f64;
    let scaled = slope.is_finite() && slope != 0.0 && (slope != 1.0 || inter != 0.0);
    let values = if scaled {
        values.into_iter().map(|v| v * slope + inter).collect()
    } else {
        values
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{}: voxel {i} is {}",
            path.display(),
            values[i]
        )));
    }

    Ok(RawNifti {
        dims,
        spacing,
        origin,
        datatype,
        scaled,
        values,
    })
}

fn load_raw(path: &Path) -> Result<RawNifti> {
    let bytes = read_bytes(path)?;
    parse(path, &bytes)
}

fn grid_of(path: &Path, raw: &RawNifti) -> Result<Grid> {
    let dims = [raw.dims[0], raw.dims[1], raw.dims[2]];
    Grid::new(dims, raw.spacing, raw.origin).map_err(|e| Error::nifti(path, e.to_string()))
}

/// Reads a 3D scalar image.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    let raw = load_raw(path)?;
    if raw.dims.len() != 3 {
        return Err(Error::nifti(
            path,
            format!("expected a 3D scalar image, found dims {:?}", raw.dims),
        ));
    }
    let grid = grid_of(path, &raw)?;
    let data: Vec<f32> = raw.values.iter().map(|&v| v as f32).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{}: voxel {i} overflows float32",
            path.display()
        )));
    }
    Volume3::new(grid, data)
}

/// Reads a 3D label map. Values must be non-negative integers.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let raw = load_raw(path)?;
    if raw.dims.len() != 3 {
        return Err(Error::nifti(
            path,
            format!("expected a 3D label map, found dims {:?}", raw.dims),
        ));
    }
    if !raw.datatype.is_integer() && !raw.scaled {
        log::debug!("{}: reading float label map", path.display());
    }
    let grid = grid_of(path, &raw)?;
    let mut data = Vec::with_capacity(raw.values.len());
    for (i, &v) in raw.values.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::nifti(
                path,
                format!("voxel {i} holds {v}, not a non-negative integer label"),
            ));
        }
        data.push(v as u32);
    }
    LabelMap::new(grid, data)
}

/// Reads a displacement field stored as `(nx, ny, nz, 3)` or `(nx, ny, nz, 1, 3)`.
pub fn load_field(path: impl AsRef<Path>) -> Result<DispField> {
    let path = path.as_ref();
    let mut raw = load_raw(path)?;
    let ok = match raw.dims.len() {
        4 => raw.dims[3] == 3,
        5 => raw.dims[3] == 1 && raw.dims[4] == 3,
        _ => false,
    };
    if !ok {
        return Err(Error::nifti(
            path,
            format!(
                "expected a displacement field of shape (nx, ny, nz, 3), found {:?}",
                raw.dims
            ),
        ));
    }
    let grid = grid_of(path, &raw)?;
    let n = grid.len();
    let values = std::mem::take(&mut raw.values);
    let comp = |k: usize| -> Vec<f32> { values[k * n..(k + 1) * n].iter().map(|&v| v as f32).collect() };
    DispField::from_components(grid, [comp(0), comp(1), comp(2)])
}

fn header(grid: &Grid, extra_dim: Option<usize>, datatype: DataType, intent: i16) -> Vec<u8> {
    use offsets::*;

    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());

    h[SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let mut dim = [1i16; 8];
    dim[0] = if extra_dim.is_some() { 4 } else { 3 };
    for k in 0..3 {
        dim[k + 1] = grid.dims[k] as i16;
    }
    if let Some(c) = extra_dim {
        dim[4] = c as i16;
    }
    for (k, d) in dim.iter().enumerate() {
        put_i16(&mut h, DIM + 2 * k, *d);
    }
    put_i16(&mut h, INTENT_CODE, intent);
    put_i16(&mut h, DATATYPE, datatype.code());
    put_i16(&mut h, BITPIX, (8 * datatype.size()) as i16);
    let mut pixdim = [1.0f32; 8];
    for k in 0..3 {
        pixdim[k + 1] = grid.spacing[k] as f32;
    }
    for (k, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, PIXDIM + 4 * k, *p);
    }
    put_f32(&mut h, offsets::VOX_OFFSET, DATA_OFFSET as f32);
    put_f32(&mut h, SCL_SLOPE, 1.0);
    put_f32(&mut h, SCL_INTER, 0.0);
    h[XYZT_UNITS] = UNITS_MM_SEC;
    let descrip = b"deformreg";
    h[DESCRIP..DESCRIP + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, QFORM_CODE, 1);
    put_i16(&mut h, SFORM_CODE, 1);
    for k in 0..3 {
        put_f32(&mut h, QOFFSET_X + 4 * k, grid.origin[k] as f32);
        for c in 0..4 {
            let v = if c == k {
                grid.spacing[k]
            } else if c == 3 {
                grid.origin[k]
            } else {
                0.0
            };
            put_f32(&mut h, SROW_X + 16 * k + 4 * c, v as f32);
        }
    }
    h[MAGIC..MAGIC + 4].copy_from_slice(b"n+1\0");
    // Bytes 348..352 stay zero: no extensions.
    h
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    if let Err(e) = fs::write(path, payload) {
        let _ = fs::remove_file(path);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Writes an image as float32.
pub fn save_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = header(vol.grid(), None, DataType::Float32, 0);
    bytes.reserve(4 * vol.data().len());
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), bytes)
}

/// Writes a label map as int16.
pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    if let Some(&max) = labels.label_set().last() {
        if max > i16::MAX as u32 {
            return Err(Error::InvalidParameter(format!(
                "label {max} does not fit the int16 label format"
            )));
        }
    }
    let mut bytes = header(labels.grid(), None, DataType::Int16, 0);
    bytes.reserve(2 * labels.data().len());
    for &v in labels.data() {
        bytes.extend_from_slice(&(v as i16).to_le_bytes());
    }
    write_file(path.as_ref(), bytes)
}

/// Writes a displacement field as float32 `(nx, ny, nz, 3)`.
pub fn save_field(field: &DispField, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = header(field.grid(), Some(3), DataType::Float32, INTENT_VECTOR);
    bytes.reserve(12 * field.grid().len());
    for comp in field.components() {
        for v in comp {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path.as_ref(), bytes)
}
