//! Volume containers: single-file NIfTI-1 (`.nii`, `.nii.gz`) and a raw
//! little-endian payload described by a JSON header (`.json`).
//!
//! Arrays are indexed `(z, y, x)` in row-major order, which matches the
//! on-disk NIfTI layout where `x` varies fastest. `spacing` follows the same
//! axis order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::DataError;

const NIFTI_HEADER: usize = 348;
const NIFTI_DATA_OFFSET: usize = 352;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    /// Millimetres per voxel along `(z, y, x)`.
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f64>) -> Self {
        Self {
            data,
            spacing: [1.0; 3],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Storage type of the written payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    U8,
    I8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl VoxelType {
    fn nifti_code(self) -> i16 {
        match self {
            VoxelType::U8 => 2,
            VoxelType::I16 => 4,
            VoxelType::I32 => 8,
            VoxelType::F32 => 16,
            VoxelType::F64 => 64,
            VoxelType::I8 => 256,
            VoxelType::U16 => 512,
        }
    }

    fn from_nifti_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => VoxelType::U8,
            4 => VoxelType::I16,
            8 => VoxelType::I32,
            16 => VoxelType::F32,
            64 => VoxelType::F64,
            256 => VoxelType::I8,
            512 => VoxelType::U16,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            VoxelType::U8 | VoxelType::I8 => 1,
            VoxelType::I16 | VoxelType::U16 => 2,
            VoxelType::I32 | VoxelType::F32 => 4,
            VoxelType::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8], big_endian: bool) -> Vec<f64> {
        macro_rules! conv {
            ($t:ty) => {
                bytes
                    .chunks_exact(std::mem::size_of::<$t>())
                    .map(|c| {
                        let arr = c.try_into().unwrap();
                        (if big_endian { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
                    })
                    .collect()
            };
        }
        match self {
            VoxelType::U8 => bytes.iter().map(|&b| b as f64).collect(),
            VoxelType::I8 => bytes.iter().map(|&b| b as i8 as f64).collect(),
            VoxelType::I16 => conv!(i16),
            VoxelType::U16 => conv!(u16),
            VoxelType::I32 => conv!(i32),
            VoxelType::F32 => conv!(f32),
            VoxelType::F64 => conv!(f64),
        }
    }

    fn encode(self, values: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
        for v in values {
            match self {
                VoxelType::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
                VoxelType::I8 => out.push(v.round().clamp(-128.0, 127.0) as i8 as u8),
                VoxelType::I16 => out.extend((v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes()),
                VoxelType::U16 => out.extend((v.round().clamp(0.0, u16::MAX as f64) as u16).to_le_bytes()),
                VoxelType::I32 => out.extend((v.round() as i32).to_le_bytes()),
                VoxelType::F32 => out.extend((v as f32).to_le_bytes()),
                VoxelType::F64 => out.extend(v.to_le_bytes()),
            }
        }
    }
}

/// JSON header of the raw fallback format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    /// `(z, y, x)`.
    pub shape: [usize; 3],
    pub dtype: VoxelType,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    /// Payload file, relative to the header's directory.
    pub data_file: String,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Container {
    Nifti { gzip: bool },
    Raw,
}

fn container(path: &Path) -> Result<Container, DataError> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Container::Nifti { gzip: true })
    } else if name.ends_with(".nii") {
        Ok(Container::Nifti { gzip: false })
    } else if name.ends_with(".json") {
        Ok(Container::Raw)
    } else {
        Err(DataError::Format {
            path: path.to_path_buf(),
            message: "unrecognized extension (expected .nii, .nii.gz or .json)".into(),
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, DataError> {
    let path = path.as_ref();
    match container(path)? {
        Container::Nifti { .. } => {
            let raw = fs::read(path).map_err(io_err(path))?;
            let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
                let mut out = Vec::new();
                GzDecoder::new(raw.as_slice())
                    .read_to_end(&mut out)
                    .map_err(io_err(path))?;
                out
            } else {
                raw
            };
            parse_nifti(&bytes).map_err(|m| format_err(path, m))
        }
        Container::Raw => read_raw(path),
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume, dtype: VoxelType) -> Result<(), DataError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    match container(path)? {
        Container::Nifti { gzip } => {
            let bytes = encode_nifti(volume, dtype);
            let bytes = if gzip {
                let mut enc = GzEncoder::new(Vec::new(), Compression::default());
                enc.write_all(&bytes).map_err(io_err(path))?;
                enc.finish().map_err(io_err(path))?
            } else {
                bytes
            };
            fs::write(path, bytes).map_err(io_err(path))
        }
        Container::Raw => write_raw(path, volume, dtype),
    }
}

fn parse_nifti(bytes: &[u8]) -> Result<Volume, String> {
    if bytes.len() < NIFTI_HEADER {
        return Err(format!("file has {} bytes, shorter than a NIfTI-1 header", bytes.len()));
    }
    let big_endian = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        other => return Err(format!("sizeof_hdr is {other}, not 348")),
    };
    if &bytes[344..347] != b"n+1" {
        return Err("not a single-file NIfTI-1 volume (magic is not n+1)".into());
    }
    let i16_at = |o: usize| {
        let a = bytes[o..o + 2].try_into().unwrap();
        if big_endian { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a = bytes[o..o + 4].try_into().unwrap();
        if big_endian { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("invalid dimension count {ndim}"));
    }
    let dims: Vec<usize> = (1..=7).map(|i| i16_at(40 + 2 * i).max(1) as usize).collect();
    if ndim > 3 && dims[3..ndim as usize].iter().any(|&d| d > 1) {
        return Err(format!("expected a 3D volume, got {ndim} dimensions {:?}", &dims[..ndim as usize]));
    }
    let (nx, ny, nz) = (dims[0], dims[1], if ndim >= 3 { dims[2] } else { 1 });
    let code = i16_at(70);
    let dtype = VoxelType::from_nifti_code(code).ok_or_else(|| format!("unsupported datatype code {code}"))?;
    let spacing = [f32_at(76 + 12), f32_at(76 + 8), f32_at(76 + 4)].map(|s| if s > 0.0 { s as f64 } else { 1.0 });
    let offset = f32_at(108) as usize;
    let offset = offset.max(NIFTI_HEADER);
    let (slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
    let n = nx * ny * nz;
    let end = offset + n * dtype.size();
    if bytes.len() < end {
        return Err(format!("payload truncated: need {end} bytes, have {}", bytes.len()));
    }
    let mut values = dtype.decode(&bytes[offset..end], big_endian);
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let data = Array3::from_shape_vec((nz, ny, nx), values).map_err(|e| e.to_string())?;
    Ok(Volume { data, spacing })
}

fn encode_nifti(volume: &Volume, dtype: VoxelType) -> Vec<u8> {
    let [nz, ny, nx] = volume.shape();
    let mut h = vec![0u8; NIFTI_DATA_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&dtype.nifti_code().to_le_bytes());
    h[72..74].copy_from_slice(&((dtype.size() * 8) as i16).to_le_bytes());
    let pixdim: [f32; 4] = [1.0, volume.spacing[2] as f32, volume.spacing[1] as f32, volume.spacing[0] as f32];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI_DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: millimetres
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    dtype.encode(volume.data.iter().copied(), &mut h);
    h
}

fn raw_payload_path(header_path: &Path, header: &RawHeader) -> PathBuf {
    header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file)
}

fn read_raw(path: &Path) -> Result<Volume, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header: RawHeader = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    let payload = raw_payload_path(path, &header);
    let bytes = fs::read(&payload).map_err(io_err(&payload))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * header.dtype.size() {
        return Err(format_err(
            &payload,
            format!("expected {} bytes for shape {:?}, found {}", n * header.dtype.size(), header.shape, bytes.len()),
        ));
    }
    let values = header.dtype.decode(&bytes, false);
    let [z, y, x] = header.shape;
    let data = Array3::from_shape_vec((z, y, x), values).map_err(|e| format_err(path, e.to_string()))?;
    Ok(Volume {
        data,
        spacing: header.spacing,
    })
}

fn write_raw(path: &Path, volume: &Volume, dtype: VoxelType) -> Result<(), DataError> {
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(".json"))
        .unwrap_or("volume");
    let header = RawHeader {
        shape: volume.shape(),
        dtype,
        spacing: volume.spacing,
        data_file: format!("{stem}.raw"),
    };
    let mut bytes = Vec::with_capacity(volume.data.len() * dtype.size());
    dtype.encode(volume.data.iter().copied(), &mut bytes);
    let payload = raw_payload_path(path, &header);
    fs::write(&payload, bytes).map_err(io_err(&payload))?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        Volume {
            data: Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 100 + y * 10 + x) as f64 - 150.0),
            spacing: [2.5, 0.7, 0.8],
        }
    }

    #[test]
    fn nifti_roundtrip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&p, &sample(), VoxelType::I16).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back.data, sample().data);
            for (a, b) in back.spacing.iter().zip(sample().spacing) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nifti_layout_has_x_fastest() {
        let bytes = encode_nifti(&sample(), VoxelType::I16);
        let first = i16::from_le_bytes(bytes[352..354].try_into().unwrap());
        let second = i16::from_le_bytes(bytes[354..356].try_into().unwrap());
        assert_eq!((first, second), (-150, -149));
        assert_eq!(i16::from_le_bytes(bytes[42..44].try_into().unwrap()), 5);
    }

    #[test]
    fn scaled_big_endian_header_is_honoured() {
        let mut bytes = encode_nifti(&sample(), VoxelType::U8);
        // flip every header field we read to big-endian by rewriting them
        let swap = |b: &mut [u8], o: usize, n: usize| b[o..o + n].reverse();
        swap(&mut bytes, 0, 4);
        for i in 0..8 {
            swap(&mut bytes, 40 + 2 * i, 2);
        }
        swap(&mut bytes, 70, 2);
        for i in 0..8 {
            swap(&mut bytes, 76 + 4 * i, 4);
        }
        swap(&mut bytes, 108, 4);
        bytes[112..116].copy_from_slice(&2.0f32.to_be_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_be_bytes());
        let v = parse_nifti(&bytes).unwrap();
        assert_eq!(v.data[[0, 0, 0]], 0.0 * 2.0 - 1.0);
        assert_eq!(v.data[[2, 3, 4]], 84.0 * 2.0 - 1.0);
    }

    #[test]
    fn raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vol.json");
        write_volume(&p, &sample(), VoxelType::F32).unwrap();
        assert!(dir.path().join("vol.raw").exists());
        assert_eq!(read_volume(&p).unwrap(), sample());
    }

    #[test]
    fn bad_inputs_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(matches!(read_volume(&p), Err(DataError::Format { .. })));
        assert!(matches!(read_volume(dir.path().join("x.png")), Err(DataError::Format { .. })));
        assert!(matches!(read_volume(dir.path().join("missing.nii")), Err(DataError::Io { .. })));
    }
}
