//! Single-file container for named `f64` tensors plus a JSON metadata block.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CLSYNCKP" | version u32 | meta_len u64 | meta (UTF-8 JSON)
//! count u32 | count × { name_len u32 | name | ndim u32 | dims u64… | values f64… }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"CLSYNCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta = read_vec(&mut r, meta_len)?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("tensor `{name}` has {ndim} dims")));
            }
            let dims = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let bytes = read_vec(&mut r, n * 8)?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn write_atomic(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| CheckpointError::Io(e.error))?;
        Ok(())
    }
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(CheckpointError::Corrupt("unexpected end of file".into()));
    }
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}
