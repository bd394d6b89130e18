//! Little-endian dataset container: magic, header, f32 images, u32 labels,
//! then a CRC32 of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset};
use crate::autodiff::{Real, Tensor};

pub const CONTAINER_MAGIC: &[u8; 5] = b"FSVB1";
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 5 + 5 * 4 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub classes: u32,
    pub samples: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub dtype: u8,
}

impl ContainerHeader {
    fn payload_len(&self) -> u64 {
        let pixels = self.samples as u64 * self.channels as u64 * self.height as u64 * self.width as u64;
        pixels * 4 + self.samples as u64 * 4
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, DataError> {
    u32::try_from(v).map_err(|_| DataError::Validation(format!("{what} {v} does not fit the container header")))
}

pub fn write_container(dataset: &Dataset, mut out: impl Write) -> Result<(), DataError> {
    let [c, h, w] = dataset.image_shape();
    let header = [
        to_u32(dataset.classes(), "class count")?,
        to_u32(dataset.len(), "sample count")?,
        to_u32(c, "channels")?,
        to_u32(h, "height")?,
        to_u32(w, "width")?,
    ];
    let mut buf = Vec::with_capacity(HEADER_LEN + dataset.images().numel() * 4 + dataset.len() * 4 + 4);
    buf.extend_from_slice(CONTAINER_MAGIC);
    for v in header {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    for &x in dataset.images().data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &l in dataset.labels() {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf).map_err(|source| DataError::Io { path: "<stream>".into(), source })
}

/// Parses a whole container image.
pub fn read_container(bytes: &[u8]) -> Result<Dataset, DataError> {
    let actual = bytes.len() as u64;
    if bytes.len() < CONTAINER_MAGIC.len() || &bytes[..CONTAINER_MAGIC.len()] != CONTAINER_MAGIC {
        return Err(DataError::BadMagic { found: bytes[..bytes.len().min(CONTAINER_MAGIC.len())].to_vec() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { expected: HEADER_LEN as u64 + 4, actual });
    }
    let word = |i: usize| {
        let at = CONTAINER_MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
    };
    let header = ContainerHeader {
        classes: word(0),
        samples: word(1),
        channels: word(2),
        height: word(3),
        width: word(4),
        dtype: bytes[HEADER_LEN - 1],
    };
    if header.dtype != DTYPE_F32 {
        return Err(DataError::UnsupportedDtype(header.dtype));
    }
    let expected = HEADER_LEN as u64 + header.payload_len() + 4;
    if actual < expected {
        return Err(DataError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(DataError::TrailingBytes { extra: actual - expected });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    let n = header.samples as usize;
    let shape = vec![n, header.channels as usize, header.height as usize, header.width as usize];
    let pixels: usize = shape.iter().product();
    let label_start = HEADER_LEN + pixels * 4;
    let data: Vec<Real> = bytes[HEADER_LEN..label_start]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as Real)
        .collect();
    let labels = bytes[label_start..body_end]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    let images = Tensor::new(shape, data).map_err(|e| DataError::Validation(e.to_string()))?;
    Dataset::new(images, labels, header.classes as usize)
}

pub fn save_container(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let mut out = std::io::BufWriter::new(file);
    write_container(dataset, &mut out)?;
    out.flush().map_err(|source| DataError::Io { path: path.into(), source })
}

pub fn load_container(path: &Path) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io { path: path.into(), source })?;
    read_container(&bytes)
}
