//! The IDX container: big-endian magic `[0, 0, dtype, rank]`, `rank`
//! big-endian u32 extents, then the raw payload. Images are rank 3 with
//! magic 0x00000803; labels are rank 1 with magic 0x00000801. Files whose
//! payload starts with the gzip magic are decompressed transparently.

use super::DataError;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use std::io::{Read, Write};
use std::path::Path;

/// A parsed IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IDXArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IDXArray {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// The payload viewed as `count` images of `rows x cols` bytes.
    pub fn images(&self) -> Result<(usize, usize, usize, &[u8]), DataError> {
        match self.dims[..] {
            [n, rows, cols] => Ok((n, rows, cols, &self.data)),
            _ => Err(DataError::RankMismatch {
                expected: 3,
                got: self.rank(),
            }),
        }
    }

    /// The payload viewed as a label vector.
    pub fn labels(&self) -> Result<&[u8], DataError> {
        match self.dims[..] {
            [_] => Ok(&self.data),
            _ => Err(DataError::RankMismatch {
                expected: 1,
                got: self.rank(),
            }),
        }
    }

    /// Pixels scaled into `[0,1]`.
    pub fn normalized(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

fn parse_idx(bytes: &[u8]) -> Result<IDXArray, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            got: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::BadMagic { found: magic });
    }
    let dtype = bytes[2];
    if dtype != 0x08 {
        return Err(DataError::UnsupportedType { dtype });
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            expected: header,
            got: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    Ok(IDXArray {
        dims,
        data: bytes[header..expected].to_vec(),
    })
}

/// Read an IDX file, gunzipping first when the gzip magic is present.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IDXArray, DataError> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut decoded)?;
        parse_idx(&decoded)
    } else {
        parse_idx(&raw)
    }
}

/// Write `data` as an unsigned-byte IDX file; paths ending in `.gz` are
/// gzip-compressed.
pub fn save_idx(
    path: impl AsRef<Path>,
    dims: &[usize],
    data: &[u8],
) -> Result<(), DataError> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(DataError::BadConfig(format!(
            "dims {:?} describe {} bytes but payload has {}",
            dims,
            expected,
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    bytes.extend_from_slice(&[0, 0, 0x08, dims.len() as u8]);
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    bytes.extend_from_slice(data);
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "gz") {
        let mut encoder = GzEncoder::new(Vec::new(), flate2::Compression::default());
        encoder.write_all(&bytes)?;
        std::fs::write(path, encoder.finish()?)?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}
