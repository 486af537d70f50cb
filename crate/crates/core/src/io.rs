//! Signal files, PGM import and atomic writes.
//!
//! VSIG layout (little-endian): `"VSIG"`, `u32 ndims`, `u32 dims[ndims]`,
//! then `prod(dims)` `f32` samples in row-major order.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::ByteReader;

const SIGNAL_MAGIC: &[u8; 4] = b"VSIG";

/// A real-valued signal with shape metadata, stored flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Signal {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != data.len() {
            return Err(Error::Dimension {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(SIGNAL_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != SIGNAL_MAGIC {
            return Err(Error::Format("bad signal magic".into()));
        }
        let nd = r.u32()? as usize;
        if nd == 0 || nd > 8 {
            return Err(Error::Format(format!("implausible dimension count {nd}")));
        }
        let dims = (0..nd)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("signal size overflows".into()))?;
        if r.remaining() != 4 * n {
            return Err(Error::Format(format!(
                "signal payload has {} bytes, shape needs {}",
                r.remaining(),
                4 * n
            )));
        }
        let data = (0..n)
            .map(|_| r.f32().map(|v| v as f64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, data })
    }

    /// Rounds samples to the f32 precision used on disk.
    pub fn rounded_to_f32(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Binary (P5) 8-bit PGM, mapped to `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Signal> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!(
            "unsupported PGM magic {:?}",
            fields[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "only 8-bit PGM supported, maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let n = w * h;
    if bytes.len() < pos + n {
        return Err(Error::Format("truncated PGM raster".into()));
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Signal::new(vec![h, w], data)
}

/// First four bytes of SHA-256.
pub fn short_digest(bytes: &[u8]) -> [u8; 4] {
    let h = Sha256::digest(bytes);
    [h[0], h[1], h[2], h[3]]
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One `key = value` line of a flat config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl KeyValue {
    pub fn parse<T: std::str::FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e| {
            Error::Config(format!(
                "line {}: bad value {:?} for {}: {e}",
                self.line, self.value, self.key
            ))
        })
    }

    pub fn unknown(&self) -> Error {
        Error::Config(format!("line {}: unknown key {:?}", self.line, self.key))
    }
}

/// Splits flat UTF-8 `key = value` text. `#` starts a comment; blank lines
/// are skipped; repeated keys are errors.
pub fn parse_key_values(text: &str) -> Result<Vec<KeyValue>> {
    let mut out: Vec<KeyValue> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
        let key = key.trim().to_string();
        if out.iter().any(|kv| kv.key == key) {
            return Err(Error::Config(format!("line {line}: duplicate key {key}")));
        }
        out.push(KeyValue {
            key,
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\n a = 1 # x\n\nb=two\n").unwrap();
        assert_eq!(kv.len(), 2);
        assert_eq!(
            (
                kv[0].key.as_str(),
                kv[0].parse::<u32>().unwrap(),
                kv[0].line
            ),
            ("a", 1, 2)
        );
        assert_eq!(kv[1].value, "two");
        assert!(kv[1].parse::<u32>().is_err());
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn signal_round_trip() {
        let s = Signal::new(vec![2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, -3.5]).unwrap();
        let b = s.to_bytes();
        assert_eq!(Signal::from_bytes(&b).unwrap(), s);
        assert!(Signal::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Signal::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn pgm_import() {
        let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255, 102, 153, 204]);
        let s = parse_pgm(&bytes).unwrap();
        assert_eq!(s.dims, vec![2, 3]);
        assert_eq!(s.data[1], 0.2);
        assert_eq!(s.data[2], 1.0);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
