//! Binary container primitives shared by dataset files and model
//! checkpoints: little-endian fixed-width fields behind parse errors that
//! name the offending field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {file}, field `{field}`: {detail}")]
    Parse {
        file: String,
        field: String,
        detail: String,
    },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn parse(file: &str, field: &str, detail: impl Into<String>) -> Self {
        IoError::Parse {
            file: file.to_string(),
            field: field.to_string(),
            detail: detail.into(),
        }
    }
}

/// Little-endian field writer.
pub struct FieldWriter<W: Write> {
    inner: W,
    path: std::path::PathBuf,
}

impl FieldWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let f = File::create(path).map_err(|e| IoError::io(path, e))?;
        Ok(FieldWriter {
            inner: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }
}

impl<W: Write> FieldWriter<W> {
    fn write(&mut self, bytes: &[u8]) -> Result<(), IoError> {
        self.inner
            .write_all(bytes)
            .map_err(|e| IoError::io(&self.path, e))
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<(), IoError> {
        self.write(magic)
    }

    pub fn u32(&mut self, v: u32) -> Result<(), IoError> {
        self.write(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<(), IoError> {
        self.write(&v.to_le_bytes())
    }

    pub fn str(&mut self, s: &str) -> Result<(), IoError> {
        self.u32(s.len() as u32)?;
        self.write(s.as_bytes())
    }

    pub fn f32_slice(&mut self, vs: &[f32]) -> Result<(), IoError> {
        // One pass through a byte buffer keeps writes page-sized.
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.write(&buf)
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.inner.flush().map_err(|e| IoError::io(&self.path, e))
    }
}

/// Little-endian field reader; every accessor names the field it parses so
/// malformed files produce pointed errors.
pub struct FieldReader<R: Read> {
    inner: R,
    file: String,
}

impl FieldReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, IoError> {
        let f = File::open(path).map_err(|e| IoError::io(path, e))?;
        Ok(FieldReader {
            inner: BufReader::new(f),
            file: path.display().to_string(),
        })
    }
}

impl<R: Read> FieldReader<R> {
    pub fn file(&self) -> &str {
        &self.file
    }

    fn fill(&mut self, buf: &mut [u8], field: &str) -> Result<(), IoError> {
        self.inner
            .read_exact(buf)
            .map_err(|e| IoError::parse(&self.file, field, format!("short read: {e}")))
    }

    pub fn magic(&mut self, expect: &[u8; 4], field: &str) -> Result<(), IoError> {
        let mut got = [0u8; 4];
        self.fill(&mut got, field)?;
        if &got != expect {
            return Err(IoError::parse(
                &self.file,
                field,
                format!("expected magic {:?}, got {:?}", expect, got),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &str) -> Result<u32, IoError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn f64(&mut self, field: &str) -> Result<f64, IoError> {
        let mut b = [0u8; 8];
        self.fill(&mut b, field)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn str(&mut self, field: &str, max_len: usize) -> Result<String, IoError> {
        let len = self.u32(field)? as usize;
        if len > max_len {
            return Err(IoError::parse(
                &self.file,
                field,
                format!("length {len} exceeds {max_len}"),
            ));
        }
        let mut buf = vec![0u8; len];
        self.fill(&mut buf, field)?;
        String::from_utf8(buf).map_err(|_| IoError::parse(&self.file, field, "invalid utf-8"))
    }

    pub fn f32_vec(&mut self, n: usize, field: &str) -> Result<Vec<f32>, IoError> {
        let mut buf = vec![0u8; n * 4];
        self.fill(&mut buf, field)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Errors if any bytes remain.
    pub fn expect_eof(&mut self, field: &str) -> Result<(), IoError> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(IoError::parse(
                &self.file,
                field,
                "trailing bytes after final record",
            )),
            Err(e) => Err(IoError::parse(
                &self.file,
                field,
                format!("read failed: {e}"),
            )),
        }
    }
}

/// A named tensor going into or out of a checkpoint container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub const CONTAINER_VERSION: u32 = 1;

/// Writes a checkpoint container: magic, version, a JSON config blob, then
/// named tensors with shape headers and little-endian f32 payloads.
pub fn write_container(
    path: &Path,
    magic: &[u8; 4],
    config_json: &str,
    tensors: &[NamedTensor],
) -> Result<(), IoError> {
    let mut w = FieldWriter::create(path)?;
    w.magic(magic)?;
    w.u32(CONTAINER_VERSION)?;
    w.str(config_json)?;
    w.u32(tensors.len() as u32)?;
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(IoError::parse(
                &path.display().to_string(),
                &t.name,
                format!("shape {:?} does not match {} values", t.shape, t.data.len()),
            ));
        }
        w.str(&t.name)?;
        w.u32(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.u32(d as u32)?;
        }
        w.f32_slice(&t.data)?;
    }
    w.finish()
}

/// Reads a container written by [`write_container`].
pub fn read_container(path: &Path, magic: &[u8; 4]) -> Result<(String, Vec<NamedTensor>), IoError> {
    let mut r = FieldReader::open(path)?;
    r.magic(magic, "magic")?;
    let version = r.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(IoError::parse(
            r.file(),
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let config_json = r.str("config", 1 << 20)?;
    let count = r.u32("tensor_count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name = r.str(&format!("tensor[{i}].name"), 4096)?;
        let ndim = r.u32(&format!("tensor[{i}].ndim"))? as usize;
        if ndim > 8 {
            return Err(IoError::parse(
                r.file(),
                &name,
                format!("ndim {ndim} out of range"),
            ));
        }
        let mut shape = Vec::with_capacity(ndim);
        for d in 0..ndim {
            shape.push(r.u32(&format!("tensor[{i}].shape[{d}]"))? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32_vec(n, &format!("tensor[{i}].data"))?;
        for (j, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(IoError::parse(
                    r.file(),
                    &format!("tensor[{i}].data[{j}]"),
                    "non-finite value",
                ));
            }
        }
        tensors.push(NamedTensor { name, shape, data });
    }
    r.expect_eof("eof")?;
    Ok((config_json, tensors))
}
