//! Little-endian primitives shared by the binary formats.
//!
//! Element arrays carry a width byte (4 = f32, 8 = f64). Values are stored
//! in the build's scalar width and widened or narrowed on load.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use avtx_core::scalar::SCALAR_BYTES;
use avtx_core::{Scalar, Tensor};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Upper bound on any single length field, so corrupt headers fail fast
/// instead of allocating.
const MAX_LEN: u64 = 1 << 34;

pub struct Writer<W: Write> {
    inner: W,
    path: PathBuf,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
        }
    }

    fn wrap<T>(&self, r: std::io::Result<T>) -> Result<T> {
        r.map_err(Error::io(&self.path))
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        let r = self.inner.write_all(b);
        self.wrap(r)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        let r = self.inner.write_u8(v);
        self.wrap(r)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        let r = self.inner.write_u32::<LE>(v);
        self.wrap(r)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        let r = self.inner.write_u64::<LE>(v);
        self.wrap(r)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        let r = self.inner.write_f64::<LE>(v);
        self.wrap(r)
    }

    /// `u32` length then UTF-8 bytes.
    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    /// Width byte, `u64` count, then the values.
    pub fn scalars(&mut self, xs: &[Scalar]) -> Result<()> {
        self.u8(SCALAR_BYTES as u8)?;
        self.u64(xs.len() as u64)?;
        let mut buf = Vec::with_capacity(xs.len() * SCALAR_BYTES);
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }

    /// `u32` rank, `u64` extents, then [`Writer::scalars`].
    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u32(t.rank() as u32)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        self.scalars(t.data())
    }

    pub fn finish(mut self) -> Result<W> {
        let r = self.inner.flush();
        self.wrap(r)?;
        Ok(self.inner)
    }
}

pub struct Reader<R: Read> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, msg)
    }

    fn wrap<T>(&self, r: std::io::Result<T>) -> Result<T> {
        r.map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.corrupt("file is truncated"),
            _ => Error::Io {
                path: self.path.clone(),
                source: e,
            },
        })
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        let r = self.inner.read_exact(&mut buf);
        self.wrap(r)?;
        Ok(buf)
    }

    pub fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        let got = self.bytes(8)?;
        if got != want {
            return Err(self.corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let r = self.inner.read_u8();
        self.wrap(r)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let r = self.inner.read_u32::<LE>();
        self.wrap(r)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let r = self.inner.read_u64::<LE>();
        self.wrap(r)
    }

    pub fn length(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(self.corrupt(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        let r = self.inner.read_f64::<LE>();
        self.wrap(r)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b).map_err(|_| self.corrupt("string is not UTF-8"))
    }

    pub fn scalars(&mut self) -> Result<Vec<Scalar>> {
        let width = self.u8()? as usize;
        let n = self.length()?;
        let raw = self.bytes(n.checked_mul(width).ok_or_else(|| self.corrupt("length overflow"))?)?;
        match width {
            8 => Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect()),
            4 => Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect()),
            w => Err(self.corrupt(format!("unsupported element width {w}"))),
        }
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.corrupt(format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.length()).collect::<Result<Vec<_>>>()?;
        let data = self.scalars()?;
        Tensor::new(&shape, data).map_err(|e| self.corrupt(e.to_string()))
    }

    /// Fails unless the input is exhausted.
    pub fn end(mut self) -> Result<()> {
        let mut one = [0u8; 1];
        match self.inner.read(&mut one) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.corrupt("trailing bytes after the last record")),
            Err(e) => Err(Error::Io {
                path: self.path,
                source: e,
            }),
        }
    }
}
