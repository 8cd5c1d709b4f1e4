//! Little-endian framing helpers shared by the dataset and checkpoint
//! containers.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u128(&mut self, v: u128) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        self.u64(vs.len() as u64)?;
        vs.iter().try_for_each(|v| self.f64(*v))
    }

    pub fn usizes(&mut self, vs: &[usize]) -> std::io::Result<()> {
        self.u64(vs.len() as u64)?;
        vs.iter().try_for_each(|v| self.u64(*v as u64))
    }

    pub fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }
}

/// Reader that tags every failure with the field being decoded.
pub struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, field: &str, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::load(field, format!("unexpected end of data: {e}")))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::load(field, format!("unexpected end of data: {e}")))?;
        Ok(buf)
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }

    pub fn u128(&mut self, field: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array(field)?))
    }

    pub fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(field)?))
    }

    fn len(&mut self, field: &str, limit: u64) -> Result<usize> {
        let n = self.u64(field)?;
        if n > limit {
            return Err(Error::load(field, format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self, field: &str) -> Result<Vec<f64>> {
        let n = self.len(field, 1 << 32)?;
        (0..n).map(|_| self.f64(field)).collect()
    }

    pub fn usizes(&mut self, field: &str) -> Result<Vec<usize>> {
        let n = self.len(field, 1 << 20)?;
        (0..n).map(|_| Ok(self.u64(field)? as usize)).collect()
    }

    pub fn str(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        if n > 1 << 24 {
            return Err(Error::load(field, format!("implausible string length {n}")));
        }
        String::from_utf8(self.bytes(field, n)?)
            .map_err(|e| Error::load(field, format!("invalid utf-8: {e}")))
    }
}
