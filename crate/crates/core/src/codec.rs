//! Little-endian binary helpers shared by the checkpoint, mask and delta formats.

use crate::error::{GpsError, Result};
use crate::tensor::Tensor;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn name(&mut self, name: &str) -> Result<()> {
        let len = u16::try_from(name.len())
            .map_err(|_| GpsError::Format(format!("name longer than 65535 bytes: {name}")))?;
        self.u16(len);
        self.bytes(name.as_bytes());
        Ok(())
    }

    /// `u8 rank`, `u64` per dimension.
    pub fn dims(&mut self, shape: &[usize]) -> Result<()> {
        let rank = u8::try_from(shape.len())
            .map_err(|_| GpsError::Format(format!("rank {} exceeds 255", shape.len())))?;
        self.u8(rank);
        for &d in shape {
            self.u64(d as u64);
        }
        Ok(())
    }

    /// Name, flags byte, rank + dims, raw f64 data.
    pub fn tensor_record(&mut self, name: &str, flags: u8, value: &Tensor) -> Result<()> {
        self.name(name)?;
        self.u8(flags);
        self.dims(value.shape())?;
        for &v in value.data() {
            self.f64(v);
        }
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(GpsError::Format(format!(
                "{} truncated at byte {} (needed {n} more)",
                self.what, self.pos
            ))),
        }
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(GpsError::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(GpsError::Format(format!(
                "{}: unsupported version {v}, expected {version}",
                self.what
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| GpsError::Format(format!("{}: name is not UTF-8", self.what)))
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank)
            .map(|_| {
                let d = self.u64()?;
                usize::try_from(d)
                    .map_err(|_| GpsError::Format(format!("{}: dimension {d} too large", self.what)))
            })
            .collect()
    }

    pub fn tensor_record(&mut self) -> Result<(String, u8, Tensor)> {
        let name = self.name()?;
        let flags = self.u8()?;
        let shape = self.dims()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.remaining()))
            .ok_or_else(|| {
                GpsError::Format(format!(
                    "{}: tensor '{name}' with shape {shape:?} exceeds file size",
                    self.what
                ))
            })?;
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, flags, Tensor::new(shape, data)?))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(GpsError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.remaining()
            )));
        }
        Ok(())
    }
}
