//! Little-endian cursor shared by the volume and checkpoint readers.

use crate::error::{bail, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            _ => bail!(Format, "{} truncated at byte {} (wanted {} more)", self.what, self.pos, n),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            bail!(Format, "{} has {} trailing bytes", self.what, self.remaining());
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Extents as `u32`, rejecting anything that does not fit.
pub(crate) fn put_extents(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        bail!(Format, "rank {} does not fit in a byte", shape.len());
    }
    out.push(shape.len() as u8);
    for &e in shape {
        let Ok(e) = u32::try_from(e) else {
            bail!(Format, "extent {} does not fit in 32 bits", e);
        };
        put_u32(out, e);
    }
    Ok(())
}

pub(crate) fn read_extents(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let rank = r.u8()? as usize;
    (0..rank).map(|_| r.u32().map(|e| e as usize)).collect()
}

/// Element count of `shape`, or a format error on overflow.
pub(crate) fn checked_len(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| crate::Error::Format(format!("extents {shape:?} overflow")))
}
