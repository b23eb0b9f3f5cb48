//! Binary file formats.
//!
//! - `.hsc` spectral cube: magic `HSCUBE1\0`, then H, W, B as u32 LE, then B
//!   wavelengths as f32 LE, then H*W*B f32 LE values in band-major (b, h, w)
//!   order.
//! - `.hsm` coded mask: magic `HSMASK1\0`, then H, W as u32 LE, then H*W f32
//!   LE values.
//! - `.hme` measurement: same layout as the mask with magic `HSMEA1\0\0`.
//! - `.pgdw` weights: magic `PGDW1\0\0\0`, then a u32 LE record count, then
//!   per record a u32 LE name length, the UTF-8 name, a u32 LE rank, the
//!   dimensions as u32 LE, and the values as f64 LE.
//!
//! Read errors always name the file and the byte offset of the fault.

use std::fs;
use std::path::Path;

use pgdudst_core::physics::{CodedMask, Measurement, SpectralCube};

use crate::{AppError, AppResult};

pub const CUBE_MAGIC: [u8; 8] = *b"HSCUBE1\0";
pub const MASK_MAGIC: [u8; 8] = *b"HSMASK1\0";
pub const MEASUREMENT_MAGIC: [u8; 8] = *b"HSMEA1\0\0";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PGDW1\0\0\0";

/// Sanity caps so corrupt headers fail fast instead of allocating wildly.
const MAX_EXTENT: u32 = 1 << 16;
const MAX_RECORDS: u32 = 1 << 20;
const MAX_NAME_LEN: u32 = 1 << 12;
const MAX_RANK: u32 = 8;

fn io_err(path: &Path, e: std::io::Error) -> AppError {
    AppError::Data(format!("{}: {e}", path.display()))
}

struct Reader<'a> {
    path: &'a Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> AppResult<Self> {
        let buf = fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(Reader { path, buf, pos: 0 })
    }

    fn fail(&self, msg: &str) -> AppError {
        AppError::Data(format!("{} at byte {}: {msg}", self.path.display(), self.pos))
    }

    fn take(&mut self, n: usize) -> AppResult<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(&format!(
                "truncated payload, needed {n} more bytes but only {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 8], kind: &str) -> AppResult<()> {
        let mut got = [0u8; 8];
        got.copy_from_slice(self.take(8)?);
        if got != expected {
            self.pos = 0;
            return Err(self.fail(&format!(
                "bad magic for {kind} file: expected {:?}, found {:?}",
                String::from_utf8_lossy(&expected),
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> AppResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_slice(&mut self, n: usize) -> AppResult<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn f64_slice(&mut self, n: usize) -> AppResult<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    fn extent(&mut self, what: &str) -> AppResult<usize> {
        let v = self.u32()?;
        if v == 0 || v > MAX_EXTENT {
            return Err(self.fail(&format!("{what} {v} out of range 1..={MAX_EXTENT}")));
        }
        Ok(v as usize)
    }

    fn finish(&self) -> AppResult<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(&format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_cube(path: &Path, cube: &SpectralCube) -> AppResult<()> {
    let mut out = Vec::with_capacity(8 + 12 + 4 * (cube.bands + cube.data().len()));
    out.extend_from_slice(&CUBE_MAGIC);
    for v in [cube.height, cube.width, cube.bands] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    push_f32(&mut out, &cube.wavelengths);
    push_f32(&mut out, cube.data());
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_cube(path: &Path) -> AppResult<SpectralCube> {
    let mut r = Reader::open(path)?;
    r.magic(CUBE_MAGIC, "spectral cube")?;
    let h = r.extent("height")?;
    let w = r.extent("width")?;
    let b = r.extent("band count")?;
    let wavelengths = r.f32_slice(b)?;
    let data = r.f32_slice(h * w * b)?;
    r.finish()?;
    SpectralCube::new(h, w, b, wavelengths, data).map_err(AppError::from)
}

fn write_plane(path: &Path, magic: [u8; 8], h: usize, w: usize, data: &[f64]) -> AppResult<()> {
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    push_f32(&mut out, data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn read_plane(path: &Path, magic: [u8; 8], kind: &str) -> AppResult<(usize, usize, Vec<f64>)> {
    let mut r = Reader::open(path)?;
    r.magic(magic, kind)?;
    let h = r.extent("height")?;
    let w = r.extent("width")?;
    let data = r.f32_slice(h * w)?;
    r.finish()?;
    Ok((h, w, data))
}

pub fn write_mask(path: &Path, mask: &CodedMask) -> AppResult<()> {
    write_plane(path, MASK_MAGIC, mask.height, mask.width, mask.data())
}

pub fn read_mask(path: &Path) -> AppResult<CodedMask> {
    let (h, w, data) = read_plane(path, MASK_MAGIC, "coded mask")?;
    CodedMask::new(h, w, data).map_err(AppError::from)
}

pub fn write_measurement(path: &Path, y: &Measurement) -> AppResult<()> {
    write_plane(path, MEASUREMENT_MAGIC, y.height, y.width, y.data())
}

pub fn read_measurement(path: &Path) -> AppResult<Measurement> {
    let (h, w, data) = read_plane(path, MEASUREMENT_MAGIC, "measurement")?;
    Measurement::new(h, w, data).map_err(AppError::from)
}

/// One named tensor in a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_checkpoint(path: &Path, records: &[Record]) -> AppResult<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
        for &d in &rec.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &rec.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: &Path) -> AppResult<Vec<Record>> {
    let mut r = Reader::open(path)?;
    r.magic(CHECKPOINT_MAGIC, "weight checkpoint")?;
    let count = r.u32()?;
    if count > MAX_RECORDS {
        return Err(r.fail(&format!("record count {count} exceeds cap {MAX_RECORDS}")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32()?;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(r.fail(&format!("record name length {name_len} out of range")));
        }
        let name = String::from_utf8(r.take(name_len as usize)?.to_vec())
            .map_err(|_| r.fail("record name is not valid UTF-8"))?;
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(r.fail(&format!("record rank {rank} exceeds cap {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.extent("dimension")?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| r.fail("record element count overflows"))?;
            shape.push(d);
        }
        let values = r.f64_slice(numel)?;
        records.push(Record { name, shape, values });
    }
    r.finish()?;
    Ok(records)
}

/// 16-bit binary PGM (`P5`, maxval 65535, big-endian samples), mapping
/// [0, 1] linearly onto [0, 65535] with clamping.
pub fn write_pgm16(path: &Path, data: &[f64], height: usize, width: usize) -> AppResult<()> {
    assert_eq!(data.len(), height * width, "pgm plane size mismatch");
    let mut out = Vec::with_capacity(32 + 2 * data.len());
    out.extend_from_slice(format!("P5\n{width} {height}\n65535\n").as_bytes());
    for &v in data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgdudst_core::rng::CounterRng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the dir so the path stays valid for the test body.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn cube_round_trip_is_bitwise() {
        let mut rng = CounterRng::new(7, 0);
        let mut cube = SpectralCube::zeros(5, 4, 3);
        for v in cube.data_mut() {
            *v = rng.uniform();
        }
        let p = tmp("a.hsc");
        write_cube(&p, &cube).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = read_cube(&p).unwrap();
        write_cube(&p, &back).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        assert_eq!(back.height, 5);
        assert_eq!(back.bands, 3);
    }

    #[test]
    fn mask_and_measurement_round_trip() {
        let mut rng = CounterRng::new(9, 0);
        let mask = CodedMask::random_binary(6, 5, &mut rng);
        let pm = tmp("m.hsm");
        write_mask(&pm, &mask).unwrap();
        let m2 = read_mask(&pm).unwrap();
        assert_eq!(mask.data(), m2.data());

        let y = Measurement::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]).unwrap();
        let py = tmp("y.hme");
        write_measurement(&py, &y).unwrap();
        let bytes = std::fs::read(&py).unwrap();
        let y2 = read_measurement(&py).unwrap();
        write_measurement(&py, &y2).unwrap();
        assert_eq!(bytes, std::fs::read(&py).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected_with_offset() {
        let y = Measurement::zeros(2, 2);
        let p = tmp("y.hme");
        write_measurement(&p, &y).unwrap();
        let err = read_mask(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad magic"), "{msg}");
        assert!(msg.contains("at byte 0"), "{msg}");
        assert!(msg.contains(p.to_str().unwrap()), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let mut cube = SpectralCube::zeros(3, 3, 2);
        for (i, v) in cube.data_mut().iter_mut().enumerate() {
            *v = i as f64 / 20.0;
        }
        let p = tmp("t.hsc");
        write_cube(&p, &cube).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        let msg = read_cube(&p).unwrap_err().to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("at byte"), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let records = vec![
            Record { name: "a.weight".into(), shape: vec![2, 3], values: vec![1.5, -2.0, 0.25, 1e-300, f64::MIN_POSITIVE, 0.0] },
            Record { name: "b.bias".into(), shape: vec![1], values: vec![-0.0] },
            Record { name: "scalar".into(), shape: vec![], values: vec![3.125] },
        ];
        let p = tmp("w.pgdw");
        write_checkpoint(&p, &records).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = read_checkpoint(&p).unwrap();
        // -0.0 == 0.0 under PartialEq, so compare re-serialized bytes too.
        assert_eq!(records, back);
        write_checkpoint(&p, &back).unwrap();
        assert_eq!(bytes, std::fs::read(&p).unwrap());
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let p = tmp("w.pgdw");
        std::fs::write(&p, b"NOTPGDW1\x00\x00\x00\x00").unwrap();
        let err = read_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn pgm_header_and_samples() {
        let p = tmp("b.pgm");
        write_pgm16(&p, &[0.0, 0.5, 1.0, 2.0], 2, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let samples: Vec<u16> = bytes[header.len()..]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(samples, vec![0, 32768, 65535, 65535]);
    }
}
