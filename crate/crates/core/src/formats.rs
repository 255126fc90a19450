//! Packed plane containers and PGM output.
//!
//! `LSI1` layout, all integers little-endian:
//!
//! ```text
//! "LSI1" | u32 H | u32 W | u32 C | C × (u32 byte length, UTF-8 name) | C·H·W × f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const LSI_MAGIC: &[u8; 4] = b"LSI1";

/// `C` named `H×W` float planes.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedPlanes {
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    /// Channel-major, `C·H·W` values.
    pub data: Vec<f32>,
}

impl PackedPlanes {
    pub fn new(height: usize, width: usize, names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != names.len() * height * width {
            return Err(Error::Shape(format!(
                "{} values for {} planes of {height}×{width}",
                data.len(),
                names.len()
            )));
        }
        Ok(Self {
            height,
            width,
            names,
            data,
        })
    }

    pub fn plane(&self, name: &str) -> Option<&[f32]> {
        let c = self.names.iter().position(|n| n == name)?;
        let len = self.height * self.width;
        Some(&self.data[c * len..(c + 1) * len])
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(LSI_MAGIC)?;
        for v in [self.height, self.width, self.names.len()] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for name in &self.names {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_from<R: Read>(input: &mut R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != LSI_MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let height = read_u32(input)? as usize;
        let width = read_u32(input)? as usize;
        let channels = read_u32(input)? as usize;
        let mut names = Vec::with_capacity(channels.min(1 << 16));
        for _ in 0..channels {
            let len = read_u32(input)? as usize;
            let mut bytes = vec![0u8; len];
            input.read_exact(&mut bytes).map_err(|e| e.to_string())?;
            names.push(String::from_utf8(bytes).map_err(|e| e.to_string())?);
        }
        let count = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or("plane size overflows")?;
        let mut bytes = vec![0u8; count * 4];
        input.read_exact(&mut bytes).map_err(|e| e.to_string())?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            height,
            width,
            names,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|r| Error::malformed(path, r))
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}

/// Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).
pub fn encode_pgm16(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

/// Binary 8-bit PGM (`P5`, maxval 255).
pub fn encode_pgm8(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Maps `[0, max]` onto the 16-bit range, clamping outside values.
pub fn quantize16(value: f64, max: f64) -> u16 {
    if max <= 0.0 || !value.is_finite() {
        return 0;
    }
    ((value / max).clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

/// `[0, 1]` to 8-bit gray with round-half-up.
pub fn quantize8(value: f64) -> u8 {
    if !value.is_finite() {
        return 0;
    }
    (value.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_planes_round_trip() {
        let p = PackedPlanes::new(
            2,
            3,
            vec!["depth".into(), "mask".into()],
            (0..12).map(|i| i as f32 * 0.5).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LSI1");
        assert_eq!(u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]), 2);
        let q = PackedPlanes::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.plane("mask").unwrap()[0], 3.0);
    }

    #[test]
    fn truncated_or_foreign_data_is_rejected() {
        assert!(PackedPlanes::read_from(&mut &b"LSI2\0\0\0\0"[..]).is_err());
        let p = PackedPlanes::new(1, 1, vec!["a".into()], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(PackedPlanes::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn gray_scaling_rounds_half_up() {
        assert_eq!(quantize8(0.5), 128);
        assert_eq!(quantize8(0.0), 0);
        assert_eq!(quantize8(1.0), 255);
        assert_eq!(quantize8(1.7), 255);
        assert_eq!(quantize16(1.0, 1.0), 65535);
        assert_eq!(quantize16(0.5, 2.0), 16384);
    }

    #[test]
    fn pgm_headers() {
        let b = encode_pgm16(2, 1, &[1, 258]);
        assert!(b.starts_with(b"P5\n2 1\n65535\n"));
        assert_eq!(&b[b.len() - 4..], &[0, 1, 1, 2]);
        assert_eq!(encode_pgm8(1, 1, &[7]), b"P5\n1 1\n255\n\x07".to_vec());
    }
}
