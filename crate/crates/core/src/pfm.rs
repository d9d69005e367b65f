//! Portable float map I/O. Files are written little-endian (negative scale)
//! with scanlines bottom-up; in memory rows run top-down.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    /// 1 (`Pf`) or 3 (`PF`).
    pub channels: usize,
    /// Row-major, top row first.
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn encode(&self) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        out.reserve(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = BufReader::new(bytes);
        let mut line = String::new();
        let mut next_token_line = |r: &mut BufReader<&[u8]>| -> std::result::Result<String, String> {
            loop {
                line.clear();
                let n = r.read_line(&mut line).map_err(|e| e.to_string())?;
                if n == 0 {
                    return Err("unexpected end of header".into());
                }
                let t = line.trim();
                if !t.is_empty() && !t.starts_with('#') {
                    return Ok(t.to_string());
                }
            }
        };
        let channels = match next_token_line(&mut r)?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(format!("bad PFM tag `{other}`")),
        };
        let dims = next_token_line(&mut r)?;
        let mut it = dims.split_whitespace();
        let mut dim = || -> std::result::Result<usize, String> {
            it.next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("bad PFM dimensions `{dims}`"))
        };
        let (width, height) = (dim()?, dim()?);
        let scale: f32 = next_token_line(&mut r)?
            .parse()
            .map_err(|_| "bad PFM scale".to_string())?;
        let little = scale < 0.0;
        let count = width * height * channels;
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw).map_err(|_| "truncated PFM data".to_string())?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect();
        let row = width * channels;
        let mut data = Vec::with_capacity(count);
        for y in (0..height).rev() {
            data.extend_from_slice(&vals[y * row..(y + 1) * row]);
        }
        Ok(Pfm {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pfm::decode(&bytes).map_err(|m| Error::parse(path, m))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bottom_up_little_endian() {
        let p = Pfm {
            width: 1,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0],
        };
        let bytes = p.encode();
        let header = b"Pf\n1 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn reads_big_endian() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [0.5f32, 1.5, 2.5] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let p = Pfm::decode(&bytes).unwrap();
        assert_eq!(p.data, vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn truncated_is_error() {
        assert!(Pfm::decode(b"PF\n2 2\n-1\n\0\0").is_err());
        assert!(Pfm::decode(b"P6\n2 2\n-1\n").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(w in 1usize..6, h in 1usize..6, gray in any::<bool>(), seed in any::<u32>()) {
            let channels = if gray { 1 } else { 3 };
            let data = (0..w * h * channels).map(|i| (i as f32 + seed as f32) * 0.37 - 3.0).collect();
            let p = Pfm { width: w, height: h, channels, data };
            prop_assert_eq!(Pfm::decode(&p.encode()).unwrap(), p);
        }
    }
}
