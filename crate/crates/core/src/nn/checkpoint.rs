//! Versioned binary checkpoint of a field.
//!
//! Layout (all little-endian): magic `NRTFCKPT`, format version, hash header
//! (levels, features, `n_min`, `n_max`, shell width, domain, per-level voxel
//! lists), MLP header (shape and per-layer dimensions), then `f32` tensors:
//! feature tables followed by each layer's weights and biases.

use std::io::{Read, Write};
use std::path::Path;

use super::hash::{HashConfig, HashGrid, FEATURES, LEVELS};
use super::mlp::{Mlp, MlpShape};
use super::{NrtfField, Real};
use crate::math::DVec3;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NRTFCKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s<T: Real>(&mut self, vs: &[T]) {
        self.0.reserve(vs.len() * 4);
        for v in vs {
            self.0.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

pub fn encode<T: Real>(field: &NrtfField<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let g = &field.grid;
    w.u32(LEVELS as u32);
    w.u32(FEATURES as u32);
    w.u32(g.config.n_min);
    w.u32(g.config.n_max);
    w.f64(g.config.shell_diagonals);
    for c in [g.origin.x, g.origin.y, g.origin.z, g.side] {
        w.f64(c);
    }
    for level in &g.levels {
        w.u32(level.resolution);
        w.u32(level.voxels.len() as u32);
        for v in &level.voxels {
            for c in v {
                w.i32(*c);
            }
        }
    }
    let s = field.mlp.shape;
    for v in [s.input, s.hidden, s.depth] {
        w.u32(v as u32);
    }
    w.i32(s.skip.map_or(-1, |k| k as i32));
    w.u32(s.output as u32);
    w.u32(field.mlp.layers.len() as u32);
    for l in &field.mlp.layers {
        w.u32(l.fan_out as u32);
        w.u32(l.fan_in as u32);
    }
    w.f32s(&field.tables);
    for l in &field.mlp.layers {
        w.f32s(&l.w);
        w.f32s(&l.b);
    }
    w.0
}

pub fn decode<T: Real>(buf: &[u8], path: &Path) -> Result<NrtfField<T>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::parse(path, "not a field checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported checkpoint version {version}")));
    }
    let (levels, features) = (r.u32()?, r.u32()?);
    if levels as usize != LEVELS || features as usize != FEATURES {
        return Err(Error::parse(path, format!("unsupported grid {levels} levels x {features} features")));
    }
    let config = HashConfig {
        n_min: r.u32()?,
        n_max: r.u32()?,
        shell_diagonals: r.f64()?,
    };
    let origin = DVec3::new(r.f64()?, r.f64()?, r.f64()?);
    let side = r.f64()?;
    let expected_res = config.resolutions();
    let mut voxels = Vec::with_capacity(LEVELS);
    for res in expected_res {
        if r.u32()? != res {
            return Err(Error::parse(path, "level resolution does not match header"));
        }
        let n = r.u32()? as usize;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push([r.i32()?, r.i32()?, r.i32()?]);
        }
        voxels.push(v);
    }
    let grid = HashGrid::from_parts(config, origin, side, voxels)?;
    let (input, hidden, depth) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let skip = r.i32()?;
    let shape = MlpShape {
        input,
        hidden,
        depth,
        skip: (skip >= 0).then_some(skip as usize),
        output: r.u32()? as usize,
    };
    let mut mlp = Mlp::<T>::zeros(shape).map_err(|e| Error::parse(path, e.to_string()))?;
    let n_layers = r.u32()? as usize;
    if n_layers != mlp.layers.len() {
        return Err(Error::parse(path, "layer count does not match shape"));
    }
    for l in &mlp.layers {
        if (r.u32()? as usize, r.u32()? as usize) != (l.fan_out, l.fan_in) {
            return Err(Error::parse(path, "layer dimensions do not match shape"));
        }
    }
    let tables = r.f32s(grid.total_rows() * FEATURES)?;
    for l in &mut mlp.layers {
        l.w = r.f32s(l.w.len())?;
        l.b = r.f32s(l.b.len())?;
    }
    if r.pos != buf.len() {
        return Err(Error::parse(path, "trailing bytes after tensors"));
    }
    Ok(NrtfField { grid, tables, mlp })
}

pub fn save<T: Real>(field: &NrtfField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(field);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<NrtfField<T>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::field::tests::small_field;

    #[test]
    fn roundtrip_is_exact_in_f32() {
        let field = small_field::<f32>(7);
        let bytes = encode(&field);
        assert_eq!(&bytes[..8], MAGIC);
        let back: NrtfField<f32> = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, field);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = encode(&small_field::<f32>(7));
        let p = Path::new("mem");
        assert!(decode::<f32>(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad, p).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f32>(&extra, p).is_err());
    }
}
