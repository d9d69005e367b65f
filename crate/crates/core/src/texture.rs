//! Diffuse albedo textures addressed by mesh UVs.

use std::path::Path;

use crate::math::{DVec2, Rgb};
use crate::mesh::TriangleMesh;
use crate::pfm::Pfm;
use crate::{Error, Result};

/// RGB albedo in `[0,1]` with the set of texels covered by the UV layout.
///
/// Texel `(i, j)` has its center at `((i + 0.5) / W, (j + 0.5) / H)` in UV
/// space; lookups clamp to the edge.
#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoTexture {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
    pub valid: Vec<bool>,
}

/// Bilinear footprint: four texel indices and their weights.
pub type Footprint = [(u32, f64); 4];

impl AlbedoTexture {
    pub fn constant(width: usize, height: usize, value: Rgb) -> Self {
        AlbedoTexture {
            width,
            height,
            data: vec![value.clamp(Rgb::ZERO, Rgb::ONE); width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(DVec2) -> Rgb) -> Self {
        let mut t = Self::constant(width, height, Rgb::ZERO);
        for j in 0..height {
            for i in 0..width {
                let uv = DVec2::new((i as f64 + 0.5) / width as f64, (j as f64 + 0.5) / height as f64);
                t.data[j * width + i] = f(uv).clamp(Rgb::ZERO, Rgb::ONE);
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn footprint(&self, uv: DVec2) -> Footprint {
        footprint(self.width, self.height, uv)
    }

    pub fn lookup(&self, uv: DVec2) -> Rgb {
        self.footprint(uv)
            .iter()
            .map(|&(i, w)| w * self.data[i as usize])
            .sum()
    }

    /// Mark texels whose centers fall inside a UV triangle (plus the texels
    /// holding each UV vertex) as valid; everything else invalid.
    pub fn set_coverage(&mut self, mesh: &TriangleMesh) {
        self.valid = uv_coverage(mesh, self.width, self.height);
    }

    pub fn to_pfm(&self) -> Pfm {
        Pfm {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self
                .data
                .iter()
                .flat_map(|c| [c.x as f32, c.y as f32, c.z as f32])
                .collect(),
        }
    }

    pub fn from_pfm(p: &Pfm) -> Result<Self> {
        if p.channels != 3 {
            return Err(Error::ShapeMismatch("albedo texture must be RGB".into()));
        }
        let data = p
            .data
            .chunks_exact(3)
            .map(|c| Rgb::new(c[0] as f64, c[1] as f64, c[2] as f64).clamp(Rgb::ZERO, Rgb::ONE))
            .collect();
        Ok(AlbedoTexture {
            width: p.width,
            height: p.height,
            data,
            valid: vec![true; p.width * p.height],
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pfm(&Pfm::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_pfm().write(path)
    }
}

pub fn footprint(width: usize, height: usize, uv: DVec2) -> Footprint {
    let fx = (uv.x * width as f64 - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (uv.y * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (fx.floor() as usize).min(width.saturating_sub(2));
    let y0 = (fy.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let tx = (fx - x0 as f64).clamp(0.0, 1.0);
    let ty = (fy - y0 as f64).clamp(0.0, 1.0);
    let idx = |x: usize, y: usize| (y * width + x) as u32;
    [
        (idx(x0, y0), (1.0 - tx) * (1.0 - ty)),
        (idx(x1, y0), tx * (1.0 - ty)),
        (idx(x0, y1), (1.0 - tx) * ty),
        (idx(x1, y1), tx * ty),
    ]
}

pub fn uv_coverage(mesh: &TriangleMesh, width: usize, height: usize) -> Vec<bool> {
    let mut valid = vec![false; width * height];
    let to_px = |uv: DVec2| DVec2::new(uv.x * width as f64, uv.y * height as f64);
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| to_px(mesh.uvs[i as usize]));
        for p in [a, b, c] {
            let i = (p.x.floor().max(0.0) as usize).min(width - 1);
            let j = (p.y.floor().max(0.0) as usize).min(height - 1);
            valid[j * width + i] = true;
        }
        let lo = a.min(b).min(c);
        let hi = a.max(b).max(c);
        let area = (b - a).perp_dot(c - a);
        if area == 0.0 {
            continue;
        }
        let i0 = (lo.x - 0.5).ceil().max(0.0) as usize;
        let j0 = (lo.y - 0.5).ceil().max(0.0) as usize;
        let i1 = ((hi.x - 0.5).floor().max(-1.0) as isize).min(width as isize - 1);
        let j1 = ((hi.y - 0.5).floor().max(-1.0) as isize).min(height as isize - 1);
        for j in j0 as isize..=j1 {
            for i in i0 as isize..=i1 {
                let p = DVec2::new(i as f64 + 0.5, j as f64 + 0.5);
                let w0 = (b - p).perp_dot(c - p) / area;
                let w1 = (c - p).perp_dot(a - p) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                    valid[j as usize * width + i as usize] = true;
                }
            }
        }
    }
    valid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    #[test]
    fn bilinear_weights_sum_to_one() {
        for uv in [DVec2::new(0.0, 0.0), DVec2::new(0.37, 0.81), DVec2::new(1.0, 1.0)] {
            let f = footprint(8, 5, uv);
            let s: f64 = f.iter().map(|p| p.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let t = AlbedoTexture::from_fn(4, 4, |uv| Rgb::splat(uv.x));
        let v = t.lookup(DVec2::new(0.5, 0.5));
        assert!((v.x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_of_half_quad() {
        let quad = bundled::quad(1.0).unwrap();
        let one = TriangleMesh::new(
            quad.vertices.clone(),
            vec![quad.triangles[0]],
            quad.vertex_normals.clone(),
            quad.uvs.clone(),
        )
        .unwrap();
        let cov = uv_coverage(&one, 16, 16);
        let n = cov.iter().filter(|&&b| b).count();
        assert!(n > 100 && n < 160, "{n}");
        let full = uv_coverage(&quad, 16, 16);
        assert!(full.iter().all(|&b| b));
    }
}
