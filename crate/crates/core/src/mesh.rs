//! Triangle meshes with per-vertex normals and UVs, plus OBJ I/O.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::math::{DVec2, DVec3};
use crate::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<DVec3>,
    pub triangles: Vec<[u32; 3]>,
    pub vertex_normals: Vec<DVec3>,
    pub uvs: Vec<DVec2>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: DVec3,
    pub max: DVec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: DVec3::splat(f64::INFINITY),
        max: DVec3::splat(f64::NEG_INFINITY),
    };

    pub fn grow(&mut self, p: DVec3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.min(o.min),
            max: self.max.max(o.max),
        }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        self.min.cmple(o.min).all() && self.max.cmpge(o.max).all()
    }

    pub fn centroid(&self) -> DVec3 {
        0.5 * (self.min + self.max)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).length()
    }

    /// Slab test; returns the entry distance when the box overlaps `[0, t_max]`.
    #[inline]
    pub fn hit(&self, origin: DVec3, inv_dir: DVec3, t_max: f64) -> Option<f64> {
        let t0 = (self.min - origin) * inv_dir;
        let t1 = (self.max - origin) * inv_dir;
        let near = t0.min(t1).max_element().max(0.0);
        let far = t0.max(t1).min_element().min(t_max);
        (near <= far).then_some(near)
    }
}

impl TriangleMesh {
    /// Build a mesh and check its invariants. Normals are renormalized.
    pub fn new(
        vertices: Vec<DVec3>,
        triangles: Vec<[u32; 3]>,
        vertex_normals: Vec<DVec3>,
        uvs: Vec<DVec2>,
    ) -> Result<Self> {
        let vertex_normals = vertex_normals
            .into_iter()
            .map(|n| n.try_normalize().unwrap_or(DVec3::Z))
            .collect();
        let mesh = TriangleMesh {
            vertices,
            triangles,
            vertex_normals,
            uvs,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        if self.vertex_normals.len() != nv || self.uvs.len() != nv {
            return Err(Error::InvalidMesh(format!(
                "{} vertices but {} normals and {} uvs",
                nv,
                self.vertex_normals.len(),
                self.uvs.len()
            )));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k as usize >= nv) {
                return Err(Error::InvalidMesh(format!("triangle {i} index out of range")));
            }
            if self.area(i) <= 0.0 {
                return Err(Error::InvalidMesh(format!("triangle {i} has zero area")));
            }
        }
        for (i, n) in self.vertex_normals.iter().enumerate() {
            if (n.length() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidMesh(format!("normal {i} is not unit length")));
            }
        }
        Ok(())
    }

    pub fn corners(&self, tri: usize) -> [DVec3; 3] {
        let [a, b, c] = self.triangles[tri];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.corners(tri);
        0.5 * (b - a).cross(c - a).length()
    }

    pub fn triangle_bounds(&self, tri: usize) -> Aabb {
        let mut b = Aabb::EMPTY;
        for p in self.corners(tri) {
            b.grow(p);
        }
        b
    }

    pub fn bounds(&self) -> Aabb {
        let mut b = Aabb::EMPTY;
        for &p in &self.vertices {
            b.grow(p);
        }
        b
    }

    /// Append another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.vertex_normals.extend_from_slice(&other.vertex_normals);
        self.uvs.extend_from_slice(&other.uvs);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    /// Parse `v`/`vt`/`vn`/`f` records. Corners with distinct
    /// position/uv/normal triples become distinct vertices; polygons are
    /// fan-triangulated. Missing normals are rebuilt from face areas, missing
    /// UVs are an error.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::parse("<obj>", format!("line {}: {msg}", line + 1));
        let mut pos = Vec::new();
        let mut tex = Vec::new();
        let mut nrm = Vec::new();
        let mut faces: Vec<Vec<(usize, Option<usize>, Option<usize>)>> = Vec::new();

        let resolve = |idx: &str, len: usize, line: usize| -> Result<usize> {
            let i: i64 = idx.parse().map_err(|_| err(line, "bad index"))?;
            let r = if i < 0 { len as i64 + i } else { i - 1 };
            if r < 0 || r as usize >= len {
                return Err(err(line, "index out of range"));
            }
            Ok(r as usize)
        };

        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let mut it = line.split_whitespace();
            let Some(tag) = it.next() else { continue };
            let nums = |it: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
                it.map(|s| s.parse::<f64>().map_err(|_| err(ln, "bad number")))
                    .collect()
            };
            match tag {
                "v" => {
                    let v = nums(it)?;
                    if v.len() < 3 {
                        return Err(err(ln, "vertex needs 3 coordinates"));
                    }
                    pos.push(DVec3::new(v[0], v[1], v[2]));
                }
                "vt" => {
                    let v = nums(it)?;
                    if v.len() < 2 {
                        return Err(err(ln, "uv needs 2 coordinates"));
                    }
                    tex.push(DVec2::new(v[0], v[1]));
                }
                "vn" => {
                    let v = nums(it)?;
                    if v.len() < 3 {
                        return Err(err(ln, "normal needs 3 coordinates"));
                    }
                    nrm.push(DVec3::new(v[0], v[1], v[2]));
                }
                "f" => {
                    let mut face = Vec::new();
                    for corner in it {
                        let mut parts = corner.split('/');
                        let v = resolve(parts.next().unwrap_or(""), pos.len(), ln)?;
                        let t = match parts.next() {
                            Some(s) if !s.is_empty() => Some(resolve(s, tex.len(), ln)?),
                            _ => None,
                        };
                        let n = match parts.next() {
                            Some(s) if !s.is_empty() => Some(resolve(s, nrm.len(), ln)?),
                            _ => None,
                        };
                        face.push((v, t, n));
                    }
                    if face.len() < 3 {
                        return Err(err(ln, "face needs 3 corners"));
                    }
                    faces.push(face);
                }
                _ => {}
            }
        }

        let mut map = HashMap::new();
        let mut mesh = TriangleMesh::default();
        let mut has_normals = true;
        for face in &faces {
            let mut ids = Vec::with_capacity(face.len());
            for &key in face {
                let id = *map.entry(key).or_insert_with(|| {
                    let (v, t, n) = key;
                    mesh.vertices.push(pos[v]);
                    mesh.uvs.push(t.map(|t| tex[t]).unwrap_or(DVec2::splat(f64::NAN)));
                    mesh.vertex_normals.push(n.map(|n| nrm[n]).unwrap_or(DVec3::ZERO));
                    (mesh.vertices.len() - 1) as u32
                });
                has_normals &= key.2.is_some();
                ids.push(id);
            }
            for k in 1..ids.len() - 1 {
                mesh.triangles.push([ids[0], ids[k], ids[k + 1]]);
            }
        }
        if mesh.uvs.iter().any(|uv| uv.x.is_nan()) {
            return Err(Error::parse("<obj>", "mesh is missing texture coordinates"));
        }
        if !has_normals {
            let mut acc = vec![DVec3::ZERO; mesh.vertices.len()];
            for t in &mesh.triangles {
                let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
                let n = (b - a).cross(c - a);
                for &i in t {
                    acc[i as usize] += n;
                }
            }
            for (i, n) in mesh.vertex_normals.iter_mut().enumerate() {
                if *n == DVec3::ZERO {
                    *n = acc[i];
                }
            }
        }
        let TriangleMesh {
            vertices,
            triangles,
            vertex_normals,
            uvs,
        } = mesh;
        if triangles.is_empty() {
            return Err(Error::EmptyScene);
        }
        TriangleMesh::new(vertices, triangles, vertex_normals, uvs)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.uvs {
            let _ = writeln!(s, "vt {} {}", t.x, t.y);
        }
        for n in &self.vertex_normals {
            let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            let _ = writeln!(s, "f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}");
        }
        s
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD: &str = "\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vt 0 0
vt 1 0
vt 1 1
vt 0 1
vn 0 0 2
f 1/1/1 2/2/1 3/3/1 4/4/1
";

    #[test]
    fn parses_and_triangulates() {
        let m = TriangleMesh::parse_obj(QUAD).unwrap();
        assert_eq!(m.triangles.len(), 2);
        assert_eq!(m.vertices.len(), 4);
        assert!((m.vertex_normals[0] - DVec3::Z).length() < 1e-12);
        let again = TriangleMesh::parse_obj(&m.to_obj()).unwrap();
        assert_eq!(again.triangles, m.triangles);
        assert_eq!(again.uvs, m.uvs);
    }

    #[test]
    fn rejects_missing_uvs_and_degenerate_faces() {
        let no_uv = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
        assert!(TriangleMesh::parse_obj(no_uv).is_err());
        let flat = "v 0 0 0\nv 1 0 0\nv 2 0 0\nvt 0 0\nf 1/1 2/1 3/1\n";
        assert!(matches!(
            TriangleMesh::parse_obj(flat),
            Err(Error::InvalidMesh(_))
        ));
        assert!(TriangleMesh::parse_obj("v 0 0 0\nf 1/1 2/1 3/1\n").is_err());
    }

    #[test]
    fn missing_normals_are_rebuilt() {
        let m = TriangleMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1\n").unwrap();
        assert!((m.vertex_normals[1] - DVec3::Z).length() < 1e-12);
    }
}
