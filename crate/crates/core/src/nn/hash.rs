//! Multiresolution voxel feature grids with a collision-free near-surface
//! index.
//!
//! Each level registers the voxels whose center lies within a few voxel
//! diagonals of the mesh and gives every corner of those voxels its own
//! table row. Lookups interpolate the eight corner rows trilinearly.

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::math::DVec3;
use crate::mesh::{Aabb, TriangleMesh};
use crate::{Error, Result};

pub const LEVELS: usize = 16;
pub const FEATURES: usize = 16;
pub const ENCODED_DIM: usize = LEVELS * FEATURES;
pub const CORNERS: usize = LEVELS * 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashConfig {
    pub n_min: u32,
    pub n_max: u32,
    /// Shell half-width in voxel diagonals.
    pub shell_diagonals: f64,
}

impl Default for HashConfig {
    fn default() -> Self {
        HashConfig {
            n_min: 16,
            n_max: 256,
            shell_diagonals: 2.0,
        }
    }
}

impl HashConfig {
    /// Per-level resolutions `floor(n_min * b^l)`, `b = (n_max/n_min)^(1/(L-1))`.
    pub fn resolutions(&self) -> [u32; LEVELS] {
        let b = (self.n_max as f64 / self.n_min as f64).powf(1.0 / (LEVELS - 1) as f64);
        let mut out = [0; LEVELS];
        for (l, r) in out.iter_mut().enumerate() {
            // The small bias keeps exact powers (the last level) from
            // rounding down.
            *r = (self.n_min as f64 * b.powi(l as i32) + 1e-9).floor() as u32;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub resolution: u32,
    /// Registered voxels, sorted by key.
    pub voxels: Vec<[i32; 3]>,
    /// Corner keys, sorted; the slot of a corner is its index here.
    pub corners: Vec<[i32; 3]>,
    /// Global table row of the first corner of this level.
    pub row_offset: u32,
    voxel_index: FxHashMap<u64, u32>,
    voxel_corners: Vec<[u32; 8]>,
}

/// Grid geometry and the voxel/corner registration of every level.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub config: HashConfig,
    /// Cube domain `[origin, origin + side]^3`.
    pub origin: DVec3,
    pub side: f64,
    pub levels: Vec<Level>,
}

/// Rows and weights for the eight corners at every level of one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodePlan {
    pub rows: [u32; CORNERS],
    pub weights: [f32; CORNERS],
}

fn key(v: [i32; 3]) -> u64 {
    const B: i64 = 1 << 20;
    let p = |c: i32| ((c as i64 + B) as u64) & ((1 << 21) - 1);
    p(v[0]) | (p(v[1]) << 21) | (p(v[2]) << 42)
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: DVec3, a: DVec3, b: DVec3, c: DVec3) -> DVec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

impl Level {
    fn from_voxels(resolution: u32, mut voxels: Vec<[i32; 3]>, row_offset: u32) -> Self {
        voxels.sort_unstable();
        voxels.dedup();
        let mut corners: Vec<[i32; 3]> = voxels
            .iter()
            .flat_map(|v| {
                (0..8).map(move |c| [v[0] + (c & 1), v[1] + ((c >> 1) & 1), v[2] + ((c >> 2) & 1)])
            })
            .collect();
        corners.sort_unstable();
        corners.dedup();
        let corner_slot: FxHashMap<u64, u32> = corners
            .iter()
            .enumerate()
            .map(|(i, c)| (key(*c), i as u32))
            .collect();
        let voxel_corners = voxels
            .iter()
            .map(|v| {
                let mut s = [0u32; 8];
                for (c, slot) in s.iter_mut().enumerate() {
                    let c = c as i32;
                    let k = key([v[0] + (c & 1), v[1] + ((c >> 1) & 1), v[2] + ((c >> 2) & 1)]);
                    *slot = corner_slot[&k];
                }
                s
            })
            .collect();
        let voxel_index = voxels
            .iter()
            .enumerate()
            .map(|(i, v)| (key(*v), i as u32))
            .collect();
        Level {
            resolution,
            voxels,
            corners,
            row_offset,
            voxel_index,
            voxel_corners,
        }
    }

    pub fn voxel(&self, v: [i32; 3]) -> Option<u32> {
        self.voxel_index.get(&key(v)).copied()
    }

    /// Table slots (level-local) of the corners of registered voxel `id`.
    pub fn corner_slots(&self, id: u32) -> [u32; 8] {
        self.voxel_corners[id as usize]
    }
}

impl HashGrid {
    pub fn build(mesh: &TriangleMesh, config: HashConfig) -> Result<Self> {
        mesh.validate()?;
        if config.n_min == 0 || config.n_max < config.n_min || config.shell_diagonals <= 0.0 {
            return Err(Error::Config(format!("invalid hash config {config:?}")));
        }
        let b = mesh.bounds();
        let extent = (b.max - b.min).max_element().max(1e-6);
        let side = extent * 1.05;
        let origin = b.centroid() - DVec3::splat(0.5 * side);
        let mut levels = Vec::with_capacity(LEVELS);
        let mut offset = 0u64;
        for res in config.resolutions() {
            let voxels = shell_voxels(mesh, origin, side / res as f64, config.shell_diagonals);
            let level = Level::from_voxels(res, voxels, offset as u32);
            offset += level.corners.len() as u64;
            if offset > u32::MAX as u64 {
                return Err(Error::Config("hash tables exceed 2^32 rows".into()));
            }
            levels.push(level);
        }
        let grid = HashGrid {
            config,
            origin,
            side,
            levels,
        };
        // Every surface point must land in a registered voxel.
        for (i, v) in mesh.vertices.iter().enumerate() {
            for (l, level) in grid.levels.iter().enumerate() {
                if level.voxel(grid.voxel_of(l, *v)).is_none() {
                    return Err(Error::ShellTooThin(format!(
                        "vertex {i} has no registered voxel at level {l}"
                    )));
                }
            }
        }
        Ok(grid)
    }

    /// Reassemble a grid from stored voxel lists (checkpoint loading).
    pub fn from_parts(
        config: HashConfig,
        origin: DVec3,
        side: f64,
        voxels: Vec<Vec<[i32; 3]>>,
    ) -> Result<Self> {
        let res = config.resolutions();
        if voxels.len() != LEVELS {
            return Err(Error::ShapeMismatch(format!("{} hash levels", voxels.len())));
        }
        let mut offset = 0u32;
        let levels = voxels
            .into_iter()
            .zip(res)
            .map(|(v, r)| {
                let level = Level::from_voxels(r, v, offset);
                offset += level.corners.len() as u32;
                level
            })
            .collect();
        Ok(HashGrid {
            config,
            origin,
            side,
            levels,
        })
    }

    pub fn total_rows(&self) -> usize {
        self.levels.iter().map(|l| l.corners.len()).sum()
    }

    pub fn voxel_size(&self, level: usize) -> f64 {
        self.side / self.levels[level].resolution as f64
    }

    fn grid_coords(&self, level: usize, p: DVec3) -> DVec3 {
        (p - self.origin) / self.voxel_size(level)
    }

    pub fn voxel_of(&self, level: usize, p: DVec3) -> [i32; 3] {
        let g = self.grid_coords(level, p).floor();
        [g.x as i32, g.y as i32, g.z as i32]
    }

    /// Interpolation plan for `p`. Returns `true` in the second slot when
    /// `p` fell outside the shell at some level and was clamped into the
    /// nearest registered voxel.
    pub fn plan(&self, p: DVec3) -> (EncodePlan, bool) {
        let mut plan = EncodePlan {
            rows: [0; CORNERS],
            weights: [0.0; CORNERS],
        };
        let mut clamped = false;
        for (l, level) in self.levels.iter().enumerate() {
            let g = self.grid_coords(l, p);
            let v = [g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32];
            let (id, frac) = match level.voxel(v) {
                Some(id) => (id, g - DVec3::new(v[0] as f64, v[1] as f64, v[2] as f64)),
                None => {
                    clamped = true;
                    match nearest_voxel(level, g) {
                        Some((id, u)) => {
                            let f = g - DVec3::new(u[0] as f64, u[1] as f64, u[2] as f64);
                            (id, f.clamp(DVec3::ZERO, DVec3::ONE))
                        }
                        None => continue,
                    }
                }
            };
            let slots = level.corner_slots(id);
            for (c, &slot) in slots.iter().enumerate() {
                let wx = if c & 1 == 1 { frac.x } else { 1.0 - frac.x };
                let wy = if c & 2 == 2 { frac.y } else { 1.0 - frac.y };
                let wz = if c & 4 == 4 { frac.z } else { 1.0 - frac.z };
                plan.rows[l * 8 + c] = level.row_offset + slot;
                plan.weights[l * 8 + c] = (wx * wy * wz) as f32;
            }
        }
        (plan, clamped)
    }

    /// Whether distinct `(level, corner)` pairs map to distinct table rows.
    pub fn is_collision_free(&self) -> bool {
        let mut rows = FxHashSet::default();
        for level in &self.levels {
            let mut keys = FxHashSet::default();
            for (slot, c) in level.corners.iter().enumerate() {
                if !keys.insert(key(*c)) || !rows.insert(level.row_offset as u64 + slot as u64) {
                    return false;
                }
            }
        }
        rows.len() == self.total_rows()
    }
}

/// Registered voxel whose center is closest to grid point `g`, searching
/// growing cubic rings out to a fixed radius.
fn nearest_voxel(level: &Level, g: DVec3) -> Option<(u32, [i32; 3])> {
    const MAX_RING: i32 = 8;
    let c = [g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32];
    for r in 1..=MAX_RING {
        let mut best: Option<(f64, [i32; 3], u32)> = None;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs() != r && dy.abs() != r && dz.abs() != r {
                        continue;
                    }
                    let v = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if let Some(id) = level.voxel(v) {
                        let center = DVec3::new(v[0] as f64, v[1] as f64, v[2] as f64) + 0.5;
                        let d = (center - g).length_squared();
                        if best.is_none_or(|b| d < b.0 || (d == b.0 && v < b.1)) {
                            best = Some((d, v, id));
                        }
                    }
                }
            }
        }
        if let Some((_, v, id)) = best {
            return Some((id, v));
        }
    }
    None
}

/// Voxels of size `h` whose centers lie within `diagonals * sqrt(3) * h` of
/// some triangle, found by scanning each triangle's padded bounding box.
fn shell_voxels(mesh: &TriangleMesh, origin: DVec3, h: f64, diagonals: f64) -> Vec<[i32; 3]> {
    let r = diagonals * 3f64.sqrt() * h;
    let r2 = r * r;
    let mut set: FxHashSet<[i32; 3]> = FxHashSet::default();
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        let mut bb = Aabb::EMPTY;
        bb.grow(a);
        bb.grow(b);
        bb.grow(c);
        let lo = ((bb.min - r - origin) / h - 0.5).floor();
        let hi = ((bb.max + r - origin) / h - 0.5).ceil();
        for k in lo.z as i32..=hi.z as i32 {
            for j in lo.y as i32..=hi.y as i32 {
                for i in lo.x as i32..=hi.x as i32 {
                    if set.contains(&[i, j, k]) {
                        continue;
                    }
                    let center = origin + (DVec3::new(i as f64, j as f64, k as f64) + 0.5) * h;
                    let q = closest_point_on_triangle(center, a, b, c);
                    if (q - center).length_squared() <= r2 {
                        set.insert([i, j, k]);
                    }
                }
            }
        }
    }
    set.into_iter().collect()
}
