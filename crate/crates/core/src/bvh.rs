//! Bounding volume hierarchy over a triangle mesh.
//!
//! Median split of triangle centroids along the longest axis of the centroid
//! bounds, at most [`LEAF_SIZE`] triangles per leaf. Nodes are stored in
//! depth-first order so the left child of node `i` is always `i + 1`.

use crate::math::DVec3;
use crate::mesh::{Aabb, TriangleMesh};
use crate::{Error, Result};

pub const LEAF_SIZE: usize = 4;

#[derive(Clone, Debug)]
pub struct BvhNode {
    pub bounds: Aabb,
    /// Leaf: first index into `order`. Interior: index of the right child.
    pub offset: u32,
    /// Triangle count for leaves, 0 for interior nodes.
    pub count: u32,
    pub axis: u8,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

#[derive(Clone, Debug)]
pub struct BvhTree {
    pub nodes: Vec<BvhNode>,
    /// Triangle ids in leaf order.
    pub order: Vec<u32>,
}

/// Result of a ray/triangle test: distance and barycentrics of vertices 1 and 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriHit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub tri: u32,
}

/// Möller–Trumbore in double precision. Edges are inclusive so rays through a
/// shared edge hit at least one of the adjacent triangles.
#[inline]
pub fn intersect_triangle(
    p: [DVec3; 3],
    origin: DVec3,
    dir: DVec3,
    t_min: f64,
    t_max: f64,
) -> Option<(f64, f64, f64)> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let pv = dir.cross(e2);
    let det = e1.dot(pv);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let tv = origin - p[0];
    let u = tv.dot(pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = tv.cross(e1);
    let v = dir.dot(qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(qv) * inv;
    (t > t_min && t < t_max).then_some((t, u, v))
}

#[inline]
fn closer(candidate: &TriHit, best: &Option<TriHit>) -> bool {
    match best {
        None => true,
        Some(b) => candidate.t < b.t || (candidate.t == b.t && candidate.tri < b.tri),
    }
}

impl BvhTree {
    pub fn build(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::EmptyScene);
        }
        let n = mesh.triangles.len();
        let boxes: Vec<Aabb> = (0..n).map(|i| mesh.triangle_bounds(i)).collect();
        let centroids: Vec<DVec3> = boxes.iter().map(Aabb::centroid).collect();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        build_node(&mut nodes, &mut order, 0, &boxes, &centroids);
        Ok(BvhTree { nodes, order })
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Nearest hit with `t_min < t < t_max`.
    pub fn intersect(
        &self,
        mesh: &TriangleMesh,
        origin: DVec3,
        dir: DVec3,
        t_min: f64,
        t_max: f64,
    ) -> Option<TriHit> {
        let inv = dir.recip();
        let mut best: Option<TriHit> = None;
        let mut limit = t_max;
        let mut stack = [0u32; 64];
        let mut sp = 1usize;
        while sp > 0 {
            sp -= 1;
            let idx = stack[sp] as usize;
            let node = &self.nodes[idx];
            if node.bounds.hit(origin, inv, limit).is_none() {
                continue;
            }
            if node.is_leaf() {
                let start = node.offset as usize;
                for &tri in &self.order[start..start + node.count as usize] {
                    // Inclusive limit so equal-t ties can be resolved by id.
                    if let Some((t, u, v)) = intersect_triangle(
                        mesh.corners(tri as usize),
                        origin,
                        dir,
                        t_min,
                        if limit.is_finite() { f64::from_bits(limit.to_bits() + 1) } else { limit },
                    ) {
                        let h = TriHit { t, u, v, tri };
                        if t <= limit && closer(&h, &best) {
                            limit = t;
                            best = Some(h);
                        }
                    }
                }
            } else {
                let (left, right) = (idx as u32 + 1, node.offset);
                // Visit the near child first.
                if dir[node.axis as usize] < 0.0 {
                    stack[sp] = left;
                    stack[sp + 1] = right;
                } else {
                    stack[sp] = right;
                    stack[sp + 1] = left;
                }
                sp += 2;
            }
        }
        best
    }

    /// Any hit with `t_min < t < t_max`.
    pub fn occluded(
        &self,
        mesh: &TriangleMesh,
        origin: DVec3,
        dir: DVec3,
        t_min: f64,
        t_max: f64,
    ) -> bool {
        let inv = dir.recip();
        let mut stack = [0u32; 64];
        let mut sp = 1usize;
        while sp > 0 {
            sp -= 1;
            let idx = stack[sp] as usize;
            let node = &self.nodes[idx];
            if node.bounds.hit(origin, inv, t_max).is_none() {
                continue;
            }
            if node.is_leaf() {
                let start = node.offset as usize;
                for &tri in &self.order[start..start + node.count as usize] {
                    if intersect_triangle(mesh.corners(tri as usize), origin, dir, t_min, t_max)
                        .is_some()
                    {
                        return true;
                    }
                }
            } else {
                stack[sp] = idx as u32 + 1;
                stack[sp + 1] = node.offset;
                sp += 2;
            }
        }
        false
    }
}

/// Reference nearest-hit search over every triangle.
pub fn brute_force_intersect(
    mesh: &TriangleMesh,
    origin: DVec3,
    dir: DVec3,
    t_min: f64,
    t_max: f64,
) -> Option<TriHit> {
    let mut best = None;
    for tri in 0..mesh.triangles.len() {
        if let Some((t, u, v)) = intersect_triangle(mesh.corners(tri), origin, dir, t_min, t_max) {
            let h = TriHit {
                t,
                u,
                v,
                tri: tri as u32,
            };
            if closer(&h, &best) {
                best = Some(h);
            }
        }
    }
    best
}

fn build_node(
    nodes: &mut Vec<BvhNode>,
    order: &mut [u32],
    offset: usize,
    boxes: &[Aabb],
    centroids: &[DVec3],
) -> usize {
    let mut bounds = Aabb::EMPTY;
    let mut cb = Aabb::EMPTY;
    for &t in order.iter() {
        bounds = bounds.union(&boxes[t as usize]);
        cb.grow(centroids[t as usize]);
    }
    let idx = nodes.len();
    let extent = cb.max - cb.min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    nodes.push(BvhNode {
        bounds,
        offset: offset as u32,
        count: order.len() as u32,
        axis: axis as u8,
    });
    if order.len() <= LEAF_SIZE {
        return idx;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let (lo, hi) = order.split_at_mut(mid);
    build_node(nodes, lo, offset, boxes, centroids);
    let right = build_node(nodes, hi, offset + mid, boxes, centroids);
    nodes[idx].offset = right as u32;
    nodes[idx].count = 0;
    idx
}
