//! Scene geometry: mesh + BVH, ray queries and foreground masks.

use rayon::prelude::*;

use crate::bvh::BvhTree;
use crate::camera::Camera;
use crate::image::Mask;
use crate::math::{DVec2, DVec3};
use crate::mesh::TriangleMesh;
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: DVec3,
    pub dir: DVec3,
    pub t_min: f64,
}

impl Ray {
    pub fn new(origin: DVec3, dir: DVec3, t_min: f64) -> Self {
        Ray { origin, dir, t_min }
    }

    pub fn at(&self, t: f64) -> DVec3 {
        self.origin + t * self.dir
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub position: DVec3,
    /// Interpolated shading normal, facing the incoming ray.
    pub normal: DVec3,
    /// Geometric normal on the same side as `normal`'s flip decision.
    pub geometric_normal: DVec3,
    pub uv: DVec2,
    pub triangle: u32,
}

pub struct Scene {
    pub mesh: TriangleMesh,
    pub bvh: BvhTree,
    /// Secondary-ray epsilon: 1e-4 of the scene diagonal.
    pub epsilon: f64,
}

impl Scene {
    pub fn new(mesh: TriangleMesh) -> Result<Self> {
        mesh.validate()?;
        let bvh = BvhTree::build(&mesh)?;
        let epsilon = 1e-4 * bvh.bounds().diagonal().max(1e-12);
        Ok(Scene { mesh, bvh, epsilon })
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let h = self
            .bvh
            .intersect(&self.mesh, ray.origin, ray.dir, ray.t_min, f64::INFINITY)?;
        let [a, b, c] = self.mesh.triangles[h.tri as usize].map(|i| i as usize);
        let w = 1.0 - h.u - h.v;
        let m = &self.mesh;
        let mut gn = (m.vertices[b] - m.vertices[a])
            .cross(m.vertices[c] - m.vertices[a])
            .normalize();
        let mut n = (w * m.vertex_normals[a] + h.u * m.vertex_normals[b] + h.v * m.vertex_normals[c])
            .try_normalize()
            .unwrap_or(gn);
        if gn.dot(ray.dir) > 0.0 {
            gn = -gn;
            n = -n;
        }
        let uv = w * m.uvs[a] + h.u * m.uvs[b] + h.v * m.uvs[c];
        Some(Hit {
            t: h.t,
            position: ray.at(h.t),
            normal: n,
            geometric_normal: gn,
            uv,
            triangle: h.tri,
        })
    }

    /// Secondary ray leaving `hit` along `dir`, nudged off the surface on the
    /// side `dir` points to.
    pub fn spawn(&self, hit: &Hit, dir: DVec3) -> Ray {
        let side = if dir.dot(hit.geometric_normal) >= 0.0 { 1.0 } else { -1.0 };
        Ray::new(
            hit.position + side * self.epsilon * hit.geometric_normal,
            dir,
            self.epsilon,
        )
    }

    /// Whether anything blocks `ray` before infinity.
    pub fn occluded(&self, ray: &Ray) -> bool {
        self.bvh
            .occluded(&self.mesh, ray.origin, ray.dir, ray.t_min, f64::INFINITY)
    }

    /// Pixel is foreground iff its center ray hits the mesh.
    pub fn foreground_mask(&self, camera: &Camera) -> Mask {
        let data = (0..camera.pixel_count())
            .into_par_iter()
            .map(|i| {
                let ray = camera.ray_unchecked(i % camera.width, i / camera.width, (0.5, 0.5));
                self.intersect(&ray).is_some()
            })
            .collect();
        Mask {
            width: camera.width,
            height: camera.height,
            data,
        }
    }
}
