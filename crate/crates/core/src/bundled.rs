//! Procedural geometry and the bundled probe scene.
//!
//! The probe scene is a sphere ringed by a tilted torus, floating in free
//! space so every environment direction is observable, with a textured
//! albedo and a sky-plus-sun environment. It is small enough to path trace
//! on a laptop and has visible inter-reflections between the two parts.

use std::f64::consts::PI;
use std::path::Path;

use crate::camera::{orbit_cameras, save_cameras, Camera};
use crate::envmap::EnvironmentMap;
use crate::math::{DVec2, DVec3, Rgb};
use crate::mesh::TriangleMesh;
use crate::texture::AlbedoTexture;
use crate::{Error, Result};

/// Square `[-half, half]^2` in the `z = 0` plane facing `+z`.
pub fn quad(half: f64) -> Result<TriangleMesh> {
    let v = vec![
        DVec3::new(-half, -half, 0.0),
        DVec3::new(half, -half, 0.0),
        DVec3::new(half, half, 0.0),
        DVec3::new(-half, half, 0.0),
    ];
    let uv = vec![
        DVec2::new(0.0, 0.0),
        DVec2::new(1.0, 0.0),
        DVec2::new(1.0, 1.0),
        DVec2::new(0.0, 1.0),
    ];
    TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]], vec![DVec3::Z; 4], uv)
}

/// Axis-aligned cube of half-extent `half` with outward flat normals; every
/// face maps to the full UV square.
pub fn cube(center: DVec3, half: f64) -> TriangleMesh {
    let h = half;
    let mut mesh = TriangleMesh::default();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut n = DVec3::ZERO;
            n[axis] = sign;
            let mut u = DVec3::ZERO;
            u[(axis + 1) % 3] = 1.0;
            let mut v = n.cross(u);
            if sign < 0.0 {
                v = -v;
            }
            let u = v.cross(n);
            let base = mesh.vertices.len() as u32;
            for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                mesh.vertices.push(center + h * (n + a * u + b * v));
                mesh.vertex_normals.push(n);
                mesh.uvs.push(DVec2::new(0.5 * (a + 1.0), 0.5 * (b + 1.0)));
            }
            mesh.triangles.push([base, base + 1, base + 2]);
            mesh.triangles.push([base, base + 2, base + 3]);
        }
    }
    mesh
}

/// Lat-long sphere with `segments` azimuthal and `rings` polar divisions.
/// UV `u` spans `u_range`, `v` runs from the south to the north pole.
pub fn uv_sphere(
    center: DVec3,
    radius: f64,
    segments: usize,
    rings: usize,
    u_range: [f64; 2],
) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let cols = segments + 1;
    for j in 0..=rings {
        let theta = PI * j as f64 / rings as f64;
        for i in 0..=segments {
            let phi = 2.0 * PI * i as f64 / segments as f64;
            let n = DVec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            mesh.vertices.push(center + radius * n);
            mesh.vertex_normals.push(n);
            let u = u_range[0] + (u_range[1] - u_range[0]) * i as f64 / segments as f64;
            mesh.uvs.push(DVec2::new(u, 1.0 - j as f64 / rings as f64));
        }
    }
    for j in 0..rings {
        for i in 0..segments {
            let a = (j * cols + i) as u32;
            let b = a + 1;
            let c = a + cols as u32;
            let d = c + 1;
            if j != 0 {
                mesh.triangles.push([a, c, b]);
            }
            if j != rings - 1 {
                mesh.triangles.push([b, c, d]);
            }
        }
    }
    TriangleMesh::new(mesh.vertices, mesh.triangles, mesh.vertex_normals, mesh.uvs)
}

/// Torus around the local `z` axis, rotated so that axis becomes `axis`.
pub fn torus(
    center: DVec3,
    axis: DVec3,
    major: f64,
    minor: f64,
    segments: usize,
    sides: usize,
    u_range: [f64; 2],
) -> Result<TriangleMesh> {
    let (t, b) = crate::math::frame(axis.normalize());
    let n_axis = axis.normalize();
    let to_world = |p: DVec3| t * p.x + b * p.y + n_axis * p.z;
    let mut mesh = TriangleMesh::default();
    let cols = sides + 1;
    for i in 0..=segments {
        let phi = 2.0 * PI * i as f64 / segments as f64;
        let ring = DVec3::new(phi.cos(), phi.sin(), 0.0);
        for j in 0..=sides {
            let psi = 2.0 * PI * j as f64 / sides as f64;
            let n = psi.cos() * ring + psi.sin() * DVec3::Z;
            mesh.vertices.push(center + to_world(major * ring + minor * n));
            mesh.vertex_normals.push(to_world(n));
            let u = u_range[0] + (u_range[1] - u_range[0]) * i as f64 / segments as f64;
            mesh.uvs.push(DVec2::new(u, j as f64 / sides as f64));
        }
    }
    for i in 0..segments {
        for j in 0..sides {
            let a = (i * cols + j) as u32;
            let b = a + 1;
            let c = a + cols as u32;
            let d = c + 1;
            mesh.triangles.push([a, c, d]);
            mesh.triangles.push([a, d, b]);
        }
    }
    TriangleMesh::new(mesh.vertices, mesh.triangles, mesh.vertex_normals, mesh.uvs)
}

pub const PROBE_W: f64 = 0.3;
pub const PROBE_ALPHA: f64 = 0.15;

/// Sphere plus tilted ring, about 4.2k triangles, inside `[-1, 1]^3`.
pub fn probe_mesh() -> Result<TriangleMesh> {
    let mut mesh = uv_sphere(DVec3::ZERO, 0.45, 48, 24, [0.0, 0.5])?;
    let ring = torus(
        DVec3::ZERO,
        DVec3::new(0.35, -0.25, 1.0),
        0.72,
        0.16,
        64,
        16,
        [0.5, 1.0],
    )?;
    mesh.append(&ring);
    mesh.validate()?;
    Ok(mesh)
}

fn sun(dir: DVec3, elevation_deg: f64, azimuth_deg: f64, sharpness: f64) -> f64 {
    let (e, a) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    let s = DVec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
    ((dir.dot(s) - 1.0) / sharpness).exp()
}

/// Training illumination: blue sky, warm ground bounce and a broad sun.
pub fn sky_radiance(dir: DVec3) -> Rgb {
    let z = dir.z;
    let base = if z >= 0.0 {
        let t = z.sqrt();
        Rgb::new(0.9, 0.85, 0.8) * (1.0 - t) + Rgb::new(0.35, 0.5, 0.95) * t
    } else {
        Rgb::new(0.35, 0.3, 0.25) * (0.7 + 0.3 * (1.0 + z))
    };
    base + Rgb::new(6.0, 5.0, 3.8) * sun(dir, 40.0, 60.0, 0.06)
}

/// Held-out illumination for relighting tests: low cool key light from the
/// other side plus a magenta fill.
pub fn holdout_radiance(dir: DVec3) -> Rgb {
    let z = dir.z;
    let base = Rgb::new(0.25, 0.3, 0.35) * (0.6 + 0.4 * z.abs());
    base + Rgb::new(3.0, 4.0, 6.0) * sun(dir, 15.0, 220.0, 0.08)
        + Rgb::new(2.5, 0.6, 1.8) * sun(dir, -30.0, 330.0, 0.1)
}

pub fn probe_envmap(width: usize, height: usize) -> EnvironmentMap {
    // Supersample each texel so the map is the texel-average of the function.
    supersampled(width, height, sky_radiance)
}

pub fn holdout_envmap(width: usize, height: usize) -> EnvironmentMap {
    supersampled(width, height, holdout_radiance)
}

fn supersampled(width: usize, height: usize, f: fn(DVec3) -> Rgb) -> EnvironmentMap {
    EnvironmentMap::from_fn(width * 8, height * 8, f).resample(width, height)
}

/// Ground-truth albedo: banded warm sphere, striped cool ring.
pub fn probe_albedo(res: usize) -> AlbedoTexture {
    AlbedoTexture::from_fn(res, res, |uv| {
        if uv.x < 0.5 {
            let band = 0.5 + 0.5 * (uv.y * 6.0 * PI).sin();
            Rgb::new(0.75, 0.5, 0.3) * (0.7 + 0.3 * band)
        } else {
            let stripe = 0.5 + 0.5 * ((uv.x - 0.5) * 16.0 * PI).sin();
            Rgb::new(0.3, 0.55, 0.7) * (0.75 + 0.25 * stripe)
        }
    })
}

pub fn probe_cameras(count: usize, size: usize) -> Result<Vec<Camera>> {
    orbit_cameras(DVec3::ZERO, 3.2, count, 40.0, size, size)
}

/// Write the probe scene files referenced by `probe.toml` into `dir`.
pub fn write_probe_bundle(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    probe_mesh()?.save_obj(dir.join("probe.obj"))?;
    save_cameras(dir.join("cameras.json"), &probe_cameras(16, 64)?)?;
    probe_envmap(32, 16).save(dir.join("env_gt.pfm"))?;
    holdout_envmap(32, 16).save(dir.join("env_holdout.pfm"))?;
    probe_albedo(128).save(dir.join("albedo_gt.pfm"))?;
    Ok(())
}
