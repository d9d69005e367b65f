//! Blend of a rough white conductor and a textured Lambertian lobe.
//!
//! The conductor uses the GGX distribution, height-correlated Smith masking
//! and Schlick Fresnel with `F0 = 1`. The blend is
//! `w * conductor(alpha) + (1 - w) * albedo(uv) / pi`.

use std::f64::consts::PI;

use crate::math::{from_local, to_local, DVec2, DVec3, Rgb};
use crate::rng::UniformSource;
use crate::texture::{AlbedoTexture, Footprint};
use crate::Result;

pub const MIN_ALPHA: f64 = 0.01;
pub const CONDUCTOR_F0: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BlendedBsdf {
    /// Specular fraction in `[0, 1]`.
    pub w: f64,
    /// GGX roughness in `(0, 1]`.
    pub alpha: f64,
    pub albedo: AlbedoTexture,
}

#[derive(Clone, Copy, Debug)]
pub struct BsdfSample {
    pub wi: DVec3,
    /// Mixture density per steradian.
    pub pdf: f64,
    /// `eval * cos / pdf`.
    pub throughput: Rgb,
    pub eval: Rgb,
}

/// Pieces of one evaluation needed for derivatives.
#[derive(Clone, Copy, Debug)]
pub struct EvalParts {
    pub value: Rgb,
    /// Conductor lobe value (scalar, white).
    pub spec: f64,
    /// d spec / d alpha.
    pub dspec_dalpha: f64,
    pub albedo: Rgb,
    pub footprint: Footprint,
}

pub fn schlick(f0: f64, cos: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - cos).max(0.0).powi(5)
}

pub fn ggx_d(alpha: f64, cos_h: f64) -> f64 {
    if cos_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let q = cos_h * cos_h * (a2 - 1.0) + 1.0;
    a2 / (PI * q * q)
}

pub fn smith_lambda(alpha: f64, cos: f64) -> f64 {
    let c2 = cos * cos;
    let t2 = ((1.0 - c2) / c2).max(0.0);
    0.5 * (-1.0 + (1.0 + alpha * alpha * t2).sqrt())
}

pub fn smith_g1(alpha: f64, cos: f64) -> f64 {
    1.0 / (1.0 + smith_lambda(alpha, cos))
}

/// Conductor lobe and its derivative with respect to `alpha`, in a local frame
/// where the normal is `+z`. Zero outside the upper hemisphere.
pub fn conductor_local(alpha: f64, wi: DVec3, wo: DVec3) -> (f64, f64) {
    let (ci, co) = (wi.z, wo.z);
    if ci <= 0.0 || co <= 0.0 {
        return (0.0, 0.0);
    }
    let h = (wi + wo).normalize();
    let ch = h.z;
    let a2 = alpha * alpha;
    let q = ch * ch * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * q * q);
    let dd_da2 = (q - 2.0 * a2 * ch * ch) / (PI * q * q * q);

    let tan2 = |c: f64| ((1.0 - c * c) / (c * c)).max(0.0);
    let (ti, to) = (tan2(ci), tan2(co));
    let (si, so) = ((1.0 + a2 * ti).sqrt(), (1.0 + a2 * to).sqrt());
    let lam = 0.5 * (si - 1.0) + 0.5 * (so - 1.0);
    let dlam_da2 = ti / (4.0 * si) + to / (4.0 * so);
    let g = 1.0 / (1.0 + lam);
    let dg_da2 = -dlam_da2 * g * g;

    let f = schlick(CONDUCTOR_F0, wi.dot(h));
    let norm = f / (4.0 * ci * co);
    let value = d * g * norm;
    let dvalue_da2 = (dd_da2 * g + d * dg_da2) * norm;
    (value, dvalue_da2 * 2.0 * alpha)
}

/// Density of sampling `wi` from the visible-normal distribution given `wo`.
pub fn vndf_pdf_local(alpha: f64, wi: DVec3, wo: DVec3) -> f64 {
    if wi.z <= 0.0 || wo.z <= 0.0 {
        return 0.0;
    }
    let h = (wi + wo).normalize();
    smith_g1(alpha, wo.z) * ggx_d(alpha, h.z) / (4.0 * wo.z)
}

/// Visible-normal sampling (Heitz 2018); returns the reflected direction.
pub fn sample_vndf_local(alpha: f64, wo: DVec3, u1: f64, u2: f64) -> DVec3 {
    let vh = DVec3::new(alpha * wo.x, alpha * wo.y, wo.z).normalize();
    let lensq = vh.x * vh.x + vh.y * vh.y;
    let t1v = if lensq > 0.0 {
        DVec3::new(-vh.y, vh.x, 0.0) / lensq.sqrt()
    } else {
        DVec3::X
    };
    let t2v = vh.cross(t1v);
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let t1 = r * phi.cos();
    let mut t2 = r * phi.sin();
    let s = 0.5 * (1.0 + vh.z);
    t2 = (1.0 - s) * (1.0 - t1 * t1).max(0.0).sqrt() + s * t2;
    let nh = t1 * t1v + t2 * t2v + (1.0 - t1 * t1 - t2 * t2).max(0.0).sqrt() * vh;
    let h = DVec3::new(alpha * nh.x, alpha * nh.y, nh.z.max(0.0)).normalize();
    2.0 * wo.dot(h) * h - wo
}

pub fn sample_cosine_local(u1: f64, u2: f64) -> DVec3 {
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    DVec3::new(r * phi.cos(), r * phi.sin(), (1.0 - u1).max(0.0).sqrt())
}

impl BlendedBsdf {
    pub fn new(w: f64, alpha: f64, albedo: AlbedoTexture) -> Self {
        BlendedBsdf {
            w: w.clamp(0.0, 1.0),
            alpha: alpha.clamp(MIN_ALPHA, 1.0),
            albedo,
        }
    }

    pub fn eval(&self, uv: DVec2, n: DVec3, wi: DVec3, wo: DVec3) -> Rgb {
        self.eval_parts(uv, n, wi, wo).value
    }

    pub fn eval_parts(&self, uv: DVec2, n: DVec3, wi: DVec3, wo: DVec3) -> EvalParts {
        let footprint = self.albedo.footprint(uv);
        let albedo: Rgb = footprint
            .iter()
            .map(|&(i, w)| w * self.albedo.data[i as usize])
            .sum();
        let (ci, co) = (wi.dot(n), wo.dot(n));
        if ci <= 0.0 || co <= 0.0 {
            return EvalParts {
                value: Rgb::ZERO,
                spec: 0.0,
                dspec_dalpha: 0.0,
                albedo,
                footprint,
            };
        }
        let (spec, dspec_dalpha) = conductor_local(self.alpha, to_local(wi, n), to_local(wo, n));
        let value = Rgb::splat(self.w * spec) + (1.0 - self.w) * albedo / PI;
        EvalParts {
            value,
            spec,
            dspec_dalpha,
            albedo,
            footprint,
        }
    }

    /// Mixture density of `wi` given `wo`.
    pub fn pdf(&self, n: DVec3, wi: DVec3, wo: DVec3) -> f64 {
        let (li, lo) = (to_local(wi, n), to_local(wo, n));
        if li.z <= 0.0 || lo.z <= 0.0 {
            return 0.0;
        }
        self.w * vndf_pdf_local(self.alpha, li, lo) + (1.0 - self.w) * li.z / PI
    }

    /// Pick the conductor lobe with probability `w`, otherwise a cosine
    /// direction. Returns `None` when the sampled direction falls below the
    /// surface (zero contribution). Always consumes three uniforms.
    pub fn sample(
        &self,
        uv: DVec2,
        n: DVec3,
        wo: DVec3,
        rng: &mut impl UniformSource,
    ) -> Result<Option<BsdfSample>> {
        let pick = rng.uniform()?;
        let u1 = rng.uniform()?;
        let u2 = rng.uniform()?;
        let lo = to_local(wo, n);
        if lo.z <= 0.0 {
            return Ok(None);
        }
        let li = if pick < self.w {
            sample_vndf_local(self.alpha, lo, u1, u2)
        } else {
            sample_cosine_local(u1, u2)
        };
        if li.z <= 0.0 {
            return Ok(None);
        }
        let wi = from_local(li, n).normalize();
        let pdf = self.pdf(n, wi, wo);
        if pdf <= 0.0 || !pdf.is_finite() {
            return Ok(None);
        }
        let eval = self.eval(uv, n, wi, wo);
        let cos = wi.dot(n).max(0.0);
        Ok(Some(BsdfSample {
            wi,
            pdf,
            throughput: eval * cos / pdf,
            eval,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_sphere(rng: &mut ChaCha8Rng) -> DVec3 {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        DVec3::new(r * phi.cos(), r * phi.sin(), z)
    }

    fn bsdf(w: f64, alpha: f64, a: f64) -> BlendedBsdf {
        BlendedBsdf::new(w, alpha, AlbedoTexture::constant(4, 4, Rgb::splat(a)))
    }

    #[test]
    fn lambertian_is_constant() {
        let b = bsdf(0.0, 0.3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = DVec3::new(0.2, 0.3, 0.9).normalize();
        for _ in 0..1000 {
            let (wi, wo) = (uniform_sphere(&mut rng), uniform_sphere(&mut rng));
            let v = b.eval(DVec2::new(0.3, 0.3), n, wi, wo);
            if wi.dot(n) > 0.0 && wo.dot(n) > 0.0 {
                assert!((v - Rgb::splat(0.5 / PI)).length() < 1e-15);
            } else {
                assert_eq!(v, Rgb::ZERO);
            }
        }
    }

    /// Standalone scalar evaluation written from the textbook formulas.
    fn reference_ggx(alpha: f64, theta_i: f64, theta_o: f64, dphi: f64) -> f64 {
        let wi = DVec3::new(theta_i.sin(), 0.0, theta_i.cos());
        let wo = DVec3::new(theta_o.sin() * dphi.cos(), theta_o.sin() * dphi.sin(), theta_o.cos());
        let h = (wi + wo) / (wi + wo).length();
        let cos_th = h.z;
        let tan2_th = (1.0 - cos_th * cos_th) / (cos_th * cos_th);
        let d = 1.0 / (PI * alpha * alpha * cos_th.powi(4) * (1.0 + tan2_th / (alpha * alpha)).powi(2));
        let lambda = |t: f64| (-1.0 + (1.0 + alpha * alpha * t.tan().powi(2)).sqrt()) / 2.0;
        let g = 1.0 / (1.0 + lambda(theta_i) + lambda(theta_o));
        let f = 1.0; // Schlick with F0 = 1
        d * g * f / (4.0 * theta_i.cos() * theta_o.cos())
    }

    #[test]
    fn conductor_matches_reference() {
        let b = bsdf(1.0, 0.2, 0.5);
        let t = 30f64.to_radians();
        let w = DVec3::new(t.sin(), 0.0, t.cos());
        let v = b.eval(DVec2::ZERO, DVec3::Z, w, w);
        let r = reference_ggx(0.2, t, t, 0.0);
        assert!((v.x - r).abs() < 1e-12 * r, "{} vs {}", v.x, r);
        // Off-specular configuration too.
        let wi = DVec3::new(0.5f64.sin(), 0.0, 0.5f64.cos());
        let wo = DVec3::new(0.9f64.sin() * 2.0f64.cos(), 0.9f64.sin() * 2.0f64.sin(), 0.9f64.cos());
        let v = b.eval(DVec2::ZERO, DVec3::Z, wi, wo);
        let r = reference_ggx(0.2, 0.5, 0.9, 2.0);
        assert!((v.x - r).abs() < 1e-12 * r);
    }

    #[test]
    fn alpha_derivative_matches_finite_difference() {
        let wi = DVec3::new(0.3, 0.1, 0.9).normalize();
        let wo = DVec3::new(-0.4, 0.2, 0.8).normalize();
        for alpha in [0.05, 0.2, 0.7] {
            let (_, d) = conductor_local(alpha, wi, wo);
            let h = 1e-6;
            let fd = (conductor_local(alpha + h, wi, wo).0 - conductor_local(alpha - h, wi, wo).0) / (2.0 * h);
            assert!((d - fd).abs() < 1e-6 * fd.abs().max(1e-3), "{d} vs {fd}");
        }
    }

    #[test]
    fn reciprocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = BlendedBsdf::new(0.4, 0.17, AlbedoTexture::from_fn(8, 8, |uv| Rgb::new(uv.x, uv.y, 0.5)));
        for _ in 0..10_000 {
            let n = uniform_sphere(&mut rng);
            let (wi, wo) = (uniform_sphere(&mut rng), uniform_sphere(&mut rng));
            let uv = DVec2::new(rng.gen(), rng.gen());
            let a = b.eval(uv, n, wi, wo);
            let c = b.eval(uv, n, wo, wi);
            assert!((a - c).abs().max_element() <= 1e-12 * a.max_element().max(1.0));
        }
    }

    #[test]
    fn sampled_pdf_positive_and_cosine_moment() {
        let b = bsdf(0.0, 0.3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = DVec3::Z;
        let wo = DVec3::new(0.3, 0.0, 0.95).normalize();
        let count = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..count {
            let s = b.sample(DVec2::ZERO, n, wo, &mut rng).unwrap().unwrap();
            assert!(s.pdf > 0.0);
            let c = s.wi.dot(n);
            sum += c;
            sum2 += c * c;
        }
        let mean = sum / count as f64;
        let var = sum2 / count as f64 - mean * mean;
        let sigma = (var / count as f64).sqrt();
        assert!((mean - 2.0 / 3.0).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn chi_square_sampling_matches_pdf() {
        // 16 equal-area bins: 4 azimuth x 4 cos-theta bands over the hemisphere.
        let b = bsdf(0.6, 0.35, 0.5);
        let n = DVec3::Z;
        let wo = DVec3::new(0.5, 0.2, 0.8).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let count = 200_000;
        let bin = |d: DVec3| -> usize {
            let phi = d.y.atan2(d.x).rem_euclid(2.0 * PI);
            let a = ((phi / (2.0 * PI)) * 4.0) as usize;
            let c = ((1.0 - d.z) * 4.0) as usize;
            a.min(3) * 4 + c.min(3)
        };
        let mut observed = [0f64; 16];
        let mut below = 0usize;
        for _ in 0..count {
            match b.sample(DVec2::ZERO, n, wo, &mut rng).unwrap() {
                Some(s) => observed[bin(s.wi)] += 1.0,
                None => below += 1,
            }
        }
        // Expected mass per bin by midpoint quadrature on a fine grid.
        let mut expected = [0f64; 16];
        let (na, nc) = (400, 400);
        for i in 0..na {
            for j in 0..nc {
                let phi = 2.0 * PI * (i as f64 + 0.5) / na as f64;
                let z = 1.0 - (j as f64 + 0.5) / nc as f64;
                let r = (1.0 - z * z).sqrt();
                let d = DVec3::new(r * phi.cos(), r * phi.sin(), z);
                let da = 2.0 * PI / na as f64 / nc as f64;
                expected[bin(d)] += b.pdf(n, d, wo) * da;
            }
        }
        let total: f64 = expected.iter().sum();
        let kept = (count - below) as f64;
        let mut chi2 = 0.0;
        for k in 0..16 {
            let e = expected[k] / total * kept;
            chi2 += (observed[k] - e).powi(2) / e;
        }
        // 15 dof, 0.1% significance.
        assert!(chi2 < 37.697, "chi2 {chi2}");
    }

    #[test]
    fn white_furnace_per_lobe() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (w, alpha) in [(1.0, 0.05), (1.0, 0.3), (1.0, 1.0), (0.0, 0.3)] {
            let b = bsdf(w, alpha, 1.0);
            for theta in [0.1f64, 0.8, 1.4] {
                let wo = DVec3::new(theta.sin(), 0.0, theta.cos());
                let count = 100_000;
                let (mut s, mut s2) = (0.0, 0.0);
                for _ in 0..count {
                    let v = match b.sample(DVec2::ZERO, DVec3::Z, wo, &mut rng).unwrap() {
                        Some(x) => x.throughput.x,
                        None => 0.0,
                    };
                    s += v;
                    s2 += v * v;
                }
                let mean = s / count as f64;
                let sigma = ((s2 / count as f64 - mean * mean) / count as f64).sqrt();
                assert!(mean <= 1.0 + 3.0 * sigma, "w {w} alpha {alpha} theta {theta}: {mean}");
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]

        #[test]
        fn eval_is_finite_reciprocal_and_one_sided(
            w in 0.0f64..=1.0, alpha in 0.01f64..=1.0, a in 0.0f64..=1.0, seed in 0u64..u64::MAX,
        ) {
            let b = bsdf(w, alpha, a);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = uniform_sphere(&mut rng);
            let uv = DVec2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            for _ in 0..16 {
                let (wi, wo) = (uniform_sphere(&mut rng), uniform_sphere(&mut rng));
                let f = b.eval(uv, n, wi, wo);
                proptest::prop_assert!(f.is_finite() && f.min_element() >= 0.0);
                let g = b.eval(uv, n, wo, wi);
                proptest::prop_assert!((f - g).length() <= 1e-9 * (1.0 + f.length()));
                if wi.dot(n) <= 0.0 || wo.dot(n) <= 0.0 {
                    proptest::prop_assert_eq!(f, Rgb::ZERO);
                }
            }
        }
    }
}
