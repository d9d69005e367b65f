//! Small numeric helpers shared by the renderers and optimizers.

pub use glam::{DMat4, DVec2, DVec3};

/// Linear RGB radiance or reflectance. Stored as a `DVec3` so component-wise
/// products read naturally.
pub type Rgb = DVec3;

pub const LUMINANCE: Rgb = DVec3::new(0.2126, 0.7152, 0.0722);

pub fn luminance(c: Rgb) -> f64 {
    c.dot(LUMINANCE)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Right-handed orthonormal frame `(t, b, n)` around a unit normal.
pub fn frame(n: DVec3) -> (DVec3, DVec3) {
    // Duff et al., "Building an orthonormal basis, revisited".
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = DVec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = DVec3::new(b, sign + n.y * n.y * a, -n.y);
    (t, bt)
}

pub fn to_local(v: DVec3, n: DVec3) -> DVec3 {
    let (t, b) = frame(n);
    DVec3::new(v.dot(t), v.dot(b), v.dot(n))
}

pub fn from_local(v: DVec3, n: DVec3) -> DVec3 {
    let (t, b) = frame(n);
    t * v.x + b * v.y + n * v.z
}

pub fn reflect(v: DVec3, n: DVec3) -> DVec3 {
    2.0 * v.dot(n) * n - v
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
