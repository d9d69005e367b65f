//! Real spherical harmonics up to band 3.
//!
//! Orthonormal on the unit sphere, without the Condon-Shortley phase, in the
//! order `l = 0..=3`, `m = -l..=l`.

use crate::math::DVec3;
use crate::{Error, Result};

pub const SH_DIM: usize = 16;

/// Basis values for `dir`, which is normalized first.
pub fn sh_encode(dir: DVec3) -> Result<[f64; SH_DIM]> {
    let len = dir.length();
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::ShapeMismatch("zero-length SH direction".into()));
    }
    Ok(sh_unit(dir / len))
}

/// Basis values for a unit vector.
pub fn sh_unit(d: DVec3) -> [f64; SH_DIM] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (x2, y2, z2) = (x * x, y * y, z * z);
    [
        0.282_094_791_773_878_14,
        0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (3.0 * z2 - 1.0),
        1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x2 - y2),
        0.590_043_589_926_643_5 * y * (3.0 * x2 - y2),
        2.890_611_442_640_554 * x * y * z,
        0.457_045_799_464_465_8 * y * (5.0 * z2 - 1.0),
        0.373_176_332_590_115_4 * z * (5.0 * z2 - 3.0),
        0.457_045_799_464_465_8 * x * (5.0 * z2 - 1.0),
        1.445_305_721_320_277 * z * (x2 - y2),
        0.590_043_589_926_643_5 * x * (x2 - 3.0 * y2),
    ]
}
