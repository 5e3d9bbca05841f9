//! Equirectangular geometry and sample augmentations.
//!
//! World frame: `+y` up, `+z` forward, `+x` right. Column `u` of a `W`-wide
//! panorama maps to longitude `θ = 2π(u + 0.5)/W − π` and row `v` of an
//! `H`-tall one to latitude `φ = π/2 − π(v + 0.5)/H`.

mod augment;

pub use augment::{
    apply_jitter, channel_shuffle, color_jitter, invert_permutation, sample_jitter, AugmentationConfig, Augmenter,
    JitterParams, JitterRanges,
};

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::panosim::PanoSample;

pub type Direction = Vector3<f64>;

/// Longitude and latitude of a pixel centre.
pub fn pixel_angles(u: usize, v: usize, width: usize, height: usize) -> (f64, f64) {
    let theta = 2.0 * PI * (u as f64 + 0.5) / width as f64 - PI;
    let phi = FRAC_PI_2 - PI * (v as f64 + 0.5) / height as f64;
    (theta, phi)
}

pub fn angles_to_direction(theta: f64, phi: f64) -> Direction {
    Vector3::new(phi.cos() * theta.sin(), phi.sin(), phi.cos() * theta.cos())
}

pub fn pixel_to_direction(u: usize, v: usize, width: usize, height: usize) -> Result<Direction> {
    if width != 2 * height || height == 0 {
        return Err(Error::invalid(format!("panorama must be 2:1, got {width}x{height}")));
    }
    if u >= width || v >= height {
        return Err(Error::invalid(format!("pixel ({u}, {v}) outside {width}x{height}")));
    }
    let (theta, phi) = pixel_angles(u, v, width, height);
    Ok(angles_to_direction(theta, phi))
}

/// Pixel containing direction `d` (normalised internally).
pub fn direction_to_pixel(d: &Direction, width: usize, height: usize) -> Result<(usize, usize)> {
    let n = d.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("direction must be finite and non-zero"));
    }
    let d = d / n;
    let theta = d.x.atan2(d.z);
    let phi = d.y.clamp(-1.0, 1.0).asin();
    let u = ((theta + PI) / (2.0 * PI) * width as f64).floor() as isize;
    let v = ((FRAC_PI_2 - phi) / PI * height as f64).floor() as isize;
    Ok((
        u.rem_euclid(width as isize) as usize,
        v.clamp(0, height as isize - 1) as usize,
    ))
}

/// Rotation about `+y` by `angle` radians (positive turns `+z` toward `+x`).
pub fn yaw_matrix(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Circular right shift of every row of a planar `[C][H][W]` buffer.
pub fn roll_columns(data: &[f64], width: usize, k: usize) -> Vec<f64> {
    let k = k % width;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        dst[k..].copy_from_slice(&src[..width - k]);
        dst[..k].copy_from_slice(&src[width - k..]);
    }
    out
}

/// Camera yaw by `k` columns: every map shifts right by `k` (mod W); world
/// normal vectors keep their values.
pub fn yaw_rotate_sample(sample: &PanoSample, k: usize) -> PanoSample {
    let w = sample.width;
    let mut out = sample.clone();
    out.color = roll_columns(&sample.color, w, k);
    out.depth = roll_columns(&sample.depth, w, k);
    out.normal = roll_columns(&sample.normal, w, k);
    out.meta.yaw = sample.meta.yaw - 2.0 * PI * (k % w) as f64 / w as f64;
    out
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= 1e-6) {
        return Err(Error::invalid(format!(
            "camera rotation is not orthonormal (|RᵀR − I| = {err:e})"
        )));
    }
    Ok(())
}

/// `n_view = Rᵀ n_world` per pixel of a planar `[3][H][W]` map; zero vectors
/// stay zero.
pub fn world_to_view_normals(normal: &[f64], rotation: &Matrix3<f64>) -> Result<Vec<f64>> {
    check_rotation(rotation)?;
    if normal.len() % 3 != 0 {
        return Err(Error::invalid("normal map length must be a multiple of 3"));
    }
    let hw = normal.len() / 3;
    let rt = rotation.transpose();
    let mut out = vec![0.0; normal.len()];
    for i in 0..hw {
        let n = Vector3::new(normal[i], normal[hw + i], normal[2 * hw + i]);
        if n == Vector3::zeros() {
            continue;
        }
        let v = rt * n;
        out[i] = v.x;
        out[hw + i] = v.y;
        out[2 * hw + i] = v.z;
    }
    Ok(out)
}
