use serde::{Deserialize, Serialize};

use super::geometry::{intersect, Material, Primitive, Vec3};
use crate::error::{Error, Result};

pub const MAX_SUN_ELEVATION_DEG: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    /// Unit vector toward the sun.
    pub sun_dir: Vec3,
    pub sun_intensity: f64,
    pub ambient: f64,
    pub t: f64,
    pub cloudiness: f64,
}

impl Lighting {
    pub fn elevation(&self) -> f64 {
        self.sun_dir.y.clamp(-1.0, 1.0).asin()
    }

    pub fn azimuth(&self) -> f64 {
        self.sun_dir.x.atan2(self.sun_dir.z)
    }
}

/// Sun arc over a day: `t = 0` dawn, `t = 0.5` noon, `t = 1` dusk.
pub fn sun_state(t: f64, cloudiness: f64) -> Result<Lighting> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time of day {t} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&cloudiness) {
        return Err(Error::invalid(format!("cloudiness {cloudiness} outside [0, 1]")));
    }
    let elevation = (std::f64::consts::PI * t).sin() * MAX_SUN_ELEVATION_DEG.to_radians();
    let azimuth = (-90.0 + 180.0 * t).to_radians();
    let sun_intensity = elevation.sin().max(0.0);
    let ambient = 0.15 + 0.25 * sun_intensity * (1.0 - 0.5 * cloudiness);
    let (se, ce) = elevation.sin_cos();
    Ok(Lighting {
        sun_dir: Vec3::new(ce * azimuth.sin(), se, ce * azimuth.cos()),
        sun_intensity,
        ambient,
        t,
        cloudiness,
    })
}

/// True when a ray from `point` toward the sun hits any primitive.
pub fn in_shadow(point: &Vec3, normal: &Vec3, lighting: &Lighting, prims: &[Primitive]) -> bool {
    shadow_caster(point, normal, lighting, prims).is_some()
}

/// Index of the first primitive blocking the sun, if any.
pub fn shadow_caster(point: &Vec3, normal: &Vec3, lighting: &Lighting, prims: &[Primitive]) -> Option<usize> {
    if lighting.sun_intensity <= 0.0 || normal.dot(&lighting.sun_dir) <= 0.0 {
        return None;
    }
    let origin = point + normal * 1e-6;
    prims
        .iter()
        .position(|p| intersect(&origin, &lighting.sun_dir, p).is_some())
}

/// Lambertian shading of an albedo under ambient plus a directional sun.
pub fn shade(normal: &Vec3, lighting: &Lighting, albedo: [f64; 3], occluded: bool) -> [f64; 3] {
    let direct = if occluded {
        0.0
    } else {
        lighting.sun_intensity * normal.dot(&lighting.sun_dir).max(0.0)
    };
    let k = lighting.ambient + direct;
    albedo.map(|a| (a * k).clamp(0.0, 1.0))
}

/// Sky radiance along a unit direction: vertical gradient, a Gaussian sun
/// disc and cloud desaturation.
pub fn sky_color(dir: &Vec3, lighting: &Lighting) -> [f64; 3] {
    const HORIZON: [f64; 3] = [0.86, 0.9, 0.95];
    const ZENITH: [f64; 3] = [0.3, 0.5, 0.88];
    let up = dir.y.max(0.0);
    let day = 0.35 + 0.65 * lighting.sun_intensity;
    let mut c: [f64; 3] = std::array::from_fn(|i| (HORIZON[i] + (ZENITH[i] - HORIZON[i]) * up) * day);
    let cos = dir.dot(&lighting.sun_dir).clamp(-1.0, 1.0);
    let disc = (-(cos.acos() / 0.06).powi(2)).exp() * lighting.sun_intensity;
    for v in c.iter_mut() {
        *v += disc;
    }
    let grey = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    let mix = 0.6 * lighting.cloudiness;
    c.map(|v| (v + (grey - v) * mix).clamp(0.0, 1.0))
}

/// Surface colour; reflective materials blend in the mirrored sky.
pub fn surface_color(
    point: &Vec3,
    dir: &Vec3,
    normal: &Vec3,
    material: &Material,
    lighting: &Lighting,
    occluded: bool,
) -> [f64; 3] {
    let base = shade(normal, lighting, material.albedo_at(point), occluded);
    if !material.reflective {
        return base;
    }
    let r = dir - normal * (2.0 * dir.dot(normal));
    let sky = sky_color(&r, lighting);
    std::array::from_fn(|i| (0.6 * base[i] + 0.4 * sky[i]).clamp(0.0, 1.0))
}
