//! Analytic ray-cast renderer for equirectangular colour, depth and
//! world-space normal panoramas.

mod generate;
mod geometry;
mod light;

pub use generate::{build_scene, frame_scene, generate_dataset, DatasetVariant, GenConfig, STEREO_BASELINE};
pub use geometry::{intersect, nearest, Hit, Material, Primitive, Shape, Vec3, HIT_EPS};
pub use light::{
    in_shadow, shade, shadow_caster, sky_color, sun_state, surface_color, Lighting, MAX_SUN_ELEVATION_DEG,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equirect::pixel_angles;
use crate::error::{Error, Result};

pub const DEFAULT_D_MAX: f64 = 150.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub lighting: Lighting,
    pub dynamic_lighting: bool,
    pub actors: bool,
    pub d_max: f64,
}

impl Scene {
    pub fn empty(lighting: Lighting) -> Self {
        Scene {
            primitives: Vec::new(),
            lighting,
            dynamic_lighting: false,
            actors: false,
            d_max: DEFAULT_D_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0) || !self.d_max.is_finite() {
            return Err(Error::invalid(format!("d_max must be positive, got {}", self.d_max)));
        }
        if let Some(i) = self.primitives.iter().position(|p| !p.validate()) {
            return Err(Error::invalid(format!("primitive {i} is degenerate")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub path: usize,
    pub frame: usize,
    pub position: [f64; 3],
    /// Camera yaw in radians.
    pub yaw: f64,
    pub t: f64,
    pub cloudiness: f64,
    pub variant: DatasetVariant,
}

/// One equirectangular frame. Buffers are planar: colour and normal are
/// `[3][H][W]`, depth is `[H][W]` in scene units.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoSample {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub meta: SampleMeta,
}

impl PanoSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Pixels carrying a surface normal.
    pub fn normal_valid(&self) -> Vec<bool> {
        let hw = self.pixels();
        (0..hw)
            .map(|i| self.normal[i] != 0.0 || self.normal[hw + i] != 0.0 || self.normal[2 * hw + i] != 0.0)
            .collect()
    }

    pub fn normal_at(&self, i: usize) -> Vec3 {
        let hw = self.pixels();
        Vec3::new(self.normal[i], self.normal[hw + i], self.normal[2 * hw + i])
    }
}

/// What the primary ray of a pixel saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelSource {
    Sky,
    Primitive { index: usize, shadow_from: Option<usize> },
}

struct Pixel {
    color: [f64; 3],
    depth: f64,
    normal: Vec3,
    source: PixelSource,
}

fn render_pixel(scene: &Scene, camera: &Vec3, dir: &Vec3) -> Pixel {
    let l = &scene.lighting;
    match nearest(camera, dir, &scene.primitives) {
        Some((index, hit)) if hit.distance <= scene.d_max => {
            let point = camera + dir * hit.distance;
            let caster = shadow_caster(&point, &hit.normal, l, &scene.primitives);
            let material = &scene.primitives[index].material;
            Pixel {
                color: surface_color(&point, dir, &hit.normal, material, l, caster.is_some()),
                depth: hit.distance,
                normal: hit.normal,
                source: PixelSource::Primitive {
                    index,
                    shadow_from: caster,
                },
            }
        }
        _ => Pixel {
            color: sky_color(dir, l),
            depth: scene.d_max,
            normal: Vec3::zeros(),
            source: PixelSource::Sky,
        },
    }
}

/// Renders one panorama and reports, per pixel, which primitive was seen.
pub fn render_traced(
    scene: &Scene,
    camera: &Vec3,
    width: usize,
    height: usize,
    meta: SampleMeta,
) -> Result<(PanoSample, Vec<PixelSource>)> {
    scene.validate()?;
    if height == 0 || width != 2 * height {
        return Err(Error::invalid(format!("panorama must be 2:1, got {width}x{height}")));
    }
    let rows: Vec<Vec<Pixel>> = (0..height)
        .into_par_iter()
        .map(|v| {
            (0..width)
                .map(|u| {
                    let (theta, phi) = pixel_angles(u, v, width, height);
                    let dir = crate::equirect::angles_to_direction(theta, phi);
                    render_pixel(scene, camera, &dir)
                })
                .collect()
        })
        .collect();
    let hw = width * height;
    let mut s = PanoSample {
        width,
        height,
        color: vec![0.0; 3 * hw],
        depth: vec![0.0; hw],
        normal: vec![0.0; 3 * hw],
        meta,
    };
    let mut trace = Vec::with_capacity(hw);
    for (i, px) in rows.into_iter().flatten().enumerate() {
        for c in 0..3 {
            s.color[c * hw + i] = px.color[c];
            s.normal[c * hw + i] = px.normal[c];
        }
        s.depth[i] = px.depth;
        trace.push(px.source);
    }
    Ok((s, trace))
}

pub fn render(scene: &Scene, camera: &Vec3, width: usize, height: usize, meta: SampleMeta) -> Result<PanoSample> {
    Ok(render_traced(scene, camera, width, height, meta)?.0)
}

/// Reference eye at `camera` and a second eye raised by [`STEREO_BASELINE`].
pub fn render_stereo(
    scene: &Scene,
    camera: &Vec3,
    width: usize,
    height: usize,
    meta: SampleMeta,
) -> Result<(PanoSample, PanoSample)> {
    let top = render(scene, camera, width, height, meta.clone())?;
    let second = camera + Vec3::new(0.0, STEREO_BASELINE, 0.0);
    let mut meta2 = meta;
    meta2.position = [second.x, second.y, second.z];
    let bottom = render(scene, &second, width, height, meta2)?;
    Ok((top, bottom))
}
