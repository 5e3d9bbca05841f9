use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Material, Primitive, Shape, Vec3};
use super::light::sun_state;
use super::{render, render_stereo, SampleMeta, Scene, DEFAULT_D_MAX};
use crate::dataio::{record_for, write_sample, DatasetManifest, ManifestHeader, Split, FORMAT_VERSION};
use crate::error::{Error, Result};

/// Vertical offset of the second stereo eye.
pub const STEREO_BASELINE: f64 = 0.065;
pub const CAMERA_HEIGHT: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    Static,
    StaticVp,
    StaticVpDl,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 3] = [
        DatasetVariant::Static,
        DatasetVariant::StaticVp,
        DatasetVariant::StaticVpDl,
    ];

    pub fn actors(self) -> bool {
        self != DatasetVariant::Static
    }

    pub fn dynamic_lighting(self) -> bool {
        self == DatasetVariant::StaticVpDl
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetVariant::Static => "static",
            DatasetVariant::StaticVp => "static_vp",
            DatasetVariant::StaticVpDl => "static_vp_dl",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DatasetVariant::Static => "Static",
            DatasetVariant::StaticVp => "Static + VP",
            DatasetVariant::StaticVpDl => "Static + VP + DL",
        }
    }
}

impl std::str::FromStr for DatasetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Camera paths split into train and validation frames.
    pub paths: usize,
    /// Additional paths reserved whole for the test split.
    pub test_paths: usize,
    pub frames_per_path: usize,
    pub width: usize,
    pub height: usize,
    pub variant: DatasetVariant,
    pub seed: u64,
    pub d_max: f64,
    pub stereo: bool,
    pub val_fraction: f64,
    /// Distance travelled along +z by the camera over one path.
    pub path_length: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            paths: 2,
            test_paths: 1,
            frames_per_path: 10,
            width: 128,
            height: 64,
            variant: DatasetVariant::StaticVpDl,
            seed: 0,
            d_max: DEFAULT_D_MAX,
            stereo: false,
            val_fraction: 0.15,
            path_length: 20.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_path == 0 || self.paths == 0 {
            return Err(Error::invalid("need at least one path and one frame per path"));
        }
        if self.height == 0 || self.width != 2 * self.height {
            return Err(Error::invalid(format!(
                "resolution must be 2:1, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.d_max > 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("d_max must be positive and val_fraction in [0, 1)"));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn cuboid(min: Vec3, max: Vec3, albedo: [f64; 3]) -> Primitive {
    Primitive::new(Shape::Cuboid { min, max }, Material::solid(albedo))
}

fn static_primitives(rng: &mut ChaCha8Rng, length: f64) -> Vec<Primitive> {
    let ground_y = -CAMERA_HEIGHT;
    let mut prims = vec![Primitive::new(
        Shape::Plane {
            point: Vec3::new(0.0, ground_y, 0.0),
            normal: Vec3::new(0.0, 1.0, 0.0),
        },
        Material {
            albedo: [0.45, 0.43, 0.38],
            checker: Some(([0.28, 0.28, 0.26], 2.0)),
            reflective: false,
        },
    )];
    let span = length / 2.0 + 10.0;
    for _ in 0..rng.gen_range(8..=12) {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (cx, cz) = (side * rng.gen_range(7.0..13.0), rng.gen_range(-span..span));
        let (hx, hz) = (rng.gen_range(1.5..3.0), rng.gen_range(1.5..4.0));
        let top = ground_y + rng.gen_range(3.0..14.0);
        let tint = rng.gen_range(0.4..0.8);
        let albedo = [tint, tint * rng.gen_range(0.8..1.0), tint * rng.gen_range(0.7..1.0)];
        prims.push(cuboid(
            Vec3::new(cx - hx, ground_y, cz - hz),
            Vec3::new(cx + hx, top, cz + hz),
            albedo,
        ));
    }
    for _ in 0..rng.gen_range(4..=8) {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let center = Vec3::new(
            side * rng.gen_range(4.2..5.5),
            ground_y + rng.gen_range(1.8..2.6),
            rng.gen_range(-span..span),
        );
        let g = rng.gen_range(0.35..0.6);
        prims.push(Primitive::new(
            Shape::Sphere {
                center,
                radius: rng.gen_range(0.7..1.3),
            },
            Material::solid([0.2 * g, g, 0.25 * g]),
        ));
    }
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let z0 = rng.gen_range(-span..span - 6.0);
    let (x0, x1) = if side > 0.0 { (3.2, 6.5) } else { (-6.5, -3.2) };
    prims.push(Primitive {
        material: Material {
            albedo: [0.1, 0.25, 0.35],
            checker: None,
            reflective: true,
        },
        ..cuboid(
            Vec3::new(x0, ground_y, z0),
            Vec3::new(x1, ground_y + 0.02, z0 + 6.0),
            [0.0; 3],
        )
    });
    for _ in 0..2 {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = rng.gen_range(90.0..130.0);
        prims.push(Primitive::new(
            Shape::Sphere {
                center: Vec3::new(dist * angle.sin(), -30.0, dist * angle.cos()),
                radius: rng.gen_range(35.0..45.0),
            },
            Material::solid([0.35, 0.45, 0.3]),
        ));
    }
    prims
}

fn actor_primitives(rng: &mut ChaCha8Rng, length: f64) -> Vec<Primitive> {
    let ground_y = -CAMERA_HEIGHT;
    let span = length / 2.0 + 5.0;
    let mut prims = Vec::new();
    for _ in 0..rng.gen_range(2..=4) {
        let lane = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (cx, cz) = (lane * 2.2, rng.gen_range(-span..span));
        let albedo = [
            rng.gen_range(0.2..0.95),
            rng.gen_range(0.1..0.6),
            rng.gen_range(0.1..0.9),
        ];
        let mut car = cuboid(
            Vec3::new(cx - 0.9, ground_y, cz - 2.0),
            Vec3::new(cx + 0.9, ground_y + 1.4, cz + 2.0),
            albedo,
        );
        car.actor = true;
        car.velocity = Some(Vec3::new(0.0, 0.0, lane * rng.gen_range(0.3..0.8)));
        prims.push(car);
    }
    for _ in 0..rng.gen_range(3..=6) {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (cx, cz) = (side * rng.gen_range(3.0..3.8), rng.gen_range(-span..span));
        let albedo = [
            rng.gen_range(0.3..0.8),
            rng.gen_range(0.2..0.6),
            rng.gen_range(0.2..0.5),
        ];
        let mut person = cuboid(
            Vec3::new(cx - 0.25, ground_y, cz - 0.25),
            Vec3::new(cx + 0.25, ground_y + 1.75, cz + 0.25),
            albedo,
        );
        person.actor = true;
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        person.velocity = Some(Vec3::new(0.0, 0.0, dir * rng.gen_range(0.05..0.15)));
        prims.push(person);
    }
    prims
}

/// The frame-independent scene of one camera path. The static scenery and
/// the actors come from separate random streams, so every variant of a seed
/// shares the same scenery.
pub fn build_scene(cfg: &GenConfig, path: usize) -> Result<Scene> {
    let mut world = rng_for(cfg.seed, 2 * path as u64);
    let mut prims = static_primitives(&mut world, cfg.path_length);
    let cloudiness = world.gen_range(0.0..0.6);
    if cfg.variant.actors() {
        let mut actors = rng_for(cfg.seed, 2 * path as u64 + 1);
        prims.extend(actor_primitives(&mut actors, cfg.path_length));
    }
    Ok(Scene {
        primitives: prims,
        lighting: sun_state(0.5, cloudiness)?,
        dynamic_lighting: cfg.variant.dynamic_lighting(),
        actors: cfg.variant.actors(),
        d_max: cfg.d_max,
    })
}

fn frame_fraction(cfg: &GenConfig, frame: usize) -> f64 {
    if cfg.frames_per_path > 1 {
        frame as f64 / (cfg.frames_per_path - 1) as f64
    } else {
        0.5
    }
}

/// Scene state and camera position at one frame of a path.
pub fn frame_scene(base: &Scene, cfg: &GenConfig, frame: usize) -> Result<(Scene, Vec3)> {
    let s = frame_fraction(cfg, frame);
    let camera = Vec3::new(0.0, 0.0, cfg.path_length * (s - 0.5));
    let mut scene = base.clone();
    scene.primitives = base.primitives.iter().map(|p| p.at_frame(frame)).collect();
    if base.dynamic_lighting {
        scene.lighting = sun_state(0.15 + 0.7 * s, base.lighting.cloudiness)?;
    }
    Ok((scene, camera))
}

fn assign_splits(cfg: &GenConfig) -> Vec<Vec<Split>> {
    let total = cfg.paths * cfg.frames_per_path;
    let n_val = (total as f64 * cfg.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng_for(cfg.seed, u64::MAX));
    let mut splits = vec![vec![Split::Train; cfg.frames_per_path]; cfg.paths];
    for &k in &order[..n_val] {
        splits[k / cfg.frames_per_path][k % cfg.frames_per_path] = Split::Val;
    }
    splits.extend((0..cfg.test_paths).map(|_| vec![Split::Test; cfg.frames_per_path]));
    splits
}

/// Renders every frame of every path and writes the dataset under `root`.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let splits = assign_splits(cfg);
    let mut records = Vec::new();
    for (path, path_splits) in splits.iter().enumerate() {
        let base = build_scene(cfg, path)?;
        for (frame, &split) in path_splits.iter().enumerate() {
            let (scene, camera) = frame_scene(&base, cfg, frame)?;
            let meta = SampleMeta {
                id: format!("p{path:02}_f{frame:04}"),
                path,
                frame,
                position: [camera.x, camera.y, camera.z],
                yaw: 0.0,
                t: scene.lighting.t,
                cloudiness: scene.lighting.cloudiness,
                variant: cfg.variant,
            };
            let record = record_for(&meta, split);
            if cfg.stereo {
                let (top, bottom) = render_stereo(&scene, &camera, cfg.width, cfg.height, meta)?;
                write_sample(root, &record, &top, Some(&bottom))?;
            } else {
                let top = render(&scene, &camera, cfg.width, cfg.height, meta)?;
                write_sample(root, &record, &top, None)?;
            }
            records.push(record);
        }
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            format_version: FORMAT_VERSION,
            width: cfg.width,
            height: cfg.height,
            d_max: cfg.d_max,
            seed: cfg.seed,
            stereo: cfg.stereo,
            variant: cfg.variant,
            generator: serde_json::to_value(cfg)?,
        },
        records,
    };
    manifest.write(root)?;
    Ok(manifest)
}
