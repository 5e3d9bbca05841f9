use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Minimum accepted hit distance.
pub const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Plane {
        point: Vec3,
        normal: Vec3,
    },
    /// Axis-aligned box.
    Cuboid {
        min: Vec3,
        max: Vec3,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    /// Second albedo of a checker pattern with the given cell size.
    #[serde(default)]
    pub checker: Option<([f64; 3], f64)>,
    #[serde(default)]
    pub reflective: bool,
}

impl Material {
    pub fn solid(albedo: [f64; 3]) -> Self {
        Material {
            albedo,
            checker: None,
            reflective: false,
        }
    }

    pub fn albedo_at(&self, p: &Vec3) -> [f64; 3] {
        match self.checker {
            Some((other, cell)) => {
                let parity = (p.x / cell).floor() as i64 + (p.z / cell).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    self.albedo
                } else {
                    other
                }
            }
            None => self.albedo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
    /// Vehicle or pedestrian proxy.
    #[serde(default)]
    pub actor: bool,
    /// Displacement per frame index.
    #[serde(default)]
    pub velocity: Option<Vec3>,
}

impl Primitive {
    pub fn new(shape: Shape, material: Material) -> Self {
        Primitive {
            shape,
            material,
            actor: false,
            velocity: None,
        }
    }

    pub fn validate(&self) -> bool {
        match self.shape {
            Shape::Sphere { radius, .. } => radius > 0.0 && radius.is_finite(),
            Shape::Plane { normal, .. } => (normal.norm() - 1.0).abs() < 1e-9,
            Shape::Cuboid { min, max } => (0..3).all(|i| min[i] < max[i]),
        }
    }

    /// The primitive moved along its path to `frame`.
    pub fn at_frame(&self, frame: usize) -> Primitive {
        let Some(v) = self.velocity else { return *self };
        let d = v * frame as f64;
        let shape = match self.shape {
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: center + d,
                radius,
            },
            Shape::Plane { point, normal } => Shape::Plane {
                point: point + d,
                normal,
            },
            Shape::Cuboid { min, max } => Shape::Cuboid {
                min: min + d,
                max: max + d,
            },
        };
        Primitive { shape, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    /// Unit surface normal facing the ray origin.
    pub normal: Vec3,
}

fn facing(n: Vec3, dir: &Vec3) -> Vec3 {
    if n.dot(dir) > 0.0 {
        -n
    } else {
        n
    }
}

/// Nearest intersection at positive distance along a unit direction.
pub fn intersect(origin: &Vec3, dir: &Vec3, prim: &Primitive) -> Option<Hit> {
    match prim.shape {
        Shape::Sphere { center, radius } => {
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > HIT_EPS { -b - s } else { -b + s };
            (t > HIT_EPS).then(|| {
                let n = (origin + dir * t - center) / radius;
                Hit {
                    distance: t,
                    normal: facing(n, dir),
                }
            })
        }
        Shape::Plane { point, normal } => {
            let denom = dir.dot(&normal);
            if denom == 0.0 {
                return None;
            }
            let t = (point - origin).dot(&normal) / denom;
            (t > HIT_EPS).then(|| Hit {
                distance: t,
                normal: facing(normal, dir),
            })
        }
        Shape::Cuboid { min, max } => {
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut axis_near, mut axis_far) = (0, 0);
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a] < min[a] || origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let t0 = (min[a] - origin[a]) / dir[a];
                let t1 = (max[a] - origin[a]) / dir[a];
                let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                if lo > t_near {
                    t_near = lo;
                    axis_near = a;
                }
                if hi < t_far {
                    t_far = hi;
                    axis_far = a;
                }
            }
            if t_near > t_far {
                return None;
            }
            let (t, axis) = if t_near > HIT_EPS {
                (t_near, axis_near)
            } else if t_far > HIT_EPS {
                (t_far, axis_far)
            } else {
                return None;
            };
            let mut n = Vec3::zeros();
            n[axis] = 1.0;
            Some(Hit {
                distance: t,
                normal: facing(n, dir),
            })
        }
    }
}

/// Nearest hit over a primitive list with the index of the primitive hit.
pub fn nearest(origin: &Vec3, dir: &Vec3, prims: &[Primitive]) -> Option<(usize, Hit)> {
    let mut best: Option<(usize, Hit)> = None;
    for (i, p) in prims.iter().enumerate() {
        if let Some(h) = intersect(origin, dir, p) {
            if best.map_or(true, |(_, b)| h.distance < b.distance) {
                best = Some((i, h));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn grey() -> Material {
        Material::solid([0.5; 3])
    }

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn inside_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Primitive::new(
            Shape::Sphere {
                center: Vec3::zeros(),
                radius: 5.0,
            },
            grey(),
        );
        for _ in 0..100 {
            let d = random_unit(&mut rng);
            let h = intersect(&Vec3::zeros(), &d, &s).unwrap();
            assert!((h.distance - 5.0).abs() < 1e-12);
            assert!((h.normal + d).norm() < 1e-12);
        }
    }

    #[test]
    fn ground_plane_straight_down() {
        let p = Primitive::new(
            Shape::Plane {
                point: Vec3::new(0.0, -1.6, 0.0),
                normal: Vec3::new(0.0, 1.0, 0.0),
            },
            grey(),
        );
        let h = intersect(&Vec3::zeros(), &Vec3::new(0.0, -1.0, 0.0), &p).unwrap();
        assert!((h.distance - 1.6).abs() < 1e-12);
        assert_eq!(h.normal, Vec3::new(0.0, 1.0, 0.0));
        assert!(intersect(&Vec3::zeros(), &Vec3::new(0.0, 1.0, 0.0), &p).is_none());
    }

    fn inside(p: &Vec3, min: &Vec3, max: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a])
    }

    #[test]
    fn cuboid_matches_marching() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hits = 0;
        for _ in 0..300 {
            let min = Vec3::new(
                rng.gen_range(-2.0..0.0),
                rng.gen_range(-2.0..0.0),
                rng.gen_range(-2.0..0.0),
            );
            let max = min
                + Vec3::new(
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                );
            let origin = Vec3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let dir = if rng.gen_bool(0.7) {
                let target = Vec3::new(
                    rng.gen_range(min.x..max.x),
                    rng.gen_range(min.y..max.y),
                    rng.gen_range(min.z..max.z),
                );
                (target - origin).normalize()
            } else {
                random_unit(&mut rng)
            };
            let prim = Primitive::new(Shape::Cuboid { min, max }, grey());
            let got = intersect(&origin, &dir, &prim);
            // March coarsely to bracket the first entry, then bisect.
            let step = 1e-3;
            let start_inside = inside(&origin, &min, &max);
            let mut t = 0.0;
            let mut found = None;
            while t < 20.0 {
                let next = t + step;
                if inside(&(origin + dir * next), &min, &max) != start_inside {
                    let (mut lo, mut hi) = (t, next);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if inside(&(origin + dir * mid), &min, &max) != start_inside {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    found = Some(0.5 * (lo + hi));
                    break;
                }
                t = next;
            }
            match (got, found) {
                (Some(h), Some(f)) => {
                    hits += 1;
                    assert!((h.distance - f).abs() < 1e-6, "{} vs {f}", h.distance);
                    assert!((h.normal.norm() - 1.0).abs() < 1e-12);
                    assert!(h.normal.dot(&dir) <= 0.0);
                }
                (None, None) => {}
                (g, f) => panic!("slab {g:?} vs march {f:?}"),
            }
        }
        assert!(hits > 150);
    }

    #[test]
    fn motion_translates() {
        let mut p = Primitive::new(
            Shape::Cuboid {
                min: Vec3::zeros(),
                max: Vec3::new(1.0, 1.0, 1.0),
            },
            grey(),
        );
        p.velocity = Some(Vec3::new(0.0, 0.0, 0.5));
        match p.at_frame(4).shape {
            Shape::Cuboid { min, .. } => assert_eq!(min, Vec3::new(0.0, 0.0, 2.0)),
            _ => unreachable!(),
        }
    }
}
