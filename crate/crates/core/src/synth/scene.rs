//! Scene primitives, procedural textures and ray casting.

use nalgebra::{Point3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stream_rng, Stream, SynthError};

/// Closest-hit parameters below this are treated as self-intersections.
const T_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane through `point` with normal `normal`.
    Plane {
        point: Point3<f64>,
        normal: Vector3<f64>,
    },
    /// Bounded rectangle spanned by two orthonormal in-plane axes.
    Rect {
        center: Point3<f64>,
        axis_u: Vector3<f64>,
        axis_v: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    },
    /// Axis-aligned box in the rig frame.
    AaBox { min: Point3<f64>, max: Point3<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Uniform intensity (textureless).
    Flat,
    /// Multi-octave value noise; `cell` is the coarsest lattice spacing in
    /// meters, each further octave halves it at half the amplitude.
    ValueNoise {
        cell: f64,
        octaves: u32,
        contrast: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Mean visible intensity in `[0, 1]`.
    pub albedo: f64,
    /// Infrared reflectance driving the ToF amplitude.
    pub ir_albedo: f64,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Every rendered depth must fall inside `(near, far)`.
    pub depth_range: (f64, f64),
    pub seed: u64,
}

/// Ray/scene intersection result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals z-depth for rays with unit camera-frame z.
    pub t: f64,
    pub primitive: usize,
    /// Surface texture coordinates in meters.
    pub st: (f64, f64),
}

fn plane_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = normal.normalize();
    let helper = if n.y.abs() < 0.9 {
        Vector3::y()
    } else {
        Vector3::x()
    };
    let a = helper.cross(&n).normalize();
    let b = n.cross(&a);
    (a, b)
}

impl Shape {
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, (f64, f64))> {
        match self {
            Shape::Plane { point, normal } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = normal.dot(&(point - origin)) / denom;
                if t <= T_EPS {
                    return None;
                }
                let p = origin + dir * t;
                let (a, b) = plane_basis(normal);
                let rel = p - point;
                Some((t, (rel.dot(&a), rel.dot(&b))))
            }
            Shape::Rect {
                center,
                axis_u,
                axis_v,
                half_u,
                half_v,
            } => {
                let n = axis_u.cross(axis_v);
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = n.dot(&(center - origin)) / denom;
                if t <= T_EPS {
                    return None;
                }
                let rel = origin + dir * t - center;
                let (s, r) = (rel.dot(axis_u), rel.dot(axis_v));
                (s.abs() <= *half_u && r.abs() <= *half_v).then_some((t, (s, r)))
            }
            Shape::AaBox { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - origin[k]) / dir[k];
                    let b = (max[k] - origin[k]) / dir[k];
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if lo > t_near {
                        t_near = lo;
                        axis = k;
                    }
                    t_far = t_far.min(hi);
                }
                if t_near > t_far || t_near <= T_EPS {
                    return None;
                }
                let p = origin + dir * t_near;
                let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                // offset faces so opposite sides do not share a texture
                let face = if dir[axis] > 0.0 { 0.0 } else { 17.0 };
                Some((t_near, (p[i] + face + 31.0 * axis as f64, p[j])))
            }
        }
    }
}

fn hash3(x: i64, y: i64, z: u64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ z.wrapping_mul(0x1656_67b1_9e37_79f9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(s: f64, t: f64, seed: u64) -> f64 {
    let (i, j) = (s.floor(), t.floor());
    let (fs, ft) = (fade(s - i), fade(t - j));
    let (i, j) = (i as i64, j as i64);
    let a = hash3(i, j, seed);
    let b = hash3(i + 1, j, seed);
    let c = hash3(i, j + 1, seed);
    let d = hash3(i + 1, j + 1, seed);
    let top = a + (b - a) * fs;
    let bottom = c + (d - c) * fs;
    top + (bottom - top) * ft
}

impl Texture {
    /// Intensity multiplier with mean ≈ 1.
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match *self {
            Texture::Flat => 1.0,
            Texture::ValueNoise {
                cell,
                octaves,
                contrast,
                seed,
            } => {
                let mut acc = 0.0;
                let mut norm = 0.0;
                let mut amp = 1.0;
                let mut scale = 1.0 / cell;
                for o in 0..octaves.max(1) {
                    acc += amp * value_noise(s * scale, t * scale, seed.wrapping_add(o as u64));
                    norm += amp;
                    amp *= 0.5;
                    scale *= 2.0;
                }
                1.0 + contrast * (2.0 * acc / norm - 1.0)
            }
        }
    }
}

impl Material {
    pub fn intensity(&self, st: (f64, f64)) -> f64 {
        (self.albedo * self.texture.eval(st.0, st.1)).clamp(0.0, 1.0)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.primitives.is_empty() {
            return Err(SynthError::EmptyScene);
        }
        let (near, far) = self.depth_range;
        if !(near > 0.2 && far < 7.4 && near < far) {
            return Err(SynthError::InvalidSpec(format!(
                "depth range ({near}, {far}) must lie inside (0.2, 7.4) m"
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let m = &p.material;
            if !(0.0..=1.0).contains(&m.albedo) || !(m.ir_albedo >= 0.0) {
                return Err(SynthError::InvalidSpec(format!(
                    "primitive {i}: albedo out of range"
                )));
            }
            let ok = match &p.shape {
                Shape::Plane { normal, .. } => normal.norm() > 0.0,
                Shape::Rect {
                    axis_u,
                    axis_v,
                    half_u,
                    half_v,
                    ..
                } => {
                    (axis_u.norm() - 1.0).abs() < 1e-9
                        && (axis_v.norm() - 1.0).abs() < 1e-9
                        && axis_u.dot(axis_v).abs() < 1e-9
                        && *half_u > 0.0
                        && *half_v > 0.0
                }
                Shape::AaBox { min, max } => (0..3).all(|k| min[k] < max[k]),
            };
            if !ok {
                return Err(SynthError::InvalidSpec(format!(
                    "primitive {i}: degenerate shape"
                )));
            }
        }
        Ok(())
    }

    /// Closest intersection along a ray.
    pub fn cast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, st)) = p.shape.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        primitive: i,
                        st,
                    });
                }
            }
        }
        best
    }

    /// A single textured plane facing the cameras at z-depth `depth`.
    pub fn fronto_parallel_plane(depth: f64, seed: u64) -> Self {
        Self {
            primitives: vec![Primitive {
                shape: Shape::Plane {
                    point: Point3::new(0.0, 0.0, depth),
                    normal: Vector3::z(),
                },
                material: textured(0.55, 0.03, seed),
            }],
            depth_range: ((depth * 0.5).max(0.21), (depth * 2.0).min(7.39)),
            seed,
        }
    }

    /// Random desk-scale scene: tilted textured back wall, a slanted
    /// textured panel and a few boxes in front of it.
    pub fn desk(seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Scene, 0);
        let mut primitives = vec![back_wall(&mut rng)];
        let texture = Texture::ValueNoise {
            cell: rng.random_range(0.012..0.02),
            octaves: 3,
            contrast: 0.6,
            seed: rng.random(),
        };
        primitives.push(slanted_panel(&mut rng, texture));
        for _ in 0..rng.random_range(2..=3) {
            primitives.push(random_box(&mut rng));
        }
        Self {
            primitives,
            depth_range: (0.3, 7.0),
            seed,
        }
    }

    /// Desk scene with a large untextured panel in front, covering roughly a
    /// quarter of the ultrawide view.
    pub fn desk_with_textureless(seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Scene, 1);
        let mut primitives = vec![back_wall(&mut rng)];
        for _ in 0..2 {
            primitives.push(random_box(&mut rng));
        }
        let yaw: f64 = rng.random_range(-0.35..0.35);
        let pitch: f64 = rng.random_range(-0.2..0.2);
        let rot = nalgebra::Rotation3::from_euler_angles(pitch, yaw, 0.0);
        let center = Point3::new(
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.15..0.15),
            rng.random_range(1.25..1.6),
        );
        primitives.push(Primitive {
            shape: Shape::Rect {
                center,
                axis_u: rot * Vector3::x(),
                axis_v: rot * Vector3::y(),
                half_u: rng.random_range(0.58..0.68),
                half_v: rng.random_range(0.44..0.5),
            },
            material: Material {
                albedo: rng.random_range(0.4..0.7),
                ir_albedo: rng.random_range(0.5..0.9),
                texture: Texture::Flat,
            },
        });
        Self {
            primitives,
            depth_range: (0.3, 7.0),
            seed,
        }
    }

    /// Indices of primitives without texture.
    pub fn textureless_primitives(&self) -> Vec<usize> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| p.material.texture == Texture::Flat)
            .map(|(i, _)| i)
            .collect()
    }
}

fn textured(albedo: f64, cell: f64, seed: u64) -> Material {
    Material {
        albedo,
        ir_albedo: 0.6,
        texture: Texture::ValueNoise {
            cell,
            octaves: 3,
            contrast: 0.6,
            seed,
        },
    }
}

fn back_wall(rng: &mut impl Rng) -> Primitive {
    let z = rng.random_range(2.1..2.5);
    let normal = Vector3::new(
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.1..0.1),
        1.0,
    );
    Primitive {
        shape: Shape::Plane {
            point: Point3::new(0.0, 0.0, z),
            normal: Unit::new_normalize(normal).into_inner(),
        },
        material: Material {
            albedo: rng.random_range(0.45..0.65),
            ir_albedo: rng.random_range(0.4..0.8),
            texture: Texture::ValueNoise {
                cell: rng.random_range(0.015..0.025),
                octaves: 3,
                contrast: 0.6,
                seed: rng.random(),
            },
        },
    }
}

fn slanted_panel(rng: &mut impl Rng, texture: Texture) -> Primitive {
    let yaw: f64 = rng.random_range(-0.5..0.5);
    let rot = nalgebra::Rotation3::from_euler_angles(0.0, yaw, 0.0);
    Primitive {
        shape: Shape::Rect {
            center: Point3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.3..0.3),
                rng.random_range(1.8..2.4),
            ),
            axis_u: rot * Vector3::x(),
            axis_v: Vector3::y(),
            half_u: rng.random_range(0.3..0.5),
            half_v: rng.random_range(0.3..0.5),
        },
        material: Material {
            albedo: rng.random_range(0.4..0.7),
            ir_albedo: rng.random_range(0.4..0.9),
            texture,
        },
    }
}

fn random_box(rng: &mut impl Rng) -> Primitive {
    let c = Point3::new(
        rng.random_range(-0.6..0.6),
        rng.random_range(-0.3..0.35),
        rng.random_range(1.0..1.8),
    );
    let half = Vector3::new(
        rng.random_range(0.08..0.18),
        rng.random_range(0.08..0.18),
        rng.random_range(0.08..0.18),
    );
    Primitive {
        shape: Shape::AaBox {
            min: c - half,
            max: c + half,
        },
        material: Material {
            albedo: rng.random_range(0.35..0.75),
            ir_albedo: rng.random_range(0.4..0.9),
            texture: Texture::ValueNoise {
                cell: rng.random_range(0.01..0.018),
                octaves: 3,
                contrast: 0.6,
                seed: rng.random(),
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_rect_and_box_hits() {
        let o = Point3::origin();
        let d = Vector3::new(0.0, 0.0, 1.0);
        let plane = Shape::Plane {
            point: Point3::new(0.0, 0.0, 2.0),
            normal: Vector3::z(),
        };
        assert_eq!(plane.intersect(&o, &d).unwrap().0, 2.0);
        assert!(plane.intersect(&o, &-d).is_none());
        let rect = Shape::Rect {
            center: Point3::new(0.0, 0.0, 1.0),
            axis_u: Vector3::x(),
            axis_v: Vector3::y(),
            half_u: 0.1,
            half_v: 0.1,
        };
        assert_eq!(rect.intersect(&o, &d).unwrap().0, 1.0);
        assert!(rect.intersect(&o, &Vector3::new(0.2, 0.0, 1.0)).is_none());
        let bx = Shape::AaBox {
            min: Point3::new(-0.1, -0.1, 1.5),
            max: Point3::new(0.1, 0.1, 1.7),
        };
        assert!((bx.intersect(&o, &d).unwrap().0 - 1.5).abs() < 1e-15);
        assert!(bx.intersect(&o, &Vector3::new(1.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn closest_hit_wins() {
        let mut scene = SceneSpec::fronto_parallel_plane(3.0, 1);
        scene.primitives.push(Primitive {
            shape: Shape::Plane {
                point: Point3::new(0.0, 0.0, 1.0),
                normal: Vector3::z(),
            },
            material: textured(0.5, 0.03, 2),
        });
        let hit = scene.cast(&Point3::origin(), &Vector3::z()).unwrap();
        assert_eq!((hit.t, hit.primitive), (1.0, 1));
    }

    #[test]
    fn texture_is_bounded_and_deterministic() {
        let tex = Texture::ValueNoise {
            cell: 0.03,
            octaves: 3,
            contrast: 0.6,
            seed: 9,
        };
        for i in 0..1000 {
            let (s, t) = (i as f64 * 0.0137 - 3.0, i as f64 * -0.0071 + 1.0);
            let x = tex.eval(s, t);
            assert!((0.4..=1.6).contains(&x));
            assert_eq!(x, tex.eval(s, t));
        }
        assert_eq!(Texture::Flat.eval(1.0, 2.0), 1.0);
    }

    #[test]
    fn presets_validate() {
        for seed in 0..5 {
            SceneSpec::desk(seed).validate().unwrap();
            SceneSpec::desk_with_textureless(seed).validate().unwrap();
        }
        let empty = SceneSpec {
            primitives: vec![],
            depth_range: (0.3, 7.0),
            seed: 0,
        };
        assert!(matches!(empty.validate(), Err(SynthError::EmptyScene)));
    }
}
