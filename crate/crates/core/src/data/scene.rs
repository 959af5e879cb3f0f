//! Ray-cast synthetic scenes: depth plus a Lambertian-shaded image.
//!
//! Camera frame: `x` right, `y` down, `z` forward, pinhole at the origin.
//! Depth is the `z` coordinate of the first hit. Pixel `(u, v)` is sampled
//! through its center `(u + 0.5, v + 0.5)`.
//!
//! Spec files are UTF-8 `key=value` lines; primitives repeat their key:
//!
//! ```text
//! seed=7
//! camera=focal,cx,cy          # focal in image widths, center in fractions
//! light=x,y,z                 # direction toward the light
//! ambient=0.25
//! plane=px,py,pz,nx,ny,nz,r,g,b[,period,r2,g2,b2]
//! sphere=cx,cy,cz,radius,r,g,b
//! box=x0,y0,z0,x1,y1,z1,r,g,b
//! ```
//!
//! A plane with a `period` is textured with a checkerboard of the two
//! albedos, `period` meters per square.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::{DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::rng::stream;

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn normalize(a: V3) -> Option<V3> {
    let n = dot(a, a).sqrt();
    (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// Focal length in units of image width (square pixels).
    pub focal: f64,
    /// Principal point as fractions of width and height.
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Plane { point: V3, normal: V3 },
    Sphere { center: V3, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: V3, max: V3 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checker {
    pub period: f64,
    pub albedo: V3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub geometry: Geometry,
    pub albedo: V3,
    pub checker: Option<Checker>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub camera: Camera,
    /// Direction toward the light.
    pub light: V3,
    pub ambient: f64,
    pub primitives: Vec<Primitive>,
}

const EPS_T: f64 = 1e-9;

impl Geometry {
    /// Nearest hit distance along `dir` from the origin and the surface
    /// normal there.
    fn intersect(&self, dir: V3) -> Option<(f64, V3)> {
        match *self {
            Geometry::Plane { point, normal } => {
                let denom = dot(normal, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot(normal, point) / denom;
                (t > EPS_T).then_some((t, normal))
            }
            Geometry::Sphere { center, radius } => {
                // |t d - c|^2 = r^2
                let a = dot(dir, dir);
                let b = -2.0 * dot(dir, center);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                    .into_iter()
                    .find(|&t| t > EPS_T)?;
                let n = scale(sub(scale(dir, t), center), 1.0 / radius);
                Some((t, n))
            }
            Geometry::Cuboid { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis0 = 0;
                let mut axis1 = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if 0.0 < min[a] || 0.0 > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = (min[a] / dir[a], max[a] / dir[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    if lo > t0 {
                        t0 = lo;
                        axis0 = a;
                    }
                    if hi < t1 {
                        t1 = hi;
                        axis1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > EPS_T {
                    (t0, axis0)
                } else if t1 > EPS_T {
                    (t1, axis1)
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                n[axis] = if dir[axis] > 0.0 { -1.0 } else { 1.0 };
                Some((t, n))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("scene spec", r.to_string()));
        match *self {
            Geometry::Plane { normal, .. } if normalize(normal).is_none() => bad("plane normal must be nonzero"),
            Geometry::Sphere { radius, .. } if !(radius > 0.0 && radius.is_finite()) => bad("sphere radius must be positive"),
            Geometry::Cuboid { min, max } if (0..3).any(|a| !(min[a] < max[a])) => bad("box min must be below max"),
            _ => Ok(()),
        }
    }
}

impl Primitive {
    fn albedo_at(&self, p: V3) -> V3 {
        match self.checker {
            Some(c) => {
                let idx: i64 = p.iter().map(|&v| (v / c.period).floor() as i64).sum();
                if idx.rem_euclid(2) == 0 {
                    self.albedo
                } else {
                    c.albedo
                }
            }
            None => self.albedo,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.camera;
        if !(c.focal > 0.0 && c.focal.is_finite() && c.cx.is_finite() && c.cy.is_finite()) {
            return Err(Error::invalid("scene spec", format!("degenerate camera {c:?}")));
        }
        if normalize(self.light).is_none() {
            return Err(Error::invalid("scene spec", "light direction must be nonzero"));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::invalid("scene spec", "ambient must lie in [0, 1]"));
        }
        for p in &self.primitives {
            p.geometry.validate()?;
            if let Some(ch) = p.checker {
                if !(ch.period > 0.0) {
                    return Err(Error::invalid("scene spec", "checker period must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Outdoor-like random layout: textured ground, a back wall that every
    /// upward ray hits, and a few boxes and spheres resting on the ground.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, "scene-layout");
        let color = |rng: &mut crate::rng::StreamRng| -> V3 {
            [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)]
        };
        let ground_y = rng.random_range(1.4..1.8);
        let mut primitives = vec![Primitive {
            geometry: Geometry::Plane {
                point: [0.0, ground_y, 0.0],
                normal: [0.0, -1.0, 0.0],
            },
            albedo: color(&mut rng),
            checker: Some(Checker {
                period: rng.random_range(1.0..3.0),
                albedo: color(&mut rng),
            }),
        }];
        primitives.push(Primitive {
            geometry: Geometry::Plane {
                point: [0.0, 0.0, rng.random_range(30.0..45.0)],
                normal: [0.0, 0.0, -1.0],
            },
            albedo: color(&mut rng),
            checker: None,
        });
        for _ in 0..rng.random_range(2..=5) {
            let (x, z) = (rng.random_range(-9.0..9.0), rng.random_range(5.0..26.0));
            let (w, h, d) = (rng.random_range(0.8..3.5), rng.random_range(0.8..4.0), rng.random_range(0.8..3.0));
            primitives.push(Primitive {
                geometry: Geometry::Cuboid {
                    min: [x - w / 2.0, ground_y - h, z],
                    max: [x + w / 2.0, ground_y, z + d],
                },
                albedo: color(&mut rng),
                checker: None,
            });
        }
        for _ in 0..rng.random_range(1..=3) {
            let r = rng.random_range(0.4..1.6);
            primitives.push(Primitive {
                geometry: Geometry::Sphere {
                    center: [rng.random_range(-7.0..7.0), ground_y - r, rng.random_range(4.0..24.0)],
                    radius: r,
                },
                albedo: color(&mut rng),
                checker: None,
            });
        }
        let light = [rng.random_range(-1.0..1.0), rng.random_range(-2.0..-0.5), rng.random_range(-1.0..0.2)];
        SceneSpec {
            seed,
            camera: Camera {
                focal: 0.8,
                cx: 0.5,
                cy: 0.5,
            },
            light,
            ambient: 0.25,
            primitives,
        }
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let c = self.camera;
        let _ = writeln!(s, "camera={}", list(&[c.focal, c.cx, c.cy]));
        let _ = writeln!(s, "light={}", list(&self.light));
        let _ = writeln!(s, "ambient={:?}", self.ambient);
        for p in &self.primitives {
            let a = p.albedo;
            let line = match p.geometry {
                Geometry::Plane { point, normal } => {
                    let mut v = vec![point[0], point[1], point[2], normal[0], normal[1], normal[2], a[0], a[1], a[2]];
                    if let Some(ch) = p.checker {
                        v.extend([ch.period, ch.albedo[0], ch.albedo[1], ch.albedo[2]]);
                    }
                    format!("plane={}", list(&v))
                }
                Geometry::Sphere { center, radius } => {
                    format!("sphere={}", list(&[center[0], center[1], center[2], radius, a[0], a[1], a[2]]))
                }
                Geometry::Cuboid { min, max } => format!(
                    "box={}",
                    list(&[min[0], min[1], min[2], max[0], max[1], max[2], a[0], a[1], a[2]])
                ),
            };
            let _ = writeln!(s, "{line}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, r: String| Error::invalid("scene spec", format!("line {line}: {r}"));
        let mut spec = SceneSpec {
            seed: 0,
            camera: Camera {
                focal: 0.8,
                cx: 0.5,
                cy: 0.5,
            },
            light: [0.0, -1.0, -0.5],
            ambient: 0.25,
            primitives: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(ln, "expected key=value".into()))?;
            let nums = || -> Result<Vec<f64>> {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad(ln, format!("{v:?} is not a number"))))
                    .collect()
            };
            let want = |v: &[f64], n: &[usize]| -> Result<()> {
                if n.contains(&v.len()) {
                    Ok(())
                } else {
                    Err(bad(ln, format!("{key} takes {n:?} values, found {}", v.len())))
                }
            };
            match key.trim() {
                "seed" => spec.seed = value.trim().parse().map_err(|_| bad(ln, "seed must be an integer".into()))?,
                "camera" => {
                    let v = nums()?;
                    want(&v, &[3])?;
                    spec.camera = Camera {
                        focal: v[0],
                        cx: v[1],
                        cy: v[2],
                    };
                }
                "light" => {
                    let v = nums()?;
                    want(&v, &[3])?;
                    spec.light = [v[0], v[1], v[2]];
                }
                "ambient" => {
                    let v = nums()?;
                    want(&v, &[1])?;
                    spec.ambient = v[0];
                }
                "plane" => {
                    let v = nums()?;
                    want(&v, &[9, 13])?;
                    spec.primitives.push(Primitive {
                        geometry: Geometry::Plane {
                            point: [v[0], v[1], v[2]],
                            normal: [v[3], v[4], v[5]],
                        },
                        albedo: [v[6], v[7], v[8]],
                        checker: (v.len() == 13).then(|| Checker {
                            period: v[9],
                            albedo: [v[10], v[11], v[12]],
                        }),
                    });
                }
                "sphere" => {
                    let v = nums()?;
                    want(&v, &[7])?;
                    spec.primitives.push(Primitive {
                        geometry: Geometry::Sphere {
                            center: [v[0], v[1], v[2]],
                            radius: v[3],
                        },
                        albedo: [v[4], v[5], v[6]],
                        checker: None,
                    });
                }
                "box" => {
                    let v = nums()?;
                    want(&v, &[9])?;
                    spec.primitives.push(Primitive {
                        geometry: Geometry::Cuboid {
                            min: [v[0], v[1], v[2]],
                            max: [v[3], v[4], v[5]],
                        },
                        albedo: [v[6], v[7], v[8]],
                        checker: None,
                    });
                }
                other => return Err(bad(ln, format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Depth in meters at full precision plus the shaded image.
pub fn generate_scene(spec: &SceneSpec, height: usize, width: usize) -> Result<(RgbImage, DepthMap)> {
    spec.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("generate_scene", "resolution must be positive"));
    }
    let f = spec.camera.focal * width as f64;
    let (cx, cy) = (spec.camera.cx * width as f64, spec.camera.cy * height as f64);
    let light = normalize(spec.light).expect("validated");
    let mut image = RgbImage::new(height, width);
    let mut depth = DepthMap::empty(height, width);
    for v in 0..height {
        for u in 0..width {
            let dir = [(u as f64 + 0.5 - cx) / f, (v as f64 + 0.5 - cy) / f, 1.0];
            let hit = spec
                .primitives
                .iter()
                .filter_map(|p| p.geometry.intersect(dir).map(|(t, n)| (t, n, p)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let Some((t, n, prim)) = hit else {
                return Err(Error::invalid(
                    "generate_scene",
                    format!("ray through pixel ({v}, {u}) hits no primitive"),
                ));
            };
            let point = scale(dir, t);
            let mut n = normalize(n).unwrap_or([0.0, 0.0, -1.0]);
            if dot(n, dir) > 0.0 {
                n = scale(n, -1.0);
            }
            let shade = spec.ambient + (1.0 - spec.ambient) * dot(n, light).max(0.0);
            let albedo = prim.albedo_at(point);
            for (c, &a) in albedo.iter().enumerate() {
                image.set(c, v, u, (a * shade).clamp(0.0, 1.0) as f32);
            }
            let i = v * width + u;
            depth.values[i] = point[2] as f32;
            depth.valid[i] = true;
        }
    }
    Ok((image, depth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let spec = SceneSpec::random(3);
        assert_eq!(SceneSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn random_scenes_cover_every_pixel() {
        for seed in 0..5 {
            let (_, d) = generate_scene(&SceneSpec::random(seed), 32, 64).unwrap();
            assert_eq!(d.valid_count(), 32 * 64);
            assert!(d.values.iter().all(|&v| v > 0.0 && v < 50.0));
        }
    }

    #[test]
    fn degenerate_camera_rejected() {
        let mut spec = SceneSpec::random(0);
        spec.camera.focal = 0.0;
        assert!(generate_scene(&spec, 4, 4).is_err());
    }
}
