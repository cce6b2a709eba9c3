use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::Rng;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [Self::Sphere, Self::Cube, Self::Cylinder, Self::Cone, Self::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Cylinder => "cylinder",
            Self::Cone => "cone",
            Self::Torus => "torus",
        }
    }
}

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.35;

/// Recipe for one synthetic sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    /// Each axis is scaled by a factor drawn from `[1 - jitter, 1 + jitter]`.
    pub scale_jitter: f64,
    /// Seeds the rotation about the z axis and the scale factors.
    pub rotation_seed: u64,
    pub points: usize,
}

/// Area-uniform point on the nominal (unjittered, unrotated) surface.
pub fn surface_point(family: ShapeFamily, rng: &mut Rng) -> Point {
    use std::f64::consts::PI;
    match family {
        ShapeFamily::Sphere => loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if r > 1e-12 {
                break v.map(|c| c / r);
            }
        },
        ShapeFamily::Cube => {
            let face = rng.below(6);
            let (a, b) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        ShapeFamily::Cylinder => {
            // side area 4π, caps π each
            let theta = rng.uniform(0.0, 2.0 * PI);
            let pick = rng.uniform(0.0, 6.0 * PI);
            if pick < 4.0 * PI {
                [theta.cos(), theta.sin(), rng.uniform(-1.0, 1.0)]
            } else {
                let r = rng.next_f64().sqrt();
                let z = if pick < 5.0 * PI { 1.0 } else { -1.0 };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        ShapeFamily::Cone => {
            // apex (0,0,1), base radius 1 at z=-1: lateral area π√5, base π
            let theta = rng.uniform(0.0, 2.0 * PI);
            let lateral = 5f64.sqrt();
            if rng.uniform(0.0, lateral + 1.0) < lateral {
                let t = rng.next_f64().sqrt();
                [t * theta.cos(), t * theta.sin(), 1.0 - 2.0 * t]
            } else {
                let r = rng.next_f64().sqrt();
                [r * theta.cos(), r * theta.sin(), -1.0]
            }
        }
        ShapeFamily::Torus => loop {
            let theta = rng.uniform(0.0, 2.0 * PI);
            let phi = rng.uniform(0.0, 2.0 * PI);
            let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
            if rng.next_f64() * (TORUS_MAJOR + TORUS_MINOR) <= ring {
                break [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin()];
            }
        },
    }
}

/// Samples a cloud: nominal surface, then per-axis scale and a z rotation.
pub fn generate_cloud(spec: &ShapeSpec) -> Result<Vec<Point>> {
    if spec.points == 0 {
        return Err(Error::invalid("shape needs at least one point"));
    }
    if !(0.0..1.0).contains(&spec.scale_jitter) {
        return Err(Error::invalid(format!("scale jitter must be in [0, 1), got {}", spec.scale_jitter)));
    }
    let mut rng = Rng::new(spec.rotation_seed);
    let j = spec.scale_jitter;
    let scale = [0; 3].map(|_| rng.uniform(1.0 - j, 1.0 + j));
    let angle = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let mut surface = rng.fork(1);
    Ok((0..spec.points)
        .map(|_| {
            let p = surface_point(spec.family, &mut surface);
            let q = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
            [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]]
        })
        .collect())
}

/// Writes one `x y z` line per point; values round-trip exactly.
pub fn write_cloud(path: &Path, points: &[Point]) -> Result<()> {
    let mut s = String::with_capacity(points.len() * 64);
    for p in points {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).expect("write to string");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn parse_cloud(text: &str, origin: &str) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| parse_err(format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("`{f}` is not finite")));
            }
            p[k] = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: origin.to_string(),
            line: 0,
            msg: "no points".into(),
        });
    }
    Ok(points)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points = parse_cloud(&text, &path.display().to_string())?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PointCloud::with_meta(points, None, id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub families: Vec<ShapeFamily>,
    pub per_class: usize,
    /// The last this-many samples of every class form the held-out split.
    pub holdout_per_class: usize,
    pub points: usize,
    pub scale_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            families: ShapeFamily::ALL.to_vec(),
            per_class: 50,
            holdout_per_class: 10,
            points: 512,
            scale_jitter: 0.2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("data.families must not be empty".into()));
        }
        if self.points < 32 {
            return Err(Error::Config(format!("data.points must be >= 32, got {}", self.points)));
        }
        if self.per_class == 0 || self.holdout_per_class >= self.per_class {
            return Err(Error::Config(format!(
                "data.holdout_per_class ({}) must be below data.per_class ({})",
                self.holdout_per_class, self.per_class
            )));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config(format!("data.scale_jitter must be in [0, 1), got {}", self.scale_jitter)));
        }
        Ok(())
    }
}

/// Per-sample seed, derived from the master seed, class and index.
pub fn sample_seed(seed: u64, class: usize, index: usize) -> u64 {
    Rng::new(seed).fork(((class as u64) << 32) | index as u64).next_u64()
}

/// Writes `per_class` clouds per family plus a `file,class,seed` manifest.
pub fn generate_dataset(dir: &Path, cfg: &DataConfig, seed: u64) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("file,class,seed\n");
    let mut files = Vec::new();
    for (class, &family) in cfg.families.iter().enumerate() {
        for i in 0..cfg.per_class {
            let s = sample_seed(seed, class, i);
            let name = format!("{}_{i:04}.xyz", family.name());
            let spec = ShapeSpec {
                family,
                scale_jitter: cfg.scale_jitter,
                rotation_seed: s,
                points: cfg.points,
            };
            let path = dir.join(&name);
            write_cloud(&path, &generate_cloud(&spec)?)?;
            writeln!(manifest, "{name},{class},{s}").expect("write to string");
            files.push(path);
        }
    }
    let m = dir.join(MANIFEST);
    fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
    Ok(files)
}

/// Labeled clouds with a fixed train / held-out split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub held_out: Vec<PointCloud>,
    pub classes: usize,
}

impl Dataset {
    /// Splits by class, keeping manifest order: the last
    /// `holdout_per_class` clouds of every class are held out.
    pub fn from_clouds(clouds: Vec<PointCloud>, holdout_per_class: usize) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::Pipeline("dataset is empty".into()));
        }
        let classes = clouds.iter().filter_map(|c| c.label).max().map_or(1, |m| m + 1);
        let mut per: Vec<Vec<PointCloud>> = vec![Vec::new(); classes];
        for c in clouds {
            per[c.label.unwrap_or(0)].push(c);
        }
        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        for group in per {
            let cut = group.len().saturating_sub(holdout_per_class);
            for (i, c) in group.into_iter().enumerate() {
                if i < cut {
                    train.push(c);
                } else {
                    held_out.push(c);
                }
            }
        }
        Ok(Self {
            train,
            held_out,
            classes,
        })
    }

    /// Builds in memory the same normalized clouds that
    /// [`generate_dataset`] followed by [`Dataset::load`] would give.
    pub fn synthesize(cfg: &DataConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut clouds = Vec::new();
        for (class, &family) in cfg.families.iter().enumerate() {
            for i in 0..cfg.per_class {
                let spec = ShapeSpec {
                    family,
                    scale_jitter: cfg.scale_jitter,
                    rotation_seed: sample_seed(seed, class, i),
                    points: cfg.points,
                };
                let id = format!("{}_{i:04}", family.name());
                let mut cloud = PointCloud::with_meta(generate_cloud(&spec)?, Some(class), id)?;
                cloud.normalize();
                clouds.push(cloud);
            }
        }
        Self::from_clouds(clouds, cfg.holdout_per_class)
    }

    /// Reads a generated dataset; every cloud is normalized.
    pub fn load(dir: &Path, holdout_per_class: usize) -> Result<Self> {
        let m = dir.join(MANIFEST);
        let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let mut clouds = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: m.display().to_string(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", f.len())));
            }
            let class: usize = f[1].parse().map_err(|_| err(format!("bad class `{}`", f[1])))?;
            let mut cloud = read_cloud(&dir.join(f[0]))?;
            cloud.label = Some(class);
            cloud.normalize();
            clouds.push(cloud);
        }
        Self::from_clouds(clouds, holdout_per_class)
    }
}
