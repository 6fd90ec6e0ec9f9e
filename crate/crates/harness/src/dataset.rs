//! Synthetic primitive clouds, the text cloud format and manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stag_core::geometry::{normalize_cloud, Point, PointCloud};
use stag_core::train::Dataset;
use stag_core::{Error, Result, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Cube, Primitive::Cylinder, Primitive::Sphere, Primitive::Torus];

    pub fn as_str(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Torus => "torus",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown primitive `{s}`")))
    }
}

/// Aspect jitter applied to each shape parameter.
pub const ASPECT_JITTER: (f64, f64) = (0.75, 1.25);

fn unit_vector(rng: &mut RngStream) -> Point {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniformly random rotation from a unit quaternion.
fn random_rotation(rng: &mut RngStream) -> [[f64; 3]; 3] {
    let q = loop {
        let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: Point) -> Point {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

fn surface_point(shape: Primitive, dims: [f64; 3], rng: &mut RngStream) -> Point {
    match shape {
        Primitive::Sphere => unit_vector(rng).map(|v| v * dims[0]),
        Primitive::Cube => {
            let [a, b, c] = dims;
            let areas = [b * c, a * c, a * b];
            let total: f64 = areas.iter().sum();
            let mut u = rng.uniform(0.0, total);
            let axis = areas.iter().position(|&s| {
                u -= s;
                u < 0.0
            });
            let axis = axis.unwrap_or(2);
            let mut p = [rng.uniform(-a, a), rng.uniform(-b, b), rng.uniform(-c, c)];
            p[axis] = if rng.uniform(0.0, 1.0) < 0.5 { -dims[axis] } else { dims[axis] };
            p
        }
        Primitive::Cylinder => {
            let (r, h) = (dims[0], dims[1]);
            let side = 2.0 * h;
            let cap = r;
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            if rng.uniform(0.0, side + cap) < side {
                [r * theta.cos(), r * theta.sin(), rng.uniform(-h, h)]
            } else {
                let rho = r * rng.uniform(0.0, 1.0).sqrt();
                let z = if rng.uniform(0.0, 1.0) < 0.5 { -h } else { h };
                [rho * theta.cos(), rho * theta.sin(), z]
            }
        }
        Primitive::Torus => {
            let (big, small) = (dims[0], dims[1]);
            let v = loop {
                let v = rng.uniform(0.0, std::f64::consts::TAU);
                if rng.uniform(0.0, big + small) < big + small * v.cos() {
                    break v;
                }
            };
            let u = rng.uniform(0.0, std::f64::consts::TAU);
            let ring = big + small * v.cos();
            [ring * u.cos(), ring * u.sin(), small * v.sin()]
        }
    }
}

/// `points` surface samples of one randomly oriented, jittered primitive
/// centred at the origin, with Gaussian noise of standard deviation `noise_sigma`.
pub fn sample_primitive(shape: Primitive, points: usize, noise_sigma: f64, rng: &mut RngStream) -> Vec<Point> {
    let mut jitter = || rng.uniform(ASPECT_JITTER.0, ASPECT_JITTER.1);
    let dims = match shape {
        Primitive::Sphere => [jitter(); 3],
        Primitive::Cube => [jitter(), jitter(), jitter()],
        Primitive::Cylinder => [0.6 * jitter(), jitter(), 0.0],
        Primitive::Torus => [jitter(), 0.35 * jitter(), 0.0],
    };
    let rot = random_rotation(rng);
    (0..points)
        .map(|_| {
            let p = rotate(&rot, surface_point(shape, dims, rng));
            if noise_sigma > 0.0 {
                p.map(|v| v + noise_sigma * rng.normal())
            } else {
                p
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
}

/// Entries are relative to `root`, the manifest's own directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (p, label) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `relative_path<TAB>label`".into(),
            })?;
            entries.push(ManifestEntry { path: p.to_string(), label: label.to_string() });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\n", e.path, e.label)).collect()
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }
}

pub fn format_cloud(points: &[Point]) -> String {
    points.iter().map(|p| format!("{:.6} {:.6} {:.6}\n", p[0], p[1], p[2])).collect()
}

pub fn parse_cloud(text: &str, path: &Path) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let mut p = [0.0f64; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| err(format!("`{f}` is not a number")))?;
            if !slot.is_finite() {
                return Err(err(format!("`{f}` is not finite")));
            }
        }
        points.push(p);
    }
    Ok(points)
}

/// Writes `per_class` clouds of each primitive under `out_dir` together
/// with `manifest.tsv`.
pub fn generate_synthetic(
    out_dir: &Path,
    classes: &[Primitive],
    per_class: usize,
    points: usize,
    noise_sigma: f64,
    rng: &RngStream,
) -> Result<DatasetManifest> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if points < 64 {
        return Err(Error::Config(format!("need at least 64 points per cloud, got {points}")));
    }
    let mut entries = Vec::new();
    for &shape in classes {
        let dir = out_dir.join(shape.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for idx in 0..per_class {
            let mut r = rng.derive(format!("{shape}/{idx}"));
            let cloud = sample_primitive(shape, points, noise_sigma, &mut r);
            let rel = format!("{shape}/{shape}_{idx:04}.txt");
            let path = out_dir.join(&rel);
            fs::write(&path, format_cloud(&cloud)).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry { path: rel, label: shape.to_string() });
        }
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Writes `train/` and `test/` splits under `out_dir` from independent streams.
pub fn generate_splits(
    out_dir: &Path,
    train_per_class: usize,
    test_per_class: usize,
    points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let rng = RngStream::new(seed, "synthetic");
    let train = generate_synthetic(&out_dir.join("train"), &Primitive::ALL, train_per_class, points, noise_sigma, &rng.derive("train"))?;
    let test = generate_synthetic(&out_dir.join("test"), &Primitive::ALL, test_per_class, points, noise_sigma, &rng.derive("test"))?;
    Ok((train, test))
}

/// Label names in lexicographic order; a label's index is its position.
pub fn label_map(manifests: &[&DatasetManifest]) -> Vec<String> {
    let set: BTreeSet<&str> = manifests.iter().flat_map(|m| m.labels()).collect();
    set.into_iter().map(String::from).collect()
}

pub fn load_clouds(manifest: &DatasetManifest, labels: &[String]) -> Result<Vec<PointCloud>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = manifest.root.join(&e.path);
            let text = fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
            let mut cloud = PointCloud::new(parse_cloud(&text, &path)?);
            cloud.source_id = path.display().to_string();
            cloud.label = labels.iter().position(|l| *l == e.label);
            normalize_cloud(&cloud)
        })
        .collect()
}

/// Both splits, normalized, under one shared label map.
pub fn load_dataset(train_manifest: &Path, test_manifest: &Path) -> Result<Dataset> {
    let train = DatasetManifest::read(train_manifest)?;
    let test = DatasetManifest::read(test_manifest)?;
    let labels = label_map(&[&train, &test]);
    Ok(Dataset { train: load_clouds(&train, &labels)?, test: load_clouds(&test, &labels)?, class_names: labels })
}
