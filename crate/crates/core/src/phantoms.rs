//! Synthetic phantoms and on-disk datasets of paired images, limited-angle
//! sinograms and FBP reconstructions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::numerics::container::{read_tensor, write_tensor, Dtype};
use crate::numerics::Tensor;
use crate::tomography::{fbp, Geometry, Image, RadonOperator, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Ellipses,
    Blobs,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    pub kind: PhantomKind,
    /// Inclusive range of shapes per phantom.
    pub count: (usize, usize),
    /// Range of per-shape intensity.
    pub intensity: (f64, f64),
    /// Highest texture frequency in cycles per image; 0 disables texture.
    pub texture_bandwidth: f64,
    /// Relative texture modulation depth.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            kind: PhantomKind::Mixed,
            count: (3, 7),
            intensity: (0.15, 0.9),
            texture_bandwidth: 6.0,
            texture_amplitude: 0.15,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return invalid(format!("phantom size {} too small", self.size));
        }
        if self.count.0 == 0 || self.count.0 > self.count.1 {
            return invalid(format!("bad shape count range {:?}", self.count));
        }
        let (lo, hi) = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return invalid(format!("intensity range {:?} must lie in [0, 1]", self.intensity));
        }
        if !(self.texture_bandwidth >= 0.0) || !(0.0..1.0).contains(&self.texture_amplitude) {
            return invalid("texture bandwidth must be >= 0 and amplitude in [0, 1)");
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    angle: f64,
    value: f64,
}

impl Blob {
    fn at(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.sx;
        let v = (-s * dx + c * dy) / self.sy;
        self.value * (-0.5 * (u * u + v * v)).exp()
    }
}

/// Uniform point in the disk of radius `r`.
fn in_disk(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    let rho = r * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    (rho * phi.cos(), rho * phi.sin())
}

/// Deterministic phantom for `(spec.seed, id)` with values in `[0, 1]` and
/// support inside the inscribed circle.
pub fn generate_phantom(spec: &PhantomSpec, id: u64) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id);
    let n = spec.size;
    let r = n as f64 / 2.0;
    let support = 0.92 * r;
    let (lo, hi) = spec.intensity;
    let count = rng.random_range(spec.count.0..=spec.count.1);
    let mut ellipses = Vec::new();
    let mut blobs = Vec::new();
    // a body ellipse first, then smaller inserts
    for k in 0..count {
        let use_blob = match spec.kind {
            PhantomKind::Ellipses => false,
            PhantomKind::Blobs => true,
            PhantomKind::Mixed => k > 0 && rng.random_bool(0.4),
        };
        if use_blob {
            let s = rng.random_range(0.05..0.18) * r;
            let (cx, cy) = in_disk(&mut rng, support - 2.5 * s);
            blobs.push(Blob {
                cx,
                cy,
                sx: s,
                sy: s * rng.random_range(0.5..1.5),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                value: rng.random_range(lo..=hi) * if k > 0 && rng.random_bool(0.3) { -0.5 } else { 1.0 },
            });
        } else {
            let big = k == 0;
            let a = if big { rng.random_range(0.6..0.85) } else { rng.random_range(0.08..0.35) } * r;
            let b = a * rng.random_range(0.45..1.0);
            let (cx, cy) = in_disk(&mut rng, (support - a).max(0.0));
            ellipses.push(Ellipse {
                cx,
                cy,
                a,
                b,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                value: if big {
                    rng.random_range(lo..=hi) * 0.5
                } else {
                    rng.random_range(lo..=hi) * if rng.random_bool(0.3) { -0.5 } else { 1.0 }
                },
            });
        }
    }
    let waves: Vec<(f64, f64, f64)> = if spec.texture_bandwidth > 0.0 {
        (0..4)
            .map(|_| {
                let f = rng.random_range(1.0..=spec.texture_bandwidth.max(1.0)) / n as f64;
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (std::f64::consts::TAU * f * dir.cos(), std::f64::consts::TAU * f * dir.sin(), phase)
            })
            .collect()
    } else {
        Vec::new()
    };
    let c = (n as f64 - 1.0) / 2.0;
    let sub = [-0.25, 0.25];
    let mut px = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for &di in &sub {
                for &dj in &sub {
                    let (x, y) = (j as f64 - c + dj, i as f64 - c + di);
                    if x * x + y * y > support * support {
                        continue;
                    }
                    let mut v: f64 = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum();
                    v += blobs.iter().map(|b| b.at(x, y)).sum::<f64>();
                    if !waves.is_empty() && v > 0.0 {
                        let t: f64 = waves.iter().map(|(kx, ky, p)| (kx * x + ky * y + p).cos()).sum::<f64>()
                            / waves.len() as f64;
                        v *= 1.0 + spec.texture_amplitude * t;
                    }
                    acc += v.clamp(0.0, 1.0);
                }
            }
            px[i * n + j] = acc / 4.0;
        }
    }
    Image::new(Tensor::new(vec![n, n], px)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemFiles {
    pub img: String,
    pub sino: String,
    pub fbp: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Phantom index fed to [`generate_phantom`].
    pub seed_index: u64,
    /// Paths relative to the dataset root.
    pub files: ItemFiles,
    /// Hex SHA-256 of each file, same order as `files`.
    pub sha256: ItemFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub geometry: Geometry,
    pub train: Vec<ManifestItem>,
    pub test: Vec<ManifestItem>,
    /// SHA-256 over all item checksums in order.
    pub checksum: String,
}

pub const MANIFEST: &str = "manifest.json";

/// A phantom with its measurement and FBP reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub image: Image,
    pub sino: Sinogram,
    pub fbp: Image,
}

pub fn make_item(spec: &PhantomSpec, index: u64, op: &RadonOperator) -> Result<Item> {
    let image = generate_phantom(spec, index)?;
    let sino = op.project(&image)?;
    let fbp = fbp(&sino)?;
    Ok(Item {
        id: format!("p{index:06}"),
        image,
        sino,
        fbp,
    })
}

/// Indices `0..n_train` go to the training split and the next `n_test` to
/// the test split.
pub fn split_indices(n_train: usize, n_test: usize) -> (Vec<u64>, Vec<u64>) {
    let train = (0..n_train as u64).collect();
    let test = (n_train as u64..(n_train + n_test) as u64).collect();
    (train, test)
}

/// In-memory items for `indices`.
pub fn make_items(spec: &PhantomSpec, indices: &[u64], geometry: &Geometry) -> Result<Vec<Item>> {
    let op = RadonOperator::new(geometry)?;
    indices.iter().map(|&i| make_item(spec, i, &op)).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn manifest_checksum(train: &[ManifestItem], test: &[ManifestItem]) -> String {
    let mut h = Sha256::new();
    for it in train.iter().chain(test) {
        h.update(it.id.as_bytes());
        for s in [&it.sha256.img, &it.sha256.sino, &it.sha256.fbp] {
            h.update(s.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Writes `<root>/<split>/<id>.{img,sino,fbp}.rnt` and `<root>/manifest.json`.
pub fn build_dataset(
    spec: &PhantomSpec,
    n_train: usize,
    n_test: usize,
    geometry: &Geometry,
    root: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_test == 0 {
        return invalid("the test split needs at least one item");
    }
    if spec.size != geometry.num_detectors {
        return Err(Error::GeometryMismatch(format!(
            "phantom size {} but {} detectors",
            spec.size, geometry.num_detectors
        )));
    }
    let op = RadonOperator::new(geometry)?;
    let (train_idx, test_idx) = split_indices(n_train, n_test);
    if train_idx.iter().any(|i| test_idx.contains(i)) {
        return invalid("train and test ids overlap");
    }
    let write_split = |split: Split, indices: &[u64]| -> Result<Vec<ManifestItem>> {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir)?;
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let item = make_item(spec, i, &op)?;
            let rel = |ext: &str| format!("{}/{}.{ext}.rnt", split.name(), item.id);
            let files = ItemFiles {
                img: rel("img"),
                sino: rel("sino"),
                fbp: rel("fbp"),
            };
            write_tensor(&root.join(&files.img), item.image.pixels(), Dtype::F64)?;
            write_tensor(&root.join(&files.sino), item.sino.values(), Dtype::F64)?;
            write_tensor(&root.join(&files.fbp), item.fbp.pixels(), Dtype::F64)?;
            let sha256 = ItemFiles {
                img: sha256_file(&root.join(&files.img))?,
                sino: sha256_file(&root.join(&files.sino))?,
                fbp: sha256_file(&root.join(&files.fbp))?,
            };
            out.push(ManifestItem {
                id: item.id,
                seed_index: i,
                files,
                sha256,
            });
        }
        Ok(out)
    };
    let train = write_split(Split::Train, &train_idx)?;
    let test = write_split(Split::Test, &test_idx)?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        geometry: geometry.clone(),
        checksum: manifest_checksum(&train, &test),
        train,
        test,
    };
    fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingDependency(format!("dataset manifest {} not found", path.display())),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a split, verifying every file against its recorded checksum.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Item>> {
    let items = match split {
        Split::Train => &manifest.train,
        Split::Test => &manifest.test,
    };
    items
        .iter()
        .map(|it| {
            let path = |rel: &str| -> PathBuf { root.join(rel) };
            for (rel, sum) in [
                (&it.files.img, &it.sha256.img),
                (&it.files.sino, &it.sha256.sino),
                (&it.files.fbp, &it.sha256.fbp),
            ] {
                let p = path(rel);
                if !p.exists() {
                    return Err(Error::MissingDependency(format!("dataset file {} not found", p.display())));
                }
                if &sha256_file(&p)? != sum {
                    return Err(Error::Format(format!("checksum mismatch for {}", p.display())));
                }
            }
            Ok(Item {
                id: it.id.clone(),
                image: Image::new(read_tensor(&path(&it.files.img))?)?,
                sino: Sinogram::new(manifest.geometry.clone(), read_tensor(&path(&it.files.sino))?)?,
                fbp: Image::new(read_tensor(&path(&it.files.fbp))?)?,
            })
        })
        .collect()
}
