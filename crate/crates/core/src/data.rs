//! Dataset manifests and the seeded synthetic identity generator.
//!
//! A manifest is a CSV with header `path,id,camera,split`; paths are relative
//! to the manifest's directory and `split` is one of `train`, `query`,
//! `gallery`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{Image, PixelRange, CHANNELS};
use crate::rng::{purpose, stream};
use crate::{exec, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub id: usize,
    pub camera: usize,
    pub split: Split,
}

/// Manifest rows plus the directory their paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.csv";

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut records = Vec::new();
        for (i, row) in reader.deserialize::<Record>().enumerate() {
            records.push(row.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                msg: e.to_string(),
            })?);
        }
        let manifest = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        };
        for r in &manifest.records {
            let p = manifest.root.join(&r.path);
            if !p.is_file() {
                return Err(Error::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    /// Every query identity must appear in the gallery under another camera.
    pub fn validate(&self) -> Result<()> {
        validate_records(&self.records)
    }
}

fn validate_records(records: &[Record]) -> Result<()> {
    let mut gallery: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Gallery) {
        gallery.entry(r.id).or_default().insert(r.camera);
    }
    for r in records.iter().filter(|r| r.split == Split::Query) {
        let ok = gallery.get(&r.id).is_some_and(|cams| cams.iter().any(|&c| c != r.camera));
        if !ok {
            return Err(Error::Config(format!(
                "query {} (id {}, camera {}) has no gallery match under another camera",
                r.path, r.id, r.camera
            )));
        }
    }
    Ok(())
}

/// Records with their decoded images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(records: Vec<Record>, images: Vec<Image>) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::Shape {
                op: "dataset",
                dim: "images",
                expected: records.len(),
                actual: images.len(),
            });
        }
        validate_records(&records)?;
        Ok(Self { records, images })
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let images = manifest
            .records
            .iter()
            .map(|r| Image::load(&manifest.root.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.records.clone(), images)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::from_manifest(&DatasetManifest::load(manifest_path)?)
    }

    /// Writes every image and `manifest.csv` under `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for (r, img) in self.records.iter().zip(&self.images) {
            let p = dir.join(&r.path);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save(&p)?;
        }
        let manifest = DatasetManifest {
            root: dir.to_path_buf(),
            records: self.records.clone(),
        };
        let path = dir.join(DatasetManifest::FILE_NAME);
        std::fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }
}

/// Parameters of the synthetic generator.
///
/// Each identity is a stack of horizontal colour bands (a "signature"); the
/// bands of any two identities differ in at least `min_band_difference`
/// places. Every image applies a per-camera colour gain and background, a
/// random vertical offset and height scale, jittered band edges and pixel
/// noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub cameras: usize,
    pub train_per_camera: usize,
    pub query_per_camera: usize,
    pub gallery_per_camera: usize,
    pub height: usize,
    pub width: usize,
    /// Relative band heights, top to bottom.
    pub band_heights: Vec<f64>,
    pub palette: usize,
    pub min_band_difference: usize,
    /// Largest vertical displacement of the figure, in pixels.
    pub max_offset: usize,
    /// Largest displacement of each band edge, in pixels.
    pub edge_jitter: usize,
    /// Figure height as a fraction of the image, drawn from `[min_scale, 1]`.
    pub min_scale: f64,
    /// Per-camera channel gains are drawn from `[1 - camera_gain, 1 + camera_gain]`.
    pub camera_gain: f64,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            identities: 16,
            cameras: 4,
            train_per_camera: 3,
            query_per_camera: 1,
            gallery_per_camera: 1,
            height: 48,
            width: 16,
            band_heights: vec![0.15, 0.3, 0.25, 0.3],
            palette: 6,
            min_band_difference: 1,
            max_offset: 8,
            edge_jitter: 1,
            min_scale: 0.65,
            camera_gain: 0.3,
            noise: 0.08,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.identities == 0 || self.cameras < 2 {
            problems.push("need at least one identity and two cameras".to_string());
        }
        if self.height < 8 || self.width < 4 {
            problems.push(format!("image {}x{} is too small", self.height, self.width));
        }
        if self.band_heights.is_empty() || self.band_heights.iter().any(|&h| !(h > 0.0)) {
            problems.push("band_heights must be positive".into());
        }
        if self.palette < 2 {
            problems.push("palette needs at least two colours".into());
        }
        if self.min_band_difference > self.band_heights.len() {
            problems.push("min_band_difference exceeds the band count".into());
        }
        let distinct = (self.palette as f64).powi(self.band_heights.len() as i32);
        if (self.identities as f64) > distinct {
            problems.push("palette and band count cannot produce that many identities".into());
        }
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0) {
            problems.push(format!("min_scale {} must lie in (0, 1]", self.min_scale));
        }
        if !(0.0..1.0).contains(&self.camera_gain) || !(self.noise >= 0.0) {
            problems.push("camera_gain must lie in [0, 1) and noise must be non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Evenly spread hues at two brightness levels.
fn palette(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let hue = i as f64 / n as f64 * 6.0;
            let x = 1.0 - (hue % 2.0 - 1.0).abs();
            let (r, g, b) = match hue as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let level = if i % 2 == 0 { 0.85 } else { 0.6 };
            [0.1 + r * level * 0.8, 0.1 + g * level * 0.8, 0.1 + b * level * 0.8]
        })
        .collect()
}

/// Band colour indices for every identity.
fn signatures<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let bands = cfg.band_heights.len();
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut attempts = 0;
    while out.len() < cfg.identities {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(
                "could not draw enough distinct identity signatures; enlarge the palette".into(),
            ));
        }
        let sig: Vec<usize> = (0..bands).map(|_| rng.random_range(0..cfg.palette)).collect();
        let far = out
            .iter()
            .all(|o| o.iter().zip(&sig).filter(|(a, b)| a != b).count() >= cfg.min_band_difference.max(1));
        if far {
            out.push(sig);
        }
    }
    Ok(out)
}

struct Camera {
    gain: [f64; 3],
    background: [f64; 3],
}

fn render<R: Rng + ?Sized>(cfg: &SyntheticConfig, colors: &[[f64; 3]], sig: &[usize], cam: &Camera, rng: &mut R) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    let scale = if cfg.min_scale < 1.0 {
        rng.random_range(cfg.min_scale..=1.0)
    } else {
        1.0
    };
    let fig_h = ((h as f64 * scale).round() as usize).clamp(sig.len(), h);
    let slack = h - fig_h;
    let centre = slack as isize / 2;
    let shift = rng.random_range(-(cfg.max_offset as i64)..=cfg.max_offset as i64) as isize;
    let top = (centre + shift).clamp(0, slack as isize) as usize;
    let total: f64 = cfg.band_heights.iter().sum();
    // Band edges in image rows.
    let mut edges = vec![top];
    let mut acc = 0.0;
    for bh in &cfg.band_heights[..cfg.band_heights.len() - 1] {
        acc += bh / total;
        let j = cfg.edge_jitter as i64;
        let e = top as isize + (acc * fig_h as f64).round() as isize + rng.random_range(-j..=j) as isize;
        edges.push(e.clamp(top as isize, (top + fig_h) as isize) as usize);
    }
    edges.push(top + fig_h);
    let margin = rng.random_range(1..=(w / 5).max(1));
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid sigma");
    let mut data = vec![0.0; CHANNELS * h * w];
    for y in 0..h {
        let band = (0..sig.len()).find(|&b| y >= edges[b] && y < edges[b + 1]);
        for x in 0..w {
            let inside = band.is_some() && x >= margin && x < w - margin;
            for c in 0..CHANNELS {
                let base = match band {
                    Some(b) if inside => colors[sig[b]][c] * cam.gain[c],
                    _ => cam.background[c],
                };
                let v = base + if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data[(c * h + y) * w + x] = (v.clamp(0.0, 1.0) * 255.0).round();
            }
        }
    }
    Image::new(h, w, PixelRange::Byte, data).expect("valid synthetic image")
}

/// Generates the synthetic dataset. Identity `i` contributes, per camera,
/// `train_per_camera` training images followed by query and gallery images,
/// so query and gallery identities are the training identities (closed set)
/// seen in new images.
pub fn synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(seed, purpose::DATASET);
    let colors = palette(cfg.palette);
    let sigs = signatures(cfg, &mut rng)?;
    let cameras: Vec<Camera> = (0..cfg.cameras)
        .map(|_| Camera {
            gain: std::array::from_fn(|_| rng.random_range(1.0 - cfg.camera_gain..=1.0 + cfg.camera_gain)),
            background: std::array::from_fn(|_| rng.random_range(0.2..0.45)),
        })
        .collect();
    let per_camera = cfg.train_per_camera + cfg.query_per_camera + cfg.gallery_per_camera;
    let mut jobs = Vec::new();
    for id in 0..cfg.identities {
        for cam in 0..cfg.cameras {
            for k in 0..per_camera {
                let split = if k < cfg.train_per_camera {
                    Split::Train
                } else if k < cfg.train_per_camera + cfg.query_per_camera {
                    Split::Query
                } else {
                    Split::Gallery
                };
                jobs.push(Record {
                    path: format!("{}/{id:04}_c{cam}_{k:02}.png", split_dir(split)),
                    id,
                    camera: cam,
                    split,
                });
            }
        }
    }
    let images = exec::map_indexed(jobs.len(), |i| {
        let mut r = stream(seed, (purpose::DATASET << 20) + i as u64);
        render(cfg, &colors, &sigs[jobs[i].id], &cameras[jobs[i].camera], &mut r)
    });
    Dataset::new(jobs, images)
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Query => "query",
        Split::Gallery => "gallery",
    }
}
