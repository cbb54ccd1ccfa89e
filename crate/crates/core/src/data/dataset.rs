use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::bicubic::{make_pair, DegradationSpec};
use crate::data::image::{center_crop_resize, load_image, ImageTensor};
use crate::error::{FurnError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = FurnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(FurnError::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the directory holding the manifest.
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub hr_size: usize,
    pub seed: u64,
    pub version: u32,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Each path may appear once, which keeps the splits disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(FurnError::InvalidConfig(format!("manifest lists `{}` more than once", e.path)));
            }
        }
        if self.hr_size < 8 {
            return Err(FurnError::InvalidConfig(format!("hr_size {} is below 8", self.hr_size)));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| FurnError::io(path.display(), e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FurnError::io(dir.display(), e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| FurnError::io(path.display(), e))
    }
}

/// One split of a dataset, decoded and brought to `hr_size×hr_size`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub split: Split,
    pub paths: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let mut paths = Vec::new();
        let mut images = Vec::new();
        for e in manifest.split(split) {
            let img = load_image(&root.join(&e.path))?;
            let img = if img.height() == manifest.hr_size && img.width() == manifest.hr_size {
                img
            } else {
                center_crop_resize(&img, manifest.hr_size)?
            };
            paths.push(e.path.clone());
            images.push(img);
        }
        if images.is_empty() {
            return Err(FurnError::EmptySplit(split.as_str().into()));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            split,
            paths,
            images,
        })
    }
}

/// HR/LR training batch in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub hr: Tensor,
    pub lr: Tensor,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(&ImageTensor, &ImageTensor)], indices: Vec<usize>) -> Result<Self> {
        let hr: Vec<Tensor> = pairs.iter().map(|(h, _)| h.to_tensor()).collect();
        let lr: Vec<Tensor> = pairs.iter().map(|(_, l)| l.to_tensor()).collect();
        Ok(Batch {
            hr: Tensor::stack(&hr.iter().collect::<Vec<_>>())?,
            lr: Tensor::stack(&lr.iter().collect::<Vec<_>>())?,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Deterministic, epoch-shuffled batches over a fixed set of HR images.
///
/// The permutation of epoch `e` is a pure function of `(seed, e)`, so batch
/// `k` of the stream can be produced without replaying earlier batches.
#[derive(Clone, Debug)]
pub struct BatchStream {
    pairs: Vec<(ImageTensor, ImageTensor)>,
    batch_size: usize,
    seed: u64,
    next: u64,
}

impl BatchStream {
    pub fn new(images: &[ImageTensor], batch_size: usize, spec: &DegradationSpec, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(FurnError::InvalidConfig("batch size must be at least 1".into()));
        }
        if images.is_empty() {
            return Err(FurnError::EmptySplit("train".into()));
        }
        if images.len() < batch_size {
            return Err(FurnError::InvalidConfig(format!(
                "batch size {batch_size} exceeds the {} available images",
                images.len()
            )));
        }
        let pairs = images.iter().map(|img| make_pair(img, spec)).collect::<Result<Vec<_>>>()?;
        Ok(BatchStream {
            pairs,
            batch_size,
            seed,
            next: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len() / self.batch_size
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// The `index`-th batch of the stream (0-based, across epochs).
    pub fn batch_at(&self, index: u64) -> Batch {
        let per_epoch = self.batches_per_epoch() as u64;
        let (epoch, k) = (index / per_epoch, (index % per_epoch) as usize);
        let order = self.permutation(epoch);
        let ids = order[k * self.batch_size..(k + 1) * self.batch_size].to_vec();
        let pairs: Vec<_> = ids.iter().map(|&i| (&self.pairs[i].0, &self.pairs[i].1)).collect();
        Batch::from_pairs(&pairs, ids).expect("pairs share one geometry")
    }

    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}

/// Deterministic shuffled batches over the train split of `manifest`.
pub fn iterate_batches(root: &Path, batch_size: usize, spec: &DegradationSpec, seed: u64) -> Result<BatchStream> {
    let ds = Dataset::load(root, Split::Train)?;
    BatchStream::new(&ds.images, batch_size, spec, seed)
}

fn smoothstep(edge: f64, width: f64, x: f64) -> f64 {
    let t = ((x - edge) / width + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct FaceParams {
    bg_a: [f64; 3],
    bg_b: [f64; 3],
    blobs: Vec<([f64; 2], f64, [f64; 3])>,
    hair: [f64; 3],
    skin: [f64; 3],
    center: [f64; 2],
    radii: [f64; 2],
    eye_dy: f64,
    eye_dx: f64,
    eye_r: f64,
    iris: [f64; 3],
    mouth_w: f64,
    mouth_y: f64,
    lips: [f64; 3],
    light: [f64; 2],
}

impl FaceParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut color = |lo: f64, hi: f64| [0, 1, 2].map(|_| rng.random_range(lo..hi));
        let bg_a = color(0.1, 0.9);
        let bg_b = color(0.1, 0.9);
        let hair = color(0.02, 0.35);
        let iris = color(0.05, 0.45);
        let tone = rng.random_range(0.45..0.95);
        let skin = [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.55..0.75)];
        let lips = [rng.random_range(0.55..0.85), rng.random_range(0.15..0.35), rng.random_range(0.2..0.4)];
        let blobs = (0..3)
            .map(|_| {
                (
                    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                    rng.random_range(0.1..0.3),
                    [0, 1, 2].map(|_| rng.random_range(-0.25..0.25)),
                )
            })
            .collect();
        FaceParams {
            bg_a,
            bg_b,
            blobs,
            hair,
            skin,
            center: [rng.random_range(0.45..0.55), rng.random_range(0.5..0.6)],
            radii: [rng.random_range(0.24..0.32), rng.random_range(0.3..0.38)],
            eye_dy: rng.random_range(0.06..0.1),
            eye_dx: rng.random_range(0.09..0.13),
            eye_r: rng.random_range(0.03..0.05),
            iris,
            mouth_w: rng.random_range(0.07..0.12),
            mouth_y: rng.random_range(0.14..0.2),
            lips,
            light: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.0)],
        }
    }

    fn shade(&self, u: f64, v: f64, px: f64) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            rgb[c] = self.bg_a[c] * (1.0 - v) + self.bg_b[c] * v;
        }
        for (p, r, col) in &self.blobs {
            let d2 = (u - p[0]).powi(2) + (v - p[1]).powi(2);
            let g = (-d2 / (2.0 * r * r)).exp();
            for c in 0..3 {
                rgb[c] += col[c] * g;
            }
        }
        let [cx, cy] = self.center;
        let [rx, ry] = self.radii;
        let blend = |rgb: &mut [f64; 3], col: &[f64; 3], alpha: f64| {
            for c in 0..3 {
                rgb[c] = rgb[c] * (1.0 - alpha) + col[c] * alpha;
            }
        };
        // hair: a larger ellipse behind the face, cut off below the ears
        let hd = ((u - cx) / (rx * 1.15)).powi(2) + ((v - cy + 0.06) / (ry * 1.05)).powi(2);
        let hair_alpha = (1.0 - smoothstep(1.0, 2.0 * px, hd.sqrt())) * (1.0 - smoothstep(cy + 0.05, px * 2.0, v));
        blend(&mut rgb, &self.hair, hair_alpha);
        let fd = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
        let light = 1.0 - 0.35 * (((u - cx - self.light[0] * rx).powi(2) + (v - cy - self.light[1] * ry).powi(2)).sqrt() / rx).min(1.0);
        let skin = self.skin.map(|s| s * light);
        blend(&mut rgb, &skin, 1.0 - smoothstep(1.0, 2.0 * px / rx, fd));
        for side in [-1.0, 1.0] {
            let ex = cx + side * self.eye_dx;
            let ey = cy - self.eye_dy;
            let ed = (((u - ex) / (self.eye_r * 1.6)).powi(2) + ((v - ey) / self.eye_r).powi(2)).sqrt();
            blend(&mut rgb, &[0.95, 0.95, 0.93], 1.0 - smoothstep(1.0, 2.0 * px / self.eye_r, ed));
            let id = ((u - ex).powi(2) + (v - ey).powi(2)).sqrt();
            blend(&mut rgb, &self.iris, 1.0 - smoothstep(self.eye_r * 0.7, px, id));
            let brow = ((u - ex) / (self.eye_r * 2.0)).powi(2) + ((v - ey + self.eye_r * 1.8) / (self.eye_r * 0.35)).powi(2);
            blend(&mut rgb, &self.hair, 1.0 - smoothstep(1.0, 0.5, brow));
        }
        let nose = ((u - cx) / 0.015).powi(2) + ((v - cy - 0.04) / 0.06).powi(2);
        blend(&mut rgb, &skin.map(|s| s * 0.8), (1.0 - smoothstep(1.0, 0.6, nose)) * 0.6);
        let md = (((u - cx) / self.mouth_w).powi(2) + ((v - cy - self.mouth_y) / 0.025).powi(2)).sqrt();
        blend(&mut rgb, &self.lips, 1.0 - smoothstep(1.0, 2.0 * px / 0.025, md));
        rgb.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Renders a seeded synthetic face: smooth background blobs, a shaded head,
/// eyes, brows, nose and mouth with pixel-scale edges.
pub fn synth_face(hr_size: usize, seed: u64, index: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let params = FaceParams::sample(&mut rng);
    let px = 1.0 / hr_size as f64;
    ImageTensor::from_fn(hr_size, hr_size, |y, x| {
        params.shade((x as f64 + 0.5) * px, (y as f64 + 0.5) * px, px)
    })
    .quantized()
}

/// Writes `train_count + test_count` synthetic faces plus a manifest.
pub fn synth_dataset_split(
    train_count: usize,
    test_count: usize,
    hr_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if train_count == 0 {
        return Err(FurnError::EmptySplit("train".into()));
    }
    if hr_size < 8 {
        return Err(FurnError::InvalidConfig(format!("hr_size {hr_size} is below 8")));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| FurnError::io(images.display(), e))?;
    let mut entries = Vec::new();
    for i in 0..train_count + test_count {
        let name = format!("images/face_{i:05}.png");
        synth_face(hr_size, seed, i as u64).save_png(&out_dir.join(&name))?;
        let split = if i < train_count { Split::Train } else { Split::Test };
        entries.push(ManifestEntry { path: name, split });
    }
    let manifest = DatasetManifest {
        entries,
        hr_size,
        seed,
        version: MANIFEST_VERSION,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// `count` synthetic training faces.
pub fn synth_dataset(count: usize, hr_size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    synth_dataset_split(count, 0, hr_size, seed, out_dir)
}

/// Output of [`prepare_dataset`].
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub manifest: DatasetManifest,
    pub lr_dirs: Vec<(usize, PathBuf)>,
}

/// Crops/resizes every image under `input` to `hr_size`, writes HR images,
/// their LR counterparts for each scale, and a manifest with a seeded
/// train/test split.
pub fn prepare_dataset(
    input: &Path,
    output: &Path,
    hr_size: usize,
    scales: &[usize],
    test_fraction: f64,
    seed: u64,
) -> Result<PreparedDataset> {
    let specs = scales.iter().map(|&s| DegradationSpec::new(s)).collect::<Result<Vec<_>>>()?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(FurnError::InvalidConfig(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| FurnError::io(input.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(FurnError::EmptySplit("input".into()));
    }
    let mut order: Vec<usize> = (0..files.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (files.len() as f64 * test_fraction).round() as usize;
    let test: HashSet<usize> = order[..n_test].iter().copied().collect();

    let mut entries = Vec::new();
    for (i, file) in files.iter().enumerate() {
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let img = center_crop_resize(&load_image(file)?, hr_size)?;
        let hr_name = format!("hr/{stem}.png");
        img.save_png(&output.join(&hr_name))?;
        for spec in &specs {
            let (_, lr) = make_pair(&img, spec)?;
            lr.save_png(&output.join(format!("lr_x{}/{stem}.png", spec.scale)))?;
        }
        let split = if test.contains(&i) { Split::Test } else { Split::Train };
        entries.push(ManifestEntry { path: hr_name, split });
    }
    let manifest = DatasetManifest {
        entries,
        hr_size,
        seed,
        version: MANIFEST_VERSION,
    };
    manifest.validate()?;
    manifest.save(output)?;
    Ok(PreparedDataset {
        manifest,
        lr_dirs: specs.iter().map(|s| (s.scale, output.join(format!("lr_x{}", s.scale)))).collect(),
    })
}
