//! Dataset manifests, image/label IO, preprocessing, splitting, and a
//! synthetic-data generator for desk-scale experiments.
//!
//! On-disk layout: a JSON manifest at the dataset root plus `images/` and
//! `labels/` directories of 8-bit grayscale PNGs (label PNGs store raw class
//! ids). The manifest schema is versioned via `format_version`.

use crate::prompt_geometry::{connected_components, BinaryMask, Connectivity};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("manifest schema violations:\n{}", .0.join("\n"))]
    Schema(Vec<String>),
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("sample {id}: label value {value} out of range for {num_classes} classes")]
    LabelOutOfRange {
        id: String,
        value: usize,
        num_classes: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One dataset entry. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    #[serde(default)]
    pub label_path: Option<String>,
    /// Grouping key (e.g. patient): all entries of one group land in one
    /// split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Stratification key (e.g. lesion category): split fractions are
    /// applied per category.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// Physical pixel size (row, col).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<(f64, f64)>,
}

/// Split membership by entry id.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SplitSets {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitSets {
    pub fn ids(&self, kind: SplitKind) -> &[String] {
        match kind {
            SplitKind::Labeled => &self.labeled_ids,
            SplitKind::Unlabeled => &self.unlabeled_ids,
            SplitKind::Val => &self.val_ids,
            SplitKind::Test => &self.test_ids,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_classes: usize,
    /// Seed the split (and, for synthetic data, the content) was generated
    /// with.
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub split: SplitSets,
}

impl DatasetManifest {
    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Structural checks: unique ids, split ids disjoint and known, labeled
    /// entries carry a label path. Violations are collected, not
    /// short-circuited.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut problems = Vec::new();
        if self.format_version != MANIFEST_VERSION {
            problems.push(format!(
                "unsupported format_version {} (expected {MANIFEST_VERSION})",
                self.format_version
            ));
        }
        if self.num_classes < 2 {
            problems.push(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                problems.push(format!("duplicate entry id {:?}", e.id));
            }
        }
        let mut membership: HashMap<&str, &str> = HashMap::new();
        let sets: [(&str, &[String]); 4] = [
            ("labeled", &self.split.labeled_ids),
            ("unlabeled", &self.split.unlabeled_ids),
            ("val", &self.split.val_ids),
            ("test", &self.split.test_ids),
        ];
        for (name, ids) in sets {
            for id in ids {
                if !seen.contains(id.as_str()) {
                    problems.push(format!("split {name} references unknown id {id:?}"));
                }
                if let Some(prev) = membership.insert(id.as_str(), name) {
                    problems.push(format!("id {id:?} appears in both {prev} and {name}"));
                }
            }
        }
        for id in self
            .split
            .labeled_ids
            .iter()
            .chain(&self.split.val_ids)
            .chain(&self.split.test_ids)
        {
            if let Some(e) = self.entry(id) {
                if e.label_path.is_none() {
                    problems.push(format!("id {id:?} needs a label but label_path is null"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::Schema(problems))
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// In-memory sample: grayscale intensity image plus optional integer label
/// map.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Array2<f64>,
    pub label: Option<Array2<usize>>,
    pub spacing: (f64, f64),
}

/// Write an intensity image in [0, 1] as an 8-bit grayscale PNG.
pub fn write_image_png(path: &Path, image: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = image.dim();
    let buf: Vec<u8> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    img.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_image_png(path: &Path) -> Result<Array2<f64>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    }))
}

/// Write a label map as an 8-bit PNG of raw class ids.
pub fn write_label_png(path: &Path, label: &Array2<usize>) -> Result<(), DataError> {
    let (h, w) = label.dim();
    let buf: Vec<u8> = label
        .iter()
        .map(|&v| u8::try_from(v).expect("class id fits in u8"))
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    img.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_label_png(path: &Path) -> Result<Array2<usize>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as usize
    }))
}

/// Load one entry's files, checking label values against `num_classes`.
/// `root` is the directory containing the manifest.
pub fn load_sample(
    root: &Path,
    entry: &ManifestEntry,
    num_classes: usize,
) -> Result<ImageSample, DataError> {
    let image = read_image_png(&root.join(&entry.image_path))?;
    let label = match &entry.label_path {
        None => None,
        Some(p) => {
            let map = read_label_png(&root.join(p))?;
            if let Some(&bad) = map.iter().find(|&&v| v >= num_classes) {
                return Err(DataError::LabelOutOfRange {
                    id: entry.id.clone(),
                    value: bad,
                    num_classes,
                });
            }
            Some(map)
        }
    };
    Ok(ImageSample {
        id: entry.id.clone(),
        image,
        label,
        spacing: entry.spacing.unwrap_or((1.0, 1.0)),
    })
}

/// Load every sample of a split, in split order.
pub fn load_split(
    root: &Path,
    manifest: &DatasetManifest,
    kind: SplitKind,
) -> Result<Vec<ImageSample>, DataError> {
    manifest
        .split
        .ids(kind)
        .iter()
        .map(|id| {
            let entry = manifest
                .entry(id)
                .ok_or_else(|| DataError::Schema(vec![format!("unknown id {id:?}")]))?;
            load_sample(root, entry, manifest.num_classes)
        })
        .collect()
}

/// Bilinear resize with half-pixel-center coordinate mapping; a same-size
/// resize is an exact copy.
pub fn bilinear_resize(src: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let (th, tw) = target;
    let sy = sh as f64 / th as f64;
    let sx = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let wy = fy - y0 as f64;
        let wx = fx - x0 as f64;
        src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
            + src[[y0, x1]] * (1.0 - wy) * wx
            + src[[y1, x0]] * wy * (1.0 - wx)
            + src[[y1, x1]] * wy * wx
    })
}

/// Nearest-neighbor resize for label maps; never invents class values.
pub fn nearest_resize(src: &Array2<usize>, target: (usize, usize)) -> Array2<usize> {
    let (sh, sw) = src.dim();
    let (th, tw) = target;
    let sy = sh as f64 / th as f64;
    let sx = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let y = (((r as f64 + 0.5) * sy).floor() as usize).min(sh - 1);
        let x = (((c as f64 + 0.5) * sx).floor() as usize).min(sw - 1);
        src[[y, x]]
    })
}

/// Resize to `target` (image bilinearly, label by nearest neighbor) and
/// min-max normalize the image per sample to [0, 1]. The flag reports a
/// constant input image, which normalizes to all zeros.
pub fn preprocess(sample: &ImageSample, target: (usize, usize)) -> (ImageSample, bool) {
    let mut image = bilinear_resize(&sample.image, target);
    let min = image.iter().copied().fold(f64::INFINITY, f64::min);
    let max = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let constant = max <= min;
    if constant {
        image.fill(0.0);
    } else {
        image.mapv_inplace(|v| (v - min) / (max - min));
    }
    let label = sample.label.as_ref().map(|l| nearest_resize(l, target));
    (
        ImageSample {
            id: sample.id.clone(),
            image,
            label,
            spacing: sample.spacing,
        },
        constant,
    )
}

/// Split request. Fractions apply to the full entry count (per category when
/// categories are present); the remainder after val/test is the training
/// pool, from which `n_labeled` labeled entries are drawn.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

/// Deterministic group-aware stratified split. Whole groups are assigned to
/// one split; fractions are applied within each category proportionally, and
/// `n_labeled` is apportioned across categories by training-pool size
/// (largest remainder).
pub fn make_split(entries: &[ManifestEntry], spec: &SplitSpec) -> Result<SplitSets, DataError> {
    if !(0.0..1.0).contains(&spec.val_frac)
        || !(0.0..1.0).contains(&spec.test_frac)
        || spec.val_frac + spec.test_frac >= 1.0
    {
        return Err(DataError::InfeasibleSplit(format!(
            "val_frac {} + test_frac {} must leave a training pool",
            spec.val_frac, spec.test_frac
        )));
    }

    // categories in sorted order so sub-seeds are stable
    let mut by_category: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        by_category
            .entry(e.category.as_deref().unwrap_or(""))
            .or_default()
            .push(e);
    }

    struct CategoryPools<'a> {
        train: Vec<&'a ManifestEntry>,
        val: Vec<&'a ManifestEntry>,
        test: Vec<&'a ManifestEntry>,
    }

    let mut pools: Vec<CategoryPools> = Vec::new();
    for (ci, (_, cat_entries)) in by_category.iter().enumerate() {
        // whole groups, in first-appearance order, shuffled deterministically
        let mut groups: Vec<(String, Vec<&ManifestEntry>)> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for &e in cat_entries {
            let key = e.group.clone().unwrap_or_else(|| e.id.clone());
            match index.get(&key) {
                Some(&i) => groups[i].1.push(e),
                None => {
                    index.insert(key.clone(), groups.len());
                    groups.push((key, vec![e]));
                }
            }
        }
        let sub_seed = spec.seed ^ (ci as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        for i in (1..groups.len()).rev() {
            groups.swap(i, rng.gen_range(0..=i));
        }

        let total: usize = cat_entries.len();
        let want_test = (spec.test_frac * total as f64).round() as usize;
        let want_val = (spec.val_frac * total as f64).round() as usize;
        let mut p = CategoryPools {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (_, members) in groups {
            if p.test.len() < want_test {
                p.test.extend(members);
            } else if p.val.len() < want_val {
                p.val.extend(members);
            } else {
                p.train.extend(members);
            }
        }
        pools.push(p);
    }

    let train_total: usize = pools.iter().map(|p| p.train.len()).sum();
    if spec.n_labeled > train_total {
        return Err(DataError::InfeasibleSplit(format!(
            "n_labeled {} exceeds training pool of {train_total}",
            spec.n_labeled
        )));
    }

    // largest-remainder apportionment of the labeled budget across categories
    let mut quota: Vec<usize> = Vec::new();
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    for (i, p) in pools.iter().enumerate() {
        let exact = spec.n_labeled as f64 * p.train.len() as f64 / train_total.max(1) as f64;
        quota.push(exact.floor() as usize);
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = spec.n_labeled - quota.iter().sum::<usize>();
    for &(i, _) in &remainders {
        if short == 0 {
            break;
        }
        if quota[i] < pools[i].train.len() {
            quota[i] += 1;
            short -= 1;
        }
    }
    if short > 0 {
        // some category hit its pool size; spill the rest anywhere feasible
        for (i, p) in pools.iter().enumerate() {
            while short > 0 && quota[i] < p.train.len() {
                quota[i] += 1;
                short -= 1;
            }
        }
    }

    let mut split = SplitSets::default();
    for (p, q) in pools.iter().zip(&quota) {
        for (j, e) in p.train.iter().enumerate() {
            if j < *q {
                if e.label_path.is_none() {
                    return Err(DataError::InfeasibleSplit(format!(
                        "entry {:?} selected as labeled but has no label_path",
                        e.id
                    )));
                }
                split.labeled_ids.push(e.id.clone());
            } else {
                split.unlabeled_ids.push(e.id.clone());
            }
        }
        split.val_ids.extend(p.val.iter().map(|e| e.id.clone()));
        split.test_ids.extend(p.test.iter().map(|e| e.id.clone()));
    }
    Ok(split)
}

/// Synthetic dataset request.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub resolution: (usize, usize),
    pub num_classes: usize,
    pub seed: u64,
    pub n_labeled: usize,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 40,
            resolution: (48, 48),
            num_classes: 3,
            seed: 0,
            n_labeled: 5,
            val_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Intensity band center for a foreground class; bands are well separated so
/// shape, not texture, is the thing to learn.
fn class_band(class_id: usize) -> f64 {
    match class_id {
        1 => 0.55,
        2 => 0.78,
        _ => 0.95,
    }
}

enum BlobShape {
    /// Axis-aligned ellipse.
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    /// Circular ring with a genuine hole.
    Annulus {
        cy: f64,
        cx: f64,
        outer: f64,
        inner: f64,
    },
}

impl BlobShape {
    /// Inside test plus a normalized radial coordinate in [0, 1] used for
    /// the soft intensity falloff.
    fn contains(&self, r: usize, c: usize) -> Option<f64> {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        match *self {
            BlobShape::Ellipse { cy, cx, ry, rx } => {
                let d = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
                (d <= 1.0).then(|| d.sqrt())
            }
            BlobShape::Annulus {
                cy,
                cx,
                outer,
                inner,
            } => {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                if d <= outer && d >= inner {
                    // 0 mid-ring, 1 at either rim
                    let mid = (outer + inner) / 2.0;
                    let half = (outer - inner) / 2.0;
                    Some(((d - mid).abs() / half).min(1.0))
                } else {
                    None
                }
            }
        }
    }

    fn bbox_separated(&self, other: &BlobShape, margin: f64) -> bool {
        fn bounds(s: &BlobShape) -> (f64, f64, f64, f64) {
            match *s {
                BlobShape::Ellipse { cy, cx, ry, rx } => (cy - ry, cy + ry, cx - rx, cx + rx),
                BlobShape::Annulus { cy, cx, outer, .. } => {
                    (cy - outer, cy + outer, cx - outer, cx + outer)
                }
            }
        }
        let (a0, a1, b0, b1) = bounds(self);
        let (c0, c1, d0, d1) = bounds(other);
        a1 + margin < c0 || c1 + margin < a0 || b1 + margin < d0 || d1 + margin < b0
    }
}

/// Generate one sample: one blob per foreground class (ellipses, with an
/// annulus for class 2), pairwise separated, on a noisy gradient background.
/// Deterministic given the RNG state.
pub fn synthesize_sample(
    rng: &mut ChaCha8Rng,
    resolution: (usize, usize),
    num_classes: usize,
    id: &str,
) -> ImageSample {
    assert!(num_classes >= 2, "need at least one foreground class");
    let (h, w) = resolution;
    let min_dim = h.min(w) as f64;

    let mut shapes: Vec<(usize, BlobShape)> = Vec::new();
    for class_id in 1..num_classes {
        // retry with shrinking radii until the blob clears the others
        let mut scale = 1.0;
        loop {
            let candidate = if class_id == 2 {
                let outer = rng.gen_range(0.13..0.20) * min_dim * scale;
                // keep the ring ≥ ~2.5 px wide and the hole ≥ 1 px so the
                // topology contract survives shrinking
                let inner = (outer * rng.gen_range(0.40..0.55))
                    .min(outer - 2.5)
                    .max(1.0);
                let cy = rng.gen_range(outer + 1.0..h as f64 - outer - 1.0);
                let cx = rng.gen_range(outer + 1.0..w as f64 - outer - 1.0);
                BlobShape::Annulus {
                    cy,
                    cx,
                    outer,
                    inner,
                }
            } else {
                let ry = rng.gen_range(0.09..0.17) * min_dim * scale;
                let rx = rng.gen_range(0.09..0.17) * min_dim * scale;
                let cy = rng.gen_range(ry + 1.0..h as f64 - ry - 1.0);
                let cx = rng.gen_range(rx + 1.0..w as f64 - rx - 1.0);
                BlobShape::Ellipse { cy, cx, ry, rx }
            };
            if shapes
                .iter()
                .all(|(_, s)| s.bbox_separated(&candidate, 1.5))
            {
                shapes.push((class_id, candidate));
                break;
            }
            scale = (scale * 0.93).max(0.55);
        }
    }

    let mut label = Array2::<usize>::zeros((h, w));
    let mut image = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            // gently sloped, noisy background
            let grad = 0.10 + 0.12 * (r + c) as f64 / (h + w) as f64;
            let mut v = grad + rng.gen_range(-0.04..0.04);
            for (class_id, shape) in &shapes {
                if let Some(rho) = shape.contains(r, c) {
                    label[[r, c]] = *class_id;
                    v = class_band(*class_id) * (1.0 - 0.20 * rho * rho)
                        + rng.gen_range(-0.03..0.03);
                    break;
                }
            }
            image[[r, c]] = v.clamp(0.0, 1.0);
        }
    }
    ImageSample {
        id: id.to_string(),
        image,
        label: Some(label),
        spacing: (1.0, 1.0),
    }
}

/// Generate a synthetic dataset on disk (images/, labels/, manifest.json)
/// and return the manifest. Bitwise deterministic per seed.
pub fn generate_synthetic(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest, DataError> {
    let images = out_dir.join("images");
    let labels = out_dir.join("labels");
    std::fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    std::fs::create_dir_all(&labels).map_err(|e| io_err(&labels, e))?;

    let mut entries = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        // per-sample stream: sample i is identical regardless of n_samples
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ splitmix64(i as u64 + 1));
        let id = format!("synth_{i:05}");
        let sample = synthesize_sample(&mut rng, cfg.resolution, cfg.num_classes, &id);
        let image_rel = format!("images/{id}.png");
        let label_rel = format!("labels/{id}.png");
        write_image_png(&out_dir.join(&image_rel), &sample.image)?;
        write_label_png(
            &out_dir.join(&label_rel),
            sample.label.as_ref().expect("generated"),
        )?;
        entries.push(ManifestEntry {
            id,
            image_path: image_rel,
            label_path: Some(label_rel),
            group: None,
            category: None,
            spacing: None,
        });
    }

    let split = make_split(
        &entries,
        &SplitSpec {
            n_labeled: cfg.n_labeled,
            val_frac: cfg.val_frac,
            test_frac: cfg.test_frac,
            seed: cfg.seed,
        },
    )?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        num_classes: cfg.num_classes,
        seed: cfg.seed,
        entries,
        split,
    };
    save_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Topology check used by tests and the generator contract: exactly one
/// foreground component (8-connected) whose complement has exactly two
/// 4-connected components (outside plus one hole).
pub fn is_single_component_with_hole(mask: &BinaryMask) -> bool {
    let fg = connected_components(mask, Connectivity::Eight);
    let complement = BinaryMask::from_fn(mask.height(), mask.width(), |r, c| !mask.get(r, c));
    let bg = connected_components(&complement, Connectivity::Four);
    fg.sizes.len() == 1 && bg.sizes.len() == 2
}
