//! Tooth crops from segmentation output, and the train/val/test manifests
//! built on top of them.
//!
//! Every detected tooth yields two crops centred on its centroid:
//! a "less context" 224x224 window copied as is, and a "more context"
//! 380x380 window resized to 224x224 with bilinear interpolation. Windows
//! that would cross the image border are shifted inwards (clamped), never
//! padded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{LabelMatrix, ToothIndex};
use crate::report::{validate_fdi, FdiTooth};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_OVERSAMPLE_FACTOR: u32 = 10;
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Error)]
pub enum CropError {
    #[error("segmentation manifest: {0}")]
    ManifestParse(String),
    #[error("image {0} has no width/height in the manifest")]
    MissingImageDimensions(String),
    #[error("image {width}x{height} is smaller than a {side}px window")]
    ImageTooSmall { width: u32, height: u32, side: u32 },
    #[error("image {image_id} is {found:?}, manifest says {expected:?}")]
    DimensionMismatch {
        image_id: String,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("bad split ratios {0:?}: must be positive and sum to 1")]
    BadRatios(Vec<f64>),
    #[error("condition {index} is not in the vocabulary (1..={size})")]
    UnknownCondition { index: usize, size: usize },
    #[error("manifest has no train entries")]
    NoTrainSplit,
    #[error("oversampling factor must be at least 1")]
    BadFactor,
    #[error("invalid crop id {0:?}")]
    BadCropId(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = CropError> = std::result::Result<T, E>;

/// One tooth of one radiograph. Its id is `{image_id}_{fdi}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CropRef {
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
}

impl CropRef {
    pub fn new(image_id: impl Into<String>, tooth: FdiTooth) -> Self {
        CropRef {
            image_id: image_id.into(),
            tooth,
        }
    }

    pub fn crop_id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CropRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.image_id, self.tooth)
    }
}

impl FromStr for CropRef {
    type Err = CropError;

    fn from_str(s: &str) -> Result<Self> {
        let (image, fdi) = s
            .rsplit_once('_')
            .ok_or_else(|| CropError::BadCropId(s.into()))?;
        if image.is_empty() {
            return Err(CropError::BadCropId(s.into()));
        }
        let tooth = fdi.parse().map_err(|_| CropError::BadCropId(s.into()))?;
        Ok(CropRef::new(image, tooth))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.width / 2.0, self.y + self.height / 2.0)
    }

    fn contains(&self, (px, py): (f64, f64)) -> bool {
        px >= self.x && px <= self.x + self.width && py >= self.y && py <= self.y + self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToothInstance {
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
    pub score: f64,
    pub bbox: BBox,
    pub centroid: (f64, f64),
}

impl ToothInstance {
    pub fn crop_ref(&self) -> CropRef {
        CropRef::new(self.image_id.clone(), self.tooth)
    }
}

#[derive(Deserialize)]
struct RawManifest {
    images: Vec<RawImage>,
}

#[derive(Deserialize)]
struct RawImage {
    image_id: String,
    width: Option<u32>,
    height: Option<u32>,
    #[serde(default)]
    instances: Vec<RawInstance>,
}

#[derive(Deserialize)]
struct RawInstance {
    fdi: u32,
    score: Option<f64>,
    bbox: [f64; 4],
    polygon: Option<Vec<[f64; 2]>>,
}

/// Filtered, deduplicated detections with their image sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSet {
    pub images: BTreeMap<String, (u32, u32)>,
    /// Sorted by (image_id, tooth); at most one per pair.
    pub instances: Vec<ToothInstance>,
}

impl SegmentationSet {
    pub fn tooth_index(&self) -> ToothIndex {
        let mut index: ToothIndex = self
            .images
            .keys()
            .map(|k| (k.clone(), BTreeSet::new()))
            .collect();
        for inst in &self.instances {
            index
                .entry(inst.image_id.clone())
                .or_default()
                .insert(inst.tooth);
        }
        index
    }

    pub fn instances_jsonl(&self) -> String {
        self.instances
            .iter()
            .map(|i| serde_json::to_string(i).expect("instance serializes") + "\n")
            .collect()
    }
}

fn polygon_centroid(points: &[[f64; 2]]) -> Option<(f64, f64)> {
    if points.len() < 3 {
        return None;
    }
    let (mut area, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..points.len() {
        let [x0, y0] = points[i];
        let [x1, y1] = points[(i + 1) % points.len()];
        let cross = x0 * y1 - x1 * y0;
        area += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    if area.abs() < 1e-9 {
        return None;
    }
    Some((cx / (3.0 * area), cy / (3.0 * area)))
}

/// Parses a segmentation manifest. Detections scoring below `threshold` are
/// dropped; missing scores count as 1.0 (ground-truth annotations); the best
/// scoring detection wins when a tooth appears twice in one image.
pub fn parse_segmentation_manifest(text: &str, threshold: f64) -> Result<SegmentationSet> {
    let raw: RawManifest =
        serde_json::from_str(text).map_err(|e| CropError::ManifestParse(e.to_string()))?;
    let mut set = SegmentationSet::default();
    let mut best: BTreeMap<(String, FdiTooth), ToothInstance> = BTreeMap::new();
    for img in raw.images {
        let (Some(w), Some(h)) = (img.width, img.height) else {
            return Err(CropError::MissingImageDimensions(img.image_id));
        };
        if set.images.insert(img.image_id.clone(), (w, h)).is_some() {
            return Err(CropError::ManifestParse(format!(
                "image {} listed twice",
                img.image_id
            )));
        }
        for inst in img.instances {
            let tooth = validate_fdi(inst.fdi)
                .map_err(|e| CropError::ManifestParse(format!("image {}: {e}", img.image_id)))?;
            let score = inst.score.unwrap_or(1.0);
            if !(0.0..=1.0).contains(&score) {
                return Err(CropError::ManifestParse(format!(
                    "image {} tooth {tooth}: score {score} outside [0, 1]",
                    img.image_id
                )));
            }
            if score < threshold {
                continue;
            }
            let [bx, by, bw, bh] = inst.bbox;
            let x0 = bx.clamp(0.0, w as f64);
            let y0 = by.clamp(0.0, h as f64);
            let x1 = (bx + bw).clamp(0.0, w as f64);
            let y1 = (by + bh).clamp(0.0, h as f64);
            if x1 <= x0 || y1 <= y0 {
                return Err(CropError::ManifestParse(format!(
                    "image {} tooth {tooth}: bounding box outside the image",
                    img.image_id
                )));
            }
            let bbox = BBox {
                x: x0,
                y: y0,
                width: x1 - x0,
                height: y1 - y0,
            };
            let mut centroid = inst
                .polygon
                .as_deref()
                .and_then(polygon_centroid)
                .unwrap_or_else(|| bbox.center());
            if !bbox.contains(centroid) {
                centroid = (centroid.0.clamp(x0, x1), centroid.1.clamp(y0, y1));
            }
            let candidate = ToothInstance {
                image_id: img.image_id.clone(),
                tooth,
                score,
                bbox,
                centroid,
            };
            let key = (img.image_id.clone(), tooth);
            if best.get(&key).is_none_or(|b| score > b.score) {
                best.insert(key, candidate);
            }
        }
    }
    set.instances = best.into_values().collect();
    Ok(set)
}

pub fn load_segmentation_manifest(path: &Path, threshold: f64) -> Result<SegmentationSet> {
    let text = fs::read_to_string(path).map_err(|source| CropError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_segmentation_manifest(&text, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Less,
    More,
}

impl ContextKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            ContextKind::Less => "less",
            ContextKind::More => "more",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSides {
    pub less: u32,
    pub more: u32,
    pub output: u32,
}

impl Default for CropSides {
    fn default() -> Self {
        CropSides {
            less: 224,
            more: 380,
            output: 224,
        }
    }
}

impl CropSides {
    pub fn window(&self, kind: ContextKind) -> u32 {
        match kind {
            ContextKind::Less => self.less,
            ContextKind::More => self.more,
        }
    }
}

/// A square window inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
    /// Window centre minus requested centre, non-zero only after clamping.
    pub deviation: (f64, f64),
}

/// Centres a `side` window on `centroid`, shifted inside the image if needed.
pub fn crop_window(centroid: (f64, f64), side: u32, dims: (u32, u32)) -> Result<Window> {
    let (w, h) = dims;
    if w < side || h < side {
        return Err(CropError::ImageTooSmall {
            width: w,
            height: h,
            side,
        });
    }
    let place = |c: f64, limit: u32| -> u32 {
        let ideal = (c - side as f64 / 2.0).round();
        ideal.clamp(0.0, (limit - side) as f64) as u32
    };
    let x0 = place(centroid.0, w);
    let y0 = place(centroid.1, h);
    let half = side as f64 / 2.0;
    Ok(Window {
        x0,
        y0,
        side,
        deviation: (x0 as f64 + half - centroid.0, y0 as f64 + half - centroid.1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub crop_id: String,
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
    pub context: ContextKind,
    pub window: Window,
    pub output_side: u32,
}

impl CropSpec {
    pub fn for_instance(
        inst: &ToothInstance,
        kind: ContextKind,
        sides: &CropSides,
        dims: (u32, u32),
    ) -> Result<Self> {
        Ok(CropSpec {
            crop_id: inst.crop_ref().crop_id(),
            image_id: inst.image_id.clone(),
            tooth: inst.tooth,
            context: kind,
            window: crop_window(inst.centroid, sides.window(kind), dims)?,
            output_side: sides.output,
        })
    }
}

/// Pixels under the window, without resizing.
pub fn window_pixels(raster: &GrayImage, window: &Window) -> GrayImage {
    image::imageops::crop_imm(raster, window.x0, window.y0, window.side, window.side).to_image()
}

/// Bilinear resampling with pixel centres at half-integer coordinates.
pub fn resize_bilinear(src: &GrayImage, out_w: u32, out_h: u32) -> GrayImage {
    let (sw, sh) = src.dimensions();
    let sx = sw as f64 / out_w as f64;
    let sy = sh as f64 / out_h as f64;
    let coord = |o: u32, scale: f64, size: u32| -> (u32, u32, f64) {
        let u = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
        let i0 = u.floor() as u32;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, u - i0 as f64)
    };
    ImageBuffer::from_fn(out_w, out_h, |ox, oy| {
        let (x0, x1, fx) = coord(ox, sx, sw);
        let (y0, y1, fy) = coord(oy, sy, sh);
        let p = |x, y| src.get_pixel(x, y)[0] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        let v = top * (1.0 - fy) + bottom * fy;
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// Extracts the crop described by `spec` at its output size.
pub fn extract_crop(
    raster: &GrayImage,
    spec: &CropSpec,
    expected_dims: (u32, u32),
) -> Result<GrayImage> {
    if raster.dimensions() != expected_dims {
        return Err(CropError::DimensionMismatch {
            image_id: spec.image_id.clone(),
            expected: expected_dims,
            found: raster.dimensions(),
        });
    }
    let window = window_pixels(raster, &spec.window);
    if spec.window.side == spec.output_side {
        Ok(window)
    } else {
        Ok(resize_bilinear(&window, spec.output_side, spec.output_side))
    }
}

/// Writes `less/`, `more/` and `more_raw/` PNG crops for every instance.
/// Images are read from `{images_dir}/{image_id}.png`.
pub fn generate_crops(
    seg: &SegmentationSet,
    images_dir: &Path,
    out_dir: &Path,
    sides: &CropSides,
) -> Result<Vec<CropSpec>> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| CropError::Io { path, source }
    };
    for sub in ["less", "more", "more_raw"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(io(&out_dir.join(sub)))?;
    }
    let mut by_image: BTreeMap<&str, Vec<&ToothInstance>> = BTreeMap::new();
    for inst in &seg.instances {
        by_image.entry(&inst.image_id).or_default().push(inst);
    }
    let specs: Vec<Vec<CropSpec>> = by_image
        .par_iter()
        .map(|(image_id, instances)| {
            let dims = seg.images[*image_id];
            let path = images_dir.join(format!("{image_id}.png"));
            let raster = image::open(&path)
                .map_err(|source| CropError::Image {
                    path: path.display().to_string(),
                    source,
                })?
                .into_luma8();
            let mut out = Vec::new();
            for inst in instances {
                for kind in [ContextKind::Less, ContextKind::More] {
                    let spec = CropSpec::for_instance(inst, kind, sides, dims)?;
                    let crop = extract_crop(&raster, &spec, dims)?;
                    let target = out_dir
                        .join(kind.dir_name())
                        .join(format!("{}.png", spec.crop_id));
                    crop.save(&target).map_err(|source| CropError::Image {
                        path: target.display().to_string(),
                        source,
                    })?;
                    if kind == ContextKind::More {
                        let raw = window_pixels(&raster, &spec.window);
                        let target = out_dir
                            .join("more_raw")
                            .join(format!("{}.png", spec.crop_id));
                        raw.save(&target).map_err(|source| CropError::Image {
                            path: target.display().to_string(),
                            source,
                        })?;
                    }
                    out.push(spec);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(specs.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub crop_id: String,
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
    pub split: Split,
    pub repetition: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub entries: Vec<SplitEntry>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CropError::BadRatios(ratios.to_vec()));
    }
    Ok(())
}

/// Assigns whole radiographs to train/val/test by a seeded shuffle, so all
/// crops of an image share one split.
pub fn split_dataset(crops: &[CropRef], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    check_ratios(ratios)?;
    let mut images: Vec<&str> = crops.iter().map(|c| c.image_id.as_str()).collect();
    images.sort_unstable();
    images.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.shuffle(&mut rng);
    let n = images.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let assignment: BTreeMap<&str, Split> = images
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (*id, split)
        })
        .collect();
    let mut entries: Vec<SplitEntry> = crops
        .iter()
        .map(|c| SplitEntry {
            crop_id: c.crop_id(),
            image_id: c.image_id.clone(),
            tooth: c.tooth,
            split: assignment[c.image_id.as_str()],
            repetition: 1,
        })
        .collect();
    entries.sort_by(|a, b| (&a.image_id, a.tooth).cmp(&(&b.image_id, b.tooth)));
    entries.dedup_by(|a, b| a.crop_id == b.crop_id);
    Ok(SplitManifest {
        entries,
        seed,
        ratios,
    })
}

/// Sets `repetition = factor` on train entries positive for `condition`.
pub fn oversample_positives(
    manifest: &SplitManifest,
    labels: &LabelMatrix,
    condition: usize,
    factor: u32,
) -> Result<SplitManifest> {
    let size = labels.vocabulary.len();
    if condition == 0 || condition > size {
        return Err(CropError::UnknownCondition {
            index: condition,
            size,
        });
    }
    if factor == 0 {
        return Err(CropError::BadFactor);
    }
    if !manifest.entries.iter().any(|e| e.split == Split::Train) {
        return Err(CropError::NoTrainSplit);
    }
    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.repetition = if e.split == Split::Train && labels.label(&e.image_id, e.tooth, condition) {
            factor
        } else {
            1
        };
    }
    Ok(out)
}

impl SplitManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn images(&self, split: Split) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.image_id.as_str())
            .collect()
    }

    /// Entries repeated according to their repetition counts.
    pub fn expanded(&self) -> impl Iterator<Item = &SplitEntry> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat_n(e, e.repetition as usize))
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(code: u32) -> FdiTooth {
        validate_fdi(code).unwrap()
    }

    #[test]
    fn crop_ref_round_trip() {
        let r = CropRef::new("img_01", t(36));
        assert_eq!(r.crop_id(), "img_01_36");
        assert_eq!("img_01_36".parse::<CropRef>().unwrap(), r);
        assert!("nounderscore".parse::<CropRef>().is_err());
        assert!("_36".parse::<CropRef>().is_err());
        assert!("img_19".parse::<CropRef>().is_err());
    }

    #[test]
    fn window_examples() {
        let w = crop_window((1220.0, 646.0), 224, (2440, 1292)).unwrap();
        assert_eq!((w.x0, w.y0), (1108, 534));
        assert_eq!(w.deviation, (0.0, 0.0));
        let w = crop_window((40.0, 40.0), 224, (2440, 1292)).unwrap();
        assert_eq!((w.x0, w.y0), (0, 0));
        assert_eq!(w.deviation, (72.0, 72.0));
        let w = crop_window((2430.0, 1290.0), 380, (2440, 1292)).unwrap();
        assert_eq!((w.x0, w.y0), (2060, 912));
        assert!(matches!(
            crop_window((100.0, 100.0), 224, (200, 200)),
            Err(CropError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn manifest_threshold_dedup_and_defaults() {
        let text = r#"{"images": [
            {"image_id": "a", "width": 1000, "height": 600, "instances": [
                {"fdi": 36, "score": 0.9, "bbox": [100, 100, 50, 80]},
                {"fdi": 36, "score": 0.7, "bbox": [300, 100, 50, 80]},
                {"fdi": 37, "score": 0.49, "bbox": [400, 100, 50, 80]},
                {"fdi": 38, "score": 0.5, "bbox": [500, 100, 50, 80]},
                {"fdi": 11, "bbox": [10, 10, 20, 20],
                 "polygon": [[10, 10], [30, 10], [30, 30], [10, 30]]}
            ]}
        ]}"#;
        let set = parse_segmentation_manifest(text, 0.5).unwrap();
        let codes: Vec<u8> = set.instances.iter().map(|i| i.tooth.code()).collect();
        assert_eq!(codes, [11, 36, 38]);
        assert_eq!(set.instances[0].score, 1.0);
        assert_eq!(set.instances[0].centroid, (20.0, 20.0));
        assert_eq!(set.instances[1].score, 0.9);
        assert_eq!(set.instances[1].centroid, (125.0, 140.0));
        assert_eq!(set.tooth_index()["a"].len(), 3);
    }

    #[test]
    fn manifest_errors() {
        assert!(matches!(
            parse_segmentation_manifest(r#"{"images": [{"image_id": "a", "instances": []}]}"#, 0.5),
            Err(CropError::MissingImageDimensions(id)) if id == "a"
        ));
        assert!(matches!(
            parse_segmentation_manifest("{", 0.5),
            Err(CropError::ManifestParse(_))
        ));
        let bad_fdi = r#"{"images": [{"image_id": "a", "width": 9, "height": 9,
            "instances": [{"fdi": 19, "bbox": [0, 0, 1, 1]}]}]}"#;
        assert!(matches!(
            parse_segmentation_manifest(bad_fdi, 0.5),
            Err(CropError::ManifestParse(_))
        ));
    }

    #[test]
    fn constant_image_crops_are_constant() {
        let img = GrayImage::from_pixel(600, 500, Luma([77]));
        let inst = ToothInstance {
            image_id: "c".into(),
            tooth: t(21),
            score: 1.0,
            bbox: BBox {
                x: 250.0,
                y: 200.0,
                width: 40.0,
                height: 60.0,
            },
            centroid: (270.0, 230.0),
        };
        for kind in [ContextKind::Less, ContextKind::More] {
            let spec =
                CropSpec::for_instance(&inst, kind, &CropSides::default(), (600, 500)).unwrap();
            let crop = extract_crop(&img, &spec, (600, 500)).unwrap();
            assert_eq!(crop.dimensions(), (224, 224));
            assert!(crop.pixels().all(|p| p[0] == 77));
        }
        let spec =
            CropSpec::for_instance(&inst, ContextKind::Less, &CropSides::default(), (600, 500))
                .unwrap();
        assert!(matches!(
            extract_crop(&img, &spec, (601, 500)),
            Err(CropError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bilinear_identity_and_upsample() {
        let img = ImageBuffer::from_fn(5, 4, |x, y| Luma([(x * 10 + y * 3) as u8]));
        assert_eq!(resize_bilinear(&img, 5, 4), img);
        let two = ImageBuffer::from_fn(2, 1, |x, _| Luma([if x == 0 { 0u8 } else { 100 }]));
        let up = resize_bilinear(&two, 4, 1);
        let row: Vec<u8> = up.pixels().map(|p| p[0]).collect();
        // source coords -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
        assert_eq!(row, [0, 25, 75, 100]);
    }

    #[test]
    fn ratios_validation() {
        let crops = vec![CropRef::new("a", t(11))];
        assert!(matches!(
            split_dataset(&crops, [0.5, 0.5, 0.5], 1),
            Err(CropError::BadRatios(_))
        ));
        assert!(matches!(
            split_dataset(&crops, [1.0, 0.0, 0.0], 1),
            Err(CropError::BadRatios(_))
        ));
        assert!(split_dataset(&crops, DEFAULT_RATIOS, 1).is_ok());
    }
}
