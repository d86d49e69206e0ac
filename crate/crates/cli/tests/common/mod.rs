#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const SAMPLE_REPORT: &str = "\
01: Anatomical modification in the right and left mandible condyle.
02: Missing teeth: 18, 28 and 48.
03: Teeth 13 and 38 included and impacted.
04: Tooth 36 and 37: endodontic treatment. Partially filled root canals.
05: Mild bone loss in the region of the present teeth.
06: Modification of the bone trabeculation in the region of tooth 48 compatible with a bone scar.
07: Calcification of the right and left stylohyoid ligament complex.
";

/// Surface forms used in synthetic reports, including plural and synonym
/// variants so grouping is exercised.
pub const SURFACES: &[&str] = &[
    "endodontic treatment",
    "endodontically treated",
    "coronal destruction",
    "included and impacted",
    "periapical bone rarefaction",
    "unfilled root canals",
    "partially filled root canal",
    "metallic core",
    "root fragment",
    "root remnants",
    "increased apical periodontal space",
    "trabecular bone modification",
    "extensive restoration",
    "idiopathic osteosclerosis",
    "unfavorable positioning for eruption",
    "prolonged retention",
];

pub const IMAGE_SIZE: (u32, u32) = (1000, 500);

pub struct Synthetic {
    pub root: PathBuf,
    pub reports_dir: PathBuf,
    pub corpus_manifest: PathBuf,
    pub segmentation: PathBuf,
    pub images_dir: PathBuf,
    pub n_images: usize,
}

pub fn tooth_centroid(fdi: u32) -> (f64, f64) {
    let (q, p) = (fdi / 10, fdi % 10);
    let (w, h) = IMAGE_SIZE;
    let step = 55.0;
    let x = match q {
        1 | 4 => w as f64 / 2.0 - p as f64 * step,
        _ => w as f64 / 2.0 + p as f64 * step,
    };
    let y = if q <= 2 {
        h as f64 * 0.34
    } else {
        h as f64 * 0.66
    };
    (x, y)
}

pub fn raster(seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = IMAGE_SIZE;
    GrayImage::from_fn(w, h, |x, y| {
        Luma([((x * 3 + y * 5) % 200) as u8 + rng.random_range(0..56u8)])
    })
}

/// Writes `n_images` radiographs, one report each, a corpus manifest and a
/// segmentation manifest with four detected teeth per image (plus one
/// low-scoring detection that ingestion must drop).
pub fn generate(root: &Path, n_images: usize, seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports_dir = root.join("reports");
    let images_dir = root.join("images");
    std::fs::create_dir_all(&reports_dir).unwrap();
    std::fs::create_dir_all(&images_dir).unwrap();
    let pool: Vec<u32> = (1..=4)
        .flat_map(|q| (1..=8).map(move |p| q * 10 + p))
        .collect();
    let mut manifest = BTreeMap::new();
    let mut images = Vec::new();
    for i in 0..n_images {
        let image_id = format!("img_{i:03}");
        let report_id = format!("rep_{i:03}");
        manifest.insert(report_id.clone(), image_id.clone());
        raster(seed ^ i as u64)
            .save(images_dir.join(format!("{image_id}.png")))
            .unwrap();

        let mut teeth: Vec<u32> = Vec::new();
        while teeth.len() < 4 {
            let t = pool[rng.random_range(0..pool.len())];
            if !teeth.contains(&t) {
                teeth.push(t);
            }
        }
        teeth.sort_unstable();
        let mut instances: Vec<_> = teeth
            .iter()
            .map(|&t| {
                let (cx, cy) = tooth_centroid(t);
                json!({"fdi": t, "score": 0.6 + 0.4 * rng.random::<f64>(), "bbox": [cx - 25.0, cy - 60.0, 50.0, 120.0]})
            })
            .collect();
        let weak = pool.iter().find(|t| !teeth.contains(t)).unwrap();
        let (cx, cy) = tooth_centroid(*weak);
        instances
            .push(json!({"fdi": weak, "score": 0.2, "bbox": [cx - 25.0, cy - 60.0, 50.0, 120.0]}));
        images.push(json!({"image_id": image_id, "width": IMAGE_SIZE.0, "height": IMAGE_SIZE.1, "instances": instances}));

        let mut lines = vec!["Missing teeth: 18 and 28.".to_string()];
        for &t in &teeth {
            if rng.random_bool(0.75) {
                let surface = SURFACES[rng.random_range(0..SURFACES.len())];
                lines.push(format!("Tooth {t}: {surface}."));
            }
        }
        lines.push("Mild bone loss in the region of the present teeth.".to_string());
        let text: String = lines
            .iter()
            .enumerate()
            .map(|(n, l)| format!("{:02}: {l}\n", n + 1))
            .collect();
        std::fs::write(reports_dir.join(format!("{report_id}.txt")), text).unwrap();
    }
    let corpus_manifest = root.join("corpus_manifest.json");
    std::fs::write(&corpus_manifest, serde_json::to_string(&manifest).unwrap()).unwrap();
    let segmentation = root.join("segmentation.json");
    std::fs::write(
        &segmentation,
        serde_json::to_string(&json!({ "images": images })).unwrap(),
    )
    .unwrap();
    Synthetic {
        root: root.to_path_buf(),
        reports_dir,
        corpus_manifest,
        segmentation,
        images_dir,
        n_images,
    }
}

/// Runs the CLI in-process and returns its exit code.
pub fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["toothlabel"];
    full.extend_from_slice(args);
    toothlabel_cli::run(full)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
