//! Seeded synthetic racks with ground truth and matching oracle provider
//! output.
//!
//! Products are flat-coloured rectangles. Every catalog keypoint of a product
//! is planted, with a little descriptor noise, inside exactly one of that
//! product's instances on the rack (keypoints are dealt round-robin), so a
//! correct pipeline can recover every instance. Candidate boxes are the true
//! item boxes plus jittered, lower-confidence duplicates and a few empty
//! boxes.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_and_control, AlignParams, AlignmentResult};
use crate::detect::providers::{box_file_path, feature_file_path, write_json, BoxFile, FeatureFile};
use crate::detect::{ProviderError, StaticDetector, StaticFeatures};
use crate::model::{
    obj_to_planogram, BoxRect, CandidateBox, Catalog, Detection, LocalFeature, ModelError,
    PlanogramSeq, ProductModel,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot lay out a rack: {0}")]
    Overflow(String),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    None,
    RemoveItem,
    SwapAdjacent,
    AddForeign,
    ShiftQuantity,
    /// One of the four above, drawn per rack.
    Random,
}

pub const PERTURBATIONS: [PerturbationKind; 4] = [
    PerturbationKind::RemoveItem,
    PerturbationKind::SwapAdjacent,
    PerturbationKind::AddForeign,
    PerturbationKind::ShiftQuantity,
];

/// What was changed between the reference and the rendered rack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    /// Reference group the change applies to (insertion point for foreign items).
    pub group: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub products: usize,
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    pub features_per_product: usize,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    pub rack_width: u32,
    pub rack_height: u32,
    pub groups: (usize, usize),
    pub quantity: (u32, u32),
    pub item_gap: (f64, f64),
    pub racks: usize,
    pub perturbation: PerturbationKind,
    pub clutter_features: usize,
    pub duplicates_per_item: usize,
    pub empty_boxes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            products: 8,
            width_range: (90.0, 180.0),
            height_range: (180.0, 320.0),
            features_per_product: 64,
            descriptor_dim: 32,
            descriptor_noise: 0.05,
            rack_width: 1600,
            rack_height: 400,
            groups: (3, 6),
            quantity: (1, 4),
            item_gap: (4.0, 16.0),
            racks: 10,
            perturbation: PerturbationKind::None,
            clutter_features: 40,
            duplicates_per_item: 1,
            empty_boxes: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.products < 2 {
            return bad("at least two products are needed");
        }
        if self.features_per_product == 0 || self.descriptor_dim == 0 {
            return bad("products need keypoints with non-empty descriptors");
        }
        if !(self.width_range.0 > 0.0 && self.width_range.0 <= self.width_range.1)
            || !(self.height_range.0 > 0.0 && self.height_range.0 <= self.height_range.1)
        {
            return bad("size ranges must be positive and ordered");
        }
        if self.groups.0 == 0 || self.groups.0 > self.groups.1 || self.quantity.0 == 0 || self.quantity.0 > self.quantity.1 {
            return bad("group and quantity ranges must be positive and ordered");
        }
        if self.width_range.1 > f64::from(self.rack_width) || self.height_range.1 + 20.0 > f64::from(self.rack_height) {
            return Err(SynthError::Overflow("products larger than the rack".into()));
        }
        Ok(())
    }
}

/// A rendered rack with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedRack {
    pub key: String,
    #[serde(skip)]
    pub image: RgbImage,
    pub width: u32,
    pub height: u32,
    pub reference: PlanogramSeq,
    pub detections: Vec<Detection>,
    /// Alignment of the true rack contents against the reference.
    pub alignment: AlignmentResult,
    pub perturbation: Option<Perturbation>,
}

#[derive(Debug, Clone)]
pub struct SyntheticRack {
    pub annotated: AnnotatedRack,
    pub boxes: Vec<CandidateBox>,
    pub features: Vec<LocalFeature>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub spec: SynthSpec,
    pub catalog: Catalog,
    pub racks: Vec<SyntheticRack>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

pub fn product_label(i: usize) -> String {
    format!("P{i:02}")
}

pub fn generate_catalog(seed: u64, spec: &SynthSpec) -> Result<Catalog, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let products = (0..spec.products)
        .map(|i| {
            let w = rng.gen_range(spec.width_range.0..=spec.width_range.1).round();
            let h = rng.gen_range(spec.height_range.0..=spec.height_range.1).round();
            let features = (0..spec.features_per_product)
                .map(|_| LocalFeature {
                    x: rng.gen_range(0.0..w),
                    y: rng.gen_range(0.0..h),
                    descriptor: (0..spec.descriptor_dim).map(|_| gauss(&mut rng)).collect(),
                })
                .collect();
            ProductModel { label: product_label(i), width_ref: w, height_ref: h, features }
        })
        .collect();
    Ok(Catalog::new(products)?)
}

fn sample_reference(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<(usize, u32)> {
    let n = rng.gen_range(spec.groups.0..=spec.groups.1);
    let mut groups: Vec<(usize, u32)> = Vec::with_capacity(n);
    while groups.len() < n {
        let p = rng.gen_range(0..spec.products);
        if groups.last().map(|g| g.0) == Some(p) {
            continue;
        }
        groups.push((p, rng.gen_range(spec.quantity.0..=spec.quantity.1)));
    }
    groups
}

fn no_adjacent_repeats(groups: &[(usize, u32)]) -> bool {
    groups.windows(2).all(|w| w[0].0 != w[1].0) && groups.iter().all(|g| g.1 > 0)
}

/// Applies `kind` to the reference groups; `None` when it cannot be applied
/// without merging neighbouring groups.
fn perturb(
    rng: &mut ChaCha8Rng,
    reference: &[(usize, u32)],
    kind: PerturbationKind,
) -> Option<(Vec<(usize, u32)>, Option<Perturbation>)> {
    let mut scene = reference.to_vec();
    let n = scene.len();
    let record = |kind, group, detail: String| Some(Perturbation { kind, group, detail });
    let out = match kind {
        PerturbationKind::None => None,
        PerturbationKind::Random => {
            let k = *PERTURBATIONS.choose(rng).expect("non-empty");
            return perturb(rng, reference, k);
        }
        PerturbationKind::RemoveItem => {
            let mut options: Vec<usize> = (0..n).filter(|&i| scene[i].1 >= 2).collect();
            if options.is_empty() {
                options = (0..n)
                    .filter(|&i| i == 0 || i + 1 == n || scene[i - 1].0 != scene[i + 1].0)
                    .collect();
            }
            let &i = options.choose(rng)?;
            scene[i].1 -= 1;
            if scene[i].1 == 0 {
                scene.remove(i);
            }
            record(kind, i, format!("removed one {}", product_label(reference[i].0)))
        }
        PerturbationKind::SwapAdjacent => {
            let options: Vec<usize> = (0..n.saturating_sub(1))
                .filter(|&i| {
                    (i == 0 || scene[i - 1].0 != scene[i + 1].0)
                        && (i + 2 >= n || scene[i].0 != scene[i + 2].0)
                })
                .collect();
            let &i = options.choose(rng)?;
            scene.swap(i, i + 1);
            record(kind, i, format!("swapped groups {i} and {}", i + 1))
        }
        PerturbationKind::AddForeign => {
            let mut options = Vec::new();
            for at in 0..=n {
                for &(p, _) in reference {
                    let left = at.checked_sub(1).map(|j| scene[j].0);
                    let right = scene.get(at).map(|g| g.0);
                    if left != Some(p) && right != Some(p) && !options.contains(&(at, p)) {
                        options.push((at, p));
                    }
                }
            }
            let &(at, p) = options.choose(rng)?;
            scene.insert(at, (p, 1));
            record(kind, at, format!("misplaced {} before group {at}", product_label(p)))
        }
        PerturbationKind::ShiftQuantity => {
            let i = rng.gen_range(0..n);
            let up = scene[i].1 == 1 || rng.gen_bool(0.5);
            if up {
                scene[i].1 += 1;
            } else {
                scene[i].1 -= 1;
            }
            record(kind, i, format!("quantity {} -> {}", reference[i].1, scene[i].1))
        }
    };
    no_adjacent_repeats(&scene).then_some((scene, out))
}

fn product_colour(i: usize) -> Rgb<u8> {
    let h = (i as u32).wrapping_mul(2_654_435_761);
    Rgb([60 + (h >> 8) as u8 % 160, 60 + (h >> 16) as u8 % 160, 60 + (h >> 24) as u8 % 160])
}

fn fill(img: &mut RgbImage, r: &BoxRect, colour: Rgb<u8>) {
    let x0 = r.tl.x.floor().max(0.0) as u32;
    let y0 = r.tl.y.floor().max(0.0) as u32;
    let x1 = (r.br.x.ceil() as u32).min(img.width());
    let y1 = (r.br.y.ceil() as u32).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            img.put_pixel(x, y, colour);
        }
    }
}

fn inside(rng: &mut ChaCha8Rng, r: &BoxRect, margin: f64) -> (f64, f64) {
    (
        rng.gen_range(r.tl.x + margin..r.br.x - margin),
        rng.gen_range(r.tl.y + margin..r.br.y - margin),
    )
}

/// Generates one rack. `index` only feeds the key and the rack's RNG stream.
pub fn generate_rack(
    seed: u64,
    index: usize,
    spec: &SynthSpec,
    catalog: &Catalog,
) -> Result<SyntheticRack, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let (rw, rh) = (f64::from(spec.rack_width), f64::from(spec.rack_height));
    let model = |p: usize| catalog.get(&product_label(p)).expect("catalog generated from spec");

    let mut attempt = 0;
    let (reference, scene, perturbation, xs) = loop {
        attempt += 1;
        if attempt > 1000 {
            return Err(SynthError::Overflow(format!(
                "no layout of {:?} groups fits a {}-px rack",
                spec.groups, spec.rack_width
            )));
        }
        let reference = sample_reference(&mut rng, spec);
        let Some((scene, perturbation)) = perturb(&mut rng, &reference, spec.perturbation) else {
            continue;
        };
        let mut x = rng.gen_range(10.0..40.0);
        let mut xs = Vec::new();
        for &(p, q) in &scene {
            for _ in 0..q {
                xs.push((p, x));
                x += model(p).width_ref + rng.gen_range(spec.item_gap.0..=spec.item_gap.1);
            }
        }
        if x + 10.0 <= rw {
            break (reference, scene, perturbation, xs);
        }
    };

    let shelf_y = rh - 10.0;
    let items: Vec<(usize, BoxRect)> = xs
        .iter()
        .map(|&(p, x)| {
            let m = model(p);
            let lift = rng.gen_range(0.0..4.0);
            (p, BoxRect::from_corners(x, shelf_y - lift - m.height_ref, x + m.width_ref, shelf_y - lift))
        })
        .collect();

    let mut image = RgbImage::from_pixel(spec.rack_width, spec.rack_height, Rgb([205, 205, 200]));
    fill(&mut image, &BoxRect::from_corners(0.0, shelf_y, rw, rh), Rgb([90, 80, 70]));
    for (p, r) in &items {
        fill(&mut image, r, Rgb([30, 30, 30]));
        let inner = BoxRect::from_corners(r.tl.x + 2.0, r.tl.y + 2.0, r.br.x - 2.0, r.br.y - 2.0);
        fill(&mut image, &inner, product_colour(*p));
    }

    let detections: Vec<Detection> = items
        .iter()
        .map(|(p, r)| Detection::new(product_label(*p), *r, 1.0))
        .collect();

    // Keypoints: product p's k-th feature goes to its (k mod n_p)-th instance.
    let mut features = Vec::new();
    for p in 0..spec.products {
        let instances: Vec<&BoxRect> = items.iter().filter(|(q, _)| *q == p).map(|(_, r)| r).collect();
        if instances.is_empty() {
            continue;
        }
        for (k, f) in model(p).features.iter().enumerate() {
            let r = instances[k % instances.len()];
            let (x, y) = inside(&mut rng, r, 3.0);
            let descriptor = f
                .descriptor
                .iter()
                .map(|v| v + spec.descriptor_noise as f32 * gauss(&mut rng))
                .collect();
            features.push(LocalFeature { x, y, descriptor });
        }
    }

    let mut boxes = Vec::new();
    for (_, r) in &items {
        let cs = rng.gen_range(0.6..1.0);
        let c = r.center();
        boxes.push(CandidateBox::new(cs, c.x, c.y, r.width(), r.height()));
        for _ in 0..spec.duplicates_per_item {
            let j = |rng: &mut ChaCha8Rng| rng.gen_range(-0.06..0.06);
            boxes.push(CandidateBox::new(
                cs * rng.gen_range(0.3..0.9),
                c.x + j(&mut rng) * r.width(),
                c.y + j(&mut rng) * r.height(),
                r.width() * (1.0 + j(&mut rng)),
                r.height() * (1.0 + j(&mut rng)),
            ));
        }
    }
    // Boxes and clutter stay clear of items, with room for the jitter.
    let occupied: Vec<BoxRect> = items
        .iter()
        .map(|(_, r)| {
            let (mx, my) = (0.1 * r.width(), 0.1 * r.height());
            BoxRect::from_corners(r.tl.x - mx, r.tl.y - my, r.br.x + mx, r.br.y + my)
        })
        .collect();
    let clear = |b: &BoxRect, others: &[BoxRect]| others.iter().all(|o| b.intersection_area(o) == 0.0);
    let mut empties: Vec<BoxRect> = Vec::new();
    for _ in 0..spec.empty_boxes * 20 {
        if empties.len() == spec.empty_boxes {
            break;
        }
        let w = rng.gen_range(spec.width_range.0..=spec.width_range.1);
        let h = rng.gen_range(spec.height_range.0..=spec.height_range.1);
        let x = rng.gen_range(0.0..(rw - w).max(1.0));
        let r = BoxRect::from_corners(x, shelf_y - h, x + w, shelf_y);
        if clear(&r, &occupied) {
            empties.push(r);
        }
    }
    for r in &empties {
        let c = r.center();
        boxes.push(CandidateBox::new(rng.gen_range(0.05..0.4), c.x, c.y, r.width(), r.height()));
    }
    let mut blocked = occupied.clone();
    blocked.extend(empties.iter().copied());
    let mut clutter = 0;
    for _ in 0..spec.clutter_features * 50 {
        if clutter == spec.clutter_features {
            break;
        }
        let (x, y) = (rng.gen_range(0.0..rw), rng.gen_range(0.0..rh));
        let dot = BoxRect::from_corners(x - 0.5, y - 0.5, x + 0.5, y + 0.5);
        if clear(&dot, &blocked) {
            features.push(LocalFeature {
                x,
                y,
                descriptor: (0..spec.descriptor_dim).map(|_| gauss(&mut rng)).collect(),
            });
            clutter += 1;
        }
    }
    boxes.shuffle(&mut rng);
    features.shuffle(&mut rng);

    let reference_seq = PlanogramSeq::from_pairs(
        &reference.iter().map(|&(p, q)| (product_label(p), q)).collect::<Vec<_>>(),
    );
    debug_assert_eq!(
        obj_to_planogram(&detections).pairs(),
        scene.iter().map(|&(p, q)| (product_label(p), q)).collect::<Vec<_>>()
    );
    let alignment = align_and_control(&reference_seq, &obj_to_planogram(&detections), &AlignParams::default())
        .expect("generated planograms are valid");

    Ok(SyntheticRack {
        annotated: AnnotatedRack {
            key: format!("rack{index:04}"),
            width: image.width(),
            height: image.height(),
            image,
            reference: reference_seq,
            detections,
            alignment,
            perturbation,
        },
        boxes,
        features,
    })
}

pub fn generate_synthetic(seed: u64, spec: &SynthSpec) -> Result<SyntheticDataset, SynthError> {
    let catalog = generate_catalog(seed, spec)?;
    let racks = (0..spec.racks)
        .map(|i| generate_rack(seed, i, spec, &catalog))
        .collect::<Result<_, _>>()?;
    Ok(SyntheticDataset { seed, spec: spec.clone(), catalog, racks })
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub racks: Vec<String>,
}

pub const CATALOG_FILE: &str = "catalog.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORACLE_DIR: &str = "oracle";
pub const IMAGE_DIR: &str = "images";
pub const TRUTH_DIR: &str = "truth";
pub const PIPELINE_FILE: &str = "pipeline.toml";

impl SyntheticDataset {
    /// In-memory providers serving this dataset's oracle output.
    pub fn providers(&self) -> (StaticDetector, StaticFeatures) {
        let mut det = StaticDetector::default();
        let mut feats = StaticFeatures { dim: self.spec.descriptor_dim, ..Default::default() };
        for r in &self.racks {
            det.boxes.insert(r.annotated.key.clone(), r.boxes.clone());
            feats.features.insert(r.annotated.key.clone(), r.features.clone());
        }
        (det, feats)
    }

    /// Writes the dataset directory:
    ///
    /// ```text
    /// manifest.json  catalog.json  pipeline.toml
    /// images/<key>.png  truth/<key>.json  oracle/<key>.{boxes,features}.json
    /// ```
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        for sub in [IMAGE_DIR, TRUTH_DIR, ORACLE_DIR] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let manifest = Manifest {
            seed: self.seed,
            spec: self.spec.clone(),
            racks: self.racks.iter().map(|r| r.annotated.key.clone()).collect(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        self.catalog.save(dir.join(CATALOG_FILE))?;
        std::fs::write(
            dir.join(PIPELINE_FILE),
            format!(
                "[providers]\nkind = \"oracle\"\ndir = \"{ORACLE_DIR}\"\ndescriptor_dim = {}\n",
                self.spec.descriptor_dim
            ),
        )?;
        for r in &self.racks {
            let key = &r.annotated.key;
            let png = dir.join(IMAGE_DIR).join(format!("{key}.png"));
            r.annotated
                .image
                .save(&png)
                .map_err(|e| SynthError::Image { path: png.clone(), message: e.to_string() })?;
            std::fs::write(
                dir.join(TRUTH_DIR).join(format!("{key}.json")),
                serde_json::to_string_pretty(&r.annotated)?,
            )?;
            write_oracle_files(&dir.join(ORACLE_DIR), key, &r.boxes, &r.features)?;
        }
        Ok(())
    }
}

pub fn write_oracle_files(
    dir: &Path,
    key: &str,
    boxes: &[CandidateBox],
    features: &[LocalFeature],
) -> Result<(), ProviderError> {
    write_json(&box_file_path(dir, key), &BoxFile { image: key.to_string(), boxes: boxes.to_vec() })?;
    write_json(
        &feature_file_path(dir, key),
        &FeatureFile { image: key.to_string(), features: features.to_vec() },
    )
}

/// Loads a dataset directory's manifest, catalog and annotated racks.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Catalog, Vec<AnnotatedRack>), SynthError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let catalog = Catalog::load(dir.join(CATALOG_FILE))?;
    let racks = manifest
        .racks
        .iter()
        .map(|key| {
            let mut rack: AnnotatedRack =
                serde_json::from_str(&std::fs::read_to_string(dir.join(TRUTH_DIR).join(format!("{key}.json")))?)?;
            let png = dir.join(IMAGE_DIR).join(format!("{key}.png"));
            rack.image = image::open(&png)
                .map_err(|e| SynthError::Image { path: png.clone(), message: e.to_string() })?
                .to_rgb8();
            Ok(rack)
        })
        .collect::<Result<_, SynthError>>()?;
    Ok((manifest, catalog, racks))
}

/// Stacks equally wide rack images into one shelf image, top to bottom.
pub fn compose_shelf(racks: &[&RgbImage]) -> RgbImage {
    let width = racks.iter().map(|r| r.width()).max().unwrap_or(0);
    let height = racks.iter().map(|r| r.height()).sum();
    let mut shelf = RgbImage::new(width, height);
    let mut y = 0i64;
    for r in racks {
        image::imageops::replace(&mut shelf, *r, 0, y);
        y += i64::from(r.height());
    }
    shelf
}
