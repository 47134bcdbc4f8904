//! Synthetic detection corpus and the two incremental data protocols.
//!
//! A class is a (shape, color) combination — circles, squares, triangles,
//! and crosses over a fixed palette — so classes stay visually separable
//! at a 64-pixel canvas. Scenes are stored as object lists and rasterized
//! on demand; rendering is a pure function of the scene, so pixels are
//! bit-identical across runs and platforms.
//!
//! Protocols:
//! - **revised**: the class order is shuffled by seed, images are split
//!   into disjoint per-phase fractions proportional to the class counts,
//!   and each phase keeps only its own classes' annotations. Images left
//!   without annotations are dropped from that phase's training list (the
//!   toggle is the call site choosing this protocol).
//! - **traditional**: class order untouched; phase t contains every image
//!   with at least one annotation in C_t, so images can recur in several
//!   phases.

use crate::geom::{iou, BoxCxCyWh, BoxXyxy};
use crate::matchloss::Target;
use crate::rng::Seed;
use crate::DetError;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Bump when the generator or rasterizer changes visibly; manifests carry
/// it so stale corpora are rejected instead of silently re-interpreted.
pub const MANIFEST_VERSION: u32 = 1;

const SHAPES: usize = 4; // circle, square, triangle, cross

const PALETTE: [[f64; 3]; 12] = [
    [0.95, 0.15, 0.15], // red
    [0.15, 0.85, 0.20], // green
    [0.20, 0.35, 0.95], // blue
    [0.95, 0.85, 0.15], // yellow
    [0.90, 0.20, 0.85], // magenta
    [0.15, 0.85, 0.85], // cyan
    [0.95, 0.55, 0.10], // orange
    [0.92, 0.92, 0.92], // white
    [0.55, 0.30, 0.90], // violet
    [0.45, 0.75, 0.45], // sage
    [0.70, 0.45, 0.20], // brown
    [0.30, 0.60, 0.60], // teal
];

const BACKGROUND: f64 = 0.06;

/// Largest class count the palette supports.
pub const MAX_CLASSES: usize = PALETTE.len();

const MIN_SIDE: f64 = 14.0;
const MAX_SIDE: f64 = 24.0;
const MAX_OBJECTS: usize = 3;
const MAX_PLACEMENT_ATTEMPTS: usize = 25;
const MAX_OVERLAP_IOU: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    /// Pixel-space corners, inside the canvas.
    pub bbox: BoxXyxy,
    /// Fill brightness in [0.75, 1.0]; the one per-object style knob.
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub canvas: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    /// Renders to row-major H×W×3 floats in [0,1].
    pub fn rasterize(&self) -> Vec<f64> {
        let n = self.canvas;
        let mut px = vec![BACKGROUND; n * n * 3];
        for obj in &self.objects {
            let color = PALETTE[obj.class % PALETTE.len()];
            let b = obj.bbox;
            let (cx, cy) = (0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1));
            let side = b.x1 - b.x0;
            let y_lo = b.y0.floor().max(0.0) as usize;
            let y_hi = (b.y1.ceil() as usize).min(n);
            let x_lo = b.x0.floor().max(0.0) as usize;
            let x_hi = (b.x1.ceil() as usize).min(n);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if fx < b.x0 || fx > b.x1 || fy < b.y0 || fy > b.y1 {
                        continue;
                    }
                    let inside = match obj.class % SHAPES {
                        0 => {
                            let (dx, dy) = (fx - cx, fy - cy);
                            dx * dx + dy * dy <= 0.25 * side * side
                        }
                        1 => true, // the bounding box is the square
                        2 => {
                            // apex at top center, base along the bottom edge
                            let t = (fy - b.y0) / (b.y1 - b.y0);
                            (fx - cx).abs() <= 0.5 * side * t
                        }
                        _ => {
                            let bar = side / 6.0;
                            (fx - cx).abs() <= bar || (fy - cy).abs() <= bar
                        }
                    };
                    if inside {
                        let at = (y * n + x) * 3;
                        for c in 0..3 {
                            px[at + c] = color[c] * obj.intensity;
                        }
                    }
                }
            }
        }
        px
    }

    /// All annotations, boxes normalized to center/size form.
    pub fn targets(&self) -> Vec<Target> {
        let s = self.canvas as f64;
        self.objects
            .iter()
            .map(|o| Target {
                class: o.class,
                bbox: BoxCxCyWh {
                    cx: 0.5 * (o.bbox.x0 + o.bbox.x1) / s,
                    cy: 0.5 * (o.bbox.y0 + o.bbox.y1) / s,
                    w: (o.bbox.x1 - o.bbox.x0) / s,
                    h: (o.bbox.y1 - o.bbox.y0) / s,
                },
            })
            .collect()
    }

    /// Annotations restricted to a phase's class set.
    pub fn targets_restricted(&self, class_set: &[usize]) -> Vec<Target> {
        self.targets().into_iter().filter(|t| class_set.contains(&t.class)).collect()
    }
}

/// Serialized corpus: scenes plus the metadata needed to regenerate or
/// validate them. Every field is documented here and stable; `version`
/// must equal [`MANIFEST_VERSION`] on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub canvas: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub scenes: Vec<Scene>,
}

pub fn save_manifest(path: &Path, manifest: &CorpusManifest) -> crate::Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> crate::Result<CorpusManifest> {
    let json = std::fs::read_to_string(path)?;
    let manifest: CorpusManifest = serde_json::from_str(&json)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DetError::Data(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Generates `n_images` scenes of 1..=5 objects with uniformly sampled
/// classes, jittered sizes and positions, and pairwise IoU capped at 0.2.
/// Deterministic per seed. If some class ends up unused (likely only for
/// tiny corpora), one object of it is appended to an existing scene so
/// every class appears at least once.
pub fn generate_corpus(
    n_images: usize,
    n_classes: usize,
    canvas: usize,
    seed: Seed,
) -> crate::Result<Vec<Scene>> {
    if n_images == 0 {
        return Err(DetError::Config("corpus needs at least one image".into()));
    }
    if !(2..=MAX_CLASSES).contains(&n_classes) {
        return Err(DetError::Config(format!(
            "class count must be within 2..={MAX_CLASSES}, got {n_classes}"
        )));
    }
    if (canvas as f64) < 2.0 * MAX_SIDE {
        return Err(DetError::Config(format!(
            "canvas {canvas} too small for objects up to {MAX_SIDE} pixels"
        )));
    }

    let mut scenes = Vec::with_capacity(n_images);
    for id in 0..n_images {
        let scene_seed = seed.derive("scene").derive_index(id as u64);
        let mut rng = scene_seed.stream();
        let wanted = rng.gen_range(1..=MAX_OBJECTS);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(wanted);
        for _ in 0..wanted {
            if let Some(obj) = place_object(&mut rng, n_classes, canvas, &objects) {
                objects.push(obj);
            }
        }
        debug_assert!(!objects.is_empty(), "first placement cannot fail on an empty scene");
        scenes.push(Scene { id, canvas, objects, seed: scene_seed.0 });
    }

    // Coverage pass: give any absent class one appended object.
    let mut present = vec![false; n_classes];
    for s in &scenes {
        for o in &s.objects {
            present[o.class] = true;
        }
    }
    for class in 0..n_classes {
        if present[class] {
            continue;
        }
        let mut rng = seed.derive("coverage").derive_index(class as u64).stream();
        let at = (0..n_images)
            .map(|k| (class + k) % n_images)
            .find(|&i| scenes[i].objects.len() < MAX_OBJECTS)
            .unwrap_or(class % n_images);
        let scene = &mut scenes[at];
        let obj = loop {
            // unconstrained placement always succeeds eventually
            if let Some(o) = place_object(&mut rng, n_classes, canvas, &[]) {
                break SceneObject { class, ..o };
            }
        };
        if scene.objects.len() < MAX_OBJECTS {
            scene.objects.push(obj);
        } else {
            scene.objects[0] = obj;
        }
    }
    Ok(scenes)
}

fn place_object(
    rng: &mut impl Rng,
    n_classes: usize,
    canvas: usize,
    existing: &[SceneObject],
) -> Option<SceneObject> {
    let class = rng.gen_range(0..n_classes);
    let intensity = rng.gen_range(0.75..1.0);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let side = rng.gen_range(MIN_SIDE..MAX_SIDE);
        let x0 = rng.gen_range(1.0..canvas as f64 - 1.0 - side);
        let y0 = rng.gen_range(1.0..canvas as f64 - 1.0 - side);
        let bbox = BoxXyxy { x0, y0, x1: x0 + side, y1: y0 + side };
        if existing.iter().all(|o| iou(o.bbox, bbox) <= MAX_OVERLAP_IOU) {
            return Some(SceneObject { class, bbox, intensity });
        }
    }
    None
}

/// Id-keyed view over a corpus for training/eval loops.
pub struct SceneIndex<'a> {
    by_id: Vec<&'a Scene>,
}

impl<'a> SceneIndex<'a> {
    pub fn new(corpus: &'a [Scene]) -> Self {
        let mut by_id: Vec<&Scene> = corpus.iter().collect();
        by_id.sort_by_key(|s| s.id);
        Self { by_id }
    }

    pub fn get(&self, id: usize) -> crate::Result<&'a Scene> {
        self.by_id
            .binary_search_by_key(&id, |s| s.id)
            .map(|i| self.by_id[i])
            .map_err(|_| DetError::Data(format!("image {id} not in the corpus")))
    }
}

/// One phase's training view: image ids with annotations restricted to
/// the phase's class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseItem {
    pub image_id: usize,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDataset {
    /// 1-based phase index.
    pub phase: usize,
    /// C_t: the classes annotated in this phase.
    pub class_set: Vec<usize>,
    pub items: Vec<PhaseItem>,
}

fn validate_split_sizes(split_sizes: &[usize], n_classes: usize) -> crate::Result<()> {
    if split_sizes.is_empty() || split_sizes.iter().any(|&s| s == 0) {
        return Err(DetError::Config("every phase needs at least one class".into()));
    }
    let total: usize = split_sizes.iter().sum();
    if total != n_classes {
        return Err(DetError::Config(format!(
            "split sizes sum to {total} but the corpus has {n_classes} classes"
        )));
    }
    Ok(())
}

fn chunk_classes(order: &[usize], split_sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut sets = Vec::with_capacity(split_sizes.len());
    let mut at = 0;
    for &size in split_sizes {
        sets.push(order[at..at + size].to_vec());
        at += size;
    }
    sets
}

/// Revised protocol: shuffles the class order by seed, chunks it into the
/// requested split sizes, and partitions the images into disjoint
/// fractions c_t/c. Each phase keeps only C_t annotations; images left
/// annotation-free are dropped from that phase.
pub fn split_revised(
    corpus: &[Scene],
    split_sizes: &[usize],
    n_classes: usize,
    seed: Seed,
) -> crate::Result<Vec<PhaseDataset>> {
    validate_split_sizes(split_sizes, n_classes)?;
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut seed.derive("class-order").stream());
    let class_sets = chunk_classes(&order, split_sizes);

    let mut image_order: Vec<usize> = (0..corpus.len()).collect();
    image_order.shuffle(&mut seed.derive("image-split").stream());

    let total: usize = split_sizes.iter().sum();
    let mut datasets = Vec::with_capacity(split_sizes.len());
    let mut cum = 0;
    let mut start = 0;
    for (t, (size, class_set)) in split_sizes.iter().zip(class_sets).enumerate() {
        cum += size;
        let end = cum * corpus.len() / total;
        let mut items: Vec<PhaseItem> = image_order[start..end]
            .iter()
            .map(|&i| PhaseItem {
                image_id: corpus[i].id,
                targets: corpus[i].targets_restricted(&class_set),
            })
            .filter(|item| !item.targets.is_empty())
            .collect();
        items.sort_by_key(|item| item.image_id);
        datasets.push(PhaseDataset { phase: t + 1, class_set, items });
        start = end;
    }
    Ok(datasets)
}

/// Traditional protocol: class order untouched; phase t holds every image
/// with at least one C_t annotation, restricted to C_t. Images with
/// objects from several phases' classes appear in each of those phases.
pub fn split_traditional(
    corpus: &[Scene],
    split_sizes: &[usize],
    n_classes: usize,
) -> crate::Result<Vec<PhaseDataset>> {
    validate_split_sizes(split_sizes, n_classes)?;
    let order: Vec<usize> = (0..n_classes).collect();
    let class_sets = chunk_classes(&order, split_sizes);
    Ok(class_sets
        .into_iter()
        .enumerate()
        .map(|(t, class_set)| {
            let items: Vec<PhaseItem> = corpus
                .iter()
                .map(|s| PhaseItem { image_id: s.id, targets: s.targets_restricted(&class_set) })
                .filter(|item| !item.targets.is_empty())
                .collect();
            PhaseDataset { phase: t + 1, class_set, items }
        })
        .collect())
}
