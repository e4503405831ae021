//! Seeded synthetic sonar-scene generator and dataset IO.
//!
//! Frames mimic a forward-looking sonar capture: a polar sector filled with
//! multiplicative speckle over a low background level, with objects rendered
//! as class-specific bright highlights (optionally casting a dark shadow
//! away from the apex). Everything derives from the config seed, and frame
//! generation parallelizes with per-frame derived seeds, so a dataset is a
//! pure function of its config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{iou, sliding_windows, BoundingBox, FovMask, SectorGeometry};
use crate::tensor::{resize_bilinear, Tensor};

/// Class labels, mirroring the 10 object classes plus background.
pub const CLASS_NAMES: [&str; 11] = [
    "bottle",
    "can",
    "chain",
    "drink-carton",
    "hook",
    "propeller",
    "shampoo-bottle",
    "standing-bottle",
    "tire",
    "valve",
    "background",
];

pub const OBJECT_CLASSES: usize = 10;
pub const BACKGROUND_CLASS: usize = 10;
pub const PATCH: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub half_angle: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub background_level: f32,
    pub highlight_level: f32,
    pub speckle_strength: f32,
    pub shadow_prob: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 480,
            height: 320,
            r_min: 40.0,
            r_max: 315.0,
            half_angle: 0.9,
            objects_min: 1,
            objects_max: 3,
            background_level: 0.15,
            highlight_level: 0.78,
            speckle_strength: 0.45,
            shadow_prob: 0.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_min >= self.r_max {
            return Err(Error::Config("r_min must be smaller than r_max".into()));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config("objects_min exceeds objects_max".into()));
        }
        if self.width < PATCH || self.height < PATCH {
            return Err(Error::Config("frame smaller than the 96x96 patch size".into()));
        }
        Ok(())
    }

    pub fn sector(&self) -> SectorGeometry {
        SectorGeometry {
            apex_x: self.width as f64 / 2.0,
            apex_y: self.height as f64 - 1.0,
            r_min: self.r_min,
            r_max: self.r_max,
            half_angle: self.half_angle,
        }
    }
}

/// One sonar frame: grayscale image in [0, 1], field-of-view mask, and
/// ground-truth annotations.
#[derive(Debug, Clone)]
pub struct SonarFrame {
    pub image: Tensor,
    pub fov: FovMask,
    pub annotations: Vec<BoundingBox>,
    pub id: String,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-frame seed: a hash of the base seed and the frame index, so frames
/// generate identically regardless of thread count or generation order.
pub fn frame_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}

// ---------------------------------------------------------------------------
// Shape library
// ---------------------------------------------------------------------------

/// Per-object rendering jitter.
struct ShapeJitter {
    rotation: f64,
    phase: f64,
}

/// Highlight opacity of a class shape at local coordinates
/// `(u, v) in [-1, 1]^2`. Every shape spans most of the unit box in both
/// axes so the tight annotation stays compatible with 96x96 windows.
fn shape_alpha(class: usize, u: f64, v: f64, jitter: &ShapeJitter) -> f32 {
    let (su, sv) = {
        let (sin, cos) = jitter.rotation.sin_cos();
        (u * cos - v * sin, u * sin + v * cos)
    };
    let r = (u * u + v * v).sqrt();
    match class {
        // lying bottle: diagonal capsule
        0 => {
            let along = (su + sv) / std::f64::consts::SQRT_2;
            let across = (su - sv) / std::f64::consts::SQRT_2;
            let half_w = 0.30;
            let body = along.abs() <= 0.95 - half_w && across.abs() <= half_w;
            let cap_a = ((along.abs() - (0.95 - half_w)).max(0.0).powi(2) + across * across).sqrt() <= half_w;
            if body || cap_a {
                1.0
            } else {
                0.0
            }
        }
        // tin can: bright rim, slightly dimmer lid
        1 => {
            if r <= 0.95 {
                if r >= 0.70 {
                    1.0
                } else {
                    0.72
                }
            } else {
                0.0
            }
        }
        // chain: two staggered runs of links along the diagonal
        2 => {
            let mut a = 0.0f32;
            for k in 0..5 {
                let t = -0.78 + 0.39 * k as f64;
                let cy = if k % 2 == 0 { t - 0.16 } else { t + 0.16 };
                let d = ((u - t).powi(2) + (v - cy).powi(2)).sqrt();
                if d <= 0.21 {
                    a = 1.0;
                }
            }
            a
        }
        // drink carton: filled rectangle with a dark fold stripe
        3 => {
            if su.abs() <= 0.95 && sv.abs() <= 0.80 {
                if sv.abs() <= 0.12 {
                    0.45
                } else {
                    1.0
                }
            } else {
                0.0
            }
        }
        // hook: L shape
        4 => {
            let vertical = su <= -0.45 && su >= -0.90 && sv.abs() <= 0.92;
            let horizontal = sv >= 0.45 && sv <= 0.90 && su.abs() <= 0.92;
            if vertical || horizontal {
                1.0
            } else {
                0.0
            }
        }
        // propeller: three blades and a hub
        5 => {
            if r <= 0.24 {
                return 1.0;
            }
            for k in 0..3 {
                let angle = jitter.phase + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                let (sin, cos) = angle.sin_cos();
                let along = u * cos + v * sin;
                let across = -u * sin + v * cos;
                if along >= 0.0 && along <= 0.95 && across.abs() <= 0.16 + 0.10 * (1.0 - along) {
                    return 1.0;
                }
            }
            0.0
        }
        // standing shampoo bottle: tall body with a wide shoulder bar
        6 => {
            let body = su.abs() <= 0.48 && sv.abs() <= 0.95;
            let shoulder = sv >= 0.55 && sv <= 0.85 && su.abs() <= 0.90;
            if body || shoulder {
                1.0
            } else {
                0.0
            }
        }
        // standing bottle seen from above: rings around a bright core
        7 => {
            if r <= 0.20 {
                1.0
            } else if r <= 0.52 {
                0.35
            } else if r <= 0.92 {
                1.0
            } else {
                0.0
            }
        }
        // tire: thick annulus
        8 => {
            if (0.52..=0.95).contains(&r) {
                1.0
            } else {
                0.0
            }
        }
        // valve: cross with a center disc
        9 => {
            let cross = (su.abs() <= 0.22 && sv.abs() <= 0.95) || (sv.abs() <= 0.22 && su.abs() <= 0.95);
            if cross || r <= 0.34 {
                1.0
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

struct PlacedObject {
    bbox: BoundingBox,
    class: usize,
}

fn render_speckle(cfg: &SceneConfig, fov: &FovMask, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (w, h) = (cfg.width, cfg.height);
    let exp = rand_distr::Exp1;
    let mut noise = vec![0.0f32; w * h];
    for v in noise.iter_mut() {
        let e: f64 = rng.sample(exp);
        *v = e as f32;
    }
    // 3x3 box filter
    let mut smooth = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            let mut count = 0.0f32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        acc += noise[ny as usize * w + nx as usize];
                        count += 1.0;
                    }
                }
            }
            smooth[y * w + x] = acc / count;
        }
    }
    let s = cfg.speckle_strength;
    let bg = cfg.background_level;
    let mut image = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            if fov.is_inside(x as i64, y as i64) {
                let mult = (1.0 - s) + s * smooth[y * w + x];
                image[y * w + x] = (bg * mult).clamp(0.0, 1.0);
            }
        }
    }
    image
}

fn render_object(
    image: &mut [f32],
    cfg: &SceneConfig,
    fov: &FovMask,
    class: usize,
    x0: i64,
    y0: i64,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Option<BoundingBox> {
    let jitter = ShapeJitter {
        rotation: rng.gen_range(-0.18..0.18),
        phase: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let level = cfg.highlight_level * rng.gen_range(0.92..1.08);
    let w = cfg.width;
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for py in 0..size {
        for px in 0..size {
            let u = 2.0 * (px as f64 + 0.5) / size as f64 - 1.0;
            let v = 2.0 * (py as f64 + 0.5) / size as f64 - 1.0;
            let alpha = shape_alpha(class, u, v, &jitter);
            if alpha <= 0.05 {
                continue;
            }
            let (gx, gy) = (x0 + px as i64, y0 + py as i64);
            if !fov.is_inside(gx, gy) {
                continue;
            }
            let texture = rng.gen_range(0.82f32..1.12);
            let value = (alpha * level as f32 * texture).clamp(0.0, 1.0);
            let idx = gy as usize * w + gx as usize;
            image[idx] = image[idx].max(value);
            min_x = min_x.min(gx);
            min_y = min_y.min(gy);
            max_x = max_x.max(gx);
            max_y = max_y.max(gy);
        }
    }
    if min_x > max_x {
        return None;
    }
    Some(BoundingBox::new(min_x, min_y, max_x - min_x + 1, max_y - min_y + 1).with_label(class))
}

fn render_shadow(image: &mut [f32], cfg: &SceneConfig, fov: &FovMask, bbox: &BoundingBox) {
    let sector = cfg.sector();
    let (cx, cy) = bbox.center();
    let dir_x = cx - sector.apex_x;
    let dir_y = cy - sector.apex_y;
    let norm = (dir_x * dir_x + dir_y * dir_y).sqrt().max(1.0);
    let (ux, uy) = (dir_x / norm, dir_y / norm);
    let half_span = bbox.w.max(bbox.h) as f64 * 0.45;
    let reach = bbox.w.max(bbox.h) as f64 * 1.2;
    let start = bbox.w.max(bbox.h) as f64 * 0.55;
    let (px, py) = (-uy, ux); // perpendicular
    let w = cfg.width;
    let mut t = start;
    while t < start + reach {
        let mut s = -half_span;
        while s <= half_span {
            let gx = (cx + ux * t + px * s).round() as i64;
            let gy = (cy + uy * t + py * s).round() as i64;
            if fov.is_inside(gx, gy) {
                let idx = gy as usize * w + gx as usize;
                image[idx] *= 0.40;
            }
            s += 1.0;
        }
        t += 1.0;
    }
}

fn placement_fits(fov: &FovMask, existing: &[PlacedObject], x0: i64, y0: i64, size: i64) -> bool {
    let last = size - 1;
    let corners = [
        (x0, y0),
        (x0 + last, y0),
        (x0, y0 + last),
        (x0 + last, y0 + last),
        (x0 + last / 2, y0 + last / 2),
    ];
    if corners.iter().any(|&(x, y)| !fov.is_inside(x, y)) {
        return false;
    }
    // keep a clear margin between objects
    let margin = 14;
    let padded = BoundingBox::new(x0 - margin, y0 - margin, size + 2 * margin, size + 2 * margin);
    existing.iter().all(|p| padded.intersection_area(&p.bbox) == 0)
}

/// Generate one frame. Deterministic in `(config, frame_index)`.
pub fn generate_scene(cfg: &SceneConfig, frame_index: u64) -> Result<SonarFrame> {
    generate_scene_with_classes(cfg, frame_index, None)
}

/// Like [`generate_scene`] but with the object classes pinned (the dataset
/// builders use this to balance classes).
pub fn generate_scene_with_classes(
    cfg: &SceneConfig,
    frame_index: u64,
    forced_classes: Option<&[usize]>,
) -> Result<SonarFrame> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, frame_index));
    let fov = FovMask::sector(cfg.width, cfg.height, cfg.sector())?;
    let mut image = render_speckle(cfg, &fov, &mut rng);

    let count = match forced_classes {
        Some(classes) => classes.len(),
        None => rng.gen_range(cfg.objects_min..=cfg.objects_max),
    };
    let mut placed: Vec<PlacedObject> = Vec::new();
    for obj_index in 0..count {
        let class = match forced_classes {
            Some(classes) => classes[obj_index],
            None => rng.gen_range(0..OBJECT_CLASSES),
        };
        let size = rng.gen_range(80..=92) as i64;
        let mut ok = false;
        for _attempt in 0..60 {
            let x0 = rng.gen_range(0..cfg.width as i64 - size);
            let y0 = rng.gen_range(0..cfg.height as i64 - size);
            if !placement_fits(&fov, &placed, x0, y0, size) {
                continue;
            }
            if let Some(bbox) = render_object(&mut image, cfg, &fov, class, x0, y0, size as usize, &mut rng) {
                if rng.gen::<f32>() < cfg.shadow_prob {
                    render_shadow(&mut image, cfg, &fov, &bbox);
                }
                placed.push(PlacedObject { bbox, class });
                ok = true;
                break;
            }
        }
        if !ok {
            // pinned classes and the configured minimum are hard
            // requirements; beyond that a crowded sector just caps the count
            if forced_classes.is_some() || placed.len() < cfg.objects_min {
                return Err(Error::Config(format!(
                    "could not place object {obj_index} of {count} without overlap"
                )));
            }
            break;
        }
    }

    let annotations = placed
        .iter()
        .map(|p| p.bbox.with_label(p.class))
        .collect();
    Ok(SonarFrame {
        image: Tensor::new(vec![1, cfg.height, cfg.width], image)?,
        fov,
        annotations,
        id: format!("frame{frame_index:06}"),
    })
}

/// Generate `count` frames in parallel; per-frame seeds keep the result
/// independent of the thread count.
pub fn generate_frames(cfg: &SceneConfig, count: usize) -> Result<Vec<SonarFrame>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, i))
        .collect()
}

/// A tracking sequence: one object of a fixed class drifting across the
/// field of view, with fresh speckle per frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub scene: SceneConfig,
    pub frames: usize,
    pub class: usize,
    pub start_x: i64,
    pub start_y: i64,
    pub drift_x: i64,
    pub drift_y: i64,
}

pub fn generate_sequence(cfg: &SequenceConfig) -> Result<Vec<SonarFrame>> {
    cfg.scene.validate()?;
    let fov = FovMask::sector(cfg.scene.width, cfg.scene.height, cfg.scene.sector())?;
    // object appearance is fixed for the whole sequence
    let mut shape_rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.scene.seed, 0xFACADE));
    let size = shape_rng.gen_range(80..=88) as i64;
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.scene.seed, 0xBEEF00 + f as u64));
        let mut image = render_speckle(&cfg.scene, &fov, &mut rng);
        let x0 = cfg.start_x + cfg.drift_x * f as i64;
        let y0 = cfg.start_y + cfg.drift_y * f as i64;
        if !placement_fits(&fov, &[], x0, y0, size) {
            return Err(Error::Config(format!("sequence frame {f}: object leaves the field of view")));
        }
        // same appearance stream every frame
        let mut obj_rng = shape_rng.clone();
        let bbox = render_object(&mut image, &cfg.scene, &fov, cfg.class, x0, y0, size as usize, &mut obj_rng)
            .ok_or_else(|| Error::Config("object rendered no pixels".into()))?;
        frames.push(SonarFrame {
            image: Tensor::new(vec![1, cfg.scene.height, cfg.scene.width], image)?,
            fov: fov.clone(),
            annotations: vec![bbox.with_label(cfg.class)],
            id: format!("seq{f:04}"),
        });
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Patch datasets
// ---------------------------------------------------------------------------

/// 96x96 crop centered on a box, clamped into the frame.
pub fn crop_centered(frame: &SonarFrame, bbox: &BoundingBox) -> Result<Tensor> {
    let (cx, cy) = bbox.center();
    let half = PATCH as i64 / 2;
    let x = (cx.round() as i64 - half).clamp(0, frame.image.shape()[2] as i64 - PATCH as i64);
    let y = (cy.round() as i64 - half).clamp(0, frame.image.shape()[1] as i64 - PATCH as i64);
    crate::geometry::crop_window(&frame.image, &BoundingBox::new(x, y, PATCH as i64, PATCH as i64))
}

/// A background crop with IoU < 0.1 against every annotation, or None if
/// the frame offers no such window.
fn background_crop(frame: &SonarFrame, rng: &mut ChaCha8Rng) -> Option<Tensor> {
    let (h, w) = (frame.image.shape()[1] as i64, frame.image.shape()[2] as i64);
    for _ in 0..80 {
        let x = rng.gen_range(0..=(w - PATCH as i64));
        let y = rng.gen_range(0..=(h - PATCH as i64));
        let window = BoundingBox::new(x, y, PATCH as i64, PATCH as i64);
        let in_fov = frame.fov.is_inside(x, y)
            && frame.fov.is_inside(x + PATCH as i64 - 1, y)
            && frame.fov.is_inside(x, y + PATCH as i64 - 1)
            && frame.fov.is_inside(x + PATCH as i64 - 1, y + PATCH as i64 - 1);
        if !in_fov {
            continue;
        }
        if frame.annotations.iter().all(|a| iou(&window, a) < 0.1) {
            return crate::geometry::crop_window(&frame.image, &window).ok();
        }
    }
    None
}

/// Labeled 96x96 patches split into train/val/test. Patches come from
/// disjoint frames per split.
#[derive(Debug, Clone, Default)]
pub struct ClassificationSet {
    pub train: Vec<(Tensor, usize)>,
    pub val: Vec<(Tensor, usize)>,
    pub test: Vec<(Tensor, usize)>,
}

impl ClassificationSet {
    /// Downscale every patch to `size x size` (bilinear), for the
    /// image-size sweep.
    pub fn downscaled(&self, size: usize) -> Result<ClassificationSet> {
        let shrink = |patches: &[(Tensor, usize)]| -> Result<Vec<(Tensor, usize)>> {
            patches
                .iter()
                .map(|(p, l)| {
                    let plane = p.clone().reshape(&[PATCH, PATCH])?;
                    let small = resize_bilinear(&plane, size, size)?;
                    Ok((small.reshape(&[1, size, size])?, *l))
                })
                .collect()
        };
        Ok(ClassificationSet {
            train: shrink(&self.train)?,
            val: shrink(&self.val)?,
            test: shrink(&self.test)?,
        })
    }
}

/// Build a balanced classification set: `spc` training samples per class
/// (the samples-per-class knob), plus fixed per-class validation and test
/// counts. Background crops fill class 10.
pub fn make_classification_set(
    cfg: &SceneConfig,
    spc: usize,
    val_per_class: usize,
    test_per_class: usize,
) -> Result<ClassificationSet> {
    if spc == 0 {
        return Err(Error::Config("samples per class must be >= 1".into()));
    }
    let classes = OBJECT_CLASSES + 1;
    let needs = [spc, val_per_class, test_per_class];
    let mut sets = [Vec::new(), Vec::new(), Vec::new()];
    let mut counts = [vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]];
    let mut bg_rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, 0xB6));

    let total_needed: usize = needs.iter().sum::<usize>() * classes;
    let frame_budget = (total_needed * 6).max(96) as u64;
    let mut frame_index = 0u64;
    // round-robin over object classes so every class fills at a steady rate
    let mut next_class = 0usize;
    loop {
        let done = (0..3).all(|s| (0..classes).all(|c| counts[s][c] >= needs[s]));
        if done {
            break;
        }
        if frame_index >= frame_budget {
            return Err(Error::Degenerate(format!(
                "insufficient scene supply after {frame_budget} frames"
            )));
        }
        let forced = [next_class % OBJECT_CLASSES];
        next_class = (next_class + 1) % OBJECT_CLASSES;
        let frame = generate_scene_with_classes(cfg, frame_index, Some(&forced))?;
        // frames rotate through splits so splits never share a frame
        let split = (frame_index % 3) as usize;
        frame_index += 1;
        for annotation in &frame.annotations {
            let class = annotation.label.expect("generator labels every box");
            if counts[split][class] >= needs[split] {
                continue;
            }
            sets[split].push((crop_centered(&frame, annotation)?, class));
            counts[split][class] += 1;
        }
        if counts[split][BACKGROUND_CLASS] < needs[split] {
            if let Some(patch) = background_crop(&frame, &mut bg_rng) {
                sets[split].push((patch, BACKGROUND_CLASS));
                counts[split][BACKGROUND_CLASS] += 1;
            }
        }
    }
    let [train, val, test] = sets;
    Ok(ClassificationSet { train, val, test })
}

// ---------------------------------------------------------------------------
// Matching pairs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    PositiveObjObj,
    NegativeObjObj,
    NegativeObjBg,
}

#[derive(Debug, Clone)]
pub struct MatchPair {
    pub a: Tensor,
    pub b: Tensor,
    pub label: bool,
    pub kind: PairKind,
}

/// Split policy for the matching dataset: `Shared` mixes every class across
/// splits; `Disjoint` assigns whole classes to one split only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    Shared,
    Disjoint,
}

#[derive(Debug, Clone, Default)]
pub struct MatchingSet {
    pub train: Vec<MatchPair>,
    pub val: Vec<MatchPair>,
    pub test: Vec<MatchPair>,
}

/// Per object instance: 10 positive same-class pairs, 5 negative
/// different-class pairs, and 5 object-background pairs.
fn pairs_for_classes(
    crops: &std::collections::BTreeMap<usize, Vec<Tensor>>,
    backgrounds: &[Tensor],
    classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MatchPair>> {
    if classes.len() < 2 {
        return Err(Error::Degenerate("matching needs at least two distinct classes".into()));
    }
    let mut pairs = Vec::new();
    for &class in classes {
        let instances = &crops[&class];
        if instances.len() < 2 {
            return Err(Error::Degenerate(format!(
                "class {class} has a single instance; cannot form positive pairs"
            )));
        }
        for (i, anchor) in instances.iter().enumerate() {
            for _ in 0..10 {
                let mut j = rng.gen_range(0..instances.len());
                while j == i {
                    j = rng.gen_range(0..instances.len());
                }
                pairs.push(MatchPair {
                    a: anchor.clone(),
                    b: instances[j].clone(),
                    label: true,
                    kind: PairKind::PositiveObjObj,
                });
            }
            for _ in 0..5 {
                let mut other = classes[rng.gen_range(0..classes.len())];
                while other == class {
                    other = classes[rng.gen_range(0..classes.len())];
                }
                let pool = &crops[&other];
                pairs.push(MatchPair {
                    a: anchor.clone(),
                    b: pool[rng.gen_range(0..pool.len())].clone(),
                    label: false,
                    kind: PairKind::NegativeObjObj,
                });
            }
            for _ in 0..5 {
                pairs.push(MatchPair {
                    a: anchor.clone(),
                    b: backgrounds[rng.gen_range(0..backgrounds.len())].clone(),
                    label: false,
                    kind: PairKind::NegativeObjBg,
                });
            }
        }
    }
    Ok(pairs)
}

/// Build the matching-pair dataset from synthetic frames.
pub fn make_matching_set(
    cfg: &SceneConfig,
    instances_per_class: usize,
    mode: SplitMode,
) -> Result<MatchingSet> {
    if instances_per_class < 2 {
        return Err(Error::Config("need at least two instances per class".into()));
    }
    // collect object crops per class and a background pool
    let mut crops: std::collections::BTreeMap<usize, Vec<Tensor>> = (0..OBJECT_CLASSES).map(|c| (c, Vec::new())).collect();
    let mut backgrounds: Vec<Tensor> = Vec::new();
    let bg_needed = instances_per_class * OBJECT_CLASSES / 2 + 8;
    let mut bg_rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, 0xBA9));
    let mut frame_index = 0u64;
    let budget = ((instances_per_class * OBJECT_CLASSES + bg_needed) * 3) as u64;
    let mut next_class = 0usize;
    while crops.values().any(|v| v.len() < instances_per_class) || backgrounds.len() < bg_needed {
        if frame_index >= budget {
            return Err(Error::Degenerate("insufficient scene supply for matching pairs".into()));
        }
        let forced = [next_class % OBJECT_CLASSES];
        next_class = (next_class + 1) % OBJECT_CLASSES;
        let frame = generate_scene_with_classes(cfg, 0x4000 + frame_index, Some(&forced))?;
        frame_index += 1;
        for annotation in &frame.annotations {
            let class = annotation.label.unwrap();
            let list = crops.get_mut(&class).unwrap();
            if list.len() < instances_per_class {
                list.push(crop_centered(&frame, annotation)?);
            }
        }
        if backgrounds.len() < bg_needed {
            if let Some(patch) = background_crop(&frame, &mut bg_rng) {
                backgrounds.push(patch);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, 0x7A17));
    match mode {
        SplitMode::Shared => {
            let all_classes: Vec<usize> = (0..OBJECT_CLASSES).collect();
            let mut pairs = pairs_for_classes(&crops, &backgrounds, &all_classes, &mut rng)?;
            use rand::seq::SliceRandom;
            pairs.shuffle(&mut rng);
            // 70% training, 15% validation, 15% testing
            let n = pairs.len();
            let train_end = n * 70 / 100;
            let val_end = train_end + n * 15 / 100;
            let test = pairs.split_off(val_end);
            let val = pairs.split_off(train_end);
            Ok(MatchingSet {
                train: pairs,
                val,
                test,
            })
        }
        SplitMode::Disjoint => {
            use rand::seq::SliceRandom;
            let mut classes: Vec<usize> = (0..OBJECT_CLASSES).collect();
            classes.shuffle(&mut rng);
            // whole classes per split; two per held-out split so negative
            // object-object pairs stay constructible
            let (train_classes, rest) = classes.split_at(OBJECT_CLASSES - 4);
            let (val_classes, test_classes) = rest.split_at(2);
            let n_bg = backgrounds.len();
            let bg_train = &backgrounds[..n_bg * 70 / 100];
            let bg_val = &backgrounds[n_bg * 70 / 100..n_bg * 85 / 100];
            let bg_test = &backgrounds[n_bg * 85 / 100..];
            Ok(MatchingSet {
                train: pairs_for_classes(&crops, bg_train, train_classes, &mut rng)?,
                val: pairs_for_classes(&crops, bg_val, val_classes, &mut rng)?,
                test: pairs_for_classes(&crops, bg_test, test_classes, &mut rng)?,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Objectness dataset
// ---------------------------------------------------------------------------

/// Horizontal flip of a `(1, H, W)` patch.
pub fn flip_lr(patch: &Tensor) -> Tensor {
    let (h, w) = (patch.shape()[1], patch.shape()[2]);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(patch.data()[y * w + (w - 1 - x)]);
        }
    }
    Tensor::new(vec![1, h, w], out).expect("shape preserved")
}

/// Vertical flip of a `(1, H, W)` patch.
pub fn flip_ud(patch: &Tensor) -> Tensor {
    let (h, w) = (patch.shape()[1], patch.shape()[2]);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(patch.data()[(h - 1 - y) * w + x]);
        }
    }
    Tensor::new(vec![1, h, w], out).expect("shape preserved")
}

/// Window crops labeled with squashed max-IoU objectness, augmented with
/// left-right and up-down flips (three samples per window; flips keep the
/// label because it depends only on the source window's geometry).
pub fn make_objectness_set(frames: &[SonarFrame], stride: usize, eps: f64) -> Result<Vec<(Tensor, f32)>> {
    let mut out = Vec::new();
    for frame in frames {
        let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
        let windows = sliding_windows(w, h, &frame.fov, PATCH, stride)?;
        let labeled = crate::geometry::label_windows(&windows, &frame.annotations, eps)?;
        for (window, label) in labeled {
            let patch = crate::geometry::crop_window(&frame.image, &window)?;
            out.push((flip_lr(&patch), label as f32));
            out.push((flip_ud(&patch), label as f32));
            out.push((patch, label as f32));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    id: String,
    image: String,
    mask: String,
    boxes: Vec<BoxRecord>,
}

fn write_gray_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buffer: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("pixel buffer size");
    buffer.save(path)?;
    Ok(())
}

fn read_gray_png(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

fn write_mask_png(path: &Path, fov: &FovMask) -> Result<()> {
    let (w, h) = (fov.width(), fov.height());
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if fov.is_inside(x as i64, y as i64) {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&packed)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

fn read_mask_png(path: &Path) -> Result<FovMask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.bit_depth {
        png::BitDepth::One => {
            let row_bytes = w.div_ceil(8);
            let mut bits = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    bits.push(buf[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0);
                }
            }
            bits
        }
        png::BitDepth::Eight => buf[..w * h].iter().map(|&v| v >= 128).collect(),
        other => return Err(Error::Png(format!("unsupported mask bit depth {other:?}"))),
    };
    FovMask::from_raster(w, h, data)
}

/// Write a dataset directory: `images/` (8-bit grayscale PNG), `masks/`
/// (1-bit PNG), `annotations.jsonl`, and `config.json` for provenance.
pub fn save_dataset(frames: &[SonarFrame], cfg: &SceneConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("annotations.jsonl"))?);
    for frame in frames {
        let image_rel = format!("images/{}.png", frame.id);
        let mask_rel = format!("masks/{}.png", frame.id);
        write_gray_png(&dir.join(&image_rel), &frame.image)?;
        write_mask_png(&dir.join(&mask_rel), &frame.fov)?;
        let record = FrameRecord {
            id: frame.id.clone(),
            image: image_rel,
            mask: mask_rel,
            boxes: frame
                .annotations
                .iter()
                .map(|b| BoxRecord {
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    label: b.label.unwrap_or(BACKGROUND_CLASS),
                })
                .collect(),
        };
        serde_json::to_writer(&mut jsonl, &record)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    serde_json::to_writer_pretty(std::fs::File::create(dir.join("config.json"))?, cfg)?;
    Ok(())
}

/// Read a dataset directory back. Malformed annotation lines are reported
/// with their line number.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<SonarFrame>, SceneConfig)> {
    let dir = dir.as_ref();
    let cfg: SceneConfig = serde_json::from_reader(
        std::fs::File::open(dir.join("config.json"))
            .map_err(|_| Error::MissingFile(dir.join("config.json").display().to_string()))?,
    )?;
    let jsonl = std::fs::File::open(dir.join("annotations.jsonl"))
        .map_err(|_| Error::MissingFile(dir.join("annotations.jsonl").display().to_string()))?;
    let mut frames = Vec::new();
    for (line_index, line) in std::io::BufReader::new(jsonl).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::JsonlLine {
            line: line_index + 1,
            message: e.to_string(),
        })?;
        let image = read_gray_png(&dir.join(&record.image))?;
        let fov = read_mask_png(&dir.join(&record.mask))?;
        let annotations = record
            .boxes
            .iter()
            .map(|b| BoundingBox::new(b.x, b.y, b.w, b.h).with_label(b.label))
            .collect();
        frames.push(SonarFrame {
            image,
            fov,
            annotations,
            id: record.id,
        });
    }
    Ok((frames, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> SceneConfig {
        SceneConfig {
            width: 240,
            height: 200,
            r_min: 20.0,
            r_max: 195.0,
            half_angle: 1.0,
            objects_min: 1,
            objects_max: 2,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_frames() {
        let cfg = small_config(7);
        let a = generate_scene(&cfg, 3).unwrap();
        let b = generate_scene(&cfg, 3).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.annotations, b.annotations);
        let c = generate_scene(&cfg, 4).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn zero_objects_gives_background_only() {
        let mut cfg = small_config(8);
        cfg.objects_min = 0;
        cfg.objects_max = 0;
        let frame = generate_scene(&cfg, 0).unwrap();
        assert!(frame.annotations.is_empty());
        assert!(frame.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn annotations_stay_inside_fov_and_are_brighter() {
        let cfg = SceneConfig { seed: 9, ..SceneConfig::default() };
        for index in 0..4 {
            let frame = generate_scene(&cfg, index).unwrap();
            assert!(!frame.annotations.is_empty());
            let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
            let mut inside_sum = 0.0f64;
            let mut inside_n = 0usize;
            let mut outside_sum = 0.0f64;
            let mut outside_n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if !frame.fov.is_inside(x as i64, y as i64) {
                        continue;
                    }
                    let v = frame.image.data()[y * w + x] as f64;
                    let in_box = frame.annotations.iter().any(|b| {
                        (x as i64) >= b.x && (x as i64) < b.x + b.w && (y as i64) >= b.y && (y as i64) < b.y + b.h
                    });
                    if in_box {
                        inside_sum += v;
                        inside_n += 1;
                    } else {
                        outside_sum += v;
                        outside_n += 1;
                    }
                }
            }
            let margin = inside_sum / inside_n as f64 - outside_sum / outside_n as f64;
            assert!(margin >= 0.2, "frame {index}: highlight margin {margin}");
            // boxes inside the mask
            for b in &frame.annotations {
                assert!(frame.fov.is_inside(b.x, b.y));
                assert!(frame.fov.is_inside(b.x + b.w - 1, b.y + b.h - 1));
            }
        }
    }

    #[test]
    fn classification_set_is_balanced() {
        let cfg = small_config(10);
        let set = make_classification_set(&cfg, 1, 1, 1).unwrap();
        assert_eq!(set.train.len(), OBJECT_CLASSES + 1);
        for class in 0..=OBJECT_CLASSES {
            assert_eq!(set.train.iter().filter(|(_, l)| *l == class).count(), 1);
        }
        // downscale halves both extents
        let small = set.downscaled(48).unwrap();
        assert_eq!(small.train[0].0.shape(), &[1, 48, 48]);
    }

    #[test]
    fn background_crops_avoid_objects() {
        let cfg = small_config(11);
        let frame = generate_scene(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            if let Some(_patch) = background_crop(&frame, &mut rng) {
                // contract checked inside background_crop; just ensure it
                // yields patches of the right shape
            }
        }
    }

    #[test]
    fn matching_pairs_have_quoted_ratios() {
        let cfg = small_config(12);
        let set = make_matching_set(&cfg, 3, SplitMode::Shared).unwrap();
        let total = set.train.len() + set.val.len() + set.test.len();
        // 10 classes x 3 instances x 20 pairs each
        assert_eq!(total, 10 * 3 * 20);
        let all: Vec<&MatchPair> = set.train.iter().chain(&set.val).chain(&set.test).collect();
        let pos = all.iter().filter(|p| p.label).count();
        let neg = all.iter().filter(|p| !p.label).count();
        assert_eq!(pos, neg); // balanced 10 positive vs 5 + 5 negative
        let bg = all.iter().filter(|p| p.kind == PairKind::NegativeObjBg).count();
        assert_eq!(bg, total / 4);
    }

    #[test]
    fn disjoint_mode_separates_classes() {
        let cfg = small_config(13);
        let set = make_matching_set(&cfg, 3, SplitMode::Disjoint).unwrap();
        // labels are not stored on pairs; regenerate the partition from the
        // crop identity instead: any tensor in train must not appear in test
        let train_ptrs: std::collections::HashSet<usize> =
            set.train.iter().map(|p| p.a.data().as_ptr() as usize).collect();
        for pair in &set.test {
            assert!(!train_ptrs.contains(&(pair.a.data().as_ptr() as usize)));
        }
        assert!(!set.train.is_empty() && !set.val.is_empty() && !set.test.is_empty());
    }

    #[test]
    fn pair_generation_requires_two_instances() {
        let mut crops = std::collections::BTreeMap::new();
        crops.insert(0usize, vec![Tensor::zeros(&[1, 4, 4])]);
        crops.insert(1usize, vec![Tensor::zeros(&[1, 4, 4]); 2]);
        let backgrounds = vec![Tensor::zeros(&[1, 4, 4])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(pairs_for_classes(&crops, &backgrounds, &[0, 1], &mut rng).is_err());
    }

    #[test]
    fn objectness_set_triples_with_flips() {
        let cfg = small_config(14);
        let frame = generate_scene(&cfg, 0).unwrap();
        let windows = sliding_windows(cfg.width, cfg.height, &frame.fov, PATCH, 32).unwrap();
        let set = make_objectness_set(std::slice::from_ref(&frame), 32, 0.2).unwrap();
        assert_eq!(set.len(), 3 * windows.len());
        // flipped copies carry the original label
        for chunk in set.chunks(3) {
            assert_eq!(chunk[0].1, chunk[1].1);
            assert_eq!(chunk[1].1, chunk[2].1);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let cfg = small_config(15);
        let frame = generate_scene(&cfg, 1).unwrap();
        let patch = crop_centered(&frame, &frame.annotations[0]).unwrap();
        assert_eq!(flip_lr(&flip_lr(&patch)).data(), patch.data());
        assert_eq!(flip_ud(&flip_ud(&patch)).data(), patch.data());
        assert_ne!(flip_lr(&patch).data(), patch.data());
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = small_config(16);
        let frames = generate_frames(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&frames, &cfg, dir.path()).unwrap();
        let (loaded, loaded_cfg) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.len(), frames.len());
        for (orig, back) in frames.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.annotations, back.annotations); // boxes exact
            assert_eq!(orig.fov.raster(), back.fov.raster()); // mask exact
            let max_err = orig
                .image
                .data()
                .iter()
                .zip(back.image.data())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 1.0 / 255.0, "pixel error {max_err}");
        }
    }

    #[test]
    fn corrupt_annotation_line_is_reported_with_its_number() {
        let cfg = small_config(17);
        let frames = generate_frames(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&frames, &cfg, dir.path()).unwrap();
        let path = dir.path().join("annotations.jsonl");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{ this is not json\n");
        std::fs::write(&path, text).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::JsonlLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn sequence_drifts_deterministically() {
        let cfg = SequenceConfig {
            scene: SceneConfig { seed: 18, ..SceneConfig::default() },
            frames: 5,
            class: 8,
            start_x: 150,
            start_y: 60,
            drift_x: 6,
            drift_y: 2,
        };
        let frames = generate_sequence(&cfg).unwrap();
        assert_eq!(frames.len(), 5);
        for pair in frames.windows(2) {
            let a = &pair[0].annotations[0];
            let b = &pair[1].annotations[0];
            assert_eq!(b.x - a.x, 6);
            assert_eq!(b.y - a.y, 2);
        }
        let again = generate_sequence(&cfg).unwrap();
        assert_eq!(frames[0].image.data(), again[0].image.data());
    }
}
