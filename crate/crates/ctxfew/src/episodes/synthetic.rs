//! Procedural glyph dataset generation.
//!
//! Classes are small compositions of stroke parts. Each hierarchy family owns
//! a bank of parts; sibling classes share a part trio and differ by which
//! anchor slots the parts occupy, so telling them apart needs part-position
//! correspondence rather than a bag of part features. Images of a class
//! re-render the same arrangement under random translation, rotation, and
//! scale.

use super::{ClassRecord, Dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_images_per_class")]
    pub images_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_hierarchy_depth")]
    pub hierarchy_depth: usize,
    #[serde(default = "default_train_classes")]
    pub train_classes: usize,
    #[serde(default = "default_val_classes")]
    pub val_classes: usize,
    #[serde(default = "default_test_classes")]
    pub test_classes: usize,
    /// Distractor clutter, pixel noise, and illumination gradients on top
    /// of the clean render.
    #[serde(default = "default_noise")]
    pub noise: bool,
}

fn default_num_classes() -> usize {
    100
}
fn default_images_per_class() -> usize {
    30
}
fn default_image_size() -> usize {
    24
}
fn default_hierarchy_depth() -> usize {
    2
}
fn default_train_classes() -> usize {
    60
}
fn default_val_classes() -> usize {
    20
}
fn default_test_classes() -> usize {
    20
}
fn default_noise() -> bool {
    true
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: default_num_classes(),
            images_per_class: default_images_per_class(),
            image_size: default_image_size(),
            hierarchy_depth: default_hierarchy_depth(),
            train_classes: default_train_classes(),
            val_classes: default_val_classes(),
            test_classes: default_test_classes(),
            noise: default_noise(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 10 {
            return Err(Error::Config(format!(
                "num_classes must be at least 10, got {}",
                self.num_classes
            )));
        }
        if self.images_per_class < 2 {
            return Err(Error::Config("images_per_class must be at least 2".to_string()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.hierarchy_depth == 0 || self.hierarchy_depth > 4 {
            return Err(Error::Config("hierarchy_depth must lie in 1..=4".to_string()));
        }
        if self.train_classes + self.val_classes + self.test_classes != self.num_classes {
            return Err(Error::Config(format!(
                "splits {}+{}+{} do not sum to num_classes {}",
                self.train_classes, self.val_classes, self.test_classes, self.num_classes
            )));
        }
        if self.train_classes < 2 || self.val_classes < 2 || self.test_classes < 2 {
            return Err(Error::Config("every split needs at least 2 classes".to_string()));
        }
        Ok(())
    }
}

const PARTS_PER_FAMILY: usize = 6;
/// Slot positions a part can occupy; 90 degrees apart, so the global
/// rotation jitter can never turn one arrangement into another.
const ANCHOR_SLOTS: usize = 4;
const ANCHOR_RADIUS: f32 = 0.24;
const TRANSLATE_JITTER: f32 = 0.16;
const ROTATE_JITTER: f32 = 0.35;
const SCALE_LO: f32 = 0.85;
const SCALE_HI: f32 = 1.15;
const PART_JITTER: f32 = 0.03;
const NOISE_SIGMA: f32 = 0.03;

#[derive(Clone, Copy, Debug)]
enum PartKind {
    Segment,
    Arc,
    Blob,
    Ring,
    Corner,
    Cross,
}

#[derive(Clone, Copy, Debug)]
struct Part {
    kind: PartKind,
    /// Diameter as a fraction of image size.
    size: f32,
    angle: f32,
    /// Shape-specific parameter (arc sweep, corner opening).
    curve: f32,
}

#[derive(Clone, Debug)]
struct ClassDef {
    /// (part, radial offset fraction, offset angle)
    placed: Vec<(Part, f32, f32)>,
}

/// All 3-element subsets of `0..n` in lexicographic order.
fn part_trios(n: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// All injective assignments of three parts onto `slots` anchors.
fn slot_assignments(slots: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..slots {
        for b in 0..slots {
            for c in 0..slots {
                if a != b && a != c && b != c {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

fn draw_part(rng: &mut ChaCha8Rng) -> Part {
    let kind = match rng.random_range(0..6) {
        0 => PartKind::Segment,
        1 => PartKind::Arc,
        2 => PartKind::Blob,
        3 => PartKind::Ring,
        4 => PartKind::Corner,
        _ => PartKind::Cross,
    };
    Part {
        kind,
        size: rng.random_range(0.22..0.42),
        angle: rng.random_range(0.0..std::f32::consts::TAU),
        curve: rng.random_range(0.6..2.2),
    }
}

/// Distance from a point in part-local pixel coordinates to the part shape.
fn part_distance(part: &Part, u: f32, v: f32, px_size: f32) -> f32 {
    let s = px_size * part.size;
    let seg = |u: f32, v: f32, ax: f32, ay: f32, bx: f32, by: f32| -> f32 {
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((u - ax) * dx + (v - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (ax + t * dx, ay + t * dy);
        ((u - px) * (u - px) + (v - py) * (v - py)).sqrt()
    };
    let r = (u * u + v * v).sqrt();
    match part.kind {
        PartKind::Segment => seg(u, v, -s / 2.0, 0.0, s / 2.0, 0.0),
        PartKind::Arc => {
            let radius = s / 2.0;
            let span = part.curve;
            let phi = v.atan2(u).clamp(-span, span);
            let (cx, cy) = (radius * phi.cos(), radius * phi.sin());
            ((u - cx) * (u - cx) + (v - cy) * (v - cy)).sqrt()
        }
        PartKind::Blob => (r - s / 3.0).max(0.0),
        PartKind::Ring => (r - s / 2.4).abs(),
        PartKind::Corner => {
            let open = 1.2 + 0.5 * part.curve;
            let a = seg(u, v, 0.0, 0.0, s / 2.0, 0.0);
            let b = seg(u, v, 0.0, 0.0, s / 2.0 * open.cos(), s / 2.0 * open.sin());
            a.min(b)
        }
        PartKind::Cross => {
            let a = seg(u, v, -s / 2.0, 0.0, s / 2.0, 0.0);
            let b = seg(u, v, 0.0, -s / 2.0, 0.0, s / 2.0);
            a.min(b)
        }
    }
}

struct Pose {
    dx: f32,
    dy: f32,
    rot: f32,
    scale: f32,
    part_jitter: Vec<(f32, f32)>,
}

fn draw_pose(n_parts: usize, size: f32, rng: &mut ChaCha8Rng) -> Pose {
    Pose {
        dx: rng.random_range(-TRANSLATE_JITTER..TRANSLATE_JITTER) * size,
        dy: rng.random_range(-TRANSLATE_JITTER..TRANSLATE_JITTER) * size,
        rot: rng.random_range(-ROTATE_JITTER..ROTATE_JITTER),
        scale: rng.random_range(SCALE_LO..SCALE_HI),
        part_jitter: (0..n_parts)
            .map(|_| {
                (
                    rng.random_range(-PART_JITTER..PART_JITTER) * size,
                    rng.random_range(-PART_JITTER..PART_JITTER) * size,
                )
            })
            .collect(),
    }
}

/// Max-composites one part onto the canvas at pixel position (px, py).
fn stamp_part(img: &mut Image, part: &Part, px: f32, py: f32, rot: f32, scale: f32) {
    let sz = img.h as f32;
    let thickness = (0.045 * sz * scale).max(0.7);
    let part_angle = part.angle + rot;
    let (ca, sa) = (part_angle.cos(), part_angle.sin());
    for y in 0..img.h {
        for x in 0..img.w {
            let rx = x as f32 - px;
            let ry = y as f32 - py;
            // Rotate into the part frame and undo the global scale.
            let u = (rx * ca + ry * sa) / scale;
            let v = (-rx * sa + ry * ca) / scale;
            let d = part_distance(part, u, v, sz);
            let val = (-(d / thickness) * (d / thickness)).exp();
            let px_ref = img.at_mut(y, x, 0);
            if val > *px_ref {
                *px_ref = val;
            }
        }
    }
}

fn render(def: &ClassDef, size: usize, pose: &Pose) -> Image {
    let mut img = Image::new(size, size, 1);
    let sz = size as f32;
    let center = (sz - 1.0) / 2.0;
    for (i, (part, off_r, off_a)) in def.placed.iter().enumerate() {
        let a = off_a + pose.rot;
        let px = center + pose.dx + off_r * sz * pose.scale * a.cos() + pose.part_jitter[i].0;
        let py = center + pose.dy + off_r * sz * pose.scale * a.sin() + pose.part_jitter[i].1;
        stamp_part(&mut img, part, px, py, pose.rot, pose.scale);
    }
    img
}

/// Up to two unrelated parts per image: clutter that a bag of pooled
/// features absorbs into the class representation, while a part-by-part
/// comparison can ignore it. Weighted towards a single distractor; the
/// double-clutter tail is kept small so local comparison stays viable.
fn add_distractors(img: &mut Image, pose: &Pose, rng: &mut ChaCha8Rng) {
    let count = match rng.random_range(0..8u8) {
        0..=2 => 0,
        7 => 2,
        _ => 1,
    };
    let sz = img.h as f32;
    for _ in 0..count {
        let part = draw_part(rng);
        let px = rng.random_range(0.16..0.84) * sz;
        let py = rng.random_range(0.16..0.84) * sz;
        stamp_part(img, &part, px, py, pose.rot, pose.scale);
    }
}

fn add_noise(img: &mut Image, rng: &mut ChaCha8Rng) {
    let grad_a = rng.random_range(0.0..std::f32::consts::TAU);
    let grad_amp = rng.random_range(0.0..0.06);
    let (gy, gx) = (grad_a.sin(), grad_a.cos());
    let sz = img.h as f32;
    for y in 0..img.h {
        for x in 0..img.w {
            let g = grad_amp * ((y as f32 * gy + x as f32 * gx) / sz);
            let n: f32 = <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng);
            let v = img.at_mut(y, x, 0);
            *v += g + NOISE_SIGMA * n;
        }
    }
    img.clamp_unit();
}

/// Generates a part-composed glyph dataset with a balanced class hierarchy.
/// The same seed always produces byte-identical manifests and images.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.num_classes;
    let branching =
        (n as f64).powf(1.0 / cfg.hierarchy_depth as f64).ceil().max(2.0) as usize;

    // Family part banks and plan orders. A family is the top hierarchy level.
    let family_span = branching.pow((cfg.hierarchy_depth - 1) as u32).max(1);
    let n_families = n.div_ceil(family_span);
    let family_of = |id: usize| id / family_span;
    let mut banks: Vec<Vec<Part>> = Vec::new();
    let mut fam_trios: Vec<Vec<[usize; 3]>> = Vec::new();
    let mut fam_slots: Vec<Vec<[usize; 3]>> = Vec::new();
    for _ in 0..n_families {
        banks.push((0..PARTS_PER_FAMILY).map(|_| draw_part(rng)).collect());
        let mut trios = part_trios(PARTS_PER_FAMILY);
        trios.shuffle(rng);
        let mut slots = slot_assignments(ANCHOR_SLOTS);
        slots.shuffle(rng);
        fam_trios.push(trios);
        fam_slots.push(slots);
    }

    // Class definitions. The slot assignment varies fastest, so sibling
    // classes share a part trio and are told apart purely by arrangement;
    // capacity per family is 20 trios x 24 assignments before wrapping.
    let mut defs = Vec::with_capacity(n);
    for id in 0..n {
        let fam = family_of(id).min(n_families - 1);
        let local = id - fam * family_span;
        let trios = &fam_trios[fam];
        let slots = &fam_slots[fam];
        let trio = trios[(local / slots.len()) % trios.len()];
        let assignment = slots[local % slots.len()];
        let placed = trio
            .iter()
            .zip(assignment)
            .map(|(&p, slot)| {
                let angle =
                    std::f32::consts::TAU * (0.125 + slot as f32 / ANCHOR_SLOTS as f32);
                (banks[fam][p], ANCHOR_RADIUS, angle)
            })
            .collect();
        defs.push(ClassDef { placed });
    }

    let mut classes = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (id, def) in defs.iter().enumerate() {
        let split = if id < cfg.train_classes {
            Split::Train
        } else if id < cfg.train_classes + cfg.val_classes {
            Split::Val
        } else {
            Split::Test
        };
        let mut hierarchy = Vec::with_capacity(cfg.hierarchy_depth);
        for level in 0..cfg.hierarchy_depth {
            let leaves_per_node =
                branching.pow((cfg.hierarchy_depth - 1 - level) as u32).max(1);
            hierarchy.push(format!("h{level}_{}", id / leaves_per_node));
        }
        let mut files = Vec::with_capacity(cfg.images_per_class);
        let mut imgs = Vec::with_capacity(cfg.images_per_class);
        for i in 0..cfg.images_per_class {
            let pose = draw_pose(def.placed.len(), cfg.image_size as f32, rng);
            let mut img = render(def, cfg.image_size, &pose);
            if cfg.noise {
                add_distractors(&mut img, &pose, rng);
                add_noise(&mut img, rng);
            }
            files.push(format!("c{id:03}/i{i:03}.pgm"));
            imgs.push(img);
        }
        classes.push(ClassRecord {
            id,
            name: format!("c{id:03}"),
            split,
            hierarchy,
            images: files,
        });
        images.push(imgs);
    }
    let manifest = Manifest { image_size: cfg.image_size, channels: 1, classes };
    manifest.validate()?;
    Ok(Dataset { manifest, images })
}
