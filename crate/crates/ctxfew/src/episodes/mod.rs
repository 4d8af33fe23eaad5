//! Datasets, episode sampling, and the two augmentation pipelines.
//!
//! An episode is a labeled support set plus a query set over the same
//! classes. The sampler draws ways uniformly within a configured range,
//! draws per-class shots, then rescales them so the total support size lands
//! inside its range. Half of the episodes (configurable) restrict all classes
//! to one hierarchy subtree.

pub mod augment;
pub mod simclr;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::image::{read_pnm, Image};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassRecord {
    pub id: usize,
    pub name: String,
    pub split: Split,
    /// Path of hierarchy nodes from the root; empty when no hierarchy exists.
    pub hierarchy: Vec<String>,
    /// Image files relative to the dataset root.
    pub images: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub image_size: usize,
    pub channels: usize,
    pub classes: Vec<ClassRecord>,
}

/// A dataset with all images resident in memory, indexed by class.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Parallel to `manifest.classes`.
    pub images: Vec<Vec<Image>>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Dataset("image_size must be positive".to_string()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Dataset(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        let mut seen = BTreeSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::Dataset(format!(
                    "class ids must be dense and ordered: position {i} has id {}",
                    c.id
                )));
            }
            if !seen.insert(&c.name) {
                return Err(Error::Dataset(format!("duplicate class name {}", c.name)));
            }
            if c.images.is_empty() {
                return Err(Error::Dataset(format!("class {} has no images", c.name)));
            }
        }
        Ok(())
    }
}

impl Dataset {
    /// Reads manifest.json and every referenced image under `root`.
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest_path = root.join("manifest.json");
        let bytes = std::fs::read(&manifest_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("bad manifest: {e}")))?;
        manifest.validate()?;
        let mut images = Vec::with_capacity(manifest.classes.len());
        for class in &manifest.classes {
            let mut per_class = Vec::with_capacity(class.images.len());
            for file in &class.images {
                let img = read_pnm(&root.join(file))?;
                if img.h != manifest.image_size || img.w != manifest.image_size {
                    return Err(Error::Dataset(format!(
                        "{file}: {}x{} does not match manifest image_size {}",
                        img.h, img.w, manifest.image_size
                    )));
                }
                if img.channels != manifest.channels {
                    return Err(Error::Dataset(format!(
                        "{file}: {} channels, manifest says {}",
                        img.channels, manifest.channels
                    )));
                }
                per_class.push(img);
            }
            images.push(per_class);
        }
        Ok(Dataset { manifest, images })
    }

    /// Writes manifest.json plus one image file per entry under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        self.manifest.validate()?;
        std::fs::create_dir_all(root)?;
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Dataset(format!("manifest encode: {e}")))?;
        std::fs::write(root.join("manifest.json"), json)?;
        for (class, imgs) in self.manifest.classes.iter().zip(&self.images) {
            for (file, img) in class.images.iter().zip(imgs) {
                let path = root.join(file);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                crate::image::write_pnm(&path, img)?;
            }
        }
        Ok(())
    }

    pub fn class_ids_in_split(&self, split: Split) -> Vec<usize> {
        self.manifest
            .classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    /// Distinct internal hierarchy nodes (all path prefixes) within a split.
    fn hierarchy_nodes(&self, split: Split) -> Vec<Vec<String>> {
        let mut nodes = BTreeSet::new();
        for c in self.manifest.classes.iter().filter(|c| c.split == split) {
            for len in 1..=c.hierarchy.len() {
                nodes.insert(c.hierarchy[..len].to_vec());
            }
        }
        nodes.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    Categorization,
    Simclr,
}

#[derive(Debug, Clone)]
pub struct EpisodeItem {
    pub image: Image,
    /// Episode-local class index in 0..n_classes.
    pub class: usize,
    /// Dataset class id, kept for the global auxiliary classifier.
    pub global_class: usize,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub kind: EpisodeKind,
    pub n_classes: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.class).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.class).collect()
    }

    /// Checks the structural contract: every class has support, every query
    /// class appears in the support, per-class query counts are equal on
    /// categorization episodes, and support classes are singletons on
    /// instance-discrimination episodes.
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Episode(format!("{} classes, need at least 2", self.n_classes)));
        }
        let mut support_counts = vec![0usize; self.n_classes];
        for item in &self.support {
            *support_counts
                .get_mut(item.class)
                .ok_or_else(|| Error::Episode(format!("support class {} out of range", item.class)))? += 1;
        }
        if let Some(c) = support_counts.iter().position(|&n| n == 0) {
            return Err(Error::Episode(format!("class {c} has no support images")));
        }
        let mut query_counts = vec![0usize; self.n_classes];
        for item in &self.query {
            *query_counts
                .get_mut(item.class)
                .ok_or_else(|| Error::Episode(format!("query class {} out of range", item.class)))? += 1;
        }
        match self.kind {
            EpisodeKind::Categorization => {
                let per_class = query_counts[0];
                if per_class == 0 || query_counts.iter().any(|&n| n != per_class) {
                    return Err(Error::Episode(format!(
                        "categorization episodes need equal per-class query counts, got {query_counts:?}"
                    )));
                }
            }
            EpisodeKind::Simclr => {
                if support_counts.iter().any(|&n| n != 1) {
                    return Err(Error::Episode(
                        "instance episodes need singleton support classes".to_string(),
                    ));
                }
                if query_counts.iter().any(|&n| n > 1) {
                    return Err(Error::Episode("repeated query source".to_string()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_ways_min")]
    pub ways_min: usize,
    #[serde(default = "default_ways_max")]
    pub ways_max: usize,
    #[serde(default = "default_support_min")]
    pub support_min: usize,
    #[serde(default = "default_support_max")]
    pub support_max: usize,
    #[serde(default = "default_queries_per_class")]
    pub queries_per_class: usize,
    #[serde(default = "default_fine_grained_fraction")]
    pub fine_grained_fraction: f32,
    #[serde(default = "default_simclr_fraction")]
    pub simclr_fraction: f32,
}

fn default_ways_min() -> usize {
    5
}
fn default_ways_max() -> usize {
    50
}
fn default_support_min() -> usize {
    50
}
fn default_support_max() -> usize {
    500
}
fn default_queries_per_class() -> usize {
    10
}
fn default_fine_grained_fraction() -> f32 {
    0.5
}
fn default_simclr_fraction() -> f32 {
    0.5
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ways_min: default_ways_min(),
            ways_max: default_ways_max(),
            support_min: default_support_min(),
            support_max: default_support_max(),
            queries_per_class: default_queries_per_class(),
            fine_grained_fraction: default_fine_grained_fraction(),
            simclr_fraction: default_simclr_fraction(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways_min < 2 || self.ways_min > self.ways_max {
            return Err(Error::Config(format!(
                "ways range [{}, {}] must be nonempty with at least 2 ways",
                self.ways_min, self.ways_max
            )));
        }
        if self.support_min == 0 || self.support_min > self.support_max {
            return Err(Error::Config(format!(
                "support range [{}, {}] must be nonempty and positive",
                self.support_min, self.support_max
            )));
        }
        if self.ways_max > self.support_max {
            return Err(Error::Config(format!(
                "ways_max {} cannot exceed support_max {}",
                self.ways_max, self.support_max
            )));
        }
        if self.queries_per_class == 0 {
            return Err(Error::Config("queries_per_class must be positive".to_string()));
        }
        for (name, f) in
            [("fine_grained_fraction", self.fine_grained_fraction), ("simclr_fraction", self.simclr_fraction)]
        {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Uniform draw that tolerates a collapsed range.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws `k` distinct values from `pool` without replacement.
pub(crate) fn sample_distinct<T: Copy>(pool: &[T], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    indices.partial_shuffle(rng, k);
    indices[..k].iter().map(|&i| pool[i]).collect()
}

/// Samples one categorization episode from a split.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let min_images = cfg.queries_per_class + 1;
    let eligible: Vec<usize> = dataset
        .class_ids_in_split(split)
        .into_iter()
        .filter(|&id| dataset.images[id].len() >= min_images)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Episode(format!(
            "split has {} classes with at least {min_images} images; need at least 2",
            eligible.len()
        )));
    }

    // Fine-grained episodes restrict candidates to one hierarchy subtree.
    let fine = rng.random_bool(cfg.fine_grained_fraction as f64);
    let mut candidates = eligible.clone();
    if fine {
        let nodes = dataset.hierarchy_nodes(split);
        let rich: Vec<&Vec<String>> = nodes
            .iter()
            .filter(|node| {
                eligible
                    .iter()
                    .filter(|&&id| dataset.manifest.classes[id].hierarchy.starts_with(node))
                    .count()
                    >= cfg.ways_min.min(eligible.len())
            })
            .collect();
        if !rich.is_empty() {
            let node = rich[rng.random_range(0..rich.len())];
            candidates = eligible
                .iter()
                .copied()
                .filter(|&id| dataset.manifest.classes[id].hierarchy.starts_with(node))
                .collect();
        }
    }

    let ways_max = cfg.ways_max.min(candidates.len());
    let ways_min = cfg.ways_min.min(ways_max);
    let ways = if ways_min == ways_max { ways_min } else { rng.random_range(ways_min..=ways_max) };
    if ways < 2 {
        return Err(Error::Episode("cannot build an episode with fewer than 2 ways".to_string()));
    }
    let mut chosen = sample_distinct(&candidates, ways, rng);
    chosen.sort_unstable();

    // Per-class shots, then a deterministic rescale into the support range.
    let caps: Vec<usize> =
        chosen.iter().map(|&id| dataset.images[id].len() - cfg.queries_per_class).collect();
    let capacity: usize = caps.iter().sum();
    let support_min = cfg.support_min.min(capacity);
    let support_max = cfg.support_max;
    let max_shot = (cfg.support_max / ways).max(1);
    let mut shots: Vec<usize> = caps
        .iter()
        .map(|&cap| rng.random_range(1..=max_shot).min(cap))
        .collect();
    let mut total: usize = shots.iter().sum();
    while total < support_min {
        let mut grew = false;
        for (s, &cap) in shots.iter_mut().zip(&caps) {
            if total >= support_min {
                break;
            }
            if *s < cap {
                *s += 1;
                total += 1;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    while total > support_max {
        let mut shrank = false;
        for s in shots.iter_mut() {
            if total <= support_max {
                break;
            }
            if *s > 1 {
                *s -= 1;
                total -= 1;
                shrank = true;
            }
        }
        if !shrank {
            break;
        }
    }

    let mut support = Vec::with_capacity(total);
    let mut query = Vec::with_capacity(ways * cfg.queries_per_class);
    for (local, (&id, &shot)) in chosen.iter().zip(&shots).enumerate() {
        let pool: Vec<usize> = (0..dataset.images[id].len()).collect();
        let picks = sample_distinct(&pool, shot + cfg.queries_per_class, rng);
        for &img_idx in &picks[..shot] {
            support.push(EpisodeItem {
                image: dataset.images[id][img_idx].clone(),
                class: local,
                global_class: id,
            });
        }
        for &img_idx in &picks[shot..] {
            query.push(EpisodeItem {
                image: dataset.images[id][img_idx].clone(),
                class: local,
                global_class: id,
            });
        }
    }
    let episode =
        Episode { kind: EpisodeKind::Categorization, n_classes: ways, support, query };
    episode.validate()?;
    Ok(episode)
}

/// Samples an episode with exactly `shots` support images per class, so both
/// support and query are class-balanced.
pub fn sample_fixed_shot_episode(
    dataset: &Dataset,
    split: Split,
    cfg: &SamplerConfig,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    cfg.validate()?;
    if shots == 0 {
        return Err(Error::Config("fixed-shot episodes need at least 1 shot".to_string()));
    }
    let min_images = shots + cfg.queries_per_class;
    let eligible: Vec<usize> = dataset
        .class_ids_in_split(split)
        .into_iter()
        .filter(|&id| dataset.images[id].len() >= min_images)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Episode(format!(
            "split has {} classes with at least {min_images} images; need at least 2",
            eligible.len()
        )));
    }
    let ways_max = cfg.ways_max.min(eligible.len());
    let ways_min = cfg.ways_min.min(ways_max);
    let ways = if ways_min == ways_max { ways_min } else { rng.random_range(ways_min..=ways_max) };
    let mut chosen = sample_distinct(&eligible, ways, rng);
    chosen.sort_unstable();
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * cfg.queries_per_class);
    for (local, &id) in chosen.iter().enumerate() {
        let pool: Vec<usize> = (0..dataset.images[id].len()).collect();
        let picks = sample_distinct(&pool, shots + cfg.queries_per_class, rng);
        for &img_idx in &picks[..shots] {
            support.push(EpisodeItem {
                image: dataset.images[id][img_idx].clone(),
                class: local,
                global_class: id,
            });
        }
        for &img_idx in &picks[shots..] {
            query.push(EpisodeItem {
                image: dataset.images[id][img_idx].clone(),
                class: local,
                global_class: id,
            });
        }
    }
    let episode =
        Episode { kind: EpisodeKind::Categorization, n_classes: ways, support, query };
    episode.validate()?;
    Ok(episode)
}
