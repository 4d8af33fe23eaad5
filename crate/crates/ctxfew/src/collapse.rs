//! Nearest-neighbour retrieval diagnostics and attention-map export.
//!
//! The retrieval probe embeds a mixed bag of train-class and test-class
//! images, then asks for each test query how many of its top-k neighbours
//! share its class, come from train classes at all, or pile onto a single
//! train class. A strongly "collapsed" embedding answers: almost none,
//! almost all, and yes.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedder::{self, BnSource, FeatureMap};
use crate::episodes::{sample_distinct, Dataset, Episode, Split};
use crate::error::{Error, Result};
use crate::heads;
use crate::image::{batch_tensor, write_pnm, Image};
use crate::rng::derive_rng;
use crate::tensor::Graph;
use crate::trainer::{bind_model, Model};

/// Which side of the class split a pool item came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Train,
    Test,
}

/// A flat bag of embeddings to retrieve against.
#[derive(Debug, Clone)]
pub struct RetrievalPool {
    pub embeddings: Vec<Vec<f32>>,
    /// Dataset class id per item, shared across origins.
    pub labels: Vec<usize>,
    pub origins: Vec<Origin>,
}

impl RetrievalPool {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("retrieval pool is empty".to_string()));
        }
        if self.labels.len() != self.len() || self.origins.len() != self.len() {
            return Err(Error::Config(format!(
                "pool fields disagree: {} embeddings, {} labels, {} origins",
                self.len(),
                self.labels.len(),
                self.origins.len()
            )));
        }
        let dim = self.embeddings[0].len();
        if dim == 0 {
            return Err(Error::Config("pool embeddings are zero-dimensional".to_string()));
        }
        for (i, e) in self.embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::Config(format!(
                    "pool item {i} has dimension {} instead of {dim}",
                    e.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: format!("pool embedding {i}") });
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = f64::from(x) - f64::from(y);
        acc += d * d;
    }
    acc
}

/// The `k` nearest pool items to `query` by squared Euclidean distance,
/// ascending, ties broken toward the lower pool index. `exclude` drops one
/// pool index, for queries that are themselves pool members. An exact
/// duplicate of the query at distance zero is still a legitimate neighbour
/// when it is a different item.
pub fn topk_neighbors(
    query: &[f32],
    pool: &RetrievalPool,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<(usize, f64)>> {
    pool.validate()?;
    if query.len() != pool.embeddings[0].len() {
        return Err(Error::Config(format!(
            "query dimension {} does not match pool dimension {}",
            query.len(),
            pool.embeddings[0].len()
        )));
    }
    let available = pool.len() - usize::from(exclude.map_or(false, |i| i < pool.len()));
    if k == 0 || k > available {
        return Err(Error::Config(format!(
            "cannot take {k} neighbours from a pool of {available}"
        )));
    }
    let mut scored: Vec<(usize, f64)> = pool
        .embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, e)| (i, sq_dist(query, e)))
        .collect();
    // Distances are finite (validated above), so total order is safe.
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// One labelled probe query; `exclude` is its own pool index, if any.
#[derive(Debug, Clone)]
pub struct ProbeQuery {
    pub embedding: Vec<f32>,
    pub label: usize,
    pub exclude: Option<usize>,
}

/// Per-query neighbour histograms plus summary fractions.
///
/// Each histogram has `k + 1` bins; bin `i` counts queries for which the
/// statistic equalled `i`, so every histogram sums to `queries`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseStats {
    pub k: usize,
    pub queries: usize,
    /// Neighbours sharing the query's class.
    pub same_class: Vec<usize>,
    /// Neighbours drawn from the train origin.
    pub train_origin: Vec<usize>,
    /// Largest clump of neighbours agreeing on one train class.
    pub single_train_class: Vec<usize>,
    /// Fraction of queries with no correct-class neighbour at all.
    pub frac_no_correct: f64,
    /// Fraction of queries where some single train class claims >= 2 neighbours.
    pub frac_train_clump: f64,
    /// Train share of the pool, the chance rate for `train_origin`.
    pub chance_train_fraction: f64,
}

/// Runs `topk_neighbors` for every query and bins the outcomes.
pub fn collapse_stats(
    queries: &[ProbeQuery],
    pool: &RetrievalPool,
    k: usize,
) -> Result<CollapseStats> {
    pool.validate()?;
    if queries.is_empty() {
        return Err(Error::Config("collapse stats need at least one query".to_string()));
    }
    let n_train = pool.origins.iter().filter(|o| **o == Origin::Train).count();
    if n_train == 0 || n_train == pool.len() {
        return Err(Error::Config(
            "collapse stats need both train and test items in the pool".to_string(),
        ));
    }
    let mut same_class = vec![0usize; k + 1];
    let mut train_origin = vec![0usize; k + 1];
    let mut single_train_class = vec![0usize; k + 1];
    let mut no_correct = 0usize;
    let mut train_clump = 0usize;
    for q in queries {
        let neighbors = topk_neighbors(&q.embedding, pool, k, q.exclude)?;
        let mut same = 0usize;
        let mut train = 0usize;
        let mut per_class: Vec<(usize, usize)> = Vec::new();
        for &(idx, _) in &neighbors {
            if pool.labels[idx] == q.label {
                same += 1;
            }
            if pool.origins[idx] == Origin::Train {
                train += 1;
                let label = pool.labels[idx];
                match per_class.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, c)) => *c += 1,
                    None => per_class.push((label, 1)),
                }
            }
        }
        let clump = per_class.iter().map(|&(_, c)| c).max().unwrap_or(0);
        same_class[same] += 1;
        train_origin[train] += 1;
        single_train_class[clump] += 1;
        no_correct += usize::from(same == 0);
        train_clump += usize::from(clump >= 2);
    }
    let q = queries.len() as f64;
    Ok(CollapseStats {
        k,
        queries: queries.len(),
        same_class,
        train_origin,
        single_train_class,
        frac_no_correct: no_correct as f64 / q,
        frac_train_clump: train_clump as f64 / q,
        chance_train_fraction: n_train as f64 / pool.len() as f64,
    })
}

/// Histograms as CSV: one row per bin.
pub fn histogram_csv(stats: &CollapseStats) -> String {
    let mut out = String::from("bin,same_class,train_origin,single_train_class\n");
    for bin in 0..=stats.k {
        out.push_str(&format!(
            "{bin},{},{},{}\n",
            stats.same_class[bin], stats.train_origin[bin], stats.single_train_class[bin]
        ));
    }
    out
}

/// Embeds images and mean-pools each feature map to a flat vector.
///
/// Uses the frozen running batch-norm statistics: retrieval against a fixed
/// pool should not depend on how the pool was batched.
pub fn pooled_embeddings(model: &Model, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let mut g = Graph::new();
        let vars = bind_model(&mut g, model);
        let x = g.leaf(&batch_tensor(chunk)?);
        let (feats, _) =
            embedder::forward(&mut g, &model.cfg, &vars.embed, x, BnSource::Running(&model.bn))?;
        let tensor = crate::tensor::Tensor::from_vec(g.shape(feats), g.data(feats).to_vec())?;
        for fm in FeatureMap::from_batch(&tensor)? {
            out.push(fm.global_pool());
        }
    }
    Ok(out)
}

/// Settings for the end-to-end retrieval probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Fraction of each split's images that enters the pool.
    pub fraction: f64,
    /// Cap on the number of test-side queries.
    pub max_queries: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { fraction: 0.1, max_queries: 1000, k: 9, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "probe fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.max_queries == 0 {
            return Err(Error::Config("max_queries must be positive".to_string()));
        }
        if self.k == 0 {
            return Err(Error::Config("probe k must be positive".to_string()));
        }
        Ok(())
    }
}

/// Samples a mixed train/test pool from `dataset`, embeds it with `model`,
/// and computes collapse statistics over test-side queries.
pub fn run_probe(model: &Model, dataset: &Dataset, cfg: &ProbeConfig) -> Result<CollapseStats> {
    cfg.validate()?;
    dataset.manifest.validate()?;
    let mut rng = derive_rng(cfg.seed, "probe");
    let mut refs: Vec<&Image> = Vec::new();
    let mut labels = Vec::new();
    let mut origins = Vec::new();
    for (split, origin) in [(Split::Train, Origin::Train), (Split::Test, Origin::Test)] {
        let mut items: Vec<(usize, usize)> = Vec::new();
        for (ci, class) in dataset.manifest.classes.iter().enumerate() {
            if class.split == split {
                items.extend((0..dataset.images[ci].len()).map(|ii| (ci, ii)));
            }
        }
        let take = ((items.len() as f64 * cfg.fraction).ceil() as usize).min(items.len());
        if take == 0 {
            return Err(Error::Config(format!(
                "no {split:?}-split images available for the probe pool"
            )));
        }
        for (ci, ii) in sample_distinct(&items, take, &mut rng) {
            refs.push(&dataset.images[ci][ii]);
            labels.push(dataset.manifest.classes[ci].id);
            origins.push(origin);
        }
    }
    if refs.len() < cfg.k + 1 {
        return Err(Error::Config(format!(
            "pool of {} cannot support {} neighbours per query",
            refs.len(),
            cfg.k
        )));
    }
    let embeddings = pooled_embeddings(model, &refs)?;
    let pool = RetrievalPool { embeddings, labels, origins };
    let test_indices: Vec<usize> =
        (0..pool.len()).filter(|&i| pool.origins[i] == Origin::Test).collect();
    let take = cfg.max_queries.min(test_indices.len());
    let queries: Vec<ProbeQuery> = sample_distinct(&test_indices, take, &mut rng)
        .into_iter()
        .map(|i| ProbeQuery {
            embedding: pool.embeddings[i].clone(),
            label: pool.labels[i],
            exclude: Some(i),
        })
        .collect();
    collapse_stats(&queries, &pool, cfg.k)
}

// ----- Attention export -----

/// Raw attention for one (query position, episode class) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionClassRecord {
    pub class: usize,
    /// Episode support indices of this class's images, in weight row order.
    pub support_indices: Vec<usize>,
    /// Softmax weights per support image, one value per grid cell.
    /// Together the rows of one record sum to 1.
    pub weights: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionPositionRecord {
    pub row: usize,
    pub col: usize,
    pub classes: Vec<AttentionClassRecord>,
}

/// Sidecar written next to the attention maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub query_index: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub positions: Vec<AttentionPositionRecord>,
}

/// Files produced by [`export_attention`].
#[derive(Debug, Clone)]
pub struct AttentionExport {
    pub maps: Vec<PathBuf>,
    pub sidecar: PathBuf,
}

fn upsample_nearest(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w];
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out[y * out_w + x] = map[sy * w + x * w / out_w];
        }
    }
    out
}

/// Renders the attention of one query image over every support image.
///
/// For each requested query grid position this writes one grayscale PGM per
/// support image: the softmax weights over that image's grid cells, nearest-
/// upsampled to image size and scaled so the brightest cell across the whole
/// support set at that position is white. A JSON sidecar keeps the raw
/// weights.
pub fn export_attention(
    model: &Model,
    episode: &Episode,
    query_index: usize,
    positions: &[(usize, usize)],
    out_dir: &Path,
) -> Result<AttentionExport> {
    episode.validate()?;
    if query_index >= episode.query.len() {
        return Err(Error::Episode(format!(
            "query index {query_index} out of range for {} queries",
            episode.query.len()
        )));
    }
    if positions.is_empty() {
        return Err(Error::Config("no query positions requested".to_string()));
    }
    let support_refs: Vec<&Image> = episode.support.iter().map(|s| &s.image).collect();
    let query_ref = [&episode.query[query_index].image];
    let support_fms = pooled_forward_maps(model, &support_refs)?;
    let query_fm = pooled_forward_maps(model, &query_ref)?.remove(0);
    let (gh, gw) = (query_fm.h, query_fm.w);
    for &(row, col) in positions {
        if row >= gh || col >= gw {
            return Err(Error::Config(format!(
                "query position ({row}, {col}) is outside the {gh}x{gw} feature grid"
            )));
        }
    }

    // Attention normalizes per class, so compute each class set once.
    let mut class_members: Vec<Vec<usize>> = vec![Vec::new(); episode.n_classes];
    for (si, item) in episode.support.iter().enumerate() {
        class_members[item.class].push(si);
    }
    let mut tensors = Vec::with_capacity(episode.n_classes);
    for members in &class_members {
        let fms: Vec<FeatureMap> = members.iter().map(|&si| support_fms[si].clone()).collect();
        tensors.push(heads::ctx_attention(&query_fm, &fms, &model.head)?);
    }

    std::fs::create_dir_all(out_dir)?;
    let mut maps = Vec::new();
    let mut records = Vec::with_capacity(positions.len());
    for &(row, col) in positions {
        let p = row * gw + col;
        let mut class_records = Vec::with_capacity(episode.n_classes);
        let mut peak = 0.0f32;
        for (class, at) in tensors.iter().enumerate() {
            let mut weights = Vec::with_capacity(class_members[class].len());
            for j in 0..at.n {
                let row_w: Vec<f32> = (0..at.m).map(|m| at.weight(j, m, p)).collect();
                peak = row_w.iter().fold(peak, |a, &v| a.max(v));
                weights.push(row_w);
            }
            class_records.push(AttentionClassRecord {
                class,
                support_indices: class_members[class].clone(),
                weights,
            });
        }
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        for record in &class_records {
            for (j, row_w) in record.weights.iter().enumerate() {
                let si = record.support_indices[j];
                let img = &episode.support[si].image;
                let fm = &support_fms[si];
                let scaled: Vec<f32> = row_w.iter().map(|&v| v * scale).collect();
                let data = upsample_nearest(&scaled, fm.h, fm.w, img.h, img.w);
                let path = out_dir.join(format!("q{row}x{col}_s{si:03}.pgm"));
                write_pnm(&path, &Image { h: img.h, w: img.w, channels: 1, data })?;
                maps.push(path);
            }
        }
        records.push(AttentionPositionRecord { row, col, classes: class_records });
    }
    let sidecar = AttentionSidecar {
        query_index,
        grid_h: gh,
        grid_w: gw,
        positions: records,
    };
    let sidecar_path = out_dir.join("attention.json");
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Config(format!("sidecar encoding failed: {e}")))?;
    let mut f = std::fs::File::create(&sidecar_path)?;
    f.write_all(text.as_bytes())?;
    Ok(AttentionExport { maps, sidecar: sidecar_path })
}

/// Forward pass to per-image feature maps under frozen running statistics.
fn pooled_forward_maps(model: &Model, images: &[&Image]) -> Result<Vec<FeatureMap>> {
    let mut g = Graph::new();
    let vars = bind_model(&mut g, model);
    let x = g.leaf(&batch_tensor(images)?);
    let (feats, _) =
        embedder::forward(&mut g, &model.cfg, &vars.embed, x, BnSource::Running(&model.bn))?;
    let tensor = crate::tensor::Tensor::from_vec(g.shape(feats), g.data(feats).to_vec())?;
    FeatureMap::from_batch(&tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderConfig;
    use crate::episodes::synthetic::{make_synthetic_dataset, SyntheticConfig};
    use crate::episodes::{sample_episode, SamplerConfig};
    use crate::trainer::TrainConfig;

    fn pool(entries: &[(&[f32], usize, Origin)]) -> RetrievalPool {
        RetrievalPool {
            embeddings: entries.iter().map(|(e, _, _)| e.to_vec()).collect(),
            labels: entries.iter().map(|(_, l, _)| *l).collect(),
            origins: entries.iter().map(|(_, _, o)| *o).collect(),
        }
    }

    fn rand_vec(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f32> {
        use rand::Rng;
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn duplicate_is_returned_at_distance_zero() {
        let p = pool(&[
            (&[1.0, 2.0], 0, Origin::Train),
            (&[9.0, 9.0], 1, Origin::Test),
        ]);
        let got = topk_neighbors(&[1.0, 2.0], &p, 1, None).unwrap();
        assert_eq!(got, vec![(0, 0.0)]);
    }

    #[test]
    fn matches_brute_force_sort_oracle() {
        let mut rng = derive_rng(11, "topk-oracle");
        let p = RetrievalPool {
            embeddings: (0..40).map(|_| rand_vec(&mut rng, 8)).collect(),
            labels: vec![0; 40],
            origins: vec![Origin::Train; 40],
        };
        let q = rand_vec(&mut rng, 8);
        // Independent oracle: compute every distance, full sort, take k.
        let mut oracle: Vec<(usize, f64)> = p
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d: f64 = q
                    .iter()
                    .zip(e)
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum();
                (i, d)
            })
            .collect();
        oracle.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        oracle.truncate(9);
        assert_eq!(topk_neighbors(&q, &p, 9, None).unwrap(), oracle);
    }

    #[test]
    fn equidistant_points_resolve_to_lowest_indices() {
        let p = pool(&[
            (&[1.0, 0.0], 0, Origin::Train),
            (&[0.0, 1.0], 1, Origin::Train),
            (&[-1.0, 0.0], 2, Origin::Test),
            (&[0.0, -1.0], 3, Origin::Test),
        ]);
        let got = topk_neighbors(&[0.0, 0.0], &p, 3, None).unwrap();
        assert_eq!(got.iter().map(|&(i, _)| i).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn exclusion_and_size_limits_are_enforced() {
        let p = pool(&[(&[0.0], 0, Origin::Train), (&[1.0], 1, Origin::Test)]);
        let got = topk_neighbors(&[0.0], &p, 1, Some(0)).unwrap();
        assert_eq!(got[0].0, 1);
        assert!(topk_neighbors(&[0.0], &p, 2, Some(0)).is_err());
        assert!(topk_neighbors(&[0.0], &p, 0, None).is_err());
        assert!(topk_neighbors(&[0.0, 1.0], &p, 1, None).is_err());
        let empty = RetrievalPool { embeddings: vec![], labels: vec![], origins: vec![] };
        assert!(topk_neighbors(&[0.0], &empty, 1, None).is_err());
    }

    #[test]
    fn histograms_match_hand_computed_fixture() {
        // Queries at the origin; the four nearest of five points are fixed.
        let p = pool(&[
            (&[1.0, 0.0], 7, Origin::Train),
            (&[0.0, 1.0], 7, Origin::Train),
            (&[1.0, 1.0], 8, Origin::Train),
            (&[0.5, 0.5], 9, Origin::Test),
            (&[9.0, 9.0], 9, Origin::Test),
        ]);
        // k=3 neighbours of [0,0]: idx 3 (0.5), idx 0 (1.0), idx 1 (1.0).
        // Label 42 never appears, so q1 has zero correct-class neighbours.
        let q1 = ProbeQuery { embedding: vec![0.0, 0.0], label: 42, exclude: None };
        // Same neighbours, but under label 7 two of them match the class.
        let q2 = ProbeQuery { embedding: vec![0.0, 0.0], label: 7, exclude: None };
        let stats = collapse_stats(&[q1, q2], &p, 3).unwrap();
        assert_eq!(stats.same_class, vec![1, 0, 1, 0]);
        // Both queries see train neighbours {0, 1}: two items of class 7.
        assert_eq!(stats.train_origin, vec![0, 0, 2, 0]);
        assert_eq!(stats.single_train_class, vec![0, 0, 2, 0]);
        assert_eq!(stats.queries, 2);
        assert!((stats.frac_no_correct - 0.5).abs() < 1e-12);
        assert!((stats.frac_train_clump - 1.0).abs() < 1e-12);
        assert!((stats.chance_train_fraction - 0.6).abs() < 1e-12);
    }

    #[test]
    fn duplicate_heavy_pool_puts_all_mass_at_k() {
        let mut entries: Vec<(Vec<f32>, usize, Origin)> = Vec::new();
        for _ in 0..4 {
            entries.push((vec![5.0, 5.0], 3, Origin::Test));
        }
        entries.push((vec![100.0, 100.0], 0, Origin::Train));
        let p = RetrievalPool {
            embeddings: entries.iter().map(|(e, _, _)| e.clone()).collect(),
            labels: entries.iter().map(|(_, l, _)| *l).collect(),
            origins: entries.iter().map(|(_, _, o)| *o).collect(),
        };
        let queries = vec![ProbeQuery { embedding: vec![5.0, 5.0], label: 3, exclude: Some(0) }];
        let stats = collapse_stats(&queries, &p, 3).unwrap();
        assert_eq!(stats.same_class, vec![0, 0, 0, 1]);
        assert!((stats.frac_no_correct - 0.0).abs() < 1e-12);
    }

    #[test]
    fn chance_fraction_reproduces_split_share() {
        let mut entries: Vec<(Vec<f32>, usize, Origin)> = Vec::new();
        for i in 0..712 {
            entries.push((vec![i as f32], i, Origin::Train));
        }
        for i in 0..130 {
            entries.push((vec![1000.0 + i as f32], 712 + i, Origin::Test));
        }
        let p = RetrievalPool {
            embeddings: entries.iter().map(|(e, _, _)| e.clone()).collect(),
            labels: entries.iter().map(|(_, l, _)| *l).collect(),
            origins: entries.iter().map(|(_, _, o)| *o).collect(),
        };
        let queries = vec![ProbeQuery { embedding: vec![1000.0], label: 712, exclude: Some(712) }];
        let stats = collapse_stats(&queries, &p, 9).unwrap();
        assert!((stats.chance_train_fraction * 100.0 - 84.6).abs() < 0.05);
    }

    #[test]
    fn random_pool_train_counts_sit_near_chance() {
        let mut rng = derive_rng(5, "collapse-binomial");
        let n_train = 300;
        let n_test = 100;
        let mut embeddings = Vec::new();
        for _ in 0..n_train + n_test {
            embeddings.push(rand_vec(&mut rng, 6));
        }
        let p = RetrievalPool {
            labels: (0..n_train + n_test).collect(),
            origins: (0..n_train + n_test)
                .map(|i| if i < n_train { Origin::Train } else { Origin::Test })
                .collect(),
            embeddings,
        };
        let queries: Vec<ProbeQuery> = (0..120)
            .map(|_| ProbeQuery { embedding: rand_vec(&mut rng, 6), label: usize::MAX, exclude: None })
            .collect();
        let k = 9;
        let stats = collapse_stats(&queries, &p, k).unwrap();
        let mean: f64 = stats
            .train_origin
            .iter()
            .enumerate()
            .map(|(bin, &c)| bin as f64 * c as f64)
            .sum::<f64>()
            / (queries.len() * k) as f64;
        let chance = stats.chance_train_fraction;
        let sigma = (chance * (1.0 - chance) / (queries.len() * k) as f64).sqrt();
        assert!(
            (mean - chance).abs() < 3.0 * sigma,
            "mean train share {mean} vs chance {chance} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn stats_are_invariant_to_pool_order() {
        let mut rng = derive_rng(17, "collapse-perm");
        let n = 30;
        let p = RetrievalPool {
            embeddings: (0..n).map(|_| rand_vec(&mut rng, 4)).collect(),
            labels: (0..n).map(|i| i % 5).collect(),
            origins: (0..n).map(|i| if i % 3 == 0 { Origin::Test } else { Origin::Train }).collect(),
        };
        let queries: Vec<ProbeQuery> = (0..8)
            .map(|i| ProbeQuery {
                embedding: p.embeddings[i * 3].clone(),
                label: p.labels[i * 3],
                exclude: Some(i * 3),
            })
            .collect();
        let base = collapse_stats(&queries, &p, 5).unwrap();

        // Reverse the pool and remap the exclusion indices to follow.
        let perm: Vec<usize> = (0..n).rev().collect();
        let shuffled = RetrievalPool {
            embeddings: perm.iter().map(|&i| p.embeddings[i].clone()).collect(),
            labels: perm.iter().map(|&i| p.labels[i]).collect(),
            origins: perm.iter().map(|&i| p.origins[i]).collect(),
        };
        let remapped: Vec<ProbeQuery> = queries
            .iter()
            .map(|q| ProbeQuery {
                embedding: q.embedding.clone(),
                label: q.label,
                exclude: q.exclude.map(|i| n - 1 - i),
            })
            .collect();
        let moved = collapse_stats(&remapped, &shuffled, 5).unwrap();
        assert_eq!(base.same_class, moved.same_class);
        assert_eq!(base.train_origin, moved.train_origin);
        assert_eq!(base.single_train_class, moved.single_train_class);
        assert_eq!(base.frac_no_correct, moved.frac_no_correct);
    }

    #[test]
    fn histogram_totals_conserve_query_count() {
        let mut rng = derive_rng(23, "collapse-totals");
        let p = RetrievalPool {
            embeddings: (0..25).map(|_| rand_vec(&mut rng, 3)).collect(),
            labels: (0..25).map(|i| i % 4).collect(),
            origins: (0..25).map(|i| if i < 20 { Origin::Train } else { Origin::Test }).collect(),
        };
        let queries: Vec<ProbeQuery> = (0..11)
            .map(|_| ProbeQuery { embedding: rand_vec(&mut rng, 3), label: 2, exclude: None })
            .collect();
        let stats = collapse_stats(&queries, &p, 7).unwrap();
        for hist in [&stats.same_class, &stats.train_origin, &stats.single_train_class] {
            assert_eq!(hist.iter().sum::<usize>(), stats.queries);
            assert_eq!(hist.len(), 8);
        }
    }

    #[test]
    fn csv_lists_one_row_per_bin() {
        let stats = CollapseStats {
            k: 2,
            queries: 3,
            same_class: vec![1, 2, 0],
            train_origin: vec![0, 1, 2],
            single_train_class: vec![3, 0, 0],
            frac_no_correct: 1.0 / 3.0,
            frac_train_clump: 2.0 / 3.0,
            chance_train_fraction: 0.5,
        };
        assert_eq!(
            histogram_csv(&stats),
            "bin,same_class,train_origin,single_train_class\n0,1,0,3\n1,2,1,0\n2,0,2,0\n"
        );
    }

    fn tiny_model() -> (Model, TrainConfig) {
        let cfg = EmbedderConfig {
            input_size: 16,
            in_channels: 1,
            channels: vec![4, 4, 8, 8],
            feature_dim: 8,
            ..EmbedderConfig::default()
        };
        let tc = TrainConfig { d_k: 4, d_v: 4, ..TrainConfig::default() };
        let mut rng = derive_rng(3, "collapse-model");
        let model = Model::init(&cfg, &tc, None, &mut rng).unwrap();
        (model, tc)
    }

    fn tiny_dataset() -> Dataset {
        let cfg = SyntheticConfig {
            num_classes: 12,
            images_per_class: 4,
            image_size: 16,
            hierarchy_depth: 1,
            train_classes: 6,
            val_classes: 2,
            test_classes: 4,
            noise: false,
        };
        let mut rng = derive_rng(9, "collapse-data");
        make_synthetic_dataset(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn probe_runs_end_to_end_on_synthetic_data() {
        let (model, _) = tiny_model();
        let dataset = tiny_dataset();
        let cfg = ProbeConfig { fraction: 1.0, max_queries: 10, k: 5, seed: 1 };
        let stats = run_probe(&model, &dataset, &cfg).unwrap();
        assert_eq!(stats.queries, 10);
        assert_eq!(stats.same_class.iter().sum::<usize>(), 10);
        // 24 train images and 16 test images entered the pool.
        assert!((stats.chance_train_fraction - 24.0 / 40.0).abs() < 1e-12);
        let again = run_probe(&model, &dataset, &cfg).unwrap();
        assert_eq!(stats, again);
    }

    fn sample_probe_episode(dataset: &Dataset) -> Episode {
        let sampler = SamplerConfig {
            ways_min: 2,
            ways_max: 3,
            support_min: 4,
            support_max: 6,
            queries_per_class: 2,
            fine_grained_fraction: 0.0,
            simclr_fraction: 0.0,
        };
        let mut rng = derive_rng(4, "collapse-episode");
        sample_episode(dataset, Split::Test, &sampler, &mut rng).unwrap()
    }

    #[test]
    fn uniform_attention_exports_constant_maps() {
        let (mut model, _) = tiny_model();
        // Zero key/query map: every raw score is 0, softmax is uniform.
        for v in &mut model.head.key_query.data {
            *v = 0.0;
        }
        let dataset = tiny_dataset();
        let episode = sample_probe_episode(&dataset);
        let dir = tempfile::tempdir().unwrap();
        let export = export_attention(&model, &episode, 0, &[(0, 0), (1, 1)], dir.path()).unwrap();
        assert_eq!(export.maps.len(), 2 * episode.support.len());
        for path in &export.maps {
            let img = crate::image::read_pnm(path).unwrap();
            assert_eq!((img.h, img.w), (16, 16));
            let first = img.data[0];
            assert!(img.data.iter().all(|&v| v == first), "{path:?} not constant");
        }

        // Raw weights in the sidecar re-sum to 1 per (position, class).
        let text = std::fs::read_to_string(&export.sidecar).unwrap();
        let sidecar: AttentionSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(sidecar.positions.len(), 2);
        for pos in &sidecar.positions {
            assert_eq!(pos.classes.len(), episode.n_classes);
            for class in &pos.classes {
                let total: f64 = class
                    .weights
                    .iter()
                    .flat_map(|row| row.iter().map(|&v| f64::from(v)))
                    .sum();
                assert!((total - 1.0).abs() < 1e-5, "class {} sums to {total}", class.class);
            }
        }
    }

    #[test]
    fn attention_positions_outside_the_grid_are_rejected() {
        let (model, _) = tiny_model();
        let dataset = tiny_dataset();
        let episode = sample_probe_episode(&dataset);
        let dir = tempfile::tempdir().unwrap();
        let err = export_attention(&model, &episode, 0, &[(99, 0)], dir.path());
        assert!(matches!(err, Err(Error::Config(_))));
        let err = export_attention(&model, &episode, 999, &[(0, 0)], dir.path());
        assert!(matches!(err, Err(Error::Episode(_))));
    }
}
