//! Episodic training: losses, the normalized-gradient ADAM step, learning
//! rate schedule, checkpointing, and the validation-driven training loop.
//!
//! One episode is one optimizer step. Gradients are accumulated in f64 by the
//! graph; when normalization is on, the concatenated gradient is scaled to
//! unit global L2 norm in f64 and only then cast to f32, which makes the
//! resulting update invariant to any positive rescaling of the loss. Moments
//! and parameters live in f32.

use crate::embedder::{self, BnSource, BnState, EmbedderConfig, EmbedderParams, EvalBnMode};
use crate::episodes::augment::apply_bohb_lite;
use crate::episodes::simclr::{to_simclr_episode, TransformSpec};
use crate::episodes::{sample_episode, Dataset, Episode, EpisodeKind, SamplerConfig, Split};
use crate::error::{Error, Result};
use crate::heads::{
    self, aux_global_loss_graph, ctx_episode_logits_graph, mean_cross_entropy,
    proto_episode_logits_graph, HeadParams, ProtoMetric,
};
use crate::image::batch_tensor;
use crate::rng::{derive_rng, derive_rng_indexed};
use crate::tensor::{pairwise_sum, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Proto,
    Ctx,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default = "default_metric")]
    pub proto_metric: ProtoMetric,
    #[serde(default = "default_d_k")]
    pub d_k: usize,
    #[serde(default = "default_d_v")]
    pub d_v: usize,
    #[serde(default = "default_initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    /// Base decay interval; doubled when instance-discrimination episodes are
    /// mixed in and doubled again when augmentation is on.
    #[serde(default = "default_lr_decay_interval")]
    pub lr_decay_interval_episodes: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_normalize_gradients")]
    pub normalize_gradients: bool,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f32,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f32,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f32,
    #[serde(default = "default_max_episodes")]
    pub max_episodes: usize,
    #[serde(default = "default_validation_interval")]
    pub validation_interval: usize,
    #[serde(default = "default_validation_episodes")]
    pub validation_episodes: usize,
    #[serde(default)]
    pub aux_loss: bool,
    /// Random two-op augmentation of categorization episodes.
    #[serde(default)]
    pub augment: bool,
    /// Multiplies the episode loss before backprop. Exists to exercise the
    /// scale invariance of normalized updates; leave at 1 for real training.
    #[serde(default = "default_loss_scale")]
    pub loss_scale: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_head() -> HeadKind {
    HeadKind::Ctx
}
fn default_metric() -> ProtoMetric {
    ProtoMetric::SqEuclid
}
fn default_d_k() -> usize {
    128
}
fn default_d_v() -> usize {
    128
}
fn default_initial_lr() -> f64 {
    6e-4
}
fn default_lr_decay_factor() -> f64 {
    0.915
}
fn default_lr_decay_interval() -> usize {
    2000
}
fn default_weight_decay() -> f64 {
    8.86e-5
}
fn default_normalize_gradients() -> bool {
    true
}
fn default_adam_beta1() -> f32 {
    0.9
}
fn default_adam_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}
fn default_max_episodes() -> usize {
    20_000
}
fn default_validation_interval() -> usize {
    1000
}
fn default_validation_episodes() -> usize {
    60
}
fn default_loss_scale() -> f32 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: default_head(),
            proto_metric: default_metric(),
            d_k: default_d_k(),
            d_v: default_d_v(),
            initial_lr: default_initial_lr(),
            lr_decay_factor: default_lr_decay_factor(),
            lr_decay_interval_episodes: default_lr_decay_interval(),
            weight_decay: default_weight_decay(),
            normalize_gradients: default_normalize_gradients(),
            adam_beta1: default_adam_beta1(),
            adam_beta2: default_adam_beta2(),
            adam_eps: default_adam_eps(),
            max_episodes: default_max_episodes(),
            validation_interval: default_validation_interval(),
            validation_episodes: default_validation_episodes(),
            aux_loss: false,
            augment: false,
            loss_scale: default_loss_scale(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_interval_episodes == 0 {
            return Err(Error::Config("lr_decay_interval_episodes must be positive".to_string()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".to_string()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".to_string()));
        }
        if self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config("d_k and d_v must be positive".to_string()));
        }
        if self.validation_interval == 0 || self.validation_episodes == 0 {
            return Err(Error::Config("validation interval and episode count must be positive".to_string()));
        }
        if !(self.loss_scale > 0.0) {
            return Err(Error::Config("loss_scale must be positive".to_string()));
        }
        Ok(())
    }

    /// Episode interval between learning-rate decays: the configured base,
    /// doubled when the episode mix includes instance discrimination, doubled
    /// again when augmentation is on.
    pub fn effective_decay_interval(&self, simclr_fraction: f64) -> usize {
        let mut interval = self.lr_decay_interval_episodes;
        if simclr_fraction > 0.0 {
            interval *= 2;
        }
        if self.augment {
            interval *= 2;
        }
        interval
    }
}

/// initial_lr * factor^floor(index / interval)
pub fn lr_at(index: usize, initial_lr: f64, factor: f64, interval: usize) -> f64 {
    initial_lr * factor.powi((index / interval.max(1)) as i32)
}

/// Everything the forward pass needs: embedder, normalization state, head,
/// and the optional global classifier over training classes.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: EmbedderConfig,
    pub embedder: EmbedderParams,
    pub bn: BnState,
    pub head: HeadParams,
    /// Sorted dataset class ids the global classifier's columns refer to.
    pub aux_class_ids: Vec<usize>,
    /// [D, K] linear classifier, present when the auxiliary loss is enabled.
    pub aux: Option<Tensor>,
}

impl Model {
    pub fn init(
        cfg: &EmbedderConfig,
        train_cfg: &TrainConfig,
        aux_class_ids: Option<&[usize]>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Model> {
        cfg.validate()?;
        train_cfg.validate()?;
        let embedder = EmbedderParams::init(cfg, rng)?;
        let head = HeadParams::init(cfg.feature_dim, train_cfg.d_k, train_cfg.d_v, rng)?;
        let (aux_class_ids, aux) = match aux_class_ids {
            Some(ids) if !ids.is_empty() => {
                let mut sorted = ids.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                let std = (1.0 / cfg.feature_dim as f32).sqrt();
                let w = Tensor::randn(&[cfg.feature_dim, sorted.len()], std, rng);
                (sorted, Some(w))
            }
            _ => (Vec::new(), None),
        };
        Ok(Model { cfg: cfg.clone(), embedder, bn: BnState::new(cfg), head, aux_class_ids, aux })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.embedder.named_tensors();
        out.extend(self.head.named_tensors());
        if let Some(aux) = &self.aux {
            out.push(("aux.w".to_string(), aux));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.embedder.named_tensors_mut();
        out.extend(self.head.named_tensors_mut());
        if let Some(aux) = &mut self.aux {
            out.push(("aux.w".to_string(), aux));
        }
        out
    }

    fn aux_column(&self, global_class: usize) -> Result<usize> {
        self.aux_class_ids
            .binary_search(&global_class)
            .map_err(|_| Error::Episode(format!("class {global_class} is not a training class")))
    }
}

pub(crate) struct ModelVars {
    pub(crate) embed: embedder::EmbedderVars,
    pub(crate) head: heads::HeadVars,
    pub(crate) aux: Option<Var>,
}

pub(crate) fn bind_model(g: &mut Graph, model: &Model) -> ModelVars {
    ModelVars {
        embed: embedder::bind(g, &model.embedder),
        head: heads::bind(g, &model.head),
        aux: model.aux.as_ref().map(|t| g.leaf(t)),
    }
}

/// Leaf vars in the same order as `Model::named_tensors`.
fn leaf_vars(vars: &ModelVars) -> Vec<Var> {
    let mut out = Vec::new();
    for &(w, gamma, beta) in &vars.embed.blocks {
        out.push(w);
        out.push(gamma);
        out.push(beta);
    }
    out.push(vars.embed.proj);
    out.push(vars.head.key_query);
    out.push(vars.head.value);
    if let Some(a) = vars.aux {
        out.push(a);
    }
    out
}

fn head_logits(
    g: &mut Graph,
    cfg: &TrainConfig,
    vars: &ModelVars,
    support: Var,
    support_class: &[usize],
    query: Var,
    n_classes: usize,
) -> Result<Var> {
    match cfg.head {
        HeadKind::Ctx => {
            ctx_episode_logits_graph(g, &vars.head, support, support_class, query, n_classes)
        }
        HeadKind::Proto => {
            proto_episode_logits_graph(g, support, support_class, query, n_classes, cfg.proto_metric)
        }
    }
}

/// Builds the full episode loss graph and returns the loss var plus the fresh
/// batch-norm statistics from the combined support+query batch.
fn build_episode_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    cfg: &TrainConfig,
    episode: &Episode,
) -> Result<(Var, Vec<crate::tensor::BnBatchStats>)> {
    episode.validate()?;
    let ns = episode.support.len();
    let nq = episode.query.len();
    let images: Vec<&crate::image::Image> = episode
        .support
        .iter()
        .chain(episode.query.iter())
        .map(|item| &item.image)
        .collect();
    let x = g.leaf(&batch_tensor(&images)?);
    let (feats, stats) = embedder::forward(g, &model.cfg, &vars.embed, x, BnSource::Batch)?;
    let support = g.narrow0(feats, 0, ns)?;
    let query = g.narrow0(feats, ns, nq)?;
    let logits = head_logits(g, cfg, vars, support, &episode.support_labels(), query, episode.n_classes)?;
    let mut loss = mean_cross_entropy(g, logits, &episode.query_labels())?;
    if cfg.aux_loss {
        let aux = vars.aux.ok_or_else(|| {
            Error::Config("aux_loss is enabled but the model has no global classifier".to_string())
        })?;
        let cols: Vec<usize> = episode
            .support
            .iter()
            .map(|item| model.aux_column(item.global_class))
            .collect::<Result<_>>()?;
        let pooled = g.spatial_mean(support)?;
        let aux_loss = aux_global_loss_graph(g, aux, pooled, &cols)?;
        loss = g.add(loss, aux_loss)?;
    }
    if cfg.loss_scale != 1.0 {
        loss = g.scale(loss, cfg.loss_scale)?;
    }
    Ok((loss, stats))
}

fn episode_digest(episode: &Episode) -> String {
    format!(
        "kind={:?} classes={} support={} query={}",
        episode.kind,
        episode.n_classes,
        episode.support.len(),
        episode.query.len()
    )
}

/// Mean query cross-entropy for one episode under the configured head.
pub fn episode_loss(model: &Model, cfg: &TrainConfig, episode: &Episode) -> Result<f64> {
    let mut g = Graph::new();
    let vars = bind_model(&mut g, model);
    let (loss, _) = build_episode_loss(&mut g, model, &vars, cfg, episode)
        .map_err(|e| Error::Episode(format!("{e} [{}]", episode_digest(episode))))?;
    let v = g.value(loss) as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: format!("episode loss [{}]", episode_digest(episode)) });
    }
    Ok(v)
}

/// Forward-only episode logits [Nq, C] under an evaluation batch-norm policy.
pub fn episode_logits(
    model: &Model,
    cfg: &TrainConfig,
    episode: &Episode,
    bn_mode: EvalBnMode,
) -> Result<Tensor> {
    episode.validate()?;
    let mut g = Graph::new();
    let vars = bind_model(&mut g, model);
    let s_images: Vec<&crate::image::Image> =
        episode.support.iter().map(|item| &item.image).collect();
    let q_images: Vec<&crate::image::Image> =
        episode.query.iter().map(|item| &item.image).collect();
    let xs = g.leaf(&batch_tensor(&s_images)?);
    let xq = g.leaf(&batch_tensor(&q_images)?);
    let (support, query) = match bn_mode {
        EvalBnMode::Running => {
            let (s, _) = embedder::forward(&mut g, &model.cfg, &vars.embed, xs, BnSource::Running(&model.bn))?;
            let (q, _) = embedder::forward(&mut g, &model.cfg, &vars.embed, xq, BnSource::Running(&model.bn))?;
            (s, q)
        }
        EvalBnMode::SupportStats => {
            let (s, stats) = embedder::forward(&mut g, &model.cfg, &vars.embed, xs, BnSource::Batch)?;
            let (q, _) = embedder::forward(&mut g, &model.cfg, &vars.embed, xq, BnSource::Stats(&stats))?;
            (s, q)
        }
    };
    let logits = head_logits(&mut g, cfg, &vars, support, &episode.support_labels(), query, episode.n_classes)?;
    Tensor::from_vec(g.shape(logits), g.data(logits).to_vec())
}

/// Argmax class per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    if logits.shape.len() != 2 {
        return Err(Error::shape("argmax_rows", format!("want rank 2, got {:?}", logits.shape)));
    }
    let c = logits.shape[1];
    Ok(logits
        .data
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Fraction of queries whose argmax logit is the true class.
pub fn episode_accuracy(
    model: &Model,
    cfg: &TrainConfig,
    episode: &Episode,
    bn_mode: EvalBnMode,
) -> Result<f64> {
    let logits = episode_logits(model, cfg, episode, bn_mode)?;
    let picks = argmax_rows(&logits)?;
    let labels = episode.query_labels();
    let hits = picks.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// First and second ADAM moments per parameter tensor, in named order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &Model) -> AdamState {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.data.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One optimizer step. `grads` holds per-tensor f64 gradients in named order.
/// Returns true when a zero gradient norm forced the raw (unnormalized) path.
pub fn step(
    model: &mut Model,
    adam: &mut AdamState,
    grads: &[Vec<f64>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<bool> {
    let mut tensors = model.named_tensors_mut();
    if tensors.len() != grads.len() || grads.len() != adam.m.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} tensors vs {} grads vs {} moments", tensors.len(), grads.len(), adam.m.len()),
        ));
    }
    for ((name, t), g) in tensors.iter().zip(grads) {
        if t.data.len() != g.len() {
            return Err(Error::shape("optimizer_step", format!("grad size mismatch for {name}")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: format!("gradient of {name}") });
        }
    }

    // Global L2 norm over the concatenated gradient, in f64.
    let mut zero_norm_fallback = false;
    let inv_scale = if cfg.normalize_gradients {
        let sq: Vec<f64> = grads.iter().flat_map(|g| g.iter().map(|&v| v * v)).collect();
        let norm = pairwise_sum(&sq).sqrt();
        if norm == 0.0 {
            zero_norm_fallback = true;
            1.0
        } else {
            1.0 / norm
        }
    } else {
        1.0
    };

    adam.step += 1;
    let t = adam.step as i32;
    let lr = lr as f32;
    let wd = cfg.weight_decay as f32;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let plain_sgd = b1 == 0.0 && b2 == 0.0;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for (i, (_, tensor)) in tensors.iter_mut().enumerate() {
        let m = &mut adam.m[i];
        let v = &mut adam.v[i];
        for (j, theta) in tensor.data.iter_mut().enumerate() {
            // The only f64 -> f32 cast on the gradient path.
            let g = (grads[i][j] * inv_scale) as f32;
            let update = if plain_sgd {
                g
            } else {
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                m_hat / (v_hat.sqrt() + eps)
            };
            *theta -= lr * update + lr * wd * *theta;
        }
    }
    Ok(zero_norm_fallback)
}

/// Complete resumable training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    /// Next episode index to run.
    pub episode: u64,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub best_val_acc: Option<f64>,
    pub zero_grad_warnings: u64,
    pub config_hash: String,
}

/// Hash of everything that must not change across a resume. The episode
/// budget is excluded: extending max_episodes is what resuming is for.
pub fn config_hash(
    cfg: &TrainConfig,
    embedder_cfg: &EmbedderConfig,
    sampler: &SamplerConfig,
    transform: &TransformSpec,
) -> String {
    let trajectory_cfg = TrainConfig { max_episodes: 0, ..cfg.clone() };
    let mut hasher = Sha256::new();
    for part in [
        serde_json::to_string(&trajectory_cfg).expect("config serializes"),
        serde_json::to_string(embedder_cfg).expect("config serializes"),
        serde_json::to_string(sampler).expect("config serializes"),
        serde_json::to_string(transform).expect("config serializes"),
    ] {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    format!("{:x}", hasher.finalize())
}

impl Checkpoint {
    /// Fresh training state at episode 0.
    pub fn init(
        model: Model,
        cfg: &TrainConfig,
        sampler: &SamplerConfig,
        transform: &TransformSpec,
    ) -> Checkpoint {
        let adam = AdamState::new(&model);
        let hash = config_hash(cfg, &model.cfg, sampler, transform);
        let rng = derive_rng(cfg.seed, "train");
        Checkpoint {
            model,
            adam,
            episode: 0,
            seed: cfg.seed,
            rng_word_pos: rng.get_word_pos(),
            best_val_acc: None,
            zero_grad_warnings: 0,
            config_hash: hash,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: u64,
    pub kind: EpisodeKind,
    pub loss: f64,
    pub lr: f64,
    pub val_acc: Option<f64>,
}

/// Writes the training log as CSV: episode, kind, loss, lr, val_acc.
pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("episode,kind,loss,lr,val_acc\n");
    for r in rows {
        let kind = match r.kind {
            EpisodeKind::Categorization => "categorization",
            EpisodeKind::Simclr => "simclr",
        };
        let val = r.val_acc.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.episode, kind, r.loss, r.lr, val));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// State at the best validation accuracy; the final state when no
    /// validation pass ran.
    pub best: Checkpoint,
    /// State after the last completed episode.
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    /// Divergence diagnostic; training aborted at `last` when set.
    pub diverged: Option<String>,
}

/// Runs the episodic loop from `start.episode` to `cfg.max_episodes`.
pub fn train(
    start: Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    transform: &TransformSpec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sampler.validate()?;
    transform.validate()?;
    let expect = config_hash(cfg, &start.model.cfg, sampler, transform);
    if expect != start.config_hash {
        return Err(Error::Checkpoint(
            "checkpoint was produced under a different configuration".to_string(),
        ));
    }
    if dataset.class_ids_in_split(Split::Val).is_empty() {
        return Err(Error::Config("training requires a nonempty validation split".to_string()));
    }

    let mut ckpt = start;
    let mut rng = derive_rng(ckpt.seed, "train");
    rng.set_word_pos(ckpt.rng_word_pos);
    let interval = cfg.effective_decay_interval(f64::from(sampler.simclr_fraction));
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;

    while ckpt.episode < cfg.max_episodes as u64 {
        let idx = ckpt.episode;
        let lr = lr_at(idx as usize, cfg.initial_lr, cfg.lr_decay_factor, interval);
        let mut episode = sample_episode(dataset, Split::Train, sampler, &mut rng)?;
        if sampler.simclr_fraction > 0.0 && rng.random_bool(f64::from(sampler.simclr_fraction)) {
            // Conversion can be infeasible when the episode has more queries
            // than support images; keep the categorization episode then.
            match to_simclr_episode(&episode, transform, &mut rng) {
                Ok(converted) => episode = converted,
                Err(Error::Episode(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if cfg.augment && episode.kind == EpisodeKind::Categorization {
            for item in episode.support.iter_mut().chain(episode.query.iter_mut()) {
                item.image = apply_bohb_lite(&item.image, transform, &mut rng)?;
            }
        }

        let mut g = Graph::new();
        let vars = bind_model(&mut g, &ckpt.model);
        let built = build_episode_loss(&mut g, &ckpt.model, &vars, cfg, &episode);
        let (loss, stats) = match built {
            Ok(ok) => ok,
            Err(Error::NonFinite { op: detail }) => {
                return Ok(TrainOutcome {
                    best: best.unwrap_or_else(|| ckpt.clone()),
                    last: ckpt,
                    log,
                    diverged: Some(format!(
                        "episode {idx}: non-finite forward ({detail}) [{}]",
                        episode_digest(&episode)
                    )),
                });
            }
            Err(e) => return Err(e),
        };
        let loss_val = g.value(loss) as f64;
        if !loss_val.is_finite() {
            return Ok(TrainOutcome {
                best: best.unwrap_or_else(|| ckpt.clone()),
                last: ckpt,
                log,
                diverged: Some(format!(
                    "episode {idx}: loss {loss_val} [{}]",
                    episode_digest(&episode)
                )),
            });
        }
        if let Err(e) = g.backward(loss) {
            return match e {
                Error::NonFinite { op: detail } => Ok(TrainOutcome {
                    best: best.unwrap_or_else(|| ckpt.clone()),
                    last: ckpt,
                    log,
                    diverged: Some(format!("episode {idx}: non-finite backward ({detail})")),
                }),
                other => Err(other),
            };
        }
        let grads: Vec<Vec<f64>> = leaf_vars(&vars)
            .iter()
            .map(|&v| {
                g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.data(v).len()])
            })
            .collect();
        match step(&mut ckpt.model, &mut ckpt.adam, &grads, cfg, lr) {
            Ok(true) => ckpt.zero_grad_warnings += 1,
            Ok(false) => {}
            // Non-finite gradients are detected before any mutation, so the
            // checkpoint still holds the last good state.
            Err(Error::NonFinite { op: detail }) => {
                return Ok(TrainOutcome {
                    best: best.unwrap_or_else(|| ckpt.clone()),
                    last: ckpt,
                    log,
                    diverged: Some(format!("episode {idx}: non-finite gradient ({detail})")),
                });
            }
            Err(e) => return Err(e),
        }
        ckpt.model.bn.update(&stats, ckpt.model.cfg.bn_ema_decay)?;
        ckpt.episode = idx + 1;
        ckpt.rng_word_pos = rng.get_word_pos();

        let mut row = LogRow { episode: idx, kind: episode.kind, loss: loss_val, lr, val_acc: None };
        if ckpt.episode % cfg.validation_interval as u64 == 0 {
            let acc = validation_accuracy(&ckpt.model, cfg, dataset, sampler, idx)?;
            row.val_acc = Some(acc);
            if ckpt.best_val_acc.map_or(true, |b| acc > b) {
                ckpt.best_val_acc = Some(acc);
                best = Some(ckpt.clone());
            }
        }
        log.push(row);
    }

    Ok(TrainOutcome { best: best.unwrap_or_else(|| ckpt.clone()), last: ckpt, log, diverged: None })
}

/// Mean episode accuracy on the validation split, deterministic per
/// (seed, episode index).
fn validation_accuracy(
    model: &Model,
    cfg: &TrainConfig,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    episode_index: u64,
) -> Result<f64> {
    let mut rng = derive_rng_indexed(cfg.seed, "train-val", episode_index);
    let mut total = 0.0;
    for _ in 0..cfg.validation_episodes {
        let ep = sample_episode(dataset, Split::Val, sampler, &mut rng)?;
        total += episode_accuracy(model, cfg, &ep, EvalBnMode::Running)?;
    }
    Ok(total / cfg.validation_episodes as f64)
}

const CKPT_MAGIC: &[u8; 4] = b"CTXF";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    embedder: EmbedderConfig,
    aux_class_ids: Vec<usize>,
    episode: u64,
    adam_step: u64,
    seed: u64,
    /// Stream position of the training rng, decimal encoded.
    rng_word_pos: String,
    best_val_acc: Option<f64>,
    zero_grad_warnings: u64,
    /// Name and shape per payload tensor, in payload order.
    tensors: Vec<(String, Vec<usize>)>,
}

/// Serializes a checkpoint: magic, version, JSON header, then little-endian
/// f32 payloads in header order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (name, t) in ckpt.model.named_tensors() {
        tensors.push((name, t.shape.clone(), t.data.clone()));
    }
    for (i, layer) in ckpt.model.bn.layers.iter().enumerate() {
        tensors.push((format!("bn.{i}.mean"), vec![layer.mean.len()], layer.mean.clone()));
        tensors.push((format!("bn.{i}.var"), vec![layer.var.len()], layer.var.clone()));
    }
    let param_names: Vec<String> =
        ckpt.model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, m) in param_names.iter().zip(&ckpt.adam.m) {
        tensors.push((format!("adam.m.{name}"), vec![m.len()], m.clone()));
    }
    for (name, v) in param_names.iter().zip(&ckpt.adam.v) {
        tensors.push((format!("adam.v.{name}"), vec![v.len()], v.clone()));
    }

    let header = CheckpointHeader {
        config_hash: ckpt.config_hash.clone(),
        embedder: ckpt.model.cfg.clone(),
        aux_class_ids: ckpt.model.aux_class_ids.clone(),
        episode: ckpt.episode,
        adam_step: ckpt.adam.step,
        seed: ckpt.seed,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        best_val_acc: ckpt.best_val_acc,
        zero_grad_warnings: ckpt.zero_grad_warnings,
        tensors: tensors.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encoding failed: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, _, data) in &tensors {
        for &v in data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint written by `save_checkpoint`. `d_k`/`d_v` and all
/// shapes come from the stored header.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decoding failed: {e}")))?;

    let mut payloads: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        file.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!("truncated payload for {name} ({n} floats)"))
        })?;
        let data: Vec<f32> =
            buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        payloads.push((name.clone(), shape.clone(), data));
    }
    rebuild_checkpoint(header, payloads)
}

fn take_payload(
    payloads: &mut Vec<(String, Vec<usize>, Vec<f32>)>,
    name: &str,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let pos = payloads
        .iter()
        .position(|(n, _, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    let (_, shape, data) = payloads.remove(pos);
    Ok((shape, data))
}

fn rebuild_checkpoint(
    header: CheckpointHeader,
    mut payloads: Vec<(String, Vec<usize>, Vec<f32>)>,
) -> Result<Checkpoint> {
    header.embedder.validate()?;
    // Shapes drive reconstruction: head dims come from the stored tensors.
    let (kq_shape, _) = payloads
        .iter()
        .find(|(n, _, _)| n == "head.key_query")
        .map(|(_, s, d)| (s.clone(), d.clone()))
        .ok_or_else(|| Error::Checkpoint("missing tensor head.key_query".to_string()))?;
    let (val_shape, _) = payloads
        .iter()
        .find(|(n, _, _)| n == "head.value")
        .map(|(_, s, d)| (s.clone(), d.clone()))
        .ok_or_else(|| Error::Checkpoint("missing tensor head.value".to_string()))?;
    if kq_shape.len() != 2 || val_shape.len() != 2 {
        return Err(Error::Checkpoint("head tensors must be rank 2".to_string()));
    }

    let mut seed_rng = derive_rng(0, "checkpoint-rebuild");
    let mut model = Model {
        cfg: header.embedder.clone(),
        embedder: EmbedderParams::init(&header.embedder, &mut seed_rng)?,
        bn: BnState::new(&header.embedder),
        head: HeadParams::init(header.embedder.feature_dim, kq_shape[1], val_shape[1], &mut seed_rng)?,
        aux_class_ids: header.aux_class_ids.clone(),
        aux: if header.aux_class_ids.is_empty() {
            None
        } else {
            Some(Tensor::zeros(&[header.embedder.feature_dim, header.aux_class_ids.len()])
                .with_requires_grad(true))
        },
    };

    for (name, t) in model.named_tensors_mut() {
        let (shape, data) = take_payload(&mut payloads, &name)?;
        if shape != t.shape || data.len() != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                t.shape
            )));
        }
        t.data = data;
    }
    for (i, layer) in model.bn.layers.iter_mut().enumerate() {
        let (_, mean) = take_payload(&mut payloads, &format!("bn.{i}.mean"))?;
        let (_, var) = take_payload(&mut payloads, &format!("bn.{i}.var"))?;
        if mean.len() != layer.mean.len() || var.len() != layer.var.len() {
            return Err(Error::Checkpoint(format!("bn layer {i} has the wrong width")));
        }
        layer.mean = mean;
        layer.var = var;
    }
    let mut adam = AdamState::new(&model);
    adam.step = header.adam_step;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (i, name) in names.iter().enumerate() {
        let (_, m) = take_payload(&mut payloads, &format!("adam.m.{name}"))?;
        let (_, v) = take_payload(&mut payloads, &format!("adam.v.{name}"))?;
        if m.len() != adam.m[i].len() || v.len() != adam.v[i].len() {
            return Err(Error::Checkpoint(format!("moment size mismatch for {name}")));
        }
        adam.m[i] = m;
        adam.v[i] = v;
    }
    if !payloads.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensors in checkpoint: {:?}",
            payloads.iter().map(|(n, _, _)| n).collect::<Vec<_>>()
        )));
    }
    let rng_word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad rng stream position".to_string()))?;
    Ok(Checkpoint {
        model,
        adam,
        episode: header.episode,
        seed: header.seed,
        rng_word_pos,
        best_val_acc: header.best_val_acc,
        zero_grad_warnings: header.zero_grad_warnings,
        config_hash: header.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::synthetic::{make_synthetic_dataset, SyntheticConfig};

    fn tiny_embedder() -> EmbedderConfig {
        EmbedderConfig {
            input_size: 16,
            in_channels: 1,
            channels: vec![4, 4, 8, 8],
            feature_dim: 8,
            ..EmbedderConfig::default()
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            d_k: 4,
            d_v: 4,
            max_episodes: 4,
            validation_interval: 2,
            validation_episodes: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_sampler() -> SamplerConfig {
        SamplerConfig {
            ways_min: 2,
            ways_max: 3,
            support_min: 4,
            support_max: 8,
            queries_per_class: 1,
            fine_grained_fraction: 0.0,
            simclr_fraction: 0.0,
            ..SamplerConfig::default()
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let cfg = SyntheticConfig {
            num_classes: 12,
            images_per_class: 5,
            image_size: 16,
            train_classes: 8,
            val_classes: 2,
            test_classes: 2,
            noise: false,
            ..SyntheticConfig::default()
        };
        make_synthetic_dataset(&cfg, &mut derive_rng(seed, "trainer-ds")).unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        Model::init(&tiny_embedder(), &tiny_train_cfg(), None, &mut derive_rng(seed, "trainer-model"))
            .unwrap()
    }

    fn fixture_episode(seed: u64) -> Episode {
        let ds = tiny_dataset(seed);
        sample_episode(&ds, Split::Train, &tiny_sampler(), &mut derive_rng(seed, "trainer-ep"))
            .unwrap()
    }

    #[test]
    fn lr_schedule_matches_examples() {
        assert_eq!(lr_at(0, 6e-4, 0.915, 2000), 6e-4);
        assert!((lr_at(2000, 6e-4, 0.915, 2000) - 6e-4 * 0.915).abs() < 1e-12);
        assert!((lr_at(1999, 6e-4, 0.915, 2000) - 6e-4).abs() < 1e-12);
        assert_eq!(lr_at(123_456, 6e-4, 1.0, 2000), 6e-4);
    }

    #[test]
    fn decay_interval_doubles_per_regime() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.effective_decay_interval(0.0), 2000);
        assert_eq!(cfg.effective_decay_interval(0.5), 4000);
        cfg.augment = true;
        assert_eq!(cfg.effective_decay_interval(0.5), 8000);
        assert_eq!(cfg.effective_decay_interval(0.0), 4000);
    }

    #[test]
    fn zero_features_give_uniform_logits_and_ln_c_loss() {
        let mut model = tiny_model(1);
        // Zero projection makes every feature vector zero, so all distances
        // agree and the logits are uniform.
        for (name, t) in model.named_tensors_mut() {
            if name == "embed.proj" {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let cfg = TrainConfig { head: HeadKind::Proto, ..tiny_train_cfg() };
        let ep = fixture_episode(2);
        let loss = episode_loss(&model, &cfg, &ep).unwrap();
        assert!((loss - (ep.n_classes as f64).ln()).abs() < 1e-5);
        let ctx_cfg = TrainConfig { head: HeadKind::Ctx, ..tiny_train_cfg() };
        let loss_ctx = episode_loss(&model, &ctx_cfg, &ep).unwrap();
        assert!((loss_ctx - (ep.n_classes as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn instance_episodes_use_support_way_labels() {
        let mut model = tiny_model(3);
        for (name, t) in model.named_tensors_mut() {
            if name == "embed.proj" {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let cfg = TrainConfig { head: HeadKind::Proto, ..tiny_train_cfg() };
        let ep = fixture_episode(4);
        let conv = to_simclr_episode(&ep, &TransformSpec::none(), &mut derive_rng(5, "t-conv"))
            .unwrap();
        let loss = episode_loss(&model, &cfg, &conv).unwrap();
        assert!((loss - (ep.support.len() as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn gradient_scale_does_not_change_normalized_updates() {
        let cfg = tiny_train_cfg();
        let mut a = tiny_model(6);
        let mut b = a.clone();
        let mut adam_a = AdamState::new(&a);
        let mut adam_b = AdamState::new(&b);
        let grads: Vec<Vec<f64>> = a
            .named_tensors()
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                (0..t.data.len()).map(|j| ((i * 31 + j) as f64).sin()).collect()
            })
            .collect();
        let scaled: Vec<Vec<f64>> =
            grads.iter().map(|g| g.iter().map(|v| v * 7.0).collect()).collect();
        step(&mut a, &mut adam_a, &grads, &cfg, 1e-3).unwrap();
        step(&mut b, &mut adam_b, &scaled, &cfg, 1e-3).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn plain_sgd_step_matches_hand_computation() {
        let cfg = TrainConfig {
            normalize_gradients: false,
            adam_beta1: 0.0,
            adam_beta2: 0.0,
            weight_decay: 0.0,
            ..tiny_train_cfg()
        };
        let mut model = tiny_model(7);
        let before: Vec<Vec<f32>> =
            model.named_tensors().iter().map(|(_, t)| t.data.clone()).collect();
        let grads: Vec<Vec<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| (0..t.data.len()).map(|j| (j as f64 + 1.0) * 0.25).collect())
            .collect();
        let mut adam = AdamState::new(&model);
        step(&mut model, &mut adam, &grads, &cfg, 0.01).unwrap();
        for ((_, t), (old, g)) in model.named_tensors().iter().zip(before.iter().zip(&grads)) {
            for (j, &v) in t.data.iter().enumerate() {
                let want = old[j] - 0.01 * g[j] as f32;
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged_and_warn() {
        let cfg = TrainConfig { weight_decay: 0.0, ..tiny_train_cfg() };
        let mut model = tiny_model(8);
        let before: Vec<Vec<f32>> =
            model.named_tensors().iter().map(|(_, t)| t.data.clone()).collect();
        let grads: Vec<Vec<f64>> =
            model.named_tensors().iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        let mut adam = AdamState::new(&model);
        let warned = step(&mut model, &mut adam, &grads, &cfg, 0.05).unwrap();
        assert!(warned);
        for ((_, t), old) in model.named_tensors().iter().zip(&before) {
            assert_eq!(&t.data, old);
        }
    }

    #[test]
    fn zero_max_episodes_returns_initial_state_and_empty_log() {
        let ds = tiny_dataset(9);
        let cfg = TrainConfig { max_episodes: 0, ..tiny_train_cfg() };
        let model = tiny_model(9);
        let start = Checkpoint::init(model, &cfg, &tiny_sampler(), &TransformSpec::none());
        let before: Vec<Vec<f32>> =
            start.model.named_tensors().iter().map(|(_, t)| t.data.clone()).collect();
        let out = train(start, &ds, &cfg, &tiny_sampler(), &TransformSpec::none()).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.last.episode, 0);
        for ((_, t), old) in out.last.model.named_tensors().iter().zip(&before) {
            assert_eq!(&t.data, old);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = tiny_dataset(10);
        let cfg = tiny_train_cfg();
        let sampler = tiny_sampler();
        let spec = TransformSpec::none();
        let run = || {
            let model = tiny_model(10);
            let start = Checkpoint::init(model, &cfg, &sampler, &spec);
            train(start, &ds, &cfg, &sampler, &spec).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        for ((_, ta), (_, tb)) in
            a.last.model.named_tensors().iter().zip(b.last.model.named_tensors().iter())
        {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn loss_scale_leaves_the_trajectory_bit_identical() {
        let ds = tiny_dataset(11);
        let sampler = tiny_sampler();
        let spec = TransformSpec::none();
        let run = |scale: f32| {
            let cfg = TrainConfig { loss_scale: scale, max_episodes: 3, ..tiny_train_cfg() };
            let model = tiny_model(11);
            let start = Checkpoint::init(model, &cfg, &sampler, &spec);
            train(start, &ds, &cfg, &sampler, &spec).unwrap()
        };
        let base = run(1.0);
        for scale in [10.0, 1000.0] {
            let other = run(scale);
            for ((_, ta), (_, tb)) in base
                .last
                .model
                .named_tensors()
                .iter()
                .zip(other.last.model.named_tensors().iter())
            {
                assert_eq!(ta.data, tb.data, "trajectory changed at loss scale {scale}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_resumes_bit_identically() {
        let ds = tiny_dataset(12);
        let sampler = tiny_sampler();
        let spec = TransformSpec::none();
        let cfg4 = TrainConfig { max_episodes: 4, ..tiny_train_cfg() };
        let cfg2 = TrainConfig { max_episodes: 2, ..cfg4.clone() };

        // Uninterrupted four episodes.
        let start = Checkpoint::init(tiny_model(12), &cfg4, &sampler, &spec);
        let full = train(start, &ds, &cfg4, &sampler, &spec).unwrap();

        // Two episodes, save to disk, load, two more under a larger budget.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let start = Checkpoint::init(tiny_model(12), &cfg2, &sampler, &spec);
        let first = train(start, &ds, &cfg2, &sampler, &spec).unwrap();
        assert_eq!(first.last.episode, 2);
        save_checkpoint(&path, &first.last).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let resumed = train(loaded, &ds, &cfg4, &sampler, &spec).unwrap();

        for ((_, ta), (_, tb)) in full
            .last
            .model
            .named_tensors()
            .iter()
            .zip(resumed.last.model.named_tensors().iter())
        {
            assert_eq!(ta.data, tb.data);
        }
        assert_eq!(full.last.adam.m, resumed.last.adam.m);
        assert_eq!(full.last.adam.v, resumed.last.adam.v);
        assert_eq!(full.last.rng_word_pos, resumed.last.rng_word_pos);
        for (la, lb) in full.last.model.bn.layers.iter().zip(&resumed.last.model.bn.layers) {
            assert_eq!(la.mean, lb.mean);
            assert_eq!(la.var, lb.var);
        }
    }

    #[test]
    fn checkpoint_file_round_trip_preserves_every_field() {
        let cfg = tiny_train_cfg();
        let sampler = tiny_sampler();
        let spec = TransformSpec::none();
        let model =
            Model::init(&tiny_embedder(), &cfg, Some(&[3, 1, 2]), &mut derive_rng(13, "ckpt-m"))
                .unwrap();
        let mut ckpt = Checkpoint::init(model, &cfg, &sampler, &spec);
        ckpt.episode = 7;
        ckpt.adam.step = 7;
        ckpt.best_val_acc = Some(0.625);
        ckpt.zero_grad_warnings = 2;
        ckpt.adam.m[0][0] = 0.5;
        ckpt.adam.v[3][1] = 0.25;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.episode, 7);
        assert_eq!(loaded.adam.step, 7);
        assert_eq!(loaded.best_val_acc, Some(0.625));
        assert_eq!(loaded.zero_grad_warnings, 2);
        assert_eq!(loaded.config_hash, ckpt.config_hash);
        assert_eq!(loaded.rng_word_pos, ckpt.rng_word_pos);
        assert_eq!(loaded.model.aux_class_ids, vec![1, 2, 3]);
        for ((na, ta), (nb, tb)) in
            ckpt.model.named_tensors().iter().zip(loaded.model.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            assert_eq!(ta.data, tb.data);
        }
        assert_eq!(ckpt.adam.m, loaded.adam.m);
        assert_eq!(ckpt.adam.v, loaded.adam.v);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_config_is_rejected_on_resume() {
        let ds = tiny_dataset(14);
        let cfg = tiny_train_cfg();
        let sampler = tiny_sampler();
        let spec = TransformSpec::none();
        let start = Checkpoint::init(tiny_model(14), &cfg, &sampler, &spec);
        let other = TrainConfig { initial_lr: 1e-3, ..cfg.clone() };
        assert!(matches!(
            train(start, &ds, &other, &sampler, &spec),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let ds = tiny_dataset(15);
        let cfg = TrainConfig {
            initial_lr: 1e18,
            normalize_gradients: false,
            max_episodes: 30,
            ..tiny_train_cfg()
        };
        let sampler = tiny_sampler();
        let spec = TransformSpec::none();
        let start = Checkpoint::init(tiny_model(15), &cfg, &sampler, &spec);
        let out = train(start, &ds, &cfg, &sampler, &spec).unwrap();
        assert!(out.diverged.is_some(), "expected divergence, log len {}", out.log.len());
    }

    #[test]
    fn log_csv_has_one_row_per_episode() {
        let ds = tiny_dataset(16);
        let cfg = tiny_train_cfg();
        let sampler = tiny_sampler();
        let spec = TransformSpec::none();
        let start = Checkpoint::init(tiny_model(16), &cfg, &sampler, &spec);
        let out = train(start, &ds, &cfg, &sampler, &spec).unwrap();
        assert_eq!(out.log.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&path, &out.log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,kind,loss,lr,val_acc");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].ends_with(',') == out.log[1].val_acc.is_none());
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lowest_index() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5, 0.5, 0.1, -1.0, -0.2, -0.2]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![0, 1]);
    }
}
