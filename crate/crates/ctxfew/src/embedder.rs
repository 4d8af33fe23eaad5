//! The convolutional embedder: a 4-stage plain convnet producing a spatial
//! feature grid, with a configurable final-stage stride/dilation trade-off.
//!
//! Every stage is conv-BN-relu twice; the first conv of each stage downsamples
//! by 2 except in the final stage, where stride 1 plus dilation 2 keeps the
//! grid at input/8 instead of input/16. A linear 1x1 projection maps the last
//! stage to `feature_dim` channels with no activation.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum_f32, BnBatchStats, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// 1 pairs with dilation 2 (grid input/8); 2 pairs with dilation 1 (grid input/16).
    #[serde(default = "default_final_stride")]
    pub final_stage_stride: usize,
    #[serde(default = "default_final_dilation")]
    pub final_stage_dilation: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_bn_ema_decay")]
    pub bn_ema_decay: f32,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f32,
}

fn default_input_size() -> usize {
    32
}
fn default_in_channels() -> usize {
    1
}
fn default_channels() -> Vec<usize> {
    vec![32, 64, 128, 128]
}
fn default_final_stride() -> usize {
    1
}
fn default_final_dilation() -> usize {
    2
}
fn default_feature_dim() -> usize {
    128
}
fn default_bn_ema_decay() -> f32 {
    0.9
}
fn default_bn_eps() -> f32 {
    1e-5
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            input_size: default_input_size(),
            in_channels: default_in_channels(),
            channels: default_channels(),
            final_stage_stride: default_final_stride(),
            final_stage_dilation: default_final_dilation(),
            feature_dim: default_feature_dim(),
            bn_ema_decay: default_bn_ema_decay(),
            bn_eps: default_bn_eps(),
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "channels must list 4 positive stage widths, got {:?}",
                self.channels
            )));
        }
        match (self.final_stage_stride, self.final_stage_dilation) {
            (1, 2) | (2, 1) => {}
            (s, d) => {
                return Err(Error::Config(format!(
                    "final stage must use stride 1 with dilation 2 or stride 2 with dilation 1, got stride {s} dilation {d}"
                )))
            }
        }
        let div = self.total_stride();
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by {div} (total stride of this config)",
                self.input_size
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".to_string()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".to_string()));
        }
        if !(self.bn_ema_decay > 0.0 && self.bn_ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "bn_ema_decay must lie in (0,1), got {}",
                self.bn_ema_decay
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config(format!("bn_eps must be positive, got {}", self.bn_eps)));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        8 * self.final_stage_stride
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    /// Conv layer plan: (cin, cout, stride, dilation) for the 8 conv-BN-relu layers.
    fn layer_plan(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut plan = Vec::with_capacity(8);
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            let last = i + 1 == self.channels.len();
            let (stride, dilation) = if last {
                (self.final_stage_stride, self.final_stage_dilation)
            } else {
                (2, 1)
            };
            plan.push((cin, cout, stride, dilation));
            plan.push((cout, cout, 1, dilation));
            cin = cout;
        }
        plan
    }
}

/// One spatial feature grid, position-major: row p = (y*w + x) holds the
/// d-dimensional feature at that position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn row(&self, p: usize) -> &[f32] {
        &self.data[p * self.d..(p + 1) * self.d]
    }

    /// Arithmetic mean over grid positions.
    pub fn global_pool(&self) -> Vec<f32> {
        let p = self.positions();
        let mut lane = vec![0.0f32; p];
        let mut out = vec![0.0f32; self.d];
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..p {
                lane[i] = self.data[i * self.d + j];
            }
            *o = (pairwise_sum_f32(&lane) / p as f64) as f32;
        }
        out
    }

    /// Splits a [B, D, H, W] feature tensor into per-image maps.
    pub fn from_batch(t: &Tensor) -> Result<Vec<FeatureMap>> {
        if t.shape.len() != 4 {
            return Err(Error::shape("feature_map", format!("want rank 4, got {:?}", t.shape)));
        }
        let (b, d, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let mut maps = Vec::with_capacity(b);
        for i in 0..b {
            let mut data = vec![0.0f32; h * w * d];
            for c in 0..d {
                for p in 0..h * w {
                    data[p * d + c] = t.data[((i * d) + c) * h * w + p];
                }
            }
            maps.push(FeatureMap { h, w, d, data });
        }
        Ok(maps)
    }
}

/// Running batch-norm statistics, one (mean, var) pair per BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub layers: Vec<BnBatchStats>,
}

impl BnState {
    /// Fresh state: mean 0, variance 1 per channel.
    pub fn new(cfg: &EmbedderConfig) -> BnState {
        let layers = cfg
            .layer_plan()
            .into_iter()
            .map(|(_, cout, _, _)| BnBatchStats { mean: vec![0.0; cout], var: vec![1.0; cout] })
            .collect();
        BnState { layers }
    }

    /// EMA update toward freshly captured batch statistics.
    pub fn update(&mut self, batch: &[BnBatchStats], decay: f32) -> Result<()> {
        if batch.len() != self.layers.len() {
            return Err(Error::shape(
                "bn_update",
                format!("{} stat layers vs {} state layers", batch.len(), self.layers.len()),
            ));
        }
        for (layer, stats) in self.layers.iter_mut().zip(batch) {
            for (r, &b) in layer.mean.iter_mut().zip(&stats.mean) {
                *r = decay * *r + (1.0 - decay) * b;
            }
            for (r, &b) in layer.var.iter_mut().zip(&stats.var) {
                *r = decay * *r + (1.0 - decay) * b;
            }
        }
        Ok(())
    }
}

/// Where batch-norm statistics come from during a forward pass.
#[derive(Clone, Copy)]
pub enum BnSource<'a> {
    /// Normalize with current-batch statistics and capture them for EMA updates.
    Batch,
    /// Frozen running averages; the pass is a pure function of (input, params, state).
    Running(&'a BnState),
    /// Statistics captured from a support-set pass, applied to another batch.
    Stats(&'a [BnBatchStats]),
}

/// Batch-norm policy when classifying held-out episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalBnMode {
    /// Training-time running averages for every image.
    Running,
    /// Fresh statistics from the episode's support set, applied to queries too.
    SupportStats,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct EmbedderParams {
    pub blocks: Vec<ConvBlock>,
    /// 1x1 projection [feature_dim, c_last, 1, 1], linear, no bias.
    pub proj: Tensor,
}

impl EmbedderParams {
    /// He-normal conv weights, unit gamma, zero beta, 1/sqrt(fan_in) projection.
    pub fn init(cfg: &EmbedderConfig, rng: &mut ChaCha8Rng) -> Result<EmbedderParams> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(8);
        for (cin, cout, _, _) in cfg.layer_plan() {
            let std = (2.0 / (cin * 9) as f32).sqrt();
            blocks.push(ConvBlock {
                w: Tensor::randn(&[cout, cin, 3, 3], std, rng),
                gamma: Tensor::from_vec(&[cout], vec![1.0; cout])?.with_requires_grad(true),
                beta: Tensor::zeros(&[cout]).with_requires_grad(true),
            });
        }
        let c_last = *cfg.channels.last().expect("validated");
        let proj = Tensor::randn(&[cfg.feature_dim, c_last, 1, 1], (1.0 / c_last as f32).sqrt(), rng);
        Ok(EmbedderParams { blocks, proj })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("embed.b{i}.w"), &b.w));
            out.push((format!("embed.b{i}.gamma"), &b.gamma));
            out.push((format!("embed.b{i}.beta"), &b.beta));
        }
        out.push(("embed.proj".to_string(), &self.proj));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("embed.b{i}.w"), &mut b.w));
            out.push((format!("embed.b{i}.gamma"), &mut b.gamma));
            out.push((format!("embed.b{i}.beta"), &mut b.beta));
        }
        out.push(("embed.proj".to_string(), &mut self.proj));
        out
    }
}

/// Graph leaves for one forward pass over the embedder parameters.
pub struct EmbedderVars {
    pub blocks: Vec<(Var, Var, Var)>,
    pub proj: Var,
}

pub fn bind(g: &mut Graph, params: &EmbedderParams) -> EmbedderVars {
    EmbedderVars {
        blocks: params
            .blocks
            .iter()
            .map(|b| (g.leaf(&b.w), g.leaf(&b.gamma), g.leaf(&b.beta)))
            .collect(),
        proj: g.leaf(&params.proj),
    }
}

/// Embeds a [B, C, H, W] image batch into a [B, feature_dim, H', W'] grid.
/// In `Batch` mode the per-layer batch statistics are returned for EMA updates;
/// other modes return an empty vec.
pub fn forward(
    g: &mut Graph,
    cfg: &EmbedderConfig,
    vars: &EmbedderVars,
    x: Var,
    bn: BnSource,
) -> Result<(Var, Vec<BnBatchStats>)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("embed", format!("want [B,C,H,W] input, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(Error::shape("embed", "empty batch".to_string()));
    }
    if shape[1] != cfg.in_channels {
        return Err(Error::shape(
            "embed",
            format!("config expects {} input channels, batch has {}", cfg.in_channels, shape[1]),
        ));
    }
    let div = cfg.total_stride();
    if shape[2] != shape[3] || shape[2] % div != 0 {
        return Err(Error::shape(
            "embed",
            format!("image size {}x{} must be square and divisible by {div}", shape[2], shape[3]),
        ));
    }
    let plan = cfg.layer_plan();
    if let BnSource::Running(state) = bn {
        if state.layers.len() != plan.len() {
            return Err(Error::shape(
                "embed",
                format!("BnState has {} layers, embedder has {}", state.layers.len(), plan.len()),
            ));
        }
    }
    if let BnSource::Stats(stats) = bn {
        if stats.len() != plan.len() {
            return Err(Error::shape(
                "embed",
                format!("{} stat layers provided, embedder has {}", stats.len(), plan.len()),
            ));
        }
    }

    let mut cur = x;
    let mut captured = Vec::new();
    for (i, &(_, _, stride, dilation)) in plan.iter().enumerate() {
        let (w, gamma, beta) = vars.blocks[i];
        cur = g.conv2d(cur, w, stride, dilation, dilation)?;
        cur = match bn {
            BnSource::Batch => {
                let (y, stats) = g.batch_norm_batch(cur, gamma, beta, cfg.bn_eps)?;
                captured.push(stats);
                y
            }
            BnSource::Running(state) => {
                let s = &state.layers[i];
                g.batch_norm_running(cur, gamma, beta, cfg.bn_eps, &s.mean, &s.var)?
            }
            BnSource::Stats(stats) => {
                let s = &stats[i];
                g.batch_norm_running(cur, gamma, beta, cfg.bn_eps, &s.mean, &s.var)?
            }
        };
        cur = g.relu(cur)?;
    }
    let feats = g.conv2d(cur, vars.proj, 1, 1, 0)?;
    Ok((feats, captured))
}
