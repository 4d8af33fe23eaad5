//! Run configuration: one JSON object with flat dotted keys drives every
//! subcommand, and each key has exactly one identically named flag.
//!
//! Merge order is defaults, then `CTX_FEWSHOT_SEED` for seed keys, then the
//! config file, then flags. Every overlay entry is applied and re-checked
//! one at a time, so a bad value is reported under its own key.

use std::collections::BTreeMap;
use std::path::Path;

use ctxfew::embedder::EmbedderConfig;
use ctxfew::episodes::simclr::TransformSpec;
use ctxfew::episodes::synthetic::SyntheticConfig;
use ctxfew::episodes::SamplerConfig;
use ctxfew::evaluator::EvalOptions;
use ctxfew::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ctxfew::collapse::ProbeConfig;

/// Attention-export settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizConfig {
    /// Which query image of the sampled episode to explain.
    pub query_index: usize,
    /// Query grid positions as (row, col) pairs.
    pub positions: Vec<(usize, usize)>,
    /// Seed for drawing the episode to visualize.
    pub seed: u64,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig { query_index: 0, positions: vec![(0, 0)], seed: 0 }
    }
}

/// File-system locations; each command reads the subset it needs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory (output of gen-data, input everywhere else).
    pub data: String,
    /// Checkpoint file (output of train, input for eval/probe/viz).
    pub checkpoint: String,
    /// Training log CSV; defaults to `<checkpoint>.log.csv`.
    pub log: String,
    /// Evaluation or probe report file.
    pub report: String,
    /// Directory for attention maps.
    pub out_dir: String,
    /// Checkpoint to resume training from.
    pub resume: String,
}

/// Union of every setting the CLI understands.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for dataset generation.
    pub seed: u64,
    pub data: SyntheticConfig,
    pub embedder: EmbedderConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub transform: TransformSpec,
    pub eval: EvalOptions,
    pub probe: ProbeConfig,
    pub viz: VizConfig,
    pub paths: PathsConfig,
}

/// Help text per config key; the schema test pins this to the key set.
pub const KEY_HELP: &[(&str, &str)] = &[
    ("seed", "Seed for synthetic dataset generation"),
    ("data.num_classes", "Total synthetic classes (minimum 10)"),
    ("data.images_per_class", "Images rendered per class"),
    ("data.image_size", "Synthetic image side length in pixels"),
    ("data.hierarchy_depth", "Depth of the class hierarchy tree"),
    ("data.train_classes", "Classes assigned to the train split"),
    ("data.val_classes", "Classes assigned to the validation split"),
    ("data.test_classes", "Classes assigned to the test split"),
    ("data.noise", "Add pixel noise to rendered images"),
    ("embedder.input_size", "Image side length the network expects"),
    ("embedder.in_channels", "Image channels (1 or 3)"),
    ("embedder.channels", "Output channels of the four conv stages, e.g. [32,64,128,128]"),
    ("embedder.final_stage_stride", "Stride of the final stage (1 pairs with dilation 2)"),
    ("embedder.final_stage_dilation", "Dilation of the final stage convolutions"),
    ("embedder.feature_dim", "Channels of the projected output feature map"),
    ("embedder.bn_ema_decay", "Decay of the running batch-norm statistics"),
    ("embedder.bn_eps", "Batch-norm variance epsilon"),
    ("sampler.ways_min", "Minimum classes per episode"),
    ("sampler.ways_max", "Maximum classes per episode"),
    ("sampler.support_min", "Minimum total support images per episode"),
    ("sampler.support_max", "Maximum total support images per episode"),
    ("sampler.queries_per_class", "Query images per episode class"),
    ("sampler.fine_grained_fraction", "Fraction of episodes drawn from one hierarchy subtree"),
    ("sampler.simclr_fraction", "Fraction of training episodes converted to self-supervised form"),
    ("train.head", "Classification head: ctx or proto"),
    ("train.proto_metric", "Prototype distance: sq-euclid or cosine"),
    ("train.d_k", "Key/query dimension of the attention head"),
    ("train.d_v", "Value dimension of the attention head"),
    ("train.initial_lr", "Learning rate before decay"),
    ("train.lr_decay_factor", "Multiplicative learning-rate decay factor"),
    ("train.lr_decay_interval_episodes", "Episodes between learning-rate decays"),
    ("train.weight_decay", "Decoupled weight decay coefficient"),
    ("train.normalize_gradients", "Divide gradients by their global L2 norm"),
    ("train.adam_beta1", "Adam first-moment decay (0 with beta2=0 selects plain SGD)"),
    ("train.adam_beta2", "Adam second-moment decay (0 with beta1=0 selects plain SGD)"),
    ("train.adam_eps", "Adam denominator epsilon"),
    ("train.max_episodes", "Total training episodes"),
    ("train.validation_interval", "Episodes between validation passes"),
    ("train.validation_episodes", "Episodes per validation pass"),
    ("train.aux_loss", "Add the global classification auxiliary loss"),
    ("train.augment", "Apply the two-op augmentation policy to categorization episodes"),
    ("train.loss_scale", "Diagnostic loss multiplier (normalized updates are invariant to it)"),
    ("train.seed", "Seed for the training episode stream"),
    ("transform.kind", "View pipeline: simclr-rho, bohb-lite, or none"),
    ("transform.crop_scale_min", "Minimum crop area fraction"),
    ("transform.crop_scale_max", "Maximum crop area fraction"),
    ("transform.crop_aspect_min", "Minimum crop aspect ratio"),
    ("transform.crop_aspect_max", "Maximum crop aspect ratio"),
    ("transform.jitter_strength", "Color jitter strength"),
    ("transform.blur_sigma_min", "Minimum query blur sigma"),
    ("transform.blur_sigma_max", "Maximum query blur sigma"),
    ("transform.rotate_max_deg", "Maximum rotation in degrees"),
    ("transform.shear_max", "Maximum shear coefficient"),
    ("transform.translate_max_frac", "Maximum translation as a fraction of image size"),
    ("transform.cutout_max_frac", "Maximum cutout side as a fraction of image size"),
    ("transform.posterize_min_bits", "Fewest bits kept by posterize"),
    ("transform.solarize_min", "Minimum solarize threshold"),
    ("transform.solarize_max", "Maximum solarize threshold"),
    ("transform.color_shift_max", "Maximum per-channel color shift"),
    ("transform.enhance_max", "Maximum strength of contrast/brightness/sharpness"),
    ("transform.min_downsample_px", "Smallest side the down-up op may shrink to"),
    ("transform.op_set", "Augmentation ops to draw from, e.g. [\"rotate\",\"cutout\"]"),
    ("eval.n_episodes", "Evaluation episodes"),
    ("eval.mode", "Episode protocol: standard or five-shot"),
    ("eval.bn_mode", "Batch-norm policy: running or support-stats"),
    ("eval.split", "Dataset split to evaluate: train, val, or test"),
    ("eval.seed", "Seed for the evaluation episode stream"),
    ("probe.fraction", "Fraction of each split's images entering the retrieval pool"),
    ("probe.max_queries", "Cap on test-side probe queries"),
    ("probe.k", "Neighbours retrieved per query"),
    ("probe.seed", "Seed for pool and query sampling"),
    ("viz.query_index", "Query image of the sampled episode to explain"),
    ("viz.positions", "Query grid positions as [row,col] pairs, e.g. [[0,0],[2,3]]"),
    ("viz.seed", "Seed for drawing the episode to visualize"),
    ("paths.data", "Dataset directory"),
    ("paths.checkpoint", "Checkpoint file"),
    ("paths.log", "Training log CSV (defaults to <checkpoint>.log.csv)"),
    ("paths.report", "Evaluation or probe report file"),
    ("paths.out_dir", "Directory for attention maps"),
    ("paths.resume", "Checkpoint to resume training from"),
];

pub fn help_for(key: &str) -> Option<&'static str> {
    KEY_HELP.iter().find(|(k, _)| *k == key).map(|(_, h)| *h)
}

/// Flattens nested JSON objects to dotted keys; arrays stay leaf values.
fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = serde_json::Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(serde_json::Map::new()))
                .as_object_mut()
                .expect("flat keys never nest under a leaf");
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Value::Object(root)
}

fn default_flat() -> BTreeMap<String, Value> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut flat = BTreeMap::new();
    flatten("", &defaults, &mut flat);
    flat
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// One overlay entry bound for the flat map.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub key: String,
    pub value: Value,
}

/// Parses a flag value: JSON where it parses, bare string otherwise, so
/// `--train.head ctx` and `--sampler.ways_max 12` both read naturally.
pub fn parse_flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads a config file into overlay entries, rejecting unknown keys early.
pub fn file_overlays(path: &Path) -> Result<Vec<Overlay>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let value: Value = serde_json::from_slice(&bytes)
        .map_err(|e| format!("{}: not valid JSON: {e}", path.display()))?;
    let Value::Object(map) = value else {
        return Err(format!("{}: config must be a JSON object", path.display()));
    };
    let mut overlays = Vec::with_capacity(map.len());
    for (key, value) in map {
        if value.is_object() {
            return Err(format!("{key}: config keys must be flat dotted names, not objects"));
        }
        overlays.push(Overlay { key, value });
    }
    Ok(overlays)
}

/// Applies `overlays` over the defaults and deserializes the result.
///
/// Each entry is checked against the schema and re-deserialized on its own,
/// so errors carry the offending key. Seed keys that no overlay touched
/// fall back to `env_seed` when it is set.
pub fn resolve(overlays: &[Overlay], env_seed: Option<u64>) -> Result<RunConfig, String> {
    let mut flat = default_flat();
    if let Some(seed) = env_seed {
        for key in ["seed", "train.seed", "eval.seed", "probe.seed", "viz.seed"] {
            flat.insert(key.to_string(), Value::from(seed));
        }
    }
    for overlay in overlays {
        let Some(current) = flat.get(&overlay.key) else {
            return Err(format!("unknown config key '{}'", overlay.key));
        };
        if json_kind(current) != json_kind(&overlay.value) {
            return Err(format!(
                "{}: expected {}, got {}",
                overlay.key,
                json_kind(current),
                json_kind(&overlay.value)
            ));
        }
        flat.insert(overlay.key.clone(), overlay.value.clone());
        if let Err(e) = serde_json::from_value::<RunConfig>(unflatten(&flat)) {
            return Err(format!("{}: {e}", overlay.key));
        }
    }
    serde_json::from_value(unflatten(&flat)).map_err(|e| e.to_string())
}

/// All config keys, i.e. the flag schema shared by every subcommand.
pub fn schema_keys() -> Vec<String> {
    default_flat().keys().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn over(key: &str, raw: &str) -> Overlay {
        Overlay { key: key.to_string(), value: parse_flag_value(raw) }
    }

    #[test]
    fn every_key_has_help_and_every_help_has_a_key() {
        let keys = schema_keys();
        for key in &keys {
            assert!(help_for(key).is_some(), "no help for {key}");
        }
        for (key, _) in KEY_HELP {
            assert!(keys.iter().any(|k| k == key), "help for unknown key {key}");
        }
        assert_eq!(keys.len(), KEY_HELP.len());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = resolve(&[], None).unwrap();
        assert_eq!(cfg.train.max_episodes, TrainConfig::default().max_episodes);
        assert_eq!(cfg.eval.n_episodes, 600);
        assert_eq!(cfg.viz.positions, vec![(0, 0)]);
    }

    #[test]
    fn overlays_override_defaults() {
        let cfg = resolve(
            &[
                over("train.head", "proto"),
                over("sampler.ways_max", "12"),
                over("embedder.channels", "[8,8,16,16]"),
                over("paths.data", "out/glyphs"),
                over("viz.positions", "[[1,2],[3,4]]"),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.train.head, ctxfew::trainer::HeadKind::Proto);
        assert_eq!(cfg.sampler.ways_max, 12);
        assert_eq!(cfg.embedder.channels, vec![8, 8, 16, 16]);
        assert_eq!(cfg.paths.data, "out/glyphs");
        assert_eq!(cfg.viz.positions, vec![(1, 2), (3, 4)]);
    }

    #[test]
    fn unknown_keys_and_type_mismatches_name_the_key() {
        let err = resolve(&[over("train.heads", "ctx")], None).unwrap_err();
        assert!(err.contains("unknown config key 'train.heads'"), "{err}");
        let err = resolve(&[over("sampler.ways_max", "\"many\"")], None).unwrap_err();
        assert!(err.starts_with("sampler.ways_max:"), "{err}");
        let err = resolve(&[over("train.head", "protonet")], None).unwrap_err();
        assert!(err.starts_with("train.head:"), "{err}");
        let err = resolve(&[over("sampler.ways_max", "-3")], None).unwrap_err();
        assert!(err.starts_with("sampler.ways_max:"), "{err}");
    }

    #[test]
    fn env_seed_fills_only_untouched_seed_keys() {
        let cfg = resolve(&[over("train.seed", "7")], Some(99)).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.eval.seed, 99);
        assert_eq!(cfg.probe.seed, 99);
        assert_eq!(cfg.viz.seed, 99);
    }

    #[test]
    fn later_overlays_win() {
        let cfg = resolve(&[over("train.seed", "1"), over("train.seed", "2")], None).unwrap();
        assert_eq!(cfg.train.seed, 2);
    }

    #[test]
    fn nested_objects_in_config_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"seed": 1}}"#).unwrap();
        let err = file_overlays(&path).unwrap_err();
        assert!(err.contains("flat dotted names"), "{err}");
        std::fs::write(&path, r#"{"train.seed": 5, "eval.split": "val"}"#).unwrap();
        let overlays = file_overlays(&path).unwrap();
        let cfg = resolve(&overlays, None).unwrap();
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.eval.split, ctxfew::episodes::Split::Val);
    }
}
