//! Instance-discrimination episode conversion and the random view pipeline.
//!
//! `to_simclr_episode` rebuilds a categorization episode so that every
//! support image becomes its own class and the queries are transformed views
//! of support images, drawn without repeats and matching the original query
//! distribution per class. `apply_rho` is the view transform: random resized
//! crop, color jitter, and a Gaussian blur on query views only.

use super::{uniform, Episode, EpisodeItem, EpisodeKind};
use crate::error::{Error, Result};
use crate::image::{gaussian_blur, resample_crop, Image};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    SimclrRho,
    BohbLite,
    None,
}

/// Which operations the two-stage pipeline may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BohbOp {
    Rotate,
    Posterize,
    Solarize,
    ColorShift,
    Contrast,
    Brightness,
    Sharpness,
    Shear,
    Translate,
    Cutout,
    DownUp,
}

pub const ALL_BOHB_OPS: [BohbOp; 11] = [
    BohbOp::Rotate,
    BohbOp::Posterize,
    BohbOp::Solarize,
    BohbOp::ColorShift,
    BohbOp::Contrast,
    BohbOp::Brightness,
    BohbOp::Sharpness,
    BohbOp::Shear,
    BohbOp::Translate,
    BohbOp::Cutout,
    BohbOp::DownUp,
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    #[serde(default = "default_kind")]
    pub kind: PipelineKind,
    /// Area fraction range for the random resized crop.
    #[serde(default = "default_crop_scale_min")]
    pub crop_scale_min: f32,
    #[serde(default = "default_crop_scale_max")]
    pub crop_scale_max: f32,
    #[serde(default = "default_crop_aspect_min")]
    pub crop_aspect_min: f32,
    #[serde(default = "default_crop_aspect_max")]
    pub crop_aspect_max: f32,
    /// Overall color jitter strength; 0 disables jitter entirely.
    #[serde(default = "default_jitter_strength")]
    pub jitter_strength: f32,
    #[serde(default = "default_blur_sigma_min")]
    pub blur_sigma_min: f32,
    #[serde(default = "default_blur_sigma_max")]
    pub blur_sigma_max: f32,
    #[serde(default = "default_rotate_max_deg")]
    pub rotate_max_deg: f32,
    #[serde(default = "default_shear_max")]
    pub shear_max: f32,
    #[serde(default = "default_translate_max_frac")]
    pub translate_max_frac: f32,
    #[serde(default = "default_cutout_max_frac")]
    pub cutout_max_frac: f32,
    #[serde(default = "default_posterize_min_bits")]
    pub posterize_min_bits: u8,
    #[serde(default = "default_solarize_min")]
    pub solarize_min: f32,
    #[serde(default = "default_solarize_max")]
    pub solarize_max: f32,
    #[serde(default = "default_color_shift_max")]
    pub color_shift_max: f32,
    /// Strength for the contrast/brightness/sharpness enhancers (factor 1 ± e).
    #[serde(default = "default_enhance_max")]
    pub enhance_max: f32,
    /// Down-up resize may shrink width to as few pixels as this.
    #[serde(default = "default_min_downsample_px")]
    pub min_downsample_px: usize,
    #[serde(default = "default_op_set")]
    pub op_set: Vec<BohbOp>,
}

fn default_kind() -> PipelineKind {
    PipelineKind::SimclrRho
}
fn default_crop_scale_min() -> f32 {
    0.2
}
fn default_crop_scale_max() -> f32 {
    1.0
}
fn default_crop_aspect_min() -> f32 {
    1.0
}
fn default_crop_aspect_max() -> f32 {
    1.0
}
fn default_jitter_strength() -> f32 {
    0.5
}
fn default_blur_sigma_min() -> f32 {
    0.1
}
fn default_blur_sigma_max() -> f32 {
    1.0
}
fn default_rotate_max_deg() -> f32 {
    30.0
}
fn default_shear_max() -> f32 {
    0.3
}
fn default_translate_max_frac() -> f32 {
    0.3
}
fn default_cutout_max_frac() -> f32 {
    0.5
}
fn default_posterize_min_bits() -> u8 {
    4
}
fn default_solarize_min() -> f32 {
    0.5
}
fn default_solarize_max() -> f32 {
    1.0
}
fn default_color_shift_max() -> f32 {
    0.2
}
fn default_enhance_max() -> f32 {
    0.9
}
fn default_min_downsample_px() -> usize {
    10
}
fn default_op_set() -> Vec<BohbOp> {
    ALL_BOHB_OPS.to_vec()
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            kind: default_kind(),
            crop_scale_min: default_crop_scale_min(),
            crop_scale_max: default_crop_scale_max(),
            crop_aspect_min: default_crop_aspect_min(),
            crop_aspect_max: default_crop_aspect_max(),
            jitter_strength: default_jitter_strength(),
            blur_sigma_min: default_blur_sigma_min(),
            blur_sigma_max: default_blur_sigma_max(),
            rotate_max_deg: default_rotate_max_deg(),
            shear_max: default_shear_max(),
            translate_max_frac: default_translate_max_frac(),
            cutout_max_frac: default_cutout_max_frac(),
            posterize_min_bits: default_posterize_min_bits(),
            solarize_min: default_solarize_min(),
            solarize_max: default_solarize_max(),
            color_shift_max: default_color_shift_max(),
            enhance_max: default_enhance_max(),
            min_downsample_px: default_min_downsample_px(),
            op_set: default_op_set(),
        }
    }
}

impl TransformSpec {
    pub fn none() -> Self {
        TransformSpec { kind: PipelineKind::None, ..TransformSpec::default() }
    }

    pub fn bohb() -> Self {
        TransformSpec { kind: PipelineKind::BohbLite, ..TransformSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, lo: f32, hi: f32| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
            Ok(())
        };
        ordered("crop scale", self.crop_scale_min, self.crop_scale_max)?;
        if self.crop_scale_min <= 0.0 || self.crop_scale_max > 1.0 {
            return Err(Error::Config(format!(
                "crop scale range [{}, {}] must lie in (0, 1]",
                self.crop_scale_min, self.crop_scale_max
            )));
        }
        ordered("crop aspect", self.crop_aspect_min, self.crop_aspect_max)?;
        if self.crop_aspect_min <= 0.0 {
            return Err(Error::Config("crop aspect bounds must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config("jitter_strength must lie in [0, 1]".to_string()));
        }
        ordered("blur sigma", self.blur_sigma_min, self.blur_sigma_max)?;
        if self.blur_sigma_min <= 0.0 {
            return Err(Error::Config("blur sigma bounds must be positive".to_string()));
        }
        if !(0.0..=180.0).contains(&self.rotate_max_deg) {
            return Err(Error::Config("rotate_max_deg must lie in [0, 180]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.shear_max) {
            return Err(Error::Config("shear_max must lie in [0, 1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.translate_max_frac) {
            return Err(Error::Config("translate_max_frac must lie in [0, 1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.cutout_max_frac) {
            return Err(Error::Config("cutout_max_frac must lie in [0, 1]".to_string()));
        }
        if self.posterize_min_bits == 0 || self.posterize_min_bits > 8 {
            return Err(Error::Config("posterize_min_bits must lie in 1..=8".to_string()));
        }
        ordered("solarize threshold", self.solarize_min, self.solarize_max)?;
        if self.solarize_min < 0.0 || self.solarize_max > 1.0 {
            return Err(Error::Config("solarize thresholds must lie in [0, 1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.color_shift_max) {
            return Err(Error::Config("color_shift_max must lie in [0, 1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.enhance_max) {
            return Err(Error::Config("enhance_max must lie in [0, 1]".to_string()));
        }
        if self.min_downsample_px == 0 {
            return Err(Error::Config("min_downsample_px must be positive".to_string()));
        }
        if self.op_set.is_empty() {
            return Err(Error::Config("op_set must not be empty".to_string()));
        }
        Ok(())
    }
}

/// Random resized crop back to the original size. A fixed scale of 1 with a
/// unit aspect range reproduces the input exactly.
fn random_resized_crop(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let area = uniform(rng, spec.crop_scale_min, spec.crop_scale_max);
    let aspect = uniform(rng, spec.crop_aspect_min, spec.crop_aspect_max);
    let (h, w) = (img.h as f32, img.w as f32);
    let ch = (h * (area / aspect).sqrt()).clamp(1.0, h);
    let cw = (w * (area * aspect).sqrt()).clamp(1.0, w);
    let y0 = uniform(rng, 0.0, h - ch);
    let x0 = uniform(rng, 0.0, w - cw);
    resample_crop(img, y0, x0, ch, cw, img.h, img.w)
}

fn scale_pixels(img: &mut Image, f: f32) {
    if f != 1.0 {
        for v in &mut img.data {
            *v *= f;
        }
    }
}

fn adjust_contrast(img: &mut Image, f: f32) {
    if f == 1.0 {
        return;
    }
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64;
    let mean = mean as f32;
    for v in &mut img.data {
        *v = (*v - mean) * f + mean;
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Brightness/contrast jitter on single-channel images, full hue/saturation/
/// value jitter on three-channel images.
fn color_jitter(img: &mut Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) {
    let s = spec.jitter_strength;
    if s == 0.0 {
        return;
    }
    let swing = 0.8 * s;
    let brightness = uniform(rng, (1.0 - swing).max(0.0), 1.0 + swing);
    let contrast = uniform(rng, (1.0 - swing).max(0.0), 1.0 + swing);
    scale_pixels(img, brightness);
    adjust_contrast(img, contrast);
    if img.channels == 3 {
        let saturation = uniform(rng, (1.0 - swing).max(0.0), 1.0 + swing);
        let hue_shift = uniform(rng, -0.2 * s, 0.2 * s);
        for px in img.data.chunks_exact_mut(3) {
            let (h, sat, val) =
                rgb_to_hsv(px[0].clamp(0.0, 1.0), px[1].clamp(0.0, 1.0), px[2].clamp(0.0, 1.0));
            let (r, g, b) = hsv_to_rgb(h + hue_shift, (sat * saturation).clamp(0.0, 1.0), val);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }
}

/// The random view transform: resized crop, then color jitter, then a
/// Gaussian blur on query views only. Output keeps the input size and stays
/// in [0, 1]. A spec of kind `none` is the identity.
pub fn apply_rho(
    img: &Image,
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
    is_query: bool,
) -> Result<Image> {
    spec.validate()?;
    if spec.kind == PipelineKind::None {
        return Ok(img.clone());
    }
    let mut out = random_resized_crop(img, spec, rng);
    color_jitter(&mut out, spec, rng);
    if is_query {
        let sigma = uniform(rng, spec.blur_sigma_min, spec.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
    }
    out.clamp_unit();
    Ok(out)
}

/// Rebuilds a categorization episode for instance discrimination: every
/// support image becomes its own singleton class and queries are fresh views
/// of support images. Query sources are drawn without repeats; their class
/// histogram (through each source's original class) matches the original
/// query distribution whenever each class holds enough support images, and
/// spills deterministically to classes with spare capacity otherwise.
pub fn to_simclr_episode(
    episode: &Episode,
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if episode.kind != EpisodeKind::Categorization {
        return Err(Error::Episode(
            "only categorization episodes can be converted to instance discrimination".to_string(),
        ));
    }
    let n_support = episode.support.len();
    let n_query = episode.query.len();
    if n_query > n_support {
        return Err(Error::Episode(format!(
            "cannot draw {n_query} distinct query sources from {n_support} support images"
        )));
    }

    // Original per-class counts.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); episode.n_classes];
    for (idx, item) in episode.support.iter().enumerate() {
        members[item.class].push(idx);
    }
    let mut want: Vec<usize> = vec![0; episode.n_classes];
    for item in &episode.query {
        want[item.class] += 1;
    }

    // Take as many sources per class as the class can supply, then spill the
    // remainder over classes with spare capacity in ascending class order.
    let mut take: Vec<usize> = (0..episode.n_classes)
        .map(|c| want[c].min(members[c].len()))
        .collect();
    let mut leftover: usize = n_query - take.iter().sum::<usize>();
    while leftover > 0 {
        let mut moved = false;
        for c in 0..episode.n_classes {
            if leftover == 0 {
                break;
            }
            if take[c] < members[c].len() {
                take[c] += 1;
                leftover -= 1;
                moved = true;
            }
        }
        if !moved {
            return Err(Error::Episode(
                "query redistribution ran out of support capacity".to_string(),
            ));
        }
    }

    let support: Vec<EpisodeItem> = episode
        .support
        .iter()
        .enumerate()
        .map(|(idx, item)| {
            Ok(EpisodeItem {
                image: apply_rho(&item.image, spec, rng, false)?,
                class: idx,
                global_class: item.global_class,
            })
        })
        .collect::<Result<_>>()?;

    let mut query: Vec<EpisodeItem> = Vec::with_capacity(n_query);
    for c in 0..episode.n_classes {
        let chosen = super::sample_distinct(&members[c], take[c], rng);
        for src in chosen {
            query.push(EpisodeItem {
                image: apply_rho(&episode.support[src].image, spec, rng, true)?,
                class: src,
                global_class: episode.support[src].global_class,
            });
        }
    }

    let out = Episode { kind: EpisodeKind::Simclr, n_classes: n_support, support, query };
    out.validate()?;
    Ok(out)
}
