//! Two-stage random augmentation for categorization episodes.
//!
//! `apply_bohb_lite` draws exactly two operations uniformly from the spec's
//! op set and applies them in order. Every op preserves the image dimensions
//! and the result is clamped to [0, 1].

use super::simclr::{BohbOp, TransformSpec};
use super::uniform;
use crate::error::Result;
use crate::image::{affine_sample, gaussian_blur, resample_crop, Image};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rotate(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let deg = uniform(rng, -spec.rotate_max_deg, spec.rotate_max_deg);
    let rad = deg.to_radians();
    let (c, s) = (rad.cos(), rad.sin());
    affine_sample(img, [c, s, -s, c], (0.0, 0.0))
}

fn shear(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let s = uniform(rng, -spec.shear_max, spec.shear_max);
    let m = if rng.random_bool(0.5) { [1.0, s, 0.0, 1.0] } else { [1.0, 0.0, s, 1.0] };
    affine_sample(img, m, (0.0, 0.0))
}

fn translate(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let t = spec.translate_max_frac;
    let dy = uniform(rng, -t, t) * img.h as f32;
    let dx = uniform(rng, -t, t) * img.w as f32;
    affine_sample(img, [1.0, 0.0, 0.0, 1.0], (dy, dx))
}

fn posterize(img: &mut Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) {
    let bits = rng.random_range(u32::from(spec.posterize_min_bits)..=8);
    let mask = (0xFF00_u16 >> bits) as u8;
    for v in &mut img.data {
        let byte = (*v * 255.0).round().clamp(0.0, 255.0) as u8;
        *v = f32::from(byte & mask) / 255.0;
    }
}

fn solarize(img: &mut Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) {
    let threshold = uniform(rng, spec.solarize_min, spec.solarize_max);
    for v in &mut img.data {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

fn color_shift(img: &mut Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) {
    let shifts: Vec<f32> = (0..img.channels)
        .map(|_| uniform(rng, -spec.color_shift_max, spec.color_shift_max))
        .collect();
    for px in img.data.chunks_exact_mut(img.channels) {
        for (v, s) in px.iter_mut().zip(&shifts) {
            *v += s;
        }
    }
}

fn contrast(img: &mut Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) {
    let f = uniform(rng, 1.0 - spec.enhance_max, 1.0 + spec.enhance_max);
    let mean =
        (img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64) as f32;
    for v in &mut img.data {
        *v = (*v - mean) * f + mean;
    }
}

fn brightness(img: &mut Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) {
    let f = uniform(rng, 1.0 - spec.enhance_max, 1.0 + spec.enhance_max);
    for v in &mut img.data {
        *v *= f;
    }
}

fn sharpness(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let f = uniform(rng, 1.0 - spec.enhance_max, 1.0 + spec.enhance_max);
    let smooth = gaussian_blur(img, 1.0);
    let mut out = smooth.clone();
    for ((o, &orig), &sm) in out.data.iter_mut().zip(&img.data).zip(&smooth.data) {
        *o = sm + f * (orig - sm);
    }
    out
}

fn cutout(img: &mut Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) {
    let frac = uniform(rng, 0.0, spec.cutout_max_frac);
    let side_y = (frac * img.h as f32).round() as i64;
    let side_x = (frac * img.w as f32).round() as i64;
    let cy = uniform(rng, 0.0, img.h as f32) as i64;
    let cx = uniform(rng, 0.0, img.w as f32) as i64;
    for y in (cy - side_y / 2).max(0)..(cy - side_y / 2 + side_y).min(img.h as i64) {
        for x in (cx - side_x / 2).max(0)..(cx - side_x / 2 + side_x).min(img.w as i64) {
            for ch in 0..img.channels {
                *img.at_mut(y as usize, x as usize, ch) = 0.5;
            }
        }
    }
}

fn down_up(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let lo = (spec.min_downsample_px as f32 / img.w as f32).min(1.0);
    let ratio = uniform(rng, lo, 1.0);
    let small_h = ((img.h as f32 * ratio).round() as usize).max(1);
    let small_w = ((img.w as f32 * ratio).round() as usize).max(1);
    if small_h == img.h && small_w == img.w {
        return img.clone();
    }
    let small = resample_crop(img, 0.0, 0.0, img.h as f32, img.w as f32, small_h, small_w);
    resample_crop(&small, 0.0, 0.0, small_h as f32, small_w as f32, img.h, img.w)
}

fn apply_op(img: Image, op: BohbOp, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let mut out = match op {
        BohbOp::Rotate => rotate(&img, spec, rng),
        BohbOp::Shear => shear(&img, spec, rng),
        BohbOp::Translate => translate(&img, spec, rng),
        BohbOp::Sharpness => sharpness(&img, spec, rng),
        BohbOp::DownUp => down_up(&img, spec, rng),
        _ => {
            let mut m = img;
            match op {
                BohbOp::Posterize => posterize(&mut m, spec, rng),
                BohbOp::Solarize => solarize(&mut m, spec, rng),
                BohbOp::ColorShift => color_shift(&mut m, spec, rng),
                BohbOp::Contrast => contrast(&mut m, spec, rng),
                BohbOp::Brightness => brightness(&mut m, spec, rng),
                BohbOp::Cutout => cutout(&mut m, spec, rng),
                _ => unreachable!(),
            }
            m
        }
    };
    out.clamp_unit();
    out
}

/// Applies exactly two operations drawn uniformly (with replacement) from the
/// spec's op set. Output has the input's dimensions with values in [0, 1].
pub fn apply_bohb_lite(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    spec.validate()?;
    let mut out = img.clone();
    for _ in 0..2 {
        let op = spec.op_set[rng.random_range(0..spec.op_set.len())];
        out = apply_op(out, op, spec, rng);
    }
    Ok(out)
}
