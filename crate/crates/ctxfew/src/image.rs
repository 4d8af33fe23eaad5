//! Image values and 8-bit PGM/PPM binary IO.
//!
//! Pixels are f32 in [0, 1], stored H x W x C (channel-last). Grayscale maps
//! to PGM (P5), RGB to PPM (P6), both binary with maxval 255.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// Row-major H x W x C.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize) -> Image {
        Image { h, w, channels, data: vec![0.0; h * w * channels] }
    }

    pub fn from_data(h: usize, w: usize, channels: usize, data: Vec<f32>) -> Result<Image> {
        if data.len() != h * w * channels {
            return Err(Error::shape(
                "image",
                format!("{h}x{w}x{channels} needs {} values, got {}", h * w * channels, data.len()),
            ));
        }
        Ok(Image { h, w, channels, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.w + x) * self.channels + c]
    }

    /// Zero-fill bilinear sample at fractional coordinates.
    pub fn sample_bilinear(&self, y: f32, x: f32, c: usize) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = 0.0f32;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let yy = y0 as isize + dy;
                let xx = x0 as isize + dx;
                let v = if yy < 0 || xx < 0 || yy >= self.h as isize || xx >= self.w as isize {
                    0.0
                } else {
                    self.at(yy as usize, xx as usize, c)
                };
                acc += wy * wx * v;
            }
        }
        acc
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Resamples a source rectangle (top-left y0,x0, size ch x cw) to out_h x out_w.
/// A full-frame rectangle at the same output size is an exact copy.
pub fn resample_crop(img: &Image, y0: f32, x0: f32, ch: f32, cw: f32, out_h: usize, out_w: usize) -> Image {
    if y0 == 0.0
        && x0 == 0.0
        && ch == img.h as f32
        && cw == img.w as f32
        && out_h == img.h
        && out_w == img.w
    {
        return img.clone();
    }
    let mut out = Image::new(out_h, out_w, img.channels);
    // Pixel centers: output pixel i samples source at y0 + (i + 0.5) * ch / out_h - 0.5,
    // clamped to the frame so resizing never bleeds in zero padding.
    for oy in 0..out_h {
        let sy = (y0 + (oy as f32 + 0.5) * ch / out_h as f32 - 0.5)
            .clamp(0.0, img.h as f32 - 1.0);
        for ox in 0..out_w {
            let sx = (x0 + (ox as f32 + 0.5) * cw / out_w as f32 - 0.5)
                .clamp(0.0, img.w as f32 - 1.0);
            for c in 0..img.channels {
                *out.at_mut(oy, ox, c) = img.sample_bilinear(sy, sx, c);
            }
        }
    }
    out
}

/// Inverse-maps each output pixel through a 2x3 affine transform about the
/// image center: source = M . (dst - center) + center + translation.
pub fn affine_sample(img: &Image, m: [f32; 4], translate: (f32, f32)) -> Image {
    if m == [1.0, 0.0, 0.0, 1.0] && translate == (0.0, 0.0) {
        return img.clone();
    }
    let cy = (img.h as f32 - 1.0) / 2.0;
    let cx = (img.w as f32 - 1.0) / 2.0;
    let mut out = Image::new(img.h, img.w, img.channels);
    for oy in 0..img.h {
        for ox in 0..img.w {
            let dy = oy as f32 - cy;
            let dx = ox as f32 - cx;
            let sy = m[0] * dy + m[1] * dx + cy - translate.0;
            let sx = m[2] * dy + m[3] * dx + cx - translate.1;
            for c in 0..img.channels {
                *out.at_mut(oy, ox, c) = img.sample_bilinear(sy, sx, c);
            }
        }
    }
    out
}

/// Separable Gaussian blur; the kernel is normalized to sum 1.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f32 * i as f32) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    let pass = |src: &Image, horizontal: bool| -> Image {
        let mut out = Image::new(src.h, src.w, src.channels);
        for y in 0..src.h {
            for x in 0..src.w {
                for c in 0..src.channels {
                    let mut acc = 0.0f32;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let o = ki as isize - radius;
                        let (sy, sx) = if horizontal {
                            (y as isize, x as isize + o)
                        } else {
                            (y as isize + o, x as isize)
                        };
                        // Clamp to edge so flat regions stay flat.
                        let sy = sy.clamp(0, src.h as isize - 1) as usize;
                        let sx = sx.clamp(0, src.w as isize - 1) as usize;
                        acc += kv * src.at(sy, sx, c);
                    }
                    *out.at_mut(y, x, c) = acc;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Packs same-shaped images into a [B, C, H, W] tensor.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::shape("batch_tensor", "empty batch".to_string()));
    };
    let (h, w, c) = (first.h, first.w, first.channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.h != h || img.w != w || img.channels != c {
            return Err(Error::shape(
                "batch_tensor",
                format!("mixed image shapes: {h}x{w}x{c} vs {}x{}x{}", img.h, img.w, img.channels),
            ));
        }
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.at(y, x, ci));
                }
            }
        }
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

// ----- PGM / PPM -----

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        n => return Err(Error::Dataset(format!("cannot write {n}-channel image as PNM"))),
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.w, img.h).into_bytes();
    bytes.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pnm(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos).ok_or("missing magic")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let w: usize = token(bytes, &mut pos).ok_or("missing width")?.parse().map_err(|_| "bad width")?;
    let h: usize = token(bytes, &mut pos).ok_or("missing height")?.parse().map_err(|_| "bad height")?;
    let maxval: usize =
        token(bytes, &mut pos).ok_or("missing maxval")?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("only maxval 255 supported, got {maxval}"));
    }
    // Single whitespace byte separates the header from raster data.
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(format!("truncated raster: need {need} bytes, have {}", bytes.len() - pos.min(bytes.len())));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image { h, w, channels, data })
}

/// Next whitespace-delimited token, skipping '#' comments.
fn token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}
