//! 8-bit images, binary masks, PNG round-trips and the geometric transforms
//! used by dataset preprocessing.
//!
//! Conventions: images resize bilinearly (half-pixel centers), masks resize
//! nearest-neighbor so labels stay binary; masks store 0/1 and map to 0/255
//! grayscale PNG, thresholding at 128 on load.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved row-major 8-bit image with `c` channels (1 or 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

/// Binary change mask: 0 = unchanged, 1 = changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize, c: usize, data: Vec<u8>) -> Result<Self> {
        if !(c == 1 || c == 3) || data.len() != w * h * c {
            return Err(Error::Image {
                path: "<memory>".into(),
                detail: format!("bad image buffer: {w}x{h}x{c} with {} bytes", data.len()),
            });
        }
        Ok(Image { w, h, c, data })
    }

    pub fn filled(w: usize, h: usize, c: usize, value: u8) -> Self {
        Image { w, h, c, data: vec![value; w * h * c] }
    }

    #[inline]
    pub fn px(&self, x: usize, y: usize, ch: usize) -> u8 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set_px(&mut self, x: usize, y: usize, ch: usize, v: u8) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }
}

impl Mask {
    pub fn zeros(w: usize, h: usize) -> Self {
        Mask { w, h, data: vec![0; w * h] }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }
}

// ------------------------------------------------------------------ PNG IO

fn image_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image { path: path.display().to_string(), detail: detail.into() }
}

pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e.to_string()))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(i) => i,
        image::DynamicImage::ImageRgba8(_) | image::DynamicImage::ImageLuma8(_) => img.to_rgb8(),
        other => {
            return Err(image_err(
                path,
                format!("expected an 8-bit image, got {:?} pixels", other.color()),
            ))
        }
    };
    Image::new(rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())
}

pub fn save_rgb(path: &Path, img: &Image) -> Result<()> {
    if img.c != 3 {
        return Err(image_err(path, "save_rgb wants a 3-channel image"));
    }
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, img.data.clone())
        .ok_or_else(|| image_err(path, "buffer does not match dimensions"))?;
    buf.save(path).map_err(|e| image_err(path, e.to_string()))
}

/// Grayscale mask PNG: 0 maps to 0, 1 maps to 255.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|v| if *v != 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.w as u32, mask.h as u32, bytes)
        .ok_or_else(|| image_err(path, "buffer does not match dimensions"))?;
    buf.save(path).map_err(|e| image_err(path, e.to_string()))
}

/// Load a grayscale PNG as a mask, thresholding at 128.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        image::DynamicImage::ImageRgb8(_) | image::DynamicImage::ImageRgba8(_) => img.to_luma8(),
        other => {
            return Err(image_err(
                path,
                format!("expected an 8-bit mask image, got {:?} pixels", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Mask { w, h, data: gray.into_raw().iter().map(|v| u8::from(*v >= 128)).collect() })
}

/// Write a min-max normalized f64 map as an 8-bit grayscale heatmap.
pub fn save_heatmap(path: &Path, w: usize, h: usize, values: &[f64]) -> Result<()> {
    if values.len() != w * h {
        return Err(image_err(path, "heatmap values do not match dimensions"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> =
        values.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| image_err(path, "buffer does not match dimensions"))?;
    buf.save(path).map_err(|e| image_err(path, e.to_string()))
}

// -------------------------------------------------------------- transforms

pub fn crop(img: &Image, x0: usize, y0: usize, w: usize, h: usize) -> Image {
    assert!(x0 + w <= img.w && y0 + h <= img.h, "crop extends past source bounds");
    let mut data = Vec::with_capacity(w * h * img.c);
    for y in 0..h {
        let src = ((y0 + y) * img.w + x0) * img.c;
        data.extend_from_slice(&img.data[src..src + w * img.c]);
    }
    Image { w, h, c: img.c, data }
}

/// Quarter-turn clockwise: out(x, y) = in(y, H-1-x); exact on u8.
pub fn rot90(img: &Image) -> Image {
    let (w, h, c) = (img.h, img.w, img.c);
    let mut out = Image::filled(w, h, c, 0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set_px(x, y, ch, img.px(y, img.h - 1 - x, ch));
            }
        }
    }
    out
}

/// `turns` quarter-turns clockwise.
pub fn rotate_quarter(img: &Image, turns: usize) -> Image {
    let mut out = img.clone();
    for _ in 0..(turns % 4) {
        out = rot90(&out);
    }
    out
}

/// Bilinear resize with half-pixel centers; values rounded back to u8.
pub fn resize_bilinear(img: &Image, new_w: usize, new_h: usize) -> Image {
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
                    .clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(in_len - 1), src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(new_h, img.h);
    let xs = axis(new_w, img.w);
    let mut out = Image::filled(new_w, new_h, img.c, 0);
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..img.c {
                let a = img.px(x0, y0, ch) as f64;
                let b = img.px(x1, y0, ch) as f64;
                let c2 = img.px(x0, y1, ch) as f64;
                let d = img.px(x1, y1, ch) as f64;
                let top = a + fx * (b - a);
                let bot = c2 + fx * (d - c2);
                out.set_px(x, y, ch, (top + fy * (bot - top)).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Nearest-neighbor resize (used for masks; preserves binary labels).
pub fn resize_nearest(img: &Image, new_w: usize, new_h: usize) -> Image {
    let pick = |o: usize, out_len: usize, in_len: usize| -> usize {
        let src = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
        (src.round().max(0.0) as usize).min(in_len - 1)
    };
    let mut out = Image::filled(new_w, new_h, img.c, 0);
    for y in 0..new_h {
        let sy = pick(y, new_h, img.h);
        for x in 0..new_w {
            let sx = pick(x, new_w, img.w);
            for ch in 0..img.c {
                out.set_px(x, y, ch, img.px(sx, sy, ch));
            }
        }
    }
    out
}

/// Masks ride along as single-channel images for shared transforms.
pub fn mask_to_image(mask: &Mask) -> Image {
    Image { w: mask.w, h: mask.h, c: 1, data: mask.data.clone() }
}

pub fn image_to_mask(img: &Image) -> Mask {
    debug_assert_eq!(img.c, 1);
    Mask { w: img.w, h: img.h, data: img.data.iter().map(|v| u8::from(*v != 0)).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, 3, 0);
        for y in 0..h {
            for x in 0..w {
                img.set_px(x, y, 0, (x * 7 % 256) as u8);
                img.set_px(x, y, 1, (y * 13 % 256) as u8);
                img.set_px(x, y, 2, ((x + y) % 256) as u8);
            }
        }
        img
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = gradient(9, 9);
        assert_eq!(rotate_quarter(&img, 4), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(10, 6, 3, 77);
        let out = resize_bilinear(&img, 25, 13);
        assert!(out.data.iter().all(|v| *v == 77));
    }

    #[test]
    fn nearest_preserves_binary() {
        let mut m = Mask::zeros(8, 8);
        m.data[3 * 8 + 4] = 1;
        let img = mask_to_image(&m);
        let up = resize_nearest(&img, 16, 16);
        assert!(up.data.iter().all(|v| *v == 0 || *v == 1));
        assert!(up.data.iter().any(|v| *v == 1));
    }
}
