//! PNG encoding helpers and mask overlays.

use std::io::Cursor;
use std::path::Path;

use image::{ImageError, ImageFormat, Rgb, RgbImage};

use crate::mask::BitMask;

pub fn encode_gray_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>, ImageError> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .expect("buffer length matches dimensions");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// 8-bit single-channel PNG with set pixels at 255.
pub fn mask_to_png(mask: &BitMask) -> Vec<u8> {
    let data: Vec<u8> = mask.iter().map(|b| if b { 255 } else { 0 }).collect();
    encode_gray_png(mask.width(), mask.height(), &data).expect("in-memory PNG encoding")
}

/// Any non-zero pixel of the first channel counts as set.
pub fn mask_from_png(bytes: &[u8]) -> Result<BitMask, ImageError> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BitMask::from_fn(w as usize, h as usize, |x, y| img.get_pixel(x as u32, y as u32)[0] != 0))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, ImageError> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Blends each mask over the image in a cycling palette colour at 50% opacity.
pub fn overlay(base: &RgbImage, masks: &[&BitMask]) -> RgbImage {
    let mut out = base.clone();
    for (k, m) in masks.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for (x, y) in m.iter_ones() {
            if x as u32 >= out.width() || y as u32 >= out.height() {
                continue;
            }
            let p = out.get_pixel_mut(x as u32, y as u32);
            *p = Rgb([0, 1, 2].map(|i| ((p[i] as u16 + c[i] as u16) / 2) as u8));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let m = BitMask::from_fn(9, 4, |x, y| (x + y) % 3 == 0);
        assert_eq!(mask_from_png(&mask_to_png(&m)).unwrap(), m);
    }

    #[test]
    fn overlay_only_touches_masked_pixels() {
        let base = RgbImage::from_pixel(3, 3, Rgb([0, 0, 0]));
        let mut m = BitMask::zeros(3, 3);
        m.set(1, 1, true);
        let o = overlay(&base, &[&m]);
        assert_eq!(o.get_pixel(0, 0), &Rgb([0, 0, 0]));
        assert_eq!(o.get_pixel(1, 1), &Rgb([115, 12, 37]));
    }
}
