//! 8-bit PNG ↔ tensor conversion. Images are `[3,H,W]` in `[0,1]`, masks are
//! `[H,W]` in `{0,1}` stored as gray 0/255.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use lesion_tensor::{load_tensor, Tensor};

use crate::error::{contract, io_err, Error, Result};

fn load_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = t.shape()[..] else {
        return contract(format!("expected a [3, H, W] image, got {:?}", t.shape()));
    };
    let d = t.data();
    let buf = (0..h * w)
        .flat_map(|p| (0..3).map(move |c| to_u8(d[c * h * w + p])))
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
}

pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn save_mask(m: &Tensor, path: &Path) -> Result<()> {
    let [h, w] = m.shape()[..] else {
        return contract(format!("expected an [H, W] mask, got {:?}", m.shape()));
    };
    let buf = m.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)
        .map_err(|e| image_err(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => io_err(path)(source),
        other => load_err(path, other),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(io_err(path)(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "file not found",
        )));
    }
    ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| load_err(path, e))
}

/// Load an RGB image from PNG, or from a `[3,H,W]` PGT1 tensor when the
/// extension is `.pgt`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "pgt") {
        let t = load_tensor(path)?;
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(load_err(path, format!("expected [3, H, W], got {:?}", t.shape())));
        }
        return Ok(t);
    }
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

/// Load a binary mask (gray PNG thresholded at 128, or an `[H,W]` PGT1
/// tensor thresholded at 0.5).
pub fn load_mask(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "pgt") {
        let t = load_tensor(path)?;
        if t.rank() != 2 {
            return Err(load_err(path, format!("expected [H, W], got {:?}", t.shape())));
        }
        return Ok(t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    }
    let g = open(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let raw = g.as_raw();
    Ok(Tensor::from_fn(&[h, w], |i| if raw[i] >= 128 { 1.0 } else { 0.0 }))
}

/// Tile `[3,H,W]` images into a grid with `cols` columns.
pub fn grid(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return contract("grid of zero images");
    };
    let (h, w) = (first.dim(1), first.dim(2));
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::full(&[3, gh, gw], 1.0);
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return contract("grid images differ in shape");
        }
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * gh + oy + y) * gw + ox;
                out.data_mut()[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}
