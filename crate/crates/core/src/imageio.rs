//! Lossless raster I/O for images, mattes and trimaps (PNG, 8 or 16 bit,
//! grayscale or RGB).

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use crate::compositing::{Trimap, TrimapLabel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

/// `(1, 3, h, w)` in `[0, 1]`; grayscale files are replicated to RGB.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    let hw = h * w;
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            t.data_mut()[c * hw + p] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(t)
}

/// `(1, 1, h, w)` in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0].clamp(0.0, 1.0)).collect();
    Tensor::from_vec(&[1, 1, h, w], data)
}

/// Decode a grayscale trimap with the usual tolerance bands.
pub fn read_trimap(path: &Path) -> Result<Trimap> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img.pixels().map(|p| TrimapLabel::from_gray(p.0[0])).collect();
    Trimap::new(w, h, labels)
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_dims(t: &Tensor) -> Result<(usize, usize)> {
    let (n, c, h, w) = t.nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("expected a (1, 3, h, w) image, got {:?}", t.dims())));
    }
    Ok((h, w))
}

fn gray_dims(t: &Tensor) -> Result<(usize, usize)> {
    let (n, c, h, w) = t.nchw()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("expected a (1, 1, h, w) map, got {:?}", t.dims())));
    }
    Ok((h, w))
}

/// 16-bit RGB PNG bytes.
pub fn png_rgb16(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = rgb_dims(t)?;
    let hw = h * w;
    let d = t.data();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([quantize16(d[p]), quantize16(d[hw + p]), quantize16(d[2 * hw + p])])
    });
    encode(DynamicImage::ImageRgb16(buf))
}

/// 16-bit grayscale PNG bytes.
pub fn png_gray16(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = gray_dims(t)?;
    let d = t.data();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([quantize16(d[y as usize * w + x as usize])]));
    encode(DynamicImage::ImageLuma16(buf))
}

/// 16-bit PNG bytes of a 1- or 3-channel raster.
pub fn png16(t: &Tensor) -> Result<Vec<u8>> {
    match t.dims().get(1) {
        Some(1) => png_gray16(t),
        _ => png_rgb16(t),
    }
}

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| save_err(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_rgb16(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &png_rgb16(t)?)
}

pub fn write_rgb8(path: &Path, t: &Tensor) -> Result<()> {
    encode_rgb8(t)?.save(path).map_err(|e| save_err(path, e))
}

/// 8-bit RGB PNG bytes.
pub fn png_rgb8(t: &Tensor) -> Result<Vec<u8>> {
    encode(DynamicImage::ImageRgb8(encode_rgb8(t)?))
}

fn encode_rgb8(t: &Tensor) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let (h, w) = rgb_dims(t)?;
    let hw = h * w;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([quantize8(d[p]), quantize8(d[hw + p]), quantize8(d[2 * hw + p])])
    }))
}

pub fn write_gray16(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &png_gray16(t)?)
}

pub fn write_trimap(path: &Path, trimap: &Trimap) -> Result<()> {
    let w = trimap.width();
    let buf = GrayImage::from_fn(w as u32, trimap.height() as u32, |x, y| {
        Luma([trimap.get(y as usize, x as usize).to_gray()])
    });
    buf.save(path).map_err(|e| save_err(path, e))
}

/// Decode PNG bytes as an RGB tensor.
pub fn decode_rgb(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image {
            path: "<upload>".into(),
            message: e.to_string(),
        })?
        .to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    let hw = h * w;
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            t.data_mut()[c * hw + p] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(t)
}

/// Decode trimap PNG bytes.
pub fn decode_trimap(bytes: &[u8]) -> Result<Trimap> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image {
            path: "<upload>".into(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Trimap::new(w, h, img.pixels().map(|p| TrimapLabel::from_gray(p.0[0])).collect())
}

/// Decode PNG bytes as a `(1, 1, h, w)` map.
pub fn decode_gray(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image {
            path: "<upload>".into(),
            message: e.to_string(),
        })?
        .to_luma32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_vec(&[1, 1, h, w], img.pixels().map(|p| p.0[0].clamp(0.0, 1.0)).collect())
}
