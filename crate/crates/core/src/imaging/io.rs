use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, Luma};

use super::GrayImage;
use crate::error::{Error, Result};

const REC601: [f32; 3] = [0.299, 0.587, 0.114];

fn to_gray(img: DynamicImage) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| {
                let v = REC601[0] * p.0[0] + REC601[1] * p.0[1] + REC601[2] * p.0[2];
                (v as f64).clamp(0.0, 1.0)
            })
            .collect(),
    };
    GrayImage::new(w, h, data)
}

fn detect_format(bytes: &[u8]) -> Result<ImageFormat> {
    match image::guess_format(bytes)? {
        f @ (ImageFormat::Png | ImageFormat::Pnm) => Ok(f),
        other => Err(Error::InvalidImage(format!("unsupported format {other:?}; expected PNG or PGM"))),
    }
}

/// Decode PNG or binary PGM bytes; colour input is reduced to luma with the
/// Rec. 601 weights.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    let format = detect_format(bytes)?;
    if format == ImageFormat::Pnm && !bytes.starts_with(b"P5") {
        return Err(Error::InvalidImage("only binary PGM (P5) is supported".into()));
    }
    to_gray(image::load_from_memory_with_format(bytes, format)?)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_image(&std::fs::read(path)?)
}

fn to_buffer(img: &GrayImage) -> image::ImageBuffer<Luma<u8>, Vec<u8>> {
    image::ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .expect("buffer size matches dimensions")
}

/// 8-bit PNG encoding.
pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_buffer(img).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Binary PGM (P5), maxval 255.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(img.to_u8());
    std::fs::write(path, bytes)?;
    Ok(())
}
