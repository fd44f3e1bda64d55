//! 8-bit grayscale PGM (P5) and PNG codecs.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ColorType, ImageFormat, ImageReader};

use super::GrayImage;
use crate::error::{Error, Result};

/// File formats accepted as dataset images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Pgm,
    Png,
}

impl ImageKind {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(ImageKind::Pgm),
            "png" => Some(ImageKind::Png),
            _ => None,
        }
    }
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    match ImageKind::from_path(path) {
        Some(ImageKind::Pgm) => read_pgm(path),
        Some(ImageKind::Png) => read_png(path),
        None => Err(Error::file(
            path,
            "unsupported image extension (expected .pgm or .png)",
        )),
    }
}

pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    match ImageKind::from_path(path) {
        Some(ImageKind::Pgm) => write_pgm(path, img),
        Some(ImageKind::Png) => write_png(path, img),
        None => Err(Error::file(
            path,
            "unsupported image extension (expected .pgm or .png)",
        )),
    }
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_pgm(&bytes).map_err(|m| Error::file(path, m))
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(format!("not a binary PGM (magic {magic:?})"));
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?
            .parse::<usize>()
            .map_err(|_| format!("bad PGM {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval} (8-bit only)"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = pos + 1;
    let need = width * height;
    if bytes.len() < raster + need {
        return Err(format!(
            "truncated PGM raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(raster)
        ));
    }
    let maxval = maxval as f32;
    let pixels = bytes[raster..raster + need]
        .iter()
        .map(|&b| (b as f32 / maxval).min(1.0))
        .collect();
    GrayImage::new(width, height, pixels).map_err(|e| e.to_string())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&out).map_err(|e| Error::file(path, e))
}

pub fn read_png(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::file(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::file(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::file(path, e))?;
    if decoded.color() != ColorType::L8 {
        return Err(Error::file(
            path,
            format!(
                "expected 8-bit grayscale, found {:?}; color inputs are rejected",
                decoded.color()
            ),
        ));
    }
    let luma = decoded.into_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::from_u8(w as usize, h as usize, luma.as_raw())
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &img.to_u8(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::L8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::file(path, e))
}

/// Write interleaved 8-bit RGB.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    image::save_buffer_with_format(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::file(path, e))
}
