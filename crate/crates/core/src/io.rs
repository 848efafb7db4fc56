//! File formats: 8-bit PNG frames and grids, animated GIF previews, and the
//! raw grid container.
//!
//! Raw container layout (all little-endian): magic `GRDT`, `u32` version,
//! `u32` rows, cols, frame_h, frame_w, channels, then
//! `rows*frame_h * cols*frame_w * channels` `f32` values in `(y, x, c)` order.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{DynamicImage, Frame as GifFrame, GrayImage, RgbImage, RgbaImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::layout::{Frame, GridTensor, LayoutSpec};

const RAW_MAGIC: &[u8; 4] = b"GRDT";
const RAW_VERSION: u32 = 1;

/// Writes via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_of(data: &Array3<f64>) -> Result<DynamicImage> {
    let (h, w, c) = data.dim();
    let bytes: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    let (w32, h32) = (w as u32, h as u32);
    let img = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w32, h32, bytes).expect("sized")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w32, h32, bytes).expect("sized")),
        n => {
            return Err(Error::ShapeMismatch(format!(
                "cannot encode {n}-channel image as PNG (need 1 or 3)"
            )))
        }
    };
    Ok(img)
}

/// Saves an `(h, w, c)` array as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_png(path: &Path, data: &Array3<f64>) -> Result<()> {
    let img = image_of(data)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    write_atomic(path, buf.get_ref())
}

/// Loads a PNG (or any supported image) as values in `[0, 1]`. Grayscale
/// images give one channel, everything else three.
pub fn load_image(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let frame = match img.color().channel_count() {
        1 | 2 => {
            let g = img.to_luma8();
            Array3::from_shape_vec((h, w, 1), g.into_raw())
        }
        _ => {
            let rgb = img.to_rgb8();
            Array3::from_shape_vec((h, w, 3), rgb.into_raw())
        }
    }
    .expect("image buffer sized")
    .mapv(|b| b as f64 / 255.0);
    Ok(frame)
}

pub fn save_frames(dir: &Path, frames: &[Frame]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = frames.len().saturating_sub(1).to_string().len().max(4);
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let p = dir.join(format!("frame_{k:0width$}.png"));
            save_png(&p, f)?;
            Ok(p)
        })
        .collect()
}

pub fn save_gif(path: &Path, frames: &[Frame], delay_ms: u32) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = GifEncoder::new(&mut buf);
        enc.set_repeat(Repeat::Infinite)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        for f in frames {
            let rgba: RgbaImage = image_of(f)?.to_rgba8();
            let frame = GifFrame::from_parts(
                rgba,
                0,
                0,
                image::Delay::from_numer_denom_ms(delay_ms, 1),
            );
            enc.encode_frame(frame)
                .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        }
    }
    write_atomic(path, &buf)
}

pub fn encode_raw(grid: &GridTensor) -> Vec<u8> {
    let l = grid.layout();
    let mut buf = Vec::with_capacity(28 + grid.len() * 4);
    buf.extend_from_slice(RAW_MAGIC);
    for v in [
        RAW_VERSION,
        l.rows as u32,
        l.cols as u32,
        l.frame_h as u32,
        l.frame_w as u32,
        l.channels as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data().iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_raw(bytes: &[u8]) -> Result<GridTensor> {
    let bad = |m: &str| Error::ShapeMismatch(format!("raw grid: {m}"));
    if bytes.len() < 28 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("missing GRDT header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != RAW_VERSION {
        return Err(bad("unsupported version"));
    }
    let layout = LayoutSpec::new(
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5) as usize,
    )?;
    let n = layout.grid_h() * layout.grid_w() * layout.channels;
    let body = &bytes[28..];
    if body.len() != n * 4 {
        return Err(bad(&format!(
            "expected {} payload bytes, found {}",
            n * 4,
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let arr = Array3::from_shape_vec(layout.grid_shape(), data).expect("sized");
    GridTensor::new(arr, layout)
}

pub fn save_raw(path: &Path, grid: &GridTensor) -> Result<()> {
    write_atomic(path, &encode_raw(grid))
}

pub fn load_raw(path: &Path) -> Result<GridTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes)
}

/// Image files in `dir`, sorted lexicographically by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_img = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        if p.is_file() && is_img {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
