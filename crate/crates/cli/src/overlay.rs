use std::path::Path;

use anyhow::{Context, Result};
use image::{ImageBuffer, Rgb};

pub fn save_png(path: impl AsRef<Path>, h: usize, w: usize, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, rgb.to_vec())
        .context("overlay buffer size does not match its extents")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
