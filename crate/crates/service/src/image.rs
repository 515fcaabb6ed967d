//! 8-bit grayscale encoding of samples and PNG output.
//!
//! Disc samples are 16×16 images with values in `[0, 1]`. Vec samples are
//! shown as a 1×8 strip with `[-2, 2]` mapped onto the gray range.

use adaor_core::task::{TaskKind, DISC_SIDE, VEC_DIM};
use base64::Engine;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image has {got} pixels, expected {expected}")]
    Size { expected: usize, got: usize },
    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

/// A row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Width and height at which a task's samples are displayed.
pub fn layout(task: TaskKind) -> (usize, usize) {
    match task {
        TaskKind::Disc => (DISC_SIDE, DISC_SIDE),
        TaskKind::Vec => (VEC_DIM, 1),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Maps a sample onto gray levels.
pub fn to_gray(task: TaskKind, values: &[f64]) -> Result<Gray, ImageError> {
    let (width, height) = layout(task);
    if values.len() != width * height {
        return Err(ImageError::Size {
            expected: width * height,
            got: values.len(),
        });
    }
    let pixels = values
        .iter()
        .map(|&v| match task {
            TaskKind::Disc => quantize(v),
            TaskKind::Vec => quantize((v + 2.0) / 4.0),
        })
        .collect();
    Ok(Gray { width, height, pixels })
}

impl Gray {
    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> Gray {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.push(self.pixels[(y / factor) * self.width + x / factor]);
            }
        }
        Gray { width: w, height: h, pixels }
    }

    /// Panels side by side, separated by `gap` columns of `fill`.
    pub fn hstack(panels: &[Gray], gap: usize, fill: u8) -> Gray {
        let height = panels.iter().map(|p| p.height).max().unwrap_or(0);
        let width = panels.iter().map(|p| p.width).sum::<usize>() + gap * panels.len().saturating_sub(1);
        let mut pixels = vec![fill; width * height];
        let mut x0 = 0;
        for p in panels {
            for y in 0..p.height {
                let dst = y * width + x0;
                pixels[dst..dst + p.width].copy_from_slice(&p.pixels[y * p.width..(y + 1) * p.width]);
            }
            x0 += p.width + gap;
        }
        Gray { width, height, pixels }
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.pixels)?;
        }
        Ok(out)
    }

    pub fn to_png_base64(&self) -> Result<String, ImageError> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_png()?))
    }
}

/// Upscale factor and separator width of sweep grids.
pub const GRID_SCALE: usize = 8;
pub const GRID_GAP: usize = 2;

/// One row: the source, then each output, upscaled and separated.
pub fn sweep_grid(task: TaskKind, source: &[f64], outputs: &[Vec<f64>]) -> Result<Gray, ImageError> {
    let panels = std::iter::once(source)
        .chain(outputs.iter().map(Vec::as_slice))
        .map(|v| Ok(to_gray(task, v)?.upscale(GRID_SCALE)))
        .collect::<Result<Vec<_>, ImageError>>()?;
    Ok(Gray::hstack(&panels, GRID_GAP, 255))
}
