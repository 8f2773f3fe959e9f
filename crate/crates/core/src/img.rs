//! Linear-value image buffers and 8-bit PNG I/O. Values are quantized as
//! `round(255 * clamp(v, 0, 1))` on save and divided by 255 on load.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        source: image::ImageError,
    },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

/// RGB image with linear f64 channels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb64 {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl Rgb64 {
    pub fn new(width: u32, height: u32) -> Rgb64 {
        Rgb64 {
            width,
            height,
            pixels: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Rgb64 {
        assert_eq!(pixels.len(), (width * height) as usize);
        Rgb64 {
            width,
            height,
            pixels,
        }
    }

    pub fn at(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: [f64; 3]) {
        self.pixels[(y * self.width + x) as usize] = v;
    }

    pub fn crop(&self, bbox: &PixelBox) -> Rgb64 {
        let mut out = Rgb64::new(bbox.width(), bbox.height());
        for y in 0..bbox.height() {
            for x in 0..bbox.width() {
                out.set(x, y, self.at(bbox.x0 + x, bbox.y0 + y));
            }
        }
        out
    }
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn save_rgb_png(path: &Path, img: &Rgb64) -> Result<(), ImageError> {
    let mut buf = image::RgbImage::new(img.width, img.height);
    for (i, p) in img.pixels.iter().enumerate() {
        let x = i as u32 % img.width;
        let y = i as u32 / img.width;
        buf.put_pixel(x, y, image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])]));
    }
    buf.save(path).map_err(|source| ImageError::Write {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<Rgb64, ImageError> {
    let img = image::open(path)
        .map_err(|source| ImageError::Read {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let pixels = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok(Rgb64 {
        width: img.width(),
        height: img.height(),
        pixels,
    })
}

/// Grayscale image; used for weight maps and masks.
pub fn save_gray_png(path: &Path, width: u32, height: u32, values: &[f64]) -> Result<(), ImageError> {
    assert_eq!(values.len(), (width * height) as usize);
    let mut buf = image::GrayImage::new(width, height);
    for (i, v) in values.iter().enumerate() {
        buf.put_pixel(i as u32 % width, i as u32 / width, image::Luma([quantize(*v)]));
    }
    buf.save(path).map_err(|source| ImageError::Write {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_gray_png(path: &Path) -> Result<(u32, u32, Vec<f64>), ImageError> {
    let img = image::open(path)
        .map_err(|source| ImageError::Read {
            path: path.display().to_string(),
            source,
        })?
        .to_luma8();
    let values = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Ok((img.width(), img.height(), values))
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn full(width: u32, height: u32) -> PixelBox {
        PixelBox {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    /// Tight bounding box of set mask pixels; `None` for an empty mask.
    pub fn of_mask(width: u32, height: u32, mask: &[bool]) -> Option<PixelBox> {
        let mut bbox: Option<PixelBox> = None;
        for y in 0..height {
            for x in 0..width {
                if mask[(y * width + x) as usize] {
                    bbox = Some(match bbox {
                        None => PixelBox {
                            x0: x,
                            y0: y,
                            x1: x + 1,
                            y1: y + 1,
                        },
                        Some(b) => PixelBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x + 1),
                            y1: b.y1.max(y + 1),
                        },
                    });
                }
            }
        }
        bbox
    }
}
