//! PNG export: dataset previews and anomaly-map triptychs.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use mvad::Error;

/// Fixed colour scale of anomaly maps: cosine distance spans `[0, 2]`.
pub const MAP_RANGE: (f64, f64) = (0.0, 2.0);

/// Jet colormap of `t ∈ [0, 1]`.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |offset: f64| ((1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub fn map_color(v: f64) -> [u8; 3] {
    jet((v - MAP_RANGE.0) / (MAP_RANGE.1 - MAP_RANGE.0))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// `[3, h, w]` planar image as RGB.
pub fn planar_to_rgb(planes: &[f32], h: usize, w: usize) -> Rgb {
    let mut img = Rgb::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = |c: usize| to_u8(planes[(c * h + y) * w + x]);
            img.put(x, y, [p(0), p(1), p(2)]);
        }
    }
    img
}

/// Input, colour-mapped anomaly map, and input with the mask tinted red, side by side.
pub fn triptych(planes: &[f32], map: &[f64], mask: &[f32], h: usize, w: usize) -> Rgb {
    let input = planar_to_rgb(planes, h, w);
    let mut out = Rgb::new(3 * w, h);
    for y in 0..h {
        for x in 0..w {
            let px = input.get(x, y);
            out.put(x, y, px);
            out.put(w + x, y, map_color(map[y * w + x]));
            let overlay = if mask[y * w + x] > 0.5 {
                [((px[0] as u16 + 255) / 2) as u8, px[1] / 2, px[2] / 2]
            } else {
                px
            };
            out.put(2 * w + x, y, overlay);
        }
    }
    out
}

/// Grayscale `[h, w]` mask in `{0, 1}` as RGB.
pub fn mask_to_rgb(mask: &[f32], h: usize, w: usize) -> Rgb {
    let mut img = Rgb::new(w, h);
    for (i, &m) in mask.iter().enumerate().take(h * w) {
        let v = to_u8(m);
        img.put(i % w, i / w, [v, v, v]);
    }
    img
}

/// Writes an 8-bit RGB PNG with `tEXt` chunks.
pub fn write_png(path: &Path, img: &Rgb, text: &[(&str, String)]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = File::create(path).map_err(io)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone())
            .with_context(|| format!("text chunk {k} in {}", path.display()))?;
    }
    let mut writer = enc.write_header().with_context(|| format!("writing {}", path.display()))?;
    writer
        .write_image_data(&img.data)
        .with_context(|| format!("writing {}", path.display()))?;
    writer.finish().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
