//! True-color PNG mosaics of tile time series: one row per image source, one
//! column per MSI frame, labelled with row names and day-of-year.

use std::path::Path;

use font8x8::legacy::BASIC_LEGACY;
use image::{ImageEncoder, Rgb, RgbImage};

use crate::dataio::{MSI_BANDS, N_MSI_BANDS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

const GAP: u32 = 2;
const GLYPH: u32 = 8;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const INK: Rgb<u8> = Rgb([235, 235, 235]);

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    /// Band indices drawn as red, green, blue.
    pub bands: [usize; 3],
    pub gain: f64,
    /// Integer upsampling of each tile pixel.
    pub scale: u32,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self { bands: Self::parse_bands("B4,B3,B2").expect("default bands exist"), gain: 2.5, scale: 2 }
    }
}

impl RenderSpec {
    /// Band triple from names such as `B4,B3,B2`.
    pub fn parse_bands(s: &str) -> Result<[usize; 3]> {
        let idx = s
            .split(',')
            .map(|name| {
                let name = name.trim();
                MSI_BANDS
                    .iter()
                    .position(|b| b.eq_ignore_ascii_case(name))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown band {name:?}; expected one of {MSI_BANDS:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        idx.try_into().map_err(|v: Vec<usize>| Error::InvalidArgument(format!("need exactly 3 bands, got {}", v.len())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::InvalidArgument(format!("gain must be positive, got {}", self.gain)));
        }
        if self.scale == 0 || self.bands.iter().any(|&b| b >= N_MSI_BANDS) {
            return Err(Error::InvalidArgument(format!("invalid render spec {self:?}")));
        }
        Ok(())
    }
}

/// One mosaic row: `T×11×H×W` frames, optionally blacked out where `black`
/// (`T×H×W`) is set.
#[derive(Clone, Debug)]
pub struct RenderRow {
    pub label: String,
    pub frames: Tensor,
    pub black: Option<Tensor>,
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = BASIC_LEGACY.get(ch as usize).copied().unwrap_or(BASIC_LEGACY[b'?' as usize]);
        for (dy, bits) in glyph.iter().enumerate() {
            for dx in 0..GLYPH {
                let (x, y) = (x0 + i as u32 * GLYPH + dx, y0 + dy as u32);
                if bits >> dx & 1 == 1 && x < img.width() && y < img.height() {
                    img.put_pixel(x, y, INK);
                }
            }
        }
    }
}

fn to_byte(v: f32, gain: f64) -> u8 {
    ((v as f64 * gain).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays out the rows as a grid with a label column and a day-of-year header.
pub fn render_mosaic(spec: &RenderSpec, rows: &[RenderRow], days: &[u32]) -> Result<RgbImage> {
    spec.validate()?;
    let first = rows.first().ok_or_else(|| Error::InvalidArgument("nothing to render".into()))?;
    let fs = first.frames.shape().to_vec();
    if fs.len() != 4 || fs[1] != N_MSI_BANDS || fs[0] != days.len() {
        return Err(shape_err!("render frames {:?} with {} day labels", fs, days.len()));
    }
    let (t, h, w) = (fs[0], fs[2], fs[3]);
    for r in rows {
        if r.frames.shape() != fs.as_slice() {
            return Err(shape_err!("row {:?} is {:?}, expected {:?}", r.label, r.frames.shape(), fs));
        }
        if let Some(b) = &r.black {
            if b.shape() != [t, h, w] {
                return Err(shape_err!("row {:?} black mask {:?}", r.label, b.shape()));
            }
        }
    }
    let (cw, ch) = (w as u32 * spec.scale, h as u32 * spec.scale);
    let label_w = rows.iter().map(|r| r.label.chars().count() as u32).max().unwrap_or(0) * GLYPH + 2 * GAP;
    let header = GLYPH + 2 * GAP;
    let width = label_w + t as u32 * (cw + GAP) + GAP;
    let height = header + rows.len() as u32 * (ch + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for (ti, day) in days.iter().enumerate() {
        draw_text(&mut img, label_w + ti as u32 * (cw + GAP), GAP, &day.to_string());
    }
    let hw = h * w;
    for (ri, row) in rows.iter().enumerate() {
        let y0 = header + ri as u32 * (ch + GAP);
        draw_text(&mut img, GAP, y0 + ch.saturating_sub(GLYPH) / 2, &row.label);
        let d = row.frames.data();
        for ti in 0..t {
            let x0 = label_w + ti as u32 * (cw + GAP);
            for p in 0..hw {
                let black = row.black.as_ref().is_some_and(|b| b.data()[ti * hw + p] != 0.0);
                let px = if black {
                    Rgb([0, 0, 0])
                } else {
                    Rgb(spec.bands.map(|b| to_byte(d[(ti * N_MSI_BANDS + b) * hw + p], spec.gain)))
                };
                let (py, pxx) = ((p / w) as u32 * spec.scale, (p % w) as u32 * spec.scale);
                for dy in 0..spec.scale {
                    for dx in 0..spec.scale {
                        img.put_pixel(x0 + pxx + dx, y0 + py + dy, px);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Encodes an 8-bit RGB, non-interlaced PNG.
pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(img.as_raw(), img.width(), img.height(), image::ColorType::Rgb8)?;
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, png_bytes(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, v: f32, black: Option<Tensor>) -> RenderRow {
        RenderRow { label: label.into(), frames: Tensor::full([6, 11, 4, 4], v), black }
    }

    #[test]
    fn default_bands_are_true_color() {
        assert_eq!(RenderSpec::default().bands, [3, 2, 1]);
        assert!(RenderSpec::parse_bands("B4,B3").is_err());
        assert!(RenderSpec::parse_bands("B4,B3,B99").is_err());
    }

    #[test]
    fn grid_geometry_and_black_pixels() {
        let spec = RenderSpec { scale: 1, ..Default::default() };
        let mut cloud = Tensor::zeros([6, 4, 4]);
        cloud.data_mut()[0] = 1.0;
        let rows = [row("Inputs", 0.2, None), row("Targets", 0.2, Some(cloud))];
        let img = render_mosaic(&spec, &rows, &[126, 136, 146, 156, 166, 176]).unwrap();
        let label_w = 7 * GLYPH + 2 * GAP;
        assert_eq!(img.width(), label_w + 6 * (4 + GAP) + GAP);
        assert_eq!(img.height(), GLYPH + 2 * GAP + 2 * (4 + GAP) + GAP);
        let (x0, y1) = (label_w, GLYPH + 2 * GAP + 4 + GAP);
        assert_eq!(img.get_pixel(x0, y1), &Rgb([0, 0, 0]));
        assert_eq!(img.get_pixel(x0 + 1, y1), &Rgb([128, 128, 128]));
    }
}
