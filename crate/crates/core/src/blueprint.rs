//! Visual blueprints: layouts rendered as class-coloured rectangles.
//!
//! Classes get evenly spaced HSV hues at full saturation and value. Each
//! further instance of a class is drawn with its value lowered by a fixed
//! step (clamped at a floor). Boxes are painted largest first, each one
//! alpha-composited over what is already there, so larger background boxes
//! show through smaller ones and no box is hidden completely.
//!
//! All colour math rounds half up and compositing runs in integers, so a
//! canvas is a pure function of (layout, palette, fill alpha) on every
//! platform.

use std::collections::HashMap;
use std::io::{BufReader, Cursor};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::BBox;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::layout::{Layout, LayoutEntry, Provenance};

pub const DEFAULT_FILL_ALPHA: f64 = 0.8;
pub const DEFAULT_VALUE_STEP: f64 = 0.1;
pub const DEFAULT_VALUE_MIN: f64 = 0.5;

/// RGB8 image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
    pixels: Vec<u8>,
}

impl Canvas {
    /// Black canvas.
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "canvas must be non-empty, got {width}x{height}"
            )));
        }
        Ok(Canvas {
            width,
            height,
            pixels: vec![0; width as usize * height as usize * 3],
        })
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let c = Canvas::new(width, height)?;
        if pixels.len() != c.pixels.len() {
            return Err(Error::InvalidArgument(format!(
                "{}x{} canvas needs {} bytes, got {}",
                width,
                height,
                c.pixels.len(),
                pixels.len()
            )));
        }
        Ok(Canvas { pixels, ..c })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

#[inline]
fn round_half_up(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Standard HSV to RGB, hue in degrees, `s` and `v` in `[0, 1]`.
pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [u8; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h.floor() as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        round_half_up((r + m) * 255.0),
        round_half_up((g + m) * 255.0),
        round_half_up((b + m) * 255.0),
    ]
}

/// Hue in degrees of an RGB8 colour; 0 for greys.
pub fn rgb_hue(rgb: [u8; 3]) -> f64 {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    60.0 * h
}

pub fn circular_hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub num_classes: usize,
    /// Degrees between consecutive class hues.
    pub hue_step: f64,
    pub saturation: f64,
    pub value: f64,
    /// Value decrement per additional instance of a class.
    pub value_step: f64,
    pub value_min: f64,
}

pub fn build_palette(num_classes: usize) -> Result<Palette> {
    Palette::new(num_classes, DEFAULT_VALUE_STEP, DEFAULT_VALUE_MIN)
}

impl Palette {
    pub fn new(num_classes: usize, value_step: f64, value_min: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("palette needs at least one class".into()));
        }
        if !(value_step.is_finite() && value_step >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad value step {value_step}")));
        }
        if !(0.0..=1.0).contains(&value_min) {
            return Err(Error::InvalidArgument(format!("bad value floor {value_min}")));
        }
        Ok(Palette {
            num_classes,
            hue_step: 360.0 / num_classes as f64,
            saturation: 1.0,
            value: 1.0,
            value_step,
            value_min,
        })
    }

    pub fn hue(&self, class_id: usize) -> f64 {
        (class_id as f64 * self.hue_step) % 360.0
    }

    pub fn class_color(&self, class_id: usize) -> [u8; 3] {
        self.instance_color(class_id, 0)
    }

    pub fn instance_value(&self, k: usize) -> f64 {
        (self.value - k as f64 * self.value_step).max(self.value_min)
    }

    /// Colour of the `k`-th (0-based) instance of a class.
    pub fn instance_color(&self, class_id: usize, k: usize) -> [u8; 3] {
        hsv_to_rgb(self.hue(class_id), self.saturation, self.instance_value(k))
    }

    /// Instance index after which the value floor is reached.
    pub fn max_distinct_instance(&self) -> usize {
        if self.value_step <= 0.0 {
            return 0;
        }
        let mut k = 0;
        while self.instance_value(k) > self.value_min {
            k += 1;
        }
        k
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// Compositing weight quantized to 1/10000.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FillAlpha(u32);

const ALPHA_DENOM: u32 = 10_000;

impl FillAlpha {
    pub const OPAQUE: FillAlpha = FillAlpha(ALPHA_DENOM);

    pub fn new(alpha: f64) -> Result<Self> {
        let q = (alpha * f64::from(ALPHA_DENOM) + 0.5).floor();
        if !(alpha > 0.0 && alpha <= 1.0) || q < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "fill alpha must lie in (0, 1], got {alpha}"
            )));
        }
        Ok(FillAlpha(q as u32))
    }

    pub fn get(self) -> f64 {
        f64::from(self.0) / f64::from(ALPHA_DENOM)
    }

    /// `round(alpha * color + (1 - alpha) * under)` with ties rounded up.
    #[inline]
    pub fn blend(self, color: u8, under: u8) -> u8 {
        let v = self.0 * u32::from(color) + (ALPHA_DENOM - self.0) * u32::from(under) + ALPHA_DENOM / 2;
        (v / ALPHA_DENOM) as u8
    }
}

impl Default for FillAlpha {
    fn default() -> Self {
        FillAlpha::new(DEFAULT_FILL_ALPHA).unwrap()
    }
}

impl TryFrom<f64> for FillAlpha {
    type Error = Error;

    fn try_from(a: f64) -> Result<Self> {
        FillAlpha::new(a)
    }
}

impl From<FillAlpha> for f64 {
    fn from(a: FillAlpha) -> f64 {
        a.get()
    }
}

/// Pixel span `[start, end)` whose centers fall inside `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, limit: u32) -> (u32, u32) {
    let to_px = |v: f64| (v - 0.5).ceil().clamp(0.0, f64::from(limit)) as u32;
    (to_px(lo), to_px(hi))
}

/// Per-entry instance index within its class, in entry order.
pub fn instance_indices(entries: &[LayoutEntry]) -> Vec<usize> {
    let mut seen: HashMap<usize, usize> = HashMap::new();
    entries
        .iter()
        .map(|e| {
            let k = seen.entry(e.class_id).or_insert(0);
            *k += 1;
            *k - 1
        })
        .collect()
}

/// Entry indices in paint order: area descending, ties in entry order.
pub fn paint_order(entries: &[LayoutEntry]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[b]
            .bbox
            .area()
            .partial_cmp(&entries[a].bbox.area())
            .unwrap()
    });
    order
}

pub fn render_blueprint(layout: &Layout, palette: &Palette, fill_alpha: FillAlpha) -> Result<Canvas> {
    let mut canvas = Canvas::new(layout.width, layout.height)?;
    render_into(&mut canvas, layout, palette, fill_alpha)?;
    Ok(canvas)
}

/// Paints `layout` over the existing content of `canvas`.
pub fn render_into(
    canvas: &mut Canvas,
    layout: &Layout,
    palette: &Palette,
    fill_alpha: FillAlpha,
) -> Result<()> {
    if (canvas.width, canvas.height) != (layout.width, layout.height) {
        return Err(Error::InvalidArgument(format!(
            "layout is {}x{} but canvas is {}x{}",
            layout.width, layout.height, canvas.width, canvas.height
        )));
    }
    layout.validate(palette.num_classes)?;
    let ks = instance_indices(&layout.entries);
    for idx in paint_order(&layout.entries) {
        let entry = &layout.entries[idx];
        let color = palette.instance_color(entry.class_id, ks[idx]);
        let (x0, x1) = pixel_span(entry.bbox.x1, entry.bbox.x2, canvas.width);
        let (y0, y1) = pixel_span(entry.bbox.y1, entry.bbox.y2, canvas.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let under = canvas.pixel(x, y);
                canvas.set_pixel(
                    x,
                    y,
                    [
                        fill_alpha.blend(color[0], under[0]),
                        fill_alpha.blend(color[1], under[1]),
                        fill_alpha.blend(color[2], under[2]),
                    ],
                );
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedBox {
    pub class_id: usize,
    pub instance_index: usize,
    pub bbox: BBox,
}

/// Recovers boxes from an opaque render of pairwise-disjoint boxes.
///
/// Every non-black pixel must carry an exact palette colour and every
/// same-coloured 4-connected region must be a filled rectangle; anything else
/// is reported as unsupported. Output is sorted by `(class, instance_index)`,
/// then position.
pub fn decode_blueprint(
    canvas: &Canvas,
    palette: &Palette,
    expected_boxes: Option<usize>,
) -> Result<Vec<DecodedBox>> {
    let mut lookup: HashMap<[u8; 3], (usize, usize)> = HashMap::new();
    for c in 0..palette.num_classes {
        for k in 0..=palette.max_distinct_instance() {
            lookup.entry(palette.instance_color(c, k)).or_insert((c, k));
        }
    }

    let (w, h) = (canvas.width as usize, canvas.height as usize);
    let mut visited = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let (sx, sy) = ((start % w) as u32, (start / w) as u32);
        let color = canvas.pixel(sx, sy);
        if visited[start] || color == [0, 0, 0] {
            continue;
        }
        let &(class_id, instance_index) = lookup.get(&color).ok_or_else(|| {
            Error::UnsupportedInput(format!("pixel ({sx}, {sy}) = {color:?} is not a palette colour"))
        })?;

        let (mut min_x, mut min_y, mut max_x, mut max_y) = (sx, sy, sx, sy);
        let mut count = 0usize;
        visited[start] = true;
        stack.push((sx, sy));
        while let Some((x, y)) = stack.pop() {
            count += 1;
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            let neighbours = [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ];
            for (nx, ny) in neighbours {
                if nx >= canvas.width || ny >= canvas.height {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if !visited[n] && canvas.pixel(nx, ny) == color {
                    visited[n] = true;
                    stack.push((nx, ny));
                }
            }
        }
        let rect = (max_x - min_x + 1) as usize * (max_y - min_y + 1) as usize;
        if rect != count {
            return Err(Error::UnsupportedInput(format!(
                "region of {color:?} at ({min_x}, {min_y}) is not a rectangle; overlapping boxes cannot be decoded"
            )));
        }
        out.push(DecodedBox {
            class_id,
            instance_index,
            bbox: BBox {
                x1: f64::from(min_x),
                y1: f64::from(min_y),
                x2: f64::from(max_x + 1),
                y2: f64::from(max_y + 1),
            },
        });
    }
    if let Some(n) = expected_boxes {
        if n != out.len() {
            return Err(Error::UnsupportedInput(format!(
                "expected {n} boxes, found {}",
                out.len()
            )));
        }
    }
    out.sort_by(|a, b| {
        (a.class_id, a.instance_index)
            .cmp(&(b.class_id, b.instance_index))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
    });
    Ok(out)
}

/// Layout assembled from decoded boxes.
pub fn decoded_layout(image_id: u64, canvas: &Canvas, boxes: &[DecodedBox]) -> Layout {
    Layout {
        image_id,
        width: canvas.width,
        height: canvas.height,
        entries: boxes
            .iter()
            .map(|b| LayoutEntry {
                class_id: b.class_id,
                bbox: b.bbox,
                provenance: Provenance::Seed,
                source_instance_id: None,
            })
            .collect(),
    }
}

/// Lossless RGB8 PNG with fixed encoder settings.
pub fn encode_png(canvas: &Canvas) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, canvas.width, canvas.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        let png_err = |e: png::EncodingError| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(canvas.pixels()).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<Canvas> {
    let png_err = |e: png::DecodingError| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    };
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedInput("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedInput(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Canvas::from_pixels(info.width, info.height, buf)
}

pub fn write_png(canvas: &Canvas, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(canvas).map_err(|e| with_path(e, path))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Canvas> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Image { message, .. } => Error::Image {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    }
}
