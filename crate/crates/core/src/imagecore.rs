//! Raster containers, box annotations and image file I/O.
//!
//! Pixel values are `f64` in `[0, 1]`, stored row-major with channels
//! interleaved. Files are 8-bit: PNG (gray or RGB; alpha is dropped),
//! binary PPM (`P6`) and binary PGM (`P5`) with maxval 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rectangular raster with 1 or 3 channels of unit-interval intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "zero-sized image {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    /// Builds an image from `f(x, y, channel)`; values are clamped to `[0, 1]`.
    pub fn from_fn<F>(width: usize, height: usize, channels: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, usize, usize) -> f64,
    {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Quantises every sample to 8 bits, as written to disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(width, height, channels, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ground-truth box: half-open pixel ranges `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoxAnnotation {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if x_min >= x_max || y_min >= y_max {
            return Err(b.invalid("empty extent"));
        }
        Ok(b)
    }

    /// The box covering a whole `width × height` image.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width,
            y_max: height,
        }
    }

    /// Checks the box is nonempty and lies inside a `width × height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(self.invalid("empty extent"));
        }
        if self.x_max > width || self.y_max > height {
            return Err(self.invalid(&format!("exceeds {width}x{height} image")));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    fn invalid(&self, reason: &str) -> Error {
        Error::InvalidBox {
            bbox: format!(
                "[{}, {}) x [{}, {})",
                self.x_min, self.x_max, self.y_min, self.y_max
            ),
            reason: reason.to_string(),
        }
    }
}

/// Per-pixel binary labels. Used both for ground truth and for thresholded
/// predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

/// Ground-truth masks are plain binary masks.
pub type GroundTruthMask = BinaryMask;

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask data length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn<F: Fn(usize, usize) -> bool>(width: usize, height: usize, f: F) -> Self {
        let data = (0..width * height)
            .map(|i| f(i % width, i / width))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tightest box around the set pixels, or `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BoxAnnotation> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v) {
            let (x, y) = (i % self.width, i / self.width);
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bounds.map(|(x0, y0, x1, y1)| BoxAnnotation {
            x_min: x0,
            y_min: y0,
            x_max: x1 + 1,
            y_max: y1 + 1,
        })
    }

    /// Single-channel image with 1.0 for set pixels.
    pub fn to_image(&self) -> ImageGrid {
        let data = self
            .data
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        ImageGrid::new(self.width, self.height, 1, data).expect("mask dimensions are nonzero")
    }

    /// Binarises an image at 0.5 (first channel).
    pub fn from_image(image: &ImageGrid) -> Self {
        let data = (0..image.len_pixels())
            .map(|i| image.data()[i * image.channels()] >= 0.5)
            .collect();
        Self {
            width: image.width(),
            height: image.height(),
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FileKind {
    Png,
    Ppm,
    Pgm,
}

fn kind_from_extension(path: &Path) -> Option<FileKind> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(FileKind::Png),
        "ppm" => Some(FileKind::Ppm),
        "pgm" => Some(FileKind::Pgm),
        _ => None,
    }
}

/// Loads a PNG, PPM (P6) or PGM (P5) file. The format is sniffed from the
/// file's magic bytes, not its extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes an in-memory PNG/PPM/PGM file.
pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(bytes)
    } else {
        Err(Error::Format("unrecognised file signature".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-dimension image".into()));
    }
    let stride = info.line_size;
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => {
            return Err(Error::Format(format!(
                "png: unsupported colour type {other:?}"
            )))
        }
    };
    let mut samples = Vec::with_capacity(w * h * keep);
    for row in buf.chunks(stride).take(h) {
        for px in row[..w * src_channels].chunks(src_channels) {
            samples.extend_from_slice(&px[..keep]);
        }
    }
    ImageGrid::from_bytes(w, h, keep, &samples)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn pnm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(Error::Format("pnm: truncated header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("pnm: bad header field".into()))
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageGrid> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let width = pnm_token(bytes, &mut pos)?;
    let height = pnm_token(bytes, &mut pos)?;
    let maxval = pnm_token(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero-dimension image".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!(
            "pnm: maxval {maxval} (only 255 supported)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format("pnm: truncated raster".into()))?;
    ImageGrid::from_bytes(width, height, channels, raster)
}

/// Writes `grid` as PNG, PPM or PGM depending on the extension. PPM needs a
/// 3-channel grid and PGM a 1-channel one.
pub fn save_image(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(
        grid,
        kind_from_extension(path).ok_or_else(|| {
            Error::Format(format!(
                "{}: extension must be png, ppm or pgm",
                path.display()
            ))
        })?,
    )?;
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

fn encode_image(grid: &ImageGrid, kind: FileKind) -> Result<Vec<u8>> {
    let samples = grid.to_bytes();
    match kind {
        FileKind::Png => {
            let mut out = Vec::new();
            {
                let mut enc =
                    png::Encoder::new(&mut out, grid.width() as u32, grid.height() as u32);
                enc.set_color(if grid.channels() == 3 {
                    png::ColorType::Rgb
                } else {
                    png::ColorType::Grayscale
                });
                enc.set_depth(png::BitDepth::Eight);
                let mut writer = enc
                    .write_header()
                    .map_err(|e| Error::Format(format!("png: {e}")))?;
                writer
                    .write_image_data(&samples)
                    .map_err(|e| Error::Format(format!("png: {e}")))?;
            }
            Ok(out)
        }
        FileKind::Ppm | FileKind::Pgm => {
            let (magic, channels) = if kind == FileKind::Ppm {
                ("P6", 3)
            } else {
                ("P5", 1)
            };
            if grid.channels() != channels {
                return Err(Error::Dimension(format!(
                    "{magic} needs {channels} channel(s), grid has {}",
                    grid.channels()
                )));
            }
            let mut out =
                format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
            out.extend_from_slice(&samples);
            Ok(out)
        }
    }
}

/// BT.709 luma of a 3-channel grid.
pub fn grayscale(grid: &ImageGrid) -> Result<ImageGrid> {
    if grid.channels() != 3 {
        return Err(Error::Dimension(format!(
            "grayscale needs 3 channels, got {}",
            grid.channels()
        )));
    }
    let data = grid
        .data()
        .chunks(3)
        .map(|p| (0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]).clamp(0.0, 1.0))
        .collect();
    ImageGrid::new(grid.width(), grid.height(), 1, data)
}

/// Reads a JSON list of `{"x_min","y_min","x_max","y_max"}` objects.
pub fn load_boxes(path: impl AsRef<Path>) -> Result<Vec<BoxAnnotation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let boxes: Vec<BoxAnnotation> = serde_json::from_reader(BufReader::new(file))?;
    for b in &boxes {
        BoxAnnotation::new(b.x_min, b.y_min, b.x_max, b.y_max)?;
    }
    Ok(boxes)
}

pub fn save_boxes(boxes: &[BoxAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(boxes)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
