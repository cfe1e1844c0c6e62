//! 8-bit RGB rasters and the per-image adjustments a presenter can apply:
//! levels (brightness/contrast), crop, lossless quarter turns and bilinear
//! resampling.
//!
//! Pixel coordinates are integer-centered: pixel `(i, j)` is sampled at the
//! continuous point `(i, j)`. All arithmetic is done in `f64` and rounded
//! half-up once at the end, so results are reproducible bit for bit.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One pixel, `[r, g, b]`.
pub type Rgb = [u8; 3];

pub const BLACK: Rgb = [0, 0, 0];
pub const WHITE: Rgb = [255, 255, 255];

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("raster dimensions must be at least 1x1, got {width}x{height}")]
    ZeroSize { width: u32, height: u32 },
    #[error("pixel buffer holds {got} pixels, expected {expected}")]
    PixelCount { expected: usize, got: usize },
    #[error("rect {rect:?} exceeds {width}x{height} image")]
    OutOfBounds { rect: Rect, width: u32, height: u32 },
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("invalid levels: contrast {0} must be finite and >= 0")]
    InvalidLevels(f64),
    #[error("decode error: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A row-major grid of RGB pixels, at least 1x1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, fill: Rgb) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            pixels: vec![fill; width as usize * height as usize],
        })
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RasterError::PixelCount {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds a raster by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> Rgb,
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, px: Rgb) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = px;
    }

    pub fn full_rect(&self) -> Rect {
        Rect {
            x: 0,
            y: 0,
            w: self.width,
            h: self.height,
        }
    }

    /// Applies `f` to every channel value independently.
    pub fn map_channels(&self, f: impl Fn(u8) -> u8) -> Raster {
        let pixels = self
            .pixels
            .iter()
            .map(|p| [f(p[0]), f(p[1]), f(p[2])])
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Smallest and largest channel value over the whole image.
    pub fn channel_range(&self) -> (u8, u8) {
        self.pixels
            .iter()
            .flatten()
            .fold((u8::MAX, u8::MIN), |(lo, hi), &c| (lo.min(c), hi.max(c)))
    }

    // --- I/O ---

    /// Writes binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<(), RasterError> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(self.pixels.as_flattened())?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(input: R) -> Result<Self, RasterError> {
        let mut input = BufReader::new(input);
        let magic = ppm_token(&mut input)?;
        if magic != "P6" {
            return Err(RasterError::Decode(format!("not a P6 PPM (magic {magic:?})")));
        }
        let width = ppm_number(&mut input)?;
        let height = ppm_number(&mut input)?;
        let maxval = ppm_number(&mut input)?;
        if maxval != 255 {
            return Err(RasterError::Decode(format!("unsupported PPM maxval {maxval}")));
        }
        check_dims(width, height)?;
        // exactly one whitespace byte after maxval was consumed by ppm_token
        let mut data = vec![0u8; width as usize * height as usize * 3];
        input
            .read_exact(&mut data)
            .map_err(|e| RasterError::Decode(format!("truncated PPM pixel data: {e}")))?;
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Raster::from_pixels(width, height, pixels)
    }

    /// Writes an 8-bit RGB PNG.
    pub fn write_png<W: Write>(&self, out: W) -> Result<(), RasterError> {
        let mut encoder = png::Encoder::new(out, self.width, self.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        writer
            .write_image_data(self.pixels.as_flattened())
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        Ok(())
    }

    /// Reads an 8-bit PNG. Gray and alpha variants are converted to RGB
    /// (alpha is dropped).
    pub fn read_png<R: BufRead + std::io::Seek>(input: R) -> Result<Self, RasterError> {
        let mut decoder = png::Decoder::new(input);
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| RasterError::Decode("PNG too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        let data = &buf[..info.buffer_size()];
        let pixels: Vec<Rgb> = match info.color_type {
            png::ColorType::Rgb => data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Rgba => data.chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Grayscale => data.iter().map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => data.chunks_exact(2).map(|c| [c[0], c[0], c[0]]).collect(),
            png::ColorType::Indexed => {
                return Err(RasterError::Decode("indexed PNG was not expanded".into()))
            }
        };
        Raster::from_pixels(info.width, info.height, pixels)
    }

    /// Loads a `.ppm` or `.png` file, chosen by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        match ImageFormat::from_path(path) {
            ImageFormat::Ppm => Raster::read_ppm(file),
            ImageFormat::Png => Raster::read_png(BufReader::new(file)),
        }
    }

    /// Saves as `.ppm` or `.png`, chosen by extension (PNG when unknown).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        match ImageFormat::from_path(path) {
            ImageFormat::Ppm => self.write_ppm(&mut out)?,
            ImageFormat::Png => self.write_png(&mut out)?,
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ppm") => ImageFormat::Ppm,
            _ => ImageFormat::Png,
        }
    }
}

fn check_dims(width: u32, height: u32) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::ZeroSize { width, height });
    }
    Ok(())
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn ppm_token<R: BufRead>(input: &mut R) -> Result<String, RasterError> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if input.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(RasterError::Decode("unexpected end of PPM header".into()));
            }
            return Ok(token);
        }
        let c = byte[0];
        if c == b'#' && token.is_empty() {
            let mut skip = Vec::new();
            input.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c as char);
    }
}

fn ppm_number<R: BufRead>(input: &mut R) -> Result<u32, RasterError> {
    let tok = ppm_token(input)?;
    tok.parse()
        .map_err(|_| RasterError::Decode(format!("bad PPM header number {tok:?}")))
}

/// A pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

/// Contrast factor and brightness offset. `(1, 0)` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Levels {
    pub contrast: f64,
    pub brightness: f64,
}

impl Default for Levels {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Levels {
    pub const IDENTITY: Levels = Levels {
        contrast: 1.0,
        brightness: 0.0,
    };

    pub fn new(contrast: f64, brightness: f64) -> Result<Self, RasterError> {
        let lv = Levels {
            contrast,
            brightness,
        };
        lv.validate()?;
        Ok(lv)
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if !(self.contrast.is_finite() && self.contrast >= 0.0) || !self.brightness.is_finite() {
            return Err(RasterError::InvalidLevels(self.contrast));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.contrast == 1.0 && self.brightness == 0.0
    }

    /// Maps one channel value, pivoting contrast about mid-gray.
    #[inline]
    pub fn apply(&self, p: u8) -> u8 {
        round_channel(self.contrast * (f64::from(p) - 128.0) + 128.0 + self.brightness)
    }
}

/// Rounds half-up and clamps to `[0, 255]`.
#[inline]
pub fn round_channel(v: f64) -> u8 {
    // float-to-int casts truncate and saturate; NaN becomes 0
    (v + 0.5) as u8
}

pub fn adjust_levels(img: &Raster, lv: Levels) -> Raster {
    if lv.is_identity() {
        return img.clone();
    }
    let mut lut = [0u8; 256];
    for (p, out) in lut.iter_mut().enumerate() {
        *out = lv.apply(p as u8);
    }
    img.map_channels(|c| lut[c as usize])
}

pub fn crop(img: &Raster, r: Rect) -> Result<Raster, RasterError> {
    if !r.fits(img.width, img.height) {
        return Err(RasterError::OutOfBounds {
            rect: r,
            width: img.width,
            height: img.height,
        });
    }
    let mut pixels = Vec::with_capacity(r.w as usize * r.h as usize);
    let w = img.width as usize;
    for y in r.y..r.y + r.h {
        let row = y as usize * w;
        pixels.extend_from_slice(&img.pixels[row + r.x as usize..row + (r.x + r.w) as usize]);
    }
    Raster::from_pixels(r.w, r.h, pixels)
}

/// Lossless clockwise rotation by `turns * 90` degrees.
pub fn rotate_quarter(img: &Raster, turns: i32) -> Raster {
    let (w, h) = (img.width, img.height);
    match turns.rem_euclid(4) {
        0 => img.clone(),
        // (x, y) -> (h-1-y, x); destination is h wide
        1 => Raster::from_fn(h, w, |dx, dy| img.get(dy, h - 1 - dx)).expect("non-empty"),
        // (x, y) -> (w-1-x, h-1-y)
        2 => Raster::from_fn(w, h, |dx, dy| img.get(w - 1 - dx, h - 1 - dy)).expect("non-empty"),
        // (x, y) -> (y, w-1-x)
        _ => Raster::from_fn(h, w, |dx, dy| img.get(w - 1 - dy, dx)).expect("non-empty"),
    }
}

/// Unrounded bilinear sample at continuous position `(sx, sy)`, with the
/// position clamped to the pixel-center extent of the image.
#[inline]
pub(crate) fn sample_bilinear(img: &Raster, sx: f64, sy: f64) -> [f64; 3] {
    let max_x = f64::from(img.width - 1);
    let max_y = f64::from(img.height - 1);
    let sx = sx.clamp(0.0, max_x);
    let sy = sy.clamp(0.0, max_y);
    // non-negative after the clamp, so truncation is floor
    let (x0, y0) = (sx as usize, sy as usize);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let w = img.width as usize;
    let dx = usize::from(x0 + 1 < w);
    let dy = if (y0 as u32) + 1 < img.height { w } else { 0 };
    let i = y0 * w + x0;
    let (p00, p10) = (img.pixels[i], img.pixels[i + dx]);
    let (p01, p11) = (img.pixels[i + dy], img.pixels[i + dy + dx]);
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = w00 * f64::from(p00[c])
            + w10 * f64::from(p10[c])
            + w01 * f64::from(p01[c])
            + w11 * f64::from(p11[c]);
    }
    out
}

#[inline]
pub(crate) fn sample_bilinear_rounded(img: &Raster, sx: f64, sy: f64) -> Rgb {
    let v = sample_bilinear(img, sx, sy);
    [round_channel(v[0]), round_channel(v[1]), round_channel(v[2])]
}

/// Resizes with the half-pixel-center convention:
/// `src = (dst + 0.5) * (in / out) - 0.5`, clamped at the borders.
pub fn resample_bilinear(img: &Raster, out_w: u32, out_h: u32) -> Result<Raster, RasterError> {
    check_dims(out_w, out_h)?;
    if (out_w, out_h) == img.dims() {
        return Ok(img.clone());
    }
    // (2*dst + 1) * in / (2 * out) keeps the division last so exact ratios
    // like 1.5 * 2/3 stay exact.
    let map = |dst: u32, input: u32, output: u32| -> f64 {
        (f64::from(2 * dst + 1) * f64::from(input)) / f64::from(2 * output) - 0.5
    };
    let xs: Vec<f64> = (0..out_w).map(|x| map(x, img.width, out_w)).collect();
    let ys: Vec<f64> = (0..out_h).map(|y| map(y, img.height, out_h)).collect();
    Raster::from_fn(out_w, out_h, |x, y| {
        sample_bilinear_rounded(img, xs[x as usize], ys[y as usize])
    })
}
