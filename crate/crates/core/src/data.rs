//! Images, augmentation, dataset manifests, batching and synthetic corpora.
//!
//! Images are RGB, channel-major (`[3, h, w]`) with values in `[0, 1]`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::dim(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data })
    }

    /// Builds an image from `f(channel, y, x)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image must be non-empty");
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(clamp01(f(c, y, x)));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_mean(&self, c: usize) -> f32 {
        let plane = self.height * self.width;
        self.data[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![CHANNELS, self.height, self.width], self.data.clone())
            .expect("image invariants hold")
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(plane * CHANNELS);
        for i in 0..plane {
            for c in 0..CHANNELS {
                out.push((self.data[c * plane + i] * 255.0).round() as u8);
            }
        }
        out
    }

    fn from_interleaved(height: usize, width: usize, samples: &[u8], per_pixel: usize) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; plane * CHANNELS];
        for i in 0..plane {
            let px = &samples[i * per_pixel..(i + 1) * per_pixel];
            for c in 0..CHANNELS {
                // grayscale layouts replicate the single luminance sample
                let s = if per_pixel >= 3 { px[c] } else { px[0] };
                data[c * plane + i] = f32::from(s) / 255.0;
            }
        }
        Image { height, width, data }
    }
}

fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Stacks equally sized images into a `[n, 3, h, w]` batch.
pub fn stack(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("cannot stack an empty image list".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::dim(format!(
                "cannot stack {}x{} with {h}x{w}",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}

// ---------------------------------------------------------------------------
// decoding

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decodes a PNG or binary PPM (`P6`) raster.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        let head: Vec<u8> = bytes.iter().take(4).copied().collect();
        Err(Error::UnsupportedFormat(format!(
            "unrecognized raster signature {head:02x?}"
        )))
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { offset, reason } => Error::Decode {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decode_err = |e: png::DecodingError| Error::Decode {
        offset: None,
        reason: format!("png: {e}"),
    };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let per_pixel = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("png palette was not expanded".into()))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err(Error::Decode {
            offset: None,
            reason: "png has zero extent".into(),
        });
    }
    let stride = info.line_size;
    let mut packed = Vec::with_capacity(w * h * per_pixel);
    for row in buf.chunks(stride).take(h) {
        packed.extend_from_slice(&row[..w * per_pixel]);
    }
    Ok(Image::from_interleaved(h, w, &packed, per_pixel))
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmCursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Decode {
            offset: Some(self.pos),
            reason: reason.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode {
                offset: Some(start),
                reason: format!("{what} out of range"),
            })
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = PpmCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err(format!("zero extent {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.err(format!("maxval {maxval} not in 1..=65535")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected one whitespace byte before raster data")),
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(CHANNELS * sample_bytes))
        .ok_or_else(|| cur.err("raster size overflows"))?;
    let available = bytes.len() - cur.pos;
    if available < n {
        return Err(Error::Decode {
            offset: Some(bytes.len()),
            reason: format!("raster truncated: need {n} bytes, have {available}"),
        });
    }
    let raster = &bytes[cur.pos..cur.pos + n];
    let plane = width * height;
    let scale = maxval as f32;
    let mut data = vec![0.0; plane * CHANNELS];
    for i in 0..plane {
        for c in 0..CHANNELS {
            let k = i * CHANNELS + c;
            let s = if sample_bytes == 1 {
                u16::from(raster[k])
            } else {
                u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]])
            };
            if usize::from(s) > maxval {
                return Err(Error::Decode {
                    offset: Some(cur.pos + k * sample_bytes),
                    reason: format!("sample {s} exceeds maxval {maxval}"),
                });
            }
            data[c * plane + i] = f32::from(s) / scale;
        }
    }
    Ok(Image { height, width, data })
}

/// 8-bit binary PPM. Values are rounded to the nearest of 256 levels.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

/// 8-bit RGB PNG.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let encode_err = |e: png::EncodingError| Error::Validation(format!("png encode: {e}"));
        let mut writer = enc.write_header().map_err(encode_err)?;
        writer.write_image_data(&img.to_rgb8()).map_err(encode_err)?;
    }
    Ok(out)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_png(img)?).map_err(|e| Error::storage(path, e))
}

// ---------------------------------------------------------------------------
// geometry

/// Bilinear resize with corner-aligned sampling: output corners land exactly
/// on input corners.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
    if (out_h, out_w) == (img.height, img.width) {
        return img.clone();
    }
    let ratio = |n_in: usize, n_out: usize| {
        if n_out == 1 {
            0.0
        } else {
            (n_in - 1) as f32 / (n_out - 1) as f32
        }
    };
    let (ry, rx) = (ratio(img.height, out_h), ratio(img.width, out_w));
    Image::from_fn(out_h, out_w, |c, y, x| {
        sample_bilinear(img, c, y as f32 * ry, x as f32 * rx)
    })
}

/// Bilinear lookup where taps outside the source contribute zero.
fn sample_bilinear(img: &Image, c: usize, sy: f32, sx: f32) -> f32 {
    let (h, w) = (img.height as isize, img.width as isize);
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let tap = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            img.get(c, y as usize, x as usize)
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            v += wy * wx * tap(y0 + dy, x0 + dx);
        }
    }
    v
}

/// Resamples `img` in place of its own frame: output pixel `(y, x)` reads the
/// source at `map(y, x)`.
fn warp(img: &Image, map: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    Image::from_fn(img.height, img.width, |c, y, x| {
        let (sy, sx) = map(y as f32, x as f32);
        sample_bilinear(img, c, sy, sx)
    })
}

// ---------------------------------------------------------------------------
// augmentation

/// A single, fully parameterized transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Counter-clockwise rotation about the image centre.
    Rotate { degrees: f32 },
    /// Shift right by `dx` and down by `dy` pixels.
    Translate { dx: f32, dy: f32 },
    /// Zoom about the centre; `factor > 1` enlarges.
    Scale { factor: f32 },
    Brightness { delta: f32 },
    GaussianNoise { sigma: f32 },
}

pub const MAX_ROTATE_DEGREES: f32 = 180.0;
pub const MAX_SCALE_FACTOR: f32 = 10.0;
pub const MAX_BRIGHTNESS_DELTA: f32 = 1.0;
pub const MAX_NOISE_SIGMA: f32 = 1.0;

impl AugmentOp {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let bad = |what: String| Err(Error::Validation(what));
        match *self {
            AugmentOp::Rotate { degrees } if !(degrees.abs() <= MAX_ROTATE_DEGREES) => {
                bad(format!("rotate({degrees}) outside ±{MAX_ROTATE_DEGREES}"))
            }
            AugmentOp::Translate { dx, dy }
                if !(dx.abs() < width as f32 && dy.abs() < height as f32) =>
            {
                bad(format!("translate({dx}, {dy}) leaves a {height}x{width} frame"))
            }
            AugmentOp::Scale { factor } if !(factor > 0.0 && factor <= MAX_SCALE_FACTOR) => {
                bad(format!("scale({factor}) not in (0, {MAX_SCALE_FACTOR}]"))
            }
            AugmentOp::Brightness { delta } if !(delta.abs() <= MAX_BRIGHTNESS_DELTA) => {
                bad(format!("brightness({delta}) outside ±{MAX_BRIGHTNESS_DELTA}"))
            }
            AugmentOp::GaussianNoise { sigma } if !(0.0..=MAX_NOISE_SIGMA).contains(&sigma) => {
                bad(format!("gaussian_noise({sigma}) not in [0, {MAX_NOISE_SIGMA}]"))
            }
            _ => Ok(()),
        }
    }

    fn is_identity(&self) -> bool {
        match *self {
            AugmentOp::Rotate { degrees } => degrees == 0.0,
            AugmentOp::Translate { dx, dy } => dx == 0.0 && dy == 0.0,
            AugmentOp::Scale { factor } => factor == 1.0,
            AugmentOp::Brightness { delta } => delta == 0.0,
            AugmentOp::GaussianNoise { sigma } => sigma == 0.0,
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentOp::Rotate { degrees } => write!(f, "rotate({degrees})"),
            AugmentOp::Translate { dx, dy } => write!(f, "translate({dx}, {dy})"),
            AugmentOp::Scale { factor } => write!(f, "scale({factor})"),
            AugmentOp::Brightness { delta } => write!(f, "brightness({delta})"),
            AugmentOp::GaussianNoise { sigma } => write!(f, "gaussian_noise({sigma})"),
        }
    }
}

/// Applies one transform. `seed` only matters for noise.
pub fn apply_augment(img: &Image, op: AugmentOp, seed: u64) -> Result<Image> {
    op.validate(img.height, img.width)?;
    if op.is_identity() {
        return Ok(img.clone());
    }
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    let out = match op {
        AugmentOp::Rotate { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            // y grows downward: the inverse map sends the top edge to the right
            warp(img, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + c * dy + s * dx, cx - s * dy + c * dx)
            })
        }
        AugmentOp::Translate { dx, dy } => warp(img, |y, x| (y - dy, x - dx)),
        AugmentOp::Scale { factor } => {
            warp(img, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
        }
        AugmentOp::Brightness { delta } => Image {
            data: img.data.iter().map(|v| clamp01(v + delta)).collect(),
            ..img.clone()
        },
        AugmentOp::GaussianNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f32, sigma).expect("sigma validated");
            Image {
                data: img
                    .data
                    .iter()
                    .map(|v| clamp01(v + normal.sample(&mut rng)))
                    .collect(),
                ..img.clone()
            }
        }
    };
    Ok(out)
}

/// A sampling range for one transform kind. Parameters are drawn uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentRange {
    Rotate { max_degrees: f32 },
    /// Fraction of width / height.
    Translate { max_fraction: f32 },
    Scale { min: f32, max: f32 },
    Brightness { max_delta: f32 },
    GaussianNoise { max_sigma: f32 },
}

impl AugmentRange {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugmentRange::Rotate { max_degrees } => (0.0..=MAX_ROTATE_DEGREES).contains(&max_degrees),
            AugmentRange::Translate { max_fraction } => (0.0..1.0).contains(&max_fraction),
            AugmentRange::Scale { min, max } => min > 0.0 && min <= max && max <= MAX_SCALE_FACTOR,
            AugmentRange::Brightness { max_delta } => {
                (0.0..=MAX_BRIGHTNESS_DELTA).contains(&max_delta)
            }
            AugmentRange::GaussianNoise { max_sigma } => (0.0..=MAX_NOISE_SIGMA).contains(&max_sigma),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("augmentation range out of bounds: {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, height: usize, width: usize) -> AugmentOp {
        let sym = |rng: &mut ChaCha8Rng, m: f32| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        match *self {
            AugmentRange::Rotate { max_degrees } => AugmentOp::Rotate {
                degrees: sym(rng, max_degrees),
            },
            AugmentRange::Translate { max_fraction } => AugmentOp::Translate {
                dx: sym(rng, max_fraction * width as f32),
                dy: sym(rng, max_fraction * height as f32),
            },
            AugmentRange::Scale { min, max } => AugmentOp::Scale {
                factor: if min < max { rng.gen_range(min..=max) } else { min },
            },
            AugmentRange::Brightness { max_delta } => AugmentOp::Brightness {
                delta: sym(rng, max_delta),
            },
            AugmentRange::GaussianNoise { max_sigma } => AugmentOp::GaussianNoise {
                sigma: if max_sigma > 0.0 { rng.gen_range(0.0..=max_sigma) } else { 0.0 },
            },
        }
    }
}

/// Ordered list of sampled transforms applied to every training image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentPlan {
    pub ranges: Vec<AugmentRange>,
}

impl AugmentPlan {
    /// All five transforms at moderate strength.
    pub fn standard() -> Self {
        AugmentPlan {
            ranges: vec![
                AugmentRange::Rotate { max_degrees: 20.0 },
                AugmentRange::Translate { max_fraction: 0.1 },
                AugmentRange::Scale { min: 0.9, max: 1.1 },
                AugmentRange::Brightness { max_delta: 0.2 },
                AugmentRange::GaussianNoise { max_sigma: 0.05 },
            ],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.ranges.iter().try_for_each(AugmentRange::validate)
    }

    /// Draws concrete ops for one image.
    pub fn sample(&self, height: usize, width: usize, seed: u64) -> Vec<AugmentOp> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.ranges.iter().map(|r| r.sample(&mut rng, height, width)).collect()
    }

    pub fn apply(&self, img: &Image, seed: u64) -> Result<Image> {
        let mut out = img.clone();
        for (i, op) in self.sample(img.height, img.width, seed).into_iter().enumerate() {
            out = apply_augment(&out, op, mix(seed, i as u64 + 1))?;
        }
        Ok(out)
    }
}

/// Parses `standard` or a comma list such as
/// `rotate=20,translate=0.1,scale=0.9:1.1,brightness=0.2,noise=0.05`.
impl FromStr for AugmentPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "standard" {
            return Ok(AugmentPlan::standard());
        }
        if s.is_empty() || s == "none" {
            return Ok(AugmentPlan::default());
        }
        let num = |v: &str, item: &str| -> Result<f32> {
            v.trim()
                .parse::<f32>()
                .map_err(|_| Error::Config(format!("bad number in augmentation item '{item}'")))
        };
        let mut ranges = Vec::new();
        for item in s.split(',') {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("augmentation item '{item}' lacks '='")))?;
            let range = match key.trim() {
                "rotate" => AugmentRange::Rotate {
                    max_degrees: num(value, item)?,
                },
                "translate" => AugmentRange::Translate {
                    max_fraction: num(value, item)?,
                },
                "scale" => {
                    let (lo, hi) = value.split_once(':').unwrap_or((value, value));
                    AugmentRange::Scale {
                        min: num(lo, item)?,
                        max: num(hi, item)?,
                    }
                }
                "brightness" => AugmentRange::Brightness {
                    max_delta: num(value, item)?,
                },
                "noise" | "gaussian_noise" => AugmentRange::GaussianNoise {
                    max_sigma: num(value, item)?,
                },
                other => {
                    return Err(Error::Config(format!(
                        "unknown augmentation '{other}' (expected rotate, translate, scale, brightness, noise)"
                    )))
                }
            };
            ranges.push(range);
        }
        let plan = AugmentPlan { ranges };
        plan.validate()?;
        Ok(plan)
    }
}

/// SplitMix64 finalizer over a pair; used to derive per-record seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonFire,
    Fire,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Fire, Label::NonFire];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Fire => "fire",
            Label::NonFire => "non_fire",
        }
    }

    /// 1 for fire, 0 otherwise.
    pub fn target(&self) -> u8 {
        u8::from(*self == Label::Fire)
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fire" => Ok(Label::Fire),
            "non_fire" => Ok(Label::NonFire),
            other => Err(Error::Validation(format!(
                "unknown label '{other}' (expected fire or non_fire)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<Record>,
    counts: BTreeMap<(Split, Label), usize>,
}

/// Record counts of the reference wildfire dataset.
pub const PAPER_SPLIT_COUNTS: [(Split, Label, usize); 6] = [
    (Split::Train, Label::Fire, 2080),
    (Split::Train, Label::NonFire, 1549),
    (Split::Val, Label::Fire, 215),
    (Split::Val, Label::NonFire, 170),
    (Split::Test, Label::Fire, 325),
    (Split::Test, Label::NonFire, 225),
];

impl DatasetManifest {
    /// Rejects duplicate paths.
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut counts = BTreeMap::new();
        for r in &records {
            if !seen.insert(r.path.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate manifest path {}",
                    r.path.display()
                )));
            }
            *counts.entry((r.split, r.label)).or_insert(0) += 1;
        }
        Ok(DatasetManifest { records, counts })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.counts.get(&(split, label)).copied().unwrap_or(0)
    }

    pub fn split_len(&self, split: Split) -> usize {
        Label::ALL.iter().map(|&l| self.count(split, l)).sum()
    }

    /// Checks per-(split, label) counts against `expected`.
    pub fn validate_counts(&self, expected: &[(Split, Label, usize)]) -> Result<()> {
        let wrong: Vec<String> = expected
            .iter()
            .filter(|(s, l, n)| self.count(*s, *l) != *n)
            .map(|(s, l, n)| format!("{s}/{}: {} (expected {n})", l.as_str(), self.count(*s, *l)))
            .collect();
        if wrong.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(format!("split counts differ: {}", wrong.join(", "))))
        }
    }

    /// Parses `<relative-path>\t<label>\t<split>` lines. Paths resolve
    /// against `base`. Blank lines are skipped.
    pub fn parse_tsv(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [path, label, split] = cols[..] else {
                return Err(Error::Validation(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    i + 1,
                    cols.len()
                )));
            };
            let at = |e: Error| Error::Validation(format!("manifest line {}: {e}", i + 1));
            records.push(Record {
                path: base.join(path),
                label: label.trim().parse().map_err(at)?,
                split: split.trim().parse().map_err(at)?,
            });
        }
        DatasetManifest::new(records)
    }

    pub fn to_tsv(&self, base: &Path) -> String {
        let mut out = String::new();
        for r in &self.records {
            let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                rel.display(),
                r.label.as_str(),
                r.split.as_str()
            ));
        }
        out
    }

    /// Scans `<root>/<split>/<class>/*.{png,ppm}`. Each present split must
    /// have both class directories, each non-empty.
    pub fn scan(root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for split in Split::ALL {
            let split_dir = root.join(split.as_str());
            if !split_dir.is_dir() {
                continue;
            }
            for label in Label::ALL {
                let dir = split_dir.join(label.as_str());
                let mut files = list_images(&dir)?;
                if files.is_empty() {
                    return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
                }
                files.sort();
                records.extend(files.into_iter().map(|path| Record { path, label, split }));
            }
        }
        if records.is_empty() {
            return Err(Error::Dataset(format!(
                "no images under {} (expected <split>/<fire|non_fire>/*.png)",
                root.display()
            )));
        }
        DatasetManifest::new(records)
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing class directory {}", dir.display())));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::storage(dir, e))? {
        let path = entry.map_err(|e| Error::storage(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm")) {
            out.push(path);
        }
    }
    Ok(out)
}

/// A directory is scanned; a file is parsed as a TSV manifest relative to
/// its own directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        DatasetManifest::scan(path)
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        DatasetManifest::parse_tsv(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

// ---------------------------------------------------------------------------
// batching

/// One split decoded and resized into memory.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub split: Split,
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
}

impl SplitData {
    pub fn new(split: Split, images: Vec<Image>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} images for {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(SplitData { split, images, labels })
    }

    pub fn load(manifest: &DatasetManifest, split: Split, height: usize, width: usize) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for r in manifest.split(split) {
            images.push(resize_bilinear(&read_image(&r.path)?, height, width));
            labels.push(r.label.target());
        }
        SplitData::new(split, images, labels)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shuffled batches for `epoch`. The plan is ignored outside the train
    /// split.
    pub fn epoch<'a>(
        &'a self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        plan: Option<&'a AugmentPlan>,
    ) -> Result<Batches<'a>> {
        if batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        let epoch_seed = mix(seed, epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        Ok(Batches {
            data: self,
            order,
            pos: 0,
            batch_size,
            plan: plan.filter(|p| self.split == Split::Train && !p.is_empty()),
            epoch_seed,
        })
    }

    /// Unshuffled, unaugmented batches for evaluation.
    pub fn sequential(&self, batch_size: usize) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        Ok(Batches {
            data: self,
            order: (0..self.len()).collect(),
            pos: 0,
            batch_size,
            plan: None,
            epoch_seed: 0,
        })
    }
}

pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    data: &'a SplitData,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    plan: Option<&'a AugmentPlan>,
    epoch_seed: u64,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let build = || -> Result<Batch> {
            let augmented: Vec<Image>;
            let refs: Vec<&Image> = match self.plan {
                Some(plan) => {
                    augmented = indices
                        .iter()
                        .map(|&i| plan.apply(&self.data.images[i], mix(self.epoch_seed, i as u64)))
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                }
                None => indices.iter().map(|&i| &self.data.images[i]).collect(),
            };
            Ok(Batch {
                images: stack(&refs)?,
                labels: indices.iter().map(|&i| self.data.labels[i]).collect(),
                indices: indices.clone(),
            })
        };
        Some(build())
    }
}

/// Loads `split` from `manifest` and returns its first-epoch batch stream.
pub fn batches(
    manifest: &DatasetManifest,
    split: Split,
    size: (usize, usize),
    batch_size: usize,
    seed: u64,
    plan: Option<&AugmentPlan>,
) -> Result<Vec<Batch>> {
    let data = SplitData::load(manifest, split, size.0, size.1)?;
    let out = data.epoch(batch_size, seed, 0, plan)?.collect();
    out
}

// ---------------------------------------------------------------------------
// synthetic corpora

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

type Rgb = [f32; 3];

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(h: usize, w: usize, mut f: impl FnMut(f32, f32) -> Rgb) -> Self {
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                px.push(f(y as f32 / h as f32, x as f32 / w as f32));
            }
        }
        Canvas { h, w, px }
    }

    /// Blends `color(t)` into an axis-aligned ellipse; `t` is the normalized
    /// radial distance in `[0, 1)` and the blend weight is `alpha(t)`.
    fn ellipse(
        &mut self,
        (cy, cx): (f32, f32),
        (ry, rx): (f32, f32),
        mut shade: impl FnMut(f32, usize, usize) -> Option<(Rgb, f32)>,
    ) {
        for y in 0..self.h {
            for x in 0..self.w {
                let dy = (y as f32 / self.h as f32 - cy) / ry;
                let dx = (x as f32 / self.w as f32 - cx) / rx;
                let t = (dy * dy + dx * dx).sqrt();
                if t < 1.0 {
                    if let Some((c, a)) = shade(t, y, x) {
                        let p = &mut self.px[y * self.w + x];
                        *p = lerp(*p, c, a.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }

    fn rect(&mut self, (y0, x0): (f32, f32), (y1, x1): (f32, f32), color: Rgb, alpha: f32) {
        for y in 0..self.h {
            for x in 0..self.w {
                let (fy, fx) = (y as f32 / self.h as f32, x as f32 / self.w as f32);
                if fy >= y0 && fy < y1 && fx >= x0 && fx < x1 {
                    let p = &mut self.px[y * self.w + x];
                    *p = lerp(*p, color, alpha);
                }
            }
        }
    }

    fn grain(&mut self, rng: &mut ChaCha8Rng, amount: f32) {
        for p in &mut self.px {
            let n = rng.gen_range(-amount..=amount);
            for v in p.iter_mut() {
                *v += n;
            }
        }
    }

    fn into_image(self) -> Image {
        let plane = self.h * self.w;
        Image::from_fn(self.h, self.w, |c, y, x| {
            debug_assert!(y * self.w + x < plane);
            self.px[y * self.w + x][c]
        })
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: Rgb, amount: f32) -> Rgb {
    c.map(|v| v + rng.gen_range(-amount..=amount))
}

fn render_fire(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let top = jitter(rng, [0.32, 0.24, 0.22], 0.08);
    let bottom = jitter(rng, [0.16, 0.1, 0.06], 0.05);
    let mut canvas = Canvas::new(h, w, |fy, _| lerp(top, bottom, fy));
    let horizon = rng.gen_range(0.55..0.8);
    canvas.rect((horizon, 0.0), (1.0, 1.0), jitter(rng, [0.12, 0.16, 0.06], 0.04), 0.8);
    let core = jitter(rng, [1.0, 0.88, 0.35], 0.06);
    let edge = jitter(rng, [0.92, 0.25, 0.02], 0.06);
    for _ in 0..rng.gen_range(1..=3) {
        let centre = (rng.gen_range(0.35..0.85), rng.gen_range(0.15..0.85));
        let rx = rng.gen_range(0.12..0.28);
        let radii = (rx * rng.gen_range(1.1..1.8), rx);
        let mut flicker = ChaCha8Rng::seed_from_u64(rng.gen());
        canvas.ellipse(centre, radii, |t, _, _| {
            let f = flicker.gen_range(0.65..1.0);
            Some((lerp(core, edge, t.powf(0.7)), (1.0 - t * t) * 1.3 * f))
        });
    }
    canvas.grain(rng, 0.03);
    canvas.into_image()
}

fn render_non_fire(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let sky = jitter(rng, [0.45, 0.6, 0.8], 0.1);
    let haze = jitter(rng, [0.6, 0.66, 0.7], 0.06);
    let horizon = rng.gen_range(0.3..0.5);
    let foliage = jitter(rng, [0.16, 0.42, 0.14], 0.08);
    let shade = jitter(rng, [0.08, 0.24, 0.08], 0.05);
    let mut canvas = Canvas::new(h, w, |fy, _| {
        if fy < horizon {
            lerp(sky, haze, fy / horizon)
        } else {
            lerp(foliage, shade, (fy - horizon) / (1.0 - horizon))
        }
    });
    for _ in 0..rng.gen_range(2..=5) {
        let centre = (rng.gen_range(horizon..1.0), rng.gen_range(0.0..1.0));
        let r = rng.gen_range(0.08..0.2);
        let tone = jitter(rng, foliage, 0.07);
        canvas.ellipse(centre, (r, r), |_, _, _| Some((tone, 0.8)));
    }
    if rng.gen_bool(0.4) {
        let gray = rng.gen_range(0.35..0.6);
        let y0 = rng.gen_range(horizon..0.85);
        canvas.rect((y0, rng.gen_range(0.0..0.5)), (y0 + 0.12, rng.gen_range(0.5..1.0)), [gray; 3], 0.9);
    }
    // autumn foliage: orange, but flat and without a bright core
    if rng.gen_bool(0.3) {
        for _ in 0..rng.gen_range(1..=2) {
            let centre = (rng.gen_range(horizon..0.9), rng.gen_range(0.15..0.85));
            let r = rng.gen_range(0.08..0.18);
            let tone = jitter(rng, [0.78, 0.42, 0.1], 0.05);
            canvas.ellipse(centre, (r, r * 1.2), |_, _, _| Some((tone, 0.75)));
        }
    }
    canvas.grain(rng, 0.03);
    canvas.into_image()
}

/// Balanced binary corpus, fire first then non-fire, each `per_class` long.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<(Image, Label)>> {
    check_synth(spec)?;
    let mut out = Vec::with_capacity(2 * spec.per_class);
    for (k, label) in [Label::Fire, Label::NonFire].into_iter().enumerate() {
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(spec.seed, k as u64), i as u64));
            let img = match label {
                Label::Fire => render_fire(&mut rng, spec.height, spec.width),
                Label::NonFire => render_non_fire(&mut rng, spec.height, spec.width),
            };
            out.push((img, label));
        }
    }
    Ok(out)
}

pub const SHAPE_CLASSES: usize = 4;

/// Four-class source task: {disc, bar} x {warm, cool} palette on a textured
/// gray field. Class index is `2 * shape + palette`.
pub fn synth_shapes(spec: &SynthSpec) -> Result<Vec<(Image, usize)>> {
    check_synth(spec)?;
    let mut out = Vec::with_capacity(SHAPE_CLASSES * spec.per_class);
    for class in 0..SHAPE_CLASSES {
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(spec.seed ^ 0x5EED, class as u64), i as u64));
            let g = rng.gen_range(0.25..0.55);
            let mut canvas = Canvas::new(spec.height, spec.width, |_, _| [g, g, g]);
            canvas.grain(&mut rng, 0.06);
            let warm = class % 2 == 0;
            let color = if warm {
                jitter(&mut rng, [0.95, 0.55, 0.12], 0.08)
            } else {
                jitter(&mut rng, [0.12, 0.45, 0.9], 0.08)
            };
            let centre = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
            if class / 2 == 0 {
                let r = rng.gen_range(0.15..0.28);
                canvas.ellipse(centre, (r, r), |_, _, _| Some((color, 0.95)));
            } else {
                let (ly, lx) = (rng.gen_range(0.35..0.45), rng.gen_range(0.06..0.1));
                canvas.rect((centre.0 - ly, centre.1 - lx), (centre.0 + ly, centre.1 + lx), color, 0.95);
            }
            canvas.grain(&mut rng, 0.02);
            out.push((canvas.into_image(), class));
        }
    }
    Ok(out)
}

fn check_synth(spec: &SynthSpec) -> Result<()> {
    if spec.per_class == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Validation(format!(
            "synthetic corpus needs per_class, height and width >= 1, got {spec:?}"
        )));
    }
    Ok(())
}

/// Writes a binary synthetic corpus as `<out>/<split>/<class>/NNNNN.png`.
/// `train` gets `per_class` images per class; `val` and `test` get a
/// quarter of that (at least one) from independent seeds.
pub fn write_synth(out: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let held_out = (spec.per_class / 4).max(1);
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let n = if split == Split::Train { spec.per_class } else { held_out };
        let sub = SynthSpec {
            per_class: n,
            seed: mix(spec.seed, k as u64 + 100),
            ..*spec
        };
        for label in Label::ALL {
            let dir = out.join(split.as_str()).join(label.as_str());
            fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
        }
        for (i, (img, label)) in synth_dataset(&sub)?.into_iter().enumerate() {
            let path = out
                .join(split.as_str())
                .join(label.as_str())
                .join(format!("{:05}.png", i % n));
            write_png(&img, &path)?;
            records.push(Record { path, label, split });
        }
    }
    let manifest = DatasetManifest::new(records)?;
    let tsv = out.join("manifest.tsv");
    fs::write(&tsv, manifest.to_tsv(out)).map_err(|e| Error::storage(&tsv, e))?;
    Ok(manifest)
}

/// Splits a labelled corpus into consecutive `SplitData` chunks per class:
/// the first `train` of each class go to train, the rest to val.
pub fn split_binary(corpus: Vec<(Image, Label)>, train_per_class: usize) -> Result<(SplitData, SplitData)> {
    let mut seen: BTreeMap<Label, usize> = BTreeMap::new();
    let (mut ti, mut tl, mut vi, mut vl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (img, label) in corpus {
        let k = seen.entry(label).or_insert(0);
        if *k < train_per_class {
            ti.push(img);
            tl.push(label.target());
        } else {
            vi.push(img);
            vl.push(label.target());
        }
        *k += 1;
    }
    Ok((SplitData::new(Split::Train, ti, tl)?, SplitData::new(Split::Val, vi, vl)?))
}
