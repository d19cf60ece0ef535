//! Random-shifting augmentation (crop, resize, shift onto a filled canvas)
//! and horizontal flipping.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelRange {
    /// Reals in `[0, 1]`.
    Unit,
    /// Integers in `[0, 255]`.
    Byte,
}

impl PixelRange {
    pub fn max(self) -> f64 {
        match self {
            PixelRange::Unit => 1.0,
            PixelRange::Byte => 255.0,
        }
    }

    /// Constant used for uncovered canvas pixels.
    pub fn default_fill(self) -> f64 {
        match self {
            PixelRange::Unit => 0.5,
            PixelRange::Byte => 127.0,
        }
    }
}

/// Three-channel image stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    range: PixelRange,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, range: PixelRange, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                op: "image",
                reason: format!("empty image {height}x{width}"),
            });
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape {
                op: "image",
                dim: "pixels",
                expected: CHANNELS * height * width,
                actual: data.len(),
            });
        }
        let max = range.max();
        if let Some(v) = data.iter().find(|v| !(0.0..=max).contains(*v)) {
            return Err(Error::InvalidParams(format!("pixel value {v} outside [0, {max}]")));
        }
        Ok(Self {
            height,
            width,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, range: PixelRange, value: f64) -> Result<Self> {
        Self::new(height, width, range, vec![value; CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> PixelRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Converts to the other range, rounding when going to bytes.
    pub fn to_range(&self, range: PixelRange) -> Image {
        if range == self.range {
            return self.clone();
        }
        let k = range.max() / self.range.max();
        let data = self
            .data
            .iter()
            .map(|v| match range {
                PixelRange::Byte => (v * k).round().clamp(0.0, 255.0),
                PixelRange::Unit => v * k,
            })
            .collect();
        Image {
            data,
            range,
            ..*self
        }
    }

    /// `(1, 3, H, W)` tensor with unit-range values.
    pub fn to_tensor(&self) -> Tensor {
        let k = 1.0 / self.range.max();
        Tensor::from_vec(
            Shape::new(1, CHANNELS, self.height, self.width),
            self.data.iter().map(|v| v * k).collect(),
        )
        .expect("image dimensions match")
    }

    /// Stacks images of one size into a batch tensor.
    pub fn batch_tensor(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidShape {
            op: "batch_tensor",
            reason: "no images".into(),
        })?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if (img.height, img.width) != (first.height, first.width) {
                return Err(Error::Shape {
                    op: "batch_tensor",
                    dim: "h",
                    expected: first.height,
                    actual: img.height,
                });
            }
            let k = 1.0 / img.range.max();
            data.extend(img.data.iter().map(|v| v * k));
        }
        Tensor::from_vec(Shape::new(images.len(), CHANNELS, first.height, first.width), data)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.into(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; CHANNELS * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]);
            }
        }
        Image::new(h, w, PixelRange::Byte, data)
    }

    /// Saves as 8-bit RGB; the format follows the extension (`.png`, `.ppm`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_range(PixelRange::Byte);
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            for c in 0..CHANNELS {
                px[c] = bytes.get(c, y as usize, x as usize) as u8;
            }
        }
        out.save(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}

/// Random-shifting augmentation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsaParams {
    /// Probability of applying the augmentation at all.
    pub p: f64,
    /// Probability of cropping.
    pub p_c: f64,
    /// Crop ratios are drawn from `U(r_c_min, 1)`.
    pub r_c_min: f64,
    /// Height rates are drawn from `U(r_h_min, 1 / r_c)`.
    pub r_h_min: f64,
    /// Width rates are drawn from `U(r_w_min, 1)`.
    pub r_w_min: f64,
    /// Canvas fill; `None` uses 0.5 for unit images and 127 for bytes.
    pub fill: Option<f64>,
}

impl Default for RsaParams {
    fn default() -> Self {
        Self {
            p: 1.0,
            p_c: 0.5,
            r_c_min: 0.7,
            r_h_min: 0.5,
            r_w_min: 0.5,
            fill: None,
        }
    }
}

impl RsaParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p", self.p), ("p_c", self.p_c)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{name} = {v} is not a probability")));
            }
        }
        if !(self.r_c_min > 0.0 && self.r_c_min <= 1.0) {
            return Err(Error::InvalidParams(format!("r_c_min = {} must lie in (0, 1]", self.r_c_min)));
        }
        for (name, v) in [("r_h_min", self.r_h_min), ("r_w_min", self.r_w_min)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn fill_for(&self, range: PixelRange) -> f64 {
        self.fill.unwrap_or_else(|| range.default_fill())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Crop, resize, and placement on the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftTransform {
    pub crop: CropBox,
    /// Patch size after resizing, `(height, width)`.
    pub resize: (usize, usize),
    /// Patch top-left on the canvas, `(y, x)`.
    pub offset: (usize, usize),
}

impl ShiftTransform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop: CropBox {
                top: 0,
                left: 0,
                height,
                width,
            },
            resize: (height, width),
            offset: (0, 0),
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let c = self.crop;
        let crop_ok = c.height >= 1 && c.width >= 1 && c.top + c.height <= height && c.left + c.width <= width;
        let (rh, rw) = self.resize;
        let place_ok = rh >= 1 && rw >= 1 && self.offset.0 + rh <= height && self.offset.1 + rw <= width;
        if !(crop_ok && place_ok) {
            return Err(Error::InvalidParams(format!(
                "transform {self:?} does not fit a {height}x{width} image"
            )));
        }
        Ok(())
    }
}

/// One draw of [`sample_shift`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSample {
    /// `None` when the augmentation was skipped (probability `1 - p`).
    pub transform: Option<ShiftTransform>,
    pub cropped: bool,
    pub r_c: f64,
    /// Width crop ratio, drawn like `r_c`.
    pub r_cw: f64,
    pub r_h: f64,
    pub r_w: f64,
    /// Parameter ranges that were empty and clamped.
    pub warnings: Vec<String>,
}

impl ShiftSample {
    pub const CSV_HEADER: &'static str = "index,cropped,r_c,r_h,r_w,oy,ox";

    pub fn csv_row(&self, index: usize) -> String {
        let (oy, ox) = self.transform.map_or((0, 0), |t| t.offset);
        format!(
            "{index},{},{},{},{},{oy},{ox}",
            u8::from(self.cropped),
            self.r_c,
            self.r_h,
            self.r_w
        )
    }
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn scaled(size: usize, ratio: f64, max: usize) -> usize {
    ((size as f64 * ratio).round() as usize).clamp(1, max)
}

/// Draws a crop-resize-shift transform for an `height x width` image.
pub fn sample_shift<R: Rng + ?Sized>(params: &RsaParams, height: usize, width: usize, rng: &mut R) -> Result<ShiftSample> {
    params.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape {
            op: "sample_shift",
            reason: "empty image".into(),
        });
    }
    if rng.random::<f64>() >= params.p {
        return Ok(ShiftSample {
            transform: None,
            cropped: false,
            r_c: 1.0,
            r_cw: 1.0,
            r_h: 1.0,
            r_w: 1.0,
            warnings: Vec::new(),
        });
    }
    let mut warnings = Vec::new();
    let cropped = rng.random::<f64>() < params.p_c;
    let (r_c, r_cw) = if cropped {
        (uniform(params.r_c_min, 1.0, rng), uniform(params.r_c_min, 1.0, rng))
    } else {
        (1.0, 1.0)
    };
    let ch = scaled(height, r_c, height);
    let cw = scaled(width, r_cw, width);
    let top = rng.random_range(0..=height - ch);
    let left = rng.random_range(0..=width - cw);

    let r_h_max = 1.0 / r_c;
    let r_h = if params.r_h_min > r_h_max {
        warnings.push(format!("r_h_min {} > 1/r_c {r_h_max}; clamped", params.r_h_min));
        r_h_max
    } else {
        uniform(params.r_h_min, r_h_max, rng)
    };
    let r_w = if params.r_w_min > 1.0 {
        warnings.push(format!("r_w_min {} > 1; clamped", params.r_w_min));
        1.0
    } else {
        uniform(params.r_w_min, 1.0, rng)
    };
    let rh = scaled(ch, r_h, height);
    let rw = scaled(cw, r_w, width);
    let oy = rng.random_range(0..=height - rh);
    let ox = rng.random_range(0..=width - rw);
    Ok(ShiftSample {
        transform: Some(ShiftTransform {
            crop: CropBox {
                top,
                left,
                height: ch,
                width: cw,
            },
            resize: (rh, rw),
            offset: (oy, ox),
        }),
        cropped,
        r_c,
        r_cw,
        r_h,
        r_w,
        warnings,
    })
}

/// Bilinear sample position with half-pixel centres; returns the two source
/// indices and the weight of the second.
#[inline]
fn bilinear_axis(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Renders the transform: the crop is bilinearly resized and placed on a
/// canvas of the original size filled with `fill`.
pub fn apply_shift(img: &Image, t: &ShiftTransform, fill: f64) -> Result<Image> {
    t.validate(img.height, img.width)?;
    let mut out = Image::filled(img.height, img.width, img.range, fill)?;
    let (rh, rw) = t.resize;
    let c = t.crop;
    let rows: Vec<_> = (0..rh).map(|y| bilinear_axis(y, rh, c.height)).collect();
    let cols: Vec<_> = (0..rw).map(|x| bilinear_axis(x, rw, c.width)).collect();
    for ch in 0..CHANNELS {
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let p = |yy: usize, xx: usize| img.get(ch, c.top + yy, c.left + xx);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let mut v = top * (1.0 - fy) + bottom * fy;
                if img.range == PixelRange::Byte {
                    v = v.round().clamp(0.0, 255.0);
                }
                out.set(ch, t.offset.0 + y, t.offset.1 + x, v);
            }
        }
    }
    Ok(out)
}

/// Column-reversed copy.
pub fn flip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

/// Flips with probability `p`.
pub fn horizontal_flip<R: Rng + ?Sized>(img: &Image, p: f64, rng: &mut R) -> Image {
    if rng.random::<f64>() < p {
        flip(img)
    } else {
        img.clone()
    }
}

/// Training-time augmentation: optional random shifting then random flipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rsa: bool,
    pub rsa_params: RsaParams,
    pub flip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rsa: true,
            rsa_params: RsaParams::default(),
            flip_p: 0.5,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    let shifted = if cfg.rsa {
        let s = sample_shift(&cfg.rsa_params, img.height, img.width, rng)?;
        match s.transform {
            Some(t) => apply_shift(img, &t, cfg.rsa_params.fill_for(img.range))?,
            None => img.clone(),
        }
    } else {
        img.clone()
    };
    Ok(horizontal_flip(&shifted, cfg.flip_p, rng))
}
