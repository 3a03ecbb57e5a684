//! Image preprocessing and augmentation chain.
//!
//! Six steps run in a fixed order:
//!
//! 1. center crop (always)
//! 2. one of horizontal flip / quarter-turn rotation (p = 0.5, training only)
//! 3. one of contrast / gamma / brightness jitter (p = 0.5, training only)
//! 4. one of elastic / grid / optical distortion (p = 0.3, training only)
//! 5. bilinear resize (always)
//! 6. per-channel normalization (always)
//!
//! Pixel values are kept as `f32` on the 0..=255 scale until normalization so that
//! chained resampling does not accumulate quantization error. Warps sample by
//! backward mapping with bilinear interpolation and a reflect-101 border; the resize
//! uses half-pixel centers with edge clamping.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// ImageNet channel statistics used by the normalization step.
pub const NORMALIZE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORMALIZE_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A row-major, channel-interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let expected = width * height * CHANNELS;
        if data.len() != expected {
            return Err(Error::Dimension {
                context: "raster data",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * CHANNELS],
        }
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f32::from(b)).collect())
    }

    /// Quantize to 8 bits, rounding and clamping to 0..=255.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
            .map_err(|e| Error::Format {
                kind: "ppm",
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_u8(w as usize, h as usize, img.as_raw())
    }

    /// Binary PPM (P6) encoding of the 8-bit quantized image.
    pub fn encode_ppm(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(
                &self.to_u8(),
                self.width as u32,
                self.height as u32,
                ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Format {
                kind: "ppm",
                message: e.to_string(),
            })?;
        Ok(out.into_inner())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()?).map_err(|e| Error::io(path, e))
    }

    fn map_values(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub alpha: f64,
    pub sigma: f64,
    /// Bound, in pixels, on the jitter of the three reference points that define
    /// the random affine component.
    pub alpha_affine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub num_steps: usize,
    /// Each cell's scale is drawn from `[1 - limit, 1 + limit]`.
    pub distort_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalParams {
    pub distort_limit: f64,
    pub shift_limit: f64,
}

/// Parameters and firing probabilities for the six-step chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub crop_width: usize,
    pub crop_height: usize,
    pub resize_width: usize,
    pub resize_height: usize,
    pub p_spatial: f64,
    pub p_photometric: f64,
    pub p_distortion: f64,
    pub contrast_limit: f64,
    /// Gamma bounds in percent: `(20, 180)` means gamma in `[0.2, 1.8]`.
    pub gamma_limit: (f64, f64),
    pub brightness_limit: f64,
    pub elastic: ElasticParams,
    pub grid: GridParams,
    pub optical: OpticalParams,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            crop_width: 100,
            crop_height: 100,
            resize_width: 224,
            resize_height: 224,
            p_spatial: 0.5,
            p_photometric: 0.5,
            p_distortion: 0.3,
            contrast_limit: 0.4,
            gamma_limit: (20.0, 180.0),
            brightness_limit: 0.4,
            elastic: ElasticParams {
                alpha: 120.0,
                sigma: 6.0,
                alpha_affine: 3.6,
            },
            grid: GridParams {
                num_steps: 5,
                distort_limit: 0.3,
            },
            optical: OpticalParams {
                distort_limit: 2.0,
                shift_limit: 0.5,
            },
            mean: NORMALIZE_MEAN,
            std: NORMALIZE_STD,
        }
    }
}

impl AugmentPlan {
    /// Same chain with a different crop and output size (desk-scale rasters).
    pub fn with_geometry(crop: usize, resize: usize) -> Self {
        Self {
            crop_width: crop,
            crop_height: crop,
            resize_width: resize,
            resize_height: resize,
            ..Self::default()
        }
    }

    /// Firing probabilities of steps 1..=6 during training.
    pub fn step_probabilities(&self) -> [f64; 6] {
        [
            1.0,
            self.p_spatial,
            self.p_photometric,
            self.p_distortion,
            1.0,
            1.0,
        ]
    }

    pub fn output_len(&self) -> usize {
        self.resize_width * self.resize_height * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("augment.p_spatial", self.p_spatial),
            ("augment.p_photometric", self.p_photometric),
            ("augment.p_distortion", self.p_distortion),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.crop_width == 0 || self.crop_height == 0 {
            return Err(Error::config("augment crop size must be positive"));
        }
        if self.resize_width == 0 || self.resize_height == 0 {
            return Err(Error::config("augment resize must be positive"));
        }
        if self.grid.num_steps == 0 {
            return Err(Error::config("grid distortion needs at least one cell"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SpatialOp {
    HorizontalFlip,
    Rotate90 { quarter_turns: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhotometricOp {
    Contrast { alpha: f32 },
    Gamma { gamma: f32 },
    Brightness { beta: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DistortionOp {
    Elastic,
    Grid,
    Optical { k: f32, shift_x: f32, shift_y: f32 },
}

/// Which steps of the chain fired for one call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppliedSteps {
    pub spatial: Option<SpatialOp>,
    pub photometric: Option<PhotometricOp>,
    pub distortion: Option<DistortionOp>,
}

impl AppliedSteps {
    pub fn fired(&self) -> [bool; 6] {
        [
            true,
            self.spatial.is_some(),
            self.photometric.is_some(),
            self.distortion.is_some(),
            true,
            true,
        ]
    }
}

pub fn center_crop(img: &RasterImage, out_w: usize, out_h: usize) -> Result<RasterImage> {
    if out_w > img.width || out_h > img.height {
        return Err(Error::config(format!(
            "crop {out_w}x{out_h} larger than image {}x{}",
            img.width, img.height
        )));
    }
    let x0 = (img.width - out_w) / 2;
    let y0 = (img.height - out_h) / 2;
    let mut data = Vec::with_capacity(out_w * out_h * CHANNELS);
    for y in 0..out_h {
        let start = ((y0 + y) * img.width + x0) * CHANNELS;
        data.extend_from_slice(&img.data[start..start + out_w * CHANNELS]);
    }
    RasterImage::new(out_w, out_h, data)
}

pub fn horizontal_flip(img: &RasterImage) -> RasterImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..CHANNELS {
                out.set(x, y, c, img.get(img.width - 1 - x, y, c));
            }
        }
    }
    out
}

/// Rotate counter-clockwise by `quarter_turns` × 90°.
pub fn rotate90(img: &RasterImage, quarter_turns: u8) -> RasterImage {
    let mut out = img.clone();
    for _ in 0..quarter_turns % 4 {
        let (w, h) = (out.width, out.height);
        let mut next = RasterImage::filled(h, w, 0.0);
        for y in 0..w {
            for x in 0..h {
                for c in 0..CHANNELS {
                    next.set(x, y, c, out.get(w - 1 - y, x, c));
                }
            }
        }
        out = next;
    }
    out
}

/// Step 2: with probability `p_spatial`, a horizontal flip or a rotation by a
/// uniformly drawn number of quarter turns in 1..=3.
pub fn spatial_step<R: Rng + ?Sized>(
    img: &RasterImage,
    plan: &AugmentPlan,
    rng: &mut R,
) -> (RasterImage, Option<SpatialOp>) {
    if !rng.random_bool(plan.p_spatial) {
        return (img.clone(), None);
    }
    let op = if rng.random_bool(0.5) {
        SpatialOp::HorizontalFlip
    } else {
        SpatialOp::Rotate90 {
            quarter_turns: rng.random_range(1..=3),
        }
    };
    (apply_spatial(img, op), Some(op))
}

pub fn apply_spatial(img: &RasterImage, op: SpatialOp) -> RasterImage {
    match op {
        SpatialOp::HorizontalFlip => horizontal_flip(img),
        SpatialOp::Rotate90 { quarter_turns } => rotate90(img, quarter_turns),
    }
}

/// `v' = mean + (1 + alpha)(v - mean)` around the mean over all pixels and channels.
pub fn adjust_contrast(img: &RasterImage, alpha: f32) -> RasterImage {
    let mean = (img.data.iter().map(|&v| f64::from(v)).sum::<f64>() / img.data.len() as f64) as f32;
    img.map_values(|v| (mean + (1.0 + alpha) * (v - mean)).clamp(0.0, 255.0))
}

pub fn adjust_brightness(img: &RasterImage, beta: f32) -> RasterImage {
    img.map_values(|v| (v * (1.0 + beta)).clamp(0.0, 255.0))
}

/// Gamma on a value already scaled to [0, 1].
#[inline]
pub fn gamma_value(v: f32, gamma: f32) -> f32 {
    v.clamp(0.0, 1.0).powf(gamma)
}

pub fn adjust_gamma(img: &RasterImage, gamma: f32) -> RasterImage {
    img.map_values(|v| (gamma_value(v / 255.0, gamma) * 255.0).clamp(0.0, 255.0))
}

/// Step 3: with probability `p_photometric`, one of contrast, gamma or brightness.
pub fn photometric_step<R: Rng + ?Sized>(
    img: &RasterImage,
    plan: &AugmentPlan,
    rng: &mut R,
) -> (RasterImage, Option<PhotometricOp>) {
    if !rng.random_bool(plan.p_photometric) {
        return (img.clone(), None);
    }
    let op = match rng.random_range(0..3) {
        0 => {
            let l = plan.contrast_limit;
            PhotometricOp::Contrast {
                alpha: rng.random_range(-l..=l) as f32,
            }
        }
        1 => {
            let (lo, hi) = plan.gamma_limit;
            PhotometricOp::Gamma {
                gamma: (rng.random_range(lo..=hi) / 100.0) as f32,
            }
        }
        _ => {
            let l = plan.brightness_limit;
            PhotometricOp::Brightness {
                beta: rng.random_range(-l..=l) as f32,
            }
        }
    };
    (apply_photometric(img, op), Some(op))
}

pub fn apply_photometric(img: &RasterImage, op: PhotometricOp) -> RasterImage {
    match op {
        PhotometricOp::Contrast { alpha } => adjust_contrast(img, alpha),
        PhotometricOp::Gamma { gamma } => adjust_gamma(img, gamma),
        PhotometricOp::Brightness { beta } => adjust_brightness(img, beta),
    }
}

#[inline]
fn reflect101(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64) - 2;
    let r = i.rem_euclid(period);
    (if r >= n as i64 { period - r } else { r }) as usize
}

/// Bilinear sample at continuous pixel-center coordinates with a reflect-101 border.
fn sample_reflect(img: &RasterImage, sx: f64, sy: f64, out: &mut [f32]) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = (sx - x0) as f32;
    let fy = (sy - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let xa = reflect101(x0, img.width);
    let xb = reflect101(x0 + 1, img.width);
    let ya = reflect101(y0, img.height);
    let yb = reflect101(y0 + 1, img.height);
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.get(xa, ya, c) * (1.0 - fx) + img.get(xb, ya, c) * fx;
        let bottom = img.get(xa, yb, c) * (1.0 - fx) + img.get(xb, yb, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

/// Backward-map every output pixel through `map` and sample the source bilinearly.
fn remap(img: &RasterImage, map: impl Fn(usize, usize) -> (f64, f64)) -> RasterImage {
    let mut out = RasterImage::filled(img.width, img.height, 0.0);
    let mut px = [0.0f32; CHANNELS];
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = map(x, y);
            sample_reflect(img, sx, sy, &mut px);
            let base = (y * img.width + x) * CHANNELS;
            out.data[base..base + CHANNELS].copy_from_slice(&px);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a single-channel `w × h` field, reflect-101 border.
fn blur_field(field: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * field[y * w + reflect101(x as i64 + i as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect101(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-pixel displacement `(dx, dy)`: `alpha` times Gaussian-blurred uniform noise in [-1, 1].
pub fn elastic_displacement_field<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let n = width * height;
    let mut noise = || -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect() };
    let nx = noise();
    let ny = noise();
    let scale = |v: Vec<f64>| v.into_iter().map(|d| d * alpha).collect::<Vec<_>>();
    (
        scale(blur_field(&nx, width, height, sigma)),
        scale(blur_field(&ny, width, height, sigma)),
    )
}

/// Affine map `[a b c; d e f]` sending each `from[i]` to `to[i]`.
fn affine_from_points(from: [(f64, f64); 3], to: [(f64, f64); 3]) -> [f64; 6] {
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let base = [
        [from[0].0, from[0].1, 1.0],
        [from[1].0, from[1].1, 1.0],
        [from[2].0, from[2].1, 1.0],
    ];
    let d = det3(base);
    let solve = |rhs: [f64; 3]| {
        let mut out = [0.0; 3];
        for (col, o) in out.iter_mut().enumerate() {
            let mut m = base;
            for row in 0..3 {
                m[row][col] = rhs[row];
            }
            *o = det3(m) / d;
        }
        out
    };
    let row_x = solve([to[0].0, to[1].0, to[2].0]);
    let row_y = solve([to[0].1, to[1].1, to[2].1]);
    [row_x[0], row_x[1], row_x[2], row_y[0], row_y[1], row_y[2]]
}

/// Elastic deformation: a random affine jitter composed with a smooth random
/// displacement field, sampled in a single bilinear pass.
pub fn elastic_transform<R: Rng + ?Sized>(
    img: &RasterImage,
    params: &ElasticParams,
    rng: &mut R,
) -> RasterImage {
    let (w, h) = (img.width, img.height);
    let affine = if params.alpha_affine > 0.0 {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let sq = (w.min(h) / 3) as f64;
        let reference = [(cx + sq, cy + sq), (cx + sq, cy - sq), (cx - sq, cy - sq)];
        let mut jittered = reference;
        for p in jittered.iter_mut() {
            p.0 += rng.random_range(-params.alpha_affine..=params.alpha_affine);
            p.1 += rng.random_range(-params.alpha_affine..=params.alpha_affine);
        }
        // backward map: output (jittered) coordinates back to source (reference)
        Some(affine_from_points(jittered, reference))
    } else {
        None
    };
    let (dx, dy) = elastic_displacement_field(w, h, params.alpha, params.sigma, rng);
    remap(img, |x, y| {
        let i = y * w + x;
        let (px, py) = (x as f64 + dx[i], y as f64 + dy[i]);
        match affine {
            Some(m) => (m[0] * px + m[1] * py + m[2], m[3] * px + m[4] * py + m[5]),
            None => (px, py),
        }
    })
}

/// Piecewise-linear map from output to source coordinates along one axis.
fn grid_axis_map(len: usize, scales: &[f64]) -> Vec<f64> {
    let steps = scales.len();
    let step = (len / steps).max(1);
    let mut out_knots = Vec::with_capacity(steps + 1);
    let mut src_knots = Vec::with_capacity(steps + 1);
    out_knots.push(0.0);
    src_knots.push(0.0);
    for (i, s) in scales.iter().enumerate() {
        let width = if i + 1 == steps {
            len.saturating_sub(step * i) as f64
        } else {
            step as f64
        };
        out_knots.push(out_knots[i] + width);
        src_knots.push(src_knots[i] + width * s);
    }
    (0..len)
        .map(|x| {
            let xf = x as f64;
            let cell = out_knots
                .windows(2)
                .position(|k| xf < k[1])
                .unwrap_or(steps - 1);
            let (o0, o1) = (out_knots[cell], out_knots[cell + 1]);
            let (s0, s1) = (src_knots[cell], src_knots[cell + 1]);
            s0 + (xf - o0) * (s1 - s0) / (o1 - o0)
        })
        .collect()
}

/// Grid distortion with explicit per-cell scales along x and y.
pub fn grid_distortion(img: &RasterImage, x_scales: &[f64], y_scales: &[f64]) -> RasterImage {
    let xs = grid_axis_map(img.width, x_scales);
    let ys = grid_axis_map(img.height, y_scales);
    remap(img, |x, y| (xs[x], ys[y]))
}

pub fn random_grid_distortion<R: Rng + ?Sized>(
    img: &RasterImage,
    params: &GridParams,
    rng: &mut R,
) -> RasterImage {
    let l = params.distort_limit;
    let mut draw = || -> Vec<f64> {
        (0..params.num_steps)
            .map(|_| 1.0 + rng.random_range(-l..=l))
            .collect()
    };
    let xs = draw();
    let ys = draw();
    grid_distortion(img, &xs, &ys)
}

/// Radial warp `r -> r (1 + k r^2 + k r^4)` around a shifted center, with radii
/// normalised by the image dimensions. `shift_x` and `shift_y` are fractions of
/// the width and height.
pub fn optical_distortion(img: &RasterImage, k: f64, shift_x: f64, shift_y: f64) -> RasterImage {
    if k == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let cx = w / 2.0 + shift_x * w;
    let cy = h / 2.0 + shift_y * h;
    remap(img, |x, y| {
        let u = (x as f64 - cx) / w;
        let v = (y as f64 - cy) / h;
        let r2 = u * u + v * v;
        let f = 1.0 + k * r2 + k * r2 * r2;
        (cx + u * f * w, cy + v * f * h)
    })
}

/// Step 4: with probability `p_distortion`, one of elastic, grid or optical distortion.
pub fn distortion_step<R: Rng + ?Sized>(
    img: &RasterImage,
    plan: &AugmentPlan,
    rng: &mut R,
) -> (RasterImage, Option<DistortionOp>) {
    if !rng.random_bool(plan.p_distortion) {
        return (img.clone(), None);
    }
    match rng.random_range(0..3) {
        0 => (
            elastic_transform(img, &plan.elastic, rng),
            Some(DistortionOp::Elastic),
        ),
        1 => (
            random_grid_distortion(img, &plan.grid, rng),
            Some(DistortionOp::Grid),
        ),
        _ => {
            let o = &plan.optical;
            let k = rng.random_range(-o.distort_limit..=o.distort_limit);
            let sx = rng.random_range(-o.shift_limit..=o.shift_limit);
            let sy = rng.random_range(-o.shift_limit..=o.shift_limit);
            (
                optical_distortion(img, k, sx, sy).map_values(|v| v.clamp(0.0, 255.0)),
                Some(DistortionOp::Optical {
                    k: k as f32,
                    shift_x: sx as f32,
                    shift_y: sy as f32,
                }),
            )
        }
    }
}

fn source_index(dst: usize, scale: f64, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = if i0 < len - 1 { i0 + 1 } else { i0 };
    (i0, i1, (src - i0 as f64) as f32)
}

/// Bilinear resize with half-pixel sample centers: source coordinate
/// `(i + 0.5) * in / out - 0.5`, clamped at the edges.
pub fn resize_bilinear(img: &RasterImage, out_w: usize, out_h: usize) -> RasterImage {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let cols: Vec<_> = (0..out_w).map(|x| source_index(x, sx, img.width)).collect();
    let mut out = RasterImage::filled(out_w, out_h, 0.0);
    for y in 0..out_h {
        let (y0, y1, fy) = source_index(y, sy, img.height);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..CHANNELS {
                let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                out.set(x, y, c, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Per channel `v' = (v / 255 - mean_c) / std_c`.
pub fn normalize(img: &RasterImage, mean: &[f32; 3], std: &[f32; 3]) -> RasterImage {
    let mut out = img.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i % CHANNELS;
        *v = (*v / 255.0 - mean[c]) / std[c];
    }
    out
}

pub fn denormalize(img: &RasterImage, mean: &[f32; 3], std: &[f32; 3]) -> RasterImage {
    let mut out = img.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i % CHANNELS;
        *v = (*v * std[c] + mean[c]) * 255.0;
    }
    out
}

/// Run the full chain. Stochastic steps 2-4 only fire when `training` is set.
pub fn apply_plan<R: Rng + ?Sized>(
    img: &RasterImage,
    plan: &AugmentPlan,
    rng: &mut R,
    training: bool,
) -> Result<RasterImage> {
    apply_plan_traced(img, plan, rng, training).map(|(out, _)| out)
}

pub fn apply_plan_traced<R: Rng + ?Sized>(
    img: &RasterImage,
    plan: &AugmentPlan,
    rng: &mut R,
    training: bool,
) -> Result<(RasterImage, AppliedSteps)> {
    let mut out = center_crop(img, plan.crop_width, plan.crop_height)?;
    let mut applied = AppliedSteps::default();
    if training {
        let (next, op) = spatial_step(&out, plan, rng);
        out = next;
        applied.spatial = op;
        let (next, op) = photometric_step(&out, plan, rng);
        out = next;
        applied.photometric = op;
        let (next, op) = distortion_step(&out, plan, rng);
        out = next;
        applied.distortion = op;
    }
    let out = resize_bilinear(&out, plan.resize_width, plan.resize_height);
    Ok((normalize(&out, &plan.mean, &plan.std), applied))
}
