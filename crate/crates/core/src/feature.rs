//! Dense multi-channel feature images with sub-pixel bilinear sampling and
//! analytic spatial derivatives, plus the deterministic feature extractor
//! that stands in for a learned descriptor network.

use crate::image::Image;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("channel dimensions disagree: {0}")]
    DimensionMismatch(String),
}

/// Standard deviation, in pixels, of the mask blur channel.
pub const MASK_BLUR_SIGMA: f64 = 4.0;

/// Fixed scale mapping metric depth into feature range. A global constant
/// rather than a per-image range keeps the channel sensitive to absolute
/// range offsets, which is what makes camera motion along the optical axis
/// observable to the alignment.
pub const DEPTH_FEATURE_SCALE: f64 = 0.25;

/// c x h x w feature image, planes stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        FeatureMap {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn from_channels(planes: Vec<Image<f64>>) -> Result<Self, FeatureError> {
        assert!(!planes.is_empty(), "feature map needs at least one channel");
        let (w, h) = (planes[0].width(), planes[0].height());
        for (i, p) in planes.iter().enumerate() {
            if p.width() != w || p.height() != h {
                return Err(FeatureError::DimensionMismatch(format!(
                    "channel {i} is {}x{}, expected {w}x{h}",
                    p.width(),
                    p.height()
                )));
            }
        }
        let mut data = Vec::with_capacity(planes.len() * w * h);
        for p in &planes {
            data.extend_from_slice(p.data());
        }
        Ok(FeatureMap {
            channels: planes.len(),
            width: w,
            height: h,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn value(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    pub fn set_value(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[c * self.width * self.height + y * self.width + x] = v;
    }

    /// True when (u, v) keeps at least `margin` pixels away from the edge of
    /// the bilinear sampling domain `[0, w-1] x [0, h-1]`.
    pub fn in_bounds(&self, u: f64, v: f64, margin: f64) -> bool {
        u >= margin
            && u <= (self.width - 1) as f64 - margin
            && v >= margin
            && v <= (self.height - 1) as f64 - margin
    }

    fn cell(&self, u: f64, v: f64) -> (usize, usize, f64, f64) {
        let x0 = (u.floor() as isize).clamp(0, self.width as isize - 2) as usize;
        let y0 = (v.floor() as isize).clamp(0, self.height as isize - 2) as usize;
        (x0, y0, u - x0 as f64, v - y0 as f64)
    }

    /// Bilinear sample of all channels at (u, v). Caller must ensure the
    /// position is inside `[0, w-1] x [0, h-1]`.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let (x0, y0, a, b) = self.cell(u, v);
        let plane = self.width * self.height;
        let i00 = y0 * self.width + x0;
        for (c, slot) in out.iter_mut().enumerate() {
            let base = c * plane + i00;
            let f00 = self.data[base];
            let f10 = self.data[base + 1];
            let f01 = self.data[base + self.width];
            let f11 = self.data[base + self.width + 1];
            *slot = (1.0 - a) * (1.0 - b) * f00 + a * (1.0 - b) * f10 + (1.0 - a) * b * f01 + a * b * f11;
        }
    }

    pub fn sample(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(u, v, &mut out);
        out
    }

    /// Bilinear sample plus the analytic spatial derivative of the
    /// interpolant: `grad[c] = (d/du, d/dv)` for every channel.
    pub fn sample_with_grad_into(&self, u: f64, v: f64, values: &mut [f64], grads: &mut [[f64; 2]]) {
        debug_assert_eq!(values.len(), self.channels);
        debug_assert_eq!(grads.len(), self.channels);
        let (x0, y0, a, b) = self.cell(u, v);
        let plane = self.width * self.height;
        let i00 = y0 * self.width + x0;
        for c in 0..self.channels {
            let base = c * plane + i00;
            let f00 = self.data[base];
            let f10 = self.data[base + 1];
            let f01 = self.data[base + self.width];
            let f11 = self.data[base + self.width + 1];
            values[c] = (1.0 - a) * (1.0 - b) * f00 + a * (1.0 - b) * f10 + (1.0 - a) * b * f01 + a * b * f11;
            grads[c] = [
                (1.0 - b) * (f10 - f00) + b * (f11 - f01),
                (1.0 - a) * (f01 - f00) + a * (f11 - f10),
            ];
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Separable Gaussian blur with zero padding outside the image.
fn blur(img: &Image<f64>, sigma: f64) -> Image<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let (w, h) = (img.width(), img.height());
    let mut horiz = Image::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kw) in kernel.iter().enumerate() {
                let xi = x as isize + i as isize - radius as isize;
                if xi >= 0 && (xi as usize) < w {
                    acc += kw * img.get(xi as usize, y);
                }
            }
            horiz.set(x, y, acc);
        }
    }
    let mut out = Image::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kw) in kernel.iter().enumerate() {
                let yi = y as isize + i as isize - radius as isize;
                if yi >= 0 && (yi as usize) < h {
                    acc += kw * horiz.get(x, yi as usize);
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

fn central_gradient(img: &Image<f64>, horizontal: bool) -> Image<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (p, m) = if horizontal {
                (
                    *img.get((x + 1).min(w - 1), y),
                    *img.get(x.saturating_sub(1), y),
                )
            } else {
                (
                    *img.get(x, (y + 1).min(h - 1)),
                    *img.get(x, y.saturating_sub(1)),
                )
            };
            out.set(x, y, 0.5 * (p - m));
        }
    }
    out
}

/// Deterministic dense descriptor for pose alignment. Channels:
///
/// 0. object mask blurred with a Gaussian of [`MASK_BLUR_SIGMA`] pixels,
/// 1. depth normalized by the fixed [`DEPTH_FEATURE_SCALE`] (misses stay
///    at 0, so the background stays distinct from the surface), blurred
///    with the same sigma,
/// 2. horizontal intensity gradient (central differences of the blurred
///    intensity),
/// 3. vertical intensity gradient.
///
/// Every channel is smoothed at the misalignment scale: silhouette offsets
/// of several pixels then produce smooth, informative residuals instead of
/// one-pixel cliffs the linearized solve cannot follow.
pub fn analytic_features(
    intensity: &Image<f64>,
    mask: &Image<bool>,
    depth: &Image<f64>,
) -> Result<FeatureMap, FeatureError> {
    if !intensity.same_size(mask) || !intensity.same_size(depth) {
        return Err(FeatureError::DimensionMismatch(format!(
            "intensity {}x{}, mask {}x{}, depth {}x{}",
            intensity.width(),
            intensity.height(),
            mask.width(),
            mask.height(),
            depth.width(),
            depth.height()
        )));
    }
    let mask_f = mask.map(|&m| if m { 1.0 } else { 0.0 });
    let blurred = blur(&mask_f, MASK_BLUR_SIGMA);

    let norm_depth = depth.map(|&d| if d.is_finite() { d * DEPTH_FEATURE_SCALE } else { 0.0 });
    let smooth_intensity = blur(intensity, MASK_BLUR_SIGMA);

    FeatureMap::from_channels(vec![
        blurred,
        blur(&norm_depth, MASK_BLUR_SIGMA),
        central_gradient(&smooth_intensity, true),
        central_gradient(&smooth_intensity, false),
    ])
}
