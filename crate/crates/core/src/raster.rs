//! Linear-light RGB rasters, brightness compensation and the gamma 2.4
//! display transfer.

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

/// Display gamma for sRGB output.
pub const DISPLAY_GAMMA: f64 = 2.4;

/// Row-major linear RGB image with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
    pub mask: Vec<bool>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            mask: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            width,
            height,
            data,
            mask: vec![true; width * height],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Rgb {
        self.data[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Rgb) {
        let k = self.index(i, j);
        self.data[k] = v;
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.mask[self.index(i, j)]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Per-channel mean over valid pixels, summed in row-major order.
    pub fn channel_means(&self) -> Option<Rgb> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (v, &ok) in self.data.iter().zip(&self.mask) {
            if ok {
                for c in 0..3 {
                    sum[c] += v[c];
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }

    /// Mean over valid pixels with all channels pooled.
    pub fn mean(&self) -> Option<f64> {
        self.channel_means().map(|m| (m[0] + m[1] + m[2]) / 3.0)
    }

    /// Bilinear lookup at a continuous pixel coordinate (centers at +0.5).
    /// Returns `None` outside `[0, width] × [0, height]`; samples inside that
    /// range but beyond the outer pixel centers clamp to the edge.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<Rgb> {
        if !(x >= 0.0 && y >= 0.0 && x <= self.width as f64 && y <= self.height as f64) {
            return None;
        }
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.width.saturating_sub(2));
        let j0 = (fy.floor() as usize).min(self.height.saturating_sub(2));
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let (a, b, c, d) = (self.get(i0, j0), self.get(i1, j0), self.get(i0, j1), self.get(i1, j1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * tx;
            let bot = c[k] + (d[k] - c[k]) * tx;
            out[k] = top + (bot - top) * ty;
        }
        Some(out)
    }

    pub fn map(&self, f: impl Fn(Rgb) -> Rgb) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Peak signal-to-noise ratio (peak 1.0) over pixels valid in both images
/// and, if given, in `region`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, region: Option<&[bool]>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DegenerateInput("psnr: image sizes differ".into()));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for k in 0..a.data.len() {
        if !(a.mask[k] && b.mask[k] && region.map_or(true, |r| r[k])) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[k][c] - b.data[k][c];
            se += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::DegenerateInput("psnr: no valid pixels".into()));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// How the global brightness scale is pooled over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Global,
    PerChannel,
}

/// Scale the rectified direct radiance `direct` by `max(1, W)` where
/// `W = mean(geo) / mean(direct)`, then clamp to `[0, 1]`.
///
/// Means are over pixels valid in both images.
pub fn brightness_compensation(direct: &ImageBuffer, geo: &ImageBuffer, pooling: Pooling) -> Result<ImageBuffer> {
    if !direct.same_shape(geo) {
        return Err(Error::DegenerateInput("brightness compensation: image sizes differ".into()));
    }
    let mut sum_j = [0.0; 3];
    let mut sum_i = [0.0; 3];
    for k in 0..direct.data.len() {
        if direct.mask[k] && geo.mask[k] {
            for c in 0..3 {
                sum_j[c] += direct.data[k][c];
                sum_i[c] += geo.data[k][c];
            }
        }
    }
    if sum_j.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateInput("mean of direct radiance is zero".into()));
    }
    let scale: Rgb = match pooling {
        Pooling::Global => {
            let w = sum_i.iter().sum::<f64>() / sum_j.iter().sum::<f64>();
            [w.max(1.0); 3]
        }
        // an all-zero channel has nothing to scale
        Pooling::PerChannel => [0, 1, 2].map(|c| if sum_j[c] > 0.0 { (sum_i[c] / sum_j[c]).max(1.0) } else { 1.0 }),
    };
    Ok(direct.map(|v| [0, 1, 2].map(|c| (v[c] * scale[c]).clamp(0.0, 1.0))))
}

/// Pure power-law encode, `x^(1/2.4)`, clamping the input to `[0, 1]`.
pub fn linear_to_srgb(x: f64) -> f64 {
    x.clamp(0.0, 1.0).powf(1.0 / DISPLAY_GAMMA)
}

pub fn srgb_to_linear(x: f64) -> f64 {
    x.clamp(0.0, 1.0).powf(DISPLAY_GAMMA)
}

/// 8-bit display value of a linear sample.
pub fn linear_to_u8(x: f64) -> u8 {
    (linear_to_srgb(x) * 255.0).round() as u8
}
