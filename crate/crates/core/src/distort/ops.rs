//! Per-frame distortion operators. All of them clamp their output to
//! `[0, 1]` and return the input unchanged for a neutral parameter.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::media::Frame;

/// A sparse 2-D kernel: `(dx, dy, weight)` taps applied as
/// `out(x, y) = sum w * in(x + dx, y + dy)` with replicated borders.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2d {
    pub taps: Vec<(isize, isize, f64)>,
}

impl Kernel2d {
    pub fn sum(&self) -> f64 {
        self.taps.iter().map(|t| t.2).sum()
    }

    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        self.taps
            .iter()
            .filter(|t| t.0 == dx && t.1 == dy)
            .map(|t| t.2)
            .sum()
    }
}

/// Normalized 1-D Gaussian of radius `ceil(3 sigma)`. `sigma = 0` gives `[1]`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// The 2-D defocus kernel, the outer product of [`gaussian_kernel_1d`] with itself.
pub fn gaussian_kernel_2d(sigma: f64) -> Kernel2d {
    let k = gaussian_kernel_1d(sigma);
    let r = (k.len() / 2) as isize;
    let mut taps = Vec::with_capacity(k.len() * k.len());
    for (j, wy) in k.iter().enumerate() {
        for (i, wx) in k.iter().enumerate() {
            taps.push((i as isize - r, j as isize - r, wx * wy));
        }
    }
    Kernel2d { taps }
}

/// Linear motion kernel: `round(length)` equally spaced points on a segment
/// centred at the origin, each splatted bilinearly onto the pixel grid.
pub fn motion_kernel(length: f64, angle: f64) -> Kernel2d {
    let n = (length.round() as usize).max(1);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut acc: std::collections::BTreeMap<(isize, isize), f64> = Default::default();
    for k in 0..n {
        let t = if n == 1 {
            0.0
        } else {
            -(length - 1.0) / 2.0 + k as f64 * (length - 1.0) / (n - 1) as f64
        };
        let (px, py) = (t * dx, t * dy);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        for (ox, oy, w) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if w > 1e-12 {
                *acc.entry((x0 + ox, y0 + oy)).or_insert(0.0) += w;
            }
        }
    }
    let total: f64 = acc.values().sum();
    Kernel2d {
        taps: acc
            .into_iter()
            .map(|((x, y), w)| (x, y, w / total))
            .collect(),
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Applies a sparse kernel per channel with replicate padding.
pub fn convolve(frame: &Frame, kernel: &Kernel2d) -> Frame {
    let (w, h) = (frame.width(), frame.height());
    let mut out = vec![0.0f32; w * h * 3];
    for c in 0..3 {
        let plane = frame.plane(c);
        let dst = &mut out[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dx, dy, wt) in &kernel.taps {
                    let sx = clamp_index(x as isize + dx, w);
                    let sy = clamp_index(y as isize + dy, h);
                    acc += wt * plane[sy * w + sx] as f64;
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Frame::from_clamped(w, h, out)
}

fn convolve_separable(frame: &Frame, k: &[f64]) -> Frame {
    let (w, h) = (frame.width(), frame.height());
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0f32; w * h * 3];
    let mut tmp = vec![0.0f64; w * h];
    for c in 0..3 {
        let plane = frame.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, wt) in k.iter().enumerate() {
                    acc += wt * plane[y * w + clamp_index(x as isize + i as isize - r, w)] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = &mut out[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, wt) in k.iter().enumerate() {
                    acc += wt * tmp[clamp_index(y as isize + i as isize - r, h) * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Frame::from_clamped(w, h, out)
}

pub fn apply_white_noise<R: Rng + ?Sized>(frame: &Frame, sigma: f64, rng: &mut R) -> Result<Frame> {
    if !(sigma >= 0.0) {
        return Err(Error::precondition(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(frame.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::precondition(e.to_string()))?;
    let data = frame
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)) as f32)
        .collect();
    Ok(Frame::from_clamped(frame.width(), frame.height(), data))
}

pub fn apply_defocus_blur(frame: &Frame, sigma: f64) -> Result<Frame> {
    if !(sigma >= 0.0) {
        return Err(Error::precondition(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(frame.clone());
    }
    Ok(convolve_separable(frame, &gaussian_kernel_1d(sigma)))
}

pub fn apply_motion_blur(frame: &Frame, length: f64, angle: f64) -> Result<Frame> {
    if !(length >= 1.0) {
        return Err(Error::precondition(format!("motion length must be >= 1, got {length}")));
    }
    let kernel = motion_kernel(length, angle);
    if kernel.taps.len() == 1 {
        return Ok(frame.clone());
    }
    Ok(convolve(frame, &kernel))
}

/// Scalar map with the dimensions of a frame, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ScalarField {
    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        ScalarField {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

/// Gray level of the smoke veil.
pub const SMOKE_VEIL: f32 = 0.8;

pub fn apply_smoke(frame: &Frame, alpha: f64, field: &ScalarField) -> Result<Frame> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::precondition(format!("smoke alpha must lie in [0, 1], got {alpha}")));
    }
    if field.width != frame.width() || field.height != frame.height() {
        return Err(Error::shape(format!(
            "smoke field {}x{} does not match frame {}x{}",
            field.width,
            field.height,
            frame.width(),
            frame.height()
        )));
    }
    if alpha == 0.0 {
        return Ok(frame.clone());
    }
    let n = field.data.len();
    let mut data = frame.data().to_vec();
    for c in 0..3 {
        for (i, v) in data[c * n..(c + 1) * n].iter_mut().enumerate() {
            let a = alpha as f32 * field.data[i].clamp(0.0, 1.0);
            *v = (1.0 - a) * *v + a * SMOKE_VEIL;
        }
    }
    Ok(Frame::from_clamped(frame.width(), frame.height(), data))
}

/// Radial gain `1 + strength * (0.5 - r)` with `r` the distance to `center`
/// divided by the distance from `center` to the farthest corner.
pub fn illumination_gain(width: usize, height: usize, strength: f64, center: (f64, f64)) -> Vec<f64> {
    let cx = center.0 * (width as f64 - 1.0);
    let cy = center.1 * (height as f64 - 1.0);
    let corners = [
        (0.0, 0.0),
        ((width - 1) as f64, 0.0),
        (0.0, (height - 1) as f64),
        ((width - 1) as f64, (height - 1) as f64),
    ];
    let dmax = corners
        .iter()
        .map(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    let mut gain = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let r = if dmax > 0.0 { d / dmax } else { 0.0 };
            gain.push(1.0 + strength * (0.5 - r));
        }
    }
    gain
}

pub fn apply_uneven_illumination(frame: &Frame, strength: f64, center: (f64, f64)) -> Result<Frame> {
    if !(strength >= 0.0) {
        return Err(Error::precondition(format!(
            "illumination strength must be >= 0, got {strength}"
        )));
    }
    if !((0.0..=1.0).contains(&center.0) && (0.0..=1.0).contains(&center.1)) {
        return Err(Error::precondition("illumination center must lie in [0, 1]^2"));
    }
    if strength == 0.0 {
        return Ok(frame.clone());
    }
    let gain = illumination_gain(frame.width(), frame.height(), strength, center);
    let n = gain.len();
    let mut data = frame.data().to_vec();
    for c in 0..3 {
        for (v, g) in data[c * n..(c + 1) * n].iter_mut().zip(&gain) {
            *v = (*v as f64 * g) as f32;
        }
    }
    Ok(Frame::from_clamped(frame.width(), frame.height(), data))
}

/// Mean absolute 4-neighbour Laplacian over interior pixels, all channels.
/// Drops as a frame gets blurrier.
pub fn mean_abs_laplacian(frame: &Frame) -> f64 {
    let (w, h) = (frame.width(), frame.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for c in 0..3 {
        let p = frame.plane(c);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                let lap = p[i - 1] + p[i + 1] + p[i - w] + p[i + w] - 4.0 * p[i];
                acc += (lap as f64).abs();
            }
        }
    }
    acc / (3 * (w - 2) * (h - 2)) as f64
}
