//! im2col-based 2-D convolution kernels.

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, in_channels, height, width], &[out_channels, wc, kernel_h, kernel_w]) =
            (input, weight)
        else {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OCHW weights, got {input:?} and {weight:?}"
            )));
        };
        if wc != in_channels {
            return Err(Error::shape(format!(
                "conv2d input has {in_channels} channels, weights expect {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Output columns `ox` whose input column `ox * s + kx - p` lies in `[0, w)`.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    // smallest ox with ox * s + kx >= p
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // largest ox with ox * s + kx - p <= w - 1
    let hi = if g.width + p > kx {
        ((g.width + p - kx - 1) / s + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (h, p, s) = (g.height as isize, g.padding as isize, g.stride as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        let ix0 = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            drow[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (d, v) in drow[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (h, p, s) = (g.height as isize, g.padding as isize, g.stride as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.padding;
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in drow[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.out_pixels();
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * g.out_pixels()]
    };
    for n in 0..g.batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let yn = &mut out[n * out_len..(n + 1) * out_len];
        gemm(g.out_channels, g.patch_len(), g.out_pixels(), w.data(), false, src, false, T::zero(), yn);
        if let Some(b) = bias {
            for (o, row) in yn.chunks_mut(g.out_pixels()).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
    }
    Tensor::new(&g.output_shape(), out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.out_pixels();
    let npix = g.out_pixels();
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need_weight.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); g.patch_len() * npix];
    let mut dcols = if need_input && !g.is_pointwise() {
        vec![T::zero(); g.patch_len() * npix]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let dyn_ = &dy.data()[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let src: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            gemm(g.out_channels, npix, g.patch_len(), dyn_, false, src, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(g.patch_len(), g.out_channels, npix, w.data(), true, dyn_, false, T::zero(), dxn);
            } else {
                gemm(g.patch_len(), g.out_channels, npix, w.data(), true, dyn_, false, T::zero(), &mut dcols);
                col2im_add(g, &dcols, dxn);
            }
        }
    }
    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (o, row) in dy.data()[n * out_len..(n + 1) * out_len].chunks(npix).enumerate() {
                db[o] = db[o] + row.iter().copied().sum();
            }
        }
        Tensor::new(&[g.out_channels], db).expect("bias grad shape")
    });
    ConvGrads {
        input: dx.map(|d| Tensor::new(&[g.batch, g.in_channels, g.height, g.width], d).expect("dx shape")),
        weight: dw.map(|d| Tensor::new(w.shape(), d).expect("dw shape")),
        bias: db,
    }
}
