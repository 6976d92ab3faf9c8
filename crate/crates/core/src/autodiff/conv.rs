//! im2col-based 2-D convolution kernels shared by the forward and reverse passes.

use super::tape::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of a convolution seen from its "image" side (the larger spatial extent)
/// and its "column" side (one column per output location of the sliding window).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    img_c: usize,
    img_h: usize,
    img_w: usize,
    other_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col_h: usize,
    col_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.img_c * self.kh * self.kw
    }

    fn locations(&self) -> usize {
        self.col_h * self.col_w
    }

    fn img_len(&self) -> usize {
        self.img_c * self.img_h * self.img_w
    }

    /// Input `[N, C, H, W]`, weight `[O, C, kh, kw]`.
    pub(crate) fn for_conv(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return Err(Error::shape("conv2d", x, w));
        }
        let (h, wd, kh, kw) = (x[2] + 2 * pad, x[3] + 2 * pad, w[2], w[3]);
        if kh > h || kw > wd {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(ConvGeometry {
            batch: x[0],
            img_c: x[1],
            img_h: x[2],
            img_w: x[3],
            other_c: w[0],
            kh,
            kw,
            stride,
            pad,
            col_h: (h - kh) / stride + 1,
            col_w: (wd - kw) / stride + 1,
        })
    }

    /// Input `[N, Cin, H, W]`, weight `[Cin, Cout, kh, kw]`.
    pub(crate) fn for_transpose(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[0] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", x, w));
        }
        let (kh, kw) = (w[2], w[3]);
        let oh = ((x[2] - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", x, w))?;
        let ow = ((x[3] - 1) * stride + kw)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", x, w))?;
        Ok(ConvGeometry {
            batch: x[0],
            img_c: w[1],
            img_h: oh,
            img_w: ow,
            other_c: x[1],
            kh,
            kw,
            stride,
            pad,
            col_h: x[2],
            col_w: x[3],
        })
    }
}

fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let l = g.locations();
    for c in 0..g.img_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oy in 0..g.col_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.col_w..row + (oy + 1) * g.col_w];
                    if iy < 0 || iy >= g.img_h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.img_h + iy as usize) * g.img_w..][..g.img_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.img_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let l = g.locations();
    for c in 0..g.img_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oy in 0..g.col_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.img_h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.img_h + iy as usize) * g.img_w..][..g.img_w];
                    let src = &cols[row + oy * g.col_w..row + (oy + 1) * g.col_w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.img_w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
    let (p, l, o) = (g.patch(), g.locations(), g.other_c);
    let mut cols = vec![0.0; p * l];
    let mut out = vec![0.0; g.batch * o * l];
    for n in 0..g.batch {
        im2col(&x.data()[n * g.img_len()..][..g.img_len()], g, &mut cols);
        gemm(
            o,
            p,
            l,
            w.data(),
            (p, 1),
            &cols,
            (l, 1),
            &mut out[n * o * l..][..o * l],
        );
    }
    Tensor::from_parts(vec![g.batch, o, g.col_h, g.col_w], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &[f64],
    g: &ConvGeometry,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (p, l, o) = (g.patch(), g.locations(), g.other_c);
    let mut cols = vec![0.0; p * l];
    let mut gx = want_x.then(|| vec![0.0; x.numel()]);
    let mut gw = want_w.then(|| vec![0.0; w.numel()]);
    for n in 0..g.batch {
        let gn = &grad[n * o * l..][..o * l];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[n * g.img_len()..][..g.img_len()], g, &mut cols);
            // dW += G_n · colsᵀ
            gemm(o, l, p, gn, (l, 1), &cols, (1, l), gw);
        }
        if let Some(gx) = gx.as_mut() {
            cols.fill(0.0);
            // dcols = Wᵀ · G_n
            gemm(p, o, l, w.data(), (1, p), gn, (l, 1), &mut cols);
            col2im(&cols, g, &mut gx[n * g.img_len()..][..g.img_len()]);
        }
    }
    (gx, gw)
}

pub(crate) fn conv_transpose2d_forward(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
    let (p, l, ci) = (g.patch(), g.locations(), g.other_c);
    let mut cols = vec![0.0; p * l];
    let mut out = vec![0.0; g.batch * g.img_len()];
    for n in 0..g.batch {
        cols.fill(0.0);
        // cols = Wᵀ · X_n, with W viewed as [Cin, Cout·kh·kw]
        gemm(
            p,
            ci,
            l,
            w.data(),
            (1, p),
            &x.data()[n * ci * l..][..ci * l],
            (l, 1),
            &mut cols,
        );
        col2im(&cols, g, &mut out[n * g.img_len()..][..g.img_len()]);
    }
    Tensor::from_parts(vec![g.batch, g.img_c, g.img_h, g.img_w], out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &[f64],
    g: &ConvGeometry,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (p, l, ci) = (g.patch(), g.locations(), g.other_c);
    let mut cols = vec![0.0; p * l];
    let mut gx = want_x.then(|| vec![0.0; x.numel()]);
    let mut gw = want_w.then(|| vec![0.0; w.numel()]);
    for n in 0..g.batch {
        im2col(&grad[n * g.img_len()..][..g.img_len()], g, &mut cols);
        if let Some(gx) = gx.as_mut() {
            gemm(
                ci,
                p,
                l,
                w.data(),
                (p, 1),
                &cols,
                (l, 1),
                &mut gx[n * ci * l..][..ci * l],
            );
        }
        if let Some(gw) = gw.as_mut() {
            let xn = &x.data()[n * ci * l..][..ci * l];
            gemm(ci, l, p, xn, (l, 1), &cols, (1, l), gw);
        }
    }
    (gx, gw)
}
