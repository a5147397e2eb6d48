//! 3D cross-correlation via im2col + GEMM. Samples in a batch are processed
//! in parallel; weight-gradient partials are reduced in sample order so the
//! result does not depend on the worker count.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::gemm::{gemm, Mat};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Geometry with `padding = dilation * (kernel - 1) / 2`, which preserves
    /// spatial dims at stride 1.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel size {kernel} must be odd")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidConfig("stride and dilation must be >= 1".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        })
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let k = self.kernel;
        [self.out_channels, self.in_channels, k, k, k]
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let mut out = [0; 3];
        for (o, &i) in out.iter_mut().zip(&input) {
            let padded = i + 2 * self.padding;
            if padded < span {
                return Err(Error::InvalidConfig(format!(
                    "input extent {i} too small for dilated kernel span {span}"
                )));
            }
            *o = (padded - span) / self.stride + 1;
        }
        Ok(out)
    }
}

pub(crate) fn check_shapes(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Result<[usize; 3]> {
    let xs = x.shape();
    if xs.len() != 5 || xs[1] != g.in_channels {
        return Err(shape_err(
            "conv3d",
            format!("[N, {}, D, H, W]", g.in_channels),
            xs,
        ));
    }
    if w.shape() != g.weight_shape() {
        return Err(shape_err("conv3d", format!("weight {:?}", g.weight_shape()), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [g.out_channels] {
            return Err(shape_err("conv3d", format!("bias [{}]", g.out_channels), b.shape()));
        }
    }
    g.output_dims([xs[2], xs[3], xs[4]])
}

fn im2col(x: &[f64], dims: [usize; 3], out: [usize; 3], g: &ConvGeom, col: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let k = g.kernel;
    let p = od * oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for oz in 0..od {
                        let iz = (oz * g.stride + kd * g.dilation) as isize - pad;
                        let z_ok = iz >= 0 && (iz as usize) < d;
                        for oy in 0..oh {
                            let iy = (oy * g.stride + kh * g.dilation) as isize - pad;
                            let y_ok = z_ok && iy >= 0 && (iy as usize) < h;
                            if !y_ok {
                                dst[idx..idx + ow].fill(0.0);
                                idx += ow;
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * g.stride + kw * g.dilation) as isize - pad;
                                dst[idx] = if ix >= 0 && (ix as usize) < w {
                                    xc[base + ix as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], dims: [usize; 3], out: [usize; 3], g: &ConvGeom, dx: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let k = g.kernel;
    let p = od * oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for oz in 0..od {
                        let iz = (oz * g.stride + kd * g.dilation) as isize - pad;
                        let z_ok = iz >= 0 && (iz as usize) < d;
                        for oy in 0..oh {
                            let iy = (oy * g.stride + kh * g.dilation) as isize - pad;
                            if !(z_ok && iy >= 0 && (iy as usize) < h) {
                                idx += ow;
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * g.stride + kw * g.dilation) as isize - pad;
                                if ix >= 0 && (ix as usize) < w {
                                    dxc[base + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Result<Tensor> {
    let out = check_shapes(x, w, b, g)?;
    let xs = x.shape();
    let n = xs[0];
    let dims = [xs[2], xs[3], xs[4]];
    let in_len = g.in_channels * dims.iter().product::<usize>();
    let p: usize = out.iter().product();
    let rows = g.col_rows();
    let mut y = vec![0.0; n * g.out_channels * p];
    if p > 0 {
        y.par_chunks_mut(g.out_channels * p)
            .enumerate()
            .for_each(|(s, ys)| {
                let mut col = vec![0.0; rows * p];
                im2col(&x.data()[s * in_len..(s + 1) * in_len], dims, out, g, &mut col);
                gemm(
                    Mat::new(w.data(), g.out_channels, rows),
                    Mat::new(&col, rows, p),
                    ys,
                    false,
                );
                if let Some(b) = b {
                    for (co, chunk) in ys.chunks_mut(p).enumerate() {
                        let bias = b.data()[co];
                        chunk.iter_mut().for_each(|v| *v += bias);
                    }
                }
            });
    }
    Tensor::new(&[n, g.out_channels, out[0], out[1], out[2]], y)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn backward(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeom,
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let xs = x.shape();
    let n = xs[0];
    let dims = [xs[2], xs[3], xs[4]];
    let out = g.output_dims(dims).expect("validated in forward");
    let in_len = g.in_channels * dims.iter().product::<usize>();
    let p: usize = out.iter().product();
    let rows = g.col_rows();
    let out_len = g.out_channels * p;
    let [need_dx, need_dw, need_db] = need;

    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let dy = &grad_out[s * out_len..(s + 1) * out_len];
            let mut col = vec![0.0; rows * p];
            let dw = need_dw.then(|| {
                im2col(&x.data()[s * in_len..(s + 1) * in_len], dims, out, g, &mut col);
                let mut dw = vec![0.0; g.out_channels * rows];
                gemm(
                    Mat::new(dy, g.out_channels, p),
                    Mat::t(&col, rows, p),
                    &mut dw,
                    false,
                );
                dw
            });
            let dx = need_dx.then(|| {
                gemm(
                    Mat::t(w.data(), g.out_channels, rows),
                    Mat::new(dy, g.out_channels, p),
                    &mut col,
                    false,
                );
                let mut dx = vec![0.0; in_len];
                col2im(&col, dims, out, g, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(n * in_len);
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("computed"));
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut acc = vec![0.0; g.out_channels * rows];
        for (_, d) in &per_sample {
            for (a, v) in acc.iter_mut().zip(d.as_ref().expect("computed")) {
                *a += v;
            }
        }
        acc
    });
    let db = need_db.then(|| {
        let mut db = vec![0.0; g.out_channels];
        for s in 0..n {
            for (co, chunk) in grad_out[s * out_len..(s + 1) * out_len].chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
