//! Group normalization over `[N, C, ...]` and batch normalization over `[N, F]`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Per-(sample, group) mean and reciprocal standard deviation.
#[derive(Clone, Debug)]
pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> Result<(Tensor, GroupStats)> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(shape_err("group_norm", "[N, C, ...]", xs));
    }
    let (n, c) = (xs[0], xs[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Divisibility {
            op: "group_norm",
            what: "channels",
            value: c,
            divisor: groups,
        });
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err("group_norm", format!("affine [{c}]"), gamma.shape()));
    }
    let s = x.spatial_len();
    let cpg = c / groups;
    let m = (cpg * s) as f64;
    let mut y = vec![0.0; x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    for sample in 0..n {
        for grp in 0..groups {
            let start = (sample * c + grp * cpg) * s;
            let xg = &x.data()[start..start + cpg * s];
            let mean = xg.iter().sum::<f64>() / m;
            let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            for ci in 0..cpg {
                let ch = grp * cpg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for j in 0..s {
                    let idx = start + ci * s + j;
                    y[idx] = (x.data()[idx] - mean) * rstd * ga + be;
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    Ok((Tensor::new(xs, y)?, stats))
}

pub(crate) struct AffineNormGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub(crate) fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    stats: &GroupStats,
    dy: &[f64],
) -> AffineNormGrads {
    let xs = x.shape();
    let (n, c) = (xs[0], xs[1]);
    let s = x.spatial_len();
    let cpg = c / groups;
    let m = (cpg * s) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for sample in 0..n {
        for grp in 0..groups {
            let gi = sample * groups + grp;
            let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
            let start = (sample * c + grp * cpg) * s;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cpg {
                let ch = grp * cpg + ci;
                let ga = gamma.data()[ch];
                for j in 0..s {
                    let idx = start + ci * s + j;
                    let xhat = (x.data()[idx] - mean) * rstd;
                    let dxhat = dy[idx] * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[ch] += dy[idx] * xhat;
                    dbeta[ch] += dy[idx];
                }
            }
            for ci in 0..cpg {
                let ga = gamma.data()[grp * cpg + ci];
                for j in 0..s {
                    let idx = start + ci * s + j;
                    let xhat = (x.data()[idx] - mean) * rstd;
                    let dxhat = dy[idx] * ga;
                    dx[idx] = rstd * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                }
            }
        }
    }
    AffineNormGrads { dx, dgamma, dbeta }
}

/// Per-feature normalization statistics for batch normalization.
#[derive(Clone, Debug)]
pub(crate) struct FeatureStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
    /// Biased batch variance; empty when fixed statistics were used.
    pub var: Vec<f64>,
}

/// Normalizes `[N, F]` with batch statistics, or with the supplied
/// `(mean, var)` when `fixed` is given.
pub(crate) fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    fixed: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, FeatureStats)> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(shape_err("batch_norm", "[N, F]", xs));
    }
    let (n, f) = (xs[0], xs[1]);
    if gamma.shape() != [f] || beta.shape() != [f] {
        return Err(shape_err("batch_norm", format!("affine [{f}]"), gamma.shape()));
    }
    let stats = match fixed {
        Some((mean, var)) => {
            if mean.len() != f || var.len() != f {
                return Err(shape_err("batch_norm", format!("running stats [{f}]"), &[mean.len()]));
            }
            FeatureStats {
                mean: mean.to_vec(),
                rstd: var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
                var: Vec::new(),
            }
        }
        None => {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for row in x.data().chunks(f) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for row in x.data().chunks(f) {
                for j in 0..f {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            FeatureStats {
                rstd: var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
                mean,
                var,
            }
        }
    };
    let mut y = vec![0.0; x.len()];
    for (yr, xr) in y.chunks_mut(f).zip(x.data().chunks(f)) {
        for j in 0..f {
            yr[j] = (xr[j] - stats.mean[j]) * stats.rstd[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(xs, y)?, stats))
}

pub(crate) fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &FeatureStats,
    batch_stats: bool,
    dy: &[f64],
) -> AffineNormGrads {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    let mut sum_dxhat = vec![0.0; f];
    let mut sum_dxhat_xhat = vec![0.0; f];
    for (xr, dr) in x.data().chunks(f).zip(dy.chunks(f)) {
        for j in 0..f {
            let xhat = (xr[j] - stats.mean[j]) * stats.rstd[j];
            dgamma[j] += dr[j] * xhat;
            dbeta[j] += dr[j];
            let dxhat = dr[j] * gamma.data()[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * xhat;
        }
    }
    let mut dx = vec![0.0; x.len()];
    let m = n as f64;
    for ((dxr, xr), dr) in dx.chunks_mut(f).zip(x.data().chunks(f)).zip(dy.chunks(f)) {
        for j in 0..f {
            let dxhat = dr[j] * gamma.data()[j];
            dxr[j] = if batch_stats {
                let xhat = (xr[j] - stats.mean[j]) * stats.rstd[j];
                stats.rstd[j] * (dxhat - sum_dxhat[j] / m - xhat * sum_dxhat_xhat[j] / m)
            } else {
                stats.rstd[j] * dxhat
            };
        }
    }
    AffineNormGrads { dx, dgamma, dbeta }
}
