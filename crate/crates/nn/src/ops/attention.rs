//! Scaled dot-product attention core over `[N, T, E]` with the embedding
//! split into `heads` contiguous slices.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub(crate) fn check(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<[usize; 3]> {
    let qs = q.shape();
    if qs.len() != 3 {
        return Err(shape_err("attention", "[N, T, E]", qs));
    }
    if k.shape() != qs || v.shape() != qs {
        return Err(shape_err("attention", format!("{qs:?} for q, k and v"), k.shape()));
    }
    if heads == 0 || qs[2] % heads != 0 {
        return Err(Error::Divisibility {
            op: "attention",
            what: "embedding dim",
            value: qs[2],
            divisor: heads,
        });
    }
    Ok([qs[0], qs[1], qs[2]])
}

/// Returns the attended values and the softmax probabilities `[N, heads, T, T]`.
pub(crate) fn forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Vec<f64>)> {
    let [n, t, e] = check(q, k, v, heads)?;
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * t * e];
    let mut probs = vec![0.0; n * heads * t * t];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for s in 0..n {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (s * heads + h) * t * t;
            for i in 0..t {
                let qi = &qd[(s * t + i) * e + off..][..dh];
                let row = &mut probs[pbase + i * t..pbase + (i + 1) * t];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kd[(s * t + j) * e + off..][..dh];
                    *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    total += *r;
                }
                row.iter_mut().for_each(|r| *r /= total);
                let oi = &mut out[(s * t + i) * e + off..][..dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vd[(s * t + j) * e + off..][..dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[n, t, e], out)?, probs))
}

pub(crate) struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    dout: &[f64],
) -> AttentionGrads {
    let (n, t, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dp = vec![0.0; t];
    for s in 0..n {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (s * heads + h) * t * t;
            for i in 0..t {
                let p = &probs[pbase + i * t..pbase + (i + 1) * t];
                let doi = &dout[(s * t + i) * e + off..][..dh];
                for j in 0..t {
                    let vj = (s * t + j) * e + off;
                    dp[j] = doi.iter().zip(&vd[vj..vj + dh]).map(|(a, b)| a * b).sum();
                    for (dvx, g) in dv[vj..vj + dh].iter_mut().zip(doi) {
                        *dvx += p[j] * g;
                    }
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = (s * t + i) * e + off;
                for j in 0..t {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (s * t + j) * e + off;
                    for c in 0..dh {
                        dq[qi + c] += ds * kd[kj + c];
                        dk[kj + c] += ds * qd[qi + c];
                    }
                }
            }
        }
    }
    AttentionGrads { dq, dk, dv }
}
