//! Per-channel batch normalization, training mode only.
//!
//! Statistics run over batch x spatial positions. `EPS` is added to the
//! biased variance, so a constant channel normalizes to zero and the layer
//! outputs `beta`.

use crate::tensor::Tensor3;

pub const EPS: f64 = 1e-5;

/// Saved state for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Vec<Tensor3>,
}

pub fn batchnorm_forward(xs: &[Tensor3], gamma: &[f64], beta: &[f64]) -> (Vec<Tensor3>, BnCache) {
    assert!(!xs.is_empty(), "batch normalization over an empty batch");
    let (c, h, w) = xs[0].shape();
    let count = (xs.len() * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let sum: f64 = xs.iter().flat_map(|x| x.channel(ch)).sum();
        let m = sum / count;
        let var: f64 = xs
            .iter()
            .flat_map(|x| x.channel(ch))
            .map(|v| (v - m) * (v - m))
            .sum::<f64>()
            / count;
        mean[ch] = m;
        inv_std[ch] = 1.0 / (var + EPS).sqrt();
    }
    let xhat: Vec<Tensor3> = xs
        .iter()
        .map(|x| {
            Tensor3::from_fn(c, h, w, |ch, y, xx| {
                (x.get(ch, y, xx) - mean[ch]) * inv_std[ch]
            })
        })
        .collect();
    let ys = xhat
        .iter()
        .map(|xh| {
            Tensor3::from_fn(c, h, w, |ch, y, xx| {
                gamma[ch] * xh.get(ch, y, xx) + beta[ch]
            })
        })
        .collect();
    (
        ys,
        BnCache {
            mean,
            inv_std,
            xhat,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    dys: &[Tensor3],
    cache: &BnCache,
    gamma: &[f64],
) -> (Vec<Tensor3>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = dys[0].shape();
    let n = (dys.len() * h * w) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for (dy, xh) in dys.iter().zip(&cache.xhat) {
        for ch in 0..c {
            for (g, x) in dy.channel(ch).iter().zip(xh.channel(ch)) {
                dgamma[ch] += g * x;
                dbeta[ch] += g;
                sum_dxhat[ch] += g * gamma[ch];
                sum_dxhat_xhat[ch] += g * gamma[ch] * x;
            }
        }
    }
    let dxs = dys
        .iter()
        .zip(&cache.xhat)
        .map(|(dy, xh)| {
            Tensor3::from_fn(c, h, w, |ch, y, x| {
                let dxhat = dy.get(ch, y, x) * gamma[ch];
                cache.inv_std[ch] / n
                    * (n * dxhat - sum_dxhat[ch] - xh.get(ch, y, x) * sum_dxhat_xhat[ch])
            })
        })
        .collect();
    (dxs, dgamma, dbeta)
}
