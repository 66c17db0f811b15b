//! Reference 2-D convolutions for Forward, GTA and GTW.
//!
//! These are the functional oracles for the trainer and the dataflow. Zero
//! padding is virtual: an input index outside the tensor reads as zero.
//! Summation order is fixed so the row-level dataflow can reproduce the
//! results exactly:
//!
//! * forward: per output point, the bias first, then `j`, `ky`, `kx` ascending;
//! * GTA: per input-gradient point, contributions in `(i, y, x)` order;
//! * GTW: per weight, `y`, `x` ascending.

use crate::error::{config, Result};
use crate::tensor::{Kernel4, Tensor3};

/// Output extent `floor((n + 2 pad - k) / stride) + 1`.
pub fn output_size(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return config("stride must be at least 1");
    }
    if k == 0 {
        return config("kernel size must be at least 1");
    }
    let padded = n + 2 * pad;
    if padded < k {
        return config(format!("kernel {k} larger than padded extent {padded}"));
    }
    Ok((padded - k) / stride + 1)
}

/// Maps an output coordinate and tap to an input coordinate, `None` in the padding.
#[inline]
pub fn input_index(out: usize, tap: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let v = (out * stride + tap) as isize - pad as isize;
    (v >= 0 && (v as usize) < len).then_some(v as usize)
}

/// `O_i = sum_j W_ij * I_j + b_i`.
pub fn conv2d_ref(
    input: &Tensor3,
    kernels: &Kernel4,
    stride: usize,
    pad: usize,
) -> Result<Tensor3> {
    let (c, h, w) = input.shape();
    if kernels.channels() != c {
        return config(format!(
            "kernel expects {} input channels, input has {}",
            kernels.channels(),
            c
        ));
    }
    let k = kernels.k();
    let ho = output_size(h, k, stride, pad)?;
    let wo = output_size(w, k, stride, pad)?;
    let f = kernels.filters();
    let mut out = Tensor3::zeros(f, ho, wo);
    for i in 0..f {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = kernels.bias[i];
                for j in 0..c {
                    for ky in 0..k {
                        let Some(iy) = input_index(y, ky, stride, pad, h) else {
                            continue;
                        };
                        for kx in 0..k {
                            if let Some(ix) = input_index(x, kx, stride, pad, w) {
                                acc += kernels.get(i, j, ky, kx) * input.get(j, iy, ix);
                            }
                        }
                    }
                }
                *out.at_mut(i, y, x) = acc;
            }
        }
    }
    Ok(out)
}

/// GTA: `dI_j = sum_i dO_i * rot180(W_ij)`, returned with the forward
/// input's shape `(C, in_h, in_w)`.
pub fn conv2d_full_ref(
    d_out: &Tensor3,
    kernels: &Kernel4,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor3> {
    let k = kernels.k();
    let ho = output_size(in_h, k, stride, pad)?;
    let wo = output_size(in_w, k, stride, pad)?;
    if d_out.shape() != (kernels.filters(), ho, wo) {
        return config(format!(
            "output gradient shape {:?} does not match forward output {:?}",
            d_out.shape(),
            (kernels.filters(), ho, wo)
        ));
    }
    let c = kernels.channels();
    let mut d_in = Tensor3::zeros(c, in_h, in_w);
    for i in 0..kernels.filters() {
        for y in 0..ho {
            for x in 0..wo {
                let g = d_out.get(i, y, x);
                for j in 0..c {
                    for ky in 0..k {
                        let Some(u) = input_index(y, ky, stride, pad, in_h) else {
                            continue;
                        };
                        for kx in 0..k {
                            if let Some(v) = input_index(x, kx, stride, pad, in_w) {
                                *d_in.at_mut(j, u, v) += g * kernels.get(i, j, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(d_in)
}

/// GTW: `dW_ij = dO_i * I_j`; the returned kernel's `bias` holds
/// `db_i = sum dO_i`.
pub fn conv2d_gtw_ref(
    d_out: &Tensor3,
    input: &Tensor3,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Kernel4> {
    let (c, h, w) = input.shape();
    let ho = output_size(h, k, stride, pad)?;
    let wo = output_size(w, k, stride, pad)?;
    let f = d_out.channels();
    if d_out.shape() != (f, ho, wo) {
        return config(format!(
            "output gradient shape {:?} does not match forward output {:?}",
            d_out.shape(),
            (f, ho, wo)
        ));
    }
    let mut dw = Kernel4::zeros(f, c, k);
    for i in 0..f {
        for j in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for y in 0..ho {
                        let Some(iy) = input_index(y, ky, stride, pad, h) else {
                            continue;
                        };
                        for x in 0..wo {
                            if let Some(ix) = input_index(x, kx, stride, pad, w) {
                                acc += d_out.get(i, y, x) * input.get(j, iy, ix);
                            }
                        }
                    }
                    *dw.at_mut(i, j, ky, kx) = acc;
                }
            }
        }
        let mut db = 0.0;
        for y in 0..ho {
            for x in 0..wo {
                db += d_out.get(i, y, x);
            }
        }
        dw.bias[i] = db;
    }
    Ok(dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let input = Tensor3::from_fn(1, 3, 4, |_, y, x| (y * 4 + x) as f64 - 5.0);
        let k = Kernel4::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d_ref(&input, &k, 1, 0).unwrap(), input);
    }

    #[test]
    fn all_ones_sum() {
        let input = Tensor3::new(1, 3, 3, vec![1.0; 9]).unwrap();
        let k = Kernel4::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d_ref(&input, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), (1, 1, 1));
        assert_eq!(out.get(0, 0, 0), 9.0);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(output_size(5, 3, 2, 1).unwrap(), 3);
        assert_eq!(output_size(8, 3, 1, 1).unwrap(), 8);
        assert_eq!(output_size(7, 5, 2, 0).unwrap(), 2);
        assert!(output_size(2, 5, 1, 1).is_err());
        assert!(output_size(4, 3, 0, 0).is_err());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let input = Tensor3::zeros(2, 4, 4);
        let k = Kernel4::zeros(1, 3, 3);
        assert!(conv2d_ref(&input, &k, 1, 0).is_err());
        let k = Kernel4::zeros(1, 2, 3);
        assert!(conv2d_full_ref(&Tensor3::zeros(1, 3, 3), &k, 1, 0, 4, 4).is_err());
        assert!(conv2d_gtw_ref(&Tensor3::zeros(1, 3, 3), &input, 3, 1, 0).is_err());
    }

    #[test]
    fn one_by_one_gta_is_channel_mix() {
        let d_out = Tensor3::from_fn(2, 2, 2, |c, y, x| (c + 2 * y + x) as f64);
        // W[i][j] for i in 0..2, j in 0..3
        let w = vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75];
        let k = Kernel4::new(2, 3, 1, w.clone(), vec![0.0; 2]).unwrap();
        let d_in = conv2d_full_ref(&d_out, &k, 1, 0, 2, 2).unwrap();
        for j in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let want = w[j] * d_out.get(0, y, x) + w[3 + j] * d_out.get(1, y, x);
                    assert_eq!(d_in.get(j, y, x), want);
                }
            }
        }
    }

    #[test]
    fn zero_gradients() {
        let k = Kernel4::new(2, 2, 3, vec![0.3; 36], vec![1.0; 2]).unwrap();
        let d_in = conv2d_full_ref(&Tensor3::zeros(2, 3, 3), &k, 1, 0, 5, 5).unwrap();
        assert!(d_in.data().iter().all(|v| *v == 0.0));
        let input = Tensor3::from_fn(2, 5, 5, |c, y, x| (c + y * x) as f64);
        let dw = conv2d_gtw_ref(&Tensor3::zeros(2, 3, 3), &input, 3, 1, 0).unwrap();
        assert!(dw.weights().iter().all(|v| *v == 0.0));
        assert!(dw.bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gtw_delta_picks_patch() {
        let input = Tensor3::from_fn(2, 5, 5, |c, y, x| (10 * c + 5 * y + x) as f64);
        let mut d_out = Tensor3::zeros(3, 3, 3);
        *d_out.at_mut(1, 0, 0) = 1.0;
        let dw = conv2d_gtw_ref(&d_out, &input, 3, 1, 0).unwrap();
        for j in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    assert_eq!(dw.get(1, j, ky, kx), input.get(j, ky, kx));
                    assert_eq!(dw.get(0, j, ky, kx), 0.0);
                }
            }
        }
        assert_eq!(dw.bias, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn deterministic() {
        let input = Tensor3::from_fn(2, 6, 6, |c, y, x| ((c * 7 + y * 3 + x) as f64).sin());
        let k = Kernel4::new(
            3,
            2,
            3,
            (0..54).map(|i| (i as f64 * 0.37).cos()).collect(),
            vec![0.1, 0.2, 0.3],
        )
        .unwrap();
        let a = conv2d_ref(&input, &k, 2, 1).unwrap();
        let b = conv2d_ref(&input, &k, 2, 1).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
