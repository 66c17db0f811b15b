//! Dense and compressed containers.
//!
//! [`Tensor3`] holds activations and their gradients in channel-major,
//! row-major order. [`Kernel4`] holds the filters of one CONV layer together
//! with the per-filter bias. [`SparseRow`] is the compressed `(offset, value)`
//! row that moves between the buffer and the PEs.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return config(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return config("tensor contains a non-finite value");
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.index(c, y, x);
        &mut self.data[i]
    }

    pub fn row(&self, c: usize, y: usize) -> &[f64] {
        let s = self.index(c, y, 0);
        &self.data[s..s + self.width]
    }

    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [f64] {
        let s = self.index(c, y, 0);
        &mut self.data[s..s + self.width]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Fraction of nonzero entries (1 for an empty tensor).
    pub fn density(&self) -> f64 {
        if self.data.is_empty() {
            1.0
        } else {
            self.nnz() as f64 / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }
}

/// Filters of one CONV layer, `filters x channels x k x k`, plus the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel4 {
    filters: usize,
    channels: usize,
    k: usize,
    weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Kernel4 {
    pub fn new(
        filters: usize,
        channels: usize,
        k: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return config("kernel size must be at least 1");
        }
        if weights.len() != filters * channels * k * k {
            return config(format!(
                "kernel data length {} does not match {}x{}x{}x{}",
                weights.len(),
                filters,
                channels,
                k,
                k
            ));
        }
        if bias.len() != filters {
            return config(format!(
                "bias length {} does not match {} filters",
                bias.len(),
                filters
            ));
        }
        Ok(Self {
            filters,
            channels,
            k,
            weights,
            bias,
        })
    }

    pub fn zeros(filters: usize, channels: usize, k: usize) -> Self {
        Self {
            filters,
            channels,
            k,
            weights: vec![0.0; filters * channels * k * k],
            bias: vec![0.0; filters],
        }
    }

    pub fn filters(&self) -> usize {
        self.filters
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Weights and bias, mutably at once.
    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights, &mut self.bias)
    }

    #[inline]
    fn index(&self, f: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((f * self.channels + c) * self.k + ky) * self.k + kx
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.index(f, c, ky, kx)]
    }

    #[inline]
    pub fn at_mut(&mut self, f: usize, c: usize, ky: usize, kx: usize) -> &mut f64 {
        let i = self.index(f, c, ky, kx);
        &mut self.weights[i]
    }

    /// Kernel row `ky` of `W[f][c]`, length `k`.
    pub fn row(&self, f: usize, c: usize, ky: usize) -> &[f64] {
        let s = self.index(f, c, ky, 0);
        &self.weights[s..s + self.k]
    }
}

/// Compressed row: the nonzero entries of a dense row in ascending order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow {
    len: usize,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRow {
    /// Keeps exactly the entries that compare unequal to zero; `-0.0` is
    /// dropped like `+0.0`.
    pub fn from_dense(row: &[f64]) -> Self {
        let mut offsets = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in row.iter().enumerate() {
            if v != 0.0 {
                offsets.push(i);
                values.push(v);
            }
        }
        Self {
            len: row.len(),
            offsets,
            values,
        }
    }

    pub fn empty(len: usize) -> Self {
        Self {
            len,
            ..Self::default()
        }
    }

    pub fn from_parts(len: usize, offsets: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if offsets.len() != values.len() {
            return config("offsets and values differ in length");
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return config("offsets must be strictly increasing");
        }
        if offsets.last().is_some_and(|&o| o >= len) {
            return config("offset beyond logical length");
        }
        if values.contains(&0.0) {
            return config("compressed rows store nonzero values only");
        }
        Ok(Self {
            len,
            offsets,
            values,
        })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (o, v) in self.iter() {
            out[o] = v;
        }
        out
    }

    pub fn logical_len(&self) -> usize {
        self.len
    }
    pub fn nnz(&self) -> usize {
        self.offsets.len()
    }
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.offsets
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }
}

/// Shorthand for [`SparseRow::from_dense`].
pub fn sparsify(row: &[f64]) -> SparseRow {
    SparseRow::from_dense(row)
}

/// Shorthand for [`SparseRow::to_dense`].
pub fn densify(row: &SparseRow) -> Vec<f64> {
    row.to_dense()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitMask {
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all(len: usize, value: bool) -> Self {
        Self {
            bits: vec![value; len],
        }
    }

    /// True where `row` is nonzero.
    pub fn nonzero(row: &[f64]) -> Self {
        Self {
            bits: row.iter().map(|v| *v != 0.0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
    pub fn any(&self) -> bool {
        self.bits.iter().any(|b| *b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn sparsify_picks_nonzeros() {
        let s = sparsify(&[0.0, 0.0, 3.0, 0.0, -1.0]);
        assert_eq!(s.offsets(), &[2, 4]);
        assert_eq!(s.values(), &[3.0, -1.0]);
        assert_eq!(s.logical_len(), 5);
    }

    #[test]
    fn sparsify_zero_row() {
        let s = sparsify(&[0.0; 5]);
        assert_eq!(s.nnz(), 0);
        assert_eq!(s.logical_len(), 5);
    }

    #[test]
    fn negative_zero_is_not_stored() {
        let s = sparsify(&[-0.0, 1.0]);
        assert_eq!(s.offsets(), &[1]);
        assert_eq!(densify(&s)[0].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn round_trip_random_rows() {
        let mut rng = Rng::new(99);
        for _ in 0..100 {
            let len = 1 + rng.below(40) as usize;
            let row: Vec<f64> = (0..len)
                .map(|_| {
                    if rng.uniform() < 0.5 {
                        0.0
                    } else {
                        rng.normal()
                    }
                })
                .collect();
            assert_eq!(densify(&sparsify(&row)), row);
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(row in proptest::collection::vec(
            prop_oneof![Just(0.0f64), -1e6f64..1e6], 0..64)) {
            let s = sparsify(&row);
            prop_assert!(s.offsets().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.values().iter().all(|v| *v != 0.0));
            prop_assert_eq!(densify(&s), row);
        }
    }

    #[test]
    fn from_parts_validates() {
        assert!(SparseRow::from_parts(4, vec![1, 1], vec![1.0, 2.0]).is_err());
        assert!(SparseRow::from_parts(4, vec![4], vec![1.0]).is_err());
        assert!(SparseRow::from_parts(4, vec![0], vec![0.0]).is_err());
        assert!(SparseRow::from_parts(4, vec![0, 3], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn tensor_rejects_bad_input() {
        assert!(Tensor3::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor3::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Kernel4::new(2, 1, 3, vec![0.0; 18], vec![0.0]).is_err());
    }

    #[test]
    fn tensor_indexing() {
        let t = Tensor3::from_fn(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(t.get(1, 2, 3), 123.0);
        assert_eq!(t.row(1, 1), &[110.0, 111.0, 112.0, 113.0]);
        assert_eq!(t.channel(0).len(), 12);
    }
}
