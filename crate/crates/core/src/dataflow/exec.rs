//! Functional semantics of the row instructions.

use crate::error::{Error, Result};
use crate::nn::spec::ConvGeometry;
use crate::tensor::{BitMask, Kernel4, SparseRow, Tensor3};

use super::{Op, RowInstruction, RowRef};

/// Work done by one instruction on its operands.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RowStats {
    /// Multiplies that landed on a destination slot.
    pub macs: u64,
    /// Streamed nonzeros that took an issue slot (MSRC skips the rest).
    pub streamed: u64,
}

/// SRC: `dst[o] += taps[t] * v` for each streamed `(x, v)` with `s*o = x + a - t`.
pub fn src_row(
    src: &SparseRow,
    taps: &[f64],
    align: isize,
    stride: usize,
    dst: &mut [f64],
) -> RowStats {
    let s = stride as isize;
    let mut macs = 0;
    for (x, v) in src.iter() {
        for (t, w) in taps.iter().enumerate() {
            let num = x as isize + align - t as isize;
            if num < 0 || num % s != 0 {
                continue;
            }
            if let Some(d) = dst.get_mut((num / s) as usize) {
                *d += w * v;
                macs += 1;
            }
        }
    }
    RowStats {
        macs,
        streamed: src.nnz() as u64,
    }
}

/// MSRC: `dst[v] += taps[t] * g` at `v = s*x - t + a`, skipping outputs
/// whose mask bit is false. A streamed value with no surviving output is
/// skipped by look-ahead and takes no issue slot.
pub fn msrc_row(
    src: &SparseRow,
    taps: &[f64],
    align: isize,
    stride: usize,
    mask: Option<&[bool]>,
    dst: &mut [f64],
) -> RowStats {
    let mut stats = RowStats::default();
    for (x, g) in src.iter() {
        let mut hit = false;
        for (t, w) in taps.iter().enumerate() {
            let v = (stride * x) as isize - t as isize + align;
            if v < 0 || v as usize >= dst.len() {
                continue;
            }
            let v = v as usize;
            if mask.is_some_and(|m| !m[v]) {
                continue;
            }
            dst[v] += w * g;
            stats.macs += 1;
            hit = true;
        }
        if hit || mask.is_none() {
            stats.streamed += 1;
        }
    }
    stats
}

/// OSRC: `dst[k] += sum_x d_out[x] * input[s*x + k - a]` over the K scratchpad slots.
pub fn osrc_row(
    input: &SparseRow,
    d_out: &SparseRow,
    align: isize,
    stride: usize,
    dst: &mut [f64],
) -> RowStats {
    let dense = input.to_dense();
    let mut macs = 0;
    for (x, g) in d_out.iter() {
        for (k, d) in dst.iter_mut().enumerate() {
            let idx = (stride * x + k) as isize - align;
            if idx < 0 {
                continue;
            }
            match dense.get(idx as usize) {
                Some(&v) if v != 0.0 => {
                    *d += g * v;
                    macs += 1;
                }
                _ => {}
            }
        }
    }
    RowStats {
        macs,
        streamed: input.nnz() as u64,
    }
}

pub fn reversed_taps(row: &[f64]) -> Vec<f64> {
    row.iter().rev().copied().collect()
}

/// Compressed rows of `t`, channel-major.
pub fn sparse_rows(t: &Tensor3) -> Vec<SparseRow> {
    let mut rows = Vec::with_capacity(t.channels() * t.height());
    for c in 0..t.channels() {
        for y in 0..t.height() {
            rows.push(SparseRow::from_dense(t.row(c, y)));
        }
    }
    rows
}

/// Operands of one CONV layer for one sample, in compressed row form.
#[derive(Debug, Clone, Copy)]
pub struct LayerOperands<'a> {
    pub geometry: ConvGeometry,
    /// `C * H_in` rows of the layer input.
    pub input: &'a [SparseRow],
    pub kernel: &'a Kernel4,
    /// `F * H_out` rows of the gradient consumed by GTA and GTW.
    pub d_out: &'a [SparseRow],
    pub mask: Option<&'a BitMask>,
}

impl<'a> LayerOperands<'a> {
    /// A streamed row; `None` for rows in the padding.
    pub fn row(&self, r: RowRef) -> Result<Option<&'a SparseRow>> {
        let g = &self.geometry;
        match r {
            RowRef::Input { ch, row } => {
                if row < 0 || row as usize >= g.in_h {
                    return Ok(None);
                }
                self.input
                    .get(ch * g.in_h + row as usize)
                    .map(Some)
                    .ok_or_else(|| missing(r))
            }
            RowRef::DOut { ch, row } => self
                .d_out
                .get(ch * g.out_h + row)
                .map(Some)
                .ok_or_else(|| missing(r)),
            _ => Err(missing(r)),
        }
    }

    pub fn mask_row(&self, r: RowRef) -> Result<&'a [bool]> {
        let g = &self.geometry;
        match (r, self.mask) {
            (RowRef::Mask { ch, row }, Some(m)) => {
                let start = (ch * g.in_h + row) * g.in_w;
                m.bits()
                    .get(start..start + g.in_w)
                    .ok_or_else(|| missing(r))
            }
            _ => Err(missing(r)),
        }
    }

    /// Kernel taps in the order the instruction consumes them.
    pub fn taps(&self, r: RowRef) -> Result<Vec<f64>> {
        match r {
            RowRef::Kernel { f, c, ky } => Ok(self.kernel.row(f, c, ky).to_vec()),
            RowRef::KernelRev { f, c, ky } => Ok(reversed_taps(self.kernel.row(f, c, ky))),
            _ => Err(missing(r)),
        }
    }

    /// Runs `ins` against its destination row; initializes the row first
    /// when the instruction does not accumulate.
    pub fn apply(&self, ins: &RowInstruction, dst: &mut [f64]) -> Result<RowStats> {
        if !ins.accumulate {
            let init = match (ins.bias, ins.dst) {
                (true, RowRef::Output { ch, .. }) => self.kernel.bias[ch],
                _ => 0.0,
            };
            dst.iter_mut().for_each(|d| *d = init);
        }
        let empty = SparseRow::empty(0);
        let src = self.row(ins.src)?.unwrap_or(&empty);
        match ins.op {
            Op::Src => Ok(src_row(
                src,
                &self.taps(ins.taps)?,
                ins.align,
                ins.stride,
                dst,
            )),
            Op::Msrc => {
                let mask = ins.mask.map(|m| self.mask_row(m)).transpose()?;
                Ok(msrc_row(
                    src,
                    &self.taps(ins.taps)?,
                    ins.align,
                    ins.stride,
                    mask,
                    dst,
                ))
            }
            Op::Osrc => {
                let cached = self.row(ins.taps)?.ok_or_else(|| missing(ins.taps))?;
                Ok(osrc_row(src, cached, ins.align, ins.stride, dst))
            }
        }
    }
}

fn missing(r: RowRef) -> Error {
    Error::Usage(format!("operand {r} not available"))
}

/// Runs Forward SRCs; returns the layer output.
pub fn execute_forward(instrs: &[RowInstruction], ops: &LayerOperands) -> Result<Tensor3> {
    let g = ops.geometry;
    let mut out = Tensor3::zeros(g.f, g.out_h, g.out_w);
    for ins in instrs {
        let RowRef::Output { ch, row } = ins.dst else {
            return Err(Error::Usage(format!(
                "SRC destination {} is not an output row",
                ins.dst
            )));
        };
        ops.apply(ins, out.row_mut(ch, row))?;
    }
    Ok(out)
}

/// Runs GTA MSRCs; rows without instructions stay zero.
pub fn execute_gta(instrs: &[RowInstruction], ops: &LayerOperands) -> Result<Tensor3> {
    let g = ops.geometry;
    let mut out = Tensor3::zeros(g.c, g.in_h, g.in_w);
    for ins in instrs {
        let RowRef::DIn { ch, row } = ins.dst else {
            return Err(Error::Usage(format!(
                "MSRC destination {} is not a dI row",
                ins.dst
            )));
        };
        ops.apply(ins, out.row_mut(ch, row))?;
    }
    Ok(out)
}

/// Runs GTW OSRCs; the returned kernel's bias is zero.
pub fn execute_gtw(instrs: &[RowInstruction], ops: &LayerOperands) -> Result<Kernel4> {
    let g = ops.geometry;
    let mut dw = Kernel4::zeros(g.f, g.c, g.k);
    for ins in instrs {
        let RowRef::WGrad { f, c, ky } = ins.dst else {
            return Err(Error::Usage(format!(
                "OSRC destination {} is not a scratchpad",
                ins.dst
            )));
        };
        let start = ((f * g.c + c) * g.k + ky) * g.k;
        ops.apply(ins, &mut dw.weights_mut()[start..start + g.k])?;
    }
    Ok(dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn src_examples() {
        let mut dst = vec![0.0; 3];
        let s = src_row(&SparseRow::empty(5), &[1.0, 2.0, 3.0], 0, 1, &mut dst);
        assert_eq!((s.macs, s.streamed), (0, 0));
        // 1x1 kernel copies a scaled row.
        let row = SparseRow::from_dense(&[1.0, 0.0, -2.0]);
        let mut dst = vec![0.0; 3];
        src_row(&row, &[0.5], 0, 1, &mut dst);
        assert_eq!(dst, vec![0.5, 0.0, -1.0]);
    }

    #[test]
    fn msrc_all_false_mask_does_nothing() {
        let row = SparseRow::from_dense(&[1.0, 2.0, 3.0]);
        let mut dst = vec![0.0; 3];
        let s = msrc_row(&row, &[1.0, 1.0, 1.0], 1, 1, Some(&[false; 3]), &mut dst);
        assert_eq!((s.macs, s.streamed), (0, 0));
        assert!(dst.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn osrc_one_hot_reads_window() {
        let input = SparseRow::from_dense(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let d_out = SparseRow::from_dense(&[0.0, 0.0, 1.0]);
        let mut dst = vec![0.0; 3];
        osrc_row(&input, &d_out, 0, 1, &mut dst);
        assert_eq!(dst, vec![3.0, 4.0, 5.0]);
    }
}
