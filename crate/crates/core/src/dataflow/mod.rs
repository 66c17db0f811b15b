//! Lowering of CONV layers into 1-D row instructions, and their scheduling
//! over PE groups.
//!
//! One instruction convolves one streamed row with one row of taps:
//!
//! * `SRC` (Forward): streamed input row `I_j[s*y + ky - pad]`, taps
//!   `W_ij[ky]`, destination `O_i[y]`. Streamed element `x` meets tap `t`
//!   at output `o` when `s*o = x + a - t`, with `a = pad`.
//! * `MSRC` (GTA): streamed `dO_i[y]`, taps `W_ij[ky]` reversed
//!   (`t = K - 1 - kx`), destination `dI_j[u]` with `u = s*y + ky - pad`.
//!   Element `x` meets tap `t` at `v = s*x - t + a`, with `a = K - 1 - pad`.
//!   The mask row of `I_j[u]` marks the outputs that may be nonzero.
//! * `OSRC` (GTW): streamed `I_j[s*y + ky - pad]`, cached vector `dO_i[y]`,
//!   destination the K-slot scratchpad `dW_ij[ky]`:
//!   `dW[k] += sum_x dO[x] * I[s*x + k - a]`, with `a = pad`.
//!
//! Padding is virtual: a streamed row index outside the tensor is an empty
//! row. Instructions are emitted grouped by destination, in the order that
//! fixes the floating-point summation order of the reference convolutions.

mod exec;

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::spec::ConvGeometry;
use crate::tensor::BitMask;

pub use exec::{
    execute_forward, execute_gta, execute_gtw, msrc_row, osrc_row, reversed_taps, sparse_rows,
    src_row, LayerOperands, RowStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Src,
    Msrc,
    Osrc,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Src => "SRC",
            Op::Msrc => "MSRC",
            Op::Osrc => "OSRC",
        }
    }
}

/// A row of one of a layer's tensors. Rows of `I` may lie in the padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowRef {
    Input {
        ch: usize,
        row: isize,
    },
    Output {
        ch: usize,
        row: usize,
    },
    DOut {
        ch: usize,
        row: usize,
    },
    DIn {
        ch: usize,
        row: usize,
    },
    /// Kernel row `W[f][c][ky]`.
    Kernel {
        f: usize,
        c: usize,
        ky: usize,
    },
    /// Kernel row `W[f][c][ky]` read back to front.
    KernelRev {
        f: usize,
        c: usize,
        ky: usize,
    },
    /// Scratchpad accumulating `dW[f][c][ky]`.
    WGrad {
        f: usize,
        c: usize,
        ky: usize,
    },
    /// Nonzero mask of `I[ch][row]`.
    Mask {
        ch: usize,
        row: usize,
    },
}

impl fmt::Display for RowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RowRef::Input { ch, row } => write!(f, "I{ch}.{row}"),
            RowRef::Output { ch, row } => write!(f, "O{ch}.{row}"),
            RowRef::DOut { ch, row } => write!(f, "dO{ch}.{row}"),
            RowRef::DIn { ch, row } => write!(f, "dI{ch}.{row}"),
            RowRef::Kernel { f: a, c, ky } => write!(f, "W{a}.{c}.{ky}"),
            RowRef::KernelRev { f: a, c, ky } => write!(f, "Wr{a}.{c}.{ky}"),
            RowRef::WGrad { f: a, c, ky } => write!(f, "dW{a}.{c}.{ky}"),
            RowRef::Mask { ch, row } => write!(f, "M{ch}.{row}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowInstruction {
    pub op: Op,
    pub layer: usize,
    pub dst: RowRef,
    /// Streamed operand (Port-1).
    pub src: RowRef,
    /// Kernel row, or the cached `dO` row for OSRC (Port-2).
    pub taps: RowRef,
    pub k: usize,
    pub align: isize,
    pub stride: usize,
    pub mask: Option<RowRef>,
    /// False on the first instruction into `dst`, which initializes it.
    pub accumulate: bool,
    /// Set on the first SRC of every output row: the row starts from the bias.
    pub bias: bool,
}

impl fmt::Display for RowInstruction {
    /// `OP layer dst src taps align stride [mask]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {}",
            self.op.name(),
            self.layer,
            self.dst,
            self.src,
            self.taps,
            self.align,
            self.stride
        )?;
        if let Some(m) = self.mask {
            write!(f, " {m}")?;
        }
        Ok(())
    }
}

/// One instruction per line.
pub fn dump(instrs: &[RowInstruction]) -> String {
    let mut s = String::new();
    for i in instrs {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    s
}

fn check_geometry(g: &ConvGeometry) -> Result<()> {
    if g.pad >= g.k {
        return Err(Error::Compile(format!(
            "padding {} not below kernel size {}: some outputs would see only padding",
            g.pad, g.k
        )));
    }
    Ok(())
}

/// SRCs of one CONV layer: per `(i, y)` destination, `j` then `ky` ascending.
/// Count `F * C * K * H_out`, padding rows included.
pub fn lower_forward(layer: usize, g: &ConvGeometry) -> Result<Vec<RowInstruction>> {
    check_geometry(g)?;
    let mut out = Vec::with_capacity(g.f * g.c * g.k * g.out_h);
    for i in 0..g.f {
        for y in 0..g.out_h {
            for j in 0..g.c {
                for ky in 0..g.k {
                    let first = j == 0 && ky == 0;
                    out.push(RowInstruction {
                        op: Op::Src,
                        layer,
                        dst: RowRef::Output { ch: i, row: y },
                        src: RowRef::Input {
                            ch: j,
                            row: (g.stride * y + ky) as isize - g.pad as isize,
                        },
                        taps: RowRef::Kernel { f: i, c: j, ky },
                        k: g.k,
                        align: g.pad as isize,
                        stride: g.stride,
                        mask: None,
                        accumulate: !first,
                        bias: first,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// MSRCs of one CONV layer: per `(j, u)` destination, `i` then `y`
/// ascending. `mask` is the nonzero mask of the whole layer input; it is
/// required when `mask_required` is set, and rows whose mask is entirely
/// false produce no instructions.
pub fn lower_gta(
    layer: usize,
    g: &ConvGeometry,
    mask: Option<&BitMask>,
    mask_required: bool,
) -> Result<Vec<RowInstruction>> {
    check_geometry(g)?;
    if mask_required && mask.is_none() {
        return Err(Error::Compile(format!(
            "layer {layer}: GTA needs the input mask of its ReLU predecessor"
        )));
    }
    if let Some(m) = mask {
        if m.len() != g.c * g.in_h * g.in_w {
            return Err(Error::Compile(format!(
                "layer {layer}: mask has {} bits, input has {}",
                m.len(),
                g.c * g.in_h * g.in_w
            )));
        }
    }
    let mut out = Vec::new();
    for j in 0..g.c {
        for u in 0..g.in_h {
            if let Some(m) = mask {
                let start = (j * g.in_h + u) * g.in_w;
                if !m.bits()[start..start + g.in_w].iter().any(|b| *b) {
                    continue;
                }
            }
            let mut first = true;
            for i in 0..g.f {
                for r in 0..g.k {
                    let ky = g.k - 1 - r;
                    let num = (u + g.pad) as isize - ky as isize;
                    if num < 0 || !(num as usize).is_multiple_of(g.stride) {
                        continue;
                    }
                    let y = num as usize / g.stride;
                    if y >= g.out_h {
                        continue;
                    }
                    out.push(RowInstruction {
                        op: Op::Msrc,
                        layer,
                        dst: RowRef::DIn { ch: j, row: u },
                        src: RowRef::DOut { ch: i, row: y },
                        taps: RowRef::KernelRev { f: i, c: j, ky },
                        k: g.k,
                        align: (g.k - 1 - g.pad) as isize,
                        stride: g.stride,
                        mask: mask.map(|_| RowRef::Mask { ch: j, row: u }),
                        accumulate: !first,
                        bias: false,
                    });
                    first = false;
                }
            }
        }
    }
    Ok(out)
}

/// OSRCs of one CONV layer: per `(i, j, ky)` scratchpad, `y` ascending.
pub fn lower_gtw(layer: usize, g: &ConvGeometry) -> Result<Vec<RowInstruction>> {
    check_geometry(g)?;
    let mut out = Vec::with_capacity(g.f * g.c * g.k * g.out_h);
    for i in 0..g.f {
        for j in 0..g.c {
            for ky in 0..g.k {
                for y in 0..g.out_h {
                    out.push(RowInstruction {
                        op: Op::Osrc,
                        layer,
                        dst: RowRef::WGrad { f: i, c: j, ky },
                        src: RowRef::Input {
                            ch: j,
                            row: (g.stride * y + ky) as isize - g.pad as isize,
                        },
                        taps: RowRef::DOut { ch: i, row: y },
                        k: g.k,
                        align: g.pad as isize,
                        stride: g.stride,
                        mask: None,
                        accumulate: y > 0,
                        bias: false,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Forward,
    Gta,
    Gtw,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Gta => "gta",
            Stage::Gtw => "gtw",
        }
    }
}

/// One stage of one layer: the unit between synchronization barriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Phase {
    pub layer: usize,
    pub stage: Stage,
}

/// Per-group instruction queues of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Indices into the lowered instruction list, in issue order.
    pub queues: Vec<Vec<usize>>,
    /// Group owning each destination row, in first-appearance order.
    pub owners: Vec<(RowRef, usize)>,
}

/// Round-robin by destination row: destinations are dealt to groups in
/// first-appearance order, and every instruction follows its destination,
/// so each accumulation stays on one group in lowering order.
pub fn schedule(instrs: &[RowInstruction], n_groups: usize) -> Result<Schedule> {
    let mut seen: HashMap<RowRef, usize> = HashMap::new();
    schedule_by(instrs, n_groups, |r| {
        let n = seen.len();
        *seen.entry(r).or_insert(n)
    })
}

/// Like [`schedule`], but destination `r` goes to group `slot(r) % n_groups`.
/// With [`dst_slot`] the assignment of a row does not depend on which other
/// rows were lowered, so eliding rows never moves the rest.
pub fn schedule_by(
    instrs: &[RowInstruction],
    n_groups: usize,
    mut slot: impl FnMut(RowRef) -> usize,
) -> Result<Schedule> {
    if n_groups == 0 {
        return Err(Error::Config("at least one PE group required".into()));
    }
    let mut queues = vec![Vec::new(); n_groups];
    let mut owner: HashMap<RowRef, usize> = HashMap::new();
    let mut owners = Vec::new();
    for (idx, ins) in instrs.iter().enumerate() {
        let g = match owner.get(&ins.dst) {
            Some(&g) => g,
            None => {
                let g = slot(ins.dst) % n_groups;
                owner.insert(ins.dst, g);
                owners.push((ins.dst, g));
                g
            }
        };
        queues[g].push(idx);
    }
    Ok(Schedule { queues, owners })
}

/// Position of a destination row in its tensor, in lowering order.
pub fn dst_slot(g: &ConvGeometry, r: RowRef) -> usize {
    match r {
        RowRef::Output { ch, row } => ch * g.out_h + row,
        RowRef::DIn { ch, row } => ch * g.in_h + row,
        RowRef::WGrad { f, c, ky } => (f * g.c + c) * g.k + ky,
        RowRef::DOut { ch, row } => ch * g.out_h + row,
        RowRef::Input { ch, row } => ch * g.in_h + row.max(0) as usize,
        RowRef::Kernel { f, c, ky } | RowRef::KernelRev { f, c, ky } => (f * g.c + c) * g.k + ky,
        RowRef::Mask { ch, row } => ch * g.in_h + row,
    }
}

/// Phase-level dependency edges of one training step over `convs` (CONV
/// layer ids in network order): forward flows up, GTA flows down, and each
/// layer's GTW waits for the GTA that produces its `dO`.
pub fn step_edges(convs: &[usize], lowered_gta: impl Fn(usize) -> bool) -> Vec<(Phase, Phase)> {
    let ph = |layer, stage| Phase { layer, stage };
    let mut edges = Vec::new();
    for w in convs.windows(2) {
        let (a, b) = (w[0], w[1]);
        edges.push((ph(a, Stage::Forward), ph(b, Stage::Forward)));
        if lowered_gta(b) {
            if lowered_gta(a) {
                edges.push((ph(b, Stage::Gta), ph(a, Stage::Gta)));
            }
            edges.push((ph(b, Stage::Gta), ph(a, Stage::Gtw)));
        }
    }
    if let Some(&last) = convs.last() {
        let first_back = if lowered_gta(last) {
            Stage::Gta
        } else {
            Stage::Gtw
        };
        edges.push((ph(last, Stage::Forward), ph(last, first_back)));
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(c: usize, f: usize, k: usize, s: usize, p: usize, h: usize, w: usize) -> ConvGeometry {
        ConvGeometry::new(c, f, k, s, p, h, w).unwrap()
    }

    #[test]
    fn forward_count_and_bias_flags() {
        let g = geo(3, 2, 3, 1, 1, 5, 5);
        let ins = lower_forward(0, &g).unwrap();
        assert_eq!(ins.len(), 2 * 3 * 3 * 5);
        assert_eq!(ins.iter().filter(|i| i.bias).count(), 2 * 5);
        assert!(ins.iter().all(|i| i.bias != i.accumulate));
        let k1 = lower_forward(0, &geo(1, 4, 1, 1, 0, 6, 6)).unwrap();
        assert_eq!(k1.len(), 4 * 6);
        assert!(k1.iter().all(|i| i.op == Op::Src));
    }

    #[test]
    fn gta_mask_handling() {
        let g = geo(2, 2, 3, 1, 1, 4, 4);
        assert!(matches!(
            lower_gta(3, &g, None, true),
            Err(Error::Compile(_))
        ));
        let none = lower_gta(3, &g, Some(&BitMask::all(32, false)), true).unwrap();
        assert!(none.is_empty());
        let all = lower_gta(3, &g, Some(&BitMask::all(32, true)), true).unwrap();
        let nomask = lower_gta(3, &g, None, false).unwrap();
        assert_eq!(all.len(), nomask.len());
        assert!(nomask.iter().all(|i| i.mask.is_none()));
        assert!(!dump(&nomask).contains(" M"));
    }

    #[test]
    fn padding_at_least_k_rejected() {
        assert!(lower_forward(0, &geo(1, 1, 1, 1, 1, 3, 3)).is_err());
    }

    #[test]
    fn dump_line_format() {
        let ins = lower_forward(2, &geo(1, 1, 3, 2, 1, 5, 5)).unwrap();
        assert_eq!(ins[0].to_string(), "SRC 2 O0.0 I0.-1 W0.0.0 1 2");
        let g = geo(1, 1, 3, 1, 0, 3, 3);
        let gta = lower_gta(2, &g, Some(&BitMask::all(9, true)), true).unwrap();
        assert_eq!(gta[0].to_string(), "MSRC 2 dI0.0 dO0.0 Wr0.0.0 2 1 M0.0");
    }

    #[test]
    fn schedule_partitions_by_destination() {
        let ins = lower_forward(0, &geo(2, 3, 3, 1, 1, 4, 4)).unwrap();
        let one = schedule(&ins, 1).unwrap();
        assert_eq!(one.queues[0], (0..ins.len()).collect::<Vec<_>>());
        let s = schedule(&ins, 5).unwrap();
        assert_eq!(s.queues.iter().map(Vec::len).sum::<usize>(), ins.len());
        for (dst, g) in &s.owners {
            for (q, queue) in s.queues.iter().enumerate() {
                assert_eq!(queue.iter().any(|&i| ins[i].dst == *dst), q == *g);
            }
        }
        assert!(schedule(&ins, 0).is_err());
    }

    #[test]
    fn static_slots_match_first_appearance_and_survive_elision() {
        let g = geo(2, 3, 3, 2, 1, 6, 6);
        for ins in [lower_forward(0, &g).unwrap(), lower_gtw(0, &g).unwrap()] {
            let a = schedule(&ins, 4).unwrap();
            let b = schedule_by(&ins, 4, |r| dst_slot(&g, r)).unwrap();
            assert_eq!(a, b);
        }
        let full = lower_gta(0, &g, None, false).unwrap();
        let mut bits = vec![true; 72];
        bits[6..12].iter_mut().for_each(|b| *b = false);
        let elided = lower_gta(0, &g, Some(&BitMask::new(bits)), true).unwrap();
        assert!(elided.len() < full.len());
        let a = schedule_by(&full, 4, |r| dst_slot(&g, r)).unwrap();
        let b = schedule_by(&elided, 4, |r| dst_slot(&g, r)).unwrap();
        for (r, grp) in &b.owners {
            assert!(a.owners.contains(&(*r, *grp)));
        }
    }

    #[test]
    fn edges_cover_layer_boundaries() {
        let e = step_edges(&[0, 4], |l| l > 0);
        let ph = |layer, stage| Phase { layer, stage };
        assert!(e.contains(&(ph(0, Stage::Forward), ph(4, Stage::Forward))));
        assert!(e.contains(&(ph(4, Stage::Gta), ph(0, Stage::Gtw))));
        assert!(!e.iter().any(|(_, b)| *b == ph(0, Stage::Gta)));
    }
}
