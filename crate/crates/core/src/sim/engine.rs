//! Per-layer simulation: functional execution plus cycle and event counts.
//!
//! Instruction timing:
//!
//! * SRC: `K` cycles to load the taps into Reg-1, then one cycle per
//!   streamed element; each streamed element multiplies the taps that land
//!   on a destination slot.
//! * MSRC: like SRC, but look-ahead skips every streamed element whose
//!   outputs are all masked off, at no cost. MACs on masked outputs are
//!   skipped individually. Reading the mask row costs one register access
//!   per 64-bit word.
//! * OSRC: one issue cycle, then the cached `dO` stream is taken in chunks
//!   of `K` elements held in Reg-1. Each chunk costs `K` load cycles plus one
//!   cycle per streamed `I` element falling in the union of the chunk's
//!   windows (`s*x - a .. s*x - a + K` for each cached `x`).
//!
//! Register accesses are the tap or chunk loads plus one per MAC (the Reg-2
//! accumulation).

use std::collections::HashSet;

use crate::dataflow::{
    dst_slot, lower_forward, lower_gta, lower_gtw, schedule_by, sparse_rows, LayerOperands, Op,
    RowInstruction, RowRef, Stage,
};
use crate::error::{Error, Result};
use crate::nn::network::PruneJob;
use crate::nn::spec::PruneStructure;
use crate::prune::{prune_row, MagnitudeSum};
use crate::tensor::{BitMask, Kernel4, SparseRow, Tensor3};
use crate::trace::LayerTrace;

use super::{ArchConfig, EventTally, Mode};

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub stage: Stage,
    pub cycles: u64,
    pub tally: EventTally,
    pub instructions: usize,
}

/// Outputs and reports of one CONV layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub layer: usize,
    pub sample: usize,
    pub phases: Vec<PhaseReport>,
    /// Layer output before any activation.
    pub output: Tensor3,
    /// Gradient consumed by GTA and GTW, after PPU pruning.
    pub d_out: Tensor3,
    /// Gradient leaving the layer; `None` when GTA is not lowered.
    pub d_in: Option<Tensor3>,
    /// Weight gradients, with the bias gradient in `bias`.
    pub d_kernel: Kernel4,
    /// PPU magnitude accumulator over the pruning target.
    pub target_sum: MagnitudeSum,
    pub input_density: f64,
    pub d_out_density: f64,
}

impl LayerResult {
    pub fn cycles(&self) -> u64 {
        self.phases.iter().map(|p| p.cycles).sum()
    }

    pub fn tally(&self) -> EventTally {
        let mut t = EventTally::default();
        for p in &self.phases {
            t.add(&p.tally);
        }
        t
    }
}

/// MACs of SRC for the streamed offsets `xs`.
pub fn src_macs(xs: &[usize], k: usize, align: isize, stride: usize, dst_len: usize) -> u64 {
    let s = stride as isize;
    let mut macs = 0;
    for &x in xs {
        for t in 0..k {
            let num = x as isize + align - t as isize;
            if num >= 0 && num % s == 0 && ((num / s) as usize) < dst_len {
                macs += 1;
            }
        }
    }
    macs
}

/// Issue slots and MACs of MSRC for the streamed offsets `xs`.
pub fn msrc_issue(
    xs: &[usize],
    k: usize,
    align: isize,
    stride: usize,
    dst_len: usize,
    mask: Option<&[bool]>,
) -> (u64, u64) {
    let (mut issued, mut macs) = (0, 0);
    for &x in xs {
        let mut hit = 0;
        for t in 0..k {
            let v = (stride * x) as isize - t as isize + align;
            if v >= 0 && (v as usize) < dst_len && mask.is_none_or(|m| m[v as usize]) {
                hit += 1;
            }
        }
        macs += hit;
        if hit > 0 || mask.is_none() {
            issued += 1;
        }
    }
    (issued, macs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OsrcTiming {
    pub cycles: u64,
    pub macs: u64,
    /// Values loaded into Reg-1.
    pub loads: u64,
}

/// OSRC timing for cached `dO` offsets and streamed `I` offsets (`in_len` is
/// the logical length of the `I` row).
pub fn osrc_timing(
    cached: &[usize],
    stream: &[usize],
    k: usize,
    align: isize,
    stride: usize,
    in_len: usize,
) -> OsrcTiming {
    let mut present = vec![false; in_len];
    for &i in stream {
        present[i] = true;
    }
    let mut t = OsrcTiming {
        cycles: 1,
        ..Default::default()
    };
    let mut window = vec![false; in_len];
    for chunk in cached.chunks(k) {
        window.iter_mut().for_each(|w| *w = false);
        for &x in chunk {
            for kk in 0..k {
                let idx = (stride * x + kk) as isize - align;
                if idx >= 0 && (idx as usize) < in_len {
                    window[idx as usize] = true;
                    if present[idx as usize] {
                        t.macs += 1;
                    }
                }
            }
        }
        let hits = window
            .iter()
            .zip(&present)
            .filter(|(w, p)| **w && **p)
            .count();
        t.cycles += (k + hits) as u64;
        t.loads += chunk.len() as u64;
    }
    t
}

fn offsets(row: Option<&SparseRow>, mode: Mode) -> Vec<usize> {
    match (row, mode) {
        (None, _) => Vec::new(),
        (Some(r), Mode::Sparse) => r.offsets().to_vec(),
        (Some(r), Mode::Dense) => (0..r.logical_len()).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct GroupLoad {
    pe_sum: u64,
    pe_max: u64,
    ppu: u64,
}

/// Accumulates one phase: per-group load, events and distinct operand reads.
struct PhaseAcc<'c> {
    cfg: &'c ArchConfig,
    mode: Mode,
    stage: Stage,
    groups: Vec<GroupLoad>,
    tally: EventTally,
    read: HashSet<RowRef>,
    instructions: usize,
}

impl<'c> PhaseAcc<'c> {
    fn new(cfg: &'c ArchConfig, mode: Mode, stage: Stage) -> Self {
        Self {
            cfg,
            mode,
            stage,
            groups: vec![GroupLoad::default(); cfg.n_groups],
            tally: EventTally::default(),
            read: HashSet::new(),
            instructions: 0,
        }
    }

    fn instruction(&mut self, group: usize, cycles: u64, macs: u64, regs: u64) {
        let g = &mut self.groups[group];
        g.pe_sum += cycles;
        g.pe_max = g.pe_max.max(cycles);
        self.tally.macs += macs;
        self.tally.reg_accesses += regs;
        self.instructions += 1;
    }

    /// Reads an operand row once per phase.
    fn read_row(&mut self, key: RowRef, len: usize, nnz: usize) {
        if self.read.insert(key) {
            self.tally.buffer_read_bytes += self.cfg.row_bytes(len, nnz, self.mode);
        }
    }

    fn read_taps(&mut self, key: RowRef, k: usize) {
        let key = match key {
            RowRef::KernelRev { f, c, ky } => RowRef::Kernel { f, c, ky },
            other => other,
        };
        if self.read.insert(key) {
            self.tally.buffer_read_bytes += k as u64 * self.cfg.bytes_per_value;
        }
    }

    /// PPU pass over one row of `len` values.
    fn ppu(&mut self, group: usize, len: usize) {
        self.groups[group].ppu += len as u64;
        self.tally.ppu_ops += len as u64;
    }

    fn write(&mut self, bytes: u64) {
        self.tally.buffer_write_bytes += bytes;
    }

    fn finish(self) -> PhaseReport {
        let p = self.cfg.pes_per_group as u64;
        let slowest = self
            .groups
            .iter()
            .map(|g| g.pe_sum.div_ceil(p).max(g.pe_max).max(g.ppu))
            .max()
            .unwrap_or(0);
        let bytes = self.tally.buffer_read_bytes + self.tally.buffer_write_bytes;
        PhaseReport {
            stage: self.stage,
            cycles: slowest + bytes.div_ceil(self.cfg.bandwidth),
            tally: self.tally,
            instructions: self.instructions,
        }
    }
}

/// Destination tensor of a phase.
enum Dest<'a> {
    Output(&'a mut Tensor3),
    DIn(&'a mut Tensor3),
    WGrad(&'a mut Kernel4),
}

impl Dest<'_> {
    fn row(&mut self, r: RowRef) -> Result<&mut [f64]> {
        match (self, r) {
            (Dest::Output(t), RowRef::Output { ch, row }) => Ok(t.row_mut(ch, row)),
            (Dest::DIn(t), RowRef::DIn { ch, row }) => Ok(t.row_mut(ch, row)),
            (Dest::WGrad(w), RowRef::WGrad { f, c, ky }) => {
                let k = w.k();
                let start = ((f * w.channels() + c) * k + ky) * k;
                Ok(&mut w.weights_mut()[start..start + k])
            }
            _ => Err(Error::Usage(format!("unexpected destination {r}"))),
        }
    }
}

fn owner_of(sched_owners: &[(RowRef, usize)], dst: RowRef) -> Option<usize> {
    sched_owners
        .iter()
        .find(|(r, _)| *r == dst)
        .map(|(_, g)| *g)
}

/// Runs the phase's instructions group by group: functional update of the
/// destination rows in `dst`, plus timing.
fn run_instructions(
    acc: &mut PhaseAcc,
    ops: &LayerOperands,
    instrs: &[RowInstruction],
    mut dst: Dest,
) -> Result<Vec<(RowRef, usize)>> {
    let g = ops.geometry;
    let sched = schedule_by(instrs, acc.cfg.n_groups, |r| dst_slot(&g, r))?;
    let mode = acc.mode;
    for (group, queue) in sched.queues.iter().enumerate() {
        for &idx in queue {
            let ins = &instrs[idx];
            let stats = ops.apply(ins, dst.row(ins.dst)?)?;
            let src = ops.row(ins.src)?;
            if let Some(r) = src {
                acc.read_row(ins.src, r.logical_len(), r.nnz());
            }
            let xs = offsets(src, mode);
            let k = ins.k;
            match ins.op {
                Op::Src => {
                    acc.read_taps(ins.taps, k);
                    let dst_len = dst.row(ins.dst)?.len();
                    let macs = match mode {
                        Mode::Sparse => stats.macs,
                        Mode::Dense => src_macs(&xs, k, ins.align, ins.stride, dst_len),
                    };
                    acc.instruction(group, (k + xs.len()) as u64, macs, k as u64 + macs);
                }
                Op::Msrc => {
                    acc.read_taps(ins.taps, k);
                    let dst_len = dst.row(ins.dst)?.len();
                    let (issued, macs, mask_words) = match mode {
                        Mode::Sparse => (
                            stats.streamed,
                            stats.macs,
                            ins.mask.map_or(0, |_| dst_len.div_ceil(64) as u64),
                        ),
                        Mode::Dense => {
                            let (i, m) = msrc_issue(&xs, k, ins.align, ins.stride, dst_len, None);
                            (i, m, 0)
                        }
                    };
                    acc.instruction(group, k as u64 + issued, macs, k as u64 + macs + mask_words);
                }
                Op::Osrc => {
                    let cached = ops.row(ins.taps)?;
                    if let Some(r) = cached {
                        acc.read_row(ins.taps, r.logical_len(), r.nnz());
                    }
                    let in_len = src.map_or(0, SparseRow::logical_len);
                    let t = osrc_timing(
                        &offsets(cached, mode),
                        &xs,
                        k,
                        ins.align,
                        ins.stride,
                        in_len,
                    );
                    let macs = match mode {
                        Mode::Sparse => stats.macs,
                        Mode::Dense => t.macs,
                    };
                    acc.instruction(group, t.cycles, macs, t.loads + macs);
                }
            }
        }
    }
    Ok(sched.owners)
}

/// Simulates one CONV layer for one sample.
pub fn simulate_layer(cfg: &ArchConfig, tr: &LayerTrace, mode: Mode) -> Result<LayerResult> {
    let g = tr.geometry;
    if g.k > cfg.k_max {
        return Err(Error::Config(format!(
            "layer {}: kernel size {} exceeds k_max {}",
            tr.layer, g.k, cfg.k_max
        )));
    }
    if tr.input.shape() != (g.c, g.in_h, g.in_w)
        || tr.d_out_raw.shape() != (g.f, g.out_h, g.out_w)
        || (tr.kernel.filters(), tr.kernel.channels(), tr.kernel.k()) != (g.f, g.c, g.k)
    {
        return Err(Error::Usage(format!(
            "layer {}: trace shapes do not match the layer geometry",
            tr.layer
        )));
    }
    let sparse = mode == Mode::Sparse;
    let input_rows = sparse_rows(&tr.input);
    let mut phases = Vec::new();

    // Forward.
    let mut output = Tensor3::zeros(g.f, g.out_h, g.out_w);
    {
        let ops = LayerOperands {
            geometry: g,
            input: &input_rows,
            kernel: &tr.kernel,
            d_out: &[],
            mask: None,
        };
        let mut acc = PhaseAcc::new(cfg, mode, Stage::Forward);
        let instrs = lower_forward(tr.layer, &g)?;
        let owners = run_instructions(&mut acc, &ops, &instrs, Dest::Output(&mut output))?;
        for (r, group) in owners {
            if let RowRef::Output { ch, row } = r {
                let o = output.row(ch, row);
                acc.ppu(group, o.len());
                acc.write(cfg.row_bytes(o.len(), nnz(o), mode));
            }
        }
        phases.push(acc.finish());
    }

    // dO pass in the PPU: pruning (CONV-BN-RELU), magnitude and bias sums.
    let prune_d_out = sparse && tr.structure == PruneStructure::ConvBnRelu;
    let prune_d_in = sparse && tr.structure == PruneStructure::ConvRelu && tr.lower_gta;
    let mut d_out = tr.d_out_raw.clone();
    let mut target_sum = MagnitudeSum::default();
    let mut db = vec![0.0; g.f];
    let dout_stage = if tr.lower_gta { Stage::Gta } else { Stage::Gtw };
    let mut dout_acc = PhaseAcc::new(cfg, mode, dout_stage);
    #[allow(clippy::needless_range_loop)]
    for ch in 0..g.f {
        for row in 0..g.out_h {
            let group = (ch * g.out_h + row) % cfg.n_groups;
            let raw_nnz = nnz(d_out.row(ch, row));
            dout_acc.tally.buffer_read_bytes += cfg.row_bytes(g.out_w, raw_nnz, mode);
            dout_acc.ppu(group, g.out_w);
            let r = d_out.row_mut(ch, row);
            if prune_d_out {
                let mut rng = PruneJob::row_rng(tr.seed, tr.layer, tr.sample, ch, row);
                target_sum.merge(prune_row(r, tr.tau, &mut rng));
            }
            for v in r.iter() {
                db[ch] += v;
            }
            if tr.structure == PruneStructure::ConvBnRelu {
                let n = nnz(r);
                dout_acc.write(cfg.row_bytes(g.out_w, n, mode));
            }
        }
    }
    let d_out_rows = sparse_rows(&d_out);
    let mask = (sparse && tr.masked).then(|| BitMask::nonzero(tr.input.data()));
    let ops = LayerOperands {
        geometry: g,
        input: &input_rows,
        kernel: &tr.kernel,
        d_out: &d_out_rows,
        mask: mask.as_ref(),
    };

    // GTA.
    let mut d_in = None;
    if tr.lower_gta {
        let mut acc = dout_acc;
        dout_acc = PhaseAcc::new(cfg, mode, Stage::Gtw);
        let mut di = Tensor3::zeros(g.c, g.in_h, g.in_w);
        let instrs = lower_gta(tr.layer, &g, mask.as_ref(), sparse && tr.masked)?;
        let owners = run_instructions(&mut acc, &ops, &instrs, Dest::DIn(&mut di))?;
        for ch in 0..g.c {
            for row in 0..g.in_h {
                let produced = owner_of(&owners, RowRef::DIn { ch, row });
                let r = di.row_mut(ch, row);
                if prune_d_in {
                    let mut rng = PruneJob::row_rng(tr.seed, tr.layer, tr.sample, ch, row);
                    target_sum.merge(prune_row(r, tr.tau, &mut rng));
                }
                if let Some(group) = produced {
                    acc.ppu(group, g.in_w);
                }
                let n = nnz(r);
                acc.write(cfg.row_bytes(g.in_w, n, mode));
            }
        }
        phases.push(acc.finish());
        d_in = Some(di);
    }

    // GTW.
    let mut d_kernel = Kernel4::zeros(g.f, g.c, g.k);
    {
        let mut acc = dout_acc;
        let instrs = lower_gtw(tr.layer, &g)?;
        let k = g.k;
        let owners = run_instructions(&mut acc, &ops, &instrs, Dest::WGrad(&mut d_kernel))?;
        for (_, group) in owners {
            acc.ppu(group, k);
            acc.write(k as u64 * cfg.bytes_per_value);
        }
        phases.push(acc.finish());
    }
    d_kernel.bias = db;

    // Capacity: everything the layer touches must fit in the buffer at once.
    let vb = cfg.bytes_per_value;
    let tensor_bytes = |t: &Tensor3| -> u64 {
        (0..t.channels())
            .flat_map(|c| (0..t.height()).map(move |y| (c, y)))
            .map(|(c, y)| cfg.row_bytes(t.width(), nnz(t.row(c, y)), mode))
            .sum()
    };
    let weights = (tr.kernel.weights().len() + g.f) as u64 * vb;
    let needed = tensor_bytes(&tr.input)
        + tensor_bytes(&output)
        + tensor_bytes(&d_out)
        + d_in.as_ref().map_or(0, tensor_bytes)
        + 2 * weights;
    if needed > cfg.buffer_bytes {
        return Err(Error::Capacity {
            layer: tr.layer,
            needed,
            capacity: cfg.buffer_bytes,
        });
    }

    Ok(LayerResult {
        layer: tr.layer,
        sample: tr.sample,
        phases,
        input_density: tr.input.density(),
        d_out_density: d_out.density(),
        output,
        d_out,
        d_in,
        d_kernel,
        target_sum,
    })
}

fn nnz(row: &[f64]) -> usize {
    row.iter().filter(|v| **v != 0.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn osrc_examples() {
        // Both rows empty: the issue cycle only.
        assert_eq!(osrc_timing(&[], &[], 3, 0, 1, 5).cycles, 1);
        // Two cached values, dense I of length 6, K = 3: one chunk whose
        // window covers offsets 1..=4.
        let t = osrc_timing(&[1, 2], &[0, 1, 2, 3, 4, 5], 3, 0, 1, 6);
        assert_eq!(t.cycles, 1 + 3 + 4);
        assert_eq!(t.macs, 6);
    }

    #[test]
    fn msrc_mask_examples() {
        let xs = [0, 1, 2, 3];
        let all = [true; 4];
        let none = [false; 4];
        assert_eq!(
            msrc_issue(&xs, 3, 1, 1, 4, Some(&all)),
            msrc_issue(&xs, 3, 1, 1, 4, None)
        );
        assert_eq!(msrc_issue(&xs, 3, 1, 1, 4, Some(&none)), (0, 0));
    }

    #[test]
    fn src_macs_match_valid_outputs() {
        // pad 0, stride 1, K 3 over a row of 6: K * W_out products.
        assert_eq!(src_macs(&[0, 1, 2, 3, 4, 5], 3, 0, 1, 4), 12);
    }
}
