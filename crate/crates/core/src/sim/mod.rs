//! Event-counting model of the PE-group accelerator.
//!
//! The machine has `n_groups` groups of `pes_per_group` PEs plus one Post
//! Processing Unit (PPU) per group, and a global buffer with a fixed
//! bandwidth. Each CONV layer of a training step runs as up to three phases
//! (Forward, GTA, GTW) separated by barriers. Within a phase:
//!
//! * instruction cycles follow per-op formulas (see [`engine`]);
//! * a group's PEs take `max(ceil(sum / P), longest instruction)` cycles,
//!   the balanced split of the group queue over its `P` PEs;
//! * the PPU spends one cycle per value of every row it finalizes, in
//!   parallel with the PEs; a group takes the larger of the two;
//! * the phase takes the slowest group plus `ceil(bytes / bandwidth)` for
//!   its buffer traffic. Each distinct operand row is read once per phase
//!   and multicast to the groups that use it.
//!
//! Sparse mode streams compressed rows (nonzeros only), skips masked GTA
//! outputs and prunes in the PPU. Dense mode is the same machine with all of
//! that disabled: every real element streams and rows move uncompressed.

pub mod engine;

use serde::{Deserialize, Serialize};

use crate::dataflow::Stage;
use crate::error::{config, Result};
use crate::par::{map_slice, Exec};
use crate::trace::StepTrace;

pub use engine::{simulate_layer, LayerResult, PhaseReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sparse,
    Dense,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sparse => "sparse",
            Mode::Dense => "dense",
        }
    }
}

/// Picojoules per event. The defaults are placeholders, not calibrated
/// against any process node; compare ratios, not absolute values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostTable {
    /// Per byte.
    pub buffer_read: f64,
    /// Per byte.
    pub buffer_write: f64,
    pub reg_access: f64,
    pub mac: f64,
    pub ppu_op: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        Self {
            buffer_read: 1.5,
            buffer_write: 1.5,
            reg_access: 0.1,
            mac: 0.5,
            ppu_op: 0.2,
        }
    }
}

impl CostTable {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            buffer_read: self.buffer_read * factor,
            buffer_write: self.buffer_write * factor,
            reg_access: self.reg_access * factor,
            mac: self.mac * factor,
            ppu_op: self.ppu_op * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub n_groups: usize,
    pub pes_per_group: usize,
    /// Largest kernel row a PE register holds.
    pub k_max: usize,
    pub buffer_bytes: u64,
    pub bytes_per_value: u64,
    /// Bytes of one offset in a compressed row.
    pub bytes_per_index: u64,
    /// Global buffer bytes per cycle.
    pub bandwidth: u64,
    pub costs: CostTable,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_groups: 56,
            pes_per_group: 3,
            k_max: 11,
            buffer_bytes: 386 * 1024,
            bytes_per_value: 2,
            bytes_per_index: 1,
            bandwidth: 16,
            costs: CostTable::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.pes_per_group == 0 {
            return config("need at least one PE group and one PE per group");
        }
        if self.k_max == 0 || self.bytes_per_value == 0 || self.bandwidth == 0 {
            return config("k_max, bytes_per_value and bandwidth must be positive");
        }
        let c = &self.costs;
        for (name, v) in [
            ("buffer_read", c.buffer_read),
            ("buffer_write", c.buffer_write),
            ("reg_access", c.reg_access),
            ("mac", c.mac),
            ("ppu_op", c.ppu_op),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!(
                    "cost {name} must be finite and non-negative, got {v}"
                ));
            }
        }
        Ok(())
    }

    /// Bytes of a row of `len` values with `nnz` nonzeros as it moves in `mode`.
    /// Sparse mode keeps the smaller of the compressed and plain encodings.
    pub fn row_bytes(&self, len: usize, nnz: usize, mode: Mode) -> u64 {
        let plain = len as u64 * self.bytes_per_value;
        match mode {
            Mode::Dense => plain,
            Mode::Sparse => plain.min(nnz as u64 * (self.bytes_per_value + self.bytes_per_index)),
        }
    }
}

/// Event counts. Every field only grows while a run proceeds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTally {
    pub macs: u64,
    pub buffer_read_bytes: u64,
    pub buffer_write_bytes: u64,
    pub reg_accesses: u64,
    pub ppu_ops: u64,
}

impl EventTally {
    pub fn add(&mut self, o: &EventTally) {
        self.macs += o.macs;
        self.buffer_read_bytes += o.buffer_read_bytes;
        self.buffer_write_bytes += o.buffer_write_bytes;
        self.reg_accesses += o.reg_accesses;
        self.ppu_ops += o.ppu_ops;
    }

    pub fn energy_pj(&self, c: &CostTable) -> f64 {
        self.buffer_read_bytes as f64 * c.buffer_read
            + self.buffer_write_bytes as f64 * c.buffer_write
            + self.reg_accesses as f64 * c.reg_access
            + self.macs as f64 * c.mac
            + self.ppu_ops as f64 * c.ppu_op
    }
}

/// One report line: a phase of a layer, a layer total, or the grand total.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// `None` for the grand total.
    pub layer: Option<usize>,
    /// `None` for totals.
    pub stage: Option<Stage>,
    pub cycles: u64,
    pub tally: EventTally,
}

/// Sums over the simulated samples of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub mode: Mode,
    pub samples: usize,
    pub costs: CostTable,
    pub rows: Vec<ReportRow>,
    /// Observed densities per layer: `(layer, density of I, density of consumed dO)`.
    pub densities: Vec<(usize, f64, f64)>,
}

pub const CSV_HEADER: &str =
    "layer,step,mode,cycles,mac_events,buffer_read_bytes,buffer_write_bytes,reg_accesses,energy_pj";

impl SimReport {
    /// Aggregates per-sample layer results, which must come in step order.
    pub fn from_results(mode: Mode, costs: CostTable, steps: &[Vec<LayerResult>]) -> Self {
        let mut rows: Vec<ReportRow> = Vec::new();
        let mut dens: Vec<(usize, f64, f64, usize)> = Vec::new();
        for step in steps {
            for lr in step {
                for ph in &lr.phases {
                    match rows
                        .iter_mut()
                        .find(|r| r.layer == Some(lr.layer) && r.stage == Some(ph.stage))
                    {
                        Some(r) => {
                            r.cycles += ph.cycles;
                            r.tally.add(&ph.tally);
                        }
                        None => rows.push(ReportRow {
                            layer: Some(lr.layer),
                            stage: Some(ph.stage),
                            cycles: ph.cycles,
                            tally: ph.tally,
                        }),
                    }
                }
                match dens.iter_mut().find(|d| d.0 == lr.layer) {
                    Some(d) => {
                        d.1 += lr.input_density;
                        d.2 += lr.d_out_density;
                        d.3 += 1;
                    }
                    None => dens.push((lr.layer, lr.input_density, lr.d_out_density, 1)),
                }
            }
        }
        rows.sort_by_key(|r| (r.layer, r.stage));
        let mut out = Vec::new();
        let mut total = ReportRow {
            layer: None,
            stage: None,
            cycles: 0,
            tally: EventTally::default(),
        };
        let mut i = 0;
        while i < rows.len() {
            let layer = rows[i].layer;
            let mut lt = ReportRow {
                layer,
                stage: None,
                cycles: 0,
                tally: EventTally::default(),
            };
            while i < rows.len() && rows[i].layer == layer {
                lt.cycles += rows[i].cycles;
                lt.tally.add(&rows[i].tally);
                out.push(rows[i].clone());
                i += 1;
            }
            total.cycles += lt.cycles;
            total.tally.add(&lt.tally);
            out.push(lt);
        }
        out.push(total);
        Self {
            mode,
            samples: steps.len(),
            costs,
            rows: out,
            densities: dens
                .into_iter()
                .map(|(l, a, b, n)| (l, a / n as f64, b / n as f64))
                .collect(),
        }
    }

    pub fn total(&self) -> &ReportRow {
        self.rows.last().expect("report always has a total row")
    }

    pub fn total_cycles(&self) -> u64 {
        self.total().cycles
    }

    pub fn total_energy(&self) -> f64 {
        self.total().tally.energy_pj(&self.costs)
    }

    /// CSV lines without the header.
    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{:.3}",
                    r.layer.map_or("all".to_string(), |l| l.to_string()),
                    r.stage.map_or("total", Stage::name),
                    self.mode.name(),
                    r.cycles,
                    r.tally.macs,
                    r.tally.buffer_read_bytes,
                    r.tally.buffer_write_bytes,
                    r.tally.reg_accesses,
                    r.tally.energy_pj(&self.costs)
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for line in self.csv_rows() {
            s.push_str(&line);
            s.push('\n');
        }
        s
    }
}

/// Simulates one training step (one sample) in `mode`; layers run
/// independently and come back in network order.
pub fn run_step(
    cfg: &ArchConfig,
    step: &StepTrace,
    mode: Mode,
    exec: Exec,
) -> Result<Vec<LayerResult>> {
    cfg.validate()?;
    map_slice(exec, &step.layers, |_, lt| simulate_layer(cfg, lt, mode))
        .into_iter()
        .collect()
}

/// Simulates every step in `mode` and aggregates.
pub fn run(cfg: &ArchConfig, steps: &[StepTrace], mode: Mode, exec: Exec) -> Result<SimReport> {
    let results = steps
        .iter()
        .map(|s| run_step(cfg, s, mode, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimReport::from_results(mode, cfg.costs, &results))
}
