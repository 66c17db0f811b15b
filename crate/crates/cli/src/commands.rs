//! The four subcommands. Each `run_*` function computes in memory; the
//! `cmd_*` wrappers write the artifacts and the manifest block.

use std::path::PathBuf;

use gradsparse::dataflow::{
    dst_slot, dump, lower_forward, lower_gta, lower_gtw, schedule_by, RowInstruction,
};
use gradsparse::nn::{EpochReport, Network, Trainer};
use gradsparse::sim::{run, Mode, SimReport, CSV_HEADER};
use gradsparse::trace::StepTrace;
use gradsparse::{BitMask, Exec};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{config, CliError, Result};
use crate::output::{num, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RunMode {
    Sparse,
    Dense,
    Both,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Sparse => "sparse",
            RunMode::Dense => "dense",
            RunMode::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DumpStage {
    Forward,
    Gta,
    Gtw,
    All,
}

fn hash_hex(chunks: impl IntoIterator<Item = Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(&c);
    }
    hex::encode(h.finalize())
}

fn weights_hash(net: &Network) -> String {
    hash_hex(
        net.param_slices()
            .into_iter()
            .map(|s| s.iter().flat_map(|v| v.to_le_bytes()).collect()),
    )
}

fn order_hash(t: &Trainer, n: usize, epochs: usize) -> String {
    hash_hex((0..epochs).map(|e| {
        t.epoch_order(n, e)
            .into_iter()
            .flat_map(|i| (i as u64).to_le_bytes())
            .collect()
    }))
}

pub struct TrainRun {
    /// `baseline` or `pruned`.
    pub name: &'static str,
    pub reports: Vec<EpochReport>,
    /// `(loss, accuracy)` on the held-out set after every epoch.
    pub held_out: Vec<(f64, f64)>,
}

impl TrainRun {
    /// Held-out accuracy after the last epoch, else training accuracy.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.held_out
            .last()
            .map(|t| t.1)
            .or_else(|| self.reports.last().map(|r| r.accuracy))
    }
}

pub struct Training {
    pub runs: Vec<TrainRun>,
    pub init_hash: String,
    pub order_hash: String,
    pub conv_layers: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Training {
    pub fn run(&self, name: &str) -> Option<&TrainRun> {
        self.runs.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec!["epoch".to_string()];
        for r in &self.runs {
            for c in ["loss", "accuracy", "train_loss"] {
                cols.push(format!("{}_{c}", r.name));
            }
            if !r.held_out.is_empty() {
                cols.push(format!("{}_test_loss", r.name));
                cols.push(format!("{}_test_accuracy", r.name));
            }
            for l in &self.conv_layers {
                for c in ["rho", "density", "tau"] {
                    cols.push(format!("{}_{c}_L{l}", r.name));
                }
            }
        }
        let mut out = cols.join(",");
        out.push('\n');
        let epochs = self.runs.first().map_or(0, |r| r.reports.len());
        for e in 0..epochs {
            let mut line = vec![e.to_string()];
            for r in &self.runs {
                let rep = &r.reports[e];
                line.extend([
                    num(Some(rep.loss)),
                    num(Some(rep.accuracy)),
                    num(Some(rep.train_loss)),
                ]);
                if let Some((l, a)) = r.held_out.get(e) {
                    line.extend([num(Some(*l)), num(Some(*a))]);
                }
                for l in &rep.layers {
                    line.extend([num(Some(l.rho)), num(Some(l.target_density)), num(l.tau)]);
                }
            }
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn train_mode(cfg: &ExperimentConfig, mode: Option<RunMode>) -> Result<RunMode> {
    match (mode, cfg.prune.is_some()) {
        (None, true) => Ok(RunMode::Both),
        (None, false) => Ok(RunMode::Dense),
        (Some(RunMode::Dense), _) => Ok(RunMode::Dense),
        (Some(m), true) => Ok(m),
        (Some(m), false) => config(format!("--mode {} needs [prune] or --prune-p", m.name())),
    }
}

/// Trains the baseline, the pruned network or both from one seed. Both runs
/// start from the same weights and see the same sample order; the hashes
/// of both are compared before training starts.
pub fn run_training(cfg: &ExperimentConfig, mode: Option<RunMode>, exec: Exec) -> Result<Training> {
    cfg.validate()?;
    let mode = train_mode(cfg, mode)?;
    let (data, test) = cfg.split()?;
    let net = Network::init(cfg.network.clone(), cfg.seed)?;
    let mut plan: Vec<(&'static str, Option<_>)> = Vec::new();
    if mode != RunMode::Sparse {
        plan.push(("baseline", None));
    }
    if mode != RunMode::Dense {
        plan.push(("pruned", cfg.prune));
    }
    let mut trainers = plan
        .iter()
        .map(|(_, p)| Trainer::new(net.clone(), *p, cfg.seed, exec))
        .collect::<gradsparse::Result<Vec<_>>>()?;
    let init: Vec<String> = trainers.iter().map(|t| weights_hash(&t.net)).collect();
    let orders: Vec<String> = trainers
        .iter()
        .map(|t| order_hash(t, data.len(), cfg.epochs))
        .collect();
    if init.windows(2).any(|w| w[0] != w[1]) || orders.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::Integrity(format!(
            "init {init:?}, order {orders:?}"
        )));
    }
    let mut warnings = Vec::new();
    if let Some(p) = &cfg.prune {
        let batches = cfg.epochs * data.len().div_ceil(cfg.network.batch_size);
        warnings.extend(p.depth_warning(batches));
    }
    let mut reports = vec![Vec::with_capacity(cfg.epochs); trainers.len()];
    let mut held_out = vec![Vec::new(); trainers.len()];
    for e in 0..cfg.epochs {
        for ((t, r), h) in trainers
            .iter_mut()
            .zip(reports.iter_mut())
            .zip(held_out.iter_mut())
        {
            r.push(t.train_epoch(&data, e)?);
            if let Some(test) = &test {
                h.push(t.evaluate(test)?);
            }
        }
    }
    Ok(Training {
        runs: plan
            .iter()
            .zip(reports.into_iter().zip(held_out))
            .map(|((name, _), (reports, held_out))| TrainRun {
                name,
                reports,
                held_out,
            })
            .collect(),
        init_hash: init[0].clone(),
        order_hash: orders[0].clone(),
        conv_layers: cfg.network.conv_layers(),
        warnings,
    })
}

fn manifest_head(cfg: &ExperimentConfig, command: &str) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("command", command.to_string()),
        ("seed", cfg.seed.to_string()),
        ("config_sha256", cfg.hash()?),
    ])
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    mode: Option<RunMode>,
    exec: Exec,
) -> Result<(Training, PathBuf)> {
    let tr = run_training(cfg, mode, exec)?;
    let mut dir = RunDir::create(&cfg.out)?;
    let csv = dir.write("train", "csv", &tr.to_csv())?;
    let mut m = manifest_head(cfg, "train")?;
    m.push((
        "mode",
        tr.runs.iter().map(|r| r.name).collect::<Vec<_>>().join("+"),
    ));
    m.push(("init_sha256", tr.init_hash.clone()));
    m.push(("order_sha256", tr.order_hash.clone()));
    dir.record(&m)?;
    Ok((tr, csv))
}

pub struct Simulation {
    pub reports: Vec<SimReport>,
}

impl Simulation {
    pub fn report(&self, mode: Mode) -> Option<&SimReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.reports {
            for line in r.csv_rows() {
                s.push_str(&line);
                s.push('\n');
            }
        }
        s
    }

    /// Dense over sparse cycles.
    pub fn speedup(&self) -> Option<f64> {
        let (s, d) = (self.report(Mode::Sparse)?, self.report(Mode::Dense)?);
        Some(d.total_cycles() as f64 / s.total_cycles() as f64)
    }

    pub fn energy_ratio(&self) -> Option<f64> {
        let (s, d) = (self.report(Mode::Sparse)?, self.report(Mode::Dense)?);
        Some(d.total_energy() / s.total_energy())
    }

    /// Mean density of the CONV inputs that come out of a ReLU, and of the
    /// gradient every CONV layer consumes, over layers and samples.
    pub fn densities(&self, masked: &[usize]) -> (f64, f64) {
        let Some(r) = self.reports.first() else {
            return (0.0, 0.0);
        };
        let acts: Vec<f64> = r
            .densities
            .iter()
            .filter(|d| masked.contains(&d.0))
            .map(|d| d.1)
            .collect();
        let grads: Vec<f64> = r.densities.iter().map(|d| d.2).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        (mean(&acts), mean(&grads))
    }

    pub fn summary_csv(&self, masked: &[usize]) -> Option<String> {
        let (s, d) = (self.report(Mode::Sparse)?, self.report(Mode::Dense)?);
        let (a, g) = self.densities(masked);
        Some(format!(
            "sparse_cycles,dense_cycles,speedup,sparse_energy_pj,dense_energy_pj,energy_ratio,activation_density,gradient_density\n\
             {},{},{:.4},{:.3},{:.3},{:.4},{:.4},{:.4}\n",
            s.total_cycles(),
            d.total_cycles(),
            self.speedup()?,
            s.total_energy(),
            d.total_energy(),
            self.energy_ratio()?,
            a,
            g
        ))
    }
}

/// Trains `simulate.warmup_epochs` epochs (pruned when `[prune]` is set),
/// then traces the first `simulate.samples` samples of the first batch
/// and runs them in the requested modes.
pub fn run_simulation(
    cfg: &ExperimentConfig,
    mode: Option<RunMode>,
    exec: Exec,
) -> Result<Simulation> {
    cfg.validate()?;
    let arch = cfg.arch()?;
    let (data, _) = cfg.split()?;
    let net = Network::init(cfg.network.clone(), cfg.seed)?;
    let mut t = Trainer::new(net, cfg.prune, cfg.seed, exec)?;
    for e in 0..cfg.simulate.warmup_epochs {
        t.train_epoch(&data, e)?;
    }
    let bs = cfg.network.batch_size.min(data.len());
    let step = t.probe_batch(&data.images[..bs], &data.labels[..bs])?;
    let job = t.prune_config().map(|_| &step.job);
    let traces = (0..cfg.simulate.samples.min(bs))
        .map(|s| StepTrace::capture(&t.net, &step.ctx, &step.backward, job, s))
        .collect::<gradsparse::Result<Vec<_>>>()?;
    let modes: &[Mode] = match mode.unwrap_or(RunMode::Both) {
        RunMode::Sparse => &[Mode::Sparse],
        RunMode::Dense => &[Mode::Dense],
        RunMode::Both => &[Mode::Sparse, Mode::Dense],
    };
    let reports = modes
        .iter()
        .map(|&m| run(&arch, &traces, m, exec))
        .collect::<gradsparse::Result<Vec<_>>>()?;
    Ok(Simulation { reports })
}

pub fn masked_layers(cfg: &ExperimentConfig) -> Vec<usize> {
    cfg.network
        .conv_layers()
        .into_iter()
        .filter(|&l| cfg.network.input_masked(l))
        .collect()
}

pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    mode: Option<RunMode>,
    exec: Exec,
) -> Result<(Simulation, Vec<PathBuf>)> {
    let sim = run_simulation(cfg, mode, exec)?;
    let mut dir = RunDir::create(&cfg.out)?;
    dir.write("simulate", "csv", &sim.to_csv())?;
    let mut m = manifest_head(cfg, "simulate")?;
    m.push(("mode", mode.unwrap_or(RunMode::Both).name().to_string()));
    if let Some(s) = sim.summary_csv(&masked_layers(cfg)) {
        dir.write("summary", "csv", &s)?;
    }
    dir.record(&m)?;
    Ok((sim, dir.written().to_vec()))
}

/// Instruction stream of CONV layer `layer` under the initial weights, one
/// `# group` block per PE group in issue order. GTA uses the input mask of
/// the first sample of the first batch when the layer input comes from a
/// ReLU.
pub fn run_dump(cfg: &ExperimentConfig, layer: usize, stage: DumpStage) -> Result<String> {
    cfg.validate()?;
    let spec = &cfg.network;
    if layer >= spec.layers.len() || !spec.layers[layer].is_conv() {
        return Err(gradsparse::Error::Usage(format!(
            "layer {layer} is not a CONV layer; CONV layers are {:?}",
            spec.conv_layers()
        ))
        .into());
    }
    let g = spec.geometry(layer)?;
    let arch = cfg.arch()?;
    let mask = if spec.input_masked(layer) {
        let data = cfg.dataset()?;
        let net = Network::init(spec.clone(), cfg.seed)?;
        let bs = spec.batch_size.min(data.len());
        let (_, ctx) = net.forward(&data.images[..bs], Exec::Sequential)?;
        Some(BitMask::nonzero(ctx.inputs[layer][0].data()))
    } else {
        None
    };
    let stages: Vec<DumpStage> = match stage {
        DumpStage::All if spec.needs_input_grad(layer) => {
            vec![DumpStage::Forward, DumpStage::Gta, DumpStage::Gtw]
        }
        DumpStage::All => vec![DumpStage::Forward, DumpStage::Gtw],
        s => vec![s],
    };
    let mut out = String::new();
    for s in stages {
        let (name, instrs): (&str, Vec<RowInstruction>) = match s {
            DumpStage::Forward => ("forward", lower_forward(layer, &g)?),
            DumpStage::Gta => ("gta", lower_gta(layer, &g, mask.as_ref(), mask.is_some())?),
            DumpStage::Gtw | DumpStage::All => ("gtw", lower_gtw(layer, &g)?),
        };
        let sched = schedule_by(&instrs, arch.n_groups, |r| dst_slot(&g, r))?;
        out.push_str(&format!(
            "# layer {layer} stage {name} instructions {} groups {}\n",
            instrs.len(),
            arch.n_groups
        ));
        for (gi, q) in sched
            .queues
            .iter()
            .enumerate()
            .filter(|(_, q)| !q.is_empty())
        {
            out.push_str(&format!("# group {gi}\n"));
            let group: Vec<RowInstruction> = q.iter().map(|&i| instrs[i]).collect();
            out.push_str(&dump(&group));
        }
    }
    Ok(out)
}

pub fn cmd_dump(
    cfg: &ExperimentConfig,
    layer: usize,
    stage: DumpStage,
) -> Result<(String, PathBuf)> {
    let text = run_dump(cfg, layer, stage)?;
    let mut dir = RunDir::create(&cfg.out)?;
    let p = dir.write("dump-schedule", "txt", &text)?;
    let mut m = manifest_head(cfg, "dump-schedule")?;
    m.push(("layer", layer.to_string()));
    dir.record(&m)?;
    Ok((text, p))
}
