//! Per-sample capture of a training step, as input to the simulator.
//!
//! A trace holds, for every CONV layer, exactly what the accelerator would
//! see for one sample: the layer input, the weights used by the step, the
//! gradient arriving at the layer output before pruning, and the pruning
//! threshold and seed of the batch. Layers are independent given a trace.

use crate::error::{Error, Result};
use crate::nn::network::{BackwardOutput, ForwardContext, Network, PruneJob};
use crate::nn::spec::{ConvGeometry, PruneStructure};
use crate::tensor::{Kernel4, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    pub sample: usize,
    pub geometry: ConvGeometry,
    pub structure: PruneStructure,
    pub input: Tensor3,
    pub kernel: Kernel4,
    pub d_out_raw: Tensor3,
    /// The input comes from a ReLU, so its zeros mask the GTA output.
    pub masked: bool,
    /// dI is consumed upstream, so GTA runs.
    pub lower_gta: bool,
    pub tau: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub sample: usize,
    pub layers: Vec<LayerTrace>,
}

impl StepTrace {
    /// Captures sample `sample` of a batch. `net` must hold the weights the
    /// step ran with (before the SGD update).
    pub fn capture(
        net: &Network,
        ctx: &ForwardContext,
        backward: &BackwardOutput,
        job: Option<&PruneJob>,
        sample: usize,
    ) -> Result<Self> {
        if sample >= ctx.batch {
            return Err(Error::Usage(format!(
                "sample {sample} outside batch of {}",
                ctx.batch
            )));
        }
        let mut layers = Vec::new();
        for idx in net.spec.conv_layers() {
            let cb = backward.conv[idx]
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("no backward output for layer {idx}")))?;
            layers.push(LayerTrace {
                layer: idx,
                sample,
                geometry: net.spec.geometry(idx)?,
                structure: net.spec.structure(idx)?,
                input: ctx.inputs[idx][sample].clone(),
                kernel: net.kernel(idx).expect("conv layer has a kernel").clone(),
                d_out_raw: cb.d_out_raw[sample].clone(),
                masked: net.spec.input_masked(idx),
                lower_gta: net.spec.needs_input_grad(idx),
                tau: job.and_then(|j| j.taus[idx]),
                seed: job.map_or(0, |j| j.seed),
            });
        }
        Ok(Self { sample, layers })
    }
}
