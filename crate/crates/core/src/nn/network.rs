//! Parameters, forward pass and backward pass.
//!
//! Convolutions run per sample through the reference kernels; batch
//! normalization couples the samples of a batch, so both passes walk the
//! network layer by layer over the whole batch. Per-sample work inside a
//! layer may fan out over workers; every reduction over samples runs in
//! sample order.

use crate::error::{config, Error, Result};
use crate::nn::batchnorm::{batchnorm_backward, batchnorm_forward, BnCache};
use crate::nn::spec::{LayerSpec, NetworkSpec, PruneStructure};
use crate::par::{map_slice, Exec};
use crate::prune::{prune_row, MagnitudeSum};
use crate::reference::{conv2d_full_ref, conv2d_gtw_ref, conv2d_ref};
use crate::rng::{named_seed, Rng};
use crate::tensor::{BitMask, Kernel4, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv(Kernel4),
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    Fc { weights: Vec<f64>, bias: Vec<f64> },
}

impl LayerParams {
    fn slices(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(k) => vec![k.weights(), &k.bias],
            LayerParams::BatchNorm { gamma, beta } => vec![gamma, beta],
            LayerParams::Fc { weights, bias } => vec![weights, bias],
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(k) => {
                let (w, b) = k.parts_mut();
                vec![w, b]
            }
            LayerParams::BatchNorm { gamma, beta } => vec![gamma, beta],
            LayerParams::Fc { weights, bias } => vec![weights, bias],
        }
    }

    fn zeros_like(&self) -> LayerParams {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv(k) => {
                LayerParams::Conv(Kernel4::zeros(k.filters(), k.channels(), k.k()))
            }
            LayerParams::BatchNorm { gamma, .. } => LayerParams::BatchNorm {
                gamma: vec![0.0; gamma.len()],
                beta: vec![0.0; gamma.len()],
            },
            LayerParams::Fc { weights, bias } => LayerParams::Fc {
                weights: vec![0.0; weights.len()],
                bias: vec![0.0; bias.len()],
            },
        }
    }
}

/// Parameter gradients, laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.params.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(LayerParams::slices).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(LayerParams::slices_mut)
            .collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
    shapes: Vec<(usize, usize, usize)>,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardContext {
    /// `inputs[l][s]`: input of layer `l` for sample `s`.
    pub inputs: Vec<Vec<Tensor3>>,
    pub relu_masks: Vec<Option<Vec<BitMask>>>,
    /// Flat input index (`(c * H + y) * W + x`) selected for every pooled output.
    pub pool_argmax: Vec<Option<Vec<Vec<usize>>>>,
    pub bn: Vec<Option<BnCache>>,
    pub batch: usize,
}

/// Pruning inputs for one batch: the threshold per layer (`None` for
/// unpruned layers and during warm-up) and the batch's random seed.
#[derive(Debug, Clone)]
pub struct PruneJob {
    pub taus: Vec<Option<f64>>,
    pub seed: u64,
}

impl PruneJob {
    /// Generator for one row of a pruning target.
    pub fn row_rng(seed: u64, layer: usize, sample: usize, channel: usize, row: usize) -> Rng {
        Rng::keyed(
            seed,
            &[layer as u64, sample as u64, channel as u64, row as u64],
        )
    }
}

/// Backward results of one CONV layer, per sample.
#[derive(Debug, Clone)]
pub struct ConvBackward {
    /// Gradient arriving at the layer output, before any pruning.
    pub d_out_raw: Vec<Tensor3>,
    /// Gradient consumed by GTA and GTW.
    pub d_out: Vec<Tensor3>,
    /// Gradient leaving the layer, after the input mask and pruning.
    pub d_in: Vec<Tensor3>,
    /// Per-sample weight gradients; `bias` holds the bias gradient.
    pub d_kernel: Vec<Kernel4>,
    /// Pre-pruning magnitude sum over the pruning target, merged in sample order.
    pub target_sum: MagnitudeSum,
    /// Nonzeros and length of the pruning target after pruning.
    pub target_nnz: usize,
    pub target_len: usize,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    /// Summed over the batch.
    pub grads: Gradients,
    /// `input_grads[l][s]`: gradient with respect to the input of layer `l`.
    pub input_grads: Vec<Vec<Tensor3>>,
    pub conv: Vec<Option<ConvBackward>>,
}

/// Softmax cross-entropy of one sample; returns `(loss, dloss/dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn relu_forward(x: &Tensor3) -> (Tensor3, BitMask) {
    let mask = BitMask::new(x.data().iter().map(|v| *v > 0.0).collect());
    let (c, h, w) = x.shape();
    let mut data = x.data().to_vec();
    for v in data.iter_mut() {
        if v.is_nan() || *v <= 0.0 {
            *v = 0.0;
        }
    }
    (Tensor3::new(c, h, w, data).expect("relu keeps shape"), mask)
}

fn apply_mask(g: &Tensor3, mask: &BitMask) -> Tensor3 {
    let (c, h, w) = g.shape();
    let data = g
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(v, m)| if *m { *v } else { 0.0 })
        .collect();
    Tensor3::new(c, h, w, data).expect("mask keeps shape")
}

/// Max pooling; ties go to the lowest flat index.
pub fn maxpool_forward(x: &Tensor3, window: usize, stride: usize) -> (Tensor3, Vec<usize>) {
    let (c, h, w) = x.shape();
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut idx = Vec::with_capacity(c * oh * ow);
    let out = Tensor3::from_fn(c, oh, ow, |ch, oy, ox| {
        let mut best = (ch * h + oy * stride) * w + ox * stride;
        for wy in 0..window {
            for wx in 0..window {
                let i = (ch * h + oy * stride + wy) * w + ox * stride + wx;
                if x.data()[i] > x.data()[best] {
                    best = i;
                }
            }
        }
        idx.push(best);
        x.data()[best]
    });
    (out, idx)
}

fn maxpool_backward(g: &Tensor3, argmax: &[usize], in_shape: (usize, usize, usize)) -> Tensor3 {
    let mut d = Tensor3::zeros(in_shape.0, in_shape.1, in_shape.2);
    for (v, &i) in g.data().iter().zip(argmax) {
        d.data_mut()[i] += v;
    }
    d
}

fn reshape(t: &Tensor3, shape: (usize, usize, usize)) -> Tensor3 {
    Tensor3::new(shape.0, shape.1, shape.2, t.data().to_vec()).expect("reshape keeps length")
}

/// Prunes every row of `t` in place; returns the pre-pruning magnitude sum.
pub fn prune_tensor_rows(
    t: &mut Tensor3,
    tau: Option<f64>,
    seed: u64,
    layer: usize,
    sample: usize,
) -> MagnitudeSum {
    let mut sum = MagnitudeSum::default();
    for c in 0..t.channels() {
        for y in 0..t.height() {
            let mut rng = PruneJob::row_rng(seed, layer, sample, c, y);
            sum.merge(prune_row(t.row_mut(c, y), tau, &mut rng));
        }
    }
    sum
}

impl Network {
    pub fn new(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.len() != spec.layers.len() {
            return config("one parameter entry per layer required");
        }
        for (idx, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            let ok = match (layer, p) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        k,
                        ..
                    },
                    LayerParams::Conv(kern),
                ) => {
                    kern.filters() == *out_channels
                        && kern.channels() == *in_channels
                        && kern.k() == *k
                }
                (LayerSpec::BatchNorm, LayerParams::BatchNorm { gamma, beta }) => {
                    let c = shapes[idx].0;
                    gamma.len() == c && beta.len() == c
                }
                (LayerSpec::Fc { inputs, outputs }, LayerParams::Fc { weights, bias }) => {
                    weights.len() == inputs * outputs && bias.len() == *outputs
                }
                (
                    LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Flatten,
                    LayerParams::None,
                ) => true,
                _ => false,
            };
            if !ok {
                return config(format!("parameters of layer {idx} do not match its spec"));
            }
        }
        Ok(Self {
            spec,
            params,
            shapes,
        })
    }

    /// He-normal weights, zero biases, unit BN scale.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let base = named_seed(seed, "init");
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(idx, layer)| {
                let mut rng = Rng::keyed(base, &[idx as u64]);
                match layer {
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        k,
                        ..
                    } => {
                        let fan_in = (in_channels * k * k) as f64;
                        let std = (2.0 / fan_in).sqrt();
                        let n = out_channels * in_channels * k * k;
                        let w = (0..n).map(|_| rng.normal() * std).collect();
                        LayerParams::Conv(
                            Kernel4::new(
                                *out_channels,
                                *in_channels,
                                *k,
                                w,
                                vec![0.0; *out_channels],
                            )
                            .expect("shape checked"),
                        )
                    }
                    LayerSpec::BatchNorm => LayerParams::BatchNorm {
                        gamma: vec![1.0; shapes[idx].0],
                        beta: vec![0.0; shapes[idx].0],
                    },
                    LayerSpec::Fc { inputs, outputs } => {
                        let std = (1.0 / *inputs as f64).sqrt();
                        LayerParams::Fc {
                            weights: (0..inputs * outputs).map(|_| rng.normal() * std).collect(),
                            bias: vec![0.0; *outputs],
                        }
                    }
                    _ => LayerParams::None,
                }
            })
            .collect();
        Self::new(spec, params)
    }

    pub fn shapes(&self) -> &[(usize, usize, usize)] {
        &self.shapes
    }

    pub fn input_shape(&self, idx: usize) -> (usize, usize, usize) {
        if idx == 0 {
            let [c, h, w] = self.spec.input;
            (c, h, w)
        } else {
            self.shapes[idx - 1]
        }
    }

    pub fn kernel(&self, idx: usize) -> Option<&Kernel4> {
        match &self.params[idx] {
            LayerParams::Conv(k) => Some(k),
            _ => None,
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.params.iter().flat_map(LayerParams::slices).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.params
            .iter_mut()
            .flat_map(LayerParams::slices_mut)
            .collect()
    }

    pub fn forward(
        &self,
        batch: &[Tensor3],
        exec: Exec,
    ) -> Result<(Vec<Vec<f64>>, ForwardContext)> {
        if batch.is_empty() {
            return Err(Error::Usage("forward on an empty batch".into()));
        }
        let [c, h, w] = self.spec.input;
        if let Some(bad) = batch.iter().find(|t| t.shape() != (c, h, w)) {
            return config(format!(
                "sample shape {:?} does not match network input {:?}",
                bad.shape(),
                (c, h, w)
            ));
        }
        let n_layers = self.spec.layers.len();
        let mut ctx = ForwardContext {
            inputs: Vec::with_capacity(n_layers),
            relu_masks: vec![None; n_layers],
            pool_argmax: vec![None; n_layers],
            bn: vec![None; n_layers],
            batch: batch.len(),
        };
        let mut cur: Vec<Tensor3> = batch.to_vec();
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            let next = match (layer, &self.params[idx]) {
                (LayerSpec::Conv { stride, pad, .. }, LayerParams::Conv(k)) => {
                    let r: Result<Vec<Tensor3>> =
                        map_slice(exec, &cur, |_, x| conv2d_ref(x, k, *stride, *pad))
                            .into_iter()
                            .collect();
                    r?
                }
                (LayerSpec::Relu, _) => {
                    let (outs, masks): (Vec<_>, Vec<_>) = cur.iter().map(relu_forward).unzip();
                    ctx.relu_masks[idx] = Some(masks);
                    outs
                }
                (LayerSpec::MaxPool { window, stride }, _) => {
                    let s = stride.unwrap_or(*window);
                    let (outs, idxs): (Vec<_>, Vec<_>) =
                        cur.iter().map(|x| maxpool_forward(x, *window, s)).unzip();
                    ctx.pool_argmax[idx] = Some(idxs);
                    outs
                }
                (LayerSpec::BatchNorm, LayerParams::BatchNorm { gamma, beta }) => {
                    let (ys, cache) = batchnorm_forward(&cur, gamma, beta);
                    ctx.bn[idx] = Some(cache);
                    ys
                }
                (LayerSpec::Flatten, _) => {
                    cur.iter().map(|x| reshape(x, self.shapes[idx])).collect()
                }
                (LayerSpec::Fc { inputs, outputs }, LayerParams::Fc { weights, bias }) => cur
                    .iter()
                    .map(|x| {
                        let xs = x.data();
                        Tensor3::from_fn(*outputs, 1, 1, |o, _, _| {
                            let row = &weights[o * inputs..(o + 1) * inputs];
                            row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + bias[o]
                        })
                    })
                    .collect(),
                _ => return config(format!("parameters of layer {idx} do not match its spec")),
            };
            ctx.inputs.push(std::mem::replace(&mut cur, next));
        }
        let logits = cur.into_iter().map(Tensor3::into_data).collect();
        Ok((logits, ctx))
    }

    /// Backward pass from per-sample loss gradients with respect to the logits.
    pub fn backward(
        &self,
        ctx: &ForwardContext,
        loss_grads: &[Vec<f64>],
        pruning: Option<&PruneJob>,
        exec: Exec,
    ) -> Result<BackwardOutput> {
        let n_layers = self.spec.layers.len();
        if ctx.inputs.len() != n_layers || ctx.batch != loss_grads.len() {
            return Err(Error::Usage(
                "backward needs the forward context of the same batch".into(),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut input_grads: Vec<Vec<Tensor3>> = vec![Vec::new(); n_layers];
        let mut conv: Vec<Option<ConvBackward>> = vec![None; n_layers];
        let mut g: Vec<Tensor3> = loss_grads
            .iter()
            .map(|v| Tensor3::new(v.len(), 1, 1, v.clone()))
            .collect::<Result<_>>()?;

        for idx in (0..n_layers).rev() {
            let inputs = &ctx.inputs[idx];
            let in_shape = self.input_shape(idx);
            let layer = &self.spec.layers[idx];
            let d_in: Vec<Tensor3> = match (layer, &self.params[idx]) {
                (
                    LayerSpec::Fc {
                        inputs: n_in,
                        outputs,
                    },
                    LayerParams::Fc { weights, .. },
                ) => {
                    let LayerParams::Fc {
                        weights: dw,
                        bias: db,
                    } = &mut grads.layers[idx]
                    else {
                        unreachable!()
                    };
                    for (gs, x) in g.iter().zip(inputs) {
                        for o in 0..*outputs {
                            let go = gs.data()[o];
                            db[o] += go;
                            for (d, xv) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x.data()) {
                                *d += go * xv;
                            }
                        }
                    }
                    g.iter()
                        .map(|gs| {
                            Tensor3::from_fn(*n_in, 1, 1, |i, _, _| {
                                (0..*outputs)
                                    .map(|o| weights[o * n_in + i] * gs.data()[o])
                                    .sum()
                            })
                        })
                        .collect()
                }
                (LayerSpec::Flatten, _) => g.iter().map(|t| reshape(t, in_shape)).collect(),
                (LayerSpec::Relu, _) => {
                    let masks = ctx.relu_masks[idx].as_ref().ok_or_else(missing)?;
                    g.iter().zip(masks).map(|(t, m)| apply_mask(t, m)).collect()
                }
                (LayerSpec::MaxPool { .. }, _) => {
                    let am = ctx.pool_argmax[idx].as_ref().ok_or_else(missing)?;
                    g.iter()
                        .zip(am)
                        .map(|(t, a)| maxpool_backward(t, a, in_shape))
                        .collect()
                }
                (LayerSpec::BatchNorm, LayerParams::BatchNorm { gamma, .. }) => {
                    let cache = ctx.bn[idx].as_ref().ok_or_else(missing)?;
                    let (dx, dgamma, dbeta) = batchnorm_backward(&g, cache, gamma);
                    grads.layers[idx] = LayerParams::BatchNorm {
                        gamma: dgamma,
                        beta: dbeta,
                    };
                    dx
                }
                (LayerSpec::Conv { stride, pad, k, .. }, LayerParams::Conv(kern)) => {
                    let cb = self
                        .conv_backward(idx, kern, *k, *stride, *pad, inputs, &g, pruning, exec)?;
                    let LayerParams::Conv(acc) = &mut grads.layers[idx] else {
                        unreachable!()
                    };
                    for dk in &cb.d_kernel {
                        for (a, b) in acc.weights_mut().iter_mut().zip(dk.weights()) {
                            *a += b;
                        }
                        for (a, b) in acc.bias.iter_mut().zip(&dk.bias) {
                            *a += b;
                        }
                    }
                    let d_in = cb.d_in.clone();
                    conv[idx] = Some(cb);
                    d_in
                }
                _ => return config(format!("parameters of layer {idx} do not match its spec")),
            };
            input_grads[idx] = d_in.clone();
            g = d_in;
        }
        Ok(BackwardOutput {
            grads,
            input_grads,
            conv,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        idx: usize,
        kern: &Kernel4,
        k: usize,
        stride: usize,
        pad: usize,
        inputs: &[Tensor3],
        g: &[Tensor3],
        pruning: Option<&PruneJob>,
        exec: Exec,
    ) -> Result<ConvBackward> {
        let structure = self.spec.structure(idx)?;
        let masked = self.spec.input_masked(idx);
        let needs_in = self.spec.needs_input_grad(idx);
        let (_, in_h, in_w) = self.input_shape(idx);
        let tau = pruning.and_then(|p| p.taus.get(idx).copied().flatten());
        let seed = pruning.map_or(0, |p| p.seed);

        struct Sample {
            raw: Tensor3,
            d_out: Tensor3,
            d_in: Tensor3,
            dk: Kernel4,
            sum: MagnitudeSum,
            nnz: usize,
            len: usize,
        }
        let per_sample: Vec<Result<Sample>> = map_slice(exec, g, |s, raw| {
            let mut d_out = raw.clone();
            let mut sum = MagnitudeSum::default();
            let (mut nnz, mut len) = (0, 0);
            if structure == PruneStructure::ConvBnRelu {
                sum = prune_tensor_rows(&mut d_out, tau, seed, idx, s);
                nnz = d_out.nnz();
                len = d_out.len();
            }
            let dk = conv2d_gtw_ref(&d_out, &inputs[s], k, stride, pad)?;
            let mut d_in = conv2d_full_ref(&d_out, kern, stride, pad, in_h, in_w)?;
            if masked {
                let m = BitMask::nonzero(inputs[s].data());
                d_in = apply_mask(&d_in, &m);
            }
            if structure == PruneStructure::ConvRelu && needs_in {
                sum = prune_tensor_rows(&mut d_in, tau, seed, idx, s);
                nnz = d_in.nnz();
                len = d_in.len();
            }
            Ok(Sample {
                raw: raw.clone(),
                d_out,
                d_in,
                dk,
                sum,
                nnz,
                len,
            })
        });
        let mut out = ConvBackward {
            d_out_raw: Vec::with_capacity(g.len()),
            d_out: Vec::with_capacity(g.len()),
            d_in: Vec::with_capacity(g.len()),
            d_kernel: Vec::with_capacity(g.len()),
            target_sum: MagnitudeSum::default(),
            target_nnz: 0,
            target_len: 0,
        };
        for r in per_sample {
            let s = r?;
            out.d_out_raw.push(s.raw);
            out.d_out.push(s.d_out);
            out.d_in.push(s.d_in);
            out.d_kernel.push(s.dk);
            out.target_sum.merge(s.sum);
            out.target_nnz += s.nnz;
            out.target_len += s.len;
        }
        Ok(out)
    }

    /// `w <- w - lr * (sum of gradients) / batch_size` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, batch_size: usize) {
        let scale = lr / batch_size as f64;
        for (w, g) in self.param_slices_mut().into_iter().zip(grads.slices()) {
            for (a, b) in w.iter_mut().zip(g) {
                *a -= scale * b;
            }
        }
    }

    /// Summed softmax cross-entropy over a labelled batch.
    pub fn loss_sum(&self, batch: &[Tensor3], labels: &[usize], exec: Exec) -> Result<f64> {
        let (logits, _) = self.forward(batch, exec)?;
        Ok(logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| softmax_cross_entropy(z, y).0)
            .sum())
    }
}

fn missing() -> Error {
    Error::Usage("forward context is missing state for this layer".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_max_and_index() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 4.0, 3.0]).unwrap();
        let (o, idx) = maxpool_forward(&x, 2, 2);
        assert_eq!(o.data(), &[4.0]);
        assert_eq!(idx, vec![2]);
    }

    #[test]
    fn maxpool_ties_go_to_first() {
        let x = Tensor3::new(1, 2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(maxpool_forward(&x, 2, 2).1, vec![0]);
    }

    #[test]
    fn relu_saturation() {
        let x = Tensor3::new(1, 1, 3, vec![-1.0, -0.5, -2.0]).unwrap();
        let (o, m) = relu_forward(&x);
        assert!(o.data().iter().all(|v| *v == 0.0));
        assert!(!m.any());
    }

    #[test]
    fn softmax_grad_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&[1.0, 2.0, 0.5], 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(g[1] < 0.0);
    }
}
