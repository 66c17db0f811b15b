//! Mini-batch training loop with per-layer threshold predictors.

use crate::error::Result;
use crate::nn::data::Dataset;
use crate::nn::network::{
    argmax, softmax_cross_entropy, BackwardOutput, ForwardContext, Network, PruneJob,
};
use crate::par::Exec;
use crate::prune::{PruneConfig, ThresholdPredictor};
use crate::rng::{mix_seed, named_seed, Rng};
use crate::tensor::Tensor3;

/// Per-CONV-layer statistics for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEpochStats {
    pub layer: usize,
    /// Density of the gradient consumed by the layer's GTA and GTW (dO).
    pub rho: f64,
    /// Density of the pruning target after pruning (dO or dI by structure).
    pub target_density: f64,
    /// Threshold determined at the last batch end of the epoch.
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean loss over the training set after the epoch's updates.
    pub loss: f64,
    pub accuracy: f64,
    /// Mean loss of the batches seen during the epoch, before each update.
    pub train_loss: f64,
    pub layers: Vec<LayerEpochStats>,
}

/// Everything one training step produced, for the simulator and tests.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss_sum: f64,
    pub correct: usize,
    pub ctx: ForwardContext,
    pub backward: BackwardOutput,
    pub job: PruneJob,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    d_out_nnz: usize,
    d_out_len: usize,
    target_nnz: usize,
    target_len: usize,
}

pub struct Trainer {
    pub net: Network,
    prune: Option<PruneConfig>,
    predictors: Vec<Option<ThresholdPredictor>>,
    prune_seed: u64,
    shuffle_seed: u64,
    batches: u64,
    exec: Exec,
}

impl Trainer {
    pub fn new(net: Network, prune: Option<PruneConfig>, seed: u64, exec: Exec) -> Result<Self> {
        if let Some(p) = &prune {
            p.validate()?;
        }
        let predictors = net
            .spec
            .layers
            .iter()
            .map(|l| match (&prune, l.is_conv()) {
                (Some(p), true) => Some(ThresholdPredictor::with_estimator(
                    p.fifo_depth,
                    p.estimator,
                )),
                _ => None,
            })
            .collect();
        Ok(Self {
            net,
            prune,
            predictors,
            prune_seed: named_seed(seed, "prune"),
            shuffle_seed: named_seed(seed, "shuffle"),
            batches: 0,
            exec,
        })
    }

    pub fn prune_config(&self) -> Option<&PruneConfig> {
        self.prune.as_ref()
    }

    pub fn predictor(&self, layer: usize) -> Option<&ThresholdPredictor> {
        self.predictors.get(layer).and_then(Option::as_ref)
    }

    pub fn batches_done(&self) -> u64 {
        self.batches
    }

    /// The pruning job the next batch would use.
    pub fn next_job(&self) -> PruneJob {
        PruneJob {
            taus: self
                .predictors
                .iter()
                .map(|p| p.as_ref().and_then(ThresholdPredictor::predicted))
                .collect(),
            seed: mix_seed(self.prune_seed, &[self.batches]),
        }
    }

    /// Forward and backward of one batch under the current weights and
    /// predicted thresholds; changes nothing.
    pub fn probe_batch(&self, images: &[Tensor3], labels: &[usize]) -> Result<StepResult> {
        let (logits, ctx) = self.net.forward(images, self.exec)?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let grads: Vec<Vec<f64>> = logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| {
                let (l, g) = softmax_cross_entropy(z, y);
                loss_sum += l;
                correct += usize::from(argmax(z) == y);
                g
            })
            .collect();
        let job = self.next_job();
        let pruning = self.prune.is_some().then_some(&job);
        let backward = self.net.backward(&ctx, &grads, pruning, self.exec)?;
        Ok(StepResult {
            loss_sum,
            correct,
            ctx,
            backward,
            job,
        })
    }

    /// Forward, backward with pruning, predictor update and SGD for one batch.
    pub fn train_batch(&mut self, images: &[Tensor3], labels: &[usize]) -> Result<StepResult> {
        let step = self.probe_batch(images, labels)?;
        if let Some(cfg) = &self.prune {
            for (pred, cb) in self.predictors.iter_mut().zip(&step.backward.conv) {
                if let (Some(pred), Some(cb)) = (pred.as_mut(), cb.as_ref()) {
                    pred.accumulate(cb.target_sum);
                    pred.end_batch(cfg.p)?;
                }
            }
        }
        let lr = self.net.spec.learning_rate;
        self.net.sgd_step(&step.backward.grads, lr, images.len());
        self.batches += 1;
        Ok(step)
    }

    /// Sample order of `epoch`: a seeded shuffle, independent of pruning.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::keyed(self.shuffle_seed, &[epoch as u64]).shuffle(&mut order);
        order
    }

    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochReport> {
        let order = self.epoch_order(data.len(), epoch);
        let bs = self.net.spec.batch_size;
        let convs = self.net.spec.conv_layers();
        let mut counts = vec![Counts::default(); convs.len()];
        let mut train_loss = 0.0;
        for chunk in order.chunks(bs) {
            let images: Vec<Tensor3> = chunk.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let step = self.train_batch(&images, &labels)?;
            train_loss += step.loss_sum;
            for (c, &l) in counts.iter_mut().zip(&convs) {
                let cb = step.backward.conv[l]
                    .as_ref()
                    .expect("conv layer has backward output");
                for d in &cb.d_out {
                    c.d_out_nnz += d.nnz();
                    c.d_out_len += d.len();
                }
                c.target_nnz += cb.target_nnz;
                c.target_len += cb.target_len;
            }
        }
        let (loss, accuracy) = self.evaluate(data)?;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let layers = convs
            .iter()
            .zip(&counts)
            .map(|(&layer, c)| LayerEpochStats {
                layer,
                rho: ratio(c.d_out_nnz, c.d_out_len),
                target_density: ratio(c.target_nnz, c.target_len),
                tau: self
                    .predictor(layer)
                    .and_then(ThresholdPredictor::last_determined),
            })
            .collect();
        Ok(EpochReport {
            epoch,
            loss,
            accuracy,
            train_loss: train_loss / data.len().max(1) as f64,
            layers,
        })
    }

    /// Mean loss and accuracy over `data` in fixed, unshuffled batches.
    /// BN uses batch statistics, as in training.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let bs = self.net.spec.batch_size;
        let mut loss = 0.0;
        let mut correct = 0;
        for (imgs, labels) in data.images.chunks(bs).zip(data.labels.chunks(bs)) {
            let (logits, _) = self.net.forward(imgs, self.exec)?;
            for (z, &y) in logits.iter().zip(labels) {
                loss += softmax_cross_entropy(z, y).0;
                correct += usize::from(argmax(z) == y);
            }
        }
        let n = data.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::data::{gaussian_blobs, BlobParams};
    use crate::nn::spec::{LayerSpec, NetworkSpec};

    fn small_net() -> NetworkSpec {
        NetworkSpec {
            layers: vec![
                LayerSpec::conv(1, 4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::maxpool(2),
                LayerSpec::conv(4, 4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::maxpool(2),
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    inputs: 16,
                    outputs: 3,
                },
            ],
            input: [1, 8, 8],
            classes: 3,
            learning_rate: 0.05,
            batch_size: 10,
        }
    }

    #[test]
    fn predictors_warm_up_after_depth_batches() {
        let data = gaussian_blobs(
            &BlobParams {
                samples: 60,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let net = Network::init(small_net(), 3).unwrap();
        let mut t = Trainer::new(
            net,
            Some(PruneConfig::new(0.9, 4).unwrap()),
            3,
            Exec::default(),
        )
        .unwrap();
        assert!(t.next_job().taus.iter().all(Option::is_none));
        t.train_epoch(&data, 0).unwrap();
        assert_eq!(t.batches_done(), 6);
        assert!(t.next_job().taus[3].is_some());
        // The first conv layer is CONV-RELU with no consumer of dI: nothing to prune.
        assert!(t.predictor(0).unwrap().last_determined().is_none());
    }

    #[test]
    fn shuffle_does_not_depend_on_pruning() {
        let net = Network::init(small_net(), 3).unwrap();
        let a = Trainer::new(net.clone(), None, 9, Exec::Sequential).unwrap();
        let b = Trainer::new(
            net,
            Some(PruneConfig::new(0.5, 2).unwrap()),
            9,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(a.epoch_order(50, 4), b.epoch_order(50, 4));
        assert_ne!(a.epoch_order(50, 4), a.epoch_order(50, 5));
    }
}
