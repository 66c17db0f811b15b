//! Trainer checks against finite differences and the reference convolution.

use gradsparse::nn::data::{gaussian_blobs, BlobParams};
use gradsparse::nn::{
    softmax_cross_entropy, LayerParams, LayerSpec, Network, NetworkSpec, PruneJob, Trainer,
};
use gradsparse::prune::PruneConfig;
use gradsparse::reference::conv2d_ref;
use gradsparse::{Exec, Rng, Tensor3};

fn toy_spec() -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::conv(1, 3, 3, 1, 1),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::conv(3, 4, 3, 1, 1),
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
        batch_size: 4,
    }
}

fn random_batch(n: usize, shape: (usize, usize, usize), rng: &mut Rng) -> Vec<Tensor3> {
    (0..n)
        .map(|_| Tensor3::from_fn(shape.0, shape.1, shape.2, |_, _, _| rng.normal()))
        .collect()
}

fn loss_sum(net: &Network, batch: &[Tensor3], labels: &[usize]) -> f64 {
    net.loss_sum(batch, labels, Exec::Sequential).unwrap()
}

fn loss_grads(net: &Network, batch: &[Tensor3], labels: &[usize]) -> Vec<Vec<f64>> {
    let (logits, _) = net.forward(batch, Exec::Sequential).unwrap();
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| softmax_cross_entropy(z, y).1)
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-7
}

/// Network made of layers `from..` of `net`, fed with that layer's input.
fn suffix(net: &Network, from: usize) -> Network {
    let (c, h, w) = net.input_shape(from);
    let mut layers = net.spec.layers[from..].to_vec();
    let mut params = net.params[from..].to_vec();
    if matches!(layers[0], LayerSpec::Fc { .. }) {
        // A flat input still needs the flatten marker.
        layers.insert(0, LayerSpec::Flatten);
        params.insert(0, LayerParams::None);
    }
    let spec = NetworkSpec {
        layers,
        input: [c, h, w],
        ..net.spec.clone()
    };
    Network::new(spec, params).unwrap()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = Rng::new(404);
    let mut net = Network::init(toy_spec(), 5).unwrap();
    // Nonzero biases so the bias paths are exercised.
    for p in net.params.iter_mut() {
        if let LayerParams::Conv(k) = p {
            k.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
        }
    }
    let batch = random_batch(4, (1, 8, 8), &mut rng);
    let labels = vec![0, 1, 2, 1];
    let (_, ctx) = net.forward(&batch, Exec::Sequential).unwrap();
    let out = net
        .backward(
            &ctx,
            &loss_grads(&net, &batch, &labels),
            None,
            Exec::Sequential,
        )
        .unwrap();
    let analytic: Vec<Vec<f64>> = out.grads.slices().iter().map(|s| s.to_vec()).collect();

    let h = 1e-6;
    let mut checked = 0;
    for (si, grad) in analytic.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for i in 0..grad.len() {
            let mut p = net.clone();
            p.param_slices_mut()[si][i] += h;
            let mut m = net.clone();
            m.param_slices_mut()[si][i] -= h;
            let fd = (loss_sum(&p, &batch, &labels) - loss_sum(&m, &batch, &labels)) / (2.0 * h);
            assert!(
                close(grad[i], fd),
                "slice {si} index {i}: {} vs {fd}",
                grad[i]
            );
            checked += 1;
        }
    }
    // conv 30 + bn 6 + conv 112 + fc 51
    assert_eq!(checked, 199);
}

#[test]
fn activation_gradients_match_finite_differences() {
    let mut rng = Rng::new(77);
    let net = Network::init(toy_spec(), 8).unwrap();
    let batch = random_batch(3, (1, 8, 8), &mut rng);
    let labels = vec![2, 0, 1];
    let (_, ctx) = net.forward(&batch, Exec::Sequential).unwrap();
    let out = net
        .backward(
            &ctx,
            &loss_grads(&net, &batch, &labels),
            None,
            Exec::Sequential,
        )
        .unwrap();
    let h = 1e-6;
    for layer in 0..net.spec.layers.len() {
        let sub = suffix(&net, layer);
        let masked = net.spec.layers[layer].is_conv() && net.spec.input_masked(layer);
        let pool = matches!(net.spec.layers[layer], LayerSpec::MaxPool { .. });
        for s in 0..batch.len() {
            let x = &ctx.inputs[layer][s];
            let g = &out.input_grads[layer][s];
            assert_eq!(g.shape(), x.shape());
            for i in 0..x.len() {
                if masked && x.data()[i] == 0.0 {
                    // The ReLU downstream of this zero kills its gradient,
                    // so the layer reports it as exact zero.
                    assert_eq!(g.data()[i], 0.0);
                    continue;
                }
                if pool && x.data()[i] == 0.0 {
                    // Tied ReLU zeros in a window: the max is not differentiable there.
                    continue;
                }
                let mut p = ctx.inputs[layer].clone();
                p[s].data_mut()[i] += h;
                let mut m = ctx.inputs[layer].clone();
                m[s].data_mut()[i] -= h;
                let fd = (loss_sum(&sub, &p, &labels) - loss_sum(&sub, &m, &labels)) / (2.0 * h);
                assert!(
                    close(g.data()[i], fd),
                    "layer {layer} sample {s} index {i}: {} vs {fd}",
                    g.data()[i]
                );
            }
        }
    }
}

#[test]
fn three_conv_network_gradients() {
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::conv(2, 3, 3, 2, 1),
            LayerSpec::Relu,
            LayerSpec::conv(3, 3, 1, 1, 0),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::conv(3, 2, 3, 1, 0),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Fc {
                inputs: 8,
                outputs: 2,
            },
        ],
        input: [2, 8, 8],
        classes: 2,
        learning_rate: 0.1,
        batch_size: 3,
    };
    let mut rng = Rng::new(5);
    let net = Network::init(spec, 13).unwrap();
    let batch = random_batch(3, (2, 8, 8), &mut rng);
    let labels = vec![1, 0, 1];
    let (_, ctx) = net.forward(&batch, Exec::Sequential).unwrap();
    let out = net
        .backward(
            &ctx,
            &loss_grads(&net, &batch, &labels),
            None,
            Exec::Sequential,
        )
        .unwrap();
    let h = 1e-6;
    let grads: Vec<Vec<f64>> = out.grads.slices().iter().map(|s| s.to_vec()).collect();
    for (si, grad) in grads.iter().enumerate() {
        for i in (0..grad.len()).step_by(3) {
            let mut p = net.clone();
            p.param_slices_mut()[si][i] += h;
            let mut m = net.clone();
            m.param_slices_mut()[si][i] -= h;
            let fd = (loss_sum(&p, &batch, &labels) - loss_sum(&m, &batch, &labels)) / (2.0 * h);
            assert!(
                close(grad[i], fd),
                "slice {si} index {i}: {} vs {fd}",
                grad[i]
            );
        }
    }
}

#[test]
fn single_conv_forward_equals_reference() {
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::conv(2, 3, 3, 2, 1),
            LayerSpec::Flatten,
            LayerSpec::Fc {
                inputs: 27,
                outputs: 2,
            },
        ],
        input: [2, 5, 5],
        classes: 2,
        learning_rate: 0.1,
        batch_size: 2,
    };
    let mut net = Network::init(spec, 3).unwrap();
    if let LayerParams::Conv(k) = &mut net.params[0] {
        k.bias = vec![0.5, -0.25, 0.125];
    }
    let mut rng = Rng::new(8);
    let batch = random_batch(2, (2, 5, 5), &mut rng);
    let (_, ctx) = net.forward(&batch, Exec::Sequential).unwrap();
    let kernel = net.kernel(0).unwrap();
    for (s, x) in batch.iter().enumerate() {
        let want = conv2d_ref(x, kernel, 2, 1).unwrap();
        // The flatten layer's input is the conv output.
        assert_eq!(ctx.inputs[1][s], want);
    }
}

#[test]
fn dead_relu_annihilates_gradient() {
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::conv(1, 2, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(2, 2, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Fc {
                inputs: 32,
                outputs: 2,
            },
        ],
        input: [1, 4, 4],
        classes: 2,
        learning_rate: 0.1,
        batch_size: 2,
    };
    let mut net = Network::init(spec, 1).unwrap();
    if let LayerParams::Conv(k) = &mut net.params[0] {
        k.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        k.bias = vec![-1.0, -1.0];
    }
    let mut rng = Rng::new(2);
    let batch = random_batch(2, (1, 4, 4), &mut rng);
    let labels = vec![0, 1];
    let (_, ctx) = net.forward(&batch, Exec::Sequential).unwrap();
    assert!(ctx.relu_masks[1].as_ref().unwrap().iter().all(|m| !m.any()));
    let out = net
        .backward(
            &ctx,
            &loss_grads(&net, &batch, &labels),
            None,
            Exec::Sequential,
        )
        .unwrap();
    for l in 0..=2 {
        for g in &out.input_grads[l] {
            assert!(g.data().iter().all(|v| *v == 0.0), "layer {l}");
        }
    }
}

#[test]
fn zero_target_sparsity_equals_no_pruning() {
    let data = gaussian_blobs(
        &BlobParams {
            samples: 40,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let mut spec = toy_spec();
    spec.batch_size = 8;
    let net = Network::init(spec, 4).unwrap();
    let mut a = Trainer::new(net.clone(), None, 4, Exec::Sequential).unwrap();
    let mut b = Trainer::new(
        net,
        Some(PruneConfig::new(0.0, 2).unwrap()),
        4,
        Exec::Sequential,
    )
    .unwrap();
    for e in 0..4 {
        let ra = a.train_epoch(&data, e).unwrap();
        let rb = b.train_epoch(&data, e).unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
    }
    assert_eq!(a.net.params, b.net.params);
    // The predictor did run and settled on tau = 0.
    assert_eq!(b.predictor(4).unwrap().predicted(), Some(0.0));
}

#[test]
fn explicit_zero_threshold_job_is_identity() {
    let mut rng = Rng::new(31);
    let net = Network::init(toy_spec(), 6).unwrap();
    let batch = random_batch(4, (1, 8, 8), &mut rng);
    let labels = vec![0, 1, 2, 0];
    let (_, ctx) = net.forward(&batch, Exec::Sequential).unwrap();
    let lg = loss_grads(&net, &batch, &labels);
    let plain = net.backward(&ctx, &lg, None, Exec::Sequential).unwrap();
    let job = PruneJob {
        taus: vec![Some(0.0); net.spec.layers.len()],
        seed: 99,
    };
    let pruned = net
        .backward(&ctx, &lg, Some(&job), Exec::Sequential)
        .unwrap();
    assert_eq!(plain.grads, pruned.grads);
    assert_eq!(plain.input_grads, pruned.input_grads);
}

#[test]
fn sgd_step_examples() {
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Fc {
                inputs: 1,
                outputs: 2,
            },
        ],
        input: [1, 1, 1],
        classes: 2,
        learning_rate: 0.1,
        batch_size: 1,
    };
    let mut net = Network::init(spec, 0).unwrap();
    net.params[1] = LayerParams::Fc {
        weights: vec![0.7, -0.2],
        bias: vec![0.0, 0.3],
    };
    let before = net.clone();
    let mut grads = gradsparse::nn::Gradients::zeros_like(&net);
    net.sgd_step(&grads, 0.1, 1);
    assert_eq!(net.params, before.params);

    grads.layers[1] = LayerParams::Fc {
        weights: vec![2.0, 1.0],
        bias: vec![-1.0, 0.5],
    };
    net.sgd_step(&grads, 0.0, 1);
    assert_eq!(net.params, before.params);

    net.sgd_step(&grads, 0.1, 1);
    let LayerParams::Fc { weights, bias } = &net.params[1] else {
        unreachable!()
    };
    assert_eq!(weights, &vec![0.7 - 0.1 * 2.0, -0.2 - 0.1 * 1.0]);
    assert_eq!(bias, &vec![0.0 - -0.1, 0.3 - 0.1 * 0.5]);

    // Batch size divides the summed gradient.
    let mut n2 = before.clone();
    n2.sgd_step(&grads, 0.1, 4);
    let LayerParams::Fc { weights, .. } = &n2.params[1] else {
        unreachable!()
    };
    assert_eq!(weights[0], 0.7 - 0.1 / 4.0 * 2.0);
}

#[test]
fn training_loss_mostly_decreases() {
    let data = gaussian_blobs(&BlobParams::default(), 7).unwrap();
    let mut spec = toy_spec();
    spec.batch_size = 10;
    let net = Network::init(spec, 11).unwrap();
    let mut t = Trainer::new(net, None, 11, Exec::default()).unwrap();
    let mut prev = f64::INFINITY;
    let mut decreases = 0;
    let epochs = 50;
    for e in 0..epochs {
        let r = t.train_epoch(&data, e).unwrap();
        assert!(r.loss.is_finite());
        if r.loss < prev {
            decreases += 1;
        }
        prev = r.loss;
    }
    assert!(
        decreases as f64 >= 0.95 * epochs as f64,
        "{decreases} of {epochs}"
    );
}

#[test]
fn parallel_and_sequential_agree() {
    let data = gaussian_blobs(
        &BlobParams {
            samples: 40,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let mut spec = toy_spec();
    spec.batch_size = 8;
    let net = Network::init(spec, 2).unwrap();
    let cfg = Some(PruneConfig::new(0.9, 2).unwrap());
    let mut a = Trainer::new(net.clone(), cfg, 2, Exec::Sequential).unwrap();
    let mut b = Trainer::new(net, cfg, 2, Exec::Parallel).unwrap();
    for e in 0..5 {
        let ra = a.train_epoch(&data, e).unwrap();
        let rb = b.train_epoch(&data, e).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.net.params, b.net.params);
}
