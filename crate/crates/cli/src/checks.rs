//! Self-checks shared by `selftest` and the acceptance target. Each check
//! returns a verdict with the measured numbers; nothing here panics on a
//! failed property.

use std::fmt;
use std::time::Instant;

use gradsparse::dataflow::{
    execute_forward, execute_gta, execute_gtw, lower_forward, lower_gta, lower_gtw, sparse_rows,
    LayerOperands, Stage,
};
use gradsparse::nn::{
    softmax_cross_entropy, ConvGeometry, LayerParams, LayerSpec, Network, NetworkSpec,
    PruneStructure,
};
use gradsparse::prune::{
    determine_threshold, estimate_sigma, stochastic_prune, ThresholdPredictor,
};
use gradsparse::reference::{conv2d_full_ref, conv2d_gtw_ref, conv2d_ref};
use gradsparse::sim::{simulate_layer, ArchConfig, Mode};
use gradsparse::trace::LayerTrace;
use gradsparse::{BitMask, Exec, Kernel4, Rng, Tensor3};

use crate::commands::{Simulation, Training};

/// Upper normal quantile at 0.95, the threshold for p = 0.9 at unit sigma.
pub const TAU_P90: f64 = 1.644_853_626_951_472_2;

#[derive(Debug, Clone)]
pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{v} [{}] {}: {}", self.id, self.name, self.detail)
    }
}

fn verdict(id: u32, name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        id,
        name,
        passed,
        detail,
    }
}

// ---- gradients ----

pub fn gradient_toy() -> NetworkSpec {
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

/// 1e-4 relative with a 1e-7 absolute floor.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-7
}

fn loss_grads(
    net: &Network,
    batch: &[Tensor3],
    labels: &[usize],
) -> gradsparse::Result<Vec<Vec<f64>>> {
    let (logits, _) = net.forward(batch, Exec::Sequential)?;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| softmax_cross_entropy(z, y).1)
        .collect())
}

/// Layers `from..` of `net` as a network of their own.
fn suffix(net: &Network, from: usize) -> gradsparse::Result<Network> {
    let (c, h, w) = net.input_shape(from);
    let mut layers = net.spec.layers[from..].to_vec();
    let mut params = net.params[from..].to_vec();
    if matches!(layers[0], LayerSpec::Fc { .. }) {
        layers.insert(0, LayerSpec::Flatten);
        params.insert(0, LayerParams::None);
    }
    let spec = NetworkSpec {
        layers,
        input: [c, h, w],
        ..net.spec.clone()
    };
    Network::new(spec, params)
}

#[derive(Default)]
struct FdTally {
    checked: usize,
    failed: usize,
    worst: f64,
}

impl FdTally {
    fn add(&mut self, analytic: f64, fd: f64) {
        self.checked += 1;
        if !close(analytic, fd) {
            self.failed += 1;
        }
        let tol = 1e-4 * analytic.abs().max(fd.abs()) + 1e-7;
        self.worst = self.worst.max((analytic - fd).abs() / tol);
    }
}

fn fd_gradients(seed: u64) -> gradsparse::Result<(FdTally, FdTally)> {
    let h = 1e-6;
    let mut rng = Rng::new(seed);
    let mut net = Network::init(gradient_toy(), seed)?;
    for p in net.params.iter_mut() {
        if let LayerParams::Conv(k) = p {
            k.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
        }
    }
    let batch: Vec<Tensor3> = (0..4)
        .map(|_| Tensor3::from_fn(1, 8, 8, |_, _, _| rng.normal()))
        .collect();
    let labels = vec![0, 1, 2, 1];
    let loss = |n: &Network, b: &[Tensor3]| n.loss_sum(b, &labels, Exec::Sequential);
    let (_, ctx) = net.forward(&batch, Exec::Sequential)?;
    let out = net.backward(
        &ctx,
        &loss_grads(&net, &batch, &labels)?,
        None,
        Exec::Sequential,
    )?;

    let mut params = FdTally::default();
    let analytic: Vec<Vec<f64>> = out.grads.slices().iter().map(|s| s.to_vec()).collect();
    for (si, grad) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let mut p = net.clone();
            p.param_slices_mut()[si][i] += h;
            let mut m = net.clone();
            m.param_slices_mut()[si][i] -= h;
            params.add(g, (loss(&p, &batch)? - loss(&m, &batch)?) / (2.0 * h));
        }
    }

    let mut acts = FdTally::default();
    for layer in 0..net.spec.layers.len() {
        let sub = suffix(&net, layer)?;
        let pool = matches!(net.spec.layers[layer], LayerSpec::MaxPool { .. });
        let masked = net.spec.layers[layer].is_conv() && net.spec.input_masked(layer);
        for s in 0..batch.len() {
            let x = &ctx.inputs[layer][s];
            for i in 0..x.len() {
                // Tied zeros in a pooling window: the max is not differentiable.
                if pool && x.data()[i] == 0.0 {
                    continue;
                }
                let g = out.input_grads[layer][s].data()[i];
                // A zero out of the upstream ReLU: its gradient is reported as exact zero.
                if masked && x.data()[i] == 0.0 {
                    acts.add(g, 0.0);
                    continue;
                }
                let mut p = ctx.inputs[layer].clone();
                p[s].data_mut()[i] += h;
                let mut m = ctx.inputs[layer].clone();
                m[s].data_mut()[i] -= h;
                let fd = (loss(&sub, &p)? - loss(&sub, &m)?) / (2.0 * h);
                acts.add(g, fd);
            }
        }
    }
    Ok((params, acts))
}

pub fn gradient_correctness() -> Check {
    let name = "gradient correctness";
    let t0 = Instant::now();
    match fd_gradients(5) {
        Ok((p, a)) => {
            let secs = t0.elapsed().as_secs_f64();
            verdict(
                1,
                name,
                p.failed == 0 && a.failed == 0 && p.checked > 0 && a.checked > 0 && secs < 30.0,
                format!(
                    "{} params ({} off, worst err/tol {:.2}), {} activations ({} off, worst err/tol {:.2}), {secs:.1} s (limit 30 s)",
                    p.checked, p.failed, p.worst, a.checked, a.failed, a.worst
                ),
            )
        }
        Err(e) => verdict(1, name, false, e.to_string()),
    }
}

// ---- pruning ----

pub fn pruning_unbiasedness(trials: usize) -> Check {
    let t0 = Instant::now();
    let g = [0.05, -0.3, 0.7, -1.2, 0.0];
    let tau = 1.0;
    let mut sums = [0.0; 5];
    let mut rng = Rng::new(42);
    for _ in 0..trials {
        for (s, v) in sums.iter_mut().zip(stochastic_prune(&g, tau, &mut rng)) {
            *s += v;
        }
    }
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (gi, s) in g.iter().zip(sums) {
        let mean = s / trials as f64;
        let var = if gi.abs() < tau {
            tau * gi.abs() - gi * gi
        } else {
            0.0
        };
        let se = (var / trials as f64).sqrt();
        if se == 0.0 {
            ok &= (mean - gi).abs() < 1e-9;
        } else {
            let z = (mean - gi).abs() / se;
            worst = worst.max(z);
            ok &= z <= 4.0;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        2,
        "pruning unbiasedness",
        ok && secs < 5.0,
        format!(
            "{trials} trials, worst deviation {worst:.2} SE (limit 4), {secs:.2} s (limit 5 s)"
        ),
    )
}

pub fn threshold_accuracy() -> Check {
    let mut rng = Rng::new(11);
    let g: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
    let a: f64 = g.iter().map(|v| v.abs()).sum();
    let tau = estimate_sigma(a, g.len()).and_then(|s| determine_threshold(s, 0.9));
    let mut pred = ThresholdPredictor::new(4);
    let mut prune_rng = Rng::new(77);
    let mut predicted = None;
    for b in 0..20u64 {
        let mut r = Rng::keyed(1000, &[b]);
        let batch: Vec<f64> = (0..5_000).map(|_| r.normal()).collect();
        if pred.step(batch, 0.9, &mut prune_rng).is_err() {
            break;
        }
        predicted = pred.predicted();
    }
    match (tau, predicted) {
        (Ok(tau), Some(p)) => {
            let e1 = (tau / TAU_P90 - 1.0).abs();
            let e2 = (p / TAU_P90 - 1.0).abs();
            verdict(
                3,
                "threshold accuracy",
                e1 < 0.02 && e2 < 0.05,
                format!(
                    "determined {tau:.4} ({:.2}% off, limit 2%), FIFO after 20 batches {p:.4} ({:.2}% off, limit 5%)",
                    100.0 * e1,
                    100.0 * e2
                ),
            )
        }
        (t, p) => verdict(
            3,
            "threshold accuracy",
            false,
            format!("no threshold: {t:?}, {p:?}"),
        ),
    }
}

// ---- training runs ----

/// Ratio of unpruned to pruned density of each pruning target over the
/// last `window` epochs.
pub fn density_reduction(tr: &Training, window: usize) -> Option<Vec<(usize, f64, f64)>> {
    let (b, p) = (tr.run("baseline")?, tr.run("pruned")?);
    let n = b.reports.len().min(p.reports.len());
    if n == 0 {
        return None;
    }
    let from = n.saturating_sub(window);
    Some(
        tr.conv_layers
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mean = |r: &[gradsparse::nn::EpochReport]| {
                    r[from..n]
                        .iter()
                        .map(|e| e.layers[i].target_density)
                        .sum::<f64>()
                        / (n - from) as f64
                };
                (l, mean(&b.reports), mean(&p.reports))
            })
            .collect(),
    )
}

pub fn sparsity_delivery(tr: &Training) -> Check {
    let name = "sparsity delivery";
    let Some(rows) = density_reduction(tr, 10) else {
        return verdict(4, name, false, "needs a paired run".into());
    };
    let mut ok = true;
    let parts: Vec<String> = rows
        .iter()
        .map(|&(l, b, p)| {
            let f = if p > 0.0 { b / p } else { f64::INFINITY };
            ok &= f >= 3.0;
            format!("L{l} {b:.3} -> {p:.3} ({f:.2}x)")
        })
        .collect();
    verdict(
        4,
        name,
        ok,
        format!("last 10 epochs: {} (limit 3.00x)", parts.join(", ")),
    )
}

pub fn accuracy_preservation(tr: &Training, secs: f64) -> Check {
    let name = "accuracy preservation";
    let last = |n: &str| tr.run(n).and_then(|r| r.final_accuracy());
    let on = if tr.runs.iter().all(|r| !r.held_out.is_empty()) {
        "held-out"
    } else {
        "training"
    };
    match (last("baseline"), last("pruned")) {
        (Some(b), Some(p)) => {
            let delta = 100.0 * (p - b);
            let epochs = tr.runs[0].reports.len();
            verdict(
                5,
                name,
                delta.abs() <= 2.0 && secs < 300.0,
                format!(
                    "{epochs} epochs, {on} accuracy: baseline {:.2}%, pruned {:.2}%, delta {delta:+.2} points (limit 2), {secs:.1} s (limit 300 s)",
                    100.0 * b,
                    100.0 * p
                ),
            )
        }
        _ => verdict(5, name, false, "needs a paired run".into()),
    }
}

// ---- dataflow ----

pub fn lowering_matrix() -> Vec<ConvGeometry> {
    let mut out = Vec::new();
    for c in [1, 2, 4] {
        for f in [1, 3, 4] {
            for (h, w) in [(5, 5), (8, 6), (7, 8)] {
                for k in [1, 3, 5] {
                    for s in [1, 2] {
                        for pad in (0..2).filter(|&p| p < k) {
                            if let Ok(g) = ConvGeometry::new(c, f, k, s, pad, h, w) {
                                out.push(g);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn rel_equal(got: &[f64], want: &[f64]) -> bool {
    got.len() == want.len()
        && got
            .iter()
            .zip(want)
            .all(|(a, b)| (a - b).abs() <= 1e-10 * a.abs().max(b.abs()))
}

fn kernel(g: &ConvGeometry, rng: &mut Rng) -> Kernel4 {
    Kernel4::new(
        g.f,
        g.c,
        g.k,
        (0..g.f * g.c * g.k * g.k).map(|_| rng.normal()).collect(),
        (0..g.f).map(|_| 0.1 * rng.normal()).collect(),
    )
    .expect("sizes match the geometry")
}

fn equivalence_case(g: &ConvGeometry, rng: &mut Rng) -> gradsparse::Result<(bool, bool)> {
    let input = Tensor3::from_fn(g.c, g.in_h, g.in_w, |_, _, _| rng.normal().max(0.0));
    let d_out = Tensor3::from_fn(g.f, g.out_h, g.out_w, |_, _, _| {
        if rng.uniform() < 0.4 {
            rng.normal()
        } else {
            0.0
        }
    });
    let k = kernel(g, rng);
    let rows = sparse_rows(&input);
    let d_rows = sparse_rows(&d_out);
    let relu = BitMask::nonzero(input.data());
    let ops = LayerOperands {
        geometry: *g,
        input: &rows,
        kernel: &k,
        d_out: &d_rows,
        mask: None,
    };
    let fwd = execute_forward(&lower_forward(0, g)?, &ops)?;
    let gta = execute_gta(&lower_gta(0, g, None, false)?, &ops)?;
    let gtw = execute_gtw(&lower_gtw(0, g)?, &ops)?;
    let full = conv2d_full_ref(&d_out, &k, g.stride, g.pad, g.in_h, g.in_w)?;
    let mut ok = rel_equal(fwd.data(), conv2d_ref(&input, &k, g.stride, g.pad)?.data())
        && rel_equal(gta.data(), full.data())
        && rel_equal(
            gtw.weights(),
            conv2d_gtw_ref(&d_out, &input, g.k, g.stride, g.pad)?.weights(),
        );
    let masked_ops = LayerOperands {
        mask: Some(&relu),
        ..ops
    };
    let masked = execute_gta(&lower_gta(0, g, Some(&relu), true)?, &masked_ops)?;
    let mut exact = true;
    for ((v, want), b) in masked.data().iter().zip(full.data()).zip(relu.bits()) {
        if *b {
            ok &= (v - want).abs() <= 1e-10 * v.abs().max(want.abs());
        } else {
            exact &= v.to_bits() == 0.0f64.to_bits();
        }
    }
    Ok((ok, exact))
}

pub fn dataflow_equivalence() -> Check {
    let name = "dataflow equivalence";
    let mut rng = Rng::new(6);
    let matrix = lowering_matrix();
    let (mut bad, mut inexact) = (0, 0);
    for g in &matrix {
        match equivalence_case(g, &mut rng) {
            Ok((ok, exact)) => {
                bad += usize::from(!ok);
                inexact += usize::from(!exact);
            }
            Err(e) => return verdict(6, name, false, format!("{g:?}: {e}")),
        }
    }
    verdict(
        6,
        name,
        bad == 0 && inexact == 0,
        format!(
            "{} configurations, {bad} beyond 1e-10 relative, {inexact} with nonzero masked outputs",
            matrix.len()
        ),
    )
}

// ---- simulator ----

fn layer_trace(g: ConvGeometry, input: Tensor3, d_out: Tensor3, rng: &mut Rng) -> LayerTrace {
    LayerTrace {
        layer: 1,
        sample: 0,
        geometry: g,
        structure: PruneStructure::ConvRelu,
        input,
        kernel: kernel(&g, rng),
        d_out_raw: d_out,
        masked: true,
        lower_gta: true,
        tau: None,
        seed: 0,
    }
}

fn random_geometry(rng: &mut Rng) -> ConvGeometry {
    loop {
        let k = [1, 3, 5][rng.below(3) as usize];
        let pad = rng.below(2) as usize;
        let s = 1 + rng.below(2) as usize;
        let (h, w) = (4 + rng.below(7) as usize, 4 + rng.below(7) as usize);
        let (c, f) = (1 + rng.below(4) as usize, 1 + rng.below(4) as usize);
        if pad < k {
            if let Ok(g) = ConvGeometry::new(c, f, k, s, pad, h, w) {
                return g;
            }
        }
    }
}

fn invariants() -> gradsparse::Result<(usize, usize, usize, usize, usize, usize)> {
    let cfg = ArchConfig::default();
    let mut rng = Rng::new(10);

    // Zero sparsity: every operand and every produced tensor dense.
    let (mut zs, mut zs_bad) = (0, 0);
    while zs < 60 {
        let g = random_geometry(&mut rng);
        let input = Tensor3::from_fn(g.c, g.in_h, g.in_w, |_, _, _| 0.5 + rng.uniform());
        let d_out = Tensor3::from_fn(g.f, g.out_h, g.out_w, |_, _, _| rng.normal());
        let tr = layer_trace(g, input, d_out, &mut rng);
        let s = simulate_layer(&cfg, &tr, Mode::Sparse)?;
        if s.d_in.as_ref().is_some_and(|d| d.nnz() != d.len()) {
            continue;
        }
        let d = simulate_layer(&cfg, &tr, Mode::Dense)?;
        zs += 1;
        let same = s.phases.len() == d.phases.len()
            && s.phases
                .iter()
                .zip(&d.phases)
                .all(|(a, b)| a.cycles == b.cycles);
        zs_bad += usize::from(!same);
    }

    // Monotonicity under zeroing of the layer input.
    let small = ArchConfig { n_groups: 3, ..cfg };
    let mut mono_bad = 0;
    for _ in 0..100 {
        let g = random_geometry(&mut rng);
        let input = Tensor3::from_fn(g.c, g.in_h, g.in_w, |_, _, _| rng.normal().max(0.0));
        let d_out = Tensor3::from_fn(g.f, g.out_h, g.out_w, |_, _, _| {
            if rng.uniform() < 0.5 {
                rng.normal()
            } else {
                0.0
            }
        });
        let mut tr = layer_trace(g, input, d_out, &mut rng);
        tr.masked = rng.uniform() < 0.7;
        let mut prev = simulate_layer(&small, &tr, Mode::Sparse)?.cycles();
        let mut ok = true;
        for _ in 0..4 {
            for v in tr.input.data_mut() {
                if rng.uniform() < 0.3 {
                    *v = 0.0;
                }
            }
            let now = simulate_layer(&small, &tr, Mode::Sparse)?.cycles();
            ok &= now <= prev;
            prev = now;
        }
        mono_bad += usize::from(!ok);
    }

    // Dense forward MACs against F*C*K^2*H_out*W_out (no padding).
    let (mut macs, mut macs_bad) = (0, 0);
    while macs < 60 {
        let g = random_geometry(&mut rng);
        if g.pad != 0 {
            continue;
        }
        macs += 1;
        let input = Tensor3::from_fn(g.c, g.in_h, g.in_w, |_, _, _| rng.normal().max(0.0));
        let tr = layer_trace(g, input, Tensor3::zeros(g.f, g.out_h, g.out_w), &mut rng);
        let d = simulate_layer(&cfg, &tr, Mode::Dense)?;
        let fwd = d
            .phases
            .iter()
            .find(|p| p.stage == Stage::Forward)
            .map_or(0, |p| p.tally.macs);
        macs_bad += usize::from(fwd != (g.f * g.c * g.k * g.k * g.out_h * g.out_w) as u64);
    }
    Ok((zs, zs_bad, 100, mono_bad, macs, macs_bad))
}

pub fn simulator_invariants() -> Check {
    let name = "simulator invariants";
    match invariants() {
        Ok((zs, zs_bad, mono, mono_bad, macs, macs_bad)) => verdict(
            7,
            name,
            zs_bad + mono_bad + macs_bad == 0,
            format!(
                "zero sparsity {}/{zs} equal, monotonicity {}/{mono} trials, dense MAC formula {}/{macs} exact",
                zs - zs_bad,
                mono - mono_bad,
                macs - macs_bad
            ),
        ),
        Err(e) => verdict(7, name, false, e.to_string()),
    }
}

pub fn speedup_trend(sim: &Simulation, masked: &[usize]) -> Check {
    let name = "speedup trend";
    let (a, g) = sim.densities(masked);
    match (sim.speedup(), sim.energy_ratio()) {
        (Some(s), Some(e)) => verdict(
            8,
            name,
            s > 1.5 && e > 1.2,
            format!(
                "activation density {a:.3}, gradient density {g:.3}: speedup {s:.2}x (limit 1.5), energy ratio {e:.2}x (limit 1.2)"
            ),
        ),
        _ => verdict(8, name, false, "needs both modes".into()),
    }
}

/// Byte equality of artifacts from repeated runs, as `(what, first, second)`.
pub fn determinism(pairs: &[(&str, &[u8], &[u8])]) -> Check {
    let differing: Vec<&str> = pairs
        .iter()
        .filter(|(_, a, b)| a != b)
        .map(|(n, _, _)| *n)
        .collect();
    let detail = if differing.is_empty() {
        format!(
            "{} artifacts byte-identical ({})",
            pairs.len(),
            pairs.iter().map(|p| p.0).collect::<Vec<_>>().join(", ")
        )
    } else {
        format!("differ: {}", differing.join(", "))
    };
    verdict(
        9,
        "determinism",
        differing.is_empty() && !pairs.is_empty(),
        detail,
    )
}

/// The checks that need no experiment config.
pub fn quick() -> Vec<Check> {
    vec![
        gradient_correctness(),
        pruning_unbiasedness(100_000),
        threshold_accuracy(),
        dataflow_equivalence(),
        simulator_invariants(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_format() {
        let c = verdict(4, "x", true, "ok".into());
        assert_eq!(c.to_string(), "PASS [4] x: ok");
        assert!(verdict(9, "y", false, String::new())
            .to_string()
            .starts_with("FAIL [9]"));
    }

    #[test]
    fn determinism_flags_differences() {
        assert!(determinism(&[("a", b"1", b"1")]).passed);
        assert!(!determinism(&[("a", b"1", b"1"), ("b", b"1", b"2")]).passed);
        assert!(!determinism(&[]).passed);
    }

    #[test]
    fn unbiasedness_small_run() {
        let c = pruning_unbiasedness(20_000);
        assert!(c.passed, "{c}");
    }
}
