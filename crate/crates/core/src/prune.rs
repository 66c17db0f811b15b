//! Stochastic pruning of activation gradients.
//!
//! A gradient `g` whose magnitude is below the threshold `tau` is replaced by
//! `sign(g) * tau` with probability `|g| / tau` and by zero otherwise, so the
//! expected value of every component is unchanged. Values at or above `tau`
//! pass through untouched.
//!
//! The threshold for a target sparsity `p` assumes the gradients are
//! `N(0, sigma^2)`: `sigma` is estimated from the mean magnitude and
//! `tau = Phi^-1((1 + p) / 2) * sigma`, the magnitude with `P(|g| < tau) = p`.
//! Since `E|g| = sqrt(2/pi) sigma`, the unbiased estimate is
//! `sqrt(pi/2) * mean|g|`; [`SigmaEstimator::Biased`] keeps the
//! `sqrt(2/pi) * mean|g|` form, which estimates `2 sigma / pi`.
//!
//! [`ThresholdPredictor`] removes the second pass over the data: each batch
//! is pruned with the mean of the last `N_F` determined thresholds while the
//! magnitude sum for the current batch accumulates, and at the end of the
//! batch its own threshold is determined and pushed into the FIFO.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::normal::inverse_normal_cdf;
use crate::rng::Rng;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const SQRT_PI_OVER_2: f64 = 1.253_314_137_315_500_3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaEstimator {
    /// `sqrt(pi/2) * A / n`.
    #[default]
    Unbiased,
    /// `sqrt(2/pi) * A / n`.
    Biased,
}

impl SigmaEstimator {
    /// Estimate from `A = sum |g|` over `n` values.
    pub fn estimate(self, abs_sum: f64, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::UndefinedInput(
                "cannot estimate sigma from zero gradients".into(),
            ));
        }
        let c = match self {
            SigmaEstimator::Unbiased => SQRT_PI_OVER_2,
            SigmaEstimator::Biased => SQRT_2_OVER_PI,
        };
        Ok(c * abs_sum / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Target sparsity in [0, 1).
    pub p: f64,
    /// FIFO depth `N_F`.
    pub fifo_depth: usize,
    #[serde(default)]
    pub estimator: SigmaEstimator,
}

impl PruneConfig {
    pub fn new(p: f64, fifo_depth: usize) -> Result<Self> {
        let cfg = Self {
            p,
            fifo_depth,
            estimator: SigmaEstimator::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return config(format!("target sparsity {} outside [0, 1)", self.p));
        }
        if self.fifo_depth == 0 {
            return config("FIFO depth must be at least 1");
        }
        Ok(())
    }

    /// Warning text when the FIFO is not much shorter than the run
    /// (`N_F > N / 10`).
    pub fn depth_warning(&self, total_batches: usize) -> Option<String> {
        (self.fifo_depth * 10 > total_batches).then(|| {
            format!(
                "FIFO depth {} is not small against {} batches; pruning starts late",
                self.fifo_depth, total_batches
            )
        })
    }
}

/// Unbiased `sigma` from `A = sum |g|` over `n` values.
pub fn estimate_sigma(abs_sum: f64, n: usize) -> Result<f64> {
    SigmaEstimator::Unbiased.estimate(abs_sum, n)
}

/// Nonnegative `tau` with `P(|X| < tau) = p` for `X ~ N(0, sigma^2)`.
pub fn determine_threshold(sigma: f64, p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return config(format!("target sparsity {p} outside [0, 1)"));
    }
    if sigma.is_nan() || sigma < 0.0 {
        return config(format!("sigma estimate {sigma} must be nonnegative"));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok(inverse_normal_cdf(0.5 * (1.0 + p)) * sigma)
}

/// Prunes one value. Exact zeros never consume a random draw (their output
/// is zero whatever `r` would be).
#[inline]
pub fn prune_value(g: f64, tau: f64, rng: &mut Rng) -> f64 {
    let mag = g.abs();
    if mag >= tau || g == 0.0 {
        return g;
    }
    let r = rng.uniform();
    if mag > tau * r {
        tau.copysign(g)
    } else {
        0.0
    }
}

pub fn stochastic_prune(g: &[f64], tau: f64, rng: &mut Rng) -> Vec<f64> {
    g.iter().map(|&v| prune_value(v, tau, rng)).collect()
}

/// Magnitude sum and element count over pre-pruning values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MagnitudeSum {
    pub abs_sum: f64,
    pub count: usize,
}

impl MagnitudeSum {
    pub fn merge(&mut self, other: MagnitudeSum) {
        self.abs_sum += other.abs_sum;
        self.count += other.count;
    }
}

/// Prunes `row` in place under `tau` (no-op for `None`) in one pass and
/// returns the magnitude sum of the values it read.
pub fn prune_row(row: &mut [f64], tau: Option<f64>, rng: &mut Rng) -> MagnitudeSum {
    let mut acc = 0.0;
    for v in row.iter_mut() {
        acc += v.abs();
        if let Some(t) = tau {
            *v = prune_value(*v, t, rng);
        }
    }
    MagnitudeSum {
        abs_sum: acc,
        count: row.len(),
    }
}

/// Per-CONV-layer threshold FIFO plus the running magnitude accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPredictor {
    depth: usize,
    estimator: SigmaEstimator,
    fifo: VecDeque<f64>,
    acc: MagnitudeSum,
    last: Option<f64>,
}

impl ThresholdPredictor {
    pub fn new(depth: usize) -> Self {
        Self::with_estimator(depth, SigmaEstimator::default())
    }

    pub fn with_estimator(depth: usize, estimator: SigmaEstimator) -> Self {
        assert!(depth >= 1, "FIFO depth must be at least 1");
        Self {
            depth,
            estimator,
            fifo: VecDeque::with_capacity(depth),
            acc: MagnitudeSum::default(),
            last: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn fifo(&self) -> impl Iterator<Item = f64> + '_ {
        self.fifo.iter().copied()
    }

    pub fn is_warm(&self) -> bool {
        self.fifo.len() == self.depth
    }

    /// `mean(FIFO)` once the FIFO is full, `None` during warm-up.
    pub fn predicted(&self) -> Option<f64> {
        self.is_warm()
            .then(|| self.fifo.iter().sum::<f64>() / self.depth as f64)
    }

    /// Threshold determined at the most recent batch end.
    pub fn last_determined(&self) -> Option<f64> {
        self.last
    }

    pub fn pending(&self) -> MagnitudeSum {
        self.acc
    }

    pub fn accumulate(&mut self, part: MagnitudeSum) {
        self.acc.merge(part);
    }

    /// Streams `values` once: accumulates each magnitude and emits the value
    /// pruned under the predicted threshold (unchanged during warm-up).
    pub fn prune_stream<I>(&mut self, values: I, rng: &mut Rng) -> Vec<f64>
    where
        I: IntoIterator<Item = f64>,
    {
        let tau = self.predicted();
        let mut acc = 0.0;
        let mut n = 0;
        let out = values
            .into_iter()
            .map(|g| {
                acc += g.abs();
                n += 1;
                match tau {
                    Some(t) => prune_value(g, t, rng),
                    None => g,
                }
            })
            .collect();
        self.acc.merge(MagnitudeSum {
            abs_sum: acc,
            count: n,
        });
        out
    }

    /// Determines this batch's threshold, pushes it (evicting the oldest when
    /// full) and resets the accumulator. A batch that saw no values pushes
    /// nothing.
    pub fn end_batch(&mut self, p: f64) -> Result<Option<f64>> {
        let acc = std::mem::take(&mut self.acc);
        if acc.count == 0 {
            return Ok(None);
        }
        let tau = determine_threshold(self.estimator.estimate(acc.abs_sum, acc.count)?, p)?;
        if self.fifo.len() == self.depth {
            self.fifo.pop_front();
        }
        self.fifo.push_back(tau);
        self.last = Some(tau);
        Ok(Some(tau))
    }

    /// One batch end to end: prune while streaming, then determine and push.
    pub fn step<I>(&mut self, batch: I, p: f64, rng: &mut Rng) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = f64>,
    {
        let out = self.prune_stream(batch, rng);
        self.end_batch(p)?;
        Ok(out)
    }
}
