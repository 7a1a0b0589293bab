//! Streaming instability detection over a training loss trace.
//!
//! A running mean and variance of the loss are kept with exponential
//! forgetting (`mu_{n+1} = eps mu_n + (1-eps) l_n`,
//! `v_{n+1} = delta v_n + (1-delta) (l_n - mu_{n+1})^2`, started at 0 and 1).
//! Each step's Z score is taken against the pre-update statistics; a step
//! with `Z > 4` counts as part of an instability (positive anomalies only).
//! Non-finite losses freeze the statistics for that step and are counted
//! separately.

pub const DEFAULT_EPS: f64 = 0.998;
pub const DEFAULT_DELTA: f64 = 0.9995;
pub const Z_THRESHOLD: f64 = 4.0;

/// The appendix tables use -3000 as the convergence threshold for traces in
/// the paper's loss scale; sweeps at other scales pick their own.
pub const PAPER_CONVERGENCE_THRESHOLD: f64 = -3000.0;

#[derive(Debug, Clone)]
pub struct InstabilityTracker {
    mu: f64,
    v: f64,
    eps: f64,
    delta: f64,
    steps: usize,
    nonfinite_steps: usize,
    unstable_steps: usize,
    excess_z_sum: f64,
    min_mu: f64,
}

impl Default for InstabilityTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl InstabilityTracker {
    pub fn new() -> Self {
        InstabilityTracker {
            mu: 0.0,
            v: 1.0,
            eps: DEFAULT_EPS,
            delta: DEFAULT_DELTA,
            steps: 0,
            nonfinite_steps: 0,
            unstable_steps: 0,
            excess_z_sum: 0.0,
            min_mu: f64::INFINITY,
        }
    }

    pub fn smoothed_mean(&self) -> f64 {
        self.mu
    }

    pub fn smoothed_variance(&self) -> f64 {
        self.v
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nonfinite_steps(&self) -> usize {
        self.nonfinite_steps
    }

    /// Minimum of the smoothed mean over the post-update trajectory
    /// (infinity before any finite update).
    pub fn min_smoothed_loss(&self) -> f64 {
        self.min_mu
    }

    /// Feed one loss value; returns the step's Z score against the
    /// pre-update statistics. A non-finite loss is recorded and the state
    /// frozen for that step (the returned Z is the loss itself, non-finite).
    pub fn update(&mut self, loss: f64) -> f64 {
        if !loss.is_finite() {
            self.nonfinite_steps += 1;
            return loss;
        }
        let z = (loss - self.mu) / self.v.sqrt();
        self.steps += 1;
        if z > Z_THRESHOLD {
            self.unstable_steps += 1;
            self.excess_z_sum += z - Z_THRESHOLD;
        }
        self.mu = self.eps * self.mu + (1.0 - self.eps) * loss;
        self.v = self.delta * self.v + (1.0 - self.delta) * (loss - self.mu) * (loss - self.mu);
        self.min_mu = self.min_mu.min(self.mu);
        z
    }

    /// Run-level metrics. A run is diverged when any step was non-finite or
    /// the smoothed loss never dropped below the convergence threshold.
    pub fn summarize(&self, convergence_threshold: f64) -> RunSummary {
        let defined = self.steps.max(1) as f64;
        RunSummary {
            diverged: self.nonfinite_steps > 0 || !(self.min_mu < convergence_threshold),
            min_smoothed_loss: self.min_mu,
            instability_fraction: self.unstable_steps as f64 / defined,
            mean_excess_z: self.excess_z_sum / defined,
            nonfinite_steps: self.nonfinite_steps,
        }
    }
}

/// Run-level stability metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub diverged: bool,
    pub min_smoothed_loss: f64,
    /// Fraction of (finite) steps whose Z score exceeded 4.
    pub instability_fraction: f64,
    /// Mean over (finite) steps of `max(0, Z - 4)`.
    pub mean_excess_z: f64,
    pub nonfinite_steps: usize,
}

/// Replay a complete trace through a fresh tracker and summarize it.
pub fn summarize_trace(trace: &[f64], convergence_threshold: f64) -> RunSummary {
    let mut tracker = InstabilityTracker::new();
    for &l in trace {
        tracker.update(l);
    }
    tracker.summarize(convergence_threshold)
}
