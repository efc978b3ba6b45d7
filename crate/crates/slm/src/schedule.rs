//! Candidate-count schedule n(tau) on unit time, shared by training and
//! sampling.
//!
//! The chain is indexed by continuous tau in [0,1]; the integer grid of
//! S+1 points tau_j = j/S is the discretization every kernel works on.
//! The exponential schedule makes log n(tau) — the entropy of the uniform
//! distribution over n candidates — grow linearly in tau.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Exponential,
}

/// Candidate-count schedule: K categories discretized into S steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    k: usize,
    s: usize,
    kind: ScheduleKind,
}

impl Schedule {
    pub fn exponential(k: usize, s: usize) -> Result<Self> {
        if k == 0 {
            return Err(SlmError::EmptyCandidateSet);
        }
        if s == 0 {
            return Err(SlmError::InvalidInput("step count S must be >= 1".into()));
        }
        Ok(Self {
            k,
            s,
            kind: ScheduleKind::Exponential,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn steps(&self) -> usize {
        self.s
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Expected candidate count at time `tau`: exp((ln K) tau).
    ///
    /// The endpoints are pinned exactly (n(0) = 1, n(1) = K) so the
    /// boundary kernels are exact rather than within one ulp.
    pub fn n_of(&self, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(SlmError::TimeOutOfRange { tau });
        }
        Ok(match self.kind {
            ScheduleKind::Exponential => {
                if tau == 0.0 {
                    1.0
                } else if tau == 1.0 {
                    self.k as f64
                } else {
                    ((self.k as f64).ln() * tau).exp()
                }
            }
        })
    }

    /// Time of grid point `j`, i.e. j/S.
    pub fn tau_of_step(&self, j: usize) -> Result<f64> {
        if j > self.s {
            return Err(SlmError::StepOutOfRange {
                j,
                lo: 0,
                hi: self.s,
            });
        }
        Ok(j as f64 / self.s as f64)
    }

    /// n at grid point `j`.
    pub fn n_at_step(&self, j: usize) -> Result<f64> {
        self.n_of(self.tau_of_step(j)?)
    }

    /// The S+1 uniformly spaced grid points 0 = tau_0 < ... < tau_S = 1.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.s).map(|j| j as f64 / self.s as f64).collect()
    }

    /// Snaps a continuous training time up to its grid step: j = ceil(tau S),
    /// clamped to [1, S] so that the (j-1, j) pair is always defined.
    pub fn snap_up(&self, tau: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(SlmError::TimeOutOfRange { tau });
        }
        Ok(((tau * self.s as f64).ceil() as usize).clamp(1, self.s))
    }
}
