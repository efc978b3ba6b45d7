//! Forward candidate-appending kernels: the stepwise transition, its
//! closed-form marginal, the closed-form posterior, and sampling from
//! each. All three are multivariate Bernoulli distributions whose
//! parameters factorize per dimension.

use rand::Rng;

use crate::error::{Result, SlmError};
use crate::schedule::Schedule;
use crate::types::{BernoulliParams, CandidateSet};

/// Forward-process kernel for a fixed schedule. K = 1 is rejected: the
/// marginal's K-1 denominator vanishes and the model is trivial.
#[derive(Debug, Clone, Copy)]
pub struct ForwardKernel {
    schedule: Schedule,
}

impl ForwardKernel {
    pub fn new(schedule: Schedule) -> Result<Self> {
        if schedule.k() < 2 {
            return Err(SlmError::DegenerateVocabulary { k: schedule.k() });
        }
        Ok(Self { schedule })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn k(&self) -> usize {
        self.schedule.k()
    }

    /// Inclusion probability of a single spurious (non-data) dimension in
    /// the step-`j` marginal: (n(tau_j) - 1) / (K - 1).
    pub fn marginal_wrong_prob(&self, j: usize) -> Result<f64> {
        let n = self.schedule.n_at_step(j)?;
        Ok((n - 1.0) / (self.k() as f64 - 1.0))
    }

    /// Same quantity at a continuous time.
    pub fn marginal_wrong_prob_at(&self, tau: f64) -> Result<f64> {
        let n = self.schedule.n_of(tau)?;
        Ok((n - 1.0) / (self.k() as f64 - 1.0))
    }

    /// Retention probability of a spurious candidate in the posterior /
    /// reverse parameterization at step `j`: (n(tau_{j-1}) - 1) / (n(tau_j) - 1).
    pub fn posterior_keep_prob(&self, j: usize) -> Result<f64> {
        if j == 0 {
            return Err(SlmError::StepOutOfRange {
                j,
                lo: 1,
                hi: self.schedule.steps(),
            });
        }
        let n_prev = self.schedule.n_at_step(j - 1)?;
        let n_cur = self.schedule.n_at_step(j)?;
        Ok((n_prev - 1.0) / (n_cur - 1.0))
    }

    /// Per-dimension parameters of q(x_j | x_{j-1}): included dimensions
    /// stay included; excluded dimensions switch on with probability
    /// (n(tau_j) - n(tau_{j-1})) / (K - n(tau_{j-1})).
    ///
    /// If n(tau_{j-1}) has already reached K the fraction is defined as 1,
    /// keeping the chain absorbing at the all-one state.
    pub fn transition_params(&self, x_prev: &CandidateSet, j: usize) -> Result<BernoulliParams> {
        let s = self.schedule.steps();
        if j == 0 || j > s {
            return Err(SlmError::StepOutOfRange { j, lo: 1, hi: s });
        }
        self.check_k(x_prev)?;
        let n_prev = self.schedule.n_at_step(j - 1)?;
        let n_cur = self.schedule.n_at_step(j)?;
        let denom = self.k() as f64 - n_prev;
        let frac = if denom <= 0.0 {
            1.0
        } else {
            (n_cur - n_prev) / denom
        };
        let probs = x_prev
            .bits()
            .iter()
            .map(|&b| if b == 1 { 1.0 } else { frac })
            .collect();
        BernoulliParams::new(probs)
    }

    /// Per-dimension parameters of the closed-form marginal q(x_j | x_0)
    /// for a one-hot x_0: the data dimension is pinned to 1, every other
    /// dimension is on with probability (n(tau_j) - 1) / (K - 1).
    pub fn marginal_params(&self, x0: &CandidateSet, j: usize) -> Result<BernoulliParams> {
        self.check_k(x0)?;
        if x0.count_ones() != 1 {
            return Err(SlmError::InvalidInput(
                "marginal requires a one-hot x0".into(),
            ));
        }
        let r = self.marginal_wrong_prob(j)?;
        let probs = x0
            .bits()
            .iter()
            .map(|&b| if b == 1 { 1.0 } else { r })
            .collect();
        BernoulliParams::new(probs)
    }

    /// Per-dimension parameters of the posterior q(x_{j-1} | x_j, x_0):
    /// 1 on the data dimension, (n(tau_{j-1}) - 1)/(n(tau_j) - 1) on
    /// spurious dimensions still present in x_j, 0 elsewhere.
    ///
    /// The x0-in-x_t precondition is an error rather than a clamp: training
    /// always produces x_t by corruption (which guarantees it), so a
    /// violation signals a harness bug.
    pub fn posterior_params(
        &self,
        x_t: &CandidateSet,
        x0: &CandidateSet,
        j: usize,
    ) -> Result<BernoulliParams> {
        self.check_k(x_t)?;
        self.check_k(x0)?;
        if x0.count_ones() != 1 {
            return Err(SlmError::InvalidInput(
                "posterior requires a one-hot x0".into(),
            ));
        }
        if !x0.is_subset_of(x_t)? {
            return Err(SlmError::SupportViolation);
        }
        let keep = self.posterior_keep_prob(j)?;
        let probs = x0
            .bits()
            .iter()
            .zip(x_t.bits())
            .map(|(&b0, &bt)| {
                if b0 == 1 {
                    1.0
                } else if bt == 1 {
                    keep
                } else {
                    0.0
                }
            })
            .collect();
        BernoulliParams::new(probs)
    }

    /// Corrupts one sequence: per position the data dimension is forced on
    /// and every other dimension is drawn from the step-`j` marginal.
    ///
    /// One uniform draw is consumed per (position, dimension) regardless of
    /// the data, so the RNG stream layout is independent of the tokens.
    pub fn corrupt<R: Rng>(
        &self,
        tokens: &[usize],
        j: usize,
        rng: &mut R,
    ) -> Result<Vec<CandidateSet>> {
        let k = self.k();
        let r = self.marginal_wrong_prob(j)?;
        let mut out = Vec::with_capacity(tokens.len());
        for &truth in tokens {
            if truth >= k {
                return Err(SlmError::IndexOutOfRange { index: truth, k });
            }
            let mut bits = vec![0u8; k];
            for (i, bit) in bits.iter_mut().enumerate() {
                let u: f64 = rng.gen();
                *bit = if i == truth { 1 } else { u8::from(u < r) };
            }
            out.push(CandidateSet::from_bits(bits).expect("data bit is set"));
        }
        Ok(out)
    }

    fn check_k(&self, c: &CandidateSet) -> Result<()> {
        if c.k() != self.k() {
            return Err(SlmError::DimensionMismatch {
                left: c.k(),
                right: self.k(),
            });
        }
        Ok(())
    }
}

/// Draws each bit independently: bit_i = 1 with probability p_i. The
/// result may be all-zero; callers that need a valid candidate set apply
/// their own fallback.
pub fn sample_bernoulli<R: Rng>(params: &BernoulliParams, rng: &mut R) -> Vec<u8> {
    params
        .probs()
        .iter()
        .map(|&p| {
            let u: f64 = rng.gen();
            u8::from(u < p)
        })
        .collect()
}
