//! Predictor contract NN(x_t, tau, cls) and its concrete implementations:
//! a trainable linear-softmax reference model with analytic gradients
//! (`linear`), and a Bayes-optimal enumeration predictor used for
//! verification (`bayes`).

mod bayes;
mod linear;

pub use bayes::BayesPredictor;
pub use linear::{LinearPredictor, LossStats, PreparedExample};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlmError};
use crate::forward::ForwardKernel;
use crate::types::{CandidateSet, PredictorOutput, SequenceBatch};

/// Shape of a predictor: vocabulary size, sequence length, class count
/// (0 = unconditional), sinusoidal time feature count, and optional hidden
/// width (0 = pure linear).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub k: usize,
    pub l: usize,
    #[serde(default)]
    pub class_count: usize,
    #[serde(default)]
    pub time_features: usize,
    #[serde(default)]
    pub hidden: usize,
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(SlmError::DegenerateVocabulary { k: self.k });
        }
        if self.l == 0 {
            return Err(SlmError::InvalidInput("sequence length L must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the class feature block: C+1 slots (the extra slot is the
    /// unconditional null label), absent entirely when C = 0.
    pub fn class_dim(&self) -> usize {
        if self.class_count > 0 {
            self.class_count + 1
        } else {
            0
        }
    }
}

/// Anything that maps (per-position candidate sets, time, optional class)
/// to per-position support-masked probability vectors. Prediction is
/// read-only, so predictors are shareable across threads.
pub trait Predictor: Sync {
    fn k(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn predict(
        &self,
        x_t: &[CandidateSet],
        tau: f64,
        cls: Option<usize>,
    ) -> Result<Vec<PredictorOutput>>;
}

pub(crate) fn check_predict_inputs<P: Predictor + ?Sized>(
    p: &P,
    x_t: &[CandidateSet],
    tau: f64,
) -> Result<()> {
    if x_t.len() != p.seq_len() {
        return Err(SlmError::DimensionMismatch {
            left: x_t.len(),
            right: p.seq_len(),
        });
    }
    for c in x_t {
        if c.k() != p.k() {
            return Err(SlmError::DimensionMismatch {
                left: c.k(),
                right: p.k(),
            });
        }
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(SlmError::TimeOutOfRange { tau });
    }
    Ok(())
}

/// Softmax restricted to a candidate set: out-of-support logits behave as
/// -inf, so the output is exactly zero there and normalizes over the
/// support. Max-shifted for stability.
pub fn masked_softmax(logits: &[f64], support: &CandidateSet) -> Result<Vec<f64>> {
    if logits.len() != support.k() {
        return Err(SlmError::DimensionMismatch {
            left: logits.len(),
            right: support.k(),
        });
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if support.contains(i) {
            if !v.is_finite() {
                return Err(SlmError::NonFinite { context: "logits" });
            }
            max = max.max(v);
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut denom = 0.0;
    for (i, &v) in logits.iter().enumerate() {
        if support.contains(i) {
            let e = (v - max).exp();
            out[i] = e;
            denom += e;
        }
    }
    for v in &mut out {
        *v /= denom;
    }
    Ok(out)
}

/// Verification predictor that always outputs the one-hot of a fixed
/// target per position. Errors if a target ever falls outside the support.
#[derive(Debug, Clone)]
pub struct FixedTokenPredictor {
    k: usize,
    targets: Vec<usize>,
}

impl FixedTokenPredictor {
    pub fn new(k: usize, targets: Vec<usize>) -> Result<Self> {
        for &t in &targets {
            if t >= k {
                return Err(SlmError::IndexOutOfRange { index: t, k });
            }
        }
        Ok(Self { k, targets })
    }
}

impl Predictor for FixedTokenPredictor {
    fn k(&self) -> usize {
        self.k
    }

    fn seq_len(&self) -> usize {
        self.targets.len()
    }

    fn predict(
        &self,
        x_t: &[CandidateSet],
        tau: f64,
        _cls: Option<usize>,
    ) -> Result<Vec<PredictorOutput>> {
        check_predict_inputs(self, x_t, tau)?;
        self.targets
            .iter()
            .zip(x_t)
            .map(|(&t, c)| {
                if !c.contains(t) {
                    return Err(SlmError::SupportViolation);
                }
                let mut probs = vec![0.0; self.k];
                probs[t] = 1.0;
                PredictorOutput::new(probs, c.clone())
            })
            .collect()
    }
}

/// Verification predictor that spreads mass uniformly over each support.
#[derive(Debug, Clone, Copy)]
pub struct UniformPredictor {
    pub k: usize,
    pub l: usize,
}

impl Predictor for UniformPredictor {
    fn k(&self) -> usize {
        self.k
    }

    fn seq_len(&self) -> usize {
        self.l
    }

    fn predict(
        &self,
        x_t: &[CandidateSet],
        tau: f64,
        _cls: Option<usize>,
    ) -> Result<Vec<PredictorOutput>> {
        check_predict_inputs(self, x_t, tau)?;
        x_t.iter()
            .map(|c| PredictorOutput::new(c.centroid(), c.clone()))
            .collect()
    }
}

/// Adapter that pins the class argument of an inner predictor, ignoring
/// whatever class the caller passes. Used to express "the conditional
/// predictor alone" in guidance-degeneracy checks.
pub struct Conditioned<'a, P: Predictor + ?Sized> {
    inner: &'a P,
    cls: Option<usize>,
}

impl<'a, P: Predictor + ?Sized> Conditioned<'a, P> {
    pub fn new(inner: &'a P, cls: Option<usize>) -> Self {
        Self { inner, cls }
    }
}

impl<P: Predictor + ?Sized> Predictor for Conditioned<'_, P> {
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    fn predict(
        &self,
        x_t: &[CandidateSet],
        tau: f64,
        _cls: Option<usize>,
    ) -> Result<Vec<PredictorOutput>> {
        self.inner.predict(x_t, tau, self.cls)
    }
}

/// Draws the training-time inputs for one batch: per example a uniform
/// time snapped up to the grid, label dropout (class replaced by the null
/// label with probability `label_dropout`), and the corrupted state.
///
/// Per-example draw order is fixed (time, dropout flag when labels exist,
/// then corruption) so runs are reproducible given the stream.
pub fn prepare_batch<R: Rng>(
    batch: &SequenceBatch,
    indices: &[usize],
    kernel: &ForwardKernel,
    label_dropout: f64,
    rng: &mut R,
) -> Result<Vec<PreparedExample>> {
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let tokens = batch.sequence(idx).to_vec();
        let tau: f64 = rng.gen();
        let j = kernel.schedule().snap_up(tau)?;
        let cls_input = match batch.label(idx) {
            Some(cls) => {
                let flag: f64 = rng.gen();
                if flag >= label_dropout {
                    Some(cls)
                } else {
                    None
                }
            }
            None => None,
        };
        let x_t = kernel.corrupt(&tokens, j, rng)?;
        out.push(PreparedExample {
            tokens,
            x_t,
            j,
            cls_input,
        });
    }
    Ok(out)
}
