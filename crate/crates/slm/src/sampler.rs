//! Ancestral sampling: starting from the all-one candidate sets, each step
//! queries the predictor, forms the reverse Bernoulli parameters, draws a
//! shrunken candidate set (with a zero-vector fallback), and finally
//! decodes by argmax. Classifier-free guidance mixes conditional and
//! unconditional predictions, projecting back onto the simplex when the
//! mix leaves it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlmError};
use crate::forward::ForwardKernel;
use crate::predictor::Predictor;
use crate::rng;
use crate::schedule::Schedule;
use crate::types::{BernoulliParams, CandidateSet, PredictorOutput};

/// Sampler settings. `steps` discretizes the reverse chain independently
/// of the training schedule; `gamma` is the guidance factor (1 = pure
/// conditional, 0 = pure unconditional, >1 may leave the simplex).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub gamma: f64,
    pub cls: Option<usize>,
    pub seed: u64,
}

/// Reverse-step Bernoulli parameters at grid step j:
/// [NN + (1 - NN) (n(tau_{j-1})-1)/(n(tau_j)-1)] restricted to x_t.
/// On-support parameters interpolate between that fraction and 1.
pub fn reverse_step_params(
    predictor_out: &PredictorOutput,
    x_t: &CandidateSet,
    j: usize,
    schedule: &Schedule,
) -> Result<BernoulliParams> {
    if predictor_out.support() != x_t {
        return Err(SlmError::SupportMismatch);
    }
    let s = schedule.steps();
    if j == 0 || j > s {
        return Err(SlmError::StepOutOfRange { j, lo: 1, hi: s });
    }
    let n_prev = schedule.n_at_step(j - 1)?;
    let n_cur = schedule.n_at_step(j)?;
    let keep = (n_prev - 1.0) / (n_cur - 1.0);
    let probs = predictor_out
        .probs()
        .iter()
        .zip(x_t.bits())
        .map(|(&nn, &bit)| {
            if bit == 1 {
                nn + (1.0 - nn) * keep
            } else {
                0.0
            }
        })
        .collect();
    BernoulliParams::new(probs)
}

/// Euclidean projection onto the probability simplex (sort, threshold,
/// clamp): returns argmin over the simplex of ||w - v||_2.
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "projection needs at least one coordinate");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-finite projection input"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i as f64 + 1.0);
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// gamma-weighted mix of conditional and unconditional predictions over a
/// shared support. When the mix leaves [0,1] (possible for gamma outside
/// [0,1]) it is projected back onto the simplex of the support
/// coordinates; off-support entries stay exactly zero so pruned
/// categories can never regain mass.
pub fn cfg_mix(
    cond: &PredictorOutput,
    uncond: &PredictorOutput,
    gamma: f64,
) -> Result<PredictorOutput> {
    if cond.support() != uncond.support() {
        return Err(SlmError::SupportMismatch);
    }
    let support = cond.support().clone();
    let mut mixed: Vec<f64> = cond
        .probs()
        .iter()
        .zip(uncond.probs())
        .map(|(&c, &u)| gamma * c + (1.0 - gamma) * u)
        .collect();
    if mixed.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        let on_support: Vec<usize> = (0..support.k()).filter(|&i| support.contains(i)).collect();
        let sub: Vec<f64> = on_support.iter().map(|&i| mixed[i]).collect();
        let projected = simplex_project(&sub);
        mixed = vec![0.0; support.k()];
        for (&i, &p) in on_support.iter().zip(&projected) {
            mixed[i] = p;
        }
    }
    PredictorOutput::new(mixed, support)
}

/// Lowest-index argmax; the fixed tie-breaking rule of the fallback and
/// of the final decode.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct StepOutcome {
    next: Vec<CandidateSet>,
}

/// One reverse step shared by `sample` and `sample_with_trace`: query
/// (optionally CFG-mixed), form parameters, draw, intersect with the
/// support, apply the zero fallback.
fn reverse_step<R: Rng>(
    predictor: &dyn Predictor,
    state: &[CandidateSet],
    j: usize,
    config: &SamplerConfig,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<StepOutcome> {
    let outs = predict_guided(predictor, state, kernel.schedule().tau_of_step(j)?, config)?;
    let mut next = Vec::with_capacity(state.len());
    for (set, out) in state.iter().zip(&outs) {
        let params = reverse_step_params(out, set, j, kernel.schedule())?;
        // One uniform per dimension, dimension-minor, regardless of the
        // support, so the stream layout is guidance-independent.
        let mut bits = vec![0u8; set.k()];
        for (bit, &p) in bits.iter_mut().zip(params.probs()) {
            let u: f64 = rng.gen();
            *bit = u8::from(u < p);
        }
        if bits.iter().all(|&b| b == 0) {
            bits[argmax(params.probs())] = 1;
        }
        next.push(CandidateSet::from_bits(bits).expect("fallback guarantees a candidate"));
    }
    Ok(StepOutcome { next })
}

fn predict_guided(
    predictor: &dyn Predictor,
    state: &[CandidateSet],
    tau: f64,
    config: &SamplerConfig,
) -> Result<Vec<PredictorOutput>> {
    match config.cls {
        Some(cls) if config.gamma != 1.0 => {
            let cond = predictor.predict(state, tau, Some(cls))?;
            let uncond = predictor.predict(state, tau, None)?;
            cond.iter()
                .zip(&uncond)
                .map(|(c, u)| cfg_mix(c, u, config.gamma))
                .collect()
        }
        Some(cls) => predictor.predict(state, tau, Some(cls)),
        None => predictor.predict(state, tau, None),
    }
}

/// Samples one sequence of tokens. Deterministic given (predictor
/// parameters, config, RNG stream).
pub fn sample<R: Rng>(
    predictor: &dyn Predictor,
    config: &SamplerConfig,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<Vec<usize>> {
    Ok(sample_with_trace(predictor, config, kernel, rng)?.0)
}

/// Samples one sequence and returns the per-step states (step S down to
/// 1, post-transition), used by the sampler-invariant checks.
pub fn sample_with_trace<R: Rng>(
    predictor: &dyn Predictor,
    config: &SamplerConfig,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Vec<CandidateSet>>)> {
    if config.steps == 0 {
        return Err(SlmError::InvalidInput("sampler needs steps >= 1".into()));
    }
    if kernel.schedule().steps() != config.steps {
        return Err(SlmError::InvalidInput(format!(
            "sampler steps {} disagree with the kernel grid {}",
            config.steps,
            kernel.schedule().steps()
        )));
    }
    let l = predictor.seq_len();
    let k = predictor.k();
    if k != kernel.k() {
        return Err(SlmError::DimensionMismatch {
            left: k,
            right: kernel.k(),
        });
    }
    let mut state = vec![CandidateSet::all_ones(k)?; l];
    let mut trace = Vec::with_capacity(config.steps);
    for j in (1..=config.steps).rev() {
        let outcome = reverse_step(predictor, &state, j, config, kernel, rng)?;
        state = outcome.next;
        trace.push(state.clone());
    }
    // Final decode: query at the grid point adjacent to tau = 0 and take
    // the per-position argmax.
    let tau1 = kernel.schedule().tau_of_step(1)?;
    let outs = predict_guided(predictor, &state, tau1, config)?;
    let tokens = outs.iter().map(|o| argmax(o.probs())).collect();
    Ok((tokens, trace))
}

/// Samples `count` sequences on independent RNG streams (stream id =
/// sequence index), so results are reproducible and order-independent of
/// any parallel execution.
pub fn sample_batch(
    predictor: &dyn Predictor,
    config: &SamplerConfig,
    kernel: &ForwardKernel,
    count: usize,
) -> Result<Vec<Vec<usize>>> {
    crate::parallel::try_par_map(count, |i| {
        let mut stream = rng::stream(config.seed, i as u64);
        sample(predictor, config, kernel, &mut stream)
    })
}
