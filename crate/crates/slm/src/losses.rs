//! Training and evaluation objectives: the exact ELBO terms (L_T, the
//! per-step Bernoulli KLs, the reconstruction term L_0), the reweighted
//! cross-entropy surrogate, the plain cross-entropy surrogate, and the
//! bits-per-character estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlmError};
use crate::forward::ForwardKernel;
use crate::predictor::{prepare_batch, LossStats, Predictor, PreparedExample};
use crate::sampler::reverse_step_params;
use crate::types::{BernoulliParams, CandidateSet, PredictorOutput, SequenceBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Stochastic estimate of the exact ELBO (per-step KL, L_0 at j=1).
    Elbo,
    /// Cross-entropy reweighted by (n(t)-n(t-1))/(n(t)-1).
    Weighted,
    /// Plain cross-entropy against the data one-hot.
    Simple,
}

/// How the ELBO expectation over x_t is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElboMode {
    /// Full enumeration of every reachable candidate set per step.
    ExactSum,
    /// Monte Carlo draws from the forward marginal per step.
    Mc { draws: usize },
}

/// Per-term ELBO breakdown for one sequence, in nats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElboReport {
    /// Reconstruction term from j=1.
    pub l0: f64,
    /// Per-step KL terms for j = 2..=S (length S-1).
    pub lt_terms: Vec<f64>,
    /// Prior term; identically zero because the j=S marginal is Bern(1).
    pub l_t: f64,
    pub total_nats: f64,
    /// total_nats / (L ln 2).
    pub bpc: f64,
    pub mode: String,
    /// Monte Carlo standard errors (zero in exact mode).
    pub l0_stderr: f64,
    pub lt_stderrs: Vec<f64>,
    pub total_stderr: f64,
}

/// KL divergence between two multivariate Bernoullis, summed over the
/// support dimensions, with the conventions 0 log(0/x) = 0 and
/// (positive mass vs zero prediction) = +inf.
pub fn bernoulli_kl(
    gd: &BernoulliParams,
    pred: &BernoulliParams,
    support: &CandidateSet,
) -> Result<f64> {
    if gd.k() != pred.k() || gd.k() != support.k() {
        return Err(SlmError::DimensionMismatch {
            left: gd.k(),
            right: pred.k(),
        });
    }
    let mut acc = 0.0;
    for i in 0..gd.k() {
        if !support.contains(i) {
            continue;
        }
        let g = gd.probs()[i];
        let p = pred.probs()[i];
        if g > 0.0 {
            if p == 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += g * (g / p).ln();
        }
        if g < 1.0 {
            if p == 1.0 {
                return Ok(f64::INFINITY);
            }
            acc += (1.0 - g) * ((1.0 - g) / (1.0 - p)).ln();
        }
    }
    // Gibbs' inequality guarantees nonnegativity; absorb float rounding.
    if acc < 0.0 {
        debug_assert!(acc > -1e-12, "KL rounded to {acc}");
        acc = 0.0;
    }
    Ok(acc)
}

/// Per-step ELBO term at grid step j >= 2 for one sequence, summed over
/// positions: KL between the true posterior and the parameterized reverse
/// step at the given x_t.
pub fn lt_term(
    kernel: &ForwardKernel,
    predictor: &dyn Predictor,
    tokens: &[usize],
    x_t: &[CandidateSet],
    j: usize,
    cls: Option<usize>,
) -> Result<f64> {
    let s = kernel.schedule().steps();
    if j < 2 || j > s {
        return Err(SlmError::StepOutOfRange { j, lo: 2, hi: s });
    }
    let tau = kernel.schedule().tau_of_step(j)?;
    let outs = predictor.predict(x_t, tau, cls)?;
    let mut acc = 0.0;
    for ((&truth, state), out) in tokens.iter().zip(x_t).zip(&outs) {
        let x0 = CandidateSet::one_hot(truth, kernel.k())?;
        let gd = kernel.posterior_params(state, &x0, j)?;
        let pred = reverse_step_params(out, state, j, kernel.schedule())?;
        acc += bernoulli_kl(&gd, &pred, state)?;
    }
    Ok(acc)
}

/// Reconstruction term at j=1 for one sequence, summed over positions:
/// the exact Bernoulli log-likelihood of emitting the one-hot x_0 from
/// Bern(NN(x_1)). Returns +inf (flagged through the report) when the
/// prediction puts zero mass on a true category or unit mass on a
/// spurious one.
pub fn l0_term(
    predictor: &dyn Predictor,
    tokens: &[usize],
    x1: &[CandidateSet],
    cls: Option<usize>,
    tau1: f64,
) -> Result<f64> {
    let outs = predictor.predict(x1, tau1, cls)?;
    let mut acc = 0.0;
    for ((&truth, state), out) in tokens.iter().zip(x1).zip(&outs) {
        if !state.contains(truth) {
            return Err(SlmError::SupportViolation);
        }
        acc += l0_position(out, truth, state);
    }
    Ok(acc)
}

fn l0_position(out: &PredictorOutput, truth: usize, support: &CandidateSet) -> f64 {
    let probs = out.probs();
    let mut acc = -probs[truth].ln(); // -ln 0 = +inf, the flagged case
    for (i, &p) in probs.iter().enumerate() {
        if i != truth && support.contains(i) {
            acc -= (1.0 - p).ln();
        }
    }
    acc
}

/// Loss contribution of one prepared example under the chosen objective,
/// averaged over positions and scaled by S. This is the reference
/// evaluation path used by the finite-difference checks; the trainable
/// predictor computes the same quantity internally alongside its analytic
/// gradient.
pub fn example_loss(
    predictor: &dyn Predictor,
    example: &PreparedExample,
    kind: LossKind,
    kernel: &ForwardKernel,
) -> Result<f64> {
    let schedule = kernel.schedule();
    let s = schedule.steps();
    let j = example.j;
    if j == 0 || j > s {
        return Err(SlmError::StepOutOfRange { j, lo: 1, hi: s });
    }
    let l = example.tokens.len() as f64;
    let scale = s as f64 / l;
    match kind {
        LossKind::Simple | LossKind::Weighted => {
            let tau = schedule.tau_of_step(j)?;
            let outs = predictor.predict(&example.x_t, tau, example.cls_input)?;
            let weight = if kind == LossKind::Weighted {
                let n_cur = schedule.n_at_step(j)?;
                let n_prev = schedule.n_at_step(j - 1)?;
                (n_cur - n_prev) / (n_cur - 1.0)
            } else {
                1.0
            };
            let mut acc = 0.0;
            for (&truth, out) in example.tokens.iter().zip(&outs) {
                let p = out.probs()[truth];
                if p <= 0.0 {
                    return Err(SlmError::InvalidInput(
                        "zero predicted probability at the true category".into(),
                    ));
                }
                acc -= p.ln();
            }
            Ok(scale * weight * acc)
        }
        LossKind::Elbo => {
            if j >= 2 {
                Ok(scale
                    * lt_term(
                        kernel,
                        predictor,
                        &example.tokens,
                        &example.x_t,
                        j,
                        example.cls_input,
                    )?)
            } else {
                let tau1 = schedule.tau_of_step(1)?;
                Ok(scale
                    * l0_term(
                        predictor,
                        &example.tokens,
                        &example.x_t,
                        example.cls_input,
                        tau1,
                    )?)
            }
        }
    }
}

/// Monte Carlo estimate of an objective over a batch: per example a
/// uniform time snapped to the grid, label dropout, corruption, then the
/// per-example loss. Mean +- stderr over the batch.
pub fn mc_loss<R: Rng>(
    predictor: &dyn Predictor,
    batch: &SequenceBatch,
    kernel: &ForwardKernel,
    kind: LossKind,
    label_dropout: f64,
    rng: &mut R,
) -> Result<LossStats> {
    if batch.is_empty() {
        return Err(SlmError::InvalidInput("empty batch".into()));
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    let prepared = prepare_batch(batch, &indices, kernel, label_dropout, rng)?;
    let values = prepared
        .iter()
        .map(|e| example_loss(predictor, e, kind, kernel))
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats_of(&values))
}

/// The reweighted cross-entropy objective (Monte Carlo estimate).
pub fn weighted_loss<R: Rng>(
    predictor: &dyn Predictor,
    batch: &SequenceBatch,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<LossStats> {
    mc_loss(predictor, batch, kernel, LossKind::Weighted, 0.0, rng)
}

/// The plain cross-entropy objective (Monte Carlo estimate).
pub fn simple_loss<R: Rng>(
    predictor: &dyn Predictor,
    batch: &SequenceBatch,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<LossStats> {
    mc_loss(predictor, batch, kernel, LossKind::Simple, 0.0, rng)
}

fn stats_of(values: &[f64]) -> LossStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        (var / n as f64).sqrt()
    };
    LossStats { mean, stderr }
}

/// Evaluates the full ELBO of one sequence, term by term.
///
/// `ExactSum` enumerates every candidate set reachable from x_0 at each
/// step (budgeted); `Mc` replaces each per-step expectation with Monte
/// Carlo draws from the forward marginal and reports standard errors.
pub fn elbo_exact<R: Rng>(
    predictor: &dyn Predictor,
    tokens: &[usize],
    kernel: &ForwardKernel,
    mode: ElboMode,
    cls: Option<usize>,
    max_states: u128,
    rng: &mut R,
) -> Result<ElboReport> {
    let schedule = kernel.schedule();
    let s = schedule.steps();
    let l = tokens.len();
    if l == 0 {
        return Err(SlmError::InvalidInput("empty sequence".into()));
    }

    // L_T: KL between the step-S marginal and the Bern(1) prior, summed
    // over positions. Exactly zero because n(1) = K.
    let mut l_t = 0.0;
    let ones = CandidateSet::all_ones(kernel.k())?;
    let prior = BernoulliParams::new(vec![1.0; kernel.k()])?;
    for &truth in tokens {
        let x0 = CandidateSet::one_hot(truth, kernel.k())?;
        let marg = kernel.marginal_params(&x0, s)?;
        l_t += bernoulli_kl(&marg, &prior, &ones)?;
    }

    let mut lt_terms = Vec::with_capacity(s.saturating_sub(1));
    let mut lt_stderrs = Vec::with_capacity(s.saturating_sub(1));
    let (l0, l0_stderr);

    match mode {
        ElboMode::ExactSum => {
            let states_per_step = (1u128 << (kernel.k() - 1))
                .checked_pow(l as u32)
                .ok_or(SlmError::BudgetExceeded {
                    needed: u128::MAX,
                    budget: max_states,
                })?;
            let needed = states_per_step.saturating_mul(s as u128);
            if needed > max_states {
                return Err(SlmError::BudgetExceeded {
                    needed,
                    budget: max_states,
                });
            }
            for j in 2..=s {
                let r = kernel.marginal_wrong_prob(j)?;
                let mut acc = 0.0;
                for_each_superset(tokens, kernel.k(), r, &mut |x_t, prob| {
                    acc += prob * lt_term(kernel, predictor, tokens, x_t, j, cls)?;
                    Ok(())
                })?;
                lt_terms.push(acc);
                lt_stderrs.push(0.0);
            }
            let r1 = kernel.marginal_wrong_prob(1)?;
            let tau1 = schedule.tau_of_step(1)?;
            let mut acc = 0.0;
            for_each_superset(tokens, kernel.k(), r1, &mut |x_t, prob| {
                acc += prob * l0_term(predictor, tokens, x_t, cls, tau1)?;
                Ok(())
            })?;
            l0 = acc;
            l0_stderr = 0.0;
        }
        ElboMode::Mc { draws } => {
            if draws == 0 {
                return Err(SlmError::InvalidInput("MC draws must be >= 1".into()));
            }
            for j in 2..=s {
                let values = (0..draws)
                    .map(|_| {
                        let x_t = kernel.corrupt(tokens, j, rng)?;
                        lt_term(kernel, predictor, tokens, &x_t, j, cls)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let st = stats_of(&values);
                lt_terms.push(st.mean);
                lt_stderrs.push(st.stderr);
            }
            let tau1 = schedule.tau_of_step(1)?;
            let values = (0..draws)
                .map(|_| {
                    let x1 = kernel.corrupt(tokens, 1, rng)?;
                    l0_term(predictor, tokens, &x1, cls, tau1)
                })
                .collect::<Result<Vec<f64>>>()?;
            let st = stats_of(&values);
            l0 = st.mean;
            l0_stderr = st.stderr;
        }
    }

    let total_nats = l0 + lt_terms.iter().sum::<f64>() + l_t;
    let total_stderr = (l0_stderr * l0_stderr
        + lt_stderrs.iter().map(|e| e * e).sum::<f64>())
    .sqrt();
    Ok(ElboReport {
        l0,
        lt_terms,
        l_t,
        total_nats,
        bpc: total_nats / (l as f64 * std::f64::consts::LN_2),
        mode: match mode {
            ElboMode::ExactSum => "exact_sum".into(),
            ElboMode::Mc { .. } => "mc".into(),
        },
        l0_stderr,
        lt_stderrs,
        total_stderr,
    })
}

/// Enumerates every joint candidate-set configuration containing the data
/// one-hots, with its probability under the forward marginal whose
/// spurious-inclusion rate is `r`. Positions are independent; free
/// dimensions are the K-1 non-data dimensions per position.
fn for_each_superset(
    tokens: &[usize],
    k: usize,
    r: f64,
    f: &mut impl FnMut(&[CandidateSet], f64) -> Result<()>,
) -> Result<()> {
    fn recurse(
        tokens: &[usize],
        k: usize,
        r: f64,
        pos: usize,
        acc: &mut Vec<CandidateSet>,
        prob: f64,
        f: &mut impl FnMut(&[CandidateSet], f64) -> Result<()>,
    ) -> Result<()> {
        if pos == tokens.len() {
            return f(acc, prob);
        }
        let truth = tokens[pos];
        let free: Vec<usize> = (0..k).filter(|&i| i != truth).collect();
        for mask in 0u64..(1u64 << free.len()) {
            let mut bits = vec![0u8; k];
            bits[truth] = 1;
            let mut p = prob;
            for (b, &dim) in free.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    bits[dim] = 1;
                    p *= r;
                } else {
                    p *= 1.0 - r;
                }
            }
            if p == 0.0 {
                continue;
            }
            acc.push(CandidateSet::from_bits(bits).expect("truth bit set"));
            recurse(tokens, k, r, pos + 1, acc, p, f)?;
            acc.pop();
        }
        Ok(())
    }
    let mut acc = Vec::with_capacity(tokens.len());
    recurse(tokens, k, r, 0, &mut acc, 1.0, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{FixedTokenPredictor, UniformPredictor};
    use crate::rng;
    use crate::schedule::Schedule;

    fn kernel(k: usize, s: usize) -> ForwardKernel {
        ForwardKernel::new(Schedule::exponential(k, s).unwrap()).unwrap()
    }

    #[test]
    fn kl_of_identical_params_is_zero() {
        let p = BernoulliParams::new(vec![0.3, 0.8, 1.0]).unwrap();
        let supp = CandidateSet::all_ones(3).unwrap();
        assert_eq!(bernoulli_kl(&p, &p, &supp).unwrap(), 0.0);
    }

    #[test]
    #[allow(clippy::approx_constant)] // 0.693147 is the frozen expected value
    fn kl_single_dimension_hand_value() {
        // gd = 1, pred = 0.5: 1 * ln(1/0.5) = ln 2.
        let gd = BernoulliParams::new(vec![1.0]).unwrap();
        let pred = BernoulliParams::new(vec![0.5]).unwrap();
        let supp = CandidateSet::all_ones(1).unwrap();
        let kl = bernoulli_kl(&gd, &pred, &supp).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((kl - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn kl_bern_one_vs_bern_one_is_zero() {
        let one = BernoulliParams::new(vec![1.0, 1.0]).unwrap();
        let supp = CandidateSet::all_ones(2).unwrap();
        assert_eq!(bernoulli_kl(&one, &one, &supp).unwrap(), 0.0);
    }

    #[test]
    fn kl_positive_mass_vs_zero_prediction_is_infinite() {
        let gd = BernoulliParams::new(vec![0.5]).unwrap();
        let zero = BernoulliParams::new(vec![0.0]).unwrap();
        let one = BernoulliParams::new(vec![1.0]).unwrap();
        let supp = CandidateSet::all_ones(1).unwrap();
        assert!(bernoulli_kl(&gd, &zero, &supp).unwrap().is_infinite());
        assert!(bernoulli_kl(&gd, &one, &supp).unwrap().is_infinite());
    }

    #[test]
    fn kl_ignores_dimensions_outside_support() {
        let gd = BernoulliParams::new(vec![1.0, 0.0]).unwrap();
        let pred = BernoulliParams::new(vec![1.0, 0.7]).unwrap();
        let supp = CandidateSet::from_bits(vec![1, 0]).unwrap();
        assert_eq!(bernoulli_kl(&gd, &pred, &supp).unwrap(), 0.0);
    }

    #[test]
    fn perfect_prediction_zeroes_the_step_term() {
        let k = kernel(4, 4);
        let predictor = FixedTokenPredictor::new(4, vec![1, 3]).unwrap();
        let x_t = vec![
            CandidateSet::from_bits(vec![1, 1, 0, 1]).unwrap(),
            CandidateSet::from_bits(vec![0, 1, 1, 1]).unwrap(),
        ];
        let v = lt_term(&k, &predictor, &[1, 3], &x_t, 3, None).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn l0_singleton_support_is_zero() {
        let predictor = FixedTokenPredictor::new(3, vec![2]).unwrap();
        let x1 = vec![CandidateSet::one_hot(2, 3).unwrap()];
        assert_eq!(l0_term(&predictor, &[2], &x1, None, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn l0_bernoulli_log_likelihood_value() {
        // Uniform prediction over a support of size 2: the emitted one-hot
        // requires the truth bit on (1/2) and the spurious bit off (1/2).
        let predictor = UniformPredictor { k: 3, l: 1 };
        let x1 = vec![CandidateSet::from_bits(vec![1, 1, 0]).unwrap()];
        let v = l0_term(&predictor, &[0], &x1, None, 0.25).unwrap();
        let expected = -(0.5f64.ln()) - (0.5f64.ln());
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn l0_perfect_prediction_is_zero_even_with_spurious_candidates() {
        let predictor = FixedTokenPredictor::new(3, vec![0]).unwrap();
        let x1 = vec![CandidateSet::from_bits(vec![1, 1, 1]).unwrap()];
        assert_eq!(l0_term(&predictor, &[0], &x1, None, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn l0_zero_mass_at_truth_flags_infinity() {
        let predictor = FixedTokenPredictor::new(3, vec![1]).unwrap();
        let x1 = vec![CandidateSet::from_bits(vec![1, 1, 0]).unwrap()];
        // Truth is 0 but the predictor puts all mass on 1.
        let v = l0_term(&predictor, &[0], &x1, None, 0.25).unwrap();
        assert!(v.is_infinite() && v > 0.0);
    }

    #[test]
    fn weighted_weight_hand_value_at_final_step() {
        // K=5, S=2, j=S: weight = (5 - sqrt5)/4.
        let k = kernel(5, 2);
        let predictor = UniformPredictor { k: 5, l: 1 };
        let example = PreparedExample {
            tokens: vec![2],
            x_t: vec![CandidateSet::all_ones(5).unwrap()],
            j: 2,
            cls_input: None,
        };
        let simple = example_loss(&predictor, &example, LossKind::Simple, &k).unwrap();
        let weighted = example_loss(&predictor, &example, LossKind::Weighted, &k).unwrap();
        let w = (5.0 - 5f64.sqrt()) / 4.0;
        assert!((w - 0.690983).abs() < 1e-6);
        assert!((weighted - w * simple).abs() < 1e-12);
        // simple itself: S * (-ln(1/5)) = 2 ln 5.
        assert!((simple - 2.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn simple_loss_uniform_support_value() {
        // Uniform predictor over a support of size m: -ln(1/m) per position.
        let k = kernel(4, 1);
        let predictor = UniformPredictor { k: 4, l: 1 };
        let example = PreparedExample {
            tokens: vec![0],
            x_t: vec![CandidateSet::from_bits(vec![1, 1, 1, 0]).unwrap()],
            j: 1,
            cls_input: None,
        };
        let v = example_loss(&predictor, &example, LossKind::Simple, &k).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_equals_simple_at_single_step() {
        // S=1: the only step's weight is (K-1)/(K-1) = 1.
        let k = kernel(4, 1);
        let predictor = UniformPredictor { k: 4, l: 2 };
        let batch = SequenceBatch::new(vec![vec![0, 2], vec![3, 1]], None, 4, 0).unwrap();
        let a = weighted_loss(&predictor, &batch, &k, &mut rng::master(9)).unwrap();
        let b = simple_loss(&predictor, &batch, &k, &mut rng::master(9)).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn perfect_predictor_zeroes_all_objectives() {
        let k = kernel(5, 3);
        let predictor = FixedTokenPredictor::new(5, vec![1, 4]).unwrap();
        let batch = SequenceBatch::new(vec![vec![1, 4]], None, 5, 0).unwrap();
        let mut r = rng::master(12);
        assert_eq!(simple_loss(&predictor, &batch, &k, &mut r).unwrap().mean, 0.0);
        assert_eq!(weighted_loss(&predictor, &batch, &k, &mut r).unwrap().mean, 0.0);
        let report = elbo_exact(
            &predictor,
            &[1, 4],
            &k,
            ElboMode::ExactSum,
            None,
            1 << 24,
            &mut r,
        )
        .unwrap();
        assert_eq!(report.l_t, 0.0);
        assert!(report.total_nats.abs() < 1e-15);
        assert!(report.bpc.abs() < 1e-15);
    }

    #[test]
    fn elbo_report_shape_and_identity() {
        let k = kernel(3, 4);
        let predictor = UniformPredictor { k: 3, l: 1 };
        let report = elbo_exact(
            &predictor,
            &[0],
            &k,
            ElboMode::ExactSum,
            None,
            1 << 24,
            &mut rng::master(0),
        )
        .unwrap();
        assert_eq!(report.lt_terms.len(), 3);
        assert_eq!(report.l_t, 0.0);
        let sum = report.l0 + report.lt_terms.iter().sum::<f64>() + report.l_t;
        assert!((report.total_nats - sum).abs() < 1e-15);
        assert!(
            (report.bpc - report.total_nats / std::f64::consts::LN_2).abs() < 1e-15
        );
        assert!(report.total_nats > 0.0);
    }

    #[test]
    fn mc_elbo_converges_to_exact_sum() {
        let k = kernel(3, 3);
        let predictor = UniformPredictor { k: 3, l: 1 };
        let exact = elbo_exact(
            &predictor,
            &[1],
            &k,
            ElboMode::ExactSum,
            None,
            1 << 24,
            &mut rng::master(0),
        )
        .unwrap();
        let mc = elbo_exact(
            &predictor,
            &[1],
            &k,
            ElboMode::Mc { draws: 20_000 },
            None,
            1 << 24,
            &mut rng::master(5),
        )
        .unwrap();
        let tol = 4.0 * mc.total_stderr + 1e-9;
        assert!(
            (mc.total_nats - exact.total_nats).abs() < tol,
            "mc {} vs exact {} (tol {tol})",
            mc.total_nats,
            exact.total_nats
        );
    }

    #[test]
    fn exact_sum_budget_is_enforced() {
        let k = kernel(8, 4);
        let predictor = UniformPredictor { k: 8, l: 4 };
        let err = elbo_exact(
            &predictor,
            &[0, 1, 2, 3],
            &k,
            ElboMode::ExactSum,
            None,
            1000,
            &mut rng::master(0),
        );
        assert!(matches!(err, Err(SlmError::BudgetExceeded { .. })));
    }

    #[test]
    fn mc_weighted_loss_matches_exact_weighted_sum() {
        // E over uniform tau of the S-scaled weighted term equals
        // sum_j w_j E_{x_t|j}[-ln NN_truth], computed here by enumerating
        // the four supersets per step for K=3, L=1.
        let k = kernel(3, 4);
        let predictor = UniformPredictor { k: 3, l: 1 };
        let token = 1usize;

        let mut exact = 0.0;
        for j in 1..=4usize {
            let n_cur = k.schedule().n_at_step(j).unwrap();
            let n_prev = k.schedule().n_at_step(j - 1).unwrap();
            let w = (n_cur - n_prev) / (n_cur - 1.0);
            let r = k.marginal_wrong_prob(j).unwrap();
            // Support sizes 1..=3: choose which of the two wrong dims are on.
            let mut ce = 0.0;
            for wrong_mask in 0..4u32 {
                let ones = wrong_mask.count_ones() as usize;
                let prob = r.powi(ones as i32) * (1.0 - r).powi(2 - ones as i32);
                ce += prob * ((ones + 1) as f64).ln();
            }
            exact += w * ce;
        }

        let batch = SequenceBatch::new(vec![vec![token]; 4000], None, 3, 0).unwrap();
        let stats = weighted_loss(&predictor, &batch, &k, &mut rng::master(63)).unwrap();
        assert!(
            (stats.mean - exact).abs() < 3.0 * stats.stderr,
            "mc {} vs exact {exact} (stderr {})",
            stats.mean,
            stats.stderr
        );
    }

    #[test]
    fn mc_elbo_matches_binomial_oracle_at_k27() {
        // For a uniform predictor the per-position ELBO terms depend on
        // x_t only through its support size m, so the exact expectation is
        // a 27-term binomial sum — tractable where full enumeration is not.
        let k = kernel(27, 8);
        let predictor = UniformPredictor { k: 27, l: 1 };
        let token = 3usize;

        let binom = |n: usize, k_: usize| -> f64 {
            let mut v = 1.0f64;
            for i in 0..k_ {
                v *= (n - i) as f64 / (i + 1) as f64;
            }
            v
        };
        let mut exact = 0.0;
        for j in 2..=8usize {
            let r = k.marginal_wrong_prob(j).unwrap();
            let keep = k.posterior_keep_prob(j).unwrap();
            let mut term = 0.0;
            for extra in 0..=26usize {
                let m = extra + 1;
                let p_m = binom(26, extra) * r.powi(extra as i32) * (1.0 - r).powi(26 - extra as i32);
                let nn = 1.0 / m as f64;
                let pred = nn + (1.0 - nn) * keep;
                let mut kl = -pred.ln();
                if extra > 0 {
                    kl += extra as f64
                        * (keep * (keep / pred).ln()
                            + (1.0 - keep) * ((1.0 - keep) / (1.0 - pred)).ln());
                }
                term += p_m * kl;
            }
            exact += term;
        }
        // Reconstruction term at j=1.
        let r1 = k.marginal_wrong_prob(1).unwrap();
        for extra in 0..=26usize {
            let m = extra + 1;
            let p_m = binom(26, extra) * r1.powi(extra as i32) * (1.0 - r1).powi(26 - extra as i32);
            let nn = 1.0 / m as f64;
            let mut v = -nn.ln();
            if extra > 0 {
                v -= extra as f64 * (1.0 - nn).ln();
            }
            exact += p_m * v;
        }

        let report = elbo_exact(
            &predictor,
            &[token],
            &k,
            ElboMode::Mc { draws: 3000 },
            None,
            1 << 24,
            &mut rng::master(64),
        )
        .unwrap();
        let tol = 4.0 * report.total_stderr + 1e-9;
        assert!(
            (report.total_nats - exact).abs() < tol,
            "mc {} vs binomial oracle {exact} (tol {tol})",
            report.total_nats
        );
    }

    #[test]
    fn step_kl_gradient_norm_is_bounded() {
        // Finite-difference check of the gradient-norm bound: for j >= 2
        // and a support dimension i,
        //   ||grad KL_i|| <= (n_j - n_{j-1})/(n_{j-1} - 1) ||grad NN_i||.
        use crate::predictor::{LinearPredictor, PredictorConfig};
        let k = kernel(4, 4);
        let config = PredictorConfig {
            k: 4,
            l: 1,
            class_count: 0,
            time_features: 2,
            hidden: 0,
        };
        let mut predictor =
            LinearPredictor::with_uniform_random_params(config, 71, 0.4).unwrap();
        let mut r = rng::master(72);
        let h = 1e-5;
        for trial in 0..10 {
            let token = trial % 4;
            let j = 2 + trial % 3;
            let x_t = k.corrupt(&[token], j, &mut r).unwrap();
            let tau = k.schedule().tau_of_step(j).unwrap();
            let keep = k.posterior_keep_prob(j).unwrap();
            let n_cur = k.schedule().n_at_step(j).unwrap();
            let n_prev = k.schedule().n_at_step(j - 1).unwrap();
            let bound_factor = (n_cur - n_prev) / (n_prev - 1.0);

            for dim in 0..4usize {
                if !x_t[0].contains(dim) {
                    continue;
                }
                let gd = if dim == token { 1.0 } else { keep };
                let kl_of = |p: &LinearPredictor| -> f64 {
                    let nn = p.predict(&x_t, tau, None).unwrap()[0].probs()[dim];
                    let pred = nn + (1.0 - nn) * keep;
                    let mut v = gd * (gd / pred).ln();
                    if gd < 1.0 {
                        v += (1.0 - gd) * ((1.0 - gd) / (1.0 - pred)).ln();
                    }
                    v
                };
                let nn_of = |p: &LinearPredictor| -> f64 {
                    p.predict(&x_t, tau, None).unwrap()[0].probs()[dim]
                };
                let base = predictor.params().to_vec();
                let mut kl_grad_sq = 0.0;
                let mut nn_grad_sq = 0.0;
                for idx in 0..base.len() {
                    let mut hi = base.clone();
                    hi[idx] += h;
                    predictor.set_params(hi).unwrap();
                    let (kl_up, nn_up) = (kl_of(&predictor), nn_of(&predictor));
                    let mut lo = base.clone();
                    lo[idx] -= h;
                    predictor.set_params(lo).unwrap();
                    let (kl_down, nn_down) = (kl_of(&predictor), nn_of(&predictor));
                    let dkl = (kl_up - kl_down) / (2.0 * h);
                    let dnn = (nn_up - nn_down) / (2.0 * h);
                    kl_grad_sq += dkl * dkl;
                    nn_grad_sq += dnn * dnn;
                }
                predictor.set_params(base).unwrap();
                assert!(
                    kl_grad_sq.sqrt() <= bound_factor * nn_grad_sq.sqrt() + 1e-6,
                    "trial {trial} dim {dim}: {} > {} * {}",
                    kl_grad_sq.sqrt(),
                    bound_factor,
                    nn_grad_sq.sqrt()
                );
            }
        }
    }

    #[test]
    fn superset_enumeration_probabilities_sum_to_one() {
        let mut total = 0.0;
        for_each_superset(&[0, 2], 3, 0.3, &mut |sets, p| {
            assert!(sets[0].contains(0) && sets[1].contains(2));
            total += p;
            Ok(())
        })
        .unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
