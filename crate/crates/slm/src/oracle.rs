//! Independent brute-force implementations used only for verification:
//! per-dimension chain composition, Bayes-rule posteriors, exact ELBO/NLL
//! by trajectory enumeration, and grid-search simplex projection.
//!
//! Everything here recomputes the kernels from the raw formulas instead
//! of calling the forward-process module; shared code is limited to the
//! core types (and the predictor under test, which is the input).

use std::collections::BTreeMap;

use crate::error::{Result, SlmError};
use crate::predictor::Predictor;
use crate::types::CandidateSet;

/// Cap on enumerated configurations for the exhaustive checks.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationBudget {
    pub max_states: u128,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_states: 50_000_000,
        }
    }
}

/// Raw schedule value e^{(ln K) j/S}. The j = S endpoint is the exact
/// value K the formula takes symbolically there; evaluating exp(ln K)
/// in floats would miss it by an ulp and poison the boundary KLs.
fn n_raw(k: usize, s: usize, j: usize) -> f64 {
    if j == 0 {
        1.0
    } else if j == s {
        k as f64
    } else {
        ((k as f64).ln() * (j as f64 / s as f64)).exp()
    }
}

/// Probability that one dimension is included at step j given its x0 bit,
/// obtained by composing the stepwise transition probabilities
/// p <- p + (1-p) (n(j)-n(j-1))/(K-n(j-1)) from step 1 up to j.
pub fn marginal_by_composition(k: usize, s: usize, j: usize, x0_bit: bool) -> f64 {
    if x0_bit {
        return 1.0;
    }
    let mut p = 0.0;
    for step in 1..=j {
        let n_prev = n_raw(k, s, step - 1);
        let n_cur = n_raw(k, s, step);
        let denom = k as f64 - n_prev;
        let frac = if denom <= 0.0 {
            1.0
        } else {
            (n_cur - n_prev) / denom
        };
        p += (1.0 - p) * frac;
    }
    p
}

/// Probability that one dimension was included at step j-1 given its bit
/// at step j and at step 0, by Bayes' rule on the two-state chain:
/// included dimensions never drop out, so the ratio of composed marginals
/// is the whole computation.
pub fn posterior_by_bayes(
    k: usize,
    s: usize,
    j: usize,
    x0_bit: bool,
    xt_bit: bool,
) -> Result<f64> {
    if j == 0 || j > s {
        return Err(SlmError::StepOutOfRange { j, lo: 1, hi: s });
    }
    if x0_bit && !xt_bit {
        return Err(SlmError::InvalidInput(
            "conditioning on x0=1, x_t=0 is unreachable".into(),
        ));
    }
    if !xt_bit {
        // The chain only appends candidates, so a bit absent at j was
        // absent at j-1.
        return Ok(0.0);
    }
    if x0_bit {
        return Ok(1.0);
    }
    let m_prev = marginal_by_composition(k, s, j - 1, false);
    let m_cur = marginal_by_composition(k, s, j, false);
    if m_cur == 0.0 {
        return Ok(0.0);
    }
    Ok(m_prev / m_cur)
}

/// Exact ELBO and exact reverse-chain negative log-likelihood of one
/// sequence, both by full trajectory enumeration. The ELBO here is an
/// implementation independent of the losses module; the inequality
/// elbo >= nll is Jensen's and must hold for any predictor.
pub fn exact_nll(
    tokens: &[usize],
    k: usize,
    s: usize,
    predictor: &dyn Predictor,
    budget: &EnumerationBudget,
) -> Result<(f64, f64)> {
    let l = tokens.len();
    if l == 0 {
        return Err(SlmError::InvalidInput("empty sequence".into()));
    }
    let states_per_level = ((1u128 << k) - 1)
        .checked_pow(l as u32)
        .ok_or(SlmError::BudgetExceeded {
            needed: u128::MAX,
            budget: budget.max_states,
        })?;
    let needed = states_per_level.saturating_mul(s as u128);
    if needed > budget.max_states {
        return Err(SlmError::BudgetExceeded {
            needed,
            budget: budget.max_states,
        });
    }

    let elbo = enumerate_elbo(tokens, k, s, predictor)?;
    let nll = enumerate_nll(tokens, k, s, predictor)?;
    Ok((elbo, nll))
}

/// Average (elbo, nll) over an explicit data law given as (sequence,
/// probability) pairs.
pub fn exact_nll_law(
    law: &[(Vec<usize>, f64)],
    k: usize,
    s: usize,
    predictor: &dyn Predictor,
    budget: &EnumerationBudget,
) -> Result<(f64, f64)> {
    let mut elbo = 0.0;
    let mut nll = 0.0;
    for (tokens, weight) in law {
        let (e, n) = exact_nll(tokens, k, s, predictor, budget)?;
        elbo += weight * e;
        nll += weight * n;
    }
    Ok((elbo, nll))
}

fn tau_of(s: usize, j: usize) -> f64 {
    j as f64 / s as f64
}

fn enumerate_elbo(tokens: &[usize], k: usize, s: usize, predictor: &dyn Predictor) -> Result<f64> {
    let mut total = 0.0;
    // Per-step KL terms, j = 2..=S, expectation over the raw marginal.
    for j in 2..=s {
        let r = (n_raw(k, s, j) - 1.0) / (k as f64 - 1.0);
        let keep = (n_raw(k, s, j - 1) - 1.0) / (n_raw(k, s, j) - 1.0);
        let mut acc = 0.0;
        for_each_superset(tokens, k, r, &mut |x_t, weight| {
            let outs = predictor.predict(x_t, tau_of(s, j), None)?;
            let mut kl = 0.0;
            for ((&truth, state), out) in tokens.iter().zip(x_t).zip(&outs) {
                for i in 0..k {
                    if !state.contains(i) {
                        continue;
                    }
                    let gd = if i == truth { 1.0 } else { keep };
                    let nn = out.probs()[i];
                    let pred = nn + (1.0 - nn) * keep;
                    if gd > 0.0 {
                        if pred == 0.0 {
                            kl = f64::INFINITY;
                            break;
                        }
                        kl += gd * (gd / pred).ln();
                    }
                    if gd < 1.0 {
                        if pred == 1.0 {
                            kl = f64::INFINITY;
                            break;
                        }
                        kl += (1.0 - gd) * ((1.0 - gd) / (1.0 - pred)).ln();
                    }
                }
            }
            acc += weight * kl;
            Ok(())
        })?;
        total += acc;
    }
    // Reconstruction term from j = 1.
    let r1 = (n_raw(k, s, 1) - 1.0) / (k as f64 - 1.0);
    let mut acc = 0.0;
    for_each_superset(tokens, k, r1, &mut |x1, weight| {
        let outs = predictor.predict(x1, tau_of(s, 1), None)?;
        let mut nats = 0.0;
        for ((&truth, state), out) in tokens.iter().zip(x1).zip(&outs) {
            nats -= out.probs()[truth].ln();
            for i in 0..k {
                if i != truth && state.contains(i) {
                    nats -= (1.0 - out.probs()[i]).ln();
                }
            }
        }
        acc += weight * nats;
        Ok(())
    })?;
    total += acc;
    Ok(total)
}

fn enumerate_nll(tokens: &[usize], k: usize, s: usize, predictor: &dyn Predictor) -> Result<f64> {
    // Backward dynamic program over joint candidate-set states. Only
    // states whose every position still contains its data category are
    // kept: any path that drops the category reaches likelihood zero.
    let start: Vec<CandidateSet> = tokens
        .iter()
        .map(|_| CandidateSet::all_ones(k))
        .collect::<Result<_>>()?;
    let mut dist: BTreeMap<Vec<CandidateSet>, f64> = BTreeMap::new();
    dist.insert(start, 1.0);

    for j in (2..=s).rev() {
        let keep = (n_raw(k, s, j - 1) - 1.0) / (n_raw(k, s, j) - 1.0);
        let mut next: BTreeMap<Vec<CandidateSet>, f64> = BTreeMap::new();
        for (state, mass) in &dist {
            let outs = predictor.predict(state, tau_of(s, j), None)?;
            // Reverse-step Bernoulli parameters per position.
            let params: Vec<Vec<f64>> = outs
                .iter()
                .zip(state)
                .map(|(out, set)| {
                    (0..k)
                        .map(|i| {
                            if set.contains(i) {
                                out.probs()[i] + (1.0 - out.probs()[i]) * keep
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            for_each_kept_subset(state, tokens, &params, &mut |sub, prob| {
                if prob > 0.0 {
                    *next.entry(sub.to_vec()).or_insert(0.0) += mass * prob;
                }
                Ok(())
            })?;
        }
        dist = next;
    }

    let mut total = 0.0;
    for (x1, mass) in &dist {
        let outs = predictor.predict(x1, tau_of(s, 1), None)?;
        let mut p0 = 1.0;
        for ((&truth, state), out) in tokens.iter().zip(x1).zip(&outs) {
            p0 *= out.probs()[truth];
            for i in 0..k {
                if i != truth && state.contains(i) {
                    p0 *= 1.0 - out.probs()[i];
                }
            }
        }
        total += mass * p0;
    }
    Ok(-total.ln())
}

/// Enumerates joint supersets of the data one-hots with marginal rate `r`.
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
        weight: f64,
        f: &mut impl FnMut(&[CandidateSet], f64) -> Result<()>,
    ) -> Result<()> {
        if pos == tokens.len() {
            return f(acc, weight);
        }
        let truth = tokens[pos];
        let free: Vec<usize> = (0..k).filter(|&i| i != truth).collect();
        for mask in 0u64..(1u64 << free.len()) {
            let mut bits = vec![0u8; k];
            bits[truth] = 1;
            let mut w = weight;
            for (b, &dim) in free.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    bits[dim] = 1;
                    w *= r;
                } else {
                    w *= 1.0 - r;
                }
            }
            if w == 0.0 {
                continue;
            }
            acc.push(CandidateSet::from_bits(bits).expect("truth bit set"));
            recurse(tokens, k, r, pos + 1, acc, w, f)?;
            acc.pop();
        }
        Ok(())
    }
    let mut acc = Vec::with_capacity(tokens.len());
    recurse(tokens, k, r, 0, &mut acc, 1.0, f)
}

/// Enumerates joint subsets of `state` that keep every data category,
/// with the product-Bernoulli probability of drawing exactly that subset
/// (mass on truth-dropping subsets is accounted by skipping them; their
/// downstream likelihood is zero).
fn for_each_kept_subset(
    state: &[CandidateSet],
    tokens: &[usize],
    params: &[Vec<f64>],
    f: &mut impl FnMut(&[CandidateSet], f64) -> Result<()>,
) -> Result<()> {
    fn recurse(
        state: &[CandidateSet],
        tokens: &[usize],
        params: &[Vec<f64>],
        pos: usize,
        acc: &mut Vec<CandidateSet>,
        prob: f64,
        f: &mut impl FnMut(&[CandidateSet], f64) -> Result<()>,
    ) -> Result<()> {
        if pos == state.len() {
            return f(acc, prob);
        }
        let k = state[pos].k();
        let truth = tokens[pos];
        let free: Vec<usize> = (0..k)
            .filter(|&i| state[pos].contains(i) && i != truth)
            .collect();
        // The truth bit must be drawn on.
        let base = params[pos][truth];
        if base == 0.0 {
            return Ok(());
        }
        for mask in 0u64..(1u64 << free.len()) {
            let mut bits = vec![0u8; k];
            bits[truth] = 1;
            let mut p = prob * base;
            for (b, &dim) in free.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    bits[dim] = 1;
                    p *= params[pos][dim];
                } else {
                    p *= 1.0 - params[pos][dim];
                }
            }
            if p == 0.0 {
                continue;
            }
            acc.push(CandidateSet::from_bits(bits).expect("truth bit set"));
            recurse(state, tokens, params, pos + 1, acc, p, f)?;
            acc.pop();
        }
        Ok(())
    }
    let mut acc = Vec::with_capacity(state.len());
    recurse(state, tokens, params, 0, &mut acc, 1.0, f)
}

/// Exhaustive grid minimizer of ||w - v||_2 over the probability simplex
/// at the given resolution. Dimensions 1..=3 only.
pub fn projection_by_grid(v: &[f64], resolution: f64) -> Result<Vec<f64>> {
    if v.is_empty() || v.len() > 3 {
        return Err(SlmError::InvalidInput(format!(
            "grid projection supports dimensions 1..=3, got {}",
            v.len()
        )));
    }
    if !(resolution > 0.0 && resolution <= 0.5) {
        return Err(SlmError::InvalidInput(format!(
            "bad grid resolution {resolution}"
        )));
    }
    let steps = (1.0 / resolution).round() as u64;
    let points: u128 = match v.len() {
        1 => 1,
        2 => steps as u128 + 1,
        _ => ((steps as u128 + 1) * (steps as u128 + 2)) / 2,
    };
    if points > 400_000_000 {
        return Err(SlmError::BudgetExceeded {
            needed: points,
            budget: 400_000_000,
        });
    }
    Ok(match v.len() {
        1 => vec![1.0],
        2 => {
            let mut best = (f64::INFINITY, vec![0.0, 0.0]);
            for i in 0..=steps {
                let a = i as f64 / steps as f64;
                let w = [a, 1.0 - a];
                let d = dist2(&w, v);
                if d < best.0 {
                    best = (d, w.to_vec());
                }
            }
            best.1
        }
        _ => {
            let mut best = (f64::INFINITY, vec![0.0; 3]);
            for i in 0..=steps {
                let a = i as f64 / steps as f64;
                for jj in 0..=(steps - i) {
                    let b = jj as f64 / steps as f64;
                    let w = [a, b, 1.0 - a - b];
                    let d = dist2(&w, v);
                    if d < best.0 {
                        best = (d, w.to_vec());
                    }
                }
            }
            best.1
        }
    })
}

/// Coarse-to-fine exhaustive grid for 3-dimensional inputs: a full sweep
/// at 1e-2, then full sweeps of a shrinking window around the incumbent
/// down to `final_resolution`. The objective is 2-strongly convex, so
/// each stage's minimizer is within about one cell of the true one and
/// the window (+-3 previous cells) always contains it.
pub fn projection_by_refined_grid(v: &[f64], final_resolution: f64) -> Result<Vec<f64>> {
    if v.len() != 3 {
        return Err(SlmError::InvalidInput(
            "refined grid projection is for 3-dimensional inputs".into(),
        ));
    }
    let mut res = 1e-2;
    let mut center = projection_by_grid(v, res)?;
    while res > final_resolution {
        let next = (res * 1e-2).max(final_resolution);
        let lo_a = (center[0] - 3.0 * res).max(0.0);
        let hi_a = (center[0] + 3.0 * res).min(1.0);
        let lo_b = (center[1] - 3.0 * res).max(0.0);
        let hi_b = (center[1] + 3.0 * res).min(1.0);
        let mut best = (f64::INFINITY, center.clone());
        let steps_a = ((hi_a - lo_a) / next).ceil() as u64;
        let steps_b = ((hi_b - lo_b) / next).ceil() as u64;
        for i in 0..=steps_a {
            let a = (lo_a + i as f64 * next).min(hi_a);
            for jj in 0..=steps_b {
                let b = (lo_b + jj as f64 * next).min(hi_b);
                if a + b > 1.0 {
                    continue;
                }
                let w = [a, b, 1.0 - a - b];
                let d = dist2(&w, v);
                if d < best.0 {
                    best = (d, w.to_vec());
                }
            }
        }
        center = best.1;
        res = next;
    }
    Ok(center)
}

fn dist2(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}
