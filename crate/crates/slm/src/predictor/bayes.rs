//! Bayes-optimal enumeration predictor: returns the exact dataset
//! posterior mean of x_0 given x_t under the forward marginal likelihood.
//! Verification device only — cost scales with the number of distinct
//! dataset sequences per query.

use std::collections::HashMap;

use super::{check_predict_inputs, Predictor};
use crate::error::{Result, SlmError};
use crate::forward::ForwardKernel;
use crate::types::{CandidateSet, PredictorOutput, SequenceBatch};

#[derive(Debug, Clone)]
pub struct BayesPredictor {
    k: usize,
    l: usize,
    kernel: ForwardKernel,
    /// Distinct sequences with their empirical weights.
    groups: Vec<(Vec<usize>, f64)>,
}

impl BayesPredictor {
    /// Builds the predictor from an enumerable dataset. The budget bounds
    /// N * L * K, the per-query work before deduplication.
    pub fn from_dataset(
        dataset: &SequenceBatch,
        kernel: &ForwardKernel,
        max_elems: u128,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(SlmError::InvalidInput("empty dataset".into()));
        }
        if dataset.k() != kernel.k() {
            return Err(SlmError::DimensionMismatch {
                left: dataset.k(),
                right: kernel.k(),
            });
        }
        let needed =
            dataset.len() as u128 * dataset.seq_len() as u128 * dataset.k() as u128;
        if needed > max_elems {
            return Err(SlmError::BudgetExceeded {
                needed,
                budget: max_elems,
            });
        }
        let mut counts: HashMap<&[usize], usize> = HashMap::new();
        for seq in dataset.tokens() {
            *counts.entry(seq.as_slice()).or_insert(0) += 1;
        }
        let total = dataset.len() as f64;
        let mut groups: Vec<(Vec<usize>, f64)> = counts
            .into_iter()
            .map(|(seq, count)| (seq.to_vec(), count as f64 / total))
            .collect();
        groups.sort_by(|a, b| a.0.cmp(&b.0)); // deterministic order regardless of hash state
        Ok(Self {
            k: dataset.k(),
            l: dataset.seq_len(),
            kernel: *kernel,
            groups,
        })
    }
}

impl Predictor for BayesPredictor {
    fn k(&self) -> usize {
        self.k
    }

    fn seq_len(&self) -> usize {
        self.l
    }

    /// Posterior mean of x_0 given x_t. The class argument is ignored.
    ///
    /// q(x_t | x_0) factorizes per position and dimension with spurious
    /// inclusion probability r(tau) = (n(tau)-1)/(K-1); the r-powers are
    /// shared by every sequence compatible with the support, so they are
    /// computed once per position and only compatibility varies per group.
    fn predict(
        &self,
        x_t: &[CandidateSet],
        tau: f64,
        _cls: Option<usize>,
    ) -> Result<Vec<PredictorOutput>> {
        check_predict_inputs(self, x_t, tau)?;
        let r = self.kernel.marginal_wrong_prob_at(tau)?;
        let mut shared = 1.0;
        for set in x_t {
            let ones = set.count_ones() as i32;
            shared *= r.powi(ones - 1) * (1.0 - r).powi(self.k as i32 - ones);
        }
        if shared <= 0.0 {
            return Err(SlmError::InvalidInput(
                "candidate sets unreachable under the forward marginal".into(),
            ));
        }

        let mut total = 0.0;
        let mut numerators = vec![vec![0.0; self.k]; self.l];
        for (tokens, weight) in &self.groups {
            let compatible = tokens
                .iter()
                .zip(x_t)
                .all(|(&token, set)| set.contains(token));
            if !compatible {
                continue;
            }
            total += weight;
            for (pos, &token) in tokens.iter().enumerate() {
                numerators[pos][token] += weight;
            }
        }
        if total <= 0.0 {
            return Err(SlmError::InvalidInput(
                "candidate sets incompatible with every dataset sequence".into(),
            ));
        }
        numerators
            .into_iter()
            .zip(x_t)
            .map(|(mut probs, set)| {
                for p in &mut probs {
                    *p /= total;
                }
                PredictorOutput::new(probs, set.clone())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Schedule;

    fn kernel(k: usize, s: usize) -> ForwardKernel {
        ForwardKernel::new(Schedule::exponential(k, s).unwrap()).unwrap()
    }

    fn batch(rows: &[&[usize]], k: usize) -> SequenceBatch {
        SequenceBatch::new(rows.iter().map(|r| r.to_vec()).collect(), None, k, 0).unwrap()
    }

    #[test]
    fn symmetric_dataset_splits_mass_evenly() {
        // {AA: 0.5, BB: 0.5}, x_t all-ones at both positions.
        let data = batch(&[&[0, 0], &[1, 1]], 2);
        let p = BayesPredictor::from_dataset(&data, &kernel(2, 4), 1 << 20).unwrap();
        let x = vec![CandidateSet::all_ones(2).unwrap(); 2];
        let out = p.predict(&x, 1.0, None).unwrap();
        for o in out {
            assert!((o.probs()[0] - 0.5).abs() < 1e-15);
            assert!((o.probs()[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn single_sequence_collapses_posterior() {
        let data = batch(&[&[2, 1]], 4);
        let p = BayesPredictor::from_dataset(&data, &kernel(4, 4), 1 << 20).unwrap();
        let x = vec![CandidateSet::all_ones(4).unwrap(); 2];
        let out = p.predict(&x, 0.7, None).unwrap();
        assert_eq!(out[0].probs(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(out[1].probs(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn exact_one_hot_input_isolates_the_datum() {
        let data = batch(&[&[0], &[1], &[2]], 3);
        let p = BayesPredictor::from_dataset(&data, &kernel(3, 4), 1 << 20).unwrap();
        for token in 0..3 {
            let x = vec![CandidateSet::one_hot(token, 3).unwrap()];
            let out = p.predict(&x, 0.0, None).unwrap();
            assert_eq!(out[0].probs()[token], 1.0);
        }
    }

    #[test]
    fn skewed_dataset_matches_enumeration_oracle() {
        // {A: 0.75, B: 0.25}, K=2, L=1, x_t = [1,1]: each sequence's
        // likelihood is r^(ones-1) (1-r)^(K-ones), identical here, so the
        // posterior is the empirical law. The test enumerates the two
        // weighted likelihood terms explicitly.
        let data = batch(&[&[0], &[0], &[0], &[1]], 2);
        let k = kernel(2, 2);
        let p = BayesPredictor::from_dataset(&data, &k, 1 << 20).unwrap();
        let tau = 0.5;
        let r = k.marginal_wrong_prob_at(tau).unwrap();
        let lik = r.powi(1) * (1.0 - r).powi(0); // both entries of x_t on
        let w_a = 0.75 * lik;
        let w_b = 0.25 * lik;
        let expected_a = w_a / (w_a + w_b);
        let x = vec![CandidateSet::all_ones(2).unwrap()];
        let out = p.predict(&x, tau, None).unwrap();
        assert!((out[0].probs()[0] - expected_a).abs() < 1e-15);
        assert!((out[0].probs()[1] - (1.0 - expected_a)).abs() < 1e-15);
    }

    #[test]
    fn budget_is_enforced() {
        let data = batch(&[&[0], &[1]], 2);
        assert!(matches!(
            BayesPredictor::from_dataset(&data, &kernel(2, 2), 3),
            Err(SlmError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn incompatible_support_is_an_error() {
        let data = batch(&[&[0]], 3);
        let p = BayesPredictor::from_dataset(&data, &kernel(3, 2), 1 << 20).unwrap();
        let x = vec![CandidateSet::from_bits(vec![0, 1, 1]).unwrap()];
        assert!(p.predict(&x, 0.5, None).is_err());
    }
}
