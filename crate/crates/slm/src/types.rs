//! State space shared by every other module: candidate sets, Bernoulli
//! parameter vectors, support-masked probability vectors, and sequence
//! batches.
//!
//! All values are immutable after construction and safe to share across
//! threads.

use crate::error::{Result, SlmError};

/// Binary inclusion mask over K categories with at least one category
/// included. This is the latent state of the shortlisting chain; one-hot
/// masks and the all-one mask are the two boundary cases.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CandidateSet {
    bits: Vec<u8>,
}

impl CandidateSet {
    /// Builds a set from raw 0/1 entries. Rejects empty masks and entries
    /// other than 0 or 1.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(&value) = bits.iter().find(|&&b| b > 1) {
            return Err(SlmError::NonBinaryEntry { value });
        }
        if !bits.contains(&1) {
            return Err(SlmError::EmptyCandidateSet);
        }
        Ok(Self { bits })
    }

    /// One-hot mask: exactly one category included.
    pub fn one_hot(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(SlmError::IndexOutOfRange { index, k });
        }
        let mut bits = vec![0u8; k];
        bits[index] = 1;
        Ok(Self { bits })
    }

    /// All-one mask: every category included.
    pub fn all_ones(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(SlmError::EmptyCandidateSet);
        }
        Ok(Self { bits: vec![1u8; k] })
    }

    pub fn k(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn contains(&self, index: usize) -> bool {
        self.bits.get(index).copied() == Some(1)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// True iff every included category of `self` is included in `other`.
    pub fn is_subset_of(&self, other: &CandidateSet) -> Result<bool> {
        if self.k() != other.k() {
            return Err(SlmError::DimensionMismatch {
                left: self.k(),
                right: other.k(),
            });
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .all(|(&a, &b)| a == 0 || b == 1))
    }

    /// Uniform distribution over the included categories (the centroid of
    /// the simplex face spanned by this set). This is the network input.
    pub fn centroid(&self) -> Vec<f64> {
        normalize(&self.bits).expect("candidate set is nonempty by construction")
    }
}

/// Normalizes a 0/1 mask into the centroid of its simplex face:
/// `out_i = bits_i / ones`. Rejects all-zero input.
pub fn normalize(bits: &[u8]) -> Result<Vec<f64>> {
    let ones = bits.iter().filter(|&&b| b == 1).count();
    if ones == 0 {
        return Err(SlmError::EmptyCandidateSet);
    }
    let inv = 1.0 / ones as f64;
    Ok(bits.iter().map(|&b| if b == 1 { inv } else { 0.0 }).collect())
}

/// Per-dimension inclusion probabilities of a multivariate Bernoulli.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliParams {
    probs: Vec<f64>,
}

impl BernoulliParams {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        for &p in &probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SlmError::InvalidProbability { value: p });
            }
        }
        Ok(Self { probs })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// A probability vector restricted to a candidate set: nonnegative,
/// sums to one, and exactly zero outside the support.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    probs: Vec<f64>,
    support: CandidateSet,
}

impl PredictorOutput {
    pub fn new(probs: Vec<f64>, support: CandidateSet) -> Result<Self> {
        if probs.len() != support.k() {
            return Err(SlmError::DimensionMismatch {
                left: probs.len(),
                right: support.k(),
            });
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(SlmError::InvalidProbability { value: p });
            }
            if !support.contains(i) && p.abs() > 1e-12 {
                return Err(SlmError::InvalidInput(format!(
                    "probability {p} at category {i} outside the support"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SlmError::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs, support })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> &CandidateSet {
        &self.support
    }
}

/// N sequences of L category indices, with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    tokens: Vec<Vec<usize>>,
    labels: Option<Vec<usize>>,
    k: usize,
    class_count: usize,
}

impl SequenceBatch {
    pub fn new(
        tokens: Vec<Vec<usize>>,
        labels: Option<Vec<usize>>,
        k: usize,
        class_count: usize,
    ) -> Result<Self> {
        let l = tokens.first().map_or(0, Vec::len);
        for seq in &tokens {
            if seq.len() != l {
                return Err(SlmError::InvalidInput(
                    "ragged sequence batch".to_string(),
                ));
            }
            for &t in seq {
                if t >= k {
                    return Err(SlmError::IndexOutOfRange { index: t, k });
                }
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != tokens.len() {
                return Err(SlmError::DimensionMismatch {
                    left: labels.len(),
                    right: tokens.len(),
                });
            }
            for &c in labels {
                if c >= class_count {
                    return Err(SlmError::IndexOutOfRange {
                        index: c,
                        k: class_count,
                    });
                }
            }
        }
        Ok(Self {
            tokens,
            labels,
            k,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn tokens(&self) -> &[Vec<usize>] {
        &self.tokens
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_places_single_bit() {
        assert_eq!(CandidateSet::one_hot(0, 3).unwrap().bits(), &[1, 0, 0]);
        assert_eq!(CandidateSet::one_hot(2, 3).unwrap().bits(), &[0, 0, 1]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(matches!(
            CandidateSet::one_hot(5, 3),
            Err(SlmError::IndexOutOfRange { index: 5, k: 3 })
        ));
    }

    #[test]
    fn all_ones_fills_every_bit() {
        assert_eq!(CandidateSet::all_ones(2).unwrap().bits(), &[1, 1]);
        assert_eq!(CandidateSet::all_ones(5).unwrap().bits(), &[1; 5]);
        assert!(CandidateSet::all_ones(0).is_err());
    }

    #[test]
    fn from_bits_rejects_empty_and_non_binary() {
        assert!(matches!(
            CandidateSet::from_bits(vec![0, 0]),
            Err(SlmError::EmptyCandidateSet)
        ));
        assert!(matches!(
            CandidateSet::from_bits(vec![1, 2]),
            Err(SlmError::NonBinaryEntry { value: 2 })
        ));
    }

    #[test]
    fn subset_by_inspection() {
        let a = CandidateSet::from_bits(vec![1, 0, 0]).unwrap();
        let b = CandidateSet::from_bits(vec![1, 1, 0]).unwrap();
        let c = CandidateSet::from_bits(vec![1, 0, 1]).unwrap();
        assert!(a.is_subset_of(&b).unwrap());
        assert!(!c.is_subset_of(&b).unwrap());
        let d = CandidateSet::from_bits(vec![1, 1]).unwrap();
        assert!(d.is_subset_of(&d).unwrap());
    }

    #[test]
    fn subset_rejects_mismatched_k() {
        let a = CandidateSet::all_ones(2).unwrap();
        let b = CandidateSet::all_ones(3).unwrap();
        assert!(a.is_subset_of(&b).is_err());
    }

    #[test]
    fn normalize_is_face_centroid() {
        assert_eq!(normalize(&[1, 0, 0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(normalize(&[1, 1, 0]).unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(normalize(&[1, 1, 1, 1]).unwrap(), vec![0.25; 4]);
        assert!(matches!(
            normalize(&[0, 0, 0]),
            Err(SlmError::EmptyCandidateSet)
        ));
    }

    #[test]
    fn predictor_output_enforces_support_and_sum() {
        let support = CandidateSet::from_bits(vec![1, 1, 0]).unwrap();
        assert!(PredictorOutput::new(vec![0.5, 0.5, 0.0], support.clone()).is_ok());
        assert!(PredictorOutput::new(vec![0.5, 0.25, 0.25], support.clone()).is_err());
        assert!(PredictorOutput::new(vec![0.5, 0.4, 0.0], support).is_err());
    }

    #[test]
    fn bernoulli_params_reject_out_of_range() {
        assert!(BernoulliParams::new(vec![0.0, 1.0, 0.5]).is_ok());
        assert!(BernoulliParams::new(vec![1.1]).is_err());
        assert!(BernoulliParams::new(vec![-0.1]).is_err());
        assert!(BernoulliParams::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn sequence_batch_validates_indices() {
        assert!(SequenceBatch::new(vec![vec![0, 1], vec![2, 3]], None, 4, 0).is_ok());
        assert!(SequenceBatch::new(vec![vec![0, 4]], None, 4, 0).is_err());
        assert!(SequenceBatch::new(vec![vec![0]], Some(vec![2]), 4, 2).is_err());
        assert!(SequenceBatch::new(vec![vec![0]], Some(vec![1]), 4, 2).is_ok());
    }

    fn arb_candidate_set(k: usize) -> impl Strategy<Value = CandidateSet> {
        prop::collection::vec(prop::bool::ANY, k).prop_filter_map("nonempty", |mask| {
            let bits: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
            CandidateSet::from_bits(bits).ok()
        })
    }

    proptest! {
        #[test]
        fn subset_reflexive_and_transitive(
            a in arb_candidate_set(8),
            b in arb_candidate_set(8),
            c in arb_candidate_set(8),
        ) {
            prop_assert!(a.is_subset_of(&a).unwrap());
            if a.is_subset_of(&b).unwrap() && b.is_subset_of(&c).unwrap() {
                prop_assert!(a.is_subset_of(&c).unwrap());
            }
        }

        #[test]
        fn centroid_lies_on_simplex(a in arb_candidate_set(8)) {
            let p = a.centroid();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let m = a.count_ones() as f64;
            for (i, &v) in p.iter().enumerate() {
                if a.contains(i) {
                    prop_assert!((v - 1.0 / m).abs() < 1e-15);
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }

        #[test]
        fn one_hot_always_valid(i in 0usize..16, k in 1usize..16) {
            if i < k {
                let c = CandidateSet::one_hot(i, k).unwrap();
                prop_assert_eq!(c.count_ones(), 1);
                prop_assert!(c.contains(i));
            }
        }
    }
}
