//! Trainable reference model: per-position logits are an affine map of a
//! shared feature vector (all positions' normalized candidate sets, a
//! sinusoidal time embedding, and an optional class one-hot), with an
//! optional tanh hidden layer. Gradients of every training objective are
//! analytic; this is what the finite-difference checks exercise.

use rand::Rng;

use super::{check_predict_inputs, masked_softmax, Predictor, PredictorConfig};
use crate::error::{Result, SlmError};
use crate::forward::ForwardKernel;
use crate::losses::LossKind;
use crate::rng;
use crate::types::{CandidateSet, PredictorOutput};

/// One corrupted training example: the tokens, their corrupted candidate
/// sets at grid step `j`, and the class input after label dropout.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub tokens: Vec<usize>,
    pub x_t: Vec<CandidateSet>,
    pub j: usize,
    pub cls_input: Option<usize>,
}

/// Batch mean with its standard error (sample std / sqrt(B); 0 for B=1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub mean: f64,
    pub stderr: f64,
}

impl LossStats {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            0.0
        } else {
            let var =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        };
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone)]
pub struct LinearPredictor {
    config: PredictorConfig,
    params: Vec<f64>,
}

struct Forward {
    features: Vec<f64>,
    hidden: Vec<f64>,
    /// Flat l*k logits, position-major.
    logits: Vec<f64>,
    /// Per-position masked probabilities.
    probs: Vec<Vec<f64>>,
}

impl LinearPredictor {
    /// Zero final layer (uniform initial outputs); hidden layer, when
    /// present, drawn uniform from (-0.01, 0.01). Deterministic given seed.
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = vec![0.0; Self::count_params(&config)];
        if config.hidden > 0 {
            let mut r = rng::master(seed);
            let w1_end = config.hidden * Self::feat_dim(&config) + config.hidden;
            for p in params.iter_mut().take(w1_end) {
                *p = r.gen::<f64>() * 0.02 - 0.01;
            }
        }
        Ok(Self { config, params })
    }

    /// All parameters uniform in (-scale, scale); verification device for
    /// "random predictor" checks.
    pub fn with_uniform_random_params(
        config: PredictorConfig,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        config.validate()?;
        let mut r = rng::master(seed);
        let params = (0..Self::count_params(&config))
            .map(|_| (r.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(SlmError::DimensionMismatch {
                left: params.len(),
                right: self.params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(SlmError::NonFinite {
                context: "predictor parameters",
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn feat_dim(config: &PredictorConfig) -> usize {
        config.l * config.k + config.time_features + config.class_dim()
    }

    fn count_params(config: &PredictorConfig) -> usize {
        let f = Self::feat_dim(config);
        let lk = config.l * config.k;
        if config.hidden == 0 {
            lk * f + lk
        } else {
            let h = config.hidden;
            h * f + h + lk * h + lk
        }
    }

    fn features(&self, x_t: &[CandidateSet], tau: f64, cls: Option<usize>) -> Result<Vec<f64>> {
        let c = &self.config;
        let mut f = Vec::with_capacity(Self::feat_dim(c));
        for set in x_t {
            f.extend(set.centroid());
        }
        for i in 0..c.time_features {
            let omega = std::f64::consts::PI * 2f64.powi((i / 2) as i32);
            f.push(if i % 2 == 0 {
                (omega * tau).sin()
            } else {
                (omega * tau).cos()
            });
        }
        if c.class_count > 0 {
            let slot = match cls {
                Some(label) if label >= c.class_count => {
                    return Err(SlmError::IndexOutOfRange {
                        index: label,
                        k: c.class_count,
                    })
                }
                Some(label) => label,
                None => c.class_count, // null label
            };
            let mut one_hot = vec![0.0; c.class_count + 1];
            one_hot[slot] = 1.0;
            f.extend(one_hot);
        } else if cls.is_some() {
            return Err(SlmError::InvalidInput(
                "class label passed to an unconditional predictor".into(),
            ));
        }
        Ok(f)
    }

    fn forward(&self, x_t: &[CandidateSet], tau: f64, cls: Option<usize>) -> Result<Forward> {
        let c = &self.config;
        let features = self.features(x_t, tau, cls)?;
        let f_dim = features.len();
        let lk = c.l * c.k;
        let (hidden, logits) = if c.hidden == 0 {
            let mut logits = vec![0.0; lk];
            for (row, logit) in logits.iter_mut().enumerate() {
                let w = &self.params[row * f_dim..(row + 1) * f_dim];
                let mut acc = self.params[lk * f_dim + row];
                for (wi, fi) in w.iter().zip(&features) {
                    acc += wi * fi;
                }
                *logit = acc;
            }
            (Vec::new(), logits)
        } else {
            let h_dim = c.hidden;
            let b1_off = h_dim * f_dim;
            let w2_off = b1_off + h_dim;
            let b2_off = w2_off + lk * h_dim;
            let mut hidden = vec![0.0; h_dim];
            for (h, out) in hidden.iter_mut().enumerate() {
                let w = &self.params[h * f_dim..(h + 1) * f_dim];
                let mut acc = self.params[b1_off + h];
                for (wi, fi) in w.iter().zip(&features) {
                    acc += wi * fi;
                }
                *out = acc.tanh();
            }
            let mut logits = vec![0.0; lk];
            for (row, logit) in logits.iter_mut().enumerate() {
                let w = &self.params[w2_off + row * h_dim..w2_off + (row + 1) * h_dim];
                let mut acc = self.params[b2_off + row];
                for (wi, hi) in w.iter().zip(&hidden) {
                    acc += wi * hi;
                }
                *logit = acc;
            }
            (hidden, logits)
        };
        let mut probs = Vec::with_capacity(c.l);
        for (pos, set) in x_t.iter().enumerate() {
            probs.push(masked_softmax(&logits[pos * c.k..(pos + 1) * c.k], set)?);
        }
        Ok(Forward {
            features,
            hidden,
            logits,
            probs,
        })
    }

    /// Mean loss over a prepared batch.
    pub fn loss(
        &self,
        prepared: &[PreparedExample],
        kind: LossKind,
        kernel: &ForwardKernel,
    ) -> Result<LossStats> {
        self.batch_terms(prepared, kind, kernel, None)
    }

    /// Mean loss and its analytic gradient with respect to the parameters.
    pub fn loss_gradient(
        &self,
        prepared: &[PreparedExample],
        kind: LossKind,
        kernel: &ForwardKernel,
    ) -> Result<(LossStats, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let stats = self.batch_terms(prepared, kind, kernel, Some(&mut grad))?;
        let inv = 1.0 / prepared.len() as f64;
        for g in &mut grad {
            *g *= inv;
        }
        Ok((stats, grad))
    }

    fn batch_terms(
        &self,
        prepared: &[PreparedExample],
        kind: LossKind,
        kernel: &ForwardKernel,
        mut grad: Option<&mut Vec<f64>>,
    ) -> Result<LossStats> {
        if prepared.is_empty() {
            return Err(SlmError::InvalidInput("empty training batch".into()));
        }
        let mut values = Vec::with_capacity(prepared.len());
        for example in prepared {
            let v = self.example_term(example, kind, kernel, grad.as_deref_mut())?;
            if !v.is_finite() {
                return Err(SlmError::NonFinite {
                    context: "training loss",
                });
            }
            values.push(v);
        }
        Ok(LossStats::from_values(&values))
    }

    /// Loss contribution of one example; when `grad` is given, accumulates
    /// the (unnormalized) parameter gradient into it.
    ///
    /// All objectives are scaled by S (the listings' `* T`) and averaged
    /// over positions, so values are per-token nats comparable across step
    /// counts and sequence lengths.
    fn example_term(
        &self,
        example: &PreparedExample,
        kind: LossKind,
        kernel: &ForwardKernel,
        grad: Option<&mut Vec<f64>>,
    ) -> Result<f64> {
        let c = &self.config;
        if example.tokens.len() != c.l || example.x_t.len() != c.l {
            return Err(SlmError::DimensionMismatch {
                left: example.tokens.len(),
                right: c.l,
            });
        }
        let schedule = kernel.schedule();
        let s = schedule.steps();
        let j = example.j;
        if j == 0 || j > s {
            return Err(SlmError::StepOutOfRange { j, lo: 1, hi: s });
        }
        let tau_j = schedule.tau_of_step(j)?;
        let fwd = self.forward(&example.x_t, tau_j, example.cls_input)?;
        let scale = s as f64 / c.l as f64;

        let mut value = 0.0;
        // dL/dNN per position, fed through the softmax Jacobian afterwards;
        // cross-entropy objectives write dL/dlogits directly.
        let mut dlogits = grad.as_ref().map(|_| vec![0.0; c.l * c.k]);

        match kind {
            LossKind::Simple | LossKind::Weighted => {
                let weight = if kind == LossKind::Weighted {
                    let n_cur = schedule.n_at_step(j)?;
                    let n_prev = schedule.n_at_step(j - 1)?;
                    (n_cur - n_prev) / (n_cur - 1.0)
                } else {
                    1.0
                };
                let coeff = scale * weight;
                for (pos, (&truth, probs)) in
                    example.tokens.iter().zip(&fwd.probs).enumerate()
                {
                    if probs[truth] <= 0.0 {
                        return Err(SlmError::InvalidInput(format!(
                            "zero predicted probability at the true category (position {pos})"
                        )));
                    }
                    value -= coeff * probs[truth].ln();
                    if let Some(d) = dlogits.as_mut() {
                        for (o, &p) in probs.iter().enumerate() {
                            if example.x_t[pos].contains(o) {
                                let target = f64::from(u8::from(o == truth));
                                d[pos * c.k + o] += coeff * (p - target);
                            }
                        }
                    }
                }
            }
            LossKind::Elbo => {
                if j >= 2 {
                    let keep = kernel.posterior_keep_prob(j)?;
                    for (pos, (&truth, probs)) in
                        example.tokens.iter().zip(&fwd.probs).enumerate()
                    {
                        let support = &example.x_t[pos];
                        let mut g = vec![0.0; c.k];
                        for (i, &p) in probs.iter().enumerate() {
                            if !support.contains(i) {
                                continue;
                            }
                            let gd = if i == truth { 1.0 } else { keep };
                            let pred = p + (1.0 - p) * keep;
                            value += scale * gd * (gd / pred).ln();
                            let mut g_i = -gd / pred;
                            if gd < 1.0 {
                                value += scale * (1.0 - gd) * ((1.0 - gd) / (1.0 - pred)).ln();
                                g_i += (1.0 - gd) / (1.0 - pred);
                            }
                            g[i] = scale * g_i * (1.0 - keep);
                        }
                        if let Some(d) = dlogits.as_mut() {
                            backprop_softmax(&g, probs, support, &mut d[pos * c.k..(pos + 1) * c.k]);
                        }
                    }
                } else {
                    // Reconstruction term: exact Bernoulli log-likelihood of
                    // emitting the one-hot from Bern(NN) at j = 1.
                    for (pos, (&truth, probs)) in
                        example.tokens.iter().zip(&fwd.probs).enumerate()
                    {
                        let support = &example.x_t[pos];
                        if probs[truth] <= 0.0 {
                            return Err(SlmError::InvalidInput(format!(
                                "zero predicted probability at the true category (position {pos})"
                            )));
                        }
                        let mut g = vec![0.0; c.k];
                        value -= scale * probs[truth].ln();
                        g[truth] = -scale / probs[truth];
                        for (i, &p) in probs.iter().enumerate() {
                            if i == truth || !support.contains(i) {
                                continue;
                            }
                            if p >= 1.0 {
                                return Err(SlmError::InvalidInput(format!(
                                    "unit probability on a spurious candidate (position {pos})"
                                )));
                            }
                            value -= scale * (1.0 - p).ln();
                            g[i] = scale / (1.0 - p);
                        }
                        if let Some(d) = dlogits.as_mut() {
                            backprop_softmax(&g, probs, support, &mut d[pos * c.k..(pos + 1) * c.k]);
                        }
                    }
                }
            }
        }

        if let (Some(grad), Some(dlogits)) = (grad, dlogits) {
            self.backprop_params(&fwd, &dlogits, grad);
        }
        Ok(value)
    }

    fn backprop_params(&self, fwd: &Forward, dlogits: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let f_dim = fwd.features.len();
        let lk = c.l * c.k;
        if c.hidden == 0 {
            for (row, &d) in dlogits.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let w = &mut grad[row * f_dim..(row + 1) * f_dim];
                for (wi, fi) in w.iter_mut().zip(&fwd.features) {
                    *wi += d * fi;
                }
                grad[lk * f_dim + row] += d;
            }
        } else {
            let h_dim = c.hidden;
            let b1_off = h_dim * f_dim;
            let w2_off = b1_off + h_dim;
            let b2_off = w2_off + lk * h_dim;
            let mut dhidden = vec![0.0; h_dim];
            for (row, &d) in dlogits.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (h, &hv) in fwd.hidden.iter().enumerate() {
                    grad[w2_off + row * h_dim + h] += d * hv;
                    dhidden[h] += d * self.params[w2_off + row * h_dim + h];
                }
                grad[b2_off + row] += d;
            }
            for (h, (&dh, &hv)) in dhidden.iter().zip(&fwd.hidden).enumerate() {
                let dpre = dh * (1.0 - hv * hv);
                if dpre == 0.0 {
                    continue;
                }
                for (f, &fv) in fwd.features.iter().enumerate() {
                    grad[h * f_dim + f] += dpre * fv;
                }
                grad[b1_off + h] += dpre;
            }
        }
    }

    /// Momentum SGD update: v <- momentum v + g, params <- params - lr v.
    pub fn sgd_step(
        &mut self,
        gradient: &[f64],
        lr: f64,
        momentum: f64,
        velocity: &mut Vec<f64>,
    ) -> Result<()> {
        if gradient.len() != self.params.len() {
            return Err(SlmError::DimensionMismatch {
                left: gradient.len(),
                right: self.params.len(),
            });
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(SlmError::NonFinite {
                context: "gradient",
            });
        }
        if lr < 0.0 || !lr.is_finite() {
            return Err(SlmError::InvalidInput(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        if velocity.is_empty() {
            velocity.resize(self.params.len(), 0.0);
        } else if velocity.len() != self.params.len() {
            return Err(SlmError::DimensionMismatch {
                left: velocity.len(),
                right: self.params.len(),
            });
        }
        for ((p, v), &g) in self.params.iter_mut().zip(velocity.iter_mut()).zip(gradient) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// dL/dlogit_m = p_m (g_m - sum_i g_i p_i), zero off-support.
fn backprop_softmax(g: &[f64], probs: &[f64], support: &CandidateSet, dlogits: &mut [f64]) {
    let dot: f64 = g.iter().zip(probs).map(|(gi, pi)| gi * pi).sum();
    for (m, d) in dlogits.iter_mut().enumerate() {
        if support.contains(m) {
            *d += probs[m] * (g[m] - dot);
        }
    }
}

impl Predictor for LinearPredictor {
    fn k(&self) -> usize {
        self.config.k
    }

    fn seq_len(&self) -> usize {
        self.config.l
    }

    fn predict(
        &self,
        x_t: &[CandidateSet],
        tau: f64,
        cls: Option<usize>,
    ) -> Result<Vec<PredictorOutput>> {
        check_predict_inputs(self, x_t, tau)?;
        let fwd = self.forward(x_t, tau, cls)?;
        if fwd.logits.iter().any(|v| !v.is_finite()) {
            return Err(SlmError::NonFinite { context: "logits" });
        }
        x_t.iter()
            .zip(fwd.probs)
            .map(|(set, p)| PredictorOutput::new(p, set.clone()))
            .collect()
    }
}
