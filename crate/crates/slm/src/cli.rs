//! Command implementations behind the `slm` binary: train, sample, eval,
//! verify, gen-data. Everything is deterministic given (config, seed,
//! checkpoint); wall-clock timings go to stderr only so output files stay
//! byte-reproducible.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{DataConfig, EvalMode, RunConfig};
use crate::data::{generate, token_entropy, Alphabet, CharCorpus, Split, Splits, SyntheticSpec};
use crate::error::{Result, SlmError};
use crate::forward::ForwardKernel;
use crate::losses::{elbo_exact, ElboMode, ElboReport};
use crate::oracle;
use crate::predictor::{prepare_batch, LinearPredictor, Predictor, UniformPredictor};
use crate::rng;
use crate::sampler::{sample_batch, SamplerConfig};
use crate::schedule::Schedule;
use crate::types::SequenceBatch;

/// Exclusive ownership of an output directory for the duration of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(SlmError::InvalidInput(format!(
                    "output directory is locked by another run ({} exists)",
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

enum TrainData {
    Fixed(SequenceBatch),
    Corpus(CharCorpus),
}

fn load_train_data(config: &RunConfig) -> Result<TrainData> {
    match &config.data {
        DataConfig::Synthetic { spec } => Ok(TrainData::Fixed(generate(spec)?)),
        DataConfig::Corpus {
            path,
            chunk_length,
            train_end,
            valid_end,
        } => {
            let corpus = CharCorpus::load(
                path,
                Alphabet::default(),
                *chunk_length,
                Splits {
                    train_end: *train_end,
                    valid_end: *valid_end,
                },
                Split::Train,
            )?;
            if corpus.k() != config.model.k {
                return Err(SlmError::InvalidInput(format!(
                    "corpus alphabet K={} disagrees with model K={}",
                    corpus.k(),
                    config.model.k
                )));
            }
            Ok(TrainData::Corpus(corpus))
        }
    }
}

fn eval_batch(config: &RunConfig, split: Split) -> Result<SequenceBatch> {
    match &config.data {
        DataConfig::Synthetic { spec } => {
            // Fresh draws from the same law on a split-specific seed.
            let offset = match split {
                Split::Train => 0,
                Split::Valid => 1,
                Split::Test => 2,
            };
            let eval_spec = SyntheticSpec {
                n: config.eval.max_sequences,
                seed: spec.seed.wrapping_add(0x5eed_0000 + offset),
                ..spec.clone()
            };
            generate(&eval_spec)
        }
        DataConfig::Corpus {
            path,
            chunk_length,
            train_end,
            valid_end,
        } => {
            let corpus = CharCorpus::load(
                path,
                Alphabet::default(),
                *chunk_length,
                Splits {
                    train_end: *train_end,
                    valid_end: *valid_end,
                },
                split,
            )?;
            corpus.sequential_batch(config.eval.max_sequences)
        }
    }
}

#[derive(Debug, Serialize)]
struct MetricsHeader<'a> {
    record: &'a str,
    config_hash: &'a str,
    seed: u64,
    loss: &'a str,
}

#[derive(Debug, Serialize)]
struct MetricsLine {
    record: &'static str,
    step: usize,
    loss: f64,
    loss_stderr: f64,
    grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_loss: Option<f64>,
}

pub fn cmd_train(
    config: &RunConfig,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<TrainOutcome> {
    let out_dir = out_override.unwrap_or(&config.output_dir).to_path_buf();
    let _lock = DirLock::acquire(&out_dir)?;
    let seed = seed_override.unwrap_or(config.training.seed);
    let config_hash = config.hash()?;
    let hash_bytes = config.hash_bytes()?;

    let schedule = Schedule::exponential(config.schedule.k, config.schedule.s)?;
    let kernel = ForwardKernel::new(schedule)?;
    let data = load_train_data(config)?;
    let mut predictor = LinearPredictor::new(config.model, seed)?;
    let mut velocity = Vec::new();
    let mut master = rng::master(seed);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let loss_name = format!("{:?}", config.loss.kind).to_lowercase();
    writeln!(
        metrics,
        "{}",
        serde_json::to_string(&MetricsHeader {
            record: "header",
            config_hash: &config_hash,
            seed,
            loss: &loss_name,
        })
        .expect("metrics header serializes")
    )?;

    let checkpoint_path = out_dir.join("checkpoint.bin");
    let started = Instant::now();
    let mut final_loss = None;

    for step in 1..=config.training.steps {
        let batch = match &data {
            TrainData::Fixed(batch) => {
                let indices: Vec<usize> = (0..config.training.batch_size)
                    .map(|_| master.gen_range(0..batch.len()))
                    .collect();
                prepare_batch(
                    batch,
                    &indices,
                    &kernel,
                    config.training.label_dropout,
                    &mut master,
                )?
            }
            TrainData::Corpus(corpus) => {
                let batch = corpus.random_batch(config.training.batch_size, &mut master)?;
                let indices: Vec<usize> = (0..batch.len()).collect();
                prepare_batch(
                    &batch,
                    &indices,
                    &kernel,
                    config.training.label_dropout,
                    &mut master,
                )?
            }
        };
        let step_result = predictor
            .loss_gradient(&batch, config.loss.kind, &kernel)
            .and_then(|(stats, grad)| {
                predictor.sgd_step(
                    &grad,
                    config.training.lr,
                    config.training.momentum,
                    &mut velocity,
                )?;
                Ok((stats, grad))
            });
        let (stats, grad) = match step_result {
            Ok(v) => v,
            Err(e) => {
                // Abort, retaining the last good parameters on disk.
                checkpoint::save(&checkpoint_path, &predictor, &hash_bytes)?;
                metrics.flush()?;
                return Err(e);
            }
        };
        final_loss = Some(stats.mean);
        if step % config.training.log_interval == 0 || step == config.training.steps {
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            writeln!(
                metrics,
                "{}",
                serde_json::to_string(&MetricsLine {
                    record: "metric",
                    step,
                    loss: stats.mean,
                    loss_stderr: stats.stderr,
                    grad_norm,
                })
                .expect("metrics line serializes")
            )?;
            eprintln!(
                "[train] step {step}/{} loss {:.6} ({} ms elapsed)",
                config.training.steps,
                stats.mean,
                started.elapsed().as_millis()
            );
        }
        if config.training.checkpoint_interval > 0
            && step % config.training.checkpoint_interval == 0
        {
            checkpoint::save(
                &out_dir.join(format!("checkpoint_step{step}.bin")),
                &predictor,
                &hash_bytes,
            )?;
        }
    }
    metrics.flush()?;
    checkpoint::save(&checkpoint_path, &predictor, &hash_bytes)?;
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        final_loss,
    })
}

#[derive(Debug, Serialize)]
struct SamplesHeader<'a> {
    record: &'a str,
    config_hash: &'a str,
    seed: u64,
    gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cls: Option<usize>,
    steps: usize,
    count: usize,
}

#[derive(Debug, Serialize)]
struct SampleLine<'a> {
    record: &'static str,
    index: usize,
    tokens: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    token_entropy: f64,
}

pub struct SampleOverrides {
    pub count: usize,
    pub gamma: Option<f64>,
    pub cls: Option<usize>,
    pub seed: Option<u64>,
}

pub fn cmd_sample(
    config: &RunConfig,
    checkpoint_path: &Path,
    overrides: &SampleOverrides,
    out_override: Option<&Path>,
) -> Result<PathBuf> {
    let out_dir = out_override.unwrap_or(&config.output_dir).to_path_buf();
    let _lock = DirLock::acquire(&out_dir)?;
    let hash_bytes = config.hash_bytes()?;
    let predictor = checkpoint::load(checkpoint_path, &config.model, Some(&hash_bytes))?;

    let sampler_config = SamplerConfig {
        steps: config.sampling.steps,
        gamma: overrides.gamma.unwrap_or(config.sampling.gamma),
        cls: overrides.cls.or(config.sampling.cls),
        seed: overrides.seed.unwrap_or(config.sampling.seed),
    };
    if let Some(cls) = sampler_config.cls {
        if cls >= config.model.class_count {
            return Err(SlmError::IndexOutOfRange {
                index: cls,
                k: config.model.class_count,
            });
        }
    }
    let kernel = ForwardKernel::new(Schedule::exponential(config.model.k, sampler_config.steps)?)?;
    let samples = sample_batch(&predictor, &sampler_config, &kernel, overrides.count)?;

    let alphabet = match &config.data {
        DataConfig::Corpus { .. } => Some(Alphabet::default()),
        DataConfig::Synthetic { .. } => None,
    };
    let path = out_dir.join("samples.jsonl");
    let mut file = BufWriter::new(File::create(&path)?);
    let config_hash = config.hash()?;
    writeln!(
        file,
        "{}",
        serde_json::to_string(&SamplesHeader {
            record: "header",
            config_hash: &config_hash,
            seed: sampler_config.seed,
            gamma: sampler_config.gamma,
            cls: sampler_config.cls,
            steps: sampler_config.steps,
            count: overrides.count,
        })
        .expect("samples header serializes")
    )?;
    for (index, tokens) in samples.iter().enumerate() {
        let text = alphabet
            .as_ref()
            .map(|a| a.detokenize(tokens))
            .transpose()?;
        writeln!(
            file,
            "{}",
            serde_json::to_string(&SampleLine {
                record: "sample",
                index,
                tokens,
                text,
                token_entropy: token_entropy(tokens)?,
            })
            .expect("sample line serializes")
        )?;
    }
    file.flush()?;
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct EvalFile {
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub mode: String,
    pub num_sequences: usize,
    /// Mean bits per character over the evaluated sequences.
    pub bpc: f64,
    pub total_nats: f64,
    pub l0: f64,
    pub l_t: f64,
    pub lt_terms: Vec<f64>,
    /// Monte Carlo component of the uncertainty on total_nats.
    pub mc_stderr: f64,
    /// Across-sequence spread of total_nats (stderr of the mean).
    pub seq_stderr: f64,
    pub per_sequence: Vec<ElboReport>,
}

pub fn cmd_eval(
    config: &RunConfig,
    checkpoint_path: &Path,
    split: Split,
    out_override: Option<&Path>,
) -> Result<EvalFile> {
    let out_dir = out_override.unwrap_or(&config.output_dir).to_path_buf();
    let _lock = DirLock::acquire(&out_dir)?;
    let hash_bytes = config.hash_bytes()?;
    let predictor = checkpoint::load(checkpoint_path, &config.model, Some(&hash_bytes))?;
    let report = evaluate(config, &predictor, split)?;
    let path = out_dir.join("eval.json");
    let mut file = BufWriter::new(File::create(&path)?);
    writeln!(
        file,
        "{}",
        serde_json::to_string_pretty(&report).expect("eval report serializes")
    )?;
    file.flush()?;
    Ok(report)
}

/// ELBO evaluation over one data split, shared by cmd_eval and tests.
pub fn evaluate(
    config: &RunConfig,
    predictor: &dyn Predictor,
    split: Split,
) -> Result<EvalFile> {
    let batch = eval_batch(config, split)?;
    let kernel = ForwardKernel::new(Schedule::exponential(
        config.schedule.k,
        config.schedule.s,
    )?)?;
    let mode = match config.eval.mode {
        EvalMode::Exact => ElboMode::ExactSum,
        EvalMode::Mc => ElboMode::Mc {
            draws: config.eval.mc_draws,
        },
    };
    let mut per_sequence = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut r = rng::stream(config.eval.seed, i as u64);
        per_sequence.push(elbo_exact(
            predictor,
            batch.sequence(i),
            &kernel,
            mode,
            None,
            config.eval.max_states as u128,
            &mut r,
        )?);
    }
    let n = per_sequence.len() as f64;
    let bpc = per_sequence.iter().map(|r| r.bpc).sum::<f64>() / n;
    let total_nats = per_sequence.iter().map(|r| r.total_nats).sum::<f64>() / n;
    let l0 = per_sequence.iter().map(|r| r.l0).sum::<f64>() / n;
    let l_t = per_sequence.iter().map(|r| r.l_t).sum::<f64>() / n;
    let steps = config.schedule.s;
    let mut lt_terms = vec![0.0; steps.saturating_sub(1)];
    for report in &per_sequence {
        for (acc, term) in lt_terms.iter_mut().zip(&report.lt_terms) {
            *acc += term / n;
        }
    }
    let mc_stderr = per_sequence
        .iter()
        .map(|r| r.total_stderr * r.total_stderr)
        .sum::<f64>()
        .sqrt()
        / n;
    let seq_stderr = if per_sequence.len() < 2 {
        0.0
    } else {
        let var = per_sequence
            .iter()
            .map(|r| (r.total_nats - total_nats) * (r.total_nats - total_nats))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(EvalFile {
        config_hash: config.hash()?,
        seed: config.eval.seed,
        split: format!("{split:?}").to_lowercase(),
        mode: match config.eval.mode {
            EvalMode::Exact => "exact_sum".into(),
            EvalMode::Mc => "mc".into(),
        },
        num_sequences: per_sequence.len(),
        bpc,
        total_nats,
        l0,
        l_t,
        lt_terms,
        mc_stderr,
        seq_stderr,
        per_sequence,
    })
}

pub fn cmd_gen_data(config: &RunConfig, out_override: Option<&Path>) -> Result<PathBuf> {
    let DataConfig::Synthetic { spec } = &config.data else {
        return Err(SlmError::InvalidInput(
            "gen-data needs a synthetic data source".into(),
        ));
    };
    let out_dir = out_override.unwrap_or(&config.output_dir).to_path_buf();
    let _lock = DirLock::acquire(&out_dir)?;
    let batch = generate(spec)?;
    let path = out_dir.join("dataset.jsonl");
    let mut file = BufWriter::new(File::create(&path)?);
    #[derive(Serialize)]
    struct Header<'a> {
        record: &'a str,
        config_hash: &'a str,
        seed: u64,
        k: usize,
        l: usize,
        n: usize,
    }
    #[derive(Serialize)]
    struct Row<'a> {
        record: &'static str,
        tokens: &'a [usize],
        #[serde(skip_serializing_if = "Option::is_none")]
        label: Option<usize>,
    }
    let config_hash = config.hash()?;
    writeln!(
        file,
        "{}",
        serde_json::to_string(&Header {
            record: "header",
            config_hash: &config_hash,
            seed: spec.seed,
            k: spec.k,
            l: spec.l,
            n: spec.n,
        })
        .expect("header serializes")
    )?;
    for i in 0..batch.len() {
        writeln!(
            file,
            "{}",
            serde_json::to_string(&Row {
                record: "row",
                tokens: batch.sequence(i),
                label: batch.label(i),
            })
            .expect("row serializes")
        )?;
    }
    file.flush()?;
    Ok(path)
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

/// The oracle verification suite. Prints one pass/fail row per check and
/// returns whether everything passed.
pub fn cmd_verify() -> Result<bool> {
    let mut checks = Vec::new();

    // Marginal side: composed per-step transitions must equal the
    // closed form produced by the forward kernel.
    let mut worst_marginal = 0.0f64;
    let mut worst_posterior = 0.0f64;
    for k in [2usize, 3, 5] {
        for s in [2usize, 4, 8] {
            let kernel = ForwardKernel::new(Schedule::exponential(k, s)?)?;
            for j in 0..=s {
                let closed = kernel.marginal_wrong_prob(j)?;
                let composed = oracle::marginal_by_composition(k, s, j, false);
                worst_marginal = worst_marginal.max((closed - composed).abs());
                assert_eq!(oracle::marginal_by_composition(k, s, j, true), 1.0);
            }
            for j in 1..=s {
                let closed = kernel.posterior_keep_prob(j)?;
                let bayes = oracle::posterior_by_bayes(k, s, j, false, true)?;
                worst_posterior = worst_posterior.max((closed - bayes).abs());
                worst_posterior = worst_posterior
                    .max((oracle::posterior_by_bayes(k, s, j, true, true)? - 1.0).abs());
                worst_posterior =
                    worst_posterior.max(oracle::posterior_by_bayes(k, s, j, false, false)?);
            }
        }
    }
    checks.push(check(
        "marginal closed form vs composition",
        worst_marginal <= 1e-12,
        format!("max deviation {worst_marginal:.3e}"),
    ));
    checks.push(check(
        "posterior closed form vs bayes rule",
        worst_posterior <= 1e-12,
        format!("max deviation {worst_posterior:.3e}"),
    ));

    // Boundary terms: the j=S marginal is exactly Bern(1) and L_T is 0.
    let mut boundary_exact = true;
    for k in [2usize, 3, 5, 27] {
        let kernel = ForwardKernel::new(Schedule::exponential(k, 4)?)?;
        for token in 0..k {
            let x0 = crate::types::CandidateSet::one_hot(token, k)?;
            let marg = kernel.marginal_params(&x0, 4)?;
            if marg.probs().iter().any(|&p| p != 1.0) {
                boundary_exact = false;
            }
            let prior = crate::types::BernoulliParams::new(vec![1.0; k])?;
            let ones = crate::types::CandidateSet::all_ones(k)?;
            if crate::losses::bernoulli_kl(&marg, &prior, &ones)? != 0.0 {
                boundary_exact = false;
            }
        }
    }
    checks.push(check(
        "boundary: marginal(S)=Bern(1), L_T=0",
        boundary_exact,
        "exact".into(),
    ));

    // ELBO >= NLL and agreement of the two independent ELBO paths.
    let mut worst_gap = f64::INFINITY;
    let mut worst_agreement = 0.0f64;
    for seed in 0..20u64 {
        let model = crate::predictor::PredictorConfig {
            k: 2,
            l: 1,
            class_count: 0,
            time_features: 2,
            hidden: 0,
        };
        let predictor = LinearPredictor::with_uniform_random_params(model, seed, 1.5)?;
        let kernel = ForwardKernel::new(Schedule::exponential(2, 2)?)?;
        for token in 0..2usize {
            let (elbo, nll) = oracle::exact_nll(
                &[token],
                2,
                2,
                &predictor,
                &oracle::EnumerationBudget::default(),
            )?;
            worst_gap = worst_gap.min(elbo - nll);
            let report = elbo_exact(
                &predictor,
                &[token],
                &kernel,
                ElboMode::ExactSum,
                None,
                1 << 24,
                &mut rng::master(0),
            )?;
            worst_agreement = worst_agreement.max((report.total_nats - elbo).abs());
        }
    }
    checks.push(check(
        "elbo >= nll (enumeration)",
        worst_gap >= -1e-10,
        format!("min gap {worst_gap:.3e}"),
    ));
    checks.push(check(
        "independent elbo paths agree",
        worst_agreement <= 1e-10,
        format!("max deviation {worst_agreement:.3e}"),
    ));

    // Perfect predictor zeroes every objective.
    let mut perfect = true;
    for (k, s, l) in [(3usize, 2usize, 1usize), (4, 3, 2), (5, 4, 1)] {
        let tokens: Vec<usize> = (0..l).map(|i| (i + 1) % k).collect();
        let predictor = crate::predictor::FixedTokenPredictor::new(k, tokens.clone())?;
        let kernel = ForwardKernel::new(Schedule::exponential(k, s)?)?;
        let report = elbo_exact(
            &predictor,
            &tokens,
            &kernel,
            ElboMode::ExactSum,
            None,
            1 << 24,
            &mut rng::master(0),
        )?;
        if report.total_nats.abs() > 1e-12 {
            perfect = false;
        }
    }
    checks.push(check(
        "perfect predictor zero",
        perfect,
        "|elbo| <= 1e-12".into(),
    ));

    // Simplex projection against the exhaustive grids.
    let mut worst_proj2 = 0.0f64;
    let mut r = rng::master(5150);
    for _ in 0..200 {
        let v: Vec<f64> = (0..2).map(|_| r.gen::<f64>() * 4.0 - 2.0).collect();
        let ours = crate::sampler::simplex_project(&v);
        let grid = oracle::projection_by_grid(&v, 1e-4)?;
        for (a, b) in ours.iter().zip(&grid) {
            worst_proj2 = worst_proj2.max((a - b).abs());
        }
    }
    let mut worst_proj3 = 0.0f64;
    for _ in 0..50 {
        let v: Vec<f64> = (0..3).map(|_| r.gen::<f64>() * 4.0 - 2.0).collect();
        let ours = crate::sampler::simplex_project(&v);
        let grid = oracle::projection_by_refined_grid(&v, 5e-5)?;
        for (a, b) in ours.iter().zip(&grid) {
            worst_proj3 = worst_proj3.max((a - b).abs());
        }
    }
    checks.push(check(
        "simplex projection vs grid (2d)",
        worst_proj2 <= 1e-4,
        format!("max deviation {worst_proj2:.3e}"),
    ));
    checks.push(check(
        "simplex projection vs grid (3d)",
        worst_proj3 <= 1e-4,
        format!("max deviation {worst_proj3:.3e}"),
    ));

    // Sampler invariants on a quick lattice.
    let mut sampler_ok = true;
    {
        let k = 6usize;
        let s = 10usize;
        let kernel = ForwardKernel::new(Schedule::exponential(k, s)?)?;
        let predictor = UniformPredictor { k, l: 2 };
        let config = SamplerConfig {
            steps: s,
            gamma: 1.0,
            cls: None,
            seed: 424242,
        };
        for stream in 0..100u64 {
            let mut rr = rng::stream(config.seed, stream);
            let (_, trace) =
                crate::sampler::sample_with_trace(&predictor, &config, &kernel, &mut rr)?;
            let mut prev = vec![crate::types::CandidateSet::all_ones(k)?; 2];
            for states in &trace {
                for (cur, before) in states.iter().zip(&prev) {
                    if cur.count_ones() == 0 || !cur.is_subset_of(before)? {
                        sampler_ok = false;
                    }
                }
                prev = states.clone();
            }
        }
    }
    checks.push(check(
        "sampler support shrinkage / nonempty",
        sampler_ok,
        "exact".into(),
    ));

    let mut all = true;
    for c in &checks {
        let tag = if c.passed { " PASS " } else { " FAIL " };
        println!("[{tag}] {:<38} {}", c.name, c.detail);
        all &= c.passed;
    }
    Ok(all)
}
