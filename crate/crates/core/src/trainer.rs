//! Stochastic fitting of an FDM to a co-occurrence matrix.
//!
//! Every step draws a fresh batch of token pairs from the matrix, evaluates
//! the analytic gradient of the batch log-likelihood and applies an Adam
//! ascent update to the free variables. Batch randomness is derived from
//! `(seed, step)`, so a resumed run continues exactly where it stopped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cooccurrence::{read_u32, read_u64, CoocMatrix, PairSampler, Parallelism};
use crate::corpus::TokenId;
use crate::error::{format_err, FdmError, Result};
use crate::model::{batch_gradient_dist, full_loss, realize, tri_len, FdmDist, FdmGradient, FdmParams};
use crate::topics::TopicSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDMCKPT1";

const EMA_DECAY: f64 = 0.99;
const SAMPLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub topics: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_steps: u64,
    /// Number of consecutive small relative changes that count as converged.
    pub conv_window: usize,
    pub conv_tol: f64,
    /// Steps between convergence checks.
    pub check_every: u64,
    pub init_scale: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub mode: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            topics: 10,
            batch: 1024,
            lr: 0.001,
            max_steps: 200_000,
            conv_window: 20,
            conv_tol: 1e-4,
            check_every: 500,
            init_scale: 0.1,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            mode: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FdmError::InvalidConfig(msg));
        if self.topics == 0 {
            return bad("topic count must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.conv_window < 2 {
            return bad(format!("conv_window must be at least 2, got {}", self.conv_window));
        }
        if self.check_every == 0 {
            return bad("check_every must be at least 1".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be non-negative, got {}", self.init_scale));
        }
        if !(self.conv_tol >= 0.0) {
            return bad(format!("conv_tol must be non-negative, got {}", self.conv_tol));
        }
        Ok(())
    }
}

/// I.i.d. `Normal(0, init_scale²)` free variables, topic rows first.
pub fn init_params(topics: usize, vocab: usize, init_scale: f64, seed: u64) -> Result<FdmParams> {
    if topics == 0 || vocab < 2 {
        return Err(FdmError::InvalidConfig(format!(
            "need at least 1 topic and 2 tokens, got T={topics} N={vocab}"
        )));
    }
    if init_scale == 0.0 {
        return Ok(FdmParams::zeros(topics, vocab));
    }
    let normal = Normal::new(0.0, init_scale).map_err(|e| FdmError::InvalidConfig(format!("init_scale: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu: Vec<f64> = (0..topics * vocab).map(|_| normal.sample(&mut rng)).collect();
    let alpha: Vec<f64> = (0..tri_len(topics)).map(|_| normal.sample(&mut rng)).collect();
    FdmParams::from_parts(topics, vocab, mu, alpha)
}

/// Adam moment accumulators, shaped like `FdmParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m_mu: Vec<f64>,
    v_mu: Vec<f64>,
    m_alpha: Vec<f64>,
    v_alpha: Vec<f64>,
}

impl AdamState {
    pub fn new(topics: usize, vocab: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_mu: vec![0.0; topics * vocab],
            v_mu: vec![0.0; topics * vocab],
            m_alpha: vec![0.0; tri_len(topics)],
            v_alpha: vec![0.0; tri_len(topics)],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam ascent step. With `update_topics == false`
    /// only the mixing variables move.
    pub fn step(&mut self, params: &mut FdmParams, grad: &FdmGradient, lr: f64, update_topics: bool) -> Result<()> {
        if grad.mu.len() != self.m_mu.len()
            || grad.alpha.len() != self.m_alpha.len()
            || params.mu_free().len() != self.m_mu.len()
            || params.alpha_free().len() != self.m_alpha.len()
        {
            return Err(FdmError::DimensionMismatch(
                "optimizer, parameter and gradient shapes differ".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |x: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for k in 0..x.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                x[k] += lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        if update_topics {
            update(params.mu_free_mut(), &mut self.m_mu, &mut self.v_mu, &grad.mu);
        }
        update(
            params.alpha_free_mut(),
            &mut self.m_alpha,
            &mut self.v_alpha,
            &grad.alpha,
        );
        Ok(())
    }
}

pub fn optimizer_step(state: &mut AdamState, params: &mut FdmParams, grad: &FdmGradient, lr: f64) -> Result<()> {
    state.step(params, grad, lr, true)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Smoothed per-pair objective `L_B / B` after each step.
    pub ema_objective: Vec<f64>,
    /// Wall-clock seconds spent in each step.
    pub seconds: Vec<f64>,
    /// Global step number of the first trace row minus one.
    pub start_step: u64,
    pub converged: bool,
    pub converged_step: Option<u64>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.ema_objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ema_objective.is_empty()
    }

    /// CSV with columns `step,ema_objective,seconds`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,ema_objective,seconds")?;
        for (k, (obj, secs)) in self.ema_objective.iter().zip(&self.seconds).enumerate() {
            writeln!(w, "{},{obj:e},{secs:e}", self.start_step + k as u64 + 1)?;
        }
        Ok(())
    }
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: FdmParams,
    optimizer: AdamState,
    step: u64,
    ema: Option<f64>,
    checks: Vec<f64>,
    converged: bool,
    fixed_topics: Option<TopicSet>,
}

impl Trainer {
    pub fn new(vocab: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(config.topics, vocab, config.init_scale, config.seed)?;
        Self::with_params(params, config)
    }

    /// Starts from given free variables instead of a random draw.
    pub fn with_params(params: FdmParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if params.num_topics() != config.topics {
            return Err(FdmError::DimensionMismatch(format!(
                "initial parameters have {} topics, config asks for {}",
                params.num_topics(),
                config.topics
            )));
        }
        Ok(Self {
            optimizer: AdamState::new(params.num_topics(), params.vocab_size()),
            params,
            config,
            step: 0,
            ema: None,
            checks: Vec::new(),
            converged: false,
            fixed_topics: None,
        })
    }

    /// Trains only the mixing matrix on top of fixed topics, which may
    /// contain exact zeros.
    pub fn for_fixed_topics(topics: TopicSet, config: TrainConfig) -> Result<Self> {
        let params = FdmParams::zeros(topics.num_topics(), topics.vocab_size());
        let config = TrainConfig {
            topics: topics.num_topics(),
            ..config
        };
        let mut trainer = Self::with_params(params, config)?;
        trainer.fixed_topics = Some(topics);
        Ok(trainer)
    }

    pub fn params(&self) -> &FdmParams {
        &self.params
    }

    pub fn into_params(self) -> FdmParams {
        self.params
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        if config.topics != self.params.num_topics() {
            return Err(FdmError::DimensionMismatch(
                "cannot change the topic count of a running trainer".into(),
            ));
        }
        self.config = config;
        Ok(())
    }

    pub fn dist(&self) -> Result<FdmDist> {
        match &self.fixed_topics {
            Some(topics) => FdmDist::with_alpha_free(topics, self.params.alpha_free()),
            None => Ok(realize(&self.params)),
        }
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SAMPLE_SALT);
        rng.set_stream(self.step);
        rng
    }

    /// Runs until convergence or `max_steps` total steps.
    pub fn run(&mut self, cooc: &CoocMatrix) -> Result<TrainTrace> {
        let target = self.config.max_steps;
        self.run_until(cooc, target)
    }

    /// Runs until convergence or until the global step counter reaches `target`.
    pub fn run_until(&mut self, cooc: &CoocMatrix, target: u64) -> Result<TrainTrace> {
        if cooc.vocab_size() != self.params.vocab_size() {
            return Err(FdmError::VocabMismatch {
                expected: self.params.vocab_size(),
                found: cooc.vocab_size(),
            });
        }
        let mut trace = TrainTrace {
            start_step: self.step,
            ..TrainTrace::default()
        };
        if self.step >= target || self.converged {
            trace.converged = self.converged;
            return Ok(trace);
        }
        let sampler = PairSampler::new(cooc, self.config.seed)?;
        let mut pairs: Vec<(TokenId, TokenId)> = Vec::with_capacity(self.config.batch);
        let update_topics = self.fixed_topics.is_none();
        while self.step < target && !self.converged {
            let started = Instant::now();
            let mut rng = self.step_rng();
            sampler.fill_with(&mut rng, self.config.batch, &mut pairs);
            let dist = self.dist()?;
            let eval = batch_gradient_dist(&dist, &pairs, self.config.mode);
            if !eval.objective.is_finite() || eval.grad.alpha.iter().chain(&eval.grad.mu).any(|g| !g.is_finite()) {
                return Err(FdmError::NonFiniteLoss { step: self.step + 1 });
            }
            self.optimizer
                .step(&mut self.params, &eval.grad, self.config.lr, update_topics)?;
            self.step += 1;

            let per_pair = eval.objective / pairs.len() as f64;
            let ema = match self.ema {
                Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * per_pair,
                None => per_pair,
            };
            self.ema = Some(ema);
            if self.step.is_multiple_of(self.config.check_every) {
                self.checks.push(ema);
                if self.window_converged() {
                    self.converged = true;
                    trace.converged_step = Some(self.step);
                }
            }
            trace.ema_objective.push(ema);
            trace.seconds.push(started.elapsed().as_secs_f64());

            if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                if let Some(path) = self.config.checkpoint_path.clone() {
                    self.save_checkpoint(&path)?;
                }
            }
        }
        trace.converged = self.converged;
        Ok(trace)
    }

    fn window_converged(&self) -> bool {
        let w = self.config.conv_window;
        if self.checks.len() < w + 1 {
            return false;
        }
        self.checks[self.checks.len() - w - 1..]
            .windows(2)
            .all(|p| ((p[1] - p[0]) / p[0]).abs() < self.config.conv_tol)
    }

    /// Binary layout (little endian): magic `FDMCKPT1`, u32 T, u32 N,
    /// u64 step, f64 beta1, beta2, eps, u8 EMA flag, f64 EMA, u8 converged,
    /// u64 check count and the check values, then topic free variables,
    /// packed mixing free variables, and the four Adam accumulators.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let f64s = |w: &mut W, xs: &[f64]| -> Result<()> {
            for x in xs {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.num_topics() as u32).to_le_bytes())?;
        w.write_all(&(self.params.vocab_size() as u32).to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        f64s(
            &mut w,
            &[self.optimizer.beta1, self.optimizer.beta2, self.optimizer.eps],
        )?;
        w.write_all(&[self.ema.is_some() as u8])?;
        f64s(&mut w, &[self.ema.unwrap_or(0.0)])?;
        w.write_all(&[self.converged as u8])?;
        w.write_all(&(self.checks.len() as u64).to_le_bytes())?;
        f64s(&mut w, &self.checks)?;
        f64s(&mut w, self.params.mu_free())?;
        f64s(&mut w, self.params.alpha_free())?;
        f64s(&mut w, &self.optimizer.m_mu)?;
        f64s(&mut w, &self.optimizer.v_mu)?;
        f64s(&mut w, &self.optimizer.m_alpha)?;
        f64s(&mut w, &self.optimizer.v_alpha)?;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Restores a trainer; `config.topics` must match the checkpoint.
    pub fn read_checkpoint<R: Read>(mut r: R, config: TrainConfig) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| format_err("checkpoint too short"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err("bad checkpoint magic bytes"));
        }
        let t = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let step = read_u64(&mut r)?;
        let f64s =
            |r: &mut R, k: usize| -> Result<Vec<f64>> { (0..k).map(|_| read_u64(r).map(f64::from_bits)).collect() };
        let byte = |r: &mut R| -> Result<u8> {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(|_| format_err("unexpected end of file"))?;
            Ok(b[0])
        };
        let hyper = f64s(&mut r, 3)?;
        let has_ema = byte(&mut r)? != 0;
        let ema = f64s(&mut r, 1)?[0];
        let converged = byte(&mut r)? != 0;
        let n_checks = read_u64(&mut r)? as usize;
        if n_checks > 1 << 32 {
            return Err(format_err("implausible check count in checkpoint"));
        }
        let checks = f64s(&mut r, n_checks)?;
        let mu_free = f64s(&mut r, t * n)?;
        let alpha_free = f64s(&mut r, tri_len(t))?;
        let params = FdmParams::from_parts(t, n, mu_free, alpha_free)?;
        let optimizer = AdamState {
            beta1: hyper[0],
            beta2: hyper[1],
            eps: hyper[2],
            step,
            m_mu: f64s(&mut r, t * n)?,
            v_mu: f64s(&mut r, t * n)?,
            m_alpha: f64s(&mut r, tri_len(t))?,
            v_alpha: f64s(&mut r, tri_len(t))?,
        };
        let mut trainer = Self::with_params(params, config)?;
        trainer.optimizer = optimizer;
        trainer.step = step;
        trainer.ema = has_ema.then_some(ema);
        trainer.checks = checks;
        trainer.converged = converged;
        Ok(trainer)
    }

    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?), config)
    }
}

/// Fits an FDM with `config.topics` topics to `cooc`.
pub fn train(cooc: &CoocMatrix, config: &TrainConfig) -> Result<(FdmParams, TrainTrace)> {
    if cooc.is_empty() {
        return Err(FdmError::InvalidConfig("empty co-occurrence matrix".into()));
    }
    let mut trainer = Trainer::new(cooc.vocab_size(), config.clone())?;
    let trace = trainer.run(cooc)?;
    Ok((trainer.into_params(), trace))
}

/// Independent fits with seeds `seed, seed + 1, …`; keeps the one with the
/// lowest [`full_loss`]. Returns the winning trainer, which can be run
/// further, its trace, and the loss of every restart.
pub fn train_restarts(
    cooc: &CoocMatrix,
    config: &TrainConfig,
    restarts: usize,
) -> Result<(Trainer, TrainTrace, Vec<f64>)> {
    if restarts == 0 {
        return Err(FdmError::InvalidConfig("restarts must be at least 1".into()));
    }
    if cooc.is_empty() {
        return Err(FdmError::InvalidConfig("empty co-occurrence matrix".into()));
    }
    let mut best: Option<(Trainer, TrainTrace, f64)> = None;
    let mut losses = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(r as u64),
            ..config.clone()
        };
        let mut trainer = Trainer::new(cooc.vocab_size(), cfg)?;
        let trace = trainer.run(cooc)?;
        let loss = full_loss(&trainer.dist()?, cooc)?;
        losses.push(loss);
        if best.as_ref().is_none_or(|(_, _, l)| loss < *l) {
            best = Some((trainer, trace, loss));
        }
    }
    let (trainer, trace, _) = best.expect("at least one restart");
    Ok((trainer, trace, losses))
}

/// Best mixing matrix for fixed topics; returns the realized FDM.
pub fn fit_alpha(cooc: &CoocMatrix, topics: &TopicSet, config: &TrainConfig) -> Result<(FdmDist, TrainTrace)> {
    let mut trainer = Trainer::for_fixed_topics(topics.clone(), config.clone())?;
    let trace = trainer.run(cooc)?;
    Ok((trainer.dist()?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cooc() -> CoocMatrix {
        let raw = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let total: f64 = raw.iter().sum();
        CoocMatrix::from_dense(3, &raw.map(|x| x / total)).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            topics: 2,
            batch: 64,
            lr: 0.01,
            max_steps: 50,
            conv_window: 2,
            conv_tol: 0.0,
            check_every: 10,
            seed: 3,
            mode: Parallelism::Sequential,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_scale_init_is_uniform() {
        let p = init_params(3, 5, 0.0, 1).unwrap();
        let d = p.realize();
        assert!(d.mu().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert!(d.alpha().iter().all(|&x| (x - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn init_is_seeded_and_normalized() {
        let a = init_params(4, 100, 0.1, 42).unwrap();
        assert_eq!(a, init_params(4, 100, 0.1, 42).unwrap());
        assert_ne!(a, init_params(4, 100, 0.1, 43).unwrap());
        let d = a.realize();
        for t in 0..4 {
            assert!((d.topic(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(init_params(0, 5, 0.1, 0).is_err());
        assert!(init_params(2, 1, 0.1, 0).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = init_params(2, 3, 0.5, 9).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(2, 3);
        let g = FdmGradient {
            mu: vec![0.0; 6],
            alpha: vec![0.0; 3],
        };
        optimizer_step(&mut state, &mut p, &g, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut p = FdmParams::zeros(1, 2);
        let mut state = AdamState::new(1, 2);
        let g = FdmGradient {
            mu: vec![0.5, -2.0],
            alpha: vec![1e-3],
        };
        let lr = 0.01;
        optimizer_step(&mut state, &mut p, &g, lr).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction.
        for (x, g) in p.mu_free().iter().zip(&g.mu) {
            let expect = lr * g / (g.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
        }
        let expect = lr * 1e-3 / (1e-3 + 1e-8);
        assert!((p.alpha_free()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut p = FdmParams::zeros(1, 2);
        let mut state = AdamState::new(1, 2);
        let g = FdmGradient {
            mu: vec![3.0, -0.02],
            alpha: vec![0.0],
        };
        let lr = 0.001;
        let mut prev = p.mu_free().to_vec();
        for _ in 0..200 {
            optimizer_step(&mut state, &mut p, &g, lr).unwrap();
            let now = p.mu_free().to_vec();
            let delta: Vec<f64> = now.iter().zip(&prev).map(|(a, b)| a - b).collect();
            assert!((delta[0] - lr).abs() < 1e-9);
            assert!((delta[1] + lr).abs() < 1e-9);
            prev = now;
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let cfg = TrainConfig {
            max_steps: 0,
            ..quick_config()
        };
        let (params, trace) = train(&small_cooc(), &cfg).unwrap();
        assert_eq!(params, init_params(2, 3, cfg.init_scale, cfg.seed).unwrap());
        assert!(trace.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (a, ta) = train(&small_cooc(), &quick_config()).unwrap();
        let (b, tb) = train(&small_cooc(), &quick_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.ema_objective, tb.ema_objective);
        assert_eq!(ta.len(), 50);
    }

    #[test]
    fn parallel_mode_matches_sequential() {
        let par = TrainConfig {
            mode: Parallelism::Parallel,
            batch: 8192,
            ..quick_config()
        };
        let seq = TrainConfig {
            mode: Parallelism::Sequential,
            ..par.clone()
        };
        assert_eq!(
            train(&small_cooc(), &par).unwrap().0,
            train(&small_cooc(), &seq).unwrap().0
        );
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let cooc = small_cooc();
        let cfg = quick_config();
        let mut straight = Trainer::new(3, cfg.clone()).unwrap();
        straight.run_until(&cooc, 30).unwrap();

        let mut first = Trainer::new(3, cfg.clone()).unwrap();
        first.run_until(&cooc, 20).unwrap();
        let mut buf = Vec::new();
        first.write_checkpoint(&mut buf).unwrap();
        let mut resumed = Trainer::read_checkpoint(buf.as_slice(), cfg.clone()).unwrap();
        assert_eq!(resumed.step_count(), 20);
        resumed.run_until(&cooc, 30).unwrap();
        assert_eq!(resumed.params(), straight.params());
        assert_eq!(resumed.optimizer(), straight.optimizer());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Trainer::resume(&dir.path().join("missing.bin"), quick_config()),
            Err(FdmError::Io(_))
        ));
        let trainer = Trainer::new(3, quick_config()).unwrap();
        let mut buf = Vec::new();
        trainer.write_checkpoint(&mut buf).unwrap();
        buf[3] ^= 0xff;
        assert!(matches!(
            Trainer::read_checkpoint(buf.as_slice(), quick_config()),
            Err(FdmError::Format(_))
        ));
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let mut trainer = Trainer::new(5, quick_config()).unwrap();
        assert!(matches!(
            trainer.run(&small_cooc()),
            Err(FdmError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn huge_learning_rate_stays_finite_or_errors() {
        let cfg = TrainConfig {
            lr: 1e6,
            max_steps: 200,
            ..quick_config()
        };
        match train(&small_cooc(), &cfg) {
            Ok((p, _)) => assert!(p.mu_free().iter().all(|x| x.is_finite())),
            Err(e) => assert!(matches!(e, FdmError::NonFiniteLoss { .. })),
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig {
                batch: 0,
                ..quick_config()
            },
            TrainConfig {
                lr: 0.0,
                ..quick_config()
            },
            TrainConfig {
                conv_window: 1,
                ..quick_config()
            },
            TrainConfig {
                init_scale: -1.0,
                ..quick_config()
            },
        ] {
            assert!(matches!(train(&small_cooc(), &cfg), Err(FdmError::InvalidConfig(_))));
        }
    }

    #[test]
    fn alpha_only_training_keeps_topics() {
        let topics = TopicSet::from_rows(vec![vec![0.7, 0.3, 0.0], vec![0.0, 0.2, 0.8]]).unwrap();
        let cfg = TrainConfig {
            max_steps: 100,
            ..quick_config()
        };
        let (dist, _) = fit_alpha(&small_cooc(), &topics, &cfg).unwrap();
        assert_eq!(dist.mu(), topics.as_slice());
        assert!((dist.alpha().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
