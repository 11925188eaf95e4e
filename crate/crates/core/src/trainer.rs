//! Mini-batch training with Adam and global-norm clipping.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{self, HingeMode, LossConfig, LossError, NegativeSampler, Triplet};
use crate::model::{self, ModelDims, ModelError, ModelParams};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::vocab::TokenId;

pub use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteBatch { epoch: u64, batch: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("optimizer shape mismatch at parameter {index}: {left:?} vs {right:?}")]
    Shape {
        index: usize,
        left: Vec<usize>,
        right: Vec<usize>,
    },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Loss(LossError::Model(e))
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Loss(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub type Pair = (Vec<TokenId>, Vec<TokenId>);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub embed: usize,
    pub hidden: usize,
    pub max_query_len: usize,
    pub max_reply_len: usize,
    pub beam: usize,
    pub negatives: usize,
    pub hinge_mode: HingeMode,
    pub seed: u64,
    pub clip_norm: f64,
    pub per_token_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            gamma: 0.18,
            lr: 1e-4,
            batch_size: 20,
            epochs: 7,
            embed: 32,
            hidden: 64,
            max_query_len: 30,
            max_reply_len: 50,
            beam: 10,
            negatives: 4,
            hinge_mode: HingeMode::Literal,
            seed: 0,
            clip_norm: 5.0,
            per_token_mean: false,
        }
    }
}

pub const CONFIG_KEYS: [&str; 15] = [
    "lambda",
    "gamma",
    "lr",
    "batch_size",
    "epochs",
    "embed",
    "hidden",
    "max_query_len",
    "max_reply_len",
    "beam",
    "negatives_per_positive",
    "hinge_mode",
    "seed",
    "clip_norm",
    "per_token_mean",
];

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            mode: self.hinge_mode,
            per_token_mean: self.per_token_mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("lr", self.lr), ("clip_norm", self.clip_norm)] {
            if !v.is_finite() || v <= 0.0 {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("max_query_len", self.max_query_len),
            ("max_reply_len", self.max_reply_len),
            ("beam", self.beam),
            ("negatives_per_positive", self.negatives),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| TrainError::Config(format!("cannot parse {key} = {value:?}")))
        }
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "embed" => self.embed = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "max_query_len" => self.max_query_len = num(key, value)?,
            "max_reply_len" => self.max_reply_len = num(key, value)?,
            "beam" => self.beam = num(key, value)?,
            "negatives_per_positive" => self.negatives = num(key, value)?,
            "hinge_mode" => self.hinge_mode = value.trim().parse()?,
            "seed" => self.seed = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "per_token_mean" => self.per_token_mean = num(key, value)?,
            other => return Err(TrainError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// All fields as `(key, value)` text in [`CONFIG_KEYS`] order. Floats use
    /// the shortest representation that parses back to the same value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.lambda.to_string(),
            self.gamma.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.embed.to_string(),
            self.hidden.to_string(),
            self.max_query_len.to_string(),
            self.max_reply_len.to_string(),
            self.beam.to_string(),
            self.negatives.to_string(),
            self.hinge_mode.to_string(),
            self.seed.to_string(),
            self.clip_norm.to_string(),
            self.per_token_mean.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(values).collect()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

fn check_shapes(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(TrainError::Shape {
            index: a.len().min(b.len()),
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    for (index, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(TrainError::Shape {
                index,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    check_shapes(params, &state.m)?;
    check_shapes(params, &state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].values();
        let m = state.m[i].values_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
        }
        let v = state.v[i].values_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
        }
        let (m, v) = (state.m[i].values(), state.v[i].values());
        for (j, pj) in p.values_mut().iter_mut().enumerate() {
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *pj -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.values())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.values_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// Purposes for derived random streams.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Negatives = 3,
    Synth = 4,
    Analysis = 5,
}

/// Independent generator for `(seed, purpose, epoch, index)`.
pub fn derived_rng(seed: u64, purpose: Stream, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for word in [seed, purpose as u64, epoch, index] {
        h.update(word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Parameter seed for a fresh model.
pub fn init_seed(seed: u64) -> u64 {
    let mut rng = derived_rng(seed, Stream::Init, 0, 0);
    rand::RngCore::next_u64(&mut rng)
}

/// Summary of one pass over the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: u64,
    pub mean_ce: f64,
    pub mean_margin: f64,
    pub active_fraction: f64,
    pub wall_seconds: f64,
    pub batch_losses: Vec<f64>,
}

impl EpochReport {
    /// Learning-curve line: epoch, mean_ce, mean_margin, active_fraction,
    /// wall_seconds, tab separated.
    pub fn curve_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.mean_ce, self.mean_margin, self.active_fraction, self.wall_seconds
        )
    }
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {}: ce {:.4}, margin {:.4}, active {:.3}",
            self.epoch, self.mean_ce, self.mean_margin, self.active_fraction
        )
    }
}

fn zero_grads(params: &ModelParams) -> Vec<Tensor> {
    params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

/// Train for one epoch. `epoch` is 1-based and, with `config.seed`, fully
/// determines the shuffle order and the negatives drawn for every pair.
pub fn train_epoch(
    corpus: &[Pair],
    params: &mut ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
    epoch: u64,
) -> Result<EpochReport> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    config.validate()?;
    let start = Instant::now();
    let loss_cfg = config.loss_config();
    let use_margin = config.lambda > 0.0;
    let responses: Vec<Vec<TokenId>> = if use_margin { corpus.iter().map(|(_, y)| y.clone()).collect() } else { Vec::new() };
    let sampler = NegativeSampler::new(&responses);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut derived_rng(config.seed, Stream::Shuffle, epoch, 0));

    let (mut ce_sum, mut margin_sum, mut active) = (0.0, 0.0, 0usize);
    let mut batch_losses = Vec::new();
    for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
        let mut grads = zero_grads(params);
        let mut batch_loss = 0.0;
        let weight = 1.0 / batch.len() as f64;
        for &i in batch {
            let (x, y) = &corpus[i];
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let step = (|| -> std::result::Result<Var, LossError> {
                if use_margin {
                    let mut rng = derived_rng(config.seed, Stream::Negatives, epoch, i as u64);
                    let negatives = sampler.sample(y, config.negatives, &mut rng)?;
                    let triplet = Triplet::new(x.clone(), y.clone(), negatives)?;
                    let (total, b) = losses::ranking_loss_on(&mut tape, &bound, &triplet, &loss_cfg)?;
                    ce_sum += b.ce;
                    margin_sum += b.margin_term;
                    active += usize::from(b.margin_active);
                    Ok(total)
                } else {
                    let enc = model::encode_on(&mut tape, &bound, x)?;
                    let lp = model::sequence_log_prob_on(&mut tape, &bound, &enc, y)?;
                    let ce = tape.scale(lp, -1.0)?;
                    ce_sum += tape.item(ce);
                    Ok(ce)
                }
            })();
            let total = match step {
                Ok(t) => t,
                Err(e) if is_non_finite(&e) => return Err(TrainError::NonFiniteBatch { epoch, batch: batch_index }),
                Err(e) => return Err(e.into()),
            };
            let value = tape.item(total);
            if !value.is_finite() {
                return Err(TrainError::NonFiniteBatch { epoch, batch: batch_index });
            }
            batch_loss += value * weight;
            tape.backward_seeded(total, weight)?;
            for (g, &v) in grads.iter_mut().zip(bound.vars()) {
                if let Some(d) = tape.grad(v) {
                    for (a, b) in g.values_mut().iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
        }
        if !batch_loss.is_finite() || grads.iter().any(|g| g.values().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteBatch { epoch, batch: batch_index });
        }
        clip_global_norm(&mut grads, config.clip_norm);
        adam_step(params.tensors_mut(), &grads, state, config.lr)?;
        log::debug!("epoch {epoch} batch {batch_index}: loss {batch_loss:.6}");
        batch_losses.push(batch_loss);
    }
    let n = corpus.len() as f64;
    Ok(EpochReport {
        epoch,
        mean_ce: ce_sum / n,
        mean_margin: margin_sum / n,
        active_fraction: active as f64 / n,
        wall_seconds: start.elapsed().as_secs_f64(),
        batch_losses,
    })
}

fn is_non_finite(e: &LossError) -> bool {
    matches!(
        e,
        LossError::NonFinite(_) | LossError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// A fresh model and optimizer for `config`.
pub fn init_training(dims: ModelDims, config: &TrainConfig) -> (ModelParams, OptimizerState) {
    let params = ModelParams::init(dims, init_seed(config.seed));
    let state = OptimizerState::new(params.tensors());
    (params, state)
}

/// Run `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    corpus: &[Pair],
    params: &mut ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
    first_epoch: u64,
    mut on_epoch: impl FnMut(&EpochReport, &ModelParams, &OptimizerState),
) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::with_capacity(config.epochs);
    for e in first_epoch..first_epoch + config.epochs as u64 {
        let r = train_epoch(corpus, params, state, config, e)?;
        log::info!("{r}");
        on_epoch(&r, params, state);
        reports.push(r);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::row(vec![0.5, -1.0])];
        let mut st = OptimizerState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[1, 2])], &mut st, 1e-3).unwrap();
        assert_eq!(params[0].values(), &[0.5, -1.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_adam_step_closed_form() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut st = OptimizerState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut st, 1e-4).unwrap();
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((params[0].values()[0] - expected).abs() < 1e-15);
        assert!((params[0].values()[0] - 0.9999).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = vec![Tensor::row(vec![0.0, 0.0])];
        let mut st = OptimizerState::new(&params);
        assert!(matches!(
            adam_step(&mut params, &[Tensor::scalar(1.0)], &mut st, 1e-3),
            Err(TrainError::Shape { index: 0, .. })
        ));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::row(vec![3.0, 0.0]), Tensor::row(vec![0.0, 4.0])];
        let before = clip_global_norm(&mut g, 2.5);
        assert_eq!(before, 5.0);
        assert!((g[0].values()[0] - 1.5).abs() < 1e-15);
        assert!((g[1].values()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig {
            lambda: 0.1 + 0.2,
            lr: 3e-7,
            hinge_mode: HingeMode::Standard,
            seed: 99,
            ..TrainConfig::default()
        };
        c.per_token_mean = true;
        let mut back = TrainConfig::default();
        for (k, v) in c.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(back.set("bogus", "1").is_err());
        assert!(back.set("lr", "abc").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { lambda: -1.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_streams_differ() {
        use rand::RngCore;
        let a = derived_rng(1, Stream::Shuffle, 1, 0).next_u64();
        let b = derived_rng(1, Stream::Shuffle, 2, 0).next_u64();
        let c = derived_rng(1, Stream::Negatives, 1, 0).next_u64();
        assert!(a != b && a != c);
        assert_eq!(a, derived_rng(1, Stream::Shuffle, 1, 0).next_u64());
    }
}
