//! The fine-tuning loop: online network trained by Adam, target network
//! following it by exponential moving average.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::augment::{make_training_batch, NegativePolicy, PositivePolicy, TrainingBatch};
use crate::encoder::{
    checkpoint, ema_update, init_target, load_pretrained, Depth, Encoder, EncoderConfig,
    NormMode, OnlineNetwork, TargetNetwork,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::rng::{self, Rng};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RUN_META_FILE: &str = "run_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_beta: f64,
    pub weights: LossWeights,
    pub use_np_loss: bool,
    /// Average the contrastive term over both view orders.
    pub symmetric_contrastive: bool,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 64,
            steps: 1000,
            ema_beta: 0.99,
            weights: LossWeights::default(),
            use_np_loss: true,
            symmetric_contrastive: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Checks ranges. `steps == 0` is allowed and yields the initial network.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta must lie in [0, 1], got {}", self.ema_beta));
        }
        self.weights.validate()
    }
}

/// Adam without weight decay. Moments are keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: usize,
}

impl Adam {
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update of every `Weight` entry of `net`. Weights without a gradient
    /// are treated as having a zero gradient.
    pub fn step(
        &mut self,
        net: &OnlineNetwork,
        grads: &candle_core::backprop::GradStore,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, var) in net.params().weights() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_detached_tensor().zeros_like()?,
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / c2)?.sqrt()? + cfg.adam_eps)?;
            let update = ((&m / c1)? / denom)?;
            let next = (var.as_detached_tensor() - (update * cfg.lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }
}

pub struct TrainState {
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    pub optimizer: Adam,
    pub step: usize,
    /// Stream that batch seeds are drawn from.
    pub rng: Rng,
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    /// State at step 0 with the target an exact copy of `online`.
    pub fn new(online: OnlineNetwork, seed: u64) -> Result<Self> {
        let target = init_target(&online)?;
        Ok(Self {
            online,
            target,
            optimizer: Adam::default(),
            step: 0,
            rng: rng::stream(seed, "batches", 0),
            history: Vec::new(),
        })
    }
}

fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    Ok(t.narrow(0, start, len)?)
}

/// Loss tensors for one batch, before any parameter update. `online` forward
/// passes are tracked and update head normalization buffers.
pub fn batch_losses(
    online: &OnlineNetwork,
    target: &TargetNetwork,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let b = batch.len();
    if batch.view1.len() != b || batch.view2.len() != b || batch.negatives.len() != b {
        return Err(Error::Contract("training batch parts differ in length".into()));
    }
    let train_mode = NormMode::Batch { update: true };
    let target_mode = NormMode::Batch { update: false };
    let cat = |parts: &[&[Image]]| {
        let refs: Vec<&Image> = parts.iter().flat_map(|p| p.iter()).collect();
        online.input_tensor(&refs)
    };

    // Backbone normalization is frozen, so stacking views into one pass is
    // equivalent to separate passes.
    let online_parts: Vec<&[Image]> = if cfg.use_np_loss {
        vec![&batch.view1, &batch.view2, &batch.negatives]
    } else {
        vec![&batch.view1, &batch.view2]
    };
    let x_online = cat(&online_parts)?;
    let f_online = online.forward(&x_online, Depth::Backbone, train_mode, true)?;
    let f1 = rows(&f_online, 0, b)?;
    let f2 = rows(&f_online, b, b)?;

    let target_parts: Vec<&[Image]> = if cfg.use_np_loss {
        vec![&batch.view1, &batch.view2, &batch.originals]
    } else {
        vec![&batch.view1, &batch.view2]
    };
    let x_target = cat(&target_parts)?;
    let f_target = target.forward(&x_target, Depth::Backbone, target_mode, false)?;
    let t1 = rows(&f_target, 0, b)?;
    let t2 = rows(&f_target, b, b)?;

    let q1 = online.head("predictor", &online.head("projector", &f1, train_mode, true)?, train_mode, true)?;
    let tg2 = target.head("projector", &t2, target_mode, false)?;
    let l_con = if cfg.symmetric_contrastive {
        let q2 = online.head("predictor", &online.head("projector", &f2, train_mode, true)?, train_mode, true)?;
        let tg1 = target.head("projector", &t1, target_mode, false)?;
        losses::symmetric_contrastive_loss(&q1, &tg2, &q2, &tg1)?
    } else {
        losses::contrastive_loss(&q1, &tg2)?
    };
    let l_pp = losses::cross_instance_pp_loss(&f1, &t2, &batch.pairing)?;
    let w = &cfg.weights;
    let mut total = (&l_con + (&l_pp * w.lambda_pp)?)?;
    let mut l_np_value = 0.0;
    if cfg.use_np_loss {
        let f_neg = rows(&f_online, 2 * b, b)?;
        let t_orig = rows(&f_target, 2 * b, b)?;
        let l_np = losses::negative_pair_loss(&t_orig, &f_neg)?;
        l_np_value = losses::scalar(&l_np)?;
        total = (total + (l_np * w.lambda_np)?)?;
    }
    let breakdown = LossBreakdown::new(
        losses::scalar(&l_con)?,
        losses::scalar(&l_pp)?,
        l_np_value,
        w,
    );
    Ok((total, breakdown))
}

/// One optimizer step on the online network followed by one EMA update of
/// the target.
pub fn training_step(
    state: &mut TrainState,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (total, breakdown) = batch_losses(&state.online, &state.target, batch, cfg)?;
    if !breakdown.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {}: l_con={} l_pp={} l_np={} l_total={}",
            state.step, breakdown.l_con, breakdown.l_pp, breakdown.l_np, breakdown.l_total
        )));
    }
    let grads = total.backward()?;
    state.optimizer.step(&state.online, &grads, cfg)?;
    ema_update(&mut state.target, &state.online, cfg.ema_beta)?;
    state.step += 1;
    state.history.push(breakdown);
    Ok(breakdown)
}

/// Draws the next batch from the state's stream.
pub fn next_batch(
    state: &mut TrainState,
    fewshot: &[Image],
    cfg: &TrainConfig,
    pos: &PositivePolicy,
    neg: &NegativePolicy,
) -> Result<TrainingBatch> {
    make_training_batch(fewshot, cfg.batch_size, pos, neg, &mut state.rng)
}

/// Fine-tunes from `load_pretrained(enc_cfg)` for `cfg.steps` steps.
/// `on_step` sees every step's losses; returning an error aborts.
pub fn train_with<F>(
    fewshot: &[Image],
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    pos: &PositivePolicy,
    neg: &NegativePolicy,
    mut on_step: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &LossBreakdown) -> Result<()>,
{
    cfg.validate()?;
    pos.validate()?;
    neg.validate()?;
    if fewshot.is_empty() {
        return Err(Error::Data("no few-shot training images".into()));
    }
    let online = load_pretrained(enc_cfg)?;
    let mut state = TrainState::new(online, cfg.seed)?;
    for _ in 0..cfg.steps {
        let batch = next_batch(&mut state, fewshot, cfg, pos, neg)?;
        let losses = training_step(&mut state, &batch, cfg)?;
        on_step(&state, &losses)?;
    }
    Ok(state)
}

pub fn train(
    fewshot: &[Image],
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    pos: &PositivePolicy,
    neg: &NegativePolicy,
) -> Result<TrainState> {
    train_with(fewshot, cfg, enc_cfg, pos, neg, |_, _| Ok(()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub steps: usize,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub positive: PositivePolicy,
    pub negative: NegativePolicy,
    pub encoder_config_hash: String,
    pub crate_version: String,
}

fn write_log_header(file: &mut std::fs::File, path: &Path) -> Result<()> {
    writeln!(file, "step,l_con,l_pp,l_np,l_total").map_err(|e| Error::io(path, e))
}

/// `train` plus artifacts in `out`: the final checkpoint, `train_log.csv`
/// (written as training proceeds) and `run_meta.json`.
pub fn train_to_dir(
    fewshot: &[Image],
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    pos: &PositivePolicy,
    neg: &NegativePolicy,
    out: &Path,
) -> Result<TrainState> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let meta = RunMeta {
        seed: cfg.seed,
        steps: cfg.steps,
        train: cfg.clone(),
        encoder: enc_cfg.clone(),
        positive: pos.clone(),
        negative: neg.clone(),
        encoder_config_hash: checkpoint::config_hash(enc_cfg),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let meta_path = out.join(RUN_META_FILE);
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write_log_header(&mut log, &log_path)?;
    let state = train_with(fewshot, cfg, enc_cfg, pos, neg, |state, l| {
        writeln!(log, "{},{},{},{},{}", state.step, l.l_con, l.l_pp, l.l_np, l.l_total)
            .map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            checkpoint::save(&out.join(format!("step_{:06}", state.step)), &state.online, cfg.seed, state.step)?;
        }
        Ok(())
    })?;
    checkpoint::save(out, &state.online, cfg.seed, state.step)?;
    Ok(state)
}

/// Reads a `train_log.csv` back into breakdowns.
pub fn read_train_log(path: &Path) -> Result<Vec<LossBreakdown>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{}: bad log row `{line}`: {e}", path.display())))?;
            match f.as_slice() {
                &[l_con, l_pp, l_np, l_total] => Ok(LossBreakdown {
                    l_con,
                    l_pp,
                    l_np,
                    l_total,
                }),
                _ => Err(Error::Data(format!("{}: bad log row `{line}`", path.display()))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
