//! Online training: cross-entropy in bits, Adam, and batched loops for the
//! character stream and the copy task.
//!
//! A batch is `B` independent sequences, each with its own hidden state,
//! estimator state and random stream. They share one parameter vector that is
//! updated with the mean of the per-sequence gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{forward, jacobians, one_hot, output_logits, CellParams};
use crate::error::{invalid, Error, Result};
use crate::estimators::{Estimator, EstimatorKind};
use crate::linalg::{axpy, RngHandle};
use crate::tasks::{gen_copy_batch, BatchSource, CopyCurriculum};

/// Learning rates tried per configuration.
pub const LR_GRID: [f64; 4] = [3.162_277_660_168_379_4e-3, 1e-3, 3.162_277_660_168_379_4e-4, 1e-4];

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub reset_prob: f64,
    #[serde(default)]
    pub seed: u64,
    pub max_steps: usize,
}

impl TrainConfig {
    pub fn new(estimator: EstimatorKind, learning_rate: f64, max_steps: usize) -> Self {
        TrainConfig {
            estimator,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch: default_batch(),
            reset_prob: 0.0,
            seed: 0,
            max_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return invalid(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.reset_prob) {
            return invalid(format!("reset probability must lie in [0, 1], got {}", self.reset_prob));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("Adam eps must be positive");
        }
        if self.batch == 0 {
            return invalid("batch must be at least 1");
        }
        Ok(())
    }
}

/// One output row: `(step, estimator, metric, value, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub step: u64,
    pub estimator: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// `-log2 softmax(logits)[target]` and its gradient with respect to the logits.
pub fn xent_loss_and_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return invalid(format!("target {target} out of range for {} classes", logits.len()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let nats = -(logits[target] - max - total.ln());
    let inv_ln2 = std::f64::consts::LOG2_E;
    let mut grad: Vec<f64> = probs.iter().map(|p| p * inv_ln2).collect();
    grad[target] -= inv_ln2;
    Ok((nats * inv_ln2, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1, beta2, eps }
    }

    pub fn for_config(len: usize, cfg: &TrainConfig) -> Self {
        AdamState::new(len, cfg.beta1, cfg.beta2, cfg.eps)
    }
}

/// Bias-corrected Adam step on `theta`.
pub fn adam_update(state: &mut AdamState, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if grad.len() != theta.len() || state.m.len() != theta.len() {
        return invalid(format!(
            "Adam shapes differ: theta {}, grad {}, state {}",
            theta.len(),
            grad.len(),
            state.m.len()
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        theta[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// One batch element: its hidden state, estimator and random stream.
pub struct Lane {
    pub state: Vec<f64>,
    pub estimator: Box<dyn Estimator>,
    pub rng: RngHandle,
}

impl Lane {
    /// Zero state and `t = 0` estimator. Returns any gradient the estimator
    /// was still holding.
    pub fn reset(&mut self) -> Result<Option<Vec<f64>>> {
        let pending = self.estimator.flush()?;
        self.estimator.reset();
        self.state.iter_mut().for_each(|x| *x = 0.0);
        Ok(pending)
    }
}

/// What one lane contributes at one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaneGrad {
    /// Loss in bits, if the step carried a target.
    pub loss: Option<f64>,
    /// Recurrent gradient, if the estimator produced one.
    pub recurrent: Option<Vec<f64>>,
    /// Readout gradient, if the step carried a target.
    pub readout: Option<Vec<f64>>,
}

impl LaneGrad {
    fn merge_recurrent(&mut self, g: Vec<f64>) {
        match self.recurrent.as_mut() {
            Some(r) => axpy(1.0, &g, r),
            None => self.recurrent = Some(g),
        }
    }
}

/// Advances one lane by one symbol.
pub fn lane_step(params: &CellParams, lane: &mut Lane, input: usize, target: Option<usize>) -> Result<LaneGrad> {
    if input >= params.m {
        return invalid(format!("input symbol {input} out of range for width {}", params.m));
    }
    let x = one_hot(input, params.m);
    let trace = forward(params, &lane.state, &x)?;
    let jac = jacobians(params, &trace);
    lane.estimator.step(&jac, &trace.hhat, &mut lane.rng)?;
    lane.state.copy_from_slice(&trace.state_next);

    let mut dstate = vec![0.0; params.state_size()];
    let mut out = LaneGrad::default();
    if let Some(tgt) = target {
        let h = trace.h_next();
        let logits = output_logits(params, h)?;
        let (loss, dlogits) = xent_loss_and_grad(&logits, tgt)?;
        let vocab = params.vocab;
        let mut readout = vec![0.0; params.readout_len()];
        for (j, &hj) in h.iter().enumerate() {
            axpy(hj, &dlogits, &mut readout[j * vocab..(j + 1) * vocab]);
        }
        let dh = params.w_out.mul_vec(&dlogits)?;
        let off = params.arch.hidden_offset(params.n);
        dstate[off..off + params.n].copy_from_slice(&dh);
        out.loss = Some(loss);
        out.readout = Some(readout);
    }
    out.recurrent = lane.estimator.gradient(&dstate)?;
    Ok(out)
}

/// Shared parameters, optimizer and per-sequence lanes.
pub struct Trainer {
    pub params: CellParams,
    pub adam: AdamState,
    pub lanes: Vec<Lane>,
    pub config: TrainConfig,
    reset_rngs: Vec<RngHandle>,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: CellParams) -> Result<Self> {
        config.validate()?;
        let base = RngHandle::new(config.seed);
        let lanes = (0..config.batch)
            .map(|i| {
                Ok(Lane {
                    state: params.zero_state(),
                    estimator: config.estimator.build(&params)?,
                    rng: base.child(2 * i as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let reset_rngs = (0..config.batch).map(|i| base.child(2 * i as u64 + 1)).collect();
        let adam = AdamState::for_config(params.recurrent_len() + params.readout_len(), &config);
        Ok(Trainer { params, adam, lanes, config, reset_rngs })
    }

    /// Runs every lane that has an input. Does not touch the parameters.
    ///
    /// `inputs[i]` is `None` for lanes that sit this step out.
    pub fn compute(&mut self, inputs: &[Option<(usize, Option<usize>)>]) -> Result<Vec<Option<LaneGrad>>> {
        if inputs.len() != self.lanes.len() {
            return invalid(format!("got {} inputs for {} lanes", inputs.len(), self.lanes.len()));
        }
        let params = &self.params;
        self.lanes
            .par_iter_mut()
            .zip(inputs.par_iter())
            .map(|(lane, inp)| match *inp {
                Some((x, y)) => lane_step(params, lane, x, y).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    /// Averages the lane gradients over the batch and takes one Adam step.
    ///
    /// Returns `false` (and leaves the optimizer untouched) when the summed
    /// gradient is exactly zero.
    pub fn apply(&mut self, grads: &[Option<LaneGrad>]) -> Result<bool> {
        let p = self.params.recurrent_len();
        let mut total = vec![0.0; p + self.params.readout_len()];
        for g in grads.iter().flatten() {
            if let Some(r) = &g.recurrent {
                axpy(1.0, r, &mut total[..p]);
            }
            if let Some(r) = &g.readout {
                axpy(1.0, r, &mut total[p..]);
            }
        }
        if total.iter().all(|&x| x == 0.0) {
            return Ok(false);
        }
        let scale = 1.0 / self.lanes.len() as f64;
        total.iter_mut().for_each(|x| *x *= scale);
        let mut theta = self.params.flat();
        adam_update(&mut self.adam, &mut theta, &total, self.config.learning_rate)?;
        self.params.set_flat(&theta)?;
        Ok(true)
    }

    /// Draws the per-lane reset decisions for this step and applies them.
    /// Gradients buffered by a reset lane are folded into `pending`.
    fn random_resets(&mut self, pending: &mut [Option<LaneGrad>]) -> Result<()> {
        let prob = self.config.reset_prob;
        if prob <= 0.0 {
            return Ok(());
        }
        for ((lane, rng), slot) in self.lanes.iter_mut().zip(&mut self.reset_rngs).zip(pending.iter_mut()) {
            if rng.bernoulli(prob) {
                if let Some(g) = lane.reset()? {
                    slot.get_or_insert_with(LaneGrad::default).merge_recurrent(g);
                }
            }
        }
        Ok(())
    }

    /// Resets every lane; returns the buffered gradients.
    pub fn reset_all(&mut self) -> Result<Vec<Option<LaneGrad>>> {
        self.lanes
            .iter_mut()
            .map(|lane| {
                Ok(lane.reset()?.map(|g| LaneGrad { recurrent: Some(g), ..LaneGrad::default() }))
            })
            .collect()
    }
}

fn mean_loss(grads: &[Option<LaneGrad>]) -> Option<f64> {
    let losses: Vec<f64> = grads.iter().flatten().filter_map(|g| g.loss).collect();
    if losses.is_empty() {
        None
    } else {
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

fn merge_lane(into: &mut Option<LaneGrad>, from: Option<LaneGrad>) {
    let Some(from) = from else { return };
    match into {
        None => *into = Some(from),
        Some(g) => {
            if let Some(r) = from.recurrent {
                g.merge_recurrent(r);
            }
            if from.readout.is_some() {
                g.readout = from.readout;
                g.loss = from.loss;
            }
        }
    }
}

/// Online training on a symbol stream. Emits one `bpc` record per step.
pub fn train_stream(config: &TrainConfig, cell: &mut CellParams, stream: &mut dyn BatchSource) -> Result<Vec<ExperimentRecord>> {
    train_stream_with(config, cell, stream, |_, _| Ok(Vec::new()))
}

/// [`train_stream`] with an observer called after every step; its records
/// are appended to the output.
pub fn train_stream_with<F>(
    config: &TrainConfig,
    cell: &mut CellParams,
    stream: &mut dyn BatchSource,
    mut observer: F,
) -> Result<Vec<ExperimentRecord>>
where
    F: FnMut(u64, &CellParams) -> Result<Vec<ExperimentRecord>>,
{
    if stream.lanes() != config.batch {
        return invalid(format!("stream has {} lanes, batch is {}", stream.lanes(), config.batch));
    }
    let mut trainer = Trainer::new(config.clone(), cell.clone())?;
    let label = config.estimator.label();
    let mut records = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps as u64 {
        let Some(batch) = stream.next_batch() else { break };
        let mut pending: Vec<Option<LaneGrad>> = vec![None; config.batch];
        trainer.random_resets(&mut pending)?;
        let inputs: Vec<_> = batch.iter().map(|&(x, y)| Some((x, Some(y)))).collect();
        let grads = trainer.compute(&inputs)?;
        for (slot, g) in pending.iter_mut().zip(grads) {
            merge_lane(slot, g);
        }
        trainer.apply(&pending)?;
        if let Some(l) = mean_loss(&pending) {
            records.push(ExperimentRecord {
                step,
                estimator: label.clone(),
                metric: "bpc".into(),
                value: l,
                seed: config.seed,
            });
        }
        records.extend(observer(step, &trainer.params)?);
    }
    *cell = trainer.params;
    Ok(records)
}

/// Mean loss in bits of `params` over `steps` batches, with no learning.
pub fn evaluate_bpc(params: &CellParams, stream: &mut dyn BatchSource, steps: usize) -> Result<f64> {
    let mut states = vec![params.zero_state(); stream.lanes()];
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..steps {
        let Some(batch) = stream.next_batch() else { break };
        for (state, &(x, y)) in states.iter_mut().zip(&batch) {
            let trace = forward(params, state, &one_hot(x, params.m))?;
            let logits = output_logits(params, trace.h_next())?;
            total += xent_loss_and_grad(&logits, y)?.0;
            count += 1;
            *state = trace.state_next;
        }
    }
    if count == 0 {
        return invalid("evaluation stream yielded no symbols");
    }
    Ok(total / count as f64)
}

/// One row of copy-task output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyRecord {
    pub step: u64,
    #[serde(rename = "T")]
    pub t: usize,
    pub bits_per_char: f64,
    pub estimator: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyOutcome {
    /// One row per batch of sequences.
    pub records: Vec<CopyRecord>,
    /// Curriculum length after the last batch.
    pub final_t: usize,
    /// Largest length whose window was passed, i.e. `final_t - 1`, or 0.
    pub max_solved: usize,
}

impl CopyOutcome {
    pub fn to_experiment_records(&self) -> Vec<ExperimentRecord> {
        self.records
            .iter()
            .flat_map(|r| {
                [("T", r.t as f64), ("bits_per_char", r.bits_per_char)].map(|(metric, value)| ExperimentRecord {
                    step: r.step,
                    estimator: r.estimator.clone(),
                    metric: metric.into(),
                    value,
                    seed: r.seed,
                })
            })
            .collect()
    }
}

/// Copy-task training with a length curriculum.
///
/// Each of the `max_steps` iterations draws `batch` sequences, runs them in
/// lockstep from a reset state, and feeds the batch's mean reconstruction
/// error (bits/char) to the curriculum.
pub fn train_copy(config: &TrainConfig, cell: &mut CellParams, curriculum: &mut CopyCurriculum) -> Result<CopyOutcome> {
    if cell.m != crate::tasks::symbol::COUNT || cell.vocab != crate::tasks::symbol::COUNT {
        return invalid("copy task needs input and output width equal to the alphabet size");
    }
    let mut trainer = Trainer::new(config.clone(), cell.clone())?;
    let mut data_rng = RngHandle::new(config.seed).child(u64::MAX - 1);
    let label = config.estimator.label();
    let mut records = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps as u64 {
        if curriculum.reached_target() {
            break;
        }
        let samples = gen_copy_batch(curriculum, config.batch, &mut data_rng)?;
        trainer.reset_all()?;
        let longest = samples.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut lane_loss = vec![0.0; samples.len()];
        let mut lane_count = vec![0usize; samples.len()];
        for t in 0..longest {
            let inputs: Vec<_> = samples
                .iter()
                .map(|s| (t < s.len()).then(|| (s.inputs[t], s.mask[t].then_some(s.targets[t]))))
                .collect();
            let mut grads = trainer.compute(&inputs)?;
            for (i, s) in samples.iter().enumerate() {
                if let Some(g) = grads[i].as_mut() {
                    if let Some(l) = g.loss {
                        lane_loss[i] += l;
                        lane_count[i] += 1;
                    }
                    if t + 1 == s.len() {
                        if let Some(r) = trainer.lanes[i].estimator.flush()? {
                            g.merge_recurrent(r);
                        }
                    }
                }
            }
            trainer.apply(&grads)?;
        }
        let bpc = lane_loss.iter().zip(&lane_count).map(|(l, &c)| l / c as f64).sum::<f64>() / samples.len() as f64;
        let level = curriculum.t;
        curriculum.update(bpc)?;
        records.push(CopyRecord { step, t: level, bits_per_char: bpc, estimator: label.clone(), seed: config.seed });
    }
    *cell = trainer.params;
    let final_t = curriculum.t;
    Ok(CopyOutcome { records, final_t, max_solved: final_t.saturating_sub(1) })
}
