//! Self-supervised training over object sequences and per-video test-time adaptation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, Checkpoint};
use crate::error::{ensure_contract, Error, Result};
use crate::evalkit::iou;
use crate::grid::{Field, Mask};
use crate::losses::{merge_bidirectional_t, sequence_loss, LossWeights};
use crate::model::{sigmoid, ParamState, SavosModel};
use crate::patch::{extract_all, stitch_predictions, ObjectSequence, SequenceBatch};
use crate::synthgen::VideoSample;

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub weights: LossWeights,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_steps: 1000,
            weights: LossWeights::default(),
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return fail(format!(
                "grad_clip must be non-negative, got {}",
                self.grad_clip
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return fail("Adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        self.weights.validate()
    }
}

/// Adam with bias correction. Moments live next to the parameters they follow.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(
        params: &[(String, Var)],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params
                .iter()
                .map(|(_, v)| zeros(v))
                .collect::<candle_core::Result<_>>()?,
            v: params
                .iter()
                .map(|(_, v)| zeros(v))
                .collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update; `grads[i]` belongs to `params[i]` (`None` means zero).
    pub fn apply(&mut self, params: &[(String, Var)], grads: &[Option<Tensor>]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, ((_, var), g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else {
                self.m[i] = self.m[i].affine(self.beta1, 0.0)?;
                self.v[i] = self.v[i].affine(self.beta2, 0.0)?;
                continue;
            };
            let g = g.detach();
            self.m[i] = (self.m[i].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            self.v[i] =
                (self.v[i].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let m_hat = self.m[i].affine(1.0 / c1, 0.0)?;
            let v_hat = self.v[i].affine(1.0 / c2, 0.0)?;
            let update = (m_hat / v_hat.sqrt()?.affine(1.0, self.eps)?)?.affine(self.lr, 0.0)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }

    pub fn state(&self, params: &[(String, Var)]) -> Result<AdamState> {
        let host = |ts: &[Tensor]| -> Result<ParamState> {
            params
                .iter()
                .zip(ts)
                .map(|((n, _), t)| {
                    Ok((
                        n.clone(),
                        (
                            t.dims().to_vec(),
                            t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
                        ),
                    ))
                })
                .collect()
        };
        Ok(AdamState {
            step: self.step,
            m: host(&self.m)?,
            v: host(&self.v)?,
        })
    }

    pub fn load_state(&mut self, params: &[(String, Var)], state: &AdamState) -> Result<()> {
        let dev = |t: &Tensor| (t.device().clone(), t.dtype());
        for (i, (name, _)) in params.iter().enumerate() {
            for (store, src) in [(&mut self.m, &state.m), (&mut self.v, &state.v)] {
                let (dims, data) = src
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("optimizer state lacks {name}")))?;
                ensure_contract!(
                    dims.as_slice() == store[i].dims(),
                    "optimizer state shape mismatch for {name}"
                );
                let (device, dtype) = dev(&store[i]);
                store[i] =
                    Tensor::from_vec(data.clone(), dims.as_slice(), &device)?.to_dtype(dtype)?;
            }
        }
        self.step = state.step;
        Ok(())
    }
}

/// Scalar loss of one batch together with its logged components.
pub struct BatchLoss {
    pub total: Tensor,
    pub l_m: f64,
    pub l_c: f64,
}

/// Per-frame predictions of both directions for a batch.
pub struct Bidirectional {
    /// `[t]`: `[N, 1, P, P]` merged amodal probability in original frame order.
    pub merged: Vec<Tensor>,
    /// Forward masks/motions in original order followed by backward ones in reversed order,
    /// stacked along the batch axis: `[t]`: `[2N, ...]`.
    pub masks: Vec<Tensor>,
    pub motions: Vec<Tensor>,
}

/// Runs both temporal directions in one batched rollout and merges them per frame.
pub fn bidirectional(
    model: &SavosModel,
    batch: &SequenceBatch,
) -> Result<(Bidirectional, SequenceBatch)> {
    let n = batch.batch_size();
    let t_len = batch.len();
    let both = batch.concat(&batch.reversed()?)?;
    let preds = model.rollout(&both)?;
    let masks = preds
        .iter()
        .map(|p| sigmoid(&p.mask_logits))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let motions: Vec<Tensor> = preds.iter().map(|p| p.amodal_motion.clone()).collect();
    let merged = (0..t_len)
        .map(|t| {
            let (f, b) = (t, t_len - 1 - t);
            merge_bidirectional_t(
                &masks[f].narrow(0, 0, n)?,
                &preds[f].alpha_logit.narrow(0, 0, n)?,
                &masks[b].narrow(0, n, n)?,
                &preds[b].alpha_logit.narrow(0, n, n)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Bidirectional {
            merged,
            masks,
            motions,
        },
        both,
    ))
}

/// Mean over sequences of `0.5 (L_fwd + L_bwd) + 0.5 (L_merged,fwd + L_merged,bwd)`, where each
/// term is the total loss with the direction's own motion predictions.
pub fn batch_loss(model: &SavosModel, batch: &SequenceBatch, lw: LossWeights) -> Result<BatchLoss> {
    let t_len = batch.len();
    let (out, both) = bidirectional(model, batch)?;
    let direct = sequence_loss(&out.masks, &out.motions, &both.visible, &both.weight, lw)?;
    let merged_both = (0..t_len)
        .map(|t| {
            Ok(Tensor::cat(
                &[&out.merged[t], &out.merged[t_len - 1 - t]],
                0,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = sequence_loss(&merged_both, &out.motions, &both.visible, &both.weight, lw)?;
    let half_mean = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        Ok(((a.mean_all()? + b.mean_all()?)? * 0.5)?)
    };
    let total = half_mean(&direct.total, &merged.total)?;
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    Ok(BatchLoss {
        total,
        l_m: scalar(half_mean(&direct.l_m, &merged.l_m)?)?,
        l_c: scalar(half_mean(&direct.l_c, &merged.l_c)?)?,
    })
}

/// Gradients aligned with `model.params()` and their global L2 norm.
pub fn gradients(model: &SavosModel, loss: &Tensor) -> Result<(Vec<Option<Tensor>>, f64)> {
    let store: GradStore = loss.backward()?;
    let grads: Vec<Option<Tensor>> = model
        .params()
        .iter()
        .map(|(_, v)| store.get(v.as_tensor()).cloned())
        .collect();
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g
            .sqr()?
            .sum_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
    }
    Ok((grads, sq.sqrt()))
}

fn clip(grads: Vec<Option<Tensor>>, norm: f64, max_norm: f64) -> Result<Vec<Option<Tensor>>> {
    if max_norm <= 0.0 || norm <= max_norm {
        return Ok(grads);
    }
    let s = max_norm / norm;
    grads
        .into_iter()
        .map(|g| g.map(|g| g.affine(s, 0.0)).transpose().map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_m: f64,
    pub l_c: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "step,l_m,l_c,total,grad_norm,wall_time";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.step, self.l_m, self.l_c, self.total, self.grad_norm, self.wall_time
        )
    }
}

/// Deterministic batch schedule: one seeded permutation per epoch.
fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size);
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    order.shuffle(&mut rng);
    order[within * batch_size..((within + 1) * batch_size).min(n)].to_vec()
}

pub struct Trainer {
    pub model: SavosModel,
    pub cfg: TrainConfig,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(model: SavosModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(
            model.params(),
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        )?;
        Ok(Self {
            model,
            cfg,
            adam,
            step: 0,
        })
    }

    /// Continues from a checkpoint, including optimizer moments when present.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, device: &Device) -> Result<Self> {
        let model = ckpt.build_model(device, DType::F32)?;
        let mut t = Self::new(model, cfg)?;
        if let Some(adam) = &ckpt.adam {
            t.adam.load_state(t.model.params(), adam)?;
        }
        t.step = ckpt.step as usize;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_model(
            &self.model,
            self.step as u64,
            Some(self.adam.state(self.model.params())?),
        )
    }

    /// One optimizer update on `batch`. A non-finite loss or gradient leaves the
    /// parameters untouched and reports the step.
    pub fn train_step(&mut self, batch: &SequenceBatch) -> Result<LogRow> {
        let start = Instant::now();
        let loss = batch_loss(&self.model, batch, self.cfg.weights)?;
        let total = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let step = self.step + 1;
        if !total.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let (grads, norm) = gradients(&self.model, &loss.total)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let grads = clip(grads, norm, self.cfg.grad_clip)?;
        self.adam.apply(self.model.params(), &grads)?;
        self.step = step;
        Ok(LogRow {
            step,
            l_m: loss.l_m,
            l_c: loss.l_c,
            total,
            grad_norm: norm,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs until `cfg.max_steps`. With `out_dir`, appends to the CSV log and writes
    /// checkpoints at the configured cadence plus one at the end. On a non-finite loss
    /// the last written checkpoint is left in place and the error is returned.
    pub fn fit(
        &mut self,
        sequences: &[ObjectSequence],
        out_dir: Option<&Path>,
    ) -> Result<Vec<LogRow>> {
        ensure_contract!(!sequences.is_empty(), "training set is empty");
        let device = self.model.device().clone();
        let dtype = self.model.dtype();
        let mut log_file = match out_dir {
            Some(dir) => Some(open_log(dir, self.step)?),
            None => None,
        };
        let mut rows = Vec::new();
        let mut elapsed = 0.0;
        while self.step < self.cfg.max_steps {
            let idx = batch_indices(
                sequences.len(),
                self.cfg.batch_size,
                self.cfg.seed,
                self.step,
            );
            let refs: Vec<&ObjectSequence> = idx.iter().map(|&i| &sequences[i]).collect();
            let batch = SequenceBatch::from_sequences(&refs, &device, dtype)?;
            let mut row = self.train_step(&batch)?;
            elapsed += row.wall_time;
            row.wall_time = elapsed;
            log::debug!(
                "step {} total {:.5} l_m {:.5} l_c {:.5}",
                row.step,
                row.total,
                row.l_m,
                row.l_c
            );
            if let Some((path, f)) = log_file.as_mut() {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            rows.push(row);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0
                    && self.step.is_multiple_of(self.cfg.checkpoint_every)
                {
                    self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(rows)
    }
}

fn open_log(dir: &Path, step: usize) -> Result<(PathBuf, fs::File)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let fresh = step == 0 || !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if fresh {
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, f))
}

/// Object sequences of every video, in video-then-object order.
pub fn dataset_sequences(videos: &[VideoSample], patch_size: usize) -> Result<Vec<ObjectSequence>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(extract_all(v, patch_size)?);
    }
    Ok(out)
}

/// Merged amodal probabilities per sequence and frame: `[n][t]`.
pub fn predict_patches(
    model: &SavosModel,
    sequences: &[ObjectSequence],
) -> Result<Vec<Vec<Field>>> {
    ensure_contract!(!sequences.is_empty(), "nothing to predict");
    let refs: Vec<&ObjectSequence> = sequences.iter().collect();
    let batch = SequenceBatch::from_sequences(&refs, model.device(), model.dtype())?;
    let (out, _) = bidirectional(model, &batch)?;
    let p = model.config().patch_size;
    let t_len = batch.len();
    let frames: Vec<Vec<f32>> = out
        .merged
        .iter()
        .map(|m| Ok(m.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?))
        .collect::<Result<_>>()?;
    (0..sequences.len())
        .map(|i| {
            (0..t_len)
                .map(|t| Field::from_vec(p, p, frames[t][i * p * p..(i + 1) * p * p].to_vec()))
                .collect()
        })
        .collect()
}

/// Canvas amodal masks `[t][k]` for one video from its own sequences.
pub fn predict_video_from(
    model: &SavosModel,
    sample: &VideoSample,
    sequences: &[ObjectSequence],
) -> Result<Vec<Vec<Mask>>> {
    let probs = predict_patches(model, sequences)?;
    let canvas = sample.canvas();
    let per_object = sequences
        .iter()
        .zip(&probs)
        .map(|(s, p)| {
            let geometry: Vec<_> = s.frames.iter().map(|f| f.geometry).collect();
            stitch_predictions(p, &geometry, canvas)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..sample.num_frames())
        .map(|t| per_object.iter().map(|o| o[t].clone()).collect())
        .collect())
}

pub fn predict_video(model: &SavosModel, sample: &VideoSample) -> Result<Vec<Vec<Mask>>> {
    let seqs = extract_all(sample, model.config().patch_size)?;
    predict_video_from(model, sample, &seqs)
}

pub fn predict_dataset(model: &SavosModel, videos: &[VideoSample]) -> Result<Vec<Vec<Vec<Mask>>>> {
    videos.iter().map(|v| predict_video(model, v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub stop_delta: f64,
    pub stop_window: usize,
    pub weights: LossWeights,
    pub grad_clip: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            max_iters: 50,
            stop_delta: 0.01,
            stop_window: 10,
            weights: LossWeights::default(),
            grad_clip: 1.0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "TTA learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.stop_window == 0 {
            return Err(Error::Config("stop_window must be at least 1".into()));
        }
        if self.stop_delta.is_nan() || self.stop_delta < 0.0 {
            return Err(Error::Config(format!(
                "stop_delta must be non-negative, got {}",
                self.stop_delta
            )));
        }
        self.weights.validate()
    }
}

/// `trace[i]` is the visible IoU after `i` iterations (`trace[0]` before any update).
/// Stops once the gain over the last `window` iterations is below `delta`.
pub fn should_stop(trace: &[f64], delta: f64, window: usize) -> bool {
    let Some(i) = trace.len().checked_sub(1) else {
        return false;
    };
    i >= window && trace[i] - trace[i - window] < delta
}

/// Mean over frames and objects of the IoU between prediction and visible mask on
/// visible pixels.
pub fn visible_iou(predictions: &[Vec<Mask>], visible: &[Vec<Mask>]) -> Result<f64> {
    ensure_contract!(
        predictions.len() == visible.len(),
        "prediction and visible frames differ"
    );
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, v) in predictions.iter().zip(visible) {
        ensure_contract!(p.len() == v.len(), "prediction and visible objects differ");
        for (pm, vm) in p.iter().zip(v) {
            sum += iou(pm, vm, Some(vm))?;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Clone, Debug)]
pub struct TtaOutcome {
    pub before: Vec<Vec<Mask>>,
    /// Predictions at the stopping iterate (equal to `before` when adaptation failed).
    pub after: Vec<Vec<Mask>>,
    pub iterations: usize,
    pub visible_iou: Vec<f64>,
    pub losses: Vec<f64>,
    pub stopped_early: bool,
    pub warning: Option<String>,
}

/// Adapts a copy of `model` to one video; `model` itself is never modified.
pub fn test_time_adapt(
    model: &SavosModel,
    sample: &VideoSample,
    cfg: &TtaConfig,
) -> Result<TtaOutcome> {
    test_time_adapt_observed(model, sample, cfg, |_, _| {})
}

/// [`test_time_adapt`] that also hands the canvas predictions after every iteration
/// (iteration 0 = before adaptation) to `observe`.
pub fn test_time_adapt_observed(
    model: &SavosModel,
    sample: &VideoSample,
    cfg: &TtaConfig,
    mut observe: impl FnMut(usize, &[Vec<Mask>]),
) -> Result<TtaOutcome> {
    cfg.validate()?;
    let work = model.duplicate()?;
    let seqs = extract_all(sample, work.config().patch_size)?;
    let refs: Vec<&ObjectSequence> = seqs.iter().collect();
    let batch = SequenceBatch::from_sequences(&refs, work.device(), work.dtype())?;
    let mut adam = Adam::new(work.params(), cfg.learning_rate, 0.9, 0.999, 1e-8)?;

    let before = predict_video_from(&work, sample, &seqs)?;
    observe(0, &before);
    let mut trace = vec![visible_iou(&before, &sample.visible)?];
    let mut after = before.clone();
    let mut losses = Vec::new();
    let mut iterations = 0;
    let mut stopped_early = false;
    while iterations < cfg.max_iters {
        let loss = batch_loss(&work, &batch, cfg.weights)?;
        let total = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let step = gradients(&work, &loss.total).and_then(|(g, norm)| {
            if total.is_finite() && norm.is_finite() {
                Ok(Some(clip(g, norm, cfg.grad_clip)?))
            } else {
                Ok(None)
            }
        })?;
        let Some(grads) = step else {
            log::warn!(
                "test-time adaptation hit a non-finite loss at iteration {}",
                iterations + 1
            );
            return Ok(TtaOutcome {
                after: before.clone(),
                before,
                iterations,
                visible_iou: trace,
                losses,
                stopped_early: false,
                warning: Some(format!("non-finite loss at iteration {}", iterations + 1)),
            });
        };
        adam.apply(work.params(), &grads)?;
        losses.push(total);
        iterations += 1;
        after = predict_video_from(&work, sample, &seqs)?;
        observe(iterations, &after);
        trace.push(visible_iou(&after, &sample.visible)?);
        if should_stop(&trace, cfg.stop_delta, cfg.stop_window) {
            stopped_early = iterations < cfg.max_iters;
            break;
        }
    }
    Ok(TtaOutcome {
        before,
        after,
        iterations,
        visible_iou: trace,
        losses,
        stopped_early,
        warning: None,
    })
}
