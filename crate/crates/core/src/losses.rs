//! Self-supervised objectives: occlusion-weighted mask loss, amodal consistency
//! loss, their weighted total and the bidirectional alpha merge.
//!
//! The tensor functions are the training path. The grid functions wrap them (or
//! mirror them on plain data) for evaluation, diagnostics and tests.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::grid::{Field, Mask};
use crate::warp::{warp_tensor, FlowField};

/// Probability clamp applied before taking logarithms in the BCE.
pub const BCE_EPS: f64 = 1e-6;
const IOU_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with positive sum, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// `d_M` and `d_C` for the prediction targeting frame `t` of object `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostic {
    pub t: usize,
    pub k: usize,
    pub d_m: f64,
    pub d_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub per_frame: Vec<FrameDiagnostic>,
}

/// Per-frame mask prediction and amodal motion towards the next frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub mask: Field,
    pub motion: FlowField,
}

/// `W = (1 - sum_i V^i) + V^k`: zero on pixels visible to any other object.
pub fn occlusion_weight(visible: &[Mask], k: usize) -> Result<Field> {
    ensure_contract!(k < visible.len(), "object index {k} out of range");
    let shape = visible[k].shape();
    ensure_contract!(
        visible.iter().all(|v| v.shape() == shape && v.is_binary()),
        "visible masks must be binary with a common shape"
    );
    let (h, w) = shape;
    let mut total = vec![0u32; h * w];
    for v in visible {
        for (acc, &b) in total.iter_mut().zip(v.data()) {
            *acc += b as u32;
        }
    }
    ensure_contract!(total.iter().all(|&c| c <= 1), "visible masks overlap");
    let own = visible[k].data();
    Field::from_vec(
        h,
        w,
        total
            .iter()
            .zip(own)
            .map(|(&s, &o)| (1.0 - s as f32) + o as f32)
            .collect(),
    )
}

/// Mean over pixels of `weight * BCE(pred, target)` with `pred` clamped to
/// `[eps, 1 - eps]`.
pub fn masked_bce(pred: &Field, target: &Mask, weight: &Field) -> Result<f64> {
    ensure_contract!(
        pred.shape() == target.shape() && pred.shape() == weight.shape(),
        "masked_bce shapes differ"
    );
    let n = pred.data().len();
    let mut acc = 0.0f64;
    for ((&p, &t), &w) in pred.data().iter().zip(target.data()).zip(weight.data()) {
        if w == 0.0 {
            continue;
        }
        let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
        let t = t as f64;
        acc += w as f64 * -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    Ok(acc / n as f64)
}

/// Soft IoU distance `1 - sum(a b) / sum(a + b - a b)`, zero for two empty fields.
pub fn soft_iou_distance(a: &Field, b: &Field) -> Result<f64> {
    ensure_contract!(a.shape() == b.shape(), "soft_iou_distance shapes differ");
    let in_unit = |f: &Field| f.data().iter().all(|&v| (0.0..=1.0).contains(&v));
    ensure_contract!(
        in_unit(a) && in_unit(b),
        "soft IoU inputs must lie in [0, 1]"
    );
    let mut inter = 0.0f64;
    let mut union = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        inter += x * y;
        union += x + y - x * y;
    }
    if union == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - inter / union)
}

/// Per-sample masked BCE over `[N, 1, H, W]` tensors, returned as `[N]`.
pub fn masked_bce_t(pred: &Tensor, target: &Tensor, weight: &Tensor) -> Result<Tensor> {
    ensure_contract!(
        pred.dims() == target.dims() && pred.dims() == weight.dims(),
        "masked_bce shapes differ: {:?} {:?} {:?}",
        pred.dims(),
        target.dims(),
        weight.dims()
    );
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    let bce = (pos + neg)?.neg()?;
    Ok((bce * weight)?.flatten_from(1)?.mean(D::Minus1)?)
}

/// Per-sample soft IoU distance over `[N, 1, H, W]` tensors, returned as `[N]`.
pub fn soft_iou_distance_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_contract!(a.dims() == b.dims(), "soft IoU shapes differ");
    let prod = (a * b)?;
    let inter = prod.flatten_from(1)?.sum(D::Minus1)?;
    let union = ((a + b)? - &prod)?.flatten_from(1)?.sum(D::Minus1)?;
    Ok(((&union - inter)? / union.affine(1.0, IOU_EPS)?)?)
}

/// Loss terms of a batch of per-object sequences, each `[N]` (summed over frames).
pub struct SequenceLoss {
    pub total: Tensor,
    pub l_m: Tensor,
    pub l_c: Tensor,
    /// `d_M` per target frame `t = 1..T`, each `[N]`.
    pub d_m: Vec<Tensor>,
    /// `d_C` per frame `t = 1..T`, each `[N]`.
    pub d_c: Vec<Tensor>,
}

/// Mask and consistency losses of per-object sequences.
///
/// `masks[t]`, `targets[t]`, `weights[t]`: `[N, 1, H, W]`; `motions[t]`: `[N, 2, H, W]`
/// (motion from `t` to `t + 1`; the last entry is unused).
pub fn sequence_loss(
    masks: &[Tensor],
    motions: &[Tensor],
    targets: &[Tensor],
    weights: &[Tensor],
    lw: LossWeights,
) -> Result<SequenceLoss> {
    let t_len = masks.len();
    ensure_contract!(t_len >= 2, "need at least two frames, got {t_len}");
    ensure_contract!(
        motions.len() >= t_len - 1 && targets.len() == t_len && weights.len() == t_len,
        "predictions and targets are not aligned"
    );
    let mut d_m = Vec::with_capacity(t_len - 1);
    let mut d_c = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let warped = warp_tensor(&masks[t], &motions[t])?;
        d_m.push(masked_bce_t(&warped, &targets[t + 1], &weights[t + 1])?);
        d_c.push(soft_iou_distance_t(&masks[t + 1], &warped)?);
    }
    let l_m = Tensor::stack(&d_m, 0)?.sum(0)?;
    let l_c = Tensor::stack(&d_c, 0)?.sum(0)?;
    let total = (l_m.affine(lw.lambda1, 0.0)? + l_c.affine(lw.lambda2, 0.0)?)?;
    Ok(SequenceLoss {
        total,
        l_m,
        l_c,
        d_m,
        d_c,
    })
}

fn field_tensor(fields: &[&Field], device: &Device) -> Result<Tensor> {
    let (h, w) = fields[0].shape();
    let data: Vec<f64> = fields
        .iter()
        .flat_map(|f| f.data().iter().map(|&v| v as f64))
        .collect();
    Ok(Tensor::from_vec(data, (fields.len(), 1, h, w), device)?)
}

fn flow_tensor(flows: &[&FlowField], device: &Device) -> Result<Tensor> {
    let (h, w) = flows[0].shape();
    let mut data = Vec::with_capacity(flows.len() * 2 * h * w);
    for f in flows {
        data.extend(f.dx.data().iter().map(|&v| v as f64));
        data.extend(f.dy.data().iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(data, (flows.len(), 2, h, w), device)?)
}

/// Total loss on full-canvas predictions `predictions[t][k]` against visible masks
/// `visible[t][k]`, evaluated in f64.
pub fn total_loss(
    predictions: &[Vec<FramePrediction>],
    visible: &[Vec<Mask>],
    lw: LossWeights,
) -> Result<LossReport> {
    lw.validate()?;
    let t_len = predictions.len();
    ensure_contract!(t_len >= 2, "need at least two frames, got {t_len}");
    ensure_contract!(
        visible.len() == t_len,
        "predictions and visible masks differ in length"
    );
    let k_len = visible[0].len();
    ensure_contract!(
        predictions.iter().all(|p| p.len() == k_len) && visible.iter().all(|v| v.len() == k_len),
        "object counts are not aligned"
    );
    let device = Device::Cpu;
    let mut masks = Vec::with_capacity(t_len);
    let mut motions = Vec::with_capacity(t_len);
    let mut targets = Vec::with_capacity(t_len);
    let mut weights = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let masks_t: Vec<&Field> = predictions[t].iter().map(|p| &p.mask).collect();
        let motions_t: Vec<&FlowField> = predictions[t].iter().map(|p| &p.motion).collect();
        ensure_contract!(
            masks_t.iter().all(|m| m.shape() == visible[t][0].shape())
                && motions_t.iter().all(|m| m.shape() == visible[t][0].shape()),
            "prediction shape differs from the visible masks at frame {t}"
        );
        let targets_t: Vec<Field> = visible[t].iter().map(Mask::to_field).collect();
        let weights_t = (0..k_len)
            .map(|k| occlusion_weight(&visible[t], k))
            .collect::<Result<Vec<_>>>()?;
        masks.push(field_tensor(&masks_t, &device)?);
        motions.push(flow_tensor(&motions_t, &device)?);
        targets.push(field_tensor(
            &targets_t.iter().collect::<Vec<_>>(),
            &device,
        )?);
        weights.push(field_tensor(
            &weights_t.iter().collect::<Vec<_>>(),
            &device,
        )?);
    }
    let loss = sequence_loss(&masks, &motions, &targets, &weights, lw)?;
    let scalar =
        |t: &Tensor| -> Result<f64> { Ok(t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let mut per_frame = Vec::new();
    for (i, (dm, dc)) in loss.d_m.iter().zip(&loss.d_c).enumerate() {
        let dm = dm.to_vec1::<f64>()?;
        let dc = dc.to_vec1::<f64>()?;
        for k in 0..k_len {
            per_frame.push(FrameDiagnostic {
                t: i + 1,
                k,
                d_m: dm[k],
                d_c: dc[k],
            });
        }
    }
    Ok(LossReport {
        total: scalar(&loss.total)?,
        l_m: scalar(&loss.l_m)?,
        l_c: scalar(&loss.l_c)?,
        per_frame,
    })
}

/// Softmax weights of the forward and backward alpha logits.
pub fn merge_weights(fwd_alpha_logit: f64, bwd_alpha_logit: f64) -> (f64, f64) {
    let m = fwd_alpha_logit.max(bwd_alpha_logit);
    let ef = (fwd_alpha_logit - m).exp();
    let eb = (bwd_alpha_logit - m).exp();
    (ef / (ef + eb), eb / (ef + eb))
}

/// `alpha_fwd * M_fwd + alpha_bwd * M_bwd` with per-pixel softmax alphas.
pub fn merge_bidirectional(
    fwd_mask: &Field,
    fwd_alpha_logit: &Field,
    bwd_mask: &Field,
    bwd_alpha_logit: &Field,
) -> Result<Field> {
    let shape = fwd_mask.shape();
    ensure_contract!(
        fwd_alpha_logit.shape() == shape
            && bwd_mask.shape() == shape
            && bwd_alpha_logit.shape() == shape,
        "merge inputs differ in shape"
    );
    let (h, w) = shape;
    let data = (0..h * w)
        .map(|i| {
            let (af, ab) = merge_weights(
                fwd_alpha_logit.data()[i] as f64,
                bwd_alpha_logit.data()[i] as f64,
            );
            let v = af * fwd_mask.data()[i] as f64 + ab * bwd_mask.data()[i] as f64;
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Field::from_vec(h, w, data)
}

/// Tensor version of [`merge_bidirectional`] over matching shapes.
pub fn merge_bidirectional_t(
    fwd_mask: &Tensor,
    fwd_alpha_logit: &Tensor,
    bwd_mask: &Tensor,
    bwd_alpha_logit: &Tensor,
) -> Result<Tensor> {
    ensure_contract!(
        fwd_mask.dims() == fwd_alpha_logit.dims()
            && fwd_mask.dims() == bwd_mask.dims()
            && fwd_mask.dims() == bwd_alpha_logit.dims(),
        "merge inputs differ in shape"
    );
    // Two-way softmax is the logistic of the logit difference.
    let diff = (fwd_alpha_logit - bwd_alpha_logit)?;
    let alpha_fwd = crate::model::sigmoid(&diff)?;
    let merged = (bwd_mask + (&alpha_fwd * (fwd_mask - bwd_mask)?)?)?;
    Ok(merged)
}
