//! The amodal network: a per-frame convolutional encoder, a convolutional gated
//! recurrence over time, an amodal mask completor and a residual motion predictor
//! anchored at the mean visible motion.
//!
//! All tensors are `[N, C, H, W]`; one batch row is one object sequence.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv;
use crate::error::{ensure_contract, Error, Result};
use crate::patch::SequenceBatch;

/// Named host copies of parameter arrays: name -> (shape, row-major `f32` data).
pub type ParamState = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub feature_channels: usize,
    pub hidden_channels: usize,
    /// Channels of the visible-mask and visible-flow encoders feeding the decoders.
    pub side_channels: usize,
    /// Channels inside the two decoders.
    pub decoder_channels: usize,
    /// Stride-2 stages between patch and hidden resolution.
    pub encoder_depth: usize,
    /// 3x3 layers each decoder applies at hidden resolution before upsampling.
    pub decoder_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            feature_channels: 16,
            hidden_channels: 24,
            side_channels: 8,
            decoder_channels: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Configuration used with [`crate::synthgen::GenConfig::desk`] videos.
    pub fn desk() -> Self {
        Self {
            patch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reduction = 1usize << self.encoder_depth;
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "patch_size {} is not divisible by 2^encoder_depth = {reduction}",
                self.patch_size
            )));
        }
        if self.decoder_depth == 0 {
            return Err(Error::Config("decoder_depth must be at least 1".into()));
        }
        for (name, v) in [
            ("feature_channels", self.feature_channels),
            ("hidden_channels", self.hidden_channels),
            ("side_channels", self.side_channels),
            ("decoder_channels", self.decoder_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn hidden_size(&self) -> usize {
        self.patch_size >> self.encoder_depth
    }
}

/// Logistic function via `tanh`, stable for large magnitudes and differentiable.
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x * 0.5)?.tanh()?.affine(0.5, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    /// 3x3, padding 1, given stride.
    Plain { stride: usize },
    /// Nearest 2x upsampling followed by a 3x3 convolution.
    Up,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: Var,
    bias: Var,
    kind: ConvKind,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (w, b) = (self.weight.as_tensor(), self.bias.as_tensor());
        match self.kind {
            ConvKind::Plain { stride } => conv::conv2d(x, w, b, stride, 1),
            ConvKind::Up => {
                let (_, _, h, wd) = x.dims4()?;
                conv::conv2d(&x.upsample_nearest2d(2 * h, 2 * wd)?, w, b, 1, 1)
            }
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
    params: Vec<(String, Var)>,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kind: ConvKind,
        gain: f64,
    ) -> Result<Conv> {
        let (shape, fan_in) = ((c_out, c_in, 3, 3), c_in * 9);
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let values: Vec<f64> = (0..n)
            .map(|_| {
                if bound == 0.0 {
                    0.0
                } else {
                    self.rng.random_range(-bound..bound)
                }
            })
            .collect();
        let w = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let b = Tensor::zeros(c_out, self.dtype, &self.device)?;
        let weight = Var::from_tensor(&w)?;
        let bias = Var::from_tensor(&b)?;
        self.params.push((format!("{name}.weight"), weight.clone()));
        self.params.push((format!("{name}.bias"), bias.clone()));
        Ok(Conv { weight, bias, kind })
    }
}

/// Encoder of a side input (visible mask or visible flow) down to hidden resolution.
struct SideEncoder {
    downs: Vec<Conv>,
}

impl SideEncoder {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.downs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

/// `DeConv([h, side])` with a full-resolution skip of the raw side input.
struct Decoder {
    mids: Vec<Conv>,
    ups: Vec<Conv>,
    out: Conv,
}

impl Decoder {
    fn forward(&self, h: &Tensor, side: &Tensor, skip: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = Tensor::cat(&[h, side], 1)?;
        for conv in &self.mids {
            x = conv.forward(&x)?.relu()?;
        }
        for conv in &self.ups {
            x = conv.forward(&x)?.relu()?;
        }
        self.out.forward(&Tensor::cat(&[&x, skip], 1)?)
    }
}

/// Recurrent spatiotemporal embedding `h_t` (hidden_channels x reduced H x reduced W).
#[derive(Clone, Debug)]
pub struct HiddenState {
    pub h: Tensor,
}

/// Outputs for one frame, each at patch resolution.
#[derive(Clone, Debug)]
pub struct AmodalPrediction {
    pub mask_logits: Tensor,
    /// `[N, 2, P, P]`: `(dx, dy)` towards the next frame in sequence order.
    pub amodal_motion: Tensor,
    pub alpha_logit: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

pub struct SavosModel {
    cfg: ModelConfig,
    device: Device,
    dtype: DType,
    stem: Conv,
    downs: Vec<Conv>,
    gates: Conv,
    candidate: Conv,
    mask_encoder: SideEncoder,
    amodal_decoder: Decoder,
    flow_encoder: SideEncoder,
    motion_decoder: Decoder,
    params: Vec<(String, Var)>,
}

impl SavosModel {
    pub fn new(cfg: ModelConfig, device: &Device, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            device: device.clone(),
            dtype,
            params: Vec::new(),
        };
        let f = cfg.feature_channels;
        let h = cfg.hidden_channels;
        let s = cfg.side_channels;
        let d = cfg.decoder_channels;
        let relu_gain = 1.0;
        let stem = b.conv(
            "encoder.stem",
            6,
            f,
            ConvKind::Plain { stride: 1 },
            relu_gain,
        )?;
        let downs = (0..cfg.encoder_depth)
            .map(|i| {
                b.conv(
                    &format!("encoder.down{i}"),
                    f,
                    f,
                    ConvKind::Plain { stride: 2 },
                    relu_gain,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gates = b.conv(
            "sequence.gates",
            f + h,
            2 * h,
            ConvKind::Plain { stride: 1 },
            0.5,
        )?;
        let candidate = b.conv(
            "sequence.candidate",
            f + h,
            h,
            ConvKind::Plain { stride: 1 },
            0.5,
        )?;

        let side = |b: &mut Builder, prefix: &str, c_in: usize| -> Result<SideEncoder> {
            let downs = (0..cfg.encoder_depth)
                .map(|i| {
                    let cin = if i == 0 { c_in } else { s };
                    b.conv(
                        &format!("{prefix}.down{i}"),
                        cin,
                        s,
                        ConvKind::Plain { stride: 2 },
                        relu_gain,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SideEncoder { downs })
        };
        let mask_encoder = side(&mut b, "amodal.encoder", 1)?;
        let flow_encoder = side(&mut b, "motion.encoder", 2)?;
        // With encoder_depth 0 the side encoders are identities and keep their input channels.
        let side_out = |c_in: usize| if cfg.encoder_depth == 0 { c_in } else { s };

        let decoder = |b: &mut Builder,
                       prefix: &str,
                       side_c: usize,
                       skip_c: usize,
                       out_gain: f64|
         -> Result<Decoder> {
            let mids = (0..cfg.decoder_depth)
                .map(|j| {
                    let cin = if j == 0 { h + side_c } else { d };
                    b.conv(
                        &format!("{prefix}.mid{j}"),
                        cin,
                        d,
                        ConvKind::Plain { stride: 1 },
                        relu_gain,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let ups = (0..cfg.encoder_depth)
                .map(|i| b.conv(&format!("{prefix}.up{i}"), d, d, ConvKind::Up, relu_gain))
                .collect::<Result<Vec<_>>>()?;
            let out = b.conv(
                &format!("{prefix}.out"),
                d + skip_c,
                2,
                ConvKind::Plain { stride: 1 },
                out_gain,
            )?;
            Ok(Decoder { mids, ups, out })
        };
        let amodal_decoder = decoder(&mut b, "amodal.decoder", side_out(1), 1, 0.3)?;
        let motion_decoder = decoder(&mut b, "motion.decoder", side_out(2), 2, 0.0)?;

        Ok(Self {
            cfg,
            device: device.clone(),
            dtype,
            stem,
            downs,
            gates,
            candidate,
            mask_encoder,
            amodal_decoder,
            flow_encoder,
            motion_decoder,
            params: b.params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Parameters in declaration order with stable names.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Snapshot of every parameter as host `f32` data.
    pub fn state(&self) -> Result<ParamState> {
        self.params
            .iter()
            .map(|(n, v)| {
                let data = v
                    .as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?;
                Ok((n.clone(), (v.dims().to_vec(), data)))
            })
            .collect()
    }

    /// Overwrites parameters from a snapshot; names and shapes must match exactly.
    pub fn load_state(&self, state: &ParamState) -> Result<()> {
        ensure_contract!(
            state.len() == self.params.len(),
            "snapshot has {} arrays, model has {}",
            state.len(),
            self.params.len()
        );
        for (name, var) in &self.params {
            let (dims, data) = state
                .get(name)
                .ok_or_else(|| Error::Contract(format!("snapshot lacks parameter {name}")))?;
            ensure_contract!(
                dims.as_slice() == var.dims(),
                "parameter {name}: snapshot shape {dims:?} != model shape {:?}",
                var.dims()
            );
            let t = Tensor::from_vec(data.clone(), dims.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Deep copy with independent parameter storage.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Self::new(self.cfg.clone(), &self.device, self.dtype)?;
        copy.load_state(&self.state()?)?;
        Ok(copy)
    }

    /// SHA-256 over parameter names, shapes and `f32` bytes.
    pub fn param_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, (dims, data)) in self.state()? {
            hasher.update(name.as_bytes());
            for d in dims {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    fn check_patch(&self, t: &Tensor, channels: usize, what: &str) -> Result<()> {
        let p = self.cfg.patch_size;
        let dims = t.dims();
        ensure_contract!(
            dims.len() == 4 && dims[1] == channels && dims[2] == p && dims[3] == p,
            "{what} has shape {dims:?}, expected [N, {channels}, {p}, {p}]"
        );
        Ok(())
    }

    pub fn zero_state(&self, batch: usize) -> Result<HiddenState> {
        let s = self.cfg.hidden_size();
        Ok(HiddenState {
            h: Tensor::zeros(
                (batch, self.cfg.hidden_channels, s, s),
                self.dtype,
                &self.device,
            )?,
        })
    }

    /// `f = Enc([I, dV, V])`.
    pub fn encode_frame(&self, image: &Tensor, flow: &Tensor, visible: &Tensor) -> Result<Tensor> {
        self.check_patch(image, 3, "image patch")?;
        self.check_patch(flow, 2, "flow patch")?;
        self.check_patch(visible, 1, "visible patch")?;
        ensure_contract!(
            image.dim(0)? == flow.dim(0)? && image.dim(0)? == visible.dim(0)?,
            "encoder inputs differ in batch size"
        );
        let x = Tensor::cat(&[image, flow, visible], 1)?;
        let mut x = self.stem.forward(&x)?.relu()?;
        for conv in &self.downs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }

    /// Convolutional GRU update `h_t = Seq(h_{t-1}, f_t)`.
    pub fn step_sequence(&self, prev: &HiddenState, feature: &Tensor) -> Result<HiddenState> {
        let s = self.cfg.hidden_size();
        ensure_contract!(
            feature.dims().len() == 4
                && feature.dim(1)? == self.cfg.feature_channels
                && feature.dim(2)? == s
                && feature.dim(3)? == s,
            "frame feature has shape {:?}",
            feature.dims()
        );
        ensure_contract!(
            prev.h.dims() == [feature.dim(0)?, self.cfg.hidden_channels, s, s],
            "hidden state has shape {:?}",
            prev.h.dims()
        );
        let hc = self.cfg.hidden_channels;
        let gates = sigmoid(&self.gates.forward(&Tensor::cat(&[&prev.h, feature], 1)?)?)?;
        let update = gates.narrow(1, 0, hc)?;
        let reset = gates.narrow(1, hc, hc)?;
        let cand = self
            .candidate
            .forward(&Tensor::cat(&[&(&reset * &prev.h)?, feature], 1)?)?
            .tanh()?;
        let h = (&prev.h + (&update * (cand - &prev.h)?)?)?;
        Ok(HiddenState { h })
    }

    /// `(mask_logits, alpha_logit) = DeConv_a([h, CNN_a(V)])`.
    pub fn complete_amodal(
        &self,
        state: &HiddenState,
        visible: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.check_patch(visible, 1, "visible patch")?;
        let side = self.mask_encoder.forward(visible)?;
        ensure_contract!(
            side.dims()[2..] == state.h.dims()[2..] && side.dim(0)? == state.h.dim(0)?,
            "hidden state {:?} does not match visible patch {:?}",
            state.h.dims(),
            visible.dims()
        );
        let out = self.amodal_decoder.forward(&state.h, &side, visible)?;
        Ok((out.narrow(1, 0, 1)?, out.narrow(1, 1, 1)?))
    }

    /// Mean of the visible flow over visible pixels, broadcast to `[N, 2, P, P]`.
    /// An empty visible mask gives zero motion.
    pub fn mean_visible_flow(&self, flow: &Tensor, visible: &Tensor) -> Result<Tensor> {
        let weighted = flow
            .broadcast_mul(visible)?
            .flatten_from(2)?
            .sum(D::Minus1)?;
        let count = visible.flatten_from(2)?.sum(D::Minus1)?;
        let mean = weighted.broadcast_div(&count.clamp(1.0, f64::INFINITY)?)?;
        Ok(mean
            .unsqueeze(2)?
            .unsqueeze(3)?
            .broadcast_as(flow.shape())?
            .contiguous()?)
    }

    /// Returns `(mean visible flow, decoded residual)`; their sum is the amodal motion.
    pub fn predict_motion_parts(
        &self,
        state: &HiddenState,
        flow: &Tensor,
        visible: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.check_patch(flow, 2, "flow patch")?;
        self.check_patch(visible, 1, "visible patch")?;
        let side = self.flow_encoder.forward(flow)?;
        ensure_contract!(
            side.dims()[2..] == state.h.dims()[2..] && side.dim(0)? == state.h.dim(0)?,
            "hidden state {:?} does not match flow patch {:?}",
            state.h.dims(),
            flow.dims()
        );
        let residual = self.motion_decoder.forward(&state.h, &side, flow)?;
        Ok((self.mean_visible_flow(flow, visible)?, residual))
    }

    /// `dM = mean(dV over V) + DeConv_c([h, CNN_c(dV)])`.
    pub fn predict_motion(
        &self,
        state: &HiddenState,
        flow: &Tensor,
        visible: &Tensor,
    ) -> Result<Tensor> {
        let (base, residual) = self.predict_motion_parts(state, flow, visible)?;
        Ok((base + residual)?)
    }

    /// Runs the recurrence over a batch in sequence order (no time reversal).
    pub fn rollout(&self, batch: &SequenceBatch) -> Result<Vec<AmodalPrediction>> {
        let t_len = batch.len();
        ensure_contract!(
            t_len >= 2,
            "sequence needs at least two frames, got {t_len}"
        );
        let mut state = self.zero_state(batch.batch_size())?;
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let f = self.encode_frame(&batch.image[t], &batch.flow[t], &batch.visible[t])?;
            state = self.step_sequence(&state, &f)?;
            let (mask_logits, alpha_logit) = self.complete_amodal(&state, &batch.visible[t])?;
            let amodal_motion = self.predict_motion(&state, &batch.flow[t], &batch.visible[t])?;
            out.push(AmodalPrediction {
                mask_logits,
                amodal_motion,
                alpha_logit,
            });
        }
        Ok(out)
    }

    /// Per-frame predictions in original temporal order. The backward direction runs
    /// on the time-reversed, flow-negated sequence; its motions point to the previous frame.
    pub fn forward_pass(
        &self,
        batch: &SequenceBatch,
        direction: Direction,
    ) -> Result<Vec<AmodalPrediction>> {
        match direction {
            Direction::Forward => self.rollout(batch),
            Direction::Backward => {
                let mut preds = self.rollout(&batch.reversed()?)?;
                preds.reverse();
                Ok(preds)
            }
        }
    }
}
