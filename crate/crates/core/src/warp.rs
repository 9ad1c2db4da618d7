//! Differentiable forward warping (bilinear splatting) of masks by dense motion.
//!
//! Each source pixel `(x, y)` with mass `m` is pushed to `(x + dx, y + dy)` and its
//! mass is split over the four surrounding integer pixels with bilinear weights.
//! Contributions accumulate, mass landing outside the canvas is dropped and the
//! accumulated field is clamped to `[0, 1]`.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Result};
use crate::grid::{Field, Mask};

/// Dense motion in pixels per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub dx: Field,
    pub dy: Field,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::uniform(height, width, 0.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self {
            dx: Field::filled(height, width, dx),
            dy: Field::filled(height, width, dy),
        }
    }

    /// `(dx, dy)` on the set pixels of `support`, zero elsewhere.
    pub fn on_support(support: &Mask, dx: f32, dy: f32) -> Self {
        Self {
            dx: support.map(|v| if v != 0 { dx } else { 0.0 }),
            dy: support.map(|v| if v != 0 { dy } else { 0.0 }),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.dx.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.dx
            .data()
            .iter()
            .chain(self.dy.data())
            .all(|v| v.is_finite())
    }
}

/// Accumulates the bilinear splat of `mask` displaced by `(dx, dy)` into `out`
/// (no clamping). All slices are one `height x width` plane in row-major order.
pub fn splat_accumulate<T: Float>(
    mask: &[T],
    dx: &[T],
    dy: &[T],
    height: usize,
    width: usize,
    out: &mut [T],
) {
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let m = mask[i];
            if m == T::zero() {
                continue;
            }
            let tx = T::from(x).unwrap() + dx[i];
            let ty = T::from(y).unwrap() + dy[i];
            let x0 = tx.floor();
            let y0 = ty.floor();
            let fx = tx - x0;
            let fy = ty - y0;
            let (x0, y0) = (x0.to_i64().unwrap(), y0.to_i64().unwrap());
            let one = T::one();
            for (cy, wy) in [(y0, one - fy), (y0 + 1, fy)] {
                if cy < 0 || cy >= height as i64 || wy == T::zero() {
                    continue;
                }
                for (cx, wx) in [(x0, one - fx), (x0 + 1, fx)] {
                    if cx < 0 || cx >= width as i64 || wx == T::zero() {
                        continue;
                    }
                    let j = cy as usize * width + cx as usize;
                    out[j] = out[j] + m * wx * wy;
                }
            }
        }
    }
}

/// Vector-Jacobian product of the clamped splat for one plane.
///
/// `grad_out` is the gradient w.r.t. the clamped output; the clamp passes
/// gradient wherever the accumulated value lies in `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn splat_backward<T: Float>(
    mask: &[T],
    dx: &[T],
    dy: &[T],
    height: usize,
    width: usize,
    grad_out: &[T],
    grad_mask: &mut [T],
    grad_dx: &mut [T],
    grad_dy: &mut [T],
) {
    let n = height * width;
    let mut acc = vec![T::zero(); n];
    splat_accumulate(mask, dx, dy, height, width, &mut acc);
    let g: Vec<T> = acc
        .iter()
        .zip(grad_out)
        .map(|(&a, &g)| {
            if a >= T::zero() && a <= T::one() {
                g
            } else {
                T::zero()
            }
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let m = mask[i];
            let tx = T::from(x).unwrap() + dx[i];
            let ty = T::from(y).unwrap() + dy[i];
            let x0f = tx.floor();
            let y0f = ty.floor();
            let fx = tx - x0f;
            let fy = ty - y0f;
            let (x0, y0) = (x0f.to_i64().unwrap(), y0f.to_i64().unwrap());
            let one = T::one();
            let mut gm = T::zero();
            let mut gx = T::zero();
            let mut gy = T::zero();
            // (offset_y, offset_x, weight_y, weight_x, d weight_y / d fy, d weight_x / d fx)
            let corners = [
                (0, 0, one - fy, one - fx, -one, -one),
                (0, 1, one - fy, fx, -one, one),
                (1, 0, fy, one - fx, one, -one),
                (1, 1, fy, fx, one, one),
            ];
            for (oy, ox, wy, wx, dwy, dwx) in corners {
                let cy = y0 + oy;
                let cx = x0 + ox;
                if cy < 0 || cy >= height as i64 || cx < 0 || cx >= width as i64 {
                    continue;
                }
                let go = g[cy as usize * width + cx as usize];
                gm = gm + wx * wy * go;
                gx = gx + m * dwx * wy * go;
                gy = gy + m * wx * dwy * go;
            }
            grad_mask[i] = gm;
            grad_dx[i] = gx;
            grad_dy[i] = gy;
        }
    }
}

fn clamp_unit<T: Float>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Forward warp of a `[0, 1]` mask by `flow` on plain grids.
pub fn forward_warp(mask: &Field, flow: &FlowField) -> Result<Field> {
    ensure_contract!(
        mask.shape() == flow.shape() && flow.dx.shape() == flow.dy.shape(),
        "mask {:?} and flow {:?} differ in shape",
        mask.shape(),
        flow.shape()
    );
    ensure_contract!(flow.is_finite(), "flow contains non-finite values");
    let (h, w) = mask.shape();
    let mut out = vec![0f32; h * w];
    splat_accumulate(mask.data(), flow.dx.data(), flow.dy.data(), h, w, &mut out);
    Field::from_vec(h, w, out.into_iter().map(clamp_unit).collect())
}

/// Candle op over `mask: [N, 1, H, W]` and `flow: [N, 2, H, W]`.
struct SplatOp;

fn contiguous<'a, T: candle_core::WithDType>(
    s: &'a CpuStorage,
    l: &Layout,
) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("forward_warp expects contiguous inputs"),
    }
}

fn splat_batch<T: Float + candle_core::WithDType>(
    mask: &[T],
    flow: &[T],
    n: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); n * plane];
    for b in 0..n {
        let m = &mask[b * plane..(b + 1) * plane];
        let fx = &flow[2 * b * plane..(2 * b + 1) * plane];
        let fy = &flow[(2 * b + 1) * plane..(2 * b + 2) * plane];
        let o = &mut out[b * plane..(b + 1) * plane];
        splat_accumulate(m, fx, fy, h, w, o);
        for v in o.iter_mut() {
            *v = clamp_unit(*v);
        }
    }
    out
}

impl CustomOp2 for SplatOp {
    fn name(&self) -> &'static str {
        "forward-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, _, h, w) = l1.shape().dims4()?;
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(splat_batch(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                n,
                h,
                w,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(splat_batch(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                n,
                h,
                w,
            )),
            _ => candle_core::bail!("forward_warp supports matching f32 or f64 inputs"),
        };
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(
        &self,
        mask: &Tensor,
        flow: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (gm, gf) = match mask.dtype() {
            DType::F32 => splat_grads::<f32>(mask, flow, grad_res)?,
            DType::F64 => splat_grads::<f64>(mask, flow, grad_res)?,
            dt => candle_core::bail!("forward_warp backward does not support {dt:?}"),
        };
        Ok((Some(gm), Some(gf)))
    }
}

fn splat_grads<T: Float + candle_core::WithDType>(
    mask: &Tensor,
    flow: &Tensor,
    grad_res: &Tensor,
) -> candle_core::Result<(Tensor, Tensor)> {
    let (n, _, h, w) = mask.dims4()?;
    let plane = h * w;
    let m = mask.flatten_all()?.to_vec1::<T>()?;
    let f = flow.flatten_all()?.to_vec1::<T>()?;
    let g = grad_res.flatten_all()?.to_vec1::<T>()?;
    let mut gm = vec![T::zero(); n * plane];
    let mut gf = vec![T::zero(); 2 * n * plane];
    for b in 0..n {
        let (gfx, gfy) = gf[2 * b * plane..(2 * b + 2) * plane].split_at_mut(plane);
        splat_backward(
            &m[b * plane..(b + 1) * plane],
            &f[2 * b * plane..(2 * b + 1) * plane],
            &f[(2 * b + 1) * plane..(2 * b + 2) * plane],
            h,
            w,
            &g[b * plane..(b + 1) * plane],
            &mut gm[b * plane..(b + 1) * plane],
            gfx,
            gfy,
        );
    }
    Ok((
        Tensor::from_vec(gm, mask.shape(), mask.device())?,
        Tensor::from_vec(gf, flow.shape(), flow.device())?,
    ))
}

/// Differentiable forward warp of `mask: [N, 1, H, W]` by `flow: [N, 2, H, W]`.
pub fn warp_tensor(mask: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = mask.dims4()?;
    ensure_contract!(c == 1, "mask must have one channel, got {c}");
    ensure_contract!(
        flow.dims() == [n, 2, h, w],
        "flow shape {:?} does not match mask {:?}",
        flow.dims(),
        mask.dims()
    );
    ensure_contract!(mask.dtype() == flow.dtype(), "mask and flow dtypes differ");
    let finite = flow
        .abs()?
        .max_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?
        .is_finite();
    if !finite {
        // A diverged model: poison the output so the loss reports it as non-finite.
        return Ok(mask.affine(0.0, f64::NAN)?);
    }
    Ok(mask.contiguous()?.apply_op2(&flow.contiguous()?, SplatOp)?)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error used by the gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the analytic gradient of `sum(probe * forward_warp(mask, flow))` against
/// central finite differences in f64, for every mask and flow entry.
pub fn grad_check(
    mask: &Field,
    flow: &FlowField,
    probe: &Field,
    epsilon: f64,
) -> Result<GradCheck> {
    ensure_contract!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-7, 1e-3]"
    );
    ensure_contract!(
        mask.shape() == flow.shape() && probe.shape() == mask.shape(),
        "grad_check inputs differ in shape"
    );
    let (h, w) = mask.shape();
    let plane = h * w;
    let m: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    let fx: Vec<f64> = flow.dx.data().iter().map(|&v| v as f64).collect();
    let fy: Vec<f64> = flow.dy.data().iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = probe.data().iter().map(|&v| v as f64).collect();

    let objective = |m: &[f64], fx: &[f64], fy: &[f64]| -> f64 {
        let mut acc = vec![0.0; plane];
        splat_accumulate(m, fx, fy, h, w, &mut acc);
        acc.iter().zip(&p).map(|(&a, &q)| clamp_unit(a) * q).sum()
    };

    let mut gm = vec![0.0; plane];
    let mut gx = vec![0.0; plane];
    let mut gy = vec![0.0; plane];
    splat_backward(&m, &fx, &fy, h, w, &p, &mut gm, &mut gx, &mut gy);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..plane {
        for which in 0..3 {
            let (mut a, mut b, mut c) = (m.clone(), fx.clone(), fy.clone());
            let target = match which {
                0 => &mut a,
                1 => &mut b,
                _ => &mut c,
            };
            let base = target[i];
            target[i] = base + epsilon;
            let plus = objective(&a, &b, &c);
            let target = match which {
                0 => &mut a,
                1 => &mut b,
                _ => &mut c,
            };
            target[i] = base - epsilon;
            let minus = objective(&a, &b, &c);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = [gm[i], gx[i], gy[i]][which];
            worst = worst.max(relative_error(analytic, numeric, 1e-6));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
