//! Square 2-D convolution as im2col followed by a single matrix product.
//!
//! Both directions of the patch unfolding have hand-written CPU kernels, so the
//! backward pass costs about as much as the forward one.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols_shape(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k, self.n * ho * wo)
    }

    /// Calls `f(out_offset, in_offset, len)` for every in-bounds run of taps: output
    /// entries `out_offset..out_offset + len` read input entries
    /// `in_offset, in_offset + stride, ...`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let cols = self.n * ho * wo;
        let (k, s, p) = (self.k, self.stride, self.pad);
        for c in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    // ox * s + kx - p within [0, w)
                    let ox_lo = (p.saturating_sub(kx)).div_ceil(s);
                    let ox_hi = ((self.w + p - kx).div_ceil(s)).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for n in 0..self.n {
                        let base = (n * self.c + c) * self.h * self.w;
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as i64 - p as i64;
                            if iy < 0 || iy >= self.h as i64 {
                                continue;
                            }
                            let out = row * cols + (n * ho + oy) * wo + ox_lo;
                            let inp = base + iy as usize * self.w + ox_lo * s + kx - p;
                            f(out, inp, ox_hi - ox_lo);
                        }
                    }
                }
            }
        }
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

fn slice<'a, T: candle_core::WithDType>(
    s: &'a CpuStorage,
    l: &Layout,
) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects contiguous input"),
    }
}

fn unfold<T: Float>(g: &Geometry, x: &[T]) -> Vec<T> {
    let (r, c) = g.cols_shape();
    let mut out = vec![T::zero(); r * c];
    let s = g.stride;
    g.for_each_run(|o, i, len| {
        let dst = &mut out[o..o + len];
        if s == 1 {
            dst.copy_from_slice(&x[i..i + len]);
        } else {
            for (d, v) in dst.iter_mut().zip(x[i..].iter().step_by(s)) {
                *d = *v;
            }
        }
    });
    out
}

fn fold<T: Float>(g: &Geometry, cols: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    let s = g.stride;
    g.for_each_run(|o, i, len| {
        for (d, v) in out[i..].iter_mut().step_by(s).zip(&cols[o..o + len]) {
            *d = *d + *v;
        }
    });
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let storage = match s {
            CpuStorage::F32(_) => CpuStorage::F32(unfold(g, slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(unfold(g, slice::<f64>(s, l)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((storage, g.cols_shape().into()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?,
        ))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let storage = match s {
            CpuStorage::F32(_) => CpuStorage::F32(fold(g, slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(fold(g, slice::<f64>(s, l)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((storage, (g.n, g.c, g.h, g.w).into()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            grad_res.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?,
        ))
    }
}

/// `x: [N, C, H, W]`, `weight: [O, C, k, k]`, `bias: [O]`; zero padding `pad`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        candle_core::bail!(
            "conv2d: input {:?} incompatible with weight {:?}",
            x.dims(),
            weight.dims()
        );
    }
    if !matches!(x.dtype(), DType::F32 | DType::F64) {
        candle_core::bail!("conv2d supports f32 and f64");
    }
    let g = Geometry {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((o, c * k * k))?.matmul(&cols)?;
    let y = y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?;
    y.broadcast_add(&bias.reshape((1, o, 1, 1))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn ramp(shape: (usize, usize, usize, usize), scale: f64) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n)
            .map(|i| ((i * 7919) % 23) as f64 * scale - 0.3)
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_builtin_convolution() {
        let x = ramp((2, 3, 9, 7), 0.05);
        let w = ramp((4, 3, 3, 3), 0.03);
        let b = Tensor::new(&[0.1f64, -0.2, 0.0, 0.3], &Device::Cpu).unwrap();
        for stride in [1, 2] {
            let ours = conv2d(&x, &w, &b, stride, 1).unwrap();
            let theirs = x
                .conv2d(&w, 1, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_builtin_convolution() {
        let x = Var::from_tensor(&ramp((2, 2, 6, 6), 0.05)).unwrap();
        let w = Var::from_tensor(&ramp((3, 2, 3, 3), 0.04)).unwrap();
        let b = Var::from_tensor(&Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let probe = ramp((2, 3, 3, 3), 0.1);
        let ours = (conv2d(&x, &w, &b, 2, 1).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap();
        let theirs = (x
            .conv2d(&w, 1, 2, 1, 1)
            .unwrap()
            .broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap())
            .unwrap()
            * &probe)
            .unwrap()
            .sum_all()
            .unwrap();
        let g1 = ours.backward().unwrap();
        let g2 = theirs.backward().unwrap();
        for v in [x.as_tensor(), w.as_tensor(), b.as_tensor()] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = ramp((1, 2, 4, 4), 0.1);
        let w = ramp((1, 3, 3, 3), 0.1);
        let b = Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap();
        assert!(conv2d(&x, &w, &b, 1, 1).is_err());
    }
}
