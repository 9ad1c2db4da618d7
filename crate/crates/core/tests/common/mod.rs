//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's loss or warp code: the splat is written as
//! a tent-kernel gather instead of a floor-based scatter, and the losses are plain
//! loops over pixels.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use savos_lab::losses::{sequence_loss, LossWeights};
use savos_lab::model::sigmoid;

pub const BCE_EPS: f64 = 1e-6;

/// Forward warp as a gather: every target pixel collects `m * tent(dx) * tent(dy)`
/// from every source pixel, then the sum is clamped to `[0, 1]`.
pub fn oracle_splat(mask: &[f64], dx: &[f64], dy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; h * w];
    for ty in 0..h {
        for tx in 0..w {
            let mut acc = 0.0;
            for sy in 0..h {
                for sx in 0..w {
                    let i = sy * w + sx;
                    let px = sx as f64 + dx[i];
                    let py = sy as f64 + dy[i];
                    acc += mask[i] * tent(px - tx as f64) * tent(py - ty as f64);
                }
            }
            out[ty * w + tx] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

/// A small problem: `mask[t][k]`, `flow[t][k] = (dx, dy)`, `visible[t][k]`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<Vec<Vec<f64>>>,
    pub dx: Vec<Vec<Vec<f64>>>,
    pub dy: Vec<Vec<Vec<f64>>>,
    pub visible: Vec<Vec<Vec<u8>>>,
}

impl Instance {
    pub fn t_len(&self) -> usize {
        self.mask.len()
    }

    pub fn k_len(&self) -> usize {
        self.mask[0].len()
    }
}

/// Flow components stay `KINK_MARGIN` away from integers, where the splat has kinks.
pub const KINK_MARGIN: f64 = 0.01;

fn smooth_flow(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let d: f64 = rng.random_range(-1.5..1.5);
        if (d - d.round()).abs() >= KINK_MARGIN {
            return d;
        }
    }
}

/// Random instance with pairwise-disjoint visible masks and fractional flows.
pub fn random_instance(seed: u64, t_len: usize, k_len: usize, h: usize, w: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let mut inst = Instance {
        h,
        w,
        mask: vec![],
        dx: vec![],
        dy: vec![],
        visible: vec![],
    };
    for _ in 0..t_len {
        let owner: Vec<Option<usize>> = (0..plane)
            .map(|_| {
                let r = rng.random_range(0..k_len + 1);
                (r < k_len && rng.random_bool(0.6)).then_some(r)
            })
            .collect();
        let mut m = vec![];
        let mut dx = vec![];
        let mut dy = vec![];
        let mut v = vec![];
        for k in 0..k_len {
            m.push((0..plane).map(|_| rng.random_range(0.02..0.98)).collect());
            dx.push((0..plane).map(|_| smooth_flow(&mut rng)).collect());
            dy.push((0..plane).map(|_| smooth_flow(&mut rng)).collect());
            v.push(owner.iter().map(|&o| u8::from(o == Some(k))).collect());
        }
        inst.mask.push(m);
        inst.dx.push(dx);
        inst.dy.push(dy);
        inst.visible.push(v);
    }
    inst
}

pub fn oracle_weight(visible: &[Vec<u8>], k: usize) -> Vec<f64> {
    let plane = visible[k].len();
    (0..plane)
        .map(|i| {
            let sum: f64 = visible.iter().map(|v| v[i] as f64).sum();
            1.0 - sum + visible[k][i] as f64
        })
        .collect()
}

/// `(total, l_m, l_c)` by direct evaluation of the loss definitions.
pub fn oracle_loss(inst: &Instance, lambda1: f64, lambda2: f64) -> (f64, f64, f64) {
    let (h, w) = (inst.h, inst.w);
    let n = (h * w) as f64;
    let mut l_m = 0.0;
    let mut l_c = 0.0;
    for t in 0..inst.t_len() - 1 {
        for k in 0..inst.k_len() {
            let warped = oracle_splat(&inst.mask[t][k], &inst.dx[t][k], &inst.dy[t][k], h, w);
            let weight = oracle_weight(&inst.visible[t + 1], k);
            let target = &inst.visible[t + 1][k];
            let mut bce = 0.0;
            for i in 0..h * w {
                let p = warped[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
                let y = target[i] as f64;
                bce += weight[i] * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
            l_m += bce / n;

            let next = &inst.mask[t + 1][k];
            let (mut inter, mut union) = (0.0, 0.0);
            for i in 0..h * w {
                inter += next[i] * warped[i];
                union += next[i] + warped[i] - next[i] * warped[i];
            }
            l_c += if union == 0.0 {
                0.0
            } else {
                1.0 - inter / union
            };
        }
    }
    (lambda1 * l_m + lambda2 * l_c, l_m, l_c)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Result of comparing autodiff gradients with central differences of the oracle.
#[derive(Clone, Copy, Debug)]
pub struct Certification {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
    /// `(t, k, pixel, input)` of the worst entry; input 0 is the logit, 1 and 2 the flow.
    pub worst_at: (usize, usize, usize, usize),
}

/// Relative error floor used when both gradients are tiny.
pub const REL_FLOOR: f64 = 1e-6;

/// Initial step of [`ridders`]. Steps much above this cross the kinks of the splat and
/// of the BCE clamp.
pub const FD_STEP: f64 = 1e-4;

/// Derivative at 0 of `f` by Ridders' extrapolation of central differences: the step
/// shrinks from `h` by 1.4 per round and the tableau entry with the smallest error
/// estimate wins.
pub fn ridders(f: impl Fn(f64) -> f64, mut h: f64) -> f64 {
    const SHRINK: f64 = 1.4;
    const ROUNDS: usize = 14;
    let central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut prev = vec![central(h)];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    for _ in 1..ROUNDS {
        h /= SHRINK;
        let mut row = vec![central(h)];
        let mut fac = SHRINK * SHRINK;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
            fac *= SHRINK * SHRINK;
        }
        let n = row.len();
        if (row[n - 1] - prev[n - 2]).abs() >= 2.0 * err {
            break;
        }
        prev = row;
    }
    best
}

/// Gradients of the library's total loss (f64 autodiff, masks parameterised by logits
/// through the library sigmoid) against [`ridders`] differences of [`oracle_loss`].
pub fn certify_gradients(inst: &Instance, lw: LossWeights, epsilon: f64) -> Certification {
    let dev = Device::Cpu;
    let (h, w, t_len, k_len) = (inst.h, inst.w, inst.t_len(), inst.k_len());
    let plane = h * w;
    let logits: Vec<Vec<Vec<f64>>> = inst
        .mask
        .iter()
        .map(|f| {
            f.iter()
                .map(|m| m.iter().map(|&p| logit(p)).collect())
                .collect()
        })
        .collect();

    let mut logit_vars = vec![];
    let mut flow_vars = vec![];
    let mut masks = vec![];
    let mut targets = vec![];
    let mut weights = vec![];
    for t in 0..t_len {
        let l: Vec<f64> = logits[t].iter().flatten().copied().collect();
        let lv = Var::from_tensor(&Tensor::from_vec(l, (k_len, 1, h, w), &dev).unwrap()).unwrap();
        let mut f = vec![];
        for k in 0..k_len {
            f.extend_from_slice(&inst.dx[t][k]);
            f.extend_from_slice(&inst.dy[t][k]);
        }
        let fv = Var::from_tensor(&Tensor::from_vec(f, (k_len, 2, h, w), &dev).unwrap()).unwrap();
        masks.push(sigmoid(lv.as_tensor()).unwrap());
        let tg: Vec<f64> = inst.visible[t]
            .iter()
            .flatten()
            .map(|&b| b as f64)
            .collect();
        targets.push(Tensor::from_vec(tg, (k_len, 1, h, w), &dev).unwrap());
        let wt: Vec<f64> = (0..k_len)
            .flat_map(|k| oracle_weight(&inst.visible[t], k))
            .collect();
        weights.push(Tensor::from_vec(wt, (k_len, 1, h, w), &dev).unwrap());
        logit_vars.push(lv);
        flow_vars.push(fv);
    }
    let motions: Vec<Tensor> = flow_vars.iter().map(|v| v.as_tensor().clone()).collect();
    let loss = sequence_loss(&masks, &motions, &targets, &weights, lw).unwrap();
    let total = loss.total.sum_all().unwrap();
    assert_eq!(total.dtype(), DType::F64);
    let grads = total.backward().unwrap();

    let eval = |logits: &[Vec<Vec<f64>>], dx: &[Vec<Vec<f64>>], dy: &[Vec<Vec<f64>>]| -> f64 {
        let mut probe = inst.clone();
        probe.mask = logits
            .iter()
            .map(|f| {
                f.iter()
                    .map(|m| m.iter().map(|&z| logistic(z)).collect())
                    .collect()
            })
            .collect();
        probe.dx = dx.to_vec();
        probe.dy = dy.to_vec();
        oracle_loss(&probe, lw.lambda1, lw.lambda2).0
    };

    let mut worst: f64 = 0.0;
    let mut worst_pair = (0.0, 0.0);
    let mut worst_at = (0, 0, 0, 0);
    let mut checked = 0;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
    for t in 0..t_len {
        let gl = grads
            .get(logit_vars[t].as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; k_len * plane]);
        let gf = grads
            .get(flow_vars[t].as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; k_len * 2 * plane]);
        for k in 0..k_len {
            for i in 0..plane {
                for which in 0..3 {
                    let analytic = match which {
                        0 => gl[k * plane + i],
                        1 => gf[(2 * k) * plane + i],
                        _ => gf[(2 * k + 1) * plane + i],
                    };
                    let at = |offset: f64| {
                        let mut p = (logits.clone(), inst.dx.clone(), inst.dy.clone());
                        let slot = match which {
                            0 => &mut p.0[t][k][i],
                            1 => &mut p.1[t][k][i],
                            _ => &mut p.2[t][k][i],
                        };
                        *slot += offset;
                        eval(&p.0, &p.1, &p.2)
                    };
                    let numeric = ridders(at, epsilon);
                    let e = rel(analytic, numeric);
                    if e > worst {
                        worst = e;
                        worst_pair = (analytic, numeric);
                        worst_at = (t, k, i, which);
                    }
                    checked += 1;
                }
            }
        }
    }
    Certification {
        max_rel_error: worst,
        checked,
        worst: worst_pair,
        worst_at,
    }
}
