//! Object-centric patch extraction and stitching.
//!
//! Each object is followed with a fixed-size square window. The window moves by the
//! rounded mean visible flow from frame to frame, so a rigidly translating object
//! stays in place inside its patches; the window is centred on the bounding box of
//! all visible pixels after that alignment. Patch and canvas share the pixel scale
//! and windows may extend past the canvas (padding is zero).

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure_contract, Result};
use crate::grid::{Field, Grid, Mask};
use crate::losses::occlusion_weight;
use crate::synthgen::VideoSample;
use crate::warp::FlowField;

/// Placement of a patch on the canvas: top-left corner `(top, left)` and side length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropGeometry {
    pub top: i64,
    pub left: i64,
    pub size: usize,
}

impl CropGeometry {
    /// Whether the window overlaps a `height x width` canvas at all.
    pub fn intersects(&self, canvas: (usize, usize)) -> bool {
        let s = self.size as i64;
        self.top < canvas.0 as i64
            && self.left < canvas.1 as i64
            && self.top + s > 0
            && self.left + s > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFrame {
    /// `[3][P][P]`, RGB in `[0, 1]`.
    pub image: Vec<f32>,
    pub visible: Mask,
    /// Visible motion to the next frame in patch coordinates, zero off the visible mask.
    pub flow: FlowField,
    /// Occlusion weight of this object at this frame.
    pub weight: Field,
    pub geometry: CropGeometry,
}

/// Per-object patch sequence, the unit the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSequence {
    pub object: usize,
    pub patch_size: usize,
    pub frames: Vec<PatchFrame>,
}

impl ObjectSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Rounded mean of `flow` over `support`, `None` when the support is empty.
fn mean_flow(flow: &FlowField, support: &Mask) -> Option<(i64, i64)> {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0f64, 0f64);
    for (i, &v) in support.data().iter().enumerate() {
        if v != 0 {
            n += 1;
            sx += flow.dx.data()[i] as f64;
            sy += flow.dy.data()[i] as f64;
        }
    }
    (n > 0).then(|| {
        (
            (sy / n as f64).round() as i64,
            (sx / n as f64).round() as i64,
        )
    })
}

/// Cumulative `(dy, dx)` offset of every frame relative to frame 0, for frames `0..=T`.
fn track_offsets(sample: &VideoSample, k: usize) -> Vec<(i64, i64)> {
    let t_len = sample.num_frames();
    let mut offsets = Vec::with_capacity(t_len + 1);
    offsets.push((0i64, 0i64));
    let mut last = (0, 0);
    for t in 0..t_len {
        let step = mean_flow(&sample.flows[t][k], &sample.visible[t][k]).unwrap_or(last);
        last = step;
        let (y, x) = offsets[t];
        offsets.push((y + step.0, x + step.1));
    }
    offsets
}

/// Extracts the patch sequence of object `k` using only visible masks, flows and frames.
pub fn extract_object(sample: &VideoSample, k: usize, patch_size: usize) -> Result<ObjectSequence> {
    ensure_contract!(k < sample.num_objects(), "object {k} out of range");
    ensure_contract!(patch_size > 0, "patch size must be positive");
    let t_len = sample.num_frames();
    let offsets = track_offsets(sample, k);

    let mut bb: Option<(i64, i64, i64, i64)> = None;
    for t in 0..t_len {
        let (oy, ox) = offsets[t];
        if let Some((y0, x0, y1, x1)) = sample.visible[t][k].bbox() {
            let (y0, x0, y1, x1) = (
                y0 as i64 - oy,
                x0 as i64 - ox,
                y1 as i64 - oy,
                x1 as i64 - ox,
            );
            bb = Some(match bb {
                None => (y0, x0, y1, x1),
                Some((a, b, c, d)) => (a.min(y0), b.min(x0), c.max(y1), d.max(x1)),
            });
        }
    }
    let (h, w) = sample.canvas();
    let (cy, cx) = match bb {
        Some((y0, x0, y1, x1)) => ((y0 + y1).div_euclid(2), (x0 + x1).div_euclid(2)),
        None => (h as i64 / 2, w as i64 / 2),
    };
    let half = patch_size as i64 / 2;
    let geometry: Vec<CropGeometry> = offsets
        .iter()
        .map(|&(oy, ox)| CropGeometry {
            top: cy + oy - half,
            left: cx + ox - half,
            size: patch_size,
        })
        .collect();

    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let g = geometry[t];
        let next = geometry[t + 1];
        let (shift_y, shift_x) = ((next.top - g.top) as f32, (next.left - g.left) as f32);
        let visible = sample.visible[t][k].crop(g.top, g.left, patch_size, patch_size, 0);
        let canvas_flow = &sample.flows[t][k];
        let flow = FlowField {
            dx: Grid::from_fn(patch_size, patch_size, |y, x| {
                if visible.get(y, x) != 0 {
                    canvas_flow
                        .dx
                        .get((g.top + y as i64) as usize, (g.left + x as i64) as usize)
                        - shift_x
                } else {
                    0.0
                }
            }),
            dy: Grid::from_fn(patch_size, patch_size, |y, x| {
                if visible.get(y, x) != 0 {
                    canvas_flow
                        .dy
                        .get((g.top + y as i64) as usize, (g.left + x as i64) as usize)
                        - shift_y
                } else {
                    0.0
                }
            }),
        };
        let weight = occlusion_weight(&sample.visible[t], k)?
            .crop(g.top, g.left, patch_size, patch_size, 0.0);
        let rgb = sample.frames[t].crop(g.top, g.left, patch_size, patch_size, [0, 0, 0]);
        let mut image = vec![0f32; 3 * patch_size * patch_size];
        let plane = patch_size * patch_size;
        for (i, px) in rgb.data().iter().enumerate() {
            for c in 0..3 {
                image[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        frames.push(PatchFrame {
            image,
            visible,
            flow,
            weight,
            geometry: g,
        });
    }
    Ok(ObjectSequence {
        object: k,
        patch_size,
        frames,
    })
}

pub fn extract_all(sample: &VideoSample, patch_size: usize) -> Result<Vec<ObjectSequence>> {
    (0..sample.num_objects())
        .map(|k| extract_object(sample, k, patch_size))
        .collect()
}

/// Inverse of the crop: pastes a patch field at its geometry, zero elsewhere.
pub fn paste(patch: &Field, geometry: CropGeometry, canvas: (usize, usize)) -> Result<Field> {
    ensure_contract!(
        patch.shape() == (geometry.size, geometry.size),
        "patch {:?} does not match crop size {}",
        patch.shape(),
        geometry.size
    );
    ensure_contract!(
        geometry.intersects(canvas),
        "crop {geometry:?} lies outside the canvas {canvas:?}"
    );
    let (h, w) = canvas;
    Ok(Field::from_fn(h, w, |y, x| {
        let py = y as i64 - geometry.top;
        let px = x as i64 - geometry.left;
        patch.get_signed(py, px).unwrap_or(0.0)
    }))
}

/// Full-canvas binary amodal masks `[t]` for one object from per-frame patch probabilities.
pub fn stitch_predictions(
    patches: &[Field],
    geometry: &[CropGeometry],
    canvas: (usize, usize),
) -> Result<Vec<Mask>> {
    ensure_contract!(
        patches.len() == geometry.len(),
        "patches and geometry differ in length"
    );
    patches
        .iter()
        .zip(geometry)
        .map(|(p, &g)| Ok(paste(p, g, canvas)?.threshold(0.5)))
        .collect()
}

/// Frame-major tensors for a batch of equally long object sequences.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    /// `[t]`: `[N, 3, P, P]`
    pub image: Vec<Tensor>,
    /// `[t]`: `[N, 2, P, P]`
    pub flow: Vec<Tensor>,
    /// `[t]`: `[N, 1, P, P]`
    pub visible: Vec<Tensor>,
    /// `[t]`: `[N, 1, P, P]`
    pub weight: Vec<Tensor>,
}

impl SequenceBatch {
    pub fn from_sequences(seqs: &[&ObjectSequence], device: &Device, dtype: DType) -> Result<Self> {
        ensure_contract!(!seqs.is_empty(), "empty batch");
        let t_len = seqs[0].len();
        let p = seqs[0].patch_size;
        ensure_contract!(
            seqs.iter().all(|s| s.len() == t_len && s.patch_size == p),
            "sequences in a batch must share length and patch size"
        );
        let n = seqs.len();
        let plane = p * p;
        let mut batch = SequenceBatch {
            image: Vec::with_capacity(t_len),
            flow: Vec::with_capacity(t_len),
            visible: Vec::with_capacity(t_len),
            weight: Vec::with_capacity(t_len),
        };
        for t in 0..t_len {
            let mut img = Vec::with_capacity(n * 3 * plane);
            let mut flow = Vec::with_capacity(n * 2 * plane);
            let mut vis = Vec::with_capacity(n * plane);
            let mut wt = Vec::with_capacity(n * plane);
            for s in seqs {
                let f = &s.frames[t];
                img.extend_from_slice(&f.image);
                flow.extend_from_slice(f.flow.dx.data());
                flow.extend_from_slice(f.flow.dy.data());
                vis.extend(f.visible.data().iter().map(|&v| v as f32));
                wt.extend_from_slice(f.weight.data());
            }
            let mk = |v: Vec<f32>, c: usize| -> Result<Tensor> {
                Ok(Tensor::from_vec(v, (n, c, p, p), device)?.to_dtype(dtype)?)
            };
            batch.image.push(mk(img, 3)?);
            batch.flow.push(mk(flow, 2)?);
            batch.visible.push(mk(vis, 1)?);
            batch.weight.push(mk(wt, 1)?);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.image.first().map_or(0, |t| t.dims()[0])
    }

    /// Time-reversed sequence. The flow at reversed position `t` (original frame
    /// `s = T - 1 - t`) is the negated forward flow of the pair `(s - 1, s)`, and
    /// `-flow[0]` for the first original frame.
    pub fn reversed(&self) -> Result<Self> {
        let t_len = self.len();
        let rev = |v: &[Tensor]| v.iter().rev().cloned().collect::<Vec<_>>();
        let flow = (0..t_len)
            .map(|t| {
                let s = t_len - 1 - t;
                Ok(self.flow[s.saturating_sub(1)].neg()?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image: rev(&self.image),
            flow,
            visible: rev(&self.visible),
            weight: rev(&self.weight),
        })
    }

    /// Row-wise concatenation of two batches with the same length.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        ensure_contract!(
            self.len() == other.len(),
            "cannot concatenate batches of different lengths"
        );
        let cat = |a: &[Tensor], b: &[Tensor]| -> Result<Vec<Tensor>> {
            a.iter()
                .zip(b)
                .map(|(x, y)| Ok(Tensor::cat(&[x, y], 0)?))
                .collect()
        };
        Ok(Self {
            image: cat(&self.image, &other.image)?,
            flow: cat(&self.flow, &other.flow)?,
            visible: cat(&self.visible, &other.visible)?,
            weight: cat(&self.weight, &other.weight)?,
        })
    }
}
