//! Full and occluded mean-IoU, occlusion-rate buckets and the convex-hull baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Result};
use crate::grid::Mask;
use crate::synthgen::VideoSample;

pub const NUM_BUCKETS: usize = 10;

/// IoU of two binary masks, optionally restricted to `region`. Two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask, region: Option<&Mask>) -> Result<f64> {
    Ok(iou_counts(pred, gt, region)?.score())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub union: usize,
}

impl Overlap {
    pub fn score(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    pub fn both_empty(self) -> bool {
        self.union == 0
    }
}

pub fn iou_counts(pred: &Mask, gt: &Mask, region: Option<&Mask>) -> Result<Overlap> {
    ensure_contract!(
        pred.shape() == gt.shape(),
        "iou shapes differ: {:?} vs {:?}",
        pred.shape(),
        gt.shape()
    );
    if let Some(r) = region {
        ensure_contract!(
            r.shape() == gt.shape(),
            "iou region shape {:?} differs",
            r.shape()
        );
    }
    let mut out = Overlap::default();
    for i in 0..gt.data().len() {
        if region.is_some_and(|r| r.data()[i] == 0) {
            continue;
        }
        let (p, g) = (pred.data()[i] != 0, gt.data()[i] != 0);
        out.intersection += usize::from(p && g);
        out.union += usize::from(p || g);
    }
    Ok(out)
}

/// Pixels of the amodal mask hidden in the visible mask.
pub fn occluded_region(amodal: &Mask, visible: &Mask) -> Result<Mask> {
    ensure_contract!(amodal.shape() == visible.shape(), "mask shapes differ");
    ensure_contract!(
        visible.is_subset_of(amodal),
        "visible mask is not inside the amodal mask"
    );
    Ok(amodal.and_not(visible))
}

pub fn occlusion_rate(amodal: &Mask, visible: &Mask) -> Result<f64> {
    ensure_contract!(amodal.shape() == visible.shape(), "mask shapes differ");
    ensure_contract!(
        visible.is_subset_of(amodal),
        "visible mask is not inside the amodal mask"
    );
    let total = amodal.count();
    ensure_contract!(total > 0, "occlusion rate of an empty amodal mask");
    Ok(1.0 - visible.count() as f64 / total as f64)
}

/// Convex-hull completion. The flag is false when the visible mask was empty and
/// the returned prediction is empty too.
pub fn convex_baseline(visible: &Mask) -> (Mask, bool) {
    let (h, w) = visible.shape();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if visible.get(y, x) != 0 {
                pts.push((x as i64, y as i64));
            }
        }
    }
    if pts.is_empty() {
        return (Mask::new(h, w), false);
    }
    let hull = convex_hull(pts);
    let (y0, x0, y1, x1) = visible.bbox().expect("nonempty mask has a bbox");
    let mut out = Mask::new(h, w);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if hull_contains(&hull, (x as i64, y as i64)) {
                out.set(y, x, 1);
            }
        }
    }
    (out, true)
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone chain; counter-clockwise in (x, y) with collinear points removed.
pub fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Inside or on the boundary. Handles point and segment hulls.
pub fn hull_contains(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0
                && p.0 >= a.0.min(b.0)
                && p.0 <= a.0.max(b.0)
                && p.1 >= a.1.min(b.1)
                && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

/// One object at one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFrameScore {
    pub video: usize,
    pub t: usize,
    pub k: usize,
    pub occlusion_rate: f64,
    pub full_iou: f64,
    /// `None` when nothing of the object is hidden.
    pub occluded_iou: Option<f64>,
    pub empty_pair: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub full_miou: f64,
    pub occluded_count: usize,
    pub occluded_miou: f64,
    /// Object-frames where prediction and target were both empty inside the occluded region.
    pub empty_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub full_miou: f64,
    pub occluded_miou: f64,
    pub per_bucket: Vec<BucketStats>,
    /// Number of scored object-frames.
    pub n_objects: usize,
    pub n_occluded: usize,
}

fn bucket_of(rate: f64) -> usize {
    ((rate * NUM_BUCKETS as f64).floor() as usize).min(NUM_BUCKETS - 1)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsTable {
    pub fn from_scores(scores: &[ObjectFrameScore]) -> Self {
        let per_bucket = (0..NUM_BUCKETS)
            .map(|b| {
                let inside: Vec<_> = scores
                    .iter()
                    .filter(|s| bucket_of(s.occlusion_rate) == b)
                    .collect();
                let occ: Vec<f64> = inside.iter().filter_map(|s| s.occluded_iou).collect();
                BucketStats {
                    lo: b as f64 / NUM_BUCKETS as f64,
                    hi: (b + 1) as f64 / NUM_BUCKETS as f64,
                    count: inside.len(),
                    full_miou: mean(inside.iter().map(|s| s.full_iou)),
                    occluded_count: occ.len(),
                    occluded_miou: mean(occ.iter().copied()),
                    empty_pairs: inside.iter().filter(|s| s.empty_pair).count(),
                }
            })
            .collect();
        let occ: Vec<f64> = scores.iter().filter_map(|s| s.occluded_iou).collect();
        Self {
            full_miou: mean(scores.iter().map(|s| s.full_iou)),
            occluded_miou: mean(occ.iter().copied()),
            per_bucket,
            n_objects: scores.len(),
            n_occluded: occ.len(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>8} {:>9} {:>10}",
            "bucket", "count", "full", "occ.n", "occluded"
        );
        for b in &self.per_bucket {
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>8.4} {:>9} {:>10.4}",
                format!("{:.1}-{:.1}", b.lo, b.hi),
                b.count,
                b.full_miou,
                b.occluded_count,
                b.occluded_miou
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>8.4} {:>9} {:>10.4}",
            "all", self.n_objects, self.full_miou, self.n_occluded, self.occluded_miou
        );
        s
    }

    pub fn to_bucket_csv(&self) -> String {
        let mut s =
            String::from("lo,hi,count,full_miou,occluded_count,occluded_miou,empty_pairs\n");
        for b in &self.per_bucket {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                b.lo, b.hi, b.count, b.full_miou, b.occluded_count, b.occluded_miou, b.empty_pairs
            );
        }
        s
    }
}

/// Scores one video; `predictions` is indexed `[t][k]`.
pub fn score_video(
    video_index: usize,
    predictions: &[Vec<Mask>],
    sample: &VideoSample,
) -> Result<Vec<ObjectFrameScore>> {
    ensure_contract!(
        predictions.len() == sample.num_frames(),
        "video {video_index}: {} predicted frames for {} frames",
        predictions.len(),
        sample.num_frames()
    );
    let mut out = Vec::new();
    for (t, frame) in predictions.iter().enumerate() {
        ensure_contract!(
            frame.len() == sample.num_objects(),
            "video {video_index} frame {t}: {} predicted objects for {}",
            frame.len(),
            sample.num_objects()
        );
        for (k, pred) in frame.iter().enumerate() {
            let (m, v) = (&sample.amodal[t][k], &sample.visible[t][k]);
            let region = occluded_region(m, v)?;
            let occ = iou_counts(pred, m, Some(&region))?;
            let hidden = !region.is_empty_mask();
            out.push(ObjectFrameScore {
                video: video_index,
                t,
                k,
                occlusion_rate: occlusion_rate(m, v)?,
                full_iou: iou(pred, m, None)?,
                occluded_iou: hidden.then(|| occ.score()),
                empty_pair: hidden && occ.both_empty(),
            });
        }
    }
    Ok(out)
}

/// Inclusive occlusion-rate filter `lo..=hi` applied before averaging.
pub fn evaluate(
    predictions: &[Vec<Vec<Mask>>],
    dataset: &[VideoSample],
    filter: Option<(f64, f64)>,
) -> Result<MetricsTable> {
    ensure_contract!(
        predictions.len() == dataset.len(),
        "{} predicted videos for {} videos",
        predictions.len(),
        dataset.len()
    );
    if let Some((lo, hi)) = filter {
        ensure_contract!(
            (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi,
            "occlusion filter {lo}:{hi} is not a range inside [0, 1]"
        );
    }
    let mut scores = Vec::new();
    for (i, (p, s)) in predictions.iter().zip(dataset).enumerate() {
        scores.extend(score_video(i, p, s)?);
    }
    if let Some((lo, hi)) = filter {
        scores.retain(|s| s.occlusion_rate >= lo && s.occlusion_rate <= hi);
    }
    Ok(MetricsTable::from_scores(&scores))
}

/// Convex completion of every visible mask, shaped like [`evaluate`]'s input.
pub fn convex_predictions(dataset: &[VideoSample]) -> Vec<Vec<Vec<Mask>>> {
    dataset
        .iter()
        .map(|s| {
            s.visible
                .iter()
                .map(|frame| frame.iter().map(|v| convex_baseline(v).0).collect())
                .collect()
        })
        .collect()
}
