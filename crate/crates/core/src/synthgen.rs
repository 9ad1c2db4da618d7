//! Deterministic generator of "chewing gum" occlusion videos.
//!
//! Every object is a random star-shaped polygon translated rigidly with an
//! integer per-frame displacement, so amodal masks, visible masks and flows
//! are exact and rasterized shapes never change between frames.

pub mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::warp::FlowField;

pub const FORMAT_VERSION: u32 = 1;

/// Family of polygons drawn by the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Node radii drawn independently in `radius_range`: blobby, mostly convex.
    #[default]
    Gum,
    /// Nodes alternate between the outer and inner end of `radius_range`.
    Star,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub num_objects: usize,
    pub num_frames: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub radius_range: (f32, f32),
    pub speed_range: (f32, f32),
    /// Amplitude (pixels) of the uniform positional jitter added before rounding.
    pub jitter: f32,
    pub shape: ShapeKind,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            canvas_height: 128,
            canvas_width: 128,
            num_objects: 3,
            num_frames: 16,
            nodes_min: 7,
            nodes_max: 12,
            radius_range: (10.0, 20.0),
            speed_range: (1.0, 3.0),
            jitter: 0.5,
            shape: ShapeKind::Gum,
            seed: 0,
            max_retries: 100,
        }
    }
}

impl GenConfig {
    /// Reduced 64x64 setting sized for CPU training with 32x32 patches.
    pub fn desk() -> Self {
        Self {
            canvas_height: 64,
            canvas_width: 64,
            radius_range: (6.0, 10.0),
            speed_range: (0.5, 1.5),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_objects < 2 {
            return fail(format!(
                "num_objects must be at least 2 for occlusion, got {}",
                self.num_objects
            ));
        }
        if self.num_frames < 2 {
            return fail(format!(
                "num_frames must be at least 2, got {}",
                self.num_frames
            ));
        }
        if self.nodes_min < 3 {
            return fail(format!(
                "nodes_min must be at least 3, got {}",
                self.nodes_min
            ));
        }
        if self.nodes_min > self.nodes_max {
            return fail(format!(
                "nodes_min ({}) exceeds nodes_max ({})",
                self.nodes_min, self.nodes_max
            ));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return fail(format!("invalid radius_range ({r0}, {r1})"));
        }
        let (s0, s1) = self.speed_range;
        if !(s0 >= 0.0 && s0 <= s1 && s1.is_finite()) {
            return fail(format!("invalid speed_range ({s0}, {s1})"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(format!("invalid jitter {}", self.jitter));
        }
        if self.canvas_height < 8 || self.canvas_width < 8 {
            return fail(format!(
                "canvas {}x{} is too small",
                self.canvas_height, self.canvas_width
            ));
        }
        if 2.0 * r1 + 2.0 >= self.canvas_height.min(self.canvas_width) as f32 {
            return fail("objects do not fit on the canvas".into());
        }
        if self.max_retries == 0 {
            return fail("max_retries must be positive".into());
        }
        Ok(())
    }
}

/// Polygon vertices in polar form around the object centre plus its motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonObject {
    pub node_angles: Vec<f32>,
    pub node_radii: Vec<f32>,
    /// Integer centre `(x, y)` for frames `0..=T`; the extra entry defines the last flow.
    pub center_trajectory: Vec<(i32, i32)>,
    /// Rank in the depth order, 0 is front-most.
    pub depth: usize,
    pub velocity: (f32, f32),
    pub color: [u8; 3],
}

impl PolygonObject {
    pub fn num_nodes(&self) -> usize {
        self.node_angles.len()
    }

    pub fn vertices(&self) -> Vec<(f64, f64)> {
        self.node_angles
            .iter()
            .zip(&self.node_radii)
            .map(|(&a, &r)| ((r as f64) * (a as f64).cos(), (r as f64) * (a as f64).sin()))
            .collect()
    }

    pub fn max_radius(&self) -> f32 {
        self.node_radii.iter().copied().fold(0.0, f32::max)
    }

    /// Displacement from frame `t` to `t + 1`.
    pub fn displacement(&self, t: usize) -> (i32, i32) {
        let (x0, y0) = self.center_trajectory[t];
        let (x1, y1) = self.center_trajectory[t + 1];
        (x1 - x0, y1 - y0)
    }
}

/// Draws a polygon with sorted node angles. The trajectory is a static placeholder
/// at the canvas centre until [`generate_video`] assigns motion.
pub fn generate_polygon<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Result<PolygonObject> {
    if cfg.nodes_min > cfg.nodes_max {
        return Err(Error::Config(format!(
            "nodes_min ({}) exceeds nodes_max ({})",
            cfg.nodes_min, cfg.nodes_max
        )));
    }
    if cfg.nodes_min < 3 {
        return Err(Error::Config(format!(
            "nodes_min must be at least 3, got {}",
            cfg.nodes_min
        )));
    }
    let (r0, r1) = cfg.radius_range;
    let n = rng.random_range(cfg.nodes_min..=cfg.nodes_max);
    let tau = std::f32::consts::TAU;
    let (angles, radii) = match cfg.shape {
        ShapeKind::Gum => {
            let mut angles: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * tau).collect();
            angles.sort_by(f32::total_cmp);
            let radii = (0..n).map(|_| sample_range(rng, r0, r1)).collect();
            (angles, radii)
        }
        ShapeKind::Star => {
            let phase = rng.random::<f32>() * tau;
            let step = tau / n as f32;
            let mut angles: Vec<f32> = (0..n)
                .map(|i| {
                    let a = phase + step * (i as f32 + 0.3 * (rng.random::<f32>() - 0.5));
                    a.rem_euclid(tau)
                })
                .collect();
            angles.sort_by(f32::total_cmp);
            let span = r1 - r0;
            let radii = (0..n)
                .map(|i| {
                    if i % 2 == 0 {
                        r1 - 0.1 * span * rng.random::<f32>()
                    } else {
                        r0 + 0.1 * span * rng.random::<f32>()
                    }
                })
                .collect();
            (angles, radii)
        }
    };
    let center = (cfg.canvas_width as i32 / 2, cfg.canvas_height as i32 / 2);
    Ok(PolygonObject {
        node_angles: angles,
        node_radii: radii,
        center_trajectory: vec![center; cfg.num_frames + 1],
        depth: 0,
        velocity: (0.0, 0.0),
        color: [
            rng.random_range(40..=255),
            rng.random_range(40..=255),
            rng.random_range(40..=255),
        ],
    })
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Even-odd point-in-polygon test on vertex offsets relative to the query point's frame.
pub fn point_in_polygon(px: f64, py: f64, vertices: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > py) != (yj > py) {
            let x_cross = xj + (py - yj) * (xi - xj) / (yi - yj);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Binary mask of the polygon at `frame_index`; pixel `(x, y)` has its centre at
/// integer coordinates and is set iff that centre lies inside the translated polygon.
pub fn rasterize(poly: &PolygonObject, frame_index: usize, canvas: (usize, usize)) -> Mask {
    let (h, w) = canvas;
    let (cx, cy) = poly.center_trajectory[frame_index];
    let verts = poly.vertices();
    let reach = poly.max_radius().ceil() as i64 + 1;
    let mut mask = Mask::new(h, w);
    let y_lo = (cy as i64 - reach).max(0);
    let y_hi = (cy as i64 + reach).min(h as i64 - 1);
    let x_lo = (cx as i64 - reach).max(0);
    let x_hi = (cx as i64 + reach).min(w as i64 - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            // Relative integer offsets keep rasterization exactly translation-invariant.
            let rx = (x - cx as i64) as f64;
            let ry = (y - cy as i64) as f64;
            if point_in_polygon(rx, ry, &verts) {
                mask.set(y as usize, x as usize, 1);
            }
        }
    }
    mask
}

pub type RgbFrame = Grid<[u8; 3]>;

pub const BACKGROUND_COLOR: [u8; 3] = [24, 24, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: GenConfig,
    pub objects: Vec<PolygonObject>,
    /// Trajectory attempts consumed before every invariant held.
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<RgbFrame>,
    /// `[t][k]`
    pub amodal: Vec<Vec<Mask>>,
    /// `[t][k]`
    pub visible: Vec<Vec<Mask>>,
    /// `[t][k]`, motion from `t` to `t + 1` on visible pixels, zero elsewhere.
    pub flows: Vec<Vec<FlowField>>,
    /// `[t][k]` depth rank of object `k` at frame `t`.
    pub depth_order: Vec<Vec<usize>>,
    pub manifest: VideoManifest,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.amodal.len()
    }

    pub fn num_objects(&self) -> usize {
        self.amodal.first().map_or(0, Vec::len)
    }

    pub fn canvas(&self) -> (usize, usize) {
        self.amodal[0][0].shape()
    }

    pub fn seed(&self) -> u64 {
        self.manifest.seed
    }

    pub fn displacement(&self, t: usize, k: usize) -> (i32, i32) {
        self.manifest.objects[k].displacement(t)
    }

    /// Exact rigid motion of object `k` from `t` to `t + 1` on the whole canvas.
    pub fn rigid_flow(&self, t: usize, k: usize) -> FlowField {
        let (h, w) = self.canvas();
        let (dx, dy) = self.displacement(t, k);
        FlowField::uniform(h, w, dx as f32, dy as f32)
    }
}

/// Generates one video; trajectories are resampled until every invariant holds.
pub fn generate_video(cfg: &GenConfig) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut objects = (0..cfg.num_objects)
        .map(|_| generate_polygon(&mut rng, cfg))
        .collect::<Result<Vec<_>>>()?;
    let canvas = (cfg.canvas_height, cfg.canvas_width);

    for attempt in 1..=cfg.max_retries {
        if !assign_motion(&mut rng, cfg, &mut objects) {
            continue;
        }
        let amodal: Vec<Vec<Mask>> = (0..cfg.num_frames)
            .map(|t| objects.iter().map(|o| rasterize(o, t, canvas)).collect())
            .collect();
        let visible: Vec<Vec<Mask>> = amodal
            .iter()
            .map(|masks| visible_from_amodal(masks, &objects))
            .collect();
        if acceptance_failure(&objects, &amodal, &visible).is_some() {
            continue;
        }
        let flows = (0..cfg.num_frames)
            .map(|t| {
                objects
                    .iter()
                    .zip(&visible[t])
                    .map(|(o, v)| {
                        let (dx, dy) = o.displacement(t);
                        FlowField::on_support(v, dx as f32, dy as f32)
                    })
                    .collect()
            })
            .collect();
        let frames = visible.iter().map(|v| render_frame(v, &objects)).collect();
        let depth_order = vec![objects.iter().map(|o| o.depth).collect(); cfg.num_frames];
        return Ok(VideoSample {
            frames,
            amodal,
            visible,
            flows,
            depth_order,
            manifest: VideoManifest {
                format_version: FORMAT_VERSION,
                seed: cfg.seed,
                config: cfg.clone(),
                objects,
                attempts: attempt,
            },
        });
    }
    Err(Error::Generation {
        seed: cfg.seed,
        reason: format!(
            "no trajectory satisfied coverage and occlusion constraints in {} attempts",
            cfg.max_retries
        ),
    })
}

/// Samples converging trajectories and a depth permutation. Returns false when an
/// object would leave the canvas.
fn assign_motion(rng: &mut ChaCha8Rng, cfg: &GenConfig, objects: &mut [PolygonObject]) -> bool {
    let (h, w) = (cfg.canvas_height as f32, cfg.canvas_width as f32);
    let t_frames = cfg.num_frames as f32;
    let meet_t = rng.random_range(0.3..=0.7) * (t_frames - 1.0);
    let meet = (
        rng.random_range(0.35..=0.65) * w,
        rng.random_range(0.35..=0.65) * h,
    );
    let mut depths: Vec<usize> = (0..objects.len()).collect();
    depths.shuffle(rng);
    let mut ok = true;
    for (obj, depth) in objects.iter_mut().zip(depths) {
        let r = obj.max_radius();
        let heading = rng.random::<f32>() * std::f32::consts::TAU;
        let speed = sample_range(rng, cfg.speed_range.0, cfg.speed_range.1);
        let v = (speed * heading.cos(), speed * heading.sin());
        let off_r = 0.6 * r * rng.random::<f32>().sqrt();
        let off_a = rng.random::<f32>() * std::f32::consts::TAU;
        let start = (meet.0 + off_r * off_a.cos(), meet.1 + off_r * off_a.sin());
        let reach = r.ceil() as i32 + 1;
        obj.center_trajectory = (0..=cfg.num_frames)
            .map(|t| {
                let dt = t as f32 - meet_t;
                let jx = cfg.jitter * (2.0 * rng.random::<f32>() - 1.0);
                let jy = cfg.jitter * (2.0 * rng.random::<f32>() - 1.0);
                (
                    (start.0 + v.0 * dt + jx).round() as i32,
                    (start.1 + v.1 * dt + jy).round() as i32,
                )
            })
            .collect();
        ok &= obj.center_trajectory[..cfg.num_frames]
            .iter()
            .all(|&(x, y)| {
                x - reach >= 0
                    && y - reach >= 0
                    && x + reach < cfg.canvas_width as i32
                    && y + reach < cfg.canvas_height as i32
            });
        obj.velocity = v;
        obj.depth = depth;
    }
    ok
}

/// `V^k = M^k` minus the union of every mask in front of `k`.
pub fn visible_from_amodal(amodal: &[Mask], objects: &[PolygonObject]) -> Vec<Mask> {
    amodal
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mut v = m.clone();
            for (j, other) in amodal.iter().enumerate() {
                if objects[j].depth < objects[k].depth {
                    v = v.and_not(other);
                }
            }
            v
        })
        .collect()
}

/// First violated generation constraint, if any.
fn acceptance_failure(
    objects: &[PolygonObject],
    amodal: &[Vec<Mask>],
    visible: &[Vec<Mask>],
) -> Option<String> {
    let num_frames = amodal.len();
    for k in 0..objects.len() {
        if (0..num_frames).any(|t| visible[t][k].is_empty_mask()) {
            return Some(format!("object {k} fully hidden in some frame"));
        }
        if !covers_canonical_shape(objects, amodal, visible, k) {
            return Some(format!("object {k} is never fully revealed over time"));
        }
    }
    let always_occluded =
        (0..objects.len()).any(|k| (0..num_frames).all(|t| visible[t][k] != amodal[t][k]));
    if !always_occluded {
        return Some("every object shows its full shape in some frame".into());
    }
    None
}

fn covers_canonical_shape(
    objects: &[PolygonObject],
    amodal: &[Vec<Mask>],
    visible: &[Vec<Mask>],
    k: usize,
) -> bool {
    canonical_union(objects, visible, k) == amodal[0][k]
}

/// Union over frames of `V_t^k` translated back to frame 0.
pub fn canonical_union(objects: &[PolygonObject], visible: &[Vec<Mask>], k: usize) -> Mask {
    let (x0, y0) = objects[k].center_trajectory[0];
    let (h, w) = visible[0][k].shape();
    let mut union = Mask::new(h, w);
    for (t, frame) in visible.iter().enumerate() {
        let (xt, yt) = objects[k].center_trajectory[t];
        let back = frame[k].shifted((y0 - yt) as i64, (x0 - xt) as i64);
        union = union.or(&back);
    }
    union
}

fn render_frame(visible: &[Mask], objects: &[PolygonObject]) -> RgbFrame {
    let (h, w) = visible[0].shape();
    Grid::from_fn(h, w, |y, x| {
        visible
            .iter()
            .zip(objects)
            .find(|(v, _)| v.get(y, x) != 0)
            .map_or(BACKGROUND_COLOR, |(_, o)| o.color)
    })
}

/// Checks every sample invariant; returns the list of violations.
pub fn verify_sample(sample: &VideoSample) -> std::result::Result<(), Vec<String>> {
    let mut problems = Vec::new();
    let objects = &sample.manifest.objects;
    let num_objects = sample.num_objects();
    let mut depths: Vec<usize> = objects.iter().map(|o| o.depth).collect();
    depths.sort_unstable();
    if depths != (0..num_objects).collect::<Vec<_>>() {
        problems.push(format!("depth ranks {depths:?} are not a permutation"));
    }
    for t in 0..sample.num_frames() {
        for k in 0..num_objects {
            let v = &sample.visible[t][k];
            let m = &sample.amodal[t][k];
            if !v.is_subset_of(m) {
                problems.push(format!("t={t} k={k}: visible not within amodal"));
            }
            for j in (k + 1)..num_objects {
                if !v.and(&sample.visible[t][j]).is_empty_mask() {
                    problems.push(format!("t={t}: visible masks {k} and {j} overlap"));
                }
            }
            let mut expected = m.clone();
            for j in 0..num_objects {
                if sample.depth_order[t][j] < sample.depth_order[t][k] {
                    expected = expected.and_not(&sample.amodal[t][j]);
                }
            }
            if &expected != v {
                problems.push(format!(
                    "t={t} k={k}: visible mask disagrees with depth order"
                ));
            }
            let (dx, dy) = sample.displacement(t, k);
            let flow = &sample.flows[t][k];
            let flow_ok = (0..v.height()).all(|y| {
                (0..v.width()).all(|x| {
                    let on = v.get(y, x) != 0;
                    let (fx, fy) = (flow.dx.get(y, x), flow.dy.get(y, x));
                    if on {
                        fx == dx as f32 && fy == dy as f32
                    } else {
                        fx == 0.0 && fy == 0.0
                    }
                })
            });
            if !flow_ok {
                problems.push(format!("t={t} k={k}: flow is not the rigid displacement"));
            }
        }
    }
    for k in 0..num_objects {
        if canonical_union(objects, &sample.visible, k) != sample.amodal[0][k] {
            problems.push(format!("object {k}: coverage violated"));
        }
    }
    let always_occluded = (0..num_objects)
        .any(|k| (0..sample.num_frames()).all(|t| sample.visible[t][k] != sample.amodal[t][k]));
    if !always_occluded {
        problems.push("no object stays partially occluded in every frame".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

/// Seed of the `index`-th video of a dataset generated from `base_seed`.
pub fn video_seed(base_seed: u64, index: usize) -> u64 {
    base_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// `count` videos with seeds `video_seed(base_seed, 0..count)`; `cfg.seed` is ignored.
pub fn generate_dataset(cfg: &GenConfig, base_seed: u64, count: usize) -> Result<Vec<VideoSample>> {
    (0..count)
        .map(|i| generate_video(&cfg.clone().with_seed(video_seed(base_seed, i))))
        .collect()
}
