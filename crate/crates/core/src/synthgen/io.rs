//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.json            DatasetManifest
//! <root>/video_0000/manifest.json
//! <root>/video_0000/frame_00.png            RGB frame
//! <root>/video_0000/amodal_t00_k0.png       8-bit mask, 0 or 255
//! <root>/video_0000/visible_t00_k0.png
//! <root>/video_0000/flow.bin                16-byte header + f32 LE [T][K][2][H][W]
//! ```
//!
//! The flow header is `b"SVFL"`, then little-endian `u16` version, T, K, H, W and a
//! zero `u16`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{GenConfig, RgbFrame, VideoManifest, VideoSample, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid, Mask};
use crate::warp::FlowField;

pub const FLOW_MAGIC: &[u8; 4] = b"SVFL";
pub const FLOW_VERSION: u16 = 1;
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const VIDEO_MANIFEST: &str = "manifest.json";
pub const FLOW_FILE: &str = "flow.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub base_seed: u64,
    pub config: GenConfig,
    pub videos: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VideoManifestFile {
    #[serde(flatten)]
    manifest: VideoManifest,
    depth_order: Vec<Vec<usize>>,
}

pub fn video_dir_name(index: usize) -> String {
    format!("video_{index:04}")
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:02}.png")
}

fn mask_name(kind: &str, t: usize, k: usize) -> String {
    format!("{kind}_t{t:02}_k{k}.png")
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path)
        .map_err(|e| Error::format(path, format!("cannot write image: {e}")))
}

fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    });
    save_png(&img, path)
}

fn read_mask(path: &Path, shape: (usize, usize)) -> Result<Mask> {
    if !path.exists() {
        return Err(Error::format(path, "missing mask file"));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("cannot decode mask: {e}")))?
        .to_luma8();
    if (img.height() as usize, img.width() as usize) != shape {
        return Err(Error::format(
            path,
            format!(
                "mask is {}x{}, expected {}x{}",
                img.height(),
                img.width(),
                shape.0,
                shape.1
            ),
        ));
    }
    let mut data = Vec::with_capacity(shape.0 * shape.1);
    for p in img.pixels() {
        match p.0[0] {
            0 => data.push(0),
            255 => data.push(1),
            v => {
                return Err(Error::format(
                    path,
                    format!("mask value {v} is neither 0 nor 255"),
                ))
            }
        }
    }
    Mask::from_vec(shape.0, shape.1, data)
}

fn write_frame(frame: &RgbFrame, path: &Path) -> Result<()> {
    let (h, w) = frame.shape();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(frame.get(y as usize, x as usize))
    });
    save_png(&img, path)
}

fn read_frame(path: &Path, shape: (usize, usize)) -> Result<RgbFrame> {
    if !path.exists() {
        return Err(Error::format(path, "missing frame file"));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("cannot decode frame: {e}")))?
        .to_rgb8();
    if (img.height() as usize, img.width() as usize) != shape {
        return Err(Error::format(
            path,
            "frame size does not match the manifest",
        ));
    }
    Grid::from_vec(shape.0, shape.1, img.pixels().map(|p| p.0).collect())
}

/// Serializes flows `[t][k]` into the binary layout.
pub fn encode_flows(flows: &[Vec<FlowField>]) -> Vec<u8> {
    let t_len = flows.len();
    let k_len = flows.first().map_or(0, Vec::len);
    let (h, w) = flows
        .first()
        .and_then(|f| f.first())
        .map_or((0, 0), FlowField::shape);
    let mut out = Vec::with_capacity(16 + t_len * k_len * 2 * h * w * 4);
    out.extend_from_slice(FLOW_MAGIC);
    for v in [
        FLOW_VERSION,
        t_len as u16,
        k_len as u16,
        h as u16,
        w as u16,
        0,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for frame in flows {
        for f in frame {
            for plane in [&f.dx, &f.dy] {
                for v in plane.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Parses the binary flow layout; `path` is only used in error messages.
pub fn decode_flows(bytes: &[u8], path: &Path) -> Result<(Vec<Vec<FlowField>>, [usize; 4])> {
    if bytes.len() < 16 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "bad flow header magic"));
    }
    let field = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    let version = field(0) as u16;
    if version != FLOW_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported flow version {version}"),
        ));
    }
    let dims = [field(1), field(2), field(3), field(4)];
    let [t_len, k_len, h, w] = dims;
    let expected = 16 + t_len * k_len * 2 * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "flow file has {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    let mut values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut plane =
        || -> Result<Field> { Field::from_vec(h, w, values.by_ref().take(h * w).collect()) };
    let mut flows = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut frame = Vec::with_capacity(k_len);
        for _ in 0..k_len {
            let dx = plane()?;
            let dy = plane()?;
            frame.push(FlowField { dx, dy });
        }
        flows.push(frame);
    }
    Ok((flows, dims))
}

pub fn write_video(sample: &VideoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = VideoManifestFile {
        manifest: sample.manifest.clone(),
        depth_order: sample.depth_order.clone(),
    };
    let path = dir.join(VIDEO_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    for (t, frame) in sample.frames.iter().enumerate() {
        write_frame(frame, &dir.join(frame_name(t)))?;
        for k in 0..sample.num_objects() {
            write_mask(&sample.amodal[t][k], &dir.join(mask_name("amodal", t, k)))?;
            write_mask(&sample.visible[t][k], &dir.join(mask_name("visible", t, k)))?;
        }
    }
    let path = dir.join(FLOW_FILE);
    fs::write(&path, encode_flows(&sample.flows)).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_video(dir: &Path) -> Result<VideoSample> {
    let path = dir.join(VIDEO_MANIFEST);
    let text = fs::read(&path).map_err(|_| Error::format(&path, "missing video manifest"))?;
    let file: VideoManifestFile = serde_json::from_slice(&text)
        .map_err(|e| Error::format(&path, format!("corrupt manifest: {e}")))?;
    let manifest = file.manifest;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let cfg = &manifest.config;
    let shape = (cfg.canvas_height, cfg.canvas_width);
    let (t_len, k_len) = (cfg.num_frames, cfg.num_objects);
    if manifest.objects.len() != k_len || file.depth_order.len() != t_len {
        return Err(Error::format(
            &path,
            "object or frame count disagrees with the config",
        ));
    }

    let flow_path = dir.join(FLOW_FILE);
    let bytes = fs::read(&flow_path).map_err(|_| Error::format(&flow_path, "missing flow file"))?;
    let (flows, dims) = decode_flows(&bytes, &flow_path)?;
    if dims != [t_len, k_len, shape.0, shape.1] {
        return Err(Error::format(
            &flow_path,
            format!(
                "flow dims {dims:?} do not match manifest [{t_len}, {k_len}, {}, {}]",
                shape.0, shape.1
            ),
        ));
    }

    let mut frames = Vec::with_capacity(t_len);
    let mut amodal = Vec::with_capacity(t_len);
    let mut visible = Vec::with_capacity(t_len);
    for t in 0..t_len {
        frames.push(read_frame(&dir.join(frame_name(t)), shape)?);
        amodal.push(
            (0..k_len)
                .map(|k| read_mask(&dir.join(mask_name("amodal", t, k)), shape))
                .collect::<Result<Vec<_>>>()?,
        );
        visible.push(
            (0..k_len)
                .map(|k| read_mask(&dir.join(mask_name("visible", t, k)), shape))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(VideoSample {
        frames,
        amodal,
        visible,
        flows,
        depth_order: file.depth_order,
        manifest,
    })
}

pub fn write_dataset(
    samples: &[VideoSample],
    base_seed: u64,
    config: &GenConfig,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut videos = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = video_dir_name(i);
        write_video(s, &dir.join(&name))?;
        videos.push(name);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        base_seed,
        config: config.clone(),
        videos,
    };
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read(&path).map_err(|_| Error::format(&path, "missing dataset manifest"))?;
    serde_json::from_slice(&text)
        .map_err(|e| Error::format(&path, format!("corrupt manifest: {e}")))
}

pub fn video_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dataset_manifest(dir)?
        .videos
        .iter()
        .map(|v| dir.join(v))
        .collect())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VideoSample>> {
    video_dirs(dir)?.iter().map(|d| read_video(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_video;

    fn sample() -> VideoSample {
        let cfg = GenConfig {
            num_frames: 16,
            ..GenConfig::desk().with_seed(21)
        };
        generate_video(&cfg).unwrap()
    }

    #[test]
    fn video_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        write_video(&s, dir.path()).unwrap();
        assert_eq!(read_video(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_flow_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_video(&sample(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(FLOW_FILE)).unwrap();
        let err = read_video(dir.path()).unwrap_err();
        match err {
            Error::Format { path, .. } => assert!(path.ends_with(FLOW_FILE)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_flow_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_video(&sample(), dir.path()).unwrap();
        let p = dir.path().join(FLOW_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_video(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupt_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_video(&sample(), dir.path()).unwrap();
        fs::write(dir.path().join(VIDEO_MANIFEST), b"{not json").unwrap();
        assert!(matches!(read_video(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn flow_header_layout() {
        let s = sample();
        let bytes = encode_flows(&s.flows);
        assert_eq!(&bytes[..4], b"SVFL");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 16);
        assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 3);
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 64);
        assert_eq!(u16::from_le_bytes([bytes[12], bytes[13]]), 64);
        assert_eq!(bytes.len(), 16 + 16 * 3 * 2 * 64 * 64 * 4);
    }

    #[test]
    fn stored_seed_regenerates_sample() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        write_dataset(std::slice::from_ref(&s), 21, &s.manifest.config, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap().remove(0);
        let regenerated =
            generate_video(&back.manifest.config.clone().with_seed(back.manifest.seed)).unwrap();
        assert_eq!(regenerated, back);
    }
}
