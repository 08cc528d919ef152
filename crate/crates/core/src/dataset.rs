//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt                 format_version, num_videos, one `video=` line per video
//! <root>/<video_id>/manifest.txt      format_version, seed, shapes, dtypes, sprite kinds
//! <root>/<video_id>/frames.bin        f32  T x H x W x 3
//! <root>/<video_id>/masks.bin         u8   T x H x W
//! <root>/<video_id>/flow.bin          f32  T x H x W x 2
//! <root>/<video_id>/depth.bin         f32  T x H x W
//! <root>/<video_id>/motion/<t>.bin    u8   C_t x H x W
//! ```
//!
//! Each array file is a safetensors container holding one tensor named
//! `data` (little endian, row major), readable from Python with
//! `safetensors.numpy.load_file`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor, WithDType};
use ndarray::{Array3, Array4};
use ndarray::{ArrayBase, Data, Dimension, IxDyn};

use crate::error::{Error, Result};
use crate::synthdata::{SpriteKind, VideoSample};

pub const FORMAT_VERSION: u32 = 1;

pub fn video_id(index: usize) -> String {
    format!("video_{index:05}")
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("malformed manifest line `{l}`")))
        })
        .collect()
}

pub fn check_format_version(entries: &[(String, String)], what: &str) -> Result<()> {
    match entries.iter().find(|(k, _)| k == "format_version") {
        Some((_, v)) if v == &FORMAT_VERSION.to_string() => Ok(()),
        Some((_, v)) => Err(Error::Format(format!(
            "{what}: unsupported format_version {v}, expected {FORMAT_VERSION}"
        ))),
        None => Err(Error::Format(format!("{what}: missing format_version"))),
    }
}

fn write_video(sample: &VideoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("motion"))?;
    write_array(&dir.join("frames.bin"), &sample.frames)?;
    write_array(&dir.join("masks.bin"), &sample.instance_masks)?;
    write_array(&dir.join("flow.bin"), &sample.flow)?;
    write_array(&dir.join("depth.bin"), &sample.depth)?;
    for (t, segs) in sample.motion_segments.iter().enumerate() {
        write_array(&dir.join("motion").join(format!("{t}.bin")), segs)?;
    }
    let kinds: Vec<&str> = sample.instance_kinds.iter().map(|k| k.name()).collect();
    let counts: Vec<String> = sample.motion_segments.iter().map(|m| m.dim().0.to_string()).collect();
    let manifest = format!(
        "format_version={FORMAT_VERSION}\nseed={}\nframes=f32:{}\nmasks=u8:{}\nflow=f32:{}\ndepth=f32:{}\nmotion_counts={}\nkinds={}\n",
        sample.seed,
        shape_string(sample.frames.shape()),
        shape_string(sample.instance_masks.shape()),
        shape_string(sample.flow.shape()),
        shape_string(sample.depth.shape()),
        counts.join(","),
        kinds.join(","),
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

const ARRAY_KEY: &str = "data";

fn write_array<A, S, D>(path: &Path, array: &ArrayBase<S, D>) -> Result<()>
where
    A: WithDType,
    S: Data<Elem = A>,
    D: Dimension,
{
    let values: Vec<A> = array.iter().copied().collect();
    let tensor = Tensor::from_vec(values, array.shape(), &Device::Cpu)?;
    candle_core::safetensors::save(&std::collections::HashMap::from([(ARRAY_KEY, tensor)]), path)?;
    Ok(())
}

fn load<A: WithDType, D: Dimension>(path: &Path) -> Result<ndarray::Array<A, D>> {
    let bad = |what: String| Error::Format(format!("{}: {what}", path.display()));
    if !path.is_file() {
        return Err(bad("missing array file".into()));
    }
    let mut tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| bad(e.to_string()))?;
    let tensor = tensors
        .remove(ARRAY_KEY)
        .ok_or_else(|| bad(format!("no `{ARRAY_KEY}` tensor")))?;
    if tensor.dtype() != A::DTYPE {
        return Err(bad(format!("holds {:?}, expected {:?}", tensor.dtype(), A::DTYPE)));
    }
    let shape = tensor.dims().to_vec();
    let values = tensor.flatten_all()?.to_vec1::<A>()?;
    ndarray::Array::from_shape_vec(IxDyn(&shape), values)
        .map_err(|e| bad(e.to_string()))?
        .into_dimensionality::<D>()
        .map_err(|e| bad(format!("unexpected rank: {e}")))
}

fn expect_shape(entries: &BTreeMap<String, String>, key: &str, dtype: &str, actual: &[usize]) -> Result<()> {
    let declared = entries
        .get(key)
        .ok_or_else(|| Error::Format(format!("manifest missing `{key}`")))?;
    let expected = format!("{dtype}:{}", shape_string(actual));
    if declared != &expected {
        return Err(Error::Format(format!(
            "`{key}` declared as {declared} but file holds {expected}"
        )));
    }
    Ok(())
}

fn read_video(dir: &Path) -> Result<VideoSample> {
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("manifest.txt").display())))?;
    let pairs = parse_manifest(&text)?;
    check_format_version(&pairs, &dir.display().to_string())?;
    let entries: BTreeMap<String, String> = pairs.into_iter().collect();

    let frames: Array4<f32> = load(&dir.join("frames.bin"))?;
    let instance_masks: Array3<u8> = load(&dir.join("masks.bin"))?;
    let flow: Array4<f32> = load(&dir.join("flow.bin"))?;
    let depth: Array3<f32> = load(&dir.join("depth.bin"))?;
    expect_shape(&entries, "frames", "f32", frames.shape())?;
    expect_shape(&entries, "masks", "u8", instance_masks.shape())?;
    expect_shape(&entries, "flow", "f32", flow.shape())?;
    expect_shape(&entries, "depth", "f32", depth.shape())?;

    let t_len = frames.dim().0;
    let mut motion_segments = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let m: Array3<u8> = load(&dir.join("motion").join(format!("{t}.bin")))?;
        motion_segments.push(m);
    }
    let counts: Vec<String> = motion_segments.iter().map(|m| m.dim().0.to_string()).collect();
    if entries.get("motion_counts").map(String::as_str) != Some(counts.join(",").as_str()) {
        return Err(Error::Format(format!(
            "{}: motion segment counts disagree with manifest",
            dir.display()
        )));
    }

    let seed = entries
        .get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("manifest missing numeric `seed`".into()))?;
    let instance_kinds = entries
        .get("kinds")
        .map(|s| {
            s.split(',')
                .filter(|k| !k.is_empty())
                .map(|k| SpriteKind::parse(k).ok_or_else(|| Error::Format(format!("unknown sprite kind `{k}`"))))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?
        .ok_or_else(|| Error::Format("manifest missing `kinds`".into()))?;

    Ok(VideoSample {
        seed,
        frames,
        instance_masks,
        flow,
        depth,
        motion_segments,
        instance_kinds,
    })
}

/// Writes `samples` under `root`, one directory per video plus a root manifest.
pub fn write_dataset(samples: &[VideoSample], root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = format!("format_version={FORMAT_VERSION}\nnum_videos={}\n", samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let id = video_id(i);
        write_video(sample, &root.join(&id))?;
        manifest.push_str(&format!("video={id}\n"));
    }
    fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Lists the video ids named by the root manifest.
pub fn read_video_ids(root: &Path) -> Result<Vec<String>> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let pairs = parse_manifest(&text)?;
    check_format_version(&pairs, &path.display().to_string())?;
    let ids: Vec<String> = pairs
        .iter()
        .filter(|(k, _)| k == "video")
        .map(|(_, v)| v.clone())
        .collect();
    let declared: Option<usize> = pairs
        .iter()
        .find(|(k, _)| k == "num_videos")
        .and_then(|(_, v)| v.parse().ok());
    if declared != Some(ids.len()) {
        return Err(Error::Format(format!(
            "{}: num_videos does not match the listed videos",
            path.display()
        )));
    }
    Ok(ids)
}

/// Reads every video listed in the root manifest, in manifest order.
pub fn read_dataset(root: &Path) -> Result<Vec<VideoSample>> {
    read_video_ids(root)?
        .iter()
        .map(|id| read_video(&root.join(id)))
        .collect()
}

/// Like [`read_dataset`] but keeps the video ids.
pub fn read_dataset_with_ids(root: &Path) -> Result<Vec<(String, VideoSample)>> {
    read_video_ids(root)?
        .into_iter()
        .map(|id| {
            let v = read_video(&root.join(&id))?;
            Ok((id, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_video, SceneConfig};

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            generate_video(&SceneConfig {
                seed: 1,
                ..Default::default()
            })
            .unwrap(),
            generate_video(&SceneConfig {
                seed: 2,
                fraction_static: 1.0,
                ..Default::default()
            })
            .unwrap(),
        ];
        write_dataset(&samples, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        assert!(dir.path().join("manifest.txt").is_file());
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_video(&SceneConfig::default()).unwrap();
        write_dataset(&[s], dir.path()).unwrap();
        fs::remove_file(dir.path().join(video_id(0)).join("flow.bin")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn listed_but_absent_video_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        fs::write(
            dir.path().join("manifest.txt"),
            "format_version=1\nnum_videos=1\nvideo=video_00000\n",
        )
        .unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        fs::write(dir.path().join("manifest.txt"), "format_version=2\nnum_videos=0\n").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("format_version"));
    }

    #[test]
    fn corrupt_array_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_video(&SceneConfig::default()).unwrap();
        write_dataset(&[s], dir.path()).unwrap();
        fs::write(dir.path().join(video_id(0)).join("depth.bin"), b"garbage").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }
}
