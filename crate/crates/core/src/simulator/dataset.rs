//! Dataset clips: keyframes skip-sampled from rendered ground truth, plus
//! the event stream covering the clip.
//!
//! On-disk layout per clip:
//! `root/clip_NNNN/frames/FFFF.pgm`, `root/clip_NNNN/keyframes/KKKK.pgm`,
//! `root/clip_NNNN/events.evb`, `root/clip_NNNN/meta.json`.

use std::path::Path;

use crate::events::{parse_events, serialize_events, EventFormat, EventStream};
use crate::image::{read_pgm, write_pgm, Image};
use crate::{Error, Result};

use super::{render_scene, simulate_events, EsimConfig, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetClip {
    pub spec: SceneSpec,
    pub esim: EsimConfig,
    pub skip: usize,
    /// Keyframes at rendered indices `0, s+1, 2(s+1), ...`.
    pub keyframes: Vec<Image>,
    pub keyframe_indices: Vec<usize>,
    /// Timestamps of the keyframes, microseconds.
    pub frame_times: Vec<u64>,
    /// All rendered frames, retained for evaluation.
    pub ground_truth: Vec<Image>,
    pub gt_times: Vec<u64>,
    /// Events over `(t_first_keyframe, t_last_keyframe]`.
    pub events: EventStream,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ClipMeta {
    version: u32,
    spec: SceneSpec,
    esim: EsimConfig,
    skip: usize,
    keyframe_indices: Vec<usize>,
    frame_times: Vec<u64>,
    gt_times: Vec<u64>,
    n_ground_truth: usize,
    n_keyframes: usize,
    n_events: usize,
}

/// Rendered-frame indices for a generation window of `frames` output frames
/// spanning one keyframe interval of `skip` hidden frames: endpoints land on
/// the two keyframes, interior frames at the nearest rendered index.
pub fn span_frame_indices(skip: usize, frames: usize) -> Vec<usize> {
    assert!(frames >= 2);
    let span = (skip + 1) as f64;
    (0..frames)
        .map(|f| (f as f64 * span / (frames - 1) as f64).round() as usize)
        .collect()
}

/// Render a scene, derive events, and skip-sample keyframes.
pub fn make_clip(
    spec: &SceneSpec,
    esim: &EsimConfig,
    skip: usize,
    n_keyframes: usize,
) -> Result<DatasetClip> {
    if n_keyframes < 2 {
        return Err(Error::Argument("need at least 2 keyframes".into()));
    }
    let (ground_truth, gt_times) = render_scene(spec)?;
    let last_index = (n_keyframes - 1) * (skip + 1);
    if last_index >= ground_truth.len() {
        return Err(Error::Argument(format!(
            "scene renders {} frames but {n_keyframes} keyframes with skip {skip} need {}",
            ground_truth.len(),
            last_index + 1
        )));
    }
    let keyframe_indices: Vec<usize> = (0..n_keyframes).map(|i| i * (skip + 1)).collect();
    let keyframes = keyframe_indices
        .iter()
        .map(|&i| ground_truth[i].clone())
        .collect();
    let frame_times: Vec<u64> = keyframe_indices.iter().map(|&i| gt_times[i]).collect();
    let all_events = simulate_events(&ground_truth, &gt_times, esim)?;
    let events = all_events.slice(frame_times[0], *frame_times.last().unwrap())?;
    Ok(DatasetClip {
        spec: spec.clone(),
        esim: *esim,
        skip,
        keyframes,
        keyframe_indices,
        frame_times,
        ground_truth,
        gt_times,
        events,
    })
}

pub fn write_dataset(root: &Path, clips: &[DatasetClip]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, clip) in clips.iter().enumerate() {
        let dir = root.join(format!("clip_{i:04}"));
        let frames_dir = dir.join("frames");
        let key_dir = dir.join("keyframes");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        std::fs::create_dir_all(&key_dir).map_err(|e| Error::io(&key_dir, e))?;
        for (j, f) in clip.ground_truth.iter().enumerate() {
            write_pgm(&frames_dir.join(format!("{j:04}.pgm")), f)?;
        }
        for (j, f) in clip.keyframes.iter().enumerate() {
            write_pgm(&key_dir.join(format!("{j:04}.pgm")), f)?;
        }
        let ev_path = dir.join("events.evb");
        std::fs::write(&ev_path, serialize_events(&clip.events, EventFormat::Binary))
            .map_err(|e| Error::io(&ev_path, e))?;
        let meta = ClipMeta {
            version: 1,
            spec: clip.spec.clone(),
            esim: clip.esim,
            skip: clip.skip,
            keyframe_indices: clip.keyframe_indices.clone(),
            frame_times: clip.frame_times.clone(),
            gt_times: clip.gt_times.clone(),
            n_ground_truth: clip.ground_truth.len(),
            n_keyframes: clip.keyframes.len(),
            n_events: clip.events.len(),
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<Vec<DatasetClip>> {
    let mut clip_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("clip_"))
        })
        .collect();
    clip_dirs.sort();
    let mut clips = Vec::with_capacity(clip_dirs.len());
    for dir in clip_dirs {
        clips.push(read_clip(&dir)?);
    }
    Ok(clips)
}

fn read_clip(dir: &Path) -> Result<DatasetClip> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ClipMeta = serde_json::from_slice(&meta_bytes)?;
    if meta.version != 1 {
        return Err(Error::Integrity(format!(
            "{}: unsupported meta version {}",
            dir.display(),
            meta.version
        )));
    }
    let read_frames = |sub: &str, count: usize| -> Result<Vec<Image>> {
        let mut frames = Vec::with_capacity(count);
        for j in 0..count {
            frames.push(read_pgm(&dir.join(sub).join(format!("{j:04}.pgm")))?);
        }
        Ok(frames)
    };
    let ground_truth = read_frames("frames", meta.n_ground_truth)?;
    let keyframes = read_frames("keyframes", meta.n_keyframes)?;
    if meta.gt_times.len() != meta.n_ground_truth || meta.frame_times.len() != meta.n_keyframes {
        return Err(Error::Integrity(format!(
            "{}: meta frame counts disagree with timestamp lists",
            dir.display()
        )));
    }
    let ev_path = dir.join("events.evb");
    let ev_bytes = std::fs::read(&ev_path).map_err(|e| Error::io(&ev_path, e))?;
    let events = parse_events(
        &ev_bytes,
        EventFormat::Binary,
        (meta.spec.width, meta.spec.height),
    )?;
    if events.len() != meta.n_events {
        return Err(Error::Integrity(format!(
            "{}: events.evb holds {} records, meta says {}",
            dir.display(),
            events.len(),
            meta.n_events
        )));
    }
    Ok(DatasetClip {
        spec: meta.spec,
        esim: meta.esim,
        skip: meta.skip,
        keyframes,
        keyframe_indices: meta.keyframe_indices,
        frame_times: meta.frame_times,
        ground_truth,
        gt_times: meta.gt_times,
        events,
    })
}
