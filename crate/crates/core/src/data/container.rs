use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EpisodeMeta, EpisodeRecord, Session};
use crate::error::{Error, Result};
use crate::image::Frame;
use crate::motion::{f32_bytes, read_f32_file, read_trajectories, write_trajectories};

const FORMAT: &str = "swm-episode";
const VERSION: u32 = 1;
const TRAJ_DIR: &str = "trajectories";

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct StreamEntry {
    name: String,
    file: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    t: usize,
    h: usize,
    w: usize,
    action_dim: usize,
    meta: EpisodeMeta,
    streams: Vec<StreamEntry>,
    trajectories: Option<String>,
}

fn stream(name: &str, dtype: &str, shape: Vec<usize>) -> StreamEntry {
    StreamEntry { name: name.into(), file: format!("{name}.bin"), dtype: dtype.into(), shape }
}

/// Writes into a sibling temporary directory, then renames it into place.
pub(crate) fn write_atomically(path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no final component", path.display())))?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put(dir: &Path, file: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(file);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
}

fn write_container(path: &Path, rec: &EpisodeRecord, segments: Option<&[u32]>) -> Result<()> {
    let (t, h, w) = (rec.len(), rec.height(), rec.width());
    let mut streams = vec![
        stream("frames", "uint8", vec![t, h, w, 3]),
        stream("actions", "float32", vec![t, rec.action_dim]),
        stream("rewards", "float32", vec![t]),
    ];
    if segments.is_some() {
        streams.push(stream("segments", "uint32", vec![t]));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        t,
        h,
        w,
        action_dim: rec.action_dim,
        meta: rec.meta.clone(),
        streams,
        trajectories: rec.trajectories.as_ref().map(|_| TRAJ_DIR.to_string()),
    };
    write_atomically(path, |dir| {
        put(dir, "manifest.json", serde_json::to_string_pretty(&manifest).expect("serializable").as_bytes())?;
        let frames: Vec<u8> = rec.frames.iter().flat_map(|f| f.data.iter().copied()).collect();
        put(dir, "frames.bin", &frames)?;
        put(dir, "actions.bin", &f32_bytes(&rec.actions))?;
        put(dir, "rewards.bin", &f32_bytes(&rec.rewards))?;
        if let Some(s) = segments {
            put(dir, "segments.bin", &s.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>())?;
        }
        if let Some(tr) = &rec.trajectories {
            write_trajectories(tr, &dir.join(TRAJ_DIR))?;
        }
        Ok(())
    })
}

fn read_container(path: &Path) -> Result<(EpisodeRecord, Option<Vec<u32>>)> {
    let mp = path.join("manifest.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::format(&mp, format!("missing or unreadable manifest: {e}")))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mp, format!("corrupt manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::format(&mp, format!("unsupported container `{}` version {}", m.format, m.version)));
    }
    if m.t == 0 || m.h == 0 || m.w == 0 {
        return Err(Error::format(&mp, "empty episode dimensions"));
    }
    let find = |name: &str, dtype: &str, shape: Vec<usize>| -> Result<PathBuf> {
        let s = m.streams.iter().find(|s| s.name == name).ok_or_else(|| Error::format(&mp, format!("missing stream `{name}`")))?;
        if s.dtype != dtype {
            return Err(Error::format(&mp, format!("stream `{name}` has dtype {}, expected {dtype}", s.dtype)));
        }
        if s.shape != shape {
            return Err(Error::format(&mp, format!("stream `{name}` has shape {:?}, expected {shape:?}", s.shape)));
        }
        if s.file.contains('/') || s.file.contains('\\') {
            return Err(Error::format(&mp, format!("stream `{name}` points outside the container")));
        }
        Ok(path.join(&s.file))
    };
    let (t, h, w, ad) = (m.t, m.h, m.w, m.action_dim);
    let fp = find("frames", "uint8", vec![t, h, w, 3])?;
    let bytes = fs::read(&fp).map_err(|e| Error::format(&fp, format!("missing or unreadable stream `frames`: {e}")))?;
    if bytes.len() != t * h * w * 3 {
        return Err(Error::format(&fp, format!("stream `frames` holds {} bytes, expected {} ({t} frames)", bytes.len(), t * h * w * 3)));
    }
    let frames = bytes.chunks_exact(h * w * 3).map(|c| Frame { height: h, width: w, data: c.to_vec() }).collect();
    let actions = read_f32_file(&find("actions", "float32", vec![t, ad])?, t * ad, "actions")?;
    let rewards = read_f32_file(&find("rewards", "float32", vec![t])?, t, "rewards")?;
    let segments = if m.streams.iter().any(|s| s.name == "segments") {
        let sp = find("segments", "uint32", vec![t])?;
        let b = fs::read(&sp).map_err(|e| Error::format(&sp, format!("missing or unreadable stream `segments`: {e}")))?;
        if b.len() != t * 4 {
            return Err(Error::format(&sp, format!("stream `segments` holds {} bytes, expected {}", b.len(), t * 4)));
        }
        Some(b.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    } else {
        None
    };
    let trajectories = match &m.trajectories {
        Some(d) => Some(read_trajectories(&path.join(d))?),
        None => None,
    };
    let rec = EpisodeRecord::new(frames, actions, ad, rewards, trajectories, m.meta).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((rec, segments))
}

/// Writes an episode directory (`manifest.json` plus one binary per stream).
pub fn write_episode(rec: &EpisodeRecord, path: &Path) -> Result<()> {
    write_container(path, rec, None)
}

pub fn read_episode(path: &Path) -> Result<EpisodeRecord> {
    read_container(path).map(|(r, _)| r)
}

/// Sessions use the episode container plus a `segments` stream.
pub fn write_session(s: &Session, path: &Path) -> Result<()> {
    s.validate()?;
    let rec = EpisodeRecord::new(s.frames.clone(), s.actions.clone(), s.action_dim, s.rewards.clone(), None, s.meta.clone())?;
    write_container(path, &rec, Some(&s.segment_ids))
}

pub fn read_session(path: &Path) -> Result<Session> {
    let (r, seg) = read_container(path)?;
    let segment_ids = seg.ok_or_else(|| Error::format(path.join("manifest.json"), "missing stream `segments`"))?;
    Ok(Session { frames: r.frames, actions: r.actions, action_dim: r.action_dim, rewards: r.rewards, segment_ids, meta: r.meta })
}

/// Writes `episode_00000`, `episode_00001`, ... under `dir`.
pub fn write_dataset(records: &[EpisodeRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = dir.join(format!("episode_{i:05}"));
            write_episode(r, &p).map(|_| p)
        })
        .collect()
}

/// Sub-directories of `dir` holding a `manifest.json`, sorted by name.
pub fn list_episodes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let hidden = p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if p.is_dir() && !hidden && p.join("manifest.json").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
