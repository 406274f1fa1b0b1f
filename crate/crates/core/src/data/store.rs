//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.txt                 `clip_id n_frames key_index` per line
//! <dir>/clip_00000/frame_000.tnsr    u8 [3, H, W]
//! <dir>/clip_00000/label_key.tnsr    u8 [H, W]
//! <dir>/clip_00000/gt_000.tnsr       u8 [H, W], optional, one per frame
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Clip, DataError, Dataset};
use crate::tensor::io::{Payload, Tnsr, TnsrError};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn clip_dir(root: &Path, clip_id: usize) -> PathBuf {
    root.join(format!("clip_{clip_id:05}"))
}

fn save_u8(path: &Path, dims: Vec<usize>, data: &[u8]) -> Result<(), DataError> {
    Tnsr::u8(dims, data.to_vec()).save(path).map_err(io_err(path))
}

fn load_u8(path: &Path, dims: &[usize]) -> Result<Vec<u8>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let t = Tnsr::load(path).map_err(|e| match e {
        TnsrError::BadMagic(_) => DataError::BadMagic(path.to_path_buf()),
        TnsrError::SizeMismatch { expected, actual } => DataError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual,
        },
        source => DataError::Tnsr {
            path: path.to_path_buf(),
            source,
        },
    })?;
    if t.dims != dims {
        return Err(DataError::DimMismatch {
            path: path.to_path_buf(),
            expected: dims.to_vec(),
            actual: t.dims,
        });
    }
    match t.payload {
        Payload::U8(v) => Ok(v),
        Payload::F32(_) => Err(DataError::DimMismatch {
            path: path.to_path_buf(),
            expected: dims.to_vec(),
            actual: t.dims,
        }),
    }
}

pub fn write_dataset(clips: &[Clip], dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for clip in clips {
        manifest.push_str(&format!("{} {} {}\n", clip.clip_id, clip.len(), clip.key_index));
        let cdir = clip_dir(dir, clip.clip_id);
        fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
        let (h, w) = (clip.height, clip.width);
        for (t, f) in clip.frames.iter().enumerate() {
            save_u8(&cdir.join(format!("frame_{t:03}.tnsr")), vec![3, h, w], f)?;
        }
        save_u8(&cdir.join("label_key.tnsr"), vec![h, w], &clip.key_label)?;
        if let Some(gt) = &clip.gt_all {
            for (t, g) in gt.iter().enumerate() {
                save_u8(&cdir.join(format!("gt_{t:03}.tnsr")), vec![h, w], g)?;
            }
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io_err(&path))
}

fn frame_dims(path: &Path) -> Result<(usize, usize), DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    // Only the header is needed; a short payload still reports its dims.
    let mut head = [0u8; 64];
    let n = std::io::Read::read(&mut f, &mut head).map_err(io_err(path))?;
    if n < 4 || &head[..4] != b"TAFT" {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    let rank = head.get(9).copied().unwrap_or(0) as usize;
    if rank != 3 || n < 10 + 4 * rank {
        return Err(DataError::DimMismatch {
            path: path.to_path_buf(),
            expected: vec![3, 0, 0],
            actual: vec![rank],
        });
    }
    let dim = |i: usize| u32::from_le_bytes(head[10 + 4 * i..14 + 4 * i].try_into().unwrap()) as usize;
    Ok((dim(1), dim(2)))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.txt");
    if !mpath.exists() {
        return Err(DataError::MissingFile(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| DataError::Manifest {
            path: mpath.clone(),
            line: i + 1,
            msg,
        };
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|f| f.parse().map_err(|_| bad(format!("bad field {f:?}"))))
            .collect::<Result<_, _>>()?;
        let [clip_id, n_frames, key_index] = fields[..] else {
            return Err(bad(format!("expected `clip_id n_frames key_index`, got {line:?}")));
        };
        if n_frames == 0 || n_frames % 2 == 0 || key_index != n_frames / 2 {
            return Err(bad(format!(
                "{n_frames} frames with key {key_index}: key frame must be the centre"
            )));
        }
        let cdir = clip_dir(dir, clip_id);
        let (h, w) = frame_dims(&cdir.join("frame_000.tnsr"))?;
        let frames = (0..n_frames)
            .map(|t| load_u8(&cdir.join(format!("frame_{t:03}.tnsr")), &[3, h, w]).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        let key_label = Arc::new(load_u8(&cdir.join("label_key.tnsr"), &[h, w])?);
        let gt_all = if cdir.join("gt_000.tnsr").exists() {
            Some(
                (0..n_frames)
                    .map(|t| load_u8(&cdir.join(format!("gt_{t:03}.tnsr")), &[h, w]).map(Arc::new))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        clips.push(Clip {
            clip_id,
            height: h,
            width: w,
            frames,
            key_index,
            key_label,
            gt_all,
        });
    }
    let dirs = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .filter(|e| e.file_name().to_string_lossy().starts_with("clip_") && e.path().is_dir())
        .count();
    if dirs != clips.len() {
        return Err(DataError::Manifest {
            path: mpath,
            line: 0,
            msg: format!("manifest lists {} clips but {dirs} clip directories exist", clips.len()),
        });
    }
    Ok(Dataset::new(clips))
}
