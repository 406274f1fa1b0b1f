//! Synthetic multi-rate clip data: the MovingShapes generator, the on-disk
//! dataset format, the key-frame/partner pair sampler and pair-consistent
//! augmentation.

mod augment;
mod store;
mod synth;

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::taf::{sample_offset, TafConfig};
use crate::tensor::io::TnsrError;
use crate::tensor::{Scalar, Tensor, TensorError};

pub use augment::{augment_pair, AugmentOpts, Transform};
pub use store::{read_dataset, write_dataset};
pub use synth::{gen_clip, gen_clips, render_labels, GenParams, PlacedShape, Scene, Shape};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{0}: not a TNSR file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: payload size mismatch, expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: dims {actual:?}, expected {expected:?}")]
    DimMismatch {
        path: PathBuf,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Tnsr { path: PathBuf, source: TnsrError },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("offset {n} from key frame {key} leaves clip {clip_id} of {len} frames")]
    OffsetOutOfClip {
        clip_id: usize,
        key: usize,
        n: i64,
        len: usize,
    },
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One clip of `2·n_h + 1` frames with its centre key frame annotated.
///
/// Frames are stored as u8 `[3, H, W]`, labels as u8 `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_id: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Arc<Vec<u8>>>,
    pub key_index: usize,
    pub key_label: Arc<Vec<u8>>,
    /// Rendered ground truth for every frame; evaluation studies only.
    pub gt_all: Option<Vec<Arc<Vec<u8>>>>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn half_len(&self) -> usize {
        self.key_index
    }

    /// Frame `t` as a `[3, H, W]` tensor in [0, 1].
    pub fn frame<T: Scalar>(&self, t: usize) -> Tensor<T> {
        let scale = T::from_f64_lossy(1.0 / 255.0);
        let data = self.frames[t]
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64) * scale)
            .collect();
        Tensor::from_vec([3, self.height, self.width], data).expect("frame size is fixed")
    }

    pub fn key_frame<T: Scalar>(&self) -> Tensor<T> {
        self.frame(self.key_index)
    }

    /// Frame at signed offset `n` from the key frame.
    pub fn offset_index(&self, n: i64) -> Result<usize, DataError> {
        let u = self.key_index as i64 + n;
        if u < 0 || u >= self.frames.len() as i64 {
            return Err(DataError::OffsetOutOfClip {
                clip_id: self.clip_id,
                key: self.key_index,
                n,
                len: self.frames.len(),
            });
        }
        Ok(u as usize)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn new(clips: Vec<Clip>) -> Self {
        Self { clips }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Smallest clip half-length; the largest usable temporal context.
    pub fn min_half_len(&self) -> usize {
        self.clips.iter().map(Clip::half_len).min().unwrap_or(0)
    }
}

/// A labeled key frame with an unlabeled partner from the same clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    /// `[3, H, W]`
    pub x_t: Tensor<T>,
    /// `[H, W]` labels
    pub y_t: Arc<Vec<u8>>,
    /// Frame `key + n` of the same clip.
    pub x_pair: Tensor<T>,
    pub n: i64,
    pub clip_id: usize,
}

impl<T: Scalar> TrainingPair<T> {
    /// Pair built from clip frames; `n` must stay inside the clip.
    pub fn from_clip(clip: &Clip, n: i64) -> Result<Self, DataError> {
        let u = clip.offset_index(n)?;
        Ok(Self {
            x_t: clip.key_frame(),
            y_t: Arc::clone(&clip.key_label),
            x_pair: clip.frame(u),
            n,
            clip_id: clip.clip_id,
        })
    }

    pub fn height(&self) -> usize {
        self.x_t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.x_t.shape()[2]
    }
}

/// Uniform clip, offset drawn as in TAF index sampling with `cfg.n_h` as the
/// context limit.
pub fn sample_pair<T: Scalar>(
    ds: &Dataset,
    cfg: &TafConfig,
    rng: &mut impl Rng,
) -> Result<TrainingPair<T>, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let clip = &ds.clips[rng.random_range(0..ds.len())];
    let n = sample_offset(cfg, rng);
    TrainingPair::from_clip(clip, n)
}
