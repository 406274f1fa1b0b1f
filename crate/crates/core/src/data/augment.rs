use std::sync::Arc;

use rand::Rng;

use super::{DataError, TrainingPair};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOpts {
    pub flip: bool,
    /// Scale factors are drawn uniformly from `[scale.0, scale.1]`.
    pub scale: (f64, f64),
    /// Output `(height, width)`; `None` keeps the input size.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentOpts {
    fn default() -> Self {
        Self {
            flip: true,
            scale: (1.0, 1.0),
            crop: None,
        }
    }
}

impl AugmentOpts {
    pub fn identity() -> Self {
        Self {
            flip: false,
            ..Self::default()
        }
    }
}

/// One geometric draw: nearest-neighbour rescale, crop, then optional
/// horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub src: (usize, usize),
    pub scaled: (usize, usize),
    pub offset: (usize, usize),
    pub crop: (usize, usize),
    pub flip: bool,
}

impl Transform {
    pub fn draw(
        opts: &AugmentOpts,
        src: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self, DataError> {
        let (lo, hi) = opts.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DataError::Augment(format!("bad scale range {lo}..{hi}")));
        }
        let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let scaled = (
            ((src.0 as f64 * s).round() as usize).max(1),
            ((src.1 as f64 * s).round() as usize).max(1),
        );
        let crop = opts.crop.unwrap_or(src);
        if crop.0 > scaled.0 || crop.1 > scaled.1 {
            return Err(DataError::Augment(format!(
                "crop {}x{} larger than scaled image {}x{}",
                crop.0, crop.1, scaled.0, scaled.1
            )));
        }
        let offset = (
            rng.random_range(0..=scaled.0 - crop.0),
            rng.random_range(0..=scaled.1 - crop.1),
        );
        let flip = opts.flip && rng.random_bool(0.5);
        Ok(Self {
            src,
            scaled,
            offset,
            crop,
            flip,
        })
    }

    fn nearest(dst: usize, dst_len: usize, src_len: usize) -> usize {
        ((2 * dst + 1) * src_len / (2 * dst_len)).min(src_len - 1)
    }

    /// Source pixel index for every output pixel.
    fn index_map(&self) -> Vec<usize> {
        let (ch, cw) = self.crop;
        let mut map = Vec::with_capacity(ch * cw);
        for y in 0..ch {
            let sy = Self::nearest(y + self.offset.0, self.scaled.0, self.src.0);
            for x in 0..cw {
                let xx = if self.flip { cw - 1 - x } else { x };
                let sx = Self::nearest(xx + self.offset.1, self.scaled.1, self.src.1);
                map.push(sy * self.src.1 + sx);
            }
        }
        map
    }

    pub fn apply_labels(&self, labels: &[u8]) -> Vec<u8> {
        self.index_map().into_iter().map(|i| labels[i]).collect()
    }

    /// Applies to a `[C, H, W]` image.
    pub fn apply_image<T: Scalar>(&self, img: &Tensor<T>) -> Tensor<T> {
        let c = img.shape()[0];
        let plane = self.src.0 * self.src.1;
        let map = self.index_map();
        let mut out = Vec::with_capacity(c * map.len());
        for ch in 0..c {
            let src = &img.data()[ch * plane..(ch + 1) * plane];
            out.extend(map.iter().map(|&i| src[i]));
        }
        Tensor::from_vec([c, self.crop.0, self.crop.1], out).expect("sizes agree")
    }
}

/// Applies one transform draw identically to `x_t`, `y_t` and `x_pair`.
pub fn augment_pair<T: Scalar>(
    pair: &TrainingPair<T>,
    rng: &mut impl Rng,
    opts: &AugmentOpts,
) -> Result<TrainingPair<T>, DataError> {
    let tf = Transform::draw(opts, (pair.height(), pair.width()), rng)?;
    Ok(TrainingPair {
        x_t: tf.apply_image(&pair.x_t),
        y_t: Arc::new(tf.apply_labels(&pair.y_t)),
        x_pair: tf.apply_image(&pair.x_pair),
        n: pair.n,
        clip_id: pair.clip_id,
    })
}
