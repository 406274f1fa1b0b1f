use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::EngineError;
use crate::data::{Clip, DataError, Dataset};
use crate::model::{argmax_channel, Binding, BranchSet, Factorized};
use crate::taf::{image_var, swap_branch};
use crate::tensor::{Scalar, Tape, Tensor, IGNORE_LABEL};

/// K×K pixel counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), k * k, "confusion counts must be K×K");
        Self { k, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// Accumulates a label map; ground-truth pixels equal to 255 are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<(), EngineError> {
        if gt.len() != pred.len() {
            return Err(EngineError::Config(format!(
                "label maps differ in size: {} vs {}",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.k || p >= self.k {
                return Err(EngineError::Config(format!(
                    "label {} outside {} classes",
                    g.max(p),
                    self.k
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "merging confusion matrices of different K");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// TP / (TP + FP + FN); `None` when the class never occurs in either map.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
        let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k).map(|c| self.iou(c)).collect()
    }

    /// Mean IOU over classes that occur; 0 for an empty matrix.
    pub fn miou(&self) -> f64 {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }

    pub fn pixel_acc(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        diag as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub pixel_acc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl From<ConfusionMatrix> for Metrics {
    fn from(confusion: ConfusionMatrix) -> Self {
        Self {
            miou: confusion.miou(),
            pixel_acc: confusion.pixel_acc(),
            per_class_iou: confusion.per_class_iou(),
            confusion,
        }
    }
}

/// CSV `class,iou` rows followed by `miou` and `pixel_acc` summary rows.
pub fn write_metrics_csv(path: &Path, m: &Metrics) -> Result<(), EngineError> {
    let mut s = String::from("class,iou\n");
    for (c, v) in m.per_class_iou.iter().enumerate() {
        match v {
            Some(v) => s.push_str(&format!("{c},{v}\n")),
            None => s.push_str(&format!("{c},\n")),
        }
    }
    s.push_str(&format!("miou,{}\npixel_acc,{}\n", m.miou, m.pixel_acc));
    std::fs::write(path, s).map_err(EngineError::io(path))
}

/// Branch `branch` taken from frame `key + offset` before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapSpec {
    pub branch: usize,
    pub offset: i64,
}

/// Runs `f` over clips on up to `jobs` threads, results in clip order.
fn map_clips<R, F>(ds: &Dataset, jobs: usize, f: F) -> Result<Vec<R>, EngineError>
where
    R: Send,
    F: Fn(&Clip) -> Result<R, EngineError> + Sync,
{
    let jobs = jobs.clamp(1, ds.len().max(1));
    if jobs == 1 {
        return ds.clips.iter().map(&f).collect();
    }
    let chunk = ds.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<R>, EngineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ds
            .clips
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Logits for frame `t` of `clip`, optionally with one branch replaced.
fn frame_logits<T: Scalar, M: Factorized<T>>(
    model: &M,
    clip: &Clip,
    t: usize,
    edit: impl FnOnce(&mut Tape<T>, &Binding, &mut BranchSet) -> Result<(), EngineError>,
) -> Result<Tensor<T>, EngineError> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let x = image_var(&mut tape, &clip.frame::<T>(t))?;
    let mut bs = model.extract_branches(&mut tape, &p, x)?;
    edit(&mut tape, &p, &mut bs)?;
    let logits = model.aggregate(&mut tape, &p, &bs)?;
    Ok(tape.value(logits).clone())
}

fn predict_frame<T: Scalar, M: Factorized<T>>(model: &M, clip: &Clip, t: usize) -> Result<Vec<u8>, EngineError> {
    Ok(argmax_channel(&frame_logits(model, clip, t, |_, _, _| Ok(()))?).labels)
}

pub fn evaluate<T: Scalar, M: Factorized<T> + Sync>(
    model: &M,
    ds: &Dataset,
    swap: Option<SwapSpec>,
) -> Result<Metrics, EngineError> {
    evaluate_with(model, ds, swap, 1)
}

/// Key-frame evaluation. With a swap spec, branch `i` comes from frame
/// `key + Δ` of the same clip and the prediction is still scored against the
/// key frame's labels.
pub fn evaluate_with<T: Scalar, M: Factorized<T> + Sync>(
    model: &M,
    ds: &Dataset,
    swap: Option<SwapSpec>,
    jobs: usize,
) -> Result<Metrics, EngineError> {
    let k = model.num_classes();
    let parts = map_clips(ds, jobs, |clip| {
        let logits = match swap {
            None => frame_logits(model, clip, clip.key_index, |_, _, _| Ok(()))?,
            Some(s) => {
                let donor_t = clip.offset_index(s.offset)?;
                frame_logits(model, clip, clip.key_index, |tape, p, bs| {
                    let xd = image_var(tape, &clip.frame::<T>(donor_t))?;
                    let donor = model.extract_branches(tape, p, xd)?;
                    *bs = swap_branch(tape, bs, &donor, s.branch)?;
                    Ok(())
                })?
            }
        };
        let pred = argmax_channel(&logits).labels;
        let mut cm = ConfusionMatrix::new(k);
        cm.add(&clip.key_label, &pred)?;
        Ok(cm)
    })?;
    let mut cm = ConfusionMatrix::new(k);
    for p in &parts {
        cm.merge(p);
    }
    Ok(cm.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttenuationMode {
    Zeros,
    /// Per-channel mean of the branch over space and the evaluation split.
    SampleMean,
}

impl fmt::Display for AttenuationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttenuationMode::Zeros => "zeros",
            AttenuationMode::SampleMean => "sample_mean",
        })
    }
}

impl FromStr for AttenuationMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeros" => Ok(AttenuationMode::Zeros),
            "sample_mean" | "mean" => Ok(AttenuationMode::SampleMean),
            _ => Err(EngineError::Config(format!("unknown attenuation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attenuation {
    pub normal: Metrics,
    pub attenuated: Metrics,
    /// IOU(attenuated) − IOU(normal); `None` where either is undefined.
    pub deltas: Vec<Option<f64>>,
}

fn branch_channel_mean<T: Scalar, M: Factorized<T> + Sync>(
    model: &M,
    ds: &Dataset,
    branch: usize,
) -> Result<Vec<f64>, EngineError> {
    let sums = map_clips(ds, 1, |clip| {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let x = image_var(&mut tape, &clip.key_frame::<T>())?;
        let bs = model.extract_branches(&mut tape, &p, x)?;
        let f = tape.value(bs.features[branch]);
        let (c, plane) = (f.shape()[1], f.shape()[2] * f.shape()[3]);
        let mut s = vec![0.0; c + 1];
        for ch in 0..c {
            s[ch] = f.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).sum();
        }
        s[c] = plane as f64;
        Ok(s)
    })?;
    let c = sums.first().map_or(0, |s| s.len() - 1);
    let count: f64 = sums.iter().map(|s| s[c]).sum();
    Ok((0..c).map(|ch| sums.iter().map(|s| s[ch]).sum::<f64>() / count).collect())
}

/// Per-class IOU change when branch `branch` is replaced by zeros or by its
/// per-channel sample mean.
pub fn attenuate_eval<T: Scalar, M: Factorized<T> + Sync>(
    model: &M,
    ds: &Dataset,
    branch: usize,
    mode: AttenuationMode,
) -> Result<Attenuation, EngineError> {
    if branch >= model.num_branches() {
        return Err(crate::model::ModelError::BranchIndex {
            index: branch,
            count: model.num_branches(),
        }
        .into());
    }
    let normal = evaluate(model, ds, None)?;
    let mean = match mode {
        AttenuationMode::Zeros => None,
        AttenuationMode::SampleMean => Some(branch_channel_mean(model, ds, branch)?),
    };
    let k = model.num_classes();
    let parts = map_clips(ds, 1, |clip| {
        let logits = frame_logits(model, clip, clip.key_index, |tape, _, bs| {
            let shape = tape.shape(bs.features[branch]).to_vec();
            let plane = shape[2] * shape[3];
            let data = match &mean {
                None => vec![T::zero(); shape.iter().product()],
                Some(m) => (0..shape[0])
                    .flat_map(|_| m.iter().flat_map(|&v| std::iter::repeat_n(T::from_f64_lossy(v), plane)))
                    .collect(),
            };
            bs.features[branch] = tape.constant(Tensor::from_vec(shape, data)?);
            Ok(())
        })?;
        let mut cm = ConfusionMatrix::new(k);
        cm.add(&clip.key_label, &argmax_channel(&logits).labels)?;
        Ok(cm)
    })?;
    let mut cm = ConfusionMatrix::new(k);
    for p in &parts {
        cm.merge(p);
    }
    let attenuated: Metrics = cm.into();
    let deltas = normal
        .per_class_iou
        .iter()
        .zip(&attenuated.per_class_iou)
        .map(|(a, b)| Some(b.as_ref()? - a.as_ref()?))
        .collect();
    Ok(Attenuation {
        normal,
        attenuated,
        deltas,
    })
}

/// Per-class IOU at each offset divided by the IOU at offset 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRates {
    pub offsets: Vec<i64>,
    /// `ratios[j][c]` for `offsets[j]`; `None` where class `c` is absent at 0.
    pub ratios: Vec<Vec<Option<f64>>>,
}

fn class_rates(
    ds: &Dataset,
    k: usize,
    offsets: &[i64],
    labels_at: impl Fn(&Clip, usize) -> Result<Vec<u8>, EngineError> + Sync,
) -> Result<ClassRates, EngineError> {
    let mut all = offsets.to_vec();
    all.push(0);
    let parts = map_clips(ds, 1, |clip| {
        let reference = labels_at(clip, clip.key_index)?;
        all.iter()
            .map(|&d| {
                let pred = labels_at(clip, clip.offset_index(d)?)?;
                let mut cm = ConfusionMatrix::new(k);
                cm.add(&reference, &pred)?;
                Ok(cm)
            })
            .collect::<Result<Vec<_>, EngineError>>()
    })?;
    let mut cms = vec![ConfusionMatrix::new(k); all.len()];
    for p in &parts {
        for (acc, cm) in cms.iter_mut().zip(p) {
            acc.merge(cm);
        }
    }
    let base = cms.last().expect("offset 0 appended").per_class_iou();
    let ratios = cms[..offsets.len()]
        .iter()
        .map(|cm| {
            cm.per_class_iou()
                .iter()
                .zip(&base)
                .map(|(v, b)| match (v, b) {
                    (_, Some(b)) if *b > 0.0 => Some(v.unwrap_or(0.0) / b),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(ClassRates {
        offsets: offsets.to_vec(),
        ratios,
    })
}

/// Class change rates from rendered ground truth: labels at `key + Δ` scored
/// against labels at the key frame.
pub fn class_change_rate_gt(ds: &Dataset, k: usize, offsets: &[i64]) -> Result<ClassRates, EngineError> {
    class_rates(ds, k, offsets, |clip, t| {
        let gt = clip.gt_all.as_ref().ok_or_else(|| {
            EngineError::Data(DataError::Params(format!("clip {} has no per-frame ground truth", clip.clip_id)))
        })?;
        Ok(gt[t].to_vec())
    })
}

/// Class change rates of a model: its prediction at `key + Δ` scored against
/// its own prediction at the key frame.
pub fn class_change_rate_model<T: Scalar, M: Factorized<T> + Sync>(
    model: &M,
    ds: &Dataset,
    offsets: &[i64],
) -> Result<ClassRates, EngineError> {
    class_rates(ds, model.num_classes(), offsets, |clip, t| predict_frame(model, clip, t))
}
