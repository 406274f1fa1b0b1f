use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, poly_lr, EngineError, Sgd, TrainConfig};
use crate::data::{Dataset, Transform, TrainingPair};
use crate::model::{save_checkpoint, Factorized, FactorizedModel};
use crate::taf::{sample_offset, taf_objective, LossParts};
use crate::tensor::{Tape, Tensor, TensorError};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub reg_fwd: f64,
    pub reg_bwd: f64,
    pub total: f64,
}

const LOG_HEADER: &str = "step,epoch,lr,ce,reg_fwd,reg_bwd,total";

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<(), EngineError> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.lr, r.ce, r.reg_fwd, r.reg_bwd, r.total
        ));
    }
    fs::write(path, s).map_err(EngineError::io(path))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>, EngineError> {
    let text = fs::read_to_string(path).map_err(EngineError::io(path))?;
    let bad = |i: usize| EngineError::Config(format!("{}:{}: malformed log row", path.display(), i + 1));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i));
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(i));
        rows.push(LogRow {
            step: f[0].parse().map_err(|_| bad(i))?,
            epoch: f[1].parse().map_err(|_| bad(i))?,
            lr: num(2)?,
            ce: num(3)?,
            reg_fwd: num(4)?,
            reg_bwd: num(5)?,
            total: num(6)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Evaluated after every epoch for best-checkpoint selection.
    pub val: Option<&'a Dataset>,
    /// Receives `final/`, `best/`, `train_log.csv` and `config.txt`.
    pub out_dir: Option<&'a Path>,
    /// Threads computing per-example gradients within a step.
    pub jobs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub model: FactorizedModel<f32>,
    pub log: Vec<LogRow>,
    /// Validation mIOU after each epoch.
    pub val_miou: Vec<f64>,
    /// (epoch, val mIOU, model) of the best validation epoch.
    pub best: Option<(usize, f64, FactorizedModel<f32>)>,
}

impl TrainOutcome {
    /// The best-on-validation model when validation ran, else the final one.
    pub fn selected(&self) -> &FactorizedModel<f32> {
        self.best.as_ref().map_or(&self.model, |b| &b.2)
    }

    /// Mean CE per epoch.
    pub fn epoch_ce(&self) -> Vec<f64> {
        let epochs = self.log.last().map_or(0, |r| r.epoch + 1);
        (0..epochs)
            .map(|e| {
                let rows: Vec<f64> = self.log.iter().filter(|r| r.epoch == e).map(|r| r.ce).collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect()
    }
}

const DOMAIN_SHUFFLE: u64 = 1;
const DOMAIN_SLOT: u64 = 2;

/// Independent stream for (seed, domain, a, b).
fn derived_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, domain, a, b].iter().enumerate() {
        key[8 * i..8 * i + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

struct SlotResult {
    parts: LossParts,
    grads: Vec<Tensor<f32>>,
}

fn slot_gradients(
    model: &FactorizedModel<f32>,
    cfg: &TrainConfig,
    ds: &Dataset,
    clip_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SlotResult, EngineError> {
    let clip = &ds.clips[clip_idx];
    // The geometric draw comes first so supervised-only runs consume the
    // same augmentation stream as TAF runs.
    let tf = Transform::draw(&cfg.augment, (clip.height, clip.width), rng)?;
    let x_t = tf.apply_image(&clip.key_frame::<f32>());
    let y_t = Arc::new(tf.apply_labels(&clip.key_label));
    let pair = if cfg.is_supervised_only() {
        TrainingPair {
            x_pair: x_t.clone(),
            x_t,
            y_t,
            n: 0,
            clip_id: clip.clip_id,
        }
    } else {
        let n = sample_offset(&cfg.taf, rng);
        let u = clip.offset_index(n)?;
        TrainingPair {
            x_t,
            y_t,
            x_pair: tf.apply_image(&clip.frame::<f32>(u)),
            n,
            clip_id: clip.clip_id,
        }
    };
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let loss = taf_objective(model, &mut tape, &p, &pair, &cfg.taf, rng)?;
    let g = tape.backward(loss.loss)?;
    let grads = model
        .params()
        .iter()
        .zip(&p.0)
        .map(|(param, &v)| g.get_or_zeros(v, param.value.shape()))
        .collect();
    Ok(SlotResult {
        parts: loss.parts,
        grads,
    })
}

fn run_slots(
    model: &FactorizedModel<f32>,
    cfg: &TrainConfig,
    ds: &Dataset,
    batch: &[usize],
    step: usize,
    jobs: usize,
) -> Vec<Result<SlotResult, EngineError>> {
    let one = |slot: usize| {
        let mut rng = derived_rng(cfg.seed, DOMAIN_SLOT, step as u64, slot as u64);
        slot_gradients(model, cfg, ds, batch[slot], &mut rng)
    };
    let jobs = jobs.clamp(1, batch.len());
    if jobs == 1 {
        return (0..batch.len()).map(one).collect();
    }
    let slots: Vec<usize> = (0..batch.len()).collect();
    let chunk = batch.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = slots
            .chunks(chunk)
            .map(|c| {
                let one = &one;
                s.spawn(move || c.iter().map(|&i| one(i)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

fn non_finite(
    cfg: &TrainConfig,
    ds: &Dataset,
    batch: &[usize],
    epoch: usize,
    step: usize,
    detail: String,
    out_dir: Option<&Path>,
) -> EngineError {
    let err = EngineError::NonFinite {
        epoch,
        step,
        batch_seed: cfg.seed,
        clip_ids: batch.iter().map(|&i| ds.clips[i].clip_id).collect(),
        detail,
    };
    log::error!("{err}");
    if let Some(dir) = out_dir {
        let dump = format!("{err}\n\nconfig:\n{cfg}");
        let _ = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join("nan_dump.txt"), dump));
    }
    err
}

/// Trains a model from `cfg.seed`. Each optimizer step averages the
/// per-example gradients of one batch; every random draw comes from a stream
/// keyed by (seed, step, slot), so results do not depend on `jobs`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, opts: &TrainOptions<'_>) -> Result<TrainOutcome, EngineError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(crate::data::DataError::Empty.into());
    }
    if !cfg.is_supervised_only() && cfg.taf.n_h > ds.min_half_len() {
        return Err(EngineError::Config(format!(
            "taf.n_h = {} exceeds the dataset clip half-length {}",
            cfg.taf.n_h,
            ds.min_half_len()
        )));
    }
    let mut model = FactorizedModel::<f32>::new(cfg.model_spec())?;
    let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay, cfg.nesterov);
    let per_step = cfg.pairs_per_step();
    let mut log = Vec::new();
    let mut val_miou = Vec::new();
    let mut best: Option<(usize, f64, FactorizedModel<f32>)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epoch {
        let lr = poly_lr(cfg.init_lr, cfg.power, epoch, cfg.max_epoch)?;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, DOMAIN_SHUFFLE, epoch as u64, 0));
        for batch in order.chunks(per_step) {
            let results = run_slots(&model, cfg, ds, batch, step, opts.jobs);
            let mut sum: Option<Vec<Vec<f32>>> = None;
            let mut parts = LossParts::default();
            for r in results {
                let r = match r {
                    Err(EngineError::Tensor(TensorError::NonFinite { op }))
                    | Err(EngineError::Taf(crate::taf::TafError::Model(crate::model::ModelError::Tensor(
                        TensorError::NonFinite { op },
                    )))) => {
                        return Err(non_finite(cfg, ds, batch, epoch, step, format!("{op} produced NaN/inf"), opts.out_dir));
                    }
                    other => other?,
                };
                parts.ce += r.parts.ce;
                parts.reg_fwd += r.parts.reg_fwd;
                parts.reg_bwd += r.parts.reg_bwd;
                parts.total += r.parts.total;
                match &mut sum {
                    None => sum = Some(r.grads.into_iter().map(Tensor::into_vec).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, y) in a.iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let b = batch.len() as f64;
            let scale = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor<f32>> = sum
                .expect("batch is non-empty")
                .into_iter()
                .zip(model.params().iter())
                .map(|(g, p)| Tensor::from_vec(p.value.shape(), g.into_iter().map(|v| v * scale).collect()))
                .collect::<Result<_, _>>()?;
            if !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(non_finite(cfg, ds, batch, epoch, step, "loss or gradient is not finite".into(), opts.out_dir));
            }
            opt.step(model.params_mut(), &grads, lr)?;
            log.push(LogRow {
                step,
                epoch,
                lr,
                ce: parts.ce / b,
                reg_fwd: parts.reg_fwd / b,
                reg_bwd: parts.reg_bwd / b,
                total: parts.total / b,
            });
            step += 1;
        }
        if let Some(val) = opts.val {
            let m = evaluate(&model, val, None)?.miou;
            log::info!("epoch {epoch}: val mIOU {m:.4}");
            val_miou.push(m);
            if best.as_ref().is_none_or(|b| m > b.1) {
                best = Some((epoch, m, model.clone()));
            }
        } else {
            log::info!("epoch {epoch} done");
        }
    }

    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(EngineError::io(dir))?;
        save_checkpoint(dir.join("final"), &model)?;
        if let Some((_, _, m)) = &best {
            save_checkpoint(dir.join("best"), m)?;
        }
        write_log_csv(&dir.join("train_log.csv"), &log)?;
        let path = dir.join("config.txt");
        fs::write(&path, cfg.to_string()).map_err(EngineError::io(&path))?;
    }
    debug_assert_eq!(model.num_branches(), cfg.arch.num_branches());
    Ok(TrainOutcome {
        config: cfg.clone(),
        model,
        log,
        val_miou,
        best,
    })
}
