use crate::model::ParamSet;
use crate::tensor::{shape_err, Scalar, Tensor, TensorError};

/// `init_lr · (1 − epoch / max_epoch)^power` for `0 ≤ epoch < max_epoch`.
pub fn poly_lr(init_lr: f64, power: f64, epoch: usize, max_epoch: usize) -> Result<f64, TensorError> {
    if epoch >= max_epoch {
        return Err(TensorError::InvalidArgument {
            op: "poly_lr",
            msg: format!("epoch {epoch} outside 0..{max_epoch}"),
        });
    }
    Ok(init_lr * (1.0 - epoch as f64 / max_epoch as f64).powf(power))
}

/// SGD with momentum and L2 weight decay.
///
/// With `g' = g + wd·θ`: `v ← μv + g'`, then `θ ← θ − lr·(g' + μv)` when
/// Nesterov, else `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            weight_decay,
            nesterov,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Updates `params` in place; `grads` is in parameter order.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(shape_err("sgd_step", "gradient count", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(shape_err("sgd_step", "gradient", p.value.shape(), g.shape()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        }
        let (mu, wd, lr) = (
            T::from_f64_lossy(self.momentum),
            T::from_f64_lossy(self.weight_decay),
            T::from_f64_lossy(lr),
        );
        let mut updated = Vec::with_capacity(params.len());
        for ((p, g), v) in params.iter().zip(grads).zip(self.velocity.iter_mut()) {
            let mut theta = p.value.data().to_vec();
            for ((th, &gr), vel) in theta.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let gd = gr + wd * *th;
                *vel = mu * *vel + gd;
                let dir = if self.nesterov { gd + mu * *vel } else { *vel };
                *th = *th - lr * dir;
            }
            updated.push(Tensor::from_vec(p.value.shape(), theta)?);
        }
        params
            .set_tensors(updated)
            .map_err(|e| TensorError::InvalidArgument {
                op: "sgd_step",
                msg: e.to_string(),
            })
    }
}
