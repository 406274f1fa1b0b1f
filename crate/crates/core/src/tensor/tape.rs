use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Sum(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample {
        x: Var,
        fh: usize,
        fw: usize,
    },
    GlobalAvgPool(Var),
    SoftmaxChannel(Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<u8>>,
        ignore: u8,
        count: usize,
    },
    L1Mean(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Tape::cross_entropy_masked`].
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub loss: Var,
    /// Number of pixels that entered the mean.
    pub counted: usize,
}

impl MaskedLoss {
    /// True when every pixel was ignored and the loss was defined as 0.
    pub fn is_empty(&self) -> bool {
        self.counted == 0
    }
}

/// Linear record of executed operations. Nodes are appended in execution
/// order, so inputs always precede their consumers.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4], TensorError> {
    match *s {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err(op, "rank", "[N, C, H, W]", s)),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_trace(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => "leaf",
                Op::Conv2d { .. } => "conv2d",
                Op::Relu(_) => "relu",
                Op::Add(..) => "add",
                Op::Mul(..) => "mul",
                Op::Affine { .. } => "affine",
                Op::Sum(_) => "sum",
                Op::AvgPool { .. } => "avg_pool",
                Op::Upsample { .. } => "upsample",
                Op::GlobalAvgPool(_) => "global_avg_pool",
                Op::SoftmaxChannel(_) => "softmax_channel",
                Op::CrossEntropy { .. } => "cross_entropy",
                Op::L1Mean(..) => "l1_mean",
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_vec(shape, data)?,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of an [N, C, H, W] input with a [K, C, kh, kw]
    /// kernel. Kernel sizes must be odd.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = dims4(OP, self.shape(input))?;
        let [k, wc, kh, kw] = dims4(OP, self.shape(weight))?;
        if wc != c {
            return Err(shape_err(OP, "weight input channels", c, wc));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("kernel size {kh}x{kw} must be odd"),
            });
        }
        if stride == 0 || dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride and dilation must be >= 1".into(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(shape_err(OP, "bias", [k], self.shape(b)));
            }
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("input {h}x{w} smaller than dilated kernel span"),
            });
        }
        let oh = (h + 2 * padding - span_h) / stride + 1;
        let ow = (w + 2 * padding - span_w) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            padding,
            dilation,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            OP,
            vec![n, k, oh, ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        self.push("relu", t.shape().to_vec(), data, Op::Relu(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, "operands", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push("add", self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push("mul", self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| scale * v + shift).collect();
        self.push(
            "affine",
            t.shape().to_vec(),
            data,
            Op::Affine { x, scale },
            &[x],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// k×k average pooling with stride k.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        const OP: &str = "avg_pool";
        let [n, c, h, w] = dims4(OP, self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("spatial size {h}x{w} not divisible by {k}"),
            });
        }
        let data = kernels::avg_pool(self.value(x).data(), n * c, h, w, k);
        self.push(OP, vec![n, c, h / k, w / k], data, Op::AvgPool { x, k }, &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor on both axes.
    pub fn upsample_nearest(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        self.upsample_nearest2(x, k, k)
    }

    /// Replicates a [N, C, 1, 1] tensor over an h×w grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let [_, _, xh, xw] = dims4("broadcast_spatial", self.shape(x))?;
        if (xh, xw) != (1, 1) {
            return Err(shape_err("broadcast_spatial", "spatial dims", (1, 1), (xh, xw)));
        }
        self.upsample_nearest2(x, h, w)
    }

    fn upsample_nearest2(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var, TensorError> {
        const OP: &str = "upsample_nearest";
        let [n, c, h, w] = dims4(OP, self.shape(x))?;
        if fh == 0 || fw == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "factor must be >= 1".into(),
            });
        }
        let data = kernels::upsample_nearest(self.value(x).data(), n * c, h, w, fh, fw);
        self.push(
            OP,
            vec![n, c, h * fh, w * fw],
            data,
            Op::Upsample { x, fh, fw },
            &[x],
        )
    }

    /// Spatial mean per channel: [N, C, H, W] -> [N, C, 1, 1].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "global_avg_pool";
        let [n, c, h, w] = dims4(OP, self.shape(x))?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        self.push(OP, vec![n, c, 1, 1], data, Op::GlobalAvgPool(x), &[x])
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "softmax_channel";
        let [n, k, h, w] = dims4(OP, self.shape(x))?;
        if k < 2 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("need at least 2 channels, got {k}"),
            });
        }
        let t = self.value(x);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: OP });
        }
        let data = kernels::softmax_channel(t.data(), n, k, h * w);
        self.push(OP, vec![n, k, h, w], data, Op::SoftmaxChannel(x), &[x])
    }

    /// Mean over non-ignored pixels of −log softmax(logits)[label].
    /// `labels` is [N, H, W] in row-major order. If every pixel is ignored
    /// the loss is 0 and [`MaskedLoss::is_empty`] is set.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        labels: Arc<Vec<u8>>,
        ignore: u8,
    ) -> Result<MaskedLoss, TensorError> {
        const OP: &str = "cross_entropy_masked";
        let [n, k, h, w] = dims4(OP, self.shape(logits))?;
        if labels.len() != n * h * w {
            return Err(shape_err(OP, "labels", [n, h, w], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("label {bad} outside [0, {k})"),
            });
        }
        let (total, count) =
            kernels::cross_entropy_sum(self.value(logits).data(), &labels, n, k, h * w, ignore);
        let loss = if count == 0 {
            log::warn!("cross_entropy_masked: every pixel ignored, loss defined as 0");
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let v = self.push(
            OP,
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
            },
            &[logits],
        )?;
        Ok(MaskedLoss {
            loss: v,
            counted: count,
        })
    }

    /// Mean over all elements of |a − b|.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("l1_mean", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let mean = if ta.is_empty() {
            T::zero()
        } else {
            s / T::from_usize(ta.len()).unwrap()
        };
        self.push("l1_mean", Vec::new(), vec![mean], Op::L1Mean(a, b), &[a, b])
    }

    /// Reverse sweep from a scalar root. Adjoints are accumulated by
    /// summation over all paths, visiting nodes in reverse record order.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_vec(n.value.shape().to_vec(), g).unwrap()))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut accumulate = |v: Var, delta: Vec<T>| {
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
                slot @ None => *slot = Some(delta),
            };
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (di, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    rg(*input),
                    rg(*weight),
                    bias.is_some_and(rg),
                );
                if let Some(d) = di {
                    accumulate(*input, d);
                }
                if let Some(d) = dw {
                    accumulate(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    accumulate(*b, d);
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    let d = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(*x, d);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(*a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = self.value(*b).data().iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                    accumulate(*a, d);
                }
                if rg(*b) {
                    let d = self.value(*a).data().iter().zip(g).map(|(&x, &gv)| x * gv).collect();
                    accumulate(*b, d);
                }
            }
            Op::Affine { x, scale } => {
                if rg(*x) {
                    accumulate(*x, g.iter().map(|&gv| gv * *scale).collect());
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    accumulate(*x, vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::AvgPool { x, k } => {
                if rg(*x) {
                    let [n, c, h, w] = dims4("avg_pool", self.shape(*x)).unwrap();
                    accumulate(*x, kernels::avg_pool_backward(g, n * c, h, w, *k));
                }
            }
            Op::Upsample { x, fh, fw } => {
                if rg(*x) {
                    let [n, c, h, w] = dims4("upsample", self.shape(*x)).unwrap();
                    accumulate(
                        *x,
                        kernels::upsample_nearest_backward(g, n * c, h, w, *fh, *fw),
                    );
                }
            }
            Op::GlobalAvgPool(x) => {
                if rg(*x) {
                    let [_, _, h, w] = dims4("global_avg_pool", self.shape(*x)).unwrap();
                    let inv = T::one() / T::from_usize(h * w).unwrap();
                    let d = g
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w))
                        .collect();
                    accumulate(*x, d);
                }
            }
            Op::SoftmaxChannel(x) => {
                if rg(*x) {
                    let [n, k, h, w] = dims4("softmax_channel", node.value.shape()).unwrap();
                    accumulate(
                        *x,
                        kernels::softmax_channel_backward(node.value.data(), g, n, k, h * w),
                    );
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
            } => {
                if rg(*logits) && *count > 0 {
                    let [n, k, h, w] = dims4("cross_entropy", self.shape(*logits)).unwrap();
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    accumulate(
                        *logits,
                        kernels::cross_entropy_backward(
                            self.value(*logits).data(),
                            labels,
                            n,
                            k,
                            h * w,
                            *ignore,
                            scale,
                        ),
                    );
                }
            }
            Op::L1Mean(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = g[0] / T::from_usize(ta.len().max(1)).unwrap();
                let sign: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if rg(*b) {
                    accumulate(*b, sign.iter().map(|&s| -s).collect());
                }
                if rg(*a) {
                    accumulate(*a, sign);
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if no path from the root reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, with zeros substituted for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}
