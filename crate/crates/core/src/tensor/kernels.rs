//! Raw forward and adjoint kernels over flat NCHW buffers.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] = img[base + ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_img = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.k * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..g.n {
        let img = &input[n * in_img..(n + 1) * in_img];
        let dst = &mut out[n * g.k * plane..(n + 1) * g.k * plane];
        if let Some(b) = bias {
            for (k, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(b[k]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        T::gemm(
            g.k,
            patch,
            plane,
            weight,
            (patch as isize, 1),
            src,
            (plane as isize, 1),
            beta,
            dst,
            (plane as isize, 1),
        );
    }
    out
}

/// Returns (d_input, d_weight, d_bias) for the requested operands.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    d_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_img = g.c * g.h * g.w;
    let mut d_in = want_input.then(|| vec![T::zero(); input.len()]);
    let mut d_w = want_weight.then(|| vec![T::zero(); weight.len()]);
    let d_b = want_bias.then(|| {
        let mut db = vec![T::zero(); g.k];
        for n in 0..g.n {
            for (k, acc) in db.iter_mut().enumerate() {
                let row = &d_out[(n * g.k + k) * plane..(n * g.k + k + 1) * plane];
                *acc = row.iter().fold(*acc, |s, &v| s + v);
            }
        }
        db
    });
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..g.n {
        let img = &input[n * in_img..(n + 1) * in_img];
        let dy = &d_out[n * g.k * plane..(n + 1) * g.k * plane];
        if let Some(dw) = d_w.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dW[K, P] += dY[K, HW] * cols^T[HW, P]
            T::gemm(
                g.k,
                plane,
                patch,
                dy,
                (plane as isize, 1),
                src,
                (1, plane as isize),
                T::one(),
                dw,
                (patch as isize, 1),
            );
        }
        if let Some(di) = d_in.as_mut() {
            let dst = &mut di[n * in_img..(n + 1) * in_img];
            if g.is_pointwise() {
                T::gemm(
                    patch,
                    g.k,
                    plane,
                    weight,
                    (1, patch as isize),
                    dy,
                    (plane as isize, 1),
                    T::zero(),
                    dst,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    patch,
                    g.k,
                    plane,
                    weight,
                    (1, patch as isize),
                    dy,
                    (plane as isize, 1),
                    T::zero(),
                    &mut cols,
                    (plane as isize, 1),
                );
                col2im_add(g, &cols, dst);
            }
        }
    }
    (d_in, d_w, d_b)
}

/// k×k average pooling of `planes` planes of size h×w.
pub(crate) fn avg_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
            for (xx, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                drow[xx / k] = drow[xx / k] + v;
            }
        }
        for v in dst.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let ow = w / k;
    let oh = h / k;
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dx[(p * h + y) * w + xx] = src[(y / k) * ow + xx / k] * inv;
            }
        }
    }
    dx
}

pub(crate) fn upsample_nearest<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    fh: usize,
    fw: usize,
) -> Vec<T> {
    let (oh, ow) = (h * fh, w * fw);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let src = &x[(p * h + y / fh) * w..(p * h + y / fh + 1) * w];
            let dst = &mut out[(p * oh + y) * ow..(p * oh + y + 1) * ow];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / fw];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    fh: usize,
    fw: usize,
) -> Vec<T> {
    let (oh, ow) = (h * fh, w * fw);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            let src = &dy[(p * oh + y) * ow..(p * oh + y + 1) * ow];
            let dst = &mut dx[(p * h + y / fh) * w..(p * h + y / fh + 1) * w];
            for (xx, &v) in src.iter().enumerate() {
                dst[xx / fw] = dst[xx / fw] + v;
            }
        }
    }
    dx
}

/// Softmax over axis 1 of an [N, K, P] buffer (P = H·W).
pub(crate) fn softmax_channel<T: Scalar>(x: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * k * p;
        for px in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(x[base + c * p + px]);
            }
            let mut s = T::zero();
            for c in 0..k {
                let e = (x[base + c * p + px] - m).exp();
                out[base + c * p + px] = e;
                s = s + e;
            }
            for c in 0..k {
                out[base + c * p + px] = out[base + c * p + px] / s;
            }
        }
    }
    out
}

pub(crate) fn softmax_channel_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    n: usize,
    k: usize,
    p: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * k * p;
        for px in 0..p {
            let mut dot = T::zero();
            for c in 0..k {
                dot = dot + y[base + c * p + px] * dy[base + c * p + px];
            }
            for c in 0..k {
                let i = base + c * p + px;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    dx
}

/// Sum of −log softmax(logits)[label] over non-ignored pixels, and their count.
pub(crate) fn cross_entropy_sum<T: Scalar>(
    logits: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    p: usize,
    ignore: u8,
) -> (T, usize) {
    let mut total = T::zero();
    let mut count = 0;
    for b in 0..n {
        let base = b * k * p;
        for px in 0..p {
            let label = labels[b * p + px];
            if label == ignore {
                continue;
            }
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(logits[base + c * p + px]);
            }
            let mut s = T::zero();
            for c in 0..k {
                s = s + (logits[base + c * p + px] - m).exp();
            }
            total = total + (s.ln() + m - logits[base + label as usize * p + px]);
            count += 1;
        }
    }
    (total, count)
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    logits: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    p: usize,
    ignore: u8,
    scale: T,
) -> Vec<T> {
    let probs = softmax_channel(logits, n, k, p);
    let mut dx = vec![T::zero(); logits.len()];
    for b in 0..n {
        let base = b * k * p;
        for px in 0..p {
            let label = labels[b * p + px];
            if label == ignore {
                continue;
            }
            for c in 0..k {
                let i = base + c * p + px;
                let target = if c == label as usize { T::one() } else { T::zero() };
                dx[i] = (probs[i] - target) * scale;
            }
        }
    }
    dx
}
