//! Numeric kernels shared by the autodiff graph: strided GEMM, im2col
//! convolution and broadcasting helpers.

use rayon::prelude::*;

use super::tensor::Tensor;

/// Hyper-parameters of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            stride: (1, 1),
            padding: (kh / 2, kw / 2),
        }
    }

    pub fn strided(kh: usize, kw: usize, sh: usize, sw: usize) -> Self {
        Self {
            stride: (sh, sw),
            padding: (kh / 2, kw / 2),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding.0 - kh) / self.stride.0 + 1;
        let wo = (w + 2 * self.padding.1 - kw) / self.stride.1 + 1;
        (ho, wo)
    }
}

/// C (m×n) = alpha · A (m×k) · B (k×n) + beta · C, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given strides; the bounds
    // below are checked for the row-major / transposed layouts we use.
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Self {
        let (ho, wo) = spec.output_hw(x[2], x[3], w[2], w[3]);
        Self {
            ci: x[1],
            h: x[2],
            w: x[3],
            kh: w[2],
            kw: w[3],
            ho,
            wo,
            spec,
        }
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let ncol = g.cols();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * ncol..(row + 1) * ncol];
                for oh in 0..g.ho {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * sw + j) as isize - pw as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let ncol = g.cols();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * ncol..(row + 1) * ncol];
                for oh in 0..g.ho {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * sw + j) as isize - pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// x: [N, Ci, H, W], w: [Co, Ci, kh, kw], b: [Co] → [N, Co, Ho, Wo].
/// Samples run in parallel; each one is computed independently, so the
/// result does not depend on the thread count.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
    assert_eq!(x.rank(), 4, "conv2d input must be NCHW");
    assert_eq!(w.rank(), 4);
    assert_eq!(x.dim(1), w.dim(1), "conv2d channel mismatch");
    let g = ConvGeom::new(x.shape(), w.shape(), spec);
    let (n, co) = (x.dim(0), w.dim(0));
    let k = g.k();
    let ncol = g.cols();
    let mut out = Tensor::zeros(&[n, co, g.ho, g.wo]);
    let in_stride = g.ci * g.h * g.w;
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut((co * ncol).max(1))
        .enumerate()
        .for_each_init(
            || vec![0.0; k * ncol],
            |col, (s, dst)| {
                im2col(&xd[s * in_stride..(s + 1) * in_stride], &g, col);
                if let Some(b) = b {
                    for (c, chunk) in dst.chunks_mut(ncol).enumerate() {
                        chunk.fill(b.data()[c]);
                    }
                }
                let beta = if b.is_some() { 1.0 } else { 0.0 };
                gemm(co, k, ncol, 1.0, w.data(), k as isize, 1, col, ncol as isize, 1, beta, dst);
            },
        );
    out
}

/// Returns (dx, dw, db) for the convolution above. Per-sample weight
/// gradients are summed in sample order.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    spec: Conv2dSpec,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let g = ConvGeom::new(x.shape(), w.shape(), spec);
    let (n, co) = (x.dim(0), w.dim(0));
    let k = g.k();
    let ncol = g.cols();
    let in_stride = g.ci * g.h * g.w;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let xd = x.data();
    let per_sample = |s: usize, dxs: Option<&mut [f64]>| -> (Vec<f64>, Vec<f64>) {
        let dys = &dy.data()[s * co * ncol..(s + 1) * co * ncol];
        let db: Vec<f64> = dys.chunks(ncol).map(|c| c.iter().sum()).collect();
        let mut col = vec![0.0; k * ncol];
        im2col(&xd[s * in_stride..(s + 1) * in_stride], &g, &mut col);
        // dW = dY · colᵀ
        let mut dw = vec![0.0; co * k];
        gemm(co, ncol, k, 1.0, dys, ncol as isize, 1, &col, 1, ncol as isize, 0.0, &mut dw);
        if let Some(dxs) = dxs {
            // dcol = Wᵀ · dY
            gemm(k, co, ncol, 1.0, w.data(), 1, k as isize, dys, ncol as isize, 1, 0.0, &mut col);
            col2im(&col, &g, dxs);
        }
        (dw, db)
    };
    let parts: Vec<(Vec<f64>, Vec<f64>)> = match dx.as_mut() {
        Some(dx) => dx
            .data_mut()
            .par_chunks_mut(in_stride.max(1))
            .enumerate()
            .map(|(s, dxs)| per_sample(s, Some(dxs)))
            .collect(),
        None => (0..n).into_par_iter().map(|s| per_sample(s, None)).collect(),
    };
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    for (pw, pb) in parts {
        for (a, v) in dw.data_mut().iter_mut().zip(pw) {
            *a += v;
        }
        for (a, v) in db.data_mut().iter_mut().zip(pb) {
            *a += v;
        }
    }
    (dx, dw, db)
}

/// Output shape of a broadcasting binary op between equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output element with the linear indices of both inputs.
pub fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    for_each_broadcast(shape, shape, grad.shape(), |o, i, _| {
        data[i] += grad.data()[o];
    });
    out
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[p * 4 * h * w + i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &Tensor, x_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let src = dy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[p * h * w + (i / 2) * w + j / 2] += src[p * 4 * h * w + i * 2 * w + j];
            }
        }
    }
    dx
}
