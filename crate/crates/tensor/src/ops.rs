//! Forward and backward kernels on flat row-major buffers.

use crate::{Real, Result, TensorError};

pub(crate) fn accumulate<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Dot product with eight independent partial sums.
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn affine_forward<F: Real>(
    x: &[F],
    w: &[F],
    b: Option<&[F]>,
    rows: usize,
    inner: usize,
    cols: usize,
    out: &mut [F],
) {
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        match b {
            Some(b) => o.copy_from_slice(b),
            None => o.fill(F::zero()),
        }
        let xr = &x[r * inner..(r + 1) * inner];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == F::zero() {
                continue;
            }
            let wr = &w[k * cols..(k + 1) * cols];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov = *ov + xv * wv;
            }
        }
    }
}

pub(crate) fn affine_backward_input<F: Real>(
    dy: &[F],
    w: &[F],
    rows: usize,
    inner: usize,
    cols: usize,
    gx: &mut [F],
) {
    for r in 0..rows {
        let dr = &dy[r * cols..(r + 1) * cols];
        let gr = &mut gx[r * inner..(r + 1) * inner];
        for (k, g) in gr.iter_mut().enumerate() {
            let wr = &w[k * cols..(k + 1) * cols];
            *g = *g + dot(dr, wr);
        }
    }
}

pub(crate) fn affine_backward_weight<F: Real>(
    dy: &[F],
    x: &[F],
    rows: usize,
    inner: usize,
    cols: usize,
    gw: &mut [F],
) {
    for r in 0..rows {
        let dr = &dy[r * cols..(r + 1) * cols];
        let xr = &x[r * inner..(r + 1) * inner];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == F::zero() {
                continue;
            }
            let gr = &mut gw[k * cols..(k + 1) * cols];
            for (g, &d) in gr.iter_mut().zip(dr) {
                *g = *g + xv * d;
            }
        }
    }
}

/// Layout of a tensor viewed as `[outer, len, inner]` around one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strided {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl Strided {
    pub fn along(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Calls `f` once per slice with an iterator over the slice's flat indices.
    pub fn for_each_slice(&self, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
        let Strided { outer, len, inner } = *self;
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut it = (0..len).map(|i| base + i * inner);
                f(&mut it);
            }
        }
    }

    fn slice_index(&self, o: usize, r: usize) -> usize {
        o * self.inner + r
    }
}

pub(crate) fn layer_norm_forward<F: Real>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    layout: Strided,
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let Strided { outer, len, inner } = layout;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); outer * inner];
    let n = F::lit(len as f64);
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let idx = |i: usize| base + i * inner;
            let mean = (0..len).map(|i| x[idx(i)]).sum::<F>() / n;
            let var = (0..len)
                .map(|i| {
                    let d = x[idx(i)] - mean;
                    d * d
                })
                .sum::<F>()
                / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[layout.slice_index(o, r)] = rs;
            for i in 0..len {
                let e = idx(i);
                let h = (x[e] - mean) * rs;
                xhat[e] = h;
                out[e] = gamma[i] * h + beta[i];
            }
        }
    }
    (out, xhat, rstd)
}

pub(crate) fn layer_norm_backward_input<F: Real>(
    dy: &[F],
    gamma: &[F],
    xhat: &[F],
    rstd: &[F],
    layout: Strided,
    gx: &mut [F],
) {
    let Strided { outer, len, inner } = layout;
    let n = F::lit(len as f64);
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let idx = |i: usize| base + i * inner;
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            for i in 0..len {
                let e = idx(i);
                let g = dy[e] * gamma[i];
                m1 = m1 + g;
                m2 = m2 + g * xhat[e];
            }
            m1 = m1 / n;
            m2 = m2 / n;
            let rs = rstd[layout.slice_index(o, r)];
            for i in 0..len {
                let e = idx(i);
                let g = dy[e] * gamma[i];
                gx[e] = gx[e] + rs * (g - m1 - xhat[e] * m2);
            }
        }
    }
}

pub(crate) fn normal_cdf<F: Real>(x: F) -> F {
    F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_with_cdf<F: Real>(x: F, cdf: F) -> F {
    let pdf = (-(x * x) * F::lit(0.5)).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Shape bookkeeping shared by the convolution kernels.
#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub lout: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        batch: usize,
        cin: usize,
        cout: usize,
        len: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(TensorError::Contract(format!("{op}: stride and kernel must be positive")));
        }
        let padded = len + 2 * pad;
        if k > padded {
            return Err(TensorError::Kernel {
                op,
                kernel: k,
                padded,
            });
        }
        Ok(Self {
            batch,
            cin,
            cout,
            len,
            k,
            stride,
            pad,
            lout: (padded - k) / stride + 1,
        })
    }

    /// Output positions `o` for which input index `o·stride + j − pad` is in range.
    fn valid(&self, j: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > j {
            (self.pad - j).div_ceil(self.stride)
        } else {
            0
        };
        let hi_excl = if self.len + self.pad > j {
            ((self.len + self.pad - j - 1) / self.stride + 1).min(self.lout)
        } else {
            0
        };
        lo..hi_excl.max(lo)
    }

    fn input_index(&self, o: usize, j: usize) -> usize {
        o * self.stride + j - self.pad
    }
}

pub(crate) fn dsconv_forward<F: Real>(
    x: &[F],
    depth: &[F],
    point: &[F],
    bias: Option<&[F]>,
    g: &ConvGeom,
) -> (Vec<F>, Vec<F>) {
    let mut hidden = vec![F::zero(); g.batch * g.cin * g.lout];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xr = &x[(b * g.cin + c) * g.len..][..g.len];
            let hr = &mut hidden[(b * g.cin + c) * g.lout..][..g.lout];
            for j in 0..g.k {
                let kv = depth[c * g.k + j];
                for o in g.valid(j) {
                    hr[o] = hr[o] + kv * xr[g.input_index(o, j)];
                }
            }
        }
    }
    let out = pointwise(&hidden, point, bias, g);
    (out, hidden)
}

fn pointwise<F: Real>(hidden: &[F], point: &[F], bias: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let mut out = vec![F::zero(); g.batch * g.cout * g.lout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let orow = &mut out[(b * g.cout + co) * g.lout..][..g.lout];
            if let Some(bias) = bias {
                orow.fill(bias[co]);
            }
            for c in 0..g.cin {
                let p = point[co * g.cin + c];
                let hr = &hidden[(b * g.cin + c) * g.lout..][..g.lout];
                for (ov, &hv) in orow.iter_mut().zip(hr) {
                    *ov = *ov + p * hv;
                }
            }
        }
    }
    out
}

pub(crate) fn conv_bias_backward<F: Real>(dy: &[F], g: &ConvGeom, gb: &mut [F]) {
    for b in 0..g.batch {
        for (co, gbv) in gb.iter_mut().enumerate() {
            let dr = &dy[(b * g.cout + co) * g.lout..][..g.lout];
            *gbv = *gbv + dr.iter().copied().sum::<F>();
        }
    }
}

pub(crate) fn pointwise_backward_weight<F: Real>(dy: &[F], hidden: &[F], g: &ConvGeom, gp: &mut [F]) {
    for b in 0..g.batch {
        for co in 0..g.cout {
            let dr = &dy[(b * g.cout + co) * g.lout..][..g.lout];
            for c in 0..g.cin {
                let hr = &hidden[(b * g.cin + c) * g.lout..][..g.lout];
                gp[co * g.cin + c] = gp[co * g.cin + c] + dot(dr, hr);
            }
        }
    }
}

pub(crate) fn pointwise_backward_input<F: Real>(dy: &[F], point: &[F], g: &ConvGeom) -> Vec<F> {
    let mut dh = vec![F::zero(); g.batch * g.cin * g.lout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let dr = &dy[(b * g.cout + co) * g.lout..][..g.lout];
            for c in 0..g.cin {
                let p = point[co * g.cin + c];
                let hr = &mut dh[(b * g.cin + c) * g.lout..][..g.lout];
                for (h, &d) in hr.iter_mut().zip(dr) {
                    *h = *h + p * d;
                }
            }
        }
    }
    dh
}

pub(crate) fn depthwise_backward_kernel<F: Real>(dh: &[F], x: &[F], g: &ConvGeom, gd: &mut [F]) {
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xr = &x[(b * g.cin + c) * g.len..][..g.len];
            let dr = &dh[(b * g.cin + c) * g.lout..][..g.lout];
            for j in 0..g.k {
                let s = g
                    .valid(j)
                    .map(|o| dr[o] * xr[g.input_index(o, j)])
                    .sum::<F>();
                gd[c * g.k + j] = gd[c * g.k + j] + s;
            }
        }
    }
}

pub(crate) fn depthwise_backward_input<F: Real>(dh: &[F], depth: &[F], g: &ConvGeom, gx: &mut [F]) {
    for b in 0..g.batch {
        for c in 0..g.cin {
            let gr = &mut gx[(b * g.cin + c) * g.len..][..g.len];
            let dr = &dh[(b * g.cin + c) * g.lout..][..g.lout];
            for j in 0..g.k {
                let kv = depth[c * g.k + j];
                for o in g.valid(j) {
                    let i = g.input_index(o, j);
                    gr[i] = gr[i] + kv * dr[o];
                }
            }
        }
    }
}

/// Patch matrix `[batch·lout, cin·k]` of a convolution input; padding reads as zero.
fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let width = g.cin * g.k;
    let mut p = vec![F::zero(); g.batch * g.lout * width];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xr = &x[(b * g.cin + c) * g.len..][..g.len];
            for j in 0..g.k {
                for o in g.valid(j) {
                    p[(b * g.lout + o) * width + c * g.k + j] = xr[g.input_index(o, j)];
                }
            }
        }
    }
    p
}

/// `[cout, cin·k]` → `[cin·k, cout]`.
fn transpose<F: Real>(w: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); w.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

/// `[batch, cout, lout]` ↔ `[batch, lout, cout]`.
fn swap_channels_time<F: Real>(x: &[F], batch: usize, a: usize, b: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for n in 0..batch {
        let src = &x[n * a * b..][..a * b];
        let dst = &mut out[n * a * b..][..a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

pub(crate) fn conv1d_forward<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let width = g.cin * g.k;
    let patches = im2col(x, g);
    let wt = transpose(w, g.cout, width);
    let mut yt = vec![F::zero(); g.batch * g.lout * g.cout];
    affine_forward(&patches, &wt, bias, g.batch * g.lout, width, g.cout, &mut yt);
    swap_channels_time(&yt, g.batch, g.lout, g.cout)
}

pub(crate) fn conv1d_backward_weight<F: Real>(dy: &[F], x: &[F], g: &ConvGeom, gw: &mut [F]) {
    let width = g.cin * g.k;
    let patches = im2col(x, g);
    let dyt = swap_channels_time(dy, g.batch, g.cout, g.lout);
    let mut gwt = vec![F::zero(); width * g.cout];
    affine_backward_weight(&dyt, &patches, g.batch * g.lout, width, g.cout, &mut gwt);
    for co in 0..g.cout {
        for e in 0..width {
            gw[co * width + e] = gw[co * width + e] + gwt[e * g.cout + co];
        }
    }
}

pub(crate) fn conv1d_backward_input<F: Real>(dy: &[F], w: &[F], g: &ConvGeom, gx: &mut [F]) {
    let width = g.cin * g.k;
    let wt = transpose(w, g.cout, width);
    let dyt = swap_channels_time(dy, g.batch, g.cout, g.lout);
    let mut dp = vec![F::zero(); g.batch * g.lout * width];
    affine_backward_input(&dyt, &wt, g.batch * g.lout, width, g.cout, &mut dp);
    for b in 0..g.batch {
        for c in 0..g.cin {
            let gr = &mut gx[(b * g.cin + c) * g.len..][..g.len];
            for j in 0..g.k {
                for o in g.valid(j) {
                    let i = g.input_index(o, j);
                    gr[i] = gr[i] + dp[(b * g.lout + o) * width + c * g.k + j];
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits `(output_index, input_index)` pairs of a permutation in output order.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let (run, run_step) = (out_shape[rank - 1], step[rank - 1]);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    let mut dst = 0usize;
    while dst < total {
        for i in 0..run {
            f(dst + i, src + i * run_step);
        }
        dst += run;
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            src += step[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
}

pub(crate) fn permute<F: Real>(x: &[F], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let out_shape = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![F::zero(); x.len()];
    for_each_permuted(shape, perm, |dst, src| out[dst] = x[src]);
    (out_shape, out)
}

pub(crate) fn permute_backward<F: Real>(dy: &[F], shape: &[usize], perm: &[usize], gx: &mut [F]) {
    for_each_permuted(shape, perm, |dst, src| gx[src] = gx[src] + dy[dst]);
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

const BCE_EPS: f64 = 1e-7;

pub(crate) fn bce_forward<F: Real>(p: &[F], labels: &[F]) -> F {
    let eps = F::lit(BCE_EPS);
    let total = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            // NaN must survive the clamp so divergence is visible to callers.
            let p = if p.is_nan() { p } else { p.max(eps).min(F::one() - eps) };
            -(y * p.ln() + (F::one() - y) * (F::one() - p).ln())
        })
        .sum::<F>();
    total / F::lit(p.len() as f64)
}

pub(crate) fn bce_backward<F: Real>(p: &[F], labels: &[F], dy: F, gp: &mut [F]) {
    let eps = F::lit(BCE_EPS);
    let n = F::lit(p.len() as f64);
    for ((g, &p), &y) in gp.iter_mut().zip(p).zip(labels) {
        if p < eps || p > F::one() - eps {
            continue;
        }
        let d = -(y / p - (F::one() - y) / (F::one() - p));
        *g = *g + dy * d / n;
    }
}
