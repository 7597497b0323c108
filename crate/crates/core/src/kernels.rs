// Raw compute kernels over row-major slices.
//
// Every kernel parallelizes over independent output rows (or planes) and
// accumulates each output element in a fixed sequential order, so results
// are bit-identical regardless of the thread count.

use rayon::prelude::*;

use crate::tensor::Real;

const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

fn for_each_row<T: Real>(
    out: &mut [T],
    row_len: usize,
    work: usize,
    f: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    if work < PAR_THRESHOLD {
        out.chunks_mut(row_len).enumerate().for_each(|(r, row)| f(r, row));
    } else {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
    }
}

/// `out[b] = a[b] · b[b]ᵀ` with `a: [batch, m, k]`, `b: [batch, n, k]`.
/// A `b_batch` of 1 shares one right operand across the batch.
pub(crate) fn matmul_nt<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    b_batch: usize,
    (m, k, n): (usize, usize, usize),
) {
    debug_assert_eq!(out.len(), batch * m * n);
    for_each_row(out, n, batch * m * n * k, |r, row| {
        let bi = r / m;
        let a_row = &a[r * k..(r + 1) * k];
        let b_mat = &b[(bi % b_batch) * n * k..];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b_mat[j * k..(j + 1) * k]);
        }
    });
}

/// `out[b] = a[b] · b[b]` with `a: [batch, m, k]`, `b: [batch, k, n]`.
pub(crate) fn matmul_nn<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    b_batch: usize,
    (m, k, n): (usize, usize, usize),
) {
    debug_assert_eq!(out.len(), batch * m * n);
    for_each_row(out, n, batch * m * n * k, |r, row| {
        let bi = r / m;
        row.iter_mut().for_each(|v| *v = T::zero());
        let a_row = &a[r * k..(r + 1) * k];
        let b_mat = &b[(bi % b_batch) * k * n..];
        for (p, &av) in a_row.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b_mat[p * n..(p + 1) * n], row);
            }
        }
    });
}

/// `out[b] = a[b]ᵀ · b[b]` with `a: [batch, k, m]`, `b: [batch, k, n]`.
pub(crate) fn matmul_tn<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    (m, k, n): (usize, usize, usize),
) {
    debug_assert_eq!(out.len(), batch * m * n);
    for_each_row(out, n, batch * m * n * k, |r, row| {
        let (bi, i) = (r / m, r % m);
        row.iter_mut().for_each(|v| *v = T::zero());
        let a_mat = &a[bi * k * m..(bi + 1) * k * m];
        let b_mat = &b[bi * k * n..(bi + 1) * k * n];
        for p in 0..k {
            let av = a_mat[p * m + i];
            if av != T::zero() {
                axpy(av, &b_mat[p * n..(p + 1) * n], row);
            }
        }
    });
}

/// Sum of `rows` × `cols` matrix over its rows, i.e. a bias gradient.
pub(crate) fn column_sums<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in x.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        (
            (self.in_h + 2 * ph - kh) / sh + 1,
            (self.in_w + 2 * pw - kw) / sw + 1,
        )
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Input coordinate hit by output `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

/// Zero-padded cross-correlation. One parallel task per (batch, out-channel)
/// plane.
pub(crate) fn conv2d_forward<T: Real>(
    g: &Conv2dGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane = oh * ow;
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let work = out.len() * cin_g * kh * kw;
    for_each_row(&mut out, plane, work, |r, dst| {
        let (b, co) = (r / g.out_channels, r % g.out_channels);
        let group = co / cout_g;
        dst.iter_mut().for_each(|v| *v = bias[co]);
        for cl in 0..cin_g {
            let ci = group * cin_g + cl;
            let src = &input[(b * g.in_channels + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let w = &weight[(co * cin_g + cl) * kh * kw..][..kh * kw];
            for y in 0..oh {
                for ki in 0..kh {
                    let Some(iy) = Conv2dGeometry::src(y, ki, g.stride.0, g.padding.0, g.in_h)
                    else {
                        continue;
                    };
                    let src_row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                    let w_row = &w[ki * kw..(ki + 1) * kw];
                    for x in 0..ow {
                        let mut acc = dst[y * ow + x];
                        for (kj, &wv) in w_row.iter().enumerate() {
                            if let Some(ix) =
                                Conv2dGeometry::src(x, kj, g.stride.1, g.padding.1, g.in_w)
                            {
                                acc = acc + wv * src_row[ix];
                            }
                        }
                        dst[y * ow + x] = acc;
                    }
                }
            }
        }
    });
    out
}

/// Gradient of the input: one task per (batch, in-channel) plane.
pub(crate) fn conv2d_backward_input<T: Real>(
    g: &Conv2dGeometry,
    grad_out: &[T],
    weight: &[T],
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_plane = g.in_h * g.in_w;
    let mut grad_in = vec![T::zero(); g.batch * g.in_channels * in_plane];
    let work = grad_out.len() * cin_g * kh * kw;
    for_each_row(&mut grad_in, in_plane, work, |r, dst| {
        let (b, ci) = (r / g.in_channels, r % g.in_channels);
        let (group, cl) = (ci / cin_g, ci % cin_g);
        for co in group * cout_g..(group + 1) * cout_g {
            let go = &grad_out[(b * g.out_channels + co) * oh * ow..][..oh * ow];
            let w = &weight[(co * cin_g + cl) * kh * kw..][..kh * kw];
            for y in 0..oh {
                for ki in 0..kh {
                    let Some(iy) = Conv2dGeometry::src(y, ki, g.stride.0, g.padding.0, g.in_h)
                    else {
                        continue;
                    };
                    for x in 0..ow {
                        let gv = go[y * ow + x];
                        for kj in 0..kw {
                            if let Some(ix) =
                                Conv2dGeometry::src(x, kj, g.stride.1, g.padding.1, g.in_w)
                            {
                                let d = &mut dst[iy * g.in_w + ix];
                                *d = *d + gv * w[ki * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradients of weight and bias: one task per output channel.
pub(crate) fn conv2d_backward_params<T: Real>(
    g: &Conv2dGeometry,
    input: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let per_out = cin_g * kh * kw;
    let mut grad_w = vec![T::zero(); g.out_channels * per_out];
    let work = grad_out.len() * per_out;
    for_each_row(&mut grad_w, per_out, work, |co, dst| {
        let group = co / cout_g;
        for b in 0..g.batch {
            let go = &grad_out[(b * g.out_channels + co) * oh * ow..][..oh * ow];
            for cl in 0..cin_g {
                let ci = group * cin_g + cl;
                let src = &input[(b * g.in_channels + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let mut acc = T::zero();
                        for y in 0..oh {
                            let Some(iy) =
                                Conv2dGeometry::src(y, ki, g.stride.0, g.padding.0, g.in_h)
                            else {
                                continue;
                            };
                            for x in 0..ow {
                                if let Some(ix) =
                                    Conv2dGeometry::src(x, kj, g.stride.1, g.padding.1, g.in_w)
                                {
                                    acc = acc + go[y * ow + x] * src[iy * g.in_w + ix];
                                }
                            }
                        }
                        let d = &mut dst[(cl * kh + ki) * kw + kj];
                        *d = *d + acc;
                    }
                }
            }
        }
    });
    let mut grad_b = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        for (co, gb) in grad_b.iter_mut().enumerate() {
            let go = &grad_out[(b * g.out_channels + co) * oh * ow..][..oh * ow];
            *gb = *gb + go.iter().copied().sum::<T>();
        }
    }
    (grad_w, grad_b)
}
