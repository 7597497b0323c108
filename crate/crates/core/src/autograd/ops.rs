use rand::Rng;
use rayon::prelude::*;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeometry};
use crate::tensor::{lit, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

fn same_shape(context: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

/// `1/√(2π)`
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn std_normal_cdf<T: Real>(x: T) -> T {
    lit::<T>(0.5) * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn std_normal_pdf<T: Real>(x: T) -> T {
    lit::<T>(INV_SQRT_2PI) * (lit::<T>(-0.5) * x * x).exp()
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`; `b` is
    /// repeated over the leading extents.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len()) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o = *o + v;
            }
        }
        self.push("add_broadcast", out, Op::AddBroadcast(a, b), &[a, b])
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// `x · wᵀ + b` over the last axis of `x`, with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 {
            return Err(Error::config("linear", format!("weight must be rank 2, got {ws:?}")));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        if xs.last() != Some(&d_in) {
            return Err(Error::config(
                "linear",
                format!("input last extent {:?} does not match weight in-features {d_in}", xs.last()),
            ));
        }
        if let Some(b) = b {
            same_shape("linear bias", &[d_out], self.shape(b))?;
        }
        let rows = self.value(x).numel() / d_in;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = vec![T::zero(); rows * d_out];
        kernels::matmul_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            1,
            1,
            (rows, d_in, d_out),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "linear",
            Tensor::from_parts(out_shape, out),
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    /// Grouped 2-D cross-correlation with zero padding.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin/groups, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 {
            return Err(Error::config("conv2d", format!("input must be rank 4, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::config("conv2d", format!("weight must be rank 4, got {ws:?}")));
        }
        if groups == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("conv2d", "groups and strides must be positive"));
        }
        let (cin, cout) = (xs[1], ws[0]);
        if cin % groups != 0 {
            return Err(Error::config(
                "conv2d",
                format!("in_channels {cin} not divisible by groups {groups}"),
            ));
        }
        if cout % groups != 0 {
            return Err(Error::config(
                "conv2d",
                format!("out_channels {cout} not divisible by groups {groups}"),
            ));
        }
        if ws[1] != cin / groups {
            return Err(Error::config(
                "conv2d",
                format!("weight in_channels {} != in_channels/groups {}", ws[1], cin / groups),
            ));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh > xs[2] + 2 * padding.0 {
            return Err(Error::config(
                "conv2d",
                format!("kernel height {kh} exceeds padded height {}", xs[2] + 2 * padding.0),
            ));
        }
        if kw > xs[3] + 2 * padding.1 {
            return Err(Error::config(
                "conv2d",
                format!("kernel width {kw} exceeds padded width {}", xs[3] + 2 * padding.1),
            ));
        }
        same_shape("conv2d bias", &[cout], self.shape(b))?;
        let geom = Conv2dGeometry {
            batch: xs[0],
            in_channels: cin,
            out_channels: cout,
            in_h: xs[2],
            in_w: xs[3],
            kernel: (kh, kw),
            stride,
            padding,
            groups,
        };
        let (oh, ow) = geom.out_hw();
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = Tensor::from_parts(vec![xs[0], cout, oh, ow], data);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Per-channel normalization of `x: [B, C, H, W]`. In training mode the
    /// batch statistics are used and folded into the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        cfg: BatchNormConfig,
        training: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::config("batch_norm2d", format!("input must be rank 4, got {xs:?}")));
        }
        let (bsz, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            same_shape(&format!("batch_norm2d {what}"), &[c], self.shape(v))?;
        }
        same_shape("batch_norm2d running_mean", &[c], running_mean.shape())?;
        same_shape("batch_norm2d running_var", &[c], running_var.shape())?;
        let count = bsz * plane;
        if training && count < 2 {
            return Err(Error::DegenerateVariance {
                op: "batch_norm2d".into(),
                count,
            });
        }
        let xv = self.value(x).data();
        let eps: T = lit(cfg.eps);
        let (mean, var): (Vec<T>, Vec<T>) = if training {
            (0..c)
                .into_par_iter()
                .map(|ch| {
                    let n: T = lit(count as f64);
                    let mut s = T::zero();
                    for b in 0..bsz {
                        s = s + xv[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut ss = T::zero();
                    for b in 0..bsz {
                        for &v in &xv[(b * c + ch) * plane..][..plane] {
                            ss = ss + (v - m) * (v - m);
                        }
                    }
                    (m, ss / n)
                })
                .unzip()
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + bt[ch];
                }
            }
        }
        if training {
            let m: T = lit(cfg.momentum);
            let unbias: T = lit(count as f64 / (count - 1) as f64);
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * var[ch] * unbias;
            }
        }
        self.push(
            "batch_norm2d",
            Tensor::from_parts(xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        same_shape("layer_norm gamma", &[d], self.shape(gamma))?;
        same_shape("layer_norm beta", &[d], self.shape(beta))?;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let eps: T = lit(eps);
        let n: T = lit(d as f64);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        xhat.par_chunks_mut(d)
            .zip(out.par_chunks_mut(d))
            .zip(rstd.par_iter_mut())
            .zip(xv.par_chunks(d))
            .with_min_len(16)
            .for_each(|(((h, o), r), src)| {
                let mean = src.iter().copied().sum::<T>() / n;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                *r = inv;
                for i in 0..d {
                    h[i] = (src[i] - mean) * inv;
                    o[i] = h[i] * g[i] + bt[i];
                }
            });
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        out.data_mut()
            .par_chunks_mut(d)
            .with_min_len(64)
            .for_each(|row| {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            });
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut()
            .par_chunks_mut(4096)
            .for_each(|c| c.iter_mut().for_each(|v| *v = *v * std_normal_cdf(*v)));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep: T = lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean of squared differences over all entries.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mse_loss", self.shape(target), self.shape(pred))?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        if p.is_empty() {
            return Err(Error::config("mse_loss", "empty batch"));
        }
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / lit(p.len() as f64));
        self.push("mse_loss", out, Op::Mse { pred, target }, &[pred, target])
    }

    /// Batched product over matching leading extents: `[.., M, K] · [.., K, N]`,
    /// or `[.., M, K] · [.., N, K]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::config(
                "bmm",
                format!("inner extents differ: {k} vs {kb} ({sa:?} x {sb:?})"),
            ));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            kernels::matmul_nt(av, bv, &mut out, batch, batch, (m, k, n));
        } else {
            kernels::matmul_nn(av, bv, &mut out, batch, batch, (m, k, n));
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            "bmm",
            Tensor::from_parts(shape, out),
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                mkn: (m, k, n),
            },
            &[a, b],
        )
    }

    /// `[B, T, H·E] -> [B, H, T, E]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::config("split_heads", format!("input must be rank 3, got {s:?}")));
        }
        if heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::config(
                "split_heads",
                format!("hidden {} not divisible by heads {heads}", s[2]),
            ));
        }
        let (b, t, e) = (s[0], s[1], s[2] / heads);
        let out = permute_heads(self.value(x).data(), b, t, heads, e, true);
        self.push(
            "split_heads",
            Tensor::from_parts(vec![b, heads, t, e], out),
            Op::SplitHeads { x, heads },
            &[x],
        )
    }

    /// `[B, H, T, E] -> [B, T, H·E]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::config("merge_heads", format!("input must be rank 4, got {s:?}")));
        }
        let (b, heads, t, e) = (s[0], s[1], s[2], s[3]);
        let out = permute_heads(self.value(x).data(), b, t, heads, e, false);
        self.push(
            "merge_heads",
            Tensor::from_parts(vec![b, t, heads * e], out),
            Op::MergeHeads { x, heads },
            &[x],
        )
    }

    /// Prepend one shared token `[D]` to every sequence of `x: [B, N, D]`.
    pub fn prepend_token(&mut self, token: Var, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::config("prepend_token", format!("input must be rank 3, got {s:?}")));
        }
        same_shape("prepend_token", &[s[2]], self.shape(token))?;
        let (b, n, d) = (s[0], s[1], s[2]);
        let (tv, xv) = (self.value(token).data(), self.value(x).data());
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for seq in xv.chunks(n * d) {
            out.extend_from_slice(tv);
            out.extend_from_slice(seq);
        }
        self.push(
            "prepend_token",
            Tensor::from_parts(vec![b, n + 1, d], out),
            Op::PrependToken { token, x },
            &[token, x],
        )
    }

    /// Row `index` of every sequence: `[B, T, D] -> [B, D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::config(
                "select_token",
                format!("cannot take token {index} of shape {s:?}"),
            ));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let out = (0..b)
            .flat_map(|i| xv[(i * t + index) * d..][..d].iter().copied())
            .collect();
        self.push(
            "select_token",
            Tensor::from_parts(vec![b, d], out),
            Op::SelectToken { x, index },
            &[x],
        )
    }

    /// Feature maps to a token sequence: `[B, C, H, W] -> [B, H·W, C]`, with
    /// tokens ordered row-major over the `(H, W)` grid.
    pub fn flatten_grid(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::config("flatten_grid", format!("input must be rank 4, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out = transpose_last2(self.value(x).data(), b, c, hw);
        self.push(
            "flatten_grid",
            Tensor::from_parts(vec![b, hw, c], out),
            Op::FlattenGrid(x),
            &[x],
        )
    }
}

/// Batched transpose of `[batch, rows, cols]` into `[batch, cols, rows]`.
pub(crate) fn transpose_last2<T: Real>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let (src, dst) = (&x[b * rows * cols..], &mut out[b * rows * cols..]);
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// `split == true`: `[B, T, H, E] -> [B, H, T, E]`; otherwise the inverse.
pub(crate) fn permute_heads<T: Real>(
    x: &[T],
    b: usize,
    t: usize,
    heads: usize,
    e: usize,
    split: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let merged = ((bi * t + ti) * heads + h) * e;
                let split_at = ((bi * heads + h) * t + ti) * e;
                let (src, dst) = if split {
                    (merged, split_at)
                } else {
                    (split_at, merged)
                };
                out[dst..dst + e].copy_from_slice(&x[src..src + e]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, (1, 1), (0, 0), 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_rejects_indivisible_groups() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[4, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = g.conv2d(x, w, b, (1, 1), (0, 0), 2).unwrap_err();
        assert!(err.to_string().contains("in_channels 3"), "{err}");
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.linear(eye, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);

        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.linear(bad, w, None).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let (one, zero) = (g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, one, zero, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let x = g.constant(Tensor::full(&[1, 2], 7.0));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(Tensor::randn(&[4, 768], 3.0, &mut rng));
        let (one, zero) = (g.constant(Tensor::ones(&[768])), g.constant(Tensor::zeros(&[768])));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        for row in g.value(y).data().chunks(768) {
            let m = row.iter().sum::<f64>() / 768.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 768.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-4, "{m} {v}");
        }
    }

    #[test]
    fn batch_norm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::<f64>::randn(&[3, 2, 4, 5], 2.0, &mut rng).map(|v| v + 10.0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(input.clone());
        let (one, zero) = (g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])));

        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::ones(&[2]));
        let y = g.batch_norm2d(x, one, zero, &mut rm, &mut rv, BatchNormConfig::default(), false).unwrap();
        let expected: Vec<f64> = input.data().iter().map(|v| v / (1.0 + 1e-5f64).sqrt()).collect();
        assert!(close(g.value(y).data(), &expected, 1e-12));

        let y = g.batch_norm2d(x, one, zero, &mut rm, &mut rv, BatchNormConfig::default(), true).unwrap();
        let out = g.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| out[(b * 2 + ch) * 20..][..20].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 60.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 60.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-5, "{m} {v}");
        }

        let x = g.constant(Tensor::full(&[1, 1, 2, 5], 10.0));
        let (one, zero) = (g.constant(Tensor::ones(&[1])), g.constant(Tensor::zeros(&[1])));
        let (mut rm, mut rv) = (Tensor::zeros(&[1]), Tensor::ones(&[1]));
        g.batch_norm2d(x, one, zero, &mut rm, &mut rv, BatchNormConfig::default(), true).unwrap();
        assert!((rm.data()[0] - 1.0).abs() < 1e-15);

        let x = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let err = g.batch_norm2d(x, one, zero, &mut rm, &mut rv, BatchNormConfig::default(), true);
        assert!(matches!(err, Err(Error::DegenerateVariance { count: 1, .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.0));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.constant(t(&[1, 2], &[0.0, 2f64.ln()]));
        let y = g.softmax(x).unwrap();
        assert!(close(g.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
    }

    #[test]
    fn gelu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 10.0, 1.0]));
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        assert!((v[2] - 0.841_345).abs() < 1e-6);
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[100_000]));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = g.value(y).mean();
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let q = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let l = g.mse_loss(p, q).unwrap();
        assert_eq!(g.value(l).data(), &[12.5]);
        let l = g.mse_loss(q, q).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let q2 = g.constant(t(&[1, 2], &[6.0, 8.0]));
        let l2 = g.mse_loss(p, q2).unwrap();
        assert_eq!(g.value(l2).data(), &[50.0]);
        let e = g.constant(Tensor::zeros(&[0, 2]));
        assert!(g.mse_loss(e, e).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 3]);

        // mse(w·x, t) with scalar w: dL/dw = 2·Σ x·(w·x − t)/n
        let xs = [1.0, 2.0, -1.0, 0.5];
        let ts = [0.3, 1.0, 2.0, -1.0];
        let w0 = 0.7;
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 1], &xs));
        let w = g.param(t(&[1, 1], &[w0]));
        let y = g.linear(x, w, None).unwrap();
        let target = g.constant(t(&[4, 1], &ts));
        let l = g.mse_loss(y, target).unwrap();
        let expected: f64 = xs.iter().zip(&ts).map(|(x, t)| 2.0 * x * (w0 * x - t)).sum::<f64>() / 4.0;
        let grad = g.backward(l).unwrap().get(w).unwrap().data()[0];
        assert!((grad - expected).abs() < 1e-14);

        // Fan-out: x used twice accumulates.
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 2.0]);

        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_ignore_shifts(
            rows in 1usize..5,
            cols in 1usize..9,
            seed in any::<u64>(),
            shift in -50.0f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = Tensor::<f64>::randn(&[rows, cols], 4.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let x = g.constant(base.clone());
            let xs = g.constant(base.map(|v| v + shift));
            let (y, ys) = (g.softmax(x).unwrap(), g.softmax(xs).unwrap());
            for row in g.value(y).data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert!(close(g.value(y).data(), g.value(ys).data(), 1e-12));
        }

        #[test]
        fn grouped_conv_equals_per_channel_conv(
            batch in 1usize..3,
            channels in 1usize..5,
            mult in 1usize..3,
            h in 2usize..7,
            w in 2usize..7,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (kh, kw) = (2.min(h), 2.min(w));
            let x = Tensor::<f64>::randn(&[batch, channels, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[channels * mult, 1, kh, kw], 1.0, &mut rng);
            let bias = Tensor::<f64>::randn(&[channels * mult], 1.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bias.clone()));
            let y = g.conv2d(xv, wv, bv, (1, 1), (1, 0), channels).unwrap();
            let out = g.value(y).clone();
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            for ch in 0..channels {
                let plane: Vec<f64> = (0..batch)
                    .flat_map(|b| x.data()[(b * channels + ch) * h * w..][..h * w].to_vec())
                    .collect();
                let xc = g.constant(Tensor::from_f64(&[batch, 1, h, w], &plane).unwrap());
                let range = ch * mult..(ch + 1) * mult;
                let wc = g.constant(Tensor::from_f64(&[mult, 1, kh, kw], &wt.data()[range.start * kh * kw..range.end * kh * kw]).unwrap());
                let bc = g.constant(Tensor::from_f64(&[mult], &bias.data()[range.clone()]).unwrap());
                let yc = g.conv2d(xc, wc, bc, (1, 1), (1, 0), 1).unwrap();
                let single = g.value(yc);
                for b in 0..batch {
                    for m in 0..mult {
                        let got = &out.data()[((b * channels * mult) + ch * mult + m) * oh * ow..][..oh * ow];
                        let want = &single.data()[(b * mult + m) * oh * ow..][..oh * ow];
                        prop_assert!(close(got, want, 1e-12));
                    }
                }
            }
        }
    }
}
