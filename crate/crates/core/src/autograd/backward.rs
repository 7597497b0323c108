use rayon::prelude::*;

use super::ops::{permute_heads, std_normal_cdf, std_normal_pdf, transpose_last2};
use super::{Gradients, Graph, Op, Var};
use crate::error::Result;
use crate::kernels;
use crate::tensor::{lit, Real, Tensor};

pub(super) fn run<T: Real>(graph: &Graph<T>, loss: Var) -> Result<Gradients<T>> {
    let nodes = &graph.nodes;
    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    if !nodes[loss.0].requires_grad {
        return Ok(Gradients { grads });
    }
    grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

    for i in (0..=loss.0).rev() {
        let node = &nodes[i];
        if matches!(node.op, Op::Leaf) || !node.requires_grad {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let gd = g.data();

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::AddBroadcast(a, b) => {
                if wants(*b) {
                    let bl = val(*b).numel();
                    let summed = kernels::column_sums(gd, bl);
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), summed));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip_with(&g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, zip_with(&g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                acc(*x, g.map(|v| v * f));
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(val(*x).shape(), gd[0]));
            }
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (d_out, d_in) = (ws[0], ws[1]);
                let rows = gd.len() / d_out;
                if wants(*x) {
                    let mut dx = vec![T::zero(); rows * d_in];
                    kernels::matmul_nn(gd, val(*w).data(), &mut dx, 1, 1, (rows, d_out, d_in));
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    kernels::matmul_tn(gd, val(*x).data(), &mut dw, 1, (d_out, rows, d_in));
                    acc(*w, Tensor::from_parts(ws.to_vec(), dw));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(*b, Tensor::from_parts(vec![d_out], kernels::column_sums(gd, d_out)));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if wants(*x) {
                    let dx = kernels::conv2d_backward_input(geom, gd, val(*w).data());
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
                if wants(*w) || wants(*b) {
                    let (dw, db) = kernels::conv2d_backward_params(geom, val(*x).data(), gd);
                    acc(*w, Tensor::from_parts(val(*w).shape().to_vec(), dw));
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let s = val(*x).shape();
                let (bsz, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                        }
                    }
                }
                if wants(*x) {
                    let n: T = lit((bsz * plane) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *training {
                                    k * (gd[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::from_parts(s.to_vec(), dx));
                }
                acc(*gamma, Tensor::from_parts(vec![c], dgamma));
                acc(*beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                if wants(*gamma) || wants(*beta) {
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dgamma[i] = dgamma[i] + grow[i] * hrow[i];
                            dbeta[i] = dbeta[i] + grow[i];
                        }
                    }
                    acc(*gamma, Tensor::from_parts(vec![d], dgamma));
                    acc(*beta, Tensor::from_parts(vec![d], dbeta));
                }
                if wants(*x) {
                    let n: T = lit(d as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    dx.par_chunks_mut(d)
                        .zip(gd.par_chunks(d))
                        .zip(xhat.par_chunks(d))
                        .zip(rstd.par_iter())
                        .with_min_len(16)
                        .for_each(|(((out, grow), hrow), &r)| {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for i in 0..d {
                                let dh = grow[i] * gam[i];
                                s1 = s1 + dh;
                                s2 = s2 + dh * hrow[i];
                            }
                            for i in 0..d {
                                let dh = grow[i] * gam[i];
                                out[i] = r * (dh - s1 / n - hrow[i] * s2 / n);
                            }
                        });
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); gd.len()];
                dx.par_chunks_mut(d)
                    .zip(gd.par_chunks(d))
                    .zip(y.par_chunks(d))
                    .with_min_len(64)
                    .for_each(|((out, grow), yrow)| {
                        let dotp: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for i in 0..d {
                            out[i] = yrow[i] * (grow[i] - dotp);
                        }
                    });
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), dx));
            }
            Op::Gelu(x) => {
                let dx = zip_with(&g, val(*x), |gv, xv| {
                    gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv))
                });
                acc(*x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(*x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let k = gd[0] * lit(2.0 / p.numel() as f64);
                let dp = zip_with(p, t, |a, b| k * (a - b));
                if wants(*target) {
                    acc(*target, dp.map(|v| -v));
                }
                acc(*pred, dp);
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                mkn: (m, k, n),
            } => {
                let (m, k, n, batch) = (*m, *k, *n, *batch);
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    if *trans_b {
                        kernels::matmul_nn(gd, bv, &mut da, batch, batch, (m, n, k));
                    } else {
                        kernels::matmul_nt(gd, bv, &mut da, batch, batch, (m, n, k));
                    }
                    acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), da));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    if *trans_b {
                        kernels::matmul_tn(gd, av, &mut db, batch, (n, m, k));
                    } else {
                        kernels::matmul_tn(av, gd, &mut db, batch, (k, m, n));
                    }
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = g.shape();
                let dx = permute_heads(gd, s[0], s[2], *heads, s[3], false);
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
            }
            Op::MergeHeads { x, heads } => {
                let s = val(*x).shape();
                let dx = permute_heads(gd, s[0], s[2], *heads, s[3], true);
                acc(*x, Tensor::from_parts(s.to_vec(), dx));
            }
            Op::PrependToken { token, x } => {
                let s = val(*x).shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                if wants(*token) {
                    let mut dt = vec![T::zero(); d];
                    for seq in gd.chunks((n + 1) * d) {
                        for (o, &v) in dt.iter_mut().zip(&seq[..d]) {
                            *o = *o + v;
                        }
                    }
                    acc(*token, Tensor::from_parts(vec![d], dt));
                }
                if wants(*x) {
                    let mut dx = Vec::with_capacity(b * n * d);
                    for seq in gd.chunks((n + 1) * d) {
                        dx.extend_from_slice(&seq[d..]);
                    }
                    acc(*x, Tensor::from_parts(s.to_vec(), dx));
                }
            }
            Op::SelectToken { x, index } => {
                let s = val(*x).shape();
                let (t, d) = (s[1], s[2]);
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (bi, row) in gd.chunks(d).enumerate() {
                    dx[(bi * t + index) * d..][..d].copy_from_slice(row);
                }
                acc(*x, Tensor::from_parts(s.to_vec(), dx));
            }
            Op::FlattenGrid(x) => {
                let s = val(*x).shape();
                let dx = transpose_last2(gd, s[0], s[2] * s[3], s[1]);
                acc(*x, Tensor::from_parts(s.to_vec(), dx));
            }
        }
    }
    Ok(Gradients { grads })
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
