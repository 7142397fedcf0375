use std::sync::Arc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Result, TensorError};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel());
    if t.numel() > 0 {
        // Innermost output axis is walked with a fixed source stride.
        let last = rank - 1;
        let (n_last, s_last) = (out_shape[last], strides[last]);
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        loop {
            for j in 0..n_last {
                out.push(src[base + j * s_last]);
            }
            let mut d = last;
            loop {
                if d == 0 {
                    return Tensor::from_vec(&out_shape, out).expect("permute size");
                }
                d -= 1;
                idx[d] += 1;
                base += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                base -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::from_vec(&out_shape, out).expect("permute size")
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.graph.record(out, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.graph.record(out, &[self, other], |g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.record(out, &[self, other], move |g| {
            vec![
                Some(g.zip_map(&b, |gv, bv| gv * bv).expect("shape")),
                Some(g.zip_map(&a, |gv, av| gv * av).expect("shape")),
            ]
        }))
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.graph.record(out, &[self], move |g| vec![Some(g.map(|v| v * s))])
    }

    /// Multiply by a differentiable single-element tensor.
    pub fn mul_scalar(self, s: Var<'g>) -> Result<Var<'g>> {
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(TensorError::Shape(format!("scalar expected, got {:?}", sv.shape())));
        }
        let k = sv.data()[0];
        let x = self.value();
        let out = x.map(|v| v * k);
        Ok(self.graph.record(out, &[self, s], move |g| {
            let ds: f64 = g.data().iter().zip(x.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            vec![Some(g.map(|v| v * k)), Some(Tensor::from_vec(sv.shape(), vec![ds as f32]).expect("scalar"))]
        }))
    }

    pub fn add_const(self, c: Arc<Tensor>) -> Result<Var<'g>> {
        let out = self.value().zip_map(&c, |x, y| x + y)?;
        Ok(self.graph.record(out, &[self], |g| vec![Some(g.clone())]))
    }

    pub fn mul_const(self, c: Arc<Tensor>) -> Result<Var<'g>> {
        let out = self.value().zip_map(&c, |x, y| x * y)?;
        Ok(self.graph.record(out, &[self], move |g| vec![Some(g.zip_map(&c, |a, b| a * b).expect("shape"))]))
    }

    pub fn relu(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.graph.record(out, &[self], move |g| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }).expect("shape"))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.graph.record(out, &[self], move |g| {
            vec![Some(g.clone().reshape(&in_shape).expect("reshape back"))]
        }))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Shape(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = permute_tensor(&x, perm);
        Ok(self.graph.record(out, &[self], move |g| vec![Some(permute_tensor(g, &inverse))]))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Result<Var<'g>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(TensorError::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    pub fn narrow(self, dim: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(TensorError::Shape(format!(
                "narrow({dim}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, size, inner) = split_at_dim(&shape, dim);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = len;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.graph.record(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&shape);
            let d = dx.data_mut();
            for o in 0..outer {
                let base = o * size * inner + start * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Batched matrix product: `[B, M, K] @ [B, K, N] -> [B, M, N]`.
    pub fn bmm(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (ba, m, k) = a.dims3()?;
        let (bb, k2, n) = b.dims3()?;
        if ba != bb || k != k2 {
            return Err(TensorError::Shape(format!("bmm {:?} @ {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm(
                MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                1.0,
                0.0,
            );
        }
        let out = Tensor::from_vec(&[ba, m, n], out)?;
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        Ok(self.graph.record(out, &[self, other], move |g| {
            let gd = g.data();
            let da = need_a.then(|| {
                let mut da = vec![0.0; ba * m * k];
                for i in 0..ba {
                    gemm(
                        MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                        MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        1.0,
                        0.0,
                    );
                }
                Tensor::from_vec(&[ba, m, k], da).expect("bmm grad")
            });
            let db = need_b.then(|| {
                let mut db = vec![0.0; ba * k * n];
                for i in 0..ba {
                    gemm(
                        MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                        MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                        &mut db[i * k * n..(i + 1) * k * n],
                        1.0,
                        0.0,
                    );
                }
                Tensor::from_vec(&[ba, k, n], db).expect("bmm grad")
            });
            vec![da, db]
        }))
    }

    /// Softmax over the last axis, computed in f32 and stable under `-inf`
    /// entries as long as each row has one finite value.
    pub fn softmax_last(self) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().expect("rank >= 1");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let yc = Arc::new(y.clone());
        self.graph.record(y, &[self], move |g| {
            let mut dx = (*yc).clone();
            for (dr, (gr, yr)) in dx
                .data_mut()
                .chunks_mut(n)
                .zip(g.data().chunks(n).zip(yc.data().chunks(n)))
            {
                let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum_f64() as f32);
        self.graph.record_full(out, &[self], move |g| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    /// `sum(self * c)` for a constant `c`; used to probe single outputs.
    pub fn dot_const(self, c: Arc<Tensor>) -> Result<Var<'g>> {
        let x = self.value();
        x.expect_same_shape(&c)?;
        let s: f64 = x.data().iter().zip(c.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        Ok(self.graph.record_full(Tensor::scalar(s as f32), &[self], move |g| {
            vec![Some(c.map(|v| v * g.data()[0]))]
        }))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(self, p: f32, rng: &mut impl Rng) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value().shape().to_vec();
        let mask: Vec<f32> =
            (0..self.value().numel()).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect();
        self.mul_const(Arc::new(Tensor::from_vec(&shape, mask)?))
    }
}

/// Concatenate along `dim`.
pub fn cat<'g>(parts: &[Var<'g>], dim: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| TensorError::Shape("cat of nothing".into()))?;
    let graph = first.graph;
    let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if dim >= base.len() {
        return Err(TensorError::Shape(format!("cat dim {dim} for rank {}", base.len())));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != dim && a != b) {
            return Err(TensorError::Shape(format!("cannot cat {:?} with {:?} on dim {dim}", s, base)));
        }
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[dim]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, _, inner) = split_at_dim(&base, dim);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &sz) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[dim] = total;
    let out = Tensor::from_vec(&out_shape, out)?;
    Ok(graph.record(out, parts, move |g| {
        let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
        let gd = g.data();
        let mut off = 0;
        for _ in 0..outer {
            for (gv, &sz) in grads.iter_mut().zip(&sizes) {
                gv.extend_from_slice(&gd[off..off + sz * inner]);
                off += sz * inner;
            }
        }
        grads
            .into_iter()
            .zip(&sizes)
            .map(|(gv, &sz)| {
                let mut s = base.clone();
                s[dim] = sz;
                Some(Tensor::from_vec(&s, gv).expect("cat grad"))
            })
            .collect()
    }))
}
