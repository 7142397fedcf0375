use crate::autograd::Var;
use crate::error::{Result, TensorError};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dArgs {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    args: Conv2dArgs,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.args.stride == 1 && self.args.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv_out_size(input: usize, kernel: usize, args: Conv2dArgs) -> Option<usize> {
    let span = args.dilation * (kernel - 1) + 1;
    let padded = input + 2 * args.padding;
    if padded < span || args.stride == 0 {
        return None;
    }
    Some((padded - span) / args.stride + 1)
}

fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let Conv2dArgs { stride, padding, dilation } = g.args;
    let l = g.col_len();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let Conv2dArgs { stride, padding, dilation } = g.args;
    let l = g.col_len();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// 2-d cross-correlation, `x: N×C×H×W`, `weight: O×C×kh×kw`, optional `bias: O`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, args: Conv2dArgs) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = x.dims4()?;
        let (o, wc, kh, kw) = w.dims4()?;
        if wc != c {
            return Err(TensorError::Shape(format!(
                "conv weight {:?} expects {wc} input channels, input has {c}",
                w.shape()
            )));
        }
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [o] {
                return Err(TensorError::Shape(format!("conv bias {:?} for {o} outputs", b.shape())));
            }
        }
        let (oh, ow) = match (conv_out_size(h, kh, args), conv_out_size(wd, kw, args)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::Shape(format!(
                    "conv {kh}x{kw} {args:?} does not fit input {h}x{wd}"
                )))
            }
        };
        let geo = Geometry { c, h, w: wd, kh, kw, oh, ow, args };
        let (rows, l) = (geo.col_rows(), geo.col_len());
        let in_per = c * h * wd;
        let mut out = vec![0.0; n * o * l];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * l] };
        for i in 0..n {
            let xs = &x.data()[i * in_per..(i + 1) * in_per];
            let colref = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            let dst = &mut out[i * o * l..(i + 1) * o * l];
            gemm(MatRef::new(w.data(), o, rows), MatRef::new(colref, rows, l), dst, 1.0, 0.0);
            if let Some(b) = &b {
                for (oc, chunk) in dst.chunks_mut(l).enumerate() {
                    let bv = b.data()[oc];
                    for v in chunk {
                        *v += bv;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, o, oh, ow], out)?;
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        let need_b = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph.record(out, &parents, move |g| {
            let gd = g.data();
            let mut dx = need_x.then(|| vec![0.0; n * in_per]);
            let mut dw = need_w.then(|| vec![0.0; o * rows]);
            let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { rows * l }];
            for i in 0..n {
                let gy = &gd[i * o * l..(i + 1) * o * l];
                if let Some(dw) = dw.as_mut() {
                    let xs = &x.data()[i * in_per..(i + 1) * in_per];
                    let colref = if geo.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &geo, &mut cols);
                        &cols
                    };
                    gemm(MatRef::new(gy, o, l), MatRef::new(colref, rows, l).t(), dw, 1.0, 1.0);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[i * in_per..(i + 1) * in_per];
                    if geo.is_pointwise() {
                        gemm(MatRef::new(w.data(), o, rows).t(), MatRef::new(gy, o, l), dxs, 1.0, 1.0);
                    } else {
                        gemm(MatRef::new(w.data(), o, rows).t(), MatRef::new(gy, o, l), &mut cols, 1.0, 0.0);
                        col2im(&cols, &geo, dxs);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_vec(&[n, c, h, wd], d).expect("dx")),
                dw.map(|d| Tensor::from_vec(&[o, c, kh, kw], d).expect("dw")),
            ];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut db = vec![0.0f32; o];
                    for i in 0..n {
                        for (oc, chunk) in gd[i * o * l..(i + 1) * o * l].chunks(l).enumerate() {
                            db[oc] += chunk.iter().sum::<f32>();
                        }
                    }
                    Tensor::from_vec(&[o], db).expect("db")
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn naive(x: &Tensor, w: &Tensor, args: Conv2dArgs) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let oh = conv_out_size(h, kh, args).unwrap();
        let ow = conv_out_size(wd, kw, args).unwrap();
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * args.stride + i * args.dilation) as isize - args.padding as isize;
                                    let ix = (xx * args.stride + j * args.dilation) as isize - args.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at(&[b, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, i, j]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, oc, y, xx], s);
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], k: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f32) * k).sin()).collect()).unwrap()
    }

    #[test]
    fn matches_direct_loops_for_strided_dilated_cases() {
        for args in [
            Conv2dArgs { stride: 1, padding: 1, dilation: 1 },
            Conv2dArgs { stride: 2, padding: 3, dilation: 1 },
            Conv2dArgs { stride: 1, padding: 2, dilation: 2 },
            Conv2dArgs { stride: 1, padding: 0, dilation: 1 },
        ] {
            let x = ramp(&[2, 3, 7, 6], 0.37);
            let k = if args.padding == 3 { 7 } else { 3 };
            let w = ramp(&[4, 3, k, k], 0.11);
            let g = Graph::new();
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, args).unwrap();
            let want = naive(&x, &w, args);
            assert!(y.value().max_abs_diff(&want) < 1e-4, "{args:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let args = Conv2dArgs { stride: 2, padding: 2, dilation: 2 };
        let x = ramp(&[2, 2, 5, 5], 0.7);
        let w = ramp(&[3, 2, 3, 3], 0.3);
        let b = ramp(&[3], 1.3);
        let probe = std::sync::Arc::new(ramp(&[2, 3, 3, 3], 0.9));
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let g = Graph::new();
            let y = g
                .constant(x.clone())
                .conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), args)
                .unwrap();
            y.dot_const(probe.clone()).unwrap().value().data()[0] as f64
        };
        let g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let out = xv.conv2d(wv, Some(bv), args).unwrap().dot_const(probe.clone()).unwrap();
        let grads = g.backward(out);
        let eps = 1e-2;
        for (which, t, grad) in [
            (0, &x, grads.get(xv).unwrap()),
            (1, &w, grads.get(wv).unwrap()),
            (2, &b, grads.get(bv).unwrap()),
        ] {
            for i in (0..t.numel()).step_by(3) {
                let mut p = t.clone();
                p.data_mut()[i] += eps;
                let mut m = t.clone();
                m.data_mut()[i] -= eps;
                let (fp, fm) = match which {
                    0 => (f(&p, &w, &b), f(&m, &w, &b)),
                    1 => (f(&x, &p, &b), f(&x, &m, &b)),
                    _ => (f(&x, &w, &p), f(&x, &w, &m)),
                };
                let fd = (fp - fm) / (2.0 * eps as f64);
                assert!((fd - grad.data()[i] as f64).abs() < 2e-3, "param {which} idx {i}: {fd} vs {}", grad.data()[i]);
            }
        }
    }
}
