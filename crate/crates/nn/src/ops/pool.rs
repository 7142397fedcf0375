use crate::autograd::Var;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Bin `[start, end)` of output cell `i` when pooling `input` cells into
/// `output` bins (floor/ceil split, bins may overlap).
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Source coordinate of output cell `i` for half-pixel-centre bilinear
/// resampling, returned as `(low, high, weight_of_high)`.
pub fn bilinear_source(i: usize, input: usize, output: usize) -> (usize, usize, f32) {
    let scale = input as f32 / output as f32;
    let src = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f32)
}

impl<'g> Var<'g> {
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel || padding * 2 > kernel {
            return Err(TensorError::Shape(format!("max_pool {kernel}/{stride}/{padding} on {h}x{w}")));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let xd = x.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best || arg == usize::MAX {
                                best = src[idx];
                                arg = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = plane * h * w + arg;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (o, &src) in argmax.iter().enumerate() {
                d[src] += g.data()[o];
            }
            vec![Some(dx)]
        }))
    }

    pub fn adaptive_avg_pool2d(self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::Shape(format!("adaptive pool {h}x{w} -> {out_h}x{out_w}")));
        }
        let xd = x.data();
        let mut out = vec![0.0f32; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = adaptive_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = adaptive_bin(ox, w, out_w);
                    let mut s = 0.0f32;
                    for iy in y0..y1 {
                        s += src[iy * w + x0..iy * w + x1].iter().sum::<f32>();
                    }
                    out[plane * out_h * out_w + oy * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            let gd = g.data();
            for plane in 0..n * c {
                for oy in 0..out_h {
                    let (y0, y1) = adaptive_bin(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1) = adaptive_bin(ox, w, out_w);
                        let share = gd[plane * out_h * out_w + oy * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                        for iy in y0..y1 {
                            for v in &mut d[plane * h * w + iy * w + x0..plane * h * w + iy * w + x1] {
                                *v += share;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Bilinear resize with half-pixel sample centres (no corner alignment).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::Shape(format!("resize {h}x{w} -> {out_h}x{out_w}")));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(self);
        }
        let ys: Vec<_> = (0..out_h).map(|i| bilinear_source(i, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|i| bilinear_source(i, w, out_w)).collect();
        let xd = x.data();
        let mut out = vec![0.0f32; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                    let bot = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                    dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            let gd = g.data();
            for plane in 0..n * c {
                let src = &gd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let gv = src[oy * out_w + ox];
                        dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                        dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                        dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                        dst[y1 * w + x1] += gv * ly * lx;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bin(0, 4, 2), (0, 2));
        assert_eq!(adaptive_bin(1, 4, 2), (2, 4));
        // 5 -> 3 overlaps: [0,2) [1,4) [3,5)
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(0, 2, 6), (0, 1));
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_reference() {
        // 1-d [0, 1] upsampled to 4 samples at half-pixel centres:
        // src = -0.25 (clamped 0), 0.25, 0.75, 1.25 -> 0, 0.25, 0.75, 1.
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = x.resize_bilinear(1, 4).unwrap().value();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let y = x.max_pool2d(2, 2, 0).unwrap();
        assert_eq!(y.value().data(), &[5.0]);
        let grads = g.backward(y.sum_all());
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
