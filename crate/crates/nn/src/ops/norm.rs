use crate::autograd::Var;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Tensor,
}

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Shape(format!(
            "batch norm over {c} channels got gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

impl<'g> Var<'g> {
    /// Normalize with the statistics of this batch.
    pub fn batch_norm_train(self, gamma: Var<'g>, beta: Var<'g>, eps: f32) -> Result<(Var<'g>, BatchStats)> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (n, c, hw) = check_affine(&x, &gv, &bv)?;
        let m = n * hw;
        let xd = x.data();
        let mut mean = vec![0.0f32; c];
        let mut var_biased = vec![0.0f32; c];
        let mut var_unbiased = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0f64;
            for b in 0..n {
                ss += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var_biased[ch] = (ss / m as f64) as f32;
            var_unbiased[ch] = if m > 1 { (ss / (m - 1) as f64) as f32 } else { 0.0 };
        }
        let inv_std: Vec<f32> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; x.numel()];
        let mut out = vec![0.0f32; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
                for i in base..base + hw {
                    let xh = (xd[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = xh * ga + be;
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        let stats = BatchStats {
            mean: Tensor::from_vec(&[c], mean)?,
            var: Tensor::from_vec(&[c], var_unbiased)?,
        };
        let need_x = self.requires_grad();
        let y = self.graph.record(out, &[self, gamma, beta], move |g| {
            let gd = g.data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for ch in 0..c {
                let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sg += gd[i] as f64;
                        sgx += gd[i] as f64 * xhat[i] as f64;
                    }
                }
                dbeta[ch] = sg as f32;
                dgamma[ch] = sgx as f32;
            }
            let dx = need_x.then(|| {
                let mut dx = vec![0.0f32; n * c * hw];
                for ch in 0..c {
                    let ga = gv.data()[ch];
                    let k = ga * inv_std[ch] / m as f32;
                    let (sg, sgx) = (dbeta[ch], dgamma[ch]);
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = k * (m as f32 * gd[i] - sg - xhat[i] * sgx);
                        }
                    }
                }
                Tensor::from_vec(&shape, dx).expect("bn dx")
            });
            vec![
                dx,
                Some(Tensor::from_vec(&[c], dgamma).expect("dgamma")),
                Some(Tensor::from_vec(&[c], dbeta).expect("dbeta")),
            ]
        });
        Ok((y, stats))
    }

    /// Normalize with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        mean: &Tensor,
        var: &Tensor,
        eps: f32,
    ) -> Result<Var<'g>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (n, c, hw) = check_affine(&x, &gv, &bv)?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(TensorError::Shape("running statistics do not match channels".into()));
        }
        let inv_std: Vec<f32> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mu = mean.data().to_vec();
        let xd = x.data();
        let mut out = vec![0.0f32; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (scale, shift) = (gv.data()[ch] * inv_std[ch], bv.data()[ch]);
                for i in base..base + hw {
                    out[i] = (xd[i] - mu[ch]) * scale + shift;
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        let need_x = self.requires_grad();
        Ok(self.graph.record(out, &[self, gamma, beta], move |g| {
            let gd = g.data();
            let xd = x.data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = need_x.then(|| vec![0.0f32; n * c * hw]);
            for ch in 0..c {
                let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                let k = gv.data()[ch] * inv_std[ch];
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sg += gd[i] as f64;
                        sgx += gd[i] as f64 * ((xd[i] - mu[ch]) * inv_std[ch]) as f64;
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = gd[i] * k;
                        }
                    }
                }
                dbeta[ch] = sg as f32;
                dgamma[ch] = sgx as f32;
            }
            vec![
                dx.map(|d| Tensor::from_vec(&shape, d).expect("bn dx")),
                Some(Tensor::from_vec(&[c], dgamma).expect("dgamma")),
                Some(Tensor::from_vec(&[c], dbeta).expect("dbeta")),
            ]
        }))
    }
}
