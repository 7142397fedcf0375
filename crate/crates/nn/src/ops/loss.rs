use crate::autograd::Var;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct CrossEntropyOptions {
    pub ignore_index: u8,
    pub class_weights: Option<Vec<f32>>,
    pub label_smoothing: f32,
}

/// Loss node plus the weight mass it was normalized by.
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropyValue<'g> {
    pub loss: Var<'g>,
    /// Sum of the class weights of all non-ignored pixels (the pixel count
    /// when unweighted). Shards of one batch combine by this weight.
    pub normalizer: f64,
    pub valid_pixels: usize,
}

impl<'g> Var<'g> {
    /// Pixel-mean softmax cross-entropy over `N×K×H×W` logits against
    /// `N×H×W` labels. Pixels labelled `ignore_index` contribute nothing;
    /// if every pixel is ignored the loss is 0.
    pub fn cross_entropy(self, labels: &[u8], opts: &CrossEntropyOptions) -> Result<CrossEntropyValue<'g>> {
        let x = self.value();
        let (n, k, h, w) = x.dims4()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(TensorError::Shape(format!(
                "{} labels for logits {:?}",
                labels.len(),
                x.shape()
            )));
        }
        if let Some(cw) = &opts.class_weights {
            if cw.len() != k || cw.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(TensorError::Invalid(format!("class weights {cw:?} for {k} classes")));
            }
        }
        let eps = opts.label_smoothing;
        if !(0.0..=1.0).contains(&eps) {
            return Err(TensorError::Invalid(format!("label smoothing {eps} not in [0, 1]")));
        }
        let weight_of = |t: usize| opts.class_weights.as_ref().map_or(1.0, |cw| cw[t]);
        let xd = x.data();
        let mut probs = vec![0.0f32; n * k * hw];
        let mut total = 0.0f64;
        let mut norm = 0.0f64;
        let mut valid = 0usize;
        let mut logp = vec![0.0f64; k];
        for b in 0..n {
            for p in 0..hw {
                let label = labels[b * hw + p];
                if label == opts.ignore_index {
                    continue;
                }
                let t = label as usize;
                if t >= k {
                    return Err(TensorError::LabelOutOfRange {
                        label: label as u32,
                        position: b * hw + p,
                        num_classes: k,
                    });
                }
                let at = |c: usize| xd[(b * k + c) * hw + p] as f64;
                let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
                for (c, lp) in logp.iter_mut().enumerate() {
                    *lp = at(c) - lse;
                    probs[(b * k + c) * hw + p] = lp.exp() as f32;
                }
                let mean_logp = logp.iter().sum::<f64>() / k as f64;
                let px_loss = -(1.0 - eps as f64) * logp[t] - eps as f64 * mean_logp;
                let wt = weight_of(t) as f64;
                total += wt * px_loss;
                norm += wt;
                valid += 1;
            }
        }
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        let labels = labels.to_vec();
        let weights = opts.class_weights.clone();
        let ignore = opts.ignore_index;
        let shape = x.shape().to_vec();
        let var = self.graph.record_full(Tensor::scalar(loss as f32), &[self], move |g| {
            let mut dx = vec![0.0f32; n * k * hw];
            if norm > 0.0 {
                let gscale = g.data()[0] as f64 / norm;
                let off = eps as f64 / k as f64;
                for b in 0..n {
                    for p in 0..hw {
                        let label = labels[b * hw + p];
                        if label == ignore {
                            continue;
                        }
                        let t = label as usize;
                        let wt = weights.as_ref().map_or(1.0, |cw| cw[t]) as f64;
                        for c in 0..k {
                            let i = (b * k + c) * hw + p;
                            let target = if c == t { 1.0 - eps as f64 + off } else { off };
                            dx[i] = (gscale * wt * (probs[i] as f64 - target)) as f32;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx).expect("ce grad"))]
        });
        Ok(CrossEntropyValue { loss: var, normalizer: norm, valid_pixels: valid })
    }
}
