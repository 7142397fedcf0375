//! Single-scale inference and confusion-matrix metrics.
//!
//! Reported mIoU is global: per-class IoU is computed from one confusion
//! matrix summed over every evaluated image, then averaged over the classes
//! whose IoU is defined (present in ground truth or prediction).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ssseg_nn::Tensor;
use thiserror::Error;

use crate::datasets::{png_io, DatasetError, SegDataset, SegSample};
use crate::engine::{InferenceMode, InferenceSpec};
use crate::error::ModelError;
use crate::segmentors::Segmentor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {value} is neither a class in 0..{num_classes} nor the ignore index")]
    LabelOutOfRange { value: u8, num_classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("bad window: {0}")]
    BadWindow(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `K×K` counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "square matrix");
        Self { num_classes: k, counts: rows.concat() }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose ground truth is not `ignore_index`.
    pub fn update(&mut self, pred: &[u8], gt: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(EvalError::ShapeError(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let k = self.num_classes;
        let bad = |value: u8| EvalError::LabelOutOfRange { value, num_classes: k };
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= k {
                return Err(bad(g));
            }
            if p as usize >= k {
                return Err(bad(p));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "class count");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// How mIoU was aggregated; always `"global"`.
    pub miou_definition: String,
    /// `None` when the class is absent from ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` when the class is absent from ground truth.
    pub per_class_acc: Vec<Option<f64>>,
    pub miou: f64,
    pub aacc: f64,
    pub macc: f64,
    pub total_pixels: u64,
    pub gt_pixels: Vec<u64>,
    pub pred_pixels: Vec<u64>,
}

/// `IoU_k = cm[k][k] / (row_k + col_k − cm[k][k])`, `aAcc = trace/total`,
/// `acc_k = cm[k][k]/row_k`; means skip undefined classes.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let k = cm.num_classes;
    let rows: Vec<u64> = (0..k).map(|g| (0..k).map(|p| cm.get(g, p)).sum()).collect();
    let cols: Vec<u64> = (0..k).map(|p| (0..k).map(|g| cm.get(g, p)).sum()).collect();
    let diag: Vec<u64> = (0..k).map(|i| cm.get(i, i)).collect();
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|i| {
            let union = rows[i] + cols[i] - diag[i];
            (union > 0).then(|| diag[i] as f64 / union as f64)
        })
        .collect();
    let per_class_acc: Vec<Option<f64>> =
        (0..k).map(|i| (rows[i] > 0).then(|| diag[i] as f64 / rows[i] as f64)).collect();
    let mean = |v: &[Option<f64>]| {
        let d: Vec<f64> = v.iter().flatten().copied().collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    Ok(MetricsReport {
        miou_definition: "global".into(),
        miou: mean(&per_class_iou),
        macc: mean(&per_class_acc),
        aacc: diag.iter().sum::<u64>() as f64 / total as f64,
        per_class_iou,
        per_class_acc,
        total_pixels: total,
        gt_pixels: rows,
        pred_pixels: cols,
    })
}

/// Produces logits for a batch of one image. `targets` are handed through
/// for debugging heads that echo ground truth.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn size_divisor(&self) -> usize;
    /// `1×3×H×W` in, `1×K×H×W` out, `H` and `W` multiples of the divisor.
    fn logits(&self, image: &Tensor, targets: Option<&[u8]>) -> Result<Tensor>;
}

pub struct ModelPredictor<'a> {
    pub segmentor: &'a Segmentor,
    pub store: &'a ssseg_nn::ParamStore,
}

impl Predictor for ModelPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.segmentor.num_classes
    }

    fn size_divisor(&self) -> usize {
        self.segmentor.size_divisor()
    }

    fn logits(&self, image: &Tensor, targets: Option<&[u8]>) -> Result<Tensor> {
        Ok(self.segmentor.infer(self.store, image, targets)?)
    }
}

/// Row-major label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Crop the window `(y0, x0, h, w)` out of a `1×C×H×W` tensor, padding
/// with `fill` where it reaches beyond the border.
fn crop_padded(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize, fill: f32) -> Tensor {
    let s = t.shape();
    let (c, th, tw) = (s[1], s[2], s[3]);
    let mut out = Tensor::full(&[1, c, h, w], fill);
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..h.min(th.saturating_sub(y0)) {
            let src = (ch * th + y0 + y) * tw + x0;
            let n = w.min(tw.saturating_sub(x0));
            d[(ch * h + y) * w..(ch * h + y) * w + n].copy_from_slice(&t.data()[src..src + n]);
        }
    }
    out
}

fn crop_labels(gt: &[u8], width: usize, y0: usize, x0: usize, h: usize, w: usize, fill: u8, src_h: usize) -> Vec<u8> {
    let mut out = vec![fill; h * w];
    for y in 0..h.min(src_h.saturating_sub(y0)) {
        for x in 0..w.min(width.saturating_sub(x0)) {
            out[y * w + x] = gt[(y0 + y) * width + x0 + x];
        }
    }
    out
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(EvalError::ShapeError(format!("expected a 1×3×H×W image, got {s:?}")));
    }
    Ok((s[2], s[3]))
}

/// Logits `1×K×H×W` for the whole image: pad bottom/right with zeros to
/// the divisor, one forward pass, crop back.
pub fn whole_logits(p: &dyn Predictor, image: &Tensor, gt: Option<&[u8]>, ignore_index: u8) -> Result<Tensor> {
    let (h, w) = check_image(image)?;
    let d = p.size_divisor().max(1);
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let padded = if (ph, pw) == (h, w) { image.clone() } else { crop_padded(image, 0, 0, ph, pw, 0.0) };
    let gt_padded = gt.map(|g| crop_labels(g, w, 0, 0, ph, pw, ignore_index, h));
    let logits = p.logits(&padded, gt_padded.as_deref())?;
    let ls = logits.shape().to_vec();
    if ls.len() != 4 || ls[0] != 1 || ls[1] != p.num_classes() || ls[2] != ph || ls[3] != pw {
        return Err(EvalError::ShapeError(format!("predictor returned {ls:?} for input {ph}×{pw}")));
    }
    Ok(if (ph, pw) == (h, w) { logits } else { crop_padded(&logits, 0, 0, h, w, 0.0) })
}

pub fn infer_whole(p: &dyn Predictor, image: &Tensor, gt: Option<&[u8]>, ignore_index: u8) -> Result<LabelMap> {
    let (h, w) = check_image(image)?;
    let logits = whole_logits(p, image, gt, ignore_index)?;
    Ok(LabelMap { height: h, width: w, data: logits.argmax_channels().map_err(ModelError::from)? })
}

fn window_starts(size: usize, window: usize, stride: usize) -> Vec<usize> {
    let n = size.saturating_sub(window).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(size - window)).collect()
}

fn check_window(window: (usize, usize), stride: (usize, usize)) -> Result<()> {
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 || stride.0 > window.0 || stride.1 > window.1 {
        return Err(EvalError::BadWindow(format!("window {window:?} with stride {stride:?}")));
    }
    Ok(())
}

/// Top-left corners of the sliding windows over an `h×w` image. Windows
/// larger than the image shrink to it; the last window in each direction is
/// clamped to the border.
pub fn slide_windows(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> Result<Vec<(usize, usize, usize, usize)>> {
    check_window(window, stride)?;
    let (wh, ww) = (window.0.min(h), window.1.min(w));
    let mut out = Vec::new();
    for &y in &window_starts(h, wh, stride.0) {
        for &x in &window_starts(w, ww, stride.1) {
            out.push((y, x, wh, ww));
        }
    }
    Ok(out)
}

/// How many windows cover each pixel.
pub fn slide_counts(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; h * w];
    for (y0, x0, wh, ww) in slide_windows(h, w, window, stride)? {
        for y in y0..y0 + wh {
            for x in x0..x0 + ww {
                counts[y * w + x] += 1;
            }
        }
    }
    Ok(counts)
}

/// Sliding-window inference: window logits are summed into a buffer and
/// divided by the per-pixel window count before the argmax.
pub fn infer_slide(
    p: &dyn Predictor,
    image: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    gt: Option<&[u8]>,
    ignore_index: u8,
) -> Result<LabelMap> {
    let (h, w) = check_image(image)?;
    let k = p.num_classes();
    let windows = slide_windows(h, w, window, stride)?;
    let mut sum = vec![0f32; k * h * w];
    let mut count = vec![0u32; h * w];
    for (y0, x0, wh, ww) in windows {
        let crop = crop_padded(image, y0, x0, wh, ww, 0.0);
        let gt_crop = gt.map(|g| crop_labels(g, w, y0, x0, wh, ww, ignore_index, h));
        let logits = whole_logits(p, &crop, gt_crop.as_deref(), ignore_index)?;
        let ld = logits.data();
        for c in 0..k {
            for y in 0..wh {
                for x in 0..ww {
                    sum[(c * h + y0 + y) * w + x0 + x] += ld[(c * wh + y) * ww + x];
                }
            }
        }
        for y in y0..y0 + wh {
            for x in x0..x0 + ww {
                count[y * w + x] += 1;
            }
        }
    }
    for c in 0..k {
        for i in 0..h * w {
            sum[c * h * w + i] /= count[i] as f32;
        }
    }
    let logits = Tensor::from_vec(&[1, k, h, w], sum).map_err(ModelError::from)?;
    Ok(LabelMap { height: h, width: w, data: logits.argmax_channels().map_err(ModelError::from)? })
}

/// `H×W×3` interleaved image to a `1×3×H×W` tensor.
pub fn sample_tensor(sample: &SegSample) -> Tensor {
    let (h, w) = sample.size();
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in sample.image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c];
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("sized")
}

/// Where and whether to write predictions.
pub struct PredictionSink<'a> {
    pub dir: &'a Path,
    pub palette: &'a [[u8; 3]],
}

impl PredictionSink<'_> {
    /// `<id>.png` holds raw class indices, `<id>_color.png` the palette
    /// rendering.
    pub fn write(&self, id: &str, labels: &LabelMap) -> Result<()> {
        fs::create_dir_all(self.dir).map_err(|source| EvalError::Io { path: self.dir.display().to_string(), source })?;
        png_io::write_index(&self.dir.join(format!("{id}.png")), labels.width, labels.height, &labels.data)?;
        let rgb: Vec<u8> = labels.data.iter().flat_map(|&l| self.palette.get(l as usize).copied().unwrap_or([0, 0, 0])).collect();
        png_io::write_rgb(&self.dir.join(format!("{id}_color.png")), labels.width, labels.height, &rgb)?;
        Ok(())
    }
}

/// Segment one prepared sample according to `spec`.
pub fn predict_sample(p: &dyn Predictor, sample: &SegSample, spec: &InferenceSpec, ignore_index: u8) -> Result<LabelMap> {
    let image = sample_tensor(sample);
    let gt = Some(sample.mask.data.as_slice());
    match spec.mode {
        InferenceMode::Whole => infer_whole(p, &image, gt, ignore_index),
        InferenceMode::Slide => {
            let window = spec.window.ok_or_else(|| EvalError::BadWindow("slide mode needs a window".into()))?;
            infer_slide(p, &image, window, spec.stride.unwrap_or(window), gt, ignore_index)
        }
    }
}

/// Evaluate every sample of `dataset` in index order into one global
/// confusion matrix.
pub fn evaluate(
    p: &dyn Predictor,
    dataset: &SegDataset,
    spec: &InferenceSpec,
    sink: Option<&PredictionSink<'_>>,
) -> Result<(MetricsReport, ConfusionMatrix)> {
    let desc = &dataset.descriptor;
    let mut cm = ConfusionMatrix::new(desc.num_classes);
    for i in 0..dataset.len() {
        let sample = dataset.get(i, 0)?;
        let labels = predict_sample(p, &sample, spec, desc.ignore_index)?;
        cm.update(&labels.data, &sample.mask.data, desc.ignore_index)?;
        if let Some(s) = sink {
            s.write(&sample.meta.id, &labels)?;
        }
    }
    Ok((compute_metrics(&cm)?, cm))
}

/// JSON report with per-class rows, written then renamed into place.
pub fn write_report(path: &Path, report: &MetricsReport, class_names: &[String], extra: serde_json::Value) -> Result<()> {
    let classes: Vec<_> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            serde_json::json!({
                "class": n,
                "iou": report.per_class_iou.get(i).copied().flatten(),
                "acc": report.per_class_acc.get(i).copied().flatten(),
                "gt_pixels": report.gt_pixels.get(i),
                "pred_pixels": report.pred_pixels.get(i),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "miou": report.miou,
        "miou_definition": "global: per-class IoU from the confusion matrix summed over all images, averaged over classes with defined IoU",
        "aacc": report.aacc,
        "macc": report.macc,
        "total_pixels": report.total_pixels,
        "classes": classes,
        "run": extra,
    });
    crate::util::write_atomic(path, serde_json::to_string_pretty(&doc).expect("json").as_bytes())
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]);
        let r = compute_metrics(&cm).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(4.0 / 7.0)]);
        assert!((r.miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((r.aacc - 0.7).abs() < 1e-15);
        assert!(matches!(compute_metrics(&ConfusionMatrix::new(3)), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn ignore_and_perfect() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2, 2], &[255, 255, 255, 255], 255).unwrap();
        assert_eq!(cm.total(), 0);
        cm.update(&[0, 1, 1, 0], &[0, 1, 1, 0], 255).unwrap();
        let r = compute_metrics(&cm).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class_iou[2], None);
        assert!(matches!(cm.update(&[0], &[7], 255), Err(EvalError::LabelOutOfRange { value: 7, .. })));
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[1, 0], &[0, 1], 255).unwrap();
        let r = compute_metrics(&cm).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn window_tiling() {
        let c = slide_counts(64, 64, (32, 32), (32, 32)).unwrap();
        assert_eq!(slide_windows(64, 64, (32, 32), (32, 32)).unwrap().len(), 4);
        assert!(c.iter().all(|&v| v == 1));
        assert_eq!(slide_windows(20, 30, (64, 64), (32, 32)).unwrap(), vec![(0, 0, 20, 30)]);
        assert!(matches!(slide_windows(64, 64, (16, 16), (32, 8)), Err(EvalError::BadWindow(_))));
        let last = slide_windows(70, 70, (32, 32), (32, 32)).unwrap();
        assert!(last.contains(&(38, 38, 32, 32)));
    }
}
