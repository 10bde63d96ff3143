//! Confusion matrices, accuracy and segmentation metrics.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::losses::{pseudo_labels, Classifier};

/// `counts[i][j]` = samples (or pixels) of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { counts: vec![vec![0; num_classes]; num_classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let n = self.num_classes();
        if truth >= n || pred >= n {
            return Err(Error::InvalidArgument(format!("class pair ({truth}, {pred}) out of range for {n} classes")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// `t_i`, the number of samples whose true class is `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Number of samples predicted as `j`.
    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Element-wise sum with a matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Counts predictions against ground truth; both slices hold class indices
/// (per sample or per pixel) in the same order.
pub fn confusion<T: Copy + Into<u64>>(pred: &[T], truth: &[T], num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &t) in pred.iter().zip(truth) {
        cm.add(t.into() as usize, p.into() as usize)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fwiou: f64,
    pub pixel_acc: f64,
}

/// Per-class IoU `n_ii / (t_i + sum_j n_ji - n_ii)`, their mean over defined
/// classes, frequency-weighted IoU `sum_i (t_i / sum_k t_k) IoU_i`, and pixel accuracy.
pub fn seg_metrics(cm: &ConfusionMatrix) -> Result<SegMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("segmentation metrics need a non-empty confusion matrix".into()));
    }
    let n = cm.num_classes();
    let mut per_class_iou = Vec::with_capacity(n);
    let mut fwiou = 0.0;
    for i in 0..n {
        let t_i = cm.row_sum(i);
        let union = t_i + cm.col_sum(i) - cm.get(i, i);
        if union == 0 {
            per_class_iou.push(None);
            continue;
        }
        let iou = cm.get(i, i) as f64 / union as f64;
        fwiou += t_i as f64 / total as f64 * iou;
        per_class_iou.push(Some(iou));
    }
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(SegMetrics { per_class_iou, miou, fwiou, pixel_acc: cm.accuracy() })
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fwiou: f64,
    pub pixel_acc: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix, classification: bool) -> Result<Self> {
        let seg = seg_metrics(cm)?;
        Ok(Self {
            accuracy: classification.then(|| cm.accuracy()),
            per_class_iou: seg.per_class_iou,
            miou: seg.miou,
            fwiou: seg.fwiou,
            pixel_acc: seg.pixel_acc,
            confusion: cm.counts().to_vec(),
        })
    }

    /// Headline number: accuracy for classification, mIoU for segmentation.
    pub fn score(&self) -> f64 {
        self.accuracy.unwrap_or(self.miou)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
    }
}

const EVAL_BATCH: usize = 200;

/// Confusion matrix of a classifier (or dense segmenter) over a whole dataset.
pub fn evaluate_confusion(model: &dyn Classifier, dataset: &Dataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(dataset.num_classes);
    let indices = dataset.all_indices();
    for chunk in indices.chunks(EVAL_BATCH) {
        let logits = model.logits(&dataset.images_tensor(chunk)?)?;
        let width = logits.dim(1)?;
        if width != dataset.num_classes {
            return Err(Error::Shape(format!(
                "model emits {width} classes but {} has {}",
                dataset.name, dataset.num_classes
            )));
        }
        let pred = pseudo_labels(&logits)?.flatten_all()?.to_vec1::<u32>()?;
        let truth = dataset.labels_tensor(chunk)?.flatten_all()?.to_vec1::<u32>()?;
        cm.merge(&confusion(&pred, &truth, dataset.num_classes)?)?;
    }
    Ok(cm)
}

/// Accuracy over the full split, with the confusion matrix it came from.
pub fn classify_accuracy(model: &dyn Classifier, dataset: &Dataset) -> Result<(f64, ConfusionMatrix)> {
    let cm = evaluate_confusion(model, dataset)?;
    Ok((cm.accuracy(), cm))
}

pub fn evaluate(model: &dyn Classifier, dataset: &Dataset) -> Result<Metrics> {
    let cm = evaluate_confusion(model, dataset)?;
    Metrics::from_confusion(&cm, matches!(dataset.labels, Labels::Class(_)))
}

/// Row-normalized heatmap: dark = 0, white = whole row in that cell.
pub fn write_confusion_heatmap(cm: &ConfusionMatrix, path: &Path, cell: u32) -> Result<()> {
    let n = cm.num_classes() as u32;
    let mut img = image::GrayImage::new(n * cell, n * cell);
    for i in 0..n {
        let row = cm.row_sum(i as usize).max(1) as f64;
        for j in 0..n {
            let v = (cm.get(i as usize, j as usize) as f64 / row * 255.0).round() as u8;
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(j * cell + x, i * cell + y, image::Luma([v]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Convenience for tests and bindings: predictions of `logits` as plain indices.
pub fn predictions(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(pseudo_labels(logits)?.flatten_all()?.to_vec1::<u32>()?)
}
