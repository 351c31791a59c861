use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Confusion counts, `counts[reference][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    /// Mean over classes present in the reference.
    pub mean_accuracy: f64,
    /// Mean over classes present in the reference or the prediction.
    pub mean_iou: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn add(&mut self, predicted: &LabelMap, reference: &LabelMap) -> Result<()> {
        if predicted.data.len() != reference.data.len() {
            return Err(Error::dim("evaluate", "pixels", reference.data.len(), predicted.data.len()));
        }
        for (&p, &r) in predicted.data.iter().zip(&reference.data) {
            for v in [p, r] {
                if v as usize >= self.classes {
                    return Err(Error::Label {
                        label: v as u32,
                        classes: self.classes,
                    });
                }
            }
            self.counts[r as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let k = self.classes;
        let total: u64 = self.counts.iter().sum();
        let tp = |c: usize| self.get(c, c);
        let ref_count = |c: usize| (0..k).map(|p| self.get(c, p)).sum::<u64>();
        let pred_count = |c: usize| (0..k).map(|r| self.get(r, c)).sum::<u64>();
        let correct: u64 = (0..k).map(tp).sum();

        let per_class_accuracy: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let n = ref_count(c);
                (n > 0).then(|| tp(c) as f64 / n as f64)
            })
            .collect();
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let union = ref_count(c) + pred_count(c) - tp(c);
                (union > 0).then(|| tp(c) as f64 / union as f64)
            })
            .collect();
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        MetricsReport {
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            mean_accuracy: mean(&per_class_accuracy),
            mean_iou: mean(&per_class_iou),
            per_class_accuracy,
            per_class_iou,
            pixels: total,
        }
    }
}

/// Segmentation metrics over one or more label maps.
pub fn evaluate(predictions: &[LabelMap], references: &[LabelMap], classes: usize) -> Result<MetricsReport> {
    if predictions.len() != references.len() {
        return Err(Error::dim("evaluate", "maps", references.len(), predictions.len()));
    }
    let mut conf = Confusion::new(classes);
    for (p, r) in predictions.iter().zip(references) {
        if (p.n, p.h, p.w) != (r.n, r.h, r.w) {
            return Err(Error::dim("evaluate", "pixels", r.len(), p.len()));
        }
        conf.add(p, r)?;
    }
    Ok(conf.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::new(1, 2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let r = evaluate(&[map(&[0, 1, 2, 1])], &[map(&[0, 1, 2, 1])], 3).unwrap();
        assert_eq!((r.pixel_accuracy, r.mean_accuracy, r.mean_iou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_enumerated_case() {
        let r = evaluate(&[map(&[0, 1, 1, 1])], &[map(&[0, 0, 1, 1])], 2).unwrap();
        assert_eq!(r.pixel_accuracy, 0.75);
        assert_eq!(r.per_class_accuracy, vec![Some(0.5), Some(1.0)]);
        assert_eq!(r.per_class_iou[0], Some(0.5));
        assert!((r.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.mean_iou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_excluded() {
        let r = evaluate(&[map(&[0, 0, 0, 0])], &[map(&[0, 0, 0, 0])], 4).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.per_class_iou[3], None);
    }

    #[test]
    fn out_of_range_label() {
        assert!(evaluate(&[map(&[0, 0, 0, 5])], &[map(&[0, 0, 0, 0])], 4).is_err());
    }
}
