//! Detection metrics and the naive, tracking and oracle comparison methods.

mod baselines;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use baselines::{naive_baseline, oracle, tracking_baseline, TRACKING_GATE};
pub use report::{render_table, APReport, ClassAP, MeanAP, MethodReport};

use crate::assignment::{iou, AnnotationSet, BBox};
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::model::PredictionSet;

/// Slots whose best class score falls below this are dropped.
pub const CONFIDENCE_FLOOR: f64 = 0.01;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub sample: usize,
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Top class per slot with its score; slots under the confidence floor are
/// dropped.
pub fn to_detections<F: Real>(preds: &PredictionSet<F>, sample: usize) -> Vec<Detection> {
    (0..preds.slots())
        .filter_map(|j| {
            let (class, confidence) = (0..preds.classes())
                .map(|c| (c, preds.prob(j, c)))
                .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
            (confidence >= CONFIDENCE_FLOOR).then(|| Detection {
                sample,
                class,
                confidence,
                bbox: preds.bbox(j),
            })
        })
        .collect()
}

/// Ground-truth boxes of one class, with a flag telling whether each counts
/// (size-bucket evaluation ignores the others).
#[derive(Clone, Debug, Default)]
pub struct ClassTruth {
    pub boxes: BTreeMap<usize, Vec<(BBox, bool)>>,
}

impl ClassTruth {
    pub fn counted(&self) -> usize {
        self.boxes.values().flatten().filter(|b| b.1).count()
    }
}

/// All-points interpolated average precision of the detections of one class.
///
/// Detections are ranked by confidence (ties keep input order). Each one
/// takes the highest-IoU unmatched ground truth of its sample when that IoU
/// reaches `threshold`; detections that take an uncounted ground truth are
/// ignored. Returns `None` when there are neither counted ground truths nor
/// detections, and 0 when only detections exist.
pub fn average_precision(dets: &[Detection], truth: &ClassTruth, threshold: f64) -> Option<f64> {
    let n_gt = truth.counted();
    if n_gt == 0 {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut used: BTreeMap<usize, Vec<bool>> = truth
        .boxes
        .iter()
        .map(|(&s, v)| (s, vec![false; v.len()]))
        .collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(gts) = truth.boxes.get(&d.sample) {
            let taken = &used[&d.sample];
            for (k, (g, _)) in gts.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
        }
        match best {
            Some((k, _)) => {
                used.get_mut(&d.sample).unwrap()[k] = true;
                if truth.boxes[&d.sample][k].1 {
                    tp.push(true);
                }
            }
            None => tp.push(false),
        }
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (rank, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (rank + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// Pixel-area cutoffs `(H₀/24)·(W₀/64)` and `(H₀/4)·(W₀/12)`.
pub fn size_cutoffs(image_height: usize, image_width: usize) -> (f64, f64) {
    let (h, w) = (image_height as f64, image_width as f64);
    (h / 24.0 * w / 64.0, h / 4.0 * w / 12.0)
}

pub fn size_bucket(b: &BBox, image_height: usize, image_width: usize) -> SizeBucket {
    let area = b.w * image_width as f64 * b.h * image_height as f64;
    let (small, large) = size_cutoffs(image_height, image_width);
    if area < small {
        SizeBucket::Small
    } else if area < large {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub class_names: Vec<String>,
    pub image_height: usize,
    pub image_width: usize,
}

/// Scores detections against per-sample ground truth.
pub fn evaluate(dets: &[Detection], truth: &[(usize, AnnotationSet)], config: &EvalConfig) -> Result<APReport> {
    let ids: BTreeMap<usize, &AnnotationSet> = truth.iter().map(|(i, a)| (*i, a)).collect();
    if ids.len() != truth.len() {
        return Err(Error::Input("duplicate sample ids in ground truth".into()));
    }
    if let Some(d) = dets.iter().find(|d| !ids.contains_key(&d.sample)) {
        return Err(Error::Input(format!(
            "detection refers to unknown sample {}",
            d.sample
        )));
    }
    let classes = config.class_names.len();
    if let Some(d) = dets.iter().find(|d| d.class >= classes || !d.confidence.is_finite()) {
        return Err(Error::Input(format!("invalid detection {d:?}")));
    }
    let truth_for = |class: usize, bucket: Option<SizeBucket>| {
        let mut t = ClassTruth::default();
        for (&s, annos) in &ids {
            let v: Vec<(BBox, bool)> = annos
                .iter()
                .filter(|a| a.class == class)
                .map(|a| {
                    let counted = bucket
                        .is_none_or(|b| size_bucket(&a.bbox, config.image_height, config.image_width) == b);
                    (a.bbox, counted)
                })
                .collect();
            t.boxes.insert(s, v);
        }
        t
    };
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
        let all = truth_for(c, None);
        let ap50 = average_precision(&cd, &all, 0.5);
        let aps: Vec<Option<f64>> = iou_thresholds()
            .iter()
            .map(|&t| average_precision(&cd, &all, t))
            .collect();
        let ap = if aps.iter().all(Option::is_some) {
            Some(aps.iter().map(|a| a.unwrap()).sum::<f64>() / aps.len() as f64)
        } else {
            None
        };
        let bucket = |b| average_precision(&cd, &truth_for(c, Some(b)), 0.5);
        per_class.push(ClassAP {
            class: c,
            name: config.class_names[c].clone(),
            ap50,
            ap,
            small_ap50: bucket(SizeBucket::Small),
            medium_ap50: bucket(SizeBucket::Medium),
            large_ap50: bucket(SizeBucket::Large),
        });
    }
    Ok(APReport::from_classes(per_class))
}

/// Converts aligned `(sample id, predictions)` pairs and scores them.
pub fn evaluate_predictions<F: Real>(
    preds: &[(usize, PredictionSet<F>)],
    truth: &[(usize, AnnotationSet)],
    config: &EvalConfig,
) -> Result<APReport> {
    let dets: Vec<Detection> = preds.iter().flat_map(|(i, p)| to_detections(p, *i)).collect();
    evaluate(&dets, truth, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(sample: usize, confidence: f64, b: BBox) -> Detection {
        Detection {
            sample,
            class: 0,
            confidence,
            bbox: b,
        }
    }

    fn truth(boxes: &[(usize, BBox)]) -> ClassTruth {
        let mut t = ClassTruth::default();
        for &(s, b) in boxes {
            t.boxes.entry(s).or_default().push((b, true));
        }
        t
    }

    #[test]
    fn perfect_detection() {
        let g = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(average_precision(&[det(0, 0.9, g)], &truth(&[(0, g)]), 0.5), Some(1.0));
    }

    #[test]
    fn false_positive_ranked_first_halves_ap() {
        let g = BBox::new(0.5, 0.5, 0.2, 0.2);
        let miss = BBox::new(0.1, 0.1, 0.05, 0.05);
        let ap = average_precision(&[det(0, 0.9, miss), det(0, 0.8, g)], &truth(&[(0, g)]), 0.5);
        assert_eq!(ap, Some(0.5));
    }

    #[test]
    fn empty_cases() {
        let g = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(average_precision(&[], &truth(&[(0, g)]), 0.5), Some(0.0));
        assert_eq!(average_precision(&[], &ClassTruth::default(), 0.5), None);
        assert_eq!(average_precision(&[det(0, 0.5, g)], &ClassTruth::default(), 0.5), Some(0.0));
    }

    #[test]
    fn cutoffs() {
        let (s, l) = size_cutoffs(96, 128);
        assert!((s - 8.0).abs() < 1e-12);
        assert!((l - 24.0 * 128.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_sample_is_input_error() {
        let cfg = EvalConfig {
            class_names: vec!["a".into()],
            image_height: 64,
            image_width: 64,
        };
        let d = det(3, 0.5, BBox::new(0.5, 0.5, 0.1, 0.1));
        assert!(matches!(evaluate(&[d], &[(0, AnnotationSet::default())], &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn floor_and_top_class() {
        use crate::diffcore::Tensor;
        let probs = Tensor::<f64>::from_f64([2, 2], &[0.2, 0.7, 0.005, 0.009]).unwrap();
        let boxes = Tensor::from_f64([2, 4], &[0.5; 8]).unwrap();
        let d = to_detections(&PredictionSet::new(probs, boxes).unwrap(), 4);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].class, d[0].sample), (1, 4));
        assert!((d[0].confidence - 0.7).abs() < 1e-12);
    }
}
