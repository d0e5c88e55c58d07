use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{iou, Detection, GroundTruth};

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// `(class_id, AP)` for every class present in the ground truth.
    pub per_class: Vec<(usize, f64)>,
    pub map: f64,
}

impl fmt::Display for MapReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, ap) in &self.per_class {
            writeln!(f, "class {c}: AP {ap:.4}")?;
        }
        write!(f, "mAP {:.4}", self.map)
    }
}

/// Area under the precision/recall curve with the precision envelope made
/// monotone (all-points interpolation). Points must be in ranking order.
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// Detections are ranked by descending score (ties keep input order); each is
/// matched to the ground-truth box of its image and class with the highest IoU.
/// It is a true positive if that IoU is at least `iou_match` and the box is
/// still unclaimed.
pub fn evaluate_map(dets: &[Detection], ground_truth: &[GroundTruth], iou_match: f64) -> MapReport {
    let classes: BTreeSet<usize> = ground_truth.iter().map(|g| g.class_id).collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut gt_by_image: BTreeMap<usize, Vec<(&GroundTruth, bool)>> = BTreeMap::new();
        for g in ground_truth.iter().filter(|g| g.class_id == c) {
            gt_by_image.entry(g.image_id).or_default().push((g, false));
        }
        let npos: usize = gt_by_image.values().map(Vec::len).sum();
        let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut recall = Vec::with_capacity(ranked.len());
        let mut precision = Vec::with_capacity(ranked.len());
        for d in ranked {
            let hit = gt_by_image.get_mut(&d.image_id).and_then(|gts| {
                let mut best: Option<(usize, f64)> = None;
                for (i, (g, _)) in gts.iter().enumerate() {
                    let v = iou(&g.rect, &d.rect);
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((i, v));
                    }
                }
                match best {
                    Some((i, v)) if v >= iou_match && !gts[i].1 => {
                        gts[i].1 = true;
                        Some(())
                    }
                    _ => None,
                }
            });
            if hit.is_some() {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / npos as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        per_class.push((c, average_precision(&recall, &precision)));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    MapReport { per_class, map }
}
