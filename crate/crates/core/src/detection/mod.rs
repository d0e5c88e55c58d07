//! Single-pass detection: per-window features pooled from shared conv maps,
//! per-class linear SVMs with hard-negative mining, NMS, box regression and
//! model combination.

pub mod bbox;
pub mod bench;
pub mod eval;
pub mod features;
pub mod io;
pub mod mining;
pub mod pipeline;
pub mod svm;

use std::collections::BTreeMap;

use crate::geometry::WindowRect;

pub use bbox::{apply_offsets, bbox_targets, BBoxConfig, BBoxRegressor, BBoxSample};
pub use bench::{speed_bench, BenchConfig, BenchMode, BenchReport, StageTimes};
pub use eval::{average_precision, evaluate_map, MapReport};
pub use features::{l2_normalize, region_feature, FeatureCache, RegionConfig};
pub use io::{read_detections, read_ground_truth, read_proposals, write_detections};
pub use mining::{finetune_samples, mine_svm_samples, FinetuneSample, MinedSamples, MiningConfig};
pub use pipeline::{image_features, DetectorConfig, TrainedDetector};
pub use svm::{fit_linear_svm, train_svm, SvmConfig, SvmModel};

/// Candidate window from an external proposal generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Proposal {
    pub image_id: usize,
    pub rect: WindowRect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub rect: WindowRect,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub rect: WindowRect,
}

/// Intersection over union of two half-open rectangles.
pub fn iou(a: &WindowRect, b: &WindowRect) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0);
    let inter = (iw * ih) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression for one class of one image.
///
/// Windows are visited by descending score (ties keep input order); a window is
/// kept unless it overlaps an already kept one by IoU above `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.rect, &d.rect) <= threshold) {
            kept.push(d);
        }
    }
    kept
}

/// [`nms`] applied independently per (image, class); output grouped in that order.
pub fn nms_grouped(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<(usize, usize), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups.entry((d.image_id, d.class_id)).or_default().push(*d);
    }
    groups.values().flat_map(|g| nms(g, threshold)).collect()
}

/// Non-maximum suppression over the union of several models' detections.
pub fn combine_models(sets: &[Vec<Detection>], threshold: f64) -> Vec<Detection> {
    let union: Vec<Detection> = sets.iter().flatten().copied().collect();
    nms_grouped(&union, threshold)
}
