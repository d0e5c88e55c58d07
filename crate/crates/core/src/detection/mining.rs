use std::collections::BTreeMap;

use super::{iou, GroundTruth, Proposal};

/// Training windows for one class's SVM.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedSamples {
    /// Ground-truth windows of the class.
    pub positives: Vec<Proposal>,
    /// Proposals overlapping no positive by more than `neg_max_iou`, de-duplicated.
    pub negatives: Vec<Proposal>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiningConfig {
    pub neg_max_iou: f64,
    pub dedup_iou: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            neg_max_iou: 0.3,
            dedup_iou: 0.7,
        }
    }
}

/// Splits proposals into SVM positives and negatives for `class_id`.
///
/// Negatives are scanned in input order per image; a negative is dropped when it
/// overlaps an already kept negative of the same image by IoU above `dedup_iou`.
pub fn mine_svm_samples(proposals: &[Proposal], ground_truth: &[GroundTruth], class_id: usize, cfg: &MiningConfig) -> MinedSamples {
    let mut positives_by_image: BTreeMap<usize, Vec<Proposal>> = BTreeMap::new();
    let positives: Vec<Proposal> = ground_truth
        .iter()
        .filter(|g| g.class_id == class_id)
        .map(|g| Proposal {
            image_id: g.image_id,
            rect: g.rect,
        })
        .collect();
    for p in &positives {
        positives_by_image.entry(p.image_id).or_default().push(*p);
    }
    let mut kept_by_image: BTreeMap<usize, Vec<Proposal>> = BTreeMap::new();
    let mut negatives = Vec::new();
    for p in proposals {
        let empty = Vec::new();
        let pos = positives_by_image.get(&p.image_id).unwrap_or(&empty);
        if pos.iter().any(|g| iou(&g.rect, &p.rect) > cfg.neg_max_iou) {
            continue;
        }
        let kept = kept_by_image.entry(p.image_id).or_default();
        if kept.iter().any(|k| iou(&k.rect, &p.rect) > cfg.dedup_iou) {
            continue;
        }
        kept.push(*p);
        negatives.push(*p);
    }
    MinedSamples { positives, negatives }
}

/// A proposal labelled for fc fine-tuning; `label == classes` is background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneSample {
    pub proposal: Proposal,
    pub label: usize,
    pub best_iou: f64,
}

impl FinetuneSample {
    pub fn is_positive(&self, classes: usize) -> bool {
        self.label < classes
    }
}

/// Positives overlap a ground-truth window by IoU in `[0.5, 1]` and take its class;
/// negatives overlap by `[0.1, 0.5)` and become background. Everything else is skipped.
pub fn finetune_samples(proposals: &[Proposal], ground_truth: &[GroundTruth], classes: usize) -> Vec<FinetuneSample> {
    proposals
        .iter()
        .filter_map(|p| {
            let best = ground_truth
                .iter()
                .filter(|g| g.image_id == p.image_id)
                .map(|g| (iou(&g.rect, &p.rect), g.class_id))
                .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            let (v, class) = best.unwrap_or((0.0, classes));
            if v >= 0.5 {
                Some(FinetuneSample {
                    proposal: *p,
                    label: class,
                    best_iou: v,
                })
            } else if v >= 0.1 {
                Some(FinetuneSample {
                    proposal: *p,
                    label: classes,
                    best_iou: v,
                })
            } else {
                None
            }
        })
        .collect()
}
