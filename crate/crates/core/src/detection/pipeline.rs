use std::collections::HashMap;

use rayon::prelude::*;

use super::bbox::{BBoxConfig, BBoxRegressor, BBoxSample};
use super::features::{region_feature, FeatureCache, RegionConfig};
use super::mining::{mine_svm_samples, MiningConfig};
use super::svm::{train_svm, SvmConfig, SvmModel};
use super::{iou, nms, Detection, GroundTruth, Proposal};
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::netgraph::{NetworkSpec, SharedParams};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub classes: usize,
    pub region: RegionConfig,
    pub svm: SvmConfig,
    pub mining: MiningConfig,
    pub nms_threshold: f64,
    /// `None` disables box regression.
    pub bbox: Option<BBoxConfig>,
}

impl DetectorConfig {
    pub fn new(classes: usize, region: RegionConfig) -> Self {
        DetectorConfig {
            classes,
            region,
            svm: SvmConfig::default(),
            mining: MiningConfig::default(),
            nms_threshold: 0.3,
            bbox: Some(BBoxConfig::default()),
        }
    }

    /// Five scales sized for the synthetic detection corpus.
    pub fn toy(classes: usize) -> Self {
        Self::new(classes, RegionConfig::new(vec![48, 64, 80, 96, 120], 32))
    }
}

/// Per-class SVMs and box regressors over pooled window features.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedDetector {
    pub config: DetectorConfig,
    pub svms: Vec<SvmModel>,
    pub bbox: BBoxRegressor,
}

type Features = Vec<Vec<f32>>;

fn group_by_image<T, F: Fn(&T) -> usize>(items: &[T], images: usize, id: F) -> Result<Vec<Vec<&T>>> {
    let mut out = vec![Vec::new(); images];
    for it in items {
        let i = id(it);
        out.get_mut(i)
            .ok_or_else(|| Error::invalid(format!("image id {i} has no image ({images} loaded)")))?
            .push(it);
    }
    Ok(out)
}

/// Region features of `windows` on one image, computed from a single feature cache.
pub fn image_features(
    spec: &NetworkSpec,
    params: &SharedParams,
    image: &Image,
    windows: &[crate::geometry::WindowRect],
    cfg: &RegionConfig,
) -> Result<Vec<Vec<f32>>> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let cache = FeatureCache::new(spec, params, image, cfg)?;
    windows.iter().map(|w| region_feature(&cache, spec, w, cfg)).collect()
}

impl TrainedDetector {
    pub fn train(
        spec: &NetworkSpec,
        params: &SharedParams,
        images: &[Image],
        ground_truth: &[GroundTruth],
        proposals: &[Proposal],
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        if let Some(g) = ground_truth.iter().find(|g| g.class_id >= cfg.classes) {
            return Err(Error::LabelOutOfRange {
                label: g.class_id,
                classes: cfg.classes,
            });
        }
        let gt_groups = group_by_image(ground_truth, images.len(), |g| g.image_id)?;
        let prop_groups = group_by_image(proposals, images.len(), |p| p.image_id)?;
        let per_image: Vec<(Features, Features)> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let mut windows: Vec<_> = gt_groups[i].iter().map(|g| g.rect).collect();
                windows.extend(prop_groups[i].iter().map(|p| p.rect));
                let mut feats = image_features(spec, params, img, &windows, &cfg.region)?;
                let props = feats.split_off(gt_groups[i].len());
                Ok((feats, props))
            })
            .collect::<Result<_>>()?;

        let mut gt_feature: HashMap<GroundTruth, &[f32]> = HashMap::new();
        let mut prop_feature: HashMap<Proposal, &[f32]> = HashMap::new();
        for (i, (gf, pf)) in per_image.iter().enumerate() {
            for (g, f) in gt_groups[i].iter().zip(gf) {
                gt_feature.insert(**g, f);
            }
            for (p, f) in prop_groups[i].iter().zip(pf) {
                prop_feature.insert(**p, f);
            }
        }

        let svms = (0..cfg.classes)
            .map(|c| {
                let mined = mine_svm_samples(proposals, ground_truth, c, &cfg.mining);
                let pos: Vec<&[f32]> = ground_truth
                    .iter()
                    .filter(|g| g.class_id == c)
                    .map(|g| gt_feature[g])
                    .collect();
                let neg: Vec<&[f32]> = mined.negatives.iter().map(|p| prop_feature[p]).collect();
                let svm_cfg = SvmConfig {
                    seed: cfg.svm.seed.wrapping_add(c as u64),
                    ..cfg.svm.clone()
                };
                train_svm(&pos, &neg, &svm_cfg)
            })
            .collect::<Result<Vec<_>>>()?;

        let bbox = match &cfg.bbox {
            Some(bcfg) => {
                let mut samples = Vec::new();
                for (i, props) in prop_groups.iter().enumerate() {
                    for p in props {
                        let best = gt_groups[i]
                            .iter()
                            .map(|g| (iou(&g.rect, &p.rect), g))
                            .fold(None, |acc: Option<(f64, &&GroundTruth)>, cur| match acc {
                                Some(a) if a.0 >= cur.0 => Some(a),
                                _ => Some(cur),
                            });
                        if let Some((v, g)) = best {
                            if v >= bcfg.min_iou {
                                samples.push(BBoxSample {
                                    feature: prop_feature[*p],
                                    class_id: g.class_id,
                                    proposal: p.rect,
                                    gt: g.rect,
                                });
                            }
                        }
                    }
                }
                BBoxRegressor::train(&samples, cfg.classes, bcfg)?
            }
            None => BBoxRegressor::identity(cfg.classes),
        };
        Ok(TrainedDetector {
            config: cfg.clone(),
            svms,
            bbox,
        })
    }

    /// Scores every proposal of one image for every class, applies per-class NMS,
    /// then optionally box regression. Output is grouped by class.
    pub fn detect_image(
        &self,
        spec: &NetworkSpec,
        params: &SharedParams,
        image_id: usize,
        image: &Image,
        proposals: &[Proposal],
        regress: bool,
    ) -> Result<Vec<Detection>> {
        let (w, h) = (image.width(), image.height());
        let rects = proposals
            .iter()
            .map(|p| p.rect.clamp_to(w, h).ok_or_else(|| Error::WindowOutside(p.rect.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let feats = image_features(spec, params, image, &rects, &self.config.region)?;
        let mut out = Vec::new();
        for (c, svm) in self.svms.iter().enumerate() {
            if let Some(f) = feats.first() {
                if f.len() != svm.dim() {
                    return Err(Error::shape("detect", "feature length", f.len(), svm.dim()));
                }
            }
            let scored: Vec<Detection> = rects
                .iter()
                .zip(&feats)
                .map(|(r, f)| Detection {
                    image_id,
                    class_id: c,
                    score: svm.score(f),
                    rect: *r,
                })
                .collect();
            let kept = nms(&scored, self.config.nms_threshold);
            for d in kept {
                let mut d = d;
                if regress {
                    let idx = rects.iter().position(|r| *r == d.rect).expect("kept window comes from input");
                    d.rect = self.bbox.apply(c, &feats[idx], &d.rect, (w, h));
                }
                out.push(d);
            }
        }
        Ok(out)
    }

    /// [`detect_image`](Self::detect_image) over a whole corpus; `image_id` indexes `images`.
    pub fn detect_all(
        &self,
        spec: &NetworkSpec,
        params: &SharedParams,
        images: &[Image],
        proposals: &[Proposal],
        regress: bool,
    ) -> Result<Vec<Detection>> {
        let groups = group_by_image(proposals, images.len(), |p| p.image_id)?;
        let per_image = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let props: Vec<Proposal> = groups[i].iter().map(|p| **p).collect();
                self.detect_image(spec, params, i, img, &props, regress)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(per_image.into_iter().flatten().collect())
    }
}
