//! Per-class ridge regression from pooled window features to box corrections.
//!
//! Targets use centre/log-size offsets: `tx = (Gx - Px) / Pw`, `ty = (Gy - Py) / Ph`,
//! `tw = ln(Gw / Pw)`, `th = ln(Gh / Ph)`, where `(x, y)` is the box centre.

use nalgebra::{DMatrix, DVector};

use super::iou;
use crate::error::{Error, Result};
use crate::geometry::WindowRect;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBoxConfig {
    pub lambda: f64,
    /// Training pairs must overlap their ground truth at least this much.
    pub min_iou: f64,
}

impl Default for BBoxConfig {
    fn default() -> Self {
        BBoxConfig {
            lambda: 1.0,
            min_iou: 0.5,
        }
    }
}

fn centre(r: &WindowRect) -> (f64, f64, f64, f64) {
    let (w, h) = (r.width() as f64, r.height() as f64);
    (r.x0 as f64 + w / 2.0, r.y0 as f64 + h / 2.0, w, h)
}

pub fn bbox_targets(proposal: &WindowRect, gt: &WindowRect) -> [f64; 4] {
    let (px, py, pw, ph) = centre(proposal);
    let (gx, gy, gw, gh) = centre(gt);
    [(gx - px) / pw, (gy - py) / ph, (gw / pw).ln(), (gh / ph).ln()]
}

/// Inverse of [`bbox_targets`], rounded to whole pixels.
pub fn apply_offsets(proposal: &WindowRect, t: [f64; 4]) -> WindowRect {
    let (px, py, pw, ph) = centre(proposal);
    let (cx, cy) = (pw * t[0] + px, ph * t[1] + py);
    let (w, h) = (pw * t[2].exp(), ph * t[3].exp());
    WindowRect::new(
        (cx - w / 2.0).round() as i64,
        (cy - h / 2.0).round() as i64,
        (cx + w / 2.0).round() as i64,
        (cy + h / 2.0).round() as i64,
    )
}

/// One training pair: the feature and window of a proposal and its ground-truth box.
#[derive(Clone, Copy, Debug)]
pub struct BBoxSample<'a> {
    pub feature: &'a [f32],
    pub class_id: usize,
    pub proposal: WindowRect,
    pub gt: WindowRect,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BBoxRegressor {
    /// Per class: `(dim + 1) x 4` weights, bias row last. `None` means identity.
    per_class: Vec<Option<DMatrix<f64>>>,
}

impl BBoxRegressor {
    pub fn identity(classes: usize) -> Self {
        BBoxRegressor {
            per_class: vec![None; classes],
        }
    }

    pub fn is_identity(&self, class_id: usize) -> bool {
        self.per_class.get(class_id).is_none_or(|m| m.is_none())
    }

    pub fn train(samples: &[BBoxSample<'_>], classes: usize, cfg: &BBoxConfig) -> Result<Self> {
        if cfg.lambda < 0.0 {
            return Err(Error::invalid("ridge penalty must be non-negative"));
        }
        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let pairs: Vec<&BBoxSample> = samples
                .iter()
                .filter(|s| s.class_id == c && iou(&s.proposal, &s.gt) >= cfg.min_iou)
                .collect();
            if pairs.is_empty() {
                per_class.push(None);
                continue;
            }
            let dim = pairs[0].feature.len();
            if let Some(bad) = pairs.iter().find(|s| s.feature.len() != dim) {
                return Err(Error::shape("bbox_regress_train", "feature length", bad.feature.len(), dim));
            }
            let x = DMatrix::from_fn(pairs.len(), dim + 1, |i, j| if j < dim { pairs[i].feature[j] as f64 } else { 1.0 });
            let t = DMatrix::from_fn(pairs.len(), 4, |i, j| bbox_targets(&pairs[i].proposal, &pairs[i].gt)[j]);
            let mut a = x.transpose() * &x;
            for i in 0..=dim {
                a[(i, i)] += cfg.lambda.max(1e-9);
            }
            let rhs = x.transpose() * t;
            let w = a
                .cholesky()
                .ok_or_else(|| Error::invalid("ridge system is not positive definite"))?
                .solve(&rhs);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("bbox regression weights".into()));
            }
            per_class.push(Some(w));
        }
        Ok(BBoxRegressor { per_class })
    }

    pub fn predict(&self, class_id: usize, feature: &[f32]) -> [f64; 4] {
        match self.per_class.get(class_id) {
            Some(Some(w)) if w.nrows() == feature.len() + 1 => {
                let x = DVector::from_iterator(feature.len() + 1, feature.iter().map(|&v| v as f64).chain([1.0]));
                let out = w.tr_mul(&x);
                [out[0], out[1], out[2], out[3]]
            }
            _ => [0.0; 4],
        }
    }

    /// Corrected window clamped to the image; the input window when the class
    /// has no regressor or the correction collapses.
    pub fn apply(&self, class_id: usize, feature: &[f32], rect: &WindowRect, image_size: (usize, usize)) -> WindowRect {
        if self.is_identity(class_id) {
            return *rect;
        }
        apply_offsets(rect, self.predict(class_id, feature))
            .clamp_to(image_size.0, image_size.1)
            .unwrap_or(*rect)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_examples() {
        let g = WindowRect::new(0, 0, 100, 50);
        assert_eq!(bbox_targets(&g, &g), [0.0, 0.0, 0.0, 0.0]);
        let p = WindowRect::new(10, 0, 110, 50);
        let t = bbox_targets(&p, &g);
        assert!((t[0] + 0.1).abs() < 1e-15);
        assert_eq!(apply_offsets(&p, t), g);
    }

    #[test]
    fn identity_without_pairs() {
        let f = [1.0f32, 2.0];
        let far = BBoxSample {
            feature: &f,
            class_id: 0,
            proposal: WindowRect::new(0, 0, 10, 10),
            gt: WindowRect::new(50, 50, 60, 60),
        };
        let r = BBoxRegressor::train(&[far], 2, &BBoxConfig::default()).unwrap();
        assert!(r.is_identity(0) && r.is_identity(1));
        let w = WindowRect::new(3, 4, 20, 30);
        assert_eq!(r.apply(0, &f, &w, (100, 100)), w);
    }

    #[test]
    fn learns_constant_shift() {
        let feats: Vec<Vec<f32>> = (0..40).map(|i| vec![1.0, (i % 7) as f32 * 0.1]).collect();
        let samples: Vec<BBoxSample> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let x = (i * 3) as i64;
                BBoxSample {
                    feature: f,
                    class_id: 0,
                    proposal: WindowRect::new(x + 10, 0, x + 110, 100),
                    gt: WindowRect::new(x, 0, x + 100, 100),
                }
            })
            .collect();
        let r = BBoxRegressor::train(&samples, 1, &BBoxConfig { lambda: 1e-6, min_iou: 0.5 }).unwrap();
        let t = r.predict(0, &feats[0]);
        assert!((t[0] + 0.1).abs() < 1e-6, "{t:?}");
        assert_eq!(r.apply(0, &feats[0], &WindowRect::new(30, 0, 130, 100), (300, 300)), WindowRect::new(20, 0, 120, 100));
    }
}
