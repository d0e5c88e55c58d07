//! Linear SVMs trained by dual coordinate descent on the hinge loss.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SvmConfig {
    /// Hinge-loss weight C.
    pub c: f64,
    /// Extra multiplier on C for positive samples.
    pub positive_weight: f64,
    pub max_epochs: usize,
    /// Stop once the projected-gradient spread drops below this.
    pub tolerance: f64,
    /// Constant feature appended for the bias term.
    pub bias_scale: f64,
    /// Negatives drawn from the pool for the first fit.
    pub initial_negatives: usize,
    pub hard_negative_rounds: usize,
    /// Pool negatives scoring above this are added as hard negatives.
    pub hard_negative_threshold: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            positive_weight: 2.0,
            max_epochs: 500,
            tolerance: 1e-4,
            bias_scale: 1.0,
            initial_negatives: 500,
            hard_negative_rounds: 1,
            hard_negative_threshold: -1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Negatives in the final training set.
    pub negatives_used: usize,
    /// Negatives added by hard-negative rounds.
    pub hard_negatives_added: usize,
}

impl SvmModel {
    pub fn score(&self, x: &[f32]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>()
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

fn check_dims(features: &[&[f32]]) -> Result<usize> {
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::shape("svm", "feature length", bad.len(), dim));
    }
    if features.iter().flat_map(|f| f.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svm features".into()));
    }
    Ok(dim)
}

/// One fit on a fixed labelled set.
pub fn fit_linear_svm(features: &[&[f32]], labels: &[bool], cfg: &SvmConfig) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(Error::shape("svm", "label count", labels.len(), features.len()));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::invalid("svm training needs at least one positive and one negative"));
    }
    if cfg.c <= 0.0 || cfg.positive_weight <= 0.0 {
        return Err(Error::invalid("svm C and positive weight must be positive"));
    }
    let dim = check_dims(features)?;
    let b = cfg.bias_scale;
    let n = features.len();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let upper: Vec<f64> = labels.iter().map(|&l| if l { cfg.c * cfg.positive_weight } else { cfg.c }).collect();
    let qii: Vec<f64> = features
        .iter()
        .map(|f| f.iter().map(|&v| v as f64 * v as f64).sum::<f64>() + b * b)
        .collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; dim + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let x = features[i];
            let dot = w[..dim].iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + w[dim] * b;
            let g = y[i] * dot - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == upper[i] {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 && qii[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, upper[i]);
                let d = (alpha[i] - old) * y[i];
                for (wj, &v) in w[..dim].iter_mut().zip(x) {
                    *wj += d * v as f64;
                }
                w[dim] += d * b;
            }
        }
        if pg_max - pg_min < cfg.tolerance {
            break;
        }
    }
    let bias = w[dim] * b;
    w.truncate(dim);
    Ok(SvmModel {
        weights: w,
        bias,
        negatives_used: labels.iter().filter(|&&l| !l).count(),
        hard_negatives_added: 0,
    })
}

/// Fits on the positives and a seeded sample of `negative_pool`, then for each
/// hard-negative round rescores the whole pool, adds every unused negative scoring
/// above the threshold and refits.
pub fn train_svm(positives: &[&[f32]], negative_pool: &[&[f32]], cfg: &SvmConfig) -> Result<SvmModel> {
    if positives.is_empty() || negative_pool.is_empty() {
        return Err(Error::invalid("svm training needs at least one positive and one negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut in_set = vec![false; negative_pool.len()];
    if negative_pool.len() <= cfg.initial_negatives {
        in_set.iter_mut().for_each(|v| *v = true);
    } else {
        for i in index::sample(&mut rng, negative_pool.len(), cfg.initial_negatives.max(1)) {
            in_set[i] = true;
        }
    }
    let fit = |in_set: &[bool]| {
        let mut feats: Vec<&[f32]> = positives.to_vec();
        let mut labels = vec![true; positives.len()];
        for (f, _) in negative_pool.iter().zip(in_set).filter(|(_, &u)| u) {
            feats.push(f);
            labels.push(false);
        }
        fit_linear_svm(&feats, &labels, cfg)
    };
    let mut model = fit(&in_set)?;
    let mut added = 0;
    for _ in 0..cfg.hard_negative_rounds {
        let mut any = false;
        for (i, f) in negative_pool.iter().enumerate() {
            if !in_set[i] && model.score(f) > cfg.hard_negative_threshold {
                in_set[i] = true;
                added += 1;
                any = true;
            }
        }
        if !any {
            break;
        }
        model = fit(&in_set)?;
    }
    model.hard_negatives_added = added;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        while xs.len() < n {
            let x: f32 = rng.random_range(-3.0..3.0);
            let y: f32 = rng.random_range(-3.0..3.0);
            // label by the line x + 2y = 0.5, leaving a gap of width 0.4
            let m = x + 2.0 * y - 0.5;
            if m.abs() < 0.4 {
                continue;
            }
            xs.push(vec![x, y]);
            ys.push(m > 0.0);
        }
        (xs, ys)
    }

    #[test]
    fn separable_data_fits_with_margin() {
        let (xs, ys) = separable(200, 3);
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let cfg = SvmConfig {
            c: 100.0,
            positive_weight: 1.0,
            max_epochs: 5000,
            tolerance: 1e-6,
            ..SvmConfig::default()
        };
        let m = fit_linear_svm(&refs, &ys, &cfg).unwrap();
        for (x, &y) in refs.iter().zip(&ys) {
            let s = m.score(x);
            assert_eq!(s > 0.0, y);
            let label = if y { 1.0 } else { -1.0 };
            assert!(s * label >= 1.0 - 1e-2, "margin {}", s * label);
        }
    }

    #[test]
    fn single_class_rejected() {
        let a = [1.0f32, 2.0];
        assert!(fit_linear_svm(&[&a], &[true], &SvmConfig::default()).is_err());
        assert!(train_svm(&[&a], &[], &SvmConfig::default()).is_err());
    }

    #[test]
    fn hard_negatives_only_add() {
        let (xs, ys) = separable(300, 8);
        let pos: Vec<&[f32]> = xs.iter().zip(&ys).filter(|(_, &y)| y).map(|(x, _)| x.as_slice()).collect();
        let neg: Vec<&[f32]> = xs.iter().zip(&ys).filter(|(_, &y)| !y).map(|(x, _)| x.as_slice()).collect();
        let cfg = SvmConfig {
            initial_negatives: 10,
            c: 10.0,
            ..SvmConfig::default()
        };
        let m = train_svm(&pos, &neg, &cfg).unwrap();
        assert_eq!(m.negatives_used, 10 + m.hard_negatives_added);
        assert!(m.negatives_used <= neg.len());
        let again = train_svm(&pos, &neg, &cfg).unwrap();
        assert_eq!(m, again);
    }
}
