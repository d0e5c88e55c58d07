use crate::dataio::{subtract_mean, Image, DEFAULT_MEAN};
use crate::error::{Error, Result};
use crate::geometry::{map_window, resize_image, select_scale, FeatureRect, WindowRect};
use crate::netgraph::{trunk_forward, NetworkSpec, SharedParams};
use crate::spp::{spp_forward_region, PyramidSpec};
use crate::tensor::Tensor;

/// How region features are pooled from an image's feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionConfig {
    /// Candidate short-side lengths; each window uses the one selected by area.
    pub scales: Vec<usize>,
    /// Side of the square the scaled window should best match.
    pub target_side: usize,
    /// Pyramid used for region pooling; defaults to the network's own.
    pub pyramid: Option<PyramidSpec>,
    pub mean: f32,
    pub l2_normalize: bool,
}

impl RegionConfig {
    pub fn new(scales: Vec<usize>, target_side: usize) -> Self {
        RegionConfig {
            scales,
            target_side,
            pyramid: None,
            mean: DEFAULT_MEAN,
            l2_normalize: true,
        }
    }
}

/// Conv feature maps of one image, one per configured scale.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    image_size: (usize, usize),
    stride: usize,
    maps: Vec<(usize, Tensor<f32>)>,
    conv_passes: usize,
}

impl FeatureCache {
    /// Runs the conv trunk once per scale.
    pub fn new(spec: &NetworkSpec, params: &SharedParams, image: &Image, cfg: &RegionConfig) -> Result<Self> {
        if cfg.scales.is_empty() {
            return Err(Error::invalid("region pooling needs at least one scale"));
        }
        let stride = spec.geometry()?.stride();
        let mut scales = cfg.scales.clone();
        scales.sort_unstable();
        scales.dedup();
        let mut maps = Vec::with_capacity(scales.len());
        let mut conv_passes = 0;
        for s in scales {
            let resized = resize_image(image, s)?;
            let map = trunk_forward(spec, params, &subtract_mean(&resized, cfg.mean))?;
            conv_passes += 1;
            maps.push((s, map));
        }
        Ok(FeatureCache {
            image_size: (image.width(), image.height()),
            stride,
            maps,
            conv_passes,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of trunk forward passes run so far.
    pub fn conv_passes(&self) -> usize {
        self.conv_passes
    }

    pub fn map(&self, scale: usize) -> Option<&Tensor<f32>> {
        self.maps.iter().find(|(s, _)| *s == scale).map(|(_, m)| m)
    }

    pub fn scales(&self) -> Vec<usize> {
        self.maps.iter().map(|(s, _)| *s).collect()
    }

    /// Scale selected for `win` and the feature-map rectangle it maps to.
    pub fn locate(&self, win: &WindowRect, target_side: usize) -> Result<(usize, FeatureRect)> {
        let (w, h) = self.image_size;
        let clamped = win.clamp_to(w, h).ok_or_else(|| Error::WindowOutside(win.to_string()))?;
        let s = select_scale(&clamped, self.image_size, &self.scales(), target_side)?;
        let map = self.map(s).expect("selected scale is cached");
        let f = s as f64 / w.min(h) as f64;
        let shape = map.shape();
        let rect = map_window(&clamped.scaled(f), self.stride, shape.width, shape.height)?;
        Ok((s, rect))
    }
}

/// Pooled feature of one window, length `k * M` for a `k`-channel trunk and `M` bins.
pub fn region_feature(cache: &FeatureCache, spec: &NetworkSpec, win: &WindowRect, cfg: &RegionConfig) -> Result<Vec<f32>> {
    let pyr = match (&cfg.pyramid, spec.pyramid()) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => return Err(Error::invalid("no pyramid configured for region pooling")),
    };
    let (s, rect) = cache.locate(win, cfg.target_side)?;
    let map = cache.map(s).expect("selected scale is cached");
    let (mut v, _) = spp_forward_region(map, 0, rect.rows(), rect.cols(), pyr)?;
    if cfg.l2_normalize {
        l2_normalize(&mut v);
    }
    Ok(v)
}

/// Scales `v` to unit Euclidean norm; the zero vector is left unchanged.
pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x = (*x as f64 / norm) as f32;
        }
    }
}
