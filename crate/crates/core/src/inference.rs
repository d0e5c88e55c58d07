//! Test-time prediction: full-image features, standard crop views and
//! multi-view testing where every view is pooled from shared feature maps.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::dataio::{subtract_mean, Image};
use crate::detection::l2_normalize;
use crate::error::{Error, Result};
use crate::geometry::{map_window, resize_image, resized_dims, WindowRect};
use crate::netgraph::{head_forward, trunk_forward, Mode, NetworkInstance, NetworkSpec, SharedParams};
use crate::ops::softmax;
use crate::spp::spp_forward_region;
use crate::tensor::{Shape, Tensor};

/// A window of the image resized to short side `scale`, optionally mirrored.
///
/// `rect` is in the coordinates of the unflipped resized image; a flipped view
/// shows the mirror image of that crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct View {
    pub scale: usize,
    pub rect: WindowRect,
    pub flip: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ViewSet {
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Distinct `(scale, flip)` combinations, each needing one conv pass.
    pub fn passes(&self) -> BTreeSet<(usize, bool)> {
        self.views.iter().map(|v| (v.scale, v.flip)).collect()
    }
}

fn resized_checked(image_size: (usize, usize), s: usize, view: usize) -> Result<(usize, usize)> {
    let (w, h) = image_size;
    if w == 0 || h == 0 || s == 0 || view == 0 {
        return Err(Error::invalid("image, scale and view sizes must be positive"));
    }
    let (rw, rh) = resized_dims(w, h, s);
    if rw.min(rh) < view {
        return Err(Error::invalid(format!("resized image {rw}x{rh} is smaller than the {view}px view")));
    }
    Ok((rw, rh))
}

fn square(x: usize, y: usize, view: usize) -> WindowRect {
    WindowRect::new(x as i64, y as i64, (x + view) as i64, (y + view) as i64)
}

/// Centre and four corners of the image resized to short side `s`, each with
/// and without flipping: always ten views.
pub fn ten_view_windows(image_size: (usize, usize), s: usize, view: usize) -> Result<ViewSet> {
    let (rw, rh) = resized_checked(image_size, s, view)?;
    let (dx, dy) = (rw - view, rh - view);
    let spots = [(dx / 2, dy / 2), (0, 0), (dx, 0), (0, dy), (dx, dy)];
    let mut views = Vec::with_capacity(10);
    for flip in [false, true] {
        for &(x, y) in &spots {
            views.push(View {
                scale: s,
                rect: square(x, y, view),
                flip,
            });
        }
    }
    Ok(ViewSet { views })
}

/// Per scale: centre, four corners and the four side midpoints, with and without
/// flipping. Windows that coincide (short side equal to the view) are kept once.
pub fn multi_view_windows(image_size: (usize, usize), scales: &[usize], view: usize) -> Result<ViewSet> {
    let mut views = Vec::new();
    for &s in scales {
        let (rw, rh) = resized_checked(image_size, s, view)?;
        let (dx, dy) = (rw - view, rh - view);
        let spots = [
            (dx / 2, dy / 2),
            (0, 0),
            (dx, 0),
            (0, dy),
            (dx, dy),
            (dx / 2, 0),
            (dx / 2, dy),
            (0, dy / 2),
            (dx, dy / 2),
        ];
        for flip in [false, true] {
            for &(x, y) in &spots {
                let v = View {
                    scale: s,
                    rect: square(x, y, view),
                    flip,
                };
                if !views.contains(&v) {
                    views.push(v);
                }
            }
        }
    }
    Ok(ViewSet { views })
}

/// Averaged class probabilities and the number of conv passes spent.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub conv_passes: usize,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn average(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / n).collect()
}

/// Pools every view from the feature map of its `(scale, flip)` pass and
/// averages the softmax outputs. One trunk pass per distinct `(scale, flip)`.
pub fn predict_views(spec: &NetworkSpec, params: &SharedParams, image: &Image, views: &ViewSet, mean: f32) -> Result<Prediction> {
    if views.is_empty() {
        return Err(Error::invalid("no views to predict"));
    }
    let pyr = spec.pyramid().ok_or_else(|| Error::invalid("network has no pyramid pooling layer"))?;
    let stride = spec.geometry()?.stride();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(views.len());
    let mut conv_passes = 0;
    for (scale, flip) in views.passes() {
        let mut resized = resize_image(image, scale)?;
        let rw = resized.width();
        if flip {
            resized = resized.flip_horizontal();
        }
        let map = trunk_forward(spec, params, &subtract_mean(&resized, mean))?;
        conv_passes += 1;
        let sh = map.shape();
        let group: Vec<&View> = views.views.iter().filter(|v| v.scale == scale && v.flip == flip).collect();
        let mut pooled = Vec::with_capacity(group.len() * pyr.output_len(sh.channels));
        for v in &group {
            let rect = if flip { v.rect.flip_horizontal(rw) } else { v.rect };
            let r = map_window(&rect, stride, sh.width, sh.height)?;
            pooled.extend(spp_forward_region(&map, 0, r.rows(), r.cols(), pyr)?.0);
        }
        let len = pooled.len() / group.len();
        let probs = head_forward(spec, params, &Tensor::from_vec(Shape::new(group.len(), len, 1, 1), pooled)?, true)?;
        for i in 0..group.len() {
            rows.push(probs.item(i).iter().map(|&p| p as f64).collect());
        }
    }
    Ok(Prediction {
        probs: average(&rows),
        conv_passes,
    })
}

/// Crops every view from the resized pixels and runs the whole network on it.
pub fn predict_crops(spec: Arc<NetworkSpec>, params: &SharedParams, image: &Image, views: &ViewSet, mean: f32) -> Result<Prediction> {
    if views.is_empty() {
        return Err(Error::invalid("no views to predict"));
    }
    let mut rows = Vec::with_capacity(views.len());
    let mut conv_passes = 0;
    let mut resized_cache: Option<(usize, Image)> = None;
    for v in &views.views {
        if resized_cache.as_ref().is_none_or(|(s, _)| *s != v.scale) {
            resized_cache = Some((v.scale, resize_image(image, v.scale)?));
        }
        let resized = &resized_cache.as_ref().expect("just filled").1;
        let mut crop = resized.crop(&v.rect)?;
        if v.flip {
            crop = crop.flip_horizontal();
        }
        let inst = NetworkInstance::new(spec.clone(), (crop.height(), crop.width()), params.clone())?;
        let (logits, _) = inst.forward(&subtract_mean(&crop, mean), Mode::Eval)?;
        conv_passes += 1;
        rows.push(softmax(&logits).data().iter().map(|&p| p as f64).collect());
    }
    Ok(Prediction {
        probs: average(&rows),
        conv_passes,
    })
}

/// Resizes to short side `s`, runs one forward pass and returns the activation
/// of `layer` (the pooled representation when `None`).
pub fn full_image_representation(
    spec: Arc<NetworkSpec>,
    params: &SharedParams,
    image: &Image,
    s: usize,
    layer: Option<&str>,
    l2: bool,
    mean: f32,
) -> Result<Vec<f32>> {
    let resized = resize_image(image, s)?;
    let name = match layer {
        Some(l) => l.to_string(),
        None => {
            let i = spec.spp_index().ok_or_else(|| Error::invalid("network has no pyramid pooling layer"))?;
            spec.layers()[i].name.clone()
        }
    };
    let inst = NetworkInstance::new(spec, (resized.height(), resized.width()), params.clone())?;
    let mut v = inst.feature_at(&subtract_mean(&resized, mean), &name)?.into_data();
    if l2 {
        l2_normalize(&mut v);
    }
    Ok(v)
}
