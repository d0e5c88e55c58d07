//! Image <-> feature-map coordinate arithmetic.
//!
//! With `floor(p/2)` padding on every conv and pool layer, a response at
//! feature cell `x'` is centred at image pixel `S * x'`, where `S` is the
//! product of all strides up to that layer. A window's left/top edge maps to
//! `floor(x/S) + 1` and its right/bottom edge to `ceil(x/S) - 1`.

use std::fmt;

use crate::dataio::Image;
use crate::error::{Error, Result};

/// Conv or pool layer as seen by the coordinate mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeomLayer {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl GeomLayer {
    pub fn new(name: impl Into<String>, kernel: usize, stride: usize, padding: usize) -> Self {
        GeomLayer {
            name: name.into(),
            kernel,
            stride,
            padding,
        }
    }
}

/// Validated layer stack with its cumulative stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureGeometry {
    layers: Vec<GeomLayer>,
    stride: usize,
}

impl FeatureGeometry {
    /// Rejects any layer whose padding is not `floor(kernel/2)`.
    pub fn new(layers: Vec<GeomLayer>) -> Result<Self> {
        for l in &layers {
            if l.stride == 0 {
                return Err(Error::invalid(format!("layer `{}` has zero stride", l.name)));
            }
            if l.padding != l.kernel / 2 {
                return Err(Error::PaddingRule {
                    layer: l.name.clone(),
                    kernel: l.kernel,
                    padding: l.padding,
                });
            }
        }
        let stride = stride_product(&layers);
        Ok(FeatureGeometry { layers, stride })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn layers(&self) -> &[GeomLayer] {
        &self.layers
    }

    /// Feature-map size for an image size, `None` if a layer collapses it.
    pub fn map_size(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let (mut w, mut h) = (width, height);
        for l in &self.layers {
            w = crate::ops::conv::output_side(w, l.kernel, l.stride, l.padding)?;
            h = crate::ops::conv::output_side(h, l.kernel, l.stride, l.padding)?;
        }
        Some((w, h))
    }
}

pub fn stride_product(layers: &[GeomLayer]) -> usize {
    layers.iter().map(|l| l.stride).product()
}

/// Image coordinate of the receptive-field centre of feature cell `x`.
pub fn receptive_center(x: usize, stride: usize) -> usize {
    stride * x
}

/// Axis-aligned image rectangle `[x0, x1) x [y0, y1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl WindowRect {
    pub const fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        WindowRect { x0, y0, x1, y1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1 <= self.x0 || self.y1 <= self.y0 || self.x0 < 0 || self.y0 < 0 {
            return Err(Error::invalid(format!("degenerate window {self}")));
        }
        Ok(())
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    /// Intersection with `[0, width) x [0, height)`; `None` if empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<WindowRect> {
        let r = WindowRect {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(width as i64),
            y1: self.y1.min(height as i64),
        };
        (r.x1 > r.x0 && r.y1 > r.y0).then_some(r)
    }

    /// Mirror image of this window in an image of the given width.
    pub fn flip_horizontal(&self, image_width: usize) -> WindowRect {
        let w = image_width as i64;
        WindowRect {
            x0: w - self.x1,
            y0: self.y0,
            x1: w - self.x0,
            y1: self.y1,
        }
    }

    /// Scales all coordinates by `f`, rounding half up, keeping at least one pixel.
    pub fn scaled(&self, f: f64) -> WindowRect {
        let r = |v: i64| (v as f64 * f + 0.5).floor() as i64;
        let (x0, y0) = (r(self.x0), r(self.y0));
        WindowRect {
            x0,
            y0,
            x1: r(self.x1).max(x0 + 1),
            y1: r(self.y1).max(y0 + 1),
        }
    }
}

impl fmt::Display for WindowRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})x[{},{})", self.x0, self.x1, self.y0, self.y1)
    }
}

/// Inclusive feature-cell rectangle `[fx0, fx1] x [fy0, fy1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureRect {
    pub fx0: usize,
    pub fy0: usize,
    pub fx1: usize,
    pub fy1: usize,
}

impl FeatureRect {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.fy0..self.fy1 + 1
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.fx0..self.fx1 + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.fx0..=self.fx1).contains(&x) && (self.fy0..=self.fy1).contains(&y)
    }
}

/// `floor(x/S) + 1`.
pub fn project_left(x: i64, stride: usize) -> i64 {
    x.div_euclid(stride as i64) + 1
}

/// `ceil(x/S) - 1`.
pub fn project_right(x: i64, stride: usize) -> i64 {
    let s = stride as i64;
    -((-x).div_euclid(s)) - 1
}

/// Projects an image window onto a `map_w x map_h` feature map with cumulative stride `stride`.
///
/// The projected edges are clamped into the map. A left or top edge on the image
/// border maps to the border cell, mirroring how the right/bottom edge at the
/// border reaches the last cell. A window too small to span a cell after
/// projection collapses to the single cell at its left/top edge.
pub fn map_window(win: &WindowRect, stride: usize, map_w: usize, map_h: usize) -> Result<FeatureRect> {
    if stride == 0 || map_w == 0 || map_h == 0 {
        return Err(Error::invalid("map_window needs a positive stride and a non-empty map"));
    }
    if win.x1 <= win.x0 || win.y1 <= win.y0 {
        return Err(Error::invalid(format!("degenerate window {win}")));
    }
    let (img_w, img_h) = ((map_w * stride) as i64, (map_h * stride) as i64);
    if win.x1 <= 0 || win.y1 <= 0 || win.x0 >= img_w || win.y0 >= img_h {
        return Err(Error::WindowOutside(win.to_string()));
    }
    let axis = |lo: i64, hi: i64, cells: usize| -> (usize, usize) {
        let last = cells as i64 - 1;
        let a = if lo <= 0 { 0 } else { project_left(lo, stride).clamp(0, last) };
        let b = project_right(hi, stride).clamp(0, last);
        (a as usize, b.max(a) as usize)
    };
    let (fx0, fx1) = axis(win.x0, win.x1, map_w);
    let (fy0, fy1) = axis(win.y0, win.y1, map_h);
    Ok(FeatureRect { fx0, fy0, fx1, fy1 })
}

/// Side length whose square the scaled window area should approach.
pub const DETECTION_TARGET_SIDE: usize = 224;

/// Picks the scale whose resize brings the window's area closest to `target_side^2`.
/// Ties go to the smaller scale.
pub fn select_scale(win: &WindowRect, image_size: (usize, usize), scales: &[usize], target_side: usize) -> Result<usize> {
    let min_side = image_size.0.min(image_size.1);
    if min_side == 0 {
        return Err(Error::invalid("select_scale needs a non-empty image"));
    }
    let mut sorted = scales.to_vec();
    sorted.sort_unstable();
    let target = (target_side * target_side) as f64;
    let mut best: Option<(usize, f64)> = None;
    for s in sorted {
        let f = s as f64 / min_side as f64;
        let area = (f * win.width() as f64) * (f * win.height() as f64);
        let d = (area - target).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((s, d));
        }
    }
    best.map(|(s, _)| s).ok_or_else(|| Error::invalid("select_scale needs at least one scale"))
}

/// Output size after resizing so the shorter side equals `s` (long side rounded half up).
pub fn resized_dims(width: usize, height: usize, s: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| (2 * long * s + short) / (2 * short);
    if width <= height {
        (s, scale(height, width))
    } else {
        (scale(width, height), s)
    }
}

/// Resizes so `min(w, h) == s`, preserving aspect ratio.
pub fn resize_image(img: &Image, s: usize) -> Result<Image> {
    if s == 0 {
        return Err(Error::invalid("target side must be >= 1"));
    }
    let (w, h) = resized_dims(img.width(), img.height(), s);
    resize_exact(img, w, h)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_exact(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (width, height) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    let (sw, sh) = (img.width(), img.height());
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let taps = |dst: usize, scale: f64, src_len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xt: Vec<_> = (0..width).map(|x| taps(x, sx, sw)).collect();
    let yt: Vec<_> = (0..height).map(|y| taps(y, sy, sh)).collect();
    let mut data = Vec::with_capacity(img.channels() * width * height);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for &(y0, y1, fy) in &yt {
            for &(x0, x1, fx) in &xt {
                let p = |y: usize, x: usize| plane[y * sw + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Image::new(width, height, img.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zf5() -> Vec<GeomLayer> {
        vec![
            GeomLayer::new("conv1", 7, 2, 3),
            GeomLayer::new("pool1", 3, 2, 1),
            GeomLayer::new("conv2", 5, 2, 2),
            GeomLayer::new("pool2", 3, 2, 1),
            GeomLayer::new("conv3", 3, 1, 1),
            GeomLayer::new("conv4", 3, 1, 1),
            GeomLayer::new("conv5", 3, 1, 1),
        ]
    }

    #[test]
    fn stride_products() {
        assert_eq!(FeatureGeometry::new(zf5()).unwrap().stride(), 16);
        let overfeat = vec![
            GeomLayer::new("conv1", 7, 2, 3),
            GeomLayer::new("pool1", 3, 3, 1),
            GeomLayer::new("conv2", 5, 1, 2),
            GeomLayer::new("pool2", 2, 2, 1),
            GeomLayer::new("conv3", 3, 1, 1),
            GeomLayer::new("conv4", 3, 1, 1),
            GeomLayer::new("conv5", 3, 1, 1),
        ];
        assert_eq!(stride_product(&overfeat), 12);
        let ones = vec![GeomLayer::new("a", 3, 1, 1), GeomLayer::new("b", 5, 1, 2)];
        assert_eq!(stride_product(&ones), 1);
    }

    #[test]
    fn padding_rule_enforced() {
        let err = FeatureGeometry::new(vec![GeomLayer::new("conv1", 7, 2, 2)]).unwrap_err();
        assert!(matches!(err, Error::PaddingRule { kernel: 7, padding: 2, .. }));
    }

    #[test]
    fn centers() {
        assert_eq!(receptive_center(0, 16), 0);
        assert_eq!(receptive_center(7, 16), 112);
        assert_eq!(receptive_center(3, 12), 36);
    }

    #[test]
    fn edge_projection() {
        assert_eq!(project_left(100, 16), 7);
        assert_eq!(project_right(200, 16), 12);
        assert_eq!(project_left(0, 16), 1);
        assert_eq!(project_right(16, 16), 0);
        assert_eq!(project_right(17, 16), 1);
    }

    #[test]
    fn full_image_window_covers_map() {
        let r = map_window(&WindowRect::new(0, 0, 224, 160), 16, 14, 10).unwrap();
        assert_eq!((r.fx0, r.fx1, r.fy0, r.fy1), (0, 13, 0, 9));
        let r = map_window(&WindowRect::new(1, 1, 224, 160), 16, 14, 10).unwrap();
        assert_eq!((r.fx0, r.fy0), (1, 1));
    }

    #[test]
    fn tiny_window_collapses_to_one_cell() {
        let r = map_window(&WindowRect::new(40, 40, 44, 44), 16, 14, 14).unwrap();
        assert_eq!((r.fx0, r.fx1), (3, 3));
        assert_eq!((r.fy0, r.fy1), (3, 3));
    }

    #[test]
    fn outside_window_rejected() {
        assert!(matches!(
            map_window(&WindowRect::new(300, 0, 400, 10), 16, 14, 14),
            Err(Error::WindowOutside(_))
        ));
    }

    #[test]
    fn scale_selection() {
        let scales = [480, 576, 688, 864, 1200];
        let s = select_scale(&WindowRect::new(0, 0, 100, 100), (400, 600), &scales, 224).unwrap();
        assert_eq!(s, 864);
        let s = select_scale(&WindowRect::new(0, 0, 1, 1), (600, 400), &scales, 224).unwrap();
        assert_eq!(s, 1200);
        let s = select_scale(&WindowRect::new(10, 10, 234, 234), (400, 500), &[224, 400, 600], 224).unwrap();
        assert_eq!(s, 400);
        // equidistant: 1x1 window scaled by 1 and 3 -> areas 1 and 9 around target 5
        let s = select_scale(&WindowRect::new(0, 0, 1, 1), (10, 10), &[30, 10], 2).unwrap();
        assert_eq!(s, 10);
    }

    #[test]
    fn resize_dims() {
        assert_eq!(resized_dims(400, 600, 200), (200, 300));
        assert_eq!(resized_dims(341, 256, 224), (298, 224));
        assert_eq!(resized_dims(256, 256, 256), (256, 256));
        // 3 * 5 / 2 = 7.5 rounds up
        assert_eq!(resized_dims(2, 3, 5), (5, 8));
    }

    #[test]
    fn resize_identity_and_halving() {
        let img = Image::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(resize_image(&img, 4).unwrap(), img);
        let half = resize_image(&img, 2).unwrap();
        assert_eq!((half.width(), half.height()), (2, 2));
        // each output pixel averages a 2x2 block
        assert_eq!(half.plane(0), &[2.5, 4.5, 10.5, 12.5]);
        let tall = Image::new(400, 600, 3, vec![0.0; 400 * 600 * 3]).unwrap();
        let r = resize_image(&tall, 200).unwrap();
        assert_eq!((r.width(), r.height(), r.channels()), (200, 300, 3));
    }
}
