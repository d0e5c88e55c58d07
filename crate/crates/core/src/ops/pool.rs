use crate::error::{Error, Result};
use crate::ops::conv::output_side;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolSpec {
    /// Window (height, width).
    pub window: (usize, usize),
    pub stride: (usize, usize),
    /// Padding per side (rows, columns); padded cells never win.
    pub padding: (usize, usize),
}

impl PoolSpec {
    pub fn new(window: (usize, usize), stride: (usize, usize)) -> Self {
        PoolSpec {
            window,
            stride,
            padding: (0, 0),
        }
    }

    /// Square `p` window with `floor(p/2)` padding.
    pub fn same(kernel: usize, stride: usize) -> Self {
        PoolSpec {
            window: (kernel, kernel),
            stride: (stride, stride),
            padding: (kernel / 2, kernel / 2),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.padding.0 >= self.window.0 || self.padding.1 >= self.window.1 {
            return None;
        }
        Some((
            output_side(h, self.window.0, self.stride.0, self.padding.0)?,
            output_side(w, self.window.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Flat input index of the winning cell for every pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxMap {
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub indices: Vec<usize>,
}

pub fn maxpool_forward<T: Real>(input: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, ArgmaxMap)> {
    let (wh, ww) = spec.window;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    if wh == 0 || ww == 0 {
        return Err(Error::invalid("max-pool window must be non-empty"));
    }
    if sh == 0 || sw == 0 {
        return Err(Error::invalid("max-pool stride must be positive"));
    }
    let is = input.shape();
    let (oh, ow) = spec.output_size(is.height, is.width).ok_or_else(|| {
        Error::invalid(format!(
            "max-pool window {wh}x{ww} (padding {ph},{pw}) does not fit input {}x{}",
            is.height, is.width
        ))
    })?;
    let os = Shape::new(is.batch, is.channels, oh, ow);
    let mut out = Vec::with_capacity(os.numel());
    let mut idx = Vec::with_capacity(os.numel());
    let data = input.data();
    for n in 0..is.batch {
        for c in 0..is.channels {
            let base = (n * is.channels + c) * is.plane();
            for oy in 0..oh {
                let y0 = (oy * sh).saturating_sub(ph);
                let y1 = (oy * sh + wh - ph).min(is.height);
                for ox in 0..ow {
                    let x0 = (ox * sw).saturating_sub(pw);
                    let x1 = (ox * sw + ww - pw).min(is.width);
                    let mut best = base + y0 * is.width + x0;
                    let mut best_v = data[best];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let i = base + y * is.width + x;
                            if data[i] > best_v {
                                best_v = data[i];
                                best = i;
                            }
                        }
                    }
                    out.push(best_v);
                    idx.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(os, out)?,
        ArgmaxMap {
            input_shape: is,
            output_shape: os,
            indices: idx,
        },
    ))
}

/// Routes each upstream gradient to its argmax cell, accumulating on overlap.
pub fn maxpool_backward<T: Real>(grad_out: &Tensor<T>, argmax: &ArgmaxMap, input_shape: Shape) -> Result<Tensor<T>> {
    if argmax.input_shape != input_shape {
        return Err(Error::StaleActivations(format!(
            "argmax map was built for input {} but backward asked for {}",
            argmax.input_shape, input_shape
        )));
    }
    if grad_out.shape() != argmax.output_shape {
        return Err(Error::StaleActivations(format!(
            "grad_out {} does not match pooled output {}",
            grad_out.shape(),
            argmax.output_shape
        )));
    }
    let mut acc = vec![0.0f64; input_shape.numel()];
    for (&i, g) in argmax.indices.iter().zip(grad_out.data()) {
        acc[i] += g.as_f64();
    }
    Tensor::from_vec(input_shape, acc.into_iter().map(T::from_f64).collect())
}
