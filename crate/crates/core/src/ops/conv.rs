use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Square-kernel convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Kernel `p` with `floor(p/2)` padding.
    pub fn same(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self::new(out_channels, kernel, stride, kernel / 2)
    }

    /// Output side for an input side, `None` if the kernel does not fit.
    pub fn output_side(&self, input: usize) -> Option<usize> {
        output_side(input, self.kernel, self.stride, self.padding)
    }
}

pub(crate) fn output_side(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Half-open range of output indices whose tap at kernel offset `k` lands inside the input.
#[inline]
pub(crate) fn valid_outputs(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < input
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if input + pad <= k {
        return (lo, lo);
    }
    let hi = ((input + pad - k - 1) / stride + 1).min(out);
    (lo, hi.max(lo))
}

fn check_conv(input: Shape, weights: Shape, bias_len: usize, spec: &ConvSpec) -> Result<(usize, usize)> {
    if spec.stride == 0 || spec.kernel == 0 {
        return Err(Error::invalid("convolution kernel and stride must be positive"));
    }
    if weights.batch != spec.out_channels {
        return Err(Error::shape("conv", "weight out-channels", weights.batch, spec.out_channels));
    }
    if weights.channels != input.channels {
        return Err(Error::shape("conv", "input channels", input.channels, weights.channels));
    }
    if weights.height != spec.kernel || weights.width != spec.kernel {
        return Err(Error::shape("conv", "kernel size", weights.height, spec.kernel));
    }
    if bias_len != spec.out_channels {
        return Err(Error::shape("conv", "bias length", bias_len, spec.out_channels));
    }
    let oh = spec
        .output_side(input.height)
        .ok_or_else(|| Error::shape("conv", "padded input height", input.height + 2 * spec.padding, spec.kernel))?;
    let ow = spec
        .output_side(input.width)
        .ok_or_else(|| Error::shape("conv", "padded input width", input.width + 2 * spec.padding, spec.kernel))?;
    Ok((oh, ow))
}

fn widen<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Cross-correlation plus bias.
pub fn conv_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T], spec: &ConvSpec) -> Result<Tensor<T>> {
    let is = input.shape();
    let (oh, ow) = check_conv(is, weights.shape(), bias.len(), spec)?;
    let (c, ih, iw) = (is.channels, is.height, is.width);
    let (k, p, s, pad) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let w64 = widen(weights.data());
    let b64 = widen(bias);

    let items: Vec<Vec<T>> = (0..is.batch)
        .into_par_iter()
        .map(|n| {
            let inp = widen(input.item(n));
            let mut out = Vec::with_capacity(k * oh * ow);
            let mut acc = vec![0.0f64; oh * ow];
            for oc in 0..k {
                acc.fill(b64[oc]);
                for ic in 0..c {
                    let plane = &inp[ic * ih * iw..(ic + 1) * ih * iw];
                    for ky in 0..p {
                        let (oy0, oy1) = valid_outputs(oh, ih, ky, s, pad);
                        for kx in 0..p {
                            let wv = w64[((oc * c + ic) * p + ky) * p + kx];
                            let (ox0, ox1) = valid_outputs(ow, iw, kx, s, pad);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - pad;
                                let row = &plane[iy * iw..(iy + 1) * iw];
                                let dst = &mut acc[oy * ow + ox0..oy * ow + ox1];
                                let start = ox0 * s + kx - pad;
                                if s == 1 {
                                    for (d, v) in dst.iter_mut().zip(&row[start..start + (ox1 - ox0)]) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for (j, d) in dst.iter_mut().enumerate() {
                                        *d += wv * row[start + j * s];
                                    }
                                }
                            }
                        }
                    }
                }
                out.extend(acc.iter().map(|&v| T::from_f64(v)));
            }
            out
        })
        .collect();

    Tensor::from_vec(Shape::new(is.batch, k, oh, ow), items.concat())
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv_backward<T: Real>(
    grad_out: &Tensor<T>,
    saved_input: Option<&Tensor<T>>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let input = saved_input.ok_or_else(|| Error::StaleActivations("conv input was not saved".into()))?;
    let is = input.shape();
    let (oh, ow) = check_conv(is, weights.shape(), spec.out_channels, spec)?;
    let gs = grad_out.shape();
    if gs != Shape::new(is.batch, spec.out_channels, oh, ow) {
        return Err(Error::shape("conv_backward", "grad_out length", gs.numel(), is.batch * spec.out_channels * oh * ow));
    }
    let (c, ih, iw) = (is.channels, is.height, is.width);
    let (k, p, s, pad) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let w64 = widen(weights.data());

    let per_item: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..is.batch)
        .into_par_iter()
        .map(|n| {
            let inp = widen(input.item(n));
            let g = widen(grad_out.item(n));
            let mut gi = vec![0.0f64; c * ih * iw];
            let mut gw = vec![0.0f64; k * c * p * p];
            let mut gb = vec![0.0f64; k];
            for oc in 0..k {
                let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                gb[oc] = gplane.iter().sum();
                for ic in 0..c {
                    let plane = &inp[ic * ih * iw..(ic + 1) * ih * iw];
                    let gin = &mut gi[ic * ih * iw..(ic + 1) * ih * iw];
                    for ky in 0..p {
                        let (oy0, oy1) = valid_outputs(oh, ih, ky, s, pad);
                        for kx in 0..p {
                            let widx = ((oc * c + ic) * p + ky) * p + kx;
                            let wv = w64[widx];
                            let (ox0, ox1) = valid_outputs(ow, iw, kx, s, pad);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let mut wacc = 0.0f64;
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - pad;
                                let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                                let start = ox0 * s + kx - pad;
                                let row = &plane[iy * iw..(iy + 1) * iw];
                                let grow_in = &mut gin[iy * iw..(iy + 1) * iw];
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ix = start + j * s;
                                    wacc += gv * row[ix];
                                    grow_in[ix] += wv * gv;
                                }
                            }
                            gw[widx] += wacc;
                        }
                    }
                }
            }
            (gi, gw, gb)
        })
        .collect();

    let mut gw = vec![0.0f64; k * c * p * p];
    let mut gb = vec![0.0f64; k];
    let mut gi = Vec::with_capacity(is.numel());
    for (item_gi, item_gw, item_gb) in per_item {
        gi.extend(item_gi.into_iter().map(T::from_f64));
        for (a, b) in gw.iter_mut().zip(item_gw) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(item_gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(is, gi)?,
        weights: Tensor::from_vec(weights.shape(), gw.into_iter().map(T::from_f64).collect())?,
        bias: gb.into_iter().map(T::from_f64).collect(),
    })
}
