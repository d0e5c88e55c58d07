use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Fully connected layer. `input` is flattened per batch item; `weights` is (out, in, 1, 1).
pub fn fc_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let is = input.shape();
    let ws = weights.shape();
    let (out, din) = (ws.batch, ws.item_len());
    if is.item_len() != din {
        return Err(Error::shape("fc", "input length", is.item_len(), din));
    }
    if bias.len() != out {
        return Err(Error::shape("fc", "bias length", bias.len(), out));
    }
    let w = weights.data();
    let mut data = Vec::with_capacity(is.batch * out);
    for n in 0..is.batch {
        let x = input.item(n);
        for o in 0..out {
            let row = &w[o * din..(o + 1) * din];
            let mut acc = bias[o].as_f64();
            for (a, b) in row.iter().zip(x) {
                acc += a.as_f64() * b.as_f64();
            }
            data.push(T::from_f64(acc));
        }
    }
    Tensor::from_vec(Shape::new(is.batch, out, 1, 1), data)
}

#[derive(Clone, Debug)]
pub struct FcGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn fc_backward<T: Real>(grad_out: &Tensor<T>, saved_input: Option<&Tensor<T>>, weights: &Tensor<T>) -> Result<FcGrads<T>> {
    let input = saved_input.ok_or_else(|| Error::StaleActivations("fc input was not saved".into()))?;
    let is = input.shape();
    let ws = weights.shape();
    let (out, din) = (ws.batch, ws.item_len());
    if is.item_len() != din {
        return Err(Error::shape("fc_backward", "input length", is.item_len(), din));
    }
    if grad_out.shape() != Shape::new(is.batch, out, 1, 1) {
        return Err(Error::shape("fc_backward", "grad_out length", grad_out.len(), is.batch * out));
    }
    let w = weights.data();
    let mut gw = vec![0.0f64; out * din];
    let mut gb = vec![0.0f64; out];
    let mut gi = Vec::with_capacity(is.numel());
    let mut gx = vec![0.0f64; din];
    for n in 0..is.batch {
        let x = input.item(n);
        let g = grad_out.item(n);
        gx.fill(0.0);
        for o in 0..out {
            let go = g[o].as_f64();
            gb[o] += go;
            if go == 0.0 {
                continue;
            }
            let wrow = &w[o * din..(o + 1) * din];
            let gwrow = &mut gw[o * din..(o + 1) * din];
            for i in 0..din {
                gwrow[i] += go * x[i].as_f64();
                gx[i] += go * wrow[i].as_f64();
            }
        }
        gi.extend(gx.iter().map(|&v| T::from_f64(v)));
    }
    Ok(FcGrads {
        input: Tensor::from_vec(is, gi)?,
        weights: Tensor::from_vec(ws, gw.into_iter().map(T::from_f64).collect())?,
        bias: gb.into_iter().map(T::from_f64).collect(),
    })
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != saved_input.shape() {
        return Err(Error::shape("relu_backward", "grad_out length", grad_out.len(), saved_input.len()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(saved_input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(saved_input.shape(), data)
}

/// Row-wise softmax over the flattened item.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.batch {
        out.extend(softmax_row(logits.item(n)).into_iter().map(T::from_f64));
    }
    Tensor::from_vec(s, out).expect("same shape")
}

pub(crate) fn softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    let classes = s.item_len();
    if labels.len() != s.batch {
        return Err(Error::shape("softmax_cross_entropy", "label count", labels.len(), s.batch));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s.numel());
    let scale = 1.0 / s.batch.max(1) as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.item(n);
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        for (c, v) in row.iter().enumerate() {
            let p = (v.as_f64() - lse).exp();
            let t = if c == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p - t) * scale));
        }
    }
    Ok((loss * scale, Tensor::from_vec(s, grad)?))
}

/// Inverted dropout. Returns the output and the per-element multiplier applied
/// (empty in eval mode or at rate zero, where the op is the identity).
pub fn dropout<T: Real, R: Rng + ?Sized>(input: &Tensor<T>, rate: f64, train: bool, rng: &mut R) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok((input.clone(), Vec::new()));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::from_vec(input.shape(), data)?, mask))
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    if mask.is_empty() {
        return Ok(grad_out.clone());
    }
    if mask.len() != grad_out.len() {
        return Err(Error::shape("dropout_backward", "mask length", mask.len(), grad_out.len()));
    }
    let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(grad_out.shape(), data)
}
