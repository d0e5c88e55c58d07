//! Spatial pyramid pooling.
//!
//! A pyramid of `n x n` grids is laid over a feature map of any size and each
//! bin is max-pooled per channel, so the pooled vector has `k * M` entries for
//! `k` channels and `M = sum(n^2)` bins regardless of the map's height and width.
//!
//! Bin boundaries use floor on the left/top edge and ceiling on the right/bottom
//! edge, read as half-open intervals over 0-based cell indices:
//! columns `[floor((i-1)w/n), ceil(iw/n))` for the 1-based bin column `i`.
//! This tiles `[0, w)` exactly and keeps every bin non-empty, even when `w < n`
//! (bins then overlap).
//!
//! Output order is fixed: level, then bin in row-major order, then channel.
//! Downstream fc weights depend on it.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::ops::pool::{maxpool_forward, PoolSpec};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PyramidSpec {
    levels: Vec<usize>,
}

impl PyramidSpec {
    pub fn new(levels: impl Into<Vec<usize>>) -> Result<Self> {
        let levels = levels.into();
        if levels.is_empty() {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        if levels.contains(&0) {
            return Err(Error::invalid("pyramid grid sizes must be >= 1"));
        }
        Ok(PyramidSpec { levels })
    }

    /// `{6x6, 3x3, 2x2, 1x1}`, 50 bins.
    pub fn standard() -> Self {
        PyramidSpec {
            levels: vec![6, 3, 2, 1],
        }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Total bin count `M`.
    pub fn bins(&self) -> usize {
        self.levels.iter().map(|n| n * n).sum()
    }

    pub fn output_len(&self, channels: usize) -> usize {
        channels * self.bins()
    }

    /// Parses `"6,3,2,1"`.
    pub fn parse(text: &str) -> Result<Self> {
        let levels = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad pyramid level `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

impl std::fmt::Display for PyramidSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.levels.iter().map(|n| n.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// One pyramid bin as half-open row and column cell intervals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinRange {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

/// Fixed-size sliding-window realisation of one pyramid level on an `a x a` map:
/// window `ceil(a/n)`, stride `floor(a/n)`.
pub fn sliding_pool_params(a: usize, n: usize) -> Result<(usize, usize)> {
    if n == 0 || n > a {
        return Err(Error::invalid(format!(
            "sliding pyramid pooling needs 1 <= n <= a, got n={n}, a={a}"
        )));
    }
    Ok((a.div_ceil(n), a / n))
}

/// Half-open interval of the 1-based bin `i` of `n` over `len` cells.
#[inline]
pub fn bin_interval(i: usize, n: usize, len: usize) -> Range<usize> {
    ((i - 1) * len / n)..(i * len).div_ceil(n)
}

/// Bin `(i, j)` (1-based column, row) of an `n x n` grid on a `w x h` map.
pub fn bin_range(i: usize, j: usize, n: usize, w: usize, h: usize) -> Result<BinRange> {
    if n == 0 || i == 0 || j == 0 || i > n || j > n {
        return Err(Error::invalid(format!("bin ({i},{j}) outside a {n}x{n} grid")));
    }
    if w == 0 || h == 0 {
        return Err(Error::invalid("bin_range needs a non-empty feature map"));
    }
    let cols = bin_interval(i, n, w);
    let rows = bin_interval(j, n, h);
    Ok(BinRange {
        r0: rows.start,
        r1: rows.end,
        c0: cols.start,
        c1: cols.end,
    })
}

/// Winning cell per pooled entry, as a flat index into the pooled feature map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SppArgmax {
    pub input_shape: Shape,
    pub indices: Vec<usize>,
}

/// Pools every item of `featmap` into a `(batch, k*M, 1, 1)` tensor.
pub fn spp_forward<T: Real>(featmap: &Tensor<T>, pyr: &PyramidSpec) -> Result<(Tensor<T>, SppArgmax)> {
    let s = featmap.shape();
    if s.height == 0 || s.width == 0 || s.channels == 0 {
        return Err(Error::invalid(format!("spp on empty feature map {s}")));
    }
    let len = pyr.output_len(s.channels);
    let mut out = Vec::with_capacity(s.batch * len);
    let mut idx = Vec::with_capacity(s.batch * len);
    for n in 0..s.batch {
        pool_region_into(featmap, n, 0..s.height, 0..s.width, pyr, &mut out, &mut idx);
    }
    Ok((
        Tensor::from_vec(Shape::new(s.batch, len, 1, 1), out)?,
        SppArgmax {
            input_shape: s,
            indices: idx,
        },
    ))
}

/// Pools the sub-rectangle `rows x cols` of batch item `item` as if it were a
/// feature map of its own. Argmax indices refer to the full `featmap`.
pub fn spp_forward_region<T: Real>(
    featmap: &Tensor<T>,
    item: usize,
    rows: Range<usize>,
    cols: Range<usize>,
    pyr: &PyramidSpec,
) -> Result<(Vec<T>, Vec<usize>)> {
    let s = featmap.shape();
    if item >= s.batch {
        return Err(Error::shape("spp_forward_region", "batch item", item, s.batch));
    }
    if rows.start >= rows.end || cols.start >= cols.end || rows.end > s.height || cols.end > s.width {
        return Err(Error::invalid(format!(
            "region rows {rows:?} cols {cols:?} invalid for map {}x{}",
            s.height, s.width
        )));
    }
    let len = pyr.output_len(s.channels);
    let mut out = Vec::with_capacity(len);
    let mut idx = Vec::with_capacity(len);
    pool_region_into(featmap, item, rows, cols, pyr, &mut out, &mut idx);
    Ok((out, idx))
}

fn pool_region_into<T: Real>(
    featmap: &Tensor<T>,
    item: usize,
    rows: Range<usize>,
    cols: Range<usize>,
    pyr: &PyramidSpec,
    out: &mut Vec<T>,
    idx: &mut Vec<usize>,
) {
    let s = featmap.shape();
    let (h, w) = (rows.end - rows.start, cols.end - cols.start);
    let data = featmap.data();
    for &n in pyr.levels() {
        for j in 1..=n {
            let r = bin_interval(j, n, h);
            for i in 1..=n {
                let c = bin_interval(i, n, w);
                for ch in 0..s.channels {
                    let plane = (item * s.channels + ch) * s.plane();
                    let mut best = plane + (rows.start + r.start) * s.width + cols.start + c.start;
                    let mut best_v = data[best];
                    for y in r.clone() {
                        let row = plane + (rows.start + y) * s.width + cols.start;
                        for x in c.clone() {
                            if data[row + x] > best_v {
                                best_v = data[row + x];
                                best = row + x;
                            }
                        }
                    }
                    out.push(best_v);
                    idx.push(best);
                }
            }
        }
    }
}

/// Sliding-window realisation on a square map, one max-pool layer per level.
/// Produces the same ordering as [`spp_forward`]; fails when a level does not
/// yield exactly `n x n` windows.
pub fn spp_forward_sliding<T: Real>(featmap: &Tensor<T>, pyr: &PyramidSpec) -> Result<Tensor<T>> {
    let s = featmap.shape();
    if s.height != s.width {
        return Err(Error::invalid("sliding pyramid pooling expects a square map"));
    }
    let len = pyr.output_len(s.channels);
    let mut out = vec![T::zero(); s.batch * len];
    let mut offset = 0;
    for &n in pyr.levels() {
        let (win, stride) = sliding_pool_params(s.height, n)?;
        let (pooled, _) = maxpool_forward(featmap, &PoolSpec::new((win, win), (stride, stride)))?;
        let ps = pooled.shape();
        if ps.height != n || ps.width != n {
            return Err(Error::invalid(format!(
                "window {win} stride {stride} gives {}x{} bins on a {}-map, not {n}x{n}",
                ps.height, ps.width, s.height
            )));
        }
        for b in 0..s.batch {
            for ch in 0..s.channels {
                for bin in 0..n * n {
                    out[b * len + offset + bin * s.channels + ch] = pooled.at(b, ch, bin / n, bin % n);
                }
            }
        }
        offset += n * n * s.channels;
    }
    Tensor::from_vec(Shape::new(s.batch, len, 1, 1), out)
}

/// Adjoint of [`spp_forward`]: each pooled gradient lands on its argmax cell.
pub fn spp_backward<T: Real>(grad_out: &Tensor<T>, argmax: &SppArgmax, featmap_shape: Shape) -> Result<Tensor<T>> {
    if argmax.input_shape != featmap_shape {
        return Err(Error::StaleActivations(format!(
            "spp argmax was built for {} but backward asked for {}",
            argmax.input_shape, featmap_shape
        )));
    }
    if grad_out.len() != argmax.indices.len() {
        return Err(Error::shape("spp_backward", "grad_out length", grad_out.len(), argmax.indices.len()));
    }
    let mut acc = vec![0.0f64; featmap_shape.numel()];
    for (&i, g) in argmax.indices.iter().zip(grad_out.data()) {
        acc[i] += g.as_f64();
    }
    Tensor::from_vec(featmap_shape, acc.into_iter().map(T::from_f64).collect())
}
